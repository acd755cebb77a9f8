#include <doctest.h>

#include <cmath>
#include <algorithm>
#include <filesystem>
#include <functional>

#include "crp/concepts.hpp"
#include "crp/fixtures.hpp"

using namespace crp;

namespace {

std::filesystem::path scratch(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("crp_test_concepts_" + name);
  std::filesystem::remove_all(p);
  return p;
}

IndexOptions lenet_options(std::size_t workers) {
  IndexOptions o;
  o.layers = {"conv1", "conv2", "fc1"};
  o.targets = {MaximizationTarget::parse("act_max"), MaximizationTarget::parse("rel_sum"),
               MaximizationTarget::parse("rel_max")};
  o.k = 8;
  o.workers = workers;
  return o;
}

ErrorKind kind_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("no error thrown");
  return ErrorKind::usage;
}

}  // namespace

TEST_CASE("target names round-trip") {
  for (const char* n : {"act_sum", "act_max", "rel_sum", "rel_max"}) CHECK(MaximizationTarget::parse(n).name() == n);
  CHECK(MaximizationTarget::parse("act_max").basis == TargetBasis::activation);
  CHECK(MaximizationTarget::parse("rel_sum").aggregation == SpatialReduce::sum);
  CHECK(kind_of([] { MaximizationTarget::parse("grad_sum"); }) == ErrorKind::usage);
}

TEST_CASE("activation scores reduce the layer output") {
  const auto f = make_fixture("lenet_random");
  const auto trace = forward(f.model, f.data.sample(3));
  const auto s = channel_scores(trace, "conv2", MaximizationTarget::parse("act_max"), 0);
  CHECK(s == channel_reduce(trace.at("conv2"), SpatialReduce::max));
}

TEST_CASE("index is independent of the worker count") {
  const auto f = make_fixture("lenet_random");
  const auto a = build_index(f.model, f.data, lenet_options(1));
  const auto b = build_index(f.model, f.data, lenet_options(4));
  CHECK(a.rankings_json() == b.rankings_json());
  for (const auto& [k, m] : a.scores) CHECK(std::ranges::equal(m.data(), b.scores.at(k).data()));
}

TEST_CASE("stored scores equal a per-sample recomputation") {
  const auto f = make_fixture("lenet_random");
  auto opts = lenet_options(2);
  const auto idx = build_index(f.model, f.data, opts);
  CHECK(idx.samples == 200);
  for (std::size_t s = 0; s < idx.samples; s += 17) {
    const auto trace = forward(f.model, f.data.sample(s));
    const std::size_t y = static_cast<std::size_t>((*f.data.labels)[s]);
    CHECK(idx.sample_classes[s] == static_cast<long>(y));
    ConditionSet cond;
    cond.add("fc3", y);
    const auto rt = attribute(trace, cond, InitSpec::logit(y), RuleComposite{});
    for (const auto& l : opts.layers) {
      const auto rs = channel_reduce(rt.at(l), SpatialReduce::sum);
      const auto rm = channel_reduce(rt.at(l), SpatialReduce::max);
      const auto am = channel_reduce(trace.at(l), SpatialReduce::max);
      const std::size_t C = rs.size();
      for (std::size_t c = 0; c < C; ++c) {
        CHECK(idx.matrix(l, "rel_sum")[s * C + c] == doctest::Approx(rs[c]).epsilon(1e-12));
        CHECK(idx.matrix(l, "rel_max")[s * C + c] == doctest::Approx(rm[c]).epsilon(1e-12));
        CHECK(idx.matrix(l, "act_max")[s * C + c] == doctest::Approx(am[c]).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("queries return sorted prefixes of the full ranking") {
  const auto f = make_fixture("lenet_random");
  const auto idx = build_index(f.model, f.data, lenet_options(2));
  const auto r = query_references(idx, "conv2", 5, "rel_max", std::nullopt, 8);
  REQUIRE(r.entries.size() == 8);
  for (std::size_t i = 1; i < r.entries.size(); ++i) {
    const auto& p = r.entries[i - 1];
    const auto& q = r.entries[i];
    CHECK((p.score > q.score || (p.score == q.score && p.sample < q.sample)));
  }
  const auto full = idx.rank("conv2", 5, "rel_max");
  for (std::size_t i = 0; i < 8; ++i) CHECK(full[i].sample == r.entries[i].sample);
  CHECK(query_references(idx, "conv2", 5, "rel_max", std::nullopt, 3).entries.size() == 3);

  CHECK(kind_of([&] { query_references(idx, "conv2", 5, "rel_max", std::nullopt, 9); }) == ErrorKind::usage);
  CHECK(kind_of([&] { query_references(idx, "relu1", 0, "rel_max", std::nullopt, 3); }) == ErrorKind::not_found);
  CHECK(kind_of([&] { query_references(idx, "conv2", 99, "rel_max", std::nullopt, 3); }) == ErrorKind::not_found);
  CHECK(kind_of([&] { query_references(idx, "conv2", 0, "act_sum", std::nullopt, 3); }) == ErrorKind::not_found);
}

TEST_CASE("class filters only return samples conditioned on that class") {
  const auto f = make_fixture("lenet_random");
  auto opts = lenet_options(2);
  SUBCASE("label conditioning") {
    const auto idx = build_index(f.model, f.data, opts);
    const auto r = query_references(idx, "conv1", 1, "rel_sum", 4, 8);
    CHECK_FALSE(r.entries.empty());
    for (const auto& e : r.entries) {
      CHECK(e.cls == 4);
      CHECK((*f.data.labels)[e.sample] == 4);
    }
  }
  SUBCASE("class-conditional index") {
    opts.class_conditional = true;
    opts.layers = {"conv2"};
    const auto idx = build_index(f.model, f.data, opts);
    const auto r = query_references(idx, "conv2", 2, "rel_sum", 7, 8);
    REQUIRE(r.entries.size() == 8);
    for (const auto& e : r.entries) {
      CHECK(e.cls == 7);
      const auto trace = forward(f.model, f.data.sample(e.sample));
      ConditionSet cond;
      cond.add("fc3", 7);
      const auto rt = attribute(trace, cond, InitSpec::logit(7), RuleComposite{});
      CHECK(e.score == doctest::Approx(channel_reduce(rt.at("conv2"), SpatialReduce::sum)[2]).epsilon(1e-12));
    }
  }
}

TEST_CASE("index files round-trip and check fingerprints") {
  const auto f = make_fixture("lenet_random");
  const auto idx = build_index(f.model, f.data, lenet_options(2));
  const auto dir = scratch("roundtrip");
  idx.save(dir);
  const auto back = ReferenceIndex::load(dir);
  CHECK(back.rankings_json() == idx.rankings_json());
  CHECK(back.scores.size() == idx.scores.size());
  back.check_fingerprints(f.model.fingerprint(), f.data.fingerprint());
  const auto other = make_fixture("mlp8");
  CHECK(kind_of([&] { back.check_fingerprints(other.model.fingerprint(), f.data.fingerprint()); }) ==
        ErrorKind::fingerprint);
  CHECK(kind_of([&] { back.check_fingerprints(f.model.fingerprint(), other.data.fingerprint()); }) ==
        ErrorKind::fingerprint);
  std::filesystem::remove_all(dir);
}

TEST_CASE("build_index rejects bad options") {
  const auto f = make_fixture("mlp8");
  IndexOptions o;
  o.layers = {"fc1"};
  o.targets = {MaximizationTarget::parse("rel_sum")};
  o.k = 0;
  CHECK(kind_of([&] { build_index(f.model, f.data, o); }) == ErrorKind::usage);
  o.k = 2;
  o.layers = {"nope"};
  CHECK(kind_of([&] { build_index(f.model, f.data, o); }) == ErrorKind::not_found);
  o.layers = {"fc1"};
  o.targets.push_back(MaximizationTarget::parse("rel_sum"));
  CHECK(kind_of([&] { build_index(f.model, f.data, o); }) == ErrorKind::usage);
}

TEST_CASE("a concept used by one class ranks that class first") {
  const auto f = make_fixture("singlepath");
  const auto ranked = rank_classes_for_concept(f.model, f.data, "conv1", 0);
  REQUIRE(ranked.size() == 2);
  CHECK(ranked[0].cls == 0);
  CHECK(ranked[0].mean > 0.0);
  CHECK(ranked[1].mean <= 0.0);
  CHECK(kind_of([&] { rank_classes_for_concept(f.model, f.data, "conv1", 3); }) == ErrorKind::not_found);
}
