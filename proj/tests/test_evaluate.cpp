#include <doctest.h>

#include <cmath>

#include "crp/evaluate.hpp"
#include "crp/fixtures.hpp"

using namespace crp;

namespace {

RankingSpec class_ranking(const std::string& out, std::size_t cls) {
  RankingSpec r;
  r.cond.add(out, cls);
  r.init = InitSpec::logit(cls);
  return r;
}

}  // namespace

TEST_CASE("flipping the carrier channel first hits the bias floor") {
  const auto f = make_fixture("singlepath");
  const Tensor& x = f.data.sample(0);
  const auto base = forward(f.model, x).logits()[0];
  const auto desc = flip_filters(f.model, x, "conv1", 0, class_ranking("fc", 0), FlipOrder::relevance_desc, 3);
  CHECK(desc.ranking.front() == 0);
  CHECK(desc.steps.size() == 4);
  CHECK(desc.steps[0].relative[0] == 1.0);
  CHECK(desc.steps[1].logits[0] == doctest::Approx(0.1).epsilon(1e-6));
  CHECK(desc.steps[1].relative[0] == doctest::Approx(0.1 / base).epsilon(1e-6));

  const auto asc = flip_filters(f.model, x, "conv1", 0, class_ranking("fc", 0), FlipOrder::relevance_asc, 3);
  CHECK(asc.ranking.back() == 0);
  CHECK(std::fabs(asc.steps[1].relative[0] - 1.0) < 1e-6);
  CHECK(std::fabs(asc.steps[2].relative[0] - 1.0) < 1e-6);
  CHECK(asc.steps[3].relative[0] == doctest::Approx(0.1 / base).epsilon(1e-6));
}

TEST_CASE("flipping every channel leaves the bias-only output") {
  const auto f = make_fixture("singlepath");
  const auto curve = flip_filters(f.model, f.data.sample(1), "conv1", 1, class_ranking("fc", 1), FlipOrder::relevance_desc, 3);
  CHECK(curve.steps.back().logits[0] == doctest::Approx(0.1).epsilon(1e-7));
  CHECK(curve.steps.back().logits[1] == 0.0);
  for (std::size_t t = 1; t < curve.steps.size(); ++t) {
    CHECK(curve.steps[t].disabled.size() == t);
  }
}

TEST_CASE("random flip orders are reproducible") {
  const auto f = make_fixture("lenet_random");
  const auto a = flip_filters(f.model, f.data.sample(0), "conv2", 3, class_ranking("fc3", 3), FlipOrder::random, 16, 42);
  const auto b = flip_filters(f.model, f.data.sample(0), "conv2", 3, class_ranking("fc3", 3), FlipOrder::random, 16, 42);
  const auto c = flip_filters(f.model, f.data.sample(0), "conv2", 3, class_ranking("fc3", 3), FlipOrder::random, 16, 43);
  CHECK(a.ranking == b.ranking);
  CHECK(a.to_csv() == b.to_csv());
  CHECK(a.ranking != c.ranking);
  for (std::size_t cls = 0; cls < 10; ++cls) {
    if (!a.absolute[cls]) CHECK(a.steps[0].relative[cls] == 1.0);
  }
  CHECK_THROWS_AS(flip_filters(f.model, f.data.sample(0), "conv2", 3, class_ranking("fc3", 3), FlipOrder::random, 17), Error);
  CHECK(flip_order_from_string("asc") == FlipOrder::relevance_asc);
  CHECK_THROWS_AS(flip_order_from_string("sideways"), Error);
}

TEST_CASE("blend sweeps respect the alpha identities") {
  const auto f = make_fixture("lenet_random");
  const Tensor& x = f.data.sample(7);
  const auto clean = forward(f.model, x);
  const auto clean_logits = clean.logits().values();

  SUBCASE("alpha 0 is the clean forward for any donor") {
    const auto edit = ActivationEdit::blend_with("conv2", BoolMask({10, 10}, true), forward(f.model, f.data.sample(8)).at("conv2"), 0.0);
    const auto sweep = blend_sweep(f.model, x, edit, {0.0, 0.5, 1.0}, {{"conv2", 1}}, class_ranking("fc3", 0));
    for (std::size_t c = 0; c < 10; ++c) CHECK(sweep.points[0].logits[c] == static_cast<double>(clean_logits[c]));
    CHECK(sweep.points[2].logits != sweep.points[0].logits);
  }
  SUBCASE("alpha 1 with the sample as its own donor") {
    const auto edit = ActivationEdit::blend_with("conv2", BoolMask({10, 10}, true), clean.at("conv2"), 0.0);
    const auto sweep = blend_sweep(f.model, x, edit, {0.0, 1.0}, {}, class_ranking("fc3", 0));
    for (std::size_t c = 0; c < 10; ++c) CHECK(std::fabs(sweep.points[1].logits[c] - clean_logits[c]) < 1e-6);
  }
  SUBCASE("finite differences stay within the fine-grid Lipschitz bound") {
    const auto edit = ActivationEdit::blend_with("conv1", BoolMask({28, 28}, true), forward(f.model, f.data.sample(9)).at("conv1"), 0.0);
    std::vector<double> alphas;
    for (int i = 0; i <= 100; ++i) alphas.push_back(i / 100.0);
    const auto sweep = blend_sweep(f.model, x, edit, alphas, {}, class_ranking("fc3", 0), 4);
    for (std::size_t c = 0; c < 10; ++c) {
      double L = 0.0;
      for (std::size_t i = 1; i < alphas.size(); ++i) {
        L = std::max(L, std::fabs(sweep.points[i].logits[c] - sweep.points[i - 1].logits[c]) / (alphas[i] - alphas[i - 1]));
      }
      for (std::size_t i = 5; i < alphas.size(); i += 5) {
        const double d = std::fabs(sweep.points[i].logits[c] - sweep.points[i - 5].logits[c]);
        CHECK(d <= L * (alphas[i] - alphas[i - 5]) * (1.0 + 1e-9) + 1e-12);
      }
    }
  }
  SUBCASE("bad grids and donors are rejected") {
    const auto edit = ActivationEdit::blend_with("conv2", BoolMask({10, 10}, true), clean.at("conv2"), 0.0);
    CHECK_THROWS_AS(blend_sweep(f.model, x, edit, {0.5, 0.2}, {}, class_ranking("fc3", 0)), Error);
    CHECK_THROWS_AS(blend_sweep(f.model, x, edit, {1.5}, {}, class_ranking("fc3", 0)), Error);
    const auto bad = ActivationEdit::blend_with("conv2", BoolMask({10, 10}, true), Tensor({3, 10, 10}, 0.0f), 0.0);
    CHECK_THROWS_AS(blend_sweep(f.model, x, bad, {0.0, 1.0}, {}, class_ranking("fc3", 0)), Error);
  }
}

TEST_CASE("blend sweeps track conditional relevance") {
  const auto f = make_fixture("lenet_random");
  const Tensor& x = f.data.sample(3);
  const auto clean = forward(f.model, x);
  const auto edit = ActivationEdit::blend_mean_with("conv2", BoolMask({10, 10}, true), Tensor({16}, 0.5f), 0.0);
  const auto spec = class_ranking("fc3", 2);
  const auto sweep = blend_sweep(f.model, x, edit, {0.0}, {{"conv2", 4}, {"conv1", 0}}, spec);
  const auto rt = attribute(clean, spec.cond, spec.init, spec.rules);
  CHECK(sweep.points[0].tracked[0] == doctest::Approx(rt.channel_relevance("conv2")[4]).epsilon(1e-12));
  CHECK(sweep.points[0].tracked[1] == doctest::Approx(rt.channel_relevance("conv1")[0]).epsilon(1e-12));
  CHECK(sweep.to_csv().rfind("alpha,logit_0", 0) == 0);
}

TEST_CASE("channel similarity equals the averaged cosine loop") {
  const auto f = make_fixture("singlepath");
  IndexOptions opts;
  opts.layers = {"conv1"};
  opts.targets = {MaximizationTarget::parse("rel_sum")};
  opts.k = 4;
  const auto idx = build_index(f.model, f.data, opts);
  const std::size_t k = 2, C = 3;
  const auto m = channel_similarity(f.model, f.data, idx, "conv1", k);

  double cosine[3][3] = {};
  for (std::size_t q = 0; q < C; ++q) {
    const auto refs = idx.rank("conv1", q, "rel_sum");
    for (std::size_t r = 0; r < k; ++r) {
      const auto z = forward(f.model, f.data.sample(refs[r].sample)).at("relu1");
      for (std::size_t p = 0; p < C; ++p) {
        double dot = 0, nq = 0, np = 0;
        for (std::size_t i = 0; i < 4; ++i) {
          dot += double(z[q * 4 + i]) * z[p * 4 + i];
          nq += double(z[q * 4 + i]) * z[q * 4 + i];
          np += double(z[p * 4 + i]) * z[p * 4 + i];
        }
        if (nq > 0 && np > 0) cosine[q][p] += dot / std::sqrt(nq * np) / k;
      }
    }
  }
  for (std::size_t q = 0; q < C; ++q) {
    for (std::size_t p = 0; p < C; ++p) {
      const double rho = 0.5 * (cosine[q][p] + cosine[p][q]);
      CHECK(m.rho[q * C + p] == doctest::Approx(rho).epsilon(1e-6).scale(1e-6));
      CHECK(m.rho[q * C + p] == m.rho[p * C + q]);
      CHECK(m.rho[q * C + p] >= 0.0);
      CHECK(m.rho[q * C + p] <= 1.0 + 1e-12);
      CHECK(m.distance[q * C + p] == 1.0 - m.rho[q * C + p]);
    }
    if (!m.flagged[q]) CHECK(m.rho[q * C + q] == doctest::Approx(1.0));
  }
  CHECK(m.to_csv().rfind("channel,0,1,2\n", 0) == 0);
  const auto other = make_fixture("mlp8");
  CHECK_THROWS_AS(channel_similarity(other.model, other.data, idx, "conv1", 2), Error);
}
