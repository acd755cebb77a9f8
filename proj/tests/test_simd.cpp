#include <doctest.h>

#include <cmath>

#include "crp/attribute.hpp"
#include "crp/fixtures.hpp"
#include "crp/simd/kernels.hpp"

using namespace crp;

namespace {

std::vector<double> random_vec(std::size_t n, std::uint64_t seed) {
  FixtureRng rng(seed);
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(-1.0, 1.0);
  return v;
}

struct ActiveGuard {
  std::string prev = simd::active().name;
  ~ActiveGuard() { simd::select(prev); }
};

}  // namespace

TEST_CASE("every available kernel table agrees with the scalar reference") {
  const auto& ref = simd::scalar_kernels();
  for (const auto* t : simd::available_kernels()) {
    CAPTURE(t->name);
    for (std::size_t n : {0u, 1u, 3u, 4u, 7u, 8u, 15u, 16u, 17u, 63u, 1000u}) {
      CAPTURE(n);
      const auto a = random_vec(n, 100 + n);
      const auto b = random_vec(n, 200 + n);
      const double tol = 1e-12 * (1.0 + static_cast<double>(n));
      CHECK(std::fabs(t->dot(a.data(), b.data(), n) - ref.dot(a.data(), b.data(), n)) <= tol);
      CHECK(std::fabs(t->sum(a.data(), n) - ref.sum(a.data(), n)) <= tol);
      CHECK(std::fabs(t->sum_abs(a.data(), n) - ref.sum_abs(a.data(), n)) <= tol);

      auto y1 = b, y2 = b;
      t->axpy(0.37, a.data(), y1.data(), n);
      ref.axpy(0.37, a.data(), y2.data(), n);
      for (std::size_t i = 0; i < n; ++i) CHECK(std::fabs(y1[i] - y2[i]) <= 1e-15);

      std::vector<double> m1(n), m2(n);
      t->mul(a.data(), b.data(), m1.data(), n);
      ref.mul(a.data(), b.data(), m2.data(), n);
      CHECK(m1 == m2);
    }
  }
}

TEST_CASE("select switches the active table") {
  ActiveGuard guard;
  CHECK(simd::select("scalar"));
  CHECK(std::string(simd::active().name) == "scalar");
  CHECK_FALSE(simd::select("no-such-isa"));
}

TEST_CASE("attribution is equivalent across kernel tables") {
  ActiveGuard guard;
  const Fixture f = make_fixture("lenet_random");
  const auto& x = f.data.sample(3);
  std::vector<Tensor64> maps;
  std::vector<Tensor> logits;
  for (const auto* t : simd::available_kernels()) {
    REQUIRE(simd::select(t->name));
    const auto trace = forward(f.model, x);
    logits.push_back(trace.logits());
    maps.push_back(attribute(trace, {}, InitSpec::one_hot(2), RuleComposite{}).input_map());
  }
  for (std::size_t k = 1; k < maps.size(); ++k) {
    for (std::size_t i = 0; i < logits[0].size(); ++i) CHECK(std::fabs(logits[k][i] - logits[0][i]) <= 1e-5f);
    double scale = 0.0;
    for (double v : maps[0].data()) scale = std::max(scale, std::fabs(v));
    for (std::size_t i = 0; i < maps[0].size(); ++i) CHECK(std::fabs(maps[k][i] - maps[0][i]) <= 1e-6 * scale);
  }
}
