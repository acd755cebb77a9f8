#include <doctest.h>

#include <cmath>

#include "crp/fixtures.hpp"
#include "crp/forward.hpp"

using namespace crp;

namespace {

LayerSpec layer(std::string id, LayerKind kind, std::string in) {
  LayerSpec l;
  l.id = std::move(id);
  l.kind = kind;
  l.inputs = {std::move(in)};
  return l;
}

ModelGraph conv_model(std::size_t cin, std::size_t h, std::size_t w, std::size_t cout, std::size_t k, std::size_t pad,
                      const Tensor& weight, const Tensor& bias) {
  LayerSpec c = layer("conv", LayerKind::conv2d, "x");
  c.in_channels = cin;
  c.out_channels = cout;
  c.kernel = {k, k};
  c.padding = {pad, pad};
  c.weight = "w";
  c.bias = "b";
  LayerSpec d = layer("fc", LayerKind::dense, "conv");
  const std::size_t n = cout * (h + 2 * pad - k + 1) * (w + 2 * pad - k + 1);
  d.in_channels = n;
  d.out_channels = 1;
  d.weight = "fw";
  Blob blob;
  blob.add("w", weight);
  blob.add("b", bias);
  blob.add("fw", Tensor({1, n}, 1.0f));
  return ModelGraph::build("x", {cin, h, w}, {c, d}, blob);
}

}  // namespace

TEST_CASE("dense forward by hand") {
  LayerSpec d = layer("fc", LayerKind::dense, "x");
  d.in_channels = 2;
  d.out_channels = 1;
  d.weight = "w";
  Blob b;
  b.add("w", Tensor({1, 2}, {1.0f, -1.0f}));
  const ModelGraph g = ModelGraph::build("x", {2}, {d}, b);
  CHECK(forward(g, Tensor({2}, {2.0f, 1.0f})).logits() == Tensor({1}, {1.0f}));
}

TEST_CASE("mlp8 forward on a unit input matches the documented logits") {
  const Fixture f = make_fixture("mlp8");
  const auto t = forward(f.model, Tensor({4}, {1, 0, 0, 0}));
  CHECK(t.logits()[0] == doctest::Approx(1.2).epsilon(1e-6));
  CHECK(t.logits()[1] == doctest::Approx(0.6).epsilon(1e-6));
  CHECK(t.size() == f.model.size());
}

TEST_CASE("maxpool records the winning index") {
  LayerSpec p = layer("pool", LayerKind::maxpool2d, "x");
  p.kernel = {2, 2};
  p.stride = {2, 2};
  LayerSpec fl = layer("flat", LayerKind::flatten, "pool");
  const ModelGraph g = ModelGraph::build("x", {1, 2, 2}, {p, fl}, Blob{});
  const auto t = forward(g, Tensor({1, 2, 2}, {1, 2, 3, 4}));
  CHECK(t.at("pool") == Tensor({1, 1, 1}, {4}));
  CHECK(t.argmax(1) == std::vector<std::uint32_t>{3});

  SUBCASE("ties go to the lowest index") {
    const auto u = forward(g, Tensor({1, 2, 2}, {5, 5, 5, 5}));
    CHECK(u.argmax(1) == std::vector<std::uint32_t>{0});
  }
}

TEST_CASE("1x1 conv with unit weight is the identity") {
  const ModelGraph g = conv_model(1, 3, 3, 1, 1, 0, Tensor({1, 1, 1, 1}, 1.0f), Tensor({1}, 0.0f));
  const Tensor x = random_tensor({1, 3, 3}, 5, -1, 1);
  CHECK(forward(g, x).at("conv") == x);
}

TEST_CASE("conv forward matches a direct six-loop convolution") {
  const Tensor w = random_tensor({5, 3, 3, 3}, 21, -1, 1);
  const Tensor b = random_tensor({5}, 22, -1, 1);
  const ModelGraph g = conv_model(3, 8, 8, 5, 3, 1, w, b);
  const Tensor x = random_tensor({3, 8, 8}, 23, -1, 1);
  const auto trace = forward(g, x);
  const Tensor& y = trace.at("conv");
  double worst = 0.0;
  for (int o = 0; o < 5; ++o) {
    for (int r = 0; r < 8; ++r) {
      for (int c = 0; c < 8; ++c) {
        double acc = b[o];
        for (int ci = 0; ci < 3; ++ci) {
          for (int i = 0; i < 3; ++i) {
            for (int j = 0; j < 3; ++j) {
              const int rr = r + i - 1, cc = c + j - 1;
              if (rr < 0 || cc < 0 || rr >= 8 || cc >= 8) continue;
              acc += double(w[((o * 3 + ci) * 3 + i) * 3 + j]) * x.at(ci, rr, cc);
            }
          }
        }
        worst = std::max(worst, std::fabs(acc - y.at(o, r, c)));
      }
    }
  }
  CHECK(worst < 1e-5);
}

TEST_CASE("add is exact elementwise addition") {
  const Fixture f = make_fixture("resnet_micro");
  const auto t = forward(f.model, f.data.sample(0));
  const Tensor& a = t.at("relu1");
  const Tensor& b = t.at("relu2");
  const Tensor& s = t.at("add");
  for (std::size_t i = 0; i < s.size(); ++i) CHECK(s[i] == a[i] + b[i]);
}

TEST_CASE("forward is deterministic") {
  const Fixture f = make_fixture("lenet_random");
  const auto a = forward(f.model, f.data.sample(0));
  const auto b = forward(f.model, f.data.sample(0));
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a.at(i) == b.at(i));
}

TEST_CASE("blend edits") {
  const Fixture f = make_fixture("lenet_random");
  const Tensor& x = f.data.sample(1);
  const auto clean = forward(f.model, x);
  const Tensor donor = forward(f.model, f.data.sample(2)).at("relu2");
  const BoolMask full({10, 10}, true);

  SUBCASE("alpha 0 is the identity") {
    const auto t = forward(f.model, x, {ActivationEdit::blend_with("relu2", full, donor, 0.0)});
    CHECK(t.logits() == clean.logits());
  }
  SUBCASE("alpha 1 with a full mask splices the donor in") {
    const auto t = forward(f.model, x, {ActivationEdit::blend_with("relu2", full, donor, 1.0)});
    CHECK(t.at("relu2") == donor);
    // run the remaining layers by hand from the donor
    std::vector<std::uint32_t> am;
    Tensor h = kernels::maxpool_forward(f.model.node("pool2"), donor, am);
    h = kernels::relu_forward(kernels::dense_forward(f.model.node("fc1"), h));
    h = kernels::relu_forward(kernels::dense_forward(f.model.node("fc2"), h));
    h = kernels::dense_forward(f.model.node("fc3"), h);
    CHECK(t.logits() == h);
  }
  SUBCASE("edits never touch earlier layers") {
    const auto t = forward(f.model, x, {ActivationEdit::zero("conv2", {0, 3, 5})});
    for (const char* id : {"x", "conv1", "relu1", "pool1"}) CHECK(t.at(id) == clean.at(id));
    for (std::size_t c : {0u, 3u, 5u}) {
      for (float v : t.at("conv2").channel(c)) CHECK(v == 0.0f);
    }
  }
  SUBCASE("partial mask and mean donor") {
    BoolMask left({10, 10}, false);
    for (std::size_t r = 0; r < 10; ++r) {
      for (std::size_t c = 0; c < 5; ++c) left.bits[r * 10 + c] = 1;
    }
    Tensor means({16}, 0.5f);
    const auto t = forward(f.model, x, {ActivationEdit::blend_mean_with("relu2", left, means, 0.25)});
    const Tensor& z0 = clean.at("relu2");
    const Tensor& z = t.at("relu2");
    CHECK(z.at(3, 2, 2) == static_cast<float>(0.75 * z0.at(3, 2, 2) + 0.25 * 0.5));
    CHECK(z.at(3, 2, 7) == z0.at(3, 2, 7));
  }
}

TEST_CASE("forward errors") {
  const Fixture f = make_fixture("lenet_random");
  CHECK_THROWS_AS(forward(f.model, Tensor({1, 28, 28}, 0.0f)), Error);
  CHECK_THROWS_AS(forward(f.model, f.data.sample(0), {ActivationEdit::zero("nope", {0})}), Error);
  const BoolMask wrong({5, 5}, true);
  CHECK_THROWS_AS(forward(f.model, f.data.sample(0),
                          {ActivationEdit::blend_with("relu2", wrong, Tensor({16, 10, 10}, 0.0f), 0.5)}),
                  Error);
  CHECK_THROWS_AS(forward(f.model, f.data.sample(0),
                          {ActivationEdit::blend_with("relu2", BoolMask({10, 10}, true), Tensor({16, 10, 10}, 0.0f), 1.5)}),
                  Error);
}
