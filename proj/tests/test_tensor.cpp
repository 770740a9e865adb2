#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "regformer/optimizer.hpp"
#include "regformer/tensor.hpp"
#include "support/reference.hpp"

using namespace regformer;

TEST_CASE("matmul identity and scalar cases") {
  Tensor id = Tensor::from({2, 2}, {1, 0, 0, 1});
  Tensor b = Tensor::from({2, 2}, {3, 4, 5, 6});
  Tensor c = matmul(id, b);
  REQUIRE(c.data() == std::vector<double>{3, 4, 5, 6});

  Tensor x = Tensor::from({1, 1}, {2});
  Tensor y = Tensor::from({1, 1}, {3});
  REQUIRE(matmul(x, y).item() == 6.0);
}

TEST_CASE("matmul matches triple-loop oracle") {
  Rng rng(7);
  const int m = 3, k = 4, n = 2;
  Tensor a = Tensor::randn({m, k}, rng, 1.0);
  Tensor b = Tensor::randn({k, n}, rng, 1.0);
  Tensor c = matmul(a, b);
  auto expect = testref::matmul_naive(a.data(), b.data(), m, k, n);
  for (size_t i = 0; i < expect.size(); ++i)
    REQUIRE(std::abs(c.data()[i] - expect[i]) < 1e-12);
}

TEST_CASE("matmul rejects mismatched shapes with both named") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({4, 2});
  REQUIRE_THROWS_WITH(matmul(a, b),
                      Catch::Matchers::ContainsSubstring("[2x3]") &&
                          Catch::Matchers::ContainsSubstring("[4x2]"));
}

TEST_CASE("matmul gradients flow to both operands") {
  Rng rng(11);
  Tensor a = Tensor::randn({3, 4}, rng, 1.0, true);
  Tensor b = Tensor::randn({4, 2}, rng, 1.0, true);
  Tensor loss = sum(matmul(a, b));
  backward(loss);
  auto fn = [&] {
    auto c = testref::matmul_naive(a.data(), b.data(), 3, 4, 2);
    double s = 0.0;
    for (double v : c) s += v;
    return s;
  };
  for (size_t i = 0; i < a.size(); ++i) {
    const double num = testref::central_difference(a.data_mut(), i, fn);
    REQUIRE(testref::rel_error(a.grad()[i], num) < 1e-6);
  }
  for (size_t i = 0; i < b.size(); ++i) {
    const double num = testref::central_difference(b.data_mut(), i, fn);
    REQUIRE(testref::rel_error(b.grad()[i], num) < 1e-6);
  }
}

TEST_CASE("masked softmax basic rows") {
  // single visible column takes all mass
  {
    Tensor s = Tensor::from({2, 2}, {1, 1, 0, 0});
    std::vector<uint8_t> vis = {1, 0, 1, 1};
    Tensor p = masked_softmax(s, vis, 2);
    REQUIRE(p.data()[0] == 1.0);
    REQUIRE(p.data()[1] == 0.0);
  }
  // symmetric logits, all visible
  {
    Tensor s = Tensor::zeros({3, 3});
    std::vector<uint8_t> vis(9, 1);
    Tensor p = masked_softmax(s, vis, 3);
    for (int c = 0; c < 3; ++c) REQUIRE(std::abs(p.data()[c] - 1.0 / 3) < 1e-15);
  }
  // hand-evaluated softmax of [ln 2, 0]
  {
    Tensor s = Tensor::from({2, 2}, {std::log(2.0), 0.0, 0.0, 0.0});
    std::vector<uint8_t> vis(4, 1);
    Tensor p = masked_softmax(s, vis, 2);
    REQUIRE(std::abs(p.data()[0] - 2.0 / 3) < 1e-12);
    REQUIRE(std::abs(p.data()[1] - 1.0 / 3) < 1e-12);
  }
}

TEST_CASE("masked softmax rows sum to one and masked cells are exactly zero") {
  Rng rng(3);
  const int L = 7;
  Tensor s = Tensor::randn({L, L}, rng, 5.0);
  std::vector<uint8_t> vis(size_t(L) * L, 0);
  for (int r = 0; r < L; ++r) {
    vis[size_t(r) * L + (r % L)] = 1;  // ensure at least one visible
    for (int c = 0; c < L; ++c)
      if (rng.uniform() < 0.5) vis[size_t(r) * L + c] = 1;
  }
  Tensor p = masked_softmax(s, vis, L);
  for (int r = 0; r < L; ++r) {
    double sum = 0.0;
    for (int c = 0; c < L; ++c) {
      const double v = p.data()[size_t(r) * L + c];
      if (!vis[size_t(r) * L + c]) REQUIRE(v == 0.0);
      sum += v;
    }
    REQUIRE(std::abs(sum - 1.0) < 1e-9);
  }
}

TEST_CASE("masked softmax rejects fully masked rows") {
  Tensor s = Tensor::zeros({2, 2});
  std::vector<uint8_t> vis = {1, 1, 0, 0};
  REQUIRE_THROWS_AS(masked_softmax(s, vis, 2), std::runtime_error);
}

TEST_CASE("layer norm examples") {
  Tensor gain1 = Tensor::full({3}, 1.0);
  Tensor bias0 = Tensor::zeros({3});
  Tensor x = Tensor::from({1, 3}, {1, 1, 1});
  Tensor y = layer_norm(x, gain1, bias0);
  for (double v : y.data()) REQUIRE(std::abs(v) < 1e-12);

  Tensor g2 = Tensor::full({2}, 1.0);
  Tensor b2 = Tensor::zeros({2});
  Tensor x2 = Tensor::from({1, 2}, {-1, 1});
  Tensor y2 = layer_norm(x2, g2, b2);
  REQUIRE(std::abs(y2.data()[0] + 1.0) < 1e-4);
  REQUIRE(std::abs(y2.data()[1] - 1.0) < 1e-4);

  Tensor g0 = Tensor::zeros({2});
  Tensor b5 = Tensor::full({2}, 5.0);
  Tensor y3 = layer_norm(x2, g0, b5);
  REQUIRE(y3.data() == std::vector<double>{5, 5});
}

TEST_CASE("layer norm gradients match finite differences") {
  Rng rng(19);
  const int m = 3, d = 5;
  Tensor x = Tensor::randn({m, d}, rng, 2.0, true);
  Tensor g = Tensor::randn({d}, rng, 1.0, true);
  Tensor b = Tensor::randn({d}, rng, 1.0, true);
  // weighted sum makes row gradients non-uniform
  Rng wr(5);
  Tensor w = Tensor::randn({m, d}, wr, 1.0);
  Tensor loss = sum(mul(layer_norm(x, g, b), w));
  backward(loss);
  auto eval = [&] {
    autograd::NoGradGuard ng;
    return sum(mul(layer_norm(x, g, b), w)).item();
  };
  for (Tensor* t : {&x, &g, &b}) {
    for (size_t i = 0; i < t->size(); ++i) {
      const double num = testref::central_difference(t->data_mut(), i, eval);
      REQUIRE(testref::rel_error(t->grad()[i], num) < 1e-5);
    }
  }
}

TEST_CASE("cross entropy uniform and confident cases") {
  // uniform logits over V=4, no smoothing -> ln 4
  {
    Tensor logits = Tensor::zeros({1, 4});
    Tensor loss = cross_entropy_label_smoothed(logits, {2}, 0.0, {0});
    REQUIRE(std::abs(loss.item() - std::log(4.0)) < 1e-12);
  }
  // huge correct logit -> loss ~ 0
  {
    Tensor logits = Tensor::from({1, 3}, {50.0, 0.0, 0.0});
    Tensor loss = cross_entropy_label_smoothed(logits, {0}, 0.0, {0});
    REQUIRE(loss.item() < 1e-12);
  }
  // V=2, zero logits, smoothing 0.1: every class has -log p = ln 2
  {
    Tensor logits = Tensor::zeros({1, 2});
    Tensor loss = cross_entropy_label_smoothed(logits, {0}, 0.1, {0});
    REQUIRE(std::abs(loss.item() - std::log(2.0)) < 1e-12);
  }
}

TEST_CASE("cross entropy ignores masked positions exactly") {
  Rng rng(23);
  Tensor logits = Tensor::randn({4, 5}, rng, 2.0, true);
  std::vector<int> targets = {1, 2, 3, 0};
  std::vector<uint8_t> ignore = {1, 0, 0, 1};
  Tensor loss = cross_entropy_label_smoothed(logits, targets, 0.1, ignore);
  backward(loss);
  const auto& g = logits.grad();
  for (int j = 0; j < 5; ++j) {
    REQUIRE(g[size_t(0) * 5 + j] == 0.0);
    REQUIRE(g[size_t(3) * 5 + j] == 0.0);
  }
  // non-ignored rows carry gradient
  double mag = 0.0;
  for (int j = 0; j < 5; ++j) mag += std::abs(g[size_t(1) * 5 + j]);
  REQUIRE(mag > 0.0);
  // gradient matches finite differences
  auto eval = [&] {
    autograd::NoGradGuard ng;
    return cross_entropy_label_smoothed(logits, targets, 0.1, ignore).item();
  };
  for (size_t i = 0; i < logits.size(); ++i) {
    const double num = testref::central_difference(logits.data_mut(), i, eval);
    REQUIRE(testref::rel_error(g[i], num) < 1e-5);
  }
}

TEST_CASE("cross entropy rejects an all-ignored batch") {
  Tensor logits = Tensor::zeros({2, 3});
  REQUIRE_THROWS_WITH(cross_entropy_label_smoothed(logits, {0, 1}, 0.0, {1, 1}),
                      Catch::Matchers::ContainsSubstring("empty"));
}

TEST_CASE("backward basics") {
  // sum: all-ones gradient
  {
    Rng rng(2);
    Tensor x = Tensor::randn({3, 2}, rng, 1.0, true);
    backward(sum(x));
    for (double g : x.grad()) REQUIRE(g == 1.0);
  }
  // x*x at 3 -> 6
  {
    Tensor x = Tensor::from({1}, {3.0}, true);
    backward(sum(mul(x, x)));
    REQUIRE(x.grad()[0] == 6.0);
  }
  // non-scalar loss rejected
  {
    Tensor x = Tensor::zeros({2}, true);
    Tensor y = add(x, x);
    REQUIRE_THROWS_AS(backward(y), std::invalid_argument);
  }
  // gradients accumulate across repeated backward calls
  {
    Tensor x = Tensor::from({1}, {2.0}, true);
    Tensor loss = sum(mul(x, x));
    backward(loss);
    backward(loss);
    REQUIRE(x.grad()[0] == 8.0);
  }
  // off-path tensors keep a zero gradient
  {
    Tensor x = Tensor::from({1}, {1.0}, true);
    Tensor unused = Tensor::from({1}, {4.0}, true);
    backward(sum(x));
    REQUIRE(unused.grad()[0] == 0.0);
  }
}

TEST_CASE("adam zero gradient leaves parameters unchanged") {
  Tensor p = Tensor::from({3}, {1.0, -2.0, 0.5}, true);
  std::vector<NamedTensor> params = {{"p", p}};
  AdamState state;
  state.init(params);
  p.zero_grad();
  adam_step(params, state, 1e-3);
  REQUIRE(p.data() == std::vector<double>{1.0, -2.0, 0.5});
  REQUIRE(state.step == 1);
}

TEST_CASE("adam first step moves by -sign(g)*lr") {
  Tensor p = Tensor::zeros({2}, true);
  std::vector<NamedTensor> params = {{"p", p}};
  AdamState state;
  state.init(params);
  auto& g = p.node()->ensure_grad();
  g[0] = 0.37;
  g[1] = -4.2;
  const double lr = 1e-2;
  adam_step(params, state, lr);
  REQUIRE(std::abs(p.data()[0] + lr) < lr * 1e-6);
  REQUIRE(std::abs(p.data()[1] - lr) < lr * 1e-6);
}

TEST_CASE("adam constant gradient steps shrink in magnitude") {
  Tensor p = Tensor::zeros({1}, true);
  std::vector<NamedTensor> params = {{"p", p}};
  AdamState state;
  state.init(params);
  const double g0 = 1.7;
  p.node()->ensure_grad()[0] = g0;
  adam_step(params, state, 1e-2);
  const double d1 = std::abs(p.data()[0]);
  const double after1 = p.data()[0];
  p.node()->ensure_grad()[0] = g0;
  adam_step(params, state, 1e-2);
  const double d2 = std::abs(p.data()[0] - after1);
  REQUIRE(d2 <= d1 + 1e-15);
}

TEST_CASE("adam aborts on NaN gradient naming the parameter") {
  Tensor p = Tensor::zeros({1}, true);
  std::vector<NamedTensor> params = {{"ff.w1", p}};
  AdamState state;
  state.init(params);
  p.node()->ensure_grad()[0] = std::nan("");
  REQUIRE_THROWS_WITH(adam_step(params, state, 1e-3), Catch::Matchers::ContainsSubstring("ff.w1"));
}

TEST_CASE("sinusoidal positions") {
  Tensor p = sinusoidal_positions(0, 3, 6);
  // position 0 alternates [0,1,0,1,...]
  for (int j = 0; j < 3; ++j) {
    REQUIRE(p.data()[size_t(2 * j)] == 0.0);
    REQUIRE(p.data()[size_t(2 * j + 1)] == 1.0);
  }
  // dim 0 is sin(position)
  for (int i = 0; i < 3; ++i) REQUIRE(std::abs(p.data()[size_t(i) * 6] - std::sin(double(i))) < 1e-12);
  // deterministic
  Tensor q = sinusoidal_positions(0, 3, 6);
  REQUIRE(p.data() == q.data());
  // offsets index absolute positions
  Tensor r = sinusoidal_positions(2, 1, 6);
  REQUIRE(std::abs(r.data()[0] - std::sin(2.0)) < 1e-12);
  REQUIRE_THROWS_AS(sinusoidal_positions(0, 2, 5), std::invalid_argument);
}

TEST_CASE("dropout is inverted and masks gradients") {
  Rng rng(31);
  Tensor x = Tensor::full({100, 10}, 1.0, true);
  Tensor y = dropout(x, 0.25, rng);
  size_t kept = 0;
  for (double v : y.data()) {
    REQUIRE((v == 0.0 || std::abs(v - 1.0 / 0.75) < 1e-12));
    if (v != 0.0) ++kept;
  }
  // keep rate within loose binomial bounds
  REQUIRE(kept > 600);
  REQUIRE(kept < 900);
  backward(sum(y));
  for (size_t i = 0; i < x.size(); ++i) {
    if (y.data()[i] == 0.0)
      REQUIRE(x.grad()[i] == 0.0);
    else
      REQUIRE(std::abs(x.grad()[i] - 1.0 / 0.75) < 1e-12);
  }
}

TEST_CASE("grad sink collects leaf gradients for ordered reduction") {
  Tensor w = Tensor::from({2}, {1.0, 2.0}, true);
  GradSink sink;
  backward_seeded(sum(mul(w, w)), 1.0, &sink);
  // nothing flushed yet
  REQUIRE(w.grad()[0] == 0.0);
  sink.flush();
  REQUIRE(w.grad()[0] == 2.0);
  REQUIRE(w.grad()[1] == 4.0);
}

TEST_CASE("ops are deterministic for identical inputs") {
  Rng r1(99), r2(99);
  Tensor a1 = Tensor::randn({4, 4}, r1, 1.0);
  Tensor a2 = Tensor::randn({4, 4}, r2, 1.0);
  REQUIRE(a1.data() == a2.data());
  Tensor b1 = matmul(a1, a1);
  Tensor b2 = matmul(a2, a2);
  REQUIRE(b1.data() == b2.data());
}
