#include <cstring>

#include "doctest.h"
#include "rail/losses.hpp"
#include "rail/network.hpp"
#include "rail/ops.hpp"
#include "rail/parallel.hpp"
#include "rail/rng.hpp"
#include "rail/tensor.hpp"
#include "support/finite_diff.hpp"

using namespace rail;
using testsupport::fd_check;

namespace {

TensorD random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0,
                      bool requires_grad = false) {
  std::vector<double> vals(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& v : vals) v = rng.uniform(lo, hi);
  return TensorD::from(std::move(shape), std::move(vals), requires_grad);
}

double inner(const TensorD& a, const TensorD& b) {
  return reduce_sum(mul(a, b)).item();
}

}  // namespace

TEST_CASE("conv3d basics") {
  TensorD x = TensorD::filled({1, 1, 3, 3, 3}, 1.0);
  TensorD k = TensorD::filled({1, 1, 3, 3, 3}, 1.0);
  TensorD y = conv3d(x, k, {1, 1, 1}, {0, 0, 0});
  CHECK(y.shape() == Shape{1, 1, 1, 1, 1});
  CHECK(y.item() == doctest::Approx(27.0).epsilon(1e-12));

  // identity kernel
  Rng rng(7);
  TensorD v = random_tensor({1, 1, 4, 3, 5}, rng);
  TensorD id = TensorD::filled({1, 1, 1, 1, 1}, 1.0);
  TensorD out = conv3d(v, id, {1, 1, 1}, {0, 0, 0});
  REQUIRE(out.shape() == v.shape());
  for (std::int64_t i = 0; i < v.size(); ++i)
    CHECK(out.values()[i] == v.values()[i]);

  // zero kernel
  TensorD zk = TensorD::zeros({2, 1, 2, 2, 2});
  TensorD zo = conv3d(v, zk, {1, 1, 1}, {0, 0, 0});
  CHECK(zo.shape() == Shape{1, 2, 3, 2, 4});
  for (double e : zo.values()) CHECK(e == 0.0);
}

TEST_CASE("conv3d output extents and stride/pad") {
  Rng rng(3);
  TensorD x = random_tensor({1, 2, 6, 5, 4}, rng);
  TensorD k = random_tensor({3, 2, 3, 3, 3}, rng);
  TensorD y = conv3d(x, k, {2, 1, 1}, {1, 1, 1});
  // floor((W + 2p - kw)/s) + 1
  CHECK(y.shape() == Shape{1, 3, 3, 5, 4});
}

TEST_CASE("conv3d shape errors name the axis") {
  TensorD x = TensorD::zeros({1, 1, 4, 4, 2});
  TensorD k = TensorD::zeros({1, 1, 3, 3, 3});
  CHECK_THROWS_WITH_AS(conv3d(x, k, {1, 1, 1}, {0, 0, 0}),
                       doctest::Contains("axis D"), std::invalid_argument);
  TensorD k2 = TensorD::zeros({1, 2, 3, 3, 1});
  CHECK_THROWS_AS(conv3d(x, k2, {1, 1, 1}, {0, 0, 0}), std::invalid_argument);
}

TEST_CASE("transposed_conv3d basics") {
  TensorD x = TensorD::filled({1, 1, 1, 1, 1}, 2.5);
  TensorD k = TensorD::filled({1, 1, 2, 2, 2}, 1.0);
  TensorD y = transposed_conv3d(x, k, {2, 2, 2});
  CHECK(y.shape() == Shape{1, 1, 2, 2, 2});
  for (double e : y.values()) CHECK(e == doctest::Approx(2.5).epsilon(1e-12));

  TensorD z = TensorD::zeros({1, 2, 3, 3, 3});
  TensorD k2 = TensorD::filled({2, 1, 2, 2, 2}, 0.7);
  TensorD out = transposed_conv3d(z, k2, {2, 2, 2});
  CHECK(out.shape() == Shape{1, 1, 6, 6, 6});
  for (double e : out.values()) CHECK(e == 0.0);
}

TEST_CASE("conv3d / transposed_conv3d adjoint identity") {
  Rng rng(11);
  struct Combo {
    int kw;
    int s;
  };
  for (Combo c : {Combo{2, 2}, Combo{3, 1}, Combo{2, 1}}) {
    for (int rep = 0; rep < 5; ++rep) {
      TensorD x = random_tensor({1, 2, 4, 4, 4}, rng);
      TensorD k = random_tensor({3, 2, c.kw, c.kw, c.kw}, rng);
      TensorD cx = conv3d(x, k, {c.s, c.s, c.s}, {0, 0, 0});
      TensorD y = random_tensor(cx.shape(), rng);
      TensorD ty = transposed_conv3d(y, k, {c.s, c.s, c.s});
      REQUIRE(ty.shape() == x.shape());
      const double lhs = inner(cx, y);
      const double rhs = inner(x, ty);
      CHECK(lhs == doctest::Approx(rhs).epsilon(1e-10));
    }
  }
}

TEST_CASE("softmax_channel") {
  TensorD l = TensorD::from({1, 2, 1, 1, 1}, {0.0, 0.0});
  TensorD p = softmax_channel(l);
  CHECK(p.values()[0] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(p.values()[1] == doctest::Approx(0.5).epsilon(1e-12));

  TensorD l2 = TensorD::from({1, 2, 1, 1, 1}, {std::log(3.0), 0.0});
  TensorD p2 = softmax_channel(l2);
  CHECK(p2.values()[0] == doctest::Approx(0.75).epsilon(1e-12));
  CHECK(p2.values()[1] == doctest::Approx(0.25).epsilon(1e-12));

  // shift invariance and normalization
  Rng rng(5);
  TensorD logits = random_tensor({2, 3, 2, 2, 2}, rng, -4, 4);
  TensorD shifted = TensorD::from(logits.shape(),
                                  {logits.values().begin(), logits.values().end()});
  for (auto& v : shifted.values()) v += 123.25;
  TensorD pa = softmax_channel(logits);
  TensorD pb = softmax_channel(shifted);
  for (std::int64_t i = 0; i < pa.size(); ++i)
    CHECK(pa.values()[i] == doctest::Approx(pb.values()[i]).epsilon(1e-9));
  const int B = 2, K = 3;
  const std::int64_t S = pa.size() / (B * K);
  for (int b = 0; b < B; ++b)
    for (std::int64_t v = 0; v < S; ++v) {
      double sum = 0;
      for (int k = 0; k < K; ++k) sum += pa.values()[(b * K + k) * S + v];
      CHECK(std::abs(sum - 1.0) < 1e-6);
    }
}

TEST_CASE("argmax ties resolve to the lower class index") {
  TensorD p = TensorD::from({1, 2, 2, 1, 1}, {0.5, 0.2, 0.5, 0.8});
  LabelMap m = argmax_channel(p);
  CHECK(m.shape == Shape{1, 2, 1, 1});
  CHECK(m.labels[0] == 0);  // tie 0.5 vs 0.5
  CHECK(m.labels[1] == 1);
}

TEST_CASE("elementwise and reductions") {
  TensorD ones = TensorD::filled({2, 3}, 1.0);
  CHECK(reduce_mean(ones).item() == 1.0);
  CHECK(reduce_sum(ones).item() == 6.0);
  TensorD x = TensorD::from({3}, {1.0, -2.0, 3.0});
  TensorD r = relu(scale(x, -1.0));
  CHECK(r.values()[0] == 0.0);
  CHECK(r.values()[1] == 2.0);
  CHECK(r.values()[2] == 0.0);
  CHECK_THROWS_AS(add(ones, x), std::invalid_argument);
}

TEST_CASE("backward basics") {
  Rng rng(17);
  TensorD x = random_tensor({2, 3, 2}, rng, -2, 2, true);

  {
    TapeD tape;
    TensorD loss = reduce_sum(x, &tape);
    tape.backward(loss);
    for (double g : x.grad()) CHECK(g == 1.0);
  }
  {
    x.zero_grad();
    TapeD tape;
    TensorD loss = reduce_sum(mul(x, x, &tape), &tape);
    tape.backward(loss);
    for (std::int64_t i = 0; i < x.size(); ++i)
      CHECK(x.grad()[i] == doctest::Approx(2.0 * x.values()[i]).epsilon(1e-12));
  }
  {
    TapeD tape;
    TensorD not_scalar = random_tensor({2, 2}, rng);
    CHECK_THROWS_AS(tape.backward(not_scalar), std::invalid_argument);
  }
}

TEST_CASE("per-op gradients match central finite differences") {
  Rng rng(23);
  const double tol = 1e-5;

  SUBCASE("add/sub/mul/scale") {
    for (int rep = 0; rep < 5; ++rep) {
      TensorD a = random_tensor({2, 3, 4}, rng, -2, 2, true);
      TensorD b = random_tensor({2, 3, 4}, rng, -2, 2, true);
      auto r = fd_check({a, b}, [&](TapeD* t) {
        return reduce_mean(mul(add(a, b, t), sub(scale(a, 1.7, t), b, t), t), t);
      });
      CHECK(r.max_err < tol);
    }
  }
  SUBCASE("relu away from the kink") {
    for (int rep = 0; rep < 5; ++rep) {
      TensorD a = random_tensor({3, 5}, rng, 0.05, 2.0, true);
      for (std::size_t i = 0; i < a.values().size(); ++i)
        if (i % 2) a.values()[i] = -a.values()[i];
      auto r = fd_check({a}, [&](TapeD* t) { return reduce_sum(relu(a, t), t); });
      CHECK(r.max_err < tol);
    }
  }
  SUBCASE("log and clamp") {
    TensorD a = random_tensor({4, 4}, rng, 0.1, 3.0, true);
    auto r = fd_check({a}, [&](TapeD* t) {
      return reduce_mean(log_elem(clamp(a, 0.05, 2.5, t), t), t);
    });
    CHECK(r.max_err < tol);
  }
  SUBCASE("softmax") {
    TensorD l = random_tensor({1, 3, 2, 2, 1}, rng, -2, 2, true);
    auto r = fd_check({l}, [&](TapeD* t) {
      TensorD p = softmax_channel(l, t);
      return reduce_mean(mul(p, p, t), t);
    });
    CHECK(r.max_err < tol);
  }
  SUBCASE("conv3d w.r.t. input and kernel") {
    for (int rep = 0; rep < 3; ++rep) {
      TensorD x = random_tensor({1, 2, 5, 4, 4}, rng, -1, 1, true);
      TensorD k = random_tensor({2, 2, 3, 3, 3}, rng, -1, 1, true);
      auto r = fd_check({x, k}, [&](TapeD* t) {
        return reduce_mean(conv3d(x, k, {2, 1, 1}, {1, 1, 0}, t), t);
      });
      CHECK(r.max_err < tol);
    }
  }
  SUBCASE("transposed_conv3d w.r.t. input and kernel") {
    for (int rep = 0; rep < 3; ++rep) {
      TensorD x = random_tensor({1, 2, 3, 3, 2}, rng, -1, 1, true);
      TensorD k = random_tensor({2, 3, 2, 2, 2}, rng, -1, 1, true);
      auto r = fd_check({x, k}, [&](TapeD* t) {
        return reduce_mean(transposed_conv3d(x, k, {2, 2, 2}, t), t);
      });
      CHECK(r.max_err < tol);
    }
  }
  SUBCASE("add_bias and instance_norm") {
    TensorD x = random_tensor({2, 3, 3, 2, 2}, rng, -2, 2, true);
    TensorD bias = random_tensor({3}, rng, -1, 1, true);
    TensorD g = random_tensor({3}, rng, 0.5, 1.5, true);
    TensorD bt = random_tensor({3}, rng, -0.5, 0.5, true);
    auto r = fd_check({x, bias, g, bt}, [&](TapeD* t) {
      TensorD h = instance_norm(add_bias(x, bias, t), g, bt, 1e-5, t);
      return reduce_mean(mul(h, h, t), t);
    });
    CHECK(r.max_err < tol);
  }
  SUBCASE("composite graph") {
    TensorD x = random_tensor({1, 1, 4, 4, 4}, rng, -1, 1, true);
    TensorD k = random_tensor({2, 1, 3, 3, 3}, rng, -1, 1, true);
    TensorD g = random_tensor({2}, rng, 0.5, 1.5, true);
    TensorD bt = random_tensor({2}, rng, -0.5, 0.5, true);
    auto r = fd_check({x, k, g, bt}, [&](TapeD* t) {
      TensorD h = conv3d(x, k, {1, 1, 1}, {1, 1, 1}, t);
      h = instance_norm(h, g, bt, 1e-5, t);
      TensorD p = softmax_channel(h, t);
      return reduce_mean(mul(p, p, t), t);
    });
    CHECK(r.max_err < tol);
  }
}

TEST_CASE("operations are bitwise deterministic across repeats and thread counts") {
  Rng rng(31);
  TensorF x; {
    std::vector<float> vals(1 * 3 * 8 * 8 * 8);
    for (auto& v : vals) v = static_cast<float>(rng.uniform(-1, 1));
    x = TensorF::from({1, 3, 8, 8, 8}, vals);
  }
  TensorF k; {
    std::vector<float> vals(4 * 3 * 3 * 3 * 3);
    for (auto& v : vals) v = static_cast<float>(rng.uniform(-1, 1));
    k = TensorF::from({4, 3, 3, 3, 3}, vals);
  }
  set_threads(1);
  TensorF y1 = conv3d(x, k, {1, 1, 1}, {1, 1, 1});
  TensorF y2 = conv3d(x, k, {1, 1, 1}, {1, 1, 1});
  CHECK(std::memcmp(y1.values().data(), y2.values().data(),
                    sizeof(float) * y1.size()) == 0);
  set_threads(4);
  TensorF y3 = conv3d(x, k, {1, 1, 1}, {1, 1, 1});
  CHECK(std::memcmp(y1.values().data(), y3.values().data(),
                    sizeof(float) * y1.size()) == 0);
  set_threads(1);
}
