#include <catch2/catch_amalgamated.hpp>

#include "sda/adam.hpp"
#include "sda/fdcheck.hpp"
#include "sda/rng.hpp"
#include "sda/tape.hpp"
#include "sda/tape_ops.hpp"

using namespace sda;

namespace {

// Random tensor with entries in [-1,1], kept clear of zero so central
// differences stay valid at the relu/leaky kinks and per-coordinate gradients
// do not vanish into the rounding noise of the difference quotient.
Tensor random_away_from_zero(Rng& rng, std::vector<int> shape, double margin = 0.25) {
  Tensor t(std::move(shape));
  for (auto& v : t.data) {
    do {
      v = rng.uniform(-1.0, 1.0);
    } while (std::fabs(v) < margin);
  }
  return t;
}

Tensor random_uniform(Rng& rng, std::vector<int> shape, double lo, double hi) {
  Tensor t(std::move(shape));
  for (auto& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

}  // namespace

TEST_CASE("backward matches hand gradients on the basic examples") {
  SECTION("L = sum(x*x), x=[1,2] -> grad [2,4]") {
    Tape t;
    Value x = t.leaf(Tensor({2}, {1.0, 2.0}), true);
    Value loss = t.sum(t.mul(x, x));
    Tensor g = t.backward(loss).get(x);
    CHECK(g[0] == 2.0);
    CHECK(g[1] == 4.0);
  }
  SECTION("L = mean(x), length 4 -> grad 0.25 each") {
    Tape t;
    Value x = t.leaf(Tensor({4}, 1.5), true);
    Tensor g = t.backward(t.mean(x)).get(x);
    for (int i = 0; i < 4; ++i) CHECK(g[i] == 0.25);
  }
  SECTION("relu dead zone passes zero gradient") {
    Tape t;
    Value x = t.leaf(Tensor({1}, {-3.0}), true);
    Tensor g = t.backward(t.sum(t.relu(x))).get(x);
    CHECK(g[0] == 0.0);
  }
  SECTION("non-scalar root is an error") {
    Tape t;
    Value x = t.leaf(Tensor({3}, 1.0), true);
    CHECK_THROWS_AS(t.backward(x), std::invalid_argument);
  }
  SECTION("disconnected parameter reads back as zero gradient") {
    Tape t;
    Value x = t.leaf(Tensor({2}, {1.0, 2.0}), true);
    Value unused = t.leaf(Tensor({3}, 5.0), true);
    Gradients g = t.backward(t.sum(x));
    Tensor gu = g.get(unused);
    CHECK(gu.shape == std::vector<int>{3});
    for (int i = 0; i < 3; ++i) CHECK(gu[i] == 0.0);
  }
}

TEST_CASE("forward and backward are bit-deterministic for a fixed tape") {
  auto run = [] {
    Rng rng(99);
    Tape t;
    Value x = t.leaf(random_away_from_zero(rng, {2, 3, 8, 4}), true);
    Value w = t.leaf(random_away_from_zero(rng, {4, 3, 3, 3}), true);
    Value b = t.leaf(random_away_from_zero(rng, {4}), true);
    Value h = t.relu(t.conv2d(x, w, b, 2));
    Value f = t.global_average_pool(h);
    Value loss = t.mean(t.square(f));
    Gradients g = t.backward(loss);
    return std::tuple{t.val(loss)[0], g.get(x), g.get(w), g.get(b)};
  };
  auto [l1, gx1, gw1, gb1] = run();
  auto [l2, gx2, gw2, gb2] = run();
  CHECK(l1 == l2);
  CHECK(gx1.data == gx2.data);
  CHECK(gw1.data == gw2.data);
  CHECK(gb1.data == gb2.data);
}

TEST_CASE("conv2d output shape is ceil(H/s) x ceil(W/s)") {
  Rng rng(7);
  for (int h : {4, 5, 8, 9}) {
    for (int w : {3, 4, 7}) {
      for (int s : {1, 2}) {
        Tape t;
        Value x = t.constant(random_uniform(rng, {1, 2, h, w}, -1, 1));
        Value k = t.constant(random_uniform(rng, {3, 2, 3, 3}, -1, 1));
        Value y = t.conv2d(x, k, Value{}, s);
        CHECK(t.val(y).dim(2) == (h + s - 1) / s);
        CHECK(t.val(y).dim(3) == (w + s - 1) / s);
      }
    }
  }
}

TEST_CASE("every primitive passes finite-difference checks on seeded random inputs") {
  constexpr int kTrials = 100;
  constexpr double kTol = 1e-5;
  Rng rng(2024);

  auto check = [&](const char* name, const TapeProgram& prog, const Tensor& x) {
    double err = finite_diff_check(prog, x, 1e-6);
    INFO(name);
    CHECK(err <= kTol);
  };

  for (int trial = 0; trial < kTrials; ++trial) {
    Tensor a = random_away_from_zero(rng, {2, 3});
    Tensor a2 = random_away_from_zero(rng, {2, 3});
    Tensor rowv = random_away_from_zero(rng, {3});
    Tensor colv = random_away_from_zero(rng, {2, 1});
    // positive conv operands: kernel-gradient coordinates are then sums of
    // positive terms and cannot cancel down into the difference-quotient noise
    Tensor img = random_uniform(rng, {2, 2, 4, 6}, 0.25, 1.0);
    Tensor ker = random_uniform(rng, {3, 2, 3, 3}, 0.25, 1.0);
    Tensor bias = random_uniform(rng, {3}, 0.25, 1.0);
    Tensor pos = random_uniform(rng, {2, 3}, 0.5, 1.5);
    Tensor mat = random_away_from_zero(rng, {3, 4});

    check("add.lhs", [&](Tape& t, Value x) { return t.sum(t.square(t.add(x, t.constant(a)))); }, a);
    check("add.row", [&](Tape& t, Value x) { return t.sum(t.square(t.add(t.constant(a), x))); },
          rowv);
    check("add.col", [&](Tape& t, Value x) { return t.sum(t.square(t.add(t.constant(a), x))); },
          colv);
    check("sub.rhs", [&](Tape& t, Value x) { return t.sum(t.square(t.sub(t.constant(a), x))); }, a);
    check("mul.lhs", [&](Tape& t, Value x) { return t.sum(t.square(t.mul(x, t.constant(a)))); }, a);
    check("mul.col", [&](Tape& t, Value x) { return t.sum(t.square(t.mul(t.constant(a), x))); },
          colv);
    check("scalar-mul", [&](Tape& t, Value x) { return t.sum(t.square(t.smul(x, -1.7))); }, a);
    check("matmul.lhs",
          [&](Tape& t, Value x) { return t.sum(t.square(t.matmul(x, t.constant(mat)))); }, a);
    check("matmul.rhs",
          [&](Tape& t, Value x) { return t.sum(t.square(t.matmul(t.constant(a), x))); }, mat);
    for (int stride : {1, 2}) {
      check("conv2d.x",
            [&](Tape& t, Value x) {
              return t.sum(t.square(t.conv2d(x, t.constant(ker), t.constant(bias), stride)));
            },
            img);
      check("conv2d.w",
            [&](Tape& t, Value x) {
              return t.sum(t.square(t.conv2d(t.constant(img), x, t.constant(bias), stride)));
            },
            ker);
      check("conv2d.b",
            [&](Tape& t, Value x) {
              return t.sum(t.square(t.conv2d(t.constant(img), t.constant(ker), x, stride)));
            },
            bias);
    }
    check("upsample2x", [&](Tape& t, Value x) { return t.sum(t.square(t.upsample2x(x))); }, img);
    check("relu", [&](Tape& t, Value x) { return t.sum(t.square(t.relu(x))); }, a);
    check("leaky-relu", [&](Tape& t, Value x) { return t.sum(t.square(t.leaky_relu(x))); }, a);
    check("tanh", [&](Tape& t, Value x) { return t.sum(t.square(t.tanh(x))); }, a);
    check("exp", [&](Tape& t, Value x) { return t.sum(t.square(t.exp(x))); }, a);
    check("log", [&](Tape& t, Value x) { return t.sum(t.square(t.log(x))); }, pos);
    check("square", [&](Tape& t, Value x) { return t.sum(t.square(t.square(x))); }, a);
    check("sum", [&](Tape& t, Value x) { return t.square(t.sum(x)); }, a);
    check("mean", [&](Tape& t, Value x) { return t.square(t.mean(x)); }, a);
    check("global-average-pool",
          [&](Tape& t, Value x) { return t.sum(t.square(t.global_average_pool(x))); }, img);
    check("concat",
          [&](Tape& t, Value x) {
            Value c = t.constant(a);
            return t.sum(t.square(t.concat({c, x, c}, 0)));
          },
          a);
    check("slice", [&](Tape& t, Value x) { return t.sum(t.square(t.slice(x, 1, 1, 2))); }, a);
    check("l2-normalize-rows",
          [&](Tape& t, Value x) {
            return t.sum(t.square(t.sub(t.l2_normalize_rows(x), t.constant(a2))));
          },
          a);
  }
}

TEST_CASE("adam matches the bias-corrected update") {
  SECTION("zero gradient leaves parameters unchanged") {
    std::vector<Tensor> p{Tensor({2}, {1.0, -2.0})};
    std::vector<Tensor> g{Tensor({2})};
    AdamState s = AdamState::init(p);
    adam_step(p, g, s, 0.001);
    CHECK(p[0][0] == 1.0);
    CHECK(p[0][1] == -2.0);
    CHECK(s.step == 1);
  }
  SECTION("first step with g=1 moves by ~lr") {
    std::vector<Tensor> p{Tensor({1}, {1.0})};
    std::vector<Tensor> g{Tensor({1}, {1.0})};
    AdamState s = AdamState::init(p);
    adam_step(p, g, s, 0.001);
    // hand evaluation at t=1: mhat=1, vhat=1 -> delta = lr/(1+eps)
    double expected = 1.0 - 0.001 / (1.0 + 1e-8);
    CHECK(p[0][0] == Catch::Approx(expected).epsilon(1e-14));
  }
  SECTION("identical calls from identical state give identical outputs") {
    Rng rng(5);
    std::vector<Tensor> p1{random_away_from_zero(rng, {3, 2})};
    std::vector<Tensor> g{random_away_from_zero(rng, {3, 2})};
    std::vector<Tensor> p2 = p1;
    AdamState s1 = AdamState::init(p1);
    s1.m[0][0] = 0.3;
    s1.v[0][0] = 0.05;
    AdamState s2 = s1;
    adam_step(p1, g, s1, 0.01);
    adam_step(p2, g, s2, 0.01);
    CHECK(p1[0].data == p2[0].data);
    CHECK(s1.m[0].data == s2.m[0].data);
    CHECK(s1.v[0].data == s2.v[0].data);
  }
  SECTION("shape mismatch is an error") {
    std::vector<Tensor> p{Tensor({2})};
    std::vector<Tensor> g{Tensor({3})};
    AdamState s = AdamState::init(p);
    CHECK_THROWS_AS(adam_step(p, g, s, 0.001), std::invalid_argument);
  }
}

TEST_CASE("finite_diff_check harness behaves as specified") {
  Rng rng(11);
  SECTION("f = sum(x^2) checks out to 1e-7") {
    Tensor x = random_uniform(rng, {5}, -2.0, 2.0);
    double err =
        finite_diff_check([](Tape& t, Value v) { return t.sum(t.square(v)); }, x, 1e-6);
    CHECK(err <= 1e-7);
  }
  SECTION("linear functions agree at machine-precision scale") {
    Tensor x = random_uniform(rng, {6}, -2.0, 2.0);
    double err = finite_diff_check([](Tape& t, Value v) { return t.sum(t.smul(v, 3.0)); }, x, 1e-6);
    CHECK(err <= 1e-9);
  }
  SECTION("non-finite values raise") {
    Tensor x({2}, {-1.0, 0.5});  // log of a negative -> NaN
    CHECK_THROWS([&] {
      finite_diff_check([](Tape& t, Value v) { return t.sum(t.log(v)); }, x, 1e-6);
    }());
  }
}

TEST_CASE("composite tape ops evaluate correctly") {
  SECTION("softmax rows sum to one and cross-entropy of uniform logits is ln(classes)") {
    Tape t;
    Value z = t.constant(Tensor({3, 4}, 0.7));
    Value p = ops::softmax_rows(t, z);
    for (int r = 0; r < 3; ++r) {
      double s = 0.0;
      for (int c = 0; c < 4; ++c) s += t.val(p)[r * 4 + c];
      CHECK(s == Catch::Approx(1.0).margin(1e-12));
    }
    Value ce = ops::cross_entropy_mean(t, z, {0, 1, 2});
    CHECK(t.val(ce)[0] == Catch::Approx(std::log(4.0)).margin(1e-12));
  }
  SECTION("clamp_prob pins values into [eps, 1-eps]") {
    Tape t;
    Value p = t.constant(Tensor({1, 3}, {0.0, 0.4, 1.0}));
    Value c = ops::clamp_prob(t, p);
    CHECK(t.val(c)[0] == Catch::Approx(1e-7).margin(1e-20));
    CHECK(t.val(c)[1] == Catch::Approx(0.4).margin(1e-15));
    CHECK(t.val(c)[2] == Catch::Approx(1.0 - 1e-7).margin(1e-20));
  }
  SECTION("row_norms matches hand L2 with eps") {
    Tape t;
    Value x = t.constant(Tensor({2, 2}, {3.0, 4.0, 0.0, 0.0}));
    Value n = ops::row_norms(t, x);
    CHECK(t.val(n)[0] == Catch::Approx(5.0).epsilon(1e-12));
    CHECK(t.val(n)[1] == Catch::Approx(1e-6).epsilon(1e-6));  // sqrt(eps)
  }
  SECTION("gather_rows picks rows in order") {
    Tape t;
    Value x = t.constant(Tensor({3, 2}, {0, 1, 10, 11, 20, 21}));
    Value g = ops::gather_rows(t, x, {2, 0});
    CHECK(t.val(g).data == std::vector<double>{20, 21, 0, 1});
  }
}
