#include <catch2/catch_amalgamated.hpp>

#include "sda/nets.hpp"

using namespace sda;

namespace {

Tensor random_images(Rng& rng, int b, int c, int h, int w) {
  Tensor t({b, c, h, w});
  for (auto& v : t.data) v = rng.uniform(-1.0, 1.0);
  return t;
}

ModelSpecs tiny_specs() {
  ModelSpecs s;
  s.encoder = {3, 8, 4, {4}, 6, true};
  s.generator = {3, 8, 4, {4}};
  s.discriminator = {3, 8, 4, {4}};
  s.source_classes = 4;
  return s;
}

}  // namespace

TEST_CASE("model initialization is seeded and copies the pre-trained encoder") {
  ModelSpecs specs = tiny_specs();
  SECTION("same seed twice gives bit-identical parameters") {
    Models a = init_models(specs, 42);
    Models b = init_models(specs, 42);
    for (size_t i = 0; i < a.f_s.size(); ++i) CHECK(a.f_s.tensors[i].data == b.f_s.tensors[i].data);
    for (size_t i = 0; i < a.g_st.size(); ++i)
      CHECK(a.g_st.tensors[i].data == b.g_st.tensors[i].data);
    Models c = init_models(specs, 43);
    CHECK(a.f_s.tensors[0].data != c.f_s.tensors[0].data);
  }
  SECTION("pre-trained F^s seeds F^t and the momentum encoder exactly") {
    Models pre = init_models(specs, 1);
    Models m = init_models(specs, 2, pre.f_s, pre.c_s);
    for (size_t i = 0; i < m.f_t.size(); ++i) {
      CHECK(m.f_t.tensors[i].data == pre.f_s.tensors[i].data);
      CHECK(m.f_t_star.tensors[i].data == m.f_t.tensors[i].data);
    }
  }
}

TEST_CASE("encode obeys its contracts") {
  ModelSpecs specs = tiny_specs();
  Models m = init_models(specs, 7);
  Rng rng(3);
  Tensor imgs = random_images(rng, 5, 3, 8, 4);

  SECTION("rows are L2-normalized when the flag is set") {
    Tensor f = encode_eval(specs.encoder, m.f_s, imgs);
    REQUIRE(f.shape == std::vector<int>{5, 6});
    for (int r = 0; r < 5; ++r) {
      double n = 0.0;
      for (int j = 0; j < 6; ++j) n += f[r * 6 + j] * f[r * 6 + j];
      CHECK(std::sqrt(n) == Catch::Approx(1.0).margin(1e-9));
    }
  }
  SECTION("normalize off leaves raw projections") {
    EncoderSpec raw = specs.encoder;
    raw.normalize_features = false;
    Tensor f = encode_eval(raw, m.f_s, imgs);
    double n = 0.0;
    for (int j = 0; j < 6; ++j) n += f[j] * f[j];
    CHECK(std::fabs(std::sqrt(n) - 1.0) > 1e-6);
  }
  SECTION("identical images produce identical features") {
    Tensor one = random_images(rng, 1, 3, 8, 4);
    Tensor two({2, 3, 8, 4});
    std::copy(one.data.begin(), one.data.end(), two.data.begin());
    std::copy(one.data.begin(), one.data.end(), two.data.begin() + one.numel());
    Tensor f = encode_eval(specs.encoder, m.f_s, two);
    for (int j = 0; j < 6; ++j) CHECK(f[j] == f[6 + j]);
  }
  SECTION("shape mismatch raises") {
    Tensor bad = random_images(rng, 2, 3, 4, 4);
    CHECK_THROWS_AS(encode_eval(specs.encoder, m.f_s, bad), std::invalid_argument);
  }
}

TEST_CASE("translate preserves shape, stays in [-1,1], and has correct gradients") {
  ModelSpecs specs = tiny_specs();
  Models m = init_models(specs, 11);
  Rng rng(5);
  Tensor imgs = random_images(rng, 3, 3, 8, 4);

  Tensor out = translate_eval(specs.generator, m.g_st, imgs);
  CHECK(out.shape == imgs.shape);
  for (double v : out.data) {
    CHECK(v <= 1.0);
    CHECK(v >= -1.0);
  }

  double err = fd_check_params(m.g_st, [&](Tape& t, const TapeParams& tp) {
    return t.mean(translate(t, specs.generator, tp, t.constant(imgs)));
  });
  CHECK(err <= 1e-5);
}

TEST_CASE("discriminator emits one scalar per image and classifier [B,p]") {
  ModelSpecs specs = tiny_specs();
  Models m = init_models(specs, 13);
  Rng rng(17);
  Tensor imgs = random_images(rng, 4, 3, 8, 4);
  Tensor scores = discriminate_eval(specs.discriminator, m.d_s, imgs);
  CHECK(scores.shape == std::vector<int>{4, 1});

  Tape t;
  Value f = encode(t, specs.encoder, put_params(t, m.f_s, false), t.constant(imgs));
  Value logits = classify(t, m.cs_spec(), put_params(t, m.c_s, false), f);
  CHECK(t.val(logits).shape == std::vector<int>{4, 4});
}

TEST_CASE("momentum update is the exact convex combination") {
  ModelSpecs specs = tiny_specs();
  Models m = init_models(specs, 19);
  ParamSet theta = m.f_t;
  for (auto& t : theta.tensors)
    for (auto& v : t.data) v += 1.0;

  SECTION("alpha=0 copies theta") {
    ParamSet star = m.f_t_star;
    momentum_update(star, theta, 0.0);
    for (size_t i = 0; i < star.size(); ++i) CHECK(star.tensors[i].data == theta.tensors[i].data);
  }
  SECTION("alpha=1 leaves theta_star untouched") {
    ParamSet star = m.f_t_star;
    ParamSet before = star;
    momentum_update(star, theta, 1.0);
    for (size_t i = 0; i < star.size(); ++i) CHECK(star.tensors[i].data == before.tensors[i].data);
  }
  SECTION("theta*=0, theta=1, alpha=0.999 -> 0.001") {
    ParamSet star;
    star.add("x", Tensor({2}, 0.0));
    ParamSet th;
    th.add("x", Tensor({2}, 1.0));
    momentum_update(star, th, 0.999);
    CHECK(star.tensors[0][0] == Catch::Approx(0.001).epsilon(1e-12));
  }
  SECTION("per-coordinate values equal the scalar formula exactly") {
    ParamSet star = m.f_t_star;
    ParamSet before = star;
    momentum_update(star, theta, 0.37);
    for (size_t i = 0; i < star.size(); ++i)
      for (int64_t j = 0; j < star.tensors[i].numel(); ++j)
        CHECK(star.tensors[i][j] == 0.37 * before.tensors[i][j] + (1.0 - 0.37) * theta.tensors[i][j]);
  }
  SECTION("alpha outside [0,1] raises") {
    ParamSet star = m.f_t_star;
    CHECK_THROWS_AS(momentum_update(star, theta, -0.1), std::invalid_argument);
    CHECK_THROWS_AS(momentum_update(star, theta, 1.0001), std::invalid_argument);
  }
  SECTION("theta is untouched") {
    ParamSet star = m.f_t_star;
    ParamSet theta_before = theta;
    momentum_update(star, theta, 0.5);
    for (size_t i = 0; i < theta.size(); ++i)
      CHECK(theta.tensors[i].data == theta_before.tensors[i].data);
  }
}
