#pragma once

#include <functional>
#include <string>
#include <vector>

#include "sda/fdcheck.hpp"
#include "sda/rng.hpp"
#include "sda/tape.hpp"

namespace sda {

// Desk-scale stand-ins for the paper-role networks: stride-2 conv encoders
// with global average pooling, encoder/decoder generators with
// nearest-neighbor upsampling, patch discriminators, linear classifiers.

struct EncoderSpec {
  int channels = 3;
  int height = 24;
  int width = 12;
  std::vector<int> widths{8, 16, 32};
  int feature_dim = 32;
  bool normalize_features = true;

  void validate() const {
    if (feature_dim < 2) throw std::invalid_argument("EncoderSpec: feature_dim must be >= 2");
    if (widths.empty()) throw std::invalid_argument("EncoderSpec: widths must be non-empty");
  }
};

struct GeneratorSpec {
  int channels = 3;
  int height = 24;
  int width = 12;
  std::vector<int> widths{8, 16};

  void validate() const {
    if (widths.empty()) throw std::invalid_argument("GeneratorSpec: widths must be non-empty");
    int f = 1 << static_cast<int>(widths.size());
    if (height % f != 0 || width % f != 0)
      throw std::invalid_argument("GeneratorSpec: image dims must be divisible by " +
                                  std::to_string(f));
  }
};

struct DiscriminatorSpec {
  int channels = 3;
  int height = 24;
  int width = 12;
  std::vector<int> widths{8, 16};

  void validate() const {
    if (widths.empty()) throw std::invalid_argument("DiscriminatorSpec: widths must be non-empty");
  }
};

struct ClassifierSpec {
  int input_dim = 32;
  int classes = 2;

  void validate() const {
    if (classes < 1) throw std::invalid_argument("ClassifierSpec: classes must be >= 1");
  }
};

// Ordered, named parameter tensors. Order is the contract for optimizer
// state, checkpoints and gradient extraction.
struct ParamSet {
  std::vector<std::string> names;
  std::vector<Tensor> tensors;

  void add(std::string name, Tensor t) {
    names.push_back(std::move(name));
    tensors.push_back(std::move(t));
  }

  size_t size() const { return tensors.size(); }

  int index(const std::string& name) const {
    for (size_t i = 0; i < names.size(); ++i)
      if (names[i] == name) return static_cast<int>(i);
    return -1;
  }

  const Tensor& at(const std::string& name) const {
    int i = index(name);
    if (i < 0) throw std::invalid_argument("ParamSet: no parameter named " + name);
    return tensors[static_cast<size_t>(i)];
  }

  Tensor& at(const std::string& name) {
    int i = index(name);
    if (i < 0) throw std::invalid_argument("ParamSet: no parameter named " + name);
    return tensors[static_cast<size_t>(i)];
  }

  bool same_layout(const ParamSet& o) const {
    if (names != o.names) return false;
    for (size_t i = 0; i < tensors.size(); ++i)
      if (tensors[i].shape != o.tensors[i].shape) return false;
    return true;
  }
};

inline Tensor glorot_uniform(Rng& rng, std::vector<int> shape, int fan_in, int fan_out) {
  double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Tensor t(std::move(shape));
  for (auto& v : t.data) v = rng.uniform(-a, a);
  return t;
}

inline ParamSet init_encoder(const EncoderSpec& spec, Rng& rng) {
  spec.validate();
  ParamSet p;
  int in_c = spec.channels;
  for (size_t i = 0; i < spec.widths.size(); ++i) {
    int out_c = spec.widths[i];
    p.add("conv" + std::to_string(i) + ".w",
          glorot_uniform(rng, {out_c, in_c, 3, 3}, in_c * 9, out_c * 9));
    p.add("conv" + std::to_string(i) + ".b", Tensor({out_c}));
    in_c = out_c;
  }
  p.add("proj.w", glorot_uniform(rng, {in_c, spec.feature_dim}, in_c, spec.feature_dim));
  p.add("proj.b", Tensor({spec.feature_dim}));
  return p;
}

inline ParamSet init_generator(const GeneratorSpec& spec, Rng& rng) {
  spec.validate();
  ParamSet p;
  int in_c = spec.channels;
  for (size_t i = 0; i < spec.widths.size(); ++i) {
    int out_c = spec.widths[i];
    p.add("enc" + std::to_string(i) + ".w",
          glorot_uniform(rng, {out_c, in_c, 3, 3}, in_c * 9, out_c * 9));
    p.add("enc" + std::to_string(i) + ".b", Tensor({out_c}));
    in_c = out_c;
  }
  for (size_t i = spec.widths.size() - 1; i >= 1; --i) {
    int out_c = spec.widths[i - 1];
    p.add("dec" + std::to_string(spec.widths.size() - 1 - i) + ".w",
          glorot_uniform(rng, {out_c, in_c, 3, 3}, in_c * 9, out_c * 9));
    p.add("dec" + std::to_string(spec.widths.size() - 1 - i) + ".b", Tensor({out_c}));
    in_c = out_c;
  }
  p.add("out.w", glorot_uniform(rng, {spec.channels, in_c, 3, 3}, in_c * 9, spec.channels * 9));
  p.add("out.b", Tensor({spec.channels}));
  return p;
}

inline ParamSet init_discriminator(const DiscriminatorSpec& spec, Rng& rng) {
  spec.validate();
  ParamSet p;
  int in_c = spec.channels;
  for (size_t i = 0; i < spec.widths.size(); ++i) {
    int out_c = spec.widths[i];
    p.add("conv" + std::to_string(i) + ".w",
          glorot_uniform(rng, {out_c, in_c, 3, 3}, in_c * 9, out_c * 9));
    p.add("conv" + std::to_string(i) + ".b", Tensor({out_c}));
    in_c = out_c;
  }
  p.add("score.w", glorot_uniform(rng, {1, in_c, 3, 3}, in_c * 9, 9));
  p.add("score.b", Tensor({1}));
  return p;
}

inline ParamSet init_classifier(const ClassifierSpec& spec, Rng& rng) {
  spec.validate();
  ParamSet p;
  p.add("w", glorot_uniform(rng, {spec.input_dim, spec.classes}, spec.input_dim, spec.classes));
  p.add("b", Tensor({spec.classes}));
  return p;
}

// A parameter set placed on a tape, one leaf per tensor.
struct TapeParams {
  const ParamSet* source = nullptr;
  std::vector<Value> values;

  Value at(const std::string& name) const {
    int i = source->index(name);
    if (i < 0) throw std::invalid_argument("TapeParams: no parameter named " + name);
    return values[static_cast<size_t>(i)];
  }
};

inline TapeParams put_params(Tape& t, const ParamSet& p, bool trainable) {
  TapeParams tp;
  tp.source = &p;
  tp.values.reserve(p.size());
  for (const Tensor& tensor : p.tensors) tp.values.push_back(t.leaf(tensor, trainable));
  return tp;
}

// Gradients in ParamSet order; zeros for parameters the loss never touched.
inline std::vector<Tensor> grads_of(const Gradients& g, const TapeParams& tp) {
  std::vector<Tensor> out;
  out.reserve(tp.values.size());
  for (Value v : tp.values) out.push_back(g.get(v));
  return out;
}

inline void check_image_shape(const Tensor& images, int c, int h, int w, const char* who) {
  if (images.rank() != 4 || images.dim(1) != c || images.dim(2) != h || images.dim(3) != w)
    throw std::invalid_argument(std::string(who) + ": expected [B," + std::to_string(c) + "," +
                                std::to_string(h) + "," + std::to_string(w) + "], got " +
                                images.shape_str());
}

// f = normalize(proj(gap(conv stack(x)))) per the encoder spec.
inline Value encode(Tape& t, const EncoderSpec& spec, const TapeParams& p, Value images) {
  check_image_shape(t.val(images), spec.channels, spec.height, spec.width, "encode");
  Value h = images;
  for (size_t i = 0; i < spec.widths.size(); ++i) {
    std::string s = std::to_string(i);
    h = t.relu(t.conv2d(h, p.at("conv" + s + ".w"), p.at("conv" + s + ".b"), 2));
  }
  Value feat = t.global_average_pool(h);
  Value proj = t.add(t.matmul(feat, p.at("proj.w")), p.at("proj.b"));
  return spec.normalize_features ? t.l2_normalize_rows(proj) : proj;
}

inline Value translate(Tape& t, const GeneratorSpec& spec, const TapeParams& p, Value images) {
  check_image_shape(t.val(images), spec.channels, spec.height, spec.width, "translate");
  Value h = images;
  for (size_t i = 0; i < spec.widths.size(); ++i) {
    std::string s = std::to_string(i);
    h = t.relu(t.conv2d(h, p.at("enc" + s + ".w"), p.at("enc" + s + ".b"), 2));
  }
  for (size_t i = 0; i + 1 < spec.widths.size(); ++i) {
    std::string s = std::to_string(i);
    h = t.upsample2x(h);
    h = t.relu(t.conv2d(h, p.at("dec" + s + ".w"), p.at("dec" + s + ".b"), 1));
  }
  h = t.upsample2x(h);
  return t.tanh(t.conv2d(h, p.at("out.w"), p.at("out.b"), 1));
}

// One scalar per image: global-average-pooled patch scores.
inline Value discriminate(Tape& t, const DiscriminatorSpec& spec, const TapeParams& p,
                          Value images) {
  check_image_shape(t.val(images), spec.channels, spec.height, spec.width, "discriminate");
  Value h = images;
  for (size_t i = 0; i < spec.widths.size(); ++i) {
    std::string s = std::to_string(i);
    h = t.leaky_relu(t.conv2d(h, p.at("conv" + s + ".w"), p.at("conv" + s + ".b"), 2));
  }
  Value patch = t.conv2d(h, p.at("score.w"), p.at("score.b"), 1);
  return t.global_average_pool(patch);  // [B,1]
}

inline Value classify(Tape& t, const ClassifierSpec& spec, const TapeParams& p, Value features) {
  const Tensor& f = t.val(features);
  if (f.rank() != 2 || f.dim(1) != spec.input_dim)
    throw std::invalid_argument("classify: expected [B," + std::to_string(spec.input_dim) +
                                "], got " + f.shape_str());
  return t.add(t.matmul(features, p.at("w")), p.at("b"));
}

// Gradient-free forward passes for evaluation paths.
inline Tensor encode_eval(const EncoderSpec& spec, const ParamSet& p, const Tensor& images) {
  Tape t;
  return t.val(encode(t, spec, put_params(t, p, false), t.constant(images)));
}

inline Tensor translate_eval(const GeneratorSpec& spec, const ParamSet& p, const Tensor& images) {
  Tape t;
  return t.val(translate(t, spec, put_params(t, p, false), t.constant(images)));
}

inline Tensor discriminate_eval(const DiscriminatorSpec& spec, const ParamSet& p,
                                const Tensor& images) {
  Tape t;
  return t.val(discriminate(t, spec, put_params(t, p, false), t.constant(images)));
}

// theta_star <- alpha * theta_star + (1 - alpha) * theta, elementwise.
inline void momentum_update(ParamSet& theta_star, const ParamSet& theta, double alpha) {
  if (alpha < 0.0 || alpha > 1.0)
    throw std::invalid_argument("momentum_update: alpha must be in [0,1]");
  if (!theta_star.same_layout(theta))
    throw std::invalid_argument("momentum_update: parameter layouts differ");
  for (size_t i = 0; i < theta_star.size(); ++i) {
    Tensor& a = theta_star.tensors[i];
    const Tensor& b = theta.tensors[i];
    for (int64_t j = 0; j < a.numel(); ++j) a[j] = alpha * a[j] + (1.0 - alpha) * b[j];
  }
}

// Max finite-difference error of a scalar loss over every tensor of a
// parameter set, checked one tensor at a time with the others held constant.
inline double fd_check_params(const ParamSet& params,
                              const std::function<Value(Tape&, const TapeParams&)>& loss,
                              double h = 1e-6) {
  double worst = 0.0;
  for (size_t i = 0; i < params.size(); ++i) {
    TapeProgram prog = [&](Tape& t, Value x) {
      TapeParams tp;
      tp.source = &params;
      for (size_t j = 0; j < params.size(); ++j)
        tp.values.push_back(j == i ? x : t.leaf(params.tensors[j], false));
      return loss(t, tp);
    };
    worst = std::max(worst, finite_diff_check(prog, params.tensors[i], h));
  }
  return worst;
}

// All nine networks of the framework plus the specs they were built from.
struct ModelSpecs {
  EncoderSpec encoder;
  GeneratorSpec generator;
  DiscriminatorSpec discriminator;
  int source_classes = 16;
};

struct Models {
  ModelSpecs specs;
  ParamSet f_s, f_t, f_t_star;  // source, target, momentum encoders
  ParamSet c_s, c_t;            // source and unified classifiers
  ParamSet g_st, g_ts;          // generators
  ParamSet d_s, d_t;            // discriminators
  int ct_classes = 0;           // current width of c_t

  ClassifierSpec cs_spec() const { return {specs.encoder.feature_dim, specs.source_classes}; }
  ClassifierSpec ct_spec() const { return {specs.encoder.feature_dim, ct_classes}; }
};

inline Models init_models(const ModelSpecs& specs, uint64_t seed) {
  Models m;
  m.specs = specs;
  Rng rng(seed);
  m.f_s = init_encoder(specs.encoder, rng);
  m.f_t = init_encoder(specs.encoder, rng);
  m.f_t_star = m.f_t;
  m.c_s = init_classifier({specs.encoder.feature_dim, specs.source_classes}, rng);
  m.ct_classes = specs.source_classes;
  m.c_t = init_classifier({specs.encoder.feature_dim, m.ct_classes}, rng);
  m.g_st = init_generator(specs.generator, rng);
  m.g_ts = init_generator(specs.generator, rng);
  m.d_s = init_discriminator(specs.discriminator, rng);
  m.d_t = init_discriminator(specs.discriminator, rng);
  return m;
}

// Pre-trained variant: F^t and F^t_* start as exact copies of F^s.
inline Models init_models(const ModelSpecs& specs, uint64_t seed, const ParamSet& pretrained_f_s,
                          const ParamSet& pretrained_c_s) {
  Models m = init_models(specs, seed);
  m.f_s = pretrained_f_s;
  m.f_t = pretrained_f_s;
  m.f_t_star = pretrained_f_s;
  m.c_s = pretrained_c_s;
  return m;
}

}  // namespace sda
