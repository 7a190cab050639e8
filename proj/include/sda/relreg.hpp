#pragma once

#include <span>
#include <string>
#include <vector>

#include "sda/nets.hpp"
#include "sda/tape_ops.hpp"

// Loss terms: encoder objectives (cross-entropy + batch-hard triplet),
// LSGAN adversarial terms, cycle and appearance reconstruction, the
// softmax-triplet relation measures with the online relation-consistency
// loss, and the alternative regularizers used in ablation arms.

namespace sda::relreg {

struct LossWeights {
  double lambda_rc = 1.0;
  double lambda_adv = 1.0;
  double lambda_cyc = 10.0;
  double lambda_apr = 0.5;
  double margin = 0.3;

  void validate() const {
    if (lambda_rc < 0 || lambda_adv < 0 || lambda_cyc < 0 || lambda_apr < 0 || margin < 0)
      throw std::invalid_argument("LossWeights: weights must be non-negative");
  }
};

enum class RcVariant { kRc, kPc, kBrc, kContrastive, kClassification, kTriplet, kNone };

inline const char* rc_variant_name(RcVariant v) {
  switch (v) {
    case RcVariant::kRc: return "rc";
    case RcVariant::kPc: return "pc";
    case RcVariant::kBrc: return "brc";
    case RcVariant::kContrastive: return "contrastive";
    case RcVariant::kClassification: return "classification";
    case RcVariant::kTriplet: return "triplet";
    case RcVariant::kNone: return "none";
  }
  return "?";
}

// Hardest positive (max distance, same label) and hardest negative (min
// distance, other label) per anchor. Squared Euclidean distances; ties go to
// the lowest index. Indices are data: gradients never flow through selection.
struct TripletIndices {
  std::vector<int> positive;
  std::vector<int> negative;
};

inline TripletIndices hardest_triplets(const Tensor& features, const std::vector<int>& labels) {
  if (features.rank() != 2) throw std::invalid_argument("hardest_triplets: features must be [B,d]");
  int b = features.dim(0), d = features.dim(1);
  if (static_cast<int>(labels.size()) != b)
    throw std::invalid_argument("hardest_triplets: label count mismatch");
  TripletIndices out;
  out.positive.assign(static_cast<size_t>(b), -1);
  out.negative.assign(static_cast<size_t>(b), -1);
  std::vector<double> dist2(static_cast<size_t>(b) * b, 0.0);
  for (int i = 0; i < b; ++i)
    for (int j = 0; j < b; ++j) {
      double s = 0.0;
      const double* fi = &features.data[static_cast<size_t>(i) * d];
      const double* fj = &features.data[static_cast<size_t>(j) * d];
      for (int k = 0; k < d; ++k) {
        double diff = fi[k] - fj[k];
        s += diff * diff;
      }
      dist2[static_cast<size_t>(i) * b + j] = s;
    }
  for (int i = 0; i < b; ++i) {
    double best_pos = -1.0, best_neg = 0.0;
    for (int j = 0; j < b; ++j) {
      if (j == i) continue;
      double dd = dist2[static_cast<size_t>(i) * b + j];
      if (labels[static_cast<size_t>(j)] == labels[static_cast<size_t>(i)]) {
        if (out.positive[static_cast<size_t>(i)] < 0 || dd > best_pos) {
          best_pos = dd;
          out.positive[static_cast<size_t>(i)] = j;
        }
      } else {
        if (out.negative[static_cast<size_t>(i)] < 0 || dd < best_neg) {
          best_neg = dd;
          out.negative[static_cast<size_t>(i)] = j;
        }
      }
    }
    if (out.positive[static_cast<size_t>(i)] < 0)
      throw std::invalid_argument("hardest_triplets: label " +
                                  std::to_string(labels[static_cast<size_t>(i)]) +
                                  " has no positive in the batch");
    if (out.negative[static_cast<size_t>(i)] < 0)
      throw std::invalid_argument("hardest_triplets: label " +
                                  std::to_string(labels[static_cast<size_t>(i)]) +
                                  " has no negative in the batch");
  }
  return out;
}

// Mean hinged batch-hard triplet term (||f-f_p|| + m - ||f-f_n||)^+ over
// anchors, with the triplet picked on the current feature values.
inline Value triplet_term(Tape& t, Value features, const std::vector<int>& labels, double margin) {
  TripletIndices tri = hardest_triplets(t.val(features), labels);
  Value fp = ops::gather_rows(t, features, tri.positive);
  Value fn = ops::gather_rows(t, features, tri.negative);
  Value dp = ops::row_norms(t, t.sub(features, fp));
  Value dn = ops::row_norms(t, t.sub(features, fn));
  Value m = t.constant(Tensor(t.val(dp).shape, margin));
  return t.mean(t.relu(t.add(t.sub(dp, dn), m)));
}

// Classification + triplet encoder objective shared by the source and target
// encoders.
inline Value encoder_objective(Tape& t, Value features, Value logits,
                               const std::vector<int>& labels, const LossWeights& w) {
  Value ce = ops::cross_entropy_mean(t, logits, labels);
  return t.add(ce, triplet_term(t, features, labels, w.margin));
}

// Softmax-triplet relation score: exp(<f,f_p>/tau) over the sum with the
// negative similarity, computed max-shifted.
inline double relation_score(std::span<const double> f, std::span<const double> f_p,
                             std::span<const double> f_n, double tau = 1.0) {
  if (f.size() != f_p.size() || f.size() != f_n.size())
    throw std::invalid_argument("relation_score: dimension mismatch");
  double sp = 0.0, sn = 0.0;
  for (size_t k = 0; k < f.size(); ++k) {
    sp += f[k] * f_p[k];
    sn += f[k] * f_n[k];
  }
  sp /= tau;
  sn /= tau;
  double m = std::max(sp, sn);
  double ep = std::exp(sp - m), en = std::exp(sn - m);
  return ep / (ep + en);
}

// Relation scores for every anchor of a feature batch under fixed triplet
// indices -> [B,1].
inline Value relation_scores(Tape& t, Value features, const TripletIndices& tri, double tau) {
  Value fp = ops::gather_rows(t, features, tri.positive);
  Value fn = ops::gather_rows(t, features, tri.negative);
  Value sp = t.smul(ops::row_dot(t, features, fp), 1.0 / tau);
  Value sn = t.smul(ops::row_dot(t, features, fn), 1.0 / tau);
  Tensor shift(t.val(sp).shape);
  for (int64_t i = 0; i < shift.numel(); ++i)
    shift[i] = std::max(t.val(sp)[i], t.val(sn)[i]);
  Value m = t.constant(shift);
  Value ep = t.exp(t.sub(sp, m));
  Value en = t.exp(t.sub(sn, m));
  return t.mul(ep, ops::reciprocal(t, t.add(ep, en)));
}

inline Tensor relation_scores_values(const Tensor& features, const TripletIndices& tri,
                                     double tau) {
  int b = features.dim(0), d = features.dim(1);
  Tensor out({b, 1});
  for (int i = 0; i < b; ++i) {
    std::span<const double> f(&features.data[static_cast<size_t>(i) * d], static_cast<size_t>(d));
    std::span<const double> fp(&features.data[static_cast<size_t>(tri.positive[i]) * d],
                               static_cast<size_t>(d));
    std::span<const double> fn(&features.data[static_cast<size_t>(tri.negative[i]) * d],
                               static_cast<size_t>(d));
    out[i] = relation_score(f, fp, fn, tau);
  }
  return out;
}

// Soft binary cross-entropy with target q; p is clamped into
// [1e-7, 1-1e-7] before the logs.
inline double soft_bce(double p, double q) {
  p = std::min(std::max(p, ops::kProbClamp), 1.0 - ops::kProbClamp);
  return -q * std::log(p) - (1.0 - q) * std::log(1.0 - p);
}

// Mean soft BCE of on-tape predictions p in [0,1] against a constant target.
inline Value soft_bce_mean(Tape& t, Value p, const Tensor& q) {
  check_same_shape(t.val(p), q, "soft_bce_mean");
  Value pc = ops::clamp_prob(t, p);
  Tensor one_minus_q(q.shape);
  for (int64_t i = 0; i < q.numel(); ++i) one_minus_q[i] = 1.0 - q[i];
  Value ones = t.constant(Tensor(q.shape, 1.0));
  Value term = t.add(t.mul(t.log(pc), t.constant(q)),
                     t.mul(t.log(t.sub(ones, pc)), t.constant(one_minus_q)));
  return t.smul(t.mean(term), -1.0);
}

// Relation-consistency loss against an already-translated batch. Triplets are
// mined once on the source features and reused on the translated side; the
// source relation scores enter only as detached soft targets.
inline Value rc_loss_on_translated(Tape& t, const EncoderSpec& enc, const TapeParams& f_s,
                                   const TapeParams& f_meas, const Tensor& source_images,
                                   Value translated, const std::vector<int>& labels, double tau) {
  Value src_feats = encode(t, enc, f_s, t.constant(source_images));
  TripletIndices tri = hardest_triplets(t.val(src_feats), labels);
  Tensor r_src = relation_scores_values(t.val(src_feats), tri, tau);
  Value feats_tr = encode(t, enc, f_meas, translated);
  Value r_tr = relation_scores(t, feats_tr, tri, tau);
  return soft_bce_mean(t, r_tr, r_src);
}

inline Value relation_consistency_loss(Tape& t, const Tensor& source_images,
                                       const std::vector<int>& labels, const EncoderSpec& enc,
                                       const TapeParams& f_s, const TapeParams& f_meas,
                                       const GeneratorSpec& gen, const TapeParams& g_st,
                                       double tau) {
  Value translated = translate(t, gen, g_st, t.constant(source_images));
  return rc_loss_on_translated(t, enc, f_s, f_meas, source_images, translated, labels, tau);
}

// LSGAN terms on raw scores: D drives reals to 1 and fakes to 0, G drives
// fakes to 1; both sides minimize their own term.
inline Value lsgan_generator_term(Tape& t, Value fake_scores) {
  Value ones = t.constant(Tensor(t.val(fake_scores).shape, 1.0));
  return t.mean(t.square(t.sub(fake_scores, ones)));
}

inline Value lsgan_discriminator_term(Tape& t, Value real_scores, Value fake_scores) {
  Value ones = t.constant(Tensor(t.val(real_scores).shape, 1.0));
  Value real_part = t.mean(t.square(t.sub(real_scores, ones)));
  return t.add(real_part, t.mean(t.square(fake_scores)));
}

struct AdvTerms {
  Value generator;
  Value discriminator;
};

// Both LSGAN sides for one domain; fakes are gradient-detached inside the
// discriminator term so the terms can safely share a tape.
inline AdvTerms adversarial_losses(Tape& t, Value reals, Value fakes,
                                   const DiscriminatorSpec& spec, const TapeParams& d) {
  AdvTerms terms;
  terms.generator = lsgan_generator_term(t, discriminate(t, spec, d, fakes));
  Value real_scores = discriminate(t, spec, d, reals);
  Value fake_scores = discriminate(t, spec, d, t.detach(fakes));
  terms.discriminator = lsgan_discriminator_term(t, real_scores, fake_scores);
  return terms;
}

// L1 reconstruction after translating twice, both directions.
inline Value cycle_loss(Tape& t, Value source_images, Value target_images,
                        const GeneratorSpec& gen, const TapeParams& g_st, const TapeParams& g_ts) {
  Value back_s = translate(t, gen, g_ts, translate(t, gen, g_st, source_images));
  Value back_t = translate(t, gen, g_st, translate(t, gen, g_ts, target_images));
  return t.add(ops::mean_abs_diff(t, back_s, source_images),
               ops::mean_abs_diff(t, back_t, target_images));
}

// Identity-mapping appearance term: the to-source generator applied to source
// images (and vice versa) should change nothing.
inline Value appearance_loss(Tape& t, Value source_images, Value target_images,
                             const GeneratorSpec& gen, const TapeParams& g_st,
                             const TapeParams& g_ts) {
  return t.add(ops::mean_abs_diff(t, translate(t, gen, g_ts, source_images), source_images),
               ops::mean_abs_diff(t, translate(t, gen, g_st, target_images), target_images));
}

// Soft class-prediction consistency: the translated image should keep the
// source classifier's soft prediction, read through the first p^s columns of
// the unified classifier.
inline Value prediction_consistency_loss_on_translated(
    Tape& t, const EncoderSpec& enc, const TapeParams& f_s, const ClassifierSpec& cs_spec,
    const TapeParams& c_s, const TapeParams& f_meas, const ClassifierSpec& ct_spec,
    const TapeParams& c_t, const Tensor& source_images, Value translated) {
  if (ct_spec.classes < cs_spec.classes)
    throw std::invalid_argument("prediction_consistency: unified classifier narrower than C^s");
  Value src_feats = encode(t, enc, f_s, t.constant(source_images));
  Value src_logits = classify(t, cs_spec, c_s, src_feats);
  Tensor q = t.val(ops::softmax_rows(t, src_logits));  // detached target
  Value tr_feats = encode(t, enc, f_meas, translated);
  Value tr_logits = t.slice(classify(t, ct_spec, c_t, tr_feats), 1, 0, cs_spec.classes);
  Value p = ops::softmax_rows(t, tr_logits);
  return ops::soft_cross_entropy_mean(t, p, q);
}

// Batch-all relation consistency: per anchor, softmax-normalized dot products
// to every other batch member before and after translation, under a soft
// cross-entropy.
inline Value batch_all_relation_loss_on_translated(Tape& t, const EncoderSpec& enc,
                                                   const TapeParams& f_s, const TapeParams& f_meas,
                                                   const Tensor& source_images, Value translated,
                                                   double tau) {
  Value src_feats = encode(t, enc, f_s, t.constant(source_images));
  int b = t.val(src_feats).dim(0);
  if (b < 2) throw std::invalid_argument("batch_all_relation_loss: batch of at least 2 required");

  auto similarity_matrix = [&](Value feats) {
    std::vector<Value> cols;
    cols.reserve(static_cast<size_t>(b));
    for (int j = 0; j < b; ++j) {
      Value row_j = t.slice(feats, 0, j, 1);
      cols.push_back(ops::row_dot(t, feats, row_j));  // row broadcast of [1,d]
    }
    Value s = t.concat(std::span<const Value>(cols), 1);
    return t.smul(s, 1.0 / tau);
  };

  Tensor mask({b, b});
  for (int i = 0; i < b; ++i) mask[static_cast<int64_t>(i) * b + i] = 1e9;

  Value s_tr = t.sub(similarity_matrix(encode(t, enc, f_meas, translated)), t.constant(mask));
  Value r_tr = ops::softmax_rows(t, s_tr);

  Value s_src = t.sub(similarity_matrix(src_feats), t.constant(mask));
  Tensor r_src = t.val(ops::softmax_rows(t, s_src));  // detached target

  return ops::soft_cross_entropy_mean(t, r_tr, r_src);
}

// SPGAN-style positive-pair contrastive regularizer: translated features stay
// near the frozen source features of the same image.
inline Value contrastive_id_loss_on_translated(Tape& t, const EncoderSpec& enc,
                                               const TapeParams& f_s, const Tensor& source_images,
                                               Value translated) {
  Value src_feats = encode(t, enc, f_s, t.constant(source_images));
  Tensor target = t.val(src_feats);
  Value tr_feats = encode(t, enc, f_s, translated);
  return t.mean(ops::row_sum(t, t.square(t.sub(tr_feats, t.constant(target)))));
}

// Classification regularizer: the frozen source classifier should still
// recognize identities after translation.
inline Value classification_id_loss_on_translated(Tape& t, const EncoderSpec& enc,
                                                  const TapeParams& f_s,
                                                  const ClassifierSpec& cs_spec,
                                                  const TapeParams& c_s, Value translated,
                                                  const std::vector<int>& labels) {
  Value tr_feats = encode(t, enc, f_s, translated);
  Value logits = classify(t, cs_spec, c_s, tr_feats);
  return ops::cross_entropy_mean(t, logits, labels);
}

// Triplet regularizer on translated features with source labels.
inline Value triplet_id_loss_on_translated(Tape& t, const EncoderSpec& enc, const TapeParams& f_s,
                                           Value translated, const std::vector<int>& labels,
                                           double margin) {
  Value tr_feats = encode(t, enc, f_s, translated);
  return triplet_term(t, tr_feats, labels, margin);
}

// Everything the combined translation objective needs on one tape.
struct SdtInputs {
  const Tensor* source_images = nullptr;
  const std::vector<int>* source_labels = nullptr;
  const Tensor* target_images = nullptr;
  const EncoderSpec* enc = nullptr;
  const GeneratorSpec* gen = nullptr;
  const DiscriminatorSpec* disc = nullptr;
  TapeParams f_s, f_meas, g_st, g_ts, d_s, d_t;
  ClassifierSpec cs_spec, ct_spec;
  TapeParams c_s, c_t;  // used by the prediction-consistency variant
  double tau = 1.0;
};

struct SdtParts {
  Value total;
  Value regularizer;  // active rc-variant term, or invalid when variant=none
  Value cyc;
  Value adv_gen_s;  // generator side of L_adv^s (fake sources)
  Value adv_gen_t;  // generator side of L_adv^t (fake targets)
  Value apr;
  Value translated_source;  // B^{s->t}, reusable by the caller
};

// Weighted translation objective for the generator step. Discriminator
// parameters are expected frozen on this tape; their own LSGAN terms are
// optimized separately.
inline SdtParts sdt_objective(Tape& t, const SdtInputs& in, const LossWeights& w,
                              RcVariant variant) {
  w.validate();
  Value xs = t.constant(*in.source_images);
  Value xt = t.constant(*in.target_images);
  SdtParts parts;
  Value fake_t = translate(t, *in.gen, in.g_st, xs);
  Value fake_s = translate(t, *in.gen, in.g_ts, xt);
  parts.translated_source = fake_t;

  parts.cyc = t.add(ops::mean_abs_diff(t, translate(t, *in.gen, in.g_ts, fake_t), xs),
                    ops::mean_abs_diff(t, translate(t, *in.gen, in.g_st, fake_s), xt));
  parts.apr = appearance_loss(t, xs, xt, *in.gen, in.g_st, in.g_ts);
  parts.adv_gen_s = lsgan_generator_term(t, discriminate(t, *in.disc, in.d_s, fake_s));
  parts.adv_gen_t = lsgan_generator_term(t, discriminate(t, *in.disc, in.d_t, fake_t));

  switch (variant) {
    case RcVariant::kRc:
      parts.regularizer = rc_loss_on_translated(t, *in.enc, in.f_s, in.f_meas, *in.source_images,
                                                fake_t, *in.source_labels, in.tau);
      break;
    case RcVariant::kPc:
      parts.regularizer = prediction_consistency_loss_on_translated(
          t, *in.enc, in.f_s, in.cs_spec, in.c_s, in.f_meas, in.ct_spec, in.c_t,
          *in.source_images, fake_t);
      break;
    case RcVariant::kBrc:
      parts.regularizer = batch_all_relation_loss_on_translated(
          t, *in.enc, in.f_s, in.f_meas, *in.source_images, fake_t, in.tau);
      break;
    case RcVariant::kContrastive:
      parts.regularizer =
          contrastive_id_loss_on_translated(t, *in.enc, in.f_s, *in.source_images, fake_t);
      break;
    case RcVariant::kClassification:
      parts.regularizer = classification_id_loss_on_translated(t, *in.enc, in.f_s, in.cs_spec,
                                                               in.c_s, fake_t, *in.source_labels);
      break;
    case RcVariant::kTriplet:
      parts.regularizer =
          triplet_id_loss_on_translated(t, *in.enc, in.f_s, fake_t, *in.source_labels, w.margin);
      break;
    case RcVariant::kNone: break;
  }

  Value total = t.smul(parts.cyc, w.lambda_cyc);
  total = t.add(total, t.smul(t.add(parts.adv_gen_s, parts.adv_gen_t), w.lambda_adv));
  total = t.add(total, t.smul(parts.apr, w.lambda_apr));
  if (variant != RcVariant::kNone)
    total = t.add(total, t.smul(parts.regularizer, w.lambda_rc));
  parts.total = total;
  return parts;
}

}  // namespace sda::relreg
