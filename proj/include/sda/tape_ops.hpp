#pragma once

#include <vector>

#include "sda/tape.hpp"

// Composite expressions built from tape primitives. Anything that needs a
// nondifferentiable helper (row max for log-sum-exp stability) takes it from
// the current values and enters it as a constant, which leaves gradients
// exact: shifting by a constant does not change them.

namespace sda::ops {

constexpr double kProbClamp = 1e-7;
constexpr double kDistEps = 1e-12;

inline Value row_sum(Tape& t, Value v) {
  const Tensor& x = t.val(v);
  if (x.rank() != 2) throw std::invalid_argument("row_sum: input must be [B,n]");
  return t.matmul(v, t.constant(Tensor({x.dim(1), 1}, 1.0)));
}

inline Tensor row_max_values(const Tensor& x) {
  Tensor m({x.dim(0), 1});
  for (int r = 0; r < x.dim(0); ++r) {
    double best = x[static_cast<int64_t>(r) * x.dim(1)];
    for (int j = 1; j < x.dim(1); ++j)
      best = std::max(best, x[static_cast<int64_t>(r) * x.dim(1) + j]);
    m[r] = best;
  }
  return m;
}

// log(sum_j exp(z_ij)) per row, max-shifted -> [B,1]
inline Value logsumexp_rows(Tape& t, Value z) {
  Value m = t.constant(row_max_values(t.val(z)));
  Value e = t.exp(t.sub(z, m));
  return t.add(t.log(row_sum(t, e)), m);
}

inline Value reciprocal(Tape& t, Value positive) {
  return t.exp(t.smul(t.log(positive), -1.0));
}

inline Value softmax_rows(Tape& t, Value z) {
  Value m = t.constant(row_max_values(t.val(z)));
  Value e = t.exp(t.sub(z, m));
  return t.mul(e, reciprocal(t, row_sum(t, e)));
}

// Hard clamp of probabilities into [lo, 1-lo] via relu; gradient is zero in
// the clamped regions, matching the clamp semantics.
inline Value clamp_prob(Tape& t, Value p, double lo = kProbClamp) {
  const Tensor& shape_src = t.val(p);
  Value low = t.constant(Tensor(shape_src.shape, lo));
  Value high = t.constant(Tensor(shape_src.shape, 1.0 - lo));
  Value clamped_low = t.add(p, t.relu(t.sub(low, p)));
  return t.sub(clamped_low, t.relu(t.sub(clamped_low, high)));
}

inline Value abs(Tape& t, Value v) { return t.add(t.relu(v), t.relu(t.smul(v, -1.0))); }

inline Value mean_abs_diff(Tape& t, Value a, Value b) { return t.mean(abs(t, t.sub(a, b))); }

// Row-wise Euclidean norms sqrt(sum_j x_ij^2 + eps) -> [B,1]; the eps keeps
// the gradient finite when two rows coincide.
inline Value row_norms(Tape& t, Value x, double eps = kDistEps) {
  Value s = row_sum(t, t.square(x));
  Value se = t.add(s, t.constant(Tensor(t.val(s).shape, eps)));
  return t.exp(t.smul(t.log(se), 0.5));
}

inline Value row_dot(Tape& t, Value a, Value b) { return row_sum(t, t.mul(a, b)); }

// Rows of v at the given indices, in order -> [n, d]
inline Value gather_rows(Tape& t, Value v, const std::vector<int>& idx) {
  std::vector<Value> parts;
  parts.reserve(idx.size());
  for (int i : idx) parts.push_back(t.slice(v, 0, i, 1));
  return t.concat(std::span<const Value>(parts), 0);
}

inline Tensor one_hot(const std::vector<int>& labels, int classes) {
  Tensor m({static_cast<int>(labels.size()), classes});
  for (size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= classes)
      throw std::invalid_argument("one_hot: label " + std::to_string(labels[i]) +
                                  " out of range [0," + std::to_string(classes) + ")");
    m[static_cast<int64_t>(i) * classes + labels[i]] = 1.0;
  }
  return m;
}

// Mean cross-entropy of logits against integer labels.
inline Value cross_entropy_mean(Tape& t, Value logits, const std::vector<int>& labels) {
  const Tensor& z = t.val(logits);
  if (z.rank() != 2 || z.dim(0) != static_cast<int>(labels.size()))
    throw std::invalid_argument("cross_entropy_mean: logits/labels mismatch");
  Value lse = logsumexp_rows(t, logits);
  Value picked = row_sum(t, t.mul(logits, t.constant(one_hot(labels, z.dim(1)))));
  return t.mean(t.sub(lse, picked));
}

// Mean over rows of -sum_j q_ij log p_ij with a constant target q.
inline Value soft_cross_entropy_mean(Tape& t, Value p, const Tensor& q) {
  check_same_shape(t.val(p), q, "soft_cross_entropy_mean");
  Value logp = t.log(clamp_prob(t, p));
  Value per_row = row_sum(t, t.mul(logp, t.constant(q)));
  return t.smul(t.mean(per_row), -1.0);
}

}  // namespace sda::ops
