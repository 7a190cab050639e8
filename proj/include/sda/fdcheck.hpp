#pragma once

#include <functional>

#include "sda/tape.hpp"

namespace sda {

// A differentiable scalar program: given a tape and a leaf holding x, build
// and return the scalar root. Used both to read the analytic gradient off the
// tape and to re-evaluate the function at perturbed points.
using TapeProgram = std::function<Value(Tape&, Value)>;

// Max relative error between the tape gradient and central differences,
// max_i |a_i - c_i| / max(1e-12, |a_i| + |c_i|).
inline double finite_diff_check(const TapeProgram& f, const Tensor& x, double h = 1e-6) {
  auto eval = [&](const Tensor& at) {
    Tape t(/*check_finite=*/true);
    Value root = f(t, t.leaf(at, false));
    const Tensor& out = t.val(root);
    if (out.numel() != 1)
      throw std::invalid_argument("finite_diff_check: function is not scalar");
    return out[0];
  };

  Tensor analytic;
  {
    Tape t(/*check_finite=*/true);
    Value leaf = t.leaf(x, true);
    Value root = f(t, leaf);
    if (t.val(root).numel() != 1)
      throw std::invalid_argument("finite_diff_check: function is not scalar");
    analytic = t.backward(root).get(leaf);
  }

  double worst = 0.0;
  Tensor probe = x;
  for (int64_t i = 0; i < x.numel(); ++i) {
    double orig = probe[i];
    probe[i] = orig + h;
    double fp = eval(probe);
    probe[i] = orig - h;
    double fm = eval(probe);
    probe[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw std::runtime_error("finite_diff_check: non-finite function value");
    double central = (fp - fm) / (2.0 * h);
    double denom = std::max(1e-12, std::fabs(analytic[i]) + std::fabs(central));
    worst = std::max(worst, std::fabs(analytic[i] - central) / denom);
  }
  return worst;
}

}  // namespace sda
