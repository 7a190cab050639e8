#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "sda/tensor.hpp"

namespace sda {

// Reverse-mode tape over a fixed primitive set. Nodes are appended in
// evaluation order (forward runs eagerly at construction), so reverse node
// order is already a topological order and backward accumulation is
// bit-deterministic for a fixed tape.

enum class Op {
  kLeaf,
  kAdd,
  kSub,
  kMul,
  kScalarMul,
  kMatmul,
  kConv2d,
  kUpsample2x,
  kRelu,
  kLeakyRelu,
  kTanh,
  kExp,
  kLog,
  kSquare,
  kSum,
  kMean,
  kGap,
  kConcat,
  kSlice,
  kL2NormRows,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::kLeaf: return "leaf";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kMul: return "elemwise-mul";
    case Op::kScalarMul: return "scalar-mul";
    case Op::kMatmul: return "matmul";
    case Op::kConv2d: return "conv2d";
    case Op::kUpsample2x: return "upsample2x-nearest";
    case Op::kRelu: return "relu";
    case Op::kLeakyRelu: return "leaky-relu";
    case Op::kTanh: return "tanh";
    case Op::kExp: return "exp";
    case Op::kLog: return "log";
    case Op::kSquare: return "square";
    case Op::kSum: return "sum";
    case Op::kMean: return "mean";
    case Op::kGap: return "global-average-pool";
    case Op::kConcat: return "concat";
    case Op::kSlice: return "slice";
    case Op::kL2NormRows: return "l2-normalize-rows";
  }
  return "?";
}

struct Value {
  int id = -1;
  bool valid() const { return id >= 0; }
};

constexpr double kLeakySlope = 0.2;
constexpr double kNormFloor = 1e-12;

namespace detail {

// Elementwise binary ops allow the right operand to broadcast over a rank-2
// left operand: [n] / [1,n] across rows, [B,1] across columns.
enum class Bcast { kEqual, kRow, kCol };

inline Bcast bcast_kind(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape == b.shape) return Bcast::kEqual;
  if (a.rank() == 2) {
    int rows = a.dim(0), cols = a.dim(1);
    if ((b.rank() == 1 && b.dim(0) == cols) ||
        (b.rank() == 2 && b.dim(0) == 1 && b.dim(1) == cols))
      return Bcast::kRow;
    if (b.rank() == 2 && b.dim(0) == rows && b.dim(1) == 1) return Bcast::kCol;
  }
  throw std::invalid_argument(std::string(what) + ": incompatible shapes " + a.shape_str() +
                              " vs " + b.shape_str());
}

inline int64_t bcast_index(Bcast k, int64_t i, int cols) {
  switch (k) {
    case Bcast::kEqual: return i;
    case Bcast::kRow: return i % cols;
    case Bcast::kCol: return i / cols;
  }
  return i;
}

}  // namespace detail

struct TapeNode {
  Op op = Op::kLeaf;
  std::vector<int> inputs;
  double scalar = 0.0;  // kScalarMul coefficient
  int stride = 1;       // kConv2d
  int axis = 0;         // kConcat / kSlice
  int start = 0;        // kSlice
  bool requires_grad = false;
  Tensor value;
};

class Gradients;

class Tape {
 public:
  explicit Tape(bool check_finite = false) : check_finite_(check_finite) {}

  int size() const { return static_cast<int>(nodes_.size()); }
  const Tensor& val(Value v) const { return node(v).value; }
  bool requires_grad(Value v) const { return node(v).requires_grad; }

  Value leaf(Tensor t, bool requires_grad = false) {
    TapeNode n;
    n.op = Op::kLeaf;
    n.requires_grad = requires_grad;
    n.value = std::move(t);
    return push(std::move(n));
  }

  Value constant(Tensor t) { return leaf(std::move(t), false); }
  Value constant(double v) { return leaf(Tensor::scalar(v), false); }

  // Re-enters a node's current value as a fresh gradient-free leaf.
  Value detach(Value v) { return leaf(node(v).value, false); }

  Value add(Value a, Value b) { return binary(Op::kAdd, a, b); }
  Value sub(Value a, Value b) { return binary(Op::kSub, a, b); }
  Value mul(Value a, Value b) { return binary(Op::kMul, a, b); }

  Value smul(Value a, double c) {
    TapeNode n;
    n.op = Op::kScalarMul;
    n.inputs = {a.id};
    n.scalar = c;
    n.value = node(a).value;
    for (auto& v : n.value.data) v *= c;
    return push(std::move(n));
  }

  Value matmul(Value a, Value b) {
    const Tensor& A = node(a).value;
    const Tensor& B = node(b).value;
    if (A.rank() != 2 || B.rank() != 2 || A.dim(1) != B.dim(0))
      throw std::invalid_argument("matmul: incompatible shapes " + A.shape_str() + " vs " +
                                  B.shape_str());
    int m = A.dim(0), k = A.dim(1), nn = B.dim(1);
    TapeNode n;
    n.op = Op::kMatmul;
    n.inputs = {a.id, b.id};
    n.value = Tensor({m, nn});
    for (int i = 0; i < m; ++i)
      for (int p = 0; p < k; ++p) {
        double av = A[i * k + p];
        if (av == 0.0) continue;
        const double* brow = &B.data[static_cast<size_t>(p) * nn];
        double* orow = &n.value.data[static_cast<size_t>(i) * nn];
        for (int j = 0; j < nn; ++j) orow[j] += av * brow[j];
      }
    return push(std::move(n));
  }

  // 3x3 kernel, zero padding 1, stride 1 or 2; optional per-channel bias.
  Value conv2d(Value x, Value w, Value bias, int stride) {
    const Tensor& X = node(x).value;
    const Tensor& W = node(w).value;
    if (stride != 1 && stride != 2) throw std::invalid_argument("conv2d: stride must be 1 or 2");
    if (X.rank() != 4) throw std::invalid_argument("conv2d: input must be [B,C,H,W]");
    if (W.rank() != 4 || W.dim(2) != 3 || W.dim(3) != 3 || W.dim(1) != X.dim(1))
      throw std::invalid_argument("conv2d: kernel must be [OC," + std::to_string(X.dim(1)) +
                                  ",3,3], got " + W.shape_str());
    int B = X.dim(0), C = X.dim(1), H = X.dim(2), Wd = X.dim(3);
    int OC = W.dim(0);
    int OH = (H - 1) / stride + 1, OW = (Wd - 1) / stride + 1;  // ceil(H/s) for pad 1, k 3
    TapeNode n;
    n.op = Op::kConv2d;
    n.inputs = {x.id, w.id};
    if (bias.valid()) {
      const Tensor& Bv = node(bias).value;
      if (Bv.rank() != 1 || Bv.dim(0) != OC)
        throw std::invalid_argument("conv2d: bias must be [OC], got " + Bv.shape_str());
      n.inputs.push_back(bias.id);
    }
    n.stride = stride;
    n.value = Tensor({B, OC, OH, OW});
    Tensor& out = n.value;
    for (int b = 0; b < B; ++b)
      for (int oc = 0; oc < OC; ++oc) {
        double* oplane = &out.data[(static_cast<size_t>(b) * OC + oc) * OH * OW];
        if (bias.valid()) {
          double bv = node(bias).value[oc];
          for (int i = 0; i < OH * OW; ++i) oplane[i] = bv;
        }
        for (int c = 0; c < C; ++c) {
          const double* xplane = &X.data[(static_cast<size_t>(b) * C + c) * H * Wd];
          const double* wk = &W.data[(static_cast<size_t>(oc) * C + c) * 9];
          for (int kh = 0; kh < 3; ++kh)
            for (int kw = 0; kw < 3; ++kw) {
              double wv = wk[kh * 3 + kw];
              if (wv == 0.0) continue;
              for (int oh = 0; oh < OH; ++oh) {
                int ih = oh * stride + kh - 1;
                if (ih < 0 || ih >= H) continue;
                const double* xrow = xplane + static_cast<size_t>(ih) * Wd;
                double* orow = oplane + static_cast<size_t>(oh) * OW;
                for (int ow = 0; ow < OW; ++ow) {
                  int iw = ow * stride + kw - 1;
                  if (iw < 0 || iw >= Wd) continue;
                  orow[ow] += wv * xrow[iw];
                }
              }
            }
        }
      }
    return push(std::move(n));
  }

  Value upsample2x(Value x) {
    const Tensor& X = node(x).value;
    if (X.rank() != 4) throw std::invalid_argument("upsample2x: input must be [B,C,H,W]");
    int B = X.dim(0), C = X.dim(1), H = X.dim(2), W = X.dim(3);
    TapeNode n;
    n.op = Op::kUpsample2x;
    n.inputs = {x.id};
    n.value = Tensor({B, C, 2 * H, 2 * W});
    for (int p = 0; p < B * C; ++p) {
      const double* xp = &X.data[static_cast<size_t>(p) * H * W];
      double* op = &n.value.data[static_cast<size_t>(p) * 4 * H * W];
      for (int h = 0; h < H; ++h)
        for (int w = 0; w < W; ++w) {
          double v = xp[h * W + w];
          double* o = op + (2 * h) * (2 * W) + 2 * w;
          o[0] = v;
          o[1] = v;
          o[2 * W] = v;
          o[2 * W + 1] = v;
        }
    }
    return push(std::move(n));
  }

  Value relu(Value x) {
    return unary(Op::kRelu, x, [](double v) { return v > 0.0 ? v : 0.0; });
  }
  Value leaky_relu(Value x) {
    return unary(Op::kLeakyRelu, x, [](double v) { return v > 0.0 ? v : kLeakySlope * v; });
  }
  Value tanh(Value x) {
    return unary(Op::kTanh, x, [](double v) { return std::tanh(v); });
  }
  Value exp(Value x) {
    return unary(Op::kExp, x, [](double v) { return std::exp(v); });
  }
  Value log(Value x) {
    return unary(Op::kLog, x, [](double v) { return std::log(v); });
  }
  Value square(Value x) {
    return unary(Op::kSquare, x, [](double v) { return v * v; });
  }

  Value sum(Value x) {
    TapeNode n;
    n.op = Op::kSum;
    n.inputs = {x.id};
    double s = 0.0;
    for (double v : node(x).value.data) s += v;
    n.value = Tensor::scalar(s);
    return push(std::move(n));
  }

  Value mean(Value x) {
    TapeNode n;
    n.op = Op::kMean;
    n.inputs = {x.id};
    double s = 0.0;
    for (double v : node(x).value.data) s += v;
    n.value = Tensor::scalar(s / static_cast<double>(node(x).value.numel()));
    return push(std::move(n));
  }

  Value global_average_pool(Value x) {
    const Tensor& X = node(x).value;
    if (X.rank() != 4) throw std::invalid_argument("global-average-pool: input must be [B,C,H,W]");
    int B = X.dim(0), C = X.dim(1);
    int hw = X.dim(2) * X.dim(3);
    TapeNode n;
    n.op = Op::kGap;
    n.inputs = {x.id};
    n.value = Tensor({B, C});
    for (int p = 0; p < B * C; ++p) {
      const double* xp = &X.data[static_cast<size_t>(p) * hw];
      double s = 0.0;
      for (int i = 0; i < hw; ++i) s += xp[i];
      n.value[p] = s / hw;
    }
    return push(std::move(n));
  }

  Value concat(std::span<const Value> parts, int axis) {
    if (parts.empty()) throw std::invalid_argument("concat: no inputs");
    const Tensor& first = node(parts[0]).value;
    if (axis < 0 || axis >= first.rank()) throw std::invalid_argument("concat: bad axis");
    std::vector<int> out_shape = first.shape;
    for (size_t i = 1; i < parts.size(); ++i) {
      const Tensor& t = node(parts[i]).value;
      if (t.rank() != first.rank()) throw std::invalid_argument("concat: rank mismatch");
      for (int d = 0; d < t.rank(); ++d)
        if (d != axis && t.dim(d) != first.dim(d))
          throw std::invalid_argument("concat: shape mismatch off axis");
      out_shape[axis] += t.dim(axis);
    }
    TapeNode n;
    n.op = Op::kConcat;
    n.axis = axis;
    for (Value v : parts) n.inputs.push_back(v.id);
    n.value = Tensor(out_shape);
    int64_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= out_shape[d];
    for (int d = axis + 1; d < static_cast<int>(out_shape.size()); ++d) inner *= out_shape[d];
    int64_t out_axis = out_shape[axis];
    int64_t off = 0;
    for (Value v : parts) {
      const Tensor& t = node(v).value;
      int64_t ax = t.dim(axis);
      for (int64_t o = 0; o < outer; ++o)
        std::copy_n(&t.data[static_cast<size_t>(o * ax * inner)], ax * inner,
                    &n.value.data[static_cast<size_t>((o * out_axis + off) * inner)]);
      off += ax;
    }
    return push(std::move(n));
  }

  Value concat(std::initializer_list<Value> parts, int axis) {
    std::vector<Value> v(parts);
    return concat(std::span<const Value>(v), axis);
  }

  Value slice(Value x, int axis, int start, int len) {
    const Tensor& X = node(x).value;
    if (axis < 0 || axis >= X.rank()) throw std::invalid_argument("slice: bad axis");
    if (len < 1 || start < 0 || start + len > X.dim(axis))
      throw std::invalid_argument("slice: out of range");
    std::vector<int> out_shape = X.shape;
    out_shape[axis] = len;
    TapeNode n;
    n.op = Op::kSlice;
    n.inputs = {x.id};
    n.axis = axis;
    n.start = start;
    n.value = Tensor(out_shape);
    int64_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= X.shape[d];
    for (int d = axis + 1; d < X.rank(); ++d) inner *= X.shape[d];
    int64_t in_axis = X.dim(axis);
    for (int64_t o = 0; o < outer; ++o)
      std::copy_n(&X.data[static_cast<size_t>((o * in_axis + start) * inner)], len * inner,
                  &n.value.data[static_cast<size_t>(o * len * inner)]);
    return push(std::move(n));
  }

  Value l2_normalize_rows(Value x) {
    const Tensor& X = node(x).value;
    if (X.rank() != 2) throw std::invalid_argument("l2-normalize-rows: input must be [B,d]");
    int B = X.dim(0), d = X.dim(1);
    TapeNode n;
    n.op = Op::kL2NormRows;
    n.inputs = {x.id};
    n.value = Tensor({B, d});
    for (int r = 0; r < B; ++r) {
      const double* xr = &X.data[static_cast<size_t>(r) * d];
      double s = 0.0;
      for (int j = 0; j < d; ++j) s += xr[j] * xr[j];
      double norm = std::max(std::sqrt(s), kNormFloor);
      for (int j = 0; j < d; ++j) n.value[static_cast<int64_t>(r) * d + j] = xr[j] / norm;
    }
    return push(std::move(n));
  }

  Gradients backward(Value root) const;

 private:
  friend class Gradients;

  const TapeNode& node(Value v) const {
    if (!v.valid() || v.id >= size()) throw std::invalid_argument("tape: bad value handle");
    return nodes_[static_cast<size_t>(v.id)];
  }

  Value push(TapeNode n) {
    for (int in : n.inputs)
      if (nodes_[static_cast<size_t>(in)].requires_grad) n.requires_grad = true;
    if (check_finite_ && !n.value.all_finite())
      throw std::runtime_error(std::string("tape: non-finite value out of ") + op_name(n.op));
    nodes_.push_back(std::move(n));
    return Value{size() - 1};
  }

  Value binary(Op op, Value a, Value b) {
    const Tensor& A = node(a).value;
    const Tensor& B = node(b).value;
    detail::Bcast k = detail::bcast_kind(A, B, op_name(op));
    int cols = A.rank() == 2 ? A.dim(1) : 1;
    TapeNode n;
    n.op = op;
    n.inputs = {a.id, b.id};
    n.value = Tensor(A.shape);
    for (int64_t i = 0; i < A.numel(); ++i) {
      double bv = B[detail::bcast_index(k, i, cols)];
      switch (op) {
        case Op::kAdd: n.value[i] = A[i] + bv; break;
        case Op::kSub: n.value[i] = A[i] - bv; break;
        default: n.value[i] = A[i] * bv; break;
      }
    }
    return push(std::move(n));
  }

  template <typename F>
  Value unary(Op op, Value x, F f) {
    TapeNode n;
    n.op = op;
    n.inputs = {x.id};
    n.value = node(x).value;
    for (auto& v : n.value.data) v = f(v);
    return push(std::move(n));
  }

  std::vector<TapeNode> nodes_;
  bool check_finite_ = false;
};

// Gradient of a scalar root with respect to every grad-requiring node.
// Disconnected or non-trainable nodes read back as zeros.
class Gradients {
 public:
  Gradients(const Tape& tape, Value root) : tape_(&tape) {
    const auto& nodes = tape.nodes_;
    const TapeNode& rn = tape.node(root);
    if (rn.value.numel() != 1)
      throw std::invalid_argument("backward: root must be a scalar, got " + rn.value.shape_str());
    adj_.resize(nodes.size());
    has_.assign(nodes.size(), 0);
    seed(root.id, Tensor::scalar(1.0));
    for (int id = root.id; id >= 0; --id) {
      const TapeNode& n = nodes[static_cast<size_t>(id)];
      if (!has_[static_cast<size_t>(id)] || n.op == Op::kLeaf || !n.requires_grad) continue;
      propagate(id, n, nodes);
    }
  }

  Tensor get(Value v) const {
    const TapeNode& n = tape_->node(v);
    if (!has_[static_cast<size_t>(v.id)] || !n.requires_grad) return Tensor(n.value.shape);
    return adj_[static_cast<size_t>(v.id)];
  }

 private:
  void seed(int id, Tensor t) {
    if (has_[static_cast<size_t>(id)]) {
      Tensor& a = adj_[static_cast<size_t>(id)];
      for (int64_t i = 0; i < a.numel(); ++i) a[i] += t[i];
    } else {
      adj_[static_cast<size_t>(id)] = std::move(t);
      has_[static_cast<size_t>(id)] = 1;
    }
  }

  void accum(int id, const std::vector<TapeNode>& nodes, Tensor t) {
    if (!nodes[static_cast<size_t>(id)].requires_grad) return;
    seed(id, std::move(t));
  }

  void propagate(int id, const TapeNode& n, const std::vector<TapeNode>& nodes);

  const Tape* tape_;
  std::vector<Tensor> adj_;
  std::vector<char> has_;
};

inline Gradients Tape::backward(Value root) const { return Gradients(*this, root); }

inline void Gradients::propagate(int id, const TapeNode& n, const std::vector<TapeNode>& nodes) {
  const Tensor& g = adj_[static_cast<size_t>(id)];
  auto in_val = [&](int i) -> const Tensor& {
    return nodes[static_cast<size_t>(n.inputs[static_cast<size_t>(i)])].value;
  };
  auto in_id = [&](int i) { return n.inputs[static_cast<size_t>(i)]; };
  switch (n.op) {
    case Op::kLeaf: break;
    case Op::kAdd:
    case Op::kSub:
    case Op::kMul: {
      const Tensor& A = in_val(0);
      const Tensor& B = in_val(1);
      detail::Bcast k = detail::bcast_kind(A, B, "backward");
      int cols = A.rank() == 2 ? A.dim(1) : 1;
      if (nodes[static_cast<size_t>(in_id(0))].requires_grad) {
        Tensor ga(A.shape);
        for (int64_t i = 0; i < A.numel(); ++i)
          ga[i] = n.op == Op::kMul ? g[i] * B[detail::bcast_index(k, i, cols)] : g[i];
        accum(in_id(0), nodes, std::move(ga));
      }
      if (nodes[static_cast<size_t>(in_id(1))].requires_grad) {
        Tensor gb(B.shape);
        for (int64_t i = 0; i < A.numel(); ++i) {
          int64_t bi = detail::bcast_index(k, i, cols);
          double c = n.op == Op::kMul ? g[i] * A[i] : (n.op == Op::kSub ? -g[i] : g[i]);
          gb[bi] += c;
        }
        accum(in_id(1), nodes, std::move(gb));
      }
      break;
    }
    case Op::kScalarMul: {
      Tensor gx(in_val(0).shape);
      for (int64_t i = 0; i < gx.numel(); ++i) gx[i] = n.scalar * g[i];
      accum(in_id(0), nodes, std::move(gx));
      break;
    }
    case Op::kMatmul: {
      const Tensor& A = in_val(0);
      const Tensor& B = in_val(1);
      int m = A.dim(0), k = A.dim(1), nn = B.dim(1);
      if (nodes[static_cast<size_t>(in_id(0))].requires_grad) {
        Tensor ga({m, k});
        for (int i = 0; i < m; ++i)
          for (int p = 0; p < k; ++p) {
            double s = 0.0;
            const double* grow = &g.data[static_cast<size_t>(i) * nn];
            const double* brow = &B.data[static_cast<size_t>(p) * nn];
            for (int j = 0; j < nn; ++j) s += grow[j] * brow[j];
            ga[static_cast<int64_t>(i) * k + p] = s;
          }
        accum(in_id(0), nodes, std::move(ga));
      }
      if (nodes[static_cast<size_t>(in_id(1))].requires_grad) {
        Tensor gb({k, nn});
        for (int i = 0; i < m; ++i)
          for (int p = 0; p < k; ++p) {
            double av = A[static_cast<int64_t>(i) * k + p];
            if (av == 0.0) continue;
            const double* grow = &g.data[static_cast<size_t>(i) * nn];
            double* brow = &gb.data[static_cast<size_t>(p) * nn];
            for (int j = 0; j < nn; ++j) brow[j] += av * grow[j];
          }
        accum(in_id(1), nodes, std::move(gb));
      }
      break;
    }
    case Op::kConv2d: {
      const Tensor& X = in_val(0);
      const Tensor& W = in_val(1);
      int B = X.dim(0), C = X.dim(1), H = X.dim(2), Wd = X.dim(3);
      int OC = W.dim(0), s = n.stride;
      int OH = n.value.dim(2), OW = n.value.dim(3);
      bool need_x = nodes[static_cast<size_t>(in_id(0))].requires_grad;
      bool need_w = nodes[static_cast<size_t>(in_id(1))].requires_grad;
      Tensor gx, gw;
      if (need_x) gx = Tensor(X.shape);
      if (need_w) gw = Tensor(W.shape);
      if (need_x || need_w) {
        for (int b = 0; b < B; ++b)
          for (int oc = 0; oc < OC; ++oc) {
            const double* gplane = &g.data[(static_cast<size_t>(b) * OC + oc) * OH * OW];
            for (int c = 0; c < C; ++c) {
              const double* xplane = &X.data[(static_cast<size_t>(b) * C + c) * H * Wd];
              double* gxplane = need_x ? &gx.data[(static_cast<size_t>(b) * C + c) * H * Wd] : nullptr;
              const double* wk = &W.data[(static_cast<size_t>(oc) * C + c) * 9];
              double* gwk = need_w ? &gw.data[(static_cast<size_t>(oc) * C + c) * 9] : nullptr;
              for (int kh = 0; kh < 3; ++kh)
                for (int kw = 0; kw < 3; ++kw) {
                  double wv = wk[kh * 3 + kw];
                  double acc = 0.0;
                  for (int oh = 0; oh < OH; ++oh) {
                    int ih = oh * s + kh - 1;
                    if (ih < 0 || ih >= H) continue;
                    const double* grow = gplane + static_cast<size_t>(oh) * OW;
                    const double* xrow = xplane + static_cast<size_t>(ih) * Wd;
                    double* gxrow = need_x ? gxplane + static_cast<size_t>(ih) * Wd : nullptr;
                    for (int ow = 0; ow < OW; ++ow) {
                      int iw = ow * s + kw - 1;
                      if (iw < 0 || iw >= Wd) continue;
                      if (need_x) gxrow[iw] += wv * grow[ow];
                      if (need_w) acc += xrow[iw] * grow[ow];
                    }
                  }
                  if (need_w) gwk[kh * 3 + kw] += acc;
                }
            }
          }
      }
      if (need_x) accum(in_id(0), nodes, std::move(gx));
      if (need_w) accum(in_id(1), nodes, std::move(gw));
      if (n.inputs.size() == 3 && nodes[static_cast<size_t>(in_id(2))].requires_grad) {
        Tensor gb({OC});
        for (int b = 0; b < B; ++b)
          for (int oc = 0; oc < OC; ++oc) {
            const double* gplane = &g.data[(static_cast<size_t>(b) * OC + oc) * OH * OW];
            double sum = 0.0;
            for (int i = 0; i < OH * OW; ++i) sum += gplane[i];
            gb[oc] += sum;
          }
        accum(in_id(2), nodes, std::move(gb));
      }
      break;
    }
    case Op::kUpsample2x: {
      const Tensor& X = in_val(0);
      int H = X.dim(2), W = X.dim(3);
      Tensor gx(X.shape);
      for (int p = 0; p < X.dim(0) * X.dim(1); ++p) {
        const double* gp = &g.data[static_cast<size_t>(p) * 4 * H * W];
        double* xp = &gx.data[static_cast<size_t>(p) * H * W];
        for (int h = 0; h < H; ++h)
          for (int w = 0; w < W; ++w) {
            const double* o = gp + (2 * h) * (2 * W) + 2 * w;
            xp[h * W + w] = o[0] + o[1] + o[2 * W] + o[2 * W + 1];
          }
      }
      accum(in_id(0), nodes, std::move(gx));
      break;
    }
    case Op::kRelu: {
      const Tensor& X = in_val(0);
      Tensor gx(X.shape);
      for (int64_t i = 0; i < X.numel(); ++i) gx[i] = X[i] > 0.0 ? g[i] : 0.0;
      accum(in_id(0), nodes, std::move(gx));
      break;
    }
    case Op::kLeakyRelu: {
      const Tensor& X = in_val(0);
      Tensor gx(X.shape);
      for (int64_t i = 0; i < X.numel(); ++i)
        gx[i] = X[i] > 0.0 ? g[i] : (X[i] < 0.0 ? kLeakySlope * g[i] : 0.0);
      accum(in_id(0), nodes, std::move(gx));
      break;
    }
    case Op::kTanh: {
      Tensor gx(n.value.shape);
      for (int64_t i = 0; i < gx.numel(); ++i) gx[i] = (1.0 - n.value[i] * n.value[i]) * g[i];
      accum(in_id(0), nodes, std::move(gx));
      break;
    }
    case Op::kExp: {
      Tensor gx(n.value.shape);
      for (int64_t i = 0; i < gx.numel(); ++i) gx[i] = n.value[i] * g[i];
      accum(in_id(0), nodes, std::move(gx));
      break;
    }
    case Op::kLog: {
      const Tensor& X = in_val(0);
      Tensor gx(X.shape);
      for (int64_t i = 0; i < X.numel(); ++i) gx[i] = g[i] / X[i];
      accum(in_id(0), nodes, std::move(gx));
      break;
    }
    case Op::kSquare: {
      const Tensor& X = in_val(0);
      Tensor gx(X.shape);
      for (int64_t i = 0; i < X.numel(); ++i) gx[i] = 2.0 * X[i] * g[i];
      accum(in_id(0), nodes, std::move(gx));
      break;
    }
    case Op::kSum: {
      Tensor gx(in_val(0).shape, g[0]);
      accum(in_id(0), nodes, std::move(gx));
      break;
    }
    case Op::kMean: {
      const Tensor& X = in_val(0);
      Tensor gx(X.shape, g[0] / static_cast<double>(X.numel()));
      accum(in_id(0), nodes, std::move(gx));
      break;
    }
    case Op::kGap: {
      const Tensor& X = in_val(0);
      int hw = X.dim(2) * X.dim(3);
      Tensor gx(X.shape);
      for (int p = 0; p < X.dim(0) * X.dim(1); ++p) {
        double v = g[p] / hw;
        double* xp = &gx.data[static_cast<size_t>(p) * hw];
        for (int i = 0; i < hw; ++i) xp[i] = v;
      }
      accum(in_id(0), nodes, std::move(gx));
      break;
    }
    case Op::kConcat: {
      int axis = n.axis;
      int64_t outer = 1, inner = 1;
      for (int d = 0; d < axis; ++d) outer *= n.value.shape[d];
      for (int d = axis + 1; d < n.value.rank(); ++d) inner *= n.value.shape[d];
      int64_t out_axis = n.value.dim(axis);
      int64_t off = 0;
      for (size_t pi = 0; pi < n.inputs.size(); ++pi) {
        const Tensor& t = in_val(static_cast<int>(pi));
        int64_t ax = t.dim(axis);
        if (nodes[static_cast<size_t>(n.inputs[pi])].requires_grad) {
          Tensor gp(t.shape);
          for (int64_t o = 0; o < outer; ++o)
            std::copy_n(&g.data[static_cast<size_t>((o * out_axis + off) * inner)], ax * inner,
                        &gp.data[static_cast<size_t>(o * ax * inner)]);
          accum(n.inputs[pi], nodes, std::move(gp));
        }
        off += ax;
      }
      break;
    }
    case Op::kSlice: {
      const Tensor& X = in_val(0);
      int axis = n.axis;
      int64_t outer = 1, inner = 1;
      for (int d = 0; d < axis; ++d) outer *= X.shape[d];
      for (int d = axis + 1; d < X.rank(); ++d) inner *= X.shape[d];
      int64_t in_axis = X.dim(axis);
      int64_t len = n.value.dim(axis);
      Tensor gx(X.shape);
      for (int64_t o = 0; o < outer; ++o)
        std::copy_n(&g.data[static_cast<size_t>(o * len * inner)], len * inner,
                    &gx.data[static_cast<size_t>((o * in_axis + n.start) * inner)]);
      accum(in_id(0), nodes, std::move(gx));
      break;
    }
    case Op::kL2NormRows: {
      const Tensor& X = in_val(0);
      int B = X.dim(0), d = X.dim(1);
      Tensor gx(X.shape);
      for (int r = 0; r < B; ++r) {
        const double* xr = &X.data[static_cast<size_t>(r) * d];
        const double* yr = &n.value.data[static_cast<size_t>(r) * d];
        const double* gr = &g.data[static_cast<size_t>(r) * d];
        double s = 0.0;
        for (int j = 0; j < d; ++j) s += xr[j] * xr[j];
        double norm = std::max(std::sqrt(s), kNormFloor);
        double gy = 0.0;
        for (int j = 0; j < d; ++j) gy += gr[j] * yr[j];
        bool clamped = std::sqrt(s) < kNormFloor;
        for (int j = 0; j < d; ++j)
          gx[static_cast<int64_t>(r) * d + j] = clamped ? gr[j] / norm : (gr[j] - gy * yr[j]) / norm;
      }
      accum(in_id(0), nodes, std::move(gx));
      break;
    }
  }
}

}  // namespace sda
