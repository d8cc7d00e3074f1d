#pragma once

// Reverse-mode automatic differentiation over a dynamically recorded tape.
//
// A Tape records primitive operations as they execute. backward() replays the
// record in reverse and accumulates one gradient per recorded value. The only
// mode-dependent rule is the ReLU backward:
//
//   Classical: g_in = 1[h > 0] * g_out
//   Guided:    g_in = 1[h > 0] * 1[g_out > 0] * g_out
//
// Ties at h == 0 (and g_out == 0) pass nothing in either mode.

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "vqa/kernels.hpp"
#include "vqa/tensor.hpp"

namespace vqa::ad {

enum class ReluMode { Classical, Guided };

/// Elementwise ReLU backward rule under the given mode.
template <typename T>
void relu_backward(std::span<const T> h, std::span<const T> g_out,
                   std::span<T> g_in, ReluMode mode) {
  if (h.size() != g_out.size() || h.size() != g_in.size()) {
    throw ShapeError("relu_backward: size " + std::to_string(h.size()) +
                     " vs " + std::to_string(g_out.size()));
  }
  for (std::size_t i = 0; i < h.size(); ++i) {
    const bool open = h[i] > T{0} &&
                      (mode == ReluMode::Classical || g_out[i] > T{0});
    g_in[i] = open ? g_out[i] : T{0};
  }
}

template <typename T>
BasicTensor<T> relu_backward(const BasicTensor<T>& h,
                             const BasicTensor<T>& g_out, ReluMode mode) {
  if (h.shape() != g_out.shape()) {
    throw ShapeError("relu_backward: shape " + shape_str(h.shape()) + " vs " +
                     shape_str(g_out.shape()));
  }
  BasicTensor<T> g_in(h.shape());
  relu_backward<T>(h.data(), g_out.data(), g_in.data(), mode);
  return g_in;
}

enum class OpKind {
  Leaf,
  Add,
  Multiply,
  MatMul,
  Conv2d,
  AvgPool2x2,
  Tanh,
  Relu,
  EmbeddingLookup,
  SumOverAxis,
  Softmax,
  CrossEntropy,
  Reshape,
  Pick,
};

/// Handle to a value recorded on a specific tape.
struct Var {
  std::size_t id = 0;
  std::uint64_t tape = 0;
};

/// Gradient emitted backward through one ReLU node (w.r.t. its input).
template <typename T>
struct ReluEmission {
  std::size_t node = 0;
  BasicTensor<T> gradient;
};

template <typename T>
struct Gradients {
  std::vector<BasicTensor<T>> values;
  std::vector<ReluEmission<T>> relu_emissions;

  const BasicTensor<T>& operator[](Var v) const { return values.at(v.id); }
};

struct BackwardOptions {
  bool record_relu_emissions = false;
};

namespace detail {
inline std::uint64_t next_tape_id() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}
}  // namespace detail

template <typename T>
class Tape {
 public:
  explicit Tape(ReluMode mode = ReluMode::Classical)
      : id_(detail::next_tape_id()), mode_(mode) {}

  Tape(Tape&&) noexcept = default;
  Tape& operator=(Tape&&) noexcept = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  ReluMode relu_mode() const { return mode_; }
  void set_relu_mode(ReluMode mode) { mode_ = mode; }

  std::size_t value_count() const { return slots_.size(); }
  std::size_t node_count() const { return nodes_.size(); }
  OpKind node_kind(std::size_t node) const { return nodes_.at(node).kind; }
  std::size_t count(OpKind kind) const {
    return std::size_t(std::count_if(nodes_.begin(), nodes_.end(),
                                     [&](const Node& n) { return n.kind == kind; }));
  }

  const BasicTensor<T>& value(Var v) const {
    check(v, "value");
    return slot_value(v.id);
  }

  /// Records a leaf owning its value.
  Var leaf(BasicTensor<T> value) {
    Slot s;
    s.owned = std::move(value);
    return push_leaf(std::move(s));
  }

  /// Records a leaf that refers to `value`; the referent must outlive the tape.
  Var param(const BasicTensor<T>& value) {
    Slot s;
    s.borrowed = &value;
    return push_leaf(std::move(s));
  }

  /// Elementwise a + b. `b` may also match the trailing dimensions of `a`
  /// (broadcast over the leading ones, e.g. a bias row).
  Var add(Var a, Var b) {
    const auto& x = value(a);
    const auto& y = value(b);
    const std::size_t inner = broadcast_inner(x.shape(), y.shape(), "add");
    BasicTensor<T> out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + y[i % inner];
    return push(OpKind::Add, {a.id, b.id}, std::move(out));
  }

  Var multiply(Var a, Var b) {
    const auto& x = value(a);
    const auto& y = value(b);
    if (x.shape() != y.shape()) mismatch("multiply", x.shape(), y.shape());
    BasicTensor<T> out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * y[i];
    return push(OpKind::Multiply, {a.id, b.id}, std::move(out));
  }

  /// [M,K] x [K,N] -> [M,N]; with trans_b the right operand is stored [N,K].
  Var matmul(Var a, Var b, bool trans_b = false) {
    const auto& x = value(a);
    const auto& y = value(b);
    if (x.rank() != 2 || y.rank() != 2) mismatch("matmul", x.shape(), y.shape());
    const std::size_t m = x.dim(0), k = x.dim(1);
    const std::size_t kb = trans_b ? y.dim(1) : y.dim(0);
    const std::size_t n = trans_b ? y.dim(0) : y.dim(1);
    if (k != kb) mismatch("matmul", x.shape(), y.shape());
    BasicTensor<T> out({m, n});
    kernels::parallel::gemm(x.data().data(), y.data().data(), out.data().data(),
                            m, n, k, false, trans_b);
    Node node = make_node(OpKind::MatMul, {a.id, b.id});
    node.flag = trans_b;
    return push_node(std::move(node), std::move(out));
  }

  /// x [N,C,H,W], weight [O,C,k,k], bias [O]; stride 1, zero padding `pad`.
  Var conv2d(Var x, Var weight, Var bias, std::size_t pad) {
    const auto& xv = value(x);
    const auto& wv = value(weight);
    const auto& bv = value(bias);
    if (xv.rank() != 4 || wv.rank() != 4 || wv.dim(2) != wv.dim(3) ||
        xv.dim(1) != wv.dim(1) || xv.dim(2) + 2 * pad < wv.dim(2) ||
        xv.dim(3) + 2 * pad < wv.dim(3)) {
      mismatch("conv2d", xv.shape(), wv.shape());
    }
    if (bv.shape() != Shape{wv.dim(0)}) mismatch("conv2d", wv.shape(), bv.shape());
    const auto g = geometry(xv.shape(), wv.shape(), pad);
    const std::size_t batch = xv.dim(0);
    BasicTensor<T> out({batch, g.out_channels, g.out_height(), g.out_width()});
    const std::size_t in_stride = g.in_channels * g.height * g.width;
    const std::size_t out_stride = g.out_channels * g.out_height() * g.out_width();
    for (std::size_t n = 0; n < batch; ++n) {
      kernels::parallel::conv2d_forward(xv.data().data() + n * in_stride,
                                        wv.data().data(), bv.data().data(),
                                        out.data().data() + n * out_stride, g);
    }
    Node node = make_node(OpKind::Conv2d, {x.id, weight.id, bias.id});
    node.aux = pad;
    return push_node(std::move(node), std::move(out));
  }

  /// 2x2 average pooling with stride 2 over [N,C,H,W]; H and W must be even.
  Var avg_pool2x2(Var x) {
    const auto& xv = value(x);
    if (xv.rank() != 4 || xv.dim(2) % 2 || xv.dim(3) % 2) {
      throw ShapeError("avg_pool2x2: shape " + shape_str(xv.shape()) +
                       " needs rank 4 with even spatial dims");
    }
    const std::size_t planes = xv.dim(0) * xv.dim(1);
    const std::size_t h = xv.dim(2), w = xv.dim(3);
    BasicTensor<T> out({xv.dim(0), xv.dim(1), h / 2, w / 2});
    for (std::size_t p = 0; p < planes; ++p) {
      const T* src = xv.data().data() + p * h * w;
      T* dst = out.data().data() + p * (h / 2) * (w / 2);
      for (std::size_t y = 0; y < h / 2; ++y) {
        for (std::size_t x2 = 0; x2 < w / 2; ++x2) {
          const T* q = src + 2 * y * w + 2 * x2;
          dst[y * (w / 2) + x2] = (q[0] + q[1] + q[w] + q[w + 1]) * T(0.25);
        }
      }
    }
    return push(OpKind::AvgPool2x2, {x.id}, std::move(out));
  }

  Var tanh(Var x) {
    const auto& xv = value(x);
    BasicTensor<T> out(xv.shape());
    for (std::size_t i = 0; i < xv.size(); ++i) out[i] = std::tanh(xv[i]);
    return push(OpKind::Tanh, {x.id}, std::move(out));
  }

  Var relu(Var x) {
    const auto& xv = value(x);
    BasicTensor<T> out(xv.shape());
    for (std::size_t i = 0; i < xv.size(); ++i) {
      out[i] = xv[i] > T{0} ? xv[i] : T{0};
    }
    return push(OpKind::Relu, {x.id}, std::move(out));
  }

  /// Gathers rows of table [V,D] -> [L,D].
  Var embedding_lookup(Var table, std::span<const int> indices) {
    const auto& tv = value(table);
    if (tv.rank() != 2) {
      throw ShapeError("embedding_lookup: table shape " + shape_str(tv.shape()) +
                       " is not rank 2");
    }
    if (indices.empty()) {
      throw std::invalid_argument("embedding_lookup: empty index sequence");
    }
    const std::size_t vocab = tv.dim(0), d = tv.dim(1);
    BasicTensor<T> out({indices.size(), d});
    for (std::size_t r = 0; r < indices.size(); ++r) {
      if (indices[r] < 0 || std::size_t(indices[r]) >= vocab) {
        throw std::out_of_range("embedding_lookup: index " +
                                std::to_string(indices[r]) +
                                " outside table of " + std::to_string(vocab) +
                                " rows");
      }
      std::copy_n(tv.data().begin() + std::size_t(indices[r]) * d, d,
                  out.data().begin() + r * d);
    }
    Node node = make_node(OpKind::EmbeddingLookup, {table.id});
    node.indices.assign(indices.begin(), indices.end());
    return push_node(std::move(node), std::move(out));
  }

  /// Sums over `axis`, keeping it with extent 1.
  Var sum_over_axis(Var x, std::size_t axis) {
    const auto& xv = value(x);
    if (axis >= xv.rank()) {
      throw ShapeError("sum_over_axis: axis " + std::to_string(axis) +
                       " out of range for shape " + shape_str(xv.shape()));
    }
    const auto [outer, extent, inner] = split(xv.shape(), axis);
    Shape shape = xv.shape();
    shape[axis] = 1;
    BasicTensor<T> out(shape);
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t e = 0; e < extent; ++e) {
        for (std::size_t i = 0; i < inner; ++i) {
          out[o * inner + i] += xv[(o * extent + e) * inner + i];
        }
      }
    }
    Node node = make_node(OpKind::SumOverAxis, {x.id});
    node.aux = axis;
    return push_node(std::move(node), std::move(out));
  }

  /// Numerically stable softmax over the last axis.
  Var softmax(Var x) {
    const auto& xv = value(x);
    const std::size_t n = xv.shape().back();
    const std::size_t rows = xv.size() / n;
    BasicTensor<T> out(xv.shape());
    for (std::size_t r = 0; r < rows; ++r) {
      const T* in = xv.data().data() + r * n;
      T* o = out.data().data() + r * n;
      const T mx = *std::max_element(in, in + n);
      T total{0};
      for (std::size_t i = 0; i < n; ++i) {
        o[i] = std::exp(in[i] - mx);
        total += o[i];
      }
      for (std::size_t i = 0; i < n; ++i) o[i] /= total;
    }
    return push(OpKind::Softmax, {x.id}, std::move(out));
  }

  /// -log(max(p[label], eps)) for a single probability row.
  Var cross_entropy(Var probs, std::size_t label) {
    const auto& pv = value(probs);
    if (pv.size() != pv.shape().back()) {
      throw ShapeError("cross_entropy: expected one probability row, got " +
                       shape_str(pv.shape()));
    }
    if (label >= pv.size()) {
      throw std::out_of_range("cross_entropy: label " + std::to_string(label) +
                              " outside " + std::to_string(pv.size()) +
                              " classes");
    }
    BasicTensor<T> out({1}, -std::log(std::max(pv[label], kProbFloor)));
    Node node = make_node(OpKind::CrossEntropy, {probs.id});
    node.aux = label;
    return push_node(std::move(node), std::move(out));
  }

  Var reshape(Var x, Shape shape) {
    const auto& xv = value(x);
    if (shape_numel(shape) != xv.size()) mismatch("reshape", xv.shape(), shape);
    return push(OpKind::Reshape, {x.id}, xv.reshaped(std::move(shape)));
  }

  /// Extracts element `index` (row-major) as a scalar.
  Var pick(Var x, std::size_t index) {
    const auto& xv = value(x);
    if (index >= xv.size()) {
      throw std::out_of_range("pick: index " + std::to_string(index) +
                              " outside " + shape_str(xv.shape()));
    }
    BasicTensor<T> out({1}, xv[index]);
    Node node = make_node(OpKind::Pick, {x.id});
    node.aux = index;
    return push_node(std::move(node), std::move(out));
  }

  /// Reverse pass from a scalar seed with d(seed)/d(seed) = 1. Returns one
  /// gradient per recorded value, zero where the seed does not depend on it.
  Gradients<T> backward(Var seed, const BackwardOptions& opts = {}) const {
    if (seed.tape != id_ || seed.id >= slots_.size()) {
      throw std::invalid_argument("backward: seed is not a value on this tape");
    }
    if (slot_value(seed.id).size() != 1) {
      throw std::invalid_argument("backward: seed must be a scalar, got shape " +
                                  shape_str(slot_value(seed.id).shape()));
    }
    Gradients<T> grads;
    grads.values.reserve(slots_.size());
    for (std::size_t i = 0; i < slots_.size(); ++i) {
      grads.values.emplace_back(slot_value(i).shape());
    }
    std::vector<char> reached(slots_.size(), 0);
    grads.values[seed.id][0] = T{1};
    reached[seed.id] = 1;

    for (std::size_t n = slots_[seed.id].producer + 1; n-- > 0;) {
      const Node& node = nodes_[n];
      if (node.kind == OpKind::Leaf || !reached[node.output]) continue;
      for (std::size_t i = 0; i < node.n_inputs; ++i) reached[node.inputs[i]] = 1;
      backprop_node(n, node, grads, opts);
    }
    return grads;
  }

 private:
  static constexpr T kProbFloor = std::numeric_limits<T>::min();

  struct Slot {
    BasicTensor<T> owned;
    const BasicTensor<T>* borrowed = nullptr;
    std::size_t producer = 0;
  };

  struct Node {
    OpKind kind = OpKind::Leaf;
    std::array<std::size_t, 3> inputs{};
    std::size_t n_inputs = 0;
    std::size_t output = 0;
    std::size_t aux = 0;
    bool flag = false;
    std::vector<int> indices;
  };

  const BasicTensor<T>& slot_value(std::size_t id) const {
    const Slot& s = slots_[id];
    return s.borrowed ? *s.borrowed : s.owned;
  }

  void check(Var v, const char* what) const {
    if (v.tape != id_ || v.id >= slots_.size()) {
      throw std::invalid_argument(std::string(what) +
                                  ": value does not belong to this tape");
    }
  }

  [[noreturn]] static void mismatch(const char* op, const Shape& a,
                                    const Shape& b) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) +
                     " vs " + shape_str(b));
  }

  static std::size_t broadcast_inner(const Shape& a, const Shape& b,
                                     const char* op) {
    if (a == b) return shape_numel(a);
    if (b.size() < a.size() && std::equal(b.rbegin(), b.rend(), a.rbegin())) {
      return shape_numel(b);
    }
    mismatch(op, a, b);
  }

  static std::array<std::size_t, 3> split(const Shape& s, std::size_t axis) {
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
    return {outer, s[axis], inner};
  }

  static kernels::ConvGeometry geometry(const Shape& x, const Shape& w,
                                        std::size_t pad) {
    return {x[1], w[0], x[2], x[3], w[2], pad};
  }

  Node make_node(OpKind kind, std::initializer_list<std::size_t> inputs) const {
    Node node;
    node.kind = kind;
    for (std::size_t in : inputs) node.inputs[node.n_inputs++] = in;
    return node;
  }

  Var push_leaf(Slot slot) {
    Node node;
    node.kind = OpKind::Leaf;
    node.output = slots_.size();
    slot.producer = nodes_.size();
    slots_.push_back(std::move(slot));
    nodes_.push_back(std::move(node));
    return {slots_.size() - 1, id_};
  }

  Var push(OpKind kind, std::initializer_list<std::size_t> inputs,
           BasicTensor<T> out) {
    return push_node(make_node(kind, inputs), std::move(out));
  }

  Var push_node(Node node, BasicTensor<T> out) {
    Slot slot;
    slot.owned = std::move(out);
    slot.producer = nodes_.size();
    node.output = slots_.size();
    slots_.push_back(std::move(slot));
    nodes_.push_back(std::move(node));
    return {slots_.size() - 1, id_};
  }

  static void accumulate(BasicTensor<T>& dst, std::span<const T> src) {
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
  }

  void backprop_node(std::size_t index, const Node& node, Gradients<T>& grads,
                     const BackwardOptions& opts) const {
    auto& gv = grads.values;
    const BasicTensor<T>& gout = gv[node.output];
    const BasicTensor<T>& out = slot_value(node.output);
    auto in = [&](std::size_t i) -> const BasicTensor<T>& {
      return slot_value(node.inputs[i]);
    };
    auto gin = [&](std::size_t i) -> BasicTensor<T>& {
      return gv[node.inputs[i]];
    };

    switch (node.kind) {
      case OpKind::Leaf:
        break;
      case OpKind::Add: {
        accumulate(gin(0), gout.data());
        auto& gb = gin(1);
        const std::size_t inner = gb.size();
        for (std::size_t i = 0; i < gout.size(); ++i) gb[i % inner] += gout[i];
        break;
      }
      case OpKind::Multiply: {
        const auto& a = in(0);
        const auto& b = in(1);
        auto& ga = gin(0);
        for (std::size_t i = 0; i < gout.size(); ++i) ga[i] += gout[i] * b[i];
        auto& gb = gin(1);
        for (std::size_t i = 0; i < gout.size(); ++i) gb[i] += gout[i] * a[i];
        break;
      }
      case OpKind::MatMul: {
        const auto& a = in(0);
        const auto& b = in(1);
        const std::size_t m = a.dim(0), k = a.dim(1);
        const std::size_t n = out.dim(1);
        const bool tb = node.flag;
        // dA[M,K] = dC[M,N] * op(B)^T
        std::vector<T> da(m * k);
        kernels::parallel::gemm(gout.data().data(), b.data().data(), da.data(),
                                m, k, n, false, !tb);
        accumulate(gin(0), da);
        // dB = A^T * dC  (stored [K,N]) or dC^T * A (stored [N,K])
        std::vector<T> db(k * n);
        if (tb) {
          kernels::parallel::gemm(gout.data().data(), a.data().data(), db.data(),
                                  n, k, m, true, false);
        } else {
          kernels::parallel::gemm(a.data().data(), gout.data().data(), db.data(),
                                  k, n, m, true, false);
        }
        accumulate(gin(1), db);
        break;
      }
      case OpKind::Conv2d: {
        const auto& x = in(0);
        const auto& w = in(1);
        const auto g = geometry(x.shape(), w.shape(), node.aux);
        const std::size_t in_stride = g.in_channels * g.height * g.width;
        const std::size_t out_stride =
            g.out_channels * g.out_height() * g.out_width();
        std::vector<T> dx(in_stride), dw(w.size()), dbias(g.out_channels);
        for (std::size_t b = 0; b < x.dim(0); ++b) {
          const T* dy = gout.data().data() + b * out_stride;
          kernels::parallel::conv2d_backward_input(dy, w.data().data(),
                                                   dx.data(), g);
          auto& gx = gin(0);
          for (std::size_t i = 0; i < in_stride; ++i) gx[b * in_stride + i] += dx[i];
          kernels::parallel::conv2d_backward_params(
              dy, x.data().data() + b * in_stride, dw.data(), dbias.data(), g);
          accumulate(gin(1), dw);
          accumulate(gin(2), dbias);
        }
        break;
      }
      case OpKind::AvgPool2x2: {
        const auto& x = in(0);
        auto& gx = gin(0);
        const std::size_t planes = x.dim(0) * x.dim(1);
        const std::size_t h = x.dim(2), w = x.dim(3);
        for (std::size_t p = 0; p < planes; ++p) {
          for (std::size_t y = 0; y < h; ++y) {
            for (std::size_t x2 = 0; x2 < w; ++x2) {
              gx[(p * h + y) * w + x2] +=
                  gout[(p * (h / 2) + y / 2) * (w / 2) + x2 / 2] * T(0.25);
            }
          }
        }
        break;
      }
      case OpKind::Tanh: {
        auto& gx = gin(0);
        for (std::size_t i = 0; i < gout.size(); ++i) {
          gx[i] += gout[i] * (T{1} - out[i] * out[i]);
        }
        break;
      }
      case OpKind::Relu: {
        BasicTensor<T> emitted = relu_backward(in(0), gout, mode_);
        accumulate(gin(0), emitted.data());
        if (opts.record_relu_emissions) {
          grads.relu_emissions.push_back({index, std::move(emitted)});
        }
        break;
      }
      case OpKind::EmbeddingLookup: {
        auto& gt = gin(0);
        const std::size_t d = gout.dim(1);
        for (std::size_t r = 0; r < node.indices.size(); ++r) {
          const std::size_t row = std::size_t(node.indices[r]);
          for (std::size_t j = 0; j < d; ++j) gt[row * d + j] += gout[r * d + j];
        }
        break;
      }
      case OpKind::SumOverAxis: {
        auto& gx = gin(0);
        const auto [outer, extent, inner] = split(in(0).shape(), node.aux);
        for (std::size_t o = 0; o < outer; ++o) {
          for (std::size_t e = 0; e < extent; ++e) {
            for (std::size_t i = 0; i < inner; ++i) {
              gx[(o * extent + e) * inner + i] += gout[o * inner + i];
            }
          }
        }
        break;
      }
      case OpKind::Softmax: {
        auto& gx = gin(0);
        const std::size_t n = out.shape().back();
        for (std::size_t r = 0; r < out.size() / n; ++r) {
          T dot{0};
          for (std::size_t i = 0; i < n; ++i) dot += gout[r * n + i] * out[r * n + i];
          for (std::size_t i = 0; i < n; ++i) {
            gx[r * n + i] += out[r * n + i] * (gout[r * n + i] - dot);
          }
        }
        break;
      }
      case OpKind::CrossEntropy: {
        const auto& p = in(0);
        const std::size_t label = node.aux;
        if (p[label] > kProbFloor) gin(0)[label] += -gout[0] / p[label];
        break;
      }
      case OpKind::Reshape:
        accumulate(gin(0), gout.data());
        break;
      case OpKind::Pick:
        gin(0)[node.aux] += gout[0];
        break;
    }
  }

  std::uint64_t id_;
  ReluMode mode_;
  std::vector<Slot> slots_;
  std::vector<Node> nodes_;
};

}  // namespace vqa::ad
