#ifndef DIDA_TENSOR_HPP_
#define DIDA_TENSOR_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace dida {

class Tensor;

/// One recorded operation in the differentiation graph. `vjp` maps the
/// adjoint of this node's output to the adjoints of its parents. Leaf
/// nodes (parameters) have an empty vjp. The vjp bodies are written in
/// terms of the public tensor ops, so running them with recording enabled
/// yields gradients that are themselves differentiable.
struct GraphNode {
  std::vector<Tensor> parents;
  std::function<std::vector<Tensor>(const Tensor&)> vjp;
};

namespace detail {
inline bool& grad_mode() {
  thread_local bool on = true;
  return on;
}
}  // namespace detail

/// RAII switch for graph recording; nests.
class GradMode {
 public:
  explicit GradMode(bool on) : prev_(detail::grad_mode()) {
    detail::grad_mode() = on;
  }
  ~GradMode() { detail::grad_mode() = prev_; }
  GradMode(const GradMode&) = delete;
  GradMode& operator=(const GradMode&) = delete;

 private:
  bool prev_;
};

inline bool grad_enabled() { return detail::grad_mode(); }

/// Dense double-precision tensor with value semantics. Copies share the
/// underlying buffer; ops always allocate fresh buffers, so sharing is
/// never observable except through the optimizer's in-place parameter
/// update.
class Tensor {
 public:
  Tensor() = default;
  Tensor(std::vector<int> shape, std::vector<double> data)
      : shape_(std::move(shape)),
        data_(std::make_shared<std::vector<double>>(std::move(data))) {
    if (static_cast<std::size_t>(size_from(shape_)) != data_->size())
      throw std::invalid_argument("Tensor: shape/data size mismatch");
  }

  static Tensor zeros(std::vector<int> shape) {
    std::size_t n = size_from(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0));
  }
  static Tensor full(std::vector<int> shape, double v) {
    std::size_t n = size_from(shape);
    return Tensor(std::move(shape), std::vector<double>(n, v));
  }
  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  const std::vector<int>& shape() const { return shape_; }
  int size() const { return data_ ? static_cast<int>(data_->size()) : 0; }
  bool defined() const { return static_cast<bool>(data_); }

  const std::vector<double>& data() const { return *data_; }
  std::vector<double>& mutable_data() { return *data_; }

  double operator[](int i) const { return (*data_)[i]; }

  /// Scalar extraction; the tensor must hold exactly one element.
  double value() const {
    if (size() != 1) throw std::invalid_argument("Tensor::value: not scalar");
    return (*data_)[0];
  }

  /// Marks this tensor as a differentiation leaf (trainable parameter).
  Tensor& set_leaf() {
    node = std::make_shared<GraphNode>();
    return *this;
  }

  /// Same values, no graph attachment.
  Tensor detached() const {
    Tensor t;
    t.shape_ = shape_;
    t.data_ = data_;
    return t;
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  static int size_from(const std::vector<int>& shape) {
    int n = 1;
    for (int d : shape) {
      if (d <= 0) throw std::invalid_argument("Tensor: nonpositive extent");
      n *= d;
    }
    return n;
  }

  std::shared_ptr<GraphNode> node;

 private:
  std::vector<int> shape_;
  std::shared_ptr<std::vector<double>> data_;
};

namespace detail {

inline std::string shape_str(const std::vector<int>& s) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

inline void check_finite(const std::vector<double>& v, const char* op) {
  for (double x : v)
    if (!std::isfinite(x))
      throw std::runtime_error(std::string(op) +
                               ": non-finite value in forward result");
}

/// Wraps a freshly computed result; records a graph node when recording is
/// on and at least one parent participates in the graph.
inline Tensor make_op(std::vector<int> shape, std::vector<double> data,
                      std::vector<Tensor> parents,
                      std::function<std::vector<Tensor>(const Tensor&)> vjp,
                      const char* op) {
  check_finite(data, op);
  Tensor out(std::move(shape), std::move(data));
  if (grad_mode()) {
    bool tracked = false;
    for (const auto& p : parents) tracked = tracked || (p.node != nullptr);
    if (tracked) {
      out.node = std::make_shared<GraphNode>();
      out.node->parents = std::move(parents);
      out.node->vjp = std::move(vjp);
    }
  }
  return out;
}

inline void require_same_shape(const Tensor& a, const Tensor& b,
                               const char* op) {
  if (!a.same_shape(b))
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and reduction primitives
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor affine(const Tensor& t, double scale, double shift);
Tensor smul(const Tensor& s, const Tensor& t);
Tensor sum(const Tensor& t);
Tensor broadcast_scalar(const Tensor& s, std::vector<int> shape);
Tensor reshape(const Tensor& t, std::vector<int> shape);

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<double> out(a.size());
  for (int i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
  return detail::make_op(
      a.shape(), std::move(out), {a, b},
      [](const Tensor& g) { return std::vector<Tensor>{g, g}; }, "add");
}

inline Tensor scale(const Tensor& t, double c) { return affine(t, c, 0.0); }
inline Tensor neg(const Tensor& t) { return affine(t, -1.0, 0.0); }

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<double> out(a.size());
  for (int i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
  return detail::make_op(
      a.shape(), std::move(out), {a, b},
      [](const Tensor& g) { return std::vector<Tensor>{g, neg(g)}; }, "sub");
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<double> out(a.size());
  for (int i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
  return detail::make_op(
      a.shape(), std::move(out), {a, b},
      [a, b](const Tensor& g) {
        return std::vector<Tensor>{mul(g, b), mul(g, a)};
      },
      "mul");
}

/// scale*t + shift with constant coefficients.
inline Tensor affine(const Tensor& t, double sc, double shift) {
  std::vector<double> out(t.size());
  for (int i = 0; i < t.size(); ++i) out[i] = sc * t[i] + shift;
  return detail::make_op(
      t.shape(), std::move(out), {t},
      [sc](const Tensor& g) { return std::vector<Tensor>{affine(g, sc, 0.0)}; },
      "affine");
}

/// Scalar-tensor product (the only broadcasting form supported).
inline Tensor smul(const Tensor& s, const Tensor& t) {
  if (s.size() != 1) throw std::invalid_argument("smul: s must be scalar");
  double c = s[0];
  std::vector<double> out(t.size());
  for (int i = 0; i < t.size(); ++i) out[i] = c * t[i];
  return detail::make_op(
      t.shape(), std::move(out), {s, t},
      [s, t](const Tensor& g) {
        return std::vector<Tensor>{sum(mul(g, t)), smul(s, g)};
      },
      "smul");
}

inline Tensor sum(const Tensor& t) {
  double acc = 0.0;
  for (int i = 0; i < t.size(); ++i) acc += t[i];
  return detail::make_op(
      {1}, {acc}, {t},
      [shape = t.shape()](const Tensor& g) {
        return std::vector<Tensor>{broadcast_scalar(g, shape)};
      },
      "sum");
}

inline Tensor broadcast_scalar(const Tensor& s, std::vector<int> shape) {
  if (s.size() != 1)
    throw std::invalid_argument("broadcast_scalar: s must be scalar");
  int n = Tensor::size_from(shape);
  std::vector<double> out(n, s[0]);
  return detail::make_op(
      std::move(shape), std::move(out), {s},
      [](const Tensor& g) { return std::vector<Tensor>{sum(g)}; },
      "broadcast_scalar");
}

inline Tensor reshape(const Tensor& t, std::vector<int> shape) {
  if (Tensor::size_from(shape) != t.size())
    throw std::invalid_argument("reshape: element count mismatch");
  return detail::make_op(
      std::move(shape), t.data(), {t},
      [old = t.shape()](const Tensor& g) {
        return std::vector<Tensor>{reshape(g, old)};
      },
      "reshape");
}

// ---------------------------------------------------------------------------
// Nonlinearities
// ---------------------------------------------------------------------------

/// max(0, x); the subgradient at exactly 0 is taken as 0.
inline Tensor relu(const Tensor& t) {
  std::vector<double> out(t.size());
  std::vector<double> mask(t.size());
  for (int i = 0; i < t.size(); ++i) {
    mask[i] = t[i] > 0.0 ? 1.0 : 0.0;
    out[i] = mask[i] * t[i];
  }
  Tensor m(t.shape(), std::move(mask));  // constant: local slope, not tracked
  return detail::make_op(
      t.shape(), std::move(out), {t},
      [m](const Tensor& g) { return std::vector<Tensor>{mul(g, m)}; }, "relu");
}

Tensor sigmoid(const Tensor& t);
Tensor inv_t(const Tensor& t);
Tensor sqrt_t(const Tensor& t);

// The vjps below recompute the primal from the captured input rather than
// capturing their own output; capturing the output would cycle the node's
// shared ownership, and the input form keeps higher-order flow intact.

inline Tensor sigmoid(const Tensor& t) {
  std::vector<double> out(t.size());
  for (int i = 0; i < t.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-t[i]));
  return detail::make_op(
      t.shape(), std::move(out), {t},
      [t](const Tensor& g) {
        Tensor y = sigmoid(t);
        return std::vector<Tensor>{mul(g, mul(y, affine(y, -1.0, 1.0)))};
      },
      "sigmoid");
}

inline Tensor exp_t(const Tensor& t) {
  std::vector<double> out(t.size());
  for (int i = 0; i < t.size(); ++i) out[i] = std::exp(t[i]);
  return detail::make_op(
      t.shape(), std::move(out), {t},
      [t](const Tensor& g) {
        return std::vector<Tensor>{mul(g, exp_t(t))};
      },
      "exp");
}

inline Tensor log_t(const Tensor& t) {
  std::vector<double> out(t.size());
  for (int i = 0; i < t.size(); ++i) {
    if (t[i] <= 0.0) throw std::runtime_error("log: nonpositive input");
    out[i] = std::log(t[i]);
  }
  return detail::make_op(
      t.shape(), std::move(out), {t},
      [t](const Tensor& g) { return std::vector<Tensor>{mul(g, inv_t(t))}; },
      "log");
}

inline Tensor inv_t(const Tensor& t) {
  std::vector<double> out(t.size());
  for (int i = 0; i < t.size(); ++i) {
    if (t[i] == 0.0) throw std::runtime_error("inv: division by zero");
    out[i] = 1.0 / t[i];
  }
  return detail::make_op(
      t.shape(), std::move(out), {t},
      [t](const Tensor& g) {
        Tensor y = inv_t(t);
        return std::vector<Tensor>{neg(mul(g, mul(y, y)))};
      },
      "inv");
}

inline Tensor sqrt_t(const Tensor& t) {
  std::vector<double> out(t.size());
  for (int i = 0; i < t.size(); ++i) {
    if (t[i] < 0.0) throw std::runtime_error("sqrt: negative input");
    out[i] = std::sqrt(t[i]);
  }
  return detail::make_op(
      t.shape(), std::move(out), {t},
      [t](const Tensor& g) {
        return std::vector<Tensor>{scale(mul(g, inv_t(sqrt_t(t))), 0.5)};
      },
      "sqrt");
}

/// Maximum entry as a scalar; routes the gradient to the first argmax.
inline Tensor max_s(const Tensor& t) {
  int arg = 0;
  for (int i = 1; i < t.size(); ++i)
    if (t[i] > t[arg]) arg = i;
  std::vector<double> onehot(t.size(), 0.0);
  onehot[arg] = 1.0;
  Tensor mask(t.shape(), std::move(onehot));
  return detail::make_op(
      {1}, {t[arg]}, {t},
      [mask](const Tensor& g) { return std::vector<Tensor>{smul(g, mask)}; },
      "max_s");
}

// ---------------------------------------------------------------------------
// Contractions
// ---------------------------------------------------------------------------

inline Tensor dot(const Tensor& a, const Tensor& b) {
  if (a.size() != b.size())
    throw std::invalid_argument("dot: length mismatch");
  double acc = 0.0;
  for (int i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return detail::make_op(
      {1}, {acc}, {a, b},
      [a, b](const Tensor& g) {
        return std::vector<Tensor>{smul(g, b), smul(g, a)};
      },
      "dot");
}

inline Tensor gap(const Tensor& t) {
  if (t.size() == 0) throw std::invalid_argument("gap: empty input");
  return scale(sum(t), 1.0 / t.size());
}

inline Tensor l2_norm(const Tensor& t) {
  if (t.size() == 0) throw std::invalid_argument("l2_norm: empty input");
  return sqrt_t(sum(mul(t, t)));
}

// Matrix-vector family. W is {rows, cols}; the three ops reference each
// other in their vjps, closing the system under differentiation.
Tensor matvec(const Tensor& w, const Tensor& x);
Tensor tmatvec(const Tensor& w, const Tensor& x);
Tensor outer(const Tensor& u, const Tensor& v);

inline Tensor matvec(const Tensor& w, const Tensor& x) {
  if (w.shape().size() != 2 || w.shape()[1] != x.size())
    throw std::invalid_argument("matvec: shape mismatch");
  int rows = w.shape()[0], cols = w.shape()[1];
  std::vector<double> out(rows, 0.0);
  for (int r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (int c = 0; c < cols; ++c) acc += w[r * cols + c] * x[c];
    out[r] = acc;
  }
  return detail::make_op(
      {rows}, std::move(out), {w, x},
      [w, x](const Tensor& g) {
        return std::vector<Tensor>{outer(g, x), tmatvec(w, g)};
      },
      "matvec");
}

inline Tensor tmatvec(const Tensor& w, const Tensor& x) {
  if (w.shape().size() != 2 || w.shape()[0] != x.size())
    throw std::invalid_argument("tmatvec: shape mismatch");
  int rows = w.shape()[0], cols = w.shape()[1];
  std::vector<double> out(cols, 0.0);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) out[c] += w[r * cols + c] * x[r];
  return detail::make_op(
      {cols}, std::move(out), {w, x},
      [w, x](const Tensor& g) {
        return std::vector<Tensor>{outer(x, g), matvec(w, g)};
      },
      "tmatvec");
}

inline Tensor outer(const Tensor& u, const Tensor& v) {
  if (u.shape().size() != 1 || v.shape().size() != 1)
    throw std::invalid_argument("outer: vectors required");
  int rows = u.size(), cols = v.size();
  std::vector<double> out(static_cast<std::size_t>(rows) * cols);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) out[r * cols + c] = u[r] * v[c];
  return detail::make_op(
      {rows, cols}, std::move(out), {u, v},
      [u, v](const Tensor& g) {
        return std::vector<Tensor>{matvec(g, v), tmatvec(g, u)};
      },
      "outer");
}

// ---------------------------------------------------------------------------
// Channel/spatial ops for {C, H, W} stacks
// ---------------------------------------------------------------------------

Tensor spatial_sum(const Tensor& a);
Tensor spatial_broadcast(const Tensor& v, int h, int w);
Tensor channel_scale(const Tensor& alpha, const Tensor& a);
Tensor channel_reduce(const Tensor& a);
Tensor channel_expand(const Tensor& m, int channels);

/// {C,H,W} -> {C}: sum over each channel's spatial entries.
inline Tensor spatial_sum(const Tensor& a) {
  if (a.shape().size() != 3)
    throw std::invalid_argument("spatial_sum: rank-3 input required");
  int c = a.shape()[0], hw = a.shape()[1] * a.shape()[2];
  std::vector<double> out(c, 0.0);
  for (int i = 0; i < c; ++i)
    for (int j = 0; j < hw; ++j) out[i] += a[i * hw + j];
  return detail::make_op(
      {c}, std::move(out), {a},
      [h = a.shape()[1], w = a.shape()[2]](const Tensor& g) {
        return std::vector<Tensor>{spatial_broadcast(g, h, w)};
      },
      "spatial_sum");
}

/// {C} -> {C,H,W}: repeat each channel value over an h*w map.
inline Tensor spatial_broadcast(const Tensor& v, int h, int w) {
  if (v.shape().size() != 1)
    throw std::invalid_argument("spatial_broadcast: vector required");
  int c = v.size();
  std::vector<double> out(static_cast<std::size_t>(c) * h * w);
  for (int i = 0; i < c; ++i)
    for (int j = 0; j < h * w; ++j) out[i * h * w + j] = v[i];
  return detail::make_op(
      {c, h, w}, std::move(out), {v},
      [](const Tensor& g) { return std::vector<Tensor>{spatial_sum(g)}; },
      "spatial_broadcast");
}

/// Per-channel mean, {C,H,W} -> {C}.
inline Tensor channel_mean(const Tensor& a) {
  if (a.shape().size() != 3)
    throw std::invalid_argument("channel_mean: rank-3 input required");
  return scale(spatial_sum(a), 1.0 / (a.shape()[1] * a.shape()[2]));
}

/// Scales channel i of `a` by alpha[i].
inline Tensor channel_scale(const Tensor& alpha, const Tensor& a) {
  if (a.shape().size() != 3 || alpha.size() != a.shape()[0])
    throw std::invalid_argument("channel_scale: shape mismatch");
  int c = a.shape()[0], hw = a.shape()[1] * a.shape()[2];
  std::vector<double> out(a.size());
  for (int i = 0; i < c; ++i)
    for (int j = 0; j < hw; ++j) out[i * hw + j] = alpha[i] * a[i * hw + j];
  return detail::make_op(
      a.shape(), std::move(out), {alpha, a},
      [alpha, a](const Tensor& g) {
        return std::vector<Tensor>{spatial_sum(mul(g, a)),
                                   channel_scale(alpha, g)};
      },
      "channel_scale");
}

/// {C,H,W} -> {H,W}: sum across channels.
inline Tensor channel_reduce(const Tensor& a) {
  if (a.shape().size() != 3)
    throw std::invalid_argument("channel_reduce: rank-3 input required");
  int c = a.shape()[0], h = a.shape()[1], w = a.shape()[2];
  std::vector<double> out(static_cast<std::size_t>(h) * w, 0.0);
  for (int i = 0; i < c; ++i)
    for (int j = 0; j < h * w; ++j) out[j] += a[i * h * w + j];
  return detail::make_op(
      {h, w}, std::move(out), {a},
      [c](const Tensor& g) {
        return std::vector<Tensor>{channel_expand(g, c)};
      },
      "channel_reduce");
}

/// {H,W} -> {C,H,W}: copy the map into every channel.
inline Tensor channel_expand(const Tensor& m, int channels) {
  if (m.shape().size() != 2)
    throw std::invalid_argument("channel_expand: rank-2 input required");
  int h = m.shape()[0], w = m.shape()[1];
  std::vector<double> out(static_cast<std::size_t>(channels) * h * w);
  for (int i = 0; i < channels; ++i)
    for (int j = 0; j < h * w; ++j) out[i * h * w + j] = m[j];
  return detail::make_op(
      {channels, h, w}, std::move(out), {m},
      [](const Tensor& g) { return std::vector<Tensor>{channel_reduce(g)}; },
      "channel_expand");
}

// ---------------------------------------------------------------------------
// Convolution (cross-correlation), no batch dimension
// ---------------------------------------------------------------------------

namespace conv {

struct Geometry {
  int ci, hin, win;   // input
  int co, kh, kw;     // kernel
  int stride, pad;
  int hout, wout;
};

inline Geometry geometry(const std::vector<int>& xs, const std::vector<int>& ks,
                         int stride, int pad) {
  if (xs.size() != 3 || ks.size() != 4)
    throw std::invalid_argument("conv2d: input must be {C,H,W}, kernel {Co,Ci,kh,kw}");
  if (stride < 1) throw std::invalid_argument("conv2d: stride must be >= 1");
  if (pad < 0) throw std::invalid_argument("conv2d: negative padding");
  Geometry g;
  g.ci = xs[0]; g.hin = xs[1]; g.win = xs[2];
  g.co = ks[0]; g.kh = ks[2]; g.kw = ks[3];
  if (ks[1] != g.ci)
    throw std::invalid_argument("conv2d: channel mismatch between input and kernel");
  if (g.kh > g.hin + 2 * pad || g.kw > g.win + 2 * pad)
    throw std::invalid_argument("conv2d: kernel larger than padded input");
  g.stride = stride; g.pad = pad;
  g.hout = (g.hin + 2 * pad - g.kh) / stride + 1;
  g.wout = (g.win + 2 * pad - g.kw) / stride + 1;
  return g;
}

inline std::vector<double> forward(const Tensor& x, const Tensor& k,
                                   const Geometry& g) {
  std::vector<double> out(static_cast<std::size_t>(g.co) * g.hout * g.wout, 0.0);
  for (int co = 0; co < g.co; ++co)
    for (int oh = 0; oh < g.hout; ++oh)
      for (int ow = 0; ow < g.wout; ++ow) {
        double acc = 0.0;
        for (int ci = 0; ci < g.ci; ++ci)
          for (int i = 0; i < g.kh; ++i) {
            int h = oh * g.stride - g.pad + i;
            if (h < 0 || h >= g.hin) continue;
            for (int j = 0; j < g.kw; ++j) {
              int w = ow * g.stride - g.pad + j;
              if (w < 0 || w >= g.win) continue;
              acc += x[(ci * g.hin + h) * g.win + w] *
                     k[((co * g.ci + ci) * g.kh + i) * g.kw + j];
            }
          }
        out[(co * g.hout + oh) * g.wout + ow] = acc;
      }
  return out;
}

inline std::vector<double> input_grad(const Tensor& gy, const Tensor& k,
                                      const Geometry& g) {
  std::vector<double> out(static_cast<std::size_t>(g.ci) * g.hin * g.win, 0.0);
  for (int co = 0; co < g.co; ++co)
    for (int oh = 0; oh < g.hout; ++oh)
      for (int ow = 0; ow < g.wout; ++ow) {
        double gv = gy[(co * g.hout + oh) * g.wout + ow];
        for (int ci = 0; ci < g.ci; ++ci)
          for (int i = 0; i < g.kh; ++i) {
            int h = oh * g.stride - g.pad + i;
            if (h < 0 || h >= g.hin) continue;
            for (int j = 0; j < g.kw; ++j) {
              int w = ow * g.stride - g.pad + j;
              if (w < 0 || w >= g.win) continue;
              out[(ci * g.hin + h) * g.win + w] +=
                  gv * k[((co * g.ci + ci) * g.kh + i) * g.kw + j];
            }
          }
      }
  return out;
}

inline std::vector<double> kernel_grad(const Tensor& x, const Tensor& gy,
                                       const Geometry& g) {
  std::vector<double> out(
      static_cast<std::size_t>(g.co) * g.ci * g.kh * g.kw, 0.0);
  for (int co = 0; co < g.co; ++co)
    for (int oh = 0; oh < g.hout; ++oh)
      for (int ow = 0; ow < g.wout; ++ow) {
        double gv = gy[(co * g.hout + oh) * g.wout + ow];
        for (int ci = 0; ci < g.ci; ++ci)
          for (int i = 0; i < g.kh; ++i) {
            int h = oh * g.stride - g.pad + i;
            if (h < 0 || h >= g.hin) continue;
            for (int j = 0; j < g.kw; ++j) {
              int w = ow * g.stride - g.pad + j;
              if (w < 0 || w >= g.win) continue;
              out[((co * g.ci + ci) * g.kh + i) * g.kw + j] +=
                  gv * x[(ci * g.hin + h) * g.win + w];
            }
          }
      }
  return out;
}

}  // namespace conv

Tensor conv2d_nobias(const Tensor& x, const Tensor& k, int stride, int pad);
Tensor conv2d_input_grad(const Tensor& gy, const Tensor& k, int stride,
                         int pad, int hin, int win);
Tensor conv2d_kernel_grad(const Tensor& x, const Tensor& gy, int stride,
                          int pad, int kh, int kw);

inline Tensor conv2d_nobias(const Tensor& x, const Tensor& k, int stride,
                            int pad) {
  auto g = conv::geometry(x.shape(), k.shape(), stride, pad);
  auto out = conv::forward(x, k, g);
  return detail::make_op(
      {g.co, g.hout, g.wout}, std::move(out), {x, k},
      [x, k, stride, pad, g](const Tensor& gy) {
        return std::vector<Tensor>{
            conv2d_input_grad(gy, k, stride, pad, g.hin, g.win),
            conv2d_kernel_grad(x, gy, stride, pad, g.kh, g.kw)};
      },
      "conv2d");
}

/// Adjoint of conv2d_nobias in its input argument.
inline Tensor conv2d_input_grad(const Tensor& gy, const Tensor& k, int stride,
                                int pad, int hin, int win) {
  auto g = conv::geometry({k.shape()[1], hin, win}, k.shape(), stride, pad);
  if (gy.shape() != std::vector<int>{g.co, g.hout, g.wout})
    throw std::invalid_argument("conv2d_input_grad: shape mismatch");
  auto out = conv::input_grad(gy, k, g);
  return detail::make_op(
      {g.ci, g.hin, g.win}, std::move(out), {gy, k},
      [gy, k, stride, pad, g](const Tensor& u) {
        return std::vector<Tensor>{
            conv2d_nobias(u, k, stride, pad),
            conv2d_kernel_grad(u, gy, stride, pad, g.kh, g.kw)};
      },
      "conv2d_input_grad");
}

/// Adjoint of conv2d_nobias in its kernel argument.
inline Tensor conv2d_kernel_grad(const Tensor& x, const Tensor& gy, int stride,
                                 int pad, int kh, int kw) {
  std::vector<int> kshape{gy.shape()[0], x.shape()[0], kh, kw};
  auto g = conv::geometry(x.shape(), kshape, stride, pad);
  if (gy.shape() != std::vector<int>{g.co, g.hout, g.wout})
    throw std::invalid_argument("conv2d_kernel_grad: shape mismatch");
  auto out = conv::kernel_grad(x, gy, g);
  return detail::make_op(
      std::move(kshape), std::move(out), {x, gy},
      [x, gy, stride, pad, g](const Tensor& u) {
        return std::vector<Tensor>{
            conv2d_input_grad(gy, u, stride, pad, g.hin, g.win),
            conv2d_nobias(x, u, stride, pad)};
      },
      "conv2d_kernel_grad");
}

inline Tensor conv2d(const Tensor& x, const Tensor& k, const Tensor& b,
                     int stride, int pad) {
  auto g = conv::geometry(x.shape(), k.shape(), stride, pad);
  if (b.shape() != std::vector<int>{g.co})
    throw std::invalid_argument("conv2d: bias length must equal out channels");
  return add(conv2d_nobias(x, k, stride, pad),
             spatial_broadcast(b, g.hout, g.wout));
}

// ---------------------------------------------------------------------------
// Reverse-mode backward pass
// ---------------------------------------------------------------------------

/// Reverse-mode gradients of a scalar `out` with respect to each tensor in
/// `wrt`. Tensors not on the graph (or unreachable from `out`) get zero
/// gradients. With build_higher, the returned gradients carry graph nodes,
/// so a further backward through them is valid.
inline std::vector<Tensor> backward(const Tensor& out,
                                    const std::vector<Tensor>& wrt,
                                    bool build_higher = false) {
  if (out.size() != 1)
    throw std::invalid_argument("backward: output must be scalar");

  std::unordered_map<GraphNode*, Tensor> adjoint;
  if (out.node) {
    // Iterative post-order DFS for a topological order.
    std::vector<GraphNode*> order;
    std::unordered_map<GraphNode*, int> mark;  // 1 = visiting, 2 = done
    std::vector<std::pair<GraphNode*, std::size_t>> stack;
    stack.emplace_back(out.node.get(), 0);
    mark[out.node.get()] = 1;
    while (!stack.empty()) {
      auto& [n, idx] = stack.back();
      if (idx < n->parents.size()) {
        GraphNode* p = n->parents[idx++].node.get();
        if (p && mark[p] == 0) {
          mark[p] = 1;
          stack.emplace_back(p, 0);
        }
      } else {
        mark[n] = 2;
        order.push_back(n);
        stack.pop_back();
      }
    }

    GradMode mode(build_higher);
    adjoint[out.node.get()] = Tensor::scalar(1.0);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      GraphNode* n = *it;
      if (!n->vjp) continue;
      auto found = adjoint.find(n);
      if (found == adjoint.end()) continue;
      auto grads = n->vjp(found->second);
      if (grads.size() != n->parents.size())
        throw std::logic_error("backward: vjp arity mismatch");
      for (std::size_t i = 0; i < grads.size(); ++i) {
        GraphNode* p = n->parents[i].node.get();
        if (!p) continue;
        auto slot = adjoint.find(p);
        if (slot == adjoint.end())
          adjoint.emplace(p, grads[i]);
        else
          slot->second = add(slot->second, grads[i]);
      }
    }
  }

  std::vector<Tensor> result;
  result.reserve(wrt.size());
  for (const auto& w : wrt) {
    auto it = w.node ? adjoint.find(w.node.get()) : adjoint.end();
    if (it == adjoint.end())
      result.push_back(Tensor::zeros(w.shape()));
    else
      result.push_back(it->second);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Finite differences (independent gradient oracle)
// ---------------------------------------------------------------------------

/// Central-difference gradient of a tensor-to-scalar map. Evaluations run
/// with recording off.
inline Tensor finite_diff_gradient(
    const std::function<Tensor(const Tensor&)>& fn, const Tensor& x,
    double eps = 1e-5) {
  GradMode off(false);
  std::vector<double> grad(x.size());
  std::vector<double> probe = x.data();
  for (int i = 0; i < x.size(); ++i) {
    double orig = probe[i];
    probe[i] = orig + eps;
    double hi = fn(Tensor(x.shape(), probe)).value();
    probe[i] = orig - eps;
    double lo = fn(Tensor(x.shape(), probe)).value();
    probe[i] = orig;
    grad[i] = (hi - lo) / (2.0 * eps);
  }
  return Tensor(x.shape(), std::move(grad));
}

/// max_i |a_i - b_i| / max(1, |a_i|, |b_i|); the comparison metric used by
/// the gradient-oracle suites.
inline double max_rel_error(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "max_rel_error");
  double worst = 0.0;
  for (int i = 0; i < a.size(); ++i) {
    double denom = std::max({1.0, std::fabs(a[i]), std::fabs(b[i])});
    worst = std::max(worst, std::fabs(a[i] - b[i]) / denom);
  }
  return worst;
}

}  // namespace dida

#endif  // DIDA_TENSOR_HPP_
