#ifndef DIDA_GRADCHECK_HPP_
#define DIDA_GRADCHECK_HPP_

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "dida/attention.hpp"
#include "dida/encoder.hpp"
#include "dida/rng.hpp"
#include "dida/scene.hpp"
#include "dida/tensor.hpp"

// Gradient-oracle suites: every analytic gradient is checked against
// central finite differences computed without the differentiation graph.
// Shared by the gradcheck CLI subcommand and the acceptance tests.

namespace dida {

struct GradCheckResult {
  std::string name;
  double worst_rel_error;
  double tolerance;
  bool pass() const { return worst_rel_error <= tolerance; }
};

enum class GradCheckSize { kTiny, kSmall };

namespace gradcheck_detail {

inline Tensor random_tensor(Rng& rng, std::vector<int> shape, double lo = -2.0,
                            double hi = 2.0) {
  int n = Tensor::size_from(shape);
  std::vector<double> data(n);
  for (double& v : data) v = rng.uniform(lo, hi);
  return Tensor(std::move(shape), std::move(data));
}

/// Central differences of a nullary evaluation with respect to a parameter
/// buffer mutated in place (used for whole-pipeline checks). Recording is
/// left on: pipelines that contain an inner backward need their graph.
inline Tensor finite_diff_param(const std::function<double()>& eval,
                                Tensor param, double eps = 1e-5) {
  auto& data = param.mutable_data();
  std::vector<double> grad(param.size());
  for (int i = 0; i < param.size(); ++i) {
    double orig = data[i];
    data[i] = orig + eps;
    double hi = eval();
    data[i] = orig - eps;
    double lo = eval();
    data[i] = orig;
    grad[i] = (hi - lo) / (2.0 * eps);
  }
  return Tensor(param.shape(), std::move(grad));
}

/// Checks one tensor-to-scalar map at a random point, returning the worst
/// relative disagreement between backward() and finite differences.
inline double check_fn(const std::function<Tensor(const Tensor&)>& fn,
                       const Tensor& x) {
  Tensor leaf = Tensor(x.shape(), x.data());
  leaf.set_leaf();
  Tensor y = fn(leaf);
  Tensor analytic = backward(y, {leaf})[0];
  Tensor numeric = finite_diff_gradient(fn, x);
  return max_rel_error(analytic, numeric);
}

}  // namespace gradcheck_detail

/// Elementwise ops, activations, reductions.
inline GradCheckResult check_elementwise_ops(GradCheckSize size,
                                             double tol = 1e-6) {
  using gradcheck_detail::check_fn;
  using gradcheck_detail::random_tensor;
  Rng rng(11);
  int trials = size == GradCheckSize::kTiny ? 8 : 24;
  double worst = 0.0;
  for (int t = 0; t < trials; ++t) {
    Tensor a = random_tensor(rng, {5});
    Tensor b = random_tensor(rng, {5});
    worst = std::max(worst, check_fn([&](const Tensor& x) {
      return sum(mul(add(x, b), sub(x, b)));
    }, a));
    worst = std::max(worst, check_fn([&](const Tensor& x) {
      return dot(x, mul(x, b));
    }, a));
    // Keep relu inputs away from the kink at 0.
    Tensor c = random_tensor(rng, {6});
    for (double& v : c.mutable_data())
      if (std::fabs(v) < 0.05) v = 0.1;
    worst = std::max(worst, check_fn([&](const Tensor& x) {
      return sum(relu(x));
    }, c));
    worst = std::max(worst, check_fn([&](const Tensor& x) {
      return sum(mul(sigmoid(x), sigmoid(x)));
    }, a));
    worst = std::max(worst, check_fn([&](const Tensor& x) {
      return gap(reshape(mul(x, x), {1, 5}));
    }, a));
    Tensor pos = random_tensor(rng, {4}, 0.5, 2.0);
    worst = std::max(worst, check_fn([&](const Tensor& x) {
      return sum(log_t(x));
    }, pos));
    worst = std::max(worst, check_fn([&](const Tensor& x) {
      return l2_norm(x);
    }, pos));
    worst = std::max(worst, check_fn([&](const Tensor& x) {
      return sum(exp_t(scale(x, 0.5)));
    }, a));
    worst = std::max(worst, check_fn([&](const Tensor& x) {
      return smul(sum(x), max_s(mul(x, x)));
    }, a));
  }
  return {"elementwise_and_activations", worst, tol};
}

/// conv2d with respect to input, kernel, and bias.
inline GradCheckResult check_conv_ops(GradCheckSize size, double tol = 1e-6) {
  using gradcheck_detail::check_fn;
  using gradcheck_detail::random_tensor;
  Rng rng(22);
  int trials = size == GradCheckSize::kTiny ? 6 : 20;
  double worst = 0.0;
  for (int t = 0; t < trials; ++t) {
    Tensor x = random_tensor(rng, {2, 5, 5});
    Tensor k = random_tensor(rng, {3, 2, 3, 3}, -0.5, 0.5);
    Tensor b = random_tensor(rng, {3}, -0.5, 0.5);
    int stride = 1 + (t % 2), pad = t % 2;
    worst = std::max(worst, check_fn([&](const Tensor& xx) {
      return sum(mul(conv2d(xx, k, b, stride, pad),
                     conv2d(xx, k, b, stride, pad)));
    }, x));
    worst = std::max(worst, check_fn([&](const Tensor& kk) {
      return sum(sigmoid(conv2d(x, kk, b, stride, pad)));
    }, k));
    worst = std::max(worst, check_fn([&](const Tensor& bb) {
      return sum(sigmoid(conv2d(x, k, bb, stride, pad)));
    }, b));
  }
  return {"conv2d", worst, tol};
}

/// matvec / tmatvec / outer and the channel/spatial ops.
inline GradCheckResult check_linear_ops(GradCheckSize size, double tol = 1e-6) {
  using gradcheck_detail::check_fn;
  using gradcheck_detail::random_tensor;
  Rng rng(33);
  int trials = size == GradCheckSize::kTiny ? 8 : 24;
  double worst = 0.0;
  for (int t = 0; t < trials; ++t) {
    Tensor w = random_tensor(rng, {3, 4});
    Tensor x = random_tensor(rng, {4});
    Tensor u = random_tensor(rng, {3});
    worst = std::max(worst, check_fn([&](const Tensor& ww) {
      return dot(matvec(ww, x), matvec(ww, x));
    }, w));
    worst = std::max(worst, check_fn([&](const Tensor& xx) {
      return sum(sigmoid(matvec(w, xx)));
    }, x));
    worst = std::max(worst, check_fn([&](const Tensor& uu) {
      return sum(mul(outer(uu, x), outer(uu, x)));
    }, u));
    worst = std::max(worst, check_fn([&](const Tensor& uu) {
      return dot(tmatvec(w, uu), x);
    }, u));
    Tensor a = random_tensor(rng, {3, 2, 2});
    Tensor alpha = random_tensor(rng, {3});
    worst = std::max(worst, check_fn([&](const Tensor& aa) {
      return sum(mul(channel_reduce(channel_scale(alpha, aa)),
                     channel_reduce(aa)));
    }, a));
    worst = std::max(worst, check_fn([&](const Tensor& al) {
      return l2_norm(channel_scale(al, a));
    }, alpha));
  }
  return {"matvec_outer_channel", worst, tol};
}

/// dida_loss, soften, and the contrastive loss.
inline GradCheckResult check_loss_ops(GradCheckSize size, double tol = 1e-6) {
  using gradcheck_detail::check_fn;
  using gradcheck_detail::random_tensor;
  Rng rng(44);
  int trials = size == GradCheckSize::kTiny ? 8 : 20;
  double worst = 0.0;
  for (int t = 0; t < trials; ++t) {
    Tensor m = random_tensor(rng, {3, 3}, 0.05, 0.95);
    Tensor s = random_tensor(rng, {3, 3}, 0.0, 1.0);
    worst = std::max(worst, check_fn([&](const Tensor& mm) {
      return dida_loss(soften(mm), s);
    }, m));
    std::vector<Tensor> others;
    for (int i = 0; i < 3; ++i) others.push_back(random_tensor(rng, {6}, 0.05, 1.0));
    Tensor f0 = random_tensor(rng, {6}, 0.05, 1.0);
    worst = std::max(worst, check_fn([&](const Tensor& ff) {
      std::vector<Tensor> feats{ff, others[0], others[1], others[2]};
      return contrastive_loss(feats, 0.5);
    }, f0));
  }
  return {"dida_and_contrastive_losses", worst, tol};
}

/// Encoder: scalar head functions against every parameter.
inline GradCheckResult check_encoder_grads(GradCheckSize size,
                                           double tol = 1e-6) {
  using gradcheck_detail::finite_diff_param;
  Rng rng(55);
  EncoderConfig cfg;
  cfg.input_size = size == GradCheckSize::kTiny ? 8 : 16;
  cfg.channels = size == GradCheckSize::kTiny ? std::vector<int>{4, 6}
                                              : std::vector<int>{6, 8, 8};
  cfg.feature_dim = 8;
  cfg.seed = 7;
  Encoder enc(cfg);
  Tensor image = gradcheck_detail::random_tensor(
      rng, {cfg.input_channels, cfg.input_size, cfg.input_size}, 0.0, 1.0);
  Tensor probe = gradcheck_detail::random_tensor(rng, {cfg.feature_dim});

  auto loss_fn = [&]() {
    return dot(enc.forward(image).features, probe).value();
  };
  Tensor loss = dot(enc.forward(image).features, probe);
  auto params = enc.parameters();
  auto analytic = backward(loss, params);
  double worst = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i)
    worst = std::max(
        worst, max_rel_error(analytic[i], finite_diff_param(loss_fn, params[i])));
  return {"encoder_parameter_grads", worst, tol};
}

/// Whole-pipeline double backprop: d(L_DiDA)/d(theta) for the full
/// dida_forward composition versus finite differences. This is the check
/// that certifies gradients of the Eq.-style gradient-derived map.
inline GradCheckResult check_dida_double_backprop(GradCheckSize size,
                                                  double tol = 1e-4) {
  EncoderConfig cfg;
  cfg.input_size = 8;
  cfg.channels = {4, 6};
  cfg.feature_dim = 8;
  cfg.seed = 13;
  Encoder enc(cfg);

  DataConfig dc;
  dc.size = 8;
  dc.min_objects = 1;
  dc.max_objects = 1;
  dc.min_obj_size = 2;
  dc.max_obj_size = 2;
  dc.seed = 5;
  int scenes = size == GradCheckSize::kTiny ? 1 : 2;

  double worst = 0.0;
  for (int s = 0; s < scenes; ++s) {
    Scene scene = generate_scene(dc, s);
    auto eval = [&]() { return dida_forward(enc, scene).first.value(); };
    Tensor loss = dida_forward(enc, scene).first;
    auto params = enc.parameters();
    auto analytic = backward(loss, params);
    for (std::size_t i = 0; i < params.size(); ++i)
      worst = std::max(worst,
                       max_rel_error(analytic[i], gradcheck_detail::
                                         finite_diff_param(eval, params[i])));
  }
  return {"dida_forward_double_backprop", worst, tol};
}

/// Independent Eq.-1 oracle: recomputes the attention map with hand loops,
/// obtaining each per-channel gradient of the dot-product signal by finite
/// differences over activation entries. No autodiff anywhere in the oracle.
inline Tensor attention_map_fd_oracle(const Encoder& enc, const Tensor& image,
                                      const Tensor& masked, double eps = 1e-6) {
  GradMode off(false);
  EncoderOutput out = enc.forward(image);
  EncoderOutput out_m = enc.forward(masked);
  const Tensor& a = out.activations;
  int n = a.shape()[0], p = a.shape()[1], q = a.shape()[2];
  int k = out.features.size();

  // s as a plain function of the activation values. The head is GAP ->
  // linear -> sigmoid; weights are read straight out of the parameter list.
  auto params = enc.parameters();
  const Tensor& fc_w = params[params.size() - 2];
  const Tensor& fc_b = params[params.size() - 1];
  auto s_of = [&](const std::vector<double>& av) {
    std::vector<double> pooled(n, 0.0);
    for (int c = 0; c < n; ++c) {
      for (int j = 0; j < p * q; ++j) pooled[c] += av[c * p * q + j];
      pooled[c] /= p * q;
    }
    double s = 0.0;
    for (int r = 0; r < k; ++r) {
      double z = fc_b[r];
      for (int c = 0; c < n; ++c) z += fc_w[r * n + c] * pooled[c];
      double f = 1.0 / (1.0 + std::exp(-z));
      s += f * (f - out_m.features[r]);
    }
    return s;
  };

  std::vector<double> av = a.data();
  std::vector<double> weights(n, 0.0);
  for (int c = 0; c < n; ++c) {
    double acc = 0.0;
    for (int j = 0; j < p * q; ++j) {
      int i = c * p * q + j;
      double orig = av[i];
      av[i] = orig + eps;
      double hi = s_of(av);
      av[i] = orig - eps;
      double lo = s_of(av);
      av[i] = orig;
      acc += (hi - lo) / (2.0 * eps);
    }
    weights[c] = acc / (p * q);
  }

  std::vector<double> map(static_cast<std::size_t>(p) * q, 0.0);
  for (int c = 0; c < n; ++c)
    for (int j = 0; j < p * q; ++j) map[j] += weights[c] * a[c * p * q + j];
  double peak = 0.0;
  for (double& v : map) {
    v = std::max(v, 0.0);
    peak = std::max(peak, v);
  }
  if (peak > 0.0)
    for (double& v : map) v /= peak;
  return Tensor({p, q}, std::move(map));
}

/// Attention map versus the finite-difference oracle across random tiny
/// encoders. Reports worst absolute error.
inline GradCheckResult check_attention_map_oracle(GradCheckSize size,
                                                  double tol = 1e-5) {
  int trials = size == GradCheckSize::kTiny ? 3 : 8;
  double worst = 0.0;
  for (int t = 0; t < trials; ++t) {
    EncoderConfig cfg;
    cfg.input_size = 8 + 8 * (t % 2);  // p=q of 2 or 4 with 2 layers
    cfg.channels = {4, 4 + (t % 5)};   // n up to 8
    cfg.feature_dim = 8;
    cfg.seed = 100 + t;
    Encoder enc(cfg);
    DataConfig dc;
    dc.size = cfg.input_size;
    dc.min_objects = dc.max_objects = 1;
    dc.min_obj_size = dc.max_obj_size = 2;
    dc.seed = 200 + t;
    Scene scene = generate_scene(dc, t);
    auto [masked, spec] = mask_salient_region(scene.image, scene.saliency);
    (void)spec;

    EncoderOutput out = enc.forward(scene.image);
    EncoderOutput out_m = enc.forward(masked);
    Tensor s = vda_signal(out.features, out_m.features, SignalMode::kDot);
    AttentionMap map = attention_map(s, out.activations, false);
    Tensor oracle = attention_map_fd_oracle(enc, scene.image, masked);
    for (int i = 0; i < map.raw.size(); ++i)
      worst = std::max(worst, std::fabs(map.raw[i] - oracle[i]));
  }
  return {"attention_map_eq1_oracle", worst, tol};
}

/// Runs every suite; a negative tol_override keeps each suite's default.
inline std::vector<GradCheckResult> run_gradcheck(GradCheckSize size,
                                                  double tol_override = -1.0) {
  auto tol = [&](double def) { return tol_override >= 0.0 ? tol_override : def; };
  return {
      check_elementwise_ops(size, tol(1e-6)),
      check_conv_ops(size, tol(1e-6)),
      check_linear_ops(size, tol(1e-6)),
      check_loss_ops(size, tol(1e-6)),
      check_encoder_grads(size, tol(1e-6)),
      check_attention_map_oracle(size, tol(1e-5)),
      check_dida_double_backprop(size, tol(1e-4)),
  };
}

}  // namespace dida

#endif  // DIDA_GRADCHECK_HPP_
