#ifndef DIDA_ATTENTION_HPP_
#define DIDA_ATTENTION_HPP_

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "dida/encoder.hpp"
#include "dida/scene.hpp"
#include "dida/tensor.hpp"

namespace dida {

struct NoSalientRegion : std::runtime_error {
  NoSalientRegion() : std::runtime_error("saliency map has no pixel > 0.5") {}
};

/// Bounding box in pixel coordinates, inclusive-exclusive.
struct MaskSpec {
  int row0, col0, row1, col1;
};

constexpr double kSoftenAlpha = 16.0;
constexpr double kSoftenBeta = 0.5;
constexpr double kNormEps = 1e-12;
constexpr double kDefaultKeepFraction = 0.25;

struct AttentionMap {
  Tensor raw;       // M: nonnegative, max-normalized, {p,q}
  Tensor softened;  // sigma(alpha*(M - beta)), entries in (0,1)
  double alpha = kSoftenAlpha;
  double beta = kSoftenBeta;
};

enum class SignalMode { kThreshold, kDot };

/// Replaces the tight bounding box of saliency > 0.5 with the per-channel
/// mean of the whole (unmasked) image; everything else is untouched.
inline std::pair<Tensor, MaskSpec> mask_salient_region(const Tensor& image,
                                                       const Tensor& saliency) {
  if (image.shape().size() != 3 || saliency.shape().size() != 2 ||
      image.shape()[1] != saliency.shape()[0] ||
      image.shape()[2] != saliency.shape()[1])
    throw std::invalid_argument("mask_salient_region: shape mismatch");
  int h = saliency.shape()[0], w = saliency.shape()[1];
  int r0 = h, c0 = w, r1 = -1, c1 = -1;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (saliency[y * w + x] > 0.5) {
        r0 = std::min(r0, y);
        r1 = std::max(r1, y);
        c0 = std::min(c0, x);
        c1 = std::max(c1, x);
      }
  if (r1 < 0) throw NoSalientRegion();
  MaskSpec spec{r0, c0, r1 + 1, c1 + 1};

  int ch = image.shape()[0];
  std::vector<double> out = image.data();
  for (int c = 0; c < ch; ++c) {
    double mean = 0.0;
    for (int i = 0; i < h * w; ++i) mean += image[c * h * w + i];
    mean /= h * w;
    for (int y = spec.row0; y < spec.row1; ++y)
      for (int x = spec.col0; x < spec.col1; ++x)
        out[(c * h + y) * w + x] = mean;
  }
  return {Tensor(image.shape(), std::move(out)), spec};
}

/// f_d = f - f_m, graph-linked.
inline Tensor difference_vector(const Tensor& f, const Tensor& f_m) {
  if (f.size() != f_m.size())
    throw std::invalid_argument("difference_vector: length mismatch");
  return sub(f, f_m);
}

/// Keeps the ceil(keep_fraction*k) entries of largest |f_d|, zeros the
/// rest; ties broken toward the lower index. The selection mask is a
/// constant with respect to differentiation.
inline Tensor dominant_difference(const Tensor& f_d,
                                  double keep_fraction = kDefaultKeepFraction) {
  if (keep_fraction <= 0.0 || keep_fraction > 1.0)
    throw std::invalid_argument("dominant_difference: keep_fraction in (0,1]");
  int k = f_d.size();
  int keep = static_cast<int>(std::ceil(keep_fraction * k));
  std::vector<int> idx(k);
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
    return std::fabs(f_d[a]) > std::fabs(f_d[b]);
  });
  std::vector<double> mask(k, 0.0);
  for (int i = 0; i < keep; ++i) mask[idx[i]] = 1.0;
  return mul(f_d, Tensor(f_d.shape(), std::move(mask)));
}

/// The masking signal. Threshold mode is the diagnostic s = 1^T f_d
/// restricted to dominant dimensions; Dot mode is the differentiable
/// s = f . (f - f_m) used for training.
inline Tensor vda_signal(const Tensor& f, const Tensor& f_m, SignalMode mode,
                         double keep_fraction = kDefaultKeepFraction) {
  Tensor f_d = difference_vector(f, f_m);
  if (mode == SignalMode::kThreshold)
    return sum(dominant_difference(f_d, keep_fraction));
  return dot(f, f_d);
}

/// Gradient-weighted map: per-channel weights are GAP of ds/dA_i, the map
/// is ReLU of the weighted channel sum, then max-normalized. When
/// retain_graph is set the result stays on the graph so a loss on it can
/// reach the encoder parameters through both A and the gradients.
inline AttentionMap attention_map(const Tensor& s, const Tensor& activations,
                                  bool retain_graph) {
  Tensor grad = backward(s, {activations}, /*build_higher=*/retain_graph)[0];
  GradMode mode(retain_graph);
  Tensor alpha = channel_mean(grad);
  Tensor m = relu(channel_reduce(channel_scale(alpha, activations)));
  Tensor peak = max_s(m);
  if (peak.value() > 0.0) m = smul(inv_t(peak), m);
  AttentionMap out;
  out.raw = m;
  return out;
}

/// sigma(alpha*(M - beta)); saturates low responses toward 0 and high ones
/// toward 1.
inline Tensor soften(const Tensor& raw, double alpha = kSoftenAlpha,
                     double beta = kSoftenBeta) {
  return sigmoid(affine(raw, alpha, -alpha * beta));
}

/// 1 - cosine similarity of the flattened maps; each norm is guarded by
/// an additive epsilon so an identically zero map stays finite.
inline Tensor dida_loss(const Tensor& m_soft, const Tensor& s_low) {
  detail::require_same_shape(m_soft, s_low, "dida_loss");
  Tensor num = dot(m_soft, s_low);
  Tensor den = mul(affine(l2_norm(m_soft), 1.0, kNormEps),
                   affine(l2_norm(s_low), 1.0, kNormEps));
  return affine(mul(num, inv_t(den)), -1.0, 1.0);
}

/// Full training-path composition for one scene. The attention map is
/// computed for the original image's activations; the loss target is the
/// saliency mask area-averaged down to the activation grid.
inline std::pair<Tensor, AttentionMap> dida_forward(const Encoder& encoder,
                                                    const Scene& scene) {
  auto [masked, spec] = mask_salient_region(scene.image, scene.saliency);
  (void)spec;
  EncoderOutput out = encoder.forward(scene.image);
  EncoderOutput out_m = encoder.forward(masked);
  Tensor s = vda_signal(out.features, out_m.features, SignalMode::kDot);
  AttentionMap map = attention_map(s, out.activations, /*retain_graph=*/true);
  map.softened = soften(map.raw);
  int p = map.raw.shape()[0], q = map.raw.shape()[1];
  Tensor target = downsample_mask(scene.saliency, p, q);
  Tensor loss = dida_loss(map.softened, target);
  return {loss, map};
}

/// In-batch normalized-temperature cross entropy over cosine similarities.
/// `features` holds two views per scene, adjacent: (2i, 2i+1) are
/// positives. Denominator runs over all candidates except the anchor.
inline Tensor contrastive_loss(const std::vector<Tensor>& features,
                               double temperature) {
  if (features.size() < 4 || features.size() % 2 != 0)
    throw std::invalid_argument(
        "contrastive_loss: need two views each of at least 2 scenes");
  if (temperature <= 0.0)
    throw std::invalid_argument("contrastive_loss: temperature must be > 0");
  int n = static_cast<int>(features.size());

  std::vector<Tensor> inv_norm(n);
  for (int i = 0; i < n; ++i)
    inv_norm[i] = inv_t(affine(l2_norm(features[i]), 1.0, kNormEps));

  auto sim = [&](int i, int j) {
    return scale(mul(mul(dot(features[i], features[j]), inv_norm[i]),
                     inv_norm[j]),
                 1.0 / temperature);
  };

  Tensor total = Tensor::scalar(0.0);
  for (int i = 0; i < n; ++i) {
    int pos = i ^ 1;
    Tensor denom = Tensor::scalar(0.0);
    Tensor pos_logit;
    for (int j = 0; j < n; ++j) {
      if (j == i) continue;
      Tensor e = exp_t(sim(i, j));
      denom = add(denom, e);
      if (j == pos) pos_logit = e;
    }
    total = add(total, neg(log_t(mul(pos_logit, inv_t(denom)))));
  }
  return scale(total, 1.0 / n);
}

}  // namespace dida

#endif  // DIDA_ATTENTION_HPP_
