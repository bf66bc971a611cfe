#ifndef DIDA_TRAIN_HPP_
#define DIDA_TRAIN_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dida/attention.hpp"
#include "dida/encoder.hpp"
#include "dida/rng.hpp"
#include "dida/scene.hpp"
#include "dida/tensor.hpp"

namespace dida {

enum class OptimizerTag { kSgd, kAdam };

struct TrainConfig {
  int steps = 800;
  int batch_size = 4;
  double learning_rate = 1e-3;
  OptimizerTag optimizer = OptimizerTag::kAdam;
  double lambda_dida = 1.0;
  double lambda_contrastive = 1.0;
  // Desk-scale batches make low-temperature InfoNCE dominate the saliency
  // objective and erode grounding; 2.0 keeps the two losses balanced.
  double temperature = 2.0;
  int eval_interval = 100;
  std::uint64_t seed = 0;
  std::string checkpoint_path;  // empty: no checkpoints written

  void validate() const {
    if (steps < 1) throw std::invalid_argument("TrainConfig: steps must be >= 1");
    if (learning_rate <= 0.0)
      throw std::invalid_argument("TrainConfig: learning rate must be > 0");
    if (batch_size < 1)
      throw std::invalid_argument("TrainConfig: batch size must be >= 1");
    if (eval_interval < 1)
      throw std::invalid_argument("TrainConfig: eval interval must be >= 1");
  }
};

struct TrainRecord {
  int step;
  double dida_loss;
  double contrastive_loss;
  double mean_iou;
};

struct TrainReport {
  std::vector<TrainRecord> records;

  void write_csv(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("TrainReport: cannot open " + path);
    out << "step,dida_loss,contrastive_loss,mean_iou\n";
    out.precision(17);
    for (const auto& r : records)
      out << r.step << ',' << r.dida_loss << ',' << r.contrastive_loss << ','
          << r.mean_iou << '\n';
  }
};

// ---------------------------------------------------------------------------
// Optimizers (in-place on leaf parameter buffers)
// ---------------------------------------------------------------------------

class Optimizer {
 public:
  Optimizer(OptimizerTag tag, std::vector<Tensor> params, double lr)
      : tag_(tag), params_(std::move(params)), lr_(lr) {
    if (tag_ == OptimizerTag::kAdam) {
      for (const auto& p : params_) {
        m_.push_back(std::vector<double>(p.size(), 0.0));
        v_.push_back(std::vector<double>(p.size(), 0.0));
      }
    }
  }

  void step(const std::vector<Tensor>& grads) {
    if (grads.size() != params_.size())
      throw std::invalid_argument("Optimizer::step: gradient count mismatch");
    ++t_;
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i].mutable_data();
      const auto& g = grads[i];
      if (tag_ == OptimizerTag::kSgd) {
        for (int j = 0; j < grads[i].size(); ++j) p[j] -= lr_ * g[j];
      } else {
        // Adam, beta1=0.9, beta2=0.999, eps=1e-8, bias-corrected.
        double bc1 = 1.0 - std::pow(0.9, t_);
        double bc2 = 1.0 - std::pow(0.999, t_);
        for (int j = 0; j < grads[i].size(); ++j) {
          m_[i][j] = 0.9 * m_[i][j] + 0.1 * g[j];
          v_[i][j] = 0.999 * v_[i][j] + 0.001 * g[j] * g[j];
          p[j] -= lr_ * (m_[i][j] / bc1) /
                  (std::sqrt(v_[i][j] / bc2) + 1e-8);
        }
      }
    }
  }

 private:
  OptimizerTag tag_;
  std::vector<Tensor> params_;
  double lr_;
  int t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// ---------------------------------------------------------------------------
// Grounding evaluation
// ---------------------------------------------------------------------------

/// Strictly-greater thresholding.
inline Tensor binarize(const Tensor& map, double threshold = 0.5) {
  std::vector<double> out(map.size());
  for (int i = 0; i < map.size(); ++i) out[i] = map[i] > threshold ? 1.0 : 0.0;
  return Tensor(map.shape(), std::move(out));
}

/// Intersection over union of binary masks; both-empty is defined as 1.
inline double iou(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "iou");
  int inter = 0, uni = 0;
  for (int i = 0; i < a.size(); ++i) {
    bool ai = a[i] != 0.0, bi = b[i] != 0.0;
    inter += ai && bi;
    uni += ai || bi;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / uni;
}

/// Inference-only VDA with the Threshold-mode diagnostic signal.
inline AttentionMap vda_diagnostic(const Encoder& encoder, const Scene& scene,
                                   SignalMode mode = SignalMode::kThreshold) {
  auto [masked, spec] = mask_salient_region(scene.image, scene.saliency);
  (void)spec;
  EncoderOutput out = encoder.forward(scene.image);
  EncoderOutput out_m = encoder.forward(masked);
  Tensor s = vda_signal(out.features, out_m.features, mode);
  AttentionMap map = attention_map(s, out.activations, /*retain_graph=*/false);
  {
    GradMode off(false);
    map.softened = soften(map.raw);
  }
  return map;
}

/// Softened map upsampled to image resolution, binarized at 0.5, scored
/// against the full-resolution mask.
inline double scene_iou(const Encoder& encoder, const Scene& scene,
                        SignalMode mode = SignalMode::kDot) {
  AttentionMap map = vda_diagnostic(encoder, scene, mode);
  int h = scene.saliency.shape()[0], w = scene.saliency.shape()[1];
  Tensor up = bilinear_upsample(map.softened, h, w);
  return iou(binarize(up), binarize(scene.saliency));
}

inline double mean_iou(const Encoder& encoder, const std::vector<Scene>& scenes,
                       SignalMode mode = SignalMode::kDot) {
  if (scenes.empty()) throw std::invalid_argument("mean_iou: no scenes");
  double acc = 0.0;
  for (const auto& s : scenes) acc += scene_iou(encoder, s, mode);
  return acc / scenes.size();
}

// ---------------------------------------------------------------------------
// GrabCut seeding
// ---------------------------------------------------------------------------

enum class TrimapLabel : int { kBackground = 0, kUnknown = 1, kForeground = 2 };

/// Trimap from an attention map: FG above `hi`, BG below `lo`, unknown in
/// between (strict comparisons on both sides).
inline Tensor grabcut_seeds(const Tensor& map, double hi = 0.7,
                            double lo = 0.1) {
  std::vector<double> out(map.size());
  for (int i = 0; i < map.size(); ++i) {
    if (map[i] > hi)
      out[i] = static_cast<double>(TrimapLabel::kForeground);
    else if (map[i] < lo)
      out[i] = static_cast<double>(TrimapLabel::kBackground);
    else
      out[i] = static_cast<double>(TrimapLabel::kUnknown);
  }
  return Tensor(map.shape(), std::move(out));
}

/// PGM export codes: BG=0, unknown=128, FG=255.
inline Tensor trimap_to_pgm_values(const Tensor& trimap) {
  std::vector<double> out(trimap.size());
  for (int i = 0; i < trimap.size(); ++i) {
    int label = static_cast<int>(trimap[i]);
    out[i] = label == 2 ? 1.0 : (label == 1 ? 128.0 / 255.0 : 0.0);
  }
  return Tensor(trimap.shape(), std::move(out));
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

/// Raised when the combined loss goes non-finite; carries a short state
/// dump for diagnosis.
struct DivergenceError : std::runtime_error {
  explicit DivergenceError(const std::string& what) : std::runtime_error(what) {}
};

/// Optimizes lambda_d * L_DiDA + lambda_c * L_contrastive over minibatches
/// drawn deterministically from (config.seed, step). `heldout` drives the
/// periodic mean-IoU records; checkpoints are written at eval intervals
/// when a path is configured.
inline TrainReport train(Encoder& encoder, const std::vector<Scene>& dataset,
                         const std::vector<Scene>& heldout,
                         const TrainConfig& config) {
  config.validate();
  if (dataset.empty()) throw std::invalid_argument("train: empty dataset");

  auto params = encoder.parameters();
  Optimizer opt(config.optimizer, params, config.learning_rate);
  TrainReport report;

  double dida_acc = 0.0, con_acc = 0.0;
  int acc_count = 0;

  for (int step = 1; step <= config.steps; ++step) {
    Rng rng = substream(config.seed, 0xC0FFEEULL + step);
    std::vector<int> batch(config.batch_size);
    for (auto& b : batch)
      b = rng.uniform_int(0, static_cast<int>(dataset.size()) - 1);

    Tensor total = Tensor::scalar(0.0);
    double dida_val = 0.0, con_val = 0.0;

    if (config.lambda_dida != 0.0) {
      Tensor acc = Tensor::scalar(0.0);
      for (int b : batch) {
        auto [loss, map] = dida_forward(encoder, dataset[b]);
        acc = add(acc, loss);
      }
      Tensor mean_loss = scale(acc, 1.0 / batch.size());
      dida_val = mean_loss.value();
      total = add(total, scale(mean_loss, config.lambda_dida));
    }
    if (config.lambda_contrastive != 0.0 && dataset.size() >= 2) {
      // Two augmented views per scene; distinct scenes in the batch so the
      // in-batch negatives are meaningful.
      std::vector<int> uniq(batch.begin(), batch.end());
      std::sort(uniq.begin(), uniq.end());
      uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
      while (uniq.size() < 2)
        uniq.push_back(rng.uniform_int(0, static_cast<int>(dataset.size()) - 1));
      std::vector<Tensor> feats;
      for (int b : uniq) {
        Scene v1 = augment(dataset[b], rng.next_u64());
        Scene v2 = augment(dataset[b], rng.next_u64());
        feats.push_back(encoder.forward(v1.image).features);
        feats.push_back(encoder.forward(v2.image).features);
      }
      Tensor con = contrastive_loss(feats, config.temperature);
      con_val = con.value();
      total = add(total, scale(con, config.lambda_contrastive));
    }

    if (!std::isfinite(total.value())) {
      std::ostringstream os;
      os << "train: non-finite loss at step " << step
         << " (dida=" << dida_val << ", contrastive=" << con_val << ")";
      throw DivergenceError(os.str());
    }

    auto grads = backward(total, params);
    opt.step(grads);

    dida_acc += dida_val;
    con_acc += con_val;
    ++acc_count;

    if (step % config.eval_interval == 0 || step == config.steps) {
      TrainRecord rec;
      rec.step = step;
      rec.dida_loss = dida_acc / acc_count;
      rec.contrastive_loss = con_acc / acc_count;
      rec.mean_iou = heldout.empty() ? 0.0 : mean_iou(encoder, heldout);
      report.records.push_back(rec);
      dida_acc = con_acc = 0.0;
      acc_count = 0;
      if (!config.checkpoint_path.empty()) encoder.save(config.checkpoint_path);
      if (step == config.steps) break;  // avoid a duplicate final record
    }
  }
  return report;
}

}  // namespace dida

#endif  // DIDA_TRAIN_HPP_
