#ifndef DIDA_ENCODER_HPP_
#define DIDA_ENCODER_HPP_

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dida/rng.hpp"
#include "dida/tensor.hpp"

namespace dida {

struct EncoderConfig {
  int input_channels = 3;
  int input_size = 32;                     // H = W
  std::vector<int> channels = {8, 16, 32, 32};  // stride-2 3x3 convs
  int feature_dim = 32;
  std::uint64_t seed = 0;

  /// Spatial size after the stride-2 stack.
  int activation_size() const {
    int s = input_size;
    for (std::size_t i = 0; i < channels.size(); ++i) s = (s + 1) / 2;
    return s;
  }

  void validate() const {
    if (input_channels < 1 || input_size < 2 || channels.empty())
      throw std::invalid_argument("EncoderConfig: bad structure");
    if (feature_dim < 8)
      throw std::invalid_argument(
          "EncoderConfig: feature_dim must be >= 8 so dominant-dimension "
          "selection can pick a strict subset");
    if (activation_size() < 2)
      throw std::invalid_argument(
          "EncoderConfig: activation grid collapses below 2x2");
  }
};

struct EncoderOutput {
  Tensor features;     // f, length k, entries strictly in (0,1)
  Tensor activations;  // A, {n,p,q}, post-ReLU, graph-linked when recording
};

/// Convolutional stack (3x3, stride 2, ReLU) + per-channel GAP + linear
/// head squashed by a sigmoid so features live in (0,1).
class Encoder {
 public:
  Encoder() = default;

  explicit Encoder(const EncoderConfig& config) : cfg_(config) {
    cfg_.validate();
    Rng rng(cfg_.seed);
    int cin = cfg_.input_channels;
    for (int cout : cfg_.channels) {
      conv_w_.push_back(kaiming_uniform(rng, {cout, cin, 3, 3}, cin * 9));
      conv_b_.push_back(Tensor::zeros({cout}).set_leaf());
      cin = cout;
    }
    int n = cfg_.channels.back();
    fc_w_ = kaiming_uniform(rng, {cfg_.feature_dim, n}, n);
    fc_b_ = Tensor::zeros({cfg_.feature_dim}).set_leaf();
  }

  const EncoderConfig& config() const { return cfg_; }

  EncoderOutput forward(const Tensor& image) const {
    if (image.shape() !=
        std::vector<int>{cfg_.input_channels, cfg_.input_size, cfg_.input_size})
      throw std::invalid_argument("Encoder::forward: image shape mismatch");
    Tensor x = image;
    for (std::size_t i = 0; i < conv_w_.size(); ++i)
      x = relu(conv2d(x, conv_w_[i], conv_b_[i], /*stride=*/2, /*padding=*/1));
    Tensor pooled = channel_mean(x);
    Tensor f = sigmoid(add(matvec(fc_w_, pooled), fc_b_));
    return {f, x};
  }

  std::vector<Tensor> parameters() {
    std::vector<Tensor> out;
    for (std::size_t i = 0; i < conv_w_.size(); ++i) {
      out.push_back(conv_w_[i]);
      out.push_back(conv_b_[i]);
    }
    out.push_back(fc_w_);
    out.push_back(fc_b_);
    return out;
  }
  std::vector<Tensor> parameters() const {
    return const_cast<Encoder*>(this)->parameters();
  }

  // Checkpoint format (little-endian):
  //   magic "DIDA1"
  //   int32: input_channels, input_size, num_layers, channels...,
  //          feature_dim, seed_lo32
  //   float64: parameters in declaration order
  //          (conv_w[0], conv_b[0], ..., fc_w, fc_b)
  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("Encoder::save: cannot open " + path);
    out.write("DIDA1", 5);
    auto put_i32 = [&](std::int32_t v) {
      out.write(reinterpret_cast<const char*>(&v), 4);
    };
    put_i32(cfg_.input_channels);
    put_i32(cfg_.input_size);
    put_i32(static_cast<std::int32_t>(cfg_.channels.size()));
    for (int c : cfg_.channels) put_i32(c);
    put_i32(cfg_.feature_dim);
    put_i32(static_cast<std::int32_t>(cfg_.seed & 0xFFFFFFFFu));
    for (const auto& p : parameters())
      out.write(reinterpret_cast<const char*>(p.data().data()),
                static_cast<std::streamsize>(p.size() * sizeof(double)));
    if (!out) throw std::runtime_error("Encoder::save: write failed");
  }

  static Encoder load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("Encoder::load: cannot open " + path);
    char magic[5];
    in.read(magic, 5);
    if (!in || std::memcmp(magic, "DIDA1", 5) != 0)
      throw std::runtime_error("Encoder::load: bad magic in " + path);
    auto get_i32 = [&]() {
      std::int32_t v;
      in.read(reinterpret_cast<char*>(&v), 4);
      if (!in) throw std::runtime_error("Encoder::load: truncated header");
      return v;
    };
    EncoderConfig cfg;
    cfg.input_channels = get_i32();
    cfg.input_size = get_i32();
    int layers = get_i32();
    if (layers < 1 || layers > 64)
      throw std::runtime_error("Encoder::load: implausible layer count");
    cfg.channels.clear();
    for (int i = 0; i < layers; ++i) cfg.channels.push_back(get_i32());
    cfg.feature_dim = get_i32();
    cfg.seed = static_cast<std::uint32_t>(get_i32());
    Encoder enc(cfg);
    for (auto& p : enc.parameters()) {
      in.read(reinterpret_cast<char*>(p.mutable_data().data()),
              static_cast<std::streamsize>(p.size() * sizeof(double)));
      if (!in) throw std::runtime_error("Encoder::load: truncated parameters");
    }
    return enc;
  }

 private:
  static Tensor kaiming_uniform(Rng& rng, std::vector<int> shape, int fan_in) {
    double bound = std::sqrt(6.0 / fan_in);
    int n = Tensor::size_from(shape);
    std::vector<double> data(n);
    for (double& v : data) v = rng.uniform(-bound, bound);
    Tensor t(std::move(shape), std::move(data));
    t.set_leaf();
    return t;
  }

  EncoderConfig cfg_;
  std::vector<Tensor> conv_w_, conv_b_;
  Tensor fc_w_, fc_b_;
};

}  // namespace dida

#endif  // DIDA_ENCODER_HPP_
