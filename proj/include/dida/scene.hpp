#ifndef DIDA_SCENE_HPP_
#define DIDA_SCENE_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dida/image_io.hpp"
#include "dida/rng.hpp"
#include "dida/tensor.hpp"

namespace dida {

enum class ShapeTag { kDisk, kSquare, kTriangle };
enum class Background { kUniformNoise, kSmoothGradient };

struct ObjectSpec {
  ShapeTag shape;
  double color[3];
  int row, col;  // center
  int size;      // radius / half extent
};

/// One synthetic training unit: image, exact binary saliency mask, and the
/// object layout that produced them.
struct Scene {
  Tensor image;     // {3,H,W} in [0,1]
  Tensor saliency;  // {H,W} in {0,1}
  std::vector<ObjectSpec> objects;
};

struct DataConfig {
  int size = 32;          // H = W
  int min_objects = 1;
  int max_objects = 3;
  int min_obj_size = 6;
  int max_obj_size = 9;
  Background background = Background::kUniformNoise;
  std::uint64_t seed = 1;

  void validate() const {
    if (size < 8) throw std::invalid_argument("DataConfig: size too small");
    if (min_objects < 1 || max_objects > 3 || min_objects > max_objects)
      throw std::invalid_argument("DataConfig: object count range must be within [1,3]");
    if (min_obj_size < 2 || min_obj_size > max_obj_size)
      throw std::invalid_argument("DataConfig: bad object size range");
    if (2 * max_obj_size + 4 > size)
      throw std::invalid_argument("DataConfig: objects cannot fit inside frame");
  }
};

namespace detail {

inline bool inside_shape(ShapeTag shape, int dy, int dx, int s) {
  switch (shape) {
    case ShapeTag::kDisk:
      return dy * dy + dx * dx <= s * s;
    case ShapeTag::kSquare:
      return std::abs(dy) <= s && std::abs(dx) <= s;
    case ShapeTag::kTriangle:
      // Apex up: vertices (0,-s), (-s,+s), (+s,+s) in (dx,dy).
      return dy >= -s && dy <= s && 2 * std::abs(dx) <= dy + s;
  }
  return false;
}

/// Continuous-region area of a shape footprint; the rasterized pixel count
/// tracks this within a boundary-row tolerance.
inline double analytic_area(ShapeTag shape, int s) {
  switch (shape) {
    case ShapeTag::kDisk:
      return 3.14159265358979323846 * s * s;
    case ShapeTag::kSquare:
      return static_cast<double>(2 * s + 1) * (2 * s + 1);  // lattice-exact
    case ShapeTag::kTriangle:
      return 2.0 * s * s;
  }
  return 0.0;
}

}  // namespace detail

/// Deterministic in (config.seed, index). Object colors keep at least 0.3
/// per-channel contrast against every background pixel by construction.
inline Scene generate_scene(const DataConfig& config, int index) {
  config.validate();
  Rng rng = substream(config.seed, static_cast<std::uint64_t>(index));
  int n = config.size;

  // Background: values stay below base+amp per channel.
  double amp = config.background == Background::kUniformNoise ? 0.1 : 0.2;
  double base[3];
  for (double& b : base) b = rng.uniform(0.1, 0.35);

  std::vector<double> image(static_cast<std::size_t>(3) * n * n);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x) {
        double v;
        if (config.background == Background::kUniformNoise)
          v = base[c] + rng.uniform(0.0, amp);
        else
          v = base[c] + amp * 0.5 * (static_cast<double>(x) / (n - 1) +
                                     static_cast<double>(y) / (n - 1));
        image[(c * n + y) * n + x] = v;
      }

  int count = rng.uniform_int(config.min_objects, config.max_objects);
  std::vector<ObjectSpec> objects;
  for (int k = 0; k < count; ++k) {
    for (int attempt = 0; attempt < 100; ++attempt) {
      ObjectSpec o;
      o.shape = static_cast<ShapeTag>(rng.uniform_int(0, 2));
      o.size = rng.uniform_int(config.min_obj_size, config.max_obj_size);
      o.row = rng.uniform_int(o.size + 1, n - o.size - 2);
      o.col = rng.uniform_int(o.size + 1, n - o.size - 2);
      for (int c = 0; c < 3; ++c)
        o.color[c] = rng.uniform(std::min(base[c] + amp + 0.3, 0.95), 1.0);
      bool clear = true;
      for (const auto& p : objects)
        if (std::abs(p.row - o.row) <= p.size + o.size + 1 &&
            std::abs(p.col - o.col) <= p.size + o.size + 1)
          clear = false;
      if (clear) {
        objects.push_back(o);
        break;
      }
    }
  }
  if (objects.empty())
    throw std::logic_error("generate_scene: failed to place any object");

  std::vector<double> saliency(static_cast<std::size_t>(n) * n, 0.0);
  for (const auto& o : objects)
    for (int y = o.row - o.size; y <= o.row + o.size; ++y)
      for (int x = o.col - o.size; x <= o.col + o.size; ++x)
        if (detail::inside_shape(o.shape, y - o.row, x - o.col, o.size)) {
          saliency[y * n + x] = 1.0;
          for (int c = 0; c < 3; ++c) image[(c * n + y) * n + x] = o.color[c];
        }

  Scene s;
  s.image = Tensor({3, n, n}, std::move(image));
  s.saliency = Tensor({n, n}, std::move(saliency));
  s.objects = std::move(objects);
  return s;
}

inline Scene flip_horizontal(const Scene& scene) {
  int h = scene.saliency.shape()[0], w = scene.saliency.shape()[1];
  std::vector<double> img(scene.image.size()), sal(scene.saliency.size());
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        img[(c * h + y) * w + x] = scene.image[(c * h + y) * w + (w - 1 - x)];
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      sal[y * w + x] = scene.saliency[y * w + (w - 1 - x)];
  Scene out;
  out.image = Tensor({3, h, w}, std::move(img));
  out.saliency = Tensor({h, w}, std::move(sal));
  out.objects = scene.objects;
  for (auto& o : out.objects) o.col = w - 1 - o.col;
  return out;
}

/// Adds `delta` to every image value, clamped to [0,1]; mask untouched.
inline Scene brightness(const Scene& scene, double delta) {
  std::vector<double> img(scene.image.size());
  for (int i = 0; i < scene.image.size(); ++i)
    img[i] = std::clamp(scene.image[i] + delta, 0.0, 1.0);
  Scene out;
  out.image = Tensor(scene.image.shape(), std::move(img));
  out.saliency = scene.saliency;
  out.objects = scene.objects;
  return out;
}

/// Random view: coin-flip horizontal mirror plus brightness jitter in
/// [-0.1, +0.1], both derived from `seed`.
inline Scene augment(const Scene& scene, std::uint64_t seed) {
  Rng rng(seed);
  bool flip = rng.coin();
  double jitter = rng.uniform(-0.1, 0.1);
  Scene out = flip ? flip_horizontal(scene) : scene;
  return brightness(out, jitter);
}

/// Area-average pooling of an {H,W} map onto a {p,q} grid of rectangular
/// cells; handles non-dividing sizes by fractional pixel overlap.
inline Tensor downsample_mask(const Tensor& mask, int p, int q) {
  if (mask.shape().size() != 2)
    throw std::invalid_argument("downsample_mask: rank-2 input required");
  int h = mask.shape()[0], w = mask.shape()[1];
  if (p > h || q > w || p < 1 || q < 1)
    throw std::invalid_argument("downsample_mask: output larger than input");
  std::vector<double> out(static_cast<std::size_t>(p) * q, 0.0);
  double ch = static_cast<double>(h) / p, cw = static_cast<double>(w) / q;
  for (int i = 0; i < p; ++i)
    for (int j = 0; j < q; ++j) {
      double y0 = i * ch, y1 = (i + 1) * ch;
      double x0 = j * cw, x1 = (j + 1) * cw;
      double acc = 0.0;
      for (int y = static_cast<int>(y0); y < h && y < y1; ++y) {
        double fy = std::min<double>(y + 1, y1) - std::max<double>(y, y0);
        if (fy <= 0) continue;
        for (int x = static_cast<int>(x0); x < w && x < x1; ++x) {
          double fx = std::min<double>(x + 1, x1) - std::max<double>(x, x0);
          if (fx <= 0) continue;
          acc += fy * fx * mask[y * w + x];
        }
      }
      out[i * q + j] = acc / (ch * cw);
    }
  return Tensor({p, q}, std::move(out));
}

/// Bilinear upsampling with pixel-center alignment. Visualization and
/// evaluation only; not differentiable (returns a constant tensor).
inline Tensor bilinear_upsample(const Tensor& map, int h, int w) {
  if (map.shape().size() != 2)
    throw std::invalid_argument("bilinear_upsample: rank-2 input required");
  int p = map.shape()[0], q = map.shape()[1];
  std::vector<double> out(static_cast<std::size_t>(h) * w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double sy = (y + 0.5) * p / h - 0.5;
      double sx = (x + 0.5) * q / w - 0.5;
      int y0 = static_cast<int>(std::floor(sy));
      int x0 = static_cast<int>(std::floor(sx));
      double fy = sy - y0, fx = sx - x0;
      auto at = [&](int yy, int xx) {
        yy = std::clamp(yy, 0, p - 1);
        xx = std::clamp(xx, 0, q - 1);
        return map[yy * q + xx];
      };
      out[y * w + x] = (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x0 + 1)) +
                       fy * ((1 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1));
    }
  return Tensor({h, w}, std::move(out));
}

// ---------------------------------------------------------------------------
// Dataset on disk: PPM/PGM pairs plus a manifest
// ---------------------------------------------------------------------------

struct ManifestEntry {
  int index;
  std::string image_path;
  std::string mask_path;
};

inline void write_manifest(const std::string& path,
                           const std::vector<ManifestEntry>& entries) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_manifest: cannot open " + path);
  for (const auto& e : entries)
    out << e.index << '\t' << e.image_path << '\t' << e.mask_path << '\n';
}

inline std::vector<ManifestEntry> read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("read_manifest: cannot open " + path);
  std::vector<ManifestEntry> entries;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    ManifestEntry e;
    if (!(ls >> e.index >> e.image_path >> e.mask_path))
      throw std::runtime_error("read_manifest: malformed line: " + line);
    entries.push_back(std::move(e));
  }
  return entries;
}

/// Loads scenes from a manifest; masks are re-binarized at 0.5 to undo the
/// 8-bit quantization.
inline std::vector<Scene> load_dataset(const std::string& manifest_path) {
  auto entries = read_manifest(manifest_path);
  std::vector<Scene> scenes;
  scenes.reserve(entries.size());
  for (const auto& e : entries) {
    Scene s;
    s.image = read_image(e.image_path);
    Tensor m = read_image(e.mask_path);
    std::vector<double> bin(m.size());
    for (int i = 0; i < m.size(); ++i) bin[i] = m[i] > 0.5 ? 1.0 : 0.0;
    s.saliency = Tensor(m.shape(), std::move(bin));
    scenes.push_back(std::move(s));
  }
  return scenes;
}

}  // namespace dida

#endif  // DIDA_SCENE_HPP_
