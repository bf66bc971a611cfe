#ifndef DIDA_IMAGE_IO_HPP_
#define DIDA_IMAGE_IO_HPP_

#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>

#include "dida/tensor.hpp"

// Plain-text PPM (P3) / PGM (P2) with 8-bit depth. Values in [0,1] are
// quantized as round(v*255); reading maps back to v/255, so a write/read
// round trip is exact on already-quantized data.

namespace dida {

namespace detail {

inline int next_pnm_token(std::istream& in) {
  // Skips whitespace and '#' comments, then parses one integer.
  char c;
  while (in.get(c)) {
    if (c == '#') {
      std::string line;
      std::getline(in, line);
    } else if (!std::isspace(static_cast<unsigned char>(c))) {
      in.unget();
      int v;
      if (!(in >> v)) break;
      return v;
    }
  }
  throw std::runtime_error("PNM: truncated or malformed file");
}

inline int quantize(double v) {
  int q = static_cast<int>(std::lround(v * 255.0));
  return q < 0 ? 0 : (q > 255 ? 255 : q);
}

}  // namespace detail

/// Writes a {3,H,W} tensor as PPM or a {H,W} tensor as PGM, picked by shape.
inline void write_image(const std::string& path, const Tensor& t) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_image: cannot open " + path);
  const auto& s = t.shape();
  if (s.size() == 3 && s[0] == 3) {
    int h = s[1], w = s[2];
    out << "P3\n" << w << " " << h << "\n255\n";
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        for (int c = 0; c < 3; ++c)
          out << detail::quantize(t[(c * h + y) * w + x])
              << (c < 2 ? ' ' : (x < w - 1 ? ' ' : '\n'));
      }
    }
  } else if (s.size() == 2) {
    int h = s[0], w = s[1];
    out << "P2\n" << w << " " << h << "\n255\n";
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        out << detail::quantize(t[y * w + x]) << (x < w - 1 ? ' ' : '\n');
  } else {
    throw std::invalid_argument("write_image: expected {3,H,W} or {H,W}");
  }
  if (!out) throw std::runtime_error("write_image: write failed for " + path);
}

/// Reads a P3 file into {3,H,W} or a P2 file into {H,W}, values in [0,1].
inline Tensor read_image(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("read_image: cannot open " + path);
  std::string magic;
  in >> magic;
  if (magic != "P3" && magic != "P2")
    throw std::runtime_error("read_image: unsupported magic '" + magic +
                             "' in " + path);
  int w = detail::next_pnm_token(in);
  int h = detail::next_pnm_token(in);
  int maxval = detail::next_pnm_token(in);
  if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 255)
    throw std::runtime_error("read_image: bad header in " + path);
  int channels = magic == "P3" ? 3 : 1;
  std::vector<double> data(static_cast<std::size_t>(channels) * h * w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < channels; ++c) {
        int v = detail::next_pnm_token(in);
        if (v < 0 || v > maxval)
          throw std::runtime_error("read_image: sample out of range in " +
                                   path);
        data[(c * h + y) * w + x] = static_cast<double>(v) / maxval;
      }
  if (channels == 3) return Tensor({3, h, w}, std::move(data));
  return Tensor({h, w}, std::move(data));
}

}  // namespace dida

#endif  // DIDA_IMAGE_IO_HPP_
