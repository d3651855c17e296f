#pragma once

// Training-time photometric and geometric augmentation. Stages run in the
// configured order; satellite imagery additionally gets a quarter-turn plus a
// small rotation jitter. The result is normalized with the backbone's
// statistics.

#include "skylink/data_model.hpp"
#include "skylink/image.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace skylink {

enum class AugmentKind { jpeg, color_jitter, blur_sharpen, dropout };

inline AugmentKind parse_augment_kind(const std::string& s) {
  if (s == "jpeg") return AugmentKind::jpeg;
  if (s == "color_jitter") return AugmentKind::color_jitter;
  if (s == "blur_sharpen") return AugmentKind::blur_sharpen;
  if (s == "dropout") return AugmentKind::dropout;
  throw std::invalid_argument("unknown augmentation: " + s);
}

inline std::string to_string(AugmentKind k) {
  switch (k) {
    case AugmentKind::jpeg: return "jpeg";
    case AugmentKind::color_jitter: return "color_jitter";
    case AugmentKind::blur_sharpen: return "blur_sharpen";
    case AugmentKind::dropout: return "dropout";
  }
  return "?";
}

struct AugmentationSpec {
  AugmentKind kind = AugmentKind::jpeg;
  double probability = 0.5;
};

struct AugmentConfig {
  std::vector<AugmentationSpec> stages{{AugmentKind::jpeg, 0.5},
                                       {AugmentKind::color_jitter, 0.8},
                                       {AugmentKind::blur_sharpen, 0.3},
                                       {AugmentKind::dropout, 0.3}};
  double satellite_rotation_probability = 1.0;
  double rotation_jitter_degrees = 10.0;
  int jpeg_quality_min = 30;
  int jpeg_quality_max = 95;
  double jitter_strength = 0.2;
  double norm_mean = 0.5;
  double norm_std = 0.5;

  static AugmentConfig identity() {
    AugmentConfig c;
    for (auto& s : c.stages) s.probability = 0.0;
    c.satellite_rotation_probability = 0.0;
    return c;
  }
};

// "jpeg:0.5,color_jitter:0.8" -> ordered stage list.
inline std::vector<AugmentationSpec> parse_augmentations(const std::string& text) {
  std::vector<AugmentationSpec> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    const auto colon = item.find(':');
    AugmentationSpec spec;
    spec.kind = parse_augment_kind(item.substr(0, colon));
    if (colon != std::string::npos) spec.probability = std::stod(item.substr(colon + 1));
    if (spec.probability < 0 || spec.probability > 1) throw std::invalid_argument("augmentation probability outside [0,1]");
    out.push_back(spec);
  }
  return out;
}

namespace aug {

inline double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

// Standard JPEG luminance / chrominance quantization tables.
inline constexpr std::array<int, 64> kLumaQ{16, 11, 10, 16, 24,  40,  51,  61,  12, 12, 14, 19, 26,  58,  60,  55,
                                            14, 13, 16, 24, 40,  57,  69,  56,  14, 17, 22, 29, 51,  87,  80,  62,
                                            18, 22, 37, 56, 68,  109, 103, 77,  24, 35, 55, 64, 81,  104, 113, 92,
                                            49, 64, 78, 87, 103, 121, 120, 101, 72, 92, 95, 98, 112, 100, 103, 99};
inline constexpr std::array<int, 64> kChromaQ{17, 18, 24, 47, 99, 99, 99, 99, 18, 21, 26, 66, 99, 99, 99, 99,
                                              24, 26, 56, 99, 99, 99, 99, 99, 47, 66, 99, 99, 99, 99, 99, 99,
                                              99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99,
                                              99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99};

// Lossy round trip through YCbCr 8x8 DCT quantization at the given quality.
inline Image jpeg_roundtrip(const Image& img, int quality) {
  quality = std::clamp(quality, 1, 100);
  const double scale = quality < 50 ? 5000.0 / quality : 200.0 - 2.0 * quality;
  auto qtable = [scale](const std::array<int, 64>& base) {
    std::array<double, 64> q{};
    for (int i = 0; i < 64; ++i) q[i] = std::clamp(std::floor((base[i] * scale + 50.0) / 100.0), 1.0, 255.0);
    return q;
  };
  const auto ql = qtable(kLumaQ);
  const auto qc = qtable(kChromaQ);
  const double pi = std::acos(-1.0);
  std::array<double, 64> basis{};
  for (int u = 0; u < 8; ++u)
    for (int x = 0; x < 8; ++x)
      basis[u * 8 + x] = (u == 0 ? std::sqrt(0.125) : 0.5) * std::cos((2 * x + 1) * u * pi / 16.0);

  const int h = img.height;
  const int w = img.width;
  std::array<std::vector<double>, 3> planes;
  for (auto& p : planes) p.assign(static_cast<std::size_t>(h) * w, 0.0);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double r = img.at(y, x, 0) * 255.0;
      const double g = img.at(y, x, 1) * 255.0;
      const double b = img.at(y, x, 2) * 255.0;
      const std::size_t i = static_cast<std::size_t>(y) * w + x;
      planes[0][i] = 0.299 * r + 0.587 * g + 0.114 * b - 128.0;
      planes[1][i] = -0.168736 * r - 0.331264 * g + 0.5 * b;
      planes[2][i] = 0.5 * r - 0.418688 * g - 0.081312 * b;
    }
  }
  for (int c = 0; c < 3; ++c) {
    const auto& q = c == 0 ? ql : qc;
    auto& plane = planes[static_cast<std::size_t>(c)];
    for (int by = 0; by < h; by += 8) {
      for (int bx = 0; bx < w; bx += 8) {
        std::array<double, 64> block{};
        for (int y = 0; y < 8; ++y)
          for (int x = 0; x < 8; ++x)
            block[y * 8 + x] = plane[static_cast<std::size_t>(std::min(by + y, h - 1)) * w + std::min(bx + x, w - 1)];
        std::array<double, 64> coef{};
        for (int u = 0; u < 8; ++u)
          for (int v = 0; v < 8; ++v) {
            double s = 0;
            for (int y = 0; y < 8; ++y)
              for (int x = 0; x < 8; ++x) s += basis[u * 8 + y] * basis[v * 8 + x] * block[y * 8 + x];
            coef[u * 8 + v] = std::round(s / q[u * 8 + v]) * q[u * 8 + v];
          }
        for (int y = 0; y < 8 && by + y < h; ++y)
          for (int x = 0; x < 8 && bx + x < w; ++x) {
            double s = 0;
            for (int u = 0; u < 8; ++u)
              for (int v = 0; v < 8; ++v) s += basis[u * 8 + y] * basis[v * 8 + x] * coef[u * 8 + v];
            plane[static_cast<std::size_t>(by + y) * w + bx + x] = s;
          }
      }
    }
  }
  Image out(h, w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * w + x;
      const double luma = planes[0][i] + 128.0;
      const double cb = planes[1][i];
      const double cr = planes[2][i];
      out.at(y, x, 0) = clamp01((luma + 1.402 * cr) / 255.0);
      out.at(y, x, 1) = clamp01((luma - 0.344136 * cb - 0.714136 * cr) / 255.0);
      out.at(y, x, 2) = clamp01((luma + 1.772 * cb) / 255.0);
    }
  }
  return out;
}

inline Image color_jitter(const Image& img, double brightness, double contrast, double saturation) {
  Image out = img;
  double mean = 0;
  for (double v : img.data) mean += v;
  mean /= static_cast<double>(img.data.size());
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      std::array<double, 3> px{};
      for (int c = 0; c < 3; ++c) px[c] = ((img.at(y, x, c) * brightness) - mean) * contrast + mean;
      const double gray = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = clamp01(gray + (px[c] - gray) * saturation);
    }
  }
  return out;
}

inline Image box_blur(const Image& img) {
  Image out(img.height, img.width);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      for (int c = 0; c < 3; ++c) {
        double s = 0;
        int n = 0;
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const int yy = y + dy;
            const int xx = x + dx;
            if (yy < 0 || xx < 0 || yy >= img.height || xx >= img.width) continue;
            s += img.at(yy, xx, c);
            ++n;
          }
        out.at(y, x, c) = s / n;
      }
    }
  }
  return out;
}

inline Image sharpen(const Image& img, double amount) {
  const Image blurred = box_blur(img);
  Image out = img;
  for (std::size_t i = 0; i < out.data.size(); ++i) {
    out.data[i] = clamp01(img.data[i] + amount * (img.data[i] - blurred.data[i]));
  }
  return out;
}

inline void fill_rect(Image& img, int y0, int x0, int h, int w, double value) {
  for (int y = std::max(0, y0); y < std::min(img.height, y0 + h); ++y)
    for (int x = std::max(0, x0); x < std::min(img.width, x0 + w); ++x)
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = value;
}

}  // namespace aug

// `image` must already be at the backbone input size. The draw fully
// determines the output.
inline Image augment(const Image& image, View view, std::mt19937_64& draw, const AugmentConfig& config) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Image img = image;
  for (const auto& stage : config.stages) {
    if (unit(draw) >= stage.probability) continue;
    switch (stage.kind) {
      case AugmentKind::jpeg: {
        std::uniform_int_distribution<int> q(config.jpeg_quality_min, config.jpeg_quality_max);
        img = aug::jpeg_roundtrip(img, q(draw));
        break;
      }
      case AugmentKind::color_jitter: {
        const double s = config.jitter_strength;
        std::uniform_real_distribution<double> f(1.0 - s, 1.0 + s);
        const double b = f(draw);
        const double c = f(draw);
        const double sat = f(draw);
        img = aug::color_jitter(img, b, c, sat);
        break;
      }
      case AugmentKind::blur_sharpen:
        if (unit(draw) < 0.5) {
          img = aug::box_blur(img);
        } else {
          img = aug::sharpen(img, 0.5 + unit(draw));
        }
        break;
      case AugmentKind::dropout: {
        if (unit(draw) < 0.5) {
          // grid dropout: knock out alternating cells of a random-size grid
          const int cell = std::max(2, img.height / (4 + static_cast<int>(unit(draw) * 4)));
          const int oy = static_cast<int>(unit(draw) * cell);
          const int ox = static_cast<int>(unit(draw) * cell);
          for (int gy = -1; gy * cell < img.height; ++gy)
            for (int gx = -1; gx * cell < img.width; ++gx)
              if (((gy + gx) & 1) == 0) aug::fill_rect(img, gy * cell + oy, gx * cell + ox, cell / 2, cell / 2, 0.0);
        } else {
          // coarse dropout: a few random holes up to 1/8 of each side
          const int holes = 1 + static_cast<int>(unit(draw) * 4);
          for (int k = 0; k < holes; ++k) {
            const int hh = 1 + static_cast<int>(unit(draw) * img.height / 8);
            const int ww = 1 + static_cast<int>(unit(draw) * img.width / 8);
            const int y0 = static_cast<int>(unit(draw) * (img.height - hh + 1));
            const int x0 = static_cast<int>(unit(draw) * (img.width - ww + 1));
            aug::fill_rect(img, y0, x0, hh, ww, 0.0);
          }
        }
        break;
      }
    }
  }
  if (view == View::satellite && unit(draw) < config.satellite_rotation_probability) {
    std::uniform_int_distribution<int> quarter(0, 3);
    img = rot90(img, quarter(draw));
    const double jitter = (2.0 * unit(draw) - 1.0) * config.rotation_jitter_degrees;
    img = rotate(img, jitter, 0.0);
  }
  return normalize(img, config.norm_mean, config.norm_std);
}

}  // namespace skylink
