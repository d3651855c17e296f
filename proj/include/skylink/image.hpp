#pragma once

// RGB image container and the geometric transforms shared by augmentation,
// test-time augmentation and the reconstruction stub.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace skylink {

// Row-major H x W x 3, channel-interleaved, values nominally in [0, 1].
struct Image {
  int height = 0;
  int width = 0;
  std::vector<double> data;

  Image() = default;
  Image(int h, int w, double fill = 0.0) : height(h), width(w), data(static_cast<std::size_t>(h) * w * 3, fill) {
    if (h <= 0 || w <= 0) throw std::invalid_argument("Image: dimensions must be positive");
  }

  double& at(int y, int x, int c) { return data[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  double at(int y, int x, int c) const { return data[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }

  bool operator==(const Image&) const = default;
};

class ImageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline Image hflip(const Image& img) {
  Image out(img.height, img.width);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = img.at(y, img.width - 1 - x, c);
  return out;
}

// Counter-clockwise rotation by quarter_turns * 90 degrees.
inline Image rot90(const Image& img, int quarter_turns) {
  const int k = ((quarter_turns % 4) + 4) % 4;
  if (k == 0) return img;
  const bool swap = (k % 2) == 1;
  Image out(swap ? img.width : img.height, swap ? img.height : img.width);
  for (int y = 0; y < out.height; ++y) {
    for (int x = 0; x < out.width; ++x) {
      int sy = 0;
      int sx = 0;
      switch (k) {
        case 1: sy = x; sx = img.width - 1 - y; break;
        case 2: sy = img.height - 1 - y; sx = img.width - 1 - x; break;
        default: sy = img.height - 1 - x; sx = y; break;
      }
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = img.at(sy, sx, c);
    }
  }
  return out;
}

inline double sample_bilinear(const Image& img, double y, double x, int c, double fill) {
  if (y < -0.5 || x < -0.5 || y > img.height - 0.5 || x > img.width - 0.5) return fill;
  const double yc = std::clamp(y, 0.0, static_cast<double>(img.height - 1));
  const double xc = std::clamp(x, 0.0, static_cast<double>(img.width - 1));
  const int y0 = static_cast<int>(std::floor(yc));
  const int x0 = static_cast<int>(std::floor(xc));
  const int y1 = std::min(y0 + 1, img.height - 1);
  const int x1 = std::min(x0 + 1, img.width - 1);
  const double fy = yc - y0;
  const double fx = xc - x0;
  return (1 - fy) * ((1 - fx) * img.at(y0, x0, c) + fx * img.at(y0, x1, c)) +
         fy * ((1 - fx) * img.at(y1, x0, c) + fx * img.at(y1, x1, c));
}

// Counter-clockwise rotation about the image center; uncovered pixels get fill.
inline Image rotate(const Image& img, double degrees, double fill = 0.0) {
  const double rad = degrees * std::acos(-1.0) / 180.0;
  const double cs = std::cos(rad);
  const double sn = std::sin(rad);
  const double cy = (img.height - 1) / 2.0;
  const double cx = (img.width - 1) / 2.0;
  Image out(img.height, img.width);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      const double dx = x - cx;
      const double dy = y - cy;
      // inverse map: rotate destination by -angle (image y axis points down)
      const double sx = cs * dx - sn * dy + cx;
      const double sy = sn * dx + cs * dy + cy;
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = sample_bilinear(img, sy, sx, c, fill);
    }
  }
  return out;
}

inline Image resize(const Image& img, int height, int width) {
  if (img.height == height && img.width == width) return img;
  Image out(height, width);
  const double sy = static_cast<double>(img.height) / height;
  const double sx = static_cast<double>(img.width) / width;
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const double src_y = (y + 0.5) * sy - 0.5;
      const double src_x = (x + 0.5) * sx - 0.5;
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = sample_bilinear(img, src_y, src_x, c, 0.0);
    }
  }
  return out;
}

// Per-pixel (v - mean) / std on every channel.
inline Image normalize(const Image& img, double mean, double stddev) {
  Image out = img;
  for (double& v : out.data) v = (v - mean) / stddev;
  return out;
}

// FNV-1a over the 8-bit quantized pixel values and the dimensions.
inline std::uint64_t content_hash(const Image& img) {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&h](std::uint64_t byte) {
    h ^= byte;
    h *= 1099511628211ull;
  };
  for (int shift = 0; shift < 32; shift += 8) mix((static_cast<std::uint32_t>(img.height) >> shift) & 0xFFu);
  for (int shift = 0; shift < 32; shift += 8) mix((static_cast<std::uint32_t>(img.width) >> shift) & 0xFFu);
  for (double v : img.data) mix(static_cast<std::uint64_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)));
  return h;
}

// True when every pixel has the same value on every channel.
inline bool is_blank(const Image& img) {
  if (img.data.empty()) return true;
  const double first = img.data.front();
  return std::all_of(img.data.begin(), img.data.end(), [first](double v) { return v == first; });
}

struct ImageSize {
  int height = 0;
  int width = 0;
};

namespace detail {

inline std::optional<ImageSize> ppm_header(std::istream& in, int* maxval = nullptr) {
  std::string magic;
  in >> magic;
  if (magic != "P6") return std::nullopt;
  auto next_int = [&in]() -> std::optional<int> {
    while (true) {
      in >> std::ws;
      if (in.peek() == '#') {
        std::string skip;
        std::getline(in, skip);
        continue;
      }
      int v = 0;
      if (!(in >> v)) return std::nullopt;
      return v;
    }
  };
  auto w = next_int();
  auto h = next_int();
  auto mv = next_int();
  if (!w || !h || !mv || *w <= 0 || *h <= 0 || *mv <= 0 || *mv > 255) return std::nullopt;
  in.get();  // single whitespace before the raster
  if (maxval) *maxval = *mv;
  return ImageSize{*h, *w};
}

inline std::optional<ImageSize> png_header(std::istream& in) {
  unsigned char buf[24];
  if (!in.read(reinterpret_cast<char*>(buf), 24)) return std::nullopt;
  static constexpr unsigned char sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1A, '\n'};
  if (!std::equal(sig, sig + 8, buf)) return std::nullopt;
  auto be32 = [&buf](int at) {
    return (static_cast<std::uint32_t>(buf[at]) << 24) | (static_cast<std::uint32_t>(buf[at + 1]) << 16) |
           (static_cast<std::uint32_t>(buf[at + 2]) << 8) | static_cast<std::uint32_t>(buf[at + 3]);
  };
  return ImageSize{static_cast<int>(be32(20)), static_cast<int>(be32(16))};
}

inline std::optional<ImageSize> jpeg_header(std::istream& in) {
  auto byte = [&in]() -> int { return in.get(); };
  if (byte() != 0xFF || byte() != 0xD8) return std::nullopt;
  while (in) {
    int b = byte();
    while (b != 0xFF && in) b = byte();
    int marker = byte();
    while (marker == 0xFF) marker = byte();
    if (!in) return std::nullopt;
    if (marker == 0xD8 || marker == 0x01 || (marker >= 0xD0 && marker <= 0xD7)) continue;
    const int len = (byte() << 8) | byte();
    if (len < 2) return std::nullopt;
    const bool sof = marker >= 0xC0 && marker <= 0xCF && marker != 0xC4 && marker != 0xC8 && marker != 0xCC;
    if (sof) {
      byte();  // precision
      const int h = (byte() << 8) | byte();
      const int w = (byte() << 8) | byte();
      if (h <= 0 || w <= 0) return std::nullopt;
      return ImageSize{h, w};
    }
    in.seekg(len - 2, std::ios::cur);
  }
  return std::nullopt;
}

}  // namespace detail

// Reads only the header of a PPM (binary P6), PNG or JPEG file.
inline std::optional<ImageSize> probe_image_size(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return std::nullopt;
  const int first = in.peek();
  if (first == 'P') return detail::ppm_header(in);
  if (first == 0x89) return detail::png_header(in);
  if (first == 0xFF) return detail::jpeg_header(in);
  return std::nullopt;
}

// Pixel decoding is implemented for binary PPM only; other formats must be
// converted first (e.g. `convert in.jpg out.ppm`).
inline Image read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ImageError("cannot open image " + path.string());
  int maxval = 0;
  auto size = detail::ppm_header(in, &maxval);
  if (!size) throw ImageError("not a binary PPM image: " + path.string());
  Image img(size->height, size->width);
  std::vector<unsigned char> raw(img.data.size());
  if (!in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()))) {
    throw ImageError("truncated PPM raster: " + path.string());
  }
  for (std::size_t i = 0; i < raw.size(); ++i) img.data[i] = raw[i] / static_cast<double>(maxval);
  return img;
}

inline void write_ppm(const std::filesystem::path& path, const Image& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ImageError("cannot write image " + path.string());
  out << "P6\n" << img.width << ' ' << img.height << "\n255\n";
  for (double v : img.data) out.put(static_cast<char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)));
}

}  // namespace skylink
