#pragma once

#include "skylink/autodiff.hpp"

#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace skylink {

using ad::Matrix;

// Named handles onto the leaf variables owned by model components. Copies
// share storage with the owning component.
class ParameterSet {
 public:
  struct Entry {
    std::string name;
    ad::Var var;
    bool trainable = true;
  };

  void add(std::string name, ad::Var var, bool trainable) {
    for (const auto& e : entries_) {
      if (e.name == name) throw std::invalid_argument("ParameterSet: duplicate parameter " + name);
    }
    var.set_requires_grad(trainable);
    entries_.push_back({std::move(name), std::move(var), trainable});
  }

  void append(const ParameterSet& other) {
    for (const auto& e : other.entries_) add(e.name, e.var, e.trainable);
  }

  std::span<const Entry> entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  const Entry& find(const std::string& name) const {
    for (const auto& e : entries_) {
      if (e.name == name) return e;
    }
    throw std::out_of_range("ParameterSet: no parameter named " + name);
  }

  void zero_grad() const {
    for (const auto& e : entries_) {
      ad::Var v = e.var;
      v.zero_grad();
    }
  }

  std::size_t scalar_count(bool trainable_only = false) const {
    std::size_t n = 0;
    for (const auto& e : entries_) {
      if (!trainable_only || e.trainable) n += static_cast<std::size_t>(e.var.value().size());
    }
    return n;
  }

 private:
  std::vector<Entry> entries_;
};

namespace io {

inline void write_u64(std::ostream& out, std::uint64_t v) {
  unsigned char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFFu);
  out.write(reinterpret_cast<const char*>(buf), 8);
}

inline std::uint64_t read_u64(std::istream& in) {
  unsigned char buf[8];
  if (!in.read(reinterpret_cast<char*>(buf), 8)) throw std::runtime_error("unexpected end of stream");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  return v;
}

inline void write_u32(std::ostream& out, std::uint32_t v) {
  unsigned char buf[4];
  for (int i = 0; i < 4; ++i) buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFFu);
  out.write(reinterpret_cast<const char*>(buf), 4);
}

inline std::uint32_t read_u32(std::istream& in) {
  unsigned char buf[4];
  if (!in.read(reinterpret_cast<char*>(buf), 4)) throw std::runtime_error("unexpected end of stream");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(buf[i]) << (8 * i);
  return v;
}

inline void write_f64(std::ostream& out, double v) {
  std::uint64_t bits;
  static_assert(sizeof bits == sizeof v);
  std::memcpy(&bits, &v, sizeof v);
  write_u64(out, bits);
}

inline double read_f64(std::istream& in) {
  const std::uint64_t bits = read_u64(in);
  double v;
  std::memcpy(&v, &bits, sizeof v);
  return v;
}

inline void write_f32(std::ostream& out, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, sizeof v);
  write_u32(out, bits);
}

inline float read_f32(std::istream& in) {
  const std::uint32_t bits = read_u32(in);
  float v;
  std::memcpy(&v, &bits, sizeof v);
  return v;
}

inline void write_string(std::ostream& out, const std::string& s) {
  write_u32(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& in) {
  const std::uint32_t n = read_u32(in);
  std::string s(n, '\0');
  if (n > 0 && !in.read(s.data(), n)) throw std::runtime_error("unexpected end of stream");
  return s;
}

inline void write_matrix(std::ostream& out, const Matrix& m) {
  write_u64(out, static_cast<std::uint64_t>(m.rows()));
  write_u64(out, static_cast<std::uint64_t>(m.cols()));
  for (Eigen::Index i = 0; i < m.size(); ++i) write_f64(out, m.data()[i]);
}

inline Matrix read_matrix(std::istream& in) {
  const auto rows = static_cast<Eigen::Index>(read_u64(in));
  const auto cols = static_cast<Eigen::Index>(read_u64(in));
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = read_f64(in);
  return m;
}

}  // namespace io

// Values are written as raw IEEE-754 bit patterns, so a round trip is exact.
inline void save_parameters(std::ostream& out, const ParameterSet& params) {
  io::write_u64(out, params.size());
  for (const auto& e : params.entries()) {
    io::write_string(out, e.name);
    io::write_matrix(out, e.var.value());
  }
}

inline void load_parameters(std::istream& in, const ParameterSet& params) {
  const std::uint64_t count = io::read_u64(in);
  if (count != params.size()) throw std::runtime_error("parameter count mismatch while loading");
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::string name = io::read_string(in);
    Matrix value = io::read_matrix(in);
    ad::Var target = params.find(name).var;
    if (target.rows() != value.rows() || target.cols() != value.cols()) {
      throw std::runtime_error("shape mismatch while loading parameter " + name);
    }
    target.mutable_value() = std::move(value);
  }
}

inline Matrix random_normal(Eigen::Index rows, Eigen::Index cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

// Fan-in scaled Gaussian init for a (fan_in x fan_out) weight.
inline Matrix init_weight(Eigen::Index fan_in, Eigen::Index fan_out, std::mt19937_64& rng, double gain = 1.0) {
  return random_normal(fan_in, fan_out, gain / std::sqrt(static_cast<double>(fan_in)), rng);
}

}  // namespace skylink
