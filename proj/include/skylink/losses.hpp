#pragma once

// In-batch InfoNCE and the cross-view / self-supervised objectives built on
// it. Inputs are (B x D) matrices of unit-norm rows, row b of every input
// belonging to location b.

#include "skylink/autodiff.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <cmath>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace skylink {

enum class LossDirection { one_way, symmetric };

inline LossDirection parse_loss_direction(const std::string& s) {
  if (s == "one_way") return LossDirection::one_way;
  if (s == "symmetric") return LossDirection::symmetric;
  throw std::invalid_argument("unknown loss direction: " + s);
}

struct LossConfig {
  double temperature = 0.07;
  double lambda = 3.0;
  LossDirection direction = LossDirection::symmetric;
};

inline void validate(const LossConfig& c) {
  if (!(c.temperature > 0)) throw std::invalid_argument("loss: temperature must be positive");
  if (!(c.lambda >= 0)) throw std::invalid_argument("loss: lambda must be nonnegative");
}

class LossInputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace detail {

inline void check_pair(const ad::Var& a, const ad::Var& p) {
  if (a.rows() < 2) throw LossInputError("info_nce: batch must contain at least two locations");
  if (a.rows() != p.rows() || a.cols() != p.cols()) throw LossInputError("info_nce: anchor/positive shape mismatch");
  for (const ad::Var* v : {&a, &p}) {
    for (Eigen::Index i = 0; i < v->rows(); ++i) {
      if (std::abs(v->value().row(i).norm() - 1.0) > 1e-6) {
        throw LossInputError("info_nce: embeddings must be L2-normalized");
      }
    }
  }
}

// mean_b -log softmax(logits[b, :])[b]
inline ad::Var diagonal_nll(const ad::Var& logits) {
  return ad::scale(ad::mean_all(ad::diagonal(ad::log_softmax_rows(logits))), -1.0);
}

}  // namespace detail

// Candidates for anchor b are all B positives (the matching one included).
inline ad::Var info_nce(const ad::Var& anchors, const ad::Var& positives, const LossConfig& config) {
  validate(config);
  detail::check_pair(anchors, positives);
  ad::Var logits = ad::scale(ad::matmul(anchors, ad::transpose(positives)), 1.0 / config.temperature);
  ad::Var forward = detail::diagonal_nll(logits);
  if (config.direction == LossDirection::one_way) return forward;
  ad::Var backward = detail::diagonal_nll(ad::transpose(logits));
  return ad::scale(ad::add(forward, backward), 0.5);
}

inline double info_nce_value(const ad::Matrix& anchors, const ad::Matrix& positives, const LossConfig& config) {
  return info_nce(ad::constant(anchors), ad::constant(positives), config).scalar();
}

inline std::string scale_tag(std::size_t i) { return "d_s" + std::to_string(i + 1); }

struct LossTerms {
  ad::Var value;
  std::map<std::string, double> pairs;
  std::vector<std::string> flags;  // e.g. "s2-missing"
};

using DroneEmbeddings = std::array<std::optional<ad::Var>, 3>;

// Street-satellite term plus, for every available scale, street-drone and
// satellite-drone terms.
inline LossTerms cross_view_loss(const ad::Var& street, const ad::Var& satellite, const DroneEmbeddings& drone,
                                 const LossConfig& config) {
  LossTerms out;
  out.value = info_nce(street, satellite, config);
  out.pairs["g-s"] = out.value.scalar();
  for (std::size_t i = 0; i < drone.size(); ++i) {
    if (!drone[i]) {
      out.flags.push_back("s" + std::to_string(i + 1) + "-missing");
      continue;
    }
    ad::Var gd = info_nce(street, *drone[i], config);
    ad::Var sd = info_nce(satellite, *drone[i], config);
    out.pairs["g-" + scale_tag(i)] = gd.scalar();
    out.pairs["s-" + scale_tag(i)] = sd.scalar();
    out.value = ad::add(out.value, ad::add(gd, sd));
  }
  return out;
}

struct ViewPair {
  ad::Var a;  // first augmentation draw
  ad::Var b;  // second draw of the same images
};

using DroneViewPairs = std::array<std::optional<ViewPair>, 3>;

// Intra-view terms: each view's draw A is contrasted against draw B.
inline LossTerms self_supervised_loss(const ViewPair& street, const ViewPair& satellite, const DroneViewPairs& drone,
                                      const LossConfig& config) {
  LossTerms out;
  ad::Var gg = info_nce(street.a, street.b, config);
  ad::Var ss = info_nce(satellite.a, satellite.b, config);
  out.pairs["g-g"] = gg.scalar();
  out.pairs["s-s"] = ss.scalar();
  out.value = ad::add(gg, ss);
  for (std::size_t i = 0; i < drone.size(); ++i) {
    if (!drone[i]) {
      out.flags.push_back("s" + std::to_string(i + 1) + "-missing");
      continue;
    }
    ad::Var dd = info_nce(drone[i]->a, drone[i]->b, config);
    out.pairs[scale_tag(i) + "-" + scale_tag(i)] = dd.scalar();
    out.value = ad::add(out.value, dd);
  }
  return out;
}

inline double total_loss(double l_cc, double l_sc, double lambda) { return l_cc + lambda * l_sc; }

struct LossReport {
  double l_cc = 0.0;
  double l_sc = 0.0;
  double l_total = 0.0;
  std::map<std::string, double> pairs;
  std::vector<std::string> flags;
};

inline nlohmann::json to_json(const LossReport& r) {
  nlohmann::json j;
  j["l_cc"] = r.l_cc;
  j["l_sc"] = r.l_sc;
  j["l_total"] = r.l_total;
  j["pairs"] = r.pairs;
  if (!r.flags.empty()) j["flags"] = r.flags;
  return j;
}

struct Objective {
  ad::Var total;  // differentiable; excludes l_sc entirely when lambda == 0
  LossReport report;
};

inline Objective total_objective(const LossTerms& cc, const LossTerms& sc, const LossConfig& config) {
  Objective obj;
  obj.report.l_cc = cc.value.scalar();
  obj.report.l_sc = sc.value.scalar();
  obj.report.l_total = total_loss(obj.report.l_cc, obj.report.l_sc, config.lambda);
  obj.report.pairs = cc.pairs;
  obj.report.pairs.insert(sc.pairs.begin(), sc.pairs.end());
  obj.report.flags = cc.flags;
  obj.total = config.lambda == 0.0 ? cc.value : ad::add(cc.value, ad::scale(sc.value, config.lambda));
  return obj;
}

}  // namespace skylink
