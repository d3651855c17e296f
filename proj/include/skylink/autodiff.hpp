#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major
// matrices. Every trainable component of the pipeline is written against
// these ops so that one backward pass serves the whole objective.

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace skylink::ad {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Node {
  Matrix value;
  Matrix grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(const Matrix&)> backward_fn;

  void accumulate(const Matrix& g) {
    if (grad.size() == 0) {
      grad = g;
    } else {
      grad += g;
    }
  }
};

class Var {
 public:
  Var() = default;
  explicit Var(Matrix value, bool requires_grad = false)
      : node_(std::make_shared<Node>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  bool defined() const { return node_ != nullptr; }
  const Matrix& value() const { return node_->value; }
  // Direct write access is for optimizers and parameter loading only.
  Matrix& mutable_value() { return node_->value; }
  const Matrix& grad() const { return node_->grad; }
  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  void zero_grad() { node_->grad.resize(0, 0); }

  Eigen::Index rows() const { return node_->value.rows(); }
  Eigen::Index cols() const { return node_->value.cols(); }
  double scalar() const {
    if (rows() != 1 || cols() != 1) throw std::logic_error("Var::scalar on non-scalar");
    return node_->value(0, 0);
  }

  const std::shared_ptr<Node>& node() const { return node_; }

  void accumulate(const Matrix& g) const {
    if (node_->requires_grad) node_->accumulate(g);
  }

 private:
  std::shared_ptr<Node> node_;
};

inline Var constant(Matrix value) { return Var(std::move(value), false); }

namespace detail {

inline Var make_op(Matrix value, std::initializer_list<Var> inputs,
                   std::function<void(const Matrix&)> backward) {
  Var out(std::move(value), false);
  bool any = false;
  for (const Var& in : inputs) any = any || in.requires_grad();
  if (!any) return out;
  auto& node = *out.node();
  node.requires_grad = true;
  for (const Var& in : inputs) {
    if (in.requires_grad()) node.parents.push_back(in.node());
  }
  node.backward_fn = std::move(backward);
  return out;
}

inline void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch (" + std::to_string(a.rows()) + "x" +
                                std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                                std::to_string(b.cols()) + ")");
  }
}

}  // namespace detail

// Runs reverse accumulation from a scalar root. Leaf gradients accumulate
// across calls until zero_grad().
inline void backward(const Var& root) {
  if (root.rows() != 1 || root.cols() != 1) throw std::invalid_argument("backward: root must be a scalar");
  if (!root.requires_grad()) return;

  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.node().get(), 0}};
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (seen.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->accumulate(Matrix::Ones(1, 1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->backward_fn && node->grad.size() != 0) node->backward_fn(node->grad);
  }
  // Interior gradients are not needed after the sweep.
  for (Node* node : order) {
    if (node->backward_fn) node->grad.resize(0, 0);
  }
}

inline Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) {
    throw std::invalid_argument("matmul: inner dimension mismatch (" + std::to_string(a.cols()) + " vs " +
                                std::to_string(b.rows()) + ")");
  }
  Matrix value = a.value() * b.value();
  return detail::make_op(std::move(value), {a, b}, [a, b](const Matrix& g) {
    if (a.requires_grad()) a.accumulate(g * b.value().transpose());
    if (b.requires_grad()) b.accumulate(a.value().transpose() * g);
  });
}

inline Var add(const Var& a, const Var& b) {
  detail::check_same_shape(a, b, "add");
  return detail::make_op(a.value() + b.value(), {a, b}, [a, b](const Matrix& g) {
    a.accumulate(g);
    b.accumulate(g);
  });
}

inline Var sub(const Var& a, const Var& b) {
  detail::check_same_shape(a, b, "sub");
  return detail::make_op(a.value() - b.value(), {a, b}, [a, b](const Matrix& g) {
    a.accumulate(g);
    b.accumulate(-g);
  });
}

inline Var mul(const Var& a, const Var& b) {
  detail::check_same_shape(a, b, "mul");
  Matrix value = a.value().cwiseProduct(b.value());
  return detail::make_op(std::move(value), {a, b}, [a, b](const Matrix& g) {
    if (a.requires_grad()) a.accumulate(g.cwiseProduct(b.value()));
    if (b.requires_grad()) b.accumulate(g.cwiseProduct(a.value()));
  });
}

inline Var scale(const Var& a, double s) {
  return detail::make_op(a.value() * s, {a}, [a, s](const Matrix& g) { a.accumulate(g * s); });
}

// a (r x c) + row (1 x c) broadcast over rows.
inline Var add_row(const Var& a, const Var& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw std::invalid_argument("add_row: bias shape mismatch");
  Matrix value = a.value().rowwise() + row.value().row(0);
  return detail::make_op(std::move(value), {a, row}, [a, row](const Matrix& g) {
    a.accumulate(g);
    if (row.requires_grad()) row.accumulate(g.colwise().sum());
  });
}

// a (r x c) + col (r x 1) broadcast over columns.
inline Var add_col(const Var& a, const Var& col) {
  if (col.cols() != 1 || col.rows() != a.rows()) throw std::invalid_argument("add_col: bias shape mismatch");
  Matrix value = a.value().colwise() + col.value().col(0);
  return detail::make_op(std::move(value), {a, col}, [a, col](const Matrix& g) {
    a.accumulate(g);
    if (col.requires_grad()) col.accumulate(g.rowwise().sum());
  });
}

inline Var relu(const Var& a) {
  Matrix value = a.value().cwiseMax(0.0);
  return detail::make_op(std::move(value), {a}, [a](const Matrix& g) {
    a.accumulate((a.value().array() > 0.0).cast<double>().matrix().cwiseProduct(g));
  });
}

inline Var transpose(const Var& a) {
  Matrix value = a.value().transpose();
  return detail::make_op(std::move(value), {a}, [a](const Matrix& g) { a.accumulate(g.transpose()); });
}

// Row-major reinterpretation.
inline Var reshape(const Var& a, Eigen::Index rows, Eigen::Index cols) {
  if (rows * cols != a.value().size()) throw std::invalid_argument("reshape: element count mismatch");
  Matrix value = Eigen::Map<const Matrix>(a.value().data(), rows, cols);
  const Eigen::Index r0 = a.rows();
  const Eigen::Index c0 = a.cols();
  return detail::make_op(std::move(value), {a}, [a, r0, c0](const Matrix& g) {
    a.accumulate(Eigen::Map<const Matrix>(g.data(), r0, c0));
  });
}

inline Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  const Eigen::Index cols = parts.front().cols();
  Eigen::Index rows = 0;
  for (const Var& p : parts) {
    if (p.cols() != cols) throw std::invalid_argument("concat_rows: column mismatch");
    rows += p.rows();
  }
  Matrix value(rows, cols);
  Eigen::Index at = 0;
  bool any = false;
  for (const Var& p : parts) {
    value.middleRows(at, p.rows()) = p.value();
    at += p.rows();
    any = any || p.requires_grad();
  }
  Var out(std::move(value), false);
  if (!any) return out;
  auto& node = *out.node();
  node.requires_grad = true;
  for (const Var& p : parts) {
    if (p.requires_grad()) node.parents.push_back(p.node());
  }
  node.backward_fn = [parts](const Matrix& g) {
    Eigen::Index offset = 0;
    for (const Var& p : parts) {
      if (p.requires_grad()) p.accumulate(g.middleRows(offset, p.rows()));
      offset += p.rows();
    }
  };
  return out;
}

inline Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) throw std::invalid_argument("slice_rows: out of range");
  Matrix value = a.value().middleRows(start, count);
  return detail::make_op(std::move(value), {a}, [a, start, count](const Matrix& g) {
    Matrix full = Matrix::Zero(a.rows(), a.cols());
    full.middleRows(start, count) = g;
    a.accumulate(full);
  });
}

// Column means: (r x c) -> (1 x c).
inline Var mean_rows(const Var& a) {
  const double n = static_cast<double>(a.rows());
  Matrix value = a.value().colwise().mean();
  return detail::make_op(std::move(value), {a}, [a, n](const Matrix& g) {
    a.accumulate(Matrix(g.replicate(a.rows(), 1) / n));
  });
}

inline Var sum_all(const Var& a) {
  Matrix value(1, 1);
  value(0, 0) = a.value().sum();
  return detail::make_op(std::move(value), {a}, [a](const Matrix& g) {
    a.accumulate(Matrix::Constant(a.rows(), a.cols(), g(0, 0)));
  });
}

inline Var mean_all(const Var& a) { return scale(sum_all(a), 1.0 / static_cast<double>(a.value().size())); }

// Main diagonal of a square matrix as an (n x 1) column.
inline Var diagonal(const Var& a) {
  if (a.rows() != a.cols()) throw std::invalid_argument("diagonal: matrix not square");
  Matrix value = a.value().diagonal();
  return detail::make_op(std::move(value), {a}, [a](const Matrix& g) {
    Matrix full = Matrix::Zero(a.rows(), a.cols());
    full.diagonal() = g.col(0);
    a.accumulate(full);
  });
}

inline Var softmax_rows(const Var& a) {
  Matrix value(a.rows(), a.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    const double m = a.value().row(i).maxCoeff();
    value.row(i) = (a.value().row(i).array() - m).exp().matrix();
    value.row(i) /= value.row(i).sum();
  }
  Matrix y = value;
  return detail::make_op(std::move(value), {a}, [a, y](const Matrix& g) {
    Matrix dx(y.rows(), y.cols());
    for (Eigen::Index i = 0; i < y.rows(); ++i) {
      const double dot = g.row(i).dot(y.row(i));
      dx.row(i) = y.row(i).cwiseProduct((g.row(i).array() - dot).matrix());
    }
    a.accumulate(dx);
  });
}

inline Var log_softmax_rows(const Var& a) {
  Matrix value(a.rows(), a.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    const double m = a.value().row(i).maxCoeff();
    const double lse = m + std::log((a.value().row(i).array() - m).exp().sum());
    value.row(i) = (a.value().row(i).array() - lse).matrix();
  }
  Matrix y = value;
  return detail::make_op(std::move(value), {a}, [a, y](const Matrix& g) {
    Matrix dx(y.rows(), y.cols());
    for (Eigen::Index i = 0; i < y.rows(); ++i) {
      const double gsum = g.row(i).sum();
      dx.row(i) = g.row(i) - (y.row(i).array().exp() * gsum).matrix();
    }
    a.accumulate(dx);
  });
}

// Raised when a vector to be normalized has (numerically) zero length.
class DegenerateEmbedding : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Each row scaled to unit L2 norm.
inline Var l2_normalize_rows(const Var& a, double min_norm = 1e-12) {
  Matrix value = a.value();
  Eigen::VectorXd norms(a.rows());
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    norms(i) = a.value().row(i).norm();
    if (!(norms(i) > min_norm)) throw DegenerateEmbedding("l2_normalize: zero-length vector cannot be normalized");
    value.row(i) /= norms(i);
  }
  Matrix y = value;
  return detail::make_op(std::move(value), {a}, [a, y, norms](const Matrix& g) {
    Matrix dx(y.rows(), y.cols());
    for (Eigen::Index i = 0; i < y.rows(); ++i) {
      const double dot = g.row(i).dot(y.row(i));
      dx.row(i) = (g.row(i) - dot * y.row(i)) / norms(i);
    }
    a.accumulate(dx);
  });
}

// Per-row layer normalization with affine (1 x c) gain and bias.
inline Var layer_norm_rows(const Var& a, const Var& gain, const Var& bias, double eps = 1e-5) {
  const Eigen::Index c = a.cols();
  if (gain.rows() != 1 || gain.cols() != c || bias.rows() != 1 || bias.cols() != c) {
    throw std::invalid_argument("layer_norm_rows: affine shape mismatch");
  }
  Matrix xhat(a.rows(), c);
  Eigen::VectorXd inv_std(a.rows());
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    const double mean = a.value().row(i).mean();
    const auto centered = (a.value().row(i).array() - mean).matrix();
    const double var = centered.squaredNorm() / static_cast<double>(c);
    inv_std(i) = 1.0 / std::sqrt(var + eps);
    xhat.row(i) = centered * inv_std(i);
  }
  Matrix value = (xhat.array().rowwise() * gain.value().row(0).array()).matrix();
  value.rowwise() += bias.value().row(0);
  return detail::make_op(std::move(value), {a, gain, bias}, [a, gain, bias, xhat, inv_std, c](const Matrix& g) {
    if (gain.requires_grad()) gain.accumulate(g.cwiseProduct(xhat).colwise().sum());
    if (bias.requires_grad()) bias.accumulate(g.colwise().sum());
    if (a.requires_grad()) {
      Matrix gx = (g.array().rowwise() * gain.value().row(0).array()).matrix();
      Matrix dx(gx.rows(), c);
      const double n = static_cast<double>(c);
      for (Eigen::Index i = 0; i < gx.rows(); ++i) {
        const double s1 = gx.row(i).sum();
        const double s2 = gx.row(i).dot(xhat.row(i));
        dx.row(i) = (inv_std(i) / n) * (n * gx.row(i).array() - s1 - xhat.row(i).array() * s2).matrix();
      }
      a.accumulate(dx);
    }
  });
}

// Generalized-mean pooling over rows: (n x c), exponent p (1 x 1) -> (1 x c).
// Inputs are clamped below at eps before the power.
inline Var gem_pool(const Var& x, const Var& p, double eps = 1e-6) {
  if (p.rows() != 1 || p.cols() != 1) throw std::invalid_argument("gem_pool: exponent must be scalar");
  const double pw = p.value()(0, 0);
  const Eigen::Index n = x.rows();
  const Eigen::Index c = x.cols();
  Matrix clamped = x.value().cwiseMax(eps);
  Matrix powered = clamped.array().pow(pw).matrix();
  Eigen::RowVectorXd mean = powered.colwise().mean();
  Matrix value(1, c);
  for (Eigen::Index j = 0; j < c; ++j) value(0, j) = std::pow(mean(j), 1.0 / pw);
  Matrix y = value;
  return detail::make_op(std::move(value), {x, p}, [x, p, clamped, powered, mean, y, pw, n, c, eps](const Matrix& g) {
    if (x.requires_grad()) {
      Matrix dx = Matrix::Zero(n, c);
      for (Eigen::Index j = 0; j < c; ++j) {
        // dy/dx_ij = y_j^(1-p) * x_ij^(p-1) / n
        const double lead = std::pow(y(0, j), 1.0 - pw) / static_cast<double>(n);
        for (Eigen::Index i = 0; i < n; ++i) {
          if (x.value()(i, j) > eps) dx(i, j) = g(0, j) * lead * std::pow(clamped(i, j), pw - 1.0);
        }
      }
      x.accumulate(dx);
    }
    if (p.requires_grad()) {
      double dp = 0.0;
      for (Eigen::Index j = 0; j < c; ++j) {
        // y = exp(log(m)/p); dy/dp = y * (m'/(m p) - log(m)/p^2), m' = mean(x^p log x)
        double mprime = 0.0;
        for (Eigen::Index i = 0; i < n; ++i) mprime += powered(i, j) * std::log(clamped(i, j));
        mprime /= static_cast<double>(n);
        const double m = mean(j);
        dp += g(0, j) * y(0, j) * (mprime / (m * pw) - std::log(m) / (pw * pw));
      }
      Matrix gp(1, 1);
      gp(0, 0) = dp;
      p.accumulate(gp);
    }
  });
}

}  // namespace skylink::ad
