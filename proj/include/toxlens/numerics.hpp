#ifndef TOXLENS_NUMERICS_HPP_
#define TOXLENS_NUMERICS_HPP_

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "toxlens/error.hpp"
#include "toxlens/tensor.hpp"

namespace toxlens {

enum class ActivationKind { GeluExact, GeluTanh, Silu, Sigmoid };

inline const char* to_string(ActivationKind kind) {
  switch (kind) {
    case ActivationKind::GeluExact: return "gelu_exact";
    case ActivationKind::GeluTanh: return "gelu_tanh";
    case ActivationKind::Silu: return "silu";
    case ActivationKind::Sigmoid: return "sigmoid";
  }
  return "gelu_exact";
}

inline ActivationKind activation_from_string(const std::string& name) {
  if (name == "gelu_exact") return ActivationKind::GeluExact;
  if (name == "gelu_tanh") return ActivationKind::GeluTanh;
  if (name == "silu") return ActivationKind::Silu;
  if (name == "sigmoid") return ActivationKind::Sigmoid;
  throw Error::validation("bad_activation", "unknown activation kind: " + name);
}

namespace detail {
inline double sigmoid_f64(double x) {
  // Split to avoid overflow of exp for large |x|.
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}
constexpr double kSqrt2OverPi = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluTanhCoeff = 0.044715;
}  // namespace detail

inline double apply_activation_f64(ActivationKind kind, double x) {
  switch (kind) {
    case ActivationKind::GeluExact:
      return x * 0.5 * (1.0 + std::erf(x / 1.4142135623730951));
    case ActivationKind::GeluTanh: {
      const double inner = detail::kSqrt2OverPi * (x + detail::kGeluTanhCoeff * x * x * x);
      return 0.5 * x * (1.0 + std::tanh(inner));
    }
    case ActivationKind::Silu:
      return x * detail::sigmoid_f64(x);
    case ActivationKind::Sigmoid:
      return detail::sigmoid_f64(x);
  }
  return 0.0;
}

inline float apply_activation(ActivationKind kind, float x) {
  return static_cast<float>(apply_activation_f64(kind, static_cast<double>(x)));
}

inline double activation_derivative_f64(ActivationKind kind, double x) {
  switch (kind) {
    case ActivationKind::GeluExact: {
      const double phi_cdf = 0.5 * (1.0 + std::erf(x / 1.4142135623730951));
      const double phi_pdf = std::exp(-0.5 * x * x) * 0.3989422804014327;  // 1/sqrt(2pi)
      return phi_cdf + x * phi_pdf;
    }
    case ActivationKind::GeluTanh: {
      const double inner = detail::kSqrt2OverPi * (x + detail::kGeluTanhCoeff * x * x * x);
      const double t = std::tanh(inner);
      const double dinner = detail::kSqrt2OverPi * (1.0 + 3.0 * detail::kGeluTanhCoeff * x * x);
      return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner;
    }
    case ActivationKind::Silu: {
      const double s = detail::sigmoid_f64(x);
      return s * (1.0 + x * (1.0 - s));
    }
    case ActivationKind::Sigmoid: {
      const double s = detail::sigmoid_f64(x);
      return s * (1.0 - s);
    }
  }
  return 0.0;
}

// Dot product with double accumulation.
inline double dot(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) throw Error::validation("shape_mismatch", "dot: length mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return acc;
}

inline double norm2(std::span<const float> a) {
  double acc = 0.0;
  for (float v : a) acc += static_cast<double>(v) * static_cast<double>(v);
  return std::sqrt(acc);
}

inline double cosine(const Tensor1& a, const Tensor1& b) {
  if (a.size() != b.size()) throw Error::validation("shape_mismatch", "cosine: length mismatch");
  const double na = norm2(a.view());
  const double nb = norm2(b.view());
  if (na == 0.0 || nb == 0.0) throw Error::validation("zero_vector", "cosine of a zero vector is undefined");
  return dot(a.view(), b.view()) / (na * nb);
}

// Sample Pearson correlation, two-pass (mean then moments).
inline double pearson(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size()) throw Error::validation("length_mismatch", "pearson: length mismatch");
  if (xs.size() < 2) throw Error::validation("length_mismatch", "pearson needs at least two samples");
  const std::size_t n = xs.size();
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += xs[i];
    my += ys[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxx = 0.0, syy = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double dx = xs[i] - mx;
    const double dy = ys[i] - my;
    sxx += dx * dx;
    syy += dy * dy;
    sxy += dx * dy;
  }
  if (sxx == 0.0 || syy == 0.0) {
    throw Error::validation("constant_sequence", "pearson undefined for a constant sequence");
  }
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

// Regularized incomplete beta I_x(a, b) via the Lentz continued fraction.
inline double regularized_incomplete_beta(double a, double b, double x) {
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  const double ln_front = a * std::log(x) + b * std::log(1.0 - x) -
                          (std::lgamma(a) + std::lgamma(b) - std::lgamma(a + b));
  const auto contfrac = [](double aa, double bb, double xx) {
    const double tiny = 1e-30;
    double c = 1.0;
    double d = 1.0 - (aa + bb) * xx / (aa + 1.0);
    if (std::fabs(d) < tiny) d = tiny;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= 300; ++m) {
      const double m2 = 2.0 * m;
      double num = m * (bb - m) * xx / ((aa + m2 - 1.0) * (aa + m2));
      d = 1.0 + num * d;
      if (std::fabs(d) < tiny) d = tiny;
      c = 1.0 + num / c;
      if (std::fabs(c) < tiny) c = tiny;
      d = 1.0 / d;
      h *= d * c;
      num = -(aa + m) * (aa + bb + m) * xx / ((aa + m2) * (aa + m2 + 1.0));
      d = 1.0 + num * d;
      if (std::fabs(d) < tiny) d = tiny;
      c = 1.0 + num / c;
      if (std::fabs(c) < tiny) c = tiny;
      d = 1.0 / d;
      const double delta = d * c;
      h *= delta;
      if (std::fabs(delta - 1.0) < 1e-15) break;
    }
    return h;
  };
  // Use the symmetry relation on the side where the fraction converges fast.
  if (x < (a + 1.0) / (a + b + 2.0)) {
    return std::exp(ln_front) * contfrac(a, b, x) / a;
  }
  return 1.0 - std::exp(b * std::log(1.0 - x) + a * std::log(x) -
                        (std::lgamma(a) + std::lgamma(b) - std::lgamma(a + b))) *
                   contfrac(b, a, 1.0 - x) / b;
}

// Two-sided p-value for a Student-t statistic with `dof` degrees of freedom.
inline double student_t_two_sided_p(double t, double dof) {
  if (dof <= 0.0) throw Error::validation("bad_dof", "degrees of freedom must be positive");
  const double x = dof / (dof + t * t);
  return regularized_incomplete_beta(0.5 * dof, 0.5, x);
}

struct Correlation {
  double r = 0.0;
  double p = 1.0;
};

inline Correlation pearson_with_p(std::span<const double> xs, std::span<const double> ys) {
  Correlation out;
  out.r = pearson(xs, ys);
  const double n = static_cast<double>(xs.size());
  if (n <= 2.0 || std::fabs(out.r) >= 1.0) {
    out.p = std::fabs(out.r) >= 1.0 ? 0.0 : 1.0;
    return out;
  }
  const double t = out.r * std::sqrt((n - 2.0) / (1.0 - out.r * out.r));
  out.p = student_t_two_sided_p(t, n - 2.0);
  return out;
}

// y = M x with rows of M as output coordinates.
inline Tensor1 matvec(const Tensor2& m, const Tensor1& x) {
  if (m.cols() != x.size()) throw Error::validation("shape_mismatch", "matvec: cols != len(x)");
  Tensor1 y(m.rows());
  for (int r = 0; r < m.rows(); ++r) {
    y[r] = static_cast<float>(dot(m.row(r), x.view()));
  }
  return y;
}

inline Tensor2 matmul(const Tensor2& a, const Tensor2& b) {
  if (a.cols() != b.rows()) throw Error::validation("shape_mismatch", "matmul: inner dims differ");
  Tensor2 out(a.rows(), b.cols());
  for (int i = 0; i < a.rows(); ++i) {
    for (int j = 0; j < b.cols(); ++j) {
      double acc = 0.0;
      for (int k = 0; k < a.cols(); ++k) {
        acc += static_cast<double>(a.at(i, k)) * static_cast<double>(b.at(k, j));
      }
      out.at(i, j) = static_cast<float>(acc);
    }
  }
  return out;
}

// In-place stable softmax over one row.
inline void softmax_inplace(std::span<float> row) {
  if (row.empty()) throw Error::validation("bad_shape", "softmax of empty row");
  float max_val = row[0];
  for (float v : row) max_val = std::max(max_val, v);
  double sum = 0.0;
  for (float& v : row) {
    const double e = std::exp(static_cast<double>(v) - static_cast<double>(max_val));
    v = static_cast<float>(e);
    sum += e;
  }
  for (float& v : row) v = static_cast<float>(static_cast<double>(v) / sum);
}

// Log-softmax probabilities in double, used by likelihood evaluation.
inline std::vector<double> log_softmax_f64(std::span<const float> logits) {
  if (logits.empty()) throw Error::validation("bad_shape", "log_softmax of empty row");
  double max_val = logits[0];
  for (float v : logits) max_val = std::max(max_val, static_cast<double>(v));
  double sum = 0.0;
  for (float v : logits) sum += std::exp(static_cast<double>(v) - max_val);
  const double log_z = max_val + std::log(sum);
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = static_cast<double>(logits[i]) - log_z;
  return out;
}

constexpr float kLayerNormEps = 1e-5f;

// Per-row layer normalization with learned gain/shift; mean and variance
// accumulate in double.
inline Tensor1 layer_norm(const Tensor1& x, const Tensor1& gamma, const Tensor1& beta,
                          float eps = kLayerNormEps) {
  const int n = x.size();
  if (gamma.size() != n || beta.size() != n) {
    throw Error::validation("shape_mismatch", "layer_norm: parameter length mismatch");
  }
  double mean = 0.0;
  for (int i = 0; i < n; ++i) mean += static_cast<double>(x[i]);
  mean /= n;
  double var = 0.0;
  for (int i = 0; i < n; ++i) {
    const double d = static_cast<double>(x[i]) - mean;
    var += d * d;
  }
  var /= n;
  const double inv_std = 1.0 / std::sqrt(var + static_cast<double>(eps));
  Tensor1 y(n);
  for (int i = 0; i < n; ++i) {
    const double normalized = (static_cast<double>(x[i]) - mean) * inv_std;
    y[i] = static_cast<float>(normalized * static_cast<double>(gamma[i]) + static_cast<double>(beta[i]));
  }
  return y;
}

}  // namespace toxlens

#endif  // TOXLENS_NUMERICS_HPP_
