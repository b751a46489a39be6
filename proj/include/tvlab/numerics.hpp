#pragma once

// Dense numeric kernel shared by every tvlab module: matrix aliases, a
// counter-based RNG with labeled child streams, softmax / layer norm, Adam,
// and a deterministic PCA.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace tvlab {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::VectorXd;
using RowVec = Eigen::RowVectorXd;

inline constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

inline std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

/// FNV-1a over raw bytes. Stable across platforms, used for labels and
/// config hashes.
inline std::uint64_t fnv1a(std::string_view bytes,
                           std::uint64_t h = 0xCBF29CE484222325ULL) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

/// Counter-based generator. Output i of a stream is a pure function of
/// (seed, stream, i), so a child stream derived by label never depends on
/// how many values its siblings consumed.
class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0, std::uint64_t counter = 0)
      : seed_(seed), stream_(stream), counter_(counter) {}

  [[nodiscard]] Rng child(std::string_view label) const {
    return Rng(seed_, mix64(stream_ ^ mix64(fnv1a(label))));
  }
  [[nodiscard]] Rng child(std::uint64_t label) const {
    return Rng(seed_, mix64(stream_ + kGolden * (label + 1)));
  }
  template <typename... Rest>
  [[nodiscard]] Rng child(std::uint64_t first, std::uint64_t second, Rest... rest) const {
    return child(first).child(second, static_cast<std::uint64_t>(rest)...);
  }

  std::uint64_t next_u64() {
    const std::uint64_t key = mix64(seed_ ^ mix64(stream_));
    return mix64(key + kGolden * (++counter_));
  }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n).
  std::size_t below(std::size_t n) {
    if (n == 0) throw std::invalid_argument("Rng::below: empty range");
    const auto r = static_cast<std::size_t>(uniform() * static_cast<double>(n));
    return r < n ? r : n - 1;
  }

  bool bernoulli(double p) { return uniform() < p; }

  /// Standard normal via Box-Muller; consumes exactly two counters.
  double normal() {
    double u1 = uniform();
    const double u2 = uniform();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  [[nodiscard]] std::uint64_t seed() const { return seed_; }
  [[nodiscard]] std::uint64_t stream() const { return stream_; }
  [[nodiscard]] std::uint64_t counter() const { return counter_; }

 private:
  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t counter_;
};

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline Vec softmax(const Vec& v) {
  if (v.size() == 0) throw std::invalid_argument("empty vector");
  const double hi = v.maxCoeff();
  Vec e = (v.array() - hi).exp();
  return e / e.sum();
}

/// Row-wise softmax in place.
inline void softmax_rows(Mat& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    row.array() -= row.maxCoeff();
    row = row.array().exp();
    row /= row.sum();
  }
}

inline Vec layer_norm(const Vec& v, const Vec& gamma, const Vec& beta, double eps) {
  if (v.size() != gamma.size() || v.size() != beta.size())
    throw std::invalid_argument("layer_norm: length mismatch");
  if (!(eps > 0)) throw std::invalid_argument("layer_norm: eps must be positive");
  if (v.size() == 0) throw std::invalid_argument("empty vector");
  const double mean = v.mean();
  const double var = (v.array() - mean).square().mean();
  const double rstd = 1.0 / std::sqrt(var + eps);
  return (gamma.array() * ((v.array() - mean) * rstd) + beta.array()).matrix();
}

inline double gelu(double x) {
  constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  return 0.5 * x * (1.0 + std::tanh(k * (x + 0.044715 * x * x * x)));
}

inline double gelu_grad(double x) {
  constexpr double k = 0.7978845608028654;
  const double inner = k * (x + 0.044715 * x * x * x);
  const double t = std::tanh(inner);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * k * (1.0 + 3.0 * 0.044715 * x * x);
}

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::int64_t t = 0;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One bias-corrected Adam update. Moments are lazily sized on the first call.
inline void adam_step(std::span<double> params, std::span<const double> grads, AdamState& s) {
  if (params.size() != grads.size()) throw std::invalid_argument("adam_step: shape mismatch");
  if (s.m.empty() && s.v.empty()) {
    s.m.assign(params.size(), 0.0);
    s.v.assign(params.size(), 0.0);
  }
  if (s.m.size() != params.size() || s.v.size() != params.size())
    throw std::invalid_argument("adam_step: state shape mismatch");
  s.t += 1;
  const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.t));
  const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    s.m[i] = s.beta1 * s.m[i] + (1.0 - s.beta1) * grads[i];
    s.v[i] = s.beta2 * s.v[i] + (1.0 - s.beta2) * grads[i] * grads[i];
    const double mhat = s.m[i] / c1;
    const double vhat = s.v[i] / c2;
    params[i] -= s.lr * mhat / (std::sqrt(vhat) + s.eps);
  }
}

struct Pca {
  Mat axes;                  // d x k, columns are principal axes
  Vec explained_variance;    // k, descending
  RowVec mean;
  Mat projection;            // n x k
};

/// PCA through a symmetric eigendecomposition of the population covariance.
/// Each axis is flipped so its largest-magnitude loading is positive.
inline Pca pca(const Mat& x, std::size_t k) {
  const auto n = static_cast<std::size_t>(x.rows());
  const auto d = static_cast<std::size_t>(x.cols());
  if (n < 2) throw std::invalid_argument("pca: need at least two rows");
  if (k > std::min(n, d)) throw std::invalid_argument("pca: k exceeds min(n, d)");
  Pca out;
  out.mean = x.colwise().mean();
  const Mat centered = x.rowwise() - out.mean;
  const Mat cov = (centered.transpose() * centered) / static_cast<double>(n);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  if (solver.info() != Eigen::Success) throw std::runtime_error("pca: eigensolver failed");
  out.axes.resize(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(k));
  out.explained_variance.resize(static_cast<Eigen::Index>(k));
  for (std::size_t j = 0; j < k; ++j) {
    // eigenvalues come back ascending
    const auto src = static_cast<Eigen::Index>(d - 1 - j);
    Vec axis = solver.eigenvectors().col(src);
    Eigen::Index arg = 0;
    axis.cwiseAbs().maxCoeff(&arg);
    if (axis(arg) < 0) axis = -axis;
    out.axes.col(static_cast<Eigen::Index>(j)) = axis;
    out.explained_variance(static_cast<Eigen::Index>(j)) = std::max(0.0, solver.eigenvalues()(src));
  }
  out.projection = centered * out.axes;
  return out;
}

inline Mat pca_project(const Mat& x, std::size_t k) { return pca(x, k).projection; }

inline bool all_finite(const Mat& m) { return m.allFinite(); }

}  // namespace tvlab
