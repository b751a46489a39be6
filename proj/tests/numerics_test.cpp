#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "tvlab/numerics.hpp"

using namespace tvlab;

TEST(Softmax, SymmetricInputs) {
  Vec v(2);
  v << 0, 0;
  const Vec p = softmax(v);
  EXPECT_DOUBLE_EQ(p(0), 0.5);
  EXPECT_DOUBLE_EQ(p(1), 0.5);
}

TEST(Softmax, LargeInputsDoNotOverflow) {
  Vec v(2);
  v << 1000, 1000;
  const Vec p = softmax(v);
  EXPECT_DOUBLE_EQ(p(0), 0.5);
  EXPECT_DOUBLE_EQ(p(1), 0.5);
}

TEST(Softmax, ClosedFormRatio) {
  Vec v(2);
  v << 0, std::log(3.0);
  const Vec p = softmax(v);
  EXPECT_NEAR(p(0), 0.25, 1e-15);
  EXPECT_NEAR(p(1), 0.75, 1e-15);
}

TEST(Softmax, EmptyThrows) { EXPECT_THROW(softmax(Vec()), std::invalid_argument); }

TEST(Softmax, SumsToOneOverWideRange) {
  Rng rng(11);
  for (int t = 0; t < 200; ++t) {
    Vec v(1 + static_cast<int>(rng.below(20)));
    for (auto& x : v) x = rng.uniform(-1e6, 1e6);
    const Vec p = softmax(v);
    EXPECT_NEAR(p.sum(), 1.0, 1e-12);
    EXPECT_GT(p.minCoeff(), -1e-300);
    EXPECT_LE(p.maxCoeff(), 1.0);
  }
}

TEST(LayerNorm, ConstantVectorMapsToZero) {
  Vec v = Vec::Constant(5, 3.0);
  const Vec out = layer_norm(v, Vec::Ones(5), Vec::Zero(5), 1e-5);
  EXPECT_TRUE(out.isZero(0));
}

TEST(LayerNorm, PlusMinusOne) {
  Vec v(2);
  v << 1, -1;
  const Vec out = layer_norm(v, Vec::Ones(2), Vec::Zero(2), 1e-12);
  EXPECT_NEAR(out(0), 1.0, 1e-11);
  EXPECT_NEAR(out(1), -1.0, 1e-11);
}

TEST(LayerNorm, ZeroGammaGivesBeta) {
  Vec v(3);
  v << 0.3, -2, 7;
  const Vec out = layer_norm(v, Vec::Zero(3), Vec::Constant(3, 0.75), 1e-5);
  for (double x : out) EXPECT_DOUBLE_EQ(x, 0.75);
}

TEST(LayerNorm, VarianceShrinkByEps) {
  Vec v(4);
  v << 0.1, 0.2, 0.4, 0.8;
  const double mean = v.mean();
  const double var = (v.array() - mean).square().mean();
  const double eps = 1e-2;
  const Vec out = layer_norm(v, Vec::Ones(4), Vec::Zero(4), eps);
  EXPECT_NEAR(out.mean(), 0.0, 1e-14);
  EXPECT_NEAR(out.array().square().mean(), 1.0 / (1.0 + eps / var), 1e-12);
}

TEST(LayerNorm, LengthMismatchThrows) {
  EXPECT_THROW(layer_norm(Vec::Ones(3), Vec::Ones(2), Vec::Zero(3), 1e-5), std::invalid_argument);
}

TEST(Adam, ZeroGradientFreshStateIsNoop) {
  std::vector<double> p{1.0, -2.0, 3.5};
  std::vector<double> g(3, 0.0);
  AdamState s;
  s.lr = 0.1;
  adam_step(p, g, s);
  EXPECT_EQ(p, (std::vector<double>{1.0, -2.0, 3.5}));
  EXPECT_EQ(s.t, 1);
}

TEST(Adam, FirstStepMagnitudeIsLearningRate) {
  std::vector<double> p{0.0};
  std::vector<double> g{1.0};
  AdamState s;
  s.lr = 0.1;
  adam_step(p, g, s);
  EXPECT_NEAR(p[0], -0.1, 1e-8);
}

TEST(Adam, UpdatesDecayAfterGradientStops) {
  // Oracle values from an independent scalar Adam evaluation.
  std::vector<double> p{0.0};
  AdamState s;
  s.lr = 0.1;
  const std::vector<double> expected{0.09999999900000002, 0.0670058244658113, 0.05179569635095145};
  double prev = 0;
  const std::vector<double> grads{1.0, 0.0, 0.0};
  for (std::size_t i = 0; i < grads.size(); ++i) {
    std::vector<double> g{grads[i]};
    adam_step(p, g, s);
    const double step = prev - p[0];
    EXPECT_NEAR(step, expected[i], 1e-15);
    if (i > 0) {
      EXPECT_LT(step, expected[i - 1]);
    }
    prev = p[0];
  }
}

TEST(Adam, ZeroLearningRateIsIdentity) {
  Rng rng(3);
  std::vector<double> p(10), g(10);
  for (auto& x : p) x = rng.normal();
  const auto before = p;
  AdamState s;
  s.lr = 0.0;
  for (int k = 0; k < 5; ++k) {
    for (auto& x : g) x = rng.normal();
    adam_step(p, g, s);
  }
  EXPECT_EQ(p, before);
}

TEST(Adam, ShapeMismatchThrows) {
  std::vector<double> p(3), g(2);
  AdamState s;
  EXPECT_THROW(adam_step(p, g, s), std::invalid_argument);
}

TEST(Rng, DeterministicAndLabeled) {
  Rng a(42), b(42);
  for (int i = 0; i < 10; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
  Rng parent(42);
  const Rng c1 = parent.child("alpha");
  parent.next_u64();
  parent.next_u64();
  const Rng c2 = parent.child("alpha");
  Rng x = c1, y = c2;
  EXPECT_EQ(x.next_u64(), y.next_u64());
  Rng other = Rng(42).child("beta");
  Rng again = Rng(42).child("alpha");
  EXPECT_NE(other.next_u64(), again.next_u64());
}

TEST(Rng, SiblingOrderIndependence) {
  const Rng root(9);
  Rng a1 = root.child(1, 2, 3);
  Rng b = root.child(7);
  (void)b.next_u64();
  Rng a2 = root.child(1, 2, 3);
  EXPECT_EQ(a1.next_u64(), a2.next_u64());
}

TEST(Rng, UniformAndNormalMoments) {
  Rng rng(5);
  double s = 0, s2 = 0, ns = 0, ns2 = 0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double u = rng.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    s += u;
    s2 += u * u;
    const double z = rng.normal();
    ns += z;
    ns2 += z * z;
  }
  EXPECT_NEAR(s / n, 0.5, 0.005);
  EXPECT_NEAR(s2 / n - (s / n) * (s / n), 1.0 / 12, 0.002);
  EXPECT_NEAR(ns / n, 0.0, 0.01);
  EXPECT_NEAR(ns2 / n, 1.0, 0.01);
}

namespace {

double dist(const Mat& a, Eigen::Index i, Eigen::Index j) { return (a.row(i) - a.row(j)).norm(); }

// Top eigenpairs of a symmetric PSD matrix by power iteration with deflation.
std::vector<double> power_eigenvalues(Eigen::MatrixXd m, int k) {
  std::vector<double> out;
  for (int j = 0; j < k; ++j) {
    Eigen::VectorXd v = Eigen::VectorXd::Ones(m.rows()) / std::sqrt(static_cast<double>(m.rows()));
    v(0) += 0.1;
    double lambda = 0;
    for (int it = 0; it < 20000; ++it) {
      Eigen::VectorXd w = m * v;
      const double nrm = w.norm();
      if (nrm == 0) break;
      v = w / nrm;
      lambda = v.dot(m * v);
    }
    out.push_back(lambda);
    m -= lambda * v * v.transpose();
  }
  return out;
}

}  // namespace

TEST(Pca, CollinearPointsKeepDistances) {
  Mat x(4, 3);
  const RowVec dir = (RowVec(3) << 1, 2, -2).finished() / 3.0;
  const double ts[] = {-1.0, 0.5, 2.0, 4.0};
  for (int i = 0; i < 4; ++i) x.row(i) = RowVec::Constant(3, 0.7) + ts[i] * dir;
  const Mat p = pca_project(x, 1);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) EXPECT_NEAR(dist(p, i, j), dist(x, i, j), 1e-12);
}

TEST(Pca, TwoDimensionalCenteredDataIsRotated) {
  Mat x(5, 2);
  x << 1, 0, -1, 0.5, 0.2, -0.3, 0.3, 0.1, -0.5, -0.3;
  const Mat centered = x.rowwise() - x.colwise().mean();
  const Mat p = pca_project(centered, 2);
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 5; ++j) EXPECT_NEAR(dist(p, i, j), dist(centered, i, j), 1e-12);
}

TEST(Pca, ExplainedVarianceMatchesPowerIteration) {
  Rng rng(17);
  Mat x(5, 4);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.normal();
  const Pca res = pca(x, 2);
  const Mat c = x.rowwise() - x.colwise().mean();
  const Eigen::MatrixXd cov = (c.transpose() * c) / 5.0;
  const auto oracle = power_eigenvalues(cov, 2);
  EXPECT_NEAR(res.explained_variance(0), oracle[0], 1e-9);
  EXPECT_NEAR(res.explained_variance(1), oracle[1], 1e-9);
  EXPECT_GE(res.explained_variance(0), res.explained_variance(1));
  // projected column variance equals the eigenvalue
  for (int j = 0; j < 2; ++j) {
    const double var = res.projection.col(j).squaredNorm() / 5.0;
    EXPECT_NEAR(var, oracle[static_cast<std::size_t>(j)], 1e-9);
  }
}

TEST(Pca, SignConventionAndErrors) {
  Rng rng(23);
  Mat x(6, 3);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.normal();
  const Pca a = pca(x, 2);
  const Pca b = pca(x, 2);
  EXPECT_EQ(a.projection, b.projection);
  for (int j = 0; j < 2; ++j) {
    Eigen::Index arg = 0;
    a.axes.col(j).cwiseAbs().maxCoeff(&arg);
    EXPECT_GT(a.axes(arg, j), 0);
  }
  EXPECT_THROW(pca(x, 4), std::invalid_argument);
  EXPECT_THROW(pca(Mat(1, 3), 1), std::invalid_argument);
}

TEST(Pca, ReconstructionErrorNonIncreasingInK) {
  Rng rng(29);
  Mat x(8, 5);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.normal();
  double prev = std::numeric_limits<double>::infinity();
  for (std::size_t k = 1; k <= 5; ++k) {
    const Pca p = pca(x, k);
    const Mat recon = (p.projection * p.axes.transpose()).rowwise() + p.mean;
    const double err = (recon - x).squaredNorm();
    EXPECT_LE(err, prev + 1e-12);
    prev = err;
  }
  EXPECT_NEAR(prev, 0.0, 1e-18 * 1e6);
}
