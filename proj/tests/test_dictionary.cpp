#include <doctest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "krff/dictionary.hpp"
#include "oracles.hpp"

using namespace krff;

namespace {

// Mean |phi(x) . phi(x') - k(x, x')| over the pairs (rows of A, rows of B).
double kernel_gap(const RffDictionary& d, const Mat& A, const Mat& B, double sigma) {
  const Mat pa = rff_eval(d, A), pb = rff_eval(d, B);
  const Mat g = kernel_gram(sigma, A, B);
  double s = 0.0;
  for (Eigen::Index i = 0; i < A.rows(); ++i) s += std::abs(pa.row(i).dot(pb.row(i)) - g(i, i));
  return s / static_cast<double>(A.rows());
}

// Central differences of L(theta) = sum(upstream .* Phi(theta)).
RffGradient fd_grad(const RffDictionary& d, const Mat& X, const Mat& U, double h) {
  auto L = [&](const RffDictionary& e) { return (rff_eval(e, X).array() * U.array()).sum(); };
  RffGradient g{Mat::Zero(d.features(), d.dim()), Vec::Zero(d.features())};
  for (Eigen::Index m = 0; m < d.features(); ++m) {
    for (Eigen::Index k = 0; k < d.dim(); ++k) {
      RffDictionary p = d, q = d;
      p.omegas(m, k) += h;
      q.omegas(m, k) -= h;
      g.omegas(m, k) = (L(p) - L(q)) / (2 * h);
    }
    RffDictionary p = d, q = d;
    p.biases[m] += h;
    q.biases[m] -= h;
    g.biases[m] = (L(p) - L(q)) / (2 * h);
  }
  return g;
}

double rel_err(const RffGradient& a, const RffGradient& b) {
  const double diff =
      std::sqrt((a.omegas - b.omegas).squaredNorm() + (a.biases - b.biases).squaredNorm());
  const double scale = std::sqrt(b.omegas.squaredNorm() + b.biases.squaredNorm());
  return diff / std::max(scale, 1e-12);
}

}  // namespace

TEST_CASE("rff_init shape, bias range and determinism") {
  const RffDictionary a = rff_init(100, 2, 1.0, 17);
  CHECK(a.omegas.rows() == 100);
  CHECK(a.omegas.cols() == 2);
  CHECK(a.biases.size() == 100);
  CHECK(a.biases.minCoeff() >= 0.0);
  CHECK(a.biases.maxCoeff() < 2 * std::numbers::pi);
  const RffDictionary b = rff_init(100, 2, 1.0, 17);
  CHECK(a.omegas == b.omegas);
  CHECK(a.biases == b.biases);
  CHECK(a.omegas != rff_init(100, 2, 1.0, 18).omegas);
  CHECK_THROWS_AS(rff_init(0, 2, 1.0, 0), UsageError);
  CHECK_THROWS_AS(rff_init(4, 2, 0.0, 0), UsageError);
}

TEST_CASE("rff frequencies have variance sigma^-2") {
  for (double sigma : {0.5, 1.0, 2.0}) {
    const RffDictionary d = rff_init(100000, 2, sigma, 3);
    const double mean = d.omegas.mean();
    const double var = (d.omegas.array() - mean).square().mean();
    const double target = 1.0 / (sigma * sigma);
    CHECK(std::abs(var - target) < 0.1 * target);
  }
}

TEST_CASE("rff_eval entries") {
  RffDictionary one;
  one.omegas = Mat::Zero(1, 2);
  one.biases = Vec::Zero(1);
  const Mat phi = rff_eval(one, Mat::Random(5, 2));
  CHECK((phi.array() - std::sqrt(2.0)).abs().maxCoeff() < 1e-15);

  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 20; ++trial) {
    const int M = gen::between(rng, 1, 30), N = gen::between(rng, 1, 10);
    const RffDictionary d = rff_init(M, 2, 0.7, trial);
    const Mat X = gen::uniform(N, 2, rng, -3.0, 3.0);
    const Mat phi = rff_eval(d, X);
    CHECK(phi.cwiseAbs().maxCoeff() <= std::sqrt(2.0 / M) + 1e-15);
    const auto ref = oracle::rff_features(
        oracle::from(d.omegas), std::vector<double>(d.biases.data(), d.biases.data() + M),
        oracle::from(X));
    CHECK(oracle::max_abs_diff(ref, phi) < 1e-13);
    for (Eigen::Index i = 0; i < N; ++i) CHECK(phi.row(i).norm() <= std::sqrt(2.0) + 1e-12);
  }
  CHECK_THROWS_AS(rff_eval(rff_init(3, 2, 1.0, 0), Mat::Zero(4, 3)), UsageError);
}

TEST_CASE("rff inner products approximate the gaussian kernel") {
  std::mt19937_64 rng(8);
  const Mat A = gen::uniform(200, 2, rng), B = gen::uniform(200, 2, rng);
  for (int M : {256, 1024, 4096}) {
    const double gap = kernel_gap(rff_init(M, 2, 1.0, 99), A, B, 1.0);
    CHECK(gap < 3.0 / std::sqrt(M));
  }
}

TEST_CASE("kernel approximation error falls as features double") {
  std::mt19937_64 rng(12);
  const Mat A = gen::uniform(200, 2, rng), B = gen::uniform(200, 2, rng);
  std::vector<double> mean_gap;
  for (int M = 64; M <= 4096; M *= 2) {
    double s = 0.0;
    for (int seed = 0; seed < 10; ++seed) s += kernel_gap(rff_init(M, 2, 1.0, 1000 + seed), A, B, 1.0);
    mean_gap.push_back(s / 10.0);
  }
  int violations = 0;
  for (std::size_t i = 1; i < mean_gap.size(); ++i)
    if (mean_gap[i] >= mean_gap[i - 1]) ++violations;
  CHECK(violations <= 1);
}

TEST_CASE("induced kernel is shift invariant across seeds") {
  std::mt19937_64 rng(4);
  const Mat A = gen::uniform(50, 2, rng), B = gen::uniform(50, 2, rng);
  const Eigen::RowVector2d c(2.5, -1.25);
  const int M = 512;
  double diff = 0.0;
  for (int seed = 0; seed < 20; ++seed) {
    const RffDictionary d = rff_init(M, 2, 1.0, 500 + seed);
    const Mat pa = rff_eval(d, A), pb = rff_eval(d, B);
    const Mat sa = rff_eval(d, A.rowwise() + c), sb = rff_eval(d, B.rowwise() + c);
    for (Eigen::Index i = 0; i < A.rows(); ++i) diff += sa.row(i).dot(sb.row(i)) - pa.row(i).dot(pb.row(i));
  }
  diff /= 20.0 * static_cast<double>(A.rows());
  CHECK(std::abs(diff) < 3.0 / std::sqrt(M));
}

TEST_CASE("rff gradient special cases") {
  const RffDictionary d = rff_init(5, 2, 1.0, 1);
  const Mat X = Mat::Random(4, 2);
  const RffGradient z = rff_grad(d, X, Mat::Zero(4, 5));
  CHECK(z.omegas.norm() == 0.0);
  CHECK(z.biases.norm() == 0.0);

  RffDictionary h;
  h.omegas = Mat::Zero(1, 2);
  h.biases = Vec::Constant(1, std::numbers::pi / 2);
  Mat x(1, 2);
  x << 0.3, -1.7;
  const RffGradient g = rff_grad(h, x, Mat::Ones(1, 1));
  CHECK(g.biases[0] == doctest::Approx(-std::sqrt(2.0)).epsilon(1e-15));

  const RffActivations act = rff_activations(d, X);
  const Mat U = Mat::Random(4, 5);
  const RffGradient a = rff_grad(d, X, U), b = rff_grad(X, act, U);
  CHECK((a.omegas - b.omegas).cwiseAbs().maxCoeff() < 1e-14);
  CHECK((a.biases - b.biases).cwiseAbs().maxCoeff() < 1e-14);
  CHECK_THROWS_AS(rff_grad(d, X, Mat::Zero(3, 5)), UsageError);
}

TEST_CASE("rff gradient matches central differences") {
  std::mt19937_64 rng(2024);
  {
    const RffDictionary d = rff_init(1, 2, 1.0, 5);
    const Mat X = gen::uniform(1, 2, rng);
    const Mat U = gen::uniform(1, 1, rng);
    CHECK(rel_err(rff_grad(d, X, U), fd_grad(d, X, U, 1e-6)) < 1e-6);
  }
  for (int trial = 0; trial < 30; ++trial) {
    const int M = gen::between(rng, 1, 12), N = gen::between(rng, 1, 8), D = gen::between(rng, 1, 3);
    const RffDictionary d = rff_init(M, D, 0.8, 40 + trial);
    const Mat X = gen::uniform(N, D, rng, -2.0, 2.0);
    const Mat U = gen::uniform(N, M, rng);
    CHECK(rel_err(rff_grad(d, X, U), fd_grad(d, X, U, 1e-6)) < 1e-5);
  }
}

TEST_CASE("monomial dictionary") {
  const Monomial m0{0, 2};
  const Mat ones = fixed_eval(m0, Mat::Random(3, 2));
  CHECK(ones.cols() == 1);
  CHECK((ones.array() == 1.0).all());

  Mat x(1, 2);
  x << 2.0, 3.0;
  const Mat v = fixed_eval(Monomial{2, 2}, x);
  REQUIRE(v.cols() == 6);
  const double expect[] = {1, 2, 3, 4, 6, 9};
  for (int k = 0; k < 6; ++k) CHECK(v(0, k) == expect[k]);

  auto binom = [](int n, int k) {
    double r = 1;
    for (int i = 1; i <= k; ++i) r = r * (n - k + i) / i;
    return static_cast<long>(std::lround(r));
  };
  for (int d = 1; d <= 3; ++d)
    for (int p = 0; p <= 5; ++p) {
      CHECK(static_cast<long>(monomial_exponents(d, p).size()) == binom(p + d, d));
      CHECK(feature_count(Dictionary{Monomial{p, d}}) == binom(p + d, d));
    }
  CHECK_THROWS_AS(fixed_eval(Monomial{2, 2}, Mat::Zero(1, 3)), UsageError);
}

TEST_CASE("gaussian grid dictionary") {
  Vec lo(2), hi(2);
  lo << 0, 0;
  hi << 2, 1;
  const GaussianGrid g = gaussian_grid(lo, hi, {3, 2}, 0.4);
  REQUIRE(g.centers.rows() == 6);
  // row-major lattice, first axis fastest
  CHECK(g.centers(1, 0) == 1.0);
  CHECK(g.centers(3, 1) == 1.0);
  const Mat at_centers = fixed_eval(g, g.centers);
  CHECK((at_centers.diagonal().array() == 1.0).all());

  std::mt19937_64 rng(6);
  const Mat X = gen::uniform(7, 2, rng, 0.0, 2.0);
  const Mat phi = fixed_eval(g, X);
  for (Eigen::Index i = 0; i < X.rows(); ++i)
    for (Eigen::Index c = 0; c < 6; ++c) {
      const std::vector<double> a{X(i, 0), X(i, 1)}, b{g.centers(c, 0), g.centers(c, 1)};
      CHECK(std::abs(phi(i, c) - oracle::rbf(a, b, 0.4)) < 1e-15);
    }
}

TEST_CASE("kernel gram") {
  std::mt19937_64 rng(1);
  const Mat A = gen::uniform(6, 2, rng);
  const Mat G = kernel_gram(0.75, A, A);
  CHECK((G.diagonal().array() == 1.0).all());
  CHECK((G - G.transpose()).cwiseAbs().maxCoeff() < 1e-15);

  const double sigma = 0.6;
  Mat p(2, 2);
  p << 0, 0, sigma * std::sqrt(2.0), 0;
  CHECK(kernel_gram(sigma, p, p)(0, 1) == doctest::Approx(std::exp(-1.0)).epsilon(1e-14));

  const Mat B = gen::uniform(6, 2, rng);
  const int M = 10000;
  const RffDictionary d = rff_init(M, 2, 0.75, 77);
  const Mat approx = rff_eval(d, A) * rff_eval(d, B).transpose();
  const double err = (approx - kernel_gram(0.75, A, B)).cwiseAbs().mean();
  CHECK(err < 3.0 / std::sqrt(M));
  CHECK_THROWS_AS(kernel_gram(1.0, A, Mat::Zero(6, 3)), UsageError);
}

TEST_CASE("dictionary json round trip") {
  Vec lo(2), hi(2);
  lo << -2, 0;
  hi << 2, 1;
  const std::vector<Dictionary> dicts{rff_init(7, 2, 1.3, 9), gaussian_grid(lo, hi, {4, 3}, 0.2),
                                      Monomial{3, 2}};
  const Mat X = Mat::Random(5, 2);
  for (const Dictionary& d : dicts) {
    const nlohmann::json j = to_json(d);
    CHECK(j.at("format_version") == kDictionaryFormatVersion);
    CHECK(j.at("type") == dictionary_type(d));
    const Dictionary back = dictionary_from_json(nlohmann::json::parse(j.dump()));
    CHECK(dictionary_type(back) == dictionary_type(d));
    CHECK(evaluate(back, X) == evaluate(d, X));
    CHECK(to_json(back) == j);
  }
  nlohmann::json bad = to_json(dicts[0]);
  bad["format_version"] = 99;
  CHECK_THROWS_AS(dictionary_from_json(bad), UsageError);
  bad = to_json(dicts[0]);
  bad["type"] = "wavelet";
  CHECK_THROWS_AS(dictionary_from_json(bad), UsageError);
}
