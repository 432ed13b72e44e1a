#pragma once

// Observable dictionaries. The learnable one is a random Fourier feature
// map phi(x)_m = sqrt(2/M) cos(x . omega_m + b_m); the fixed baselines are
// Gaussian bumps on a lattice of centers and graded-lex monomials.

#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "krff/types.hpp"

namespace krff {

struct RffDictionary {
  Mat omegas;   // M x d
  Vec biases;   // M
  double sigma = 1.0;       // bandwidth used at initialization
  std::uint64_t seed = 0;

  Eigen::Index features() const { return omegas.rows(); }
  Eigen::Index dim() const { return omegas.cols(); }
};

struct GaussianGrid {
  Mat centers;  // C x d, row-major lattice order
  double sigma = 1.0;
};

struct Monomial {
  int degree = 0;
  int dim = 2;
};

using FixedDictionary = std::variant<GaussianGrid, Monomial>;
using Dictionary = std::variant<RffDictionary, GaussianGrid, Monomial>;

RffDictionary rff_init(Eigen::Index features, Eigen::Index dim, double sigma,
                       std::uint64_t seed);

// N x M features, entry (i,m) = sqrt(2/M) cos(x_i . omega_m + b_m).
Mat rff_eval(const RffDictionary& dict, const Mat& X);

struct RffGradient {
  Mat omegas;  // M x d
  Vec biases;  // M
};

// Gradient of a scalar loss L through the feature map, given dL/dPhi.
RffGradient rff_grad(const RffDictionary& dict, const Mat& X, const Mat& upstream);

// Features and their phase derivative from a single phase evaluation.
struct RffActivations {
  Mat phi;    // N x M
  Mat dphi;   // d phi / d z = -sqrt(2/M) sin(z)
};

RffActivations rff_activations(const RffDictionary& dict, const Mat& X);

// Same as rff_grad with the activations of X precomputed.
RffGradient rff_grad(const Mat& X, const RffActivations& act, const Mat& upstream);

Mat fixed_eval(const FixedDictionary& dict, const Mat& X);

// Gaussian lattice over [lo, hi] with the given per-axis counts.
GaussianGrid gaussian_grid(const Vec& lo, const Vec& hi,
                           const std::vector<int>& counts, double sigma);

// Exponent tuples of every monomial with total degree <= degree, in
// graded-lexicographic order: degree ascending, then first exponent
// descending (1, x, y, x^2, xy, y^2, ...).
std::vector<std::vector<int>> monomial_exponents(int dim, int degree);

// exp(-|a_i - b_j|^2 / (2 sigma^2))
Mat kernel_gram(double sigma, const Mat& A, const Mat& B);

Mat evaluate(const Dictionary& dict, const Mat& X);
Eigen::Index feature_count(const Dictionary& dict);
Eigen::Index input_dim(const Dictionary& dict);
std::string dictionary_type(const Dictionary& dict);

inline constexpr int kDictionaryFormatVersion = 1;

nlohmann::json to_json(const Dictionary& dict);
Dictionary dictionary_from_json(const nlohmann::json& j);

}  // namespace krff
