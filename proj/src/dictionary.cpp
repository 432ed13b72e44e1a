#include "krff/dictionary.hpp"

#include <cmath>
#include <numbers>
#include <random>

#include <json.hpp>

#include "krff/dynamics.hpp"
#include "json_util.hpp"

namespace krff {

RffDictionary rff_init(Eigen::Index features, Eigen::Index dim, double sigma,
                       std::uint64_t seed) {
  require(features >= 1, "rff_init: need at least one feature");
  require(dim >= 1, "rff_init: dimension must be >= 1");
  require(sigma > 0.0 && std::isfinite(sigma), "rff_init: bandwidth must be > 0");

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0 / sigma);
  std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);

  RffDictionary d;
  d.sigma = sigma;
  d.seed = seed;
  d.omegas.resize(features, dim);
  d.biases.resize(features);
  for (Eigen::Index m = 0; m < features; ++m) {
    for (Eigen::Index k = 0; k < dim; ++k) d.omegas(m, k) = normal(rng);
    d.biases[m] = phase(rng);
  }
  return d;
}

namespace {

Mat rff_phase(const RffDictionary& dict, const Mat& X) {
  if (X.cols() != dict.dim())
    throw UsageError("rff: input has " + std::to_string(X.cols()) +
                     " columns, dictionary expects " + std::to_string(dict.dim()));
  Mat z = X * dict.omegas.transpose();
  z.rowwise() += dict.biases.transpose();
  return z;
}

}  // namespace

Mat rff_eval(const RffDictionary& dict, const Mat& X) {
  const double scale = std::sqrt(2.0 / static_cast<double>(dict.features()));
  return scale * rff_phase(dict, X).array().cos().matrix();
}

RffActivations rff_activations(const RffDictionary& dict, const Mat& X) {
  const double scale = std::sqrt(2.0 / static_cast<double>(dict.features()));
  const Mat z = rff_phase(dict, X);
  return {scale * z.array().cos().matrix(), -scale * z.array().sin().matrix()};
}

RffGradient rff_grad(const Mat& X, const RffActivations& act, const Mat& upstream) {
  require(upstream.rows() == act.dphi.rows() && upstream.cols() == act.dphi.cols(),
          "rff_grad: upstream is " + shape_str(upstream) + ", expected " + shape_str(act.dphi));
  const Mat dz = upstream.cwiseProduct(act.dphi);
  RffGradient g;
  g.biases = dz.colwise().sum().transpose();
  g.omegas = dz.transpose() * X;
  return g;
}

RffGradient rff_grad(const RffDictionary& dict, const Mat& X, const Mat& upstream) {
  require(upstream.rows() == X.rows() && upstream.cols() == dict.features(),
          "rff_grad: upstream is " + shape_str(upstream) + ", expected " +
              std::to_string(X.rows()) + "x" + std::to_string(dict.features()));
  const double scale = std::sqrt(2.0 / static_cast<double>(dict.features()));
  // dL/dz_im = upstream_im * (-scale sin z_im)
  const Mat dz = -scale * (upstream.array() * rff_phase(dict, X).array().sin()).matrix();
  RffGradient g;
  g.biases = dz.colwise().sum().transpose();
  g.omegas = dz.transpose() * X;
  return g;
}

std::vector<std::vector<int>> monomial_exponents(int dim, int degree) {
  require(dim >= 1, "monomial: dimension must be >= 1");
  require(degree >= 0, "monomial: degree must be >= 0");
  std::vector<std::vector<int>> out;
  std::vector<int> cur(static_cast<std::size_t>(dim), 0);
  // Enumerate exponents of total degree `total`, first coordinate largest first.
  auto fill = [&](auto&& self, int pos, int remaining) -> void {
    if (pos == dim - 1) {
      cur[static_cast<std::size_t>(pos)] = remaining;
      out.push_back(cur);
      return;
    }
    for (int e = remaining; e >= 0; --e) {
      cur[static_cast<std::size_t>(pos)] = e;
      self(self, pos + 1, remaining - e);
    }
  };
  for (int total = 0; total <= degree; ++total) fill(fill, 0, total);
  return out;
}

Mat kernel_gram(double sigma, const Mat& A, const Mat& B) {
  require(sigma > 0.0, "kernel_gram: sigma must be > 0");
  require(A.cols() == B.cols(), "kernel_gram: dimension mismatch " + shape_str(A) +
                                    " vs " + shape_str(B));
  const Vec a2 = A.rowwise().squaredNorm();
  const Vec b2 = B.rowwise().squaredNorm();
  Mat d2 = -2.0 * A * B.transpose();
  d2.colwise() += a2;
  d2.rowwise() += b2.transpose();
  const double inv = 1.0 / (2.0 * sigma * sigma);
  return (-(d2.array().max(0.0)) * inv).exp().matrix();
}

GaussianGrid gaussian_grid(const Vec& lo, const Vec& hi,
                           const std::vector<int>& counts, double sigma) {
  require(sigma > 0.0, "gaussian_grid: sigma must be > 0");
  return GaussianGrid{sample_grid(lo, hi, counts), sigma};
}

Mat fixed_eval(const FixedDictionary& dict, const Mat& X) {
  return std::visit(
      [&](const auto& d) -> Mat {
        using T = std::decay_t<decltype(d)>;
        if constexpr (std::is_same_v<T, GaussianGrid>) {
          require(d.sigma > 0.0, "gaussian dictionary: sigma must be > 0");
          require(X.cols() == d.centers.cols(),
                  "gaussian dictionary: input has " + std::to_string(X.cols()) +
                      " columns, centers have " + std::to_string(d.centers.cols()));
          // Direct differences keep the exact-center entry at exactly 1.
          Mat out(X.rows(), d.centers.rows());
          const double inv = 1.0 / (2.0 * d.sigma * d.sigma);
          for (Eigen::Index c = 0; c < d.centers.rows(); ++c)
            out.col(c) = (-(X.rowwise() - d.centers.row(c)).rowwise().squaredNorm() * inv)
                             .array()
                             .exp()
                             .matrix();
          return out;
        } else {
          require(X.cols() == d.dim, "monomial dictionary: input has " +
                                         std::to_string(X.cols()) + " columns, expected " +
                                         std::to_string(d.dim));
          const auto exps = monomial_exponents(d.dim, d.degree);
          Mat out(X.rows(), static_cast<Eigen::Index>(exps.size()));
          for (std::size_t c = 0; c < exps.size(); ++c) {
            Eigen::ArrayXd col = Eigen::ArrayXd::Ones(X.rows());
            for (int k = 0; k < d.dim; ++k)
              for (int e = 0; e < exps[c][static_cast<std::size_t>(k)]; ++e)
                col *= X.col(k).array();
            out.col(static_cast<Eigen::Index>(c)) = col.matrix();
          }
          return out;
        }
      },
      dict);
}

Mat evaluate(const Dictionary& dict, const Mat& X) {
  return std::visit(
      [&](const auto& d) -> Mat {
        using T = std::decay_t<decltype(d)>;
        if constexpr (std::is_same_v<T, RffDictionary>)
          return rff_eval(d, X);
        else
          return fixed_eval(FixedDictionary{d}, X);
      },
      dict);
}

Eigen::Index feature_count(const Dictionary& dict) {
  return std::visit(
      [](const auto& d) -> Eigen::Index {
        using T = std::decay_t<decltype(d)>;
        if constexpr (std::is_same_v<T, RffDictionary>)
          return d.features();
        else if constexpr (std::is_same_v<T, GaussianGrid>)
          return d.centers.rows();
        else
          return static_cast<Eigen::Index>(monomial_exponents(d.dim, d.degree).size());
      },
      dict);
}

Eigen::Index input_dim(const Dictionary& dict) {
  return std::visit(
      [](const auto& d) -> Eigen::Index {
        using T = std::decay_t<decltype(d)>;
        if constexpr (std::is_same_v<T, RffDictionary>)
          return d.dim();
        else if constexpr (std::is_same_v<T, GaussianGrid>)
          return d.centers.cols();
        else
          return d.dim;
      },
      dict);
}

std::string dictionary_type(const Dictionary& dict) {
  switch (dict.index()) {
    case 0: return "rff";
    case 1: return "gaussian";
    default: return "monomial";
  }
}

using detail::mat_rows;

nlohmann::json to_json(const Dictionary& dict) {
  nlohmann::json j;
  j["format_version"] = kDictionaryFormatVersion;
  j["type"] = dictionary_type(dict);
  j["d"] = input_dim(dict);
  j["M"] = feature_count(dict);
  std::visit(
      [&](const auto& d) {
        using T = std::decay_t<decltype(d)>;
        if constexpr (std::is_same_v<T, RffDictionary>) {
          j["omegas"] = mat_rows(d.omegas);
          j["biases"] = std::vector<double>(d.biases.data(), d.biases.data() + d.biases.size());
          j["sigma"] = d.sigma;
          j["seed"] = d.seed;
        } else if constexpr (std::is_same_v<T, GaussianGrid>) {
          j["centers"] = mat_rows(d.centers);
          j["sigma"] = d.sigma;
        } else {
          j["degree"] = d.degree;
        }
      },
      dict);
  return j;
}

Dictionary dictionary_from_json(const nlohmann::json& j) {
  const int version = j.at("format_version").get<int>();
  require(version == kDictionaryFormatVersion,
          "dictionary json: unsupported format_version " + std::to_string(version));
  const std::string type = j.at("type").get<std::string>();
  const auto d = j.at("d").get<Eigen::Index>();
  const auto M = j.at("M").get<Eigen::Index>();
  if (type == "rff") {
    RffDictionary r;
    r.omegas = detail::mat_from_rows(j.at("omegas"), M, d, "dictionary json");
    const auto b = j.at("biases").get<std::vector<double>>();
    require(static_cast<Eigen::Index>(b.size()) == M, "dictionary json: bias count mismatch");
    r.biases = Eigen::Map<const Vec>(b.data(), M);
    r.sigma = j.at("sigma").get<double>();
    r.seed = j.at("seed").get<std::uint64_t>();
    return r;
  }
  if (type == "gaussian")
    return GaussianGrid{detail::mat_from_rows(j.at("centers"), M, d, "dictionary json"), j.at("sigma").get<double>()};
  if (type == "monomial") {
    Monomial m{j.at("degree").get<int>(), static_cast<int>(d)};
    require(feature_count(m) == M, "dictionary json: monomial feature count mismatch");
    return m;
  }
  throw UsageError("dictionary json: unknown type '" + type + "'");
}

}  // namespace krff
