#include "krff/koopman.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>
#include <sstream>

#include <Eigen/Eigenvalues>

#include "json_util.hpp"

namespace krff {

double default_ridge(const Mat& gram) {
  if (gram.rows() == 0) return 0.0;
  return 1e-8 * gram.trace() / static_cast<double>(gram.rows());
}

namespace {

Mat pinv_solve_symmetric(const Mat& gram, const Mat& rhs) {
  Eigen::SelfAdjointEigenSolver<Mat> es(gram);
  const Vec& ev = es.eigenvalues();
  const double top = ev.cwiseAbs().maxCoeff();
  const double cut = 1e-12 * top;
  Vec inv = Vec::Zero(ev.size());
  for (Eigen::Index i = 0; i < ev.size(); ++i)
    if (ev[i] > cut) inv[i] = 1.0 / ev[i];
  const Mat& Q = es.eigenvectors();
  return Q * inv.asDiagonal() * (Q.transpose() * rhs);
}

}  // namespace

Mat solve_normal_equations(const Mat& gram, const Mat& rhs, std::optional<double> ridge) {
  require(gram.rows() == gram.cols() && gram.rows() == rhs.rows(),
          "solve_normal_equations: gram " + shape_str(gram) + " vs rhs " + shape_str(rhs));
  require(gram.rows() >= 1, "solve_normal_equations: empty system");
  const double lambda = ridge.value_or(default_ridge(gram));
  require(lambda >= 0.0, "solve_normal_equations: ridge must be >= 0");
  if (lambda > 0.0) {
    Mat shifted = gram;
    shifted.diagonal().array() += lambda;
    Eigen::LLT<Mat> llt(shifted);
    if (llt.info() == Eigen::Success) {
      Mat sol = llt.solve(rhs);
      if (sol.allFinite()) return sol;
    }
  }
  if (gram.cwiseAbs().maxCoeff() == 0.0) return Mat::Zero(gram.cols(), rhs.cols());
  return pinv_solve_symmetric(gram, rhs);
}

Mat estimate_koopman(const Mat& PhiX, const Mat& PhiY, std::optional<double> ridge) {
  require(PhiX.rows() == PhiY.rows() && PhiX.cols() == PhiY.cols(),
          "estimate_koopman: PhiX " + shape_str(PhiX) + " vs PhiY " + shape_str(PhiY));
  require(PhiX.cols() >= 1, "estimate_koopman: need at least one feature");
  if (ridge && *ridge == 0.0) {
    if (PhiX.rows() == 0 || PhiX.cwiseAbs().maxCoeff() == 0.0)
      return Mat::Zero(PhiX.cols(), PhiX.cols());
    Eigen::BDCSVD<Mat> svd(PhiX, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const Vec& s = svd.singularValues();
    const double cut = 1e-12 * s[0];
    Vec inv = Vec::Zero(s.size());
    for (Eigen::Index i = 0; i < s.size(); ++i)
      if (s[i] > cut) inv[i] = 1.0 / s[i];
    return svd.matrixV() * inv.asDiagonal() * (svd.matrixU().transpose() * PhiY);
  }
  const Mat gram = PhiX.transpose() * PhiX;
  const Mat rhs = PhiX.transpose() * PhiY;
  return solve_normal_equations(gram, rhs, ridge);
}

GramAccumulator::GramAccumulator(Eigen::Index features, Eigen::Index dim)
    : xx(Mat::Zero(features, features)),
      xy(Mat::Zero(features, features)),
      xs(Mat::Zero(features, dim)) {}

void GramAccumulator::add(const Mat& PhiX, const Mat& PhiY, const Mat& X) {
  require(PhiX.cols() == xx.rows() && PhiY.cols() == xx.rows() && PhiX.rows() == PhiY.rows() &&
              X.rows() == PhiX.rows() && X.cols() == xs.cols(),
          "GramAccumulator::add: shape mismatch");
  xx.noalias() += PhiX.transpose() * PhiX;
  xy.noalias() += PhiX.transpose() * PhiY;
  xs.noalias() += PhiX.transpose() * X;
  rows += PhiX.rows();
}

void GramAccumulator::scale(double factor) {
  xx *= factor;
  xy *= factor;
  xs *= factor;
}

GramAccumulator accumulate(const Dictionary& dict, const SnapshotDataset& data) {
  require(data.pairs() > 0, "accumulate: empty dataset");
  GramAccumulator acc(feature_count(dict), data.dim());
  // Y[t] == X[t+1] for contiguous data; reuse features when that holds.
  Mat phi_x = evaluate(dict, data.X[0]);
  for (std::size_t t = 0; t < data.pairs(); ++t) {
    Mat phi_y = evaluate(dict, data.Y[t]);
    acc.add(phi_x, phi_y, data.X[t]);
    if (t + 1 < data.pairs()) {
      if (data.X[t + 1].rows() == data.Y[t].rows() && data.X[t + 1] == data.Y[t])
        phi_x = std::move(phi_y);
      else
        phi_x = evaluate(dict, data.X[t + 1]);
    }
  }
  return acc;
}

Mat estimate_koopman(const Dictionary& dict, const SnapshotDataset& data,
                     std::optional<double> ridge) {
  const GramAccumulator acc = accumulate(dict, data);
  return solve_normal_equations(acc.xx, acc.xy, ridge);
}

std::vector<Eigen::Index> sort_eigenvalues(const CVec& mu) {
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(mu.size()));
  std::iota(idx.begin(), idx.end(), Eigen::Index{0});
  std::stable_sort(idx.begin(), idx.end(), [&](Eigen::Index a, Eigen::Index b) {
    const cplx x = mu[a], y = mu[b];
    const double ax = std::abs(x), ay = std::abs(y);
    if (ax != ay) return ax > ay;
    if (x.real() != y.real()) return x.real() > y.real();
    return x.imag() < y.imag();
  });
  return idx;
}

namespace {

CMat permute_cols(const CMat& m, const std::vector<Eigen::Index>& order) {
  CMat out(m.rows(), static_cast<Eigen::Index>(order.size()));
  for (std::size_t k = 0; k < order.size(); ++k)
    out.col(static_cast<Eigen::Index>(k)) = m.col(order[k]);
  return out;
}

CVec permute(const CVec& v, const std::vector<Eigen::Index>& order) {
  CVec out(static_cast<Eigen::Index>(order.size()));
  for (std::size_t k = 0; k < order.size(); ++k) out[static_cast<Eigen::Index>(k)] = v[order[k]];
  return out;
}

}  // namespace

Spectrum eig_scaled(const Mat& K) {
  require(K.rows() == K.cols() && K.rows() >= 1, "eig_scaled: K must be square, got " + shape_str(K));
  require(K.allFinite(), "eig_scaled: K has non-finite entries");
  const Eigen::Index M = K.rows();

  Eigen::EigenSolver<Mat> right(K, true);
  Eigen::EigenSolver<Mat> left(K.transpose(), true);
  if (right.info() != Eigen::Success || left.info() != Eigen::Success)
    throw std::runtime_error("eig_scaled: eigenvalue iteration did not converge");

  const auto order = sort_eigenvalues(right.eigenvalues());
  Spectrum s;
  s.mu = permute(right.eigenvalues(), order);
  s.V = permute_cols(right.eigenvectors(), order);

  // K^T u = mu u  <=>  conj(u)^* K = mu conj(u)^*, so w = conj(u) pairs with mu.
  const CVec left_mu = left.eigenvalues();
  const CMat left_vec = left.eigenvectors();
  std::vector<bool> used(static_cast<std::size_t>(M), false);
  s.W.resize(M, M);
  for (Eigen::Index j = 0; j < M; ++j) {
    Eigen::Index best = -1;
    double best_d = std::numeric_limits<double>::infinity();
    for (Eigen::Index k = 0; k < M; ++k) {
      if (used[static_cast<std::size_t>(k)]) continue;
      const double dist = std::abs(left_mu[k] - s.mu[j]);
      if (dist < best_d) {
        best_d = dist;
        best = k;
      }
    }
    used[static_cast<std::size_t>(best)] = true;
    s.W.col(j) = left_vec.col(best).conjugate();
  }

  // Group numerically repeated eigenvalues; they are adjacent after sorting
  // only up to ordering noise, so cluster by explicit comparison.
  s.defective.assign(static_cast<std::size_t>(M), false);
  std::vector<bool> assigned(static_cast<std::size_t>(M), false);
  for (Eigen::Index j = 0; j < M; ++j) {
    if (assigned[static_cast<std::size_t>(j)]) continue;
    std::vector<Eigen::Index> cluster;
    const double tol = 1e-8 * std::max(1.0, std::abs(s.mu[j]));
    for (Eigen::Index k = j; k < M; ++k)
      if (!assigned[static_cast<std::size_t>(k)] && std::abs(s.mu[k] - s.mu[j]) <= tol) {
        cluster.push_back(k);
        assigned[static_cast<std::size_t>(k)] = true;
      }

    const auto n = static_cast<Eigen::Index>(cluster.size());
    CMat Vc(M, n), Wc(M, n);
    for (Eigen::Index c = 0; c < n; ++c) {
      Vc.col(c) = s.V.col(cluster[static_cast<std::size_t>(c)]);
      Wc.col(c) = s.W.col(cluster[static_cast<std::size_t>(c)]).normalized();
    }
    const CMat S = Wc.adjoint() * Vc;
    Eigen::JacobiSVD<CMat> svd(S);
    const double smin = svd.singularValues()[n - 1];
    if (!(smin >= 1e-12)) {
      for (auto k : cluster) {
        s.defective[static_cast<std::size_t>(k)] = true;
        s.W.col(k) = s.W.col(k).normalized();
      }
      continue;
    }
    // Wc' = Wc (S^-1)^*  gives  Wc'^* Vc = I.
    const CMat Wn = Wc * S.inverse().adjoint();
    for (Eigen::Index c = 0; c < n; ++c) s.W.col(cluster[static_cast<std::size_t>(c)]) = Wn.col(c);
  }
  return s;
}

Mat fit_B(const Mat& PhiX, const Mat& X) {
  require(PhiX.rows() == X.rows(), "fit_B: PhiX " + shape_str(PhiX) + " vs X " + shape_str(X));
  require(PhiX.cols() >= 1, "fit_B: need at least one feature");
  Eigen::CompleteOrthogonalDecomposition<Mat> cod(PhiX);
  return cod.solve(X);
}

std::size_t KoopmanModel::excluded_modes() const {
  return static_cast<std::size_t>(std::count(defective.begin(), defective.end(), true));
}

KoopmanModel make_model(Mat K, Mat B) {
  require(K.rows() == B.rows(), "make_model: K " + shape_str(K) + " vs B " + shape_str(B));
  KoopmanModel m;
  Spectrum s = eig_scaled(K);
  m.K = std::move(K);
  m.B = std::move(B);
  m.mu = std::move(s.mu);
  m.V = std::move(s.V);
  m.W = std::move(s.W);
  m.defective = std::move(s.defective);
  return m;
}

KoopmanModel fit_model(const GramAccumulator& acc, std::optional<double> ridge) {
  Mat K = solve_normal_equations(acc.xx, acc.xy, ridge);
  Mat B = solve_normal_equations(acc.xx, acc.xs, ridge);
  return make_model(std::move(K), std::move(B));
}

KoopmanModel fit_model(const Dictionary& dict, const SnapshotDataset& data,
                       std::optional<double> ridge) {
  return fit_model(accumulate(dict, data), ridge);
}

ModePropagator::ModePropagator(const KoopmanModel& model, const Mat& PhiX0) {
  require(PhiX0.cols() == model.features(),
          "reconstruct: features have " + std::to_string(PhiX0.cols()) +
              " columns, model expects " + std::to_string(model.features()));
  phi_ = PhiX0;
  V_ = model.V;
  modes_ = model.W.adjoint() * model.B.cast<cplx>();
  for (Eigen::Index j = 0; j < model.features(); ++j)
    if (model.defective[static_cast<std::size_t>(j)]) modes_.row(j).setZero();
  mu_ = model.mu;
}

Reconstruction ModePropagator::at(int t) const {
  require(t >= 0, "reconstruct: t must be >= 0");
  CVec pw(mu_.size());
  for (Eigen::Index j = 0; j < mu_.size(); ++j) {
    cplx p(1.0, 0.0);
    for (int k = 0; k < t; ++k) p *= mu_[j];
    pw[j] = p;
  }
  const CMat C = V_ * (pw.asDiagonal() * modes_);
  Reconstruction r;
  r.states = phi_ * C.real();
  r.imag_residual = (phi_ * C.imag()).norm() / std::max(1.0, r.states.norm());
  return r;
}

Reconstruction reconstruct(const KoopmanModel& model, const Mat& PhiX0, int t) {
  return ModePropagator(model, PhiX0).at(t);
}

EigenfunctionField eigenfunction_field(const KoopmanModel& model, const Dictionary& dict,
                                       const Mat& grid, Eigen::Index top_j) {
  require(top_j >= 0 && top_j <= model.features(), "eigenfunction_field: top_j exceeds M");
  EigenfunctionField f;
  f.grid = grid;
  f.values = evaluate(dict, grid).cast<cplx>() * model.V.leftCols(top_j);
  f.eigenvalues = model.mu.head(top_j);
  return f;
}

KernelEdmdResult kernel_edmd(const Mat& X, const Mat& Y, double sigma, double regularization,
                             std::ostream* warn) {
  require(X.rows() == Y.rows() && X.cols() == Y.cols(),
          "kernel_edmd: X " + shape_str(X) + " vs Y " + shape_str(Y));
  require(X.rows() >= 1, "kernel_edmd: no data");
  require(sigma > 0.0 && regularization >= 0.0, "kernel_edmd: bad sigma or regularization");
  const Eigen::Index N = X.rows();
  const Mat G = kernel_gram(sigma, X, X);
  const Mat A = kernel_gram(sigma, Y, X);

  double jitter = regularization * static_cast<double>(N);
  if (jitter <= 0.0) jitter = 0.0;
  Mat Kmat;
  for (int attempt = 0;; ++attempt) {
    Mat shifted = G;
    shifted.diagonal().array() += jitter;
    Eigen::LLT<Mat> llt(shifted);
    if (llt.info() == Eigen::Success) {
      Kmat = llt.solve(A);
      if (Kmat.allFinite()) break;
    }
    if (attempt >= 12) throw std::runtime_error("kernel_edmd: Gram matrix could not be regularized");
    const double next = jitter > 0.0 ? jitter * 10.0 : 1e-12 * static_cast<double>(N);
    if (warn)
      *warn << "kernel_edmd: Gram not positive definite with shift " << jitter
            << ", retrying with " << next << "\n";
    jitter = next;
  }

  Eigen::EigenSolver<Mat> es(Kmat, true);
  if (es.info() != Eigen::Success)
    throw std::runtime_error("kernel_edmd: eigenvalue iteration did not converge");
  const auto order = sort_eigenvalues(es.eigenvalues());

  KernelEdmdResult r;
  r.eigenvalues = permute(es.eigenvalues(), order);
  r.coefficients = permute_cols(es.eigenvectors(), order);
  r.values_at_data = G.cast<cplx>() * r.coefficients;
  r.centers = X;
  r.sigma = sigma;
  r.jitter = jitter;
  return r;
}

EigenfunctionField kernel_eigenfunction_field(const KernelEdmdResult& res, const Mat& grid,
                                              Eigen::Index top_j) {
  require(top_j >= 0 && top_j <= res.coefficients.cols(),
          "kernel_eigenfunction_field: top_j exceeds mode count");
  EigenfunctionField f;
  f.grid = grid;
  f.values = kernel_gram(res.sigma, grid, res.centers).cast<cplx>() *
             res.coefficients.leftCols(top_j);
  f.eigenvalues = res.eigenvalues.head(top_j);
  return f;
}

std::optional<Eigen::Index> dominant_nontrivial(
    const CVec& eigenvalues, const std::function<CVec(Eigen::Index)>& column) {
  auto non_constant = [&](Eigen::Index j) {
    const CVec col = column(j);
    const double rms = col.norm();
    if (rms == 0.0) return false;
    const cplx mean = col.mean();
    const double dev = (col.array() - mean).matrix().norm();
    return dev > 0.1 * rms;
  };
  std::vector<bool> tried(static_cast<std::size_t>(eigenvalues.size()), false);
  for (Eigen::Index j = 0; j < eigenvalues.size(); ++j) {
    const cplx m = eigenvalues[j];
    if (std::abs(m.imag()) > 1e-9 * std::max(1.0, std::abs(m))) continue;
    tried[static_cast<std::size_t>(j)] = true;
    if (non_constant(j)) return j;
  }
  for (Eigen::Index j = 0; j < eigenvalues.size(); ++j)
    if (!tried[static_cast<std::size_t>(j)] && non_constant(j)) return j;
  return std::nullopt;
}

std::optional<Eigen::Index> dominant_nontrivial(const CVec& eigenvalues, const CMat& values) {
  require(values.cols() == eigenvalues.size(), "dominant_nontrivial: shape mismatch");
  return dominant_nontrivial(eigenvalues, [&](Eigen::Index j) { return CVec(values.col(j)); });
}

nlohmann::json to_json(const KoopmanModel& model) {
  nlohmann::json j;
  j["convention_version"] = kModelConventionVersion;
  j["convention"] = "row-stacked features: PhiY ~= PhiX K, x ~= phi(x)^T B";
  j["M"] = model.features();
  j["d"] = model.dim();
  j["K"] = detail::mat_rows(model.K);
  j["mu"] = detail::cmat_rows(model.mu);
  j["V"] = detail::cmat_rows(model.V);
  j["W"] = detail::cmat_rows(model.W);
  j["B"] = detail::mat_rows(model.B);
  std::vector<int> flags;
  for (bool b : model.defective) flags.push_back(b ? 1 : 0);
  j["defective"] = flags;
  return j;
}

KoopmanModel model_from_json(const nlohmann::json& j) {
  const int version = j.at("convention_version").get<int>();
  require(version == kModelConventionVersion,
          "model json: unsupported convention_version " + std::to_string(version));
  const auto M = j.at("M").get<Eigen::Index>();
  const auto d = j.at("d").get<Eigen::Index>();
  KoopmanModel m;
  m.K = detail::mat_from_rows(j.at("K"), M, M, "model json");
  m.mu = detail::cmat_from_rows(j.at("mu"), M, 1, "model json");
  m.V = detail::cmat_from_rows(j.at("V"), M, M, "model json");
  m.W = detail::cmat_from_rows(j.at("W"), M, M, "model json");
  m.B = detail::mat_from_rows(j.at("B"), M, d, "model json");
  const auto flags = j.at("defective").get<std::vector<int>>();
  require(static_cast<Eigen::Index>(flags.size()) == M, "model json: defective flag count");
  for (int f : flags) m.defective.push_back(f != 0);
  return m;
}

void write_field_csv(std::ostream& os, const EigenfunctionField& field) {
  const Eigen::Index d = field.grid.cols();
  for (Eigen::Index k = 0; k < d; ++k) os << (k ? "," : "") << "x" << k;
  for (Eigen::Index j = 0; j < field.values.cols(); ++j)
    os << ",re_psi_" << (j + 1) << ",im_psi_" << (j + 1);
  os << "\n";
  os << std::setprecision(17);
  for (Eigen::Index i = 0; i < field.grid.rows(); ++i) {
    for (Eigen::Index k = 0; k < d; ++k) os << (k ? "," : "") << field.grid(i, k);
    for (Eigen::Index j = 0; j < field.values.cols(); ++j)
      os << "," << field.values(i, j).real() << "," << field.values(i, j).imag();
    os << "\n";
  }
}

EigenfunctionField read_field_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw UsageError("field csv: empty input");
  std::vector<std::string> cols;
  {
    std::stringstream ss(line);
    std::string c;
    while (std::getline(ss, c, ',')) cols.push_back(c);
  }
  Eigen::Index d = 0;
  while (d < static_cast<Eigen::Index>(cols.size()) &&
         cols[static_cast<std::size_t>(d)] == "x" + std::to_string(d))
    ++d;
  const auto rest = static_cast<Eigen::Index>(cols.size()) - d;
  require(d > 0 && rest % 2 == 0, "field csv: malformed header");
  const Eigen::Index J = rest / 2;
  for (Eigen::Index j = 0; j < J; ++j)
    require(cols[static_cast<std::size_t>(d + 2 * j)] == "re_psi_" + std::to_string(j + 1) &&
                cols[static_cast<std::size_t>(d + 2 * j + 1)] == "im_psi_" + std::to_string(j + 1),
            "field csv: malformed header");

  std::vector<std::vector<double>> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<double> r;
    std::stringstream ss(line);
    std::string c;
    while (std::getline(ss, c, ',')) r.push_back(std::stod(c));
    require(static_cast<Eigen::Index>(r.size()) == d + 2 * J, "field csv: ragged row");
    rows.push_back(std::move(r));
  }
  EigenfunctionField f;
  const auto G = static_cast<Eigen::Index>(rows.size());
  f.grid.resize(G, d);
  f.values.resize(G, J);
  for (Eigen::Index i = 0; i < G; ++i) {
    const auto& r = rows[static_cast<std::size_t>(i)];
    for (Eigen::Index k = 0; k < d; ++k) f.grid(i, k) = r[static_cast<std::size_t>(k)];
    for (Eigen::Index j = 0; j < J; ++j)
      f.values(i, j) = cplx(r[static_cast<std::size_t>(d + 2 * j)],
                            r[static_cast<std::size_t>(d + 2 * j + 1)]);
  }
  return f;
}

}  // namespace krff
