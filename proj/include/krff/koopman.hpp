#pragma once

// Finite-dimensional Koopman approximation on a dictionary span.
//
// Conventions: feature matrices are row-stacked, PhiX is N x M with row i
// equal to phi(x_i)^T. The operator K is M x M and satisfies
// PhiY ~= PhiX K, so K = (PhiX^T PhiX + lambda I)^-1 PhiX^T PhiY. With this
// layout an eigenfunction is psi_j(x) = phi(x)^T v_j where K v_j = mu_j v_j,
// and the state is recovered through B (M x d) as x ~= phi(x)^T B.

#include <iosfwd>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "krff/dictionary.hpp"
#include "krff/dynamics.hpp"
#include "krff/types.hpp"

namespace krff {

// Relative ridge used when none is given: 1e-8 * trace(G) / M.
double default_ridge(const Mat& gram);

// Least-squares operator from paired feature matrices. ridge == nullopt
// selects default_ridge; ridge == 0 selects the pseudoinverse with
// singular values below 1e-12 * sigma_max discarded.
Mat estimate_koopman(const Mat& PhiX, const Mat& PhiY,
                     std::optional<double> ridge = std::nullopt);

// Same estimator from accumulated normal-equation blocks G = PhiX^T PhiX
// and rhs = PhiX^T PhiY. ridge == 0 uses an eigenvalue cutoff of
// 1e-12 * lambda_max on G.
Mat solve_normal_equations(const Mat& gram, const Mat& rhs,
                           std::optional<double> ridge = std::nullopt);

// Running sums of the normal-equation blocks over snapshot pairs.
struct GramAccumulator {
  Mat xx;     // sum PhiX^T PhiX
  Mat xy;     // sum PhiX^T PhiY
  Mat xs;     // sum PhiX^T X (for the state-reconstruction fit)
  Eigen::Index rows = 0;

  GramAccumulator() = default;
  GramAccumulator(Eigen::Index features, Eigen::Index dim);

  void add(const Mat& PhiX, const Mat& PhiY, const Mat& X);
  void scale(double factor);
};

GramAccumulator accumulate(const Dictionary& dict, const SnapshotDataset& data);

// Dataset-level estimate: accumulates the Gram blocks pair by pair.
Mat estimate_koopman(const Dictionary& dict, const SnapshotDataset& data,
                     std::optional<double> ridge = std::nullopt);

struct Spectrum {
  CVec mu;                     // sorted, see sort_eigenvalues
  CMat V;                      // right eigenvectors, columns
  CMat W;                      // left eigenvectors, w_j^* K = mu_j w_j^*
  std::vector<bool> defective; // |w_j^* v_j| < 1e-12 before scaling
};

// Descending |mu|, then descending Re(mu), then ascending Im(mu).
std::vector<Eigen::Index> sort_eigenvalues(const CVec& mu);

// Full eigendecomposition with left eigenvectors taken from K^T, paired to
// right eigenvectors by nearest eigenvalue and scaled so that w_j^* v_j = 1.
// Clusters of (numerically) repeated eigenvalues are biorthonormalized as a
// block.
Spectrum eig_scaled(const Mat& K);

// Minimum-norm least-squares solution of PhiX B ~= X.
Mat fit_B(const Mat& PhiX, const Mat& X);

struct KoopmanModel {
  Mat K;
  CVec mu;
  CMat V;
  CMat W;
  Mat B;
  std::vector<bool> defective;

  Eigen::Index features() const { return K.rows(); }
  Eigen::Index dim() const { return B.cols(); }
  std::size_t excluded_modes() const;
};

KoopmanModel make_model(Mat K, Mat B);

// Refit on a whole dataset: K and B both from the accumulated normal
// equations with the same ridge.
KoopmanModel fit_model(const GramAccumulator& acc, std::optional<double> ridge = std::nullopt);
KoopmanModel fit_model(const Dictionary& dict, const SnapshotDataset& data,
                       std::optional<double> ridge = std::nullopt);

struct Reconstruction {
  Mat states;             // N x d
  double imag_residual;   // |Im| / max(|Re|, 1) in Frobenius norm
};

// x_hat_i(t) = Re sum_j mu_j^t (w_j^* B) (phi(x_i)^T v_j), defective modes
// dropped.
Reconstruction reconstruct(const KoopmanModel& model, const Mat& PhiX0, int t);

// Each step forms V diag(mu^t) W^* B (M x d) first, so a step costs
// O(N M d) instead of the N x M x M product PhiX0 V.
class ModePropagator {
 public:
  ModePropagator(const KoopmanModel& model, const Mat& PhiX0);

  Reconstruction at(int t) const;

 private:
  Mat phi_;         // N x M
  CMat V_;          // M x M
  CMat modes_;      // M x d, rows of excluded modes zeroed
  CVec mu_;
};

struct EigenfunctionField {
  Mat grid;          // G x d
  CMat values;       // G x J
  CVec eigenvalues;  // J
};

// Evaluates psi_j = phi^T v_j for the first top_j modes in sorted order.
EigenfunctionField eigenfunction_field(const KoopmanModel& model, const Dictionary& dict,
                                       const Mat& grid, Eigen::Index top_j);

struct KernelEdmdResult {
  CVec eigenvalues;       // sorted
  CMat coefficients;      // N x N, psi_j(x) = sum_i k(x, x_i) alpha_ij
  CMat values_at_data;    // N x N, G alpha
  Mat centers;            // the X data
  double sigma = 1.0;
  double jitter = 0.0;    // diagonal shift actually used
};

// Gaussian-kernel EDMD: eigenpairs of (G + reg N I)^-1 A where
// G_ij = k(x_i, x_j) and A_ij = k(y_i, x_j). When the shifted Gram is not
// numerically positive definite the shift is raised tenfold (with a
// warning on `warn`) until it factorizes.
KernelEdmdResult kernel_edmd(const Mat& X, const Mat& Y, double sigma,
                             double regularization = 1e-8, std::ostream* warn = nullptr);

EigenfunctionField kernel_eigenfunction_field(const KernelEdmdResult& res, const Mat& grid,
                                              Eigen::Index top_j);

// First mode (in the given order) whose eigenvalue is real to 1e-9
// relative and whose values are not nearly constant: RMS deviation from
// the mean above 10% of the RMS value. Falls back to complex modes.
std::optional<Eigen::Index> dominant_nontrivial(const CVec& eigenvalues, const CMat& values);

// Same selection with the field of mode j produced on demand, so that large
// dictionaries never materialize every mode at once.
std::optional<Eigen::Index> dominant_nontrivial(
    const CVec& eigenvalues, const std::function<CVec(Eigen::Index)>& column);

inline constexpr int kModelConventionVersion = 1;

nlohmann::json to_json(const KoopmanModel& model);
KoopmanModel model_from_json(const nlohmann::json& j);

// CSV: x0,...,x{d-1},re_psi_1,im_psi_1,...
void write_field_csv(std::ostream& os, const EigenfunctionField& field);
EigenfunctionField read_field_csv(std::istream& is);

}  // namespace krff
