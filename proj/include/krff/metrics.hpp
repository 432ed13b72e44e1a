#pragma once

#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "krff/dictionary.hpp"
#include "krff/dynamics.hpp"
#include "krff/koopman.hpp"
#include "krff/types.hpp"

namespace krff {

struct PredictionReport {
  int horizon = 0;
  double e_p = 0.0;
  Vec per_step_errors;      // Frobenius error of each N x d snapshot
  Vec per_particle_rms;     // diagnostics: RMS over steps of |x_i - x_hat_i|
};

// e_p = sqrt((1/T) sum_t |X(t) - X_hat(t)|_F^2)
PredictionReport traj_error(std::span<const Mat> truth, std::span<const Mat> predicted);

struct EigenErrorReport {
  Eigen::Index eigen_index = 0;
  cplx mu;
  double e_f = 0.0;
  double relative_e_f = 0.0;   // e_f / RMS of psi_j over the samples
  Eigen::Index sample_count = 0;
};

// e_f_j = sqrt((1/I) sum_i |psi_j(f(x_i)) - mu_j psi_j(x_i)|^2), with
// `propagated` holding the true one-step images of `samples`.
std::vector<EigenErrorReport> eigfunc_error(const KoopmanModel& model, const Dictionary& dict,
                                            const Mat& samples, const Mat& propagated,
                                            Eigen::Index top_j);

struct EvalOptions {
  int nt = 10;
  int lt = 40;
  int start_stride = 1;   // evaluate every start_stride-th valid start
  int max_start = -1;     // largest start index allowed, -1 = no limit
};

struct NtLtResult {
  PredictionReport nt;
  PredictionReport lt;
  std::vector<int> starts;
  double max_imag_residual = 0.0;
};

// States of the tracked particles by time index: X[0], ..., X[T-1], Y[T-1].
std::vector<Mat> trajectory_states(const SnapshotDataset& data);

using ModelForStart = std::function<const KoopmanModel&(int start)>;

// From each start s the model predicts X(s+1) ... X(s+h) through the
// spectral reconstruction and the errors are aggregated with traj_error.
// Starts are every s with s + max(nt, lt) inside the data, thinned by
// start_stride. The reported e_p is the quadratic mean over starts, which
// keeps e_p == sqrt(mean(per_step_errors^2)).
NtLtResult evaluate_nt_lt(const KoopmanModel& model, const Dictionary& dict,
                          std::span<const Mat> states, const EvalOptions& opt = {});
NtLtResult evaluate_nt_lt(const ModelForStart& model_for, const Dictionary& dict,
                          std::span<const Mat> states, const EvalOptions& opt = {});

// Fraction of points where two real fields share sign, maximized over a
// global sign flip. Points where either field is exactly zero count as
// disagreements.
double sign_agreement(const Vec& a, const Vec& b);

// sign_agreement of the two fields after subtracting each field's mean.
// Near-degenerate eigenvalues close to 1 let a solver return the two-region
// indicator mixed with the constant; centering removes that offset.
double centered_sign_agreement(const Vec& a, const Vec& b);

// Real field with the global phase of a complex eigenfunction removed:
// rotates so that the largest-magnitude value is real and positive.
Vec phase_aligned_real(const CMat& values, Eigen::Index column);

struct TableRow {
  std::string system;
  std::string dictionary;
  double nt = 0.0;
  double lt = 0.0;
  std::string source;   // run directory the row came from (not written)
};

void write_table_csv(std::ostream& os, const std::vector<TableRow>& rows);
std::vector<TableRow> read_table_csv(std::istream& is, const std::string& source = "");

nlohmann::json to_json(const PredictionReport& r);
nlohmann::json to_json(const EigenErrorReport& r);

}  // namespace krff
