#include "krff/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>

#include "json_util.hpp"

namespace krff {

PredictionReport traj_error(std::span<const Mat> truth, std::span<const Mat> predicted) {
  require(!truth.empty(), "traj_error: empty trajectory");
  require(truth.size() == predicted.size(), "traj_error: trajectories differ in length");
  const Eigen::Index n = truth.front().rows();
  PredictionReport r;
  r.horizon = static_cast<int>(truth.size());
  r.per_step_errors.resize(r.horizon);
  r.per_particle_rms = Vec::Zero(n);
  double acc = 0.0;
  for (std::size_t t = 0; t < truth.size(); ++t) {
    require(truth[t].rows() == predicted[t].rows() && truth[t].cols() == predicted[t].cols() &&
                truth[t].rows() == n,
            "traj_error: snapshot " + std::to_string(t) + " shape mismatch");
    const Mat diff = truth[t] - predicted[t];
    const double e2 = diff.squaredNorm();
    r.per_step_errors[static_cast<Eigen::Index>(t)] = std::sqrt(e2);
    r.per_particle_rms += diff.rowwise().squaredNorm();
    acc += e2;
  }
  const double T = static_cast<double>(truth.size());
  r.e_p = std::sqrt(acc / T);
  r.per_particle_rms = (r.per_particle_rms / T).cwiseSqrt();
  return r;
}

std::vector<EigenErrorReport> eigfunc_error(const KoopmanModel& model, const Dictionary& dict,
                                            const Mat& samples, const Mat& propagated,
                                            Eigen::Index top_j) {
  require(samples.rows() == propagated.rows() && samples.cols() == propagated.cols(),
          "eigfunc_error: samples " + shape_str(samples) + " vs propagated " +
              shape_str(propagated));
  require(samples.rows() > 0, "eigfunc_error: no samples");
  require(top_j >= 0 && top_j <= model.features(), "eigfunc_error: top_j exceeds M");
  const CMat Vj = model.V.leftCols(top_j);
  const CMat psi_x = evaluate(dict, samples).cast<cplx>() * Vj;
  const CMat psi_y = evaluate(dict, propagated).cast<cplx>() * Vj;
  const double I = static_cast<double>(samples.rows());
  std::vector<EigenErrorReport> out;
  for (Eigen::Index j = 0; j < top_j; ++j) {
    EigenErrorReport e;
    e.eigen_index = j;
    e.mu = model.mu[j];
    e.sample_count = samples.rows();
    e.e_f = std::sqrt((psi_y.col(j) - model.mu[j] * psi_x.col(j)).squaredNorm() / I);
    const double rms = std::sqrt(psi_x.col(j).squaredNorm() / I);
    e.relative_e_f = rms > 0.0 ? e.e_f / rms : std::numeric_limits<double>::infinity();
    out.push_back(e);
  }
  return out;
}

std::vector<Mat> trajectory_states(const SnapshotDataset& data) {
  require(data.pairs() > 0, "trajectory_states: empty dataset");
  std::vector<Mat> s(data.X.begin(), data.X.end());
  s.push_back(data.Y.back());
  return s;
}

NtLtResult evaluate_nt_lt(const ModelForStart& model_for, const Dictionary& dict,
                          std::span<const Mat> states, const EvalOptions& opt) {
  require(opt.nt >= 1 && opt.lt >= 1, "evaluate_nt_lt: horizons must be >= 1");
  require(opt.start_stride >= 1, "evaluate_nt_lt: start_stride must be >= 1");
  const int H = std::max(opt.nt, opt.lt);
  int last_start = static_cast<int>(states.size()) - 1 - H;
  if (opt.max_start >= 0) last_start = std::min(last_start, opt.max_start);
  if (last_start < 0)
    throw UsageError("evaluate_nt_lt: " + std::to_string(states.size()) +
                     " time points are too few for horizon " + std::to_string(H));

  NtLtResult res;
  for (int s = 0; s <= last_start; s += opt.start_stride) res.starts.push_back(s);

  const Eigen::Index n = states.front().rows();
  Vec nt_sq = Vec::Zero(opt.nt), lt_sq = Vec::Zero(opt.lt);
  Vec nt_part = Vec::Zero(n), lt_part = Vec::Zero(n);
  for (int s : res.starts) {
    const KoopmanModel& model = model_for(s);
    const ModePropagator prop(model, evaluate(dict, states[static_cast<std::size_t>(s)]));
    std::vector<Mat> truth, pred;
    for (int k = 1; k <= H; ++k) {
      Reconstruction r = prop.at(k);
      res.max_imag_residual = std::max(res.max_imag_residual, r.imag_residual);
      truth.push_back(states[static_cast<std::size_t>(s + k)]);
      pred.push_back(std::move(r.states));
    }
    const auto nt = traj_error(std::span<const Mat>(truth).first(static_cast<std::size_t>(opt.nt)),
                               std::span<const Mat>(pred).first(static_cast<std::size_t>(opt.nt)));
    const auto lt = traj_error(std::span<const Mat>(truth).first(static_cast<std::size_t>(opt.lt)),
                               std::span<const Mat>(pred).first(static_cast<std::size_t>(opt.lt)));
    nt_sq += nt.per_step_errors.cwiseAbs2();
    lt_sq += lt.per_step_errors.cwiseAbs2();
    nt_part += nt.per_particle_rms.cwiseAbs2();
    lt_part += lt.per_particle_rms.cwiseAbs2();
  }
  const double S = static_cast<double>(res.starts.size());
  auto finish = [&](int h, const Vec& sq, const Vec& part) {
    PredictionReport r;
    r.horizon = h;
    r.per_step_errors = (sq / S).cwiseSqrt();
    r.per_particle_rms = (part / S).cwiseSqrt();
    r.e_p = std::sqrt(r.per_step_errors.squaredNorm() / static_cast<double>(h));
    return r;
  };
  res.nt = finish(opt.nt, nt_sq, nt_part);
  res.lt = finish(opt.lt, lt_sq, lt_part);
  return res;
}

NtLtResult evaluate_nt_lt(const KoopmanModel& model, const Dictionary& dict,
                          std::span<const Mat> states, const EvalOptions& opt) {
  return evaluate_nt_lt([&](int) -> const KoopmanModel& { return model; }, dict, states, opt);
}

double sign_agreement(const Vec& a, const Vec& b) {
  require(a.size() == b.size() && a.size() > 0, "sign_agreement: size mismatch");
  Eigen::Index same = 0, opposite = 0;
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    const double p = a[i] * b[i];
    if (p > 0.0) ++same;
    else if (p < 0.0) ++opposite;
  }
  return static_cast<double>(std::max(same, opposite)) / static_cast<double>(a.size());
}

double centered_sign_agreement(const Vec& a, const Vec& b) {
  require(a.size() == b.size() && a.size() > 0, "sign_agreement: size mismatch");
  return sign_agreement((a.array() - a.mean()).matrix(), (b.array() - b.mean()).matrix());
}

Vec phase_aligned_real(const CMat& values, Eigen::Index column) {
  require(column >= 0 && column < values.cols(), "phase_aligned_real: bad column");
  const auto col = values.col(column);
  Eigen::Index imax = 0;
  col.cwiseAbs().maxCoeff(&imax);
  const cplx ref = col[imax];
  const cplx rot = std::abs(ref) > 0.0 ? std::conj(ref) / std::abs(ref) : cplx(1.0, 0.0);
  return (col * rot).real();
}

void write_table_csv(std::ostream& os, const std::vector<TableRow>& rows) {
  os << "system,dictionary,nt,lt\n" << std::setprecision(17);
  for (const auto& r : rows) os << r.system << "," << r.dictionary << "," << r.nt << "," << r.lt << "\n";
}

std::vector<TableRow> read_table_csv(std::istream& is, const std::string& source) {
  std::string line;
  if (!std::getline(is, line) || line != "system,dictionary,nt,lt")
    throw UsageError("results csv" + (source.empty() ? "" : " in " + source) +
                     ": missing header 'system,dictionary,nt,lt'");
  std::vector<TableRow> rows;
  int lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::stringstream ss(line);
    TableRow r;
    std::string nt, lt;
    if (!std::getline(ss, r.system, ',') || !std::getline(ss, r.dictionary, ',') ||
        !std::getline(ss, nt, ',') || !std::getline(ss, lt, ','))
      throw UsageError("results csv line " + std::to_string(lineno) + ": expected 4 fields");
    r.nt = std::stod(nt);
    r.lt = std::stod(lt);
    r.source = source;
    rows.push_back(std::move(r));
  }
  return rows;
}

nlohmann::json to_json(const PredictionReport& r) {
  return {{"horizon", r.horizon},
          {"e_p", r.e_p},
          {"per_step_errors", detail::vec_list(r.per_step_errors)}};
}

nlohmann::json to_json(const EigenErrorReport& r) {
  return {{"eigen_index", r.eigen_index},
          {"mu", {r.mu.real(), r.mu.imag()}},
          {"e_f", r.e_f},
          {"relative_e_f", r.relative_e_f},
          {"sample_count", r.sample_count}};
}

}  // namespace krff
