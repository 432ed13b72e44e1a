#include "krff/learning.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>

namespace krff {

void TrainConfig::validate() const {
  require(lambda1 >= 0.0 && std::isfinite(lambda1), "train: lambda1 must be >= 0");
  require(lambda2 >= 0.0 && std::isfinite(lambda2), "train: lambda2 must be >= 0");
  require(step_size > 0.0 && std::isfinite(step_size), "train: step_size must be > 0");
  require(epochs >= 0, "train: epochs must be >= 0");
  require(minibatch_particles >= 0, "train: minibatch_particles must be >= 0");
  require(!ridge || *ridge >= 0.0, "train: ridge must be >= 0");
  require(refit_interval >= 1, "train: refit_interval must be >= 1");
  require(momentum >= 0.0 && momentum < 1.0, "train: momentum must be in [0, 1)");
  require(theta_steps_per_ingest >= 0, "train: theta_steps_per_ingest must be >= 0");
  require(replay_window >= 1, "train: replay_window must be >= 1");
  require(forgetting > 0.0 && forgetting <= 1.0, "train: forgetting must be in (0, 1]");
}

double theta_l1(const RffDictionary& dict) {
  return dict.omegas.cwiseAbs().sum() + dict.biases.cwiseAbs().sum();
}

namespace {

void check_batch(const RffDictionary& dict, const Mat& K, std::span<const Mat> X,
                 std::span<const Mat> Y) {
  require(X.size() == Y.size(), "loss: X and Y batches differ in length");
  require(K.rows() == dict.features() && K.cols() == dict.features(),
          "loss: K is " + shape_str(K) + ", expected " + std::to_string(dict.features()) +
              " square");
  for (std::size_t t = 0; t < X.size(); ++t)
    require(X[t].rows() == Y[t].rows() && X[t].cols() == dict.dim() &&
                Y[t].cols() == dict.dim(),
            "loss: snapshot pair " + std::to_string(t) + " has inconsistent shape");
}

}  // namespace

LossTerms loss(const RffDictionary& dict, const Mat& K, std::span<const Mat> X,
               std::span<const Mat> Y, double lambda1, double lambda2) {
  check_batch(dict, K, X, Y);
  LossTerms out;
  double sq = 0.0;
  Eigen::Index rows = 0;
  for (std::size_t t = 0; t < X.size(); ++t) {
    const Mat R = rff_eval(dict, X[t]) * K - rff_eval(dict, Y[t]);
    const double r2 = R.squaredNorm();
    out.data_term += std::sqrt(r2);
    sq += r2;
    rows += X[t].rows();
  }
  out.surrogate = rows > 0 ? 0.5 * sq / static_cast<double>(rows) : 0.0;
  out.k_reg = K.norm();
  out.theta_reg = theta_l1(dict);
  out.total = out.data_term + lambda1 * out.k_reg + lambda2 * out.theta_reg;
  return out;
}

LossTerms dataset_loss(const RffDictionary& dict, const Mat& K, const SnapshotDataset& data,
                       double lambda1, double lambda2) {
  return loss(dict, K, data.X, data.Y, lambda1, lambda2);
}

DataGradient data_gradient(const RffDictionary& dict, const Mat& K, std::span<const Mat> X,
                           std::span<const Mat> Y, GradientTarget target) {
  check_batch(dict, K, X, Y);
  const Eigen::Index M = dict.features();
  DataGradient g;
  g.theta.omegas = Mat::Zero(M, dict.dim());
  g.theta.biases = Vec::Zero(M);
  g.K = Mat::Zero(M, M);

  Eigen::Index rows = 0;
  for (const auto& x : X) rows += x.rows();
  if (rows == 0) return g;

  for (std::size_t t = 0; t < X.size(); ++t) {
    const Mat phi_x = rff_eval(dict, X[t]);
    const Mat R = phi_x * K - rff_eval(dict, Y[t]);
    const double r2 = R.squaredNorm();
    double w;  // d objective / d R = w * R
    if (target == GradientTarget::Surrogate) {
      w = 1.0 / static_cast<double>(rows);
      g.value += 0.5 * r2 * w;
    } else {
      const double r = std::sqrt(r2);
      g.value += r;
      if (r == 0.0) continue;
      w = 1.0 / r;
    }
    const Mat up_x = w * (R * K.transpose());
    const Mat up_y = -w * R;
    const RffGradient gx = rff_grad(dict, X[t], up_x);
    const RffGradient gy = rff_grad(dict, Y[t], up_y);
    g.theta.omegas += gx.omegas + gy.omegas;
    g.theta.biases += gx.biases + gy.biases;
    g.K.noalias() += w * (phi_x.transpose() * R);
  }
  return g;
}

void add_l1_subgradient(RffGradient& grad, const RffDictionary& dict, double lambda2) {
  if (lambda2 == 0.0) return;
  auto sgn = [](double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); };
  grad.omegas += lambda2 * dict.omegas.unaryExpr(sgn);
  grad.biases += lambda2 * dict.biases.unaryExpr(sgn);
}

void ThetaOptimizer::step(RffDictionary& dict, const RffGradient& grad, const TrainConfig& cfg) {
  const double eta = cfg.step_size;
  switch (cfg.optimizer) {
    case Optimizer::Sgd:
      dict.omegas -= eta * grad.omegas;
      dict.biases -= eta * grad.biases;
      return;
    case Optimizer::Momentum:
      if (m_omega_.size() == 0) {
        m_omega_ = Mat::Zero(grad.omegas.rows(), grad.omegas.cols());
        m_bias_ = Vec::Zero(grad.biases.size());
      }
      m_omega_ = cfg.momentum * m_omega_ + grad.omegas;
      m_bias_ = cfg.momentum * m_bias_ + grad.biases;
      dict.omegas -= eta * m_omega_;
      dict.biases -= eta * m_bias_;
      return;
    case Optimizer::Adam: {
      constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
      if (m_omega_.size() == 0) {
        m_omega_ = v_omega_ = Mat::Zero(grad.omegas.rows(), grad.omegas.cols());
        m_bias_ = v_bias_ = Vec::Zero(grad.biases.size());
      }
      ++t_;
      m_omega_ = b1 * m_omega_ + (1 - b1) * grad.omegas;
      v_omega_ = b2 * v_omega_ + (1 - b2) * grad.omegas.cwiseAbs2();
      m_bias_ = b1 * m_bias_ + (1 - b1) * grad.biases;
      v_bias_ = b2 * v_bias_ + (1 - b2) * grad.biases.cwiseAbs2();
      const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
      const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
      dict.omegas.array() -=
          eta * (m_omega_.array() / c1) / ((v_omega_.array() / c2).sqrt() + eps);
      dict.biases.array() -=
          eta * (m_bias_.array() / c1) / ((v_bias_.array() / c2).sqrt() + eps);
      return;
    }
  }
}

double effective_ridge(const Mat& gram, const TrainConfig& cfg) {
  return cfg.ridge.value_or(default_ridge(gram)) + cfg.lambda1;
}

namespace {

double elapsed_ms(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start)
      .count();
}

Mat select_rows(const Mat& m, const std::vector<Eigen::Index>& rows) {
  Mat out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(rows[i]);
  return out;
}

bool finite_dict(const RffDictionary& d) {
  return d.omegas.allFinite() && d.biases.allFinite();
}

struct PairEval {
  LossTerms terms;
  RffGradient theta;   // surrogate gradient, no L1 term
  Mat K;               // surrogate gradient for K, only when requested
};

// Loss and surrogate gradient of one snapshot pair, sharing the features
// between both (matches loss() and data_gradient() on a single pair).
PairEval eval_pair(const RffDictionary& dict, const Mat& K, const Mat& X,
                   const RffActivations& ax, const Mat& Y, const RffActivations& ay,
                   const TrainConfig& cfg, bool k_gradient) {
  PairEval e;
  const Mat R = ax.phi * K - ay.phi;
  const double r2 = R.squaredNorm();
  const double w = 1.0 / static_cast<double>(X.rows());
  e.terms.data_term = std::sqrt(r2);
  e.terms.surrogate = 0.5 * r2 * w;
  e.terms.k_reg = K.norm();
  e.terms.theta_reg = theta_l1(dict);
  e.terms.total = e.terms.data_term + cfg.lambda1 * e.terms.k_reg + cfg.lambda2 * e.terms.theta_reg;
  const RffGradient gx = rff_grad(X, ax, w * (R * K.transpose()));
  const RffGradient gy = rff_grad(Y, ay, -w * R);
  e.theta.omegas = gx.omegas + gy.omegas;
  e.theta.biases = gx.biases + gy.biases;
  if (k_gradient) e.K = w * (ax.phi.transpose() * R);
  return e;
}

LossRecord make_record(long step, const LossTerms& lt, double wall_ms) {
  return {step, lt.data_term, lt.k_reg, lt.theta_reg, lt.total, lt.surrogate, wall_ms};
}

}  // namespace

FitResult fit(const SnapshotDataset& data, RffDictionary dict, const TrainConfig& cfg,
              const LossObserver& observer, const StepHook& on_step) {
  cfg.validate();
  require(data.pairs() > 0 && data.particles() > 0, "fit: empty dataset");
  require(data.dim() == dict.dim(), "fit: dataset dimension does not match the dictionary");

  const auto start = std::chrono::steady_clock::now();
  std::mt19937_64 rng(cfg.seed);
  const Eigen::Index n_particles = data.particles();
  const Eigen::Index batch =
      cfg.minibatch_particles > 0 ? std::min<Eigen::Index>(cfg.minibatch_particles, n_particles)
                                  : n_particles;
  std::vector<Eigen::Index> particle_ids(static_cast<std::size_t>(n_particles));
  std::iota(particle_ids.begin(), particle_ids.end(), Eigen::Index{0});
  std::vector<std::size_t> pair_order(data.pairs());
  std::iota(pair_order.begin(), pair_order.end(), std::size_t{0});

  FitResult out;
  ThetaOptimizer opt;
  RffDictionary last_good = dict;
  Mat K;
  long step = 0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(pair_order.begin(), pair_order.end(), rng);
    for (std::size_t t : pair_order) {
      Mat Xb, Yb;
      if (batch == n_particles) {
        Xb = data.X[t];
        Yb = data.Y[t];
      } else {
        // Partial Fisher-Yates: the first `batch` ids form the subset.
        for (Eigen::Index i = 0; i < batch; ++i) {
          std::uniform_int_distribution<Eigen::Index> pick(i, n_particles - 1);
          std::swap(particle_ids[static_cast<std::size_t>(i)],
                    particle_ids[static_cast<std::size_t>(pick(rng))]);
        }
        std::vector<Eigen::Index> rows(particle_ids.begin(), particle_ids.begin() + batch);
        Xb = select_rows(data.X[t], rows);
        Yb = select_rows(data.Y[t], rows);
      }

      const RffActivations ax = rff_activations(dict, Xb);
      const RffActivations ay = rff_activations(dict, Yb);
      if (!ax.phi.allFinite() || !ay.phi.allFinite())
        throw TrainingAborted("fit: non-finite features at step " + std::to_string(step) +
                                  " (pair " + std::to_string(t) + ")",
                              last_good, out.history);
      const bool need_k = K.size() == 0 ||
                          (cfg.k_mode == KMode::ClosedForm && step % cfg.refit_interval == 0);
      if (need_k) {
        const Mat gram = ax.phi.transpose() * ax.phi;
        K = solve_normal_equations(gram, ax.phi.transpose() * ay.phi, effective_ridge(gram, cfg));
      }

      PairEval e = eval_pair(dict, K, Xb, ax, Yb, ay, cfg, cfg.k_mode == KMode::FreeVariable);
      const LossRecord rec = make_record(step, e.terms, elapsed_ms(start));
      if (!std::isfinite(rec.total) || !e.theta.omegas.allFinite() || !e.theta.biases.allFinite())
        throw TrainingAborted("fit: non-finite loss at step " + std::to_string(step), last_good,
                              out.history);
      out.history.push_back(rec);
      if (observer) observer(rec);

      last_good = dict;
      add_l1_subgradient(e.theta, dict, cfg.lambda2);
      opt.step(dict, e.theta, cfg);
      if (cfg.k_mode == KMode::FreeVariable) K -= cfg.step_size * (e.K + cfg.lambda1 * K);
      if (!finite_dict(dict))
        throw TrainingAborted("fit: parameters became non-finite at step " + std::to_string(step),
                              last_good, out.history);
      ++step;
      if (on_step) on_step(step, dict);
    }
  }

  const GramAccumulator acc = accumulate(dict, data);
  out.model = fit_model(acc, effective_ridge(acc.xx, cfg));
  out.dict = std::move(dict);
  return out;
}

// ---------------------------------------------------------------------------

TrainState online_init(RffDictionary dict) {
  TrainState s;
  const Eigen::Index M = dict.features();
  s.grams = GramAccumulator(M, dict.dim());
  s.K = Mat::Zero(M, M);
  s.dict = std::move(dict);
  return s;
}

void refresh_grams(TrainState& state, const TrainConfig& cfg) {
  GramAccumulator acc(state.dict.features(), state.dict.dim());
  for (const auto& [X, Y] : state.replay) {
    acc.scale(cfg.forgetting);
    acc.add(rff_eval(state.dict, X), rff_eval(state.dict, Y), X);
  }
  state.grams = std::move(acc);
  state.stale = false;
}

TrainState online_ingest(TrainState state, const Mat& Xnew, const Mat& Ynew,
                         const TrainConfig& cfg) {
  cfg.validate();
  require(Xnew.rows() == Ynew.rows() && Xnew.cols() == Ynew.cols(),
          "online_ingest: X " + shape_str(Xnew) + " vs Y " + shape_str(Ynew));
  require(Xnew.cols() == state.dict.dim(), "online_ingest: state dimension mismatch");
  if (Xnew.rows() == 0) return state;

  if (state.stale) refresh_grams(state, cfg);

  RffActivations ax = rff_activations(state.dict, Xnew);
  RffActivations ay = rff_activations(state.dict, Ynew);
  if (!ax.phi.allFinite() || !ay.phi.allFinite())
    throw TrainingAborted("online_ingest: non-finite features", state.dict, state.history);
  if (cfg.forgetting != 1.0) state.grams.scale(cfg.forgetting);
  state.grams.add(ax.phi, ay.phi, Xnew);
  state.replay.emplace_back(Xnew, Ynew);
  while (static_cast<int>(state.replay.size()) > cfg.replay_window) state.replay.pop_front();
  state.samples_seen += Xnew.rows();
  state.K = solve_normal_equations(state.grams.xx, state.grams.xy,
                                   effective_ridge(state.grams.xx, cfg));

  for (int k = 0; k < cfg.theta_steps_per_ingest; ++k) {
    if (k > 0) {
      ax = rff_activations(state.dict, Xnew);
      ay = rff_activations(state.dict, Ynew);
    }
    PairEval e = eval_pair(state.dict, state.K, Xnew, ax, Ynew, ay, cfg, false);
    if (!std::isfinite(e.terms.total))
      throw TrainingAborted("online_ingest: non-finite loss", state.dict, state.history);
    state.history.push_back(make_record(state.step, e.terms, 0.0));
    add_l1_subgradient(e.theta, state.dict, cfg.lambda2);
    state.optimizer.step(state.dict, e.theta, cfg);
    state.stale = true;
    ++state.step;
  }
  return state;
}

KoopmanModel online_model(const TrainState& state, const TrainConfig& cfg) {
  require(state.grams.rows > 0, "online_model: no data ingested");
  if (state.stale) {
    TrainState fresh = state;
    refresh_grams(fresh, cfg);
    return fit_model(fresh.grams, effective_ridge(fresh.grams.xx, cfg));
  }
  return fit_model(state.grams, effective_ridge(state.grams.xx, cfg));
}

}  // namespace krff
