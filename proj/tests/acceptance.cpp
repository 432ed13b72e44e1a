// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.
// Shared simulations and training runs are charged to every criterion that
// uses them when comparing against the time budgets.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "krff/experiment.hpp"
#include "oracles.hpp"

using namespace krff;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

template <class F>
auto timed(double& acc, F f) {
  const auto t0 = Clock::now();
  if constexpr (std::is_void_v<decltype(f())>) {
    f();
    acc += seconds_since(t0);
  } else {
    auto out = f();
    acc += seconds_since(t0);
    return out;
  }
}

int failures = 0;

void report(int id, const std::string& name, bool ok, double secs, double budget,
            const std::string& detail) {
  const bool in_time = secs < budget;
  const bool pass = ok && in_time;
  if (!pass) ++failures;
  std::printf("%s [%d] %s: %s; %.1f s (budget %.0f s)%s\n", pass ? "PASS" : "FAIL", id, name.c_str(),
              detail.c_str(), secs, budget, in_time ? "" : " over budget");
  std::fflush(stdout);
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

Vec pt(double x, double y) {
  Vec v(2);
  v << x, y;
  return v;
}

std::vector<oracle::Dense> dense_list(const std::vector<Mat>& v) {
  std::vector<oracle::Dense> out;
  for (const Mat& m : v) out.push_back(oracle::from(m));
  return out;
}

Mat linear_A() {
  Mat A(2, 2);
  A << 0.9, 0.1, 0.0, 0.8;
  return A;
}

// 1. Brute-force oracles on small random instances.
void oracle_equivalence() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(101);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const int M = gen::between(rng, 1, 5), N = gen::between(rng, M + 1, 10);
    const Mat PX = gen::uniform(N, M, rng), PY = gen::uniform(N, M, rng);
    const double lambda = std::uniform_real_distribution<double>(0.0, 0.5)(rng);
    worst = std::max(worst, oracle::max_abs_diff(oracle::ridge_ls(oracle::from(PX), oracle::from(PY), lambda),
                                                 estimate_koopman(PX, PY, lambda)));
    worst = std::max(worst, oracle::max_abs_diff(oracle::ridge_ls(oracle::from(PX), oracle::from(PY),
                                                                  default_ridge(PX.transpose() * PX)),
                                                 estimate_koopman(PX, PY)));

    const Mat X = gen::uniform(N, 2, rng);
    worst = std::max(worst, oracle::max_abs_diff(oracle::ridge_ls(oracle::from(PX), oracle::from(X), 0.0),
                                                 fit_B(PX, X)));

    const int T = gen::between(rng, 1, 3);
    const RffDictionary d = rff_init(M, 2, 1.0, 700 + trial);
    const Mat K = gen::uniform(M, M, rng);
    std::vector<Mat> Xs, Ys;
    for (int t = 0; t < T; ++t) {
      Xs.push_back(gen::uniform(N, 2, rng));
      Ys.push_back(gen::uniform(N, 2, rng));
    }
    const LossTerms got = loss(d, K, Xs, Ys, 0.3, 0.7);
    const oracle::LossParts ref =
        oracle::rff_loss(oracle::from(d.omegas), {d.biases.data(), d.biases.data() + d.biases.size()},
                         oracle::from(K), dense_list(Xs), dense_list(Ys));
    worst = std::max({worst, std::abs(got.data_term - ref.data), std::abs(got.k_reg - ref.k_reg),
                      std::abs(got.theta_reg - ref.theta_reg),
                      std::abs(got.total - (ref.data + 0.3 * ref.k_reg + 0.7 * ref.theta_reg))});

    std::vector<Mat> truth, pred;
    for (int t = 0; t < T + 2; ++t) {
      truth.push_back(gen::uniform(N, 2, rng));
      pred.push_back(gen::uniform(N, 2, rng));
    }
    worst = std::max(worst, std::abs(traj_error(truth, pred).e_p -
                                     oracle::traj_error(dense_list(truth), dense_list(pred))));
  }
  report(1, "oracle equivalence", worst < 1e-10, seconds_since(t0), 1.0,
         "max deviation " + fmt(worst) + " over 100 instances");
}

// 2. y = A x with degree-one monomials.
void linear_recovery() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(202);
  SnapshotDataset ds;
  ds.X = {gen::uniform(50, 2, rng)};
  ds.Y = {ds.X[0] * linear_A().transpose()};
  ds.dt = 1.0;
  const Monomial mono{1, 2};
  const KoopmanModel m = fit_model(Dictionary{mono}, ds, 0.0);
  // eig(A) of the upper-triangular A is its diagonal; the constant adds 1
  double spec_err = 0.0;
  for (double target : {1.0, 0.9, 0.8}) {
    double best = 1e300;
    for (Eigen::Index j = 0; j < m.mu.size(); ++j) best = std::min(best, std::abs(m.mu[j] - target));
    spec_err = std::max(spec_err, best);
  }
  const Mat X0 = ds.X[0];
  const Mat P0 = fixed_eval(mono, X0);
  std::vector<Mat> truth, pred;
  Mat At = Mat::Identity(2, 2);
  for (int t = 1; t <= 10; ++t) {
    At = linear_A() * At;
    truth.push_back(X0 * At.transpose());
    pred.push_back(reconstruct(m, P0, t).states);
  }
  const double ep = traj_error(truth, pred).e_p;
  report(2, "exact linear recovery", spec_err < 1e-8 && ep < 1e-6, seconds_since(t0), 1.0,
         "spectrum error " + fmt(spec_err) + ", 10-step e_p " + fmt(ep));
}

// Central differences of a scalar function of the dictionary parameters.
template <class F>
RffGradient fd_theta(const RffDictionary& d, F f, double h) {
  RffGradient g{Mat::Zero(d.features(), d.dim()), Vec::Zero(d.features())};
  for (Eigen::Index m = 0; m < d.features(); ++m) {
    for (Eigen::Index k = 0; k < d.dim(); ++k) {
      RffDictionary p = d, q = d;
      p.omegas(m, k) += h;
      q.omegas(m, k) -= h;
      g.omegas(m, k) = (f(p) - f(q)) / (2 * h);
    }
    RffDictionary p = d, q = d;
    p.biases[m] += h;
    q.biases[m] -= h;
    g.biases[m] = (f(p) - f(q)) / (2 * h);
  }
  return g;
}

double rel(const RffGradient& a, const RffGradient& b) {
  const double diff =
      std::sqrt((a.omegas - b.omegas).squaredNorm() + (a.biases - b.biases).squaredNorm());
  return diff / std::max(std::sqrt(b.omegas.squaredNorm() + b.biases.squaredNorm()), 1e-12);
}

// 3. Feature Jacobian and training-objective gradients.
void gradient_suite() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(303);
  const double h = 1e-6;
  double worst = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const int M = gen::between(rng, 1, 10), N = gen::between(rng, 1, 8), D = gen::between(rng, 1, 3);
    const RffDictionary d = rff_init(M, D, std::uniform_real_distribution<double>(0.5, 2.0)(rng), 900 + trial);
    const Mat X = gen::uniform(N, D, rng, -2.0, 2.0);
    const Mat U = gen::uniform(N, M, rng);
    auto linear = [&](const RffDictionary& e) { return (rff_eval(e, X).array() * U.array()).sum(); };
    worst = std::max(worst, rel(rff_grad(d, X, U), fd_theta(d, linear, h)));

    const Mat K = gen::uniform(M, M, rng);
    const std::vector<Mat> Xs{X};
    const std::vector<Mat> Ys{gen::uniform(N, D, rng, -2.0, 2.0)};
    const DataGradient g = data_gradient(d, K, Xs, Ys, GradientTarget::Surrogate);
    auto surrogate = [&](const RffDictionary& e) { return loss(e, K, Xs, Ys, 0.0, 0.0).surrogate; };
    worst = std::max(worst, rel(g.theta, fd_theta(d, surrogate, h)));
  }
  report(3, "rff gradients", worst < 1e-5, seconds_since(t0), 5.0,
         "max relative error " + fmt(worst) + " over 50 instances");
}

// 4. Induced kernel approaches the Gaussian kernel.
void kernel_convergence() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(404);
  const Mat A = gen::uniform(200, 2, rng);
  const Mat G = kernel_gram(1.0, A, A);
  const std::vector<int> Ms{256, 1024, 4096};
  int good_seeds = 0;
  std::ostringstream gaps;
  for (int seed = 0; seed < 10; ++seed) {
    bool ok = true;
    double prev = 1e300;
    for (int M : Ms) {
      const Mat P = rff_eval(rff_init(M, 2, 1.0, 4000 + seed), A);
      const double gap = (P * P.transpose() - G).cwiseAbs().mean();
      ok = ok && gap < 3.0 / std::sqrt(M) && gap < prev;
      prev = gap;
      if (seed == 0) gaps << (M == Ms.front() ? "" : " ") << fmt(gap);
    }
    if (ok) ++good_seeds;
  }
  report(4, "kernel convergence", good_seeds > 5, seconds_since(t0), 30.0,
         std::to_string(good_seeds) + "/10 seeds below 3/sqrt(M) and decreasing (seed 0 gaps " + gaps.str() +
             ")");
}

// 5. Streaming with frozen parameters reproduces the batch estimate.
void online_equals_batch() {
  const auto t0 = Clock::now();
  SimulationSpec spec;
  spec.params = DoubleGyreParams{};
  spec.initial = sample_grid(pt(0, 0), pt(2, 1), lattice_counts(pt(0, 0), pt(2, 1), 200));
  spec.t1 = 2.0;
  spec.step = 0.1;
  const SnapshotDataset ds = make_snapshots(simulate(spec));
  const RffDictionary d = rff_init(100, 2, 1.0, 5);
  TrainConfig cfg;
  cfg.theta_steps_per_ingest = 0;
  TrainState s = online_init(d);
  for (std::size_t t = 0; t < ds.pairs(); ++t) s = online_ingest(std::move(s), ds.X[t], ds.Y[t], cfg);
  const GramAccumulator acc = accumulate(Dictionary{d}, ds);
  const Mat K = estimate_koopman(Dictionary{d}, ds, effective_ridge(acc.xx, cfg));
  const double diff = (online_model(s, cfg).K - K).cwiseAbs().maxCoeff();
  report(5, "online equals batch", ds.pairs() == 20 && diff < 1e-10, seconds_since(t0), 10.0,
         std::to_string(ds.pairs()) + " pairs, max |K_online - K_batch| " + fmt(diff));
}

ExperimentConfig desk(const std::string& preset, int particles, std::optional<int> epochs, std::uint64_t seed) {
  ExperimentConfig c = load_config(std::string(KRFF_PRESET_DIR) + "/" + preset + ".json");
  Overrides o;
  o.particles = particles;
  o.seed = seed;
  o.epochs = epochs;
  apply_overrides(c, o);
  return c;
}

struct DeskRuns {
  ParticleEnsemble gyre, jet;
  double gyre_sim = 0.0, jet_sim = 0.0;
  std::vector<ExperimentResult> gyre_learned, gyre_gauss, jet_learned, jet_gauss;
  std::vector<ExperimentConfig> gyre_cfg;
  double gyre_learned_s = 0.0, gyre_gauss_s = 0.0, jet_learned_s = 0.0, jet_gauss_s = 0.0;
};

constexpr int kSeeds = 5;

// 6. LT(learned) < LT(Gaussian) on the double gyre and the Bickley jet.
void table_ordering(DeskRuns& R) {
  R.gyre = timed(R.gyre_sim, [] { return load_or_simulate(desk("double_gyre_learned", 2000, 50, 0), std::nullopt); });
  R.jet = timed(R.jet_sim, [] { return load_or_simulate(desk("bickley_learned", 1000, 5, 0), std::nullopt); });
  for (int s = 0; s < kSeeds; ++s) {
    const ExperimentConfig gl = desk("double_gyre_learned", 2000, 50, s);
    R.gyre_cfg.push_back(gl);
    R.gyre_learned.push_back(timed(R.gyre_learned_s, [&] { return execute(gl, R.gyre); }));
    R.gyre_gauss.push_back(
        timed(R.gyre_gauss_s, [&] { return execute(desk("double_gyre_gaussian", 2000, std::nullopt, s), R.gyre); }));
    R.jet_learned.push_back(
        timed(R.jet_learned_s, [&] { return execute(desk("bickley_learned", 1000, 5, s), R.jet); }));
  }
  // Lattice particles and per-pair fits make the Gaussian NT/LT seed-free;
  // the double gyre runs above (one per seed, for their eigenfunction
  // samples) confirm it, so the jet baseline is fitted once.
  R.jet_gauss.push_back(
      timed(R.jet_gauss_s, [&] { return execute(desk("bickley_gaussian", 1000, std::nullopt, 0), R.jet); }));
  bool seed_free = true;
  for (int s = 1; s < kSeeds; ++s)
    seed_free = seed_free && R.gyre_gauss[s].nt_lt->lt.e_p == R.gyre_gauss[0].nt_lt->lt.e_p &&
                R.gyre_gauss[s].nt_lt->nt.e_p == R.gyre_gauss[0].nt_lt->nt.e_p;
  int gyre_wins = 0, jet_wins = 0;
  std::ostringstream detail;
  for (int s = 0; s < kSeeds; ++s) {
    if (R.gyre_learned[s].nt_lt->lt.e_p < R.gyre_gauss[s].nt_lt->lt.e_p) ++gyre_wins;
    if (R.jet_learned[s].nt_lt->lt.e_p < R.jet_gauss[0].nt_lt->lt.e_p) ++jet_wins;
  }
  detail << "double gyre " << gyre_wins << "/5 (seed 0 LT " << fmt(R.gyre_learned[0].nt_lt->lt.e_p) << " vs "
         << fmt(R.gyre_gauss[0].nt_lt->lt.e_p) << "), bickley " << jet_wins << "/5 (seed 0 LT "
         << fmt(R.jet_learned[0].nt_lt->lt.e_p) << " vs " << fmt(R.jet_gauss[0].nt_lt->lt.e_p)
         << "), gaussian seed-free " << (seed_free ? "yes" : "no");
  const double secs =
      R.gyre_sim + R.jet_sim + R.gyre_learned_s + R.gyre_gauss_s + R.jet_learned_s + R.jet_gauss_s;
  report(6, "learned beats gaussian on long-term error", gyre_wins >= 3 && jet_wins >= 3 && seed_free, secs, 600.0,
         detail.str());
}

bool all_finite(const ExperimentResult& r) {
  if (r.eigen.empty() || !r.dominant) return false;
  for (const auto& e : r.eigen)
    if (!std::isfinite(e.e_f)) return false;
  return std::isfinite(r.dominant->error.e_f);
}

// 7. Eigenfunction error protocol.
void eigenfunction_protocol(const DeskRuns& R) {
  double own = 0.0;
  const double toy = timed(own, [] {
    std::mt19937_64 rng(707);
    SnapshotDataset ds;
    ds.X = {gen::uniform(50, 2, rng)};
    ds.Y = {ds.X[0] * linear_A().transpose()};
    ds.dt = 1.0;
    const Monomial mono{1, 2};
    const KoopmanModel m = fit_model(Dictionary{mono}, ds, 0.0);
    const Mat samples = gen::uniform(100, 2, rng);
    double worst = 0.0;
    for (const auto& e : eigfunc_error(m, mono, samples, samples * linear_A().transpose(), 3))
      worst = std::max(worst, e.e_f);
    return worst;
  });
  const ExperimentResult duff = timed(own, [] {
    const ExperimentConfig c = desk("duffing_learned", 400, 5, 0);
    return execute(c, load_or_simulate(c, std::nullopt));
  });
  const bool finite = all_finite(duff) && all_finite(R.gyre_learned[0]) && all_finite(R.gyre_gauss[0]) &&
                      all_finite(R.jet_learned[0]) && all_finite(R.jet_gauss[0]);
  int wins = 0;
  for (int s = 0; s < kSeeds; ++s) {
    const auto& l = R.gyre_learned[s].dominant;
    const auto& g = R.gyre_gauss[s].dominant;
    if (l && g && l->error.relative_e_f <= g->error.relative_e_f) ++wins;
  }
  std::ostringstream detail;
  detail << "linear toy e_f " << fmt(toy) << ", finite on all systems " << (finite ? "yes" : "no")
         << ", double gyre dominant mode learned <= gaussian " << wins << "/5";
  if (R.gyre_learned[0].dominant && R.gyre_gauss[0].dominant)
    detail << " (seed 0 relative e_f " << fmt(R.gyre_learned[0].dominant->error.relative_e_f) << " vs "
           << fmt(R.gyre_gauss[0].dominant->error.relative_e_f) << ")";
  const double secs = own + R.gyre_sim + R.gyre_learned_s + R.gyre_gauss_s;
  report(7, "eigenfunction error", toy < 1e-6 && finite && wins >= 3, secs, 300.0, detail.str());
}

// 8. Learned and kernel dominant eigenfunctions share the gyre partition.
void coherence(const DeskRuns& R) {
  double own = 0.0;
  std::vector<double> agree;
  for (int s = 0; s < kSeeds; ++s) {
    const double a = timed(own, [&] {
      const ExperimentConfig kc = desk("double_gyre_kernel", 2000, std::nullopt, s);
      const ExperimentResult k = execute(kc, R.gyre);
      const ExperimentResult& l = R.gyre_learned[s];
      if (!k.dominant || !l.dominant) return 0.0;
      const auto [lo, hi] = kc.domain();
      const Mat grid = sample_grid(lo, hi, {100, 50});
      const EigenfunctionField kf = kernel_eigenfunction_field(*k.kernel, grid, k.dominant->index + 1);
      const EigenfunctionField lf = eigenfunction_field(*l.model, *l.dict, grid, l.dominant->index + 1);
      return centered_sign_agreement(phase_aligned_real(lf.values, l.dominant->index),
                                     phase_aligned_real(kf.values, k.dominant->index));
    });
    agree.push_back(a);
  }
  std::ostringstream detail;
  detail << "agreement per seed";
  bool ok = true;
  for (double a : agree) {
    detail << " " << fmt(a);
    ok = ok && a > 0.8;
  }
  report(8, "coherence structure", ok, own + R.gyre_sim + R.gyre_learned_s, 300.0, detail.str());
}

// 9. Integrators and incompressibility.
void integrators() {
  const auto t0 = Clock::now();
  const VectorField jet = make_vector_field(BickleyParams{});
  const Mat starts = sample_grid(pt(0.0, -3.0), pt(20.0, 3.0), {10, 5});
  double worst = 0.0;
  for (Eigen::Index i = 0; i < starts.rows(); ++i) {
    const State x0 = starts.row(i).transpose();
    const Trajectory a = integrate_abm(jet, x0, 0.0, 5.0, 0.1);
    const Trajectory b = integrate_rk45(jet, x0, 0.0, 5.0, 0.1);
    worst = std::max(worst, (a.states - b.states).cwiseAbs().maxCoeff());
  }
  const SystemParams gyre = DoubleGyreParams{};
  std::mt19937_64 rng(909);
  std::uniform_real_distribution<double> ux(0.0, 2.0), uy(0.0, 1.0), ut(0.0, 20.0);
  const double h = 1e-6;
  double div = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const double x = ux(rng), y = uy(rng), t = ut(rng);
    const double dudx = (double_gyre_vf(pt(x + h, y), t, gyre)[0] - double_gyre_vf(pt(x - h, y), t, gyre)[0]) / (2 * h);
    const double dvdy = (double_gyre_vf(pt(x, y + h), t, gyre)[1] - double_gyre_vf(pt(x, y - h), t, gyre)[1]) / (2 * h);
    div = std::max(div, std::abs(dudx + dvdy));
  }
  report(9, "integrators", worst < 1e-4 && div < 1e-6, seconds_since(t0), 60.0,
         "rk45 vs abm4 max difference " + fmt(worst) + ", max |div| " + fmt(div));
}

}  // namespace

int main() {
  try {
    oracle_equivalence();
    linear_recovery();
    gradient_suite();
    kernel_convergence();
    online_equals_batch();
    integrators();
    DeskRuns runs;
    table_ordering(runs);
    eigenfunction_protocol(runs);
    coherence(runs);
  } catch (const std::exception& e) {
    std::printf("FAIL acceptance aborted: %s\n", e.what());
    return 1;
  }
  std::printf("%s: %d failing criteria\n", failures ? "FAIL" : "PASS", failures);
  return failures ? 1 : 0;
}
