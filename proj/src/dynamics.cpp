#include "krff/dynamics.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <random>
#include <sstream>

namespace krff {

namespace {

template <class P>
const P& expect(const SystemParams& p, const char* fn) {
  if (const auto* q = std::get_if<P>(&p)) return *q;
  throw UsageError(std::string(fn) + ": wrong system parameter variant");
}

void require_2d(const State& s, const char* fn) {
  if (s.size() != 2)
    throw UsageError(std::string(fn) + ": expected a 2-d state, got " +
                     std::to_string(s.size()));
}

double sech2(double z) {
  const double c = std::cosh(z);
  return 1.0 / (c * c);
}

}  // namespace

SystemKind kind_of(const SystemParams& p) {
  return static_cast<SystemKind>(p.index());
}

std::string system_name(SystemKind k) {
  switch (k) {
    case SystemKind::Duffing: return "duffing";
    case SystemKind::DoubleGyre: return "double_gyre";
    case SystemKind::Bickley: return "bickley";
  }
  return "unknown";
}

SystemKind parse_system(const std::string& name) {
  if (name == "duffing") return SystemKind::Duffing;
  if (name == "double_gyre") return SystemKind::DoubleGyre;
  if (name == "bickley") return SystemKind::Bickley;
  throw UsageError("unknown system '" + name +
                   "' (expected duffing, double_gyre or bickley)");
}

SystemParams default_params(SystemKind k) {
  switch (k) {
    case SystemKind::Duffing: return DuffingParams{};
    case SystemKind::DoubleGyre: return DoubleGyreParams{};
    case SystemKind::Bickley: return BickleyParams{};
  }
  throw UsageError("unknown system kind");
}

bool params_finite(const SystemParams& p) {
  return std::visit(
      [](const auto& q) {
        // Every params struct is a flat aggregate of doubles.
        const auto* first = reinterpret_cast<const double*>(&q);
        const std::size_t n = sizeof(q) / sizeof(double);
        return std::all_of(first, first + n,
                           [](double v) { return std::isfinite(v); });
      },
      p);
}

State duffing_vf(const State& s, const SystemParams& p) {
  const auto& q = expect<DuffingParams>(p, "duffing_vf");
  require_2d(s, "duffing_vf");
  const double x = s[0], y = s[1];
  State out(2);
  out << y, -q.delta * y - x * (q.beta + q.alpha * x * x);
  return out;
}

State double_gyre_vf(const State& s, double t, const SystemParams& p) {
  const auto& q = expect<DoubleGyreParams>(p, "double_gyre_vf");
  require_2d(s, "double_gyre_vf");
  constexpr double pi = std::numbers::pi;
  const double x = s[0], y = s[1];
  const double st = q.epsilon * std::sin(q.omega * t);
  const double f = st * x * x + (1.0 - 2.0 * st) * x;
  const double dfdx = 2.0 * st * x + (1.0 - 2.0 * st);
  State out(2);
  out << -pi * q.amplitude * std::sin(pi * f) * std::cos(pi * y),
      pi * q.amplitude * std::cos(pi * f) * std::sin(pi * y) * dfdx;
  return out;
}

double bickley_stream(double x, double y, double t, const BickleyParams& p) {
  const double eta = y / p.L0;
  const double wave = p.eps1 * std::cos(p.k1 * (x - p.c1 * t)) +
                      p.eps2 * std::cos(p.k2 * (x - p.c2 * t)) +
                      p.eps3 * std::cos(p.k3 * (x - p.c3 * t));
  return -p.U0 * p.L0 * std::tanh(eta) + p.U0 * p.L0 * sech2(eta) * wave;
}

// Hamiltonian convention: xdot = -dpsi/dy, ydot = dpsi/dx.
State bickley_vf(const State& s, double t, const SystemParams& p) {
  const auto& q = expect<BickleyParams>(p, "bickley_vf");
  require_2d(s, "bickley_vf");
  const double x = s[0], y = s[1];
  const double eta = y / q.L0;
  const double sh2 = sech2(eta);
  const double th = std::tanh(eta);

  const double ph1 = q.k1 * (x - q.c1 * t);
  const double ph2 = q.k2 * (x - q.c2 * t);
  const double ph3 = q.k3 * (x - q.c3 * t);
  const double wave = q.eps1 * std::cos(ph1) + q.eps2 * std::cos(ph2) +
                      q.eps3 * std::cos(ph3);
  const double dwave_dx = -(q.eps1 * q.k1 * std::sin(ph1) +
                            q.eps2 * q.k2 * std::sin(ph2) +
                            q.eps3 * q.k3 * std::sin(ph3));

  const double dpsi_dy = -q.U0 * sh2 - 2.0 * q.U0 * sh2 * th * wave;
  const double dpsi_dx = q.U0 * q.L0 * sh2 * dwave_dx;

  State out(2);
  out << -dpsi_dy, dpsi_dx;
  return out;
}

VectorField make_vector_field(const SystemParams& p) {
  switch (kind_of(p)) {
    case SystemKind::Duffing:
      return [p](double, const State& x) { return duffing_vf(x, p); };
    case SystemKind::DoubleGyre:
      return [p](double t, const State& x) { return double_gyre_vf(x, t, p); };
    case SystemKind::Bickley:
      return [p](double t, const State& x) { return bickley_vf(x, t, p); };
  }
  throw UsageError("unknown system kind");
}

Vec time_grid(double t0, double t1, double step) {
  require(step > 0.0 && std::isfinite(step), "time_grid: step must be > 0");
  require(t1 > t0, "time_grid: t1 must exceed t0");
  const double ratio = (t1 - t0) / step;
  const double n = std::round(ratio);
  if (std::abs(ratio - n) > 1e-9 * std::max(1.0, ratio))
    throw UsageError("time_grid: span is not a multiple of the step");
  const auto count = static_cast<Eigen::Index>(n) + 1;
  Vec t(count);
  for (Eigen::Index k = 0; k < count; ++k) t[k] = t0 + static_cast<double>(k) * step;
  t[count - 1] = t1;
  return t;
}

// ---------------------------------------------------------------------------
// Dormand-Prince 5(4)

namespace {

constexpr double c2 = 1.0 / 5.0, c3 = 3.0 / 10.0, c4 = 4.0 / 5.0, c5 = 8.0 / 9.0;
constexpr double a21 = 1.0 / 5.0;
constexpr double a31 = 3.0 / 40.0, a32 = 9.0 / 40.0;
constexpr double a41 = 44.0 / 45.0, a42 = -56.0 / 15.0, a43 = 32.0 / 9.0;
constexpr double a51 = 19372.0 / 6561.0, a52 = -25360.0 / 2187.0,
                 a53 = 64448.0 / 6561.0, a54 = -212.0 / 729.0;
constexpr double a61 = 9017.0 / 3168.0, a62 = -355.0 / 33.0,
                 a63 = 46732.0 / 5247.0, a64 = 49.0 / 176.0,
                 a65 = -5103.0 / 18656.0;
constexpr double a71 = 35.0 / 384.0, a73 = 500.0 / 1113.0, a74 = 125.0 / 192.0,
                 a75 = -2187.0 / 6784.0, a76 = 11.0 / 84.0;
// 5th-order solution minus embedded 4th-order solution.
constexpr double e1 = 71.0 / 57600.0, e3 = -71.0 / 16695.0, e4 = 71.0 / 1920.0,
                 e5 = -17253.0 / 339200.0, e6 = 22.0 / 525.0, e7 = -1.0 / 40.0;
// Dense output (Hairer & Wanner, DOPRI5 contd5).
constexpr double d1 = -12715105075.0 / 11282082432.0,
                 d3 = 87487479700.0 / 32700410799.0,
                 d4 = -10690763975.0 / 1880347072.0,
                 d5 = 701980252875.0 / 199316789632.0,
                 d6 = -1453857185.0 / 822651844.0,
                 d7 = 69997945.0 / 29380423.0;

double error_norm(const Vec& err, const Vec& y0, const Vec& y1, double rtol,
                  double atol) {
  double acc = 0.0;
  for (Eigen::Index i = 0; i < err.size(); ++i) {
    const double sc = atol + rtol * std::max(std::abs(y0[i]), std::abs(y1[i]));
    const double r = err[i] / sc;
    acc += r * r;
  }
  return std::sqrt(acc / static_cast<double>(err.size()));
}

bool all_finite(const Vec& v) { return v.allFinite(); }

void check_times(std::span<const double> times, const char* fn) {
  if (times.size() < 2) throw UsageError(std::string(fn) + ": need at least two output times");
  for (std::size_t i = 1; i < times.size(); ++i)
    if (!(times[i] > times[i - 1]))
      throw UsageError(std::string(fn) + ": output times must be strictly increasing");
}

}  // namespace

Trajectory integrate_rk45(const VectorField& vf, const State& x0,
                          std::span<const double> times,
                          const Rk45Options& opt) {
  check_times(times, "integrate_rk45");
  require(opt.reltol > 0.0 && opt.abstol > 0.0,
          "integrate_rk45: tolerances must be positive");
  require(opt.max_step > 0.0, "integrate_rk45: max_step must be positive");
  require(x0.allFinite(), "integrate_rk45: non-finite initial state");

  const Eigen::Index d = x0.size();
  const double t_end = times.back();
  Trajectory out;
  out.times = Eigen::Map<const Vec>(times.data(), static_cast<Eigen::Index>(times.size()));
  out.states.resize(out.times.size(), d);
  out.states.row(0) = x0.transpose();

  double t = times.front();
  Vec y = x0;
  Vec k1 = vf(t, y);
  if (!all_finite(k1)) throw IntegrationError("integrate_rk45: non-finite derivative", t);

  const double span = t_end - t;
  double h = opt.initial_step;
  if (h <= 0.0) {
    // Hairer's starting-step heuristic, simplified.
    Vec sc = (opt.abstol + opt.reltol * y.array().abs()).matrix();
    const double d0 = (y.array() / sc.array()).matrix().norm() / std::sqrt(double(d));
    const double d1n = (k1.array() / sc.array()).matrix().norm() / std::sqrt(double(d));
    h = (d0 < 1e-5 || d1n < 1e-5) ? 1e-6 : 0.01 * d0 / d1n;
    h = std::min(h, span);
  }
  h = std::min(h, opt.max_step);

  std::size_t next = 1;
  double err_old = 1e-4;
  bool rejected_last = false;
  Vec k2, k3, k4, k5, k6, k7, y1, err, tmp;

  for (std::size_t steps = 0; next < times.size(); ++steps) {
    if (steps >= opt.max_steps)
      throw IntegrationError("integrate_rk45: step budget exhausted", t);
    bool last = false;
    if (t + h >= t_end || t + 1.01 * h >= t_end) {
      h = t_end - t;
      last = true;
    }
    if (h < 16.0 * std::numeric_limits<double>::epsilon() * std::max(1.0, std::abs(t)))
      throw IntegrationError("integrate_rk45: step size underflow", t);

    tmp = y + h * a21 * k1;
    k2 = vf(t + c2 * h, tmp);
    tmp = y + h * (a31 * k1 + a32 * k2);
    k3 = vf(t + c3 * h, tmp);
    tmp = y + h * (a41 * k1 + a42 * k2 + a43 * k3);
    k4 = vf(t + c4 * h, tmp);
    tmp = y + h * (a51 * k1 + a52 * k2 + a53 * k3 + a54 * k4);
    k5 = vf(t + c5 * h, tmp);
    tmp = y + h * (a61 * k1 + a62 * k2 + a63 * k3 + a64 * k4 + a65 * k5);
    k6 = vf(t + h, tmp);
    y1 = y + h * (a71 * k1 + a73 * k3 + a74 * k4 + a75 * k5 + a76 * k6);
    k7 = vf(t + h, y1);
    err = h * (e1 * k1 + e3 * k3 + e4 * k4 + e5 * k5 + e6 * k6 + e7 * k7);

    double en = error_norm(err, y, y1, opt.reltol, opt.abstol);
    if (!std::isfinite(en) || !all_finite(y1)) en = 1e10;

    if (en <= 1.0) {
      const double t_new = last ? t_end : t + h;
      // Emit every grid time in (t, t_new].
      while (next < times.size() && times[next] <= t_new) {
        if (times[next] == t_new) {
          out.states.row(static_cast<Eigen::Index>(next)) = y1.transpose();
        } else {
          const double theta = (times[next] - t) / h;
          const double th1 = 1.0 - theta;
          const Vec r1 = y;
          const Vec r2 = y1 - y;
          const Vec r3 = h * k1 - r2;
          const Vec r4 = r2 - h * k7 - r3;
          const Vec r5 = h * (d1 * k1 + d3 * k3 + d4 * k4 + d5 * k5 + d6 * k6 + d7 * k7);
          const Vec yi = r1 + theta * (r2 + th1 * (r3 + theta * (r4 + th1 * r5)));
          out.states.row(static_cast<Eigen::Index>(next)) = yi.transpose();
        }
        ++next;
      }
      t = t_new;
      y = y1;
      k1 = k7;
      const double fac = (en == 0.0)
                             ? 5.0
                             : std::clamp(0.9 * std::pow(en, -0.7 / 5.0) *
                                              std::pow(err_old, 0.4 / 5.0),
                                          0.2, 5.0);
      err_old = std::max(en, 1e-4);
      h = std::min(h * (rejected_last ? std::min(fac, 1.0) : fac), opt.max_step);
      rejected_last = false;
    } else {
      h *= std::max(0.2, 0.9 * std::pow(en, -0.2));
      rejected_last = true;
    }
  }
  return out;
}

Trajectory integrate_rk45(const VectorField& vf, const State& x0, double t0,
                          double t1, double grid_step, const Rk45Options& opt) {
  const Vec grid = time_grid(t0, t1, grid_step);
  return integrate_rk45(vf, x0, std::span<const double>(grid.data(), grid.size()), opt);
}

namespace {

Vec rk4_step(const VectorField& vf, double t, const Vec& y, double h) {
  const Vec k1 = vf(t, y);
  const Vec k2 = vf(t + 0.5 * h, y + 0.5 * h * k1);
  const Vec k3 = vf(t + 0.5 * h, y + 0.5 * h * k2);
  const Vec k4 = vf(t + h, y + h * k3);
  return y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}

}  // namespace

Trajectory integrate_rk4(const VectorField& vf, const State& x0,
                         std::span<const double> times, double max_step) {
  check_times(times, "integrate_rk4");
  require(max_step > 0.0, "integrate_rk4: max_step must be positive");
  Trajectory out;
  out.times = Eigen::Map<const Vec>(times.data(), static_cast<Eigen::Index>(times.size()));
  out.states.resize(out.times.size(), x0.size());
  out.states.row(0) = x0.transpose();
  Vec y = x0;
  for (std::size_t i = 1; i < times.size(); ++i) {
    const double a = times[i - 1], b = times[i];
    const auto n = static_cast<long>(std::ceil((b - a) / max_step - 1e-12));
    const double h = (b - a) / static_cast<double>(n);
    for (long k = 0; k < n; ++k) y = rk4_step(vf, a + static_cast<double>(k) * h, y, h);
    if (!y.allFinite()) throw IntegrationError("integrate_rk4: non-finite state", a);
    out.states.row(static_cast<Eigen::Index>(i)) = y.transpose();
  }
  return out;
}

Trajectory integrate_abm(const VectorField& vf, const State& x0, double t0,
                         double t1, double grid_step, const AbmOptions& opt) {
  require(grid_step > 0.0, "integrate_abm: grid_step must be positive");
  require(opt.max_internal_step > 0.0, "integrate_abm: max_internal_step must be positive");
  require(x0.allFinite(), "integrate_abm: non-finite initial state");
  const Vec grid = time_grid(t0, t1, grid_step);
  const auto sub = static_cast<long>(std::ceil(grid_step / opt.max_internal_step - 1e-12));
  const double h = grid_step / static_cast<double>(sub);

  Trajectory out;
  out.times = grid;
  out.states.resize(grid.size(), x0.size());
  out.states.row(0) = x0.transpose();

  // f history: f[0] newest.
  std::array<Vec, 4> f;
  Vec y = x0;
  long n = 0;
  auto time_at = [&](long k) { return t0 + static_cast<double>(k) * h; };
  f[0] = vf(time_at(0), y);

  const long total = sub * (grid.size() - 1);
  for (n = 0; n < total; ++n) {
    const double t = time_at(n);
    Vec y1;
    if (n < 3) {
      y1 = rk4_step(vf, t, y, h);
    } else {
      const Vec yp = y + (h / 24.0) * (55.0 * f[0] - 59.0 * f[1] + 37.0 * f[2] - 9.0 * f[3]);
      const Vec fp = vf(time_at(n + 1), yp);
      y1 = y + (h / 24.0) * (9.0 * fp + 19.0 * f[0] - 5.0 * f[1] + f[2]);
    }
    if (!y1.allFinite()) throw IntegrationError("integrate_abm: non-finite state", t);
    y = std::move(y1);
    f[3] = std::move(f[2]);
    f[2] = std::move(f[1]);
    f[1] = std::move(f[0]);
    f[0] = vf(time_at(n + 1), y);
    if ((n + 1) % sub == 0)
      out.states.row((n + 1) / sub) = y.transpose();
  }
  return out;
}

// ---------------------------------------------------------------------------

Mat sample_grid(const Vec& lo, const Vec& hi, const std::vector<int>& counts) {
  const auto d = lo.size();
  require(hi.size() == d && static_cast<Eigen::Index>(counts.size()) == d && d > 0,
          "sample_grid: bounds and counts must share the dimension");
  Eigen::Index n = 1;
  for (Eigen::Index k = 0; k < d; ++k) {
    require(counts[k] >= 1, "sample_grid: counts must be >= 1");
    require(lo[k] < hi[k], "sample_grid: degenerate bounds (lo >= hi)");
    n *= counts[k];
  }
  Mat pts(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    Eigen::Index rem = i;
    for (Eigen::Index k = 0; k < d; ++k) {
      const int c = counts[k];
      const Eigen::Index idx = rem % c;
      rem /= c;
      pts(i, k) = c == 1 ? lo[k]
                         : lo[k] + (hi[k] - lo[k]) * static_cast<double>(idx) /
                                       static_cast<double>(c - 1);
    }
  }
  return pts;
}

Mat sample_uniform(const Vec& lo, const Vec& hi, int n, std::uint64_t seed) {
  require(lo.size() == hi.size() && lo.size() > 0, "sample_uniform: bad bounds");
  require(n >= 0, "sample_uniform: negative count");
  for (Eigen::Index k = 0; k < lo.size(); ++k)
    require(lo[k] < hi[k], "sample_uniform: degenerate bounds (lo >= hi)");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Mat pts(n, lo.size());
  for (int i = 0; i < n; ++i)
    for (Eigen::Index k = 0; k < lo.size(); ++k)
      pts(i, k) = lo[k] + (hi[k] - lo[k]) * u(rng);
  return pts;
}

std::vector<int> lattice_counts(const Vec& lo, const Vec& hi, int n) {
  require(lo.size() == 2 && hi.size() == 2, "lattice_counts: only 2-d domains are supported");
  require(n >= 1, "lattice_counts: n must be >= 1");
  const double ratio = (hi[0] - lo[0]) / (hi[1] - lo[1]);
  const double ideal = std::sqrt(static_cast<double>(n) * ratio);
  int best_nx = -1;
  double best_score = std::numeric_limits<double>::infinity();
  for (int nx = 1; nx <= n; ++nx) {
    if (n % nx != 0) continue;
    const double score = std::abs(std::log(static_cast<double>(nx) / ideal));
    if (score < best_score) {
      best_score = score;
      best_nx = nx;
    }
  }
  // Accept an exact factorization when its spacing is within 2x of isotropic.
  if (best_score <= std::log(2.0)) return {best_nx, n / best_nx};
  const int nx = std::max(1, static_cast<int>(std::lround(ideal)));
  const int ny = std::max(1, static_cast<int>(std::lround(static_cast<double>(n) / nx)));
  return {nx, ny};
}

ParticleEnsemble to_ensemble(const std::vector<Trajectory>& trajectories) {
  require(!trajectories.empty(), "to_ensemble: no trajectories");
  const Trajectory& first = trajectories.front();
  const Eigen::Index steps = first.times.size();
  const Eigen::Index d = first.states.cols();
  for (const auto& tr : trajectories) {
    if (tr.times.size() != steps || tr.times != first.times)
      throw UsageError("make_snapshots: trajectories do not share a time grid");
    require(tr.states.rows() == steps && tr.states.cols() == d,
            "make_snapshots: trajectory shape mismatch");
  }
  ParticleEnsemble ens;
  ens.times = first.times;
  const auto n = static_cast<Eigen::Index>(trajectories.size());
  ens.states.assign(static_cast<std::size_t>(steps), Mat(n, d));
  for (Eigen::Index p = 0; p < n; ++p)
    for (Eigen::Index k = 0; k < steps; ++k)
      ens.states[static_cast<std::size_t>(k)].row(p) =
          trajectories[static_cast<std::size_t>(p)].states.row(k);
  return ens;
}

SnapshotDataset make_snapshots(const ParticleEnsemble& ens) {
  require(ens.states.size() >= 2, "make_snapshots: need at least two time points");
  SnapshotDataset ds;
  ds.dt = ens.times[1] - ens.times[0];
  const std::size_t T = ens.states.size() - 1;
  ds.X.assign(ens.states.begin(), ens.states.begin() + static_cast<std::ptrdiff_t>(T));
  ds.Y.assign(ens.states.begin() + 1, ens.states.end());
  return ds;
}

SnapshotDataset make_snapshots(const std::vector<Trajectory>& trajectories) {
  return make_snapshots(to_ensemble(trajectories));
}

ParticleEnsemble simulate(const SimulationSpec& spec) {
  require(params_finite(spec.params), "simulate: non-finite system parameters");
  require(spec.initial.rows() > 0, "simulate: no initial particles");
  const VectorField vf = make_vector_field(spec.params);
  const Vec grid = time_grid(spec.t0, spec.t1, spec.step);
  const std::span<const double> times(grid.data(), static_cast<std::size_t>(grid.size()));

  ParticleEnsemble ens;
  ens.times = grid;
  const Eigen::Index n = spec.initial.rows();
  ens.states.assign(static_cast<std::size_t>(grid.size()), Mat(n, spec.initial.cols()));
  for (Eigen::Index p = 0; p < n; ++p) {
    const State x0 = spec.initial.row(p).transpose();
    const Trajectory tr = spec.solver == SolverKind::Rk45
                              ? integrate_rk45(vf, x0, times, spec.rk45)
                              : integrate_abm(vf, x0, spec.t0, spec.t1, spec.step, spec.abm);
    for (Eigen::Index k = 0; k < grid.size(); ++k)
      ens.states[static_cast<std::size_t>(k)].row(p) = tr.states.row(k);
  }
  return ens;
}

Mat propagate(const SystemParams& params, const Mat& points, double t, double dt,
              SolverKind solver) {
  const VectorField vf = make_vector_field(params);
  Mat out(points.rows(), points.cols());
  const std::array<double, 2> times{t, t + dt};
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    const State x0 = points.row(i).transpose();
    const Trajectory tr = solver == SolverKind::Rk45
                              ? integrate_rk45(vf, x0, times)
                              : integrate_abm(vf, x0, t, t + dt, dt);
    out.row(i) = tr.states.row(1);
  }
  return out;
}

std::pair<Vec, Vec> default_domain(SystemKind k) {
  switch (k) {
    case SystemKind::Duffing: return {Eigen::Vector2d(-2.0, 0.0), Eigen::Vector2d(2.0, 1.0)};
    case SystemKind::DoubleGyre: return {Eigen::Vector2d(0.0, 0.0), Eigen::Vector2d(2.0, 1.0)};
    case SystemKind::Bickley: return {Eigen::Vector2d(0.0, -3.0), Eigen::Vector2d(20.0, 3.0)};
  }
  throw UsageError("unknown system kind");
}

}  // namespace krff
