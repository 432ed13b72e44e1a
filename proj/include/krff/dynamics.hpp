#pragma once

// Benchmark flows (Duffing oscillator, double gyre, Bickley jet), the two
// trajectory integrators used to generate ground truth, and assembly of
// snapshot datasets from particle trajectories.

#include <cstdint>
#include <functional>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "krff/types.hpp"

namespace krff {

using State = Vec;

struct DuffingParams {
  double delta = 0.5;
  double beta = -1.0;
  double alpha = 1.0;
};

// alpha is carried for completeness; the derivative of the forcing term is
// computed with epsilon so that it stays consistent with f. At the default
// values (epsilon == alpha == 0.25) the two readings coincide.
struct DoubleGyreParams {
  double epsilon = 0.25;
  double alpha = 0.25;
  double amplitude = 0.25;
  double omega = 2.0 * std::numbers::pi;
};

struct BickleyParams {
  double U0 = 5.4138;
  double L0 = 1.77;
  double c1 = 0.1446 * 5.4138;
  double c2 = 0.2053 * 5.4138;
  double c3 = 0.4561 * 5.4138;
  double eps1 = 0.075;
  double eps2 = 0.4;
  double eps3 = 0.3;
  double r0 = 6.371;
  double k1 = 2.0 / 6.371;
  double k2 = 4.0 / 6.371;
  double k3 = 6.0 / 6.371;
};

using SystemParams = std::variant<DuffingParams, DoubleGyreParams, BickleyParams>;

enum class SystemKind { Duffing, DoubleGyre, Bickley };

SystemKind kind_of(const SystemParams& p);
std::string system_name(SystemKind k);
SystemKind parse_system(const std::string& name);
SystemParams default_params(SystemKind k);
bool params_finite(const SystemParams& p);

// Velocity fields. Each throws UsageError when handed the wrong variant.
State duffing_vf(const State& s, const SystemParams& p);
State double_gyre_vf(const State& s, double t, const SystemParams& p);
State bickley_vf(const State& s, double t, const SystemParams& p);

// Bickley stream function psi0 + psi1, exposed for consistency checks.
double bickley_stream(double x, double y, double t, const BickleyParams& p);

using VectorField = std::function<State(double t, const State& x)>;

// Time-dependent dispatch over whichever system the params describe.
VectorField make_vector_field(const SystemParams& p);

struct Trajectory {
  Vec times;     // strictly increasing, length T+1
  Mat states;    // (T+1) x d
};

// Uniform output grid t0, t0+step, ..., t1. (t1 - t0) must be an integer
// multiple of step up to 1e-9 relative.
Vec time_grid(double t0, double t1, double step);

struct Rk45Options {
  double reltol = 1e-8;
  double abstol = 1e-10;
  double max_step = std::numeric_limits<double>::infinity();
  double initial_step = 0.0;  // 0 selects automatically
  std::size_t max_steps = 5'000'000;
};

// Dormand-Prince 5(4) with PI step control. Output at `times` uses the
// free 4th-order continuous extension; the last grid point is hit exactly.
Trajectory integrate_rk45(const VectorField& vf, const State& x0,
                          std::span<const double> times,
                          const Rk45Options& opt = {});
Trajectory integrate_rk45(const VectorField& vf, const State& x0, double t0,
                          double t1, double grid_step,
                          const Rk45Options& opt = {});

struct AbmOptions {
  // Internal step is grid_step / ceil(grid_step / max_internal_step).
  double max_internal_step = 0.01;
};

// Fixed-step fourth-order Adams-Bashforth predictor with Adams-Moulton
// corrector (PECE), started with classical RK4.
Trajectory integrate_abm(const VectorField& vf, const State& x0, double t0,
                         double t1, double grid_step,
                         const AbmOptions& opt = {});

// Classical fixed-step RK4, used for ABM startup and as a reference solver.
Trajectory integrate_rk4(const VectorField& vf, const State& x0,
                         std::span<const double> times, double max_step);

// Regular lattice over [lo, hi], first coordinate varying fastest.
Mat sample_grid(const Vec& lo, const Vec& hi, const std::vector<int>& counts);

// i.i.d. uniform draws over [lo, hi).
Mat sample_uniform(const Vec& lo, const Vec& hi, int n, std::uint64_t seed);

// Picks per-axis counts over a rectangle so that the product is n (exact
// when n has a divisor near the aspect-ratio optimum) and spacing is close
// to isotropic.
std::vector<int> lattice_counts(const Vec& lo, const Vec& hi, int n);

// All particles advanced along a common time grid.
struct ParticleEnsemble {
  Vec times;                         // length T+1
  std::vector<StateMatrix> states;   // T+1 matrices, each N x d
};

struct SnapshotDataset {
  std::vector<StateMatrix> X;
  std::vector<StateMatrix> Y;
  double dt = 0.0;

  std::size_t pairs() const { return X.size(); }
  Eigen::Index particles() const { return X.empty() ? 0 : X.front().rows(); }
  Eigen::Index dim() const { return X.empty() ? 0 : X.front().cols(); }
};

SnapshotDataset make_snapshots(const std::vector<Trajectory>& trajectories);
SnapshotDataset make_snapshots(const ParticleEnsemble& ensemble);

// Regroups per-particle trajectories by time index.
ParticleEnsemble to_ensemble(const std::vector<Trajectory>& trajectories);

enum class SolverKind { Rk45, Abm4 };

struct SimulationSpec {
  SystemParams params;
  Mat initial;         // N x d starting positions
  double t0 = 0.0;
  double t1 = 1.0;
  double step = 0.1;
  SolverKind solver = SolverKind::Rk45;
  Rk45Options rk45{};
  AbmOptions abm{};
};

ParticleEnsemble simulate(const SimulationSpec& spec);

// One flow-map step for each row of `points`, starting at time t.
Mat propagate(const SystemParams& params, const Mat& points, double t,
              double dt, SolverKind solver = SolverKind::Rk45);

// Benchmark domain of each system, [lo, hi] per axis.
std::pair<Vec, Vec> default_domain(SystemKind k);

}  // namespace krff
