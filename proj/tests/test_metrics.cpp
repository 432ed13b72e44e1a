#include <doctest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "krff/metrics.hpp"
#include "oracles.hpp"

using namespace krff;

namespace {

std::vector<oracle::Dense> dense_list(std::span<const Mat> v) {
  std::vector<oracle::Dense> out;
  for (const Mat& m : v) out.push_back(oracle::from(m));
  return out;
}

Mat linear_A() {
  Mat A(2, 2);
  A << 0.9, 0.1, 0.0, 0.8;
  return A;
}

// X(0) random, X(t+1) = X(t) A^T.
std::vector<Mat> linear_states(int n, int steps, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<Mat> s{gen::uniform(n, 2, rng)};
  for (int t = 0; t < steps; ++t) s.push_back(s.back() * linear_A().transpose());
  return s;
}

SnapshotDataset pairs_of(const std::vector<Mat>& s) {
  SnapshotDataset ds;
  for (std::size_t t = 0; t + 1 < s.size(); ++t) {
    ds.X.push_back(s[t]);
    ds.Y.push_back(s[t + 1]);
  }
  ds.dt = 1.0;
  return ds;
}

}  // namespace

TEST_CASE("traj_error examples") {
  const std::vector<Mat> a{Mat::Random(3, 2), Mat::Random(3, 2)};
  CHECK(traj_error(a, a).e_p == 0.0);
  Mat t(1, 2), p(1, 2);
  t << 3, 4;
  p << 0, 0;
  const std::vector<Mat> tv{t}, pv{p};
  CHECK(traj_error(tv, pv).e_p == 5.0);
  CHECK_THROWS_AS(traj_error(std::vector<Mat>{}, std::vector<Mat>{}), UsageError);
  CHECK_THROWS_AS(traj_error(a, std::vector<Mat>{a[0]}), UsageError);
  CHECK_THROWS_AS(traj_error(a, std::vector<Mat>{a[0], Mat::Zero(2, 2)}), UsageError);
}

TEST_CASE("traj_error matches the double loop oracle and its properties") {
  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 50; ++trial) {
    const int T = gen::between(rng, 1, 6), N = gen::between(rng, 1, 10), d = gen::between(rng, 1, 3);
    std::vector<Mat> truth, pred;
    for (int k = 0; k < T; ++k) {
      truth.push_back(gen::uniform(N, d, rng));
      pred.push_back(gen::uniform(N, d, rng));
    }
    const PredictionReport r = traj_error(truth, pred);
    CHECK(std::abs(r.e_p - oracle::traj_error(dense_list(truth), dense_list(pred))) < 1e-12);
    CHECK(r.e_p > 0.0);
    CHECK(r.per_step_errors.size() == T);
    CHECK(std::abs(r.e_p - std::sqrt(r.per_step_errors.squaredNorm() / T)) < 1e-12);
    // error field scaled by c scales e_p by |c|
    const double c = std::uniform_real_distribution<double>(-3, 3)(rng);
    std::vector<Mat> scaled;
    for (int k = 0; k < T; ++k) scaled.push_back(truth[k] + c * (pred[k] - truth[k]));
    CHECK(std::abs(traj_error(truth, scaled).e_p - std::abs(c) * r.e_p) < 1e-12 * (1 + r.e_p));
  }
}

TEST_CASE("eigenfunction error on an exact linear toy") {
  const std::vector<Mat> s = linear_states(50, 1, 4);
  const Monomial mono{1, 2};
  const KoopmanModel m = fit_model(Dictionary{mono}, pairs_of(s), 0.0);
  std::mt19937_64 rng(8);
  const Mat samples = gen::uniform(100, 2, rng);
  const Mat images = samples * linear_A().transpose();
  const auto reps = eigfunc_error(m, mono, samples, images, 3);
  REQUIRE(reps.size() == 3);
  bool saw_constant = false;
  for (const auto& r : reps) {
    CHECK(r.e_f < 1e-8);
    CHECK(r.sample_count == 100);
    if (std::abs(r.mu - cplx(1.0)) < 1e-12) {
      saw_constant = true;
      CHECK(r.e_f < 1e-12);
    }
  }
  CHECK(saw_constant);
  CHECK_THROWS_AS(eigfunc_error(m, mono, samples, images.topRows(5), 1), UsageError);
  CHECK_THROWS_AS(eigfunc_error(m, mono, samples, images, 4), UsageError);
}

TEST_CASE("eigenfunction error under rescaling of an eigenpair") {
  std::mt19937_64 rng(3);
  const RffDictionary d = rff_init(6, 2, 1.0, 2);
  const Mat X = gen::uniform(40, 2, rng);
  const Mat Y = X * linear_A().transpose();
  const KoopmanModel m = make_model(estimate_koopman(rff_eval(d, X), rff_eval(d, Y)), fit_B(rff_eval(d, X), X));
  const Mat samples = gen::uniform(100, 2, rng);
  const Mat images = samples * linear_A().transpose();
  const auto base = eigfunc_error(m, d, samples, images, 6);
  const cplx c(1.7, -0.4);
  for (Eigen::Index j = 0; j < 6; ++j) {
    KoopmanModel scaled = m;
    scaled.V.col(j) *= c;
    scaled.W.col(j) /= std::conj(c);
    CHECK(std::abs(scaled.W.col(j).dot(scaled.V.col(j)) - cplx(1.0)) < 1e-10);
    const auto r = eigfunc_error(scaled, d, samples, images, 6);
    CHECK(r[j].relative_e_f == doctest::Approx(base[j].relative_e_f).epsilon(1e-10));
    CHECK(r[j].e_f == doctest::Approx(std::abs(c) * base[j].e_f).epsilon(1e-10));
    // the reconstruction does not see the rescaling
    const Mat P = rff_eval(d, X);
    CHECK((reconstruct(scaled, P, 3).states - reconstruct(m, P, 3).states).cwiseAbs().maxCoeff() < 1e-10);
  }
}

TEST_CASE("nt and lt on an exact linear toy") {
  const std::vector<Mat> s = linear_states(20, 60, 6);
  const Monomial mono{1, 2};
  const KoopmanModel m = fit_model(Dictionary{mono}, pairs_of(s), 0.0);
  const NtLtResult r = evaluate_nt_lt(m, mono, s);
  CHECK(r.nt.e_p < 1e-6);
  CHECK(r.lt.e_p < 1e-6);
  CHECK(r.nt.horizon == 10);
  CHECK(r.lt.horizon == 40);
  CHECK(r.starts.size() == 21);
}

TEST_CASE("nt equals lt when the horizons coincide") {
  std::mt19937_64 rng(2);
  std::vector<Mat> s;
  for (int t = 0; t < 30; ++t) s.push_back(gen::uniform(15, 2, rng));
  const RffDictionary d = rff_init(8, 2, 1.0, 1);
  const KoopmanModel m = fit_model(Dictionary{d}, pairs_of(s));
  EvalOptions o;
  o.nt = o.lt = 7;
  const NtLtResult r = evaluate_nt_lt(m, d, s, o);
  CHECK(r.nt.e_p == r.lt.e_p);
  CHECK(r.nt.per_step_errors == r.lt.per_step_errors);
}

TEST_CASE("nt and lt aggregate as a quadratic mean over starts") {
  std::mt19937_64 rng(21);
  std::vector<Mat> s;
  for (int t = 0; t < 16; ++t) s.push_back(gen::uniform(6, 2, rng));
  const RffDictionary d = rff_init(5, 2, 1.0, 3);
  const KoopmanModel m = fit_model(Dictionary{d}, pairs_of(s));
  EvalOptions o;
  o.nt = 2;
  o.lt = 5;
  o.start_stride = 3;
  const NtLtResult r = evaluate_nt_lt(m, d, s, o);
  CHECK(r.starts == std::vector<int>{0, 3, 6, 9});
  double nt_acc = 0.0, lt_acc = 0.0;
  for (int st : r.starts) {
    const Mat P = rff_eval(d, s[st]);
    std::vector<Mat> truth, pred;
    for (int k = 1; k <= 5; ++k) {
      truth.push_back(s[st + k]);
      pred.push_back(reconstruct(m, P, k).states);
    }
    const auto td = dense_list(truth), pd = dense_list(pred);
    const double lt = oracle::traj_error(td, pd);
    const double nt = oracle::traj_error({td[0], td[1]}, {pd[0], pd[1]});
    nt_acc += nt * nt;
    lt_acc += lt * lt;
  }
  CHECK(r.nt.e_p == doctest::Approx(std::sqrt(nt_acc / 4)).epsilon(1e-12));
  CHECK(r.lt.e_p == doctest::Approx(std::sqrt(lt_acc / 4)).epsilon(1e-12));

  o.max_start = 4;
  CHECK(evaluate_nt_lt(m, d, s, o).starts == std::vector<int>{0, 3});
  o = EvalOptions{};
  CHECK_THROWS_AS(evaluate_nt_lt(m, d, s, o), UsageError);
}

TEST_CASE("per-start models are used for their own starts") {
  const std::vector<Mat> s = linear_states(10, 20, 9);
  const Monomial mono{1, 2};
  const KoopmanModel good = fit_model(Dictionary{mono}, pairs_of(s), 0.0);
  std::vector<int> asked;
  EvalOptions o;
  o.nt = 3;
  o.lt = 5;
  const NtLtResult r = evaluate_nt_lt(
      [&](int st) -> const KoopmanModel& {
        asked.push_back(st);
        return good;
      },
      mono, s, o);
  CHECK(asked == r.starts);
  CHECK(r.lt.e_p < 1e-6);
}

TEST_CASE("trajectory states from a dataset") {
  const std::vector<Mat> s = linear_states(4, 5, 1);
  const auto back = trajectory_states(pairs_of(s));
  REQUIRE(back.size() == s.size());
  for (std::size_t t = 0; t < s.size(); ++t) CHECK(back[t] == s[t]);
}

TEST_CASE("sign agreement") {
  Vec a(4), b(4);
  a << 1, -1, 2, -2;
  b << -3, 3, -1, 1;
  CHECK(sign_agreement(a, b) == 1.0);
  b << 1, 1, 1, 1;
  CHECK(sign_agreement(a, b) == 0.5);
  b << 0, -1, 2, -2;
  CHECK(sign_agreement(a, b) == 0.75);
  // an offset hides the split until the means are removed
  Vec c(4);
  c << 5, 3, 6, 2;
  CHECK(sign_agreement(a, c) == 0.5);
  CHECK(centered_sign_agreement(a, c) == 1.0);
  CHECK_THROWS_AS(sign_agreement(a, Vec(3)), UsageError);
}

TEST_CASE("phase alignment makes the largest value real and positive") {
  CMat v(3, 1);
  const cplx rot = std::polar(1.0, 2.1);
  v << rot * 1.0, rot * -3.0, rot * 2.0;
  const Vec r = phase_aligned_real(v, 0);
  CHECK(r[1] == doctest::Approx(3.0));
  CHECK(r[0] == doctest::Approx(-1.0));
  CHECK(r[2] == doctest::Approx(-2.0));
}

TEST_CASE("results table csv round trip") {
  const std::vector<TableRow> rows{{"double_gyre", "learned", 0.2307, 0.7125, ""},
                                   {"bickley", "gaussian", 1.0 / 3.0, 20.441, ""}};
  std::stringstream ss;
  write_table_csv(ss, rows);
  CHECK(ss.str().rfind("system,dictionary,nt,lt\n", 0) == 0);
  const auto back = read_table_csv(ss, "x");
  REQUIRE(back.size() == 2);
  CHECK(back[1].nt == rows[1].nt);
  CHECK(back[0].system == "double_gyre");
  CHECK(back[0].source == "x");
  std::istringstream bad("sys,dict\n");
  CHECK_THROWS_AS(read_table_csv(bad), UsageError);
  std::istringstream short_row("system,dictionary,nt,lt\nduffing,learned,1\n");
  CHECK_THROWS_AS(read_table_csv(short_row), UsageError);
}

TEST_CASE("report json") {
  PredictionReport p;
  p.horizon = 2;
  p.e_p = 1.5;
  p.per_step_errors = Vec::Constant(2, 1.5);
  const auto j = to_json(p);
  CHECK(j.at("horizon") == 2);
  CHECK(j.at("per_step_errors").size() == 2);
  EigenErrorReport e;
  e.mu = cplx(0.5, -0.25);
  CHECK(to_json(e).at("mu")[1] == -0.25);
}
