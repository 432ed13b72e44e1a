#pragma once

// Joint learning of the Fourier-feature parameters and the Koopman operator.
//
// Objective per snapshot pair t (row-stacked features):
//   data_term = sum_t |PhiY(t) - PhiX(t) K|_F
//   total     = data_term + lambda1 |K|_F + lambda2 (|omega|_1 + |b|_1)
//
// The reported data term is the unsquared sum. Parameter updates follow the
// smooth surrogate (1 / 2n) sum_t |PhiX(t) K - PhiY(t)|_F^2 (n = rows in the
// batch) plus the L1 subgradient. In the default closed-form mode K is
// re-solved by ridge least squares (ridge = base ridge + lambda1) and held
// fixed during the parameter step.

#include <cstdint>
#include <deque>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "krff/dictionary.hpp"
#include "krff/dynamics.hpp"
#include "krff/koopman.hpp"
#include "krff/types.hpp"

namespace krff {

enum class KMode { ClosedForm, FreeVariable };
enum class Optimizer { Sgd, Momentum, Adam };

struct TrainConfig {
  double lambda1 = 1e-6;
  double lambda2 = 1e-5;
  double step_size = 1e-3;
  int epochs = 50;
  int minibatch_particles = 0;   // 0 = every particle of the pair
  std::uint64_t seed = 0;
  std::optional<double> ridge;   // base ridge; nullopt = relative default
  int refit_interval = 1;        // K re-estimated every this many steps
  KMode k_mode = KMode::ClosedForm;
  Optimizer optimizer = Optimizer::Sgd;
  double momentum = 0.9;
  // online mode
  int theta_steps_per_ingest = 1;
  int replay_window = 32;
  double forgetting = 1.0;

  void validate() const;
};

struct LossTerms {
  double total = 0.0;
  double data_term = 0.0;
  double k_reg = 0.0;
  double theta_reg = 0.0;
  double surrogate = 0.0;   // (1/2n) sum |R|_F^2
};

struct LossRecord {
  long step = 0;
  double data_term = 0.0;
  double k_reg = 0.0;
  double theta_reg = 0.0;
  double total = 0.0;
  double surrogate = 0.0;
  double wall_ms = 0.0;
};

double theta_l1(const RffDictionary& dict);

LossTerms loss(const RffDictionary& dict, const Mat& K, std::span<const Mat> X,
               std::span<const Mat> Y, double lambda1, double lambda2);

// Loss over every pair of a dataset.
LossTerms dataset_loss(const RffDictionary& dict, const Mat& K, const SnapshotDataset& data,
                       double lambda1, double lambda2);

enum class GradientTarget { Surrogate, DataTerm };

struct DataGradient {
  RffGradient theta;
  Mat K;          // gradient with respect to K (same target)
  double value = 0.0;
};

// Gradient of the chosen smooth data objective with respect to the
// dictionary parameters and K. No regularization terms are included.
DataGradient data_gradient(const RffDictionary& dict, const Mat& K, std::span<const Mat> X,
                           std::span<const Mat> Y,
                           GradientTarget target = GradientTarget::Surrogate);

class ThetaOptimizer {
 public:
  void step(RffDictionary& dict, const RffGradient& grad, const TrainConfig& cfg);

 private:
  Mat m_omega_, v_omega_;
  Vec m_bias_, v_bias_;
  long t_ = 0;
};

// Adds lambda2 * sign(theta) (subgradient 0 at theta == 0).
void add_l1_subgradient(RffGradient& grad, const RffDictionary& dict, double lambda2);

struct FitResult {
  RffDictionary dict;
  KoopmanModel model;
  std::vector<LossRecord> history;
};

class TrainingAborted : public std::runtime_error {
 public:
  TrainingAborted(const std::string& what, RffDictionary last_dict,
                  std::vector<LossRecord> history)
      : std::runtime_error(what), last_dict(std::move(last_dict)), history(std::move(history)) {}

  RffDictionary last_dict;
  std::vector<LossRecord> history;
};

using LossObserver = std::function<void(const LossRecord&)>;
// Called after each parameter step with the step count and new dictionary.
using StepHook = std::function<void(long steps_done, const RffDictionary&)>;

// Block-coordinate training: every refit_interval steps K is re-solved on
// the current minibatch features, then one optimizer step moves the
// dictionary with K fixed. An epoch visits every snapshot pair once in a
// seeded random order, each time with a seeded random particle subset.
// Returns the trained dictionary and a model refit on the whole dataset.
FitResult fit(const SnapshotDataset& data, RffDictionary dict, const TrainConfig& cfg,
              const LossObserver& observer = {}, const StepHook& on_step = {});

// Ridge actually used for K given the accumulated Gram block.
double effective_ridge(const Mat& gram, const TrainConfig& cfg);

// ---------------------------------------------------------------------------
// Online (streaming) mode

struct TrainState {
  RffDictionary dict;
  Mat K;
  GramAccumulator grams;
  long samples_seen = 0;
  long step = 0;
  std::vector<LossRecord> history;

  // Recent pairs, re-featurized when the dictionary moves.
  std::deque<std::pair<Mat, Mat>> replay;
  bool stale = false;
  ThetaOptimizer optimizer;
};

TrainState online_init(RffDictionary dict);

// Appends one snapshot pair: grams += PhiX^T PhiX (and PhiX^T PhiY),
// K re-solved from the accumulators, then theta_steps_per_ingest parameter
// steps on the new pair. Parameter steps mark the accumulators stale; they
// are rebuilt from the replay window on the next ingest.
TrainState online_ingest(TrainState state, const Mat& Xnew, const Mat& Ynew,
                         const TrainConfig& cfg);

// Rebuilds the accumulators from the replay window with the current
// dictionary (older pairs weighted by forgetting^age).
void refresh_grams(TrainState& state, const TrainConfig& cfg);

KoopmanModel online_model(const TrainState& state, const TrainConfig& cfg);

}  // namespace krff
