#pragma once

// Experiment configuration and the run / compare / export-field pipeline
// behind the koopman-rff command line tool.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "krff/dictionary.hpp"
#include "krff/dynamics.hpp"
#include "krff/koopman.hpp"
#include "krff/learning.hpp"
#include "krff/metrics.hpp"
#include "krff/types.hpp"

namespace krff {

// Invalid configuration; what() carries "source:line: message" when the
// offending key could be located.
class ConfigError : public UsageError {
 public:
  using UsageError::UsageError;
};

enum class DictionaryKind { Rff, Gaussian, Monomial, Kernel };
enum class Sampling { Lattice, Uniform };
enum class BaselineFit { PerPair, Global };
enum class TruthSpan { Dataset, Extended };

std::string dictionary_label(DictionaryKind k);   // learned, gaussian, monomial, kernel

struct DictionarySpec {
  DictionaryKind kind = DictionaryKind::Rff;
  int features = 100;            // rff
  double bandwidth = 1.0;        // rff initialization sigma
  std::vector<int> counts;       // gaussian lattice per axis
  double sigma = 1.0;            // gaussian width, kernel sigma
  int degree = 3;                // monomial
  double regularization = 1e-8;  // kernel
  int samples = 1000;            // kernel: snapshot pairs drawn from the data
};

struct EvalConfig {
  int nt = 10;
  int lt = 40;
  int start_stride = 1;
  int eigen_samples = 100;
  double eigen_dt = 0.0;        // 0 = the snapshot step
  int top_j = 4;                // modes written to field.csv
  std::vector<int> field_grid{100, 50};
  BaselineFit baseline_fit = BaselineFit::PerPair;
  // Extended: the particles are integrated past t1 so that every start
  // inside the training window has a full horizon of ground truth.
  TruthSpan truth = TruthSpan::Dataset;
};

struct ExperimentConfig {
  std::string name;
  SystemKind system = SystemKind::DoubleGyre;
  SystemParams params = DoubleGyreParams{};
  Sampling sampling = Sampling::Lattice;
  int particles = 0;             // 0 = product of counts
  std::vector<int> counts;       // empty = derived from particles
  Vec domain_lo, domain_hi;      // empty = the system's default domain
  double t0 = 0.0;
  double t1 = 1.0;
  double step = 0.1;
  SolverKind solver = SolverKind::Rk45;
  DictionarySpec dictionary;
  TrainConfig train;
  bool online = false;           // stream pairs through online_ingest instead of fit
  int checkpoint_interval = 0;   // training steps between dictionary checkpoints
  EvalConfig eval;
  std::uint64_t seed = 0;
  std::string output_dir = "runs/default";

  void validate() const;
  std::pair<Vec, Vec> domain() const;
  std::vector<int> lattice() const;   // resolved lattice counts
  int particle_count() const;
};

// Replaces // and /* */ comments outside strings with spaces, keeping
// every newline so positions still map to the original lines.
std::string strip_json_comments(const std::string& text);

ExperimentConfig parse_config(const std::string& text, const std::string& source = "<config>");
ExperimentConfig load_config(const std::filesystem::path& path);

// Canonical form: every field explicit, so parse(dump(to_json(c))) == c.
nlohmann::json to_json(const ExperimentConfig& cfg);

// Command-line overrides applied on top of a preset.
struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::string> output_dir;
  std::optional<int> particles;
  std::optional<int> rff;
  std::optional<int> epochs;
};
void apply_overrides(ExperimentConfig& cfg, const Overrides& o, std::ostream* notes = nullptr);

Mat initial_positions(const ExperimentConfig& cfg);

// Hex FNV-1a 64 of the canonical description of the simulated ensemble.
std::string dataset_key(const ExperimentConfig& cfg);

// Ground-truth ensemble for the config (covering the extended span when
// eval.truth is Extended), read from or written to cache_dir when given.
ParticleEnsemble load_or_simulate(const ExperimentConfig& cfg,
                                  const std::optional<std::filesystem::path>& cache_dir,
                                  std::ostream* log = nullptr);

// Training pairs of the config's window [t0, t1] taken from the ensemble.
SnapshotDataset training_window(const ExperimentConfig& cfg, const ParticleEnsemble& ens);

std::optional<std::filesystem::path> cache_dir_from_env();

struct ModeSummary {
  Eigen::Index index = 0;
  EigenErrorReport error;
};

struct ExperimentResult {
  DictionaryKind kind = DictionaryKind::Rff;
  std::optional<Dictionary> dict;
  std::optional<KoopmanModel> model;
  std::optional<KernelEdmdResult> kernel;
  std::vector<LossRecord> history;
  std::optional<NtLtResult> nt_lt;
  std::vector<EigenErrorReport> eigen;   // leading top_j modes
  std::optional<ModeSummary> dominant;   // dominant nontrivial mode
  EigenfunctionField field;

  TableRow row(const ExperimentConfig& cfg) const;
};

struct ExecuteHooks {
  LossObserver on_loss;
  std::function<void(long step, const RffDictionary&)> on_checkpoint;
  std::ostream* log = nullptr;
};

// Builds or trains the model, evaluates it on `truth` and fills the field.
ExperimentResult execute(const ExperimentConfig& cfg, const ParticleEnsemble& truth,
                         const ExecuteHooks& hooks = {});

// Full pipeline with outputs in cfg.output_dir: config.resolved.json,
// results.csv, results.json, dictionary.json, model.json (or kernel.json),
// field.csv, train_log.jsonl, checkpoints/. Guarded by a lockfile.
ExperimentResult run_experiment(const ExperimentConfig& cfg, std::ostream& log);

// Table rows from the results.csv of every run directory, sorted by system
// then dictionary. Identical duplicates collapse; conflicting ones throw.
std::vector<TableRow> compare_runs(const std::vector<std::filesystem::path>& run_dirs);

// Writes the first top_j eigenfunctions of a finished run on a W x H grid
// over the run's domain. Returns the CSV path (default
// <run_dir>/field_top<J>_<W>x<H>.csv).
std::filesystem::path export_field(const std::filesystem::path& run_dir, int top_j,
                                   const std::vector<int>& grid,
                                   const std::optional<std::filesystem::path>& out = std::nullopt);

// "100x50" -> {100, 50}
std::vector<int> parse_grid(const std::string& text);

}  // namespace krff
