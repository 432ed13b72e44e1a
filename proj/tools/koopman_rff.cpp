// koopman-rff: run experiments, merge result tables, export eigenfunction grids.
//
// Exit codes: 0 success, 1 I/O or unexpected failure, 2 invalid usage or
// configuration, 3 numerical failure (integration or training abort).

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "krff/experiment.hpp"

namespace fs = std::filesystem;

namespace {

constexpr int kExitIo = 1;
constexpr int kExitUsage = 2;
constexpr int kExitNumeric = 3;

int run_cmd(const std::string& config_path, const krff::Overrides& overrides) {
  krff::ExperimentConfig cfg = krff::load_config(config_path);
  krff::apply_overrides(cfg, overrides, &std::cerr);
  std::cerr << "run " << (cfg.name.empty() ? config_path : cfg.name) << " -> " << cfg.output_dir
            << "\n";
  krff::run_experiment(cfg, std::cerr);
  std::cout << cfg.output_dir << "\n";
  return 0;
}

int compare_cmd(const std::vector<std::string>& dirs, const std::optional<std::string>& out) {
  std::vector<fs::path> paths(dirs.begin(), dirs.end());
  const auto rows = krff::compare_runs(paths);
  if (out) {
    std::ofstream f(*out);
    if (!f) throw std::runtime_error("cannot write " + *out);
    krff::write_table_csv(f, rows);
    std::cerr << "wrote " << rows.size() << " rows to " << *out << "\n";
  } else {
    krff::write_table_csv(std::cout, rows);
  }
  return 0;
}

int export_cmd(const std::string& dir, int top_j, const std::string& grid,
               const std::optional<std::string>& out) {
  std::optional<fs::path> target;
  if (out) target = fs::path(*out);
  const fs::path written = krff::export_field(dir, top_j, krff::parse_grid(grid), target);
  std::cout << written.string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Koopman operator approximation with learned random Fourier features"};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<int> particles, rff, epochs;
  auto* run = app.add_subcommand("run", "Simulate, train or fit, evaluate and write a run directory");
  run->add_option("config", config_path, "Experiment config (JSON, comments allowed)")
      ->required()
      ->check(CLI::ExistingFile);
  run->add_option("--seed", seed, "Override the config seed");
  run->add_option("--out", out, "Override the output directory");
  run->add_option("--particles", particles, "Override the particle count");
  run->add_option("--rff", rff, "Override the number of random Fourier features");
  run->add_option("--epochs", epochs, "Override the training epochs");

  std::vector<std::string> dirs;
  std::optional<std::string> compare_out;
  auto* compare = app.add_subcommand("compare", "Merge results.csv of finished runs into one table");
  compare->add_option("runs", dirs, "Run directories")->required();
  compare->add_option("--out", compare_out, "Write the table here instead of stdout");

  std::string export_dir;
  int top_j = 1;
  std::string grid = "100x50";
  std::optional<std::string> export_out;
  auto* exp = app.add_subcommand("export-field", "Write eigenfunction values on a regular grid");
  exp->add_option("run_dir", export_dir, "Finished run directory")->required();
  exp->add_option("--top-j", top_j, "Number of leading modes")->check(CLI::PositiveNumber);
  exp->add_option("--grid", grid, "Grid size WxH");
  exp->add_option("--out", export_out, "CSV path (default: inside the run directory)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (*run) {
      krff::Overrides o;
      o.seed = seed;
      o.output_dir = out;
      o.particles = particles;
      o.rff = rff;
      o.epochs = epochs;
      return run_cmd(config_path, o);
    }
    if (*compare) return compare_cmd(dirs, compare_out);
    if (*exp) return export_cmd(export_dir, top_j, grid, export_out);
  } catch (const krff::TrainingAborted& e) {
    std::cerr << "error: " << e.what() << " (partial log and dictionary.partial.json kept)\n";
    return kExitNumeric;
  } catch (const krff::IntegrationError& e) {
    std::cerr << "error: " << e.what() << " (last good time " << e.last_good_time() << ")\n";
    return kExitNumeric;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIo;
  }
  return kExitUsage;
}
