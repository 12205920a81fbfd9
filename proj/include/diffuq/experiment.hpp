#pragma once

#include "diffuq/data.hpp"
#include "diffuq/uq_metrics.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <string>
#include <vector>

namespace diffuq {

// Every accepted key with its default value. Keys whose default is null
// accept any type.
const nlohmann::json& default_config();

// Merges `user` over the defaults. Unknown keys and type mismatches throw
// ConfigError naming the dotted key path.
nlohmann::json resolve_config(const nlohmann::json& user);
nlohmann::json load_config(const std::filesystem::path& path);

// Applies "a.b.c=value"; value is parsed as JSON, falling back to a string.
void apply_override(nlohmann::json& config, const std::string& assignment);

// Model named by config["model"] ("pensim", "hlt", "linear", "abs_linear") for
// the given input width.
std::unique_ptr<RegressionModel> make_model(const nlohmann::json& config, Eigen::Index input_dim);

// Train/test split described by config["dataset"]; synthetic data draws from
// dataset.seed, or the run seed when that is null.
Split make_split(const nlohmann::json& config);

struct RunOptions {
  bool overwrite = false;
  std::ostream* log = nullptr;  // progress lines, if set
};

struct RunArtifact {
  std::filesystem::path dir;
  nlohmann::json report;  // contents of report.json
};

// Directory name "<label->method-n<n>-s<seed>" under config.output_dir.
std::string run_name(const nlohmann::json& config);

// Fits the configured method, draws the sample bank, scores it on the test split
// and writes config.json, report.json, reliability.csv, samples.csv (+ .json),
// train_report.csv and checkpoint (diffuq only) and manifest.json with
// FNV-1a checksums. Files are assembled in a hidden temp directory and renamed
// into place, so a failure leaves no partial run directory.
RunArtifact run_experiment(const nlohmann::json& config, const RunOptions& opts = {});

// Cartesian product over `grid` entries "key=v1,v2,..."; each point gets the
// label "key=value[,key=value]" and its own run. Writes sweep_summary.csv
// into the output directory.
std::vector<RunArtifact> sweep(const nlohmann::json& config, const std::vector<std::string>& grid,
                               const RunOptions& opts = {});

struct SummaryRow {
  std::string method;
  long n_samples = 0;
  std::string label;
  int runs = 0;
  // metric -> (mean, sample std); r2 absent when undefined in any run
  std::vector<std::pair<std::string, std::pair<double, double>>> stats;
  std::vector<double> mean_coverage;
  std::vector<double> levels;
};

// Groups report.json files by (method, n_samples, label). `inputs` are run
// directories or directories of run directories. Rejects runs whose dataset
// specs differ.
std::vector<SummaryRow> summarize(const std::vector<std::filesystem::path>& inputs);
// Writes summary.csv and one reliability_<group>.csv per group into out_dir.
std::vector<SummaryRow> emit_report(const std::vector<std::filesystem::path>& inputs,
                                    const std::filesystem::path& out_dir);

// Oracle checks of the numerical core; prints one line per check.
bool selftest(std::ostream& os);

std::string fnv1a_hex(const std::string& bytes);

}  // namespace diffuq
