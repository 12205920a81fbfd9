// diffuq command-line front end: run, sweep, report, sample, selftest.
#include "diffuq/diffusion_sampler.hpp"
#include "diffuq/errors.hpp"
#include "diffuq/experiment.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <fstream>
#include <iomanip>
#include <iostream>

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitNumerical = 3;

nlohmann::json config_with_overrides(const std::string& path, const std::vector<std::string>& sets,
                                     const std::optional<std::uint64_t>& seed, const std::string& out) {
  nlohmann::json cfg = diffuq::load_config(path);
  for (const auto& s : sets) diffuq::apply_override(cfg, s);
  if (seed) cfg["seed"] = *seed;
  if (!out.empty()) cfg["output_dir"] = out;
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Diffusion-sampler posterior sampling for uncertainty-aware regression"};
  app.require_subcommand(1);

  std::string config_path, out_dir;
  std::vector<std::string> sets, grid;
  std::optional<std::uint64_t> seed;
  bool overwrite = false, quiet = false;

  auto* run = app.add_subcommand("run", "Fit one method and write a run directory");
  run->add_option("config", config_path, "JSON experiment config")->required()->check(CLI::ExistingFile);
  run->add_option("--set", sets, "Override a config key, e.g. --set diffuq.gamma=0.1");
  run->add_option("--seed", seed, "Root seed");
  run->add_option("--out", out_dir, "Output root directory");
  run->add_flag("--overwrite", overwrite, "Replace an existing run directory");
  run->add_flag("-q,--quiet", quiet, "No progress output");

  auto* sw = app.add_subcommand("sweep", "Run a grid of configs");
  sw->add_option("config", config_path, "JSON experiment config")->required()->check(CLI::ExistingFile);
  sw->add_option("--grid", grid, "key=v1,v2,... (repeatable)")->required();
  sw->add_option("--set", sets, "Override a config key");
  sw->add_option("--seed", seed, "Root seed");
  sw->add_option("--out", out_dir, "Output root directory");
  sw->add_flag("--overwrite", overwrite, "Replace existing run directories");
  sw->add_flag("-q,--quiet", quiet, "No progress output");

  std::vector<std::string> report_dirs;
  std::string report_out = "report";
  auto* rep = app.add_subcommand("report", "Aggregate run directories into summary CSVs");
  rep->add_option("dirs", report_dirs, "Run directories or their parents")->required();
  rep->add_option("--out", report_out, "Directory for summary.csv and reliability CSVs");

  std::string ckpt_path, samples_out;
  long n_draw = 1000;
  std::uint64_t sample_seed = 0;
  auto* smp = app.add_subcommand("sample", "Draw samples from a trained checkpoint");
  smp->add_option("checkpoint", ckpt_path, "Checkpoint file (json or binary)")->required()->check(CLI::ExistingFile);
  smp->add_option("-n", n_draw, "Number of samples")->check(CLI::PositiveNumber);
  smp->add_option("--seed", sample_seed, "Noise seed");
  smp->add_option("-o,--output", samples_out, "CSV file (stdout when omitted)");

  auto* st = app.add_subcommand("selftest", "Run built-in oracle checks");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitConfig;
  }

  try {
    diffuq::RunOptions opts;
    opts.overwrite = overwrite;
    opts.log = quiet ? nullptr : &std::cerr;
    if (*run) {
      const auto art = diffuq::run_experiment(config_with_overrides(config_path, sets, seed, out_dir), opts);
      std::cout << art.dir.string() << '\n';
    } else if (*sw) {
      for (const auto& art : diffuq::sweep(config_with_overrides(config_path, sets, seed, out_dir), grid, opts))
        std::cout << art.dir.string() << '\n';
    } else if (*rep) {
      std::vector<std::filesystem::path> dirs(report_dirs.begin(), report_dirs.end());
      const auto rows = diffuq::emit_report(dirs, report_out);
      std::cout << rows.size() << " group(s) -> " << (std::filesystem::path(report_out) / "summary.csv").string() << '\n';
    } else if (*smp) {
      const auto ckpt = diffuq::load_checkpoint(ckpt_path);
      const Eigen::MatrixXd x = diffuq::sample(ckpt.drift, ckpt.sde, n_draw, sample_seed);
      std::ofstream file;
      if (!samples_out.empty()) {
        file.open(samples_out);
        if (!file) throw diffuq::ConfigError("cannot write " + samples_out);
      }
      std::ostream& os = samples_out.empty() ? std::cout : file;
      os << std::setprecision(17);
      for (Eigen::Index j = 0; j < x.cols(); ++j) os << (j ? "," : "") << "theta_" << j;
      os << '\n';
      for (Eigen::Index i = 0; i < x.rows(); ++i) {
        for (Eigen::Index j = 0; j < x.cols(); ++j) os << (j ? "," : "") << x(i, j);
        os << '\n';
      }
    } else if (*st) {
      return diffuq::selftest(std::cout) ? 0 : 1;
    }
  } catch (const diffuq::NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const diffuq::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const diffuq::DimensionError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const diffuq::DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
