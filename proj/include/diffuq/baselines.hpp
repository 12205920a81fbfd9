#pragma once

#include "diffuq/optim.hpp"
#include "diffuq/regression_model.hpp"
#include "diffuq/targets.hpp"

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace diffuq {

// Posterior draws from any inference method: one parameter vector per row.
struct SampleBank {
  Eigen::MatrixXd samples;  // n x d
  std::string method;
  nlohmann::json provenance = nlohmann::json::object();

  Eigen::Index size() const { return samples.rows(); }
  Eigen::Index dim() const { return samples.cols(); }
  Eigen::VectorXd row(Eigen::Index i) const { return samples.row(i).transpose(); }
  // Throws NumericalError on an empty bank or non-finite rows.
  void validate() const;

  // theta_0,...,theta_{d-1} header, one sample per row, round-trip precision.
  std::string to_csv() const;
  static SampleBank from_csv(const std::string& text, std::string method = "");
  // Writes <path> and the provenance sidecar <path>.json (method, n, dim, checksum).
  void save(const std::filesystem::path& path) const;
  static SampleBank load(const std::filesystem::path& path);
};

// --- MAP / deep ensembles ---------------------------------------------------------

struct MapConfig {
  OptimizerConfig opt{1e-2, 0.9, 0.999, 1e-8, 3000, 0.01};
  // Full-batch quasi-Newton refinement after Adam, until |grad| < grad_tol.
  int polish_iter = 500;
  double grad_tol = 1e-6;
};

struct MapResult {
  Eigen::VectorXd theta;
  double log_density = 0.0;  // full-batch log pi at theta
  double grad_norm = 0.0;    // full-batch gradient norm at theta
  int iterations = 0;
};

// Maximizes log pi by Adam (minibatches from target.draw_batch, stream
// (seed, "minibatch", i)) followed by a BFGS polish on the full batch.
MapResult map_fit(const LogDensity& target, Eigen::VectorXd init, const MapConfig& cfg, std::uint64_t seed);
// Posterior mode of the model under N(0, prior_var I); init drawn from (seed, "init").
MapResult map_fit(const RegressionModel& model, const Dataset& data, const MapConfig& cfg, std::uint64_t seed,
                  Eigen::Index minibatch = 256, double prior_var = 1.0);

// One map_fit per seed. A diverging member is reported with its index and seed.
SampleBank ensemble_fit(const RegressionModel& model, const Dataset& data, std::span<const std::uint64_t> seeds,
                        const MapConfig& cfg, Eigen::Index minibatch = 256, double prior_var = 1.0);

// --- SGLD ---------------------------------------------------------------------------

struct SgldConfig {
  double step_size = 1e-3;
  int n_steps = 10000;
  double burn_in = 0.5;        // fraction of each chain discarded
  Eigen::Index n_samples = 100;  // thinned draws kept in total
  Eigen::Index n_chains = 1;
};

// theta <- theta + (eps/2) grad log pi(theta) + N(0, eps I), minibatch gradients
// rescaled by the target. Each chain keeps n_samples / n_chains evenly spaced
// post-burn-in states ending at its last state.
SampleBank sgld_sample(const LogDensity& target, const Eigen::VectorXd& init, const SgldConfig& cfg,
                       std::uint64_t seed);

// --- SVGD ---------------------------------------------------------------------------

// RBF bandwidth h in k(a, b) = exp(-|a - b|^2 / h): median squared pairwise
// distance / log n, or 1.0 when that is degenerate (n = 1 or coincident particles).
double median_bandwidth(const Eigen::MatrixXd& particles);

// One step theta_i += step * phi(theta_i),
//   phi(theta_i) = (1/n) sum_j [k(theta_j, theta_i) grad log pi(theta_j) + grad_{theta_j} k(theta_j, theta_i)].
Eigen::MatrixXd svgd_update(const Eigen::MatrixXd& particles, const LogDensity& target,
                            std::optional<double> bandwidth, double step, std::span<const Eigen::Index> batch = {});

struct SvgdConfig {
  Eigen::Index n_particles = 50;
  int n_steps = 2000;
  double step = 1e-2;
  std::optional<double> bandwidth;  // median heuristic when empty
};

// Particles start from the N(0, I) prior (stream (seed, "init")).
SampleBank svgd_run(const LogDensity& target, const SvgdConfig& cfg, std::uint64_t seed);
SampleBank svgd_run(const LogDensity& target, Eigen::MatrixXd particles, const SvgdConfig& cfg, std::uint64_t seed);

// --- Mean-field VI ------------------------------------------------------------------

struct MfviConfig {
  OptimizerConfig opt{1e-2, 0.9, 0.999, 1e-8, 20000, 0.05};
  double init_log_std = -2.0;
  // Iterate averaging over this trailing fraction of the run.
  double average_tail = 0.5;
};

struct MfviResult {
  Eigen::VectorXd mean;
  Eigen::VectorXd log_std;

  Eigen::VectorXd std() const { return log_std.array().exp().matrix(); }
  SampleBank sample(Eigen::Index n, std::uint64_t seed) const;
};

// Maximizes the ELBO of q = N(mean, diag(exp(2 log_std))) with one
// reparameterized draw per step (stream (seed, "mfvi-noise")).
MfviResult mfvi_fit(const LogDensity& target, Eigen::VectorXd init_mean, const MfviConfig& cfg, std::uint64_t seed);

// --- MC dropout ---------------------------------------------------------------------

// Adam on log p(D | theta * mask) + log N(theta; 0, prior_var I) with a fresh
// dropout mask over the mean network's hidden units at every step.
Eigen::VectorXd mc_dropout_fit(const HeteroModel& model, const Dataset& data, double rate, const MapConfig& cfg,
                               std::uint64_t seed, Eigen::Index minibatch = 256, double prior_var = 1.0);

// n masked copies of the fitted parameters, mask i from (seed, "dropout", i).
SampleBank mc_dropout_bank(const HeteroModel& model, const Eigen::VectorXd& fitted, double rate, Eigen::Index n,
                           std::uint64_t seed);

}  // namespace diffuq
