#pragma once

#include "diffuq/autodiff.hpp"
#include "diffuq/nn.hpp"
#include "diffuq/optim.hpp"
#include "diffuq/targets.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace diffuq {

struct SdeConfig {
  static constexpr double kHorizon = 1.0;

  double gamma = 1.0;      // reference diffusion variance per unit time
  double dt_train = 0.04;  // Euler-Maruyama step used while training
  double dt_sample = 0.01; // step used when drawing samples
  Eigen::Index batch_n = 256;
  std::uint64_t seed = 0;

  // Number of steps covering the unit horizon: ceil(1/dt), where a step that
  // does not divide the horizon leaves a shorter final step.
  static int steps(double dt);
  // Length of step k (0-based) on that grid.
  static double step_size(double dt, int k);
  void validate() const;
};

// Time-augmented control u(t, theta): an MLP over [theta, t] with layer norm
// (no affine terms) and GELU on every hidden layer.
class DriftNetwork {
 public:
  static constexpr Eigen::Index kDefaultWidth = 32;
  static constexpr Eigen::Index kDefaultDepth = 8;

  static nn::NetLayout default_layout(Eigen::Index state_dim, Eigen::Index width = kDefaultWidth,
                                      Eigen::Index depth = kDefaultDepth);
  static DriftNetwork initialized(Eigen::Index state_dim, std::uint64_t seed, Eigen::Index width = kDefaultWidth,
                                  Eigen::Index depth = kDefaultDepth);

  DriftNetwork(nn::NetLayout layout, Eigen::VectorXd params);

  Eigen::Index state_dim() const { return layout_.output_dim; }
  const nn::NetLayout& layout() const { return layout_; }
  const Eigen::VectorXd& params() const { return params_; }
  Eigen::VectorXd& params() { return params_; }

  // Control for a batch of states (one per row) at time t.
  Eigen::MatrixXd operator()(double t, const Eigen::MatrixXd& states) const;

 private:
  nn::NetLayout layout_;
  Eigen::VectorXd params_;
};

using DriftFn = std::function<Eigen::MatrixXd(double t, const Eigen::MatrixXd& states)>;

struct TrajectoryBatch {
  Eigen::MatrixXd terminal_states;  // n x d
  Eigen::VectorXd running_costs;    // n, integral of |u|^2 / (2 gamma) dt
};

// Which trajectories to roll out: trajectory `first_trajectory + i` draws its
// Brownian increments from derive_stream(noise_seed, "sde-noise", first_trajectory + i),
// d normals per step, so any trajectory can be reproduced in isolation.
struct RolloutSpec {
  Eigen::Index n = 1;
  double dt = 0.01;
  std::uint64_t noise_seed = 0;
  Eigen::Index first_trajectory = 0;
};

// Euler-Maruyama from theta_0 = 0 over [0, 1] on the grid t_k = k dt
// (last step possibly shorter, see SdeConfig::step_size):
//   theta <- theta + u(t, theta) h + sqrt(gamma) dW,  dW ~ N(0, h I),
//   c     <- c + |u|^2 h / (2 gamma).
// Throws NumericalError naming the step and trajectory on a non-finite state.
TrajectoryBatch simulate(const DriftFn& drift, Eigen::Index dim, double gamma, const RolloutSpec& spec);
TrajectoryBatch simulate(const DriftNetwork& drift, const SdeConfig& cfg, const RolloutSpec& spec);

// Brownian increments dW (n x d, already scaled by sqrt(dt)) for step `step`
// of every trajectory in `spec`; `streams` holds one stream per trajectory.
std::vector<RandomStream> noise_streams(const RolloutSpec& spec);
Eigen::MatrixXd next_increments(std::vector<RandomStream>& streams, Eigen::Index dim, double dt);

// Rollout recorded on a tape for pathwise gradients wrt the drift weights.
struct TapedRollout {
  ad::Var terminal_states;  // n x d
  ad::Var running_costs;    // n x 1
};
TapedRollout simulate_taped(ad::Tape& tape, const nn::TapedMlp& drift, double gamma, const RolloutSpec& spec);

struct LossTerms {
  double total = 0.0;
  double running = 0.0;
  double terminal = 0.0;
};

// Monte Carlo estimate of
//   E[ c_1 - log pi(theta_1) + log N(theta_1; 0, gamma I) ]
// over the rollout in `spec`. Data-backed targets use `data_batch` (empty =
// full data). With `grad_phi` non-null the pathwise gradient wrt the drift
// parameters is written there.
LossTerms loss(const DriftNetwork& drift, const LogDensity& target, const SdeConfig& cfg, const RolloutSpec& spec,
               std::span<const Eigen::Index> data_batch = {}, Eigen::VectorXd* grad_phi = nullptr);

struct TrainRecord {
  int iteration = 0;
  double total = 0.0;
  double running = 0.0;
  double terminal = 0.0;
  double grad_norm = 0.0;
  double seconds = 0.0;
};

struct TrainReport {
  std::vector<TrainRecord> records;

  static constexpr const char* kCsvHeader = "iteration,total,running,terminal,grad_norm,seconds";
  static std::string csv_row(const TrainRecord& r);
  void write_csv(std::ostream& os) const;
};

struct TrainResult {
  DriftNetwork drift;
  TrainReport report;
};

using TrainCallback = std::function<void(const TrainRecord&)>;

// Adam on the pathwise loss gradient. Iteration i uses fresh Brownian noise
// (seed derived from cfg.seed, "train-noise", i) and, for data-backed targets,
// a fresh minibatch (cfg.seed, "minibatch", i). Throws NumericalError if the
// loss stays above 10x its initial value for 100 consecutive iterations.
TrainResult train(DriftNetwork drift, const LogDensity& target, const SdeConfig& cfg, const OptimizerConfig& opt,
                  const TrainCallback& on_step = {});

// n terminal states simulated at cfg.dt_sample; deterministic given seed.
// Trajectories are simulated in aligned blocks of kSampleBlock, so row i is
// bit-identical for every request that contains trajectory first + i.
inline constexpr Eigen::Index kSampleBlock = 64;
Eigen::MatrixXd sample(const DriftNetwork& drift, const SdeConfig& cfg, Eigen::Index n, std::uint64_t seed,
                       Eigen::Index first_trajectory = 0);

enum class CheckpointFormat { json, binary };
CheckpointFormat checkpoint_format_from_string(const std::string& s);

struct Checkpoint {
  DriftNetwork drift;
  SdeConfig sde;
};

// JSON: {"format": "diffuq-checkpoint", "version": 1, "layout": {...}, "sde": {...}, "params": [...]}.
// Binary (little-endian): "DFQC", u32 version, u32 activation, u32 layer_norm,
// u32 affine, u64 input, u64 output, u64 n_hidden, u64 widths[n_hidden],
// f64 gamma, f64 dt_train, f64 dt_sample, u64 batch_n, u64 seed,
// u64 n_params, f64 params[n_params].
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt, CheckpointFormat format);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace diffuq
