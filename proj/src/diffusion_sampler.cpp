#include "diffuq/diffusion_sampler.hpp"

#include "diffuq/errors.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <ostream>
#include <sstream>

namespace diffuq {

namespace {

constexpr double kLog2Pi = 1.83787706640934548356;

void check_finite_states(const Eigen::MatrixXd& states, int step) {
  if (states.allFinite()) return;
  for (Eigen::Index i = 0; i < states.rows(); ++i) {
    if (!states.row(i).allFinite()) {
      std::ostringstream os;
      os << "non-finite SDE state at step " << step << ", trajectory " << i;
      throw NumericalError(os.str());
    }
  }
}

Eigen::MatrixXd with_time_column(const Eigen::MatrixXd& states, double t) {
  Eigen::MatrixXd in(states.rows(), states.cols() + 1);
  in.leftCols(states.cols()) = states;
  in.col(states.cols()).setConstant(t);
  return in;
}

}  // namespace

int SdeConfig::steps(double dt) {
  if (!(dt > 0.0) || dt > kHorizon) throw ConfigError("time step must lie in (0, 1]");
  const double k = kHorizon / dt;
  const double r = std::round(k);
  if (std::abs(k - r) <= 1e-9 * std::max(1.0, k)) return static_cast<int>(r);
  return static_cast<int>(std::ceil(k));
}

double SdeConfig::step_size(double dt, int k) {
  const int n = steps(dt);
  if (k + 1 < n) return dt;
  return kHorizon - (n - 1) * dt;
}

void SdeConfig::validate() const {
  if (!(gamma > 0.0)) throw ConfigError("gamma must be positive");
  steps(dt_train);
  steps(dt_sample);
  if (batch_n < 1) throw ConfigError("batch_n must be positive");
}

// --- DriftNetwork ------------------------------------------------------------

nn::NetLayout DriftNetwork::default_layout(Eigen::Index state_dim, Eigen::Index width, Eigen::Index depth) {
  nn::NetLayout layout;
  layout.input_dim = state_dim + 1;
  layout.output_dim = state_dim;
  layout.hidden_widths.assign(static_cast<std::size_t>(depth), width);
  layout.activation = nn::Activation::gelu;
  layout.layer_norm = true;
  layout.layernorm_affine = false;
  return layout;
}

DriftNetwork DriftNetwork::initialized(Eigen::Index state_dim, std::uint64_t seed, Eigen::Index width,
                                       Eigen::Index depth) {
  nn::NetLayout layout = default_layout(state_dim, width, depth);
  RandomStream rng = derive_stream(seed, "init");
  Eigen::VectorXd params = nn::init_params(layout, rng);
  return DriftNetwork(std::move(layout), std::move(params));
}

DriftNetwork::DriftNetwork(nn::NetLayout layout, Eigen::VectorXd params)
    : layout_(std::move(layout)), params_(std::move(params)) {
  layout_.validate();
  if (layout_.input_dim != layout_.output_dim + 1)
    throw DimensionError("drift network: input width must be state dimension + 1 (time)");
  if (layout_.layernorm_affine) throw ConfigError("drift network: layer norm must not carry affine parameters");
  if (params_.size() != layout_.param_count()) {
    std::ostringstream os;
    os << "drift network: " << params_.size() << " parameters, layout requires " << layout_.param_count();
    throw DimensionError(os.str());
  }
  if (!params_.allFinite()) throw NumericalError("drift network: non-finite parameters");
}

Eigen::MatrixXd DriftNetwork::operator()(double t, const Eigen::MatrixXd& states) const {
  return nn::mlp_forward_batch<double>(layout_, params_, with_time_column(states, t));
}

// --- Simulation --------------------------------------------------------------

std::vector<RandomStream> noise_streams(const RolloutSpec& spec) {
  std::vector<RandomStream> streams;
  streams.reserve(static_cast<std::size_t>(spec.n));
  for (Eigen::Index i = 0; i < spec.n; ++i) {
    streams.push_back(derive_stream(spec.noise_seed, "sde-noise", static_cast<std::uint64_t>(spec.first_trajectory + i)));
  }
  return streams;
}

Eigen::MatrixXd next_increments(std::vector<RandomStream>& streams, Eigen::Index dim, double dt) {
  const double sd = std::sqrt(dt);
  Eigen::MatrixXd dw(static_cast<Eigen::Index>(streams.size()), dim);
  for (std::size_t i = 0; i < streams.size(); ++i) {
    for (Eigen::Index j = 0; j < dim; ++j) dw(static_cast<Eigen::Index>(i), j) = sd * streams[i].normal();
  }
  return dw;
}

TrajectoryBatch simulate(const DriftFn& drift, Eigen::Index dim, double gamma, const RolloutSpec& spec) {
  if (spec.n < 1) throw ConfigError("simulate: need at least one trajectory");
  if (!(gamma > 0.0)) throw ConfigError("simulate: gamma must be positive");
  const int steps = SdeConfig::steps(spec.dt);
  const double sqrt_gamma = std::sqrt(gamma);
  std::vector<RandomStream> streams = noise_streams(spec);
  TrajectoryBatch out{Eigen::MatrixXd::Zero(spec.n, dim), Eigen::VectorXd::Zero(spec.n)};
  Eigen::MatrixXd& theta = out.terminal_states;
  for (int k = 0; k < steps; ++k) {
    const double t = k * spec.dt;
    const Eigen::MatrixXd u = drift(t, theta);
    if (u.rows() != spec.n || u.cols() != dim) throw DimensionError("simulate: drift returned the wrong shape");
    const double h = SdeConfig::step_size(spec.dt, k);
    out.running_costs += u.rowwise().squaredNorm() * (h / (2.0 * gamma));
    theta += u * h + sqrt_gamma * next_increments(streams, dim, h);
    check_finite_states(theta, k);
  }
  return out;
}

TrajectoryBatch simulate(const DriftNetwork& drift, const SdeConfig& cfg, const RolloutSpec& spec) {
  return simulate([&drift](double t, const Eigen::MatrixXd& x) { return drift(t, x); }, drift.state_dim(), cfg.gamma,
                  spec);
}

TapedRollout simulate_taped(ad::Tape& tape, const nn::TapedMlp& drift, double gamma, const RolloutSpec& spec) {
  if (spec.n < 1) throw ConfigError("simulate: need at least one trajectory");
  const Eigen::Index dim = drift.layout().output_dim;
  const int steps = SdeConfig::steps(spec.dt);
  const double sqrt_gamma = std::sqrt(gamma);
  std::vector<RandomStream> streams = noise_streams(spec);
  ad::Var theta = tape.constant(Eigen::MatrixXd::Zero(spec.n, dim));
  ad::Var cost = tape.constant(Eigen::MatrixXd::Zero(spec.n, 1));
  for (int k = 0; k < steps; ++k) {
    const double t = k * spec.dt;
    const ad::Var input = ad::concat_cols(theta, tape.constant(Eigen::MatrixXd::Constant(spec.n, 1, t)));
    const ad::Var u = drift.forward(input);
    const double h = SdeConfig::step_size(spec.dt, k);
    cost = ad::add(cost, ad::scale(ad::row_squared_norm(u), h / (2.0 * gamma)));
    const ad::Var noise = tape.constant(sqrt_gamma * next_increments(streams, dim, h));
    theta = ad::add(ad::add(theta, ad::scale(u, h)), noise);
    check_finite_states(theta.value(), k);
  }
  return {theta, cost};
}

// --- Loss ----------------------------------------------------------------------

LossTerms loss(const DriftNetwork& drift, const LogDensity& target, const SdeConfig& cfg, const RolloutSpec& spec,
               std::span<const Eigen::Index> data_batch, Eigen::VectorXd* grad_phi) {
  const Eigen::Index d = drift.state_dim();
  if (target.dim() != d) {
    std::ostringstream os;
    os << "loss: target dimension " << target.dim() << " differs from state dimension " << d;
    throw DimensionError(os.str());
  }
  ad::Tape tape;
  const ad::Var phi = grad_phi ? tape.leaf(drift.params()) : tape.constant(drift.params());
  const nn::TapedMlp net(drift.layout(), phi);
  const TapedRollout roll = simulate_taped(tape, net, cfg.gamma, spec);

  const Eigen::MatrixXd& theta = roll.terminal_states.value();
  const double log_ref_norm = -0.5 * static_cast<double>(d) * (kLog2Pi + std::log(cfg.gamma));
  Eigen::VectorXd terminal(spec.n);
  Eigen::MatrixXd dterminal(spec.n, d);
  Eigen::VectorXd g;
  for (Eigen::Index i = 0; i < spec.n; ++i) {
    const Eigen::VectorXd th = theta.row(i).transpose();
    const double lp = target.evaluate(th, grad_phi ? &g : nullptr, data_batch);
    if (!std::isfinite(lp)) {
      std::ostringstream os;
      os << "target log-density is not finite at trajectory " << i;
      throw NumericalError(os.str());
    }
    const double log_ref = log_ref_norm - 0.5 * th.squaredNorm() / cfg.gamma;
    terminal[i] = log_ref - lp;
    if (grad_phi) dterminal.row(i) = (-g - th / cfg.gamma).transpose();
  }

  LossTerms out;
  out.running = roll.running_costs.value().mean();
  out.terminal = terminal.mean();
  out.total = out.running + out.terminal;
  if (!grad_phi) return out;

  const int theta_id = roll.terminal_states.id();
  const ad::Var term_node = tape.record(
      terminal, tape.requires_grad(theta_id),
      [theta_id, dterminal = std::move(dterminal)](ad::Tape& tp, int self) {
        Eigen::MatrixXd gth = dterminal.array().colwise() * tp.grad_ref(self).col(0).array();
        tp.accumulate(theta_id, gth);
      },
      "terminal_cost");
  const ad::Var objective = ad::mean(ad::add(roll.running_costs, term_node));
  tape.backward(objective);
  *grad_phi = tape.grad(phi).col(0);
  return out;
}

// --- Training ------------------------------------------------------------------

std::string TrainReport::csv_row(const TrainRecord& r) {
  std::ostringstream os;
  os << std::setprecision(17) << r.iteration << ',' << r.total << ',' << r.running << ',' << r.terminal << ','
     << r.grad_norm << ',' << r.seconds;
  return os.str();
}

void TrainReport::write_csv(std::ostream& os) const {
  os << kCsvHeader << '\n';
  for (const auto& r : records) os << csv_row(r) << '\n';
}

TrainResult train(DriftNetwork drift, const LogDensity& target, const SdeConfig& cfg, const OptimizerConfig& opt,
                  const TrainCallback& on_step) {
  cfg.validate();
  if (opt.max_iter < 1) throw ConfigError("train: max_iter must be at least 1");
  Adam adam(drift.params().size(), opt);
  DivergenceGuard guard(100);
  TrainReport report;
  report.records.reserve(static_cast<std::size_t>(opt.max_iter));
  const auto start = std::chrono::steady_clock::now();
  Eigen::VectorXd grad;
  for (int it = 0; it < opt.max_iter; ++it) {
    RandomStream batch_rng = derive_stream(cfg.seed, "minibatch", static_cast<std::uint64_t>(it));
    const std::vector<Eigen::Index> batch = target.draw_batch(batch_rng);
    const RolloutSpec spec{cfg.batch_n, cfg.dt_train, derive_seed(cfg.seed, "train-noise", static_cast<std::uint64_t>(it)), 0};
    const LossTerms l = loss(drift, target, cfg, spec, batch, &grad);
    if (!grad.allFinite()) {
      std::ostringstream os;
      os << "non-finite drift gradient at iteration " << it;
      throw NumericalError(os.str());
    }
    adam.step(drift.params(), grad);
    TrainRecord rec{it, l.total, l.running, l.terminal, grad.norm(),
                    std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count()};
    report.records.push_back(rec);
    if (on_step) on_step(rec);
    if (guard.update(l.total)) {
      std::ostringstream os;
      os << "training diverged at iteration " << it << " (loss " << l.total << ", initial " << guard.initial() << ")";
      throw NumericalError(os.str());
    }
  }
  return {std::move(drift), std::move(report)};
}

Eigen::MatrixXd sample(const DriftNetwork& drift, const SdeConfig& cfg, Eigen::Index n, std::uint64_t seed,
                       Eigen::Index first_trajectory) {
  if (n < 1 || first_trajectory < 0) throw ConfigError("sample: need n >= 1 and a non-negative first trajectory");
  // aligned fixed-size blocks: a trajectory's value never depends on the request size
  const Eigen::Index lo = first_trajectory / kSampleBlock, hi = (first_trajectory + n - 1) / kSampleBlock;
  Eigen::MatrixXd out(n, drift.state_dim());
  for (Eigen::Index b = lo; b <= hi; ++b) {
    const Eigen::Index start = b * kSampleBlock;
    const Eigen::MatrixXd block =
        simulate(drift, cfg, RolloutSpec{kSampleBlock, cfg.dt_sample, seed, start}).terminal_states;
    const Eigen::Index from = std::max(start, first_trajectory), to = std::min(start + kSampleBlock, first_trajectory + n);
    out.middleRows(from - first_trajectory, to - from) = block.middleRows(from - start, to - from);
  }
  return out;
}

// --- Checkpoints -----------------------------------------------------------------

CheckpointFormat checkpoint_format_from_string(const std::string& s) {
  if (s == "json") return CheckpointFormat::json;
  if (s == "binary") return CheckpointFormat::binary;
  throw ConfigError("unknown checkpoint format '" + s + "' (expected json or binary)");
}

namespace {

constexpr char kMagic[4] = {'D', 'F', 'Q', 'C'};
constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
void put_le(std::ostream& os, T v) {
  std::uint64_t bits = 0;
  if constexpr (std::is_same_v<T, double>) {
    bits = std::bit_cast<std::uint64_t>(v);
  } else {
    bits = static_cast<std::uint64_t>(v);
  }
  for (std::size_t i = 0; i < sizeof(T); ++i) os.put(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

template <typename T>
T get_le(std::istream& is) {
  std::uint64_t bits = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    const int c = is.get();
    if (c == std::char_traits<char>::eof()) throw ConfigError("checkpoint: truncated binary file");
    bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * i);
  }
  if constexpr (std::is_same_v<T, double>) {
    return std::bit_cast<double>(bits);
  } else {
    return static_cast<T>(bits);
  }
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt, CheckpointFormat format) {
  const nn::NetLayout& layout = ckpt.drift.layout();
  const Eigen::VectorXd& p = ckpt.drift.params();
  if (format == CheckpointFormat::json) {
    nlohmann::json j;
    j["format"] = "diffuq-checkpoint";
    j["version"] = kCheckpointVersion;
    j["layout"] = {{"input_dim", layout.input_dim},
                   {"output_dim", layout.output_dim},
                   {"hidden_widths", layout.hidden_widths},
                   {"activation", nn::to_string(layout.activation)},
                   {"layer_norm", layout.layer_norm},
                   {"layernorm_affine", layout.layernorm_affine}};
    j["sde"] = {{"gamma", ckpt.sde.gamma},
                {"dt_train", ckpt.sde.dt_train},
                {"dt_sample", ckpt.sde.dt_sample},
                {"batch_n", ckpt.sde.batch_n},
                {"seed", ckpt.sde.seed}};
    j["params"] = std::vector<double>(p.data(), p.data() + p.size());
    std::ofstream os(path);
    if (!os) throw ConfigError("cannot write checkpoint " + path.string());
    os << j.dump(1) << '\n';
    return;
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ConfigError("cannot write checkpoint " + path.string());
  os.write(kMagic, 4);
  put_le<std::uint32_t>(os, kCheckpointVersion);
  put_le<std::uint32_t>(os, layout.activation == nn::Activation::gelu ? 0u : 1u);
  put_le<std::uint32_t>(os, layout.layer_norm ? 1u : 0u);
  put_le<std::uint32_t>(os, layout.layernorm_affine ? 1u : 0u);
  put_le<std::uint64_t>(os, static_cast<std::uint64_t>(layout.input_dim));
  put_le<std::uint64_t>(os, static_cast<std::uint64_t>(layout.output_dim));
  put_le<std::uint64_t>(os, layout.hidden_widths.size());
  for (auto w : layout.hidden_widths) put_le<std::uint64_t>(os, static_cast<std::uint64_t>(w));
  put_le<double>(os, ckpt.sde.gamma);
  put_le<double>(os, ckpt.sde.dt_train);
  put_le<double>(os, ckpt.sde.dt_sample);
  put_le<std::uint64_t>(os, static_cast<std::uint64_t>(ckpt.sde.batch_n));
  put_le<std::uint64_t>(os, ckpt.sde.seed);
  put_le<std::uint64_t>(os, static_cast<std::uint64_t>(p.size()));
  for (Eigen::Index i = 0; i < p.size(); ++i) put_le<double>(os, p[i]);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot open checkpoint " + path.string());
  char head[4] = {};
  is.read(head, 4);
  nn::NetLayout layout;
  SdeConfig sde;
  Eigen::VectorXd params;
  if (is.gcount() == 4 && std::memcmp(head, kMagic, 4) == 0) {
    if (get_le<std::uint32_t>(is) != kCheckpointVersion) throw ConfigError("checkpoint: unsupported version");
    layout.activation = get_le<std::uint32_t>(is) == 0 ? nn::Activation::gelu : nn::Activation::identity;
    layout.layer_norm = get_le<std::uint32_t>(is) != 0;
    layout.layernorm_affine = get_le<std::uint32_t>(is) != 0;
    layout.input_dim = static_cast<Eigen::Index>(get_le<std::uint64_t>(is));
    layout.output_dim = static_cast<Eigen::Index>(get_le<std::uint64_t>(is));
    const auto n_hidden = get_le<std::uint64_t>(is);
    for (std::uint64_t i = 0; i < n_hidden; ++i) layout.hidden_widths.push_back(static_cast<Eigen::Index>(get_le<std::uint64_t>(is)));
    sde.gamma = get_le<double>(is);
    sde.dt_train = get_le<double>(is);
    sde.dt_sample = get_le<double>(is);
    sde.batch_n = static_cast<Eigen::Index>(get_le<std::uint64_t>(is));
    sde.seed = get_le<std::uint64_t>(is);
    const auto n = static_cast<Eigen::Index>(get_le<std::uint64_t>(is));
    params.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) params[i] = get_le<double>(is);
  } else {
    is.clear();
    is.seekg(0);
    nlohmann::json j;
    try {
      is >> j;
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("checkpoint: not a binary or JSON checkpoint: ") + e.what());
    }
    if (j.value("format", "") != "diffuq-checkpoint") throw ConfigError("checkpoint: missing format tag");
    const auto& l = j.at("layout");
    layout.input_dim = l.at("input_dim").get<Eigen::Index>();
    layout.output_dim = l.at("output_dim").get<Eigen::Index>();
    layout.hidden_widths = l.at("hidden_widths").get<std::vector<Eigen::Index>>();
    layout.activation = nn::activation_from_string(l.at("activation").get<std::string>());
    layout.layer_norm = l.at("layer_norm").get<bool>();
    layout.layernorm_affine = l.at("layernorm_affine").get<bool>();
    const auto& s = j.at("sde");
    sde.gamma = s.at("gamma").get<double>();
    sde.dt_train = s.at("dt_train").get<double>();
    sde.dt_sample = s.at("dt_sample").get<double>();
    sde.batch_n = s.at("batch_n").get<Eigen::Index>();
    sde.seed = s.at("seed").get<std::uint64_t>();
    const auto v = j.at("params").get<std::vector<double>>();
    params = Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
  }
  sde.validate();
  return {DriftNetwork(std::move(layout), std::move(params)), sde};
}

}  // namespace diffuq
