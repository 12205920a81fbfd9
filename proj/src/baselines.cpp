#include "diffuq/baselines.hpp"

#include "diffuq/errors.hpp"
#include "diffuq/random.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

namespace diffuq {

// --- SampleBank -----------------------------------------------------------------

void SampleBank::validate() const {
  if (samples.rows() < 1 || samples.cols() < 1) throw NumericalError("sample bank is empty");
  for (Eigen::Index i = 0; i < samples.rows(); ++i) {
    if (!samples.row(i).allFinite()) {
      std::ostringstream os;
      os << "sample bank (" << method << "): non-finite row " << i;
      throw NumericalError(os.str());
    }
  }
}

std::string SampleBank::to_csv() const {
  std::ostringstream os;
  os << std::setprecision(17);
  for (Eigen::Index j = 0; j < dim(); ++j) os << (j ? "," : "") << "theta_" << j;
  os << '\n';
  for (Eigen::Index i = 0; i < size(); ++i) {
    for (Eigen::Index j = 0; j < dim(); ++j) os << (j ? "," : "") << samples(i, j);
    os << '\n';
  }
  return os.str();
}

SampleBank SampleBank::from_csv(const std::string& text, std::string method) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line)) throw DataError(DataError::Kind::io, "sample bank: empty file");
  const auto cols = static_cast<Eigen::Index>(std::count(line.begin(), line.end(), ',') + 1);
  std::vector<double> vals;
  Eigen::Index rows = 0;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string cell;
    Eigen::Index c = 0;
    while (std::getline(ls, cell, ',')) {
      std::size_t used = 0;
      double v = 0.0;
      try {
        v = std::stod(cell, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used == 0 || used != cell.size())
        throw DataError(DataError::Kind::non_numeric, "sample bank: non-numeric cell '" + cell + "'");
      vals.push_back(v);
      ++c;
    }
    if (c != cols) throw DataError(DataError::Kind::bad_column, "sample bank: ragged row");
    ++rows;
  }
  SampleBank bank;
  bank.method = std::move(method);
  bank.samples = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      vals.data(), rows, cols);
  return bank;
}

void SampleBank::save(const std::filesystem::path& path) const {
  const std::string csv = to_csv();
  {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError(DataError::Kind::io, "cannot write " + path.string());
    os << csv;
  }
  nlohmann::json side;
  side["method"] = method;
  side["n"] = size();
  side["dim"] = dim();
  side["provenance"] = provenance;
  std::ostringstream hex;
  hex << std::hex << std::setw(16) << std::setfill('0') << hash_name(csv);
  side["checksum_fnv1a64"] = hex.str();
  std::ofstream js(path.string() + ".json", std::ios::binary);
  if (!js) throw DataError(DataError::Kind::io, "cannot write sidecar for " + path.string());
  js << side.dump(2) << '\n';
}

SampleBank SampleBank::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError(DataError::Kind::io, "cannot open " + path.string());
  std::stringstream buf;
  buf << is.rdbuf();
  std::string method;
  nlohmann::json prov = nlohmann::json::object();
  std::ifstream js(path.string() + ".json");
  if (js) {
    const nlohmann::json side = nlohmann::json::parse(js);
    method = side.value("method", "");
    if (side.contains("provenance")) prov = side["provenance"];
  }
  SampleBank bank = from_csv(buf.str(), method);
  bank.provenance = std::move(prov);
  return bank;
}

// --- MAP ----------------------------------------------------------------------------

namespace {

struct Objective {
  const LogDensity& target;
  // Negative log density and its gradient on the full batch.
  double operator()(const Eigen::VectorXd& x, Eigen::VectorXd& g) const {
    const double lp = target.evaluate(x, &g);
    g = -g;
    return -lp;
  }
};

// BFGS with Armijo backtracking; returns the number of accepted steps.
int bfgs_polish(const Objective& f, Eigen::VectorXd& x, int max_iter, double grad_tol) {
  const Eigen::Index d = x.size();
  Eigen::VectorXd g;
  double fx = f(x, g);
  if (!std::isfinite(fx)) return 0;
  Eigen::MatrixXd h = Eigen::MatrixXd::Identity(d, d);
  bool scaled = false;
  int k = 0;
  Eigen::VectorXd gn;
  for (; k < max_iter && g.norm() >= grad_tol; ++k) {
    Eigen::VectorXd p = -h * g;
    if (p.dot(g) >= 0.0) {
      h.setIdentity();
      p = -g;
    }
    double t = 1.0, fn = 0.0;
    Eigen::VectorXd xn;
    bool ok = false;
    for (int ls = 0; ls < 60; ++ls, t *= 0.5) {
      xn = x + t * p;
      fn = f(xn, gn);
      if (std::isfinite(fn) && gn.allFinite() && fn <= fx + 1e-4 * t * g.dot(p)) {
        ok = true;
        break;
      }
    }
    if (!ok) break;
    const Eigen::VectorXd s = xn - x, y = gn - g;
    const double ys = y.dot(s);
    if (ys > 1e-300) {
      if (!scaled) {
        h *= ys / y.squaredNorm();
        scaled = true;
      }
      const double rho = 1.0 / ys;
      const Eigen::VectorXd hy = h * y;
      // (I - rho s y^T) H (I - rho y s^T) + rho s s^T, expanded
      h += (rho * rho * y.dot(hy) + rho) * (s * s.transpose()) - rho * (hy * s.transpose() + s * hy.transpose());
    }
    x = xn;
    fx = fn;
    g = gn;
  }
  return k;
}

void check_init(const LogDensity& target, const Eigen::VectorXd& init, const char* who) {
  if (init.size() != target.dim()) {
    std::ostringstream os;
    os << who << ": initial point has dimension " << init.size() << ", target " << target.dim();
    throw DimensionError(os.str());
  }
}

}  // namespace

MapResult map_fit(const LogDensity& target, Eigen::VectorXd init, const MapConfig& cfg, std::uint64_t seed) {
  check_init(target, init, "map_fit");
  Eigen::VectorXd x = std::move(init);
  Adam adam(x.size(), cfg.opt);
  DivergenceGuard guard;
  Eigen::VectorXd g;
  int it = 0;
  for (; it < cfg.opt.max_iter; ++it) {
    RandomStream rng = derive_stream(seed, "minibatch", static_cast<std::uint64_t>(it));
    const auto batch = target.draw_batch(rng);
    const double lp = target.evaluate(x, &g, batch);
    if (guard.update(-lp) || !g.allFinite()) {
      std::ostringstream os;
      os << "map_fit diverged at iteration " << it << " (negative log density " << -lp << ")";
      throw NumericalError(os.str());
    }
    g = -g;
    if (batch.empty() && g.norm() < cfg.grad_tol) break;
    adam.step(x, g);
  }
  const Objective f{target};
  it += bfgs_polish(f, x, cfg.polish_iter, cfg.grad_tol);
  MapResult r;
  r.log_density = -f(x, g);
  r.grad_norm = g.norm();
  r.theta = std::move(x);
  r.iterations = it;
  if (!std::isfinite(r.log_density) || !r.theta.allFinite()) throw NumericalError("map_fit: non-finite optimum");
  return r;
}

MapResult map_fit(const RegressionModel& model, const Dataset& data, const MapConfig& cfg, std::uint64_t seed,
                  Eigen::Index minibatch, double prior_var) {
  const PosteriorTarget target(model, data, minibatch, prior_var);
  RandomStream init_rng = derive_stream(seed, "init");
  return map_fit(target, model.init_params(init_rng), cfg, seed);
}

SampleBank ensemble_fit(const RegressionModel& model, const Dataset& data, std::span<const std::uint64_t> seeds,
                        const MapConfig& cfg, Eigen::Index minibatch, double prior_var) {
  if (seeds.size() < 2) throw ConfigError("ensemble_fit: need at least 2 members");
  SampleBank bank;
  bank.method = "de";
  bank.samples.resize(static_cast<Eigen::Index>(seeds.size()), model.dim());
  nlohmann::json member_seeds = nlohmann::json::array();
  for (std::size_t k = 0; k < seeds.size(); ++k) {
    try {
      bank.samples.row(static_cast<Eigen::Index>(k)) =
          map_fit(model, data, cfg, seeds[k], minibatch, prior_var).theta.transpose();
    } catch (const NumericalError& e) {
      std::ostringstream os;
      os << "ensemble member " << k << " (seed " << seeds[k] << "): " << e.what();
      throw NumericalError(os.str());
    }
    member_seeds.push_back(seeds[k]);
  }
  bank.provenance["member_seeds"] = member_seeds;
  return bank;
}

// --- SGLD ---------------------------------------------------------------------------

SampleBank sgld_sample(const LogDensity& target, const Eigen::VectorXd& init, const SgldConfig& cfg,
                       std::uint64_t seed) {
  check_init(target, init, "sgld_sample");
  if (!(cfg.step_size > 0.0)) throw ConfigError("sgld: step size must be positive");
  if (cfg.n_chains < 1 || cfg.n_samples < cfg.n_chains || cfg.n_samples % cfg.n_chains != 0)
    throw ConfigError("sgld: n_samples must be a positive multiple of n_chains");
  if (!(cfg.burn_in >= 0.0 && cfg.burn_in < 1.0)) throw ConfigError("sgld: burn_in must lie in [0, 1)");
  const int burn = static_cast<int>(std::floor(cfg.burn_in * cfg.n_steps));
  const Eigen::Index per_chain = cfg.n_samples / cfg.n_chains;
  const int kept = cfg.n_steps - burn;
  if (kept < per_chain) throw ConfigError("sgld: too few post-burn-in steps for the requested samples");
  const int stride = kept / static_cast<int>(per_chain);

  SampleBank bank;
  bank.method = "sgld";
  bank.samples.resize(cfg.n_samples, target.dim());
  const double sd = std::sqrt(cfg.step_size);
  Eigen::VectorXd g;
  Eigen::Index out = 0;
  for (Eigen::Index c = 0; c < cfg.n_chains; ++c) {
    RandomStream noise = derive_stream(seed, "sgld-noise", static_cast<std::uint64_t>(c));
    Eigen::VectorXd x = init;
    for (int s = 0; s < cfg.n_steps; ++s) {
      RandomStream brng = derive_stream(seed, "minibatch", static_cast<std::uint64_t>(c) * cfg.n_steps + s);
      const auto batch = target.draw_batch(brng);
      target.evaluate(x, &g, batch);
      x += 0.5 * cfg.step_size * g + sd * noise.normal_vector(x.size());
      if (!x.allFinite()) {
        std::ostringstream os;
        os << "sgld: non-finite state at step " << s << " of chain " << c;
        throw NumericalError(os.str());
      }
      const int pos = s - burn + 1;
      if (pos > 0 && (cfg.n_steps - 1 - s) % stride == 0 && (cfg.n_steps - 1 - s) / stride < per_chain)
        bank.samples.row(out++) = x.transpose();
    }
  }
  bank.provenance = {{"step_size", cfg.step_size}, {"n_steps", cfg.n_steps}, {"burn_in", cfg.burn_in},
                     {"n_chains", cfg.n_chains}, {"thin", stride}, {"seed", seed}};
  return bank;
}

// --- SVGD ---------------------------------------------------------------------------

namespace {
Eigen::MatrixXd squared_distances(const Eigen::MatrixXd& x) {
  const Eigen::VectorXd sq = x.rowwise().squaredNorm();
  Eigen::MatrixXd d2 = (-2.0 * x * x.transpose()).colwise() + sq;
  d2.rowwise() += sq.transpose();
  return d2.cwiseMax(0.0);
}
}  // namespace

double median_bandwidth(const Eigen::MatrixXd& particles) {
  const Eigen::Index n = particles.rows();
  if (n < 2) return 1.0;
  const Eigen::MatrixXd d2 = squared_distances(particles);
  std::vector<double> pairs;
  pairs.reserve(static_cast<std::size_t>(n * (n - 1) / 2));
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = i + 1; j < n; ++j) pairs.push_back(std::sqrt(d2(i, j)));
  const std::size_t m = pairs.size();
  std::nth_element(pairs.begin(), pairs.begin() + static_cast<std::ptrdiff_t>(m / 2), pairs.end());
  double med = pairs[m / 2];
  if (m % 2 == 0) {
    const double lo = *std::max_element(pairs.begin(), pairs.begin() + static_cast<std::ptrdiff_t>(m / 2));
    med = 0.5 * (med + lo);
  }
  const double h = med * med / std::log(static_cast<double>(n));
  return (h > 0.0 && std::isfinite(h)) ? h : 1.0;
}

Eigen::MatrixXd svgd_update(const Eigen::MatrixXd& particles, const LogDensity& target,
                            std::optional<double> bandwidth, double step, std::span<const Eigen::Index> batch) {
  const Eigen::Index n = particles.rows(), d = particles.cols();
  if (n < 1) throw ConfigError("svgd: need at least one particle");
  if (d != target.dim()) throw DimensionError("svgd: particle dimension differs from target");
  double h = bandwidth ? *bandwidth : median_bandwidth(particles);
  if (!(h > 0.0) || !std::isfinite(h)) h = 1.0;
  Eigen::MatrixXd grads(n, d);
  Eigen::VectorXd g;
  for (Eigen::Index i = 0; i < n; ++i) {
    target.evaluate(particles.row(i).transpose(), &g, batch);
    grads.row(i) = g.transpose();
  }
  const Eigen::MatrixXd k = (-squared_distances(particles) / h).array().exp().matrix();
  // sum_j grad_{x_j} k(x_j, x_i) = (2/h) sum_j k_ij (x_i - x_j)
  const Eigen::MatrixXd repulse =
      (2.0 / h) * ((particles.array().colwise() * k.rowwise().sum().array()).matrix() - k * particles);
  const Eigen::MatrixXd phi = (k * grads + repulse) / static_cast<double>(n);
  Eigen::MatrixXd next = particles + step * phi;
  if (!next.allFinite()) throw NumericalError("svgd: non-finite particle after update");
  return next;
}

SampleBank svgd_run(const LogDensity& target, const SvgdConfig& cfg, std::uint64_t seed) {
  if (cfg.n_particles < 1) throw ConfigError("svgd: n_particles must be positive");
  RandomStream rng = derive_stream(seed, "init");
  Eigen::MatrixXd x(cfg.n_particles, target.dim());
  for (Eigen::Index i = 0; i < x.rows(); ++i) x.row(i) = rng.normal_vector(x.cols()).transpose();
  return svgd_run(target, std::move(x), cfg, seed);
}

SampleBank svgd_run(const LogDensity& target, Eigen::MatrixXd particles, const SvgdConfig& cfg, std::uint64_t seed) {
  if (!(cfg.step > 0.0)) throw ConfigError("svgd: step must be positive");
  for (int s = 0; s < cfg.n_steps; ++s) {
    RandomStream brng = derive_stream(seed, "minibatch", static_cast<std::uint64_t>(s));
    const auto batch = target.draw_batch(brng);
    try {
      particles = svgd_update(particles, target, cfg.bandwidth, cfg.step, batch);
    } catch (const NumericalError& e) {
      std::ostringstream os;
      os << e.what() << " (step " << s << ")";
      throw NumericalError(os.str());
    }
  }
  SampleBank bank;
  bank.method = "svgd";
  bank.samples = std::move(particles);
  bank.provenance = {{"n_steps", cfg.n_steps}, {"step", cfg.step}, {"seed", seed}};
  if (cfg.bandwidth) bank.provenance["bandwidth"] = *cfg.bandwidth;
  else bank.provenance["bandwidth"] = "median";
  return bank;
}

// --- MFVI ---------------------------------------------------------------------------

SampleBank MfviResult::sample(Eigen::Index n, std::uint64_t seed) const {
  if (n < 1) throw ConfigError("mfvi: sample count must be positive");
  RandomStream rng = derive_stream(seed, "mfvi-sample");
  const Eigen::VectorXd s = std();
  SampleBank bank;
  bank.method = "mfvi";
  bank.samples.resize(n, mean.size());
  for (Eigen::Index i = 0; i < n; ++i)
    bank.samples.row(i) = (mean + s.cwiseProduct(rng.normal_vector(mean.size()))).transpose();
  bank.provenance = {{"seed", seed}};
  return bank;
}

MfviResult mfvi_fit(const LogDensity& target, Eigen::VectorXd init_mean, const MfviConfig& cfg, std::uint64_t seed) {
  check_init(target, init_mean, "mfvi_fit");
  if (!(cfg.average_tail >= 0.0 && cfg.average_tail <= 1.0)) throw ConfigError("mfvi: average_tail must lie in [0, 1]");
  const Eigen::Index d = init_mean.size();
  Eigen::VectorXd params(2 * d);
  params.head(d) = init_mean;
  params.tail(d).setConstant(cfg.init_log_std);
  Adam adam(2 * d, cfg.opt);
  DivergenceGuard guard;
  RandomStream noise = derive_stream(seed, "mfvi-noise");
  const int avg_from = cfg.opt.max_iter - static_cast<int>(std::floor(cfg.average_tail * cfg.opt.max_iter));
  Eigen::VectorXd avg = Eigen::VectorXd::Zero(2 * d);
  int n_avg = 0;
  Eigen::VectorXd g, grad(2 * d);
  for (int it = 0; it < cfg.opt.max_iter; ++it) {
    RandomStream brng = derive_stream(seed, "minibatch", static_cast<std::uint64_t>(it));
    const auto batch = target.draw_batch(brng);
    const Eigen::VectorXd eps = noise.normal_vector(d);
    const Eigen::VectorXd s = params.tail(d).array().exp().matrix();
    const Eigen::VectorXd theta = params.head(d) + s.cwiseProduct(eps);
    const double lp = target.evaluate(theta, &g, batch);
    // negative ELBO up to a constant: -log pi(theta) - sum log_std
    const double neg_elbo = -lp - params.tail(d).sum();
    if (guard.update(neg_elbo) || !g.allFinite()) {
      std::ostringstream os;
      os << "mfvi diverged at iteration " << it;
      throw NumericalError(os.str());
    }
    grad.head(d) = -g;
    grad.tail(d) = -(g.array() * eps.array() * s.array()).matrix() - Eigen::VectorXd::Ones(d);
    adam.step(params, grad);
    if (it >= avg_from) {
      avg += params;
      ++n_avg;
    }
  }
  if (n_avg > 0) params = avg / n_avg;
  return {params.head(d), params.tail(d)};
}

// --- MC dropout ---------------------------------------------------------------------

Eigen::VectorXd mc_dropout_fit(const HeteroModel& model, const Dataset& data, double rate, const MapConfig& cfg,
                               std::uint64_t seed, Eigen::Index minibatch, double prior_var) {
  if (!(rate > 0.0 && rate < 1.0)) throw ConfigError("dropout rate must lie in (0, 1)");
  if (data.size() < 1) throw ConfigError("mc_dropout_fit: empty dataset");
  RandomStream init_rng = derive_stream(seed, "init");
  Eigen::VectorXd x = model.init_params(init_rng);
  Adam adam(x.size(), cfg.opt);
  DivergenceGuard guard;
  const PosteriorTarget likelihood_only(model, data, minibatch, prior_var);
  const double scale_full = static_cast<double>(data.size());
  Eigen::VectorXd g;
  for (int it = 0; it < cfg.opt.max_iter; ++it) {
    RandomStream brng = derive_stream(seed, "minibatch", static_cast<std::uint64_t>(it));
    const auto batch = likelihood_only.draw_batch(brng);
    RandomStream mrng = derive_stream(seed, "dropout-train", static_cast<std::uint64_t>(it));
    const Eigen::VectorXd mask = model.dropout_multipliers(rate, mrng);
    const Eigen::VectorXd xm = x.cwiseProduct(mask);
    const double ll = model.loglik_sum(xm, data, batch, &g);
    const double scale = batch.empty() ? 1.0 : scale_full / static_cast<double>(batch.size());
    const double neg = -scale * ll + 0.5 * x.squaredNorm() / prior_var;
    if (guard.update(neg) || !g.allFinite()) {
      std::ostringstream os;
      os << "mc_dropout_fit diverged at iteration " << it;
      throw NumericalError(os.str());
    }
    const Eigen::VectorXd grad = -scale * mask.cwiseProduct(g) + x / prior_var;
    adam.step(x, grad);
  }
  return x;
}

SampleBank mc_dropout_bank(const HeteroModel& model, const Eigen::VectorXd& fitted, double rate, Eigen::Index n,
                           std::uint64_t seed) {
  if (fitted.size() != model.dim()) throw DimensionError("mc_dropout_bank: parameter length differs from model");
  if (n < 1) throw ConfigError("mc_dropout_bank: n must be positive");
  SampleBank bank;
  bank.method = "mcdropout";
  bank.samples.resize(n, fitted.size());
  for (Eigen::Index i = 0; i < n; ++i) {
    RandomStream rng = derive_stream(seed, "dropout", static_cast<std::uint64_t>(i));
    bank.samples.row(i) = fitted.cwiseProduct(model.dropout_multipliers(rate, rng)).transpose();
  }
  bank.provenance = {{"rate", rate}, {"seed", seed}};
  return bank;
}

}  // namespace diffuq
