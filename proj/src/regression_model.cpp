#include "diffuq/regression_model.hpp"

#include "diffuq/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>

namespace diffuq {

namespace {

constexpr double kHalfLog2Pi = 0.91893853320467274178;

void gather(const Dataset& data, std::span<const Eigen::Index> rows, Eigen::MatrixXd& x, Eigen::VectorXd& y) {
  if (rows.empty()) {
    x = data.inputs;
    y = data.targets;
    return;
  }
  x.resize(static_cast<Eigen::Index>(rows.size()), data.inputs.cols());
  y.resize(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto r = rows[i];
    if (r < 0 || r >= data.size()) throw std::out_of_range("dataset row index out of range");
    x.row(static_cast<Eigen::Index>(i)) = data.inputs.row(r);
    y[static_cast<Eigen::Index>(i)] = data.targets[r];
  }
}

void check_theta(const Eigen::VectorXd& theta, Eigen::Index dim) {
  if (theta.size() != dim) {
    std::ostringstream os;
    os << "parameter vector has " << theta.size() << " entries, model requires " << dim;
    throw DimensionError(os.str());
  }
}

}  // namespace

Standardization Standardization::fit(const Eigen::MatrixXd& inputs, const Eigen::VectorXd& targets) {
  Standardization s;
  const auto n = static_cast<double>(inputs.rows());
  s.x_mean = inputs.colwise().mean();
  s.x_scale = ((inputs.rowwise() - s.x_mean).array().square().colwise().sum() / n).sqrt().matrix();
  s.x_scale = s.x_scale.cwiseMax(kScaleFloor);
  s.y_mean = targets.mean();
  s.y_scale = std::max(std::sqrt((targets.array() - s.y_mean).square().sum() / n), kScaleFloor);
  return s;
}

Eigen::MatrixXd Standardization::transform_inputs(const Eigen::MatrixXd& raw) const {
  return ((raw.rowwise() - x_mean).array().rowwise() / x_scale.array()).matrix();
}

Eigen::VectorXd Standardization::transform_targets(const Eigen::VectorXd& raw) const {
  return (raw.array() - y_mean) / y_scale;
}

Dataset Dataset::rows(std::span<const Eigen::Index> idx) const {
  Dataset out;
  gather(*this, idx, out.inputs, out.targets);
  out.standardization = standardization;
  if (noise_std) {
    Eigen::VectorXd ns(static_cast<Eigen::Index>(idx.size()));
    for (std::size_t i = 0; i < idx.size(); ++i) ns[static_cast<Eigen::Index>(i)] = (*noise_std)[idx[i]];
    out.noise_std = ns;
  }
  return out;
}

void Dataset::validate() const {
  if (inputs.rows() != targets.size())
    throw DataError(DataError::Kind::bad_column, "dataset: input rows and target count differ");
  if (!inputs.allFinite() || !targets.allFinite())
    throw DataError(DataError::Kind::missing_value, "dataset: non-finite entries");
}

double gaussian_loglik(double y, double mean, double variance) {
  const double r = y - mean;
  return -kHalfLog2Pi - 0.5 * std::log(variance) - 0.5 * r * r / variance;
}

MeanVariance mean_and_variance(const RegressionModel& model, const Eigen::VectorXd& theta, const Eigen::VectorXd& x) {
  Eigen::VectorXd m, v;
  model.predict(theta, x.transpose(), m, v);
  return {m[0], v[0]};
}

double loglik(const RegressionModel& model, const Eigen::VectorXd& theta, const Eigen::VectorXd& x, double y) {
  const MeanVariance mv = mean_and_variance(model, theta, x);
  return gaussian_loglik(y, mv.mean, mv.variance);
}

// --- HeteroModel -----------------------------------------------------------

HeteroModel::HeteroModel(nn::NetLayout mean_layout, nn::NetLayout prec_layout, std::string name)
    : mean_layout_(std::move(mean_layout)),
      prec_layout_(std::move(prec_layout)),
      name_(std::move(name)),
      clamp_events_(std::make_shared<std::atomic<std::size_t>>(0)) {
  mean_layout_.validate();
  prec_layout_.validate();
  if (mean_layout_.output_dim != 1 || prec_layout_.output_dim != 1)
    throw DimensionError("hetero model: mean and precision networks must have one output");
  if (mean_layout_.input_dim != prec_layout_.input_dim)
    throw DimensionError("hetero model: mean and precision networks must share the input width");
  mean_dim_ = mean_layout_.param_count();
  prec_dim_ = prec_layout_.param_count();
}

HeteroModel HeteroModel::preset(const std::string& name, Eigen::Index input_dim) {
  nn::NetLayout mean{input_dim, 1, {}, nn::Activation::gelu, false, false};
  nn::NetLayout prec{input_dim, 1, {}, nn::Activation::gelu, false, false};
  if (name == "pensim") {
    prec.hidden_widths = {4};
  } else if (name == "hlt") {
    mean.hidden_widths = {32};
    prec.hidden_widths = {4, 2};
  } else {
    throw ConfigError("unknown model preset '" + name + "' (expected pensim or hlt)");
  }
  return HeteroModel(mean, prec, name);
}

void HeteroModel::predict(const Eigen::VectorXd& theta, const Eigen::MatrixXd& inputs, Eigen::VectorXd& mean,
                          Eigen::VectorXd& variance) const {
  check_theta(theta, dim());
  mean = nn::mlp_forward_batch<double>(mean_layout_, theta.head(mean_dim_), inputs).col(0);
  const Eigen::VectorXd tau = nn::mlp_forward_batch<double>(prec_layout_, theta.tail(prec_dim_), inputs).col(0);
  std::size_t hits = 0;
  variance.resize(tau.size());
  for (Eigen::Index i = 0; i < tau.size(); ++i) {
    if (std::abs(tau[i]) > kLogPrecisionClamp) ++hits;
    variance[i] = std::exp(-std::clamp(tau[i], -kLogPrecisionClamp, kLogPrecisionClamp));
  }
  if (hits) clamp_events_->fetch_add(hits);
}

double HeteroModel::loglik_sum(const Eigen::VectorXd& theta, const Dataset& data, std::span<const Eigen::Index> rows,
                               Eigen::VectorXd* grad) const {
  check_theta(theta, dim());
  Eigen::MatrixXd x;
  Eigen::VectorXd y;
  gather(data, rows, x, y);
  if (!grad) {
    Eigen::VectorXd m, v;
    predict(theta, x, m, v);
    double total = 0.0;
    for (Eigen::Index i = 0; i < y.size(); ++i) total += gaussian_loglik(y[i], m[i], v[i]);
    return total;
  }
  ad::Tape tape;
  const ad::Var th = tape.leaf(theta);
  const ad::Var xs = tape.constant(std::move(x));
  const ad::Var ys = tape.constant(y);
  const nn::TapedMlp mean_net(mean_layout_, th, 0);
  const nn::TapedMlp prec_net(prec_layout_, th, mean_dim_);
  const ad::Var mu = mean_net.forward(xs);
  const ad::Var raw_tau = prec_net.forward(xs);
  const std::size_t hits = (raw_tau.value().array().abs() > kLogPrecisionClamp).count();
  if (hits) clamp_events_->fetch_add(hits);
  const ad::Var tau = ad::clamp(raw_tau, -kLogPrecisionClamp, kLogPrecisionClamp);
  // log N(y; mu, e^{-tau}) = -0.5 log 2pi + 0.5 tau - 0.5 (y - mu)^2 e^{tau}
  const ad::Var quad = ad::cwise_product(ad::square(ad::sub(ys, mu)), ad::exp(tau));
  const ad::Var per_row = ad::scale(ad::sub(tau, quad), 0.5);
  const ad::Var total = ad::add_scalar(ad::sum(per_row), -kHalfLog2Pi * static_cast<double>(y.size()));
  tape.backward(total);
  *grad = tape.grad(th).col(0);
  return total.scalar();
}

Eigen::VectorXd HeteroModel::init_params(RandomStream& rng) const {
  Eigen::VectorXd theta(dim());
  theta.head(mean_dim_) = nn::init_params(mean_layout_, rng);
  theta.tail(prec_dim_) = nn::init_params(prec_layout_, rng);
  return theta;
}

Eigen::VectorXd HeteroModel::dropout_multipliers(double rate, RandomStream& rng) const {
  if (!(rate > 0.0 && rate < 1.0)) throw ConfigError("dropout rate must lie in (0, 1)");
  if (!mean_has_hidden_layers()) throw ConfigError("dropout needs a mean network with hidden layers");
  Eigen::VectorXd mult = Eigen::VectorXd::Ones(dim());
  const double keep_scale = 1.0 / (1.0 - rate);
  for (Eigen::Index l = 0; l + 1 < mean_layout_.num_layers(); ++l) {
    const Eigen::Index width = mean_layout_.layer_output(l);
    const Eigen::Index next = l + 1;
    const Eigen::Index in = mean_layout_.layer_input(next), out = mean_layout_.layer_output(next);
    const Eigen::Index off = mean_layout_.layer_offset(next);
    for (Eigen::Index j = 0; j < width; ++j) {
      const double m = rng.bernoulli(rate) ? 0.0 : keep_scale;
      for (Eigen::Index k = 0; k < out; ++k) mult[off + j + k * in] = m;
    }
  }
  return mult;
}

// --- LinearGaussianModel ---------------------------------------------------

LinearGaussianModel::LinearGaussianModel(Eigen::Index input_dim, double noise_var)
    : input_dim_(input_dim), noise_var_(noise_var) {
  if (input_dim < 1) throw DimensionError("linear model: input_dim must be positive");
  if (!(noise_var > 0.0)) throw ConfigError("linear model: noise variance must be positive");
}

void LinearGaussianModel::predict(const Eigen::VectorXd& theta, const Eigen::MatrixXd& inputs, Eigen::VectorXd& mean,
                                  Eigen::VectorXd& variance) const {
  check_theta(theta, dim());
  mean = inputs * theta;
  variance = Eigen::VectorXd::Constant(inputs.rows(), noise_var_);
}

double LinearGaussianModel::loglik_sum(const Eigen::VectorXd& theta, const Dataset& data,
                                       std::span<const Eigen::Index> rows, Eigen::VectorXd* grad) const {
  check_theta(theta, dim());
  Eigen::MatrixXd x;
  Eigen::VectorXd y;
  gather(data, rows, x, y);
  const Eigen::VectorXd r = y - x * theta;
  if (grad) *grad = x.transpose() * r / noise_var_;
  const auto m = static_cast<double>(y.size());
  return -m * (kHalfLog2Pi + 0.5 * std::log(noise_var_)) - 0.5 * r.squaredNorm() / noise_var_;
}

Eigen::VectorXd LinearGaussianModel::init_params(RandomStream& rng) const {
  return rng.normal_vector(input_dim_) / std::sqrt(static_cast<double>(input_dim_));
}

// --- AbsLinearModel --------------------------------------------------------

AbsLinearModel::AbsLinearModel(double noise_var) : noise_var_(noise_var) {
  if (!(noise_var > 0.0)) throw ConfigError("abs-linear model: noise variance must be positive");
}

void AbsLinearModel::predict(const Eigen::VectorXd& theta, const Eigen::MatrixXd& inputs, Eigen::VectorXd& mean,
                             Eigen::VectorXd& variance) const {
  check_theta(theta, 1);
  mean = std::abs(theta[0]) * inputs.col(0);
  variance = Eigen::VectorXd::Constant(inputs.rows(), noise_var_);
}

double AbsLinearModel::loglik_sum(const Eigen::VectorXd& theta, const Dataset& data,
                                  std::span<const Eigen::Index> rows, Eigen::VectorXd* grad) const {
  check_theta(theta, 1);
  Eigen::MatrixXd x;
  Eigen::VectorXd y;
  gather(data, rows, x, y);
  const double w = theta[0];
  const Eigen::VectorXd r = y - std::abs(w) * x.col(0);
  if (grad) {
    const double sign = w > 0 ? 1.0 : (w < 0 ? -1.0 : 0.0);
    *grad = Eigen::VectorXd::Constant(1, sign * x.col(0).dot(r) / noise_var_);
  }
  const auto m = static_cast<double>(y.size());
  return -m * (kHalfLog2Pi + 0.5 * std::log(noise_var_)) - 0.5 * r.squaredNorm() / noise_var_;
}

Eigen::VectorXd AbsLinearModel::init_params(RandomStream& rng) const { return rng.normal_vector(1); }

}  // namespace diffuq
