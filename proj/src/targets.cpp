#include "diffuq/targets.hpp"

#include "diffuq/errors.hpp"

#include <Eigen/LU>

#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

namespace diffuq {

namespace {
constexpr double kLog2Pi = 1.83787706640934548356;

void check_dim(const Eigen::VectorXd& theta, Eigen::Index dim, const char* who) {
  if (theta.size() != dim) {
    std::ostringstream os;
    os << who << ": expected dimension " << dim << ", got " << theta.size();
    throw DimensionError(os.str());
  }
}
}  // namespace

double gaussian_logp(const Eigen::VectorXd& mean, const Eigen::VectorXd& cov_diag, const Eigen::VectorXd& theta) {
  if (mean.size() != cov_diag.size() || mean.size() != theta.size())
    throw DimensionError("gaussian_logp: mean, variance and point must share a dimension");
  if ((cov_diag.array() <= 0.0).any()) throw ConfigError("gaussian_logp: variances must be positive");
  const auto d = static_cast<double>(mean.size());
  return -0.5 * d * kLog2Pi - 0.5 * cov_diag.array().log().sum() -
         0.5 * ((theta - mean).array().square() / cov_diag.array()).sum();
}

double funnel_logp(const Eigen::VectorXd& theta, Eigen::VectorXd* grad) {
  if (theta.size() < 2) throw DimensionError("funnel: dimension must be at least 2");
  const double v = theta[0];
  const auto x = theta.tail(theta.size() - 1);
  const auto k = static_cast<double>(x.size());
  const double ev = std::exp(-v);
  const double xx = x.squaredNorm();
  const double logp = -0.5 * std::log(2.0 * std::numbers::pi * 9.0) - v * v / 18.0 - 0.5 * k * kLog2Pi -
                      0.5 * k * v - 0.5 * xx * ev;
  if (grad) {
    grad->resize(theta.size());
    (*grad)[0] = -v / 9.0 - 0.5 * k + 0.5 * xx * ev;
    grad->tail(x.size()) = -x * ev;
  }
  return logp;
}

std::vector<MixtureComponent> smiley_components() {
  std::vector<MixtureComponent> c;
  const double w = 1.0 / 10.0;
  c.push_back({Eigen::Vector2d(-1.0, 1.0), 0.15, w});
  c.push_back({Eigen::Vector2d(1.0, 1.0), 0.15, w});
  for (int i = 0; i < 8; ++i) {
    const double deg = 200.0 + 140.0 * i / 7.0;
    const double a = deg * std::numbers::pi / 180.0;
    c.push_back({Eigen::Vector2d(1.5 * std::cos(a), 1.5 * std::sin(a)), 0.12, w});
  }
  return c;
}

double mixture_logp(std::span<const MixtureComponent> components, const Eigen::VectorXd& theta,
                    Eigen::VectorXd* grad) {
  check_dim(theta, 2, "mixture");
  const Eigen::Vector2d p = theta;
  std::vector<double> terms(components.size());
  double top = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < components.size(); ++k) {
    const auto& c = components[k];
    const double s2 = c.sigma * c.sigma;
    terms[k] = std::log(c.weight) - kLog2Pi - std::log(s2) - 0.5 * (p - c.center).squaredNorm() / s2;
    top = std::max(top, terms[k]);
  }
  double acc = 0.0;
  for (double t : terms) acc += std::exp(t - top);
  const double logp = top + std::log(acc);
  if (grad) {
    Eigen::Vector2d g = Eigen::Vector2d::Zero();
    for (std::size_t k = 0; k < components.size(); ++k) {
      const auto& c = components[k];
      g += std::exp(terms[k] - logp) * (c.center - p) / (c.sigma * c.sigma);
    }
    *grad = g;
  }
  return logp;
}

double smiley_logp(const Eigen::VectorXd& theta, Eigen::VectorXd* grad) {
  static const std::vector<MixtureComponent> comps = smiley_components();
  return mixture_logp(comps, theta, grad);
}

nlohmann::json mixture_to_json(std::span<const MixtureComponent> components) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& c : components) {
    arr.push_back({{"center", {c.center.x(), c.center.y()}}, {"sigma", c.sigma}, {"weight", c.weight}});
  }
  return arr;
}

std::vector<MixtureComponent> mixture_from_json(const nlohmann::json& j) {
  std::vector<MixtureComponent> out;
  for (const auto& e : j) {
    for (const auto& [key, _] : e.items()) {
      if (key != "center" && key != "sigma" && key != "weight") throw ConfigError("mixture component: unknown key '" + key + "'");
    }
    const auto& c = e.at("center");
    out.push_back({Eigen::Vector2d(c.at(0).get<double>(), c.at(1).get<double>()), e.at("sigma").get<double>(),
                   e.at("weight").get<double>()});
  }
  return out;
}

DiagGaussianTarget::DiagGaussianTarget(Eigen::VectorXd mean, Eigen::VectorXd variance)
    : mean_(std::move(mean)), variance_(std::move(variance)) {
  if (mean_.size() != variance_.size()) throw DimensionError("diag gaussian: mean/variance size mismatch");
  if ((variance_.array() <= 0.0).any()) throw ConfigError("diag gaussian: variances must be positive");
}

double DiagGaussianTarget::evaluate(const Eigen::VectorXd& theta, Eigen::VectorXd* grad,
                                    std::span<const Eigen::Index>) const {
  check_dim(theta, dim(), "diag gaussian");
  if (grad) *grad = ((mean_ - theta).array() / variance_.array()).matrix();
  return gaussian_logp(mean_, variance_, theta);
}

GaussianTarget::GaussianTarget(Eigen::VectorXd mean, const Eigen::MatrixXd& cov) : mean_(std::move(mean)) {
  if (cov.rows() != mean_.size() || cov.cols() != mean_.size()) throw DimensionError("gaussian: covariance shape");
  const Eigen::LLT<Eigen::MatrixXd> llt(cov);
  if (llt.info() != Eigen::Success) throw ConfigError("gaussian: covariance is not positive definite");
  precision_ = llt.solve(Eigen::MatrixXd::Identity(cov.rows(), cov.cols()));
  const double logdet = 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
  log_norm_ = -0.5 * static_cast<double>(mean_.size()) * kLog2Pi - 0.5 * logdet;
}

double GaussianTarget::evaluate(const Eigen::VectorXd& theta, Eigen::VectorXd* grad,
                                std::span<const Eigen::Index>) const {
  check_dim(theta, dim(), "gaussian");
  const Eigen::VectorXd r = theta - mean_;
  const Eigen::VectorXd pr = precision_ * r;
  if (grad) *grad = -pr;
  return log_norm_ - 0.5 * r.dot(pr);
}

FunnelTarget::FunnelTarget(Eigen::Index dim) : dim_(dim) {
  if (dim < 2) throw DimensionError("funnel: dimension must be at least 2");
}

double FunnelTarget::evaluate(const Eigen::VectorXd& theta, Eigen::VectorXd* grad,
                              std::span<const Eigen::Index>) const {
  check_dim(theta, dim_, "funnel");
  return funnel_logp(theta, grad);
}

MixtureTarget::MixtureTarget(std::vector<MixtureComponent> components) : components_(std::move(components)) {
  if (components_.empty()) throw ConfigError("mixture: no components");
  double total = 0.0;
  for (const auto& c : components_) {
    if (!(c.sigma > 0.0) || !(c.weight > 0.0)) throw ConfigError("mixture: sigma and weight must be positive");
    total += c.weight;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError("mixture: weights must sum to 1");
}

double MixtureTarget::evaluate(const Eigen::VectorXd& theta, Eigen::VectorXd* grad,
                               std::span<const Eigen::Index>) const {
  return mixture_logp(components_, theta, grad);
}

PosteriorTarget::PosteriorTarget(const RegressionModel& model, const Dataset& data, Eigen::Index minibatch_size,
                                 double prior_var)
    : model_(model), data_(data), minibatch_(minibatch_size), prior_var_(prior_var) {
  if (data_.size() > 0 && data_.features() != model_.input_dim())
    throw DimensionError("posterior: dataset feature count does not match the model input width");
  if (minibatch_size < 1) throw ConfigError("posterior: minibatch size must be positive");
  if (!(prior_var > 0.0)) throw ConfigError("posterior: prior variance must be positive");
}

double PosteriorTarget::evaluate(const Eigen::VectorXd& theta, Eigen::VectorXd* grad,
                                 std::span<const Eigen::Index> batch) const {
  const auto d = static_cast<double>(theta.size());
  double logp = -0.5 * d * (kLog2Pi + std::log(prior_var_)) - 0.5 * theta.squaredNorm() / prior_var_;
  if (grad) *grad = -theta / prior_var_;
  if (data_.size() == 0) return logp;
  const double scale = batch.empty() ? 1.0 : static_cast<double>(data_.size()) / static_cast<double>(batch.size());
  Eigen::VectorXd g;
  const double ll = model_.loglik_sum(theta, data_, batch, grad ? &g : nullptr);
  if (grad) *grad += scale * g;
  return logp + scale * ll;
}

std::vector<Eigen::Index> PosteriorTarget::draw_batch(RandomStream& rng) const {
  if (minibatch_ >= data_.size()) return {};
  return sample_without_replacement(data_.size(), minibatch_, rng);
}

double posterior_logp(const PosteriorTarget& target, const Eigen::VectorXd& theta,
                      std::span<const Eigen::Index> batch, Eigen::VectorXd* grad) {
  if (batch.empty()) throw std::invalid_argument("posterior_logp: batch must be non-empty");
  return target.evaluate(theta, grad, batch);
}

GaussianPosterior conjugate_linear_posterior(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, double noise_var,
                                             double prior_var) {
  if (!(noise_var > 0.0) || !(prior_var > 0.0)) throw ConfigError("conjugate posterior: variances must be positive");
  if (x.rows() != y.size()) throw DimensionError("conjugate posterior: X rows and y length differ");
  const Eigen::Index d = x.cols();
  Eigen::MatrixXd precision = x.transpose() * x / noise_var;
  if (std::isfinite(prior_var)) precision.diagonal().array() += 1.0 / prior_var;
  const Eigen::FullPivLU<Eigen::MatrixXd> lu(precision);
  if (!std::isfinite(prior_var) && (d == 0 || lu.rank() < d))
    throw NumericalError("conjugate posterior: singular normal equations with a flat prior");
  GaussianPosterior post;
  post.cov = lu.inverse();
  post.cov = 0.5 * (post.cov + post.cov.transpose());
  post.mean = post.cov * (x.transpose() * y) / noise_var;
  return post;
}

}  // namespace diffuq
