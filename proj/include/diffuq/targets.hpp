#pragma once

#include "diffuq/random.hpp"
#include "diffuq/regression_model.hpp"

#include <Eigen/Core>
#include <Eigen/Cholesky>
#include <nlohmann/json.hpp>

#include <span>
#include <vector>

namespace diffuq {

// Unnormalized target density over R^d.
class LogDensity {
 public:
  virtual ~LogDensity() = default;

  virtual Eigen::Index dim() const = 0;

  // log pi(theta) up to a constant, and its gradient when `grad` is non-null.
  // Data-backed targets restrict the likelihood to `batch` (rescaled to the
  // full dataset); an empty batch means every row. Data-free targets ignore it.
  virtual double evaluate(const Eigen::VectorXd& theta, Eigen::VectorXd* grad,
                          std::span<const Eigen::Index> batch = {}) const = 0;

  // Minibatch for one stochastic-gradient step; empty means full batch.
  virtual std::vector<Eigen::Index> draw_batch(RandomStream& /*rng*/) const { return {}; }

  double log_prob(const Eigen::VectorXd& theta) const { return evaluate(theta, nullptr); }
  Eigen::VectorXd grad_log_prob(const Eigen::VectorXd& theta) const {
    Eigen::VectorXd g;
    evaluate(theta, &g);
    return g;
  }
};

// Normalized log-density of N(mean, diag(cov_diag)). Throws ConfigError on a
// non-positive variance.
double gaussian_logp(const Eigen::VectorXd& mean, const Eigen::VectorXd& cov_diag, const Eigen::VectorXd& theta);

// Neal's funnel: v ~ N(0, 3^2), x_i | v ~ N(0, e^v), theta = (v, x_1..x_{d-1}).
double funnel_logp(const Eigen::VectorXd& theta, Eigen::VectorXd* grad = nullptr);

struct MixtureComponent {
  Eigen::Vector2d center;
  double sigma;
  double weight;
};

// Two eyes at (+-1, 1) with sigma 0.15 and eight mouth components on the arc
// of radius 1.5 between 200 and 340 degrees with sigma 0.12; uniform weights.
std::vector<MixtureComponent> smiley_components();

// Log-density of an isotropic 2-D Gaussian mixture via a max-shifted
// log-sum-exp.
double mixture_logp(std::span<const MixtureComponent> components, const Eigen::VectorXd& theta,
                    Eigen::VectorXd* grad = nullptr);
double smiley_logp(const Eigen::VectorXd& theta, Eigen::VectorXd* grad = nullptr);

nlohmann::json mixture_to_json(std::span<const MixtureComponent> components);
std::vector<MixtureComponent> mixture_from_json(const nlohmann::json& j);

class DiagGaussianTarget final : public LogDensity {
 public:
  DiagGaussianTarget(Eigen::VectorXd mean, Eigen::VectorXd variance);
  Eigen::Index dim() const override { return mean_.size(); }
  double evaluate(const Eigen::VectorXd& theta, Eigen::VectorXd* grad,
                  std::span<const Eigen::Index> batch = {}) const override;

 private:
  Eigen::VectorXd mean_, variance_;
};

// Full-covariance Gaussian.
class GaussianTarget final : public LogDensity {
 public:
  GaussianTarget(Eigen::VectorXd mean, const Eigen::MatrixXd& cov);
  Eigen::Index dim() const override { return mean_.size(); }
  double evaluate(const Eigen::VectorXd& theta, Eigen::VectorXd* grad,
                  std::span<const Eigen::Index> batch = {}) const override;
  const Eigen::VectorXd& mean() const { return mean_; }
  const Eigen::MatrixXd& precision() const { return precision_; }

 private:
  Eigen::VectorXd mean_;
  Eigen::MatrixXd precision_;
  double log_norm_;
};

class FunnelTarget final : public LogDensity {
 public:
  explicit FunnelTarget(Eigen::Index dim);
  Eigen::Index dim() const override { return dim_; }
  double evaluate(const Eigen::VectorXd& theta, Eigen::VectorXd* grad,
                  std::span<const Eigen::Index> batch = {}) const override;

 private:
  Eigen::Index dim_;
};

class MixtureTarget final : public LogDensity {
 public:
  explicit MixtureTarget(std::vector<MixtureComponent> components);
  static MixtureTarget smiley() { return MixtureTarget(smiley_components()); }
  Eigen::Index dim() const override { return 2; }
  double evaluate(const Eigen::VectorXd& theta, Eigen::VectorXd* grad,
                  std::span<const Eigen::Index> batch = {}) const override;
  const std::vector<MixtureComponent>& components() const { return components_; }

 private:
  std::vector<MixtureComponent> components_;
};

// Bayesian parameter posterior p(theta | D) proportional to p(D | theta) N(theta; 0, prior_var I).
// Holds references: the model and dataset must outlive the target.
class PosteriorTarget final : public LogDensity {
 public:
  PosteriorTarget(const RegressionModel& model, const Dataset& data, Eigen::Index minibatch_size,
                  double prior_var = 1.0);

  Eigen::Index dim() const override { return model_.dim(); }
  double evaluate(const Eigen::VectorXd& theta, Eigen::VectorXd* grad,
                  std::span<const Eigen::Index> batch = {}) const override;
  std::vector<Eigen::Index> draw_batch(RandomStream& rng) const override;

  const RegressionModel& model() const { return model_; }
  const Dataset& data() const { return data_; }
  Eigen::Index minibatch_size() const { return minibatch_; }
  double prior_var() const { return prior_var_; }

 private:
  const RegressionModel& model_;
  const Dataset& data_;
  Eigen::Index minibatch_;
  double prior_var_;
};

// (|D| / |S|) sum_{i in S} log p(y_i | x_i, theta) + log N(theta; 0, prior_var I).
// Throws std::invalid_argument on an empty batch.
double posterior_logp(const PosteriorTarget& target, const Eigen::VectorXd& theta,
                      std::span<const Eigen::Index> batch, Eigen::VectorXd* grad = nullptr);

struct GaussianPosterior {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};

// Exact posterior of y = X theta + N(0, noise_var) under theta ~ N(0, prior_var I).
// prior_var may be +inf (flat prior) as long as X^T X is non-singular.
GaussianPosterior conjugate_linear_posterior(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, double noise_var,
                                             double prior_var);

}  // namespace diffuq
