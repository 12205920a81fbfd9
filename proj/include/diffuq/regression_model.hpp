#pragma once

#include "diffuq/nn.hpp"
#include "diffuq/random.hpp"

#include <Eigen/Core>

#include <atomic>
#include <memory>
#include <optional>
#include <span>
#include <string>

namespace diffuq {

// Per-feature affine map to zero mean / unit variance, fitted on a training
// split and applied unchanged to any other split.
struct Standardization {
  Eigen::RowVectorXd x_mean;
  Eigen::RowVectorXd x_scale;
  double y_mean = 0.0;
  double y_scale = 1.0;

  static constexpr double kScaleFloor = 1e-8;
  static Standardization fit(const Eigen::MatrixXd& inputs, const Eigen::VectorXd& targets);

  Eigen::MatrixXd transform_inputs(const Eigen::MatrixXd& raw) const;
  Eigen::VectorXd transform_targets(const Eigen::VectorXd& raw) const;
  double restore_mean(double standardized) const { return y_mean + y_scale * standardized; }
  double restore_variance(double standardized) const { return y_scale * y_scale * standardized; }
};

struct Dataset {
  Eigen::MatrixXd inputs;   // N x p
  Eigen::VectorXd targets;  // N
  std::optional<Standardization> standardization;
  // Ground-truth noise standard deviation per row, in the units of `targets`
  // (known for synthetic data only).
  std::optional<Eigen::VectorXd> noise_std;

  Eigen::Index size() const { return targets.size(); }
  Eigen::Index features() const { return inputs.cols(); }
  Dataset rows(std::span<const Eigen::Index> idx) const;
  // Throws DataError on shape mismatch or non-finite entries.
  void validate() const;
};

struct MeanVariance {
  double mean;
  double variance;
};

// Likelihood p(y | x, theta) over a flat parameter vector.
class RegressionModel {
 public:
  virtual ~RegressionModel() = default;

  virtual Eigen::Index dim() const = 0;
  virtual Eigen::Index input_dim() const = 0;
  virtual std::string name() const = 0;

  // Predictive mean and variance for every row of `inputs`.
  virtual void predict(const Eigen::VectorXd& theta, const Eigen::MatrixXd& inputs, Eigen::VectorXd& mean,
                       Eigen::VectorXd& variance) const = 0;

  // Sum of log p(y_i | x_i, theta) over `rows` (every row when empty). When
  // `grad` is non-null it receives the gradient wrt theta.
  virtual double loglik_sum(const Eigen::VectorXd& theta, const Dataset& data, std::span<const Eigen::Index> rows,
                            Eigen::VectorXd* grad) const = 0;

  virtual Eigen::VectorXd init_params(RandomStream& rng) const = 0;
};

MeanVariance mean_and_variance(const RegressionModel& model, const Eigen::VectorXd& theta, const Eigen::VectorXd& x);
double loglik(const RegressionModel& model, const Eigen::VectorXd& theta, const Eigen::VectorXd& x, double y);
// Gaussian log-density log N(y; mean, variance).
double gaussian_loglik(double y, double mean, double variance);

// p(y | x, theta) = N(NN_mean(x), exp(-NN_prec(x))), theta = [theta_mean, theta_prec].
// The precision-network output is clamped to [-L, L] before exponentiation.
class HeteroModel final : public RegressionModel {
 public:
  static constexpr double kLogPrecisionClamp = 15.0;

  HeteroModel(nn::NetLayout mean_layout, nn::NetLayout prec_layout, std::string name = "custom");

  // "pensim": linear mean, precision MLP with one hidden layer of width 4.
  // "hlt": mean MLP with one hidden layer of 32, precision MLP hidden 4 and 2.
  static HeteroModel preset(const std::string& name, Eigen::Index input_dim);

  Eigen::Index dim() const override { return mean_dim_ + prec_dim_; }
  Eigen::Index input_dim() const override { return mean_layout_.input_dim; }
  std::string name() const override { return name_; }
  Eigen::Index mean_dim() const { return mean_dim_; }
  Eigen::Index prec_dim() const { return prec_dim_; }
  const nn::NetLayout& mean_layout() const { return mean_layout_; }
  const nn::NetLayout& prec_layout() const { return prec_layout_; }

  void predict(const Eigen::VectorXd& theta, const Eigen::MatrixXd& inputs, Eigen::VectorXd& mean,
               Eigen::VectorXd& variance) const override;
  double loglik_sum(const Eigen::VectorXd& theta, const Dataset& data, std::span<const Eigen::Index> rows,
                    Eigen::VectorXd* grad) const override;
  Eigen::VectorXd init_params(RandomStream& rng) const override;

  // Per-parameter multipliers realizing one dropout mask over the hidden units
  // of the mean network: the outgoing weights of a dropped unit are zeroed and
  // those of kept units scaled by 1 / (1 - rate). Precision parameters are 1.
  Eigen::VectorXd dropout_multipliers(double rate, RandomStream& rng) const;
  bool mean_has_hidden_layers() const { return !mean_layout_.hidden_widths.empty(); }

  // Number of predictions whose log-precision hit the clamp so far.
  std::size_t clamp_events() const { return clamp_events_->load(); }

 private:
  nn::NetLayout mean_layout_, prec_layout_;
  std::string name_;
  Eigen::Index mean_dim_, prec_dim_;
  std::shared_ptr<std::atomic<std::size_t>> clamp_events_;
};

// y = x^T theta + N(0, noise_var): the conjugate Bayesian linear regression
// likelihood.
class LinearGaussianModel final : public RegressionModel {
 public:
  LinearGaussianModel(Eigen::Index input_dim, double noise_var);

  Eigen::Index dim() const override { return input_dim_; }
  Eigen::Index input_dim() const override { return input_dim_; }
  std::string name() const override { return "linear_gaussian"; }
  double noise_var() const { return noise_var_; }

  void predict(const Eigen::VectorXd& theta, const Eigen::MatrixXd& inputs, Eigen::VectorXd& mean,
               Eigen::VectorXd& variance) const override;
  double loglik_sum(const Eigen::VectorXd& theta, const Dataset& data, std::span<const Eigen::Index> rows,
                    Eigen::VectorXd* grad) const override;
  Eigen::VectorXd init_params(RandomStream& rng) const override;

 private:
  Eigen::Index input_dim_;
  double noise_var_;
};

// y = |w| x + N(0, noise_var): one scalar weight with two symmetric posterior
// modes, matching the bimodal_weight generator.
class AbsLinearModel final : public RegressionModel {
 public:
  explicit AbsLinearModel(double noise_var);

  Eigen::Index dim() const override { return 1; }
  Eigen::Index input_dim() const override { return 1; }
  std::string name() const override { return "abs_linear"; }

  void predict(const Eigen::VectorXd& theta, const Eigen::MatrixXd& inputs, Eigen::VectorXd& mean,
               Eigen::VectorXd& variance) const override;
  double loglik_sum(const Eigen::VectorXd& theta, const Dataset& data, std::span<const Eigen::Index> rows,
                    Eigen::VectorXd* grad) const override;
  Eigen::VectorXd init_params(RandomStream& rng) const override;

 private:
  double noise_var_;
};

}  // namespace diffuq
