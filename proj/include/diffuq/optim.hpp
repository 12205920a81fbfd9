#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>

namespace diffuq {

struct OptimizerConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int max_iter = 5000;
  // Learning rate decays geometrically to lr * lr_final_fraction at max_iter.
  double lr_final_fraction = 1.0;
};

// Adam minimizer over a flat parameter vector.
class Adam {
 public:
  Adam(Eigen::Index dim, const OptimizerConfig& cfg)
      : cfg_(cfg), m_(Eigen::VectorXd::Zero(dim)), v_(Eigen::VectorXd::Zero(dim)) {}

  void step(Eigen::VectorXd& params, const Eigen::VectorXd& grad) {
    ++t_;
    m_ = cfg_.beta1 * m_ + (1.0 - cfg_.beta1) * grad;
    v_ = cfg_.beta2 * v_ + (1.0 - cfg_.beta2) * grad.cwiseAbs2();
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    const double lr = current_lr();
    params.array() -= lr * (m_.array() / bc1) / ((v_.array() / bc2).sqrt() + cfg_.eps);
  }

  double current_lr() const {
    if (cfg_.lr_final_fraction == 1.0 || cfg_.max_iter <= 1) return cfg_.lr;
    const double frac = std::min(1.0, static_cast<double>(t_) / static_cast<double>(cfg_.max_iter));
    return cfg_.lr * std::pow(cfg_.lr_final_fraction, frac);
  }
  long iteration() const { return t_; }

 private:
  OptimizerConfig cfg_;
  Eigen::VectorXd m_, v_;
  long t_ = 0;
};

// Flags a run whose objective stays above 10x its initial value (measured as
// initial + 9 * max(|initial|, 1), so that negative or near-zero starting
// losses are handled) for `patience` consecutive iterations.
class DivergenceGuard {
 public:
  explicit DivergenceGuard(int patience = 100) : patience_(patience) {}

  // Returns true when the run should be aborted.
  bool update(double loss) {
    if (!std::isfinite(loss)) return true;
    if (!initialized_) {
      initial_ = loss;
      initialized_ = true;
      return false;
    }
    const double threshold = initial_ + 9.0 * std::max(std::abs(initial_), 1.0);
    streak_ = loss > threshold ? streak_ + 1 : 0;
    return streak_ >= patience_;
  }
  double initial() const { return initial_; }

 private:
  int patience_;
  bool initialized_ = false;
  double initial_ = 0.0;
  int streak_ = 0;
};

}  // namespace diffuq
