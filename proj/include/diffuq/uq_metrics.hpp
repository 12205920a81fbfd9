#pragma once

#include "diffuq/baselines.hpp"
#include "diffuq/regression_model.hpp"

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include <optional>
#include <string>
#include <vector>

namespace diffuq {

// Equal-weight Gaussian mixture over y at one input.
struct PredictiveDistribution {
  Eigen::VectorXd means;
  Eigen::VectorXd variances;

  Eigen::Index size() const { return means.size(); }
  double mean() const { return means.mean(); }
  // Law of total variance.
  double variance() const;
  double cdf(double y) const;
  double pdf(double y) const;
  // Max-shifted log-sum-exp.
  double log_pdf(double y) const;
  void validate() const;
};

PredictiveDistribution predictive(const SampleBank& bank, const RegressionModel& model, const Eigen::VectorXd& x);
// One predictive per row of `inputs`.
std::vector<PredictiveDistribution> predictive(const SampleBank& bank, const RegressionModel& model,
                                               const Eigen::MatrixXd& inputs);

// Maps predictives from standardized target units back to raw units.
std::vector<PredictiveDistribution> to_raw_units(std::vector<PredictiveDistribution> preds,
                                                 const Standardization& s);

double point_prediction(const PredictiveDistribution& pred);

// Root of cdf(y) = p by bracketing bisection. Throws ConfigError unless
// 0 < p < 1 and NumericalError when no bracket is found.
double quantile(const PredictiveDistribution& pred, double p);

// -(1/M) sum_i log pred_i(y_i).
double nll(const std::vector<PredictiveDistribution>& preds, const Eigen::VectorXd& targets);
double nll(const SampleBank& bank, const RegressionModel& model, const Dataset& test);

struct CoverageCurve {
  Eigen::VectorXd levels;     // k / B, k = 1..B-1
  Eigen::VectorXd coverages;  // fraction of targets inside the central interval
};

// Central interval [q(alpha/2), q(1 - alpha/2)], alpha = 1 - p. Membership is
// decided through the equivalent test |cdf(y) - 1/2| <= p/2.
CoverageCurve coverage_curve(const std::vector<PredictiveDistribution>& preds, const Eigen::VectorXd& targets,
                             int bins = 20);
// Same curve with the interval endpoints solved explicitly by quantile().
CoverageCurve coverage_curve_by_quantiles(const std::vector<PredictiveDistribution>& preds,
                                          const Eigen::VectorXd& targets, int bins = 20);

struct EceMce {
  double ece;
  double mce;
};
EceMce ece_mce(const Eigen::VectorXd& levels, const Eigen::VectorXd& coverages);

struct RegressionScores {
  double mse;
  double mae;
  std::optional<double> r2;  // empty when the targets have zero variance
};
RegressionScores regression_scores(const Eigen::VectorXd& predictions, const Eigen::VectorXd& targets);

struct CalibrationReport {
  CoverageCurve curve;
  double ece = 0.0;
  double mce = 0.0;
  double nll = 0.0;
  double mse = 0.0;
  double mae = 0.0;
  std::optional<double> r2;

  nlohmann::json to_json() const;
  static CalibrationReport from_json(const nlohmann::json& j);
  // "nominal,empirical" header then one row per level.
  std::string reliability_csv() const;
};

CalibrationReport calibration_report(const std::vector<PredictiveDistribution>& preds, const Eigen::VectorXd& targets,
                                     int bins = 20);
// Predictives over the test inputs, reported in raw target units when the test
// set carries standardization statistics.
CalibrationReport evaluate(const SampleBank& bank, const RegressionModel& model, const Dataset& test, int bins = 20);

}  // namespace diffuq
