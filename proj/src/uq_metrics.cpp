#include "diffuq/uq_metrics.hpp"

#include "diffuq/errors.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numbers>
#include <sstream>

namespace diffuq {

namespace {
double std_normal_cdf(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }

void check_targets(const std::vector<PredictiveDistribution>& preds, const Eigen::VectorXd& targets) {
  if (preds.empty()) throw ConfigError("metrics: empty test set");
  if (static_cast<Eigen::Index>(preds.size()) != targets.size())
    throw DimensionError("metrics: predictive count differs from target count");
}
}  // namespace

double PredictiveDistribution::variance() const {
  const double m = mean();
  return variances.mean() + (means.array() - m).square().mean();
}

double PredictiveDistribution::cdf(double y) const {
  double acc = 0.0;
  for (Eigen::Index i = 0; i < size(); ++i) acc += std_normal_cdf((y - means[i]) / std::sqrt(variances[i]));
  return acc / static_cast<double>(size());
}

double PredictiveDistribution::pdf(double y) const { return std::exp(log_pdf(y)); }

double PredictiveDistribution::log_pdf(double y) const {
  double top = -std::numeric_limits<double>::infinity();
  Eigen::VectorXd terms(size());
  for (Eigen::Index i = 0; i < size(); ++i) {
    terms[i] = gaussian_loglik(y, means[i], variances[i]);
    top = std::max(top, terms[i]);
  }
  if (!std::isfinite(top)) return top;
  return top + std::log((terms.array() - top).exp().sum()) - std::log(static_cast<double>(size()));
}

void PredictiveDistribution::validate() const {
  if (size() < 1) throw ConfigError("predictive: no components");
  if (variances.size() != means.size()) throw DimensionError("predictive: means/variances length mismatch");
  if (!(variances.array() > 0.0).all()) throw NumericalError("predictive: non-positive component variance");
}

PredictiveDistribution predictive(const SampleBank& bank, const RegressionModel& model, const Eigen::VectorXd& x) {
  Eigen::MatrixXd row = x.transpose();
  return predictive(bank, model, row).front();
}

std::vector<PredictiveDistribution> predictive(const SampleBank& bank, const RegressionModel& model,
                                               const Eigen::MatrixXd& inputs) {
  if (bank.size() < 1) throw ConfigError("predictive: empty sample bank");
  if (bank.dim() != model.dim()) throw DimensionError("predictive: bank dimension differs from the model");
  const Eigen::Index m = inputs.rows(), n = bank.size();
  Eigen::MatrixXd mu(m, n), var(m, n);
  Eigen::VectorXd mcol, vcol;
  for (Eigen::Index j = 0; j < n; ++j) {
    model.predict(bank.row(j), inputs, mcol, vcol);
    mu.col(j) = mcol;
    var.col(j) = vcol;
  }
  std::vector<PredictiveDistribution> out(static_cast<std::size_t>(m));
  for (Eigen::Index i = 0; i < m; ++i) {
    out[static_cast<std::size_t>(i)] = {mu.row(i).transpose(), var.row(i).transpose()};
  }
  return out;
}

std::vector<PredictiveDistribution> to_raw_units(std::vector<PredictiveDistribution> preds, const Standardization& s) {
  for (auto& p : preds) {
    p.means = (s.y_mean + s.y_scale * p.means.array()).matrix();
    p.variances *= s.y_scale * s.y_scale;
  }
  return preds;
}

double point_prediction(const PredictiveDistribution& pred) { return pred.mean(); }

double quantile(const PredictiveDistribution& pred, double p) {
  if (!(p > 0.0 && p < 1.0)) throw ConfigError("quantile: p must lie strictly inside (0, 1)");
  pred.validate();
  const double sd_max = std::sqrt(pred.variances.maxCoeff());
  double lo = pred.means.minCoeff() - 10.0 * sd_max;
  double hi = pred.means.maxCoeff() + 10.0 * sd_max;
  double width = std::max(hi - lo, 1.0);
  int expand = 0;
  while (pred.cdf(lo) > p && expand < 200) {
    lo -= width;
    width *= 2.0;
    ++expand;
  }
  while (pred.cdf(hi) < p && expand < 400) {
    hi += width;
    width *= 2.0;
    ++expand;
  }
  if (!(pred.cdf(lo) <= p && pred.cdf(hi) >= p) || !std::isfinite(lo) || !std::isfinite(hi))
    throw NumericalError("quantile: bracket expansion failed");
  for (int it = 0; it < 400; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (mid <= lo || mid >= hi) break;
    const double c = pred.cdf(mid);
    if (hi - lo <= 1e-8 && std::abs(c - p) < 1e-9) return mid;
    if (c < p) lo = mid;
    else hi = mid;
  }
  const double clo = pred.cdf(lo), chi = pred.cdf(hi);
  return std::abs(clo - p) <= std::abs(chi - p) ? lo : hi;
}

double nll(const std::vector<PredictiveDistribution>& preds, const Eigen::VectorXd& targets) {
  check_targets(preds, targets);
  double acc = 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i) acc -= preds[i].log_pdf(targets[static_cast<Eigen::Index>(i)]);
  return acc / static_cast<double>(preds.size());
}

double nll(const SampleBank& bank, const RegressionModel& model, const Dataset& test) {
  return nll(predictive(bank, model, test.inputs), test.targets);
}

namespace {
Eigen::VectorXd interior_levels(int bins) {
  if (bins < 1) throw ConfigError("coverage: bins must be at least 1");
  Eigen::VectorXd levels(bins - 1);
  for (int k = 1; k < bins; ++k) levels[k - 1] = static_cast<double>(k) / bins;
  return levels;
}
}  // namespace

CoverageCurve coverage_curve(const std::vector<PredictiveDistribution>& preds, const Eigen::VectorXd& targets,
                             int bins) {
  check_targets(preds, targets);
  CoverageCurve c{interior_levels(bins), Eigen::VectorXd::Zero(bins - 1)};
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const double dev = std::abs(preds[i].cdf(targets[static_cast<Eigen::Index>(i)]) - 0.5);
    for (Eigen::Index k = 0; k < c.levels.size(); ++k)
      if (dev <= 0.5 * c.levels[k]) c.coverages[k] += 1.0;
  }
  c.coverages /= static_cast<double>(preds.size());
  return c;
}

CoverageCurve coverage_curve_by_quantiles(const std::vector<PredictiveDistribution>& preds,
                                          const Eigen::VectorXd& targets, int bins) {
  check_targets(preds, targets);
  CoverageCurve c{interior_levels(bins), Eigen::VectorXd::Zero(bins - 1)};
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const double y = targets[static_cast<Eigen::Index>(i)];
    for (Eigen::Index k = 0; k < c.levels.size(); ++k) {
      const double alpha = 1.0 - c.levels[k];
      if (y >= quantile(preds[i], 0.5 * alpha) && y <= quantile(preds[i], 1.0 - 0.5 * alpha)) c.coverages[k] += 1.0;
    }
  }
  c.coverages /= static_cast<double>(preds.size());
  return c;
}

EceMce ece_mce(const Eigen::VectorXd& levels, const Eigen::VectorXd& coverages) {
  if (levels.size() != coverages.size()) throw DimensionError("ece_mce: levels and coverages differ in length");
  if (levels.size() == 0) return {0.0, 0.0};
  const Eigen::ArrayXd gap = (coverages - levels).array().abs();
  return {gap.mean(), gap.maxCoeff()};
}

RegressionScores regression_scores(const Eigen::VectorXd& predictions, const Eigen::VectorXd& targets) {
  if (predictions.size() != targets.size()) throw DimensionError("regression_scores: length mismatch");
  if (targets.size() < 1) throw ConfigError("regression_scores: no targets");
  const Eigen::ArrayXd r = (predictions - targets).array();
  RegressionScores s{r.square().mean(), r.abs().mean(), std::nullopt};
  const double ss_tot = (targets.array() - targets.mean()).square().sum();
  if (targets.size() >= 2 && ss_tot > 0.0) s.r2 = 1.0 - r.square().sum() / ss_tot;
  return s;
}

nlohmann::json CalibrationReport::to_json() const {
  nlohmann::json j;
  j["levels"] = std::vector<double>(curve.levels.data(), curve.levels.data() + curve.levels.size());
  j["coverages"] = std::vector<double>(curve.coverages.data(), curve.coverages.data() + curve.coverages.size());
  j["ece"] = ece;
  j["mce"] = mce;
  j["nll"] = nll;
  j["mse"] = mse;
  j["mae"] = mae;
  j["r2"] = r2 ? nlohmann::json(*r2) : nlohmann::json(nullptr);
  return j;
}

CalibrationReport CalibrationReport::from_json(const nlohmann::json& j) {
  CalibrationReport r;
  const auto lv = j.at("levels").get<std::vector<double>>();
  const auto cv = j.at("coverages").get<std::vector<double>>();
  r.curve.levels = Eigen::Map<const Eigen::VectorXd>(lv.data(), static_cast<Eigen::Index>(lv.size()));
  r.curve.coverages = Eigen::Map<const Eigen::VectorXd>(cv.data(), static_cast<Eigen::Index>(cv.size()));
  r.ece = j.at("ece").get<double>();
  r.mce = j.at("mce").get<double>();
  r.nll = j.at("nll").get<double>();
  r.mse = j.at("mse").get<double>();
  r.mae = j.at("mae").get<double>();
  if (!j.at("r2").is_null()) r.r2 = j.at("r2").get<double>();
  return r;
}

std::string CalibrationReport::reliability_csv() const {
  std::ostringstream os;
  os << std::setprecision(17) << "nominal,empirical\n";
  for (Eigen::Index k = 0; k < curve.levels.size(); ++k) os << curve.levels[k] << ',' << curve.coverages[k] << '\n';
  return os.str();
}

CalibrationReport calibration_report(const std::vector<PredictiveDistribution>& preds, const Eigen::VectorXd& targets,
                                     int bins) {
  CalibrationReport r;
  r.curve = coverage_curve(preds, targets, bins);
  const EceMce e = ece_mce(r.curve.levels, r.curve.coverages);
  r.ece = e.ece;
  r.mce = e.mce;
  r.nll = nll(preds, targets);
  Eigen::VectorXd point(targets.size());
  for (std::size_t i = 0; i < preds.size(); ++i) point[static_cast<Eigen::Index>(i)] = point_prediction(preds[i]);
  const RegressionScores s = regression_scores(point, targets);
  r.mse = s.mse;
  r.mae = s.mae;
  r.r2 = s.r2;
  return r;
}

CalibrationReport evaluate(const SampleBank& bank, const RegressionModel& model, const Dataset& test, int bins) {
  auto preds = predictive(bank, model, test.inputs);
  if (!test.standardization) return calibration_report(preds, test.targets, bins);
  const Standardization& s = *test.standardization;
  Eigen::VectorXd raw(test.size());
  for (Eigen::Index i = 0; i < raw.size(); ++i) raw[i] = s.restore_mean(test.targets[i]);
  return calibration_report(to_raw_units(std::move(preds), s), raw, bins);
}

}  // namespace diffuq
