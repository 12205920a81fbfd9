#pragma once

#include "diffuq/regression_model.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace diffuq {

// Raw numeric table with a header row.
struct Table {
  std::vector<std::string> header;
  Eigen::MatrixXd values;  // rows x header.size()

  // Index of `name` in the header; DataError(bad_column) when absent.
  Eigen::Index column(const std::string& name) const;
};

// Parses comma-separated text. Empty, "NA" and "nan" cells raise
// DataError(missing_value); other unparsable cells DataError(non_numeric).
Table parse_table(const std::string& text);
Table read_table(const std::filesystem::path& path);
void write_table(const std::filesystem::path& path, const Table& table);

struct CsvSpec {
  std::filesystem::path path;
  // Column names, or inclusive header ranges written "first:last".
  std::vector<std::string> features;
  std::string target;
  double train_fraction = 0.8;
  std::optional<Eigen::Index> split_index;  // overrides train_fraction
  // Replace each selected feature row by its Savitzky-Golay first derivative.
  bool sg_derivative = false;
  int sg_window = 15;
  int sg_order = 2;
};

struct Split {
  Dataset train;
  Dataset test;
};

// First rows for training, remainder for testing (order preserved). Both
// splits are standardized with statistics of the training rows.
Split temporal_split(const Eigen::MatrixXd& inputs, const Eigen::VectorXd& targets, Eigen::Index n_train,
                     const std::optional<Eigen::VectorXd>& noise_std = std::nullopt);
Split load_csv(const CsvSpec& spec);

// Writes raw (destandardized when possible) inputs x_0.. and target y.
void write_csv(const std::filesystem::path& path, const Dataset& data);

struct SynthSpec {
  std::string generator = "hetero_sine";  // hetero_sine | bimodal_weight | linear_spectra
  Eigen::Index n = 1000;
  double noise_scale = 1.0;  // multiplies the generator's noise standard deviation
  std::uint64_t seed = 0;
  double w_star = 1.5;       // bimodal_weight slope magnitude
  Eigen::Index features = 40;  // linear_spectra channels
};

// hetero_sine: x ~ U(-1, 1), y = sin(2 pi x) + eps, Var eps = 0.05 + 0.2 x^2.
double hetero_sine_noise_std(double x);
// bimodal_weight: x ~ U(-1, 1), y = |w*| x + eps, sd 0.2.
// linear_spectra: three Gaussian peaks with random amplitudes over `features`
// channels, y = beta^T x + eps, sd 0.1.
// Raw units; noise_std holds each row's true noise standard deviation.
Dataset synth_dataset(const SynthSpec& spec);

// Per-point first derivative of the local least-squares polynomial over a
// centred window; windows are truncated at the signal edges.
Eigen::VectorXd savitzky_golay_deriv(const Eigen::VectorXd& signal, int window = 15, int order = 2,
                                     double spacing = 1.0);
Eigen::MatrixXd savitzky_golay_deriv_rows(const Eigen::MatrixXd& signals, int window = 15, int order = 2);

enum class Interpolation { linear, cubic };
Interpolation interpolation_from_string(const std::string& s);
// Interpolates (t_src, y_src) at t_dst; t_src strictly increasing, t_dst within
// its range. Cubic is the natural spline.
Eigen::VectorXd resample(const Eigen::VectorXd& t_src, const Eigen::VectorXd& y_src, const Eigen::VectorXd& t_dst,
                         Interpolation kind = Interpolation::linear);

}  // namespace diffuq
