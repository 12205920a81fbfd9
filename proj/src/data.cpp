#include "diffuq/data.hpp"

#include "diffuq/errors.hpp"
#include "diffuq/random.hpp"

#include <Eigen/QR>

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <numbers>
#include <sstream>

namespace diffuq {

namespace {

std::string trim(const std::string& s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream ls(line);
  while (std::getline(ls, cell, ',')) cells.push_back(trim(cell));
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

bool is_missing(const std::string& c) {
  std::string l;
  for (char ch : c) l.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
  return l.empty() || l == "na" || l == "nan" || l == "null";
}

}  // namespace

Eigen::Index Table::column(const std::string& name) const {
  const auto it = std::find(header.begin(), header.end(), name);
  if (it == header.end()) throw DataError(DataError::Kind::bad_column, "no column named '" + name + "'");
  return static_cast<Eigen::Index>(it - header.begin());
}

Table parse_table(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  Table t;
  if (!std::getline(is, line)) throw DataError(DataError::Kind::io, "csv: empty input");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  t.header = split_line(line);
  const auto cols = static_cast<Eigen::Index>(t.header.size());
  std::vector<double> vals;
  Eigen::Index rows = 0;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty()) continue;
    const auto cells = split_line(line);
    const Eigen::Index line_no = rows + 2;
    if (static_cast<Eigen::Index>(cells.size()) != cols) {
      std::ostringstream os;
      os << "csv line " << line_no << ": " << cells.size() << " cells, header has " << cols;
      throw DataError(DataError::Kind::bad_column, os.str());
    }
    for (std::size_t c = 0; c < cells.size(); ++c) {
      const std::string& cell = cells[c];
      if (is_missing(cell)) {
        std::ostringstream os;
        os << "csv line " << line_no << ", column '" << t.header[c] << "': missing value";
        throw DataError(DataError::Kind::missing_value, os.str());
      }
      double v = 0.0;
      const char* first = cell.data();
      const char* last = first + cell.size();
      if (*first == '+') ++first;
      const auto res = std::from_chars(first, last, v);
      if (res.ec != std::errc() || res.ptr != last || !std::isfinite(v)) {
        std::ostringstream os;
        os << "csv line " << line_no << ", column '" << t.header[c] << "': non-numeric cell '" << cell << "'";
        throw DataError(DataError::Kind::non_numeric, os.str());
      }
      vals.push_back(v);
    }
    ++rows;
  }
  t.values = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(vals.data(),
                                                                                                      rows, cols);
  return t;
}

Table read_table(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError(DataError::Kind::io, "cannot open " + path.string());
  std::stringstream buf;
  buf << is.rdbuf();
  return parse_table(buf.str());
}

void write_table(const std::filesystem::path& path, const Table& table) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError(DataError::Kind::io, "cannot write " + path.string());
  os << std::setprecision(17);
  for (std::size_t c = 0; c < table.header.size(); ++c) os << (c ? "," : "") << table.header[c];
  os << '\n';
  for (Eigen::Index i = 0; i < table.values.rows(); ++i) {
    for (Eigen::Index j = 0; j < table.values.cols(); ++j) os << (j ? "," : "") << table.values(i, j);
    os << '\n';
  }
}

Split temporal_split(const Eigen::MatrixXd& inputs, const Eigen::VectorXd& targets, Eigen::Index n_train,
                     const std::optional<Eigen::VectorXd>& noise_std) {
  const Eigen::Index n = targets.size();
  if (inputs.rows() != n) throw DimensionError("split: inputs and targets differ in length");
  if (n_train < 1 || n_train >= n) {
    std::ostringstream os;
    os << "split: " << n_train << " training rows out of " << n << " leaves an empty split";
    throw DataError(DataError::Kind::empty_split, os.str());
  }
  const Eigen::Index n_test = n - n_train;
  const Standardization s = Standardization::fit(inputs.topRows(n_train), targets.head(n_train));
  Split out;
  out.train.inputs = s.transform_inputs(inputs.topRows(n_train));
  out.train.targets = s.transform_targets(targets.head(n_train));
  out.test.inputs = s.transform_inputs(inputs.bottomRows(n_test));
  out.test.targets = s.transform_targets(targets.tail(n_test));
  out.train.standardization = s;
  out.test.standardization = s;
  if (noise_std) {
    out.train.noise_std = Eigen::VectorXd(noise_std->head(n_train) / s.y_scale);
    out.test.noise_std = Eigen::VectorXd(noise_std->tail(n_test) / s.y_scale);
  }
  out.train.validate();
  out.test.validate();
  return out;
}

Split load_csv(const CsvSpec& spec) {
  const Table t = read_table(spec.path);
  if (t.values.rows() == 0) throw DataError(DataError::Kind::empty_split, "csv: no data rows in " + spec.path.string());
  if (spec.features.empty()) throw ConfigError("csv: no feature columns selected");
  std::vector<Eigen::Index> cols;
  for (const auto& f : spec.features) {
    const auto colon = f.find(':');
    if (colon == std::string::npos) {
      cols.push_back(t.column(f));
      continue;
    }
    const Eigen::Index a = t.column(trim(f.substr(0, colon))), b = t.column(trim(f.substr(colon + 1)));
    if (b < a) throw DataError(DataError::Kind::bad_column, "csv: reversed column range '" + f + "'");
    for (Eigen::Index c = a; c <= b; ++c) cols.push_back(c);
  }
  const Eigen::Index target_col = t.column(spec.target);
  Eigen::MatrixXd x(t.values.rows(), static_cast<Eigen::Index>(cols.size()));
  for (std::size_t j = 0; j < cols.size(); ++j) x.col(static_cast<Eigen::Index>(j)) = t.values.col(cols[j]);
  if (spec.sg_derivative) x = savitzky_golay_deriv_rows(x, spec.sg_window, spec.sg_order);
  const Eigen::VectorXd y = t.values.col(target_col);
  Eigen::Index n_train = 0;
  if (spec.split_index) {
    n_train = *spec.split_index;
  } else {
    if (!(spec.train_fraction > 0.0 && spec.train_fraction < 1.0))
      throw ConfigError("csv: train_fraction must lie in (0, 1)");
    n_train = static_cast<Eigen::Index>(std::floor(spec.train_fraction * static_cast<double>(y.size()) + 1e-9));
  }
  return temporal_split(x, y, n_train);
}

void write_csv(const std::filesystem::path& path, const Dataset& data) {
  Table t;
  for (Eigen::Index j = 0; j < data.features(); ++j) t.header.push_back("x_" + std::to_string(j));
  t.header.push_back("y");
  t.values.resize(data.size(), data.features() + 1);
  if (data.standardization) {
    const auto& s = *data.standardization;
    t.values.leftCols(data.features()) = (data.inputs.array().rowwise() * s.x_scale.array()).rowwise() + s.x_mean.array();
    t.values.col(data.features()) = ((data.targets.array() * s.y_scale) + s.y_mean).matrix();
  } else {
    t.values.leftCols(data.features()) = data.inputs;
    t.values.col(data.features()) = data.targets;
  }
  write_table(path, t);
}

// --- Synthetic generators ---------------------------------------------------------

double hetero_sine_noise_std(double x) { return std::sqrt(0.05 + 0.2 * x * x); }

Dataset synth_dataset(const SynthSpec& spec) {
  if (spec.n < 2) throw ConfigError("synth: n must be at least 2");
  if (!(spec.noise_scale >= 0.0)) throw ConfigError("synth: noise_scale must be non-negative");
  RandomStream xr = derive_stream(spec.seed, "synth-x");
  RandomStream er = derive_stream(spec.seed, "synth-noise");
  Dataset d;
  Eigen::VectorXd sd(spec.n);
  d.targets.resize(spec.n);
  if (spec.generator == "hetero_sine" || spec.generator == "bimodal_weight") {
    d.inputs.resize(spec.n, 1);
    const bool sine = spec.generator == "hetero_sine";
    for (Eigen::Index i = 0; i < spec.n; ++i) {
      const double x = 2.0 * xr.uniform() - 1.0;
      d.inputs(i, 0) = x;
      sd[i] = spec.noise_scale * (sine ? hetero_sine_noise_std(x) : 0.2);
      const double f = sine ? std::sin(2.0 * std::numbers::pi * x) : std::abs(spec.w_star) * x;
      const double e = er.normal();
      d.targets[i] = sd[i] > 0.0 ? f + sd[i] * e : f;
    }
  } else if (spec.generator == "linear_spectra") {
    const Eigen::Index p = spec.features;
    if (p < 3) throw ConfigError("synth: linear_spectra needs at least 3 features");
    RandomStream br = derive_stream(spec.seed, "synth-beta");
    const Eigen::VectorXd beta = br.normal_vector(p) / std::sqrt(static_cast<double>(p));
    const double pp = static_cast<double>(p);
    const double centers[3] = {0.2 * pp, 0.5 * pp, 0.78 * pp};
    const double widths[3] = {0.075 * pp, 0.1 * pp, 0.0625 * pp};
    d.inputs.resize(spec.n, p);
    for (Eigen::Index i = 0; i < spec.n; ++i) {
      double amp[3];
      for (double& a : amp) a = 1.0 + 0.3 * xr.normal();
      for (Eigen::Index c = 0; c < p; ++c) {
        double v = 0.0;
        for (int k = 0; k < 3; ++k) {
          const double z = (static_cast<double>(c) - centers[k]) / widths[k];
          v += amp[k] * std::exp(-0.5 * z * z);
        }
        d.inputs(i, c) = v + 0.01 * xr.normal();
      }
      sd[i] = 0.1 * spec.noise_scale;
      const double e = er.normal();
      d.targets[i] = d.inputs.row(i).dot(beta) + sd[i] * e;
    }
  } else {
    throw ConfigError("unknown synthetic generator '" + spec.generator +
                      "' (expected hetero_sine, bimodal_weight or linear_spectra)");
  }
  d.noise_std = sd;
  return d;
}

// --- Savitzky-Golay ---------------------------------------------------------------

namespace {
// Weights w with sum_k w_k y_{i+k} = derivative at offset 0 of the fit over k in [-left, right].
Eigen::RowVectorXd sg_weights(int left, int right, int order) {
  const int len = left + right + 1;
  Eigen::MatrixXd v(len, order + 1);
  for (int r = 0; r < len; ++r) {
    const double t = r - left;
    double pw = 1.0;
    for (int c = 0; c <= order; ++c, pw *= t) v(r, c) = pw;
  }
  const Eigen::MatrixXd pinv = v.colPivHouseholderQr().solve(Eigen::MatrixXd::Identity(len, len));
  return pinv.row(1);
}

void check_sg(Eigen::Index n, int window, int order) {
  if (window < 3 || window % 2 == 0) throw ConfigError("savitzky_golay: window must be odd and at least 3");
  if (order < 1 || order >= window) throw ConfigError("savitzky_golay: order must lie in [1, window)");
  if (window > n) throw ConfigError("savitzky_golay: window longer than the signal");
  if ((window - 1) / 2 + 1 <= order) throw ConfigError("savitzky_golay: edge windows too short for the order");
}
}  // namespace

Eigen::VectorXd savitzky_golay_deriv(const Eigen::VectorXd& signal, int window, int order, double spacing) {
  const Eigen::Index n = signal.size();
  check_sg(n, window, order);
  if (!(spacing > 0.0)) throw ConfigError("savitzky_golay: spacing must be positive");
  const int half = (window - 1) / 2;
  const Eigen::RowVectorXd centre = sg_weights(half, half, order);
  Eigen::VectorXd out(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const int left = static_cast<int>(std::min<Eigen::Index>(half, i));
    const int right = static_cast<int>(std::min<Eigen::Index>(half, n - 1 - i));
    const auto seg = signal.segment(i - left, left + right + 1);
    const double d = (left == half && right == half) ? centre.dot(seg) : sg_weights(left, right, order).dot(seg);
    out[i] = d / spacing;
  }
  return out;
}

Eigen::MatrixXd savitzky_golay_deriv_rows(const Eigen::MatrixXd& signals, int window, int order) {
  Eigen::MatrixXd out(signals.rows(), signals.cols());
  for (Eigen::Index r = 0; r < signals.rows(); ++r)
    out.row(r) = savitzky_golay_deriv(signals.row(r).transpose(), window, order).transpose();
  return out;
}

// --- Resampling -----------------------------------------------------------------

Interpolation interpolation_from_string(const std::string& s) {
  if (s == "linear") return Interpolation::linear;
  if (s == "cubic") return Interpolation::cubic;
  throw ConfigError("unknown interpolation '" + s + "' (expected linear or cubic)");
}

Eigen::VectorXd resample(const Eigen::VectorXd& t_src, const Eigen::VectorXd& y_src, const Eigen::VectorXd& t_dst,
                         Interpolation kind) {
  const Eigen::Index n = t_src.size();
  if (y_src.size() != n) throw DimensionError("resample: time and value lengths differ");
  if (n < 2) throw ConfigError("resample: need at least two source points");
  for (Eigen::Index i = 1; i < n; ++i)
    if (!(t_src[i] > t_src[i - 1])) throw ConfigError("resample: source times must be strictly increasing");
  // natural-spline second derivatives (zero for linear)
  Eigen::VectorXd m = Eigen::VectorXd::Zero(n);
  if (kind == Interpolation::cubic && n > 2) {
    const Eigen::Index k = n - 2;
    Eigen::VectorXd sub(k), diag(k), sup(k), rhs(k);
    for (Eigen::Index i = 1; i <= k; ++i) {
      const double h0 = t_src[i] - t_src[i - 1], h1 = t_src[i + 1] - t_src[i];
      sub[i - 1] = h0;
      diag[i - 1] = 2.0 * (h0 + h1);
      sup[i - 1] = h1;
      rhs[i - 1] = 6.0 * ((y_src[i + 1] - y_src[i]) / h1 - (y_src[i] - y_src[i - 1]) / h0);
    }
    for (Eigen::Index i = 1; i < k; ++i) {
      const double w = sub[i] / diag[i - 1];
      diag[i] -= w * sup[i - 1];
      rhs[i] -= w * rhs[i - 1];
    }
    m[k] = rhs[k - 1] / diag[k - 1];
    for (Eigen::Index i = k - 2; i >= 0; --i) m[i + 1] = (rhs[i] - sup[i] * m[i + 2]) / diag[i];
  }
  Eigen::VectorXd out(t_dst.size());
  for (Eigen::Index q = 0; q < t_dst.size(); ++q) {
    const double t = t_dst[q];
    if (!(t >= t_src[0] && t <= t_src[n - 1])) throw ConfigError("resample: target time outside the source range");
    const auto it = std::upper_bound(t_src.data(), t_src.data() + n, t);
    Eigen::Index j = std::clamp<Eigen::Index>(static_cast<Eigen::Index>(it - t_src.data()) - 1, 0, n - 2);
    const double h = t_src[j + 1] - t_src[j];
    const double a = (t_src[j + 1] - t) / h, b = (t - t_src[j]) / h;
    out[q] = a * y_src[j] + b * y_src[j + 1] + ((a * a * a - a) * m[j] + (b * b * b - b) * m[j + 1]) * h * h / 6.0;
  }
  return out;
}

}  // namespace diffuq
