// tables, splits, synthetic generators, Savitzky-Golay, resampling
#include "diffuq/data.hpp"
#include "diffuq/errors.hpp"

#include <doctest.h>

#include <Eigen/QR>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>

using namespace diffuq;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "diffuq_data_test";
  fs::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST_CASE("csv split keeps order and sizes") {
  const fs::path p = scratch("ten.csv");
  {
    std::ofstream f(p);
    f << "a,b,y\n";
    for (int i = 0; i < 10; ++i) f << i << ",7," << 2 * i << "\n";
  }
  CsvSpec spec;
  spec.path = p;
  spec.features = {"a:b"};
  spec.target = "y";
  const Split s = load_csv(spec);
  REQUIRE(s.train.size() == 8);
  REQUIRE(s.test.size() == 2);
  for (Eigen::Index i = 0; i + 1 < 8; ++i) CHECK(s.train.inputs(i, 0) < s.train.inputs(i + 1, 0));
  CHECK(s.test.inputs(0, 0) > s.train.inputs(7, 0));
  // constant column stays at zero
  CHECK(s.train.inputs.col(1).cwiseAbs().maxCoeff() == 0.0);
  CHECK(s.test.inputs.col(1).cwiseAbs().maxCoeff() == 0.0);
  spec.split_index = 3;
  CHECK(load_csv(spec).train.size() == 3);
  spec.split_index = 10;
  CHECK_THROWS_AS(load_csv(spec), DataError);
}

TEST_CASE("malformed tables") {
  auto kind_of = [](const std::string& text) {
    try {
      parse_table(text);
    } catch (const DataError& e) {
      return e.kind();
    }
    return DataError::Kind::io;
  };
  CHECK(kind_of("a,b\n1,\n") == DataError::Kind::missing_value);
  CHECK(kind_of("a,b\n1,NA\n") == DataError::Kind::missing_value);
  CHECK(kind_of("a,b\n1,abc\n") == DataError::Kind::non_numeric);
  CHECK(kind_of("a,b\n1,2,3\n") == DataError::Kind::bad_column);
  const Table t = parse_table("a,b\n1,2\n");
  CHECK_THROWS_AS(t.column("zz"), DataError);
}

TEST_CASE("dataset write/read round trip is bit-exact") {
  SynthSpec s;
  s.n = 200;
  s.seed = 3;
  const Dataset d = synth_dataset(s);
  const fs::path p = scratch("rt.csv");
  write_csv(p, d);
  const Table t = read_table(p);
  CHECK(t.values.col(0) == d.inputs.col(0));
  CHECK(t.values.col(1) == d.targets);
}

TEST_CASE("synthetic generators") {
  SynthSpec s;
  s.n = 500;
  s.seed = 11;
  const Dataset a = synth_dataset(s), b = synth_dataset(s);
  CHECK(a.inputs == b.inputs);
  CHECK(a.targets == b.targets);

  s.noise_scale = 0.0;
  const Dataset clean = synth_dataset(s);
  for (Eigen::Index i = 0; i < clean.size(); ++i)
    CHECK(clean.targets[i] == std::sin(2 * std::numbers::pi * clean.inputs(i, 0)));

  s.noise_scale = 1.0;
  s.n = 100000;
  const Dataset big = synth_dataset(s);
  const int bins = 10;
  std::vector<double> ss(bins, 0.0), expect(bins, 0.0);
  std::vector<int> count(bins, 0);
  for (Eigen::Index i = 0; i < big.size(); ++i) {
    const double x = big.inputs(i, 0);
    const int k = std::min(bins - 1, static_cast<int>((x + 1) / 2 * bins));
    const double r = big.targets[i] - std::sin(2 * std::numbers::pi * x);
    ss[k] += r * r;
    expect[k] += 0.05 + 0.2 * x * x;
    ++count[k];
  }
  for (int k = 0; k < bins; ++k) {
    const double emp = std::sqrt(ss[k] / count[k]), model = std::sqrt(expect[k] / count[k]);
    CHECK(std::abs(emp / model - 1) < 0.1);
  }

  SynthSpec spec;
  spec.generator = "linear_spectra";
  spec.n = 50;
  spec.features = 12;
  CHECK(synth_dataset(spec).inputs.cols() == 12);
  spec.generator = "nope";
  CHECK_THROWS_AS(synth_dataset(spec), ConfigError);
}

TEST_CASE("savitzky-golay derivative") {
  const int n = 60;
  Eigen::VectorXd t = Eigen::VectorXd::LinSpaced(n, 0, n - 1);
  const Eigen::VectorXd lin = 2 * t;
  const Eigen::VectorXd dl = savitzky_golay_deriv(lin);
  for (int i = 7; i < n - 7; ++i) CHECK(std::abs(dl[i] - 2) < 1e-10);

  const double a = 0.03, b = -1.2, c = 4;
  const Eigen::VectorXd quad = (a * t.array().square() + b * t.array() + c).matrix();
  const Eigen::VectorXd dq = savitzky_golay_deriv(quad, 15, 2);
  for (int i = 7; i < n - 7; ++i) CHECK(std::abs(dq[i] - (2 * a * t[i] + b)) < 1e-10);

  RandomStream r(2);
  const Eigen::VectorXd noise = r.normal_vector(n);
  const Eigen::VectorXd d = savitzky_golay_deriv(noise, 11, 3);
  for (int i : {5, 20, 54}) {
    // polynomial in the local offset, derivative at zero is the linear coefficient
    Eigen::MatrixXd v(11, 4);
    for (int k = 0; k < 11; ++k)
      for (int j = 0; j < 4; ++j) v(k, j) = std::pow(k - 5.0, j);
    const Eigen::VectorXd coef = v.colPivHouseholderQr().solve(noise.segment(i - 5, 11));
    CHECK(std::abs(d[i] - coef[1]) < 1e-10);
  }
  CHECK_THROWS(savitzky_golay_deriv(noise, 4, 2));
  CHECK_THROWS(savitzky_golay_deriv(noise, 5, 5));
}

TEST_CASE("resampling") {
  const Eigen::Vector4d t(0, 1, 2, 4), y(1, 3, 2, 6);
  const Eigen::Vector3d q(0.5, 2, 3);
  const Eigen::VectorXd lin = resample(t, y, q);
  CHECK(lin[0] == doctest::Approx(2.0));
  CHECK(lin[1] == doctest::Approx(2.0));
  CHECK(lin[2] == doctest::Approx(4.0));
  const Eigen::VectorXd at_knots = resample(t, y, t, Interpolation::cubic);
  CHECK((at_knots - y).norm() < 1e-12);
  // natural spline reproduces lines
  const Eigen::VectorXd line = resample(t, Eigen::Vector4d(0, 2, 4, 8), q, Interpolation::cubic);
  CHECK((line - 2 * q).norm() < 1e-12);
  CHECK_THROWS(resample(t, y, Eigen::VectorXd::Constant(1, 5.0)));
}
