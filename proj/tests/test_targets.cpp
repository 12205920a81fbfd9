// log densities, posterior targets, regression likelihoods
#include "diffuq/regression_model.hpp"
#include "diffuq/targets.hpp"

#include <doctest.h>

#include <Eigen/LU>

#include <cmath>
#include <numbers>
#include <numeric>

using namespace diffuq;

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;

Eigen::VectorXd fd(const std::function<double(const Eigen::VectorXd&)>& f, const Eigen::VectorXd& x, double h = 1e-5) {
  Eigen::VectorXd g(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    Eigen::VectorXd a = x, b = x;
    a[i] += h;
    b[i] -= h;
    g[i] = (f(a) - f(b)) / (2 * h);
  }
  return g;
}

double rel(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  return (a - b).norm() / std::max(1e-8, std::max(a.norm(), b.norm()));
}

Dataset toy_data(Eigen::Index n, Eigen::Index p, std::uint64_t seed) {
  RandomStream r(seed);
  Dataset d;
  d.inputs.resize(n, p);
  for (Eigen::Index i = 0; i < d.inputs.size(); ++i) d.inputs.data()[i] = r.normal();
  d.targets = r.normal_vector(n);
  return d;
}

}  // namespace

TEST_CASE("gaussian log density") {
  CHECK(gaussian_logp(Eigen::Vector2d::Zero(), Eigen::Vector2d::Ones(), Eigen::Vector2d::Zero()) ==
        doctest::Approx(-1.837877).epsilon(1e-6));
  CHECK(gaussian_logp(Eigen::VectorXd::Zero(1), Eigen::VectorXd::Constant(1, 1e-2), Eigen::VectorXd::Zero(1)) ==
        doctest::Approx(-0.5 * std::log(2 * std::numbers::pi * 0.01)));
  RandomStream r(3);
  const Eigen::VectorXd m = r.normal_vector(4), x = r.normal_vector(4);
  const Eigen::VectorXd v = r.normal_vector(4).array().exp();
  double terms = 0;
  for (int i = 0; i < 4; ++i) terms += -0.5 * std::log(2 * std::numbers::pi * v[i]) - 0.5 * (x[i] - m[i]) * (x[i] - m[i]) / v[i];
  CHECK(std::abs(gaussian_logp(m, v, x) - terms) < 1e-12);
  CHECK_THROWS_AS(gaussian_logp(m, -v, x), ConfigError);
}

TEST_CASE("funnel") {
  const double two_pi = 2 * std::numbers::pi;
  CHECK(funnel_logp(Eigen::Vector2d::Zero()) == doctest::Approx(-0.5 * std::log(two_pi * 9) - 0.5 * std::log(two_pi)));
  CHECK(funnel_logp(Eigen::Vector2d(1, 0)) ==
        doctest::Approx(-0.5 * std::log(two_pi * 9) - 1.0 / 18 - 0.5 * std::log(two_pi * std::exp(1.0))));
  RandomStream r(8);
  for (int k = 0; k < 20; ++k) {
    const Eigen::VectorXd th = r.normal_vector(4);
    Eigen::VectorXd g;
    funnel_logp(th, &g);
    CHECK(rel(g, fd([](const Eigen::VectorXd& t) { return funnel_logp(t); }, th)) < 1e-4);
  }
}

TEST_CASE("smiley mixture") {
  const auto comps = smiley_components();
  REQUIRE(comps.size() == 10);
  const Eigen::VectorXd eye = comps[0].center, mid = Eigen::Vector2d(0, 1);
  CHECK(smiley_logp(eye) >= smiley_logp(mid));

  // grid quadrature of the density
  const double lo = -3.5, hi = 3.5, h = 0.01;
  double mass = 0;
  for (double a = lo; a < hi; a += h)
    for (double b = lo; b < hi; b += h) mass += std::exp(smiley_logp(Eigen::Vector2d(a + h / 2, b + h / 2))) * h * h;
  CHECK(std::abs(mass - 1.0) < 1e-3);

  RandomStream r(4);
  for (int k = 0; k < 20; ++k) {
    const Eigen::VectorXd th = r.normal_vector(2);
    double direct = 0;
    for (const auto& c : comps)
      direct += c.weight * std::exp(-0.5 * (th - c.center).squaredNorm() / (c.sigma * c.sigma)) /
                (2 * std::numbers::pi * c.sigma * c.sigma);
    if (direct > 1e-300) CHECK(std::abs(smiley_logp(th) - std::log(direct)) < 1e-12);
    Eigen::VectorXd g;
    smiley_logp(th, &g);
    CHECK(rel(g, fd([](const Eigen::VectorXd& t) { return smiley_logp(t); }, th)) < 1e-4);
  }
  const auto back = mixture_from_json(mixture_to_json(comps));
  CHECK(back.size() == comps.size());
  CHECK(back[3].center == comps[3].center);
}

TEST_CASE("full gaussian target gradient") {
  Eigen::Matrix2d cov;
  cov << 1.0, 0.7, 0.7, 1.0;
  GaussianTarget t(Eigen::Vector2d(1, -1), cov);
  RandomStream r(2);
  const Eigen::VectorXd th = r.normal_vector(2);
  CHECK(rel(t.grad_log_prob(th), fd([&](const Eigen::VectorXd& v) { return t.log_prob(v); }, th)) < 1e-6);
  CHECK(t.log_prob(Eigen::Vector2d(1, -1)) == doctest::Approx(-kLog2Pi - 0.5 * std::log(cov.determinant())));
}

TEST_CASE("hetero model closed forms") {
  const HeteroModel m = HeteroModel::preset("hlt", 3);
  const Eigen::VectorXd zero = Eigen::VectorXd::Zero(m.dim());
  const auto mv = mean_and_variance(m, zero, Eigen::Vector3d(0.1, 2, -1));
  CHECK(mv.mean == 0.0);
  CHECK(mv.variance == 1.0);

  // precision output 2: only the last bias is set
  Eigen::VectorXd th = zero;
  th[m.dim() - 1] = 2.0;
  CHECK(mean_and_variance(m, th, Eigen::Vector3d(1, 1, 1)).variance == doctest::Approx(0.135335).epsilon(1e-6));

  CHECK(loglik(m, zero, Eigen::Vector3d::Zero(), 0.0) == doctest::Approx(-0.918939).epsilon(1e-6));
  CHECK(loglik(m, zero, Eigen::Vector3d::Zero(), 2.0) == doctest::Approx(-0.5 * kLog2Pi - 2.0));

  RandomStream r(6);
  const Eigen::VectorXd rt = m.init_params(r);
  const Eigen::VectorXd x = r.normal_vector(3);
  const double mu = nn::mlp_forward(m.mean_layout(), Eigen::VectorXd(rt.head(m.mean_dim())), x)[0];
  const double tau = nn::mlp_forward(m.prec_layout(), Eigen::VectorXd(rt.tail(m.prec_dim())), x)[0];
  const auto got = mean_and_variance(m, rt, x);
  CHECK(std::abs(got.mean - mu) < 1e-12);
  CHECK(std::abs(got.variance - std::exp(-tau)) < 1e-12);
}

TEST_CASE("loglik gradients match finite differences at 100 random points") {
  const HeteroModel hlt = HeteroModel::preset("hlt", 2), pensim = HeteroModel::preset("pensim", 2);
  const Dataset data = toy_data(5, 2, 12);
  RandomStream r(21);
  for (const HeteroModel* m : {&hlt, &pensim}) {
    double worst = 0;
    for (int k = 0; k < 100; ++k) {
      const Eigen::VectorXd th = m->init_params(r);
      Eigen::VectorXd g;
      m->loglik_sum(th, data, {}, &g);
      auto f = [&](const Eigen::VectorXd& t) { return m->loglik_sum(t, data, {}, nullptr); };
      worst = std::max(worst, rel(g, fd(f, th)));
    }
    INFO(m->name());
    CHECK(worst < 1e-4);
  }
  LinearGaussianModel lin(2, 0.3);
  const Eigen::VectorXd th = r.normal_vector(2);
  Eigen::VectorXd g;
  lin.loglik_sum(th, data, {}, &g);
  CHECK(rel(g, fd([&](const Eigen::VectorXd& t) { return lin.loglik_sum(t, data, {}, nullptr); }, th)) < 1e-6);
}

TEST_CASE("clamp keeps the variance finite and counts hits") {
  const HeteroModel m = HeteroModel::preset("pensim", 1);
  Eigen::VectorXd th = Eigen::VectorXd::Zero(m.dim());
  th[m.dim() - 1] = 40.0;
  const auto mv = mean_and_variance(m, th, Eigen::VectorXd::Zero(1));
  CHECK(mv.variance == doctest::Approx(std::exp(-15.0)));
  CHECK(m.clamp_events() >= 1);
}

TEST_CASE("posterior target") {
  const HeteroModel m = HeteroModel::preset("pensim", 2);
  Dataset one;
  one.inputs = Eigen::MatrixXd::Zero(1, 2);
  one.targets = Eigen::VectorXd::Constant(1, 0.7);
  PosteriorTarget post(m, one, 1);
  const Eigen::VectorXd zero = Eigen::VectorXd::Zero(m.dim());
  const double prior0 = -0.5 * static_cast<double>(m.dim()) * kLog2Pi;
  const std::vector<Eigen::Index> all{0};
  CHECK(posterior_logp(post, zero, all) == doctest::Approx(-0.5 * kLog2Pi - 0.49 / 2 + prior0));

  const Dataset data = toy_data(40, 2, 3);
  PosteriorTarget full(m, data, 10);
  RandomStream r(5);
  const Eigen::VectorXd th = m.init_params(r);
  std::vector<Eigen::Index> every(40);
  std::iota(every.begin(), every.end(), 0);
  CHECK(posterior_logp(full, th, every) == doctest::Approx(full.log_prob(th)).epsilon(1e-12));

  double acc = 0;
  const int draws = 10000;
  RandomStream br(77);
  for (int k = 0; k < draws; ++k) {
    const auto b = full.draw_batch(br);
    acc += posterior_logp(full, th, b);
  }
  CHECK(std::abs(acc / draws - full.log_prob(th)) < 0.01 * std::abs(full.log_prob(th)));
  CHECK_THROWS(posterior_logp(full, th, {}));
}

TEST_CASE("conjugate linear posterior") {
  const auto empty = conjugate_linear_posterior(Eigen::MatrixXd(0, 3), Eigen::VectorXd(0), 1.0, 2.0);
  CHECK(empty.mean.norm() == 0.0);
  CHECK((empty.cov - 2.0 * Eigen::Matrix3d::Identity()).norm() < 1e-14);

  const auto one = conjugate_linear_posterior(Eigen::MatrixXd::Ones(1, 1), Eigen::VectorXd::Ones(1), 1.0, 1.0);
  CHECK(one.mean[0] == doctest::Approx(0.5));
  CHECK(one.cov(0, 0) == doctest::Approx(0.5));

  const Dataset data = toy_data(30, 3, 9);
  const auto post = conjugate_linear_posterior(data.inputs, data.targets, 0.5, 1.0);
  LinearGaussianModel lin(3, 0.5);
  PosteriorTarget target(lin, data, 30, 1.0);
  CHECK(target.grad_log_prob(post.mean).norm() < 1e-6);
}
