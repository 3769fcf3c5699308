#include <cmath>
#include <vector>

#include "doctest.h"
#include "rskelly/evaluator.hpp"
#include "test_instances.hpp"

using rskelly::EvalOptions;
using rskelly::index_t;
using rskelly::Mat;
using rskelly::RngSpec;
using rskelly::Vec;

namespace {

rskelly::StatePolicy<double> kelly_policy_of(
    const rskelly::MarketParams<double>& mp) {
  rskelly::StatePolicy<double> p;
  p.h = [mp](index_t, const Vec<double>& X) {
    return rskelly::kelly_control(mp, X);
  };
  p.tag = rskelly::PolicyTag::analytic_optimal;
  return p;
}

rskelly::StatePolicy<double> constant_policy(const Vec<double>& h) {
  rskelly::StatePolicy<double> p;
  p.h = [h](index_t, const Vec<double>&) { return h; };
  p.tag = rskelly::PolicyTag::constant;
  return p;
}

}  // namespace

TEST_CASE("estimate_I matches a naive small-sample computation") {
  auto mp = testgen::random_params(150, 2, 1, 4, 1.0, 0.25);
  auto sched = testgen::sched_half_curvature(mp);
  const Vec<double> X0 = testgen::random_state(151, mp.n, 0.4);
  auto policy = constant_policy(testgen::random_state(152, mp.m, 0.8));
  const RngSpec spec{321, 0};
  const std::size_t n = 16;

  // naive oracle: independent recomputation of every path exponent
  std::vector<double> ells;
  for (std::size_t i = 0; i < n; ++i) {
    RngSpec ps{spec.seed, spec.stream + i};
    auto noise = rskelly::draw_noise<double>(ps, mp.K, mp.d, mp.m, mp.dt);
    auto X = rskelly::simulate_factors(mp, X0, noise);
    const double rbar =
        rskelly::policy_averaged_log_excess(mp, X, policy, sched, noise).total;
    ells.push_back(-mp.theta * rbar);
  }
  double naive_mean = 0.0;
  for (double e : ells) naive_mean += std::exp(e);
  naive_mean /= static_cast<double>(n);
  double naive_var = 0.0;
  for (double e : ells)
    naive_var += (std::exp(e) - naive_mean) * (std::exp(e) - naive_mean);
  naive_var /= static_cast<double>(n - 1);

  auto [lin, logd] = rskelly::estimate_I_both(mp, policy, sched, X0, n, spec);
  CHECK(lin.mean == doctest::Approx(naive_mean).epsilon(1e-12));
  CHECK(lin.std_error ==
        doctest::Approx(std::sqrt(naive_var / n)).epsilon(1e-10));
  CHECK(logd.mean == doctest::Approx(std::log(naive_mean)).epsilon(1e-12));
  CHECK(logd.log_space);
  CHECK_FALSE(lin.log_space);
  CHECK(lin.n_paths == n);

  auto j = rskelly::estimate_J(mp, policy, sched, X0, n, spec);
  CHECK(j.mean == doctest::Approx(-logd.mean / mp.theta).epsilon(1e-14));
  CHECK(j.std_error ==
        doctest::Approx(logd.std_error / mp.theta).epsilon(1e-14));
}

TEST_CASE("estimates are independent of the worker count") {
  auto mp = testgen::random_params(153, 1, 2, 5, 1.0, 0.2);
  auto sched = testgen::sched_half_curvature(mp);
  const Vec<double> X0 = testgen::random_state(154, mp.n, 0.3);
  auto policy = kelly_policy_of(mp);
  EvalOptions one;
  one.threads = 1;
  EvalOptions three;
  three.threads = 3;
  auto a = rskelly::estimate_I_both(mp, policy, sched, X0, 3000, {9, 0}, one);
  auto b = rskelly::estimate_I_both(mp, policy, sched, X0, 3000, {9, 0}, three);
  CHECK(a.first.mean == b.first.mean);
  CHECK(a.first.std_error == b.first.std_error);
  CHECK(a.second.mean == b.second.mean);
  CHECK(a.second.std_error == b.second.std_error);

  auto ka = rskelly::kelly_objective_mc(mp, policy, X0, 3000, {9, 0}, one);
  auto kb = rskelly::kelly_objective_mc(mp, policy, X0, 3000, {9, 0}, three);
  CHECK(ka.mean == kb.mean);
  CHECK(ka.std_error == kb.std_error);
}

TEST_CASE("estimator input guards") {
  auto mp = testgen::random_params(155, 1, 1, 2, 1.0, 0.5);
  auto sched = testgen::sched_half_curvature(mp);
  const Vec<double> X0 = Vec<double>::Zero(mp.n);
  auto policy = kelly_policy_of(mp);
  CHECK_THROWS_WITH_AS(
      rskelly::estimate_I(mp, policy, sched, X0, 1, {1, 0}),
      "n_paths must be >= 2", rskelly::SchemaError);
  auto mp0 = mp;
  mp0.theta = 0.0;
  CHECK_THROWS_WITH_AS(
      rskelly::estimate_I(mp0, policy, sched, X0, 10, {1, 0}),
      "estimate_I requires theta > 0 (theta = 0 is Kelly mode)",
      rskelly::SchemaError);
}

TEST_CASE("exact growth objective matches Monte Carlo within 4 SE") {
  auto mp = testgen::random_params(156, 2, 2, 6, 0.0, 0.25);
  const Vec<double> X0 = testgen::random_state(157, mp.n, 0.5);
  const Mat<double> gram_inv =
      (mp.Sigma * mp.Sigma.transpose()).inverse();
  std::vector<Mat<double>> D(static_cast<std::size_t>(mp.K),
                             Mat<double>(gram_inv * mp.A));
  std::vector<Vec<double>> dv(static_cast<std::size_t>(mp.K),
                              Vec<double>(gram_inv * mp.a));
  const Mat<double> zero_cov = Mat<double>::Zero(mp.n, mp.n);
  const double exact =
      rskelly::kelly_objective_exact(mp, D, dv, X0, zero_cov);
  auto mc = rskelly::kelly_objective_mc(mp, kelly_policy_of(mp), X0, 40000,
                                        {777, 0});
  CHECK(std::abs(mc.mean - exact) < 4.0 * mc.std_error);
  CHECK(mc.std_error > 0.0);

  std::vector<Mat<double>> D_short = D;
  D_short.pop_back();
  CHECK_THROWS_WITH_AS(
      rskelly::kelly_objective_exact(mp, D_short, dv, X0, zero_cov),
      "affine policy must have K entries", rskelly::SchemaError);
}

TEST_CASE("tilted game-value rollouts reproduce the solved value") {
  auto mp = testgen::random_params(158, 2, 1, 5, 1.0, 0.25);
  auto sched = testgen::sched_half_curvature(mp);
  auto sr = rskelly::solve(mp, sched);
  const Vec<double> X0 = testgen::random_state(159, mp.n, 0.4);

  auto hbar = [&](index_t k, const Vec<double>& X) {
    return rskelly::optimal_controls_primary(
               mp, k, X, sr.value.P[static_cast<std::size_t>(k + 1)],
               sr.value.p[static_cast<std::size_t>(k + 1)])
        .hstar;
  };
  auto gamma = [&](index_t k, const Vec<double>& X) {
    return rskelly::optimal_controls_primary(
               mp, k, X, sr.value.P[static_cast<std::size_t>(k + 1)],
               sr.value.p[static_cast<std::size_t>(k + 1)])
        .gammastar;
  };
  auto eta = [&](index_t, const Vec<double>&) {
    return Vec<double>::Zero(mp.m).eval();
  };
  auto est = rskelly::estimate_game_value<double>(mp, sched, hbar, gamma, eta, X0,
                                          20000, {2024, 0});
  const double u0 = rskelly::value_at(sr.value, 0, X0);
  CHECK(std::abs(est.mean - u0) < 4.0 * est.std_error);
  CHECK(est.std_error < 0.05);

  auto mp0 = mp;
  mp0.theta = 0.0;
  CHECK_THROWS_WITH_AS(
      rskelly::estimate_game_value<double>(mp0, sched, hbar, gamma, eta, X0, 10,
                                   {1, 0}),
      "estimate_game_value requires theta > 0 (theta = 0 is Kelly mode)",
      rskelly::SchemaError);
}

TEST_CASE("grid oracle finds the stage saddle on a scalar instance") {
  auto mp = testgen::random_params(160, 1, 1, 3, 1.0, 0.5);
  auto sched = testgen::sched_rr_safe(mp);
  auto sr = rskelly::solve(mp, sched);
  const Vec<double> X = testgen::random_state(161, mp.n, 0.5);

  rskelly::OracleOptions opt;
  opt.points_per_dim = 13;
  opt.stages = 3;
  auto rep = rskelly::dpp_brute_force(mp, sr.value, sched, 1, X, opt);
  CHECK(rep.stages_run == 3);
  CHECK(rep.gap < 1e-3);
  CHECK(rep.minimax_maximin_gap < 1e-3);
  CHECK(rep.value_minimax >= rep.value_maximin - 1e-12);
  CHECK(rep.dist_h < 0.05);
  CHECK(rep.dist_gamma < 0.1);
  CHECK(rep.dist_eta < 0.05);
  CHECK(std::abs(rep.value_minimax - rep.value_analytic) ==
        doctest::Approx(rep.gap));
  REQUIRE(rep.final_cell_sizes.size() ==
          static_cast<std::size_t>(2 * mp.m + mp.d));
}

TEST_CASE("grid oracle guards") {
  auto mp = testgen::random_params(162, 1, 1, 2, 1.0, 0.5);
  auto sched = testgen::sched_half_curvature(mp);
  auto sr = rskelly::solve(mp, sched);
  const Vec<double> X = testgen::random_state(163, mp.n, 0.3);

  rskelly::OracleOptions tiny_box;
  tiny_box.box_halfwidth_h = 1e-3;
  CHECK_THROWS_WITH_AS(
      rskelly::dpp_brute_force(mp, sr.value, sched, 0, X, tiny_box),
      "analytic saddle outside search box; enlarge grid",
      rskelly::SchemaError);

  rskelly::OracleOptions even;
  even.points_per_dim = 10;
  CHECK_THROWS_WITH_AS(rskelly::dpp_brute_force(mp, sr.value, sched, 0, X, even),
                       "points_per_dim must be odd and >= 3",
                       rskelly::SchemaError);

  CHECK_THROWS_WITH_AS(
      rskelly::dpp_brute_force(mp, sr.value, sched, mp.K, X,
                               rskelly::OracleOptions{}),
      "step index out of range", rskelly::SchemaError);
}
