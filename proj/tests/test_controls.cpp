#include <cmath>

#include "doctest.h"
#include "rskelly/controls.hpp"
#include "rskelly/riccati.hpp"
#include "test_instances.hpp"

using rskelly::index_t;
using rskelly::Mat;
using rskelly::Vec;

namespace {

struct Solved {
  rskelly::MarketParams<double> mp;
  rskelly::SolveResult<double> sr;
};

Solved solved_instance(std::uint64_t seed, index_t m, index_t n, index_t K,
                       double theta = 1.0, double dt = 0.25) {
  Solved s;
  s.mp = testgen::random_params(seed, m, n, K, theta, dt);
  s.sr = rskelly::solve(s.mp, testgen::sched_half_curvature(s.mp));
  return s;
}

}  // namespace

TEST_CASE("primary and alternative characterizations agree") {
  for (std::uint64_t seed = 0; seed < 12; ++seed) {
    const index_t m = 1 + static_cast<index_t>(seed % 3);
    const index_t n = 1 + static_cast<index_t>((seed / 3) % 3);
    auto s = solved_instance(90 + seed, m, n, 4);
    for (index_t k = 0; k < s.mp.K; ++k) {
      const Vec<double> X = testgen::random_state(seed * 31 + k, n, 0.8);
      const auto& Pn = s.sr.value.P[static_cast<std::size_t>(k + 1)];
      const auto& pn = s.sr.value.p[static_cast<std::size_t>(k + 1)];
      auto prim = rskelly::optimal_controls_primary(s.mp, k, X, Pn, pn);
      auto alt = rskelly::optimal_controls_alt(s.mp, k, X, Pn, pn);
      CHECK((prim.hstar - alt.hstar).norm() <=
            1e-9 * (1.0 + prim.hstar.norm()));
      CHECK((prim.gammastar - alt.gammastar).norm() <=
            1e-9 * (1.0 + prim.gammastar.norm()));
      CHECK(prim.etastar.norm() == 0.0);
      CHECK(alt.etastar.norm() == 0.0);
    }
  }
}

TEST_CASE("the saddle allocation satisfies the first-order condition") {
  auto s = solved_instance(120, 3, 2, 5);
  const Mat<double> gram = s.mp.Sigma * s.mp.Sigma.transpose();
  for (index_t k = 0; k < s.mp.K; ++k) {
    const Vec<double> X = testgen::random_state(500 + k, s.mp.n, 1.0);
    auto u = rskelly::optimal_controls_primary(
        s.mp, k, X, s.sr.value.P[static_cast<std::size_t>(k + 1)],
        s.sr.value.p[static_cast<std::size_t>(k + 1)]);
    // (Sigma Sigma') h* = (a + A X) + Sigma gamma*
    const Vec<double> lhs = gram * u.hstar;
    const Vec<double> rhs = s.mp.a + s.mp.A * X + s.mp.Sigma * u.gammastar;
    CHECK((lhs - rhs).norm() < 1e-9 * (1.0 + rhs.norm()));
  }
}

TEST_CASE("primary controls are gated on the curvature condition") {
  auto mp = testgen::random_params(121, 1, 1, 1, 1.0, 1.0);
  // continuation quadratic large enough to break -calA > 0
  const double lam2 = (mp.Lambda * mp.Lambda.transpose())(0, 0);
  Mat<double> P_big = Mat<double>::Constant(1, 1, 2.0 / (lam2 * mp.dt));
  try {
    const Vec<double> zx = Vec<double>::Zero(1);
    rskelly::optimal_controls_primary(mp, 3, zx, P_big, zx);
    FAIL("expected ConditionError");
  } catch (const rskelly::ConditionError& e) {
    CHECK(e.step() == 3);
    CHECK(std::string(e.what()).find("curvature_blockA") !=
          std::string::npos);
  }
}

TEST_CASE("kelly control solves the log-utility problem") {
  auto mp = testgen::random_params(122, 2, 2, 1, 0.0, 0.5);
  const Vec<double> X = testgen::random_state(123, mp.n, 0.7);
  const Vec<double> hk = rskelly::kelly_control(mp, X);
  const Mat<double> gram = mp.Sigma * mp.Sigma.transpose();
  CHECK((gram * hk - (mp.a + mp.A * X)).norm() < 1e-12);
  const Vec<double> bad_x = Vec<double>::Zero(mp.n + 1);
  CHECK_THROWS_AS(rskelly::kelly_control(mp, bad_x),
                  rskelly::SchemaError);
}

TEST_CASE("saddle allocation approaches the Kelly control linearly in theta") {
  auto base = testgen::random_params(124, 2, 2, 3, 1.0, 0.25);
  double sup_big = 0.0, sup_small = 0.0;
  for (double theta : {1e-2, 1e-3}) {
    auto mp = base;
    mp.theta = theta;
    auto sr = rskelly::solve(mp, testgen::sched_half_curvature(mp));
    double sup = 0.0;
    for (int t = 0; t < 20; ++t) {
      Vec<double> X = testgen::random_state(1000 + t, mp.n, 1.0);
      if (X.norm() > 1.0) X /= X.norm();
      auto u = rskelly::optimal_controls_primary(mp, 0, X, sr.value.P[1],
                                                 sr.value.p[1]);
      sup = std::max(sup,
                     (u.hstar - rskelly::kelly_control(mp, X)).norm());
    }
    (theta == 1e-2 ? sup_big : sup_small) = sup;
  }
  const double ratio = sup_big / sup_small;
  CHECK(ratio > 7.0);
  CHECK(ratio < 13.0);
}

TEST_CASE("reference portfolios take their closed forms") {
  auto s = solved_instance(125, 2, 1, 2);
  const Vec<double> X = testgen::random_state(126, s.mp.n, 0.5);
  const auto& Pn = s.sr.value.P[1];
  const auto& pn = s.sr.value.p[1];
  auto rp = rskelly::reference_portfolios(s.mp, 0, X, Pn, pn);
  const Mat<double> gram_inv =
      (s.mp.Sigma * s.mp.Sigma.transpose()).inverse();
  const Mat<double> Btilde =
      Mat<double>::Identity(s.mp.n, s.mp.n) + s.mp.Bmat * s.mp.dt;
  const Vec<double> rho =
      0.5 * (Pn + Pn.transpose()) * (s.mp.b * s.mp.dt + Btilde * X) + pn;
  CHECK((rp.h_kelly - gram_inv * (s.mp.a + s.mp.A * X)).norm() < 1e-12);
  CHECK((rp.h_bench - gram_inv * (s.mp.Sigma * s.mp.Xi)).norm() < 1e-12);
  CHECK((rp.h_ihp -
         gram_inv * (s.mp.Sigma * (s.mp.Lambda.transpose() * rho)))
            .norm() < 1e-12);
}

TEST_CASE("all three decompositions recombine to the saddle allocation") {
  for (std::uint64_t seed = 0; seed < 8; ++seed) {
    auto s = solved_instance(130 + seed, 1 + static_cast<index_t>(seed % 3),
                             1 + static_cast<index_t>(seed % 2), 3);
    const index_t k = static_cast<index_t>(seed % s.mp.K);
    const Vec<double> X = testgen::random_state(seed + 600, s.mp.n, 0.9);
    const auto& Pn = s.sr.value.P[static_cast<std::size_t>(k + 1)];
    const auto& pn = s.sr.value.p[static_cast<std::size_t>(k + 1)];
    auto saddle = rskelly::optimal_controls_primary(s.mp, k, X, Pn, pn);

    auto pen = rskelly::decompose_penalized_kelly(s.mp, saddle, X);
    CHECK(pen.recombination_residual <= 1e-10);
    CHECK((pen.recombined() - saddle.hstar).norm() <=
          1e-10 * (1.0 + saddle.hstar.norm()));
    CHECK(pen.mix_weights[0] == 1.0);
    CHECK(pen.ihp_component.norm() == 0.0);

    auto f1 = rskelly::decompose_fks_I(s.mp, k, X, Pn, pn);
    CHECK(f1.recombination_residual <= 1e-10);
    CHECK((f1.recombined() - saddle.hstar).norm() <=
          1e-10 * (1.0 + saddle.hstar.norm()));
    CHECK(f1.mix_weights[0] ==
          doctest::Approx(1.0 / (s.mp.theta + 1.0)).epsilon(1e-15));

    auto f2 = rskelly::decompose_fks_II(s.mp, k, X, Pn, pn);
    CHECK(f2.recombination_residual <= 1e-10);
    CHECK((f2.recombined() - saddle.hstar).norm() <=
          1e-10 * (1.0 + saddle.hstar.norm()));
    CHECK_FALSE(f2.fallback_theta_zero);
  }
}

TEST_CASE("theta = 0 routing of the decompositions") {
  auto mp = testgen::random_params(140, 2, 1, 2, 0.0, 0.5);
  const Vec<double> X = testgen::random_state(141, mp.n, 0.6);
  const Mat<double> Pn = Mat<double>::Zero(mp.n, mp.n);
  const Vec<double> pn = Vec<double>::Zero(mp.n);

  auto f1 = rskelly::decompose_fks_I(mp, 0, X, Pn, pn);
  CHECK(f1.ihp_component.norm() == 0.0);
  CHECK(f1.mix_weights[0] == 1.0);
  CHECK(f1.mix_weights[1] == 0.0);
  // at theta = 0 the target is the Kelly control
  CHECK((f1.recombined() - rskelly::kelly_control(mp, X)).norm() <
        1e-10 * (1.0 + rskelly::kelly_control(mp, X).norm()));

  auto f2 = rskelly::decompose_fks_II(mp, 0, X, Pn, pn);
  CHECK(f2.fallback_theta_zero);
  CHECK(f2.variant == rskelly::DecompositionVariant::penalized);
  CHECK(f2.recombination_residual <= 1e-10);
}

TEST_CASE("penalized decomposition rejects inconsistent saddle inputs") {
  auto s = solved_instance(142, 2, 1, 2);
  const Vec<double> X = testgen::random_state(143, s.mp.n, 0.5);
  auto saddle = rskelly::optimal_controls_primary(s.mp, 0, X, s.sr.value.P[1],
                                                  s.sr.value.p[1]);
  saddle.hstar(0) += 0.5;  // break the identity
  CHECK_THROWS_WITH_AS(rskelly::decompose_penalized_kelly(s.mp, saddle, X),
                       "inconsistent saddle inputs", rskelly::SchemaError);
}
