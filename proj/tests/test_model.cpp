#include <string>

#include "doctest.h"
#include "rskelly/model.hpp"
#include "test_instances.hpp"

using rskelly::ExplorationSchedule;
using rskelly::Mat;
using rskelly::MarketParams;
using rskelly::Vec;

namespace {

bool has_error(const rskelly::ValidationReport& rep, const std::string& needle) {
  for (const auto& e : rep.errors)
    if (e.find(needle) != std::string::npos) return true;
  return false;
}

}  // namespace

TEST_CASE("derive_constants computes the documented quantities") {
  auto mp = testgen::random_params(11, 2, 2, 5, 1.0, 0.25);
  auto dc = rskelly::derive_constants(mp);
  Mat<double> expect_bt =
      Mat<double>::Identity(mp.n, mp.n) + mp.Bmat * mp.dt;
  CHECK((dc.Btilde - expect_bt).norm() == 0.0);
  CHECK((dc.SigmaGram - mp.Sigma * mp.Sigma.transpose()).norm() == 0.0);
  Mat<double> prod = dc.SigmaGram * dc.SigmaGramInv;
  CHECK((prod - Mat<double>::Identity(mp.m, mp.m)).norm() < 1e-12);
  CHECK(dc.T == doctest::Approx(5 * 0.25));
}

TEST_CASE("validate_params accepts a well-formed instance") {
  auto mp = testgen::random_params(1, 3, 2, 8, 0.5, 0.1);
  auto rep = rskelly::validate_params(mp);
  CHECK(rep.ok);
  CHECK(rep.errors.empty());
  CHECK(rep.warnings.empty());  // d = n+m+1 draws no warning
}

TEST_CASE("validate_params flags structural problems") {
  auto good = testgen::random_params(2, 2, 1, 4, 1.0, 0.5);

  SUBCASE("wrong a length") {
    auto mp = good;
    mp.a = Vec<double>::Zero(mp.m + 1);
    auto rep = rskelly::validate_params(mp);
    CHECK_FALSE(rep.ok);
    CHECK(has_error(rep, "a must have length m"));
  }
  SUBCASE("wrong Sigma shape") {
    auto mp = good;
    mp.Sigma = Mat<double>::Zero(mp.m, mp.d + 2);
    auto rep = rskelly::validate_params(mp);
    CHECK_FALSE(rep.ok);
    CHECK(has_error(rep, "Sigma must be m x d"));
  }
  SUBCASE("nonpositive dt") {
    auto mp = good;
    mp.dt = 0.0;
    CHECK(has_error(rskelly::validate_params(mp), "dt must be > 0"));
  }
  SUBCASE("negative theta") {
    auto mp = good;
    mp.theta = -0.25;
    CHECK(has_error(rskelly::validate_params(mp), "theta must be >= 0"));
  }
  SUBCASE("K zero") {
    auto mp = good;
    mp.K = 0;
    CHECK(has_error(rskelly::validate_params(mp), "K must be >= 1"));
  }
  SUBCASE("non-finite entry") {
    auto mp = good;
    mp.a(0) = std::numeric_limits<double>::quiet_NaN();
    CHECK(has_error(rskelly::validate_params(mp), "parameters must be finite"));
  }
  SUBCASE("rank-deficient diffusion") {
    auto mp = good;
    mp.Sigma.row(1) = mp.Sigma.row(0);
    auto rep = rskelly::validate_params(mp);
    CHECK_FALSE(rep.ok);
  }
  SUBCASE("unusual shock dimension warns but passes") {
    auto mp = good;
    mp.d = mp.n + mp.m + 2;
    mp.Sigma = Mat<double>::Zero(mp.m, mp.d);
    for (rskelly::index_t i = 0; i < mp.m; ++i) mp.Sigma(i, i) = 0.5;
    mp.Lambda = Mat<double>::Zero(mp.n, mp.d);
    mp.Xi = Vec<double>::Zero(mp.d);
    auto rep = rskelly::validate_params(mp);
    CHECK(rep.ok);
    REQUIRE(rep.warnings.size() == 1);
    CHECK(rep.warnings[0].find("n+m+1") != std::string::npos);
  }
}

TEST_CASE("exploration bound: margins, violations, theta = 0") {
  auto mp = testgen::random_params(5, 2, 1, 6, 1.5, 0.2);
  const Mat<double> gram = mp.Sigma * mp.Sigma.transpose();

  SUBCASE("half-bound schedule passes with positive margins") {
    auto sched = testgen::sched_half_curvature(mp);
    auto rep = rskelly::exploration_bound_ok(mp, sched);
    CHECK(rep.ok);
    CHECK(rep.first_violation_step == -1);
    REQUIRE(rep.margins.size() == static_cast<std::size_t>(mp.K));
    for (double mgn : rep.margins) CHECK(mgn > 0.0);
  }
  SUBCASE("oversized covariance at one step is located") {
    auto sched = testgen::sched_half_curvature(mp);
    // push step 3 past the bound: Psi = 2 * inverse(theta G dt)
    Mat<double> big = (2.0 / (mp.theta * mp.dt)) * gram.inverse();
    sched.psi[3] = 0.5 * (big + big.transpose());
    auto rep = rskelly::exploration_bound_ok(mp, sched);
    CHECK_FALSE(rep.ok);
    CHECK(rep.first_violation_step == 3);
    CHECK(rep.margins[3] <= 0.0);
    CHECK(rep.margins[0] > 0.0);
  }
  SUBCASE("theta = 0 is vacuous") {
    auto mp0 = mp;
    mp0.theta = 0.0;
    Mat<double> huge = 1e6 * Mat<double>::Identity(mp.m, mp.m);
    auto rep = rskelly::exploration_bound_ok(
        mp0, ExplorationSchedule<double>::constant(huge, mp0.K));
    CHECK(rep.ok);
    CHECK(rep.theta_zero);
  }
  SUBCASE("schedule length mismatch throws") {
    auto sched = testgen::sched_half_curvature(mp);
    sched.psi.pop_back();
    CHECK_THROWS_WITH_AS(rskelly::exploration_bound_ok(mp, sched),
                         "exploration schedule must have K entries",
                         rskelly::SchemaError);
  }
  SUBCASE("wrong Psi shape throws") {
    auto sched = rskelly::ExplorationSchedule<double>::constant(
        Mat<double>::Identity(mp.m + 1, mp.m + 1), mp.K);
    CHECK_THROWS_WITH_AS(rskelly::exploration_bound_ok(mp, sched),
                         "Psi_k must be m x m", rskelly::SchemaError);
  }
  SUBCASE("non-SPD Psi throws") {
    Mat<double> bad = Mat<double>::Zero(mp.m, mp.m);
    bad(0, 0) = -1.0;
    auto sched = rskelly::ExplorationSchedule<double>::constant(bad, mp.K);
    CHECK_THROWS_WITH_AS(rskelly::exploration_bound_ok(mp, sched),
                         "exploration covariance not SPD", rskelly::SchemaError);
  }
}

TEST_CASE("scaling an admissible schedule down keeps it admissible") {
  auto mp = testgen::random_params(9, 3, 2, 4, 2.0, 0.25);
  auto sched = testgen::sched_half_curvature(mp);
  auto rep_half = rskelly::exploration_bound_ok(mp, sched);
  for (auto& p : sched.psi) p *= 0.25;
  auto rep_small = rskelly::exploration_bound_ok(mp, sched);
  CHECK(rep_half.ok);
  CHECK(rep_small.ok);
  for (std::size_t k = 0; k < sched.psi.size(); ++k)
    CHECK(rep_small.margins[k] > rep_half.margins[k]);
}
