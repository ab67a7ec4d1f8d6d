#include <catch_amalgamated.hpp>

#include "adaptrial/randomization.hpp"

using namespace adaptrial;

TEST_CASE("optimal_pi closed-form cases") {
  // identity link: pi = sqrt(ev1) / (sqrt(ev1) + sqrt(ev0))
  CHECK(optimal_pi({Link::identity, 0.0, 0.0, 4.0, 1.0}) == Catch::Approx(2.0 / 3.0).margin(1e-15));
  CHECK(optimal_pi({Link::identity, 0.0, 0.0, 9.0, 1.0}) == Catch::Approx(0.75).margin(1e-15));

  // logit link: g'(mu) = 1/{mu(1-mu)}
  CHECK(optimal_pi({Link::logit, 0.5, 0.2, 0.25, 0.16}) == Catch::Approx(4.0 / 9.0).margin(1e-14));

  // log link: g'(mu) = 1/mu
  CHECK(optimal_pi({Link::log, 0.5, 0.25, 0.25, 0.1875}) ==
        Catch::Approx(1.0 / (1.0 + std::sqrt(3.0))).margin(1e-14));
}

TEST_CASE("optimal_pi clamps and rejects bad inputs") {
  CHECK(optimal_pi({Link::identity, 0.0, 0.0, 1e-6, 1.0}) == 0.05);
  CHECK(optimal_pi({Link::identity, 0.0, 0.0, 1.0, 1e-6}) == 0.95);
  CHECK(optimal_pi({Link::identity, 0.0, 0.0, 1e-6, 1.0}, 0.2) == 0.2);

  CHECK_THROWS_AS(optimal_pi({Link::identity, 0.0, 0.0, -1.0, 1.0}), std::invalid_argument);
  CHECK_THROWS_AS(optimal_pi({Link::identity, 0.0, 0.0, 0.0, 0.0}), std::invalid_argument);
  CHECK_THROWS_AS(optimal_pi({Link::identity, 0.0, 0.0, 1.0, 1.0}, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(optimal_pi({Link::identity, 0.0, 0.0, 1.0, 1.0}, 0.5), std::invalid_argument);
}

TEST_CASE("allocation formula properties on randomized inputs") {
  Rng rng(90210);
  const double clamp = 0.05;
  for (int i = 0; i < 1000; ++i) {
    Link link = i % 3 == 0 ? Link::identity : (i % 3 == 1 ? Link::log : Link::logit);
    double mu1 = 0.05 + 0.9 * rng.uniform();
    double mu0 = 0.05 + 0.9 * rng.uniform();
    double ev1 = 0.01 + rng.uniform();
    double ev0 = 0.01 + rng.uniform();
    double pi = optimal_pi({link, mu1, mu0, ev1, ev0}, clamp);

    CHECK(pi >= clamp);
    CHECK(pi <= 1.0 - clamp);

    // scaling both variances by a common factor leaves the share unchanged
    double c = 0.1 + 5.0 * rng.uniform();
    CHECK(optimal_pi({link, mu1, mu0, c * ev1, c * ev0}, clamp) == Catch::Approx(pi).margin(1e-12));

    // swapping the arms reflects the share
    double swapped = optimal_pi({link, mu0, mu1, ev0, ev1}, clamp);
    CHECK(swapped == Catch::Approx(1.0 - pi).margin(1e-12));

    // more outcome noise on the experimental arm never lowers its share
    double larger = optimal_pi({link, mu1, mu0, 1.5 * ev1, ev0}, clamp);
    CHECK(larger >= pi - 1e-12);

    // the pointwise core agrees with the aggregate formula
    CHECK(optimal_propensity_at(link_deriv(link, mu1), link_deriv(link, mu0), ev1, ev0, clamp) ==
          Catch::Approx(pi).margin(1e-15));
  }
}

TEST_CASE("optimal_propensity composes the pointwise formula") {
  auto v1 = [](const Vec& w) { return 0.1 + 0.05 * w(0) * w(0); };
  auto v0 = [](const Vec& w) { return 0.2 / (1.0 + std::exp(-w(1))); };
  Rng rng(7);
  for (int i = 0; i < 200; ++i) {
    Vec w(2);
    w << rng.normal(), rng.normal();
    double direct = optimal_propensity(Link::logit, 0.3, 0.1, v1, v0, w, 0.05);
    double expect =
        optimal_propensity_at(link_deriv(Link::logit, 0.3), link_deriv(Link::logit, 0.1), v1(w),
                              v0(w), 0.05);
    CHECK(direct == expect);
  }
}

TEST_CASE("resolve_probability covers every mechanism kind") {
  Vec w(2);
  w << 0.3, -1.0;

  AssignmentMechanism fixed = FixedProbability{0.37};
  CHECK(resolve_probability(fixed, w).p == 0.37);
  CHECK_FALSE(resolve_probability(fixed, w).fallback);

  PropensityTable table;
  table.selector.indices = {0};
  table.selector.thresholds = {0.0};
  table.cells[{1}] = 0.8;
  AssignmentMechanism tmech = table;
  auto hit = resolve_probability(tmech, w);
  CHECK(hit.p == 0.8);
  CHECK_FALSE(hit.fallback);

  Vec wlow(2);
  wlow << -0.3, 0.0;
  auto miss = resolve_probability(tmech, wlow);
  CHECK(miss.p == 0.5);
  CHECK(miss.fallback);

  PropensityModel pm;
  pm.selector.indices = {0};
  pm.selector.thresholds = {std::nullopt};
  pm.coef = (Vec(4) << 0.0, 0.5, 1.0, -0.5).finished();
  pm.gp1 = 2.0;
  pm.gp0 = 3.0;
  pm.clamp = 0.05;
  AssignmentMechanism mmech = pm;
  double m1 = inv_logit(0.0 + 0.5 + 0.3 * (1.0 - 0.5));
  double m0 = inv_logit(0.3 * 1.0);
  double expect = optimal_propensity_at(2.0, 3.0, m1 * (1 - m1), m0 * (1 - m0), 0.05);
  CHECK(resolve_probability(mmech, w).p == Catch::Approx(expect).margin(1e-14));
}

TEST_CASE("propensity model honours its variance floor") {
  PropensityModel pm;
  pm.selector.indices = {0};
  pm.selector.thresholds = {std::nullopt};
  // coefficients saturate the fitted means at w = 20
  pm.coef = (Vec(4) << 0.0, 0.0, 1.0, 0.0).finished();
  pm.gp1 = 1.0;
  pm.gp0 = 1.0;
  pm.variance_floor = 1e-6;
  AssignmentMechanism mech = pm;
  Vec w(1);
  w << 40.0;
  // both conditional variances floor out, so the share is exactly 1/2
  CHECK(resolve_probability(mech, w).p == Catch::Approx(0.5).margin(1e-12));
}

TEST_CASE("assignment draws follow the requested probabilities") {
  Rng rng(31);
  int n1 = 0;
  for (int i = 0; i < 10000; ++i) n1 += assign_cir(0.3, rng) == Arm::experimental ? 1 : 0;
  CHECK(n1 > 2800);
  CHECK(n1 < 3200);

  CHECK_THROWS_AS(assign_cir(0.0, rng), std::invalid_argument);
  CHECK_THROWS_AS(assign_cir(1.0, rng), std::invalid_argument);

  PropensityTable table;
  table.selector.indices = {0};
  table.selector.thresholds = {0.0};
  table.cells[{0}] = 0.1;
  table.cells[{1}] = 0.9;
  AssignmentMechanism mech = table;
  Vec hi(1), lo(1);
  hi << 1.0;
  lo << -1.0;
  int hi1 = 0, lo1 = 0;
  for (int i = 0; i < 5000; ++i) {
    hi1 += assign_cdr(mech, hi, rng) == Arm::experimental ? 1 : 0;
    lo1 += assign_cdr(mech, lo, rng) == Arm::experimental ? 1 : 0;
  }
  CHECK(hi1 > 4350);
  CHECK(lo1 < 650);

  bool fell_back = false;
  PropensityTable empty_cell;
  empty_cell.selector = table.selector;
  empty_cell.cells[{0}] = 0.1;
  AssignmentMechanism sparse = empty_cell;
  assign_cdr(sparse, hi, rng, &fell_back);
  CHECK(fell_back);
}
