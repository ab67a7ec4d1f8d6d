#include <catch_amalgamated.hpp>

#include "adaptrial/core.hpp"
#include "adaptrial/rng.hpp"

using namespace adaptrial;

TEST_CASE("link values and derivatives") {
  CHECK(link_value(Link::identity, 0.3) == 0.3);
  CHECK(link_value(Link::log, 2.0) == Catch::Approx(0.6931471805599453).margin(1e-15));
  CHECK(link_value(Link::logit, 0.25) == Catch::Approx(-1.0986122886681098).margin(1e-14));
  CHECK(link_value(Link::logit, 0.5) == Catch::Approx(0.0).margin(1e-15));

  CHECK(link_deriv(Link::identity, 0.7) == 1.0);
  CHECK(link_deriv(Link::log, 0.25) == Catch::Approx(4.0).margin(1e-12));
  CHECK(link_deriv(Link::logit, 0.25) == Catch::Approx(16.0 / 3.0).margin(1e-12));
}

TEST_CASE("treatment effect is the link-scale contrast") {
  CHECK(treatment_effect(Link::log, 0.6, 0.2) == Catch::Approx(1.0986122886681098).margin(1e-14));
  CHECK(treatment_effect(Link::identity, 0.7, 0.2) == Catch::Approx(0.5).margin(1e-15));
  CHECK(treatment_effect(Link::logit, 0.4, 0.4) == 0.0);
}

TEST_CASE("inv_logit is stable and inverts the logit link") {
  CHECK(inv_logit(0.0) == 0.5);
  CHECK(inv_logit(800.0) <= 1.0);
  CHECK(inv_logit(-800.0) >= 0.0);
  for (double p : {0.01, 0.2, 0.5, 0.77, 0.99})
    CHECK(inv_logit(link_value(Link::logit, p)) == Catch::Approx(p).margin(1e-12));
}

TEST_CASE("interaction design row and linear predictor agree") {
  Vec x(2);
  x << 2.0, 3.0;
  Vec row = interaction_row(1.0, x);
  REQUIRE(row.size() == 6);
  CHECK(row(0) == 1.0);
  CHECK(row(1) == 1.0);
  CHECK(row(2) == 2.0);
  CHECK(row(3) == 3.0);
  CHECK(row(4) == 2.0);
  CHECK(row(5) == 3.0);

  Vec coef(6);
  coef << 0.5, -1.0, 0.25, 0.75, 2.0, -0.5;
  for (double a : {0.0, 1.0})
    CHECK(interaction_lp(coef, a, x) ==
          Catch::Approx(interaction_row(a, x).dot(coef)).margin(1e-14));
  CHECK_THROWS_AS(interaction_lp(Vec::Zero(5), 1.0, x), std::invalid_argument);
}

TEST_CASE("arm helpers") {
  CHECK(arm_ind(Arm::experimental) == 1.0);
  CHECK(arm_ind(Arm::control) == 0.0);
  CHECK(arm_from_int(1) == Arm::experimental);
  CHECK(arm_from_int(0) == Arm::control);
  CHECK_THROWS_AS(arm_from_int(2), std::invalid_argument);
}

TEST_CASE("covariate selector applies subsets and thresholds") {
  CovariateSelector sel;
  sel.indices = {0, 2};
  sel.thresholds = {std::nullopt, 0.5};
  Vec w(3);
  w << -1.0, 9.0, 0.5;

  Vec x = sel.apply(w);
  REQUIRE(x.size() == 2);
  CHECK(x(0) == -1.0);
  CHECK(x(1) == 1.0);  // 0.5 >= 0.5

  CHECK(sel.describe() == "W1+W3>=0.5");
  CHECK_FALSE(sel.discrete());
  CHECK_THROWS_AS(sel.cell_key(w), std::invalid_argument);

  sel.thresholds = {0.0, 0.5};
  CHECK(sel.discrete());
  auto key = sel.cell_key(w);
  REQUIRE(key.size() == 2);
  CHECK(key[0] == 0);
  CHECK(key[1] == 1);
}

TEST_CASE("covariate selector validation") {
  CovariateSelector sel;
  CHECK_FALSE(sel.validate(3).empty());  // empty selector

  sel.indices = {0, 0};
  sel.thresholds = {std::nullopt, std::nullopt};
  auto issues = sel.validate(3);
  REQUIRE(issues.size() == 1);
  CHECK(issues[0].find("repeats") != std::string::npos);

  sel.indices = {5};
  sel.thresholds = {std::nullopt};
  issues = sel.validate(3);
  REQUIRE(issues.size() == 1);
  CHECK(issues[0].find("out of range") != std::string::npos);

  Vec w(3);
  w << 0, 0, 0;
  CHECK_THROWS_AS(sel.apply(w), std::invalid_argument);

  CovariateSelector full = full_selector(3);
  CHECK(full.validate(3).empty());
  CHECK((full.apply(w) - w).norm() == 0.0);
}

TEST_CASE("design spec validation") {
  DesignSpec d;
  d.k = 2;
  d.stage_sizes = {250, 250};
  auto issues = d.validate(3);
  REQUIRE(issues.size() == 1);
  CHECK(issues[0].find("adaptation rule") != std::string::npos);

  AdaptationRule rule;
  rule.selector = full_selector(3);
  d.adaptation = rule;
  CHECK(d.validate(3).empty());

  d.adaptation->clamp = 0.6;
  CHECK_FALSE(d.validate(3).empty());
  d.adaptation->clamp = 0.05;

  d.adaptation->variance_model = VarianceModel::empirical;
  issues = d.validate(3);  // continuous selector cannot feed empirical cells
  REQUIRE(issues.size() == 1);
  CHECK(issues[0].find("dichotomized") != std::string::npos);

  d.stage_sizes = {250};
  CHECK_FALSE(d.validate(3).empty());

  DesignSpec one;
  one.k = 1;
  one.stage_sizes = {1};
  CHECK_FALSE(one.validate(3).empty());
  one.stage_sizes = {2};
  CHECK(one.validate(3).empty());
  one.stage1 = AssignmentMechanism{FixedProbability{1.0}};
  CHECK_FALSE(one.validate(3).empty());
}

TEST_CASE("population spec outcome means") {
  PopulationSpec pop(Vec::Zero(3), 0.5 * Mat::Identity(3, 3), -2.5, 1.0,
                     (Vec(3) << -0.2, -0.2, 0.2).finished(),
                     (Vec(3) << 1.0, -1.0, -1.5).finished());
  Vec w0 = Vec::Zero(3);
  CHECK(pop.outcome_mean(0.0, w0) == Catch::Approx(inv_logit(-2.5)).margin(1e-15));
  CHECK(pop.outcome_mean(1.0, w0) == Catch::Approx(inv_logit(-1.5)).margin(1e-15));

  Vec w(3);
  w << 1.0, -1.0, 0.5;
  double lp1 = -2.5 + 1.0 + (-0.2 * 1.0 - 0.2 * -1.0 + 0.2 * 0.5) + (1.0 * 1.0 - 1.0 * -1.0 - 1.5 * 0.5);
  CHECK(pop.outcome_mean(1.0, w) == Catch::Approx(inv_logit(lp1)).margin(1e-14));

  CHECK(pop.diagonal_cov());
  PopulationSpec corr = pop;
  corr.cov(0, 1) = corr.cov(1, 0) = 0.1;
  CHECK_FALSE(corr.diagonal_cov());
}

TEST_CASE("trial data stage layout") {
  TrialData trial;
  trial.k = 2;
  trial.stage_sizes = {2, 3};
  trial.mechanisms = {FixedProbability{0.5}, FixedProbability{0.4}};
  for (int s = 1; s <= 2; ++s)
    for (int j = 0; j < trial.stage_sizes[s - 1]; ++j)
      trial.records.push_back({s, Vec::Zero(1), Arm::control, 0.0});

  CHECK(trial.total_n() == 5);
  CHECK(trial.stage_offset(2) == 2);
  CHECK(trial.stage(1).size() == 2);
  CHECK(trial.stage(2).size() == 3);
  CHECK(trial.validate().empty());

  trial.records[3].stage = 1;  // out of place
  CHECK_FALSE(trial.validate().empty());
  trial.records[3].stage = 2;

  trial.mechanisms[1] = FixedProbability{0.0};
  CHECK_FALSE(trial.validate().empty());
}

TEST_CASE("splitmix finalizer and stream derivation") {
  CHECK(mix64(0) == 0xE220A8397B1DCDAFULL);
  CHECK(derive_stream(1, 0) != derive_stream(1, 1));
  CHECK(derive_stream(1, 0) != derive_stream(2, 0));
  CHECK(derive_stream(7, 42) == derive_stream(7, 42));
}

TEST_CASE("fnv1a64 matches the reference test vectors") {
  CHECK(fnv1a64("") == 14695981039346656037ULL);
  CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cULL);
  CHECK(fnv1a64("foobar") == 0x85944171f73967e8ULL);
}

TEST_CASE("rng streams are deterministic and well ranged") {
  Rng a(123), b(123), c(124);
  bool all_equal = true, any_diff = false;
  for (int i = 0; i < 100; ++i) {
    double ua = a.uniform(), ub = b.uniform(), uc = c.uniform();
    CHECK(ua >= 0.0);
    CHECK(ua < 1.0);
    all_equal = all_equal && ua == ub;
    any_diff = any_diff || ua != uc;
  }
  CHECK(all_equal);
  CHECK(any_diff);

  Rng r(5);
  int heads = 0;
  for (int i = 0; i < 10000; ++i) heads += r.bernoulli(0.3) ? 1 : 0;
  CHECK(heads > 2800);
  CHECK(heads < 3200);
}

TEST_CASE("normal draws have standard moments") {
  Rng r(2026);
  const int n = 200000;
  double s = 0.0, s2 = 0.0;
  for (int i = 0; i < n; ++i) {
    double z = r.normal();
    s += z;
    s2 += z * z;
  }
  double mean = s / n;
  double var = s2 / n - mean * mean;
  CHECK(std::abs(mean) < 0.01);
  CHECK(std::abs(var - 1.0) < 0.02);
}
