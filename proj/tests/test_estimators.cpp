#include <catch_amalgamated.hpp>

#include "adaptrial/engine.hpp"

using namespace adaptrial;

namespace {

PatientRecord rec(int stage, double w0, int a, double y) {
  return {stage, (Vec(1) << w0).finished(), arm_from_int(a), y};
}

TrialData two_stage_fixture() {
  TrialData trial;
  trial.k = 2;
  trial.stage_sizes = {4, 4};
  trial.mechanisms = {FixedProbability{0.5}, FixedProbability{0.4}};
  trial.records = {rec(1, 0.5, 1, 1.0),  rec(1, -0.2, 1, 0.0), rec(1, 1.0, 0, 1.0),
                   rec(1, 0.3, 0, 0.0),  rec(2, 0.1, 1, 1.0),  rec(2, -0.5, 1, 1.0),
                   rec(2, 0.9, 0, 0.0),  rec(2, -1.1, 0, 1.0)};
  return trial;
}

}  // namespace

TEST_CASE("stage means") {
  TrialData trial = two_stage_fixture();
  CHECK(stage_mean(trial.stage(1), Arm::experimental) == 0.5);
  CHECK(stage_mean(trial.stage(1), Arm::control) == 0.5);
  CHECK(stage_mean(trial.stage(2), Arm::experimental) == 1.0);

  std::vector<PatientRecord> controls{rec(1, 0.0, 0, 1.0)};
  CHECK_THROWS_AS(stage_mean(std::span<const PatientRecord>(controls.data(), controls.size()),
                             Arm::experimental),
                  EstimationError);
}

TEST_CASE("hajek mean under a known table mechanism") {
  PropensityTable table;
  table.selector.indices = {0};
  table.selector.thresholds = {0.0};
  table.cells[{1}] = 0.2;
  table.cells[{0}] = 0.8;
  AssignmentMechanism mech = table;

  std::vector<PatientRecord> recs{rec(1, 1.0, 1, 1.0), rec(1, -1.0, 1, 0.0),
                                  rec(1, 1.0, 0, 1.0), rec(1, -1.0, 0, 1.0)};
  std::span<const PatientRecord> sp(recs.data(), recs.size());
  // arm 1 weights: 1/0.2 = 5 and 1/0.8 = 1.25, so the mean is 5/6.25
  CHECK(stage_mean_ipw(sp, mech, Arm::experimental) == Catch::Approx(0.8).margin(1e-15));
  CHECK(stage_mean_ipw(sp, mech, Arm::control) == Catch::Approx(1.0).margin(1e-15));

  // a constant mechanism reduces to the plain mean, bit for bit
  AssignmentMechanism fixed = FixedProbability{0.37};
  CHECK(stage_mean_ipw(sp, fixed, Arm::experimental) == stage_mean(sp, Arm::experimental));
}

TEST_CASE("weighted delta on the link scale") {
  std::vector<double> eta{0.5, 0.5}, mu1s{0.5, 0.7}, mu0s{0.2, 0.2};
  CHECK(weighted_delta(Link::logit, eta, mu1s, mu0s) ==
        Catch::Approx(1.791759469228055).margin(1e-14));
  CHECK(weighted_delta(Link::identity, eta, mu1s, mu0s) ==
        Catch::Approx(0.4).margin(1e-15));

  std::vector<double> bad{0.5, 0.6};
  CHECK_THROWS_AS(weighted_delta(Link::logit, bad, mu1s, mu0s), std::invalid_argument);
  std::vector<double> neg{1.5, -0.5};
  CHECK_THROWS_AS(weighted_delta(Link::logit, neg, mu1s, mu0s), std::invalid_argument);
  std::vector<double> shorter{1.0};
  CHECK_THROWS_AS(weighted_delta(Link::logit, shorter, mu1s, mu0s), std::invalid_argument);
}

TEST_CASE("optimal stage weights") {
  std::vector<int> n{250, 250};
  std::vector<double> s2{2.0, 1.0};
  auto w = optimal_weights(n, s2);
  REQUIRE(w.size() == 2);
  CHECK(w[0] == Catch::Approx(1.0 / 3.0).margin(1e-15));
  CHECK(w[1] == Catch::Approx(2.0 / 3.0).margin(1e-15));

  std::vector<int> n2{100, 300};
  std::vector<double> ones{1.0, 1.0};
  auto w2 = optimal_weights(n2, ones);
  CHECK(w2[0] == 0.25);
  CHECK(w2[1] == 0.75);

  bool degenerate = false;
  std::vector<double> floored{0.0, 1e-13};
  auto weq = optimal_weights(n, floored, &degenerate);
  CHECK(degenerate);
  CHECK(weq[0] == 0.5);
  CHECK(weq[1] == 0.5);

  std::vector<int> zero{0, 250};
  CHECK_THROWS_AS(optimal_weights(zero, s2), std::invalid_argument);
  std::vector<double> nan2{1.0, std::numeric_limits<double>::quiet_NaN()};
  CHECK_THROWS_AS(optimal_weights(n, nan2), std::invalid_argument);
  std::vector<double> one{1.0};
  CHECK_THROWS_AS(optimal_weights(n, one), std::invalid_argument);
}

TEST_CASE("two-stage weight equals the inverse-variance closed form") {
  // exactly representable fixture: both routes round to the same double
  std::vector<int> n{250, 250};
  std::vector<double> s2{2.0, 1.0};
  double theta = optimal_weights(n, s2)[0];
  CHECK(theta == 250.0 * 1.0 / (250.0 * 2.0 + 250.0 * 1.0));

  Rng rng(314);
  for (int i = 0; i < 300; ++i) {
    std::vector<int> ns{2 + static_cast<int>(rng.uniform() * 498),
                        2 + static_cast<int>(rng.uniform() * 498)};
    std::vector<double> ss{0.1 + 10.0 * rng.uniform(), 0.1 + 10.0 * rng.uniform()};
    double general = optimal_weights(ns, ss)[0];
    double closed = ns[0] * ss[1] / (ns[1] * ss[0] + ns[0] * ss[1]);
    CHECK(general == Catch::Approx(closed).epsilon(1e-12));
  }
}

TEST_CASE("augmentation columns") {
  TrialData trial = two_stage_fixture();
  auto b = [](const Vec& w) { return 2.0 * w(0); };
  CHECK(augmentation_column_cir(trial.stage(1), 0.5, b) == Catch::Approx(-0.25).margin(1e-15));
  CHECK_THROWS_AS(augmentation_column_cir(trial.stage(1), 0.0, b), std::invalid_argument);

  std::span<const PatientRecord> empty;
  AssignmentMechanism mech = FixedProbability{0.5};
  CHECK_THROWS_AS(augmentation_column(empty, mech, b), std::invalid_argument);
}

TEST_CASE("aipw reductions") {
  TrialData trial = two_stage_fixture();
  auto b1 = [](const Vec& w) { return 0.3 * w(0); };
  auto b2 = [](const Vec& w) { return -0.1 + 0.2 * w(0); };

  // constant-propensity aipw and the two-stage augmented form coincide exactly
  std::vector<double> eta{0.3, 0.7};
  std::vector<WFn> cs{b1, b2};
  CHECK(augmented_delta(trial, Link::identity, 0.3, b1, b2) ==
        aipw_delta(trial, Link::identity, eta, cs));

  // zero augmentation collapses to the weighted plug-in
  std::vector<WFn> zeros{[](const Vec&) { return 0.0; }, [](const Vec&) { return 0.0; }};
  std::vector<double> mu1s, mu0s;
  for (int s = 1; s <= 2; ++s) {
    mu1s.push_back(stage_mean_ipw(trial.stage(s), trial.mechanisms[s - 1], Arm::experimental));
    mu0s.push_back(stage_mean_ipw(trial.stage(s), trial.mechanisms[s - 1], Arm::control));
  }
  CHECK(aipw_delta(trial, Link::identity, eta, zeros) ==
        weighted_delta(Link::identity, eta, mu1s, mu0s));

  CHECK_THROWS_AS(augmented_delta(trial, Link::identity, 1.5, b1, b2), std::invalid_argument);
  std::vector<double> three{0.2, 0.3, 0.5};
  CHECK_THROWS_AS(aipw_delta(trial, Link::identity, three, cs), std::invalid_argument);
}

TEST_CASE("optimal augmentation functions") {
  auto m1 = [](const Vec& w) { return 0.5 + 0.1 * w(0); };
  auto m0 = [](const Vec&) { return 0.3; };
  double mu1 = 0.5, mu0 = 0.3;

  auto [c1, c2] = optimal_augmentation_cir(Link::logit, mu1, mu0, m1, m0, 0.5, 0.4, 0.3);
  Vec at_mean(1);
  at_mean << 0.0;  // m1 = mu1 and m0 = mu0 here, so both columns vanish
  CHECK(c1(at_mean) == Catch::Approx(0.0).margin(1e-15));
  CHECK(c2(at_mean) == Catch::Approx(0.0).margin(1e-15));

  Vec w(1);
  w << 2.0;
  double gp1 = link_deriv(Link::logit, mu1), gp0 = link_deriv(Link::logit, mu0);
  double expect1 = 0.3 * (gp1 * (m1(w) - mu1) / 0.5 + gp0 * (m0(w) - mu0) / 0.5);
  double expect2 = 0.7 * (gp1 * (m1(w) - mu1) / 0.4 + gp0 * (m0(w) - mu0) / 0.6);
  CHECK(c1(w) == Catch::Approx(expect1).margin(1e-14));
  CHECK(c2(w) == Catch::Approx(expect2).margin(1e-14));

  std::array<AssignmentMechanism, 2> mechs{FixedProbability{0.5}, FixedProbability{0.4}};
  std::array<double, 2> eta{0.3, 0.7};
  auto cs = optimal_augmentation_cdr(Link::logit, mu1, mu0, m1, m0, mechs, eta);
  REQUIRE(cs.size() == 2);
  CHECK(cs[0](w) == c1(w));
  CHECK(cs[1](w) == c2(w));
}

TEST_CASE("stage variance matches a direct evaluation") {
  TrialData trial = two_stage_fixture();
  double mu1 = 0.6, mu0 = 0.3;
  auto m1 = [](const Vec& w) { return 0.5 + 0.1 * w(0); };
  auto m0 = [](const Vec&) { return 0.3; };

  double got = stage_variance(trial.stage(2), trial.mechanisms[1], Link::logit, mu1, mu0, m1, m0);

  double gp1 = link_deriv(Link::logit, mu1), gp0 = link_deriv(Link::logit, mu0);
  std::vector<double> psi;
  for (const auto& r : trial.stage(2)) {
    double a = arm_ind(r.a);
    double term = gp1 * a * (r.y - m1(r.w)) / 0.4 - gp0 * (1.0 - a) * (r.y - m0(r.w)) / 0.6 +
                  gp1 * (m1(r.w) - mu1) - gp0 * (m0(r.w) - mu0);
    psi.push_back(term);
  }
  double mean = (psi[0] + psi[1] + psi[2] + psi[3]) / 4.0;
  double expect = 0.0;
  for (double v : psi) expect += (v - mean) * (v - mean);
  expect /= 3.0;
  CHECK(got == Catch::Approx(expect).margin(1e-12));

  std::vector<PatientRecord> tiny{rec(1, 0.0, 1, 1.0)};
  CHECK_THROWS_AS(stage_variance(std::span<const PatientRecord>(tiny.data(), tiny.size()),
                                 trial.mechanisms[0], Link::logit, mu1, mu0, m1, m0),
                  EstimationError);
}

TEST_CASE("final variance and interval geometry") {
  TrialData trial = two_stage_fixture();
  double mu1 = 0.6, mu0 = 0.4;
  std::vector<double> eta{0.5, 0.5};
  std::vector<WFn> cs{[](const Vec& w) { return 0.2 * w(0); },
                      [](const Vec& w) { return -0.1 * w(0); }};
  double delta = 0.8;
  VarianceResult vr = final_variance(trial, Link::identity, mu1, mu0, eta, cs, delta, 0.95);

  CHECK(vr.se == Catch::Approx(std::sqrt(vr.var_scaled / 4.0)).margin(1e-15));
  CHECK((vr.ci_hi - delta) / vr.se == Catch::Approx(1.959963984540054).margin(1e-12));
  CHECK((delta - vr.ci_lo) / vr.se == Catch::Approx(1.959963984540054).margin(1e-12));

  // direct evaluation of the per-stage variance sum
  double total = 0.0;
  for (int s = 1; s <= 2; ++s) {
    double pi = s == 1 ? 0.5 : 0.4;
    std::vector<double> phi;
    for (const auto& r : trial.stage(s)) {
      double a = arm_ind(r.a);
      phi.push_back(eta[s - 1] * a * (r.y - mu1) / pi - eta[s - 1] * (1.0 - a) * (r.y - mu0) / (1.0 - pi) -
                    (a - pi) * cs[s - 1](r.w));
    }
    double mean = (phi[0] + phi[1] + phi[2] + phi[3]) / 4.0;
    double ss = 0.0;
    for (double v : phi) ss += (v - mean) * (v - mean);
    total += (4.0 / 4.0) * ss / 3.0;
  }
  CHECK(vr.var_scaled == Catch::Approx(total).margin(1e-12));

  CHECK_THROWS_AS(final_variance(trial, Link::identity, mu1, mu0, eta, cs, delta, 1.0),
                  std::invalid_argument);
}

TEST_CASE("normal quantile") {
  CHECK(normal_quantile(0.975) == Catch::Approx(1.959963984540054).margin(1e-12));
  CHECK(normal_quantile(0.5) == Catch::Approx(0.0).margin(1e-15));
  CHECK_THROWS_AS(normal_quantile(0.0), std::invalid_argument);
  CHECK_THROWS_AS(normal_quantile(1.0), std::invalid_argument);
}

namespace {

Scenario small_two_stage_scenario() {
  PopulationSpec pop(Vec::Zero(3), 0.5 * Mat::Identity(3, 3), -2.5, 1.0,
                     (Vec(3) << -0.2, -0.2, 0.2).finished(),
                     (Vec(3) << 1.0, -1.0, -1.5).finished());
  Scenario sc;
  sc.name = "unit";
  sc.population = pop;
  sc.link = Link::logit;
  sc.x = full_selector(3);
  sc.x_label = "W";
  sc.replications = 1;
  sc.seed = 424242;
  DesignEntry de;
  de.name = "two-stage";
  de.design.k = 2;
  de.design.stage_sizes = {100, 100};
  de.design.stage1 = AssignmentMechanism{FixedProbability{0.5}};
  AdaptationRule rule;
  rule.design_class = DesignClass::cir;
  rule.selector = sc.x;
  de.design.adaptation = rule;
  de.estimators = {EstimatorKind::simple, EstimatorKind::optimized};
  sc.designs.push_back(de);
  sc.reference.design = "two-stage";
  return sc;
}

}  // namespace

TEST_CASE("estimate_full agrees with the generic pipeline") {
  Scenario sc = small_two_stage_scenario();
  TrialOutcome out = run_trial(sc, 0, 0);
  REQUIRE_FALSE(out.failed);
  const TrialData& trial = out.data;

  NuisanceBundle nb = fit_nuisance(trial, sc.link, EstimatorKind::optimized);
  WFn m1 = [&](const Vec& w) { return nb.m1(w); };
  WFn m0 = [&](const Vec& w) { return nb.m0(w); };

  std::vector<int> ns{trial.stage_sizes[0], trial.stage_sizes[1]};
  std::vector<double> sig(2);
  for (int s = 1; s <= 2; ++s)
    sig[s - 1] =
        stage_variance(trial.stage(s), trial.mechanisms[s - 1], sc.link, nb.mu1, nb.mu0, m1, m0);
  auto eta = optimal_weights(ns, sig);
  auto cs = optimal_augmentation_cdr(sc.link, nb.mu1, nb.mu0, m1, m0, trial.mechanisms, eta);
  double delta = aipw_delta(trial, sc.link, eta, cs);
  VarianceResult vr = final_variance(trial, sc.link, nb.mu1, nb.mu0, eta, cs, delta, sc.level);

  const EstimateResult& opt = out.estimates[1];
  CHECK(opt.delta == Catch::Approx(delta).margin(1e-10));
  CHECK(opt.se == Catch::Approx(vr.se).margin(1e-10));
  CHECK(opt.weights[0] == Catch::Approx(eta[0]).margin(1e-12));

  const EstimateResult& simple = out.estimates[0];
  std::vector<double> nw{0.5, 0.5}, mu1s, mu0s;
  for (int s = 1; s <= 2; ++s) {
    mu1s.push_back(stage_mean_ipw(trial.stage(s), trial.mechanisms[s - 1], Arm::experimental));
    mu0s.push_back(stage_mean_ipw(trial.stage(s), trial.mechanisms[s - 1], Arm::control));
  }
  CHECK(simple.delta == Catch::Approx(weighted_delta(sc.link, nw, mu1s, mu0s)).margin(1e-12));
  CHECK(simple.weights[0] == 0.5);
}

TEST_CASE("estimate_full input guards") {
  TrialData trial = two_stage_fixture();
  NuisanceBundle nb = fit_nuisance(trial, Link::identity, EstimatorKind::simple);
  CHECK_THROWS_AS(estimate_full(trial, Link::identity, EstimatorKind::simple, nb, 0.0),
                  std::invalid_argument);
  CHECK_THROWS_AS(estimate_full(trial, Link::identity, EstimatorKind::optimized, nb),
                  std::invalid_argument);
}
