#pragma once

#include "adaptrial/estimators.hpp"

#include <atomic>
#include <mutex>
#include <thread>

namespace adaptrial {

/** One covariate draw: mean + L z with L the stored factor of the covariance. */
inline Vec draw_covariates(const PopulationSpec& pop, Rng& rng) {
  Vec z(pop.dim());
  for (int j = 0; j < pop.dim(); ++j) z(j) = rng.normal();
  return pop.mean + pop.cov_factor * z;
}

/**
 * Both potential outcomes for one patient, drawn in the fixed order (Y(1),
 * then Y(0)). Only the outcome of the assigned arm ever reaches an estimator.
 */
inline std::pair<double, double> draw_potential_outcomes(const PopulationSpec& pop, const Vec& w,
                                                         Rng& rng) {
  double m1 = pop.outcome_mean(1.0, w);
  double m0 = pop.outcome_mean(0.0, w);
  double y1 = rng.uniform() < m1 ? 1.0 : 0.0;
  double y0 = rng.uniform() < m0 ? 1.0 : 0.0;
  return {y1, y0};
}

struct TrueValueOptions {
  long long budget = 10'000'000;  // Monte Carlo draws
  bool force_mc = false;
  std::uint64_t seed = 0x7157E5EEDULL;  // fixed: truth does not move with the study seed
  int quad_points = 40;
};

/** Population-level targets: marginal means, the estimand, and optimal allocations. */
struct TrueValues {
  double mu1 = 0.0, mu0 = 0.0, delta = 0.0;
  double ev1_w = 0.0, ev0_w = 0.0, pi_opt_w = 0.5;  // X = full W
  double ev1_x = 0.0, ev0_x = 0.0, pi_opt_x = 0.5;  // X from the selector
  std::string method;
};

namespace detail {

/** Gauss-Hermite rule for expectations under N(0,1); weights sum to 1. */
inline void hermite_rule(int m, std::vector<double>& nodes, std::vector<double>& wts) {
  Mat J = Mat::Zero(m, m);
  for (int i = 1; i < m; ++i) {
    double b = std::sqrt(static_cast<double>(i));
    J(i, i - 1) = b;
    J(i - 1, i) = b;
  }
  Eigen::SelfAdjointEigenSolver<Mat> es(J);
  nodes.resize(m);
  wts.resize(m);
  for (int i = 0; i < m; ++i) {
    nodes[i] = es.eigenvalues()(i);
    double v = es.eigenvectors()(0, i);
    wts[i] = v * v;
  }
}

/** Recursive product-rule pass over the listed coordinates. */
template <class F>
inline void grid_walk(const std::vector<int>& dims, const Vec& mean, const Vec& sd,
                      const std::vector<double>& nodes, const std::vector<double>& wts, Vec& w,
                      std::size_t level, double weight, F&& visit) {
  if (level == dims.size()) {
    visit(w, weight);
    return;
  }
  int j = dims[level];
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    w(j) = mean(j) + sd(j) * nodes[i];
    grid_walk(dims, mean, sd, nodes, wts, w, level + 1, weight * wts[i], visit);
  }
}

inline double raw_optimal_share(Link link, double mu1, double mu0, double ev1, double ev0) {
  double s1 = std::abs(link_deriv(link, mu1)) * std::sqrt(std::max(ev1, 0.0));
  double s0 = std::abs(link_deriv(link, mu0)) * std::sqrt(std::max(ev0, 0.0));
  return s1 / (s1 + s0);
}

}  // namespace detail

/**
 * Ground truth by tensor Gauss-Hermite quadrature. Requires a diagonal
 * covariance and an un-dichotomized selector.
 */
inline TrueValues true_marginals_quadrature(const PopulationSpec& pop, Link link,
                                            const CovariateSelector& sel, int points = 40) {
  if (!pop.diagonal_cov())
    throw std::invalid_argument("quadrature path requires a diagonal covariance");
  for (const auto& t : sel.thresholds)
    if (t.has_value())
      throw std::invalid_argument("quadrature path requires an un-dichotomized selector");
  const int d = pop.dim();
  if (d > 6) throw std::invalid_argument("quadrature path supports at most 6 covariates");

  std::vector<double> nodes, wts;
  detail::hermite_rule(points, nodes, wts);
  Vec sd(d);
  for (int j = 0; j < d; ++j) sd(j) = std::sqrt(pop.cov(j, j));

  std::vector<int> all(d);
  for (int j = 0; j < d; ++j) all[j] = j;
  std::vector<int> selected(sel.indices.begin(), sel.indices.end());
  std::vector<int> complement;
  for (int j = 0; j < d; ++j)
    if (std::find(selected.begin(), selected.end(), j) == selected.end()) complement.push_back(j);

  TrueValues tv;
  tv.method = "quadrature";
  Vec w = pop.mean;
  double mu1 = 0.0, mu0 = 0.0, ev1w = 0.0, ev0w = 0.0;
  detail::grid_walk(all, pop.mean, sd, nodes, wts, w, 0, 1.0, [&](const Vec& wv, double wt) {
    double m1 = pop.outcome_mean(1.0, wv);
    double m0 = pop.outcome_mean(0.0, wv);
    mu1 += wt * m1;
    mu0 += wt * m0;
    ev1w += wt * m1 * (1.0 - m1);
    ev0w += wt * m0 * (1.0 - m0);
  });

  double ev1x = 0.0, ev0x = 0.0;
  Vec w2 = pop.mean;
  detail::grid_walk(selected, pop.mean, sd, nodes, wts, w2, 0, 1.0, [&](Vec& wx, double wtx) {
    double c1 = 0.0, c0 = 0.0;
    detail::grid_walk(complement, pop.mean, sd, nodes, wts, wx, 0, 1.0,
                      [&](const Vec& wv, double wtc) {
                        c1 += wtc * pop.outcome_mean(1.0, wv);
                        c0 += wtc * pop.outcome_mean(0.0, wv);
                      });
    ev1x += wtx * c1 * (1.0 - c1);
    ev0x += wtx * c0 * (1.0 - c0);
  });

  tv.mu1 = mu1;
  tv.mu0 = mu0;
  tv.delta = treatment_effect(link, mu1, mu0);
  tv.ev1_w = ev1w;
  tv.ev0_w = ev0w;
  tv.pi_opt_w = detail::raw_optimal_share(link, mu1, mu0, ev1w, ev0w);
  tv.ev1_x = ev1x;
  tv.ev0_x = ev0x;
  tv.pi_opt_x = detail::raw_optimal_share(link, mu1, mu0, ev1x, ev0x);
  return tv;
}

/** Ground truth by Monte Carlo over the covariate law (conditional means averaged). */
inline TrueValues true_marginals_mc(const PopulationSpec& pop, Link link,
                                    const CovariateSelector& sel, long long budget,
                                    std::uint64_t seed) {
  if (budget < 1000) throw std::invalid_argument("Monte Carlo budget too small");
  const int d = pop.dim();
  bool discrete = sel.discrete();
  bool continuous = true;
  for (const auto& t : sel.thresholds)
    if (t.has_value()) continuous = false;
  if (!discrete && !continuous)
    throw std::invalid_argument("true values support subset or fully dichotomized selectors");

  std::vector<int> selected(sel.indices.begin(), sel.indices.end());
  std::vector<int> complement;
  for (int j = 0; j < d; ++j)
    if (std::find(selected.begin(), selected.end(), j) == selected.end()) complement.push_back(j);

  // conditional law of the complement coordinates given the selected ones
  Mat B;          // regression of complement on selected
  Mat cond_fact;  // factor of the conditional covariance
  if (continuous && !complement.empty()) {
    Mat Sss(selected.size(), selected.size()), Scs(complement.size(), selected.size()),
        Scc(complement.size(), complement.size());
    for (std::size_t i = 0; i < selected.size(); ++i)
      for (std::size_t j = 0; j < selected.size(); ++j) Sss(i, j) = pop.cov(selected[i], selected[j]);
    for (std::size_t i = 0; i < complement.size(); ++i)
      for (std::size_t j = 0; j < selected.size(); ++j) Scs(i, j) = pop.cov(complement[i], selected[j]);
    for (std::size_t i = 0; i < complement.size(); ++i)
      for (std::size_t j = 0; j < complement.size(); ++j)
        Scc(i, j) = pop.cov(complement[i], complement[j]);
    B = Scs * Sss.completeOrthogonalDecomposition().pseudoInverse();
    Mat cond = Scc - B * Scs.transpose();
    Eigen::SelfAdjointEigenSolver<Mat> es(cond);
    Vec ev = es.eigenvalues().cwiseMax(0.0);
    cond_fact = es.eigenvectors() * ev.cwiseSqrt().asDiagonal();
  }

  Rng rng(seed);
  double mu1 = 0.0, mu0 = 0.0, ev1w = 0.0, ev0w = 0.0;
  double prod1 = 0.0, prod0 = 0.0;
  struct CellAcc {
    long long n = 0;
    double s1 = 0.0, s0 = 0.0;
  };
  std::map<std::vector<int>, CellAcc> cells;

  Vec w2(d), zs(static_cast<int>(complement.size())), dev(static_cast<int>(selected.size()));
  for (long long i = 0; i < budget; ++i) {
    Vec w = draw_covariates(pop, rng);
    double m1 = pop.outcome_mean(1.0, w);
    double m0 = pop.outcome_mean(0.0, w);
    mu1 += m1;
    mu0 += m0;
    ev1w += m1 * (1.0 - m1);
    ev0w += m0 * (1.0 - m0);
    if (discrete) {
      CellAcc& c = cells[sel.cell_key(w)];
      c.n += 1;
      c.s1 += m1;
      c.s0 += m0;
    } else if (!complement.empty()) {
      // second draw sharing the selected coordinates
      w2 = w;
      for (std::size_t j = 0; j < selected.size(); ++j)
        dev(j) = w(selected[j]) - pop.mean(selected[j]);
      for (std::size_t j = 0; j < complement.size(); ++j) zs(j) = rng.normal();
      Vec shift = B * dev + cond_fact * zs;
      for (std::size_t j = 0; j < complement.size(); ++j)
        w2(complement[j]) = pop.mean(complement[j]) + shift(j);
      prod1 += m1 * pop.outcome_mean(1.0, w2);
      prod0 += m0 * pop.outcome_mean(0.0, w2);
    }
  }
  double n = static_cast<double>(budget);
  TrueValues tv;
  tv.method = "monte-carlo";
  tv.mu1 = mu1 / n;
  tv.mu0 = mu0 / n;
  tv.delta = treatment_effect(link, tv.mu1, tv.mu0);
  tv.ev1_w = ev1w / n;
  tv.ev0_w = ev0w / n;
  tv.pi_opt_w = detail::raw_optimal_share(link, tv.mu1, tv.mu0, tv.ev1_w, tv.ev0_w);
  if (discrete) {
    double e1 = 0.0, e0 = 0.0;
    for (const auto& [key, c] : cells) {
      double p = static_cast<double>(c.n) / n;
      double mb1 = c.s1 / static_cast<double>(c.n);
      double mb0 = c.s0 / static_cast<double>(c.n);
      e1 += p * mb1 * (1.0 - mb1);
      e0 += p * mb0 * (1.0 - mb0);
    }
    tv.ev1_x = e1;
    tv.ev0_x = e0;
  } else if (complement.empty()) {
    tv.ev1_x = tv.ev1_w;
    tv.ev0_x = tv.ev0_w;
  } else {
    // E{v(X)} = mu - E[m(W) m(W')] with W' sharing X
    tv.ev1_x = std::max(tv.mu1 - prod1 / n, 0.0);
    tv.ev0_x = std::max(tv.mu0 - prod0 / n, 0.0);
  }
  tv.pi_opt_x = detail::raw_optimal_share(link, tv.mu1, tv.mu0, tv.ev1_x, tv.ev0_x);
  return tv;
}

inline TrueValues true_marginals(const PopulationSpec& pop, Link link, const CovariateSelector& sel,
                                 const TrueValueOptions& opts = {}) {
  bool continuous = true;
  for (const auto& t : sel.thresholds)
    if (t.has_value()) continuous = false;
  if (!opts.force_mc && pop.diagonal_cov() && continuous && pop.dim() <= 6)
    return true_marginals_quadrature(pop, link, sel, opts.quad_points);
  return true_marginals_mc(pop, link, sel, opts.budget, opts.seed);
}

/** One design variant inside a scenario, with the estimators to run on it. */
struct DesignEntry {
  std::string name;
  DesignSpec design;
  std::vector<EstimatorKind> estimators;
};

struct ReferenceCell {
  std::string design;
  EstimatorKind estimator = EstimatorKind::optimized;
};

/** One simulation cell: a population, a covariate choice, and design variants. */
struct Scenario {
  std::string name;
  int setting = 1;
  PopulationSpec population;
  Link link = Link::logit;
  CovariateSelector x;  // adaptation covariates for this cell
  std::string x_label;
  std::vector<DesignEntry> designs;
  int preliminary_n = 0;
  ReferenceCell reference;
  int replications = 2000;
  std::uint64_t seed = 1;
  double level = 0.95;

  std::vector<std::string> validate() const {
    std::vector<std::string> issues;
    if (name.empty()) issues.push_back("scenario name is empty");
    if (designs.empty()) issues.push_back("scenario has no designs");
    if (replications < 1) issues.push_back("replications must be >= 1");
    if (!(level > 0.0 && level < 1.0)) issues.push_back("level must lie in (0,1)");
    for (auto& m : x.validate(population.dim())) issues.push_back("x: " + m);
    bool ref_found = false;
    std::vector<std::string> names;
    bool needs_prelim = false;
    for (const auto& de : designs) {
      if (std::find(names.begin(), names.end(), de.name) != names.end())
        issues.push_back("duplicate design name: " + de.name);
      names.push_back(de.name);
      if (de.estimators.empty()) issues.push_back(de.name + ": no estimators requested");
      for (auto& m : de.design.validate(population.dim()))
        issues.push_back(de.name + ": " + m);
      if (std::holds_alternative<AdaptationRule>(de.design.stage1)) needs_prelim = true;
      if (de.name == reference.design &&
          std::find(de.estimators.begin(), de.estimators.end(), reference.estimator) !=
              de.estimators.end())
        ref_found = true;
    }
    if (!ref_found) issues.push_back("reference cell not present in the design list");
    if (needs_prelim && preliminary_n < 4)
      issues.push_back("stage-1 optimization needs preliminary_n >= 4");
    return issues;
  }
};

struct TrialOutcome {
  TrialData data;
  std::vector<EstimateResult> estimates;  // aligned with the design's estimator list
  double mean_p2 = std::numeric_limits<double>::quiet_NaN();
  int warnings = 0;
  bool failed = false;
  std::string failure;
};

namespace detail {

struct Patient {
  Vec w;
  double y1 = 0.0, y0 = 0.0;
};

inline std::vector<Patient> draw_pool(const PopulationSpec& pop, int n, Rng& cov_rng,
                                      Rng& out_rng) {
  std::vector<Patient> pool(n);
  for (int i = 0; i < n; ++i) {
    pool[i].w = draw_covariates(pop, cov_rng);
    auto [y1, y0] = draw_potential_outcomes(pop, pool[i].w, out_rng);
    pool[i].y1 = y1;
    pool[i].y0 = y0;
  }
  return pool;
}

inline std::vector<PatientRecord> draw_preliminary(const PopulationSpec& pop, int n0,
                                                   std::uint64_t rep_root) {
  Rng cov(derive_stream(rep_root, 0x111));
  Rng outr(derive_stream(rep_root, 0x112));
  Rng arng(derive_stream(rep_root, 0x113));
  std::vector<PatientRecord> prelim;
  prelim.reserve(n0);
  for (int i = 0; i < n0; ++i) {
    Vec w = draw_covariates(pop, cov);
    auto [y1, y0] = draw_potential_outcomes(pop, w, outr);
    Arm a = assign_cir(0.5, arng);
    prelim.push_back({0, std::move(w), a, a == Arm::experimental ? y1 : y0});
  }
  return prelim;
}

inline TrialOutcome run_design_trial(const Scenario& sc, const DesignEntry& de,
                                     std::size_t design_slot, const std::vector<Patient>& pool,
                                     const std::vector<PatientRecord>& prelim,
                                     const AssignmentMechanism& prelim_mech,
                                     std::uint64_t rep_root) {
  TrialOutcome out;
  Rng arng(derive_stream(rep_root, 0x200 + design_slot));
  const DesignSpec& d = de.design;

  AssignmentMechanism mech{FixedProbability{0.5}};
  if (const auto* rule = std::get_if<AdaptationRule>(&d.stage1)) {
    std::vector<StageView> hist;
    if (!prelim.empty()) hist.push_back({std::span(prelim.data(), prelim.size()), &prelim_mech});
    auto ir = estimate_interim_allocation(hist, *rule, sc.link,
                                          AssignmentMechanism{FixedProbability{0.5}});
    mech = ir.mechanism;
    out.warnings += ir.warnings;
  } else {
    mech = std::get<AssignmentMechanism>(d.stage1);
  }

  TrialData& td = out.data;
  td.k = d.k;
  td.stage_sizes = d.stage_sizes;
  td.records.reserve(td.total_n());
  td.mechanisms.reserve(d.k);

  std::size_t pool_idx = 0;
  for (int s = 1; s <= d.k; ++s) {
    td.mechanisms.push_back(mech);
    for (int j = 0; j < d.stage_sizes[s - 1]; ++j) {
      const Patient& pt = pool[pool_idx++];
      bool fb = false;
      Arm a = assign_cdr(mech, pt.w, arng, &fb);
      if (fb) out.warnings += 1;
      td.records.push_back({s, pt.w, a, a == Arm::experimental ? pt.y1 : pt.y0});
    }
    if (s < d.k) {
      std::vector<StageView> hist;
      if (!prelim.empty()) hist.push_back({std::span(prelim.data(), prelim.size()), &prelim_mech});
      for (int t = 1; t <= s; ++t) hist.push_back({td.stage(t), &td.mechanisms[t - 1]});
      auto ir = estimate_interim_allocation(hist, *d.adaptation, sc.link, mech);
      mech = ir.mechanism;
      out.warnings += ir.warnings;
    }
  }

  try {
    bool wants_optimized =
        std::find(de.estimators.begin(), de.estimators.end(), EstimatorKind::optimized) !=
        de.estimators.end();
    NuisanceBundle nb_simple = fit_nuisance(td, sc.link, EstimatorKind::simple);
    NuisanceBundle nb_opt;
    if (wants_optimized) nb_opt = fit_nuisance(td, sc.link, EstimatorKind::optimized);
    for (EstimatorKind kind : de.estimators) {
      const NuisanceBundle& nb = kind == EstimatorKind::optimized ? nb_opt : nb_simple;
      out.estimates.push_back(estimate_full(td, sc.link, kind, nb, sc.level));
      out.warnings += out.estimates.back().warnings;
    }
    if (d.k >= 2 && !out.estimates.empty())
      out.mean_p2 = out.estimates.front().stages[1].mean_p;
  } catch (const EstimationError& e) {
    out.failed = true;
    out.failure = e.what();
    out.estimates.clear();
  }
  return out;
}

}  // namespace detail

/**
 * Simulates one design variant of the scenario for one replication index.
 * Patient draws depend only on (seed, replication), never on the design, so
 * every variant sees the same simulated patients and adding estimators or
 * designs never perturbs data generation.
 */
inline TrialOutcome run_trial(const Scenario& sc, std::size_t design_index,
                              std::uint64_t replication) {
  const std::uint64_t rep_root = derive_stream(sc.seed, replication);
  Rng cov(derive_stream(rep_root, 0x101));
  Rng outr(derive_stream(rep_root, 0x102));
  int pool_n = 0;
  for (const auto& de : sc.designs) {
    int t = 0;
    for (int s : de.design.stage_sizes) t += s;
    pool_n = std::max(pool_n, t);
  }
  auto pool = detail::draw_pool(sc.population, pool_n, cov, outr);
  std::vector<PatientRecord> prelim;
  AssignmentMechanism prelim_mech{FixedProbability{0.5}};
  if (sc.preliminary_n > 0)
    prelim = detail::draw_preliminary(sc.population, sc.preliminary_n, rep_root);
  return detail::run_design_trial(sc, sc.designs[design_index], design_index, pool, prelim,
                                  prelim_mech, rep_root);
}

/** Per-(design, estimator) aggregates over a scenario's replications. */
struct CellStats {
  std::string design;
  EstimatorKind estimator = EstimatorKind::simple;
  int reps = 0;
  int failures = 0;
  double mean_delta = 0.0;
  double bias = 0.0;
  double emp_var = 0.0;
  double emp_sd = 0.0;
  double median_se = 0.0;
  double rel_eff = 1.0;
  double coverage = 0.0;
  double mean_p2 = std::numeric_limits<double>::quiet_NaN();
  bool invalid = false;
};

struct ScenarioSummary {
  std::string scenario;
  int setting = 1;
  double gamma1 = 0.0;
  std::string x_label;
  int replications = 0;
  std::uint64_t seed = 0;
  double level = 0.95;
  TrueValues truth;
  std::vector<CellStats> cells;
  long long warnings = 0;
  bool invalid = false;
};

/**
 * Runs the scenario's full replication loop, in parallel when jobs > 1.
 * Results land in per-replication slots and are aggregated in index order, so
 * the summary is identical for every worker count.
 */
inline ScenarioSummary monte_carlo(const Scenario& sc, int jobs = 1,
                                   const TrueValues* precomputed_truth = nullptr) {
  {
    auto issues = sc.validate();
    if (!issues.empty()) throw std::invalid_argument("invalid scenario: " + issues.front());
  }
  const int R = sc.replications;
  const std::size_t D = sc.designs.size();

  struct DesignSlots {
    std::vector<std::uint8_t> failed;
    std::vector<int> warnings;
    std::vector<double> mean_p2;
    std::vector<std::vector<double>> delta, se;  // per estimator
  };
  std::vector<DesignSlots> slots(D);
  for (std::size_t d = 0; d < D; ++d) {
    slots[d].failed.assign(R, 0);
    slots[d].warnings.assign(R, 0);
    slots[d].mean_p2.assign(R, std::numeric_limits<double>::quiet_NaN());
    slots[d].delta.assign(sc.designs[d].estimators.size(), std::vector<double>(R, 0.0));
    slots[d].se.assign(sc.designs[d].estimators.size(), std::vector<double>(R, 0.0));
  }

  int pool_n = 0;
  for (const auto& de : sc.designs) {
    int t = 0;
    for (int s : de.design.stage_sizes) t += s;
    pool_n = std::max(pool_n, t);
  }

  auto body = [&](int rep) {
    const std::uint64_t rep_root = derive_stream(sc.seed, static_cast<std::uint64_t>(rep));
    Rng cov(derive_stream(rep_root, 0x101));
    Rng outr(derive_stream(rep_root, 0x102));
    auto pool = detail::draw_pool(sc.population, pool_n, cov, outr);
    std::vector<PatientRecord> prelim;
    AssignmentMechanism prelim_mech{FixedProbability{0.5}};
    if (sc.preliminary_n > 0)
      prelim = detail::draw_preliminary(sc.population, sc.preliminary_n, rep_root);
    for (std::size_t d = 0; d < D; ++d) {
      TrialOutcome to = detail::run_design_trial(sc, sc.designs[d], d, pool, prelim, prelim_mech,
                                                 rep_root);
      slots[d].warnings[rep] = to.warnings;
      if (to.failed) {
        slots[d].failed[rep] = 1;
        continue;
      }
      slots[d].mean_p2[rep] = to.mean_p2;
      for (std::size_t e = 0; e < sc.designs[d].estimators.size(); ++e) {
        slots[d].delta[e][rep] = to.estimates[e].delta;
        slots[d].se[e][rep] = to.estimates[e].se;
      }
    }
  };

  if (jobs <= 1) {
    for (int rep = 0; rep < R; ++rep) body(rep);
  } else {
    std::atomic<int> next{0};
    std::vector<std::thread> pool_threads;
    std::atomic<bool> died{false};
    std::string death_msg;
    std::mutex death_mu;
    for (int t = 0; t < jobs; ++t)
      pool_threads.emplace_back([&]() {
        try {
          while (true) {
            int rep = next.fetch_add(1);
            if (rep >= R || died.load()) break;
            body(rep);
          }
        } catch (const std::exception& e) {
          std::lock_guard<std::mutex> lk(death_mu);
          died.store(true);
          death_msg = e.what();
        }
      });
    for (auto& th : pool_threads) th.join();
    if (died.load()) throw std::runtime_error("replication worker failed: " + death_msg);
  }

  ScenarioSummary sum;
  sum.scenario = sc.name;
  sum.setting = sc.setting;
  sum.gamma1 = sc.population.gamma1;
  sum.x_label = sc.x_label.empty() ? sc.x.describe() : sc.x_label;
  sum.replications = R;
  sum.seed = sc.seed;
  sum.level = sc.level;
  sum.truth = precomputed_truth ? *precomputed_truth
                                : true_marginals(sc.population, sc.link, sc.x);
  const double z = normal_quantile(1.0 - (1.0 - sc.level) / 2.0);

  for (std::size_t d = 0; d < D; ++d) {
    for (int rep = 0; rep < R; ++rep) sum.warnings += slots[d].warnings[rep];
    for (std::size_t e = 0; e < sc.designs[d].estimators.size(); ++e) {
      CellStats cell;
      cell.design = sc.designs[d].name;
      cell.estimator = sc.designs[d].estimators[e];
      cell.reps = R;
      std::vector<double> deltas, ses, p2s;
      for (int rep = 0; rep < R; ++rep) {
        if (slots[d].failed[rep]) continue;
        deltas.push_back(slots[d].delta[e][rep]);
        ses.push_back(slots[d].se[e][rep]);
        if (!std::isnan(slots[d].mean_p2[rep])) p2s.push_back(slots[d].mean_p2[rep]);
      }
      cell.failures = R - static_cast<int>(deltas.size());
      cell.invalid = cell.failures > 0.01 * R;
      if (deltas.size() >= 2) {
        double mean = std::accumulate(deltas.begin(), deltas.end(), 0.0) / deltas.size();
        double ss = 0.0;
        for (double v : deltas) ss += (v - mean) * (v - mean);
        cell.mean_delta = mean;
        cell.bias = mean - sum.truth.delta;
        cell.emp_var = ss / (deltas.size() - 1);
        cell.emp_sd = std::sqrt(cell.emp_var);
        std::vector<double> s_sorted(ses);
        std::sort(s_sorted.begin(), s_sorted.end());
        std::size_t m = s_sorted.size();
        cell.median_se = m % 2 ? s_sorted[m / 2] : 0.5 * (s_sorted[m / 2 - 1] + s_sorted[m / 2]);
        int covered = 0;
        for (std::size_t i = 0; i < deltas.size(); ++i)
          if (deltas[i] - z * ses[i] <= sum.truth.delta && sum.truth.delta <= deltas[i] + z * ses[i])
            covered += 1;
        cell.coverage = static_cast<double>(covered) / static_cast<double>(deltas.size());
        if (!p2s.empty())
          cell.mean_p2 = std::accumulate(p2s.begin(), p2s.end(), 0.0) / p2s.size();
      }
      if (cell.invalid) sum.invalid = true;
      sum.cells.push_back(std::move(cell));
    }
  }

  // relative efficiency against the declared reference cell
  double ref_var = std::numeric_limits<double>::quiet_NaN();
  for (const auto& cell : sum.cells)
    if (cell.design == sc.reference.design && cell.estimator == sc.reference.estimator)
      ref_var = cell.emp_var;
  for (auto& cell : sum.cells)
    cell.rel_eff = (std::isnan(ref_var) || cell.emp_var <= 0.0)
                       ? std::numeric_limits<double>::quiet_NaN()
                       : ref_var / cell.emp_var;
  return sum;
}

}  // namespace adaptrial
