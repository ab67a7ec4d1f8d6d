#pragma once

#include "adaptrial/models.hpp"

#include <boost/math/distributions/normal.hpp>

#include <functional>
#include <numeric>

namespace adaptrial {

using WFn = std::function<double(const Vec&)>;

inline double normal_quantile(double q) {
  if (!(q > 0.0 && q < 1.0)) throw std::invalid_argument("quantile level must lie in (0,1)");
  boost::math::normal_distribution<double> nd(0.0, 1.0);
  return boost::math::quantile(nd, q);
}

/** Plain within-stage arm mean. */
inline double stage_mean(std::span<const PatientRecord> recs, Arm arm) {
  double num = 0.0;
  int den = 0;
  for (const auto& r : recs) {
    if (r.a != arm) continue;
    num += r.y;
    den += 1;
  }
  if (den == 0) throw EstimationError("stage has no observations in the requested arm");
  return num / den;
}

/**
 * Hajek inverse-probability-weighted arm mean under a known mechanism.
 * A constant mechanism cancels out of the ratio, so that case delegates to the
 * plain mean and the two agree bit for bit.
 */
inline double stage_mean_ipw(std::span<const PatientRecord> recs, const AssignmentMechanism& mech,
                             Arm arm) {
  if (is_fixed(mech)) return stage_mean(recs, arm);
  double num = 0.0, den = 0.0;
  for (const auto& r : recs) {
    if (r.a != arm) continue;
    double p = resolve_probability(mech, r.w).p;
    double wt = arm == Arm::experimental ? 1.0 / p : 1.0 / (1.0 - p);
    num += wt * r.y;
    den += wt;
  }
  if (den <= 0.0) throw EstimationError("stage has no observations in the requested arm");
  return num / den;
}

/** Contrast of stage-weighted means on the link scale. */
inline double weighted_delta(Link link, std::span<const double> weights,
                             std::span<const double> mu1s, std::span<const double> mu0s) {
  if (weights.empty() || weights.size() != mu1s.size() || weights.size() != mu0s.size())
    throw std::invalid_argument("weights and stage means must have matching nonzero length");
  double sum = 0.0;
  for (double w : weights) {
    if (w < 0.0) throw std::invalid_argument("weights must be nonnegative");
    sum += w;
  }
  if (std::abs(sum - 1.0) > 1e-8) throw std::invalid_argument("weights must sum to 1");
  double m1 = 0.0, m0 = 0.0;
  for (std::size_t s = 0; s < weights.size(); ++s) {
    m1 += weights[s] * mu1s[s];
    m0 += weights[s] * mu0s[s];
  }
  return treatment_effect(link, m1, m0);
}

/** Empirical augmentation term E_s{(A - p(W)) c(W)} for one stage. */
template <class C>
inline double augmentation_column(std::span<const PatientRecord> recs,
                                  const AssignmentMechanism& mech, C&& c) {
  if (recs.empty()) throw std::invalid_argument("augmentation column needs a nonempty stage");
  double s = 0.0;
  for (const auto& r : recs) s += (arm_ind(r.a) - resolve_probability(mech, r.w).p) * c(r.w);
  return s / static_cast<double>(recs.size());
}

/** Augmentation term under covariate-independent randomization, E_s{(A - pi) b(W)}. */
template <class B>
inline double augmentation_column_cir(std::span<const PatientRecord> recs, double pi, B&& b) {
  if (!(pi > 0.0 && pi < 1.0)) throw std::invalid_argument("pi must lie in (0,1)");
  AssignmentMechanism mech = FixedProbability{pi};
  return augmentation_column(recs, mech, std::forward<B>(b));
}

/**
 * Inverse-probability-weighted estimator with stage weights eta and one
 * augmentation function per stage:
 *   g(sum_s eta_s mu1_ipw^(s)) - g(sum_s eta_s mu0_ipw^(s)) - sum_s E_s{(A - p_s(W)) c_s(W)}.
 */
inline double aipw_delta(const TrialData& trial, Link link, std::span<const double> eta,
                         std::span<const WFn> cs) {
  const int k = trial.k;
  if (static_cast<int>(eta.size()) != k || static_cast<int>(cs.size()) != k)
    throw std::invalid_argument("need one weight and one augmentation per stage");
  std::vector<double> mu1s(k), mu0s(k);
  for (int s = 1; s <= k; ++s) {
    mu1s[s - 1] = stage_mean_ipw(trial.stage(s), trial.mechanisms[s - 1], Arm::experimental);
    mu0s[s - 1] = stage_mean_ipw(trial.stage(s), trial.mechanisms[s - 1], Arm::control);
  }
  double delta = weighted_delta(link, eta, mu1s, mu0s);
  for (int s = 1; s <= k; ++s)
    delta -= augmentation_column(trial.stage(s), trial.mechanisms[s - 1], cs[s - 1]);
  return delta;
}

/** Two-stage augmented estimator under covariate-independent randomization. */
template <class B1, class B2>
inline double augmented_delta(const TrialData& trial, Link link, double theta, B1&& b1, B2&& b2) {
  if (trial.k != 2) throw std::invalid_argument("augmented_delta is the two-stage form");
  if (!(theta >= 0.0 && theta <= 1.0)) throw std::invalid_argument("theta must lie in [0,1]");
  if (!is_fixed(trial.mechanisms[0]) || !is_fixed(trial.mechanisms[1]))
    throw std::invalid_argument("augmented_delta needs constant assignment probabilities");
  std::array<double, 2> eta{theta, 1.0 - theta};
  std::array<WFn, 2> cs{WFn(std::forward<B1>(b1)), WFn(std::forward<B2>(b2))};
  return aipw_delta(trial, link, eta, cs);
}

/**
 * Variance-minimizing augmentation functions, one per stage:
 *   c_s(w) = eta_s [ g'(mu1) {m1(w) - mu1} / p_s(w) + g'(mu0) {m0(w) - mu0} / (1 - p_s(w)) ].
 */
inline std::vector<WFn> optimal_augmentation_cdr(Link link, double mu1, double mu0, WFn m1,
                                                 WFn m0,
                                                 std::span<const AssignmentMechanism> mechs,
                                                 std::span<const double> eta) {
  if (mechs.size() != eta.size() || mechs.empty())
    throw std::invalid_argument("need one mechanism and one weight per stage");
  const double gp1 = link_deriv(link, mu1);
  const double gp0 = link_deriv(link, mu0);
  std::vector<WFn> out;
  for (std::size_t s = 0; s < mechs.size(); ++s) {
    AssignmentMechanism mech = mechs[s];
    double scale = eta[s];
    out.push_back([=](const Vec& w) {
      double p = resolve_probability(mech, w).p;
      return scale * (gp1 * (m1(w) - mu1) / p + gp0 * (m0(w) - mu0) / (1.0 - p));
    });
  }
  return out;
}

/** Two-stage special case under constant probabilities; weights (theta, 1-theta). */
inline std::pair<WFn, WFn> optimal_augmentation_cir(Link link, double mu1, double mu0, WFn m1,
                                                    WFn m0, double pi1, double pi2,
                                                    double theta) {
  if (!(pi1 > 0.0 && pi1 < 1.0 && pi2 > 0.0 && pi2 < 1.0))
    throw std::invalid_argument("stage probabilities must lie in (0,1)");
  std::array<AssignmentMechanism, 2> mechs{FixedProbability{pi1}, FixedProbability{pi2}};
  std::array<double, 2> eta{theta, 1.0 - theta};
  auto cs = optimal_augmentation_cdr(link, mu1, mu0, std::move(m1), std::move(m0), mechs, eta);
  return {cs[0], cs[1]};
}

/**
 * Per-stage variance of the efficient influence term,
 *   Var_s[ g'(mu1) A {Y - m1(W)} / p - g'(mu0) (1-A) {Y - m0(W)} / (1-p)
 *          + g'(mu1) {m1(W) - mu1} - g'(mu0) {m0(W) - mu0} ],
 * with the sample variance taken over the stage (n-1 denominator).
 */
template <class F1, class F0>
inline double stage_variance(std::span<const PatientRecord> recs, const AssignmentMechanism& mech,
                             Link link, double mu1, double mu0, F1&& m1, F0&& m0) {
  if (recs.size() < 2) throw EstimationError("stage variance needs at least 2 records");
  const double gp1 = link_deriv(link, mu1);
  const double gp0 = link_deriv(link, mu0);
  std::vector<double> psi;
  psi.reserve(recs.size());
  for (const auto& r : recs) {
    double p = resolve_probability(mech, r.w).p;
    double a = arm_ind(r.a);
    double v1 = m1(r.w), v0 = m0(r.w);
    psi.push_back(gp1 * a * (r.y - v1) / p - gp0 * (1.0 - a) * (r.y - v0) / (1.0 - p) +
                  gp1 * (v1 - mu1) - gp0 * (v0 - mu0));
  }
  double mean = std::accumulate(psi.begin(), psi.end(), 0.0) / psi.size();
  double ss = 0.0;
  for (double v : psi) ss += (v - mean) * (v - mean);
  return ss / (psi.size() - 1);
}

/**
 * Variance-optimal stage weights eta_s = n_s / sigma2_s, normalized. Variances
 * are floored at 1e-12; if every variance sits at the floor the weights fall
 * back to equal and the degenerate flag is set.
 */
inline std::vector<double> optimal_weights(std::span<const int> n, std::span<const double> sigma2,
                                           bool* degenerate = nullptr) {
  if (n.empty() || n.size() != sigma2.size())
    throw std::invalid_argument("need one size and one variance per stage");
  constexpr double floor = 1e-12;
  if (degenerate) *degenerate = false;
  bool all_floored = true;
  for (std::size_t s = 0; s < n.size(); ++s) {
    if (n[s] < 1) throw std::invalid_argument("stage sizes must be positive");
    if (!(sigma2[s] >= 0.0) || !std::isfinite(sigma2[s]))
      throw std::invalid_argument("stage variances must be finite and nonnegative");
    if (sigma2[s] > floor) all_floored = false;
  }
  std::vector<double> w(n.size());
  if (all_floored) {
    std::fill(w.begin(), w.end(), 1.0 / static_cast<double>(n.size()));
    if (degenerate) *degenerate = true;
    return w;
  }
  double total = 0.0;
  for (std::size_t s = 0; s < n.size(); ++s) {
    w[s] = static_cast<double>(n[s]) / std::max(sigma2[s], floor);
    total += w[s];
  }
  for (double& v : w) v /= total;
  return w;
}

struct VarianceResult {
  double var_scaled = 0.0;  // estimates Var of sqrt(n1) (delta_hat - delta)
  double se = 0.0;
  double ci_lo = 0.0;
  double ci_hi = 0.0;
};

/**
 * Variance estimator of the weighted augmented estimator:
 *   sum_s (n1/n_s) Var_s[ eta_s g'(mu1) A (Y - mu1) / p_s(W)
 *                         - eta_s g'(mu0) (1-A) (Y - mu0) / (1 - p_s(W))
 *                         - {A - p_s(W)} c_s(W) ],
 * reported with se = sqrt(var / n1) and a symmetric normal interval.
 */
inline VarianceResult final_variance(const TrialData& trial, Link link, double mu1, double mu0,
                                     std::span<const double> eta, std::span<const WFn> cs,
                                     double delta, double level) {
  const int k = trial.k;
  if (static_cast<int>(eta.size()) != k || static_cast<int>(cs.size()) != k)
    throw std::invalid_argument("need one weight and one augmentation per stage");
  if (!(level > 0.0 && level < 1.0)) throw std::invalid_argument("level must lie in (0,1)");
  const double gp1 = link_deriv(link, mu1);
  const double gp0 = link_deriv(link, mu0);
  const double n1 = static_cast<double>(trial.stage_sizes[0]);
  double total = 0.0;
  for (int s = 1; s <= k; ++s) {
    auto recs = trial.stage(s);
    if (recs.size() < 2) throw EstimationError("stage variance needs at least 2 records");
    const auto& mech = trial.mechanisms[s - 1];
    std::vector<double> phi;
    phi.reserve(recs.size());
    for (const auto& r : recs) {
      double p = resolve_probability(mech, r.w).p;
      double a = arm_ind(r.a);
      phi.push_back(eta[s - 1] * gp1 * a * (r.y - mu1) / p -
                    eta[s - 1] * gp0 * (1.0 - a) * (r.y - mu0) / (1.0 - p) -
                    (a - p) * cs[s - 1](r.w));
    }
    double mean = std::accumulate(phi.begin(), phi.end(), 0.0) / phi.size();
    double ss = 0.0;
    for (double v : phi) ss += (v - mean) * (v - mean);
    total += (n1 / static_cast<double>(recs.size())) * (ss / (phi.size() - 1));
  }
  VarianceResult out;
  out.var_scaled = total;
  out.se = std::sqrt(total / n1);
  double z = normal_quantile(1.0 - (1.0 - level) / 2.0);
  out.ci_lo = delta - z * out.se;
  out.ci_hi = delta + z * out.se;
  return out;
}

/**
 * Fitted nuisance quantities shared by the estimators: marginal mean plug-ins
 * (stage means combined with n-proportional weights, clamped to the link
 * domain) and, for the optimized estimator, a conditional outcome model,
 * either a pooled logistic fit on the full covariate vector or empirical cell
 * means over a dichotomized selector.
 */
struct NuisanceBundle {
  double mu1 = 0.5;
  double mu0 = 0.5;
  std::optional<LogisticFit> outcome_fit;
  std::optional<CovariateSelector> cell_selector;
  std::optional<ConditionalMoments> cells1, cells0;

  bool has_outcome_model() const { return outcome_fit.has_value() || cells1.has_value(); }

  double m1(const Vec& w) const { return cond_mean(w, true); }
  double m0(const Vec& w) const { return cond_mean(w, false); }

 private:
  double cond_mean(const Vec& w, bool arm1) const {
    if (outcome_fit) return predict_mean_binary(*outcome_fit, arm1 ? 1.0 : 0.0, w);
    if (cells1) {
      const auto& cm = arm1 ? *cells1 : *cells0;
      auto it = cm.cells.find(cell_selector->cell_key(w));
      if (it != cm.cells.end() && it->second.count >= 1) return it->second.mean;
      return arm1 ? mu1 : mu0;  // unseen cell: augmentation contribution vanishes
    }
    return arm1 ? mu1 : mu0;
  }
};

inline NuisanceBundle fit_nuisance(const TrialData& trial, Link link, EstimatorKind kind,
                                   const std::optional<CovariateSelector>& cells = std::nullopt) {
  NuisanceBundle nb;
  const int k = trial.k;
  const double n = static_cast<double>(trial.total_n());
  double mu1 = 0.0, mu0 = 0.0;
  for (int s = 1; s <= k; ++s) {
    double share = static_cast<double>(trial.stage_sizes[s - 1]) / n;
    mu1 += share * stage_mean_ipw(trial.stage(s), trial.mechanisms[s - 1], Arm::experimental);
    mu0 += share * stage_mean_ipw(trial.stage(s), trial.mechanisms[s - 1], Arm::control);
  }
  nb.mu1 = clamp_mean(link, mu1);
  nb.mu0 = clamp_mean(link, mu0);
  if (kind == EstimatorKind::simple) return nb;

  if (cells.has_value()) {
    nb.cell_selector = *cells;
    nb.cells1 = empirical_conditional_moments(
        std::span<const PatientRecord>(trial.records.data(), trial.records.size()),
        Arm::experimental, *cells);
    nb.cells0 = empirical_conditional_moments(
        std::span<const PatientRecord>(trial.records.data(), trial.records.size()), Arm::control,
        *cells);
  } else {
    std::vector<LogisticRow> rows;
    rows.reserve(trial.records.size());
    for (const auto& r : trial.records)
      rows.push_back({build_design_row(arm_ind(r.a), r.w), r.y});
    nb.outcome_fit = fit_logistic_irls(rows);
  }
  return nb;
}

struct StageSummary {
  int stage = 1;
  int n = 0;
  double mu1 = 0.0;
  double mu0 = 0.0;
  double sigma2 = 0.0;
  double mean_p = 0.0;  // mean resolved assignment probability
  AssignmentMechanism mechanism;
};

struct EstimateResult {
  EstimatorKind kind = EstimatorKind::simple;
  double delta = 0.0;
  double se = 0.0;
  double ci_lo = 0.0;
  double ci_hi = 0.0;
  double mu1 = 0.0;
  double mu0 = 0.0;
  std::vector<double> weights;
  std::vector<StageSummary> stages;
  int warnings = 0;
};

/**
 * Full estimation pipeline on realized trial data.
 * simple: n-proportional stage weights, no augmentation.
 * optimized: variance-optimal weights and augmentations from the fitted
 * nuisance bundle; the influence-term variances drive both.
 * Per-record propensities and model predictions are resolved once and reused
 * as columns; every formula matches the generic per-function ops.
 */
inline EstimateResult estimate_full(const TrialData& trial, Link link, EstimatorKind kind,
                                    const NuisanceBundle& nb, double level = 0.95) {
  if (!(level > 0.0 && level < 1.0)) throw std::invalid_argument("level must lie in (0,1)");
  const int k = trial.k;
  if (k < 1 || static_cast<int>(trial.mechanisms.size()) != k)
    throw std::invalid_argument("trial data is inconsistent");
  if (kind == EstimatorKind::optimized && !nb.has_outcome_model())
    throw std::invalid_argument("optimized estimator needs a fitted outcome model");

  EstimateResult out;
  out.kind = kind;

  const double mu1 = nb.mu1, mu0 = nb.mu0;
  const double gp1 = link_deriv(link, mu1);
  const double gp0 = link_deriv(link, mu0);
  const bool optimized = kind == EstimatorKind::optimized;

  struct Cols {
    std::vector<double> a, y, p, m1, m0;
    bool fixed = false;
  };
  std::vector<Cols> cols(k);
  std::vector<double> mu1s(k), mu0s(k), sigma2(k), sizes_d(k), mean_p(k);
  std::vector<int> sizes(k);

  for (int s = 1; s <= k; ++s) {
    auto recs = trial.stage(s);
    const auto& mech = trial.mechanisms[s - 1];
    Cols& c = cols[s - 1];
    c.fixed = is_fixed(mech);
    const std::size_t ns = recs.size();
    c.a.reserve(ns), c.y.reserve(ns), c.p.reserve(ns), c.m1.reserve(ns), c.m0.reserve(ns);
    double psum = 0.0;
    for (const auto& r : recs) {
      auto rp = resolve_probability(mech, r.w);
      if (rp.fallback) out.warnings += 1;
      c.a.push_back(arm_ind(r.a));
      c.y.push_back(r.y);
      c.p.push_back(rp.p);
      c.m1.push_back(optimized ? nb.m1(r.w) : mu1);
      c.m0.push_back(optimized ? nb.m0(r.w) : mu0);
      psum += rp.p;
    }
    sizes[s - 1] = trial.stage_sizes[s - 1];
    sizes_d[s - 1] = static_cast<double>(sizes[s - 1]);
    mean_p[s - 1] = psum / sizes_d[s - 1];

    // Hajek arm means; a constant mechanism cancels out of the ratio
    double num1 = 0.0, den1 = 0.0, num0 = 0.0, den0 = 0.0;
    for (std::size_t i = 0; i < ns; ++i) {
      if (c.a[i] == 1.0) {
        double wt = c.fixed ? 1.0 : 1.0 / c.p[i];
        num1 += wt * c.y[i];
        den1 += wt;
      } else {
        double wt = c.fixed ? 1.0 : 1.0 / (1.0 - c.p[i]);
        num0 += wt * c.y[i];
        den0 += wt;
      }
    }
    if (den1 <= 0.0 || den0 <= 0.0)
      throw EstimationError("stage has no observations in one arm");
    mu1s[s - 1] = num1 / den1;
    mu0s[s - 1] = num0 / den0;

    if (ns < 2) throw EstimationError("stage variance needs at least 2 records");
    std::vector<double> psi(ns);
    for (std::size_t i = 0; i < ns; ++i)
      psi[i] = gp1 * c.a[i] * (c.y[i] - c.m1[i]) / c.p[i] -
               gp0 * (1.0 - c.a[i]) * (c.y[i] - c.m0[i]) / (1.0 - c.p[i]) +
               gp1 * (c.m1[i] - mu1) - gp0 * (c.m0[i] - mu0);
    double mean = std::accumulate(psi.begin(), psi.end(), 0.0) / psi.size();
    double ss = 0.0;
    for (double v : psi) ss += (v - mean) * (v - mean);
    sigma2[s - 1] = ss / (psi.size() - 1);
  }

  std::vector<double> eta(k);
  if (kind == EstimatorKind::simple) {
    double n = std::accumulate(sizes_d.begin(), sizes_d.end(), 0.0);
    for (int s = 0; s < k; ++s) eta[s] = sizes_d[s] / n;
  } else {
    bool degenerate = false;
    eta = optimal_weights(sizes, sigma2, &degenerate);
    if (degenerate) out.warnings += 1;
  }

  double c1 = 0.0, c0 = 0.0;
  for (int s = 0; s < k; ++s) {
    c1 += eta[s] * mu1s[s];
    c0 += eta[s] * mu0s[s];
  }
  out.mu1 = clamp_mean(link, c1);
  out.mu0 = clamp_mean(link, c0);
  double delta = treatment_effect(link, out.mu1, out.mu0);
  if (optimized) {
    for (int s = 0; s < k; ++s) {
      const Cols& c = cols[s];
      double col = 0.0;
      for (std::size_t i = 0; i < c.a.size(); ++i) {
        double ci = eta[s] * (gp1 * (c.m1[i] - mu1) / c.p[i] +
                              gp0 * (c.m0[i] - mu0) / (1.0 - c.p[i]));
        col += (c.a[i] - c.p[i]) * ci;
      }
      delta -= col / static_cast<double>(c.a.size());
    }
  }
  out.delta = delta;

  const double n1 = sizes_d[0];
  double total = 0.0;
  for (int s = 0; s < k; ++s) {
    const Cols& c = cols[s];
    const std::size_t ns = c.a.size();
    std::vector<double> phi(ns);
    for (std::size_t i = 0; i < ns; ++i) {
      double ci = optimized ? eta[s] * (gp1 * (c.m1[i] - mu1) / c.p[i] +
                                        gp0 * (c.m0[i] - mu0) / (1.0 - c.p[i]))
                            : 0.0;
      phi[i] = eta[s] * gp1 * c.a[i] * (c.y[i] - mu1) / c.p[i] -
               eta[s] * gp0 * (1.0 - c.a[i]) * (c.y[i] - mu0) / (1.0 - c.p[i]) -
               (c.a[i] - c.p[i]) * ci;
    }
    double mean = std::accumulate(phi.begin(), phi.end(), 0.0) / phi.size();
    double ss = 0.0;
    for (double v : phi) ss += (v - mean) * (v - mean);
    total += (n1 / sizes_d[s]) * (ss / (phi.size() - 1));
  }
  out.se = std::sqrt(total / n1);
  double z = normal_quantile(1.0 - (1.0 - level) / 2.0);
  out.ci_lo = delta - z * out.se;
  out.ci_hi = delta + z * out.se;
  out.weights = eta;

  for (int s = 1; s <= k; ++s) {
    StageSummary ss;
    ss.stage = s;
    ss.n = sizes[s - 1];
    ss.mu1 = mu1s[s - 1];
    ss.mu0 = mu0s[s - 1];
    ss.sigma2 = sigma2[s - 1];
    ss.mean_p = mean_p[s - 1];
    ss.mechanism = trial.mechanisms[s - 1];
    out.stages.push_back(std::move(ss));
  }
  return out;
}

inline EstimateResult estimate_full(const TrialData& trial, Link link, EstimatorKind kind,
                                    double level = 0.95,
                                    const std::optional<CovariateSelector>& cells = std::nullopt) {
  return estimate_full(trial, link, kind, fit_nuisance(trial, link, kind, cells), level);
}

}  // namespace adaptrial
