#pragma once

#include "adaptrial/randomization.hpp"

#include <algorithm>

namespace adaptrial {

struct LogisticRow {
  Vec x;  // full design row, intercept included
  double y = 0.0;
};

struct LogisticFit {
  Vec coefficients;  // full length; dropped columns carry 0
  bool converged = false;
  int iterations = 0;
  double max_abs_score = std::numeric_limits<double>::infinity();
  bool separation = false;
  std::vector<int> dropped_columns;
  std::vector<double> loglik_path;  // value at start and after each accepted step

  double linear_predictor(const Vec& features) const { return features.dot(coefficients); }
};

namespace detail {

inline double bernoulli_loglik(const Vec& eta, const Vec& y) {
  double ll = 0.0;
  for (Eigen::Index i = 0; i < eta.size(); ++i) {
    double e = eta(i);
    // log(1 + exp(e)) without overflow
    double lse = e > 0.0 ? e + std::log1p(std::exp(-e)) : std::log1p(std::exp(e));
    ll += y(i) * e - lse;
  }
  return ll;
}

}  // namespace detail

/**
 * Newton-Raphson logistic regression with step-halving.
 * Convergence: max |score| <= tol. Guards: collinear columns are dropped
 * (coefficient pinned to 0), and any |coefficient| > 15 stops the fit with the
 * separation flag set, keeping the coefficients of the offending step.
 */
inline LogisticFit fit_logistic_irls(const std::vector<LogisticRow>& rows, double tol = 1e-8,
                                     int max_iter = 50, const Vec* start = nullptr) {
  if (rows.empty()) throw std::invalid_argument("logistic fit needs at least one row");
  const Eigen::Index n = static_cast<Eigen::Index>(rows.size());
  const Eigen::Index p = rows[0].x.size();
  if (p < 1) throw std::invalid_argument("logistic fit needs at least one column");
  Mat X(n, p);
  Vec y(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (rows[i].x.size() != p) throw std::invalid_argument("inconsistent design row length");
    if (rows[i].y != 0.0 && rows[i].y != 1.0)
      throw std::invalid_argument("binary response must be 0 or 1");
    X.row(i) = rows[i].x;
    y(i) = rows[i].y;
  }

  LogisticFit fit;
  Eigen::ColPivHouseholderQR<Mat> qr(X);
  const Eigen::Index rank = qr.rank();
  std::vector<int> kept;
  if (rank < p) {
    auto perm = qr.colsPermutation().indices();
    for (Eigen::Index j = 0; j < rank; ++j) kept.push_back(perm(j));
    std::sort(kept.begin(), kept.end());
    std::vector<bool> is_kept(p, false);
    for (int j : kept) is_kept[j] = true;
    for (Eigen::Index j = 0; j < p; ++j)
      if (!is_kept[j]) fit.dropped_columns.push_back(static_cast<int>(j));
  } else {
    for (Eigen::Index j = 0; j < p; ++j) kept.push_back(static_cast<int>(j));
  }
  const Eigen::Index q = static_cast<Eigen::Index>(kept.size());
  Mat Xk(n, q);
  for (Eigen::Index j = 0; j < q; ++j) Xk.col(j) = X.col(kept[j]);

  Vec beta = Vec::Zero(q);
  if (start) {
    if (start->size() != p) throw std::invalid_argument("starting coefficients have wrong length");
    for (Eigen::Index j = 0; j < q; ++j) beta(j) = (*start)(kept[j]);
  }

  Vec eta = Xk * beta;
  double ll = detail::bernoulli_loglik(eta, y);
  fit.loglik_path.push_back(ll);

  for (int it = 0; it <= max_iter; ++it) {
    Vec mu(n), wgt(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      mu(i) = inv_logit(eta(i));
      wgt(i) = std::max(mu(i) * (1.0 - mu(i)), 1e-10);
    }
    Vec score = Xk.transpose() * (y - mu);
    fit.max_abs_score = score.size() ? score.cwiseAbs().maxCoeff() : 0.0;
    if (fit.max_abs_score <= tol) {
      fit.converged = true;
      break;
    }
    if (it == max_iter) break;

    Mat H = Xk.transpose() * wgt.asDiagonal() * Xk;
    Vec dir = H.ldlt().solve(score);
    double lam = 1.0;
    Vec beta_new, eta_new;
    double ll_new = -std::numeric_limits<double>::infinity();
    for (int h = 0; h < 40; ++h) {
      beta_new = beta + lam * dir;
      eta_new = Xk * beta_new;
      ll_new = detail::bernoulli_loglik(eta_new, y);
      if (ll_new >= ll - 1e-12) break;
      lam *= 0.5;
    }
    beta = beta_new;
    eta = eta_new;
    ll = ll_new;
    fit.iterations = it + 1;
    fit.loglik_path.push_back(ll);
    if (beta.cwiseAbs().maxCoeff() > 15.0) {
      fit.separation = true;
      Vec score_now = Xk.transpose() * (y - eta.unaryExpr([](double e) { return inv_logit(e); }));
      fit.max_abs_score = score_now.size() ? score_now.cwiseAbs().maxCoeff() : 0.0;
      break;
    }
  }

  fit.coefficients = Vec::Zero(p);
  for (Eigen::Index j = 0; j < q; ++j) fit.coefficients(kept[j]) = beta(j);
  return fit;
}

/** Design row of the working outcome model, [1, a, x, a*x]. */
inline Vec build_design_row(double a, const Vec& x) { return interaction_row(a, x); }

/** Fitted conditional mean Pr(Y=1 | A=a, X=x), kept inside (0,1). */
inline double predict_mean_binary(const LogisticFit& fit, double a, const Vec& x) {
  double m = inv_logit(interaction_lp(fit.coefficients, a, x));
  return std::min(std::max(m, 1e-15), 1.0 - 1e-15);
}

/** Bernoulli conditional variance m(1-m), floored away from zero. */
inline double conditional_variance_binary(double m, double floor = 1e-6) {
  if (!(m >= 0.0 && m <= 1.0)) throw std::invalid_argument("mean must lie in [0,1]");
  return std::max(m * (1.0 - m), floor);
}

struct CellMoments {
  double mean = 0.0;
  double var = std::numeric_limits<double>::quiet_NaN();
  int count = 0;
  bool incomplete = true;  // fewer than 2 observations
};

struct ConditionalMoments {
  std::map<std::vector<int>, CellMoments> cells;
};

/**
 * Per-cell outcome mean and variance (n-1 denominator) for one arm, cells
 * given by a fully dichotomized selector. Cells with fewer than 2 outcomes
 * are flagged incomplete instead of erroring.
 */
inline ConditionalMoments empirical_conditional_moments(std::span<const PatientRecord> records,
                                                        Arm arm, const CovariateSelector& sel) {
  if (!sel.discrete())
    throw std::invalid_argument("empirical moments need a fully dichotomized selector");
  struct Acc {
    int n = 0;
    double mean = 0.0, m2 = 0.0;
  };
  std::map<std::vector<int>, Acc> acc;
  for (const auto& r : records) {
    if (r.a != arm) continue;
    Acc& a = acc[sel.cell_key(r.w)];
    a.n += 1;
    double d = r.y - a.mean;
    a.mean += d / a.n;
    a.m2 += d * (r.y - a.mean);
  }
  ConditionalMoments out;
  for (const auto& [key, a] : acc) {
    CellMoments cm;
    cm.mean = a.mean;
    cm.count = a.n;
    if (a.n >= 2) {
      cm.var = a.m2 / (a.n - 1);
      cm.incomplete = false;
    }
    out.cells[key] = cm;
  }
  return out;
}

/** Clamp an estimated mean into the link's domain before g or g' is applied. */
inline double clamp_mean(Link link, double mu) {
  switch (link) {
    case Link::identity:
      return mu;
    case Link::log:
      return std::max(mu, 1e-6);
    default:
      return std::min(std::max(mu, 1e-6), 1.0 - 1e-6);
  }
}

/** One stage of accumulated history plus the mechanism it was assigned under. */
struct StageView {
  std::span<const PatientRecord> records;
  const AssignmentMechanism* mechanism = nullptr;
};

struct InterimResult {
  AssignmentMechanism mechanism;
  int warnings = 0;
  bool fell_back = false;
};

namespace detail {

/** Pooled arm means over history: plain means when every stage was CIR, inverse-probability weighted otherwise. */
inline bool pooled_arm_means(const std::vector<StageView>& history, double* mu1, double* mu0) {
  bool all_cir = true;
  for (const auto& sv : history)
    if (!is_fixed(*sv.mechanism)) all_cir = false;
  double num1 = 0.0, den1 = 0.0, num0 = 0.0, den0 = 0.0;
  for (const auto& sv : history) {
    for (const auto& r : sv.records) {
      double wt = 1.0;
      if (!all_cir) {
        double p = resolve_probability(*sv.mechanism, r.w).p;
        wt = r.a == Arm::experimental ? 1.0 / p : 1.0 / (1.0 - p);
      }
      if (r.a == Arm::experimental) {
        num1 += wt * r.y;
        den1 += wt;
      } else {
        num0 += wt * r.y;
        den0 += wt;
      }
    }
  }
  if (den1 <= 0.0 || den0 <= 0.0) return false;
  *mu1 = num1 / den1;
  *mu0 = num0 / den0;
  return true;
}

}  // namespace detail

/**
 * Interim analysis: estimate (mu_a, v_a) from all accumulated data and build
 * the next stage's assignment mechanism per the adaptation rule. Degenerate
 * history (an empty arm, or no usable variance cell) falls back to the
 * previous mechanism with a warning instead of failing the trial.
 */
inline InterimResult estimate_interim_allocation(const std::vector<StageView>& history,
                                                 const AdaptationRule& rule, Link link,
                                                 const AssignmentMechanism& previous) {
  InterimResult out{previous, 0, false};
  auto fall_back = [&]() {
    out.mechanism = previous;
    out.warnings += 1;
    out.fell_back = true;
    return out;
  };

  double mu1 = 0.0, mu0 = 0.0;
  if (history.empty() || !detail::pooled_arm_means(history, &mu1, &mu0)) return fall_back();
  mu1 = clamp_mean(link, mu1);
  mu0 = clamp_mean(link, mu0);
  const double gp1 = link_deriv(link, mu1);
  const double gp0 = link_deriv(link, mu0);

  if (rule.variance_model == VarianceModel::logistic_working) {
    std::vector<LogisticRow> rows;
    for (const auto& sv : history)
      for (const auto& r : sv.records)
        rows.push_back({build_design_row(arm_ind(r.a), rule.selector.apply(r.w)), r.y});
    LogisticFit fit = fit_logistic_irls(rows);
    if (!fit.converged) out.warnings += 1;

    if (rule.design_class == DesignClass::cir) {
      double ev1 = 0.0, ev0 = 0.0;
      int n = 0;
      for (const auto& sv : history)
        for (const auto& r : sv.records) {
          Vec x = rule.selector.apply(r.w);
          ev1 += conditional_variance_binary(predict_mean_binary(fit, 1.0, x));
          ev0 += conditional_variance_binary(predict_mean_binary(fit, 0.0, x));
          n += 1;
        }
      ev1 /= n;
      ev0 /= n;
      out.mechanism = FixedProbability{optimal_pi({link, mu1, mu0, ev1, ev0}, rule.clamp)};
    } else {
      PropensityModel pm;
      pm.selector = rule.selector;
      pm.coef = fit.coefficients;
      pm.gp1 = gp1;
      pm.gp0 = gp0;
      pm.clamp = rule.clamp;
      out.mechanism = pm;
    }
    return out;
  }

  // empirical variance model over discrete cells
  std::vector<PatientRecord> flat;
  for (const auto& sv : history) flat.insert(flat.end(), sv.records.begin(), sv.records.end());
  ConditionalMoments cm1 = empirical_conditional_moments(flat, Arm::experimental, rule.selector);
  ConditionalMoments cm0 = empirical_conditional_moments(flat, Arm::control, rule.selector);

  if (rule.design_class == DesignClass::cir) {
    double ev1 = 0.0, ev0 = 0.0;
    int n1 = 0, n0 = 0;
    for (const auto& r : flat) {
      auto key = rule.selector.cell_key(r.w);
      if (auto it = cm1.cells.find(key); it != cm1.cells.end() && !it->second.incomplete) {
        ev1 += std::max(it->second.var, 1e-6);
        n1 += 1;
      }
      if (auto it = cm0.cells.find(key); it != cm0.cells.end() && !it->second.incomplete) {
        ev0 += std::max(it->second.var, 1e-6);
        n0 += 1;
      }
    }
    if (n1 == 0 || n0 == 0) return fall_back();
    out.mechanism = FixedProbability{optimal_pi({link, mu1, mu0, ev1 / n1, ev0 / n0}, rule.clamp)};
    return out;
  }

  PropensityTable table;
  table.selector = rule.selector;
  for (const auto& [key, c1] : cm1.cells) {
    if (c1.incomplete) continue;
    auto it0 = cm0.cells.find(key);
    if (it0 == cm0.cells.end() || it0->second.incomplete) continue;
    double v1 = std::max(c1.var, 1e-6);
    double v0 = std::max(it0->second.var, 1e-6);
    table.cells[key] = optimal_propensity_at(gp1, gp0, v1, v0, rule.clamp);
  }
  if (table.cells.empty()) return fall_back();
  out.mechanism = table;
  return out;
}

}  // namespace adaptrial
