#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace adaptrial {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

/** Raised when an estimate cannot be formed from the realized data (e.g. an empty arm). */
class EstimationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Arm : int { control = 0, experimental = 1 };

inline double arm_ind(Arm a) { return a == Arm::experimental ? 1.0 : 0.0; }

inline Arm arm_from_int(int v) {
  if (v != 0 && v != 1) throw std::invalid_argument("arm indicator must be 0 or 1");
  return v == 1 ? Arm::experimental : Arm::control;
}

enum class Link { identity, log, logit };

inline const char* link_name(Link g) {
  switch (g) {
    case Link::identity: return "identity";
    case Link::log: return "log";
    default: return "logit";
  }
}

inline double link_value(Link g, double mu) {
  switch (g) {
    case Link::identity:
      return mu;
    case Link::log:
      if (!(mu > 0.0)) throw std::domain_error("log link requires mu > 0");
      return std::log(mu);
    default:
      if (!(mu > 0.0 && mu < 1.0)) throw std::domain_error("logit link requires mu in (0,1)");
      return std::log(mu / (1.0 - mu));
  }
}

inline double link_deriv(Link g, double mu) {
  switch (g) {
    case Link::identity:
      return 1.0;
    case Link::log:
      if (!(mu > 0.0)) throw std::domain_error("log link requires mu > 0");
      return 1.0 / mu;
    default:
      if (!(mu > 0.0 && mu < 1.0)) throw std::domain_error("logit link requires mu in (0,1)");
      return 1.0 / (mu * (1.0 - mu));
  }
}

/** Contrast on the link scale: g(mu1) - g(mu0). */
inline double treatment_effect(Link g, double mu1, double mu0) {
  return link_value(g, mu1) - link_value(g, mu0);
}

inline double inv_logit(double t) {
  if (t >= 0.0) return 1.0 / (1.0 + std::exp(-t));
  double e = std::exp(t);
  return e / (1.0 + e);
}

/**
 * Design row of the working outcome model: [1, a, x, a*x].
 * The same layout backs both model fitting and propensity resolution.
 */
inline Vec interaction_row(double a, const Vec& x) {
  Vec row(2 + 2 * x.size());
  row(0) = 1.0;
  row(1) = a;
  for (Eigen::Index j = 0; j < x.size(); ++j) {
    row(2 + j) = x(j);
    row(2 + x.size() + j) = a * x(j);
  }
  return row;
}

/** Allocation-free linear predictor over the [1, a, x, a*x] layout. */
inline double interaction_lp(const Vec& coef, double a, const Vec& x) {
  const Eigen::Index d = x.size();
  if (coef.size() != 2 + 2 * d)
    throw std::invalid_argument("coefficient length does not match interaction layout");
  double lp = coef(0) + a * coef(1);
  for (Eigen::Index j = 0; j < d; ++j) lp += x(j) * (coef(2 + j) + a * coef(2 + d + j));
  return lp;
}

struct PatientRecord {
  int stage = 1;  // 1-based; 0 marks preliminary data
  Vec w;
  Arm a = Arm::control;
  double y = 0.0;
};

/**
 * Picks the adaptation covariates X out of the full vector W: a subset of
 * coordinates, each optionally dichotomized at a threshold (value >= t maps to 1).
 */
struct CovariateSelector {
  std::vector<int> indices;
  std::vector<std::optional<double>> thresholds;  // aligned with indices

  int dim() const { return static_cast<int>(indices.size()); }

  bool discrete() const {
    if (indices.empty()) return false;
    for (const auto& t : thresholds)
      if (!t.has_value()) return false;
    return true;
  }

  Vec apply(const Vec& w) const {
    check(w.size());
    Vec x(dim());
    for (std::size_t j = 0; j < indices.size(); ++j) {
      double v = w(indices[j]);
      x(j) = thresholds[j].has_value() ? (v >= *thresholds[j] ? 1.0 : 0.0) : v;
    }
    return x;
  }

  /** Cell identifier for discrete selectors (all coordinates dichotomized). */
  std::vector<int> cell_key(const Vec& w) const {
    if (!discrete()) throw std::invalid_argument("cell_key requires a fully dichotomized selector");
    check(w.size());
    std::vector<int> key(indices.size());
    for (std::size_t j = 0; j < indices.size(); ++j)
      key[j] = w(indices[j]) >= *thresholds[j] ? 1 : 0;
    return key;
  }

  std::string describe() const {
    std::ostringstream os;
    for (std::size_t j = 0; j < indices.size(); ++j) {
      if (j) os << "+";
      os << "W" << indices[j] + 1;
      if (thresholds[j].has_value()) os << ">=" << *thresholds[j];
    }
    return os.str();
  }

  std::vector<std::string> validate(int w_dim) const {
    std::vector<std::string> issues;
    if (indices.empty()) issues.push_back("selector has no coordinates");
    if (thresholds.size() != indices.size())
      issues.push_back("selector thresholds not aligned with indices");
    std::vector<bool> seen(static_cast<std::size_t>(std::max(w_dim, 0)), false);
    for (int i : indices) {
      if (i < 0 || i >= w_dim) {
        issues.push_back("selector index out of range: " + std::to_string(i + 1));
      } else if (seen[i]) {
        issues.push_back("selector repeats coordinate W" + std::to_string(i + 1));
      } else {
        seen[i] = true;
      }
    }
    return issues;
  }

 private:
  void check(Eigen::Index w_dim) const {
    for (int i : indices)
      if (i < 0 || i >= w_dim) throw std::invalid_argument("selector index out of range");
  }
};

/** Identity selector over a full d-dimensional W. */
inline CovariateSelector full_selector(int d) {
  CovariateSelector s;
  for (int i = 0; i < d; ++i) {
    s.indices.push_back(i);
    s.thresholds.push_back(std::nullopt);
  }
  return s;
}

/** Constant assignment probability (covariate-independent randomization). */
struct FixedProbability {
  double pi = 0.5;
};

/** Assignment probability per discrete covariate cell. */
struct PropensityTable {
  CovariateSelector selector;
  std::map<std::vector<int>, double> cells;
};

/**
 * Assignment probability computed from a fitted working outcome model:
 * the variance-optimal propensity evaluated at the model's conditional
 * means, with the interim link derivatives frozen in as scalars.
 */
struct PropensityModel {
  CovariateSelector selector;
  Vec coef;  // working-model coefficients over [1, a, x, a*x]
  double gp1 = 1.0;
  double gp0 = 1.0;
  double clamp = 0.05;
  double variance_floor = 1e-6;
};

using AssignmentMechanism = std::variant<FixedProbability, PropensityTable, PropensityModel>;

inline bool is_fixed(const AssignmentMechanism& m) {
  return std::holds_alternative<FixedProbability>(m);
}

enum class DesignClass { cir, cdr };
enum class VarianceModel { empirical, logistic_working };
enum class EstimatorKind { simple, optimized };

inline const char* estimator_name(EstimatorKind k) {
  return k == EstimatorKind::simple ? "simple" : "optimized";
}

/** How an interim analysis turns accumulated data into the next stage's mechanism. */
struct AdaptationRule {
  DesignClass design_class = DesignClass::cir;
  CovariateSelector selector;
  VarianceModel variance_model = VarianceModel::logistic_working;
  double clamp = 0.05;
};

/**
 * Stage-1 assignment: either a pre-specified mechanism, or a rule applied to a
 * preliminary dataset before the trial starts.
 */
using Stage1Spec = std::variant<AssignmentMechanism, AdaptationRule>;

struct DesignSpec {
  int k = 1;
  std::vector<int> stage_sizes;
  Stage1Spec stage1 = AssignmentMechanism{FixedProbability{0.5}};
  std::optional<AdaptationRule> adaptation;  // required for k >= 2

  std::vector<std::string> validate(int w_dim) const {
    std::vector<std::string> issues;
    if (k < 1) issues.push_back("stage count must be >= 1");
    if (static_cast<int>(stage_sizes.size()) != k)
      issues.push_back("stage_sizes length does not match stage count");
    for (std::size_t s = 0; s < stage_sizes.size(); ++s)
      if (stage_sizes[s] < 2)
        issues.push_back("stage " + std::to_string(s + 1) + " size must be >= 2");
    if (k >= 2 && !adaptation.has_value())
      issues.push_back("multi-stage design needs an adaptation rule");
    if (adaptation.has_value()) {
      for (auto& m : adaptation->selector.validate(w_dim)) issues.push_back(m);
      if (!(adaptation->clamp > 0.0 && adaptation->clamp < 0.5))
        issues.push_back("clamp must lie in (0, 0.5)");
      if (adaptation->variance_model == VarianceModel::empirical &&
          !adaptation->selector.discrete())
        issues.push_back("empirical variance model needs a fully dichotomized selector");
    }
    if (const auto* rule = std::get_if<AdaptationRule>(&stage1)) {
      for (auto& m : rule->selector.validate(w_dim)) issues.push_back(m);
      if (!(rule->clamp > 0.0 && rule->clamp < 0.5))
        issues.push_back("stage-1 clamp must lie in (0, 0.5)");
    } else {
      const auto& mech = std::get<AssignmentMechanism>(stage1);
      if (const auto* f = std::get_if<FixedProbability>(&mech)) {
        if (!(f->pi > 0.0 && f->pi < 1.0)) issues.push_back("stage-1 probability must lie in (0,1)");
      }
    }
    return issues;
  }
};

/**
 * Data generating process: covariates W from a multivariate normal, binary
 * potential outcomes from a logistic model with treatment interactions,
 *   logit Pr{Y(a)=1 | W} = gamma0 + gamma1 a + gamma2'W + gamma3'(a W).
 */
struct PopulationSpec {
  Vec mean;
  Mat cov;
  double gamma0 = 0.0;
  double gamma1 = 0.0;
  Vec gamma2;
  Vec gamma3;
  Mat cov_factor;  // L with L L' = cov, from the symmetric eigendecomposition

  PopulationSpec() = default;

  PopulationSpec(Vec mean_, Mat cov_, double g0, double g1, Vec g2, Vec g3)
      : mean(std::move(mean_)),
        cov(std::move(cov_)),
        gamma0(g0),
        gamma1(g1),
        gamma2(std::move(g2)),
        gamma3(std::move(g3)) {
    const Eigen::Index d = mean.size();
    if (cov.rows() != d || cov.cols() != d)
      throw std::invalid_argument("covariance dimensions do not match mean");
    if (gamma2.size() != d || gamma3.size() != d)
      throw std::invalid_argument("gamma2/gamma3 dimensions do not match mean");
    if (!cov.isApprox(cov.transpose(), 1e-12))
      throw std::invalid_argument("covariance must be symmetric");
    Eigen::SelfAdjointEigenSolver<Mat> es(cov);
    if (es.info() != Eigen::Success) throw std::invalid_argument("covariance eigendecomposition failed");
    Vec ev = es.eigenvalues();
    double scale = std::max(1.0, ev.cwiseAbs().maxCoeff());
    for (Eigen::Index i = 0; i < ev.size(); ++i) {
      if (ev(i) < -1e-10 * scale)
        throw std::invalid_argument("covariance is not positive semidefinite");
      ev(i) = std::max(ev(i), 0.0);
    }
    cov_factor = es.eigenvectors() * ev.cwiseSqrt().asDiagonal();
  }

  int dim() const { return static_cast<int>(mean.size()); }

  bool diagonal_cov() const {
    for (Eigen::Index i = 0; i < cov.rows(); ++i)
      for (Eigen::Index j = 0; j < cov.cols(); ++j)
        if (i != j && cov(i, j) != 0.0) return false;
    return true;
  }

  /** Conditional mean of the potential outcome: Pr{Y(a)=1 | W=w}. */
  double outcome_mean(double a, const Vec& w) const {
    return inv_logit(gamma0 + gamma1 * a + gamma2.dot(w) + a * gamma3.dot(w));
  }
};

/**
 * Realized trial data: records grouped by stage (1..k) plus the assignment
 * mechanism that was actually in force at each stage.
 */
struct TrialData {
  int k = 1;
  std::vector<int> stage_sizes;
  std::vector<PatientRecord> records;  // stage 1 block first, then stage 2, ...
  std::vector<AssignmentMechanism> mechanisms;

  int stage_offset(int s) const {  // s is 1-based
    int off = 0;
    for (int j = 1; j < s; ++j) off += stage_sizes[j - 1];
    return off;
  }

  std::span<const PatientRecord> stage(int s) const {
    return {records.data() + stage_offset(s), static_cast<std::size_t>(stage_sizes[s - 1])};
  }

  int total_n() const {
    int n = 0;
    for (int s : stage_sizes) n += s;
    return n;
  }

  std::vector<std::string> validate() const {
    std::vector<std::string> issues;
    if (k < 1) issues.push_back("stage count must be >= 1");
    if (static_cast<int>(stage_sizes.size()) != k)
      issues.push_back("stage_sizes length does not match stage count");
    if (static_cast<int>(mechanisms.size()) != k)
      issues.push_back("one mechanism required per stage");
    if (static_cast<int>(records.size()) != total_n())
      issues.push_back("record count does not match stage sizes");
    else {
      int idx = 0;
      for (int s = 1; s <= k; ++s)
        for (int j = 0; j < stage_sizes[s - 1]; ++j, ++idx)
          if (records[idx].stage != s) {
            issues.push_back("records are not grouped by stage");
            s = k + 1;
            break;
          }
    }
    for (const auto& mech : mechanisms) {
      if (const auto* f = std::get_if<FixedProbability>(&mech)) {
        if (!(f->pi > 0.0 && f->pi < 1.0)) issues.push_back("fixed probability outside (0,1)");
      } else if (const auto* t = std::get_if<PropensityTable>(&mech)) {
        for (const auto& [key, p] : t->cells)
          if (!(p > 0.0 && p < 1.0)) issues.push_back("table probability outside (0,1)");
      }
    }
    return issues;
  }
};

}  // namespace adaptrial
