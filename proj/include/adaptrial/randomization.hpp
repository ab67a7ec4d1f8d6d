#pragma once

#include "adaptrial/core.hpp"
#include "adaptrial/rng.hpp"

namespace adaptrial {

/** Interim estimates feeding the allocation optimizer. */
struct AllocationInputs {
  Link link = Link::identity;
  double mu1 = 0.0;
  double mu0 = 0.0;
  double ev1 = 0.0;  // E{v1(X)}
  double ev0 = 0.0;  // E{v0(X)}
};

inline void check_clamp(double clamp) {
  if (!(clamp > 0.0 && clamp < 0.5)) throw std::invalid_argument("clamp must lie in (0, 0.5)");
}

/**
 * Variance-optimal covariate-independent assignment probability:
 *   pi = g'(mu1) sqrt(E v1) / { g'(mu1) sqrt(E v1) + g'(mu0) sqrt(E v0) },
 * clamped to [clamp, 1-clamp].
 */
inline double optimal_pi(const AllocationInputs& in, double clamp = 0.05) {
  check_clamp(clamp);
  if (in.ev1 < 0.0 || in.ev0 < 0.0) throw std::invalid_argument("variances must be nonnegative");
  double s1 = std::abs(link_deriv(in.link, in.mu1)) * std::sqrt(in.ev1);
  double s0 = std::abs(link_deriv(in.link, in.mu0)) * std::sqrt(in.ev0);
  if (s1 + s0 <= 0.0) throw std::invalid_argument("degenerate allocation inputs: both scales are zero");
  double pi = s1 / (s1 + s0);
  return std::min(std::max(pi, clamp), 1.0 - clamp);
}

/** Pointwise core of the optimal propensity, on precomputed scales. */
inline double optimal_propensity_at(double gp1, double gp0, double v1, double v0, double clamp) {
  check_clamp(clamp);
  if (v1 < 0.0 || v0 < 0.0) throw std::invalid_argument("variances must be nonnegative");
  double s1 = std::abs(gp1) * std::sqrt(v1);
  double s0 = std::abs(gp0) * std::sqrt(v0);
  if (s1 + s0 <= 0.0) throw std::invalid_argument("degenerate propensity inputs: both scales are zero");
  double p = s1 / (s1 + s0);
  return std::min(std::max(p, clamp), 1.0 - clamp);
}

/**
 * Variance-optimal covariate-dependent assignment probability at w:
 *   p(w) = g'(mu1) v1(w)^{1/2} / { g'(mu1) v1(w)^{1/2} + g'(mu0) v0(w)^{1/2} }.
 */
template <class F1, class F0>
inline double optimal_propensity(Link link, double mu1, double mu0, F1&& v1, F0&& v0,
                                 const Vec& w, double clamp = 0.05) {
  return optimal_propensity_at(link_deriv(link, mu1), link_deriv(link, mu0), v1(w), v0(w), clamp);
}

struct ResolvedProb {
  double p = 0.5;
  bool fallback = false;  // true when a table had no cell for w
};

/** Assignment probability a mechanism gives to the experimental arm at w. */
inline ResolvedProb resolve_probability(const AssignmentMechanism& mech, const Vec& w) {
  if (const auto* f = std::get_if<FixedProbability>(&mech)) return {f->pi, false};
  if (const auto* t = std::get_if<PropensityTable>(&mech)) {
    auto it = t->cells.find(t->selector.cell_key(w));
    if (it == t->cells.end()) return {0.5, true};
    return {it->second, false};
  }
  const auto& m = std::get<PropensityModel>(mech);
  Vec x = m.selector.apply(w);
  double m1 = inv_logit(interaction_lp(m.coef, 1.0, x));
  double m0 = inv_logit(interaction_lp(m.coef, 0.0, x));
  double v1 = std::max(m1 * (1.0 - m1), m.variance_floor);
  double v0 = std::max(m0 * (1.0 - m0), m.variance_floor);
  return {optimal_propensity_at(m.gp1, m.gp0, v1, v0, m.clamp), false};
}

/** Covariate-independent randomization: one Bernoulli(pi) draw. */
inline Arm assign_cir(double pi, Rng& rng) {
  if (!(pi > 0.0 && pi < 1.0)) throw std::invalid_argument("assignment probability must lie in (0,1)");
  return rng.bernoulli(pi) ? Arm::experimental : Arm::control;
}

/** Covariate-dependent randomization under a known mechanism. */
inline Arm assign_cdr(const AssignmentMechanism& mech, const Vec& w, Rng& rng,
                      bool* fell_back = nullptr) {
  ResolvedProb r = resolve_probability(mech, w);
  if (fell_back) *fell_back = r.fallback;
  return rng.bernoulli(r.p) ? Arm::experimental : Arm::control;
}

}  // namespace adaptrial
