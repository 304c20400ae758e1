#pragma once

#include <string>
#include <vector>

#include "zymflow/errors.hpp"
#include "zymflow/rng.hpp"

namespace zymflow {

// Masking-state discrete space: real states 0..K-1 plus mask at index K.
struct DiscreteSpace {
  int num_real_states;
  int mask_index() const { return num_real_states; }
  int num_states() const { return num_real_states + 1; }
  bool is_real(int s) const { return s >= 0 && s < num_real_states; }
  bool is_mask(int s) const { return s == num_real_states; }

  static DiscreteSpace amino_acids() { return {20}; }
  static DiscreteSpace ec_classes() { return {7}; }
  static DiscreteSpace coevo_tokens() { return {64}; }
};

// Off-diagonal jump rates out of one state; the diagonal is implied as the
// negative row sum. Under the masking construction the rate toward mask is 0.
struct RateRow {
  int from_state;
  std::vector<double> rates;  // size num_states(), entry from_state unused
};

// Eq.-style interpolant: keep the clean state with probability t, otherwise
// collapse to mask.
inline int corrupt_discrete(int clean_state, double t,
                            const DiscreteSpace& space, Rng& rng) {
  if (!space.is_real(clean_state))
    throw InvalidStateError("corrupt_discrete: state " +
                            std::to_string(clean_state) +
                            " is not a real state");
  return rng.uniform() < t ? clean_state : space.mask_index();
}

// Closed-form conditional rate row R_t(c_t, s | c1): zero unless c_t is mask,
// in which case mass 1/(1-t) flows toward c1.
inline RateRow conditional_rate_row(int current, int clean_state, double t,
                                    const DiscreteSpace& space) {
  if (t >= 1.0)
    throw DomainError("conditional_rate_row: t must be < 1");
  RateRow row{current, std::vector<double>(space.num_states(), 0.0)};
  if (space.is_mask(current) && space.is_real(clean_state))
    row.rates[clean_state] = 1.0 / (1.0 - t);
  return row;
}

// One Euler step of the CTMC with the rate row averaged over a predicted
// distribution over clean states. The total jump probability is clipped to
// <= 1 by renormalizing the stay probability (the final step has dt/(1-t)
// exactly 1 and floating point may overshoot).
inline int euler_discrete_step(int current,
                               const std::vector<double>& predicted_clean_dist,
                               double t, double dt, const DiscreteSpace& space,
                               Rng& rng) {
  if (t + dt > 1.0 + 1e-9)
    throw DomainError("euler_discrete_step: t + dt exceeds 1");
  if (static_cast<int>(predicted_clean_dist.size()) != space.num_real_states)
    throw ShapeError("euler_discrete_step: distribution size mismatch");
  double mass = 0.0;
  for (double p : predicted_clean_dist) mass += p;
  if (std::abs(mass - 1.0) > 1e-6)
    throw NumericError("euler_discrete_step: distribution does not sum to 1");

  if (!space.is_mask(current)) return current;  // zero rates once unmasked

  // Expected rate row: sum_c1 p(c1) * R_t(mask, . | c1) = p(.) / (1 - t).
  std::vector<double> probs(space.num_states(), 0.0);
  double jump_total = 0.0;
  for (int s = 0; s < space.num_real_states; ++s) {
    probs[s] = predicted_clean_dist[s] / (1.0 - t) * dt;
    jump_total += probs[s];
  }
  double stay = 1.0 - jump_total;
  if (stay < 0.0) {
    if (jump_total > 1.0 + 1e-9)
      throw DomainError("euler_discrete_step: step size too large");
    stay = 0.0;
  }
  probs[space.mask_index()] = stay;
  return rng.categorical(probs);
}

}  // namespace zymflow
