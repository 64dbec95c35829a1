#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "loopsim/distribution.hpp"
#include "loopsim/rng.hpp"

namespace loopsim {

/// Multiplicative density update induced by one round of K-choice curation:
/// the next distribution is p(x) * value(x), renormalized for float residue.
struct TransferFunction {
  std::unordered_map<std::string, double> values;  // atom id -> factor
  int k = 1;

  double at(const std::string& id) const {
    auto it = values.find(id);
    if (it == values.end()) {
      throw std::out_of_range("no transfer value for atom '" + id + "'");
    }
    return it->second;
  }
};

struct CurationOptions {
  /// The exact operator enumerates count vectors over distinct reward values;
  /// computations needing more than this many terms are refused so callers
  /// consciously switch to Monte Carlo.
  double term_cap = 1e7;
  double level_set_tol = kLevelSetTol;
};

class TermBudgetError : public std::runtime_error {
 public:
  TermBudgetError(double required, double cap)
      : std::runtime_error(
            "exact curation would need " + std::to_string(required) +
            " terms (cap " + std::to_string(cap) +
            "); raise the cap or use Monte Carlo"),
        required_terms(required) {}
  double required_terms;
};

/// Number of count vectors the exact operator would enumerate for a support
/// with `distinct_rewards` reward values.
double exact_term_count(int distinct_rewards, int k);

/// Picks index i with probability e^{r_i} / sum_j e^{r_j} (max-subtracted).
template <class Urbg>
std::size_t bt_select_index(std::span<const double> rewards, Urbg& rng) {
  if (rewards.empty()) {
    throw std::invalid_argument("empty candidate list");
  }
  double m = rewards[0];
  for (double r : rewards) m = r > m ? r : m;
  double total = 0.0;
  for (double r : rewards) total += std::exp(r - m);
  double u = uniform_unit(rng) * total;
  for (std::size_t i = 0; i + 1 < rewards.size(); ++i) {
    u -= std::exp(rewards[i] - m);
    if (u < 0.0) return i;
  }
  return rewards.size() - 1;
}

template <class Urbg>
const Atom& bt_select(std::span<const Atom> candidates, const RewardFn& r,
                      Urbg& rng) {
  std::vector<double> rewards(candidates.size());
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    rewards[i] = r(candidates[i]);
  }
  return candidates[bt_select_index(rewards, rng)];
}

/// Exact expectation over the K-1 competing draws, grouped by distinct reward
/// value. Throws TermBudgetError past opts.term_cap.
TransferFunction transfer_function_exact(const DiscreteDistribution& p,
                                         const RewardFn& r, int k,
                                         const CurationOptions& opts = {});

/// One exact curation step: atomwise p * H, renormalized. When drift_out is
/// given it receives |sum(p*H) - 1| before renormalization.
DiscreteDistribution curate_exact(const DiscreteDistribution& p,
                                  const RewardFn& r, int k,
                                  const CurationOptions& opts = {},
                                  double* drift_out = nullptr);

/// Empirical curation: `rounds` independent rounds of drawing k atoms i.i.d.
/// from p and keeping the Bradley-Terry pick. Deterministic given
/// (seed, rounds, k); each round uses its own derived substream, so the
/// result never depends on scheduling.
DiscreteDistribution curate_monte_carlo(const DiscreteDistribution& p,
                                        const RewardFn& r, int k,
                                        long long rounds, std::uint64_t seed);

/// Exponential tilting p(x) e^{r(x)} / E_p[e^r]: the large-K limit of
/// curation and the closed form of KL-regularized reward maximization.
DiscreteDistribution tilt_limit(const DiscreteDistribution& p,
                                const RewardFn& r);

struct FixedPointCheck {
  bool is_fixed = false;
  double residual = 0.0;  // TV(p, curate_exact(p, r, 2))
};

/// A distribution is curation-invariant iff its positive-weight support sits
/// on a single reward level set.
FixedPointCheck is_fixed_point(const DiscreteDistribution& p,
                               const RewardFn& r, double tol = kLevelSetTol);

}  // namespace loopsim
