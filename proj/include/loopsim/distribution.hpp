#pragma once

#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace loopsim {

/// Absolute tolerance for grouping reward values into level sets.
inline constexpr double kLevelSetTol = 1e-12;

/// Weights at or below this are kept in the support but counted as tiny,
/// so divergences against long-running loops stay finite.
inline constexpr double kTinyWeight = 1e-300;

struct Atom {
  std::string id;
  std::vector<double> coords;  // empty means no coordinates attached
  double weight = 0.0;
};

using RewardFn = std::function<double(const Atom&)>;

/// Finite probability distribution over identified atoms. Immutable after
/// construction; atoms are compared by id, never by coordinates.
class DiscreteDistribution {
 public:
  /// Validates and renormalizes. Throws std::invalid_argument on an empty
  /// support, a negative weight, a duplicate id, inconsistent coordinate
  /// dimensions, or an all-zero weight vector.
  explicit DiscreteDistribution(std::vector<Atom> atoms);

  /// Atoms named x0, x1, ... with the given weights.
  static DiscreteDistribution from_weights(const std::vector<double>& weights);

  /// For operators that preserve normalization analytically (mix, tilt,
  /// restriction); validates structure but does not rescale weights.
  static DiscreteDistribution from_normalized(std::vector<Atom> atoms);

  std::size_t size() const { return atoms_.size(); }
  const std::vector<Atom>& atoms() const { return atoms_; }
  const Atom& atom(std::size_t i) const { return atoms_[i]; }
  double weight(std::size_t i) const { return atoms_[i].weight; }

  /// Index of the atom with this id, or npos.
  std::size_t find(const std::string& id) const;
  static constexpr std::size_t npos = static_cast<std::size_t>(-1);

  /// Dimension of attached coordinates (0 when none).
  int coord_dim() const { return coord_dim_; }

  /// Atoms with 0 < weight <= 1e-300 (kept, flagged).
  std::size_t tiny_weight_count() const;

  /// Opt-in removal of atoms with weight below `threshold`.
  DiscreteDistribution pruned(double threshold = kTinyWeight) const;

  nlohmann::json to_json() const;
  static DiscreteDistribution from_json(const nlohmann::json& j);

 private:
  DiscreteDistribution() = default;
  void build_index();

  std::vector<Atom> atoms_;
  std::unordered_map<std::string, std::size_t> index_;
  int coord_dim_ = 0;
};

/// Statistics of e^{r} under a distribution, accumulated with max-shifted
/// exponentials so rewards with |r| up to a few hundred do not overflow.
struct SupportStats {
  double expect_exp_reward = 0.0;  // E[e^r]
  double var_exp_reward = 0.0;     // Var[e^r]
  double essential_sup = 0.0;      // max reward on the positive-weight support
  double level_set_mass = 0.0;     // P(r(x) = essential_sup) within tolerance
};

SupportStats reward_stats(const DiscreteDistribution& p, const RewardFn& r,
                          double level_set_tol = kLevelSetTol);

/// Mean of the raw reward (not exponentiated).
double mean_reward(const DiscreteDistribution& p, const RewardFn& r);

/// Sum p(x) log(p(x)/q(x)) over ids, with the 0 log 0 convention; +infinity
/// when p puts mass where q has none.
double kl_divergence(const DiscreteDistribution& p,
                     const DiscreteDistribution& q);

/// (1/2) sum |p - q| over the union support.
double total_variation(const DiscreteDistribution& p,
                       const DiscreteDistribution& q);

/// Largest p(x)/q(x) over atoms where q(x) > 0; +infinity if p puts mass
/// outside q's support.
double max_density_ratio(const DiscreteDistribution& p,
                         const DiscreteDistribution& q);

double prob_reward_at_least(const DiscreteDistribution& p, const RewardFn& r,
                            double threshold);

/// Conditional distribution on the top level set of the reward: proportional
/// to p there, zero elsewhere. Atoms are retained with zero weight.
DiscreteDistribution restrict_to_level_set(const DiscreteDistribution& p,
                                           const RewardFn& r,
                                           double level_set_tol = kLevelSetTol);

/// (p + lambda q) / (1 + lambda) on the union support. lambda must be >= 0.
DiscreteDistribution mix(const DiscreteDistribution& p,
                         const DiscreteDistribution& q, double lambda);

}  // namespace loopsim
