#pragma once

#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "loopsim/curation.hpp"
#include "loopsim/distribution.hpp"

namespace loopsim {

enum class LoopMode { exact, monte_carlo };

struct LoopConfig {
  int k = 2;
  /// Mixing weight for synthetic data; infinity() selects the pure loop
  /// (retrain on curated samples only).
  double lambda = std::numeric_limits<double>::infinity();
  int iterations = 50;
  std::vector<double> eps_grid{0.0, 0.1, 0.5, 1.0};
  double level_set_tol = kLevelSetTol;
  LoopMode mode = LoopMode::exact;
  long long mc_rounds = 1'000'000;
  std::uint64_t seed = 0;
  double term_cap = 1e7;
};

struct TraceRow {
  int t = 0;
  double expect_exp_reward = std::numeric_limits<double>::quiet_NaN();
  double var_exp_reward = std::numeric_limits<double>::quiet_NaN();
  double mean_reward = std::numeric_limits<double>::quiet_NaN();
  double essential_sup = std::numeric_limits<double>::quiet_NaN();
  double kl_to_limit = std::numeric_limits<double>::quiet_NaN();  // KL(p_*||p_t)
  double kl_to_ref = std::numeric_limits<double>::quiet_NaN();    // KL(p_t||p_ref)
  double max_density_ratio = std::numeric_limits<double>::quiet_NaN();
  double renorm_drift = std::numeric_limits<double>::quiet_NaN();
  std::vector<double> prob_at_least;  // P_t(r >= r_* - eps), one per grid entry
  std::vector<double> class_props;    // optional class proportions
  double ball_mass = std::numeric_limits<double>::quiet_NaN();
};

struct LoopTrace {
  std::vector<double> eps_grid;
  std::vector<TraceRow> rows;  // rows[0] describes the initial distribution
  std::optional<DiscreteDistribution> terminal;

  /// RFC-4180 CSV, header row, '.' decimals; empty cells for absent values.
  void write_csv(std::ostream& out) const;
  void write_csv(const std::filesystem::path& path) const;
};

/// Fully synthetic loop p_{t+1} = curate(p_t); requires cfg.lambda infinite.
LoopTrace run_pure_loop(const DiscreteDistribution& p0, const RewardFn& r,
                        const LoopConfig& cfg);

/// Reference-anchored loop p_{t+1} = (p_ref + lambda curate(p_t))/(1+lambda)
/// started at p_0 = p_ref; requires cfg.lambda finite.
LoopTrace run_mixture_loop(const DiscreteDistribution& p_ref, const RewardFn& r,
                           const LoopConfig& cfg);

struct AccumulateConfig {
  std::vector<DiscreteDistribution> prefix;  // predefined p_0 .. p_{T-1}
  std::vector<double> alphas;                // one weight per prefix entry
  double alpha_tail = 1.0;                   // weight given to iterates >= T
};

struct AccumulateTrace {
  std::vector<DiscreteDistribution> states;  // p_T, p_{T+1}, ...
  double max_deviation = 0.0;  // largest atomwise |p_{T+j} - p_T|
};

/// Retraining on the alpha-weighted combination of all previous iterates:
/// constant from step T onward. Each extra step is recomputed from the full
/// history rather than algebraically shortcut, so the constancy is observed,
/// not assumed.
AccumulateTrace run_accumulate_loop(const AccumulateConfig& acc,
                                    int extra_steps);

// --- verifiers ---------------------------------------------------------------

struct CheckFailure {
  int t = 0;
  double margin = 0.0;
  std::string what;
};

/// Outcome of replaying one inequality family over a trace. Failures are
/// collected, never thrown: a violated bound is a finding, not a crash.
struct VerifierReport {
  std::string name;
  std::size_t checks = 0;
  double worst_margin = std::numeric_limits<double>::infinity();
  double tolerance = 0.0;
  std::vector<CheckFailure> failures;

  bool passed() const { return failures.empty(); }
  nlohmann::json to_json() const;
};

/// E_{t+1}[e^r] >= E_t[e^r] + ((k-1)/k) Var_t[e^r] / e^{r_*} per step, and
/// the cumulative variance bound sum Var_t <= (k/(k-1)) e^{2 r_*}.
VerifierReport verify_reward_growth(const LoopTrace& trace, int k);

/// P_{t+1}(r >= r_* - eps) >= P_t(...) for every grid eps, plus the coupled
/// level-set increment bound against the eps = 0 column.
VerifierReport verify_probability_monotone(const LoopTrace& trace);

/// KL(p_*||p_t) = -log P_t(r = r_*) along the trace, and the final KL is
/// below `final_threshold`.
VerifierReport verify_kl_convergence(const LoopTrace& trace,
                                     double final_threshold);

/// KL(p_t||p_ref) <= -log(1 - lambda(k-1)) and the pointwise density ratio
/// bound 1/(1 - lambda(k-1)); requires lambda (k-1) < 1.
VerifierReport verify_kl_bound(const LoopTrace& trace, double lambda, int k);

/// E_t[e^r] >= E_ref + lambda/(1+lambda)^3 (k-1) Var_ref / (k e^{r_*}) for
/// t >= 1, plus the tail bound with the (1+lambda)^2 factor over the last
/// half of the run.
VerifierReport verify_mixture_reward(const LoopTrace& trace, double lambda,
                                     int k, const SupportStats& ref_stats,
                                     double tail_tol = 1e-6);

/// Iterating the tilting limit t times equals one tilt by t*r (the
/// beta = 1/t correspondence), atomwise within relative 1e-9.
VerifierReport rlhf_equivalence_check(const DiscreteDistribution& p0,
                                      const RewardFn& r, int t_max);

}  // namespace loopsim
