#include "loopsim/curation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace loopsim {

namespace {

struct RewardGroups {
  std::vector<double> value;        // distinct reward values, ascending
  std::vector<double> mass;         // probability carried by each value
  std::vector<std::size_t> group;   // atom index -> group index
};

// Clusters reward values that agree within tol; atoms compare equal to the
// group's first representative.
RewardGroups group_rewards(const DiscreteDistribution& p, const RewardFn& r,
                           double tol) {
  const std::size_t n = p.size();
  std::vector<double> rewards(n);
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) rewards[i] = r(p.atom(i));
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return rewards[a] < rewards[b]; });

  RewardGroups g;
  g.group.resize(n);
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t i = order[k];
    if (g.value.empty() || rewards[i] > g.value.back() + tol) {
      g.value.push_back(rewards[i]);
      g.mass.push_back(0.0);
    }
    g.group[i] = g.value.size() - 1;
    g.mass.back() += p.weight(i);
  }
  return g;
}

}  // namespace

double exact_term_count(int distinct_rewards, int k) {
  // C(m + k - 2, k - 1) compositions of k-1 draws into m reward values.
  const int m = distinct_rewards;
  const int n = m + k - 2;
  const int r = std::min(k - 1, m - 1);
  double c = 1.0;
  for (int i = 1; i <= r; ++i) {
    c *= static_cast<double>(n - r + i) / static_cast<double>(i);
    if (!std::isfinite(c)) return c;
  }
  return c;
}

TransferFunction transfer_function_exact(const DiscreteDistribution& p,
                                         const RewardFn& r, int k,
                                         const CurationOptions& opts) {
  if (k < 1) throw std::invalid_argument("need k >= 1 candidates");

  TransferFunction tf;
  tf.k = k;
  const RewardGroups groups = group_rewards(p, r, opts.level_set_tol);
  const std::size_t m = groups.value.size();

  if (k == 1 || m == 1) {
    // A single draw, or a constant reward: the operator is the identity.
    for (const Atom& a : p.atoms()) tf.values.emplace(a.id, 1.0);
    return tf;
  }

  // Only reward values with mass take part in the expectation.
  std::vector<std::size_t> active;
  for (std::size_t g = 0; g < m; ++g) {
    if (groups.mass[g] > 0.0) active.push_back(g);
  }

  const double terms = exact_term_count(static_cast<int>(active.size()), k);
  if (!(terms <= opts.term_cap)) {
    throw TermBudgetError(terms, opts.term_cap);
  }

  // Exponentials shifted by the global max so every factor stays in (0, 1].
  const double shift = groups.value.back();
  std::vector<double> expr(m);
  for (std::size_t g = 0; g < m; ++g) {
    expr[g] = std::exp(groups.value[g] - shift);
  }

  // Recursive enumeration of count vectors (c_1..c_a) with sum k-1 over the
  // active values. Multinomial probability is built incrementally via
  // C(n, c) q^c factors; the denominator sum accumulates alongside.
  std::vector<double> acc(m, 0.0);
  auto leaf = [&](double weight, double competing_sum) {
    for (std::size_t g = 0; g < m; ++g) {
      acc[g] += weight * expr[g] / (expr[g] + competing_sum);
    }
  };
  auto rec = [&](auto&& self, std::size_t idx, int remaining, double weight,
                 double sum) -> void {
    if (idx + 1 == active.size()) {
      const double q = groups.mass[active[idx]];
      leaf(weight * std::pow(q, remaining),
           sum + remaining * expr[active[idx]]);
      return;
    }
    const double q = groups.mass[active[idx]];
    const double e = expr[active[idx]];
    double factor = 1.0;  // C(remaining, c) q^c
    for (int c = 0; c <= remaining; ++c) {
      self(self, idx + 1, remaining - c, weight * factor, sum + c * e);
      factor *= q * static_cast<double>(remaining - c) /
                static_cast<double>(c + 1);
    }
  };
  rec(rec, 0, k - 1, 1.0, 0.0);

  for (std::size_t i = 0; i < p.size(); ++i) {
    tf.values.emplace(p.atom(i).id, k * acc[groups.group[i]]);
  }

  double mean = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    mean += p.weight(i) * k * acc[groups.group[i]];
  }
  if (std::abs(mean - 1.0) > 1e-10) {
    throw std::logic_error("transfer function lost normalization: E[H] = " +
                           std::to_string(mean));
  }
  return tf;
}

DiscreteDistribution curate_exact(const DiscreteDistribution& p,
                                  const RewardFn& r, int k,
                                  const CurationOptions& opts,
                                  double* drift_out) {
  const TransferFunction tf = transfer_function_exact(p, r, k, opts);
  std::vector<Atom> atoms = p.atoms();
  double total = 0.0;
  for (Atom& a : atoms) {
    a.weight *= tf.at(a.id);
    total += a.weight;
  }
  if (drift_out) *drift_out = std::abs(total - 1.0);
  for (Atom& a : atoms) a.weight /= total;
  return DiscreteDistribution::from_normalized(std::move(atoms));
}

DiscreteDistribution curate_monte_carlo(const DiscreteDistribution& p,
                                        const RewardFn& r, int k,
                                        long long rounds, std::uint64_t seed) {
  if (k < 1) throw std::invalid_argument("need k >= 1 candidates");
  if (rounds < 1) throw std::invalid_argument("need at least one round");

  const std::size_t n = p.size();
  std::vector<double> rewards(n), cumulative(n);
  double running = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    rewards[i] = r(p.atom(i));
    running += p.weight(i);
    cumulative[i] = running;
  }
  cumulative.back() = 1.0;

  std::vector<long long> counts(n, 0);
  std::vector<std::size_t> picks(static_cast<std::size_t>(k));
  std::vector<double> pick_rewards(static_cast<std::size_t>(k));
  for (long long round = 0; round < rounds; ++round) {
    SplitMix64 rng = substream(seed, static_cast<std::uint64_t>(round));
    for (int j = 0; j < k; ++j) {
      const double u = uniform_unit(rng);
      const std::size_t idx = static_cast<std::size_t>(
          std::upper_bound(cumulative.begin(), cumulative.end(), u) -
          cumulative.begin());
      picks[static_cast<std::size_t>(j)] = idx;
      pick_rewards[static_cast<std::size_t>(j)] = rewards[idx];
    }
    ++counts[picks[bt_select_index(pick_rewards, rng)]];
  }

  std::vector<Atom> atoms = p.atoms();
  for (std::size_t i = 0; i < n; ++i) {
    atoms[i].weight =
        static_cast<double>(counts[i]) / static_cast<double>(rounds);
  }
  return DiscreteDistribution(std::move(atoms));
}

DiscreteDistribution tilt_limit(const DiscreteDistribution& p,
                                const RewardFn& r) {
  const std::size_t n = p.size();
  std::vector<double> rewards(n);
  double shift = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < n; ++i) {
    rewards[i] = r(p.atom(i));
    if (p.weight(i) > 0.0) shift = std::max(shift, rewards[i]);
  }
  std::vector<Atom> atoms = p.atoms();
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    atoms[i].weight *= std::exp(rewards[i] - shift);
    total += atoms[i].weight;
  }
  for (Atom& a : atoms) a.weight /= total;
  return DiscreteDistribution::from_normalized(std::move(atoms));
}

FixedPointCheck is_fixed_point(const DiscreteDistribution& p,
                               const RewardFn& r, double tol) {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -lo;
  for (const Atom& a : p.atoms()) {
    if (a.weight > 0.0) {
      const double v = r(a);
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  }
  FixedPointCheck check;
  check.is_fixed = (hi - lo) <= tol;
  check.residual = total_variation(p, curate_exact(p, r, 2));
  return check;
}

}  // namespace loopsim
