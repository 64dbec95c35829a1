#include "loopsim/distribution.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace loopsim {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

void check_atoms(const std::vector<Atom>& atoms) {
  if (atoms.empty()) {
    throw std::invalid_argument("distribution needs at least one atom");
  }
  for (const Atom& a : atoms) {
    if (a.weight < 0.0 || !std::isfinite(a.weight)) {
      throw std::invalid_argument("negative or non-finite weight on atom '" +
                                  a.id + "'");
    }
  }
}

}  // namespace

DiscreteDistribution::DiscreteDistribution(std::vector<Atom> atoms) {
  check_atoms(atoms);
  double total = 0.0;
  for (const Atom& a : atoms) total += a.weight;
  if (total <= 0.0) {
    throw std::invalid_argument("weights sum to zero");
  }
  for (Atom& a : atoms) a.weight /= total;
  atoms_ = std::move(atoms);
  build_index();
}

DiscreteDistribution DiscreteDistribution::from_weights(
    const std::vector<double>& weights) {
  std::vector<Atom> atoms;
  atoms.reserve(weights.size());
  for (std::size_t i = 0; i < weights.size(); ++i) {
    atoms.push_back({"x" + std::to_string(i), {}, weights[i]});
  }
  return DiscreteDistribution(std::move(atoms));
}

DiscreteDistribution DiscreteDistribution::from_normalized(
    std::vector<Atom> atoms) {
  check_atoms(atoms);
  double total = 0.0;
  for (const Atom& a : atoms) total += a.weight;
  if (std::abs(total - 1.0) > 1e-9) {
    throw std::invalid_argument("weights are not normalized");
  }
  DiscreteDistribution d;
  d.atoms_ = std::move(atoms);
  d.build_index();
  return d;
}

void DiscreteDistribution::build_index() {
  index_.reserve(atoms_.size());
  coord_dim_ = 0;
  bool saw_coords = false;
  for (std::size_t i = 0; i < atoms_.size(); ++i) {
    if (!index_.emplace(atoms_[i].id, i).second) {
      throw std::invalid_argument("duplicate atom id '" + atoms_[i].id + "'");
    }
    if (!atoms_[i].coords.empty()) {
      const int d = static_cast<int>(atoms_[i].coords.size());
      if (saw_coords && d != coord_dim_) {
        throw std::invalid_argument("inconsistent coordinate dimensions");
      }
      coord_dim_ = d;
      saw_coords = true;
    }
  }
}

std::size_t DiscreteDistribution::find(const std::string& id) const {
  auto it = index_.find(id);
  return it == index_.end() ? npos : it->second;
}

std::size_t DiscreteDistribution::tiny_weight_count() const {
  std::size_t n = 0;
  for (const Atom& a : atoms_) {
    if (a.weight > 0.0 && a.weight <= kTinyWeight) ++n;
  }
  return n;
}

DiscreteDistribution DiscreteDistribution::pruned(double threshold) const {
  std::vector<Atom> kept;
  for (const Atom& a : atoms_) {
    if (a.weight >= threshold) kept.push_back(a);
  }
  return DiscreteDistribution(std::move(kept));
}

nlohmann::json DiscreteDistribution::to_json() const {
  nlohmann::json arr = nlohmann::json::array();
  for (const Atom& a : atoms_) {
    nlohmann::json ja{{"id", a.id}, {"weight", a.weight}};
    if (!a.coords.empty()) ja["coords"] = a.coords;
    arr.push_back(std::move(ja));
  }
  return nlohmann::json{{"atoms", std::move(arr)}};
}

DiscreteDistribution DiscreteDistribution::from_json(const nlohmann::json& j) {
  std::vector<Atom> atoms;
  for (const auto& ja : j.at("atoms")) {
    Atom a;
    a.id = ja.at("id").get<std::string>();
    a.weight = ja.at("weight").get<double>();
    if (ja.contains("coords")) a.coords = ja["coords"].get<std::vector<double>>();
    atoms.push_back(std::move(a));
  }
  return DiscreteDistribution(std::move(atoms));
}

SupportStats reward_stats(const DiscreteDistribution& p, const RewardFn& r,
                          double level_set_tol) {
  const auto& atoms = p.atoms();
  std::vector<double> rewards(atoms.size());
  double r_star = -kInf;
  for (std::size_t i = 0; i < atoms.size(); ++i) {
    rewards[i] = r(atoms[i]);
    if (atoms[i].weight > 0.0 && rewards[i] > r_star) r_star = rewards[i];
  }

  // Shifted accumulation: s = e^{r - r_*} <= 1 on the support.
  double first_moment = 0.0;
  for (std::size_t i = 0; i < atoms.size(); ++i) {
    first_moment += atoms[i].weight * std::exp(rewards[i] - r_star);
  }
  double central = 0.0;
  for (std::size_t i = 0; i < atoms.size(); ++i) {
    const double d = std::exp(rewards[i] - r_star) - first_moment;
    central += atoms[i].weight * d * d;
  }

  SupportStats stats;
  stats.essential_sup = r_star;
  stats.expect_exp_reward = std::exp(r_star) * first_moment;
  stats.var_exp_reward = std::exp(2.0 * r_star) * central;
  stats.level_set_mass = 0.0;
  for (std::size_t i = 0; i < atoms.size(); ++i) {
    if (rewards[i] >= r_star - level_set_tol) {
      stats.level_set_mass += atoms[i].weight;
    }
  }
  return stats;
}

double mean_reward(const DiscreteDistribution& p, const RewardFn& r) {
  double m = 0.0;
  for (const Atom& a : p.atoms()) m += a.weight * r(a);
  return m;
}

double kl_divergence(const DiscreteDistribution& p,
                     const DiscreteDistribution& q) {
  double kl = 0.0;
  for (const Atom& a : p.atoms()) {
    if (a.weight == 0.0) continue;
    const std::size_t j = q.find(a.id);
    const double qw = (j == DiscreteDistribution::npos) ? 0.0 : q.weight(j);
    if (qw == 0.0) return kInf;
    kl += a.weight * std::log(a.weight / qw);
  }
  return kl;
}

double total_variation(const DiscreteDistribution& p,
                       const DiscreteDistribution& q) {
  double sum = 0.0;
  for (const Atom& a : p.atoms()) {
    const std::size_t j = q.find(a.id);
    const double qw = (j == DiscreteDistribution::npos) ? 0.0 : q.weight(j);
    sum += std::abs(a.weight - qw);
  }
  for (const Atom& b : q.atoms()) {
    if (p.find(b.id) == DiscreteDistribution::npos) sum += b.weight;
  }
  return 0.5 * sum;
}

double max_density_ratio(const DiscreteDistribution& p,
                         const DiscreteDistribution& q) {
  double worst = 0.0;
  for (const Atom& a : p.atoms()) {
    const std::size_t j = q.find(a.id);
    const double qw = (j == DiscreteDistribution::npos) ? 0.0 : q.weight(j);
    if (qw > 0.0) {
      worst = std::max(worst, a.weight / qw);
    } else if (a.weight > 0.0) {
      return kInf;
    }
  }
  return worst;
}

double prob_reward_at_least(const DiscreteDistribution& p, const RewardFn& r,
                            double threshold) {
  double mass = 0.0;
  for (const Atom& a : p.atoms()) {
    if (r(a) >= threshold) mass += a.weight;
  }
  return mass;
}

DiscreteDistribution restrict_to_level_set(const DiscreteDistribution& p,
                                           const RewardFn& r,
                                           double level_set_tol) {
  const SupportStats stats = reward_stats(p, r, level_set_tol);
  if (stats.level_set_mass <= 0.0) {
    throw std::invalid_argument("top level set carries no mass");
  }
  std::vector<Atom> atoms = p.atoms();
  for (Atom& a : atoms) {
    if (r(a) >= stats.essential_sup - level_set_tol) {
      a.weight /= stats.level_set_mass;
    } else {
      a.weight = 0.0;
    }
  }
  return DiscreteDistribution::from_normalized(std::move(atoms));
}

DiscreteDistribution mix(const DiscreteDistribution& p,
                         const DiscreteDistribution& q, double lambda) {
  if (lambda < 0.0 || !std::isfinite(lambda)) {
    throw std::invalid_argument("mixing weight must be finite and >= 0");
  }
  const double denom = 1.0 + lambda;

  std::vector<Atom> atoms = p.atoms();
  std::vector<bool> seen(atoms.size(), false);
  for (const Atom& b : q.atoms()) {
    const std::size_t i = p.find(b.id);
    if (i == DiscreteDistribution::npos) {
      Atom nb = b;
      nb.weight = lambda * b.weight / denom;
      atoms.push_back(std::move(nb));
    } else {
      atoms[i].weight = (atoms[i].weight + lambda * b.weight) / denom;
      seen[i] = true;
    }
  }
  for (std::size_t i = 0; i < seen.size(); ++i) {
    if (!seen[i]) atoms[i].weight /= denom;
  }
  return DiscreteDistribution::from_normalized(std::move(atoms));
}

}  // namespace loopsim
