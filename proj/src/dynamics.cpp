#include "loopsim/dynamics.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>

#include <nlohmann/json.hpp>

namespace loopsim {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

std::string format_double(double v) {
  if (std::isnan(v)) return "";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

TraceRow make_row(int t, const DiscreteDistribution& p,
                  const DiscreteDistribution& p_star,
                  const DiscreteDistribution& p_ref, const RewardFn& r,
                  double r_star0, const LoopConfig& cfg, double drift) {
  TraceRow row;
  row.t = t;
  const SupportStats st = reward_stats(p, r, cfg.level_set_tol);
  row.expect_exp_reward = st.expect_exp_reward;
  row.var_exp_reward = st.var_exp_reward;
  row.essential_sup = st.essential_sup;
  row.mean_reward = mean_reward(p, r);
  row.kl_to_limit = kl_divergence(p_star, p);
  row.kl_to_ref = kl_divergence(p, p_ref);
  row.max_density_ratio = max_density_ratio(p, p_ref);
  row.renorm_drift = drift;
  row.prob_at_least.reserve(cfg.eps_grid.size());
  for (double eps : cfg.eps_grid) {
    row.prob_at_least.push_back(
        prob_reward_at_least(p, r, r_star0 - eps - cfg.level_set_tol));
  }
  return row;
}

LoopTrace run_loop(const DiscreteDistribution& p0, const RewardFn& r,
                   const LoopConfig& cfg, bool pure) {
  if (cfg.k < 1) throw std::invalid_argument("need k >= 1");
  if (cfg.iterations < 0) throw std::invalid_argument("negative iteration count");
  if (pure && std::isfinite(cfg.lambda)) {
    throw std::invalid_argument("pure loop requires infinite lambda");
  }
  if (!pure && !(cfg.lambda >= 0.0 && std::isfinite(cfg.lambda))) {
    throw std::invalid_argument("mixture loop requires finite lambda >= 0");
  }

  const DiscreteDistribution p_star =
      restrict_to_level_set(p0, r, cfg.level_set_tol);
  const double r_star0 = reward_stats(p0, r, cfg.level_set_tol).essential_sup;
  const CurationOptions copts{cfg.term_cap, cfg.level_set_tol};

  LoopTrace trace;
  trace.eps_grid = cfg.eps_grid;
  trace.rows.reserve(static_cast<std::size_t>(cfg.iterations) + 1);

  DiscreteDistribution p = p0;
  trace.rows.push_back(make_row(0, p, p_star, p0, r, r_star0, cfg, 0.0));
  for (int t = 1; t <= cfg.iterations; ++t) {
    double drift = 0.0;
    DiscreteDistribution curated =
        cfg.mode == LoopMode::exact
            ? curate_exact(p, r, cfg.k, copts, &drift)
            : curate_monte_carlo(p, r, cfg.k, cfg.mc_rounds,
                                 derive_seed(cfg.seed, static_cast<std::uint64_t>(t)));
    p = pure ? std::move(curated) : mix(p0, curated, cfg.lambda);
    trace.rows.push_back(make_row(t, p, p_star, p0, r, r_star0, cfg, drift));
  }
  trace.terminal = std::move(p);
  return trace;
}

}  // namespace

void LoopTrace::write_csv(std::ostream& out) const {
  out << "t,expect_exp_reward,var_exp_reward,mean_reward,essential_sup,"
         "kl_to_limit,kl_to_ref,max_density_ratio,renorm_drift";
  for (double eps : eps_grid) out << ",prob_at_least_eps" << format_double(eps);
  std::size_t nclasses = 0;
  bool any_ball = false;
  for (const TraceRow& row : rows) {
    nclasses = std::max(nclasses, row.class_props.size());
    any_ball = any_ball || !std::isnan(row.ball_mass);
  }
  for (std::size_t c = 0; c < nclasses; ++c) out << ",class_prop_" << c;
  if (any_ball) out << ",ball_mass";
  out << "\r\n";

  for (const TraceRow& row : rows) {
    out << row.t << ',' << format_double(row.expect_exp_reward) << ','
        << format_double(row.var_exp_reward) << ','
        << format_double(row.mean_reward) << ','
        << format_double(row.essential_sup) << ','
        << format_double(row.kl_to_limit) << ','
        << format_double(row.kl_to_ref) << ','
        << format_double(row.max_density_ratio) << ','
        << format_double(row.renorm_drift);
    for (std::size_t i = 0; i < eps_grid.size(); ++i) {
      out << ','
          << (i < row.prob_at_least.size() ? format_double(row.prob_at_least[i])
                                           : "");
    }
    for (std::size_t c = 0; c < nclasses; ++c) {
      out << ','
          << (c < row.class_props.size() ? format_double(row.class_props[c])
                                         : "");
    }
    if (any_ball) out << ',' << format_double(row.ball_mass);
    out << "\r\n";
  }
}

void LoopTrace::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string());
  write_csv(out);
}

LoopTrace run_pure_loop(const DiscreteDistribution& p0, const RewardFn& r,
                        const LoopConfig& cfg) {
  return run_loop(p0, r, cfg, /*pure=*/true);
}

LoopTrace run_mixture_loop(const DiscreteDistribution& p_ref, const RewardFn& r,
                           const LoopConfig& cfg) {
  return run_loop(p_ref, r, cfg, /*pure=*/false);
}

AccumulateTrace run_accumulate_loop(const AccumulateConfig& acc,
                                    int extra_steps) {
  if (acc.prefix.empty()) throw std::invalid_argument("empty prefix");
  if (acc.alphas.size() != acc.prefix.size()) {
    throw std::invalid_argument("one alpha per prefix distribution required");
  }
  double prefix_total = 0.0;
  for (double a : acc.alphas) {
    if (a < 0.0) throw std::invalid_argument("negative alpha weight");
    prefix_total += a;
  }
  if (prefix_total <= 0.0) {
    throw std::invalid_argument("at least one positive alpha required");
  }
  if (acc.alpha_tail < 0.0) throw std::invalid_argument("negative tail alpha");

  // Weighted combination over the union support, renormalized.
  auto combine = [](const std::vector<const DiscreteDistribution*>& ps,
                    const std::vector<double>& ws) {
    std::vector<Atom> atoms;
    std::unordered_map<std::string, std::size_t> idx;
    for (std::size_t i = 0; i < ps.size(); ++i) {
      for (const Atom& a : ps[i]->atoms()) {
        auto [it, inserted] = idx.emplace(a.id, atoms.size());
        if (inserted) {
          Atom na = a;
          na.weight = 0.0;
          atoms.push_back(std::move(na));
        }
        atoms[it->second].weight += ws[i] * a.weight;
      }
    }
    return DiscreteDistribution(std::move(atoms));
  };

  // The pointer list is rebuilt every step: pushing into out.states would
  // invalidate pointers held across iterations.
  auto gather = [&acc](const std::vector<DiscreteDistribution>& states) {
    std::pair<std::vector<const DiscreteDistribution*>, std::vector<double>> h;
    for (std::size_t i = 0; i < acc.prefix.size(); ++i) {
      h.first.push_back(&acc.prefix[i]);
      h.second.push_back(acc.alphas[i]);
    }
    for (const DiscreteDistribution& s : states) {
      h.first.push_back(&s);
      h.second.push_back(acc.alpha_tail);
    }
    return h;
  };

  AccumulateTrace out;
  {
    const auto [ps, ws] = gather({});
    out.states.push_back(combine(ps, ws));
  }
  for (int step = 0; step < extra_steps; ++step) {
    const auto [ps, ws] = gather(out.states);
    out.states.push_back(combine(ps, ws));

    const DiscreteDistribution& first = out.states.front();
    const DiscreteDistribution& cur = out.states.back();
    for (const Atom& a : first.atoms()) {
      const std::size_t j = cur.find(a.id);
      const double w = (j == DiscreteDistribution::npos) ? 0.0 : cur.weight(j);
      out.max_deviation = std::max(out.max_deviation, std::abs(w - a.weight));
    }
    for (const Atom& a : cur.atoms()) {
      if (first.find(a.id) == DiscreteDistribution::npos) {
        out.max_deviation = std::max(out.max_deviation, a.weight);
      }
    }
  }
  return out;
}

// --- verifiers ---------------------------------------------------------------

namespace {

class Checker {
 public:
  Checker(std::string name, double tolerance) {
    report_.name = std::move(name);
    report_.tolerance = tolerance;
  }

  void require(int t, double margin, const std::string& what) {
    ++report_.checks;
    report_.worst_margin = std::min(report_.worst_margin, margin);
    if (!(margin >= -report_.tolerance)) {
      report_.failures.push_back({t, margin, what});
    }
  }

  VerifierReport take() { return std::move(report_); }

 private:
  VerifierReport report_;
};

}  // namespace

nlohmann::json VerifierReport::to_json() const {
  nlohmann::json jfail = nlohmann::json::array();
  for (const CheckFailure& f : failures) {
    jfail.push_back({{"t", f.t}, {"margin", f.margin}, {"what", f.what}});
  }
  return nlohmann::json{{"name", name},
                        {"passed", passed()},
                        {"checks", checks},
                        {"worst_margin", worst_margin},
                        {"tolerance", tolerance},
                        {"failures", std::move(jfail)}};
}

VerifierReport verify_reward_growth(const LoopTrace& trace, int k) {
  Checker check("reward_growth", 1e-9);
  if (trace.rows.size() >= 2) {
    const double estar = std::exp(trace.rows.front().essential_sup);
    const double ratio = static_cast<double>(k - 1) / static_cast<double>(k);
    double var_sum = 0.0;
    for (std::size_t t = 0; t + 1 < trace.rows.size(); ++t) {
      const TraceRow& cur = trace.rows[t];
      const TraceRow& nxt = trace.rows[t + 1];
      check.require(static_cast<int>(t),
                    nxt.expect_exp_reward - cur.expect_exp_reward -
                        ratio * cur.var_exp_reward / estar,
                    "per-step reward growth");
      var_sum += cur.var_exp_reward;
    }
    var_sum += trace.rows.back().var_exp_reward;
    if (k >= 2) {
      check.require(static_cast<int>(trace.rows.size()) - 1,
                    (static_cast<double>(k) / (k - 1)) * estar * estar - var_sum,
                    "cumulative variance bound");
    }
  }
  return check.take();
}

VerifierReport verify_probability_monotone(const LoopTrace& trace) {
  Checker check("probability_monotone", 1e-10);
  std::size_t zero_idx = trace.eps_grid.size();
  for (std::size_t e = 0; e < trace.eps_grid.size(); ++e) {
    if (trace.eps_grid[e] == 0.0) zero_idx = e;
    for (std::size_t t = 0; t + 1 < trace.rows.size(); ++t) {
      check.require(static_cast<int>(t),
                    trace.rows[t + 1].prob_at_least[e] -
                        trace.rows[t].prob_at_least[e],
                    "monotone in t at eps=" + std::to_string(trace.eps_grid[e]));
    }
  }
  if (zero_idx < trace.eps_grid.size() && !trace.rows.empty()) {
    // Level-set gains dominate the eps-ball gains scaled by the initial
    // level-set mass.
    const double p0_star = trace.rows.front().prob_at_least[zero_idx];
    for (std::size_t e = 0; e < trace.eps_grid.size(); ++e) {
      if (e == zero_idx) continue;
      for (std::size_t t = 0; t + 1 < trace.rows.size(); ++t) {
        const double d_star = trace.rows[t + 1].prob_at_least[zero_idx] -
                              trace.rows[t].prob_at_least[zero_idx];
        const double d_eps =
            trace.rows[t + 1].prob_at_least[e] - trace.rows[t].prob_at_least[e];
        check.require(static_cast<int>(t), d_star - p0_star * d_eps,
                      "coupled level-set increment at eps=" +
                          std::to_string(trace.eps_grid[e]));
      }
    }
  }
  return check.take();
}

VerifierReport verify_kl_convergence(const LoopTrace& trace,
                                     double final_threshold) {
  Checker check("kl_convergence", 1e-9);
  std::size_t zero_idx = trace.eps_grid.size();
  for (std::size_t e = 0; e < trace.eps_grid.size(); ++e) {
    if (trace.eps_grid[e] == 0.0) zero_idx = e;
  }
  if (zero_idx == trace.eps_grid.size()) {
    Checker missing("kl_convergence", 0.0);
    missing.require(0, -1.0, "eps grid lacks the 0 entry");
    return missing.take();
  }
  for (const TraceRow& row : trace.rows) {
    const double identity_gap =
        std::abs(row.kl_to_limit + std::log(row.prob_at_least[zero_idx]));
    check.require(row.t, 1e-9 - identity_gap,
                  "KL(p_*||p_t) = -log P_t(level set)");
  }
  check.require(trace.rows.back().t,
                final_threshold - trace.rows.back().kl_to_limit,
                "final KL below threshold");
  return check.take();
}

VerifierReport verify_kl_bound(const LoopTrace& trace, double lambda, int k) {
  if (!(lambda * (k - 1) < 1.0)) {
    throw std::invalid_argument(
        "KL bound requires lambda * (k - 1) < 1, got lambda=" +
        std::to_string(lambda) + " k=" + std::to_string(k));
  }
  Checker check("kl_bound", 1e-9);
  const double kl_cap = -std::log1p(-lambda * (k - 1));
  const double ratio_cap = 1.0 / (1.0 - lambda * (k - 1));
  for (const TraceRow& row : trace.rows) {
    check.require(row.t, kl_cap - row.kl_to_ref, "KL(p_t||p_ref) bound");
    check.require(row.t, ratio_cap - row.max_density_ratio,
                  "pointwise density ratio bound");
  }
  return check.take();
}

VerifierReport verify_mixture_reward(const LoopTrace& trace, double lambda,
                                     int k, const SupportStats& ref_stats,
                                     double tail_tol) {
  Checker check("mixture_reward", 1e-9);
  const double estar = std::exp(ref_stats.essential_sup);
  const double base = static_cast<double>(k - 1) * ref_stats.var_exp_reward /
                      (static_cast<double>(k) * estar);
  const double per_step =
      ref_stats.expect_exp_reward + lambda / std::pow(1.0 + lambda, 3) * base;
  for (std::size_t t = 1; t < trace.rows.size(); ++t) {
    check.require(static_cast<int>(t),
                  trace.rows[t].expect_exp_reward - per_step,
                  "per-step mixture reward bound");
  }
  if (trace.rows.size() >= 2) {
    const double tail_bound =
        ref_stats.expect_exp_reward + lambda / std::pow(1.0 + lambda, 2) * base;
    double tail_inf = kInf;
    const std::size_t half = trace.rows.size() / 2;
    for (std::size_t t = half; t < trace.rows.size(); ++t) {
      tail_inf = std::min(tail_inf, trace.rows[t].expect_exp_reward);
    }
    Checker tail("mixture_reward_tail", tail_tol);
    tail.require(static_cast<int>(trace.rows.size() - 1),
                 tail_inf - tail_bound, "tail infimum bound");
    VerifierReport tail_report = tail.take();
    VerifierReport report = check.take();
    report.checks += tail_report.checks;
    report.worst_margin = std::min(report.worst_margin, tail_report.worst_margin);
    for (auto& f : tail_report.failures) report.failures.push_back(std::move(f));
    return report;
  }
  return check.take();
}

VerifierReport rlhf_equivalence_check(const DiscreteDistribution& p0,
                                      const RewardFn& r, int t_max) {
  Checker check("rlhf_equivalence", 1e-9);
  DiscreteDistribution iterated = p0;
  for (int t = 1; t <= t_max; ++t) {
    iterated = tilt_limit(iterated, r);
    const RewardFn scaled = [&r, t](const Atom& a) { return t * r(a); };
    const DiscreteDistribution direct = tilt_limit(p0, scaled);
    double worst = 0.0;
    for (std::size_t i = 0; i < direct.size(); ++i) {
      const double a = iterated.weight(i);
      const double b = direct.weight(i);
      if (b > 0.0) {
        worst = std::max(worst, std::abs(a - b) / b);
      } else if (a > 0.0) {
        worst = kInf;
      }
    }
    check.require(t, 1e-9 - worst, "t-fold tilt equals single tilt by t*r");
  }
  return check.take();
}

}  // namespace loopsim
