#include "loopsim/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <mutex>
#include <numeric>
#include <thread>

#include "loopsim/curation.hpp"
#include "loopsim/distribution.hpp"
#include "loopsim/dynamics.hpp"
#include "loopsim/fitters.hpp"
#include "loopsim/reward.hpp"
#include "loopsim/rng.hpp"
#include "loopsim/samples.hpp"

namespace loopsim {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

constexpr int kSchemaVersion = 1;
constexpr double kInf = std::numeric_limits<double>::infinity();

const json& req(const json& j, const char* field, const std::string& ctx) {
  auto it = j.find(field);
  if (it == j.end()) {
    throw ConfigError("missing field '" + ctx + field + "'");
  }
  return *it;
}

template <class T>
T get_req(const json& j, const char* field, const std::string& ctx) {
  try {
    return req(j, field, ctx).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("field '" + ctx + field + "' has the wrong type");
  }
}

template <class T>
T get_or(const json& j, const char* field, T fallback) {
  auto it = j.find(field);
  if (it == j.end()) return fallback;
  return it->get<T>();
}

double parse_lambda(const json& v, const std::string& ctx) {
  if (v.is_string()) {
    if (v.get<std::string>() == "infinite") return kInf;
    throw ConfigError("field '" + ctx +
                      "lambda' must be a number or \"infinite\"");
  }
  const double lambda = v.get<double>();
  if (lambda < 0.0) {
    throw ConfigError("field '" + ctx + "lambda' must be >= 0");
  }
  return lambda;
}

DiscreteDistribution parse_distribution(const json& spec, const fs::path& base,
                                        const std::string& ctx) {
  if (spec.contains("file")) {
    const fs::path p = base / spec.at("file").get<std::string>();
    std::ifstream in(p);
    if (!in) throw ConfigError("cannot read distribution file " + p.string());
    return DiscreteDistribution::from_json(json::parse(in));
  }
  if (!spec.contains("atoms")) {
    throw ConfigError("field '" + ctx + "' needs \"atoms\" or \"file\"");
  }
  try {
    return DiscreteDistribution::from_json(spec);
  } catch (const std::invalid_argument& e) {
    throw ConfigError("field '" + ctx + "': " + e.what());
  }
}

LoopConfig parse_loop(const json& j, const std::string& ctx) {
  LoopConfig cfg;
  cfg.k = get_req<int>(j, "k", ctx);
  if (cfg.k < 1) throw ConfigError("field '" + ctx + "k' must be >= 1");
  cfg.iterations = get_req<int>(j, "iterations", ctx);
  if (cfg.iterations < 0) {
    throw ConfigError("field '" + ctx + "iterations' must be >= 0");
  }
  if (j.contains("lambda")) cfg.lambda = parse_lambda(j.at("lambda"), ctx);
  cfg.eps_grid = get_or<std::vector<double>>(j, "eps_grid", cfg.eps_grid);
  for (double e : cfg.eps_grid) {
    if (e < 0.0) throw ConfigError("field '" + ctx + "eps_grid' must be >= 0");
  }
  cfg.level_set_tol = get_or<double>(j, "level_set_tol", cfg.level_set_tol);
  cfg.seed = get_or<std::uint64_t>(j, "seed", 0);
  cfg.term_cap = get_or<double>(j, "term_cap", cfg.term_cap);
  const std::string mode = get_or<std::string>(j, "mode", "exact");
  if (mode == "exact") {
    cfg.mode = LoopMode::exact;
  } else if (mode == "monte-carlo") {
    cfg.mode = LoopMode::monte_carlo;
    cfg.mc_rounds = get_or<long long>(j, "mc_rounds", cfg.mc_rounds);
    if (cfg.mc_rounds < 1) {
      throw ConfigError("field '" + ctx + "mc_rounds' must be >= 1");
    }
  } else {
    throw ConfigError("field '" + ctx + "mode' must be exact or monte-carlo");
  }
  return cfg;
}

struct RewardSetup {
  std::optional<RewardFunction> fn;
  std::shared_ptr<const Classifier> classifier;  // set when one was trained
  double gamma = 0.0;
  std::optional<std::pair<std::vector<double>, double>> ball;  // clipped only
};

RewardSetup parse_reward(const json& spec, const std::string& ctx,
                         const SampleSet* train_data, const json* train_opts,
                         std::uint64_t seed) {
  RewardSetup setup;
  const std::string type = get_req<std::string>(spec, "type", ctx);
  if (type == "tabular") {
    TabularReward tab;
    for (const auto& [id, v] : req(spec, "values", ctx).items()) {
      tab.values[id] = v.get<double>();
    }
    setup.fn.emplace(std::move(tab));
    return setup;
  }
  if (type == "clipped-distance") {
    ClippedDistanceReward cd;
    cd.center = get_req<std::vector<double>>(spec, "center", ctx);
    cd.gamma = get_req<double>(spec, "gamma", ctx);
    cd.r_min = get_req<double>(spec, "r_min", ctx);
    setup.gamma = cd.gamma;
    setup.ball = {{cd.center, cd.r_min}};
    try {
      setup.fn.emplace(std::move(cd));
    } catch (const std::invalid_argument& e) {
      throw ConfigError("field '" + ctx + "': " + e.what());
    }
    return setup;
  }
  if (type == "class-prob" || type == "confidence") {
    if (!train_data || !train_data->labeled()) {
      throw ConfigError("field '" + ctx +
                        "': classifier rewards need a labeled dataset");
    }
    TrainOptions opts;
    if (train_opts && !train_opts->is_null()) {
      opts.hidden_width = get_or<int>(*train_opts, "hidden_width", opts.hidden_width);
      opts.epochs = get_or<int>(*train_opts, "epochs", opts.epochs);
      opts.learning_rate =
          get_or<double>(*train_opts, "learning_rate", opts.learning_rate);
      opts.batch_size = get_or<int>(*train_opts, "batch_size", opts.batch_size);
    }
    opts.seed = derive_seed(seed, 0xc1f);
    auto clf = std::make_shared<Classifier>(train_classifier(*train_data, opts));
    setup.classifier = clf;
    setup.gamma = get_or<double>(spec, "gamma", 5.0);
    try {
      if (type == "class-prob") {
        setup.fn.emplace(ClassProbReward{
            clf, get_req<int>(spec, "class_index", ctx), setup.gamma});
      } else {
        setup.fn.emplace(ConfidenceReward{clf, setup.gamma});
      }
    } catch (const std::invalid_argument& e) {
      throw ConfigError("field '" + ctx + "': " + e.what());
    }
    return setup;
  }
  throw ConfigError("field '" + ctx + "type': unknown reward type '" + type +
                    "'");
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path.string());
  out << j.dump(2) << '\n';
}

json base_summary(const std::string& kind) {
  return json{{"schema_version", kSchemaVersion},
              {"kind", kind},
              {"verifiers", json::array()},
              {"failures", 0}};
}

void add_report(json& summary, const VerifierReport& report) {
  summary["verifiers"].push_back(report.to_json());
  if (!report.passed()) {
    summary["failures"] = summary["failures"].get<int>() + 1;
  }
}

RunResult finish(json summary, const fs::path& out_dir, const json& config) {
  write_json(out_dir / "summary.json", summary);
  write_json(out_dir / "config-echo.json", config);
  return RunResult{summary.at("failures").get<int>(), std::move(summary)};
}

// Drift must stay below 1e-9 per exact step.
VerifierReport drift_report(const LoopTrace& trace) {
  VerifierReport report;
  report.name = "renorm_drift";
  report.tolerance = 0.0;
  for (const TraceRow& row : trace.rows) {
    if (std::isnan(row.renorm_drift)) continue;
    ++report.checks;
    const double margin = 1e-9 - row.renorm_drift;
    report.worst_margin = std::min(report.worst_margin, margin);
    if (margin < 0.0) {
      report.failures.push_back({row.t, margin, "per-step renormalization drift"});
    }
  }
  return report;
}

// --- exact loops -------------------------------------------------------------

RunResult run_exact(const json& config, const fs::path& out_dir, bool pure) {
  const std::string kind = pure ? "exact-pure" : "exact-mixture";
  const DiscreteDistribution p0 = parse_distribution(
      req(config, "distribution", ""), out_dir, "distribution");
  RewardSetup reward =
      parse_reward(req(config, "reward", ""), "reward.", nullptr, nullptr, 0);
  LoopConfig loop = parse_loop(req(config, "loop", ""), "loop.");
  if (pure && std::isfinite(loop.lambda)) {
    throw ConfigError("field 'loop.lambda' must be \"infinite\" for exact-pure");
  }
  if (!pure && !std::isfinite(loop.lambda)) {
    throw ConfigError("field 'loop.lambda' must be finite for exact-mixture");
  }

  const json verify = get_or<json>(config, "verify", json::object());
  const bool want_kl_bound = get_or<bool>(verify, "kl_bound", false);
  if (want_kl_bound && !(loop.lambda * (loop.k - 1) < 1.0)) {
    throw ConfigError(
        "kl_bound verification requires loop.lambda * (loop.k - 1) < 1; got " +
        std::to_string(loop.lambda * (loop.k - 1)));
  }

  const RewardFn& r = *reward.fn;
  const SupportStats ref_stats = reward_stats(p0, r, loop.level_set_tol);
  LoopTrace trace =
      pure ? run_pure_loop(p0, r, loop) : run_mixture_loop(p0, r, loop);
  trace.write_csv(out_dir / "trace.csv");

  json summary = base_summary(kind);
  if (loop.mode == LoopMode::exact) add_report(summary, drift_report(trace));
  if (get_or<bool>(verify, "reward_growth", false)) {
    add_report(summary, verify_reward_growth(trace, loop.k));
  }
  if (get_or<bool>(verify, "probability_monotone", false)) {
    add_report(summary, verify_probability_monotone(trace));
  }
  if (verify.contains("kl_convergence")) {
    const double threshold =
        get_req<double>(verify.at("kl_convergence"), "final_threshold",
                        "verify.kl_convergence.");
    add_report(summary, verify_kl_convergence(trace, threshold));
  }
  if (want_kl_bound) {
    add_report(summary, verify_kl_bound(trace, loop.lambda, loop.k));
  }
  if (verify.contains("mixture_reward") &&
      (!verify.at("mixture_reward").is_boolean() ||
       verify.at("mixture_reward").get<bool>())) {
    double tail_tol = 1e-6;
    if (verify.at("mixture_reward").is_object()) {
      tail_tol = get_or<double>(verify.at("mixture_reward"), "tail_tol", tail_tol);
    }
    add_report(summary,
               verify_mixture_reward(trace, loop.lambda, loop.k, ref_stats,
                                     tail_tol));
  }
  if (verify.contains("rlhf_equivalence")) {
    const int t_max = get_req<int>(verify.at("rlhf_equivalence"), "t_max",
                                   "verify.rlhf_equivalence.");
    add_report(summary, rlhf_equivalence_check(p0, r, t_max));
  }

  const TraceRow& last = trace.rows.back();
  summary["terminal"] = {{"expect_exp_reward", last.expect_exp_reward},
                         {"var_exp_reward", last.var_exp_reward},
                         {"kl_to_limit", last.kl_to_limit},
                         {"kl_to_ref", last.kl_to_ref}};
  summary["artifacts"] = {{"trace_csv", "trace.csv"}};
  return finish(std::move(summary), out_dir, config);
}

// --- accumulate ----------------------------------------------------------------

RunResult run_accumulate_experiment(const json& config,
                                    const fs::path& out_dir) {
  AccumulateConfig acc;
  const json& prefix = req(config, "prefix", "");
  if (!prefix.is_array() || prefix.empty()) {
    throw ConfigError("field 'prefix' must be a non-empty array");
  }
  for (std::size_t i = 0; i < prefix.size(); ++i) {
    acc.prefix.push_back(parse_distribution(
        prefix.at(i), out_dir, "prefix[" + std::to_string(i) + "]"));
  }
  acc.alphas = get_req<std::vector<double>>(config, "alphas", "");
  acc.alpha_tail = get_or<double>(config, "alpha_tail", 1.0);
  const int extra = get_or<int>(config, "extra_steps", 20);
  const double tol = get_or<double>(config, "tolerance", 1e-12);

  AccumulateTrace trace;
  try {
    trace = run_accumulate_loop(acc, extra);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("accumulate: ") + e.what());
  }

  {
    std::ofstream out(out_dir / "trace.csv", std::ios::binary);
    out << "step,max_deviation_from_first\r\n";
    for (std::size_t s = 0; s < trace.states.size(); ++s) {
      double dev = 0.0;
      const DiscreteDistribution& first = trace.states.front();
      for (const Atom& a : trace.states[s].atoms()) {
        const std::size_t j = first.find(a.id);
        const double w =
            (j == DiscreteDistribution::npos) ? 0.0 : first.weight(j);
        dev = std::max(dev, std::abs(w - a.weight));
      }
      out << s << ',' << dev << "\r\n";
    }
  }

  VerifierReport constancy;
  constancy.name = "accumulate_constancy";
  constancy.tolerance = 0.0;
  constancy.checks = 1;
  constancy.worst_margin = tol - trace.max_deviation;
  if (constancy.worst_margin < 0.0) {
    constancy.failures.push_back(
        {extra, constancy.worst_margin, "combination drifted"});
  }

  json summary = base_summary("accumulate");
  add_report(summary, constancy);
  summary["max_deviation"] = trace.max_deviation;
  summary["artifacts"] = {{"trace_csv", "trace.csv"}};
  return finish(std::move(summary), out_dir, config);
}

// --- sample loop -----------------------------------------------------------------

double proportion_entropy(const std::vector<double>& props) {
  double h = 0.0;
  for (double p : props) {
    if (p > 0.0) h -= p * std::log(p);
  }
  return h;
}

RunResult run_sample_experiment(const json& config, const fs::path& out_dir) {
  const json& dataset = req(config, "dataset", "");
  const std::string ds_type = get_req<std::string>(dataset, "type", "dataset.");
  SampleSet real;
  std::vector<std::array<double, 2>> centers;
  if (ds_type == "eight-gaussians") {
    const double radius = get_req<double>(dataset, "radius", "dataset.");
    real = gen_eight_gaussians(get_req<std::size_t>(dataset, "n", "dataset."),
                               radius, get_req<double>(dataset, "sigma", "dataset."),
                               get_or<std::uint64_t>(dataset, "seed", 0));
    centers = eight_gaussian_centers(radius);
  } else if (ds_type == "two-moons") {
    real = gen_two_moons(get_req<std::size_t>(dataset, "n", "dataset."),
                         get_or<double>(dataset, "noise", 0.1),
                         get_or<std::uint64_t>(dataset, "seed", 0));
  } else if (ds_type == "csv") {
    real = SampleSet::read_csv(out_dir.parent_path() /
                               get_req<std::string>(dataset, "file", "dataset."));
  } else {
    throw ConfigError("field 'dataset.type': unknown dataset '" + ds_type + "'");
  }

  const json& jloop = req(config, "loop", "");
  SampleLoopConfig loop;
  loop.k = get_req<int>(jloop, "k", "loop.");
  if (loop.k < 1) throw ConfigError("field 'loop.k' must be >= 1");
  loop.lambda = parse_lambda(req(jloop, "lambda", "loop."), "loop.");
  loop.n_gen = get_req<std::size_t>(jloop, "n_gen", "loop.");
  loop.iterations = get_req<int>(jloop, "iterations", "loop.");
  loop.seed = get_or<std::uint64_t>(jloop, "seed", 0);
  if (loop.n_gen < static_cast<std::size_t>(loop.k)) {
    throw ConfigError("field 'loop.n_gen' must be at least loop.k");
  }

  const json* train_opts_ptr = nullptr;
  json train_opts;
  if (config.contains("classifier")) {
    train_opts = config.at("classifier");
    train_opts_ptr = &train_opts;
  }
  RewardSetup reward = parse_reward(req(config, "reward", ""), "reward.", &real,
                                    train_opts_ptr, loop.seed);
  loop.ball = reward.ball;

  const std::string classes =
      get_or<std::string>(get_or<json>(config, "measure", json::object()),
                          "classes", "none");
  if (classes == "nearest-center") {
    if (centers.empty()) {
      throw ConfigError(
          "measure.classes = nearest-center needs the eight-gaussians dataset");
    }
    loop.labeler = nearest_center_labeler(centers);
    loop.num_classes = 8;
  } else if (classes == "classifier") {
    std::shared_ptr<const Classifier> clf = reward.classifier;
    if (!clf) {
      TrainOptions opts;
      opts.seed = derive_seed(loop.seed, 0xc1f);
      clf = std::make_shared<Classifier>(train_classifier(real, opts));
    }
    loop.labeler = [clf](std::span<const double> pt) { return clf->predict(pt); };
    loop.num_classes = clf->num_classes();
  } else if (classes != "none") {
    throw ConfigError("field 'measure.classes': unknown mode '" + classes + "'");
  }

  const json& jfit = req(config, "fitter", "");
  const std::string fit_type = get_req<std::string>(jfit, "type", "fitter.");
  GenerativeFitter fitter;
  if (fit_type == "histogram") {
    HistogramFitter h;
    h.bins_per_axis = get_or<int>(jfit, "bins", 64);
    for (const auto& b :
         get_req<std::vector<std::vector<double>>>(jfit, "bounds", "fitter.")) {
      if (b.size() != 2) {
        throw ConfigError("field 'fitter.bounds' entries must be [lo, hi]");
      }
      h.bounds.emplace_back(b[0], b[1]);
    }
    fitter = h;
  } else if (fit_type == "gmm") {
    GmmFitter g;
    g.components = get_req<int>(jfit, "components", "fitter.");
    g.em_iterations = get_or<int>(jfit, "em_iterations", g.em_iterations);
    g.cov_reg = get_or<double>(jfit, "cov_reg", g.cov_reg);
    fitter = g;
  } else {
    throw ConfigError("field 'fitter.type': unknown fitter '" + fit_type + "'");
  }

  const RewardFunction rf = *reward.fn;
  const CoordRewardFn coord_reward =
      [rf](std::span<const double> pt) { return rf.at(pt); };
  LoopTrace trace = run_sample_loop(real, fitter, coord_reward, loop);
  trace.write_csv(out_dir / "trace.csv");

  json summary = base_summary("sample-loop");
  if (reward.classifier) {
    summary["classifier_train_accuracy"] = reward.classifier->train_accuracy();
    write_json(out_dir / "classifier.json", reward.classifier->to_json());
  }

  const json verify = get_or<json>(config, "verify", json::object());
  if (verify.contains("final_ball_mass_min")) {
    const double want = verify.at("final_ball_mass_min").get<double>();
    VerifierReport r2;
    r2.name = "final_ball_mass";
    r2.checks = 1;
    r2.worst_margin = trace.rows.back().ball_mass - want;
    if (r2.worst_margin < 0.0) {
      r2.failures.push_back({trace.rows.back().t, r2.worst_margin,
                             "terminal in-ball mass below target"});
    }
    add_report(summary, r2);
  }
  if (verify.contains("min_class_prop")) {
    const double want = verify.at("min_class_prop").get<double>();
    VerifierReport r2;
    r2.name = "min_class_proportion";
    r2.checks = 1;
    double lo = kInf;
    for (double p : trace.rows.back().class_props) lo = std::min(lo, p);
    r2.worst_margin = lo - want;
    if (r2.worst_margin < 0.0) {
      r2.failures.push_back({trace.rows.back().t, r2.worst_margin,
                             "a class fell below the floor"});
    }
    add_report(summary, r2);
  }
  if (get_or<bool>(verify, "entropy_strictly_decreasing", false)) {
    VerifierReport r2;
    r2.name = "class_entropy_strictly_decreasing";
    for (std::size_t t = 0; t + 1 < trace.rows.size(); ++t) {
      ++r2.checks;
      const double margin = proportion_entropy(trace.rows[t].class_props) -
                            proportion_entropy(trace.rows[t + 1].class_props);
      r2.worst_margin = std::min(r2.worst_margin, margin);
      if (margin <= 0.0) {
        r2.failures.push_back(
            {static_cast<int>(t), margin, "entropy did not strictly decrease"});
      }
    }
    add_report(summary, r2);
  }
  if (get_or<bool>(verify, "mean_reward_increasing", false)) {
    VerifierReport r2;
    r2.name = "mean_reward_increasing";
    for (std::size_t t = 0; t + 1 < trace.rows.size(); ++t) {
      ++r2.checks;
      const double margin =
          trace.rows[t + 1].mean_reward - trace.rows[t].mean_reward;
      r2.worst_margin = std::min(r2.worst_margin, margin);
      if (margin <= 0.0) {
        r2.failures.push_back(
            {static_cast<int>(t), margin, "mean reward did not increase"});
      }
    }
    add_report(summary, r2);
  }

  const TraceRow& last = trace.rows.back();
  summary["terminal"] = {{"expect_exp_reward", last.expect_exp_reward},
                         {"mean_reward", last.mean_reward}};
  if (!std::isnan(last.ball_mass)) summary["terminal"]["ball_mass"] = last.ball_mass;
  if (!last.class_props.empty()) {
    summary["terminal"]["class_props"] = last.class_props;
    summary["terminal"]["class_entropy"] = proportion_entropy(last.class_props);
  }
  summary["artifacts"] = {{"trace_csv", "trace.csv"}};
  if (reward.classifier) summary["artifacts"]["classifier"] = "classifier.json";
  return finish(std::move(summary), out_dir, config);
}

// --- Gaussian stability ----------------------------------------------------------

GaussianParams parse_gaussian(const json& j, const std::string& ctx) {
  if (j.contains("mixture1d")) {
    const json& m = j.at("mixture1d");
    return mixture1d_moments(get_req<double>(m, "w1", ctx + "mixture1d."),
                             get_req<double>(m, "m1", ctx + "mixture1d."),
                             get_req<double>(m, "s1", ctx + "mixture1d."),
                             get_req<double>(m, "m2", ctx + "mixture1d."),
                             get_req<double>(m, "s2", ctx + "mixture1d."));
  }
  GaussianParams g;
  g.mean = get_req<std::vector<double>>(j, "mean", ctx);
  g.cov = get_req<std::vector<double>>(j, "cov", ctx);
  g.dim = static_cast<int>(g.mean.size());
  if (g.cov.size() != g.mean.size() * g.mean.size()) {
    throw ConfigError("field '" + ctx + "cov' must be dim*dim values");
  }
  return g;
}

RunResult run_gaussian_experiment(const json& config, const fs::path& out_dir) {
  const GaussianParams data = parse_gaussian(req(config, "data", ""), "data.");
  const GaussianParams theta0 =
      parse_gaussian(req(config, "theta0", ""), "theta0.");
  const double lambda = parse_lambda(req(config, "lambda", ""), "");
  if (!std::isfinite(lambda)) {
    throw ConfigError("field 'lambda' must be finite for gaussian-stability");
  }
  const int iterations = get_req<int>(config, "iterations", "");

  std::vector<GaussianLoopRow> rows;
  try {
    if (config.contains("sampled_n")) {
      rows = gaussian_mle_loop_sampled(data, theta0, lambda, iterations,
                                       config.at("sampled_n").get<std::size_t>(),
                                       get_or<std::uint64_t>(config, "seed", 0));
    } else {
      rows = gaussian_mle_loop(data, theta0, lambda, iterations);
    }
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("gaussian-stability: ") + e.what());
  }

  {
    std::ofstream out(out_dir / "trace.csv", std::ios::binary);
    out << "t";
    for (int i = 0; i < data.dim; ++i) out << ",mean_" << i;
    for (int i = 0; i < data.dim * data.dim; ++i) out << ",cov_" << i;
    out << ",kl_to_target,mean_err_norm,contraction_ratio\r\n";
    out.precision(17);
    for (std::size_t t = 0; t < rows.size(); ++t) {
      out << rows[t].t;
      for (double v : rows[t].theta.mean) out << ',' << v;
      for (double v : rows[t].theta.cov) out << ',' << v;
      out << ',' << rows[t].kl_to_target << ',' << rows[t].mean_err_norm << ',';
      if (t > 0 && rows[t - 1].mean_err_norm > 0.0) {
        out << rows[t].mean_err_norm / rows[t - 1].mean_err_norm;
      }
      out << "\r\n";
    }
  }

  json summary = base_summary("gaussian-stability");
  const json verify = get_or<json>(config, "verify", json::object());

  double rate = lambda / (1.0 + lambda);
  if (config.contains("stability")) {
    const json& sp = config.at("stability");
    StabilityParams params;
    params.alpha = get_req<double>(sp, "alpha", "stability.");
    params.lipschitz = get_req<double>(sp, "lipschitz", "stability.");
    params.eps = get_req<double>(sp, "eps", "stability.");
    params.lambda = lambda;
    try {
      rate = predicted_rate(params);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("field 'stability': ") + e.what());
    }
    summary["predicted_rate"] = rate;
  }

  if (verify.contains("contraction")) {
    const double tol =
        get_or<double>(verify.at("contraction"), "tol", 1e-12);
    VerifierReport r2;
    r2.name = "mean_error_contraction";
    r2.tolerance = tol;
    for (std::size_t t = 1; t < rows.size(); ++t) {
      if (rows[t - 1].mean_err_norm <= 1e-150) break;
      ++r2.checks;
      const double ratio = rows[t].mean_err_norm / rows[t - 1].mean_err_norm;
      const double margin = -std::abs(ratio - rate);
      r2.worst_margin = std::min(r2.worst_margin, margin);
      if (margin < -tol) {
        r2.failures.push_back({rows[t].t, margin, "contraction ratio off rate"});
      }
    }
    add_report(summary, r2);
  }
  if (verify.contains("log_kl_slope")) {
    const json& sl = verify.at("log_kl_slope");
    const double rel_tol = get_or<double>(sl, "rel_tol", 0.02);
    const int t_min = get_or<int>(sl, "t_min", 3);
    const int t_max = get_or<int>(sl, "t_max", iterations);
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    int n = 0;
    for (const GaussianLoopRow& row : rows) {
      if (row.t < t_min || row.t > t_max || row.kl_to_target <= 0.0) continue;
      const double x = row.t, y = std::log(row.kl_to_target);
      sx += x;
      sy += y;
      sxx += x * x;
      sxy += x * y;
      ++n;
    }
    VerifierReport r2;
    r2.name = "log_kl_slope";
    r2.tolerance = 0.0;
    r2.checks = 1;
    if (n >= 2) {
      const double slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
      const double target = 2.0 * std::log(rate);
      const double margin = rel_tol * std::abs(target) - std::abs(slope - target);
      r2.worst_margin = margin;
      summary["log_kl_slope"] = slope;
      summary["log_kl_slope_target"] = target;
      if (margin < 0.0) {
        r2.failures.push_back({t_max, margin, "log-KL slope off 2 log(rate)"});
      }
    } else {
      r2.worst_margin = -1.0;
      r2.failures.push_back({t_min, -1.0, "not enough positive-KL rows"});
    }
    add_report(summary, r2);
  }

  summary["terminal"] = {{"kl_to_target", rows.back().kl_to_target},
                         {"mean_err_norm", rows.back().mean_err_norm}};
  summary["artifacts"] = {{"trace_csv", "trace.csv"}};
  return finish(std::move(summary), out_dir, config);
}

// --- randomized property suite ---------------------------------------------------

struct PropertyChecker {
  VerifierReport report;
  explicit PropertyChecker(std::string name, double tol) {
    report.name = std::move(name);
    report.tolerance = tol;
  }
  void require(int instance, double margin, const char* what) {
    ++report.checks;
    report.worst_margin = std::min(report.worst_margin, margin);
    if (!(margin >= -report.tolerance)) {
      report.failures.push_back({instance, margin, what});
    }
  }
};

RunResult run_verify_suite(const json& config, const fs::path& out_dir) {
  const int instances = get_or<int>(config, "instances", 1000);
  const std::uint64_t seed = get_or<std::uint64_t>(config, "seed", 0);
  const int max_atoms = get_or<int>(config, "max_atoms", 8);
  const int k_min = get_or<int>(config, "k_min", 2);
  const int k_max = get_or<int>(config, "k_max", 6);
  const std::vector<double> reward_range =
      get_or<std::vector<double>>(config, "reward_range", {-2.0, 2.0});
  if (instances < 1 || max_atoms < 2 || k_min < 1 || k_max < k_min ||
      reward_range.size() != 2 || !(reward_range[0] < reward_range[1])) {
    throw ConfigError("verify-suite parameters out of range");
  }

  PropertyChecker range("transfer_in_open_interval", 0.0);
  PropertyChecker norm("transfer_mean_one", 1e-10);
  PropertyChecker mono("transfer_monotone_in_reward", 1e-12);
  PropertyChecker shift("reward_shift_invariance", 1e-10);
  PropertyChecker jensen("jensen_reward_growth", 1e-12);
  PropertyChecker sharp("variance_reward_growth", 1e-9);
  PropertyChecker fixed("fixed_point_residual", 0.0);
  PropertyChecker klnn("kl_nonnegative", 1e-15);

  for (int inst = 0; inst < instances; ++inst) {
    SplitMix64 rng = substream(seed, static_cast<std::uint64_t>(inst));
    const int n = 2 + static_cast<int>(rng() % static_cast<std::uint64_t>(max_atoms - 1));
    std::vector<double> weights(static_cast<std::size_t>(n));
    std::vector<double> rewards(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      weights[static_cast<std::size_t>(i)] = 0.05 + 0.95 * uniform_unit(rng);
      rewards[static_cast<std::size_t>(i)] =
          reward_range[0] + (reward_range[1] - reward_range[0]) * uniform_unit(rng);
    }
    const int k =
        k_min + static_cast<int>(rng() % static_cast<std::uint64_t>(k_max - k_min + 1));
    const DiscreteDistribution p = DiscreteDistribution::from_weights(weights);
    const RewardFn r = [&rewards, &p](const Atom& a) {
      return rewards[p.find(a.id)];
    };

    const TransferFunction tf = transfer_function_exact(p, r, k);
    double mean_h = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double h = tf.at(p.atom(i).id);
      range.require(inst, h, "H > 0");
      range.require(inst, static_cast<double>(k) - h, "H < k");
      mean_h += p.weight(i) * h;
    }
    norm.require(inst, -std::abs(mean_h - 1.0), "sum p H = 1");

    std::vector<std::size_t> order(p.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return rewards[a] < rewards[b];
    });
    for (std::size_t i = 0; i + 1 < order.size(); ++i) {
      mono.require(inst,
                   tf.at(p.atom(order[i + 1]).id) - tf.at(p.atom(order[i]).id),
                   "H monotone in reward");
    }

    const double c = -5.0 + 10.0 * uniform_unit(rng);
    const RewardFn r_shift = [&r, c](const Atom& a) { return r(a) + c; };
    const TransferFunction tf2 = transfer_function_exact(p, r_shift, k);
    for (std::size_t i = 0; i < p.size(); ++i) {
      shift.require(inst,
                    -std::abs(tf.at(p.atom(i).id) - tf2.at(p.atom(i).id)),
                    "H invariant under reward shift");
    }
    shift.require(
        inst, -total_variation(tilt_limit(p, r), tilt_limit(p, r_shift)),
        "tilt invariant under reward shift");

    const SupportStats before = reward_stats(p, r);
    const DiscreteDistribution after = curate_exact(p, r, k);
    const SupportStats after_stats = reward_stats(after, r);
    jensen.require(inst,
                   after_stats.expect_exp_reward - before.expect_exp_reward,
                   "expected exp-reward nondecreasing");
    sharp.require(inst,
                  after_stats.expect_exp_reward - before.expect_exp_reward -
                      (static_cast<double>(k - 1) / k) * before.var_exp_reward /
                          std::exp(before.essential_sup),
                  "variance-proportional growth");

    const FixedPointCheck fp = is_fixed_point(p, r);
    // Continuous rewards make distinct level sets almost surely.
    fixed.require(inst, fp.is_fixed ? -1.0 : fp.residual, "strict residual");

    std::vector<double> weights2(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      weights2[static_cast<std::size_t>(i)] = 0.05 + 0.95 * uniform_unit(rng);
    }
    const DiscreteDistribution q = DiscreteDistribution::from_weights(weights2);
    klnn.require(inst, kl_divergence(p, q), "KL >= 0");
    klnn.require(inst, -std::abs(kl_divergence(p, p)), "KL(p, p) = 0");
  }

  json summary = base_summary("verify-suite");
  for (PropertyChecker* pc :
       {&range, &norm, &mono, &shift, &jensen, &sharp, &fixed, &klnn}) {
    add_report(summary, pc->report);
  }
  summary["instances"] = instances;
  return finish(std::move(summary), out_dir, config);
}

// --- sweep ------------------------------------------------------------------------

void set_by_key(json& cfg, const std::string& key, const json& value) {
  if (key == "k") {
    cfg["loop"]["k"] = value;
  } else if (key == "lambda") {
    cfg["loop"]["lambda"] = value;
  } else if (key == "gamma") {
    cfg["reward"]["gamma"] = value;
  } else {
    throw ConfigError("field 'grid." + key + "': unsupported sweep parameter");
  }
}

}  // namespace

json load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  try {
    return json::parse(in, nullptr, /*allow_exceptions=*/true,
                       /*ignore_comments=*/true);
  } catch (const json::parse_error& e) {
    throw ConfigError("config parse error in " + path.string() + ": " +
                      e.what());
  }
}

RunResult run_experiment(const json& config, const fs::path& out_dir,
                         std::optional<std::uint64_t> seed_override) {
  fs::create_directories(out_dir);
  json cfg = config;
  const std::string kind = get_req<std::string>(cfg, "kind", "");
  if (seed_override) {
    if (cfg.contains("loop")) cfg["loop"]["seed"] = *seed_override;
    if (kind == "verify-suite" || kind == "gaussian-stability") {
      cfg["seed"] = *seed_override;
    }
  }

  if (kind == "exact-pure") return run_exact(cfg, out_dir, true);
  if (kind == "exact-mixture") return run_exact(cfg, out_dir, false);
  if (kind == "accumulate") return run_accumulate_experiment(cfg, out_dir);
  if (kind == "sample-loop") return run_sample_experiment(cfg, out_dir);
  if (kind == "gaussian-stability") return run_gaussian_experiment(cfg, out_dir);
  if (kind == "verify-suite") return run_verify_suite(cfg, out_dir);
  if (kind == "sweep") return run_sweep(cfg, out_dir, seed_override, 1);
  throw ConfigError("field 'kind': unknown experiment kind '" + kind + "'");
}

RunResult run_sweep(const json& config, const fs::path& out_dir,
                    std::optional<std::uint64_t> seed_override, int jobs) {
  fs::create_directories(out_dir);
  const json& base = req(config, "base", "");
  const json& grid = req(config, "grid", "");
  if (!grid.is_object() || grid.empty()) {
    throw ConfigError("field 'grid' must be a non-empty object of arrays");
  }

  std::vector<std::string> keys;
  std::vector<std::vector<json>> values;
  std::size_t points = 1;
  for (const auto& [key, arr] : grid.items()) {
    if (!arr.is_array() || arr.empty()) {
      throw ConfigError("field 'grid." + key + "' must be a non-empty array");
    }
    keys.push_back(key);
    values.emplace_back(arr.begin(), arr.end());
    points *= arr.size();
  }

  std::uint64_t base_seed = 0;
  if (seed_override) {
    base_seed = *seed_override;
  } else if (base.contains("loop") && base.at("loop").contains("seed")) {
    base_seed = base.at("loop").at("seed").get<std::uint64_t>();
  } else if (base.contains("seed")) {
    base_seed = base.at("seed").get<std::uint64_t>();
  }

  struct Point {
    json cfg;
    fs::path dir;
    std::string label;
    std::vector<json> params;
  };
  std::vector<Point> plan;
  plan.reserve(points);
  for (std::size_t idx = 0; idx < points; ++idx) {
    json cfg = base;
    std::size_t rem = idx;
    std::string label;
    std::vector<json> params;
    for (std::size_t a = 0; a < keys.size(); ++a) {
      const json& v = values[a][rem % values[a].size()];
      rem /= values[a].size();
      set_by_key(cfg, keys[a], v);
      label += "_" + keys[a] +
               (v.is_string() ? v.get<std::string>() : v.dump());
      params.push_back(v);
    }
    if (cfg.contains("loop")) {
      cfg["loop"]["seed"] = derive_seed(base_seed, idx);
    } else {
      cfg["seed"] = derive_seed(base_seed, idx);
    }
    char num[32];
    std::snprintf(num, sizeof(num), "point_%03zu", idx);
    plan.push_back({std::move(cfg), out_dir / (num + label), label,
                    std::move(params)});
  }

  // Validate every point before starting any run.
  std::vector<RunResult> results(plan.size());
  std::mutex err_mutex;
  std::exception_ptr first_error;
  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    while (true) {
      const std::size_t i = next.fetch_add(1);
      if (i >= plan.size()) return;
      try {
        results[i] = run_experiment(plan[i].cfg, plan[i].dir);
      } catch (...) {
        std::lock_guard<std::mutex> lock(err_mutex);
        if (!first_error) first_error = std::current_exception();
        return;
      }
    }
  };
  const int n_threads =
      std::max(1, std::min<int>(jobs, static_cast<int>(plan.size())));
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int i = 0; i < n_threads; ++i) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  if (first_error) std::rethrow_exception(first_error);

  std::ofstream agg(out_dir / "aggregate.csv", std::ios::binary);
  agg << "point";
  for (const std::string& key : keys) agg << ',' << key;
  agg << ",failures,terminal_expect_exp_reward,terminal_kl_to_ref,worst_margin\r\n";
  agg.precision(17);
  int total_failures = 0;
  json point_summaries = json::array();
  for (std::size_t i = 0; i < plan.size(); ++i) {
    const json& s = results[i].summary;
    total_failures += results[i].failed_verifiers;
    agg << i;
    for (const json& v : plan[i].params) {
      agg << ',' << (v.is_string() ? v.get<std::string>() : v.dump());
    }
    double worst = kInf;
    for (const json& rep : s.at("verifiers")) {
      worst = std::min(worst, rep.at("worst_margin").get<double>());
    }
    agg << ',' << results[i].failed_verifiers << ',';
    if (s.contains("terminal") && s.at("terminal").contains("expect_exp_reward")) {
      agg << s.at("terminal").at("expect_exp_reward").get<double>();
    }
    agg << ',';
    if (s.contains("terminal") && s.at("terminal").contains("kl_to_ref")) {
      agg << s.at("terminal").at("kl_to_ref").get<double>();
    }
    agg << ',';
    if (std::isfinite(worst)) agg << worst;
    agg << "\r\n";
    point_summaries.push_back(
        {{"dir", plan[i].dir.filename().string()},
         {"failures", results[i].failed_verifiers}});
  }

  json summary = base_summary("sweep");
  summary["failures"] = total_failures;
  summary["points"] = std::move(point_summaries);
  summary["artifacts"] = {{"aggregate_csv", "aggregate.csv"}};
  return finish(std::move(summary), out_dir, config);
}

}  // namespace loopsim
