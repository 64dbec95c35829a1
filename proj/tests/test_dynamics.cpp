#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <sstream>

#include <nlohmann/json.hpp>

#include "loopsim/dynamics.hpp"
#include "test_util.hpp"

using namespace loopsim;

TEST_CASE("pure loop follows the scalar recursion oracle") {
  const auto inst = test::two_point_instance();
  LoopConfig cfg;
  cfg.k = 2;
  cfg.iterations = 50;
  const LoopTrace trace = run_pure_loop(inst.dist, inst.reward_fn(), cfg);
  REQUIRE(trace.rows.size() == 51);

  // Independent oracle: weight on the high-reward atom obeys
  // w' = w (1.5 - 0.5 w) for e^r = (1, 3), K = 2.
  double w = 0.5;
  DiscreteDistribution p = inst.dist;
  for (int t = 1; t <= 50; ++t) {
    w = w * (1.5 - 0.5 * w);
    p = curate_exact(p, inst.reward_fn(), 2);
    CHECK(std::abs(p.weight(1) - w) <= 1e-12);
    CHECK(std::abs(trace.rows[static_cast<std::size_t>(t)].prob_at_least[0] -
                   w) <= 1e-12);
  }

  CHECK(trace.rows.back().kl_to_limit < 1e-10);
  CHECK(trace.terminal.has_value());
  CHECK(std::abs(trace.terminal->weight(1) - w) <= 1e-12);
}

TEST_CASE("pure loop trivial fixed points") {
  const auto p0 = DiscreteDistribution::from_weights({0.3, 0.3, 0.4});
  LoopConfig cfg;
  cfg.iterations = 10;

  const LoopTrace flat =
      run_pure_loop(p0, [](const Atom&) { return 2.0; }, cfg);
  for (const TraceRow& row : flat.rows) {
    CHECK(row.kl_to_ref == doctest::Approx(0.0).epsilon(1e-14));
    CHECK(row.var_exp_reward == doctest::Approx(0.0));
  }

  LoopConfig k1 = cfg;
  k1.k = 1;
  const auto inst = test::two_point_instance();
  const LoopTrace same = run_pure_loop(inst.dist, inst.reward_fn(), k1);
  for (const TraceRow& row : same.rows) {
    CHECK(row.kl_to_ref == doctest::Approx(0.0).epsilon(1e-14));
  }
}

TEST_CASE("pure loop invariants on random instances") {
  SplitMix64 rng(51);
  for (int i = 0; i < 20; ++i) {
    const auto inst = test::random_instance(rng, 6);
    LoopConfig cfg;
    cfg.k = 2 + static_cast<int>(rng() % 4);

    // Variance decays geometrically once the loop concentrates; the slowest
    // factor is the limiting transfer value of the runner-up atom. Calibrate
    // the horizon from it so the 1e-6 target is reachable per instance.
    double e_top = 0.0, rho = 0.0;
    for (double r : inst.rewards) e_top = std::max(e_top, std::exp(r));
    for (double r : inst.rewards) {
      const double e = std::exp(r);
      if (e < e_top) {
        rho = std::max(rho, cfg.k * e / (e + (cfg.k - 1) * e_top));
      }
    }
    const double budget =
        std::log(1e-9) / std::log(std::min(rho, 1.0 - 1e-3));
    cfg.iterations = std::min(20000, 60 + static_cast<int>(budget));

    const LoopTrace trace = run_pure_loop(inst.dist, inst.reward_fn(), cfg);

    for (std::size_t t = 0; t + 1 < trace.rows.size(); ++t) {
      CHECK(trace.rows[t + 1].expect_exp_reward >=
            trace.rows[t].expect_exp_reward - 1e-12);
      for (std::size_t e = 0; e < trace.eps_grid.size(); ++e) {
        CHECK(trace.rows[t + 1].prob_at_least[e] >=
              trace.rows[t].prob_at_least[e] - 1e-10);
      }
      CHECK(trace.rows[t + 1].renorm_drift <= 1e-9);
    }
    CHECK(trace.rows.back().var_exp_reward < 1e-6);

    CHECK(verify_reward_growth(trace, cfg.k).passed());
    CHECK(verify_probability_monotone(trace).passed());
    CHECK(verify_kl_convergence(trace, 1.0).passed());
  }
}

TEST_CASE("level-set weights stay proportional to the initial ones") {
  // Three atoms, two of them on the top level set.
  const auto p0 = DiscreteDistribution::from_weights({0.5, 0.2, 0.3});
  const RewardFn r = [&p0](const Atom& a) {
    const std::size_t i = p0.find(a.id);
    return i == 0 ? 0.0 : 1.0;
  };
  LoopConfig cfg;
  cfg.iterations = 40;
  const LoopTrace trace = run_pure_loop(p0, r, cfg);
  CHECK(trace.rows.back().kl_to_limit < 1e-10);
  const DiscreteDistribution& last = *trace.terminal;
  CHECK(last.weight(1) / last.weight(2) ==
        doctest::Approx(0.2 / 0.3).epsilon(1e-12));
}

TEST_CASE("monte carlo mode is deterministic and tracks the exact loop") {
  const auto inst = test::two_point_instance();
  LoopConfig cfg;
  cfg.k = 2;
  cfg.iterations = 5;
  cfg.mode = LoopMode::monte_carlo;
  cfg.mc_rounds = 200000;
  cfg.seed = 99;

  const LoopTrace a = run_pure_loop(inst.dist, inst.reward_fn(), cfg);
  const LoopTrace b = run_pure_loop(inst.dist, inst.reward_fn(), cfg);
  for (std::size_t t = 0; t < a.rows.size(); ++t) {
    CHECK(a.rows[t].expect_exp_reward == b.rows[t].expect_exp_reward);
  }

  LoopConfig exact_cfg = cfg;
  exact_cfg.mode = LoopMode::exact;
  const LoopTrace exact = run_pure_loop(inst.dist, inst.reward_fn(), exact_cfg);
  CHECK(total_variation(*a.terminal, *exact.terminal) < 0.02);
}

TEST_CASE("mixture loop: lambda 0 pins the reference") {
  const auto inst = test::two_point_instance();
  LoopConfig cfg;
  cfg.lambda = 0.0;
  cfg.iterations = 20;
  const LoopTrace trace = run_mixture_loop(inst.dist, inst.reward_fn(), cfg);
  for (const TraceRow& row : trace.rows) {
    CHECK(row.kl_to_ref == doctest::Approx(0.0).epsilon(1e-14));
  }
  CHECK(verify_kl_bound(trace, 0.0, cfg.k).passed());
}

TEST_CASE("mixture loop bounds on the frozen two-point instance") {
  const auto inst = test::two_point_instance();
  const auto r = inst.reward_fn();
  LoopConfig cfg;
  cfg.k = 2;
  cfg.lambda = 0.25;
  cfg.iterations = 100;
  const LoopTrace trace = run_mixture_loop(inst.dist, r, cfg);

  // KL cap: -log(1 - 0.25) = 0.287682...
  const double kl_cap = -std::log(0.75);
  CHECK(kl_cap == doctest::Approx(0.2876820724517809).epsilon(1e-12));
  for (const TraceRow& row : trace.rows) {
    CHECK(row.kl_to_ref <= kl_cap + 1e-9);
    CHECK(row.max_density_ratio <= 1.0 / 0.75 + 1e-9);
  }

  // Per-step reward floor: E_ref + (lambda/(1+lambda)^3) Var_ref/(2 e^{r_*}).
  const double floor25 = 2.0 + (0.25 / std::pow(1.25, 3)) * 1.0 / (2.0 * 3.0);
  for (std::size_t t = 1; t < trace.rows.size(); ++t) {
    CHECK(trace.rows[t].expect_exp_reward >= floor25 - 1e-9);
  }

  const SupportStats ref_stats = reward_stats(inst.dist, r);
  CHECK(verify_kl_bound(trace, cfg.lambda, cfg.k).passed());
  CHECK(verify_mixture_reward(trace, cfg.lambda, cfg.k, ref_stats).passed());
  CHECK(verify_probability_monotone(trace).passed());

  // lambda = 0.5 instance: frozen tail bound 2 + (0.5/2.25)/6.
  LoopConfig cfg5 = cfg;
  cfg5.lambda = 0.5;
  const LoopTrace t5 = run_mixture_loop(inst.dist, r, cfg5);
  const double step_floor = 2.0 + (0.5 / std::pow(1.5, 3)) * 1.0 / 6.0;
  CHECK(step_floor == doctest::Approx(2.0246913580246915).epsilon(1e-12));
  const double tail_floor = 2.0 + (0.5 / 2.25) * 1.0 / 6.0;
  CHECK(tail_floor == doctest::Approx(2.037037037037037).epsilon(1e-12));
  double tail_inf = 1e300;
  for (std::size_t t = t5.rows.size() / 2; t < t5.rows.size(); ++t) {
    tail_inf = std::min(tail_inf, t5.rows[t].expect_exp_reward);
  }
  CHECK(t5.rows[1].expect_exp_reward >= step_floor - 1e-9);
  CHECK(tail_inf >= tail_floor - 1e-6);
  CHECK(verify_mixture_reward(t5, 0.5, 2, ref_stats).passed());
}

TEST_CASE("mixture bounds across random instances") {
  SplitMix64 rng(61);
  for (int i = 0; i < 10; ++i) {
    const auto inst = test::random_instance(rng, 5, -2.0, 2.0, 5);
    const auto r = inst.reward_fn();
    LoopConfig cfg;
    cfg.k = 2;
    cfg.lambda = 0.25;
    cfg.iterations = 150;
    const LoopTrace trace = run_mixture_loop(inst.dist, r, cfg);
    CHECK(verify_kl_bound(trace, cfg.lambda, cfg.k).passed());
    CHECK(verify_mixture_reward(trace, cfg.lambda, cfg.k, reward_stats(inst.dist, r))
              .passed());
  }
}

TEST_CASE("kl bound verifier rejects out-of-hypothesis requests") {
  const auto inst = test::two_point_instance();
  LoopConfig cfg;
  cfg.lambda = 0.25;
  cfg.iterations = 2;
  const LoopTrace trace = run_mixture_loop(inst.dist, inst.reward_fn(), cfg);
  CHECK_THROWS_AS(verify_kl_bound(trace, 0.6, 3), std::invalid_argument);

  // In-hypothesis lambda=0.4, K=3: cap is -ln(0.2).
  LoopConfig cfg3;
  cfg3.k = 3;
  cfg3.lambda = 0.4;
  cfg3.iterations = 50;
  const LoopTrace t3 = run_mixture_loop(inst.dist, inst.reward_fn(), cfg3);
  const double cap = -std::log(1.0 - 0.4 * 2);
  CHECK(cap == doctest::Approx(1.6094379124341003).epsilon(1e-12));
  for (const TraceRow& row : t3.rows) CHECK(row.kl_to_ref <= cap + 1e-9);
  CHECK(verify_kl_bound(t3, 0.4, 3).passed());
}

TEST_CASE("verifiers are pure") {
  const auto inst = test::two_point_instance();
  LoopConfig cfg;
  cfg.iterations = 30;
  const LoopTrace trace = run_pure_loop(inst.dist, inst.reward_fn(), cfg);
  const auto a = verify_reward_growth(trace, cfg.k);
  const auto b = verify_reward_growth(trace, cfg.k);
  CHECK(a.checks == b.checks);
  CHECK(a.worst_margin == b.worst_margin);
  CHECK(a.passed() == b.passed());
}

TEST_CASE("exact runs are bitwise reproducible") {
  const auto inst = test::two_point_instance();
  LoopConfig cfg;
  cfg.iterations = 25;
  const LoopTrace a = run_pure_loop(inst.dist, inst.reward_fn(), cfg);
  const LoopTrace b = run_pure_loop(inst.dist, inst.reward_fn(), cfg);
  std::ostringstream sa, sb;
  a.write_csv(sa);
  b.write_csv(sb);
  CHECK(sa.str() == sb.str());
  CHECK(sa.str().substr(0, 2) == "t,");
}

TEST_CASE("accumulate loop constancy") {
  AccumulateConfig acc;
  acc.prefix.push_back(DiscreteDistribution::from_weights({1.0, 0.0}));
  acc.prefix.push_back(DiscreteDistribution::from_weights({0.0, 1.0}));
  acc.alphas = {1.0, 1.0};

  const AccumulateTrace even = run_accumulate_loop(acc, 20);
  CHECK(even.states.front().weight(0) == doctest::Approx(0.5));
  CHECK(even.max_deviation <= 1e-12);

  acc.alphas = {2.0, 1.0};
  const AccumulateTrace weighted = run_accumulate_loop(acc, 20);
  CHECK(weighted.states.front().weight(0) ==
        doctest::Approx(2.0 / 3.0).epsilon(1e-12));
  CHECK(weighted.states.front().weight(1) ==
        doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  CHECK(weighted.max_deviation <= 1e-12);

  AccumulateConfig single;
  single.prefix.push_back(DiscreteDistribution::from_weights({0.25, 0.75}));
  single.alphas = {1.0};
  const AccumulateTrace constant = run_accumulate_loop(single, 10);
  CHECK(constant.max_deviation <= 1e-15);

  AccumulateConfig bad;
  bad.prefix.push_back(DiscreteDistribution::from_weights({1.0}));
  bad.alphas = {0.0};
  CHECK_THROWS_AS(run_accumulate_loop(bad, 1), std::invalid_argument);
}

TEST_CASE("accumulate constancy on random prefixes") {
  SplitMix64 rng(71);
  for (int i = 0; i < 25; ++i) {
    AccumulateConfig acc;
    const int len = 1 + static_cast<int>(rng() % 4);
    for (int j = 0; j < len; ++j) {
      acc.prefix.push_back(test::random_instance(rng, 6, -1, 1, 3).dist);
      acc.alphas.push_back(uniform_unit(rng));
    }
    acc.alphas[0] += 0.1;  // keep the prefix weight positive
    acc.alpha_tail = 0.5 + uniform_unit(rng);
    CHECK(run_accumulate_loop(acc, 20).max_deviation <= 1e-12);
  }
}

TEST_CASE("rlhf equivalence") {
  const auto inst = test::two_point_instance();
  CHECK(rlhf_equivalence_check(inst.dist, inst.reward_fn(), 20).passed());

  SplitMix64 rng(81);
  for (int i = 0; i < 20; ++i) {
    const auto rnd = test::random_instance(rng);
    CHECK(rlhf_equivalence_check(rnd.dist, rnd.reward_fn(), 20).passed());
  }

  // Constant reward: tilting never moves the distribution.
  const auto p = DiscreteDistribution::from_weights({0.6, 0.4});
  CHECK(rlhf_equivalence_check(p, [](const Atom&) { return 1.0; }, 5).passed());
}

TEST_CASE("csv export shape") {
  const auto inst = test::two_point_instance();
  LoopConfig cfg;
  cfg.iterations = 3;
  cfg.eps_grid = {0.0, 0.5};
  const LoopTrace trace = run_pure_loop(inst.dist, inst.reward_fn(), cfg);
  std::ostringstream out;
  trace.write_csv(out);
  const std::string csv = out.str();
  CHECK(csv.find("prob_at_least_eps0.5") != std::string::npos);
  CHECK(csv.find("kl_to_limit") != std::string::npos);
  // Header plus one row per iterate, CRLF line ends.
  std::size_t lines = 0, pos = 0;
  while ((pos = csv.find("\r\n", pos)) != std::string::npos) {
    ++lines;
    pos += 2;
  }
  CHECK(lines == 5);
}

TEST_CASE("verifier report serializes") {
  const auto inst = test::two_point_instance();
  LoopConfig cfg;
  cfg.iterations = 10;
  const LoopTrace trace = run_pure_loop(inst.dist, inst.reward_fn(), cfg);
  const auto j = verify_reward_growth(trace, 2).to_json();
  CHECK(j.at("name") == "reward_growth");
  CHECK(j.at("passed").get<bool>());
  CHECK(j.at("checks").get<int>() > 0);
}
