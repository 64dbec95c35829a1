#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numeric>

#include <nlohmann/json.hpp>

#include "loopsim/fitters.hpp"
#include "loopsim/reward.hpp"
#include "loopsim/rng.hpp"

using namespace loopsim;

TEST_CASE("eight gaussians generator") {
  const SampleSet s = gen_eight_gaussians(8000, 2.0, 0.2, 7);
  REQUIRE(s.size() == 8000);
  REQUIRE(s.dim == 2);
  REQUIRE(s.num_classes() == 8);

  // ~1000 per component within 5 sigma of the multinomial band.
  std::vector<int> counts(8, 0);
  for (int l : s.labels) ++counts[static_cast<std::size_t>(l)];
  const double sigma = std::sqrt(8000.0 * (1.0 / 8) * (7.0 / 8));
  for (int c : counts) CHECK(std::abs(c - 1000.0) <= 5.0 * sigma);

  // sigma = 0 puts every point exactly on its center.
  const SampleSet exact = gen_eight_gaussians(64, 2.0, 0.0, 7);
  const auto centers = eight_gaussian_centers(2.0);
  for (std::size_t i = 0; i < exact.size(); ++i) {
    const auto pt = exact.point(i);
    const auto& c = centers[static_cast<std::size_t>(exact.label(i))];
    CHECK(pt[0] == doctest::Approx(c[0]));
    CHECK(pt[1] == doctest::Approx(c[1]));
  }

  // Seed repeatability.
  const SampleSet again = gen_eight_gaussians(100, 2.0, 0.2, 9);
  const SampleSet again2 = gen_eight_gaussians(100, 2.0, 0.2, 9);
  CHECK(again.data == again2.data);
  CHECK(again.labels == again2.labels);
}

TEST_CASE("two moons generator") {
  const SampleSet clean = gen_two_moons(1000, 0.0, 3);
  for (std::size_t i = 0; i < clean.size(); ++i) {
    const auto pt = clean.point(i);
    if (clean.label(i) == 0) {
      CHECK(std::hypot(pt[0], pt[1]) == doctest::Approx(1.0).epsilon(1e-12));
      CHECK(pt[1] >= -1e-12);
    } else {
      CHECK(std::hypot(pt[0] - 1.0, pt[1] - 0.5) ==
            doctest::Approx(1.0).epsilon(1e-12));
      CHECK(pt[1] <= 0.5 + 1e-12);
    }
  }

  const SampleSet noisy = gen_two_moons(4000, 0.1, 4);
  int moon0 = 0;
  for (int l : noisy.labels) moon0 += l == 0 ? 1 : 0;
  CHECK(std::abs(moon0 - 2000.0) <= 5.0 * std::sqrt(4000.0 * 0.25));
}

TEST_CASE("sample set csv round trip") {
  const SampleSet s = gen_two_moons(50, 0.1, 5);
  const auto path = std::filesystem::temp_directory_path() / "loopsim_pts.csv";
  s.write_csv(path);
  const SampleSet back = SampleSet::read_csv(path);
  REQUIRE(back.size() == s.size());
  CHECK(back.labels == s.labels);
  for (std::size_t i = 0; i < s.data.size(); ++i) {
    CHECK(back.data[i] == doctest::Approx(s.data[i]).epsilon(1e-15));
  }
  std::filesystem::remove(path);
}

TEST_CASE("histogram fit concentrates to the sampled distribution") {
  // Ground truth: random bin masses on an 8x8 grid.
  HistogramFitter spec;
  spec.bins_per_axis = 8;
  spec.bounds = {{0.0, 1.0}, {0.0, 1.0}};

  SplitMix64 rng(11);
  SampleSet seedpts;
  seedpts.dim = 2;
  for (int i = 0; i < 4000; ++i) {
    seedpts.data.push_back(uniform_unit(rng));
    seedpts.data.push_back(std::pow(uniform_unit(rng), 2.0));
  }
  const auto truth = std::get<HistogramModel>(fit(spec, seedpts));

  double prev_tv = 1.0;
  for (std::size_t n : {1000u, 10000u, 100000u}) {
    const SampleSet draw = truth.sample(n, 21);
    const auto refit = std::get<HistogramModel>(fit(spec, draw));
    const double tv = total_variation(refit.distribution, truth.distribution);
    CHECK(tv < prev_tv);
    prev_tv = tv;
  }
  CHECK(prev_tv < 0.02);
}

TEST_CASE("histogram of uniform samples is near uniform") {
  HistogramFitter spec;
  spec.bins_per_axis = 8;
  spec.bounds = {{0.0, 1.0}, {0.0, 1.0}};
  SplitMix64 rng(77);
  SampleSet s;
  s.dim = 2;
  const std::size_t n = 200000;
  for (std::size_t i = 0; i < 2 * n; ++i) s.data.push_back(uniform_unit(rng));
  const auto model = std::get<HistogramModel>(fit(spec, s));
  const double expected = 1.0 / 64.0;
  const double band = 5.0 * std::sqrt(expected * (1 - expected) / n);
  for (const Atom& a : model.distribution.atoms()) {
    CHECK(std::abs(a.weight - expected) <= band);
  }
}

TEST_CASE("histogram clamps out-of-box points and counts them") {
  HistogramFitter spec;
  spec.bins_per_axis = 4;
  spec.bounds = {{0.0, 1.0}};
  SampleSet s;
  s.dim = 1;
  s.data = {0.5, 2.0, -1.0, 0.25};
  const auto model = std::get<HistogramModel>(fit(spec, s));
  CHECK(model.clamped == 2);
  CHECK(model.distribution.size() == 4);

  HistogramFitter bad = spec;
  bad.bins_per_axis = 1;
  CHECK_THROWS_AS(fit(bad, s), std::invalid_argument);
}

TEST_CASE("single-component gmm is the sample moment fit") {
  SplitMix64 rng(31);
  SampleSet s;
  s.dim = 2;
  const std::size_t n = 2000;
  double sx = 0, sy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double x = 1.0 + 0.7 * normal_unit(rng);
    const double y = -2.0 + 1.3 * normal_unit(rng);
    s.data.push_back(x);
    s.data.push_back(y);
    sx += x;
    sy += y;
  }
  GmmFitter g;
  g.components = 1;
  g.em_iterations = 3;
  g.cov_reg = 0.0;
  const auto model = std::get<GmmModel>(fit(g, s));
  CHECK(model.means[0][0] == doctest::Approx(sx / n).epsilon(1e-9));
  CHECK(model.means[0][1] == doctest::Approx(sy / n).epsilon(1e-9));

  double sxx = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = s.data[2 * i] - sx / n;
    sxx += d * d;
  }
  CHECK(model.covs[0][0] == doctest::Approx(sxx / n).epsilon(1e-9));
}

TEST_CASE("gmm em log-likelihood never decreases") {
  const SampleSet s = gen_eight_gaussians(2000, 2.0, 0.3, 13);
  GmmFitter g;
  g.components = 8;
  g.em_iterations = 60;
  g.seed = 5;
  const auto model = std::get<GmmModel>(fit(g, s));
  REQUIRE(model.log_likelihood.size() == 60);
  for (std::size_t i = 0; i + 1 < model.log_likelihood.size(); ++i) {
    CHECK(model.log_likelihood[i + 1] >= model.log_likelihood[i] - 1e-9);
  }

  // Deterministic given the seed.
  const auto model2 = std::get<GmmModel>(fit(g, s));
  CHECK(model.log_likelihood == model2.log_likelihood);

  // Degenerate data is rejected.
  SampleSet flat;
  flat.dim = 2;
  for (int i = 0; i < 10; ++i) {
    flat.data.push_back(1.0);
    flat.data.push_back(2.0);
  }
  CHECK_THROWS_AS(fit(g, flat), std::invalid_argument);
}

TEST_CASE("gmm sampling matches fitted moments") {
  const SampleSet s = gen_eight_gaussians(4000, 2.0, 0.25, 17);
  GmmFitter g;
  g.components = 8;
  g.em_iterations = 50;
  g.seed = 2;
  const auto model = fit(g, s);
  const SampleSet draws = sample_from(model, 20000, 3);
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < draws.size(); ++i) {
    mx += draws.point(i)[0];
    my += draws.point(i)[1];
  }
  // Ring of centers: mean near the origin.
  CHECK(std::abs(mx / draws.size()) < 0.2);
  CHECK(std::abs(my / draws.size()) < 0.2);

  const auto j = std::get<GmmModel>(model).to_json();
  CHECK(j.at("weights").size() == 8);
}

TEST_CASE("sample loop with constant reward keeps class proportions") {
  const SampleSet real = gen_eight_gaussians(4000, 2.0, 0.25, 19);
  HistogramFitter h;
  h.bins_per_axis = 48;
  h.bounds = {{-3.0, 3.0}, {-3.0, 3.0}};

  SampleLoopConfig cfg;
  cfg.k = 2;
  cfg.n_gen = 8000;
  cfg.iterations = 4;
  cfg.seed = 23;
  cfg.labeler = nearest_center_labeler(eight_gaussian_centers(2.0));
  cfg.num_classes = 8;

  const CoordRewardFn flat = [](std::span<const double>) { return 1.0; };
  const LoopTrace trace = run_sample_loop(real, h, flat, cfg);
  REQUIRE(trace.rows.size() == 5);

  // Proportions stay inside 3-sigma multinomial bands of the initial fit.
  const auto& first = trace.rows.front().class_props;
  const double band =
      3.0 * std::sqrt(0.125 * 0.875 / (cfg.n_gen / cfg.k));
  for (const TraceRow& row : trace.rows) {
    REQUIRE(row.class_props.size() == 8);
    for (std::size_t c = 0; c < 8; ++c) {
      CHECK(std::abs(row.class_props[c] - first[c]) <= 3.0 * band);
    }
  }

  // Determinism: same seed, same trace.
  const LoopTrace again = run_sample_loop(real, h, flat, cfg);
  for (std::size_t t = 0; t < trace.rows.size(); ++t) {
    CHECK(trace.rows[t].expect_exp_reward ==
          again.rows[t].expect_exp_reward);
    CHECK(trace.rows[t].class_props == again.rows[t].class_props);
  }

  SampleLoopConfig bad = cfg;
  bad.n_gen = 1;
  CHECK_THROWS_AS(run_sample_loop(real, h, flat, bad), std::invalid_argument);
}

TEST_CASE("two-moons pure loop drains the disfavored moon monotonically") {
  const SampleSet real = gen_two_moons(3000, 0.1, 41);
  TrainOptions topts;
  topts.epochs = 120;
  topts.seed = 6;
  auto clf = std::make_shared<Classifier>(train_classifier(real, topts));
  REQUIRE(clf->train_accuracy() >= 0.95);
  const RewardFunction rf(ClassProbReward{clf, 0, 5.0});
  const CoordRewardFn reward = [&rf](std::span<const double> p) {
    return rf.at(p);
  };

  HistogramFitter h;
  h.bins_per_axis = 64;
  h.bounds = {{-1.5, 2.5}, {-1.0, 1.5}};

  SampleLoopConfig cfg;
  cfg.k = 2;
  cfg.n_gen = 8000;
  cfg.iterations = 4;
  cfg.seed = 9;
  cfg.labeler = [clf](std::span<const double> p) { return clf->predict(p); };
  cfg.num_classes = 2;

  const LoopTrace trace = run_sample_loop(real, h, reward, cfg);
  for (std::size_t t = 1; t < trace.rows.size(); ++t) {
    CHECK(trace.rows[t].class_props[0] > trace.rows[t - 1].class_props[0]);
  }
  CHECK(trace.rows.back().class_props[0] > 0.8);
}

TEST_CASE("population gaussian loop closed forms") {
  const GaussianParams data{{0.0}, {1.0}, 1};
  const GaussianParams theta0{{1.0}, {1.0}, 1};

  // mu_data=0, mu_0=1, lambda=1: mu_t = 2^{-t}.
  const auto rows = gaussian_mle_loop(data, theta0, 1.0, 5);
  REQUIRE(rows.size() == 6);
  CHECK(rows[3].theta.mean[0] == doctest::Approx(0.125).epsilon(1e-15));
  CHECK(rows[5].theta.mean[0] == doctest::Approx(0.03125).epsilon(1e-15));

  // lambda = 0: one step lands on theta_*.
  const auto jump = gaussian_mle_loop(data, theta0, 0.0, 2);
  CHECK(jump[1].theta.mean[0] == doctest::Approx(0.0));
  CHECK(jump[1].theta.cov[0] == doctest::Approx(1.0));
  CHECK(jump[1].kl_to_target == doctest::Approx(0.0).epsilon(1e-12));

  // Per-step mean-error contraction is exactly lambda / (1 + lambda).
  for (double lambda : {0.5, 1.0, 2.0}) {
    const auto trace = gaussian_mle_loop(data, theta0, lambda, 30);
    const double rate = lambda / (1.0 + lambda);
    for (std::size_t t = 1; t < trace.size(); ++t) {
      if (trace[t - 1].mean_err_norm < 1e-200) break;
      CHECK(std::abs(trace[t].mean_err_norm / trace[t - 1].mean_err_norm -
                     rate) <= 1e-12);
    }
  }

  GaussianParams bad{{0.0}, {-1.0}, 1};
  CHECK_THROWS_AS(gaussian_mle_loop(bad, theta0, 1.0, 1),
                  std::invalid_argument);
}

TEST_CASE("population gaussian loop log-KL slope") {
  const GaussianParams data{{0.0, 0.0}, {1.0, 0.2, 0.2, 0.8}, 2};
  const GaussianParams theta0{{1.0, -0.5}, {1.0, 0.2, 0.2, 0.8}, 2};
  for (double lambda : {0.5, 1.0, 2.0}) {
    const auto rows = gaussian_mle_loop(data, theta0, lambda, 30);
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    int n = 0;
    for (const auto& row : rows) {
      if (row.t < 3 || row.kl_to_target <= 0.0) continue;
      sx += row.t;
      sy += std::log(row.kl_to_target);
      sxx += static_cast<double>(row.t) * row.t;
      sxy += row.t * std::log(row.kl_to_target);
      ++n;
    }
    const double slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    const double target = 2.0 * std::log(lambda / (1.0 + lambda));
    CHECK(std::abs(slope - target) <= 0.02 * std::abs(target));
  }
}

TEST_CASE("misspecified moments come from the 1d mixture helper") {
  const GaussianParams m = mixture1d_moments(0.5, -2.0, 0.5, 2.0, 0.5);
  CHECK(m.mean[0] == doctest::Approx(0.0));
  CHECK(m.cov[0] == doctest::Approx(4.25));  // 0.25 + 4
  CHECK_THROWS_AS(mixture1d_moments(1.5, 0, 1, 0, 1), std::invalid_argument);
}

TEST_CASE("sampled gaussian loop approaches the target") {
  const GaussianParams data{{0.0}, {1.0}, 1};
  const GaussianParams theta0{{2.0}, {3.0}, 1};
  const auto rows = gaussian_mle_loop_sampled(data, theta0, 1.0, 25, 20000, 5);
  CHECK(rows.back().mean_err_norm < 0.05);
  CHECK(std::abs(rows.back().theta.cov[0] - 1.0) < 0.1);
}

TEST_CASE("predicted stability rate") {
  CHECK(predicted_rate({1.0, 0.0, 0.0, 1.0}) == doctest::Approx(0.5));
  CHECK(predicted_rate({1.0, 0.0, 0.0, 3.0}) == doctest::Approx(0.75));
  CHECK(predicted_rate({1.0, 1.0, 0.1, 1.0}) ==
        doctest::Approx(1.1 / 1.9).epsilon(1e-12));

  // Hypothesis violations.
  CHECK_THROWS_AS(predicted_rate({1.0, 1.0, 0.1, 5.0}), std::invalid_argument);
  CHECK_THROWS_AS(predicted_rate({1.0, 2.0, 0.6, 0.1}), std::invalid_argument);
  CHECK_THROWS_AS(predicted_rate({-1.0, 0.0, 0.0, 1.0}), std::invalid_argument);
}
