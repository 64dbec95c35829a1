#include "loopsim/fitters.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "loopsim/curation.hpp"
#include "loopsim/rng.hpp"

namespace loopsim {

namespace {

using Eigen::MatrixXd;
using Eigen::VectorXd;

MatrixXd to_matrix(const std::vector<double>& flat, int d) {
  MatrixXd m(d, d);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) m(i, j) = flat[static_cast<std::size_t>(i * d + j)];
  return m;
}

std::vector<double> to_flat(const MatrixXd& m) {
  std::vector<double> flat(static_cast<std::size_t>(m.rows() * m.cols()));
  for (int i = 0; i < m.rows(); ++i)
    for (int j = 0; j < m.cols(); ++j)
      flat[static_cast<std::size_t>(i * m.cols() + j)] = m(i, j);
  return flat;
}

VectorXd to_vector(const std::vector<double>& v) {
  return Eigen::Map<const VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

Eigen::LLT<MatrixXd> checked_llt(const MatrixXd& cov, const char* who) {
  Eigen::LLT<MatrixXd> llt(cov);
  if (llt.info() != Eigen::Success) {
    throw std::invalid_argument(std::string(who) +
                                ": covariance is not positive definite");
  }
  return llt;
}

}  // namespace

// --- histogram ---------------------------------------------------------------

namespace {

struct Grid {
  std::vector<std::pair<double, double>> bounds;
  int bins = 0;
  int dim = 0;

  double width(int axis) const {
    return (bounds[static_cast<std::size_t>(axis)].second -
            bounds[static_cast<std::size_t>(axis)].first) /
           bins;
  }
  std::size_t cells() const {
    std::size_t total = 1;
    for (int a = 0; a < dim; ++a) total *= static_cast<std::size_t>(bins);
    return total;
  }
  // Returns the flat cell index, clamping out-of-box coordinates.
  std::size_t locate(std::span<const double> pt, bool* clamped) const {
    std::size_t idx = 0;
    for (int a = 0; a < dim; ++a) {
      const auto [lo, hi] = bounds[static_cast<std::size_t>(a)];
      int b = static_cast<int>((pt[static_cast<std::size_t>(a)] - lo) /
                               (hi - lo) * bins);
      if (b < 0 || b >= bins) {
        *clamped = true;
        b = std::clamp(b, 0, bins - 1);
      }
      idx = idx * static_cast<std::size_t>(bins) + static_cast<std::size_t>(b);
    }
    return idx;
  }
  std::vector<double> center(std::size_t flat) const {
    std::vector<double> c(static_cast<std::size_t>(dim));
    for (int a = dim - 1; a >= 0; --a) {
      const std::size_t b = flat % static_cast<std::size_t>(bins);
      flat /= static_cast<std::size_t>(bins);
      c[static_cast<std::size_t>(a)] =
          bounds[static_cast<std::size_t>(a)].first +
          (static_cast<double>(b) + 0.5) * width(a);
    }
    return c;
  }
};

Grid make_grid(const HistogramFitter& spec, int dim) {
  if (spec.bins_per_axis < 2) {
    throw std::invalid_argument("histogram needs at least 2 bins per axis");
  }
  if (static_cast<int>(spec.bounds.size()) != dim) {
    throw std::invalid_argument("histogram bounds do not match data dimension");
  }
  for (const auto& [lo, hi] : spec.bounds) {
    if (!(hi > lo)) throw std::invalid_argument("empty histogram bound");
  }
  return Grid{spec.bounds, spec.bins_per_axis, dim};
}

}  // namespace

FittedModel fit(const GenerativeFitter& fitter, const SampleSet& samples) {
  if (samples.size() == 0) throw std::invalid_argument("no samples to fit");

  if (const auto* h = std::get_if<HistogramFitter>(&fitter)) {
    const Grid grid = make_grid(*h, samples.dim);
    std::vector<double> counts(grid.cells(), 0.0);
    std::size_t clamped = 0;
    for (std::size_t i = 0; i < samples.size(); ++i) {
      bool was_clamped = false;
      counts[grid.locate(samples.point(i), &was_clamped)] += 1.0;
      clamped += was_clamped ? 1 : 0;
    }
    std::vector<Atom> atoms;
    atoms.reserve(counts.size());
    for (std::size_t c = 0; c < counts.size(); ++c) {
      atoms.push_back({"b" + std::to_string(c), grid.center(c), counts[c]});
    }
    HistogramModel model{*h, DiscreteDistribution(std::move(atoms)), clamped};
    return model;
  }

  const auto& g = std::get<GmmFitter>(fitter);
  if (g.components < 1) throw std::invalid_argument("need >= 1 components");
  if (samples.size() < static_cast<std::size_t>(g.components)) {
    throw std::invalid_argument("fewer samples than mixture components");
  }

  const int d = samples.dim;
  const std::size_t n = samples.size();
  const auto x = [&](std::size_t i) {
    return Eigen::Map<const VectorXd>(samples.point(i).data(), d);
  };

  VectorXd data_mean = VectorXd::Zero(d);
  for (std::size_t i = 0; i < n; ++i) data_mean += x(i);
  data_mean /= static_cast<double>(n);
  MatrixXd data_cov = MatrixXd::Zero(d, d);
  for (std::size_t i = 0; i < n; ++i) {
    const VectorXd c = x(i) - data_mean;
    data_cov += c * c.transpose();
  }
  data_cov /= static_cast<double>(n);
  if (data_cov.trace() <= 0.0) {
    throw std::invalid_argument("degenerate data: all points identical");
  }

  const int m = g.components;
  std::vector<double> weights(static_cast<std::size_t>(m),
                              1.0 / static_cast<double>(m));
  std::vector<VectorXd> means;
  std::vector<MatrixXd> covs(static_cast<std::size_t>(m),
                             data_cov + g.cov_reg * MatrixXd::Identity(d, d));
  SplitMix64 rng(derive_seed(g.seed, 0x6e11));
  for (int c = 0; c < m; ++c) {
    means.push_back(x(rng() % n));
  }

  GmmModel model;
  model.dim = d;
  MatrixXd resp(static_cast<Eigen::Index>(n), m);
  const double log2pi = std::log(2.0 * M_PI);
  for (int iter = 0; iter < g.em_iterations; ++iter) {
    // E step with the log-sum-exp trick; accumulates the data log-likelihood.
    double loglik = 0.0;
    std::vector<Eigen::LLT<MatrixXd>> llts;
    std::vector<double> logdets;
    for (int c = 0; c < m; ++c) {
      llts.push_back(checked_llt(covs[static_cast<std::size_t>(c)], "gmm"));
      double ld = 0.0;
      for (int j = 0; j < d; ++j) {
        ld += 2.0 * std::log(llts.back().matrixLLT()(j, j));
      }
      logdets.push_back(ld);
    }
    for (std::size_t i = 0; i < n; ++i) {
      double best = -std::numeric_limits<double>::infinity();
      for (int c = 0; c < m; ++c) {
        const VectorXd diff = x(i) - means[static_cast<std::size_t>(c)];
        const double quad =
            diff.dot(llts[static_cast<std::size_t>(c)].solve(diff));
        const double lp = std::log(weights[static_cast<std::size_t>(c)]) -
                          0.5 * (d * log2pi + logdets[static_cast<std::size_t>(c)] + quad);
        resp(static_cast<Eigen::Index>(i), c) = lp;
        best = std::max(best, lp);
      }
      double total = 0.0;
      for (int c = 0; c < m; ++c) {
        total += std::exp(resp(static_cast<Eigen::Index>(i), c) - best);
      }
      loglik += best + std::log(total);
      for (int c = 0; c < m; ++c) {
        resp(static_cast<Eigen::Index>(i), c) =
            std::exp(resp(static_cast<Eigen::Index>(i), c) - best) / total;
      }
    }
    model.log_likelihood.push_back(loglik);

    // M step.
    for (int c = 0; c < m; ++c) {
      const double nc = resp.col(c).sum();
      weights[static_cast<std::size_t>(c)] = nc / static_cast<double>(n);
      VectorXd mu = VectorXd::Zero(d);
      for (std::size_t i = 0; i < n; ++i) {
        mu += resp(static_cast<Eigen::Index>(i), c) * x(i);
      }
      mu /= nc;
      MatrixXd cov = MatrixXd::Zero(d, d);
      for (std::size_t i = 0; i < n; ++i) {
        const VectorXd diff = x(i) - mu;
        cov += resp(static_cast<Eigen::Index>(i), c) * diff * diff.transpose();
      }
      cov /= nc;
      means[static_cast<std::size_t>(c)] = mu;
      covs[static_cast<std::size_t>(c)] =
          cov + g.cov_reg * MatrixXd::Identity(d, d);
    }
  }

  model.weights = weights;
  for (int c = 0; c < m; ++c) {
    model.means.push_back(std::vector<double>(
        means[static_cast<std::size_t>(c)].data(),
        means[static_cast<std::size_t>(c)].data() + d));
    model.covs.push_back(to_flat(covs[static_cast<std::size_t>(c)]));
  }
  return model;
}

SampleSet HistogramModel::sample(std::size_t n, std::uint64_t seed) const {
  const Grid grid = make_grid(spec, distribution.coord_dim());
  std::vector<double> cumulative(distribution.size());
  double running = 0.0;
  for (std::size_t i = 0; i < distribution.size(); ++i) {
    running += distribution.weight(i);
    cumulative[i] = running;
  }
  cumulative.back() = 1.0;

  SampleSet out;
  out.dim = distribution.coord_dim();
  out.data.reserve(n * static_cast<std::size_t>(out.dim));
  SplitMix64 rng(derive_seed(seed, 0x415));
  for (std::size_t i = 0; i < n; ++i) {
    const double u = uniform_unit(rng);
    const std::size_t cell = static_cast<std::size_t>(
        std::upper_bound(cumulative.begin(), cumulative.end(), u) -
        cumulative.begin());
    const auto& center = distribution.atom(cell).coords;
    for (int a = 0; a < out.dim; ++a) {
      const double jitter = (uniform_unit(rng) - 0.5) * grid.width(a);
      out.data.push_back(center[static_cast<std::size_t>(a)] + jitter);
    }
  }
  return out;
}

SampleSet GmmModel::sample(std::size_t n, std::uint64_t seed) const {
  const int m = static_cast<int>(weights.size());
  std::vector<double> cumulative(weights.size());
  std::partial_sum(weights.begin(), weights.end(), cumulative.begin());
  cumulative.back() = 1.0;
  std::vector<MatrixXd> chols;
  for (int c = 0; c < m; ++c) {
    chols.push_back(
        checked_llt(to_matrix(covs[static_cast<std::size_t>(c)], dim), "gmm sample")
            .matrixL());
  }

  SampleSet out;
  out.dim = dim;
  out.data.reserve(n * static_cast<std::size_t>(dim));
  SplitMix64 rng(derive_seed(seed, 0x96e));
  VectorXd z(dim);
  for (std::size_t i = 0; i < n; ++i) {
    const double u = uniform_unit(rng);
    const std::size_t c = static_cast<std::size_t>(
        std::upper_bound(cumulative.begin(), cumulative.end(), u) -
        cumulative.begin());
    for (int j = 0; j < dim; ++j) z(j) = normal_unit(rng);
    const VectorXd pt = to_vector(means[c]) + chols[c] * z;
    for (int j = 0; j < dim; ++j) out.data.push_back(pt(j));
  }
  return out;
}

nlohmann::json GmmModel::to_json() const {
  return nlohmann::json{{"dim", dim},
                        {"weights", weights},
                        {"means", means},
                        {"covs", covs},
                        {"log_likelihood", log_likelihood}};
}

SampleSet sample_from(const FittedModel& model, std::size_t n,
                      std::uint64_t seed) {
  return std::visit([&](const auto& m) { return m.sample(n, seed); }, model);
}

// --- sample loop ---------------------------------------------------------------

namespace {

TraceRow measure_model(int t, const FittedModel& model,
                       const CoordRewardFn& reward,
                       const SampleLoopConfig& cfg, std::uint64_t eval_seed) {
  TraceRow row;
  row.t = t;

  auto in_ball = [&](std::span<const double> pt) {
    const auto& [center, radius] = *cfg.ball;
    double sq = 0.0;
    for (std::size_t a = 0; a < center.size(); ++a) {
      const double d = pt[a] - center[a];
      sq += d * d;
    }
    return sq <= radius * radius;
  };

  if (const auto* h = std::get_if<HistogramModel>(&model)) {
    // Exact statistics over the fitted bin distribution.
    const DiscreteDistribution& dist = h->distribution;
    const RewardFn r_atom = [&reward](const Atom& a) { return reward(a.coords); };
    const SupportStats st = reward_stats(dist, r_atom);
    row.expect_exp_reward = st.expect_exp_reward;
    row.var_exp_reward = st.var_exp_reward;
    row.essential_sup = st.essential_sup;
    row.mean_reward = mean_reward(dist, r_atom);
    if (cfg.ball) {
      double mass = 0.0;
      for (const Atom& a : dist.atoms()) {
        if (in_ball(a.coords)) mass += a.weight;
      }
      row.ball_mass = mass;
    }
    if (cfg.labeler && cfg.num_classes > 0) {
      row.class_props.assign(static_cast<std::size_t>(cfg.num_classes), 0.0);
      for (const Atom& a : dist.atoms()) {
        if (a.weight > 0.0) {
          row.class_props[static_cast<std::size_t>(cfg.labeler(a.coords))] +=
              a.weight;
        }
      }
    }
    return row;
  }

  // GMM: estimate from a fixed-size evaluation sample.
  const std::size_t n_eval = 10000;
  const SampleSet pts = sample_from(model, n_eval, eval_seed);
  std::vector<double> rewards(n_eval);
  double r_max = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < n_eval; ++i) {
    rewards[i] = reward(pts.point(i));
    r_max = std::max(r_max, rewards[i]);
  }
  double s1 = 0.0, mean_r = 0.0;
  for (double r : rewards) {
    s1 += std::exp(r - r_max);
    mean_r += r;
  }
  s1 /= static_cast<double>(n_eval);
  double central = 0.0;
  for (double r : rewards) {
    const double d = std::exp(r - r_max) - s1;
    central += d * d;
  }
  central /= static_cast<double>(n_eval);
  row.expect_exp_reward = std::exp(r_max) * s1;
  row.var_exp_reward = std::exp(2.0 * r_max) * central;
  row.essential_sup = r_max;
  row.mean_reward = mean_r / static_cast<double>(n_eval);
  if (cfg.ball) {
    std::size_t hits = 0;
    for (std::size_t i = 0; i < n_eval; ++i) {
      hits += in_ball(pts.point(i)) ? 1 : 0;
    }
    row.ball_mass = static_cast<double>(hits) / static_cast<double>(n_eval);
  }
  if (cfg.labeler && cfg.num_classes > 0) {
    row.class_props.assign(static_cast<std::size_t>(cfg.num_classes), 0.0);
    for (std::size_t i = 0; i < n_eval; ++i) {
      row.class_props[static_cast<std::size_t>(cfg.labeler(pts.point(i)))] +=
          1.0 / static_cast<double>(n_eval);
    }
  }
  return row;
}

GenerativeFitter reseeded(const GenerativeFitter& fitter, std::uint64_t seed) {
  if (const auto* g = std::get_if<GmmFitter>(&fitter)) {
    GmmFitter copy = *g;
    copy.seed = seed;
    return copy;
  }
  return fitter;
}

}  // namespace

LoopTrace run_sample_loop(const SampleSet& real, const GenerativeFitter& fitter,
                          const CoordRewardFn& reward,
                          const SampleLoopConfig& cfg) {
  if (cfg.k < 1) throw std::invalid_argument("need k >= 1");
  if (cfg.n_gen < static_cast<std::size_t>(cfg.k)) {
    throw std::invalid_argument("n_gen must be at least k");
  }
  if (std::isfinite(cfg.lambda) && cfg.lambda < 0.0) {
    throw std::invalid_argument("lambda must be >= 0 or infinite");
  }

  FittedModel model = fit(reseeded(fitter, derive_seed(cfg.seed, 0, 3)), real);
  LoopTrace trace;
  trace.rows.push_back(
      measure_model(0, model, reward, cfg, derive_seed(cfg.seed, 0, 4)));

  const std::size_t pools = cfg.n_gen / static_cast<std::size_t>(cfg.k);
  std::vector<double> pool_rewards(static_cast<std::size_t>(cfg.k));
  for (int t = 1; t <= cfg.iterations; ++t) {
    const SampleSet gen =
        sample_from(model, cfg.n_gen, derive_seed(cfg.seed, static_cast<std::uint64_t>(t), 1));
    SplitMix64 curation_rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(t), 2));

    SampleSet curated;
    curated.dim = gen.dim;
    const std::size_t keep =
        std::isfinite(cfg.lambda)
            ? std::min(pools, static_cast<std::size_t>(cfg.lambda *
                                                       static_cast<double>(real.size())))
            : pools;
    for (std::size_t pool = 0; pool < keep; ++pool) {
      for (int j = 0; j < cfg.k; ++j) {
        pool_rewards[static_cast<std::size_t>(j)] =
            reward(gen.point(pool * static_cast<std::size_t>(cfg.k) +
                             static_cast<std::size_t>(j)));
      }
      const std::size_t pick = bt_select_index(pool_rewards, curation_rng);
      curated.data.insert(
          curated.data.end(),
          gen.point(pool * static_cast<std::size_t>(cfg.k) + pick).begin(),
          gen.point(pool * static_cast<std::size_t>(cfg.k) + pick).end());
    }

    SampleSet train;
    train.dim = real.dim;
    if (std::isfinite(cfg.lambda)) {
      train.data = real.data;
      train.data.insert(train.data.end(), curated.data.begin(),
                        curated.data.end());
    } else {
      train.data = curated.data;
    }
    model = fit(reseeded(fitter, derive_seed(cfg.seed, static_cast<std::uint64_t>(t), 3)),
                train);
    trace.rows.push_back(measure_model(t, model, reward, cfg,
                                       derive_seed(cfg.seed, static_cast<std::uint64_t>(t), 4)));
  }

  if (const auto* h = std::get_if<HistogramModel>(&model)) {
    trace.terminal = h->distribution;
  }
  return trace;
}

LabelerFn nearest_center_labeler(std::vector<std::array<double, 2>> centers) {
  return [centers = std::move(centers)](std::span<const double> pt) {
    int best = 0;
    double best_sq = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < centers.size(); ++c) {
      const double dx = pt[0] - centers[c][0];
      const double dy = pt[1] - centers[c][1];
      const double sq = dx * dx + dy * dy;
      if (sq < best_sq) {
        best_sq = sq;
        best = static_cast<int>(c);
      }
    }
    return best;
  };
}

// --- population Gaussian loop ---------------------------------------------------

namespace {

double gaussian_kl(const VectorXd& mu_a, const MatrixXd& cov_a,
                   const VectorXd& mu_b, const MatrixXd& cov_b) {
  // KL(N_a || N_b)
  const int d = static_cast<int>(mu_a.size());
  const Eigen::LLT<MatrixXd> llt_b = checked_llt(cov_b, "kl");
  const Eigen::LLT<MatrixXd> llt_a = checked_llt(cov_a, "kl");
  double logdet_a = 0.0, logdet_b = 0.0;
  for (int j = 0; j < d; ++j) {
    logdet_a += 2.0 * std::log(llt_a.matrixLLT()(j, j));
    logdet_b += 2.0 * std::log(llt_b.matrixLLT()(j, j));
  }
  const VectorXd diff = mu_b - mu_a;
  const double trace_term = llt_b.solve(cov_a).trace();
  const double quad = diff.dot(llt_b.solve(diff));
  return 0.5 * (trace_term + quad - d + logdet_b - logdet_a);
}

GaussianLoopRow make_gauss_row(int t, const VectorXd& mu, const MatrixXd& cov,
                               const VectorXd& mu_star, const MatrixXd& cov_star) {
  GaussianLoopRow row;
  row.t = t;
  row.theta.dim = static_cast<int>(mu.size());
  row.theta.mean.assign(mu.data(), mu.data() + mu.size());
  row.theta.cov = to_flat(cov);
  row.kl_to_target = gaussian_kl(mu_star, cov_star, mu, cov);
  row.mean_err_norm = (mu - mu_star).norm();
  return row;
}

// -m - log(1 - m), the per-eigenvalue covariance penalty in
// KL(N_* || N_t); the series keeps full precision when m is tiny.
double cov_penalty(double m) {
  if (std::abs(m) < 1e-4) {
    return m * m * (0.5 + m * (1.0 / 3.0 + m * 0.25));
  }
  return -m - std::log1p(-m);
}

// KL(N(mu_*, S_*) || N(mu_* + dmu, S_* + D)) evaluated from the errors, so
// divergences far below machine epsilon of the O(1) formula stay accurate.
double gaussian_kl_from_errors(const VectorXd& dmu, const MatrixXd& delta,
                               const MatrixXd& cov_star) {
  const MatrixXd cov = cov_star + delta;
  const Eigen::LLT<MatrixXd> llt = checked_llt(cov, "kl");
  const MatrixXd l_inv =
      llt.matrixL().solve(MatrixXd::Identity(cov.rows(), cov.cols()));
  const MatrixXd whitened = l_inv * delta * l_inv.transpose();
  Eigen::SelfAdjointEigenSolver<MatrixXd> eig(whitened);
  double kl = 0.0;
  for (Eigen::Index i = 0; i < eig.eigenvalues().size(); ++i) {
    kl += cov_penalty(eig.eigenvalues()(i));
  }
  kl += dmu.dot(llt.solve(dmu));
  return 0.5 * kl;
}

}  // namespace

GaussianParams mixture1d_moments(double w1, double m1, double s1, double m2,
                                 double s2) {
  if (!(w1 >= 0.0 && w1 <= 1.0)) {
    throw std::invalid_argument("mixture weight must lie in [0, 1]");
  }
  const double w2 = 1.0 - w1;
  const double mean = w1 * m1 + w2 * m2;
  const double var = w1 * (s1 * s1 + (m1 - mean) * (m1 - mean)) +
                     w2 * (s2 * s2 + (m2 - mean) * (m2 - mean));
  return GaussianParams{{mean}, {var}, 1};
}

std::vector<GaussianLoopRow> gaussian_mle_loop(const GaussianParams& data,
                                               const GaussianParams& theta0,
                                               double lambda, int iterations) {
  if (data.dim != theta0.dim || data.dim < 1) {
    throw std::invalid_argument("dimension mismatch");
  }
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) {
    throw std::invalid_argument("lambda must be finite and >= 0");
  }
  const int d = data.dim;
  const VectorXd mu_star = to_vector(data.mean);
  const MatrixXd cov_star = to_matrix(data.cov, d);
  checked_llt(cov_star, "data moments");
  checked_llt(to_matrix(theta0.cov, d), "theta0");

  // The recursion runs on the errors dmu = mu_t - mu_*, delta = cov_t - cov_*
  // so contraction keeps full relative precision all the way down, far past
  // the point where mu_t itself stops resolving the gap.
  VectorXd dmu = to_vector(theta0.mean) - mu_star;
  MatrixXd delta = to_matrix(theta0.cov, d) - cov_star;

  auto emit = [&](int t) {
    GaussianLoopRow row;
    row.t = t;
    row.theta.dim = d;
    const VectorXd mu = mu_star + dmu;
    row.theta.mean.assign(mu.data(), mu.data() + d);
    row.theta.cov = to_flat(cov_star + delta);
    row.kl_to_target = gaussian_kl_from_errors(dmu, delta, cov_star);
    row.mean_err_norm = dmu.norm();
    return row;
  };

  std::vector<GaussianLoopRow> rows;
  rows.push_back(emit(0));
  for (int t = 1; t <= iterations; ++t) {
    const VectorXd dmu_next = lambda / (1.0 + lambda) * dmu;
    const VectorXd spread_ref = -dmu_next;                 // mu_* - mu_{t+1}
    const VectorXd spread_model = dmu / (1.0 + lambda);    // mu_t - mu_{t+1}
    delta = lambda / (1.0 + lambda) * delta +
            spread_ref * spread_ref.transpose() / (1.0 + lambda) +
            lambda / (1.0 + lambda) * spread_model * spread_model.transpose();
    dmu = dmu_next;
    rows.push_back(emit(t));
  }
  return rows;
}

std::vector<GaussianLoopRow> gaussian_mle_loop_sampled(
    const GaussianParams& data, const GaussianParams& theta0, double lambda,
    int iterations, std::size_t n, std::uint64_t seed) {
  if (n < 2) throw std::invalid_argument("need at least two samples");
  const int d = data.dim;
  const VectorXd mu_star = to_vector(data.mean);
  const MatrixXd cov_star = to_matrix(data.cov, d);
  const MatrixXd chol_star = checked_llt(cov_star, "data moments").matrixL();

  auto draw = [&](const VectorXd& m, const MatrixXd& chol, std::size_t count,
                  SplitMix64& rng, std::vector<VectorXd>& out) {
    VectorXd z(d);
    for (std::size_t i = 0; i < count; ++i) {
      for (int j = 0; j < d; ++j) z(j) = normal_unit(rng);
      out.push_back(m + chol * z);
    }
  };

  // One real dataset, fixed for the whole run.
  SplitMix64 data_rng(derive_seed(seed, 0, 7));
  std::vector<VectorXd> real;
  draw(mu_star, chol_star, n, data_rng, real);

  VectorXd mu = to_vector(theta0.mean);
  MatrixXd cov = to_matrix(theta0.cov, d);
  checked_llt(cov, "theta0");

  std::vector<GaussianLoopRow> rows;
  rows.push_back(make_gauss_row(0, mu, cov, mu_star, cov_star));
  const std::size_t n_synth =
      static_cast<std::size_t>(lambda * static_cast<double>(n));
  for (int t = 1; t <= iterations; ++t) {
    std::vector<VectorXd> pts = real;
    SplitMix64 rng(derive_seed(seed, static_cast<std::uint64_t>(t), 8));
    draw(mu, checked_llt(cov, "model").matrixL(), n_synth, rng, pts);

    VectorXd m = VectorXd::Zero(d);
    for (const VectorXd& p : pts) m += p;
    m /= static_cast<double>(pts.size());
    MatrixXd c = MatrixXd::Zero(d, d);
    for (const VectorXd& p : pts) {
      const VectorXd diff = p - m;
      c += diff * diff.transpose();
    }
    c /= static_cast<double>(pts.size());
    mu = m;
    cov = c;
    rows.push_back(make_gauss_row(t, mu, cov, mu_star, cov_star));
  }
  return rows;
}

double predicted_rate(const StabilityParams& sp) {
  if (!(sp.alpha > 0.0) || sp.lipschitz < 0.0 || sp.eps < 0.0 ||
      sp.lambda < 0.0) {
    throw std::invalid_argument("stability parameters out of range");
  }
  const double le = sp.lipschitz * sp.eps;
  if (le > 0.0) {
    if (!(le < sp.alpha)) {
      throw std::invalid_argument("hypothesis L*eps < alpha violated");
    }
    if (!(sp.lambda < sp.alpha / (2.0 * le))) {
      throw std::invalid_argument("hypothesis lambda < alpha/(2 L eps) violated");
    }
  }
  return sp.lambda * (sp.alpha + le) /
         (sp.alpha + sp.lambda * (sp.alpha - le));
}

}  // namespace loopsim
