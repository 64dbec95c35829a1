#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <variant>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "loopsim/distribution.hpp"
#include "loopsim/dynamics.hpp"
#include "loopsim/samples.hpp"

namespace loopsim {

using CoordRewardFn = std::function<double(std::span<const double>)>;
using LabelerFn = std::function<int(std::span<const double>)>;

// --- generative fitters ------------------------------------------------------

struct HistogramFitter {
  std::vector<std::pair<double, double>> bounds;  // per-axis (lo, hi)
  int bins_per_axis = 64;
};

struct GmmFitter {
  int components = 1;
  int em_iterations = 100;
  std::uint64_t seed = 0;
  double cov_reg = 1e-6;  // ridge added to covariance diagonals
};

using GenerativeFitter = std::variant<HistogramFitter, GmmFitter>;

/// Normalized bin masses over a regular grid; the fitted density is exact as
/// a DiscreteDistribution over bin centers.
struct HistogramModel {
  HistogramFitter spec;
  DiscreteDistribution distribution;  // atoms at bin centers
  std::size_t clamped = 0;            // out-of-box samples clamped to edge bins

  SampleSet sample(std::size_t n, std::uint64_t seed) const;
};

struct GmmModel {
  int dim = 0;
  std::vector<double> weights;
  std::vector<std::vector<double>> means;
  std::vector<std::vector<double>> covs;  // row-major dim x dim
  std::vector<double> log_likelihood;     // one entry per EM iteration

  SampleSet sample(std::size_t n, std::uint64_t seed) const;
  nlohmann::json to_json() const;
};

using FittedModel = std::variant<HistogramModel, GmmModel>;

FittedModel fit(const GenerativeFitter& fitter, const SampleSet& samples);
SampleSet sample_from(const FittedModel& model, std::size_t n,
                      std::uint64_t seed);

// --- iterative retraining on samples -----------------------------------------

struct SampleLoopConfig {
  int k = 2;
  /// infinity() retrains on curated samples only; finite values keep the
  /// real data and add floor(lambda * n_real) curated points.
  double lambda = std::numeric_limits<double>::infinity();
  std::size_t n_gen = 10000;  // candidates generated per iteration
  int iterations = 5;
  std::uint64_t seed = 0;

  /// When set, each row records model mass within this ball (center, radius).
  std::optional<std::pair<std::vector<double>, double>> ball;
  /// When set, each row records per-class model mass.
  LabelerFn labeler;
  int num_classes = 0;
};

/// Generate -> curate by K-choice comparisons -> refit, starting from a model
/// fitted on the real data. Statistics are exact under histogram models and
/// sample-estimated under GMM models.
LoopTrace run_sample_loop(const SampleSet& real, const GenerativeFitter& fitter,
                          const CoordRewardFn& reward,
                          const SampleLoopConfig& cfg);

/// Labels a point by its nearest center.
LabelerFn nearest_center_labeler(std::vector<std::array<double, 2>> centers);

// --- parametric Gaussian retraining (population level) ------------------------

struct GaussianParams {
  std::vector<double> mean;
  std::vector<double> cov;  // row-major dim x dim, symmetric positive definite
  int dim = 0;
};

/// Overall mean/variance of a two-component 1D Gaussian mixture; lets the
/// population loop run against misspecified bimodal data.
GaussianParams mixture1d_moments(double w1, double m1, double s1, double m2,
                                 double s2);

struct GaussianLoopRow {
  int t = 0;
  GaussianParams theta;
  double kl_to_target = 0.0;   // KL(p_theta_* || p_theta_t)
  double mean_err_norm = 0.0;  // ||mu_t - mu_*||
};

/// Deterministic moment-matching recursion for retraining a Gaussian on a
/// (1 : lambda) blend of data moments and the previous model. Row 0 is the
/// initial parameter state.
std::vector<GaussianLoopRow> gaussian_mle_loop(const GaussianParams& data,
                                               const GaussianParams& theta0,
                                               double lambda, int iterations);

/// Sample-level variant: each step fits a Gaussian to n real points plus
/// floor(lambda n) points drawn from the current model.
std::vector<GaussianLoopRow> gaussian_mle_loop_sampled(
    const GaussianParams& data, const GaussianParams& theta0, double lambda,
    int iterations, std::size_t n, std::uint64_t seed);

struct StabilityParams {
  double alpha = 1.0;   // strong concavity of the population log-likelihood
  double lipschitz = 0.0;  // Hessian Lipschitz constant
  double eps = 0.0;     // model-misspecification radius (Wasserstein-1)
  double lambda = 1.0;  // mixing weight
};

/// Parameter-error contraction factor lambda(alpha + eps L) /
/// (alpha + lambda(alpha - eps L)); the KL rate is its square. Throws when
/// the hypothesis (L eps < alpha and lambda < alpha / (2 L eps)) fails.
double predicted_rate(const StabilityParams& sp);

}  // namespace loopsim
