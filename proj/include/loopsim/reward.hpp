#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <variant>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "loopsim/distribution.hpp"
#include "loopsim/samples.hpp"

namespace loopsim {

/// Softmax MLP with two hidden tanh layers, trained by plain mini-batch SGD.
/// Immutable once trained; forward passes are pure.
class Classifier {
 public:
  Classifier() = default;

  /// Class probabilities for a point; nonnegative, summing to 1.
  std::vector<double> probabilities(std::span<const double> x) const;
  int predict(std::span<const double> x) const;
  double accuracy(const SampleSet& data) const;

  int input_dim() const { return input_dim_; }
  int num_classes() const { return num_classes_; }
  double train_accuracy() const { return train_accuracy_; }

  nlohmann::json to_json() const;
  static Classifier from_json(const nlohmann::json& j);

 private:
  struct Layer {
    int in = 0, out = 0;
    std::vector<double> w;  // out x in, row-major
    std::vector<double> b;  // out
  };
  std::vector<double> forward(std::span<const double> x) const;

  int input_dim_ = 0;
  int num_classes_ = 0;
  double train_accuracy_ = 0.0;
  Layer l1_, l2_, l3_;

  friend Classifier train_classifier(const SampleSet&, const struct TrainOptions&);
};

struct TrainOptions {
  int hidden_width = 64;
  int epochs = 200;
  double learning_rate = 0.1;
  int batch_size = 32;
  std::uint64_t seed = 0;
};

/// Throws on fewer than 2 classes present in the data.
Classifier train_classifier(const SampleSet& data,
                            const TrainOptions& opts = {});

// --- reward function variants ----------------------------------------------

struct TabularReward {
  std::unordered_map<std::string, double> values;  // atom id -> reward
};

/// r(x) = -gamma * max(0, ||x - center|| - r_min); zero on the closed ball.
struct ClippedDistanceReward {
  std::vector<double> center;
  double gamma = 10.0;
  double r_min = 1.0;
};

/// r(x) = gamma * q_i(x) for a fixed class i.
struct ClassProbReward {
  std::shared_ptr<const Classifier> classifier;
  int class_index = 0;
  double gamma = 5.0;
};

/// r(x) = gamma * max_i q_i(x).
struct ConfidenceReward {
  std::shared_ptr<const Classifier> classifier;
  double gamma = 5.0;
};

class RewardFunction {
 public:
  explicit RewardFunction(TabularReward v);
  explicit RewardFunction(ClippedDistanceReward v);
  explicit RewardFunction(ClassProbReward v);
  explicit RewardFunction(ConfidenceReward v);

  /// Tabular lookup by id; coordinate variants evaluate the atom's coords.
  double operator()(const Atom& a) const;

  /// Coordinate evaluation; throws for tabular rewards.
  double at(std::span<const double> coords) const;

  bool coordinate_based() const;

 private:
  std::variant<TabularReward, ClippedDistanceReward, ClassProbReward,
               ConfidenceReward>
      impl_;
};

}  // namespace loopsim
