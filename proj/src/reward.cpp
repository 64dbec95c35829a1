#include "loopsim/reward.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "loopsim/rng.hpp"

namespace loopsim {

namespace {

void softmax_inplace(std::vector<double>& z) {
  const double m = *std::max_element(z.begin(), z.end());
  double total = 0.0;
  for (double& v : z) {
    v = std::exp(v - m);
    total += v;
  }
  for (double& v : z) v /= total;
}

nlohmann::json layer_to_json(int in, int out, const std::vector<double>& w,
                             const std::vector<double>& b) {
  return nlohmann::json{{"in", in}, {"out", out}, {"w", w}, {"b", b}};
}

}  // namespace

std::vector<double> Classifier::forward(std::span<const double> x) const {
  if (static_cast<int>(x.size()) != input_dim_) {
    throw std::invalid_argument("classifier input dimension mismatch");
  }
  auto affine = [](const Layer& l, const std::vector<double>& in) {
    std::vector<double> out(static_cast<std::size_t>(l.out));
    for (int i = 0; i < l.out; ++i) {
      double acc = l.b[static_cast<std::size_t>(i)];
      const double* row = l.w.data() + static_cast<std::size_t>(i) * l.in;
      for (int j = 0; j < l.in; ++j) acc += row[j] * in[static_cast<std::size_t>(j)];
      out[static_cast<std::size_t>(i)] = acc;
    }
    return out;
  };
  std::vector<double> h(x.begin(), x.end());
  h = affine(l1_, h);
  for (double& v : h) v = std::tanh(v);
  h = affine(l2_, h);
  for (double& v : h) v = std::tanh(v);
  h = affine(l3_, h);
  return h;
}

std::vector<double> Classifier::probabilities(std::span<const double> x) const {
  std::vector<double> z = forward(x);
  softmax_inplace(z);
  return z;
}

int Classifier::predict(std::span<const double> x) const {
  const std::vector<double> z = forward(x);
  return static_cast<int>(std::max_element(z.begin(), z.end()) - z.begin());
}

double Classifier::accuracy(const SampleSet& data) const {
  if (!data.labeled() || data.size() == 0) {
    throw std::invalid_argument("accuracy needs labeled data");
  }
  std::size_t hits = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (predict(data.point(i)) == data.label(i)) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(data.size());
}

nlohmann::json Classifier::to_json() const {
  return nlohmann::json{
      {"input_dim", input_dim_},
      {"num_classes", num_classes_},
      {"train_accuracy", train_accuracy_},
      {"layers",
       {layer_to_json(l1_.in, l1_.out, l1_.w, l1_.b),
        layer_to_json(l2_.in, l2_.out, l2_.w, l2_.b),
        layer_to_json(l3_.in, l3_.out, l3_.w, l3_.b)}}};
}

Classifier Classifier::from_json(const nlohmann::json& j) {
  Classifier c;
  c.input_dim_ = j.at("input_dim").get<int>();
  c.num_classes_ = j.at("num_classes").get<int>();
  c.train_accuracy_ = j.at("train_accuracy").get<double>();
  const auto& layers = j.at("layers");
  Layer* dest[3] = {&c.l1_, &c.l2_, &c.l3_};
  for (int i = 0; i < 3; ++i) {
    dest[i]->in = layers.at(i).at("in").get<int>();
    dest[i]->out = layers.at(i).at("out").get<int>();
    dest[i]->w = layers.at(i).at("w").get<std::vector<double>>();
    dest[i]->b = layers.at(i).at("b").get<std::vector<double>>();
  }
  return c;
}

Classifier train_classifier(const SampleSet& data, const TrainOptions& opts) {
  if (!data.labeled() || data.size() < 2) {
    throw std::invalid_argument("training needs labeled data");
  }
  const int classes = data.num_classes();
  {
    std::vector<bool> present(static_cast<std::size_t>(classes), false);
    for (int l : data.labels) present[static_cast<std::size_t>(l)] = true;
    int distinct = 0;
    for (bool p : present) distinct += p ? 1 : 0;
    if (distinct < 2) {
      throw std::invalid_argument("training needs at least 2 classes");
    }
  }
  if (opts.hidden_width < 1 || opts.epochs < 1 || opts.batch_size < 1 ||
      opts.learning_rate <= 0.0) {
    throw std::invalid_argument("invalid training options");
  }

  const int d = data.dim;
  const int h = opts.hidden_width;
  Classifier c;
  c.input_dim_ = d;
  c.num_classes_ = classes;
  c.l1_ = {d, h, std::vector<double>(static_cast<std::size_t>(h) * d),
           std::vector<double>(static_cast<std::size_t>(h), 0.0)};
  c.l2_ = {h, h, std::vector<double>(static_cast<std::size_t>(h) * h),
           std::vector<double>(static_cast<std::size_t>(h), 0.0)};
  c.l3_ = {h, classes,
           std::vector<double>(static_cast<std::size_t>(classes) * h),
           std::vector<double>(static_cast<std::size_t>(classes), 0.0)};

  SplitMix64 rng(derive_seed(opts.seed, 0xc1a5));
  auto init = [&](Classifier::Layer& l) {
    const double scale = std::sqrt(1.0 / l.in);
    for (double& w : l.w) w = scale * (2.0 * uniform_unit(rng) - 1.0);
  };
  init(c.l1_);
  init(c.l2_);
  init(c.l3_);

  const std::size_t n = data.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);

  // Per-sample workspaces reused across the run.
  std::vector<double> a1(static_cast<std::size_t>(h)),
      a2(static_cast<std::size_t>(h)), z(static_cast<std::size_t>(classes));
  std::vector<double> g2(static_cast<std::size_t>(h)),
      g1(static_cast<std::size_t>(h));

  for (int epoch = 0; epoch < opts.epochs; ++epoch) {
    // Fisher-Yates with the run's generator keeps training deterministic.
    for (std::size_t i = n; i > 1; --i) {
      const std::size_t j = rng() % i;
      std::swap(order[i - 1], order[j]);
    }
    for (std::size_t start = 0; start < n;
         start += static_cast<std::size_t>(opts.batch_size)) {
      const std::size_t stop =
          std::min(n, start + static_cast<std::size_t>(opts.batch_size));
      const double step =
          opts.learning_rate / static_cast<double>(stop - start);
      for (std::size_t bi = start; bi < stop; ++bi) {
        const auto x = data.point(order[bi]);
        const int label = data.label(order[bi]);

        for (int i = 0; i < h; ++i) {
          double acc = c.l1_.b[static_cast<std::size_t>(i)];
          const double* row = c.l1_.w.data() + static_cast<std::size_t>(i) * d;
          for (int j = 0; j < d; ++j) acc += row[j] * x[static_cast<std::size_t>(j)];
          a1[static_cast<std::size_t>(i)] = std::tanh(acc);
        }
        for (int i = 0; i < h; ++i) {
          double acc = c.l2_.b[static_cast<std::size_t>(i)];
          const double* row = c.l2_.w.data() + static_cast<std::size_t>(i) * h;
          for (int j = 0; j < h; ++j) acc += row[j] * a1[static_cast<std::size_t>(j)];
          a2[static_cast<std::size_t>(i)] = std::tanh(acc);
        }
        for (int i = 0; i < classes; ++i) {
          double acc = c.l3_.b[static_cast<std::size_t>(i)];
          const double* row = c.l3_.w.data() + static_cast<std::size_t>(i) * h;
          for (int j = 0; j < h; ++j) acc += row[j] * a2[static_cast<std::size_t>(j)];
          z[static_cast<std::size_t>(i)] = acc;
        }
        softmax_inplace(z);
        z[static_cast<std::size_t>(label)] -= 1.0;  // dL/dlogits

        std::fill(g2.begin(), g2.end(), 0.0);
        for (int i = 0; i < classes; ++i) {
          const double gz = z[static_cast<std::size_t>(i)];
          double* row = c.l3_.w.data() + static_cast<std::size_t>(i) * h;
          for (int j = 0; j < h; ++j) {
            g2[static_cast<std::size_t>(j)] += gz * row[j];
            row[j] -= step * gz * a2[static_cast<std::size_t>(j)];
          }
          c.l3_.b[static_cast<std::size_t>(i)] -= step * gz;
        }
        for (int i = 0; i < h; ++i) {
          const double ai = a2[static_cast<std::size_t>(i)];
          g2[static_cast<std::size_t>(i)] *= (1.0 - ai * ai);
        }
        std::fill(g1.begin(), g1.end(), 0.0);
        for (int i = 0; i < h; ++i) {
          const double gz = g2[static_cast<std::size_t>(i)];
          double* row = c.l2_.w.data() + static_cast<std::size_t>(i) * h;
          for (int j = 0; j < h; ++j) {
            g1[static_cast<std::size_t>(j)] += gz * row[j];
            row[j] -= step * gz * a1[static_cast<std::size_t>(j)];
          }
          c.l2_.b[static_cast<std::size_t>(i)] -= step * gz;
        }
        for (int i = 0; i < h; ++i) {
          const double ai = a1[static_cast<std::size_t>(i)];
          g1[static_cast<std::size_t>(i)] *= (1.0 - ai * ai);
        }
        for (int i = 0; i < h; ++i) {
          const double gz = g1[static_cast<std::size_t>(i)];
          double* row = c.l1_.w.data() + static_cast<std::size_t>(i) * d;
          for (int j = 0; j < d; ++j) row[j] -= step * gz * x[static_cast<std::size_t>(j)];
          c.l1_.b[static_cast<std::size_t>(i)] -= step * gz;
        }
      }
    }
  }

  c.train_accuracy_ = c.accuracy(data);
  return c;
}

// --- RewardFunction ----------------------------------------------------------

RewardFunction::RewardFunction(TabularReward v) : impl_(std::move(v)) {}

RewardFunction::RewardFunction(ClippedDistanceReward v) : impl_(std::move(v)) {
  const auto& cd = std::get<ClippedDistanceReward>(impl_);
  if (cd.gamma <= 0.0 || cd.r_min < 0.0 || cd.center.empty()) {
    throw std::invalid_argument("clipped distance reward needs gamma > 0, "
                                "r_min >= 0 and a center point");
  }
}

RewardFunction::RewardFunction(ClassProbReward v) : impl_(std::move(v)) {
  const auto& cp = std::get<ClassProbReward>(impl_);
  if (!cp.classifier || cp.gamma <= 0.0 || cp.class_index < 0 ||
      cp.class_index >= cp.classifier->num_classes()) {
    throw std::invalid_argument("class probability reward misconfigured");
  }
}

RewardFunction::RewardFunction(ConfidenceReward v) : impl_(std::move(v)) {
  const auto& cf = std::get<ConfidenceReward>(impl_);
  if (!cf.classifier || cf.gamma <= 0.0) {
    throw std::invalid_argument("confidence reward misconfigured");
  }
}

bool RewardFunction::coordinate_based() const {
  return !std::holds_alternative<TabularReward>(impl_);
}

double RewardFunction::at(std::span<const double> coords) const {
  if (const auto* cd = std::get_if<ClippedDistanceReward>(&impl_)) {
    if (coords.size() != cd->center.size()) {
      throw std::invalid_argument("coordinate dimension mismatch");
    }
    double sq = 0.0;
    for (std::size_t i = 0; i < coords.size(); ++i) {
      const double d = coords[i] - cd->center[i];
      sq += d * d;
    }
    return -cd->gamma * std::max(0.0, std::sqrt(sq) - cd->r_min);
  }
  if (const auto* cp = std::get_if<ClassProbReward>(&impl_)) {
    return cp->gamma *
           cp->classifier->probabilities(coords)[static_cast<std::size_t>(
               cp->class_index)];
  }
  if (const auto* cf = std::get_if<ConfidenceReward>(&impl_)) {
    const std::vector<double> q = cf->classifier->probabilities(coords);
    return cf->gamma * *std::max_element(q.begin(), q.end());
  }
  throw std::invalid_argument("tabular reward has no coordinate form");
}

double RewardFunction::operator()(const Atom& a) const {
  if (const auto* tab = std::get_if<TabularReward>(&impl_)) {
    auto it = tab->values.find(a.id);
    if (it == tab->values.end()) {
      throw std::out_of_range("no tabular reward for atom '" + a.id + "'");
    }
    return it->second;
  }
  if (a.coords.empty()) {
    throw std::invalid_argument("atom '" + a.id +
                                "' has no coordinates for this reward");
  }
  return at(a.coords);
}

}  // namespace loopsim
