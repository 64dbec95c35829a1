#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include <nlohmann/json.hpp>

#include "loopsim/reward.hpp"
#include "loopsim/rng.hpp"
#include "loopsim/samples.hpp"

using namespace loopsim;

namespace {

// Two linearly separable Gaussian blobs.
SampleSet two_blobs(std::size_t n, std::uint64_t seed) {
  SplitMix64 rng(seed);
  SampleSet s;
  s.dim = 2;
  for (std::size_t i = 0; i < n; ++i) {
    const int cls = (rng() & 1) ? 1 : 0;
    const double cx = cls == 0 ? -2.0 : 2.0;
    s.data.push_back(cx + 0.5 * normal_unit(rng));
    s.data.push_back(0.5 * normal_unit(rng));
    s.labels.push_back(cls);
  }
  return s;
}

}  // namespace

TEST_CASE("clipped distance reward") {
  const RewardFunction r(ClippedDistanceReward{{0.0, 0.0}, 10.0, 1.0});

  CHECK(r.at(std::vector<double>{0.5, 0.0}) == doctest::Approx(0.0));
  CHECK(r.at(std::vector<double>{1.5, 0.0}) == doctest::Approx(-5.0));
  CHECK(r.at(std::vector<double>{0.0, 1.0}) == doctest::Approx(0.0));

  // Nonpositive everywhere, zero exactly on the closed ball.
  SplitMix64 rng(3);
  for (int i = 0; i < 200; ++i) {
    const double x = -3.0 + 6.0 * uniform_unit(rng);
    const double y = -3.0 + 6.0 * uniform_unit(rng);
    const double v = r.at(std::vector<double>{x, y});
    CHECK(v <= 0.0);
    CHECK((std::hypot(x, y) <= 1.0) == (v == 0.0));
  }

  const Atom a{"a", {2.0, 0.0}, 1.0};
  CHECK(r(a) == doctest::Approx(-10.0));
  const Atom bare{"b", {}, 1.0};
  CHECK_THROWS_AS(r(bare), std::invalid_argument);
  CHECK_THROWS_AS(r.at(std::vector<double>{1.0}), std::invalid_argument);

  CHECK_THROWS_AS(RewardFunction(ClippedDistanceReward{{0.0}, -1.0, 1.0}),
                  std::invalid_argument);
}

TEST_CASE("tabular reward") {
  TabularReward tab;
  tab.values["a"] = 1.5;
  const RewardFunction r(std::move(tab));
  CHECK(r(Atom{"a", {}, 1.0}) == doctest::Approx(1.5));
  CHECK_THROWS_AS(r(Atom{"missing", {}, 1.0}), std::out_of_range);
  CHECK_THROWS_AS(r.at(std::vector<double>{0.0}), std::invalid_argument);
  CHECK_FALSE(r.coordinate_based());
}

TEST_CASE("classifier on separable blobs") {
  const SampleSet data = two_blobs(600, 9);
  TrainOptions opts;
  opts.epochs = 60;
  opts.seed = 4;
  const Classifier clf = train_classifier(data, opts);
  CHECK(clf.train_accuracy() >= 0.95);

  // Probability vectors stay normalized.
  SplitMix64 rng(10);
  for (int i = 0; i < 100; ++i) {
    const std::vector<double> x{-4.0 + 8.0 * uniform_unit(rng),
                                -4.0 + 8.0 * uniform_unit(rng)};
    const auto q = clf.probabilities(x);
    double total = 0.0;
    for (double v : q) {
      CHECK(v >= 0.0);
      total += v;
    }
    CHECK(std::abs(total - 1.0) <= 1e-6);
  }

  // Forward passes are pure.
  const std::vector<double> x{0.3, -0.2};
  CHECK(clf.probabilities(x) == clf.probabilities(x));
}

TEST_CASE("classifier on two moons") {
  const SampleSet train = gen_two_moons(1200, 0.1, 11);
  const SampleSet test = gen_two_moons(1000, 0.1, 12);
  TrainOptions opts;
  opts.epochs = 200;
  opts.seed = 5;
  const Classifier clf = train_classifier(train, opts);
  CHECK(clf.train_accuracy() >= 0.95);
  CHECK(clf.accuracy(test) >= 0.95);
}

TEST_CASE("classifier training is deterministic given the seed") {
  const SampleSet data = two_blobs(300, 15);
  TrainOptions opts;
  opts.epochs = 20;
  opts.seed = 42;
  const Classifier a = train_classifier(data, opts);
  const Classifier b = train_classifier(data, opts);
  const std::vector<double> x{0.1, 0.2};
  CHECK(a.probabilities(x) == b.probabilities(x));
}

TEST_CASE("single-class data is rejected") {
  SampleSet data;
  data.dim = 1;
  for (int i = 0; i < 10; ++i) {
    data.data.push_back(i);
    data.labels.push_back(0);
  }
  CHECK_THROWS_AS(train_classifier(data), std::invalid_argument);
}

TEST_CASE("classifier rewards") {
  const SampleSet data = two_blobs(600, 21);
  TrainOptions opts;
  opts.epochs = 60;
  opts.seed = 6;
  auto clf = std::make_shared<Classifier>(train_classifier(data, opts));

  const RewardFunction conf(ConfidenceReward{clf, 5.0});
  const RewardFunction prob(ClassProbReward{clf, 0, 5.0});

  // Deep inside class 0 the classifier is confident: both rewards near gamma.
  const std::vector<double> deep{-2.0, 0.0};
  CHECK(conf.at(deep) == doctest::Approx(5.0).epsilon(0.02));
  CHECK(prob.at(deep) == doctest::Approx(5.0).epsilon(0.02));

  // Confidence reward is bounded by gamma and at least gamma / C.
  SplitMix64 rng(22);
  for (int i = 0; i < 100; ++i) {
    const std::vector<double> x{-4.0 + 8.0 * uniform_unit(rng),
                                -4.0 + 8.0 * uniform_unit(rng)};
    const double v = conf.at(x);
    CHECK(v <= 5.0 + 1e-9);
    CHECK(v >= 2.5 - 1e-9);
  }

  CHECK_THROWS_AS(RewardFunction(ClassProbReward{clf, 7, 5.0}),
                  std::invalid_argument);
  CHECK_THROWS_AS(RewardFunction(ConfidenceReward{nullptr, 5.0}),
                  std::invalid_argument);
}

TEST_CASE("one-hot classifier output gives confidence reward gamma") {
  // Hand-built net: zero hidden layers, output bias (100, 0) makes the
  // softmax a one-hot vector to double precision.
  const nlohmann::json j{
      {"input_dim", 2},
      {"num_classes", 2},
      {"train_accuracy", 1.0},
      {"layers",
       {{{"in", 2}, {"out", 1}, {"w", {0.0, 0.0}}, {"b", {0.0}}},
        {{"in", 1}, {"out", 1}, {"w", {0.0}}, {"b", {0.0}}},
        {{"in", 1}, {"out", 2}, {"w", {0.0, 0.0}}, {"b", {100.0, 0.0}}}}}};
  auto clf = std::make_shared<Classifier>(Classifier::from_json(j));
  const auto q = clf->probabilities(std::vector<double>{0.3, -0.7});
  CHECK(q[0] == 1.0);
  const RewardFunction conf(ConfidenceReward{clf, 5.0});
  CHECK(conf.at(std::vector<double>{0.3, -0.7}) == 5.0);
}

TEST_CASE("classifier json round trip") {
  const SampleSet data = two_blobs(300, 33);
  TrainOptions opts;
  opts.epochs = 20;
  opts.seed = 7;
  const Classifier clf = train_classifier(data, opts);
  const Classifier back = Classifier::from_json(clf.to_json());
  const std::vector<double> x{0.4, -1.0};
  CHECK(back.probabilities(x) == clf.probabilities(x));
  CHECK(back.train_accuracy() == clf.train_accuracy());
}
