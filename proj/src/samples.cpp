#include "loopsim/samples.hpp"

#include <array>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "loopsim/rng.hpp"

namespace loopsim {

void SampleSet::append(std::span<const double> pt, int label) {
  if (dim == 0) {
    dim = static_cast<int>(pt.size());
  } else if (static_cast<int>(pt.size()) != dim) {
    throw std::invalid_argument("sample dimension mismatch");
  }
  data.insert(data.end(), pt.begin(), pt.end());
  if (label >= 0) {
    labels.push_back(label);
  } else if (!labels.empty()) {
    throw std::invalid_argument("mixing labeled and unlabeled points");
  }
}

int SampleSet::num_classes() const {
  int top = -1;
  for (int l : labels) top = std::max(top, l);
  return top + 1;
}

void SampleSet::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path.string());
  for (int j = 0; j < dim; ++j) {
    if (j) out << ',';
    out << 'x' << j;
  }
  if (labeled()) out << ",label";
  out << '\n';
  out.precision(17);
  for (std::size_t i = 0; i < size(); ++i) {
    const auto pt = point(i);
    for (int j = 0; j < dim; ++j) {
      if (j) out << ',';
      out << pt[static_cast<std::size_t>(j)];
    }
    if (labeled()) out << ',' << labels[i];
    out << '\n';
  }
}

SampleSet SampleSet::read_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("empty csv");
  // Header tells us whether a label column is present.
  const bool has_labels = line.find("label") != std::string::npos;
  int ncols = 1;
  for (char c : line) {
    if (c == ',') ++ncols;
  }
  SampleSet s;
  s.dim = has_labels ? ncols - 1 : ncols;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<double> row;
    while (std::getline(ss, cell, ',')) row.push_back(std::stod(cell));
    if (static_cast<int>(row.size()) != ncols) {
      throw std::runtime_error("ragged csv row");
    }
    if (has_labels) {
      s.labels.push_back(static_cast<int>(row.back()));
      row.pop_back();
    }
    s.data.insert(s.data.end(), row.begin(), row.end());
  }
  return s;
}

std::vector<std::array<double, 2>> eight_gaussian_centers(double radius) {
  std::vector<std::array<double, 2>> centers;
  centers.reserve(8);
  for (int k = 0; k < 8; ++k) {
    const double a = 2.0 * M_PI * k / 8.0;
    centers.push_back({radius * std::cos(a), radius * std::sin(a)});
  }
  return centers;
}

SampleSet gen_eight_gaussians(std::size_t n, double radius, double sigma,
                              std::uint64_t seed) {
  if (n < 1) throw std::invalid_argument("need at least one sample");
  const auto centers = eight_gaussian_centers(radius);
  SampleSet s;
  s.dim = 2;
  s.data.reserve(2 * n);
  s.labels.reserve(n);
  SplitMix64 rng(derive_seed(seed, 0x8a5));
  for (std::size_t i = 0; i < n; ++i) {
    const int k = static_cast<int>(rng() % 8);
    const double x = centers[k][0] + sigma * normal_unit(rng);
    const double y = centers[k][1] + sigma * normal_unit(rng);
    s.data.push_back(x);
    s.data.push_back(y);
    s.labels.push_back(k);
  }
  return s;
}

SampleSet gen_two_moons(std::size_t n, double noise, std::uint64_t seed) {
  if (n < 1) throw std::invalid_argument("need at least one sample");
  SampleSet s;
  s.dim = 2;
  s.data.reserve(2 * n);
  s.labels.reserve(n);
  SplitMix64 rng(derive_seed(seed, 0x2e00));
  for (std::size_t i = 0; i < n; ++i) {
    const int moon = (rng() & 1) ? 1 : 0;
    const double t = M_PI * uniform_unit(rng);
    double x, y;
    if (moon == 0) {
      x = std::cos(t);
      y = std::sin(t);
    } else {
      x = 1.0 - std::cos(t);
      y = 0.5 - std::sin(t);
    }
    s.data.push_back(x + noise * normal_unit(rng));
    s.data.push_back(y + noise * normal_unit(rng));
    s.labels.push_back(moon);
  }
  return s;
}

}  // namespace loopsim
