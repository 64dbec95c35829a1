#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace loopsim {

/// Point cloud in R^d with optional integer class labels, stored row-major.
struct SampleSet {
  int dim = 0;
  std::vector<double> data;   // size() * dim values
  std::vector<int> labels;    // empty, or one label per point

  std::size_t size() const {
    return dim == 0 ? 0 : data.size() / static_cast<std::size_t>(dim);
  }
  bool labeled() const { return !labels.empty(); }
  std::span<const double> point(std::size_t i) const {
    return {data.data() + i * static_cast<std::size_t>(dim),
            static_cast<std::size_t>(dim)};
  }
  int label(std::size_t i) const { return labels[i]; }
  void append(std::span<const double> pt, int label = -1);

  /// Largest label + 1 (0 when unlabeled).
  int num_classes() const;

  /// One row per point, label column last when labeled. Header row included.
  void write_csv(const std::filesystem::path& path) const;
  static SampleSet read_csv(const std::filesystem::path& path);
};

/// Equal-weight mixture of 8 isotropic Gaussians with centers on a ring of
/// the given radius; labels are component indices.
SampleSet gen_eight_gaussians(std::size_t n, double radius, double sigma,
                              std::uint64_t seed);

std::vector<std::array<double, 2>> eight_gaussian_centers(double radius);

/// Two interleaved half-circles with isotropic Gaussian noise; labels are
/// moon indices.
SampleSet gen_two_moons(std::size_t n, double noise, std::uint64_t seed);

}  // namespace loopsim
