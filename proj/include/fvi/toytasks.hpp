#pragma once

// Synthetic desk-scale datasets. Every generator is a pure function of its
// arguments; inputs lie in [0, 1] on the training support.

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "fvi/fvi.hpp"

namespace fvi {

struct ToyDataset {
  std::string name;
  Dataset train;
  Dataset test;
  std::vector<Tensor> ood;
  /// Scalar coordinate per item (1D regression only).
  std::vector<double> train_coord;
  std::vector<double> test_coord;
  std::vector<double> ood_coord;
  /// Per test image, 1 where the label was drawn at random (segmentation only).
  std::vector<std::vector<int>> test_noise_mask;
  std::uint64_t seed = 0;
};

inline constexpr std::size_t kRegression1dWidth = 8;
inline constexpr double kRegression1dRange = 3.0;

/// x in [-3, 3] mapped to u = (x + 3) / 6 and tiled into a 1 x 1 x 8 input.
Tensor encode_regression_1d(double x);
double regression_1d_mean(double x);
/// Noise standard deviation 0.05 (1 + x^2).
double regression_1d_noise_sd(double x);

/// y = sin(2x) + 0.05 (1 + x^2) eps. OOD probes have |x| in [5, 6].
ToyDataset gen_regression_1d(std::size_t n_train, std::uint64_t seed, std::size_t n_test = 256,
                             std::size_t n_ood = 64);

/// 1 x 8 x 8 intensity images of rectangles over a sloped background; depth
/// targets in (0, 1). Nearer rectangles occlude farther ones and are brighter.
ToyDataset gen_minidepth(std::size_t n_train, std::uint64_t seed, std::size_t n_test = 64);

inline constexpr std::size_t kSegClasses = 3;

/// Three-class Voronoi blobs on 8 x 8 with the border ring labelled 255. Half
/// of the images carry a 2 x 2 patch of intermediate intensity whose labels
/// are drawn at random from {1, 2}.
ToyDataset gen_miniseg(std::size_t n_train, std::uint64_t seed, std::size_t n_test = 64);

/// Dispatch on "regression1d", "minidepth" or "miniseg".
ToyDataset gen_task(const std::string& task, std::size_t n_train, std::uint64_t seed,
                    std::size_t n_test);

/// One row per item: split,index,inputs...,targets...
void write_dataset_csv(std::ostream& out, const ToyDataset& data);
/// Plain-text graymap (P2) with values scaled to 0..255.
void write_pgm(std::ostream& out, std::size_t height, std::size_t width,
               const std::vector<double>& values, double lo, double hi);

}  // namespace fvi
