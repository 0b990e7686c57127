#pragma once

// Test-set evaluation of a trained model on a toy dataset.

#include <cstdint>
#include <iosfwd>
#include <vector>

#include "fvi/fvi.hpp"
#include "fvi/metrics.hpp"
#include "fvi/toytasks.hpp"

namespace fvi {

struct RegressionReport {
  std::vector<RegressionPrediction> test;
  std::vector<RegressionPrediction> ood;
  CalibrationResult calibration;
  RegressionErrors errors;
  double train_epistemic_median = 0.0;
  double ood_epistemic_median = 0.0;
};

/// Calibration groups are images; a single-pixel task forms one group.
RegressionReport evaluate_regression(const FviModel& model, const ToyDataset& data);

struct SegmentationReport {
  std::vector<ClassPrediction> test;
  CalibrationResult calibration;
  SegScores scores;
  double noisy_entropy_median = 0.0;
  double clean_entropy_median = 0.0;
  std::size_t noisy_pixels = 0;
};

SegmentationReport evaluate_segmentation(const FviModel& model, const ToyDataset& data,
                                         std::size_t samples, std::uint64_t seed);

double median(std::vector<double> values);

/// index,mean,epistemic_var,aleatoric_var with index = item * P + pixel.
void write_regression_predictions(std::ostream& out, const std::vector<RegressionPrediction>& preds);
/// index,class,prob,entropy with the argmax class and its probability.
void write_class_predictions(std::ostream& out, const std::vector<ClassPrediction>& preds);

}  // namespace fvi
