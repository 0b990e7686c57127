#pragma once

// Calibration and accuracy metrics. Scores are computed per image (group)
// and then averaged over images.

#include <cstddef>
#include <iosfwd>
#include <span>
#include <vector>

namespace fvi {

inline constexpr std::size_t kCalibrationLevels = 10;

struct CalibrationCurve {
  std::vector<double> levels;    // expected confidence
  std::vector<double> observed;  // empirical frequency
  std::vector<std::size_t> counts;
};

struct CalibrationResult {
  CalibrationCurve curve;
  double score = 0.0;
};

/// Gaussian summary of a per-pixel predictive.
struct GaussianPrediction {
  double mean = 0.0;
  double var = 0.0;
};

/// Central-interval coverage at levels 0.1, ..., 1.0. A truth counts as
/// inside level q when erf(|y - mean| / sqrt(2 var)) < q, so an interval with
/// vanishing variance contains nothing. Image score is the uniform mean of
/// |observed - q|; non-finite truths are skipped. Throws DomainError on var <= 0.
CalibrationResult regression_calibration(const std::vector<std::vector<GaussianPrediction>>& preds,
                                         const std::vector<std::vector<double>>& truths);

/// Per-image class probabilities, pixel-major: probs[s * classes + k].
struct ClassImage {
  std::size_t classes = 0;
  std::vector<double> probs;
  std::vector<int> labels;
};

/// Pixels binned by max probability into 10 equal bins on [0, 1]. Image score
/// is sum_b (n_b / n) |accuracy_b - confidence_b|; empty bins weigh zero.
/// The curve pools all pixels (level = bin mean confidence).
CalibrationResult classification_calibration(const std::vector<ClassImage>& images,
                                             int ignore_label = 255);

struct RegressionErrors {
  double rel = 0.0;
  double log10 = 0.0;
  double rms = 0.0;
};

/// rel and log10 use only positive truth (and positive prediction for log10).
RegressionErrors regression_errors(std::span<const double> pred, std::span<const double> truth);

struct SegScores {
  double mean_iou = 0.0;
  double accuracy = 0.0;
};

/// IoU averaged over classes with a nonempty union.
SegScores seg_scores(std::span<const int> pred, std::span<const int> truth, std::size_t classes,
                     int ignore_label = 255);

/// Spearman rank correlation with average ranks for ties.
double spearman(std::span<const double> a, std::span<const double> b);

void write_calibration_csv(std::ostream& out, const CalibrationCurve& curve);

}  // namespace fvi
