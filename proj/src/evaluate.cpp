#include "fvi/evaluate.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <ostream>

#include "fvi/error.hpp"

namespace fvi {

double median(std::vector<double> values) {
  if (values.empty()) throw DomainError("median: empty input");
  const std::size_t mid = values.size() / 2;
  std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(mid), values.end());
  double m = values[mid];
  if (values.size() % 2 == 0) {
    m = 0.5 * (m + *std::max_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(mid)));
  }
  return m;
}

RegressionReport evaluate_regression(const FviModel& model, const ToyDataset& data) {
  if (data.test.size() == 0) throw DomainError("evaluate_regression: empty test split");
  RegressionReport report;
  std::vector<std::vector<GaussianPrediction>> groups;
  std::vector<std::vector<double>> truths;
  std::vector<double> pred_flat, truth_flat;
  const bool single_pixel = data.test.targets.front().size() == 1;
  if (single_pixel) {
    groups.resize(1);
    truths.resize(1);
  }
  for (std::size_t i = 0; i < data.test.size(); ++i) {
    report.test.push_back(predict_regression(model, data.test.inputs[i]));
    const auto& pixels = report.test.back().pixels;
    if (!single_pixel) {
      groups.emplace_back();
      truths.emplace_back();
    }
    for (std::size_t p = 0; p < pixels.size(); ++p) {
      groups.back().push_back({pixels[p].mean, pixels[p].total_var});
      truths.back().push_back(data.test.targets[i][p]);
      pred_flat.push_back(pixels[p].mean);
      truth_flat.push_back(data.test.targets[i][p]);
    }
  }
  report.calibration = regression_calibration(groups, truths);
  report.errors = regression_errors(pred_flat, truth_flat);

  std::vector<double> train_var;
  for (const auto& x : data.train.inputs) {
    for (const auto& px : predict_regression(model, x).pixels) train_var.push_back(px.epistemic_var);
  }
  if (!train_var.empty()) report.train_epistemic_median = median(train_var);
  std::vector<double> ood_var;
  for (const auto& x : data.ood) {
    report.ood.push_back(predict_regression(model, x));
    for (const auto& px : report.ood.back().pixels) ood_var.push_back(px.epistemic_var);
  }
  if (!ood_var.empty()) report.ood_epistemic_median = median(ood_var);
  return report;
}

SegmentationReport evaluate_segmentation(const FviModel& model, const ToyDataset& data,
                                         std::size_t samples, std::uint64_t seed) {
  if (data.test.size() == 0) throw DomainError("evaluate_segmentation: empty test split");
  SegmentationReport report;
  std::vector<ClassImage> images;
  std::vector<int> pred_all, truth_all;
  std::vector<double> clean_entropy;
  std::vector<double> noisy_entropy;
  for (std::size_t i = 0; i < data.test.size(); ++i) {
    report.test.push_back(predict_classes(model, data.test.inputs[i], samples, seed + i));
    const ClassPrediction& pred = report.test.back();
    ClassImage img{pred.classes, pred.probs, {}};
    for (std::size_t s = 0; s < pred.labels.size(); ++s) {
      const int label = static_cast<int>(data.test.targets[i][s]);
      img.labels.push_back(label);
      pred_all.push_back(pred.labels[s]);
      truth_all.push_back(label);
      if (label == kIgnoreLabel) continue;
      const bool noisy = i < data.test_noise_mask.size() && data.test_noise_mask[i][s] != 0;
      if (noisy) {
        noisy_entropy.push_back(pred.entropy[s]);
      } else {
        clean_entropy.push_back(pred.entropy[s]);
      }
    }
    images.push_back(std::move(img));
  }
  report.calibration = classification_calibration(images, kIgnoreLabel);
  report.scores = seg_scores(pred_all, truth_all, model.classes(), kIgnoreLabel);
  report.noisy_pixels = noisy_entropy.size();
  if (!noisy_entropy.empty()) report.noisy_entropy_median = median(noisy_entropy);
  if (!clean_entropy.empty()) report.clean_entropy_median = median(clean_entropy);
  return report;
}

void write_regression_predictions(std::ostream& out, const std::vector<RegressionPrediction>& preds) {
  out << "index,mean,epistemic_var,aleatoric_var\n"
      << std::setprecision(std::numeric_limits<double>::max_digits10);
  std::size_t index = 0;
  for (const auto& pred : preds) {
    for (const auto& px : pred.pixels) {
      out << index++ << ',' << px.mean << ',' << px.epistemic_var << ',' << px.aleatoric_var << '\n';
    }
  }
}

void write_class_predictions(std::ostream& out, const std::vector<ClassPrediction>& preds) {
  out << "index,class,prob,entropy\n" << std::setprecision(std::numeric_limits<double>::max_digits10);
  std::size_t index = 0;
  for (const auto& pred : preds) {
    for (std::size_t s = 0; s < pred.labels.size(); ++s) {
      const auto k = static_cast<std::size_t>(pred.labels[s]);
      out << index++ << ',' << k << ',' << pred.probs[s * pred.classes + k] << ',' << pred.entropy[s]
          << '\n';
    }
  }
}

}  // namespace fvi
