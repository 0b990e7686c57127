#include "fvi/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numeric>
#include <ostream>

#include "fvi/error.hpp"

namespace fvi {

namespace {

double level(std::size_t j) { return static_cast<double>(j + 1) / kCalibrationLevels; }

}  // namespace

CalibrationResult regression_calibration(const std::vector<std::vector<GaussianPrediction>>& preds,
                                         const std::vector<std::vector<double>>& truths) {
  if (preds.size() != truths.size()) throw DomainError("regression_calibration: group count mismatch");
  CalibrationResult out;
  out.curve.levels.resize(kCalibrationLevels);
  out.curve.observed.assign(kCalibrationLevels, 0.0);
  out.curve.counts.assign(kCalibrationLevels, 0);
  for (std::size_t j = 0; j < kCalibrationLevels; ++j) out.curve.levels[j] = level(j);

  std::size_t images = 0;
  for (std::size_t g = 0; g < preds.size(); ++g) {
    if (preds[g].size() != truths[g].size()) throw DomainError("regression_calibration: size mismatch");
    std::vector<std::size_t> inside(kCalibrationLevels, 0);
    std::size_t n = 0;
    for (std::size_t s = 0; s < preds[g].size(); ++s) {
      const double y = truths[g][s];
      if (!std::isfinite(y)) continue;
      const auto& pr = preds[g][s];
      if (!(pr.var > 0.0)) throw DomainError("regression_calibration: variance must be > 0");
      const double u = std::erf(std::abs(y - pr.mean) / std::sqrt(2.0 * pr.var));
      ++n;
      for (std::size_t j = 0; j < kCalibrationLevels; ++j) {
        if (u < level(j)) ++inside[j];
      }
    }
    if (n == 0) continue;
    ++images;
    double score = 0.0;
    for (std::size_t j = 0; j < kCalibrationLevels; ++j) {
      const double obs = static_cast<double>(inside[j]) / static_cast<double>(n);
      score += std::abs(obs - level(j));
      out.curve.observed[j] += obs;
      out.curve.counts[j] += n;
    }
    out.score += score / kCalibrationLevels;
  }
  if (images == 0) throw DomainError("regression_calibration: no finite truths");
  out.score /= static_cast<double>(images);
  for (double& o : out.curve.observed) o /= static_cast<double>(images);
  return out;
}

CalibrationResult classification_calibration(const std::vector<ClassImage>& images,
                                             int ignore_label) {
  CalibrationResult out;
  std::vector<double> pooled_conf(kCalibrationLevels, 0.0), pooled_hits(kCalibrationLevels, 0.0);
  std::vector<std::size_t> pooled_n(kCalibrationLevels, 0);
  std::size_t used = 0;
  for (const ClassImage& img : images) {
    const std::size_t k = img.classes;
    if (k == 0 || img.probs.size() != img.labels.size() * k) {
      throw DomainError("classification_calibration: probs/labels shape mismatch");
    }
    std::vector<double> conf(kCalibrationLevels, 0.0), hits(kCalibrationLevels, 0.0);
    std::vector<std::size_t> count(kCalibrationLevels, 0);
    std::size_t n = 0;
    for (std::size_t s = 0; s < img.labels.size(); ++s) {
      if (img.labels[s] == ignore_label) continue;
      const double* p = img.probs.data() + s * k;
      const auto best = static_cast<std::size_t>(std::max_element(p, p + k) - p);
      const double top = p[best];
      const auto bin = std::min<std::size_t>(kCalibrationLevels - 1,
                                             static_cast<std::size_t>(top * kCalibrationLevels));
      conf[bin] += top;
      hits[bin] += static_cast<int>(best) == img.labels[s] ? 1.0 : 0.0;
      ++count[bin];
      ++n;
    }
    if (n == 0) continue;
    ++used;
    double score = 0.0;
    for (std::size_t b = 0; b < kCalibrationLevels; ++b) {
      if (count[b] == 0) continue;
      const double nb = static_cast<double>(count[b]);
      score += nb / static_cast<double>(n) * std::abs(hits[b] / nb - conf[b] / nb);
      pooled_conf[b] += conf[b];
      pooled_hits[b] += hits[b];
      pooled_n[b] += count[b];
    }
    out.score += score;
  }
  if (used == 0) throw DomainError("classification_calibration: no labelled pixels");
  out.score /= static_cast<double>(used);
  for (std::size_t b = 0; b < kCalibrationLevels; ++b) {
    if (pooled_n[b] == 0) continue;
    const double nb = static_cast<double>(pooled_n[b]);
    out.curve.levels.push_back(pooled_conf[b] / nb);
    out.curve.observed.push_back(pooled_hits[b] / nb);
    out.curve.counts.push_back(pooled_n[b]);
  }
  return out;
}

RegressionErrors regression_errors(std::span<const double> pred, std::span<const double> truth) {
  if (pred.size() != truth.size()) throw DomainError("regression_errors: size mismatch");
  double rel = 0.0, lg = 0.0, sq = 0.0;
  std::size_t n_rel = 0, n_log = 0, n_sq = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double y = truth[i];
    const double yh = pred[i];
    if (!std::isfinite(y)) continue;
    sq += (yh - y) * (yh - y);
    ++n_sq;
    if (y > 0.0) {
      rel += std::abs(yh - y) / y;
      ++n_rel;
      if (yh > 0.0) {
        lg += std::abs(std::log10(yh) - std::log10(y));
        ++n_log;
      }
    }
  }
  const auto mean = [](double total, std::size_t n) {
    return n == 0 ? std::numeric_limits<double>::quiet_NaN() : total / static_cast<double>(n);
  };
  return {mean(rel, n_rel), mean(lg, n_log), std::sqrt(mean(sq, n_sq))};
}

SegScores seg_scores(std::span<const int> pred, std::span<const int> truth, std::size_t classes,
                     int ignore_label) {
  if (pred.size() != truth.size()) throw DomainError("seg_scores: size mismatch");
  std::vector<std::size_t> inter(classes, 0), uni(classes, 0);
  std::size_t correct = 0, n = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (truth[i] == ignore_label) continue;
    ++n;
    const int t = truth[i];
    const int p = pred[i];
    if (t == p) ++correct;
    for (std::size_t c = 0; c < classes; ++c) {
      const bool in_t = t == static_cast<int>(c);
      const bool in_p = p == static_cast<int>(c);
      inter[c] += in_t && in_p;
      uni[c] += in_t || in_p;
    }
  }
  SegScores out;
  std::size_t present = 0;
  for (std::size_t c = 0; c < classes; ++c) {
    if (uni[c] == 0) continue;
    out.mean_iou += static_cast<double>(inter[c]) / static_cast<double>(uni[c]);
    ++present;
  }
  out.mean_iou = present == 0 ? 0.0 : out.mean_iou / static_cast<double>(present);
  out.accuracy = n == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(n);
  return out;
}

namespace {

std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> rank(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t t = i; t <= j; ++t) rank[idx[t]] = r;
    i = j + 1;
  }
  return rank;
}

}  // namespace

double spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.size() < 2) throw DomainError("spearman: need two equal series");
  const auto ra = average_ranks(a);
  const auto rb = average_ranks(b);
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

void write_calibration_csv(std::ostream& out, const CalibrationCurve& curve) {
  out << "level,observed\n" << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (std::size_t j = 0; j < curve.levels.size(); ++j) {
    out << curve.levels[j] << ',' << curve.observed[j] << '\n';
  }
}

}  // namespace fvi
