#include "fvi/toytasks.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <ostream>
#include <random>

#include "fvi/error.hpp"

namespace fvi {

namespace {

constexpr std::size_t kSide = 8;
constexpr std::size_t kPlane = kSide * kSide;

}  // namespace

Tensor encode_regression_1d(double x) {
  Tensor t(Shape{1, 1, kRegression1dWidth});
  const double u = (x + kRegression1dRange) / (2.0 * kRegression1dRange);
  std::fill(t.data.begin(), t.data.end(), u);
  return t;
}

double regression_1d_mean(double x) { return std::sin(2.0 * x); }

double regression_1d_noise_sd(double x) { return 0.05 * (1.0 + x * x); }

ToyDataset gen_regression_1d(std::size_t n_train, std::uint64_t seed, std::size_t n_test,
                             std::size_t n_ood) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> in_range(-kRegression1dRange, kRegression1dRange);
  std::uniform_real_distribution<double> far(5.0, 6.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  ToyDataset out;
  out.name = "regression1d";
  out.seed = seed;
  const auto fill = [&](std::size_t n, Dataset& d, std::vector<double>& coord) {
    for (std::size_t i = 0; i < n; ++i) {
      const double x = in_range(rng);
      const double y = regression_1d_mean(x) + regression_1d_noise_sd(x) * normal(rng);
      d.inputs.push_back(encode_regression_1d(x));
      d.targets.push_back({y});
      coord.push_back(x);
    }
  };
  fill(n_train, out.train, out.train_coord);
  fill(n_test, out.test, out.test_coord);
  for (std::size_t i = 0; i < n_ood; ++i) {
    const double x = (i % 2 == 0 ? 1.0 : -1.0) * far(rng);
    out.ood.push_back(encode_regression_1d(x));
    out.ood_coord.push_back(x);
  }
  return out;
}

ToyDataset gen_minidepth(std::size_t n_train, std::uint64_t seed, std::size_t n_test) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> count(1, 3), extent(2, 4), corner(0, kSide - 2);
  std::uniform_real_distribution<double> near_depth(0.1, 0.45);
  std::normal_distribution<double> noise(0.0, 0.02);
  ToyDataset out;
  out.name = "minidepth";
  out.seed = seed;

  struct Rect {
    int y0, x0, y1, x1;
    double depth;
  };
  const auto one = [&](Dataset& d) {
    Tensor img(Shape{1, kSide, kSide});
    std::vector<double> depth(kPlane);
    for (std::size_t y = 0; y < kSide; ++y) {
      const double t = static_cast<double>(y) / (kSide - 1);
      for (std::size_t x = 0; x < kSide; ++x) {
        depth[y * kSide + x] = 0.9 - 0.4 * t;
        img.data[y * kSide + x] = 0.1 + 0.1 * t;
      }
    }
    std::vector<Rect> rects(static_cast<std::size_t>(count(rng)));
    for (auto& r : rects) {
      r.y0 = corner(rng);
      r.x0 = corner(rng);
      r.y1 = std::min<int>(kSide, r.y0 + extent(rng));
      r.x1 = std::min<int>(kSide, r.x0 + extent(rng));
      r.depth = near_depth(rng);
    }
    // Far to near, so nearer rectangles overwrite.
    std::sort(rects.begin(), rects.end(), [](const Rect& a, const Rect& b) { return a.depth > b.depth; });
    for (const auto& r : rects) {
      for (int y = r.y0; y < r.y1; ++y) {
        for (int x = r.x0; x < r.x1; ++x) {
          depth[y * kSide + x] = r.depth;
          img.data[y * kSide + x] = 1.0 - r.depth;
        }
      }
    }
    for (double& v : img.data) v = std::clamp(v + noise(rng), 0.0, 1.0);
    d.inputs.push_back(std::move(img));
    d.targets.push_back(std::move(depth));
  };
  for (std::size_t i = 0; i < n_train; ++i) one(out.train);
  for (std::size_t i = 0; i < n_test; ++i) one(out.test);
  return out;
}

ToyDataset gen_miniseg(std::size_t n_train, std::uint64_t seed, std::size_t n_test) {
  constexpr double kIntensity[kSegClasses] = {0.15, 0.5, 0.85};
  constexpr double kAmbiguous = 0.675;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> pos(0.0, static_cast<double>(kSide));
  std::uniform_int_distribution<int> patch_corner(1, kSide - 3);
  std::bernoulli_distribution coin(0.5);
  std::normal_distribution<double> noise(0.0, 0.04);
  ToyDataset out;
  out.name = "miniseg";
  out.seed = seed;

  const auto one = [&](Dataset& d, std::vector<int>& mask) {
    double sy[kSegClasses], sx[kSegClasses];
    for (std::size_t k = 0; k < kSegClasses; ++k) {
      sy[k] = pos(rng);
      sx[k] = pos(rng);
    }
    Tensor img(Shape{1, kSide, kSide});
    std::vector<double> labels(kPlane);
    mask.assign(kPlane, 0);
    for (std::size_t y = 0; y < kSide; ++y) {
      for (std::size_t x = 0; x < kSide; ++x) {
        std::size_t best = 0;
        double best_d = std::numeric_limits<double>::infinity();
        for (std::size_t k = 0; k < kSegClasses; ++k) {
          const double dy = static_cast<double>(y) + 0.5 - sy[k];
          const double dx = static_cast<double>(x) + 0.5 - sx[k];
          if (dy * dy + dx * dx < best_d) {
            best_d = dy * dy + dx * dx;
            best = k;
          }
        }
        img.data[y * kSide + x] = kIntensity[best];
        labels[y * kSide + x] = static_cast<double>(best);
      }
    }
    if (coin(rng)) {
      const int y0 = patch_corner(rng);
      const int x0 = patch_corner(rng);
      for (int y = y0; y < y0 + 2; ++y) {
        for (int x = x0; x < x0 + 2; ++x) {
          img.data[y * kSide + x] = kAmbiguous;
          labels[y * kSide + x] = coin(rng) ? 1.0 : 2.0;
          mask[y * kSide + x] = 1;
        }
      }
    }
    for (std::size_t y = 0; y < kSide; ++y) {
      for (std::size_t x = 0; x < kSide; ++x) {
        if (y == 0 || x == 0 || y == kSide - 1 || x == kSide - 1) {
          labels[y * kSide + x] = kIgnoreLabel;
        }
      }
    }
    for (double& v : img.data) v = std::clamp(v + noise(rng), 0.0, 1.0);
    d.inputs.push_back(std::move(img));
    d.targets.push_back(std::move(labels));
  };
  std::vector<int> mask;
  for (std::size_t i = 0; i < n_train; ++i) one(out.train, mask);
  for (std::size_t i = 0; i < n_test; ++i) {
    one(out.test, mask);
    out.test_noise_mask.push_back(mask);
  }
  return out;
}

ToyDataset gen_task(const std::string& task, std::size_t n_train, std::uint64_t seed,
                    std::size_t n_test) {
  if (task == "regression1d") return gen_regression_1d(n_train, seed, n_test);
  if (task == "minidepth") return gen_minidepth(n_train, seed, n_test);
  if (task == "miniseg") return gen_miniseg(n_train, seed, n_test);
  throw DomainError("unknown task '" + task + "' (regression1d, minidepth, miniseg)");
}

void write_dataset_csv(std::ostream& out, const ToyDataset& data) {
  out << std::setprecision(std::numeric_limits<double>::max_digits10);
  out << "split,index,n_inputs,n_targets,values...\n";
  const auto dump = [&](const char* split, const Dataset& d) {
    for (std::size_t i = 0; i < d.size(); ++i) {
      out << split << ',' << i << ',' << d.inputs[i].data.size() << ',' << d.targets[i].size();
      for (const double v : d.inputs[i].data) out << ',' << v;
      for (const double v : d.targets[i]) out << ',' << v;
      out << '\n';
    }
  };
  dump("train", data.train);
  dump("test", data.test);
  for (std::size_t i = 0; i < data.ood.size(); ++i) {
    out << "ood," << i << ',' << data.ood[i].data.size() << ",0";
    for (const double v : data.ood[i].data) out << ',' << v;
    out << '\n';
  }
}

void write_pgm(std::ostream& out, std::size_t height, std::size_t width,
               const std::vector<double>& values, double lo, double hi) {
  if (values.size() != height * width) throw DomainError("write_pgm: size mismatch");
  if (!(hi > lo)) throw DomainError("write_pgm: need hi > lo");
  out << "P2\n" << width << ' ' << height << "\n255\n";
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      const double t = std::clamp((values[y * width + x] - lo) / (hi - lo), 0.0, 1.0);
      out << static_cast<int>(std::lround(255.0 * t)) << (x + 1 == width ? '\n' : ' ');
    }
  }
}

}  // namespace fvi
