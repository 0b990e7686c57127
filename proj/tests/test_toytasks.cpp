#include <doctest.h>

#include <cmath>
#include <sstream>

#include "fvi/error.hpp"
#include "fvi/toytasks.hpp"

using namespace fvi;

namespace {

bool same_dataset(const Dataset& a, const Dataset& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a.inputs[i].data != b.inputs[i].data || a.targets[i] != b.targets[i]) return false;
  }
  return true;
}

}  // namespace

TEST_SUITE("toytasks") {
  TEST_CASE("1D regression: encoding, support and reproducibility") {
    const Tensor lo = encode_regression_1d(-3.0);
    CHECK(lo.shape == Shape{1, 1, kRegression1dWidth});
    for (const double v : lo.data) CHECK(v == 0.0);
    for (const double v : encode_regression_1d(3.0).data) CHECK(v == 1.0);

    const ToyDataset a = gen_regression_1d(200, 5, 50, 20);
    const ToyDataset b = gen_regression_1d(200, 5, 50, 20);
    CHECK(same_dataset(a.train, b.train));
    CHECK(a.ood_coord == b.ood_coord);
    CHECK_FALSE(same_dataset(a.train, gen_regression_1d(200, 6, 50, 20).train));
    CHECK(a.train.size() == 200);
    CHECK(a.test.size() == 50);
    CHECK(a.ood.size() == 20);
    for (std::size_t i = 0; i < a.train.size(); ++i) {
      CHECK(std::abs(a.train_coord[i]) <= kRegression1dRange);
      CHECK(std::isfinite(a.train.targets[i][0]));
      CHECK(a.train.inputs[i].data == encode_regression_1d(a.train_coord[i]).data);
    }
    for (const double x : a.ood_coord) {
      CHECK(std::abs(x) >= 5.0);
      CHECK(std::abs(x) <= 6.0);
    }
  }

  TEST_CASE("1D regression noise variance near the origin") {
    CHECK(regression_1d_noise_sd(0.0) * regression_1d_noise_sd(0.0) == doctest::Approx(0.0025));
    const ToyDataset d = gen_regression_1d(100000, 11, 1, 1);
    double ratio_sum = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < d.train.size(); ++i) {
      const double x = d.train_coord[i];
      if (std::abs(x) > 0.3) continue;
      const double r = (d.train.targets[i][0] - regression_1d_mean(x)) / regression_1d_noise_sd(x);
      ratio_sum += r * r;
      ++n;
    }
    REQUIRE(n > 5000);
    // Standardized residuals are N(0, 1): their mean square has SE sqrt(2 / n).
    CHECK(std::abs(ratio_sum / static_cast<double>(n) - 1.0) <= 3.0 * std::sqrt(2.0 / static_cast<double>(n)));
  }

  TEST_CASE("minidepth: range, reproducibility and occlusion layering") {
    const ToyDataset d = gen_minidepth(300, 3, 10);
    CHECK(same_dataset(d.train, gen_minidepth(300, 3, 10).train));
    for (std::size_t i = 0; i < d.train.size(); ++i) {
      const auto& depth = d.train.targets[i];
      const auto& img = d.train.inputs[i].data;
      for (std::size_t s = 0; s < depth.size(); ++s) {
        CHECK(depth[s] > 0.0);
        CHECK(depth[s] < 1.0);
        CHECK(img[s] >= 0.0);
        CHECK(img[s] <= 1.0);
        if (depth[s] < 0.5) {
          // A rectangle pixel shows the nearest rectangle covering it.
          CHECK(std::abs(img[s] - (1.0 - depth[s])) <= 0.12);
        }
      }
      for (std::size_t s = 0; s < depth.size(); ++s) {
        for (std::size_t t = 0; t < depth.size(); ++t) {
          if (depth[s] < 0.5 && depth[s] + 0.2 < depth[t]) CHECK(img[s] > img[t]);
        }
      }
    }
  }

  TEST_CASE("miniseg: label set, ignore border, balance and noise mask") {
    const ToyDataset d = gen_miniseg(1000, 4, 40);
    CHECK(same_dataset(d.test, gen_miniseg(1000, 4, 40).test));
    double counts[3] = {0, 0, 0};
    for (std::size_t i = 0; i < d.train.size(); ++i) {
      const auto& labels = d.train.targets[i];
      for (std::size_t y = 0; y < 8; ++y) {
        for (std::size_t x = 0; x < 8; ++x) {
          const int l = static_cast<int>(labels[y * 8 + x]);
          const bool border = y == 0 || x == 0 || y == 7 || x == 7;
          CHECK((border ? l == kIgnoreLabel : (l >= 0 && l < 3)));
          if (!border) counts[l] += 1.0;
        }
      }
    }
    const double total = counts[0] + counts[1] + counts[2];
    for (const double c : counts) {
      CHECK(c / total >= (1.0 / 3.0) * 0.8);
      CHECK(c / total <= (1.0 / 3.0) * 1.2);
    }
    REQUIRE(d.test_noise_mask.size() == d.test.size());
    std::size_t noisy_images = 0;
    for (std::size_t i = 0; i < d.test.size(); ++i) {
      std::size_t marked = 0;
      for (std::size_t s = 0; s < 64; ++s) {
        if (d.test_noise_mask[i][s] == 0) continue;
        ++marked;
        const int l = static_cast<int>(d.test.targets[i][s]);
        CHECK((l == 1 || l == 2));
      }
      CHECK((marked == 0 || marked == 4));
      noisy_images += marked > 0;
    }
    CHECK(noisy_images > 0);
    CHECK(noisy_images < d.test.size());
  }

  TEST_CASE("dispatch and dumps") {
    CHECK(gen_task("miniseg", 3, 1, 2).name == "miniseg");
    CHECK_THROWS_AS(gen_task("cityscapes", 3, 1, 2), DomainError);
    const ToyDataset d = gen_task("minidepth", 2, 1, 1);
    std::ostringstream csv;
    write_dataset_csv(csv, d);
    std::size_t lines = 0;
    for (const char ch : csv.str()) lines += ch == '\n';
    CHECK(lines == 1 + 3);
    CHECK(csv.str().find("train,0,64,64,") != std::string::npos);

    std::ostringstream pgm;
    write_pgm(pgm, 2, 2, {0.0, 0.5, 1.0, 2.0}, 0.0, 1.0);
    CHECK(pgm.str().rfind("P2\n2 2\n255\n", 0) == 0);
  }
}
