#include <doctest.h>

#include <cmath>
#include <numbers>
#include <random>
#include <sstream>

#include "fvi/cnngp_kernel.hpp"
#include "fvi/error.hpp"

using namespace fvi;

namespace {

Tensor random_input(Shape shape, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Tensor t(shape);
  for (auto& v : t.data) v = unit(rng);
  return t;
}

KernelMaps random_maps(std::size_t h, std::size_t w, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.1, 2.0);
  std::uniform_real_distribution<double> corr(-1.0, 1.0);
  KernelMaps m{Map2d(h, w), Map2d(h, w), Map2d(h, w)};
  for (std::size_t s = 0; s < h * w; ++s) {
    m.var_i.values[s] = unit(rng);
    m.var_j.values[s] = unit(rng);
    m.cross.values[s] = corr(rng) * std::sqrt(m.var_i.values[s] * m.var_j.values[s]);
  }
  return m;
}

void check_cauchy_schwarz(const KernelMaps& m) {
  for (std::size_t s = 0; s < m.cross.values.size(); ++s) {
    CHECK(m.var_i.values[s] >= 0.0);
    CHECK(m.var_j.values[s] >= 0.0);
    CHECK(std::abs(m.cross.values[s]) <= std::sqrt(m.var_i.values[s] * m.var_j.values[s]) + 1e-12);
  }
}

}  // namespace

TEST_SUITE("cnngp_kernel") {
  TEST_CASE("relu_moment closed-form cases") {
    CHECK(relu_moment(1.0, 1.0, 1.0) == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(relu_moment(1.0, 1.0, 0.0) == doctest::Approx(0.5 / std::numbers::pi).epsilon(1e-15));
    CHECK(relu_moment(0.0, 3.0, 0.0) == 0.0);
    CHECK(relu_moment(2.0, 2.0, -2.0) == doctest::Approx(0.0).epsilon(1e-15));
    CHECK_THROWS_AS(relu_moment(1.0, 1.0, 1.1), DomainError);
    CHECK_THROWS_AS(relu_moment(-1.0, 1.0, 0.0), DomainError);
  }

  TEST_CASE("relu_moment matches a bivariate normal Monte Carlo estimate") {
    const double vi = 2.0, vj = 1.0, c = 0.7;
    std::mt19937_64 rng(21);
    std::normal_distribution<double> normal;
    const double a = std::sqrt(vi);
    const double b = c / a;
    const double d = std::sqrt(vj - b * b);
    const std::size_t n = 1000000;
    double sum = 0.0, sum_sq = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      const double z1 = normal(rng), z2 = normal(rng);
      const double u = a * z1;
      const double w = b * z1 + d * z2;
      const double prod = std::max(u, 0.0) * std::max(w, 0.0);
      sum += prod;
      sum_sq += prod * prod;
    }
    const double mean = sum / n;
    const double se = std::sqrt((sum_sq / n - mean * mean) / n);
    CHECK(std::abs(relu_moment(vi, vj, c) - mean) <= 3.0 * se);
  }

  TEST_CASE("conv_propagate: identity 1x1 conv and constant maps") {
    std::mt19937_64 rng(22);
    const KernelMaps m = random_maps(5, 6, rng);
    const PriorConv unit{1, 1, 1, 0, 1.0, 0.0};
    const KernelMaps same = conv_propagate(unit, m);
    CHECK(same.var_i.values == m.var_i.values);
    CHECK(same.var_j.values == m.var_j.values);
    CHECK(same.cross.values == m.cross.values);

    const double a = 0.7;
    const KernelMaps flat{Map2d(6, 6, a), Map2d(6, 6, a), Map2d(6, 6, a)};
    const PriorConv conv{3, 3, 1, 1, 0.2, 0.08};
    const KernelMaps out = conv_propagate(conv, flat);
    for (std::size_t y = 1; y < 5; ++y) {
      for (std::size_t x = 1; x < 5; ++x) {
        CHECK(out.cross.at(y, x) == doctest::Approx(0.08 + 0.2 * a).epsilon(1e-14));
      }
    }
    // Corner windows see 4 of 9 taps; padding counts as zeros in the mean.
    CHECK(out.var_i.at(0, 0) == doctest::Approx(0.08 + 0.2 * a * 4.0 / 9.0).epsilon(1e-14));
  }

  TEST_CASE("conv_propagate respects stride and output size") {
    const PriorConv strided{3, 3, 2, 1, 1.0, 0.0};
    CHECK(conv_output_size(strided, 8, 8) == std::pair<std::size_t, std::size_t>{4, 4});
    std::mt19937_64 rng(23);
    const KernelMaps out = conv_propagate(strided, random_maps(8, 8, rng));
    CHECK(out.cross.height == 4);
    CHECK(out.cross.width == 4);
  }

  TEST_CASE("upsample_propagate replicates values") {
    std::mt19937_64 rng(24);
    const KernelMaps m = random_maps(2, 2, rng);
    const KernelMaps one = upsample_propagate(PriorUpsample{1, 0, 0}, m);
    CHECK(one.cross.values == m.cross.values);
    const KernelMaps up = upsample_propagate(PriorUpsample{2, 0, 0}, m);
    REQUIRE(up.cross.height == 4);
    for (std::size_t y = 0; y < 4; ++y) {
      for (std::size_t x = 0; x < 4; ++x) CHECK(up.cross.at(y, x) == m.cross.at(y / 2, x / 2));
    }
    const KernelMaps sized = upsample_propagate(PriorUpsample{0, 3, 5}, m);
    CHECK(sized.var_i.height == 3);
    CHECK(sized.var_i.width == 5);
  }

  TEST_CASE("Cauchy-Schwarz holds after every layer") {
    const ArchSpec arch = builtin_arch("kernel-check");
    std::mt19937_64 rng(25);
    const Tensor xi = random_input(arch.input, rng);
    const Tensor xj = random_input(arch.input, rng);
    KernelMaps m = input_maps(xi, xj);
    check_cauchy_schwarz(m);
    for (const auto& layer : arch.layers) {
      if (const auto* conv = std::get_if<PriorConv>(&layer)) {
        m = conv_propagate(*conv, m);
      } else if (const auto* up = std::get_if<PriorUpsample>(&layer)) {
        m = upsample_propagate(*up, m);
      } else {
        m = relu_propagate(m);
      }
      check_cauchy_schwarz(m);
    }
  }

  TEST_CASE("equivalent_kernel symmetry and degenerate weights") {
    for (const char* name : {"regression1d", "depth8", "seg8", "kernel-check"}) {
      const ArchSpec arch = builtin_arch(name);
      std::mt19937_64 rng(26);
      const Tensor xi = random_input(arch.input, rng);
      const Tensor xj = random_input(arch.input, rng);
      CHECK(equivalent_kernel(arch, xi, xj) == equivalent_kernel(arch, xj, xi));
      const KernelMaps start = input_maps(xi, xi);
      CHECK(start.cross.values == start.var_i.values);
      CHECK(equivalent_kernel(arch, xi, xi).size() == output_shape(arch).plane());
    }
    ArchSpec flat;
    flat.input = Shape{1, 4, 4};
    flat.layers = {PriorConv{3, 3, 1, 1, 0.0, 0.3}};
    std::mt19937_64 rng(27);
    for (const double v : equivalent_kernel(flat, random_input(flat.input, rng), random_input(flat.input, rng))) {
      CHECK(v == doctest::Approx(0.3).epsilon(1e-15));
    }
  }

  TEST_CASE("input maps average over channels") {
    Tensor a(Shape{2, 1, 1}, std::vector<double>{1.0, 3.0});
    Tensor b(Shape{2, 1, 1}, std::vector<double>{2.0, -1.0});
    const KernelMaps m = input_maps(a, b);
    CHECK(m.var_i.values[0] == doctest::Approx(5.0));
    CHECK(m.var_j.values[0] == doctest::Approx(2.5));
    CHECK(m.cross.values[0] == doctest::Approx(-0.5));
    CHECK_THROWS_AS(input_maps(a, Tensor(Shape{1, 2, 1})), DomainError);
  }

  TEST_CASE("prior_structured_cov: single input, duplicates, PSD batches") {
    ArchSpec arch = builtin_arch("depth8");
    arch.noise_var = 0.1;
    std::mt19937_64 rng(28);
    const Tensor x = random_input(arch.input, rng);
    const GaussianBatch one = prior_structured_cov(arch, {x});
    const auto var = equivalent_kernel(arch, x, x);
    REQUIRE(one.cov.dim() == var.size());
    for (std::size_t p = 0; p < var.size(); ++p) CHECK(one.cov.at(0, 0, p) == doctest::Approx(var[p] + 0.1));
    for (const double m : one.mean) CHECK(m == arch.prior_mean);

    arch.noise_var = 0.0;
    const GaussianBatch dup = prior_structured_cov(arch, {x, x});
    for (const auto& m : per_pixel_view(dup.cov).pixels) {
      const Eigen::VectorXd e = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(m).eigenvalues();
      CHECK(std::abs(e(0)) <= 1e-12 * e(1));
    }

    const GaussianBatch batch = prior_structured_cov(
        arch, {random_input(arch.input, rng), random_input(arch.input, rng), random_input(arch.input, rng)});
    for (const auto& m : per_pixel_view(batch.cov).pixels) {
      CHECK(Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(m).eigenvalues().minCoeff() >= -1e-9);
    }
  }

  TEST_CASE("prior tiles the spatial kernel over output channels") {
    const ArchSpec arch = builtin_arch("seg8");
    REQUIRE(arch.output_channels > 1);
    std::mt19937_64 rng(29);
    const Tensor a = random_input(arch.input, rng);
    const Tensor b = random_input(arch.input, rng);
    const GaussianBatch g = prior_structured_cov(arch, {a, b});
    const auto cross = equivalent_kernel(arch, a, b);
    const std::size_t plane = cross.size();
    CHECK(g.cov.dim() == plane * arch.output_channels);
    for (std::size_t k = 0; k < arch.output_channels; ++k) {
      for (std::size_t s = 0; s < plane; ++s) CHECK(g.cov.at(0, 1, k * plane + s) == cross[s]);
    }
  }

  TEST_CASE("architecture text round trip and validation") {
    for (const char* name : {"regression1d", "depth8", "seg8", "kernel-check"}) {
      const ArchSpec arch = builtin_arch(name);
      std::stringstream ss;
      write_arch(ss, arch);
      const ArchSpec back = parse_arch(ss);
      std::stringstream again;
      write_arch(again, back);
      std::stringstream first;
      write_arch(first, arch);
      CHECK(again.str() == first.str());
    }
    std::istringstream bad("input 1 8 8\npool size=2\n");
    CHECK_THROWS_AS(parse_arch(bad), DomainError);
    ArchSpec negative = builtin_arch("depth8");
    negative.noise_var = -1.0;
    CHECK_THROWS_AS(validate(negative), DomainError);
    CHECK_THROWS_AS(builtin_arch("no-such-arch"), DomainError);
  }
}
