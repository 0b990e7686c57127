#include <doctest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "fvi/block_cov.hpp"
#include "fvi/error.hpp"
#include "fvi_checks/oracles.hpp"

using namespace fvi;
using fvi::checks::dense_gaussian_kl;
using fvi::checks::dense_logdet;
using fvi::checks::dense_of;
using fvi::checks::random_pd;

namespace {

double max_abs(const Eigen::MatrixXd& m) { return m.cwiseAbs().maxCoeff(); }

Eigen::VectorXd as_vector(const std::vector<double>& v) {
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

}  // namespace

TEST_SUITE("block_cov") {
  TEST_CASE("to_dense places block entries on matching pixel diagonals") {
    StructuredCov single(1, 2);
    single.set(0, 0, 0, 1.0);
    single.set(0, 0, 1, 2.0);
    Eigen::MatrixXd expect = Eigen::Vector2d(1.0, 2.0).asDiagonal();
    CHECK(to_dense(single) == expect);

    StructuredCov pair(2, 1);
    pair.set(0, 0, 0, 2.0);
    pair.set(1, 1, 0, 2.0);
    pair.set(0, 1, 0, 1.0);
    Eigen::Matrix2d two;
    two << 2, 1, 1, 2;
    CHECK(to_dense(pair) == Eigen::MatrixXd(two));

    std::mt19937_64 rng(1);
    const StructuredCov k = random_pd(3, 4, rng);
    const Eigen::MatrixXd d = to_dense(k);
    CHECK((d.array() != 0.0).count() == 36);
    CHECK(d == dense_of(k));
  }

  TEST_CASE("per-pixel view indexing and lossless round trip") {
    const PerPixelView eye = per_pixel_view(StructuredCov::identity(3, 4));
    REQUIRE(eye.pixels.size() == 4);
    for (const auto& m : eye.pixels) CHECK(m == Eigen::MatrixXd::Identity(3, 3));

    StructuredCov k(2, 2);
    k.set(0, 1, 0, 3.0);
    k.set(0, 1, 1, 4.0);
    const PerPixelView v = per_pixel_view(k);
    CHECK(v.pixels[0](0, 1) == 3.0);
    CHECK(v.pixels[1](0, 1) == 4.0);
    CHECK(v.pixels[1](1, 0) == 4.0);

    std::mt19937_64 rng(2);
    const StructuredCov r = random_pd(5, 7, rng);
    CHECK(from_per_pixel_view(per_pixel_view(r)) == r);
  }

  TEST_CASE("schur_inverse hand cases") {
    CHECK(schur_inverse(StructuredCov::identity(4, 3)) == StructuredCov::identity(4, 3));
    StructuredCov k(1, 2);
    k.set(0, 0, 0, 2.0);
    k.set(0, 0, 1, 4.0);
    const StructuredCov inv = schur_inverse(k);
    CHECK(inv.at(0, 0, 0) == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(inv.at(0, 0, 1) == doctest::Approx(0.25).epsilon(1e-15));
  }

  TEST_CASE("schur_inverse matches dense inversion and is an involution") {
    std::mt19937_64 rng(3);
    for (std::size_t b = 1; b <= 6; ++b) {
      for (const std::size_t p : {1u, 4u, 16u, 64u}) {
        const StructuredCov k = random_pd(b, p, rng);
        const StructuredCov inv = schur_inverse(k);
        CHECK(inv.is_symmetric());
        CHECK(max_abs(to_dense(inv) - dense_of(k).inverse()) <= 1e-8);
        CHECK(max_abs(to_dense(schur_inverse(inv)) - dense_of(k)) <= 1e-6);
      }
    }
    const StructuredCov k = random_pd(5, 16, rng);
    CHECK(max_abs(to_dense(schur_inverse(k)) - dense_of(k).inverse()) <= 1e-8);
  }

  TEST_CASE("logdet hand cases and per-pixel sum") {
    CHECK(logdet(StructuredCov::identity(3, 5)) == 0.0);
    StructuredCov twos(2, 3);
    for (std::size_t i = 0; i < 2; ++i) {
      for (std::size_t p = 0; p < 3; ++p) twos.set(i, i, p, 2.0);
    }
    CHECK(logdet(twos) == doctest::Approx(6.0 * std::log(2.0)).epsilon(1e-14));

    std::mt19937_64 rng(4);
    for (int rep = 0; rep < 20; ++rep) {
      const StructuredCov k = random_pd(4, 8, rng);
      double per_pixel = 0.0;
      for (const auto& m : per_pixel_view(k).pixels) per_pixel += dense_logdet(m);
      const double ld = logdet(k);
      CHECK(std::abs(ld - per_pixel) <= 1e-6 * std::abs(per_pixel));
      CHECK(std::abs(ld - dense_logdet(dense_of(k))) <= 1e-6 * std::abs(per_pixel));
      CHECK(schur_factorize(k).logdet == ld);
    }
  }

  TEST_CASE("singular pivots are rejected") {
    StructuredCov dup(2, 1);
    dup.set(0, 0, 0, 1.0);
    dup.set(1, 1, 0, 1.0);
    dup.set(0, 1, 0, 1.0);
    CHECK_THROWS_AS(schur_inverse(dup), NonPositiveDefinite);
    CHECK_THROWS_AS(logdet(dup), NonPositiveDefinite);
    CHECK_THROWS_AS(cholesky_per_pixel(dup), NonPositiveDefinite);
    CHECK_THROWS_AS(schur_inverse(StructuredCov(3, 2)), NonPositiveDefinite);
  }

  TEST_CASE("add_jitter shifts every per-pixel eigenvalue by eps") {
    std::mt19937_64 rng(5);
    const StructuredCov k = random_pd(3, 6, rng, 0.1);
    CHECK(add_jitter(k, 0.0) == k);
    CHECK(add_jitter(StructuredCov(2, 3), 1e-3) == [] {
      StructuredCov e(2, 3);
      for (std::size_t i = 0; i < 2; ++i) {
        for (std::size_t p = 0; p < 3; ++p) e.set(i, i, p, 1e-3);
      }
      return e;
    }());
    const auto before = per_pixel_view(k);
    const auto after = per_pixel_view(add_jitter(k, 0.25));
    for (std::size_t p = 0; p < before.pixels.size(); ++p) {
      const Eigen::VectorXd e0 = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(before.pixels[p]).eigenvalues();
      const Eigen::VectorXd e1 = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(after.pixels[p]).eigenvalues();
      CHECK(e1.minCoeff() - e0.minCoeff() == doctest::Approx(0.25).epsilon(1e-12));
    }
  }

  TEST_CASE("per-pixel Cholesky factors") {
    for (const auto& l : cholesky_per_pixel(StructuredCov::identity(3, 2)).pixels) {
      CHECK(l == Eigen::MatrixXd::Identity(3, 3));
    }
    StructuredCov k(2, 1);
    k.set(0, 0, 0, 4.0);
    k.set(0, 1, 0, 2.0);
    k.set(1, 1, 0, 5.0);
    Eigen::Matrix2d expect;
    expect << 2, 0, 1, 2;
    CHECK(max_abs(cholesky_per_pixel(k).pixels[0] - expect) <= 1e-15);

    std::mt19937_64 rng(6);
    const StructuredCov r = random_pd(5, 9, rng);
    const auto view = per_pixel_view(r);
    const auto factors = cholesky_per_pixel(r);
    for (std::size_t p = 0; p < view.pixels.size(); ++p) {
      const auto& l = factors.pixels[p];
      CHECK(max_abs(l * l.transpose() - view.pixels[p]) <= 1e-10);
      CHECK(max_abs(Eigen::MatrixXd(l.triangularView<Eigen::StrictlyUpper>())) == 0.0);
    }
  }

  TEST_CASE("semidefinite factor reconstructs a rank-deficient matrix") {
    StructuredCov ones(3, 2);
    for (std::size_t i = 0; i < 3; ++i) {
      for (std::size_t j = i; j < 3; ++j) {
        for (std::size_t p = 0; p < 2; ++p) ones.set(i, j, p, 1.0);
      }
    }
    const auto factors = cholesky_per_pixel_semidefinite(ones);
    for (const auto& l : factors.pixels) {
      CHECK(max_abs(l * l.transpose() - Eigen::MatrixXd::Ones(3, 3)) <= 1e-12);
    }
  }

  TEST_CASE("multiply and trace_product agree with dense algebra") {
    std::mt19937_64 rng(7);
    const StructuredCov a = random_pd(4, 5, rng);
    const StructuredCov b = random_pd(4, 5, rng);
    std::normal_distribution<double> normal;
    std::vector<double> x(20);
    for (auto& v : x) v = normal(rng);
    const Eigen::VectorXd dense = dense_of(a) * as_vector(x);
    CHECK((as_vector(multiply(a, x)) - dense).cwiseAbs().maxCoeff() <= 1e-12);
    CHECK(trace_product(a, b) == doctest::Approx((dense_of(a) * dense_of(b)).trace()).epsilon(1e-12));
  }

  TEST_CASE("sampling: zero covariance, determinism and moments") {
    const GaussianBatch flat({1.0, 2.0, 3.0, 4.0}, StructuredCov(2, 2));
    for (const auto& s : sample(flat, 5, 1)) CHECK(s == flat.mean);

    std::mt19937_64 rng(8);
    const GaussianBatch g({0.3, -0.2}, random_pd(2, 1, rng));
    CHECK(sample(g, 10, 42) == sample(g, 10, 42));
    CHECK(sample(g, 10, 42) != sample(g, 10, 43));

    const std::size_t n = 100000;
    const auto draws = sample(g, n, 9);
    Eigen::Vector2d mean = Eigen::Vector2d::Zero();
    Eigen::Matrix2d second = Eigen::Matrix2d::Zero();
    for (const auto& d : draws) {
      const Eigen::Vector2d v(d[0], d[1]);
      mean += v;
      second += v * v.transpose();
    }
    mean /= static_cast<double>(n);
    const Eigen::Matrix2d cov = second / static_cast<double>(n) - mean * mean.transpose();
    const Eigen::MatrixXd truth = dense_of(g.cov);
    for (int i = 0; i < 2; ++i) {
      CHECK(std::abs(mean(i) - g.mean[static_cast<std::size_t>(i)]) <= 3.0 * std::sqrt(truth(i, i) / n));
      for (int j = 0; j < 2; ++j) {
        // Var of a product of jointly Gaussian entries: s_ii s_jj + s_ij^2.
        const double se = std::sqrt((truth(i, i) * truth(j, j) + truth(i, j) * truth(i, j)) / n);
        CHECK(std::abs(cov(i, j) - truth(i, j)) <= 3.0 * se);
      }
    }
  }

  TEST_CASE("gaussian_kl: identities, scalar case and dense oracle") {
    std::mt19937_64 rng(10);
    const GaussianBatch p({0.1, 0.2, 0.3, 0.4, 0.5, 0.6}, random_pd(2, 3, rng));
    CHECK(std::abs(gaussian_kl(p, p)) <= 1e-12);

    StructuredCov one(1, 1);
    one.set(0, 0, 0, 1.0);
    CHECK(gaussian_kl(GaussianBatch({0.0}, one), GaussianBatch({1.0}, one)) ==
          doctest::Approx(0.5).epsilon(1e-15));

    std::normal_distribution<double> normal;
    for (int rep = 0; rep < 20; ++rep) {
      std::vector<double> mq(12), mp(12);
      for (auto& v : mq) v = normal(rng);
      for (auto& v : mp) v = normal(rng);
      const GaussianBatch q(mq, random_pd(3, 4, rng));
      const GaussianBatch pr(mp, random_pd(3, 4, rng));
      const double kl = gaussian_kl(q, pr);
      CHECK(kl >= -1e-9);
      CHECK(std::abs(kl - dense_gaussian_kl(as_vector(mq), dense_of(q.cov), as_vector(mp), dense_of(pr.cov))) <= 1e-8);
    }
  }

  TEST_CASE("gaussian_kl rejects mismatched shapes") {
    const GaussianBatch a({0.0, 0.0}, StructuredCov::identity(2, 1));
    const GaussianBatch b({0.0, 0.0}, StructuredCov::identity(1, 2));
    CHECK_THROWS_AS(gaussian_kl(a, b), DomainError);
    CHECK_THROWS_AS(GaussianBatch({0.0}, StructuredCov::identity(2, 1)), DomainError);
  }

  TEST_CASE("CSV dump round trip is exact") {
    std::mt19937_64 rng(11);
    const StructuredCov k = random_pd(3, 5, rng);
    std::stringstream ss;
    write_csv(ss, k);
    CHECK(read_csv(ss) == k);
    std::istringstream bad("B,P\n2,1\n0,0,0,nan-ish\n");
    CHECK_THROWS_AS(read_csv(bad), DomainError);
  }
}
