#pragma once

// Covariance algebra for BP x BP matrices made of a B x B grid of diagonal
// P x P blocks. Storage is one length-P vector per block, so every operation
// here costs O(B^k P) rather than O((BP)^k).

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

#include <Eigen/Dense>

namespace fvi {

/// Symmetric B x B grid of diagonal P x P blocks.
///
/// Both (i,j) and (j,i) are stored; the mutators keep them equal.
class StructuredCov {
 public:
  StructuredCov() = default;
  StructuredCov(std::size_t batch, std::size_t dim);

  static StructuredCov identity(std::size_t batch, std::size_t dim);

  std::size_t batch() const { return batch_; }
  std::size_t dim() const { return dim_; }

  std::span<const double> block(std::size_t i, std::size_t j) const {
    return {data_.data() + offset(i, j), dim_};
  }

  double at(std::size_t i, std::size_t j, std::size_t p) const {
    return data_[offset(i, j) + p];
  }

  /// Sets entry p of blocks (i,j) and (j,i).
  void set(std::size_t i, std::size_t j, std::size_t p, double value);
  void set_block(std::size_t i, std::size_t j, std::span<const double> diag);
  /// Adds to entry p of (i,j) and, when i != j, of (j,i).
  void add(std::size_t i, std::size_t j, std::size_t p, double value);

  bool is_symmetric() const;

  friend bool operator==(const StructuredCov&, const StructuredCov&) = default;

 private:
  std::size_t offset(std::size_t i, std::size_t j) const {
    return (i * batch_ + j) * dim_;
  }

  std::size_t batch_ = 0;
  std::size_t dim_ = 0;
  std::vector<double> data_;
};

/// Multi-output Gaussian over a batch: mean[i * P + p] pairs with cov block i.
struct GaussianBatch {
  std::vector<double> mean;
  StructuredCov cov;

  GaussianBatch() = default;
  GaussianBatch(std::vector<double> m, StructuredCov c);
};

/// The P per-pixel B x B matrices M_p[i][j] = blocks[i][j][p]. The full
/// matrix is permutation-similar to the block diagonal of these.
struct PerPixelView {
  std::vector<Eigen::MatrixXd> pixels;
};

Eigen::MatrixXd to_dense(const StructuredCov& k);
PerPixelView per_pixel_view(const StructuredCov& k);
StructuredCov from_per_pixel_view(const PerPixelView& view);

/// Pivot threshold below which a Schur complement entry counts as singular.
inline constexpr double kPivotTolerance = 1e-12;

struct SchurFactorization {
  StructuredCov inverse;
  double logdet = 0.0;
};

/// Grows K^-1 one block row at a time with the block-inversion formula and
/// accumulates log det from the Schur complements. Throws NonPositiveDefinite
/// when a pivot entry falls below kPivotTolerance.
SchurFactorization schur_factorize(const StructuredCov& k);

StructuredCov schur_inverse(const StructuredCov& k);
double logdet(const StructuredCov& k);

StructuredCov add_jitter(StructuredCov k, double eps);

/// Lower Cholesky factor of every M_p. Throws NonPositiveDefinite.
PerPixelView cholesky_per_pixel(const StructuredCov& k);

/// Like cholesky_per_pixel but accepts positive semi-definite M_p: columns
/// whose pivot is within tolerance of zero are left zero.
PerPixelView cholesky_per_pixel_semidefinite(const StructuredCov& k);

/// y = K x for x laid out as x[i * P + p].
std::vector<double> multiply(const StructuredCov& k, std::span<const double> x);

/// tr(A B) for two structured matrices of equal shape.
double trace_product(const StructuredCov& a, const StructuredCov& b);

/// n_samples draws of mean + L_p eps, L_p the per-pixel factor.
std::vector<std::vector<double>> sample(const GaussianBatch& g, std::size_t n_samples,
                                        std::uint64_t seed);

/// KL(q || p) in closed form using only structured operations.
double gaussian_kl(const GaussianBatch& q, const GaussianBatch& p);

/// Debug dump: header `B,P`, then `i,j,p,value` rows for the nonzeros.
void write_csv(std::ostream& out, const StructuredCov& k);
StructuredCov read_csv(std::istream& in);

}  // namespace fvi
