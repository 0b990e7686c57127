#include "fvi/block_cov.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <istream>
#include <limits>
#include <ostream>
#include <random>
#include <sstream>
#include <string>

#include "fvi/error.hpp"

namespace fvi {

StructuredCov::StructuredCov(std::size_t batch, std::size_t dim)
    : batch_(batch), dim_(dim), data_(batch * batch * dim, 0.0) {
  if (batch == 0 || dim == 0) {
    throw DomainError("StructuredCov needs B >= 1 and P >= 1");
  }
}

StructuredCov StructuredCov::identity(std::size_t batch, std::size_t dim) {
  StructuredCov k(batch, dim);
  for (std::size_t i = 0; i < batch; ++i) {
    for (std::size_t p = 0; p < dim; ++p) k.set(i, i, p, 1.0);
  }
  return k;
}

void StructuredCov::set(std::size_t i, std::size_t j, std::size_t p, double value) {
  data_[offset(i, j) + p] = value;
  data_[offset(j, i) + p] = value;
}

void StructuredCov::add(std::size_t i, std::size_t j, std::size_t p, double value) {
  data_[offset(i, j) + p] += value;
  if (i != j) data_[offset(j, i) + p] += value;
}

void StructuredCov::set_block(std::size_t i, std::size_t j, std::span<const double> diag) {
  if (diag.size() != dim_) throw DomainError("set_block: block length must equal P");
  for (std::size_t p = 0; p < dim_; ++p) set(i, j, p, diag[p]);
}

bool StructuredCov::is_symmetric() const {
  for (std::size_t i = 0; i < batch_; ++i) {
    for (std::size_t j = i + 1; j < batch_; ++j) {
      for (std::size_t p = 0; p < dim_; ++p) {
        if (at(i, j, p) != at(j, i, p)) return false;
      }
    }
  }
  return true;
}

GaussianBatch::GaussianBatch(std::vector<double> m, StructuredCov c)
    : mean(std::move(m)), cov(std::move(c)) {
  if (mean.size() != cov.batch() * cov.dim()) {
    throw DomainError("GaussianBatch: mean length must equal B * P");
  }
}

Eigen::MatrixXd to_dense(const StructuredCov& k) {
  const std::size_t b = k.batch(), n = k.dim();
  Eigen::MatrixXd dense = Eigen::MatrixXd::Zero(b * n, b * n);
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = 0; j < b; ++j) {
      for (std::size_t p = 0; p < n; ++p) dense(i * n + p, j * n + p) = k.at(i, j, p);
    }
  }
  return dense;
}

PerPixelView per_pixel_view(const StructuredCov& k) {
  const std::size_t b = k.batch();
  PerPixelView view;
  view.pixels.assign(k.dim(), Eigen::MatrixXd(b, b));
  for (std::size_t p = 0; p < k.dim(); ++p) {
    for (std::size_t i = 0; i < b; ++i) {
      for (std::size_t j = 0; j < b; ++j) view.pixels[p](i, j) = k.at(i, j, p);
    }
  }
  return view;
}

StructuredCov from_per_pixel_view(const PerPixelView& view) {
  if (view.pixels.empty()) throw DomainError("from_per_pixel_view: empty view");
  const auto b = static_cast<std::size_t>(view.pixels.front().rows());
  StructuredCov k(b, view.pixels.size());
  for (std::size_t p = 0; p < view.pixels.size(); ++p) {
    const auto& m = view.pixels[p];
    if (static_cast<std::size_t>(m.rows()) != b || m.cols() != m.rows()) {
      throw DomainError("from_per_pixel_view: every pixel matrix must be B x B");
    }
    for (std::size_t i = 0; i < b; ++i) {
      for (std::size_t j = i; j < b; ++j) k.set(i, j, p, m(i, j));
    }
  }
  return k;
}

SchurFactorization schur_factorize(const StructuredCov& k) {
  const std::size_t b = k.batch(), dim = k.dim();
  // Pixels are independent; running the whole recursion on one tile at a time
  // keeps the working set in cache so cost stays linear in P.
  constexpr std::size_t kTile = 128;

  // inv holds K^-1_{:n,:n} in its top-left n x n blocks after step n.
  StructuredCov inv(b, dim);
  double log_det = 0.0;
  std::vector<double> w(b * kTile);
  std::vector<double> schur(kTile);

  for (std::size_t p0 = 0; p0 < dim; p0 += kTile) {
    const std::size_t p1 = std::min(dim, p0 + kTile);
    const std::size_t len = p1 - p0;

    // n = 1: the leading block is diagonal, so its inverse is a reciprocal.
    for (std::size_t p = p0; p < p1; ++p) {
      const double pivot = k.at(0, 0, p);
      if (!(pivot > kPivotTolerance)) {
        throw NonPositiveDefinite("schur_inverse: leading block pivot " + std::to_string(pivot) +
                                  " at pixel " + std::to_string(p));
      }
      inv.set(0, 0, p, 1.0 / pivot);
      log_det += std::log(pivot);
    }

    for (std::size_t n = 1; n < b; ++n) {
      // w = K^-1_{:n,:n} K_{:n,n}: the n block column scaled by the current inverse.
      for (std::size_t a = 0; a < n; ++a) {
        double* wa = w.data() + a * kTile;
        std::fill(wa, wa + len, 0.0);
        for (std::size_t c = 0; c < n; ++c) {
          const double* inv_ac = inv.block(a, c).data() + p0;
          const double* k_cn = k.block(c, n).data() + p0;
          for (std::size_t q = 0; q < len; ++q) wa[q] += inv_ac[q] * k_cn[q];
        }
      }

      // S = K_{n,n} - K_{:n,n}^T K^-1_{:n,:n} K_{:n,n}
      const double* k_nn = k.block(n, n).data() + p0;
      std::copy(k_nn, k_nn + len, schur.begin());
      for (std::size_t a = 0; a < n; ++a) {
        const double* k_an = k.block(a, n).data() + p0;
        const double* wa = w.data() + a * kTile;
        for (std::size_t q = 0; q < len; ++q) schur[q] -= k_an[q] * wa[q];
      }
      for (std::size_t q = 0; q < len; ++q) {
        if (!(schur[q] > kPivotTolerance)) {
          throw NonPositiveDefinite("schur_inverse: Schur pivot " + std::to_string(schur[q]) +
                                    " at block " + std::to_string(n) + ", pixel " +
                                    std::to_string(p0 + q));
        }
        log_det += std::log(schur[q]);
        schur[q] = 1.0 / schur[q];
      }

      // A = K^-1 + w S^-1 w^T, B = -w S^-1, corner = S^-1.
      for (std::size_t a = 0; a < n; ++a) {
        const double* wa = w.data() + a * kTile;
        for (std::size_t c = a; c < n; ++c) {
          const double* wc = w.data() + c * kTile;
          for (std::size_t q = 0; q < len; ++q) inv.add(a, c, p0 + q, wa[q] * schur[q] * wc[q]);
        }
        for (std::size_t q = 0; q < len; ++q) inv.set(a, n, p0 + q, -wa[q] * schur[q]);
      }
      for (std::size_t q = 0; q < len; ++q) inv.set(n, n, p0 + q, schur[q]);
    }
  }
  return {std::move(inv), log_det};
}

StructuredCov schur_inverse(const StructuredCov& k) { return schur_factorize(k).inverse; }

double logdet(const StructuredCov& k) { return schur_factorize(k).logdet; }

StructuredCov add_jitter(StructuredCov k, double eps) {
  if (eps < 0.0) throw DomainError("add_jitter: eps must be >= 0");
  for (std::size_t i = 0; i < k.batch(); ++i) {
    for (std::size_t p = 0; p < k.dim(); ++p) k.add(i, i, p, eps);
  }
  return k;
}

namespace {

PerPixelView cholesky_impl(const StructuredCov& k, bool semidefinite) {
  const auto b = static_cast<Eigen::Index>(k.batch());
  PerPixelView view = per_pixel_view(k);
  for (std::size_t p = 0; p < view.pixels.size(); ++p) {
    const Eigen::MatrixXd m = view.pixels[p];
    Eigen::MatrixXd l = Eigen::MatrixXd::Zero(b, b);
    const double scale = std::max(1.0, m.diagonal().cwiseAbs().maxCoeff());
    for (Eigen::Index j = 0; j < b; ++j) {
      double d = m(j, j);
      for (Eigen::Index c = 0; c < j; ++c) d -= l(j, c) * l(j, c);
      if (semidefinite) {
        if (d < -1e-9 * scale) {
          throw NonPositiveDefinite("cholesky: negative pivot at pixel " + std::to_string(p));
        }
        if (d <= 1e-14 * scale) continue;
      } else if (!(d > kPivotTolerance)) {
        throw NonPositiveDefinite("cholesky: pivot " + std::to_string(d) + " at pixel " +
                                  std::to_string(p));
      }
      l(j, j) = std::sqrt(d);
      for (Eigen::Index i = j + 1; i < b; ++i) {
        double s = m(i, j);
        for (Eigen::Index c = 0; c < j; ++c) s -= l(i, c) * l(j, c);
        l(i, j) = s / l(j, j);
      }
    }
    view.pixels[p] = std::move(l);
  }
  return view;
}

}  // namespace

PerPixelView cholesky_per_pixel(const StructuredCov& k) { return cholesky_impl(k, false); }

PerPixelView cholesky_per_pixel_semidefinite(const StructuredCov& k) {
  return cholesky_impl(k, true);
}

std::vector<double> multiply(const StructuredCov& k, std::span<const double> x) {
  const std::size_t b = k.batch(), dim = k.dim();
  if (x.size() != b * dim) throw DomainError("multiply: vector length must equal B * P");
  std::vector<double> y(b * dim, 0.0);
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = 0; j < b; ++j) {
      const auto kij = k.block(i, j);
      for (std::size_t p = 0; p < dim; ++p) y[i * dim + p] += kij[p] * x[j * dim + p];
    }
  }
  return y;
}

double trace_product(const StructuredCov& a, const StructuredCov& b) {
  if (a.batch() != b.batch() || a.dim() != b.dim()) {
    throw DomainError("trace_product: shape mismatch");
  }
  double tr = 0.0;
  for (std::size_t i = 0; i < a.batch(); ++i) {
    for (std::size_t j = 0; j < a.batch(); ++j) {
      const auto aij = a.block(i, j);
      const auto bji = b.block(j, i);
      for (std::size_t p = 0; p < a.dim(); ++p) tr += aij[p] * bji[p];
    }
  }
  return tr;
}

std::vector<std::vector<double>> sample(const GaussianBatch& g, std::size_t n_samples,
                                        std::uint64_t seed) {
  const std::size_t b = g.cov.batch(), dim = g.cov.dim();
  const PerPixelView factors = cholesky_per_pixel_semidefinite(g.cov);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);

  std::vector<std::vector<double>> out(n_samples, g.mean);
  Eigen::VectorXd eps(static_cast<Eigen::Index>(b));
  for (auto& f : out) {
    for (std::size_t p = 0; p < dim; ++p) {
      for (Eigen::Index i = 0; i < eps.size(); ++i) eps(i) = normal(rng);
      const Eigen::VectorXd z = factors.pixels[p].triangularView<Eigen::Lower>() * eps;
      for (std::size_t i = 0; i < b; ++i) f[i * dim + p] += z(static_cast<Eigen::Index>(i));
    }
  }
  return out;
}

double gaussian_kl(const GaussianBatch& q, const GaussianBatch& p) {
  if (q.cov.batch() != p.cov.batch() || q.cov.dim() != p.cov.dim()) {
    throw DomainError("gaussian_kl: q and p must share B and P");
  }
  const SchurFactorization pf = schur_factorize(p.cov);
  const double logdet_q = logdet(q.cov);

  std::vector<double> diff(q.mean.size());
  for (std::size_t n = 0; n < diff.size(); ++n) diff[n] = p.mean[n] - q.mean[n];
  const std::vector<double> solved = multiply(pf.inverse, diff);
  double quad = 0.0;
  for (std::size_t n = 0; n < diff.size(); ++n) quad += diff[n] * solved[n];

  const double dimension = static_cast<double>(q.mean.size());
  return 0.5 * (trace_product(pf.inverse, q.cov) + quad - dimension + pf.logdet - logdet_q);
}

void write_csv(std::ostream& out, const StructuredCov& k) {
  out << "B,P\n" << k.batch() << ',' << k.dim() << "\ni,j,p,value\n";
  out << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (std::size_t i = 0; i < k.batch(); ++i) {
    for (std::size_t j = 0; j < k.batch(); ++j) {
      for (std::size_t p = 0; p < k.dim(); ++p) {
        const double v = k.at(i, j, p);
        if (v != 0.0) out << i << ',' << j << ',' << p << ',' << v << '\n';
      }
    }
  }
}

StructuredCov read_csv(std::istream& in) {
  std::string line;
  std::size_t b = 0, dim = 0;
  char comma = 0;
  if (!std::getline(in, line) || line != "B,P") throw DomainError("read_csv: missing B,P header");
  if (!std::getline(in, line)) throw DomainError("read_csv: missing B,P values");
  {
    std::istringstream ss(line);
    if (!(ss >> b >> comma >> dim) || comma != ',') throw DomainError("read_csv: bad B,P row");
  }
  if (!std::getline(in, line) || line != "i,j,p,value") {
    throw DomainError("read_csv: missing i,j,p,value header");
  }
  StructuredCov k(b, dim);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::size_t i = 0, j = 0, p = 0;
    char c1 = 0, c2 = 0, c3 = 0;
    double v = 0.0;
    if (!(ss >> i >> c1 >> j >> c2 >> p >> c3 >> v) || i >= b || j >= b || p >= dim) {
      throw DomainError("read_csv: bad row '" + line + "'");
    }
    k.set(i, j, p, v);
  }
  return k;
}

}  // namespace fvi
