#pragma once

// Independent reference computations used by tests and the self-test suite.
// None of these call into the structured algebra or the analytic kernel.

#include <Eigen/Dense>
#include <cstddef>
#include <cstdint>
#include <random>
#include <vector>

#include "fvi/block_cov.hpp"
#include "fvi/cnngp_kernel.hpp"
#include "fvi/fvi.hpp"

namespace fvi::checks {

/// Per-pixel M_p = A A^T / B + diag_shift I with A ~ N(0, 1).
StructuredCov random_pd(std::size_t batch, std::size_t dim, std::mt19937_64& rng,
                        double diag_shift = 0.5);

/// Dense BP x BP matrix built directly from block entries.
Eigen::MatrixXd dense_of(const StructuredCov& k);

double dense_logdet(const Eigen::MatrixXd& m);

/// KL(N(mq, Sq) || N(mp, Sp)) with dense Cholesky factors.
double dense_gaussian_kl(const Eigen::VectorXd& mq, const Eigen::MatrixXd& sq,
                         const Eigen::VectorXd& mp, const Eigen::MatrixXd& sp);

/// Monte Carlo kernel of a finite random CNN with the architecture's layers.
/// Hidden layers have `width` channels and every draw resamples all of their
/// weights. The final conv either samples `out_channels` outputs and averages
/// f_i * f_j over them, or, when out_channels is 0, contributes its exact
/// conditional expectation given the last hidden layer.
struct McKernel {
  std::vector<double> var_i, var_j, cross;
  std::vector<double> se_var_i, se_var_j, se_cross;
};

McKernel mc_kernel(const ArchSpec& arch, const Tensor& x_i, const Tensor& x_j, std::size_t width,
                   std::size_t out_channels, std::size_t draws, std::uint64_t seed);

/// Central finite difference of fvi_objective w.r.t. one parameter entry.
double fd_objective(FviModel& model, const Dataset& batch, const std::vector<Tensor>& inducing,
                    double data_weight, const std::vector<QNoise>& noise, std::size_t tensor,
                    std::size_t entry, double step);

struct GradCheck {
  std::size_t coordinates = 0;
  std::size_t failures = 0;
  double worst_excess = 0.0;  // max |a - n| / (rel * max(|a|, |n|) + abs)
  double max_rel_error = 0.0;  // over coordinates with max(|a|, |n|) > 1e-3
};

/// Compares analytic gradients with central differences on `coordinates`
/// uniformly drawn parameter entries.
GradCheck gradient_check(FviModel& model, const Dataset& batch, const std::vector<Tensor>& inducing,
                         double data_weight, const std::vector<QNoise>& noise,
                         std::size_t coordinates, std::uint64_t seed, double step = 1e-5,
                         double rel_tol = 1e-4, double abs_tol = 1e-7);

}  // namespace fvi::checks
