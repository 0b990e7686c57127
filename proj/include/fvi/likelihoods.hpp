#pragma once

// Likelihoods built from losses: p(y | f) = exp(-loss(y, f)) / Z.
//
// Regression families are location-scale: the loss acts on the standardized
// residual (y - f) / sigma and Z = sigma * Z0, with Z0 the normalizer of the
// standard member. The classification family is a softmax over logits
// divided by per-class scales.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace fvi {

enum class FamilyTag { Gaussian, Laplace, BerHu, Boltzmann };

struct LikelihoodFamily {
  FamilyTag tag = FamilyTag::Gaussian;
  double berhu_c = 1.0;      // BerHu threshold in standardized units
  std::size_t classes = 0;   // Boltzmann only

  static LikelihoodFamily gaussian() { return {FamilyTag::Gaussian, 1.0, 0}; }
  static LikelihoodFamily laplace() { return {FamilyTag::Laplace, 1.0, 0}; }
  static LikelihoodFamily berhu(double c);
  static LikelihoodFamily boltzmann(std::size_t k);

  bool is_regression() const { return tag != FamilyTag::Boltzmann; }
};

std::string to_string(FamilyTag tag);
FamilyTag family_tag_from_string(const std::string& name);

/// Smallest threshold the trainer will use.
inline constexpr double kBerhuMinThreshold = 1e-3;

/// |y| below c, (y^2 + c^2) / (2c) above.
double berhu_loss(double y, double c);
double berhu_loss_derivative(double y, double c);
/// log Z0 of the standard berHu member, via erfc for the tail term.
double berhu_log_z0(double c);
/// Variance of the standard berHu member (its aleatoric weight).
double berhu_w(double c);
/// One fifth of the largest expected absolute residual. No floor applied.
double berhu_threshold(std::span<const double> expected_abs_residuals);

/// Standardized loss and its derivative for a regression family.
double standardized_loss(const LikelihoodFamily& family, double r);
double standardized_loss_derivative(const LikelihoodFamily& family, double r);
double log_z0(const LikelihoodFamily& family);
/// Maps sigma^2 to the aleatoric variance: Gaussian 1, Laplace 2, berHu w(c).
double aleatoric_weight(const LikelihoodFamily& family);

double location_scale_logpdf(const LikelihoodFamily& family, double y, double f, double sigma);

struct LogpdfGrad {
  double value = 0.0;
  double d_f = 0.0;
  double d_sigma = 0.0;
};
LogpdfGrad location_scale_logpdf_grad(const LikelihoodFamily& family, double y, double f,
                                      double sigma);

/// log softmax(f_k / s_k) at class y.
double boltzmann_logprob(std::span<const double> logits, std::span<const double> scales,
                         std::size_t y);
std::vector<double> boltzmann_probs(std::span<const double> logits,
                                    std::span<const double> scales);
/// Returns the log-probability and writes its gradient w.r.t. logits and scales.
double boltzmann_logprob_grad(std::span<const double> logits, std::span<const double> scales,
                              std::size_t y, std::span<double> d_logits,
                              std::span<double> d_scales);

/// Adaptive quadrature of fn over the real line, split at the breakpoints.
/// Throws NonFinite when the integral does not converge.
double integrate_real_line(const std::function<double(double)>& fn,
                           std::span<const double> breakpoints, double abs_tol = 1e-10);

/// Z = integral of exp(-loss(y)) dy. With require_finite_moments the second
/// moment must also converge, which rejects heavy tails such as Cauchy.
double gibbs_normalizer_numeric(const std::function<double(double)>& loss,
                                std::span<const double> breakpoints, double abs_tol = 1e-10,
                                bool require_finite_moments = true);

/// Monte Carlo E_{f ~ N(q_mean, q_var)}[log p(y | f)] with `samples` draws.
double expected_loglik_mc(const LikelihoodFamily& family, double q_mean, double q_var, double y,
                          double sigma, std::size_t samples, std::uint64_t seed);
double expected_loglik_mc(std::span<const double> q_mean, std::span<const double> q_var,
                          std::span<const double> scales, std::size_t y, std::size_t samples,
                          std::uint64_t seed);

double expected_loglik_gaussian_closed(double q_mean, double q_var, double y, double sigma);

struct PredictiveMoments {
  double mean = 0.0;
  double epistemic_var = 0.0;
  double aleatoric_var = 0.0;
  double total_var = 0.0;
};

PredictiveMoments predictive_moments(const LikelihoodFamily& family, double q_mean,
                                     double q_var, double sigma);

}  // namespace fvi
