#include "fvi/likelihoods.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <random>

#include <gsl/gsl_errno.h>
#include <gsl/gsl_integration.h>

#include "fvi/error.hpp"

namespace fvi {

namespace {

constexpr double kLogSqrtTwoPi = 0.91893853320467274178;

// Phi(-sqrt(c)) without the cancellation in 1 - Phi(sqrt(c)).
double upper_normal_tail(double c) { return 0.5 * std::erfc(std::sqrt(c / 2.0)); }

void require_positive_c(double c) {
  if (!(c > 0.0)) throw DomainError("berHu threshold must be > 0");
}

}  // namespace

LikelihoodFamily LikelihoodFamily::berhu(double c) {
  require_positive_c(c);
  return {FamilyTag::BerHu, c, 0};
}

LikelihoodFamily LikelihoodFamily::boltzmann(std::size_t k) {
  if (k < 2) throw DomainError("Boltzmann likelihood needs at least two classes");
  return {FamilyTag::Boltzmann, 1.0, k};
}

std::string to_string(FamilyTag tag) {
  switch (tag) {
    case FamilyTag::Gaussian: return "gaussian";
    case FamilyTag::Laplace: return "laplace";
    case FamilyTag::BerHu: return "berhu";
    case FamilyTag::Boltzmann: return "boltzmann";
  }
  return "unknown";
}

FamilyTag family_tag_from_string(const std::string& name) {
  if (name == "gaussian") return FamilyTag::Gaussian;
  if (name == "laplace") return FamilyTag::Laplace;
  if (name == "berhu") return FamilyTag::BerHu;
  if (name == "boltzmann") return FamilyTag::Boltzmann;
  throw DomainError("unknown likelihood '" + name + "'");
}

double berhu_loss(double y, double c) {
  const double a = std::abs(y);
  return a <= c ? a : (y * y + c * c) / (2.0 * c);
}

double berhu_loss_derivative(double y, double c) {
  if (std::abs(y) <= c) return y > 0.0 ? 1.0 : (y < 0.0 ? -1.0 : 0.0);
  return y / c;
}

double berhu_log_z0(double c) {
  require_positive_c(c);
  const double z0 = 2.0 * (1.0 - std::exp(-c) + std::exp(-c / 2.0) *
                                                    std::sqrt(2.0 * std::numbers::pi * c) *
                                                    upper_normal_tail(c));
  return std::log(z0);
}

double berhu_w(double c) {
  require_positive_c(c);
  const double numer = -4.0 * (c + 1.0) * std::exp(-c) + 4.0 +
                       2.0 * std::exp(-c / 2.0) * std::sqrt(2.0 * std::numbers::pi) *
                           std::pow(c, 1.5) * upper_normal_tail(c);
  return numer / std::exp(berhu_log_z0(c));
}

double berhu_threshold(std::span<const double> expected_abs_residuals) {
  if (expected_abs_residuals.empty()) throw DomainError("berhu_threshold: empty input");
  double largest = 0.0;
  for (const double r : expected_abs_residuals) {
    if (r < 0.0) throw DomainError("berhu_threshold: negative residual");
    largest = std::max(largest, r);
  }
  return largest / 5.0;
}

double standardized_loss(const LikelihoodFamily& family, double r) {
  switch (family.tag) {
    case FamilyTag::Gaussian: return 0.5 * r * r;
    case FamilyTag::Laplace: return std::abs(r);
    case FamilyTag::BerHu: return berhu_loss(r, family.berhu_c);
    case FamilyTag::Boltzmann: break;
  }
  throw DomainError("standardized_loss: not a regression family");
}

double standardized_loss_derivative(const LikelihoodFamily& family, double r) {
  switch (family.tag) {
    case FamilyTag::Gaussian: return r;
    case FamilyTag::Laplace: return r > 0.0 ? 1.0 : (r < 0.0 ? -1.0 : 0.0);
    case FamilyTag::BerHu: return berhu_loss_derivative(r, family.berhu_c);
    case FamilyTag::Boltzmann: break;
  }
  throw DomainError("standardized_loss_derivative: not a regression family");
}

double log_z0(const LikelihoodFamily& family) {
  switch (family.tag) {
    case FamilyTag::Gaussian: return kLogSqrtTwoPi;
    case FamilyTag::Laplace: return std::numbers::ln2;
    case FamilyTag::BerHu: return berhu_log_z0(family.berhu_c);
    case FamilyTag::Boltzmann: break;
  }
  throw DomainError("log_z0: not a regression family");
}

double aleatoric_weight(const LikelihoodFamily& family) {
  switch (family.tag) {
    case FamilyTag::Gaussian: return 1.0;
    case FamilyTag::Laplace: return 2.0;
    case FamilyTag::BerHu: return berhu_w(family.berhu_c);
    case FamilyTag::Boltzmann: break;
  }
  throw DomainError("aleatoric_weight: not a regression family");
}

double location_scale_logpdf(const LikelihoodFamily& family, double y, double f, double sigma) {
  if (!(sigma > 0.0)) throw DomainError("location_scale_logpdf: sigma must be > 0");
  return -standardized_loss(family, (y - f) / sigma) - std::log(sigma) - log_z0(family);
}

LogpdfGrad location_scale_logpdf_grad(const LikelihoodFamily& family, double y, double f,
                                      double sigma) {
  if (!(sigma > 0.0)) throw DomainError("location_scale_logpdf: sigma must be > 0");
  const double r = (y - f) / sigma;
  const double dl = standardized_loss_derivative(family, r);
  return {-standardized_loss(family, r) - std::log(sigma) - log_z0(family), dl / sigma,
          (dl * r - 1.0) / sigma};
}

namespace {

void check_scales(std::span<const double> logits, std::span<const double> scales) {
  if (logits.size() != scales.size() || logits.empty()) {
    throw DomainError("boltzmann: logits and scales must be nonempty and equal length");
  }
  for (const double s : scales) {
    if (!(s > 0.0)) throw DomainError("boltzmann: scales must be > 0");
  }
}

// Rescaled logits, their max and log-sum-exp.
double log_partition(std::span<const double> logits, std::span<const double> scales,
                     std::vector<double>& rescaled) {
  rescaled.resize(logits.size());
  for (std::size_t k = 0; k < logits.size(); ++k) rescaled[k] = logits[k] / scales[k];
  const double top = *std::max_element(rescaled.begin(), rescaled.end());
  double sum = 0.0;
  for (const double r : rescaled) sum += std::exp(r - top);
  return top + std::log(sum);
}

}  // namespace

double boltzmann_logprob(std::span<const double> logits, std::span<const double> scales,
                         std::size_t y) {
  check_scales(logits, scales);
  if (y >= logits.size()) throw DomainError("boltzmann: class index out of range");
  std::vector<double> rescaled;
  const double lse = log_partition(logits, scales, rescaled);
  return rescaled[y] - lse;
}

std::vector<double> boltzmann_probs(std::span<const double> logits,
                                    std::span<const double> scales) {
  check_scales(logits, scales);
  std::vector<double> rescaled;
  const double lse = log_partition(logits, scales, rescaled);
  for (double& r : rescaled) r = std::exp(r - lse);
  return rescaled;
}

double boltzmann_logprob_grad(std::span<const double> logits, std::span<const double> scales,
                              std::size_t y, std::span<double> d_logits,
                              std::span<double> d_scales) {
  check_scales(logits, scales);
  if (y >= logits.size()) throw DomainError("boltzmann: class index out of range");
  std::vector<double> rescaled;
  const double lse = log_partition(logits, scales, rescaled);
  for (std::size_t k = 0; k < logits.size(); ++k) {
    const double g = (k == y ? 1.0 : 0.0) - std::exp(rescaled[k] - lse);
    d_logits[k] = g / scales[k];
    d_scales[k] = -g * rescaled[k] / scales[k];
  }
  return rescaled[y] - lse;
}

namespace {

struct GslWorkspace {
  GslWorkspace() : ws(gsl_integration_workspace_alloc(kLimit)) {
    static const bool handler_off = [] {
      gsl_set_error_handler_off();
      return true;
    }();
    (void)handler_off;
  }
  ~GslWorkspace() { gsl_integration_workspace_free(ws); }
  GslWorkspace(const GslWorkspace&) = delete;
  GslWorkspace& operator=(const GslWorkspace&) = delete;

  static constexpr std::size_t kLimit = 2000;
  gsl_integration_workspace* ws;
};

double trampoline(double x, void* params) {
  return (*static_cast<const std::function<double(double)>*>(params))(x);
}

void check_status(int status, double result, double abserr, double abs_tol) {
  if (!std::isfinite(result)) throw NonFinite("quadrature: integral is not finite");
  // Roundoff-limited results are accepted when the error estimate is still small.
  if (status == GSL_SUCCESS) return;
  if ((status == GSL_EROUND || status == GSL_EMAXITER) && abserr <= 100.0 * abs_tol) return;
  throw NonFinite(std::string("quadrature did not converge: ") + gsl_strerror(status));
}

}  // namespace

double integrate_real_line(const std::function<double(double)>& fn,
                           std::span<const double> breakpoints, double abs_tol) {
  std::vector<double> pts(breakpoints.begin(), breakpoints.end());
  if (pts.empty()) pts.push_back(0.0);
  std::sort(pts.begin(), pts.end());
  pts.erase(std::unique(pts.begin(), pts.end()), pts.end());

  GslWorkspace work;
  gsl_function g{&trampoline, const_cast<std::function<double(double)>*>(&fn)};
  constexpr double kRel = 1e-13;
  double total = 0.0, part = 0.0, err = 0.0;

  int status = gsl_integration_qagil(&g, pts.front(), abs_tol, kRel, GslWorkspace::kLimit,
                                     work.ws, &part, &err);
  check_status(status, part, err, abs_tol);
  total += part;

  if (pts.size() >= 2) {
    status = gsl_integration_qagp(&g, pts.data(), pts.size(), abs_tol, kRel,
                                  GslWorkspace::kLimit, work.ws, &part, &err);
    check_status(status, part, err, abs_tol);
    total += part;
  }

  status = gsl_integration_qagiu(&g, pts.back(), abs_tol, kRel, GslWorkspace::kLimit, work.ws,
                                 &part, &err);
  check_status(status, part, err, abs_tol);
  total += part;
  return total;
}

double gibbs_normalizer_numeric(const std::function<double(double)>& loss,
                                std::span<const double> breakpoints, double abs_tol,
                                bool require_finite_moments) {
  const double z =
      integrate_real_line([&](double y) { return std::exp(-loss(y)); }, breakpoints, abs_tol);
  if (!(z > 0.0)) throw NonFinite("gibbs normalizer is not positive");
  if (require_finite_moments) {
    // A density with a divergent second moment has no usable aleatoric variance.
    for (const double bound : {1e3, 1e4}) {
      const double tail = integrate_real_line(
          [&](double y) { return std::abs(y) > bound ? y * y * std::exp(-loss(y)) : 0.0; },
          std::vector<double>{-bound, bound}, abs_tol);
      if (!(tail < 1e-6 * z)) {
        throw NonFinite("gibbs normalizer: second moment does not converge (heavy tails)");
      }
    }
  }
  return z;
}

double expected_loglik_mc(const LikelihoodFamily& family, double q_mean, double q_var, double y,
                          double sigma, std::size_t samples, std::uint64_t seed) {
  if (q_var < 0.0) throw DomainError("expected_loglik_mc: q_var must be >= 0");
  if (samples == 0) throw DomainError("expected_loglik_mc: need at least one sample");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const double sd = std::sqrt(q_var);
  double acc = 0.0;
  for (std::size_t s = 0; s < samples; ++s) {
    acc += location_scale_logpdf(family, y, q_mean + sd * normal(rng), sigma);
  }
  return acc / static_cast<double>(samples);
}

double expected_loglik_mc(std::span<const double> q_mean, std::span<const double> q_var,
                          std::span<const double> scales, std::size_t y, std::size_t samples,
                          std::uint64_t seed) {
  if (q_mean.size() != q_var.size()) throw DomainError("expected_loglik_mc: shape mismatch");
  if (samples == 0) throw DomainError("expected_loglik_mc: need at least one sample");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> f(q_mean.size());
  double acc = 0.0;
  for (std::size_t s = 0; s < samples; ++s) {
    for (std::size_t k = 0; k < f.size(); ++k) {
      if (q_var[k] < 0.0) throw DomainError("expected_loglik_mc: q_var must be >= 0");
      f[k] = q_mean[k] + std::sqrt(q_var[k]) * normal(rng);
    }
    acc += boltzmann_logprob(f, scales, y);
  }
  return acc / static_cast<double>(samples);
}

double expected_loglik_gaussian_closed(double q_mean, double q_var, double y, double sigma) {
  if (!(sigma > 0.0)) throw DomainError("expected_loglik_gaussian_closed: sigma must be > 0");
  if (q_var < 0.0) throw DomainError("expected_loglik_gaussian_closed: q_var must be >= 0");
  const double r = y - q_mean;
  return -kLogSqrtTwoPi - std::log(sigma) - (r * r + q_var) / (2.0 * sigma * sigma);
}

PredictiveMoments predictive_moments(const LikelihoodFamily& family, double q_mean,
                                     double q_var, double sigma) {
  if (!(sigma > 0.0)) throw DomainError("predictive_moments: sigma must be > 0");
  if (q_var < 0.0) throw DomainError("predictive_moments: q_var must be >= 0");
  const double aleatoric = aleatoric_weight(family) * sigma * sigma;
  return {q_mean, q_var, aleatoric, q_var + aleatoric};
}

}  // namespace fvi
