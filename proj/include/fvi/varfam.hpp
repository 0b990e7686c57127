#pragma once

// Variational multi-output GP. A single network evaluation per input yields
// the mean h(x), L feature maps g_k(x), a diagonal D(x) and the likelihood
// scale. Across a batch the covariance is
//   Sigma(x_i, x_j) = (1/L) sum_k g_k(x_i) * g_k(x_j) + [i == j] D(x_i)
// which keeps the diagonal-block structure of StructuredCov.

#include <cstddef>
#include <cstdint>
#include <vector>

#include "fvi/block_cov.hpp"
#include "fvi/gradnet.hpp"

namespace fvi {

/// Post-link head values for one input; P = channels * H * W.
struct VarHeads {
  std::vector<double> mean;      // P
  std::vector<double> features;  // L * P, feature k at [k * P, (k + 1) * P)
  std::vector<double> diag;      // P, D(x) including jitter
  std::vector<double> scale;     // P, sigma (regression) or sigma^2_k (classification)

  std::size_t dim() const { return mean.size(); }
  std::size_t rank() const { return mean.empty() ? 0 : features.size() / mean.size(); }
};

VarHeads zero_heads(std::size_t rank, std::size_t dim);

/// Output channel groups of the network: [mean | L features | D | scale],
/// each `channels` wide, over the output plane.
class VarFamily {
 public:
  VarFamily() = default;
  VarFamily(Net net, std::size_t rank, std::size_t channels, double jitter);

  const Net& net() const { return net_; }
  Net& net() { return net_; }
  std::size_t rank() const { return rank_; }
  std::size_t channels() const { return channels_; }
  std::size_t dim() const { return net_.output_shape().plane() * channels_; }
  double jitter() const { return jitter_; }

  /// One network forward pass.
  VarHeads heads(const Tensor& x) const;
  VarHeads heads(const Tensor& x, Trace& trace) const;

  /// Chains d(objective)/d(heads) through the links and the network.
  void backward(const Trace& trace, const VarHeads& d_heads, Gradients& grads) const;

 private:
  Net net_;
  std::size_t rank_ = 0;
  std::size_t channels_ = 1;
  double jitter_ = 1e-3;
};

inline constexpr double kScaleFloor = 1e-6;

struct VarFamilyOptions {
  std::size_t rank = 20;
  std::size_t channels = 1;
  double jitter = 1e-3;
  double initial_scale = 0.5;
  double initial_diag = 0.1;
  double initial_mean = 0.0;
};

/// Appends the head layer (dense when the output plane is 1 x 1, otherwise a
/// 3x3 conv) to `hidden` and initialises the head biases.
VarFamily make_var_family(Shape input, std::vector<LayerSpec> hidden,
                          const VarFamilyOptions& options, std::uint64_t seed);

StructuredCov q_cov(const std::vector<VarHeads>& heads);

struct QBatch {
  GaussianBatch q;
  std::vector<VarHeads> heads;
};

/// q over a batch: concatenated means and q_cov, plus the scale heads.
QBatch q_at(const VarFamily& family, const std::vector<Tensor>& inputs);

/// Standard normals for one joint sample: `shared` (L * P) multiplies the
/// features and is common to the batch, `own` (B * P) multiplies sqrt(D).
struct QNoise {
  std::vector<double> shared;
  std::vector<double> own;
};

QNoise draw_noise(std::size_t batch, std::size_t rank, std::size_t dim, std::uint64_t seed);

/// f_i = h_i + (1/sqrt L) sum_k g_k(x_i) eps_k + sqrt(D_i) eta_i, an exact
/// draw from q with the low-rank-plus-diagonal factor of each M_p.
std::vector<std::vector<double>> rsample_q(const std::vector<VarHeads>& heads,
                                           const QNoise& noise);

/// Adds d/d(heads) of sum_i <d_f[i], f_i> to d_heads.
void rsample_q_backward(const std::vector<VarHeads>& heads, const QNoise& noise,
                        const std::vector<std::vector<double>>& d_f,
                        std::vector<VarHeads>& d_heads);

}  // namespace fvi
