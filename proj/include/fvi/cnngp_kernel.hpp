#pragma once

// Equivalent GP kernel of an infinitely wide, pooling-free Bayesian CNN.
//
// Without pooling the kernel between two images is diagonal over pixel
// positions, so the recursion only has to track three maps per layer: the
// variance of each image and their cross-covariance, pixel by pixel.

#include <iosfwd>
#include <string>
#include <variant>
#include <vector>

#include "fvi/block_cov.hpp"
#include "fvi/tensor.hpp"

namespace fvi {

/// Convolution with fan-in scaled weights: weight variance is weight_var
/// divided by (in_channels * kernel_h * kernel_w). Zero padding.
struct PriorConv {
  std::size_t kernel_h = 3;
  std::size_t kernel_w = 3;
  std::size_t stride = 1;
  std::size_t pad = 1;
  double weight_var = 0.2;
  double bias_var = 0.08;
};

struct PriorRelu {};

/// Nearest-neighbour upsampling by an integer scale, or to a target size when
/// scale is 0.
struct PriorUpsample {
  std::size_t scale = 2;
  std::size_t out_h = 0;
  std::size_t out_w = 0;
};

using PriorLayer = std::variant<PriorConv, PriorRelu, PriorUpsample>;

struct ArchSpec {
  Shape input;
  std::vector<PriorLayer> layers;
  double prior_mean = 0.5;
  double noise_var = 0.1;
  /// Independent output channels sharing the kernel (classes for
  /// segmentation); P = output_channels * H_out * W_out.
  std::size_t output_channels = 1;
};

/// One channel-collapsed spatial map.
struct Map2d {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> values;

  Map2d() = default;
  Map2d(std::size_t h, std::size_t w, double fill = 0.0)
      : height(h), width(w), values(h * w, fill) {}
  double at(std::size_t y, std::size_t x) const { return values[y * width + x]; }
};

struct KernelMaps {
  Map2d var_i;
  Map2d var_j;
  Map2d cross;
};

/// E[relu(u) relu(w)] for zero-mean Gaussian (u, w) with the given variances
/// and covariance (first-order arc-cosine kernel).
double relu_moment(double var_i, double var_j, double cov);

/// Output spatial size of a conv or upsample given an input size.
std::pair<std::size_t, std::size_t> conv_output_size(const PriorConv& conv, std::size_t h,
                                                     std::size_t w);
std::pair<std::size_t, std::size_t> upsample_output_size(const PriorUpsample& up,
                                                         std::size_t h, std::size_t w);

KernelMaps conv_propagate(const PriorConv& conv, const KernelMaps& maps);
KernelMaps upsample_propagate(const PriorUpsample& up, const KernelMaps& maps);
KernelMaps relu_propagate(const KernelMaps& maps);

/// Layer-0 maps: channel means of x_i^2, x_j^2 and x_i * x_j per pixel.
KernelMaps input_maps(const Tensor& x_i, const Tensor& x_j);

/// Final output spatial shape (channels = arch.output_channels).
Shape output_shape(const ArchSpec& arch);
std::size_t output_dim(const ArchSpec& arch);

/// Diagonal of K(x_i, x_j) over the H_out * W_out output positions of one
/// channel. equivalent_kernel(arch, x, x) is the variance map of x.
std::vector<double> equivalent_kernel(const ArchSpec& arch, const Tensor& x_i,
                                      const Tensor& x_j);

/// GP prior over a batch: constant mean arch.prior_mean, blocks from
/// equivalent_kernel tiled over output channels, noise_var on diagonal blocks.
GaussianBatch prior_structured_cov(const ArchSpec& arch, const std::vector<Tensor>& batch);

void validate(const ArchSpec& arch);

/// Line-oriented text form, e.g.
///   input 1 8 8
///   prior_mean 0.5
///   conv kh=3 kw=3 stride=1 pad=1 weight_var=0.2 bias_var=0.08
///   relu
///   upsample scale=2        (or: upsample size=8x8)
ArchSpec parse_arch(std::istream& in);
void write_arch(std::ostream& out, const ArchSpec& arch);

/// Named architectures shipped with the library: "regression1d",
/// "depth8", "seg8", "kernel-check".
ArchSpec builtin_arch(const std::string& name);

}  // namespace fvi
