#pragma once

// Small feed-forward networks with hand-written reverse mode for a fixed
// layer vocabulary: dense, stride-1 convolution, relu, nearest upsampling.

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "fvi/tensor.hpp"

namespace fvi {

enum class LayerKind { Dense, Conv, Relu, Upsample };

struct LayerSpec {
  LayerKind kind = LayerKind::Relu;
  std::size_t units = 0;    // Dense: outputs. Conv: output channels.
  std::size_t kernel = 3;   // Conv only, square
  std::size_t pad = 1;      // Conv only
  std::size_t scale = 2;    // Upsample only

  static LayerSpec dense(std::size_t units) { return {LayerKind::Dense, units, 0, 0, 0}; }
  static LayerSpec conv(std::size_t channels, std::size_t kernel = 3, std::size_t pad = 1) {
    return {LayerKind::Conv, channels, kernel, pad, 0};
  }
  static LayerSpec relu() { return {LayerKind::Relu, 0, 0, 0, 0}; }
  static LayerSpec upsample(std::size_t scale) { return {LayerKind::Upsample, 0, 0, 0, scale}; }
};

struct ParamTensor {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<double> values;
};

/// One gradient buffer per parameter tensor, same order as Net::params().
using Gradients = std::vector<std::vector<double>>;

/// Layer inputs recorded by forward, consumed by backward.
struct Trace {
  std::vector<Tensor> inputs;
  Tensor output;
};

class Net {
 public:
  Net() = default;
  /// Weights ~ N(0, 2 / fan_in) from `seed`, biases zero.
  Net(Shape input, std::vector<LayerSpec> layers, std::uint64_t seed);

  Net(const Net& other);
  Net& operator=(const Net& other);

  const Shape& input_shape() const { return input_; }
  const Shape& output_shape() const { return output_; }
  const std::vector<LayerSpec>& layers() const { return layers_; }

  std::vector<ParamTensor>& params() { return params_; }
  const std::vector<ParamTensor>& params() const { return params_; }
  std::size_t parameter_count() const;

  Tensor forward(const Tensor& x) const;
  Tensor forward(const Tensor& x, Trace& trace) const;

  /// Accumulates d(objective)/d(params) into grads given d(objective)/d(output).
  void backward(const Trace& trace, const Tensor& d_output, Gradients& grads) const;

  Gradients zero_gradients() const;

  /// Number of forward evaluations since construction or the last reset.
  std::size_t forward_count() const { return forward_calls_.load(); }
  void reset_forward_count() { forward_calls_.store(0); }

 private:
  Shape input_;
  Shape output_;
  std::vector<LayerSpec> layers_;
  std::vector<Shape> layer_inputs_;
  std::vector<std::size_t> first_param_;  // index into params_ per layer
  std::vector<ParamTensor> params_;
  mutable std::atomic<std::size_t> forward_calls_{0};
};

double softplus(double x);
/// d softplus / dx, i.e. the logistic function.
double softplus_grad(double x);
/// softplus^{-1}(y) for y > 0.
double softplus_inverse(double y);

struct SgdOptions {
  double lr = 1e-3;
  double momentum = 0.9;
  double weight_decay = 1e-4;
};

struct SgdState {
  Gradients velocity;
};

/// Momentum SGD with coupled weight decay, minimising:
///   v <- momentum * v + (g + weight_decay * p);  p <- p - lr * v
void sgd_step(std::vector<ParamTensor>& params, const Gradients& grads, SgdState& state,
              const SgdOptions& options);

/// Text checkpoint: layout header, then each tensor's name, shape and values
/// at full precision, so read(write(net)) reproduces every parameter exactly.
void write_net(std::ostream& out, const Net& net);
Net read_net(std::istream& in);

}  // namespace fvi
