#include "fvi/gradnet.hpp"

#include <cmath>
#include <iomanip>
#include <istream>
#include <limits>
#include <ostream>
#include <random>
#include <sstream>

#include "fvi/error.hpp"

namespace fvi {

namespace {

Shape layer_output(const LayerSpec& layer, const Shape& in) {
  switch (layer.kind) {
    case LayerKind::Dense:
      if (layer.units == 0) throw DomainError("dense layer needs units >= 1");
      return {layer.units, 1, 1};
    case LayerKind::Conv: {
      if (layer.units == 0 || layer.kernel == 0) throw DomainError("conv layer needs units, kernel");
      if (in.height + 2 * layer.pad < layer.kernel || in.width + 2 * layer.pad < layer.kernel) {
        throw DomainError("conv kernel larger than padded input");
      }
      return {layer.units, in.height + 2 * layer.pad - layer.kernel + 1,
              in.width + 2 * layer.pad - layer.kernel + 1};
    }
    case LayerKind::Relu: return in;
    case LayerKind::Upsample:
      if (layer.scale == 0) throw DomainError("upsample scale must be >= 1");
      return {in.channels, in.height * layer.scale, in.width * layer.scale};
  }
  return in;
}

const char* kind_name(LayerKind kind) {
  switch (kind) {
    case LayerKind::Dense: return "dense";
    case LayerKind::Conv: return "conv";
    case LayerKind::Relu: return "relu";
    case LayerKind::Upsample: return "upsample";
  }
  return "?";
}

}  // namespace

Net::Net(Shape input, std::vector<LayerSpec> layers, std::uint64_t seed)
    : input_(input), layers_(std::move(layers)) {
  if (input_.size() == 0) throw DomainError("Net: empty input shape");
  std::mt19937_64 rng(seed);
  Shape shape = input_;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const LayerSpec& layer = layers_[l];
    layer_inputs_.push_back(shape);
    first_param_.push_back(params_.size());
    const Shape out = layer_output(layer, shape);
    if (layer.kind == LayerKind::Dense || layer.kind == LayerKind::Conv) {
      const std::size_t fan_in = layer.kind == LayerKind::Dense
                                     ? shape.size()
                                     : shape.channels * layer.kernel * layer.kernel;
      std::vector<std::size_t> wshape =
          layer.kind == LayerKind::Dense
              ? std::vector<std::size_t>{layer.units, shape.size()}
              : std::vector<std::size_t>{layer.units, shape.channels, layer.kernel, layer.kernel};
      ParamTensor w{"layer" + std::to_string(l) + ".weight", wshape, {}};
      std::size_t count = 1;
      for (const auto d : wshape) count *= d;
      std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
      w.values.resize(count);
      for (double& v : w.values) v = normal(rng);
      params_.push_back(std::move(w));
      params_.push_back({"layer" + std::to_string(l) + ".bias", {layer.units},
                         std::vector<double>(layer.units, 0.0)});
    }
    shape = out;
  }
  output_ = shape;
}

Net::Net(const Net& other)
    : input_(other.input_),
      output_(other.output_),
      layers_(other.layers_),
      layer_inputs_(other.layer_inputs_),
      first_param_(other.first_param_),
      params_(other.params_),
      forward_calls_(other.forward_calls_.load()) {}

Net& Net::operator=(const Net& other) {
  if (this != &other) {
    input_ = other.input_;
    output_ = other.output_;
    layers_ = other.layers_;
    layer_inputs_ = other.layer_inputs_;
    first_param_ = other.first_param_;
    params_ = other.params_;
    forward_calls_.store(other.forward_calls_.load());
  }
  return *this;
}

std::size_t Net::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.values.size();
  return n;
}

Gradients Net::zero_gradients() const {
  Gradients g;
  g.reserve(params_.size());
  for (const auto& p : params_) g.emplace_back(p.values.size(), 0.0);
  return g;
}

Tensor Net::forward(const Tensor& x) const {
  Trace trace;
  return forward(x, trace);
}

Tensor Net::forward(const Tensor& x, Trace& trace) const {
  if (!(x.shape == input_) || x.data.size() != input_.size()) {
    throw DomainError("Net::forward: input shape mismatch");
  }
  forward_calls_.fetch_add(1);
  trace.inputs.clear();
  trace.inputs.reserve(layers_.size());
  Tensor cur = x;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const LayerSpec& layer = layers_[l];
    const Shape in = layer_inputs_[l];
    const Shape out = layer_output(layer, in);
    Tensor next(out);
    switch (layer.kind) {
      case LayerKind::Dense: {
        const auto& w = params_[first_param_[l]].values;
        const auto& b = params_[first_param_[l] + 1].values;
        const std::size_t n_in = in.size();
        for (std::size_t o = 0; o < layer.units; ++o) {
          double acc = b[o];
          const double* row = w.data() + o * n_in;
          for (std::size_t i = 0; i < n_in; ++i) acc += row[i] * cur.data[i];
          next.data[o] = acc;
        }
        break;
      }
      case LayerKind::Conv: {
        const auto& w = params_[first_param_[l]].values;
        const auto& b = params_[first_param_[l] + 1].values;
        const std::size_t k = layer.kernel;
        const auto pad = static_cast<std::ptrdiff_t>(layer.pad);
        for (std::size_t co = 0; co < out.channels; ++co) {
          for (std::size_t y = 0; y < out.height; ++y) {
            for (std::size_t xx = 0; xx < out.width; ++xx) {
              double acc = b[co];
              for (std::size_t ci = 0; ci < in.channels; ++ci) {
                const double* wk = w.data() + ((co * in.channels + ci) * k) * k;
                for (std::size_t dy = 0; dy < k; ++dy) {
                  const auto sy = static_cast<std::ptrdiff_t>(y + dy) - pad;
                  if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(in.height)) continue;
                  for (std::size_t dx = 0; dx < k; ++dx) {
                    const auto sx = static_cast<std::ptrdiff_t>(xx + dx) - pad;
                    if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(in.width)) continue;
                    acc += wk[dy * k + dx] *
                           cur.at(ci, static_cast<std::size_t>(sy), static_cast<std::size_t>(sx));
                  }
                }
              }
              next.at(co, y, xx) = acc;
            }
          }
        }
        break;
      }
      case LayerKind::Relu:
        for (std::size_t n = 0; n < cur.data.size(); ++n) next.data[n] = std::max(cur.data[n], 0.0);
        break;
      case LayerKind::Upsample:
        for (std::size_t c = 0; c < out.channels; ++c) {
          for (std::size_t y = 0; y < out.height; ++y) {
            for (std::size_t xx = 0; xx < out.width; ++xx) {
              next.at(c, y, xx) = cur.at(c, y / layer.scale, xx / layer.scale);
            }
          }
        }
        break;
    }
    trace.inputs.push_back(std::move(cur));
    cur = std::move(next);
  }
  trace.output = cur;
  return cur;
}

void Net::backward(const Trace& trace, const Tensor& d_output, Gradients& grads) const {
  if (trace.inputs.size() != layers_.size()) throw DomainError("Net::backward: stale trace");
  if (!(d_output.shape == output_)) throw DomainError("Net::backward: gradient shape mismatch");
  if (grads.size() != params_.size()) grads = zero_gradients();

  Tensor delta = d_output;
  for (std::size_t l = layers_.size(); l-- > 0;) {
    const LayerSpec& layer = layers_[l];
    const Tensor& in = trace.inputs[l];
    Tensor d_in(in.shape);
    switch (layer.kind) {
      case LayerKind::Dense: {
        const auto& w = params_[first_param_[l]].values;
        auto& gw = grads[first_param_[l]];
        auto& gb = grads[first_param_[l] + 1];
        const std::size_t n_in = in.shape.size();
        for (std::size_t o = 0; o < layer.units; ++o) {
          const double d = delta.data[o];
          if (d == 0.0) continue;
          gb[o] += d;
          const double* row = w.data() + o * n_in;
          double* grow = gw.data() + o * n_in;
          for (std::size_t i = 0; i < n_in; ++i) {
            grow[i] += d * in.data[i];
            d_in.data[i] += d * row[i];
          }
        }
        break;
      }
      case LayerKind::Conv: {
        const auto& w = params_[first_param_[l]].values;
        auto& gw = grads[first_param_[l]];
        auto& gb = grads[first_param_[l] + 1];
        const std::size_t k = layer.kernel;
        const auto pad = static_cast<std::ptrdiff_t>(layer.pad);
        const Shape& is = in.shape;
        const Shape& os = delta.shape;
        for (std::size_t co = 0; co < os.channels; ++co) {
          for (std::size_t y = 0; y < os.height; ++y) {
            for (std::size_t xx = 0; xx < os.width; ++xx) {
              const double d = delta.at(co, y, xx);
              if (d == 0.0) continue;
              gb[co] += d;
              for (std::size_t ci = 0; ci < is.channels; ++ci) {
                const std::size_t base = ((co * is.channels + ci) * k) * k;
                for (std::size_t dy = 0; dy < k; ++dy) {
                  const auto sy = static_cast<std::ptrdiff_t>(y + dy) - pad;
                  if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(is.height)) continue;
                  for (std::size_t dx = 0; dx < k; ++dx) {
                    const auto sx = static_cast<std::ptrdiff_t>(xx + dx) - pad;
                    if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(is.width)) continue;
                    const auto uy = static_cast<std::size_t>(sy);
                    const auto ux = static_cast<std::size_t>(sx);
                    gw[base + dy * k + dx] += d * in.at(ci, uy, ux);
                    d_in.at(ci, uy, ux) += d * w[base + dy * k + dx];
                  }
                }
              }
            }
          }
        }
        break;
      }
      case LayerKind::Relu:
        for (std::size_t n = 0; n < in.data.size(); ++n) {
          d_in.data[n] = in.data[n] > 0.0 ? delta.data[n] : 0.0;
        }
        break;
      case LayerKind::Upsample: {
        const Shape& os = delta.shape;
        for (std::size_t c = 0; c < os.channels; ++c) {
          for (std::size_t y = 0; y < os.height; ++y) {
            for (std::size_t xx = 0; xx < os.width; ++xx) {
              d_in.at(c, y / layer.scale, xx / layer.scale) += delta.at(c, y, xx);
            }
          }
        }
        break;
      }
    }
    delta = std::move(d_in);
  }
}

double softplus(double x) {
  // log(1 + e^x) without overflow for large x.
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

double softplus_grad(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double softplus_inverse(double y) {
  if (!(y > 0.0)) throw DomainError("softplus_inverse: argument must be > 0");
  return y > 30.0 ? y + std::log(-std::expm1(-y)) : std::log(std::expm1(y));
}

void sgd_step(std::vector<ParamTensor>& params, const Gradients& grads, SgdState& state,
              const SgdOptions& options) {
  if (grads.size() != params.size()) throw DomainError("sgd_step: gradient count mismatch");
  if (state.velocity.size() != params.size()) {
    state.velocity.clear();
    for (const auto& p : params) state.velocity.emplace_back(p.values.size(), 0.0);
  }
  for (std::size_t t = 0; t < params.size(); ++t) {
    auto& p = params[t].values;
    auto& v = state.velocity[t];
    const auto& g = grads[t];
    if (g.size() != p.size()) throw DomainError("sgd_step: gradient shape mismatch");
    for (std::size_t n = 0; n < p.size(); ++n) {
      v[n] = options.momentum * v[n] + g[n] + options.weight_decay * p[n];
      p[n] -= options.lr * v[n];
    }
  }
}

void write_net(std::ostream& out, const Net& net) {
  const Shape& s = net.input_shape();
  out << "fvi-net v1\ninput " << s.channels << ' ' << s.height << ' ' << s.width << '\n';
  out << "layers " << net.layers().size() << '\n';
  for (const auto& layer : net.layers()) {
    out << kind_name(layer.kind);
    switch (layer.kind) {
      case LayerKind::Dense: out << ' ' << layer.units; break;
      case LayerKind::Conv: out << ' ' << layer.units << ' ' << layer.kernel << ' ' << layer.pad; break;
      case LayerKind::Upsample: out << ' ' << layer.scale; break;
      case LayerKind::Relu: break;
    }
    out << '\n';
  }
  out << "tensors " << net.params().size() << '\n';
  out << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (const auto& p : net.params()) {
    out << p.name << ' ' << p.shape.size();
    for (const auto d : p.shape) out << ' ' << d;
    out << '\n';
    for (std::size_t n = 0; n < p.values.size(); ++n) {
      out << p.values[n] << (n + 1 == p.values.size() ? '\n' : ' ');
    }
  }
}

Net read_net(std::istream& in) {
  std::string word, version;
  if (!(in >> word >> version) || word != "fvi-net" || version != "v1") {
    throw DomainError("read_net: not an fvi-net v1 checkpoint");
  }
  Shape s;
  std::size_t n_layers = 0;
  if (!(in >> word >> s.channels >> s.height >> s.width) || word != "input") {
    throw DomainError("read_net: bad input line");
  }
  if (!(in >> word >> n_layers) || word != "layers") throw DomainError("read_net: bad layers line");
  std::vector<LayerSpec> layers;
  for (std::size_t l = 0; l < n_layers; ++l) {
    if (!(in >> word)) throw DomainError("read_net: truncated layer list");
    if (word == "dense") {
      std::size_t units = 0;
      in >> units;
      layers.push_back(LayerSpec::dense(units));
    } else if (word == "conv") {
      std::size_t units = 0, kernel = 0, pad = 0;
      in >> units >> kernel >> pad;
      layers.push_back(LayerSpec::conv(units, kernel, pad));
    } else if (word == "relu") {
      layers.push_back(LayerSpec::relu());
    } else if (word == "upsample") {
      std::size_t scale = 0;
      in >> scale;
      layers.push_back(LayerSpec::upsample(scale));
    } else {
      throw DomainError("read_net: unknown layer '" + word + "'");
    }
  }
  Net net(s, std::move(layers), 0);
  std::size_t n_tensors = 0;
  if (!(in >> word >> n_tensors) || word != "tensors" || n_tensors != net.params().size()) {
    throw DomainError("read_net: tensor count does not match layout");
  }
  for (auto& p : net.params()) {
    std::string name;
    std::size_t rank = 0;
    if (!(in >> name >> rank) || name != p.name || rank != p.shape.size()) {
      throw DomainError("read_net: unexpected tensor header for " + p.name);
    }
    for (const auto d : p.shape) {
      std::size_t got = 0;
      if (!(in >> got) || got != d) throw DomainError("read_net: shape mismatch in " + p.name);
    }
    for (double& v : p.values) {
      std::string tok;
      if (!(in >> tok)) throw DomainError("read_net: truncated values in " + p.name);
      v = std::stod(tok);
    }
  }
  return net;
}

}  // namespace fvi
