#include "fvi/cnngp_kernel.hpp"

#include <cmath>
#include <istream>
#include <numbers>
#include <ostream>
#include <sstream>
#include <string>

#include "fvi/error.hpp"

namespace fvi {

double relu_moment(double var_i, double var_j, double cov) {
  if (var_i < 0.0 || var_j < 0.0) throw DomainError("relu_moment: negative variance");
  const double scale = std::sqrt(var_i * var_j);
  if (scale == 0.0) return 0.0;
  double rho = cov / scale;
  if (std::abs(rho) > 1.0 + 1e-9) {
    throw DomainError("relu_moment: correlation " + std::to_string(rho) + " outside [-1, 1]");
  }
  rho = std::clamp(rho, -1.0, 1.0);
  const double theta = std::acos(rho);
  return scale / (2.0 * std::numbers::pi) *
         (std::sin(theta) + (std::numbers::pi - theta) * std::cos(theta));
}

std::pair<std::size_t, std::size_t> conv_output_size(const PriorConv& conv, std::size_t h,
                                                     std::size_t w) {
  if (conv.stride == 0) throw DomainError("conv: stride must be >= 1");
  if (h + 2 * conv.pad < conv.kernel_h || w + 2 * conv.pad < conv.kernel_w) {
    throw DomainError("conv: kernel larger than padded input");
  }
  return {(h + 2 * conv.pad - conv.kernel_h) / conv.stride + 1,
          (w + 2 * conv.pad - conv.kernel_w) / conv.stride + 1};
}

std::pair<std::size_t, std::size_t> upsample_output_size(const PriorUpsample& up,
                                                         std::size_t h, std::size_t w) {
  if (up.scale > 0) return {h * up.scale, w * up.scale};
  if (up.out_h == 0 || up.out_w == 0) throw DomainError("upsample: needs scale or size");
  return {up.out_h, up.out_w};
}

namespace {

Map2d conv_map(const PriorConv& conv, const Map2d& in) {
  const auto [oh, ow] = conv_output_size(conv, in.height, in.width);
  Map2d out(oh, ow);
  const double norm = conv.weight_var / static_cast<double>(conv.kernel_h * conv.kernel_w);
  for (std::size_t y = 0; y < oh; ++y) {
    for (std::size_t x = 0; x < ow; ++x) {
      double acc = 0.0;
      for (std::size_t dy = 0; dy < conv.kernel_h; ++dy) {
        const auto sy = static_cast<std::ptrdiff_t>(y * conv.stride + dy) -
                        static_cast<std::ptrdiff_t>(conv.pad);
        if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(in.height)) continue;
        for (std::size_t dx = 0; dx < conv.kernel_w; ++dx) {
          const auto sx = static_cast<std::ptrdiff_t>(x * conv.stride + dx) -
                          static_cast<std::ptrdiff_t>(conv.pad);
          if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(in.width)) continue;
          acc += in.at(static_cast<std::size_t>(sy), static_cast<std::size_t>(sx));
        }
      }
      out.values[y * ow + x] = conv.bias_var + norm * acc;
    }
  }
  return out;
}

Map2d upsample_map(const PriorUpsample& up, const Map2d& in) {
  const auto [oh, ow] = upsample_output_size(up, in.height, in.width);
  Map2d out(oh, ow);
  for (std::size_t y = 0; y < oh; ++y) {
    const std::size_t sy = y * in.height / oh;
    for (std::size_t x = 0; x < ow; ++x) {
      out.values[y * ow + x] = in.at(sy, x * in.width / ow);
    }
  }
  return out;
}

void check_same_size(const KernelMaps& maps) {
  const auto same = [](const Map2d& a, const Map2d& b) {
    return a.height == b.height && a.width == b.width && a.values.size() == a.height * a.width &&
           b.values.size() == b.height * b.width;
  };
  if (!same(maps.var_i, maps.var_j) || !same(maps.var_i, maps.cross)) {
    throw DomainError("kernel maps: shape mismatch");
  }
}

}  // namespace

KernelMaps conv_propagate(const PriorConv& conv, const KernelMaps& maps) {
  check_same_size(maps);
  return {conv_map(conv, maps.var_i), conv_map(conv, maps.var_j), conv_map(conv, maps.cross)};
}

KernelMaps upsample_propagate(const PriorUpsample& up, const KernelMaps& maps) {
  check_same_size(maps);
  return {upsample_map(up, maps.var_i), upsample_map(up, maps.var_j),
          upsample_map(up, maps.cross)};
}

KernelMaps relu_propagate(const KernelMaps& maps) {
  check_same_size(maps);
  KernelMaps out = maps;
  for (std::size_t n = 0; n < maps.cross.values.size(); ++n) {
    const double vi = maps.var_i.values[n];
    const double vj = maps.var_j.values[n];
    out.var_i.values[n] = relu_moment(vi, vi, vi);
    out.var_j.values[n] = relu_moment(vj, vj, vj);
    out.cross.values[n] = relu_moment(vi, vj, maps.cross.values[n]);
  }
  return out;
}

KernelMaps input_maps(const Tensor& x_i, const Tensor& x_j) {
  if (!(x_i.shape == x_j.shape)) throw DomainError("input_maps: images differ in shape");
  const Shape& s = x_i.shape;
  KernelMaps maps{Map2d(s.height, s.width), Map2d(s.height, s.width), Map2d(s.height, s.width)};
  const double inv_c = 1.0 / static_cast<double>(s.channels);
  for (std::size_t c = 0; c < s.channels; ++c) {
    const auto a = x_i.channel(c);
    const auto b = x_j.channel(c);
    for (std::size_t n = 0; n < s.plane(); ++n) {
      maps.var_i.values[n] += a[n] * a[n];
      maps.var_j.values[n] += b[n] * b[n];
      maps.cross.values[n] += a[n] * b[n];
    }
  }
  for (std::size_t n = 0; n < s.plane(); ++n) {
    maps.var_i.values[n] *= inv_c;
    maps.var_j.values[n] *= inv_c;
    maps.cross.values[n] *= inv_c;
  }
  return maps;
}

void validate(const ArchSpec& arch) {
  if (arch.input.size() == 0) throw DomainError("arch: empty input shape");
  if (arch.output_channels == 0) throw DomainError("arch: output_channels must be >= 1");
  if (arch.noise_var < 0.0) throw DomainError("arch: noise_var must be >= 0");
  for (const auto& layer : arch.layers) {
    if (const auto* conv = std::get_if<PriorConv>(&layer)) {
      if (conv->weight_var < 0.0 || conv->bias_var < 0.0) {
        throw DomainError("arch: conv variances must be >= 0");
      }
      if (conv->kernel_h == 0 || conv->kernel_w == 0) throw DomainError("arch: empty kernel");
    }
  }
  output_shape(arch);
}

Shape output_shape(const ArchSpec& arch) {
  std::size_t h = arch.input.height, w = arch.input.width;
  for (const auto& layer : arch.layers) {
    if (const auto* conv = std::get_if<PriorConv>(&layer)) {
      std::tie(h, w) = conv_output_size(*conv, h, w);
    } else if (const auto* up = std::get_if<PriorUpsample>(&layer)) {
      std::tie(h, w) = upsample_output_size(*up, h, w);
    }
  }
  return {arch.output_channels, h, w};
}

std::size_t output_dim(const ArchSpec& arch) { return output_shape(arch).size(); }

namespace {

KernelMaps propagate_all(const ArchSpec& arch, KernelMaps maps) {
  for (const auto& layer : arch.layers) {
    if (const auto* conv = std::get_if<PriorConv>(&layer)) {
      maps = conv_propagate(*conv, maps);
    } else if (const auto* up = std::get_if<PriorUpsample>(&layer)) {
      maps = upsample_propagate(*up, maps);
    } else {
      maps = relu_propagate(maps);
    }
  }
  return maps;
}

}  // namespace

std::vector<double> equivalent_kernel(const ArchSpec& arch, const Tensor& x_i,
                                      const Tensor& x_j) {
  if (!(x_i.shape == arch.input) || !(x_j.shape == arch.input)) {
    throw DomainError("equivalent_kernel: input does not match arch input shape");
  }
  return propagate_all(arch, input_maps(x_i, x_j)).cross.values;
}

GaussianBatch prior_structured_cov(const ArchSpec& arch, const std::vector<Tensor>& batch) {
  if (batch.empty()) throw DomainError("prior_structured_cov: empty batch");
  const Shape out = output_shape(arch);
  const std::size_t plane = out.plane();
  const std::size_t dim = out.size();
  const std::size_t b = batch.size();

  StructuredCov cov(b, dim);
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = i; j < b; ++j) {
      const std::vector<double> k = equivalent_kernel(arch, batch[i], batch[j]);
      for (std::size_t c = 0; c < out.channels; ++c) {
        for (std::size_t s = 0; s < plane; ++s) {
          cov.set(i, j, c * plane + s, k[s] + (i == j ? arch.noise_var : 0.0));
        }
      }
    }
  }
  return GaussianBatch(std::vector<double>(b * dim, arch.prior_mean), std::move(cov));
}

namespace {

std::pair<std::string, std::string> split_kv(const std::string& token) {
  const auto eq = token.find('=');
  if (eq == std::string::npos) throw DomainError("arch: expected key=value, got '" + token + "'");
  return {token.substr(0, eq), token.substr(eq + 1)};
}

double to_double(const std::string& s) {
  std::size_t used = 0;
  const double v = std::stod(s, &used);
  if (used != s.size()) throw DomainError("arch: bad number '" + s + "'");
  return v;
}

std::size_t to_size(const std::string& s) {
  std::size_t used = 0;
  const unsigned long v = std::stoul(s, &used);
  if (used != s.size()) throw DomainError("arch: bad integer '" + s + "'");
  return v;
}

}  // namespace

ArchSpec parse_arch(std::istream& in) {
  ArchSpec arch;
  bool have_input = false;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream ss(line);
    std::string head;
    if (!(ss >> head)) continue;
    try {
      if (head == "input") {
        if (!(ss >> arch.input.channels >> arch.input.height >> arch.input.width)) {
          throw DomainError("expected 'input C H W'");
        }
        have_input = true;
      } else if (head == "prior_mean") {
        ss >> arch.prior_mean;
      } else if (head == "noise_var") {
        ss >> arch.noise_var;
      } else if (head == "output_channels") {
        ss >> arch.output_channels;
      } else if (head == "relu") {
        arch.layers.emplace_back(PriorRelu{});
      } else if (head == "conv") {
        PriorConv conv;
        std::string tok;
        while (ss >> tok) {
          const auto [k, v] = split_kv(tok);
          if (k == "kh") conv.kernel_h = to_size(v);
          else if (k == "kw") conv.kernel_w = to_size(v);
          else if (k == "stride") conv.stride = to_size(v);
          else if (k == "pad") conv.pad = to_size(v);
          else if (k == "weight_var") conv.weight_var = to_double(v);
          else if (k == "bias_var") conv.bias_var = to_double(v);
          else throw DomainError("unknown conv key '" + k + "'");
        }
        arch.layers.emplace_back(conv);
      } else if (head == "upsample") {
        PriorUpsample up;
        std::string tok;
        while (ss >> tok) {
          const auto [k, v] = split_kv(tok);
          if (k == "scale") {
            up.scale = to_size(v);
          } else if (k == "size") {
            const auto x = v.find('x');
            if (x == std::string::npos) throw DomainError("size must be HxW");
            up.scale = 0;
            up.out_h = to_size(v.substr(0, x));
            up.out_w = to_size(v.substr(x + 1));
          } else {
            throw DomainError("unknown upsample key '" + k + "'");
          }
        }
        arch.layers.emplace_back(up);
      } else {
        throw DomainError("unknown directive '" + head + "'");
      }
    } catch (const std::logic_error& e) {
      throw DomainError("arch line " + std::to_string(lineno) + ": " + e.what());
    } catch (const DomainError& e) {
      throw DomainError("arch line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (!have_input) throw DomainError("arch: missing 'input C H W'");
  validate(arch);
  return arch;
}

void write_arch(std::ostream& out, const ArchSpec& arch) {
  out << "input " << arch.input.channels << ' ' << arch.input.height << ' ' << arch.input.width
      << "\nprior_mean " << arch.prior_mean << "\nnoise_var " << arch.noise_var
      << "\noutput_channels " << arch.output_channels << '\n';
  for (const auto& layer : arch.layers) {
    if (const auto* conv = std::get_if<PriorConv>(&layer)) {
      out << "conv kh=" << conv->kernel_h << " kw=" << conv->kernel_w
          << " stride=" << conv->stride << " pad=" << conv->pad
          << " weight_var=" << conv->weight_var << " bias_var=" << conv->bias_var << '\n';
    } else if (const auto* up = std::get_if<PriorUpsample>(&layer)) {
      if (up->scale > 0) out << "upsample scale=" << up->scale << '\n';
      else out << "upsample size=" << up->out_h << 'x' << up->out_w << '\n';
    } else {
      out << "relu\n";
    }
  }
}

ArchSpec builtin_arch(const std::string& name) {
  const PriorConv conv3{3, 3, 1, 1, 0.2, 0.08};
  const PriorConv down3{3, 3, 2, 1, 0.2, 0.08};
  const PriorConv conv1{1, 1, 1, 0, 0.2, 0.08};
  ArchSpec arch;
  if (name == "regression1d") {
    arch.input = {1, 1, 8};
    arch.layers = {PriorConv{1, 8, 1, 0, 0.2, 0.08}, PriorRelu{}, conv1, PriorRelu{}, conv1};
    arch.prior_mean = 0.5;
  } else if (name == "depth8" || name == "seg8") {
    // Downsample twice, then interpolate back through 20/40/60/80/100 percent
    // of the 8x8 output, each followed by a convolution.
    arch.input = {1, 8, 8};
    arch.layers = {down3, PriorRelu{}, down3, PriorRelu{}};
    for (const std::size_t side : {2, 3, 5, 6, 8}) {
      arch.layers.emplace_back(PriorUpsample{0, side, side});
      arch.layers.emplace_back(conv3);
      if (side != 8) arch.layers.emplace_back(PriorRelu{});
    }
    arch.prior_mean = name == "seg8" ? 1.0 : 0.5;
    arch.output_channels = name == "seg8" ? 3 : 1;
  } else if (name == "kernel-check") {
    arch.input = {1, 8, 8};
    arch.layers = {down3, PriorRelu{}, conv1, PriorRelu{}, PriorUpsample{2, 0, 0}, conv3};
  } else {
    throw DomainError("unknown builtin arch '" + name + "'");
  }
  arch.noise_var = 0.1;
  validate(arch);
  return arch;
}

}  // namespace fvi
