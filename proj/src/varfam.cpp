#include "fvi/varfam.hpp"

#include <cmath>
#include <random>

#include "fvi/error.hpp"

namespace fvi {

VarHeads zero_heads(std::size_t rank, std::size_t dim) {
  return {std::vector<double>(dim, 0.0), std::vector<double>(rank * dim, 0.0),
          std::vector<double>(dim, 0.0), std::vector<double>(dim, 0.0)};
}

VarFamily::VarFamily(Net net, std::size_t rank, std::size_t channels, double jitter)
    : net_(std::move(net)), rank_(rank), channels_(channels), jitter_(jitter) {
  if (rank_ == 0) throw DomainError("VarFamily: rank L must be >= 1");
  if (channels_ == 0) throw DomainError("VarFamily: channels must be >= 1");
  if (jitter_ < 0.0) throw DomainError("VarFamily: jitter must be >= 0");
  if (net_.output_shape().channels != (rank_ + 3) * channels_) {
    throw DomainError("VarFamily: network must output (L + 3) * C channels");
  }
}

VarHeads VarFamily::heads(const Tensor& x) const {
  Trace trace;
  return heads(x, trace);
}

VarHeads VarFamily::heads(const Tensor& x, Trace& trace) const {
  const Tensor out = net_.forward(x, trace);
  const std::size_t plane = out.shape.plane();
  const std::size_t dim = plane * channels_;
  VarHeads h = zero_heads(rank_, dim);
  // Channel c of group g lives at output channel g * C + c.
  const auto raw = [&](std::size_t group, std::size_t p) {
    return out.data[(group * channels_) * plane + p];
  };
  for (std::size_t p = 0; p < dim; ++p) {
    h.mean[p] = raw(0, p);
    for (std::size_t k = 0; k < rank_; ++k) h.features[k * dim + p] = raw(1 + k, p);
    h.diag[p] = softplus(raw(rank_ + 1, p)) + jitter_;
    h.scale[p] = softplus(raw(rank_ + 2, p)) + kScaleFloor;
  }
  return h;
}

void VarFamily::backward(const Trace& trace, const VarHeads& d_heads, Gradients& grads) const {
  const Tensor& out = trace.output;
  const std::size_t plane = out.shape.plane();
  const std::size_t dim = plane * channels_;
  if (d_heads.dim() != dim || d_heads.features.size() != rank_ * dim) {
    throw DomainError("VarFamily::backward: head gradient shape mismatch");
  }
  Tensor d_out(out.shape);
  const auto slot = [&](std::size_t group, std::size_t p) -> double& {
    return d_out.data[(group * channels_) * plane + p];
  };
  const auto raw = [&](std::size_t group, std::size_t p) {
    return out.data[(group * channels_) * plane + p];
  };
  for (std::size_t p = 0; p < dim; ++p) {
    slot(0, p) = d_heads.mean[p];
    for (std::size_t k = 0; k < rank_; ++k) slot(1 + k, p) = d_heads.features[k * dim + p];
    slot(rank_ + 1, p) = d_heads.diag[p] * softplus_grad(raw(rank_ + 1, p));
    slot(rank_ + 2, p) = d_heads.scale[p] * softplus_grad(raw(rank_ + 2, p));
  }
  net_.backward(trace, d_out, grads);
}

VarFamily make_var_family(Shape input, std::vector<LayerSpec> hidden,
                          const VarFamilyOptions& options, std::uint64_t seed) {
  // Probe the hidden stack's output shape to pick the head layer.
  const Net probe(input, hidden, seed);
  const Shape body = probe.output_shape();
  const std::size_t out_channels = (options.rank + 3) * options.channels;
  if (body.plane() == 1) {
    hidden.push_back(LayerSpec::dense(out_channels));
  } else {
    hidden.push_back(LayerSpec::conv(out_channels, 3, 1));
  }
  Net net(input, std::move(hidden), seed);
  auto& bias = net.params().back().values;
  const std::size_t c = options.channels;
  for (std::size_t k = 0; k < c; ++k) {
    bias[k] = options.initial_mean;
    bias[(options.rank + 1) * c + k] = softplus_inverse(options.initial_diag);
    bias[(options.rank + 2) * c + k] = softplus_inverse(options.initial_scale);
  }
  return VarFamily(std::move(net), options.rank, options.channels, options.jitter);
}

StructuredCov q_cov(const std::vector<VarHeads>& heads) {
  if (heads.empty()) throw DomainError("q_cov: empty batch");
  const std::size_t b = heads.size();
  const std::size_t dim = heads.front().dim();
  const std::size_t rank = heads.front().rank();
  if (rank == 0) throw DomainError("q_cov: rank L must be >= 1");
  const double inv_rank = 1.0 / static_cast<double>(rank);
  StructuredCov cov(b, dim);
  for (std::size_t i = 0; i < b; ++i) {
    if (heads[i].dim() != dim || heads[i].rank() != rank) throw DomainError("q_cov: head mismatch");
    for (std::size_t j = i; j < b; ++j) {
      for (std::size_t p = 0; p < dim; ++p) {
        double acc = 0.0;
        for (std::size_t k = 0; k < rank; ++k) {
          acc += heads[i].features[k * dim + p] * heads[j].features[k * dim + p];
        }
        acc *= inv_rank;
        if (i == j) acc += heads[i].diag[p];
        cov.set(i, j, p, acc);
      }
    }
  }
  return cov;
}

QBatch q_at(const VarFamily& family, const std::vector<Tensor>& inputs) {
  QBatch out;
  out.heads.reserve(inputs.size());
  std::vector<double> mean;
  for (const auto& x : inputs) {
    out.heads.push_back(family.heads(x));
    mean.insert(mean.end(), out.heads.back().mean.begin(), out.heads.back().mean.end());
  }
  out.q = GaussianBatch(std::move(mean), q_cov(out.heads));
  return out;
}

QNoise draw_noise(std::size_t batch, std::size_t rank, std::size_t dim, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  QNoise noise{std::vector<double>(rank * dim), std::vector<double>(batch * dim)};
  for (double& e : noise.shared) e = normal(rng);
  for (double& e : noise.own) e = normal(rng);
  return noise;
}

namespace {

void check_noise(const std::vector<VarHeads>& heads, const QNoise& noise) {
  if (heads.empty()) throw DomainError("rsample_q: empty batch");
  const std::size_t dim = heads.front().dim();
  if (noise.shared.size() != heads.front().rank() * dim || noise.own.size() != heads.size() * dim) {
    throw DomainError("rsample_q: noise shape does not match heads");
  }
}

}  // namespace

std::vector<std::vector<double>> rsample_q(const std::vector<VarHeads>& heads,
                                           const QNoise& noise) {
  check_noise(heads, noise);
  const std::size_t dim = heads.front().dim();
  const std::size_t rank = heads.front().rank();
  const double inv_sqrt_rank = 1.0 / std::sqrt(static_cast<double>(rank));
  std::vector<std::vector<double>> f(heads.size(), std::vector<double>(dim));
  for (std::size_t i = 0; i < heads.size(); ++i) {
    const VarHeads& h = heads[i];
    for (std::size_t p = 0; p < dim; ++p) {
      double low_rank = 0.0;
      for (std::size_t k = 0; k < rank; ++k) {
        low_rank += h.features[k * dim + p] * noise.shared[k * dim + p];
      }
      f[i][p] = h.mean[p] + inv_sqrt_rank * low_rank + std::sqrt(h.diag[p]) * noise.own[i * dim + p];
    }
  }
  return f;
}

void rsample_q_backward(const std::vector<VarHeads>& heads, const QNoise& noise,
                        const std::vector<std::vector<double>>& d_f,
                        std::vector<VarHeads>& d_heads) {
  check_noise(heads, noise);
  const std::size_t dim = heads.front().dim();
  const std::size_t rank = heads.front().rank();
  const double inv_sqrt_rank = 1.0 / std::sqrt(static_cast<double>(rank));
  for (std::size_t i = 0; i < heads.size(); ++i) {
    const VarHeads& h = heads[i];
    VarHeads& d = d_heads[i];
    for (std::size_t p = 0; p < dim; ++p) {
      const double g = d_f[i][p];
      if (g == 0.0) continue;
      d.mean[p] += g;
      for (std::size_t k = 0; k < rank; ++k) {
        d.features[k * dim + p] += g * inv_sqrt_rank * noise.shared[k * dim + p];
      }
      d.diag[p] += g * noise.own[i * dim + p] / (2.0 * std::sqrt(h.diag[p]));
    }
  }
}

}  // namespace fvi
