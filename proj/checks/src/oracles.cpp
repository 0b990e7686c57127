#include "fvi_checks/oracles.hpp"

#include <algorithm>
#include <cmath>
#include <variant>

#include "fvi/error.hpp"

namespace fvi::checks {

StructuredCov random_pd(std::size_t batch, std::size_t dim, std::mt19937_64& rng,
                        double diag_shift) {
  std::normal_distribution<double> normal(0.0, 1.0);
  StructuredCov k(batch, dim);
  for (std::size_t p = 0; p < dim; ++p) {
    Eigen::MatrixXd a(batch, batch);
    for (Eigen::Index r = 0; r < a.rows(); ++r) {
      for (Eigen::Index c = 0; c < a.cols(); ++c) a(r, c) = normal(rng);
    }
    Eigen::MatrixXd m = a * a.transpose() / static_cast<double>(batch);
    m.diagonal().array() += diag_shift;
    for (std::size_t i = 0; i < batch; ++i) {
      for (std::size_t j = i; j < batch; ++j) k.set(i, j, p, m(i, j));
    }
  }
  return k;
}

Eigen::MatrixXd dense_of(const StructuredCov& k) {
  const auto b = k.batch();
  const auto d = k.dim();
  Eigen::MatrixXd m = Eigen::MatrixXd::Zero(b * d, b * d);
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = 0; j < b; ++j) {
      for (std::size_t p = 0; p < d; ++p) m(i * d + p, j * d + p) = k.at(i, j, p);
    }
  }
  return m;
}

double dense_logdet(const Eigen::MatrixXd& m) {
  const Eigen::LLT<Eigen::MatrixXd> llt(m);
  return 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
}

double dense_gaussian_kl(const Eigen::VectorXd& mq, const Eigen::MatrixXd& sq,
                         const Eigen::VectorXd& mp, const Eigen::MatrixXd& sp) {
  const Eigen::LLT<Eigen::MatrixXd> lp(sp);
  const Eigen::VectorXd diff = mp - mq;
  const double trace = lp.solve(sq).trace();
  const double quad = diff.dot(lp.solve(diff));
  return 0.5 * (trace + quad - static_cast<double>(mq.size()) + dense_logdet(sp) - dense_logdet(sq));
}

namespace {

// Activations of a pair of inputs: channels x (2 * H * W), first half x_i.
struct Activation {
  Eigen::MatrixXd values;
  std::size_t height = 0;
  std::size_t width = 0;
};

Eigen::MatrixXd im2col(const Activation& a, std::size_t half, const PriorConv& conv,
                       std::size_t out_h, std::size_t out_w) {
  const auto channels = static_cast<std::size_t>(a.values.rows());
  const std::size_t plane = a.height * a.width;
  Eigen::MatrixXd col = Eigen::MatrixXd::Zero(channels * conv.kernel_h * conv.kernel_w, out_h * out_w);
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t ky = 0; ky < conv.kernel_h; ++ky) {
      for (std::size_t kx = 0; kx < conv.kernel_w; ++kx) {
        const std::size_t row = (c * conv.kernel_h + ky) * conv.kernel_w + kx;
        for (std::size_t oy = 0; oy < out_h; ++oy) {
          const long iy = static_cast<long>(oy * conv.stride + ky) - static_cast<long>(conv.pad);
          if (iy < 0 || iy >= static_cast<long>(a.height)) continue;
          for (std::size_t ox = 0; ox < out_w; ++ox) {
            const long ix = static_cast<long>(ox * conv.stride + kx) - static_cast<long>(conv.pad);
            if (ix < 0 || ix >= static_cast<long>(a.width)) continue;
            col(row, oy * out_w + ox) =
                a.values(c, half * plane + static_cast<std::size_t>(iy) * a.width + static_cast<std::size_t>(ix));
          }
        }
      }
    }
  }
  return col;
}

void fill_normal(Eigen::MatrixXd& m, double sd, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, sd);
  for (Eigen::Index c = 0; c < m.cols(); ++c) {
    for (Eigen::Index r = 0; r < m.rows(); ++r) m(r, c) = normal(rng);
  }
}

Activation apply_conv(const Activation& a, const PriorConv& conv, std::size_t out_channels,
                      std::mt19937_64& rng) {
  const std::size_t out_h = (a.height + 2 * conv.pad - conv.kernel_h) / conv.stride + 1;
  const std::size_t out_w = (a.width + 2 * conv.pad - conv.kernel_w) / conv.stride + 1;
  const std::size_t plane = out_h * out_w;
  const auto fan_in = static_cast<std::size_t>(a.values.rows()) * conv.kernel_h * conv.kernel_w;
  Eigen::MatrixXd cols(fan_in, 2 * plane);
  cols.leftCols(plane) = im2col(a, 0, conv, out_h, out_w);
  cols.rightCols(plane) = im2col(a, 1, conv, out_h, out_w);
  Eigen::MatrixXd w(out_channels, fan_in);
  fill_normal(w, std::sqrt(conv.weight_var / static_cast<double>(fan_in)), rng);
  Eigen::MatrixXd b(out_channels, 1);
  fill_normal(b, std::sqrt(conv.bias_var), rng);
  Activation out{w * cols, out_h, out_w};
  out.values.colwise() += b.col(0);
  return out;
}

// E[f_i * f_j | a] for a random conv layer on top of a: sigma_b^2 plus
// sigma_w^2 / fan_in times the window sum of a_i * a_j.
std::vector<double> conditional_readout(const Activation& a, const PriorConv& conv) {
  const std::size_t out_h = (a.height + 2 * conv.pad - conv.kernel_h) / conv.stride + 1;
  const std::size_t out_w = (a.width + 2 * conv.pad - conv.kernel_w) / conv.stride + 1;
  const Eigen::MatrixXd ci = im2col(a, 0, conv, out_h, out_w);
  const Eigen::MatrixXd cj = im2col(a, 1, conv, out_h, out_w);
  const double scale = conv.weight_var / static_cast<double>(ci.rows());
  std::vector<double> out(out_h * out_w);
  for (std::size_t s = 0; s < out.size(); ++s) {
    out[s] = conv.bias_var + scale * ci.col(static_cast<Eigen::Index>(s)).dot(cj.col(static_cast<Eigen::Index>(s)));
  }
  return out;
}

Activation apply_upsample(const Activation& a, const PriorUpsample& up) {
  const std::size_t out_h = up.scale > 0 ? a.height * up.scale : up.out_h;
  const std::size_t out_w = up.scale > 0 ? a.width * up.scale : up.out_w;
  const std::size_t in_plane = a.height * a.width;
  const std::size_t plane = out_h * out_w;
  Activation out{Eigen::MatrixXd(a.values.rows(), 2 * plane), out_h, out_w};
  for (std::size_t half = 0; half < 2; ++half) {
    for (std::size_t y = 0; y < out_h; ++y) {
      const std::size_t sy = y * a.height / out_h;
      for (std::size_t x = 0; x < out_w; ++x) {
        const std::size_t sx = x * a.width / out_w;
        out.values.col(half * plane + y * out_w + x) = a.values.col(half * in_plane + sy * a.width + sx);
      }
    }
  }
  return out;
}

}  // namespace

McKernel mc_kernel(const ArchSpec& arch, const Tensor& x_i, const Tensor& x_j, std::size_t width,
                   std::size_t out_channels, std::size_t draws, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::size_t last_conv = 0;
  for (std::size_t l = 0; l < arch.layers.size(); ++l) {
    if (std::holds_alternative<PriorConv>(arch.layers[l])) last_conv = l;
  }
  if (last_conv + 1 != arch.layers.size()) {
    throw DomainError("mc_kernel: architecture must end with a convolution");
  }
  const std::size_t in_plane = arch.input.plane();
  Activation input{Eigen::MatrixXd(arch.input.channels, 2 * in_plane), arch.input.height, arch.input.width};
  for (std::size_t c = 0; c < arch.input.channels; ++c) {
    for (std::size_t s = 0; s < in_plane; ++s) {
      input.values(c, s) = x_i.data[c * in_plane + s];
      input.values(c, in_plane + s) = x_j.data[c * in_plane + s];
    }
  }

  std::vector<double> sum[3], sum_sq[3];
  std::size_t plane = 0;
  for (std::size_t d = 0; d < draws; ++d) {
    Activation a = input;
    for (std::size_t l = 0; l < last_conv; ++l) {
      if (const auto* conv = std::get_if<PriorConv>(&arch.layers[l])) {
        a = apply_conv(a, *conv, width, rng);
      } else if (std::holds_alternative<PriorRelu>(arch.layers[l])) {
        a.values = a.values.cwiseMax(0.0);
      } else {
        a = apply_upsample(a, std::get<PriorUpsample>(arch.layers[l]));
      }
    }
    const auto& readout = std::get<PriorConv>(arch.layers[last_conv]);
    std::vector<double> v[3];
    if (out_channels == 0) {
      // Condition on the last hidden layer for each image pair separately.
      Activation ii = a, jj = a;
      const std::size_t hp = a.height * a.width;
      ii.values.rightCols(hp) = a.values.leftCols(hp);
      jj.values.leftCols(hp) = a.values.rightCols(hp);
      v[0] = conditional_readout(ii, readout);
      v[1] = conditional_readout(jj, readout);
      v[2] = conditional_readout(a, readout);
      plane = v[0].size();
    } else {
      const Activation f = apply_conv(a, readout, out_channels, rng);
      plane = f.height * f.width;
      const double inv_c = 1.0 / static_cast<double>(f.values.rows());
      for (auto& m : v) m.resize(plane);
      for (std::size_t s = 0; s < plane; ++s) {
        const auto fi = f.values.col(static_cast<Eigen::Index>(s));
        const auto fj = f.values.col(static_cast<Eigen::Index>(plane + s));
        v[0][s] = fi.squaredNorm() * inv_c;
        v[1][s] = fj.squaredNorm() * inv_c;
        v[2][s] = fi.dot(fj) * inv_c;
      }
    }
    if (d == 0) {
      for (int m = 0; m < 3; ++m) {
        sum[m].assign(plane, 0.0);
        sum_sq[m].assign(plane, 0.0);
      }
    }
    for (int m = 0; m < 3; ++m) {
      for (std::size_t s = 0; s < plane; ++s) {
        sum[m][s] += v[m][s];
        sum_sq[m][s] += v[m][s] * v[m][s];
      }
    }
  }
  McKernel out;
  std::vector<double>* mean_of[3] = {&out.var_i, &out.var_j, &out.cross};
  std::vector<double>* se_of[3] = {&out.se_var_i, &out.se_var_j, &out.se_cross};
  const double n = static_cast<double>(draws);
  for (int m = 0; m < 3; ++m) {
    mean_of[m]->resize(plane);
    se_of[m]->resize(plane);
    for (std::size_t s = 0; s < plane; ++s) {
      const double mean = sum[m][s] / n;
      const double var = std::max(0.0, sum_sq[m][s] / n - mean * mean);
      (*mean_of[m])[s] = mean;
      (*se_of[m])[s] = std::sqrt(var / std::max(1.0, n - 1.0));
    }
  }
  return out;
}

double fd_objective(FviModel& model, const Dataset& batch, const std::vector<Tensor>& inducing,
                    double data_weight, const std::vector<QNoise>& noise, std::size_t tensor,
                    std::size_t entry, double step) {
  double& w = model.family.net().params()[tensor].values[entry];
  const double saved = w;
  w = saved + step;
  const double up = fvi_objective(model, batch, inducing, data_weight, noise).terms.objective;
  w = saved - step;
  const double down = fvi_objective(model, batch, inducing, data_weight, noise).terms.objective;
  w = saved;
  return (up - down) / (2.0 * step);
}

GradCheck gradient_check(FviModel& model, const Dataset& batch, const std::vector<Tensor>& inducing,
                         double data_weight, const std::vector<QNoise>& noise,
                         std::size_t coordinates, std::uint64_t seed, double step, double rel_tol,
                         double abs_tol) {
  const ObjectiveEval eval = fvi_objective(model, batch, inducing, data_weight, noise);
  const auto& params = model.family.net().params();
  std::vector<std::pair<std::size_t, std::size_t>> all;
  for (std::size_t t = 0; t < params.size(); ++t) {
    for (std::size_t e = 0; e < params[t].values.size(); ++e) all.emplace_back(t, e);
  }
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, all.size() - 1);
  GradCheck out;
  for (std::size_t n = 0; n < coordinates; ++n) {
    const auto [t, e] = all[pick(rng)];
    const double analytic = eval.grads[t][e];
    const double numeric = fd_objective(model, batch, inducing, data_weight, noise, t, e, step);
    const double scale = std::max(std::abs(analytic), std::abs(numeric));
    const double err = std::abs(analytic - numeric);
    const double excess = err / (rel_tol * scale + abs_tol);
    out.worst_excess = std::max(out.worst_excess, excess);
    if (excess > 1.0) ++out.failures;
    if (scale > 1e-3) out.max_rel_error = std::max(out.max_rel_error, err / scale);
    ++out.coordinates;
  }
  return out;
}

}  // namespace fvi::checks
