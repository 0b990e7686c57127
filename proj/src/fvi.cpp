#include "fvi/fvi.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>
#include <string>

#include "fvi/error.hpp"

namespace fvi {

void validate(const FviModel& model) {
  validate(model.prior);
  const Net& net = model.family.net();
  if (!(net.input_shape() == model.prior.input)) {
    throw DomainError("model: network and prior disagree on input shape");
  }
  const Shape prior_out = output_shape(model.prior);
  if (prior_out.plane() != net.output_shape().plane()) {
    throw DomainError("model: network and prior disagree on output resolution");
  }
  if (model.family.channels() != model.classes() || prior_out.channels != model.classes()) {
    throw DomainError("model: output channels must equal the class count (1 for regression)");
  }
  if ((model.task == TaskKind::Classification) != !model.likelihood.is_regression()) {
    throw DomainError("model: likelihood does not match task");
  }
}

Tensor inducing_input(const std::vector<Tensor>& batch, double noise_var, std::uint64_t seed) {
  if (batch.empty()) throw DomainError("inducing_input: empty batch");
  if (noise_var < 0.0) throw DomainError("inducing_input: noise variance must be >= 0");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, batch.size() - 1);
  Tensor x = batch[pick(rng)];
  if (noise_var > 0.0) {
    std::normal_distribution<double> normal(0.0, std::sqrt(noise_var));
    for (double& v : x.data) v += normal(rng);
  }
  return x;
}

namespace {

std::vector<VarHeads> zero_like(const std::vector<VarHeads>& heads) {
  std::vector<VarHeads> out;
  out.reserve(heads.size());
  for (const auto& h : heads) out.push_back(zero_heads(h.rank(), h.dim()));
  return out;
}

// KL(q || p) and its gradient; d_heads receives d(-KL)/d(heads).
double kl_term(const std::vector<VarHeads>& heads, const GaussianBatch& prior,
               std::vector<VarHeads>& d_heads) {
  const std::size_t b = heads.size();
  const std::size_t dim = heads.front().dim();
  const std::size_t rank = heads.front().rank();
  if (prior.cov.batch() != b || prior.cov.dim() != dim) {
    throw DomainError("fvi objective: prior shape does not match the inputs");
  }
  const StructuredCov qcov = q_cov(heads);
  const SchurFactorization pf = schur_factorize(prior.cov);
  const SchurFactorization qf = schur_factorize(qcov);

  std::vector<double> diff(b * dim);
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t p = 0; p < dim; ++p) diff[i * dim + p] = prior.mean[i * dim + p] - heads[i].mean[p];
  }
  const std::vector<double> solved = multiply(pf.inverse, diff);
  double quad = 0.0;
  for (std::size_t n = 0; n < diff.size(); ++n) quad += diff[n] * solved[n];
  const double kl = 0.5 * (trace_product(pf.inverse, qcov) + quad - static_cast<double>(b * dim) +
                           pf.logdet - qf.logdet);

  // d(-KL)/d mu_q = P^-1 (mu_p - mu_q); d(-KL)/d Sigma_q = (Q^-1 - P^-1) / 2.
  const double inv_rank = 1.0 / static_cast<double>(rank);
  for (std::size_t i = 0; i < b; ++i) {
    VarHeads& d = d_heads[i];
    for (std::size_t p = 0; p < dim; ++p) d.mean[p] += solved[i * dim + p];
    for (std::size_t j = 0; j < b; ++j) {
      const auto qi = qf.inverse.block(i, j);
      const auto pi = pf.inverse.block(i, j);
      for (std::size_t p = 0; p < dim; ++p) {
        const double g = 0.5 * (qi[p] - pi[p]);
        if (i == j) d.diag[p] += g;
        for (std::size_t k = 0; k < rank; ++k) {
          d.features[k * dim + p] += 2.0 * inv_rank * g * heads[j].features[k * dim + p];
        }
      }
    }
  }
  return kl;
}

double marginal_var(const VarHeads& h, std::size_t p) {
  const std::size_t dim = h.dim();
  const std::size_t rank = h.rank();
  double v = 0.0;
  for (std::size_t k = 0; k < rank; ++k) v += h.features[k * dim + p] * h.features[k * dim + p];
  return v / static_cast<double>(rank) + h.diag[p];
}

double gaussian_data_term(const std::vector<VarHeads>& heads,
                          const std::vector<std::vector<double>>& targets, double weight,
                          std::vector<VarHeads>& d_heads) {
  double total = 0.0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const VarHeads& h = heads[i];
    VarHeads& d = d_heads[i];
    const std::size_t dim = h.dim();
    const std::size_t rank = h.rank();
    for (std::size_t p = 0; p < dim; ++p) {
      const double y = targets[i][p];
      if (!std::isfinite(y)) continue;
      const double mu = h.mean[p];
      const double var = marginal_var(h, p);
      const double sigma = h.scale[p];
      const double s2 = sigma * sigma;
      const double r = y - mu;
      total += expected_loglik_gaussian_closed(mu, var, y, sigma);
      const double d_var = -weight / (2.0 * s2);
      d.mean[p] += weight * r / s2;
      d.scale[p] += weight * (-1.0 / sigma + (r * r + var) / (s2 * sigma));
      d.diag[p] += d_var;
      for (std::size_t k = 0; k < rank; ++k) {
        d.features[k * dim + p] +=
            d_var * 2.0 * h.features[k * dim + p] / static_cast<double>(rank);
      }
    }
  }
  return total;
}

double mc_regression_data_term(const std::vector<VarHeads>& data_heads,
                               const std::vector<std::vector<double>>& targets,
                               const LikelihoodFamily& likelihood, double weight,
                               const std::vector<QNoise>& noise, std::vector<VarHeads>& d_heads) {
  const double inv_s = 1.0 / static_cast<double>(noise.size());
  double total = 0.0;
  for (const QNoise& eps : noise) {
    const auto f = rsample_q(data_heads, eps);
    std::vector<std::vector<double>> d_f(f.size(), std::vector<double>(f.front().size(), 0.0));
    for (std::size_t i = 0; i < f.size(); ++i) {
      for (std::size_t p = 0; p < f[i].size(); ++p) {
        const double y = targets[i][p];
        if (!std::isfinite(y)) continue;
        const LogpdfGrad g =
            location_scale_logpdf_grad(likelihood, y, f[i][p], data_heads[i].scale[p]);
        total += inv_s * g.value;
        d_f[i][p] = weight * inv_s * g.d_f;
        d_heads[i].scale[p] += weight * inv_s * g.d_sigma;
      }
    }
    rsample_q_backward(data_heads, eps, d_f, d_heads);
  }
  return total;
}

double mc_classification_data_term(const std::vector<VarHeads>& data_heads,
                                   const std::vector<std::vector<double>>& targets,
                                   std::size_t classes, double weight,
                                   const std::vector<QNoise>& noise,
                                   std::vector<VarHeads>& d_heads) {
  const double inv_s = 1.0 / static_cast<double>(noise.size());
  const std::size_t dim = data_heads.front().dim();
  const std::size_t plane = dim / classes;
  std::vector<double> logits(classes), scales(classes), d_logits(classes), d_scales(classes);
  double total = 0.0;
  for (const QNoise& eps : noise) {
    const auto f = rsample_q(data_heads, eps);
    std::vector<std::vector<double>> d_f(f.size(), std::vector<double>(dim, 0.0));
    for (std::size_t i = 0; i < f.size(); ++i) {
      if (targets[i].size() != plane) {
        throw DomainError("fvi objective: classification targets need one label per pixel");
      }
      for (std::size_t s = 0; s < plane; ++s) {
        const double label = targets[i][s];
        if (!std::isfinite(label) || static_cast<int>(label) == kIgnoreLabel) continue;
        const auto y = static_cast<std::size_t>(label);
        for (std::size_t k = 0; k < classes; ++k) {
          logits[k] = f[i][k * plane + s];
          scales[k] = data_heads[i].scale[k * plane + s];
        }
        total += inv_s * boltzmann_logprob_grad(logits, scales, y, d_logits, d_scales);
        for (std::size_t k = 0; k < classes; ++k) {
          d_f[i][k * plane + s] = weight * inv_s * d_logits[k];
          d_heads[i].scale[k * plane + s] += weight * inv_s * d_scales[k];
        }
      }
    }
    rsample_q_backward(data_heads, eps, d_f, d_heads);
  }
  return total;
}

}  // namespace

HeadObjective fvi_objective_heads(TaskKind task, const std::vector<VarHeads>& heads,
                                  const std::vector<std::vector<double>>& targets,
                                  const GaussianBatch& prior, const LikelihoodFamily& likelihood,
                                  double data_weight, const std::vector<QNoise>& noise) {
  if (heads.empty()) throw DomainError("fvi objective: empty input set");
  if (targets.size() > heads.size()) throw DomainError("fvi objective: more targets than inputs");
  HeadObjective out;
  out.d_heads = zero_like(heads);
  out.terms.kl = kl_term(heads, prior, out.d_heads);

  if (!targets.empty()) {
    std::vector<VarHeads> d_data = zero_like(
        std::vector<VarHeads>(heads.begin(), heads.begin() + static_cast<std::ptrdiff_t>(targets.size())));
    const std::vector<VarHeads> data_heads(heads.begin(),
                                           heads.begin() + static_cast<std::ptrdiff_t>(targets.size()));
    if (task == TaskKind::Regression && likelihood.tag == FamilyTag::Gaussian) {
      out.terms.data_term = gaussian_data_term(data_heads, targets, data_weight, d_data);
    } else {
      if (noise.empty()) throw DomainError("fvi objective: MC data term needs noise samples");
      if (task == TaskKind::Regression) {
        out.terms.data_term =
            mc_regression_data_term(data_heads, targets, likelihood, data_weight, noise, d_data);
      } else {
        out.terms.data_term = mc_classification_data_term(data_heads, targets, likelihood.classes,
                                                          data_weight, noise, d_data);
      }
    }
    for (std::size_t i = 0; i < d_data.size(); ++i) {
      VarHeads& d = out.d_heads[i];
      for (std::size_t n = 0; n < d.mean.size(); ++n) {
        d.mean[n] += d_data[i].mean[n];
        d.diag[n] += d_data[i].diag[n];
        d.scale[n] += d_data[i].scale[n];
      }
      for (std::size_t n = 0; n < d.features.size(); ++n) d.features[n] += d_data[i].features[n];
    }
  }
  out.terms.objective = data_weight * out.terms.data_term - out.terms.kl;
  return out;
}

std::vector<QNoise> draw_objective_noise(const FviModel& model, std::size_t n_data,
                                         std::size_t samples, std::uint64_t seed) {
  if (model.task == TaskKind::Regression && model.likelihood.tag == FamilyTag::Gaussian) return {};
  if (samples == 0) throw DomainError("need at least one MC sample");
  std::mt19937_64 rng(seed);
  std::vector<QNoise> noise;
  noise.reserve(samples);
  for (std::size_t s = 0; s < samples; ++s) {
    noise.push_back(draw_noise(n_data, model.family.rank(), model.family.dim(), rng()));
  }
  return noise;
}

namespace {

struct Forwarded {
  std::vector<Trace> traces;
  std::vector<VarHeads> heads;
};

Forwarded forward_all(const FviModel& model, const std::vector<Tensor>& inputs) {
  Forwarded fw;
  fw.traces.resize(inputs.size());
  fw.heads.reserve(inputs.size());
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    fw.heads.push_back(model.family.heads(inputs[i], fw.traces[i]));
  }
  return fw;
}

void reject_duplicates(const ArchSpec& prior, const std::vector<Tensor>& inputs) {
  if (prior.noise_var > 0.0) return;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    for (std::size_t j = i + 1; j < inputs.size(); ++j) {
      if (inputs[i].data == inputs[j].data) {
        throw DomainError("fvi objective: duplicate inputs make the noise-free prior singular");
      }
    }
  }
}

double threshold_from_heads(const std::vector<VarHeads>& heads, const Dataset& batch,
                            const std::vector<QNoise>& noise) {
  const std::vector<VarHeads> data_heads(heads.begin(),
                                         heads.begin() + static_cast<std::ptrdiff_t>(batch.size()));
  const std::size_t dim = data_heads.front().dim();
  std::vector<double> abs_res(batch.size() * dim, 0.0);
  for (const QNoise& eps : noise) {
    const auto f = rsample_q(data_heads, eps);
    for (std::size_t i = 0; i < f.size(); ++i) {
      for (std::size_t p = 0; p < dim; ++p) {
        const double y = batch.targets[i][p];
        if (std::isfinite(y)) abs_res[i * dim + p] += std::abs(y - f[i][p]);
      }
    }
  }
  for (double& r : abs_res) r /= static_cast<double>(noise.size());
  return std::max(berhu_threshold(abs_res), kBerhuMinThreshold);
}

ObjectiveEval objective_from_forward(const FviModel& model, const Forwarded& fw,
                                     const Dataset& batch, const std::vector<Tensor>& all_inputs,
                                     const LikelihoodFamily& likelihood, double data_weight,
                                     const std::vector<QNoise>& noise) {
  const GaussianBatch prior = prior_structured_cov(model.prior, all_inputs);
  const HeadObjective hob = fvi_objective_heads(model.task, fw.heads, batch.targets, prior,
                                                likelihood, data_weight, noise);
  ObjectiveEval eval{hob.terms, model.family.net().zero_gradients()};
  for (std::size_t i = 0; i < fw.heads.size(); ++i) {
    model.family.backward(fw.traces[i], hob.d_heads[i], eval.grads);
  }
  return eval;
}

std::vector<Tensor> union_inputs(const Dataset& batch, const std::vector<Tensor>& inducing) {
  std::vector<Tensor> all = batch.inputs;
  all.insert(all.end(), inducing.begin(), inducing.end());
  return all;
}

}  // namespace

ObjectiveEval fvi_objective(const FviModel& model, const Dataset& batch,
                            const std::vector<Tensor>& inducing, double data_weight,
                            const std::vector<QNoise>& noise) {
  if (batch.inputs.size() != batch.targets.size()) {
    throw DomainError("fvi objective: inputs and targets differ in count");
  }
  const std::vector<Tensor> all = union_inputs(batch, inducing);
  reject_duplicates(model.prior, all);
  const Forwarded fw = forward_all(model, all);
  return objective_from_forward(model, fw, batch, all, model.likelihood, data_weight, noise);
}

double batch_berhu_threshold(const FviModel& model, const Dataset& batch,
                             const std::vector<QNoise>& noise) {
  if (batch.size() == 0) throw DomainError("berhu threshold: empty batch");
  if (noise.empty()) throw DomainError("berhu threshold: needs MC noise");
  return threshold_from_heads(forward_all(model, batch.inputs).heads, batch, noise);
}

namespace {

bool all_finite(const Gradients& grads) {
  for (const auto& g : grads) {
    for (const double v : g) {
      if (!std::isfinite(v)) return false;
    }
  }
  return true;
}

Dataset subset(const Dataset& data, std::span<const std::size_t> idx) {
  Dataset out;
  for (const auto i : idx) {
    out.inputs.push_back(data.inputs[i]);
    out.targets.push_back(data.targets[i]);
  }
  return out;
}

}  // namespace

TrainLog train(FviModel& model, const Dataset& data, const TrainConfig& config) {
  validate(model);
  if (data.size() == 0) throw DomainError("train: empty dataset");
  if (data.inputs.size() != data.targets.size()) throw DomainError("train: inputs/targets mismatch");
  if (config.batch_size == 0 || config.mc_samples == 0) {
    throw DomainError("train: batch_size and mc_samples must be >= 1");
  }

  std::mt19937_64 rng(config.seed);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const double n_total = static_cast<double>(data.size());
  const bool is_berhu = model.likelihood.tag == FamilyTag::BerHu;

  SgdState state;
  SgdOptions sgd{config.lr, config.momentum, config.weight_decay};
  TrainLog log;
  double final_epoch_c = 0.0;

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    std::size_t step = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size, ++step) {
      const std::size_t stop = std::min(order.size(), start + config.batch_size);
      const Dataset batch =
          subset(data, std::span<const std::size_t>(order.data() + start, stop - start));

      std::vector<Tensor> inducing;
      for (std::size_t m = 0; m < config.inducing_count; ++m) {
        inducing.push_back(inducing_input(batch.inputs, config.inducing_noise_var, rng()));
      }
      const double weight = config.data_scale ? n_total / static_cast<double>(batch.size()) : 1.0;
      const std::vector<QNoise> noise =
          draw_objective_noise(model, batch.size(), config.mc_samples, rng());

      const std::vector<Tensor> all = union_inputs(batch, inducing);
      reject_duplicates(model.prior, all);
      const Forwarded fw = forward_all(model, all);

      LikelihoodFamily likelihood = model.likelihood;
      if (is_berhu) {
        likelihood.berhu_c = threshold_from_heads(fw.heads, batch, noise);
        if (epoch == config.epochs) final_epoch_c = std::max(final_epoch_c, likelihood.berhu_c);
      }
      ObjectiveEval eval =
          objective_from_forward(model, fw, batch, all, likelihood, weight, noise);

      if (!std::isfinite(eval.terms.objective) || !all_finite(eval.grads)) {
        std::ostringstream msg;
        msg << "train: non-finite objective or gradient at epoch " << epoch << ", step " << step
            << " (objective " << eval.terms.objective << ", data " << eval.terms.data_term
            << ", kl " << eval.terms.kl << ")";
        throw NonFinite(msg.str());
      }

      // Minimise -objective / N.
      double largest = 0.0;
      for (auto& g : eval.grads) {
        for (double& v : g) {
          v = -v / n_total;
          largest = std::max(largest, std::abs(v));
        }
      }
      if (config.grad_clip > 0.0 && largest > config.grad_clip) {
        const double shrink = config.grad_clip / largest;
        for (auto& g : eval.grads) {
          for (double& v : g) v *= shrink;
        }
      }
      sgd_step(model.family.net().params(), eval.grads, state, sgd);

      log.rows.push_back({epoch, step, eval.terms.objective, eval.terms.data_term, eval.terms.kl,
                          sgd.lr, is_berhu ? likelihood.berhu_c : 0.0});
    }
    sgd.lr *= config.lr_decay;
  }
  if (is_berhu && config.epochs > 0) model.likelihood.berhu_c = final_epoch_c;
  return log;
}

RegressionPrediction predict_regression(const FviModel& model, const Tensor& x) {
  if (model.task != TaskKind::Regression) throw DomainError("predict_regression: not a regression model");
  const VarHeads h = model.family.heads(x);
  RegressionPrediction out;
  out.pixels.reserve(h.dim());
  for (std::size_t p = 0; p < h.dim(); ++p) {
    out.pixels.push_back(predictive_moments(model.likelihood, h.mean[p], marginal_var(h, p), h.scale[p]));
  }
  return out;
}

ClassPrediction predict_classes(const FviModel& model, const Tensor& x, std::size_t samples,
                                std::uint64_t seed) {
  if (model.task != TaskKind::Classification) {
    throw DomainError("predict_classes: not a classification model");
  }
  if (samples == 0) throw DomainError("predict_classes: need at least one sample");
  const VarHeads h = model.family.heads(x);
  const std::size_t classes = model.classes();
  const std::size_t plane = h.dim() / classes;

  ClassPrediction out;
  out.classes = classes;
  out.probs.assign(plane * classes, 0.0);
  out.entropy.assign(plane, 0.0);
  out.labels.assign(plane, 0);

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> mean(classes), sd(classes), scales(classes), f(classes);
  for (std::size_t s = 0; s < plane; ++s) {
    for (std::size_t k = 0; k < classes; ++k) {
      const std::size_t p = k * plane + s;
      mean[k] = h.mean[p];
      sd[k] = std::sqrt(marginal_var(h, p));
      scales[k] = h.scale[p];
    }
    double* pbar = out.probs.data() + s * classes;
    for (std::size_t t = 0; t < samples; ++t) {
      for (std::size_t k = 0; k < classes; ++k) f[k] = mean[k] + sd[k] * normal(rng);
      const std::vector<double> probs = boltzmann_probs(f, scales);
      for (std::size_t k = 0; k < classes; ++k) pbar[k] += probs[k];
    }
    double entropy = 0.0;
    for (std::size_t k = 0; k < classes; ++k) {
      pbar[k] /= static_cast<double>(samples);
      if (pbar[k] > 0.0) entropy -= pbar[k] * std::log(pbar[k]);
    }
    out.entropy[s] = entropy;
    out.labels[s] = static_cast<int>(std::max_element(pbar, pbar + classes) - pbar);
  }
  return out;
}

void write_train_log(std::ostream& out, const TrainLog& log) {
  out << "epoch,step,objective,data_term,kl,lr,c_threshold\n";
  out << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (const auto& r : log.rows) {
    out << r.epoch << ',' << r.step << ',' << r.objective << ',' << r.data_term << ',' << r.kl
        << ',' << r.lr << ',' << r.c_threshold << '\n';
  }
}

void write_model(std::ostream& out, const FviModel& model) {
  out << std::setprecision(std::numeric_limits<double>::max_digits10);
  out << "fvi-model v1\n";
  out << "task " << (model.task == TaskKind::Regression ? "regression" : "classification") << '\n';
  out << "likelihood " << to_string(model.likelihood.tag) << ' ' << model.likelihood.berhu_c << ' '
      << model.likelihood.classes << '\n';
  out << "rank " << model.family.rank() << "\nchannels " << model.family.channels()
      << "\njitter " << model.family.jitter() << '\n';
  std::ostringstream arch;
  arch << std::setprecision(std::numeric_limits<double>::max_digits10);
  write_arch(arch, model.prior);
  const std::string arch_text = arch.str();
  out << "arch " << std::count(arch_text.begin(), arch_text.end(), '\n') << '\n' << arch_text;
  write_net(out, model.family.net());
}

FviModel read_model(std::istream& in) {
  std::string line, word;
  const auto next = [&](const char* what) {
    if (!std::getline(in, line)) throw DomainError(std::string("read_model: missing ") + what);
    return std::istringstream(line);
  };
  if (!std::getline(in, line) || line != "fvi-model v1") {
    throw DomainError("read_model: not an fvi-model v1 checkpoint");
  }
  FviModel model;
  {
    auto ss = next("task");
    std::string task;
    ss >> word >> task;
    if (word != "task" || (task != "regression" && task != "classification")) {
      throw DomainError("read_model: bad task line");
    }
    model.task = task == "regression" ? TaskKind::Regression : TaskKind::Classification;
  }
  {
    auto ss = next("likelihood");
    std::string name, c;
    ss >> word >> name >> c >> model.likelihood.classes;
    if (word != "likelihood") throw DomainError("read_model: bad likelihood line");
    model.likelihood.tag = family_tag_from_string(name);
    model.likelihood.berhu_c = std::stod(c);
  }
  std::size_t rank = 0, channels = 0, arch_lines = 0;
  double jitter = 0.0;
  {
    auto ss = next("rank");
    ss >> word >> rank;
  }
  {
    auto ss = next("channels");
    ss >> word >> channels;
  }
  {
    auto ss = next("jitter");
    std::string j;
    ss >> word >> j;
    jitter = std::stod(j);
  }
  {
    auto ss = next("arch");
    ss >> word >> arch_lines;
    if (word != "arch") throw DomainError("read_model: bad arch header");
  }
  std::string arch_text;
  for (std::size_t n = 0; n < arch_lines; ++n) {
    if (!std::getline(in, line)) throw DomainError("read_model: truncated arch");
    arch_text += line + '\n';
  }
  std::istringstream arch_in(arch_text);
  model.prior = parse_arch(arch_in);
  model.family = VarFamily(read_net(in), rank, channels, jitter);
  validate(model);
  return model;
}

}  // namespace fvi
