#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <iomanip>
#include <limits>
#include <numeric>
#include <ostream>
#include <sstream>

#include "fvi/config.hpp"
#include "fvi/evaluate.hpp"
#include "fvi_checks/checks.hpp"
#include "fvi_checks/oracles.hpp"

namespace fvi::checks {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(double v) {
  std::ostringstream ss;
  ss << std::setprecision(3) << v;
  return ss.str();
}

Tensor random_image(Shape shape, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Tensor t(shape);
  for (double& v : t.data) v = u(rng);
  return t;
}

std::vector<double> relative_errors(const std::vector<double>& estimate,
                                    const std::vector<double>& exact) {
  std::vector<double> out;
  for (std::size_t s = 0; s < exact.size(); ++s) {
    out.push_back(std::abs(estimate[s] - exact[s]) / std::abs(exact[s]));
  }
  return out;
}

}  // namespace

CheckResult check_structured_inversion() {
  const auto t0 = Clock::now();
  constexpr std::size_t kDims[] = {1, 4, 16, 64};
  std::mt19937_64 rng(101);
  double worst_inv = 0.0, worst_logdet = 0.0;
  for (std::size_t n = 0; n < 200; ++n) {
    const std::size_t b = 1 + n % 6;
    const std::size_t p = kDims[(n / 6) % 4];
    const StructuredCov k = random_pd(b, p, rng);
    const Eigen::MatrixXd dense = dense_of(k);
    const Eigen::MatrixXd reference = dense.inverse();
    worst_inv = std::max(worst_inv, (dense_of(schur_inverse(k)) - reference).cwiseAbs().maxCoeff());
    const double ref_logdet = dense_logdet(dense);
    worst_logdet = std::max(worst_logdet,
                            std::abs(logdet(k) - ref_logdet) / std::max(1.0, std::abs(ref_logdet)));
  }
  const double secs = seconds_since(t0);
  return {worst_inv <= 1e-8 && worst_logdet <= 1e-6 && secs < 30.0,
          "200 instances: max |inverse error| " + fmt(worst_inv) + " (<= 1e-8), logdet rel error " +
              fmt(worst_logdet) + " (<= 1e-6), " + fmt(secs) + " s (< 30 s)"};
}

CheckResult check_inversion_scaling() {
  constexpr std::size_t kBatch = 6;
  constexpr std::size_t kDims[] = {64, 256, 1024, 4096};
  std::mt19937_64 rng(202);
  std::vector<double> log_p, log_t;
  std::string timings;
  for (const std::size_t p : kDims) {
    const StructuredCov k = random_pd(kBatch, p, rng);
    double best = std::numeric_limits<double>::infinity();
    for (int rep = 0; rep < 7; ++rep) {
      std::size_t calls = 0;
      const auto t0 = Clock::now();
      double elapsed = 0.0;
      do {
        const StructuredCov inv = schur_inverse(k);
        if (inv.at(0, 0, 0) == 0.0) return {false, "unexpected zero inverse entry"};
        ++calls;
        elapsed = seconds_since(t0);
      } while (elapsed < 0.02);
      best = std::min(best, elapsed / static_cast<double>(calls));
    }
    log_p.push_back(std::log(static_cast<double>(p)));
    log_t.push_back(std::log(best));
    timings += " P=" + std::to_string(p) + ":" + fmt(best * 1e6) + "us";
  }
  const double mp = std::accumulate(log_p.begin(), log_p.end(), 0.0) / log_p.size();
  const double mt = std::accumulate(log_t.begin(), log_t.end(), 0.0) / log_t.size();
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < log_p.size(); ++i) {
    sxy += (log_p[i] - mp) * (log_t[i] - mt);
    sxx += (log_p[i] - mp) * (log_p[i] - mp);
  }
  const double slope = sxy / sxx;
  return {slope <= 1.2, "fitted exponent " + fmt(slope) + " (<= 1.2) at B=6;" + timings};
}

CheckResult check_kl() {
  std::mt19937_64 rng(303);
  std::normal_distribution<double> normal(0.0, 1.0);
  double worst = 0.0, smallest = std::numeric_limits<double>::infinity();
  for (std::size_t n = 0; n < 60; ++n) {
    const std::size_t b = 1 + n % 4;
    const std::size_t p = 1 + (n / 4) % 8;
    std::vector<double> mq(b * p), mp(b * p);
    for (double& v : mq) v = normal(rng);
    for (double& v : mp) v = normal(rng);
    const StructuredCov sq = random_pd(b, p, rng);
    // The last ten instances compare a Gaussian with itself.
    const bool same = n >= 50;
    const GaussianBatch q(mq, sq);
    const GaussianBatch prior = same ? q : GaussianBatch(mp, random_pd(b, p, rng));
    const double kl = gaussian_kl(q, prior);
    smallest = std::min(smallest, kl);
    const Eigen::VectorXd eq = Eigen::Map<const Eigen::VectorXd>(q.mean.data(), q.mean.size());
    const Eigen::VectorXd ep = Eigen::Map<const Eigen::VectorXd>(prior.mean.data(), prior.mean.size());
    const double reference = dense_gaussian_kl(eq, dense_of(q.cov), ep, dense_of(prior.cov));
    worst = std::max(worst, std::abs(kl - reference));
  }
  return {worst <= 1e-8 && smallest >= -1e-9,
          "50 random + 10 identical pairs: max |KL - dense KL| " + fmt(worst) +
              " (<= 1e-8), min KL " + fmt(smallest) + " (>= -1e-9)"};
}

CheckResult check_kernel_mc() {
  const auto t0 = Clock::now();
  const ArchSpec arch = builtin_arch("kernel-check");
  std::mt19937_64 rng(404);
  const Tensor xi = random_image(arch.input, rng);
  const Tensor xj = random_image(arch.input, rng);
  const std::vector<double> exact[3] = {equivalent_kernel(arch, xi, xi), equivalent_kernel(arch, xj, xj),
                                        equivalent_kernel(arch, xi, xj)};
  const auto errors = [&](const McKernel& mc) {
    std::vector<double> all;
    for (const auto* pair : {&mc.var_i, &mc.var_j, &mc.cross}) {
      const auto m = static_cast<std::size_t>(pair - &mc.var_i);
      const auto e = relative_errors(*pair, exact[m]);
      all.insert(all.end(), e.begin(), e.end());
    }
    return all;
  };
  const McKernel wide = mc_kernel(arch, xi, xj, 512, 0, 2000, 4040);
  const McKernel narrow = mc_kernel(arch, xi, xj, 32, 0, 2000, 4041);
  const auto wide_err = errors(wide);
  const auto narrow_err = errors(narrow);
  const double worst = *std::max_element(wide_err.begin(), wide_err.end());
  const double med_wide = median(wide_err);
  const double med_narrow = median(narrow_err);
  const double secs = seconds_since(t0);
  return {worst <= 0.05 && med_wide < med_narrow && secs < 300.0,
          "C=512, 2000 draws: max rel error " + fmt(worst) + " over 3x64 entries (<= 0.05); median rel error C=512 " +
              fmt(med_wide) + " < C=32 " + fmt(med_narrow) + "; " + fmt(secs) + " s (< 300 s)"};
}

CheckResult check_berhu() {
  constexpr double kGrid[] = {0.1, 0.5, 1.0, 2.0, 5.0, 10.0, 30.0};
  double worst_z = 0.0, worst_w = 0.0;
  for (const double c : kGrid) {
    const double bp[] = {-c, c};
    const double z = gibbs_normalizer_numeric([c](double y) { return berhu_loss(y, c); }, bp, 1e-12);
    const double second = integrate_real_line(
        [c](double y) { return y * y * std::exp(-berhu_loss(y, c)); }, bp, 1e-12);
    worst_z = std::max(worst_z, std::abs(berhu_log_z0(c) - std::log(z)));
    worst_w = std::max(worst_w, std::abs(berhu_w(c) - second / z));
  }
  const double limit_z = std::abs(berhu_log_z0(30.0) - std::log(2.0));
  const double limit_w = std::abs(berhu_w(30.0) - 2.0);

  double worst_mass = 0.0;
  std::vector<LikelihoodFamily> families = {LikelihoodFamily::gaussian(), LikelihoodFamily::laplace()};
  for (const double c : kGrid) families.push_back(LikelihoodFamily::berhu(c));
  constexpr double kCenter = 0.3;
  for (const auto& fam : families) {
    for (const double sigma : {0.5, 1.0, 2.0}) {
      const double c = fam.tag == FamilyTag::BerHu ? fam.berhu_c : 0.0;
      const double bp[] = {kCenter - c * sigma, kCenter, kCenter + c * sigma};
      const double mass = integrate_real_line(
          [&](double y) { return std::exp(location_scale_logpdf(fam, y, kCenter, sigma)); }, bp, 1e-12);
      worst_mass = std::max(worst_mass, std::abs(mass - 1.0));
    }
  }
  return {worst_z <= 1e-8 && worst_w <= 1e-8 && limit_z <= 1e-6 && limit_w <= 1e-6 && worst_mass <= 1e-6,
          "log Z0 vs quadrature " + fmt(worst_z) + ", w(c) vs quadrature " + fmt(worst_w) +
              " (<= 1e-8 on 7 thresholds); c=30 limits " + fmt(limit_z) + ", " + fmt(limit_w) +
              " (<= 1e-6); max |mass - 1| " + fmt(worst_mass) + " (<= 1e-6)"};
}

namespace {

struct GradCase {
  std::string name;
  FviModel model;
  Dataset batch;
};

FviModel image_model(LikelihoodFamily likelihood, std::uint64_t seed) {
  FviModel model;
  const bool classify = !likelihood.is_regression();
  model.task = classify ? TaskKind::Classification : TaskKind::Regression;
  model.likelihood = likelihood;
  model.prior.input = {1, 4, 4};
  model.prior.layers = {PriorConv{}, PriorRelu{}, PriorUpsample{2, 0, 0}, PriorConv{}};
  model.prior.prior_mean = classify ? 1.0 : 0.5;
  model.prior.output_channels = model.classes();
  VarFamilyOptions options;
  options.rank = 3;
  options.channels = model.classes();
  options.initial_mean = model.prior.prior_mean;
  model.family = make_var_family(model.prior.input,
                                 {LayerSpec::conv(4), LayerSpec::relu(), LayerSpec::upsample(2)},
                                 options, seed);
  return model;
}

Dataset random_batch(const FviModel& model, std::size_t n, std::mt19937_64& rng) {
  Dataset batch;
  std::normal_distribution<double> normal(0.5, 0.5);
  std::uniform_int_distribution<int> label(0, static_cast<int>(model.classes()) - 1);
  std::bernoulli_distribution ignore(0.1);
  const std::size_t plane = model.family.dim() / model.classes();
  for (std::size_t i = 0; i < n; ++i) {
    batch.inputs.push_back(random_image(model.prior.input, rng));
    std::vector<double> target;
    if (model.task == TaskKind::Regression) {
      for (std::size_t p = 0; p < model.family.dim(); ++p) target.push_back(normal(rng));
    } else {
      for (std::size_t s = 0; s < plane; ++s) target.push_back(ignore(rng) ? kIgnoreLabel : label(rng));
    }
    batch.targets.push_back(std::move(target));
  }
  return batch;
}

}  // namespace

CheckResult check_gradients() {
  std::mt19937_64 rng(606);
  std::vector<GradCase> cases;
  {
    Config config;
    config.rank = 3;
    config.hidden = "dense:8,relu";
    config.seed = 61;
    FviModel dense = config_model(config);
    cases.push_back({"gaussian-dense", dense, random_batch(dense, 3, rng)});
  }
  for (const auto& [name, fam] : std::vector<std::pair<std::string, LikelihoodFamily>>{
           {"gaussian-conv", LikelihoodFamily::gaussian()},
           {"laplace", LikelihoodFamily::laplace()},
           {"berhu", LikelihoodFamily::berhu(0.3)},
           {"boltzmann", LikelihoodFamily::boltzmann(3)}}) {
    FviModel model = image_model(fam, 62 + cases.size());
    cases.push_back({name, model, random_batch(model, 3, rng)});
  }
  bool ok = true;
  std::string detail;
  for (auto& c : cases) {
    const std::vector<Tensor> inducing = {inducing_input(c.batch.inputs, 0.1, rng())};
    const auto noise = draw_objective_noise(c.model, c.batch.size(), 2, rng());
    const GradCheck g = gradient_check(c.model, c.batch, inducing, 10.0, noise, 100, rng());
    ok = ok && g.failures == 0;
    detail += c.name + ": " + std::to_string(g.failures) + "/100 off, max rel " + fmt(g.max_rel_error) + "; ";
  }
  return {ok, detail + "tolerance 1e-4 relative (1e-7 absolute floor)"};
}

namespace {

Config toy_regression_config() {
  Config config;
  config.task = "regression1d";
  config.n_train = 512;
  config.n_test = 256;
  config.epochs = 800;
  config.lr = 2e-3;
  config.lr_decay = 0.995;
  config.seed = 0;
  config.data_seed = 1;
  return config;
}

Config toy_segmentation_config() {
  Config config;
  config.task = "miniseg";
  config.n_train = 256;
  config.n_test = 64;
  config.epochs = 30;
  config.lr = 1e-3;
  config.seed = 0;
  config.data_seed = 1;
  return config;
}

}  // namespace

CheckResult check_toy_regression() {
  const auto t0 = Clock::now();
  const Config config = toy_regression_config();
  const ToyDataset data = config_dataset(config);
  FviModel model = config_model(config);
  train(model, data.train, config_train(config));
  const RegressionReport report = evaluate_regression(model, data);

  std::vector<double> learned, truth;
  for (int i = 0; i <= 60; ++i) {
    const double x = -kRegression1dRange + 0.1 * i;
    learned.push_back(std::sqrt(predict_regression(model, encode_regression_1d(x)).pixels[0].aleatoric_var));
    truth.push_back(regression_1d_noise_sd(x));
  }
  const double rho = spearman(learned, truth);
  const double ratio = report.ood_epistemic_median / report.train_epistemic_median;
  const double secs = seconds_since(t0);
  return {report.calibration.score <= 0.10 && ratio >= 3.0 && rho >= 0.8 && secs <= 600.0,
          "(a) calibration " + fmt(report.calibration.score) + " (<= 0.10); (b) OOD/train epistemic " +
              fmt(ratio) + " (>= 3); (c) Spearman " + fmt(rho) + " (>= 0.8); rms " +
              fmt(report.errors.rms) + "; " + fmt(secs) + " s (<= 600 s)"};
}

CheckResult check_toy_segmentation() {
  const auto t0 = Clock::now();
  const Config config = toy_segmentation_config();
  const ToyDataset data = config_dataset(config);
  FviModel model = config_model(config);
  train(model, data.train, config_train(config));
  const SegmentationReport report = evaluate_segmentation(model, data, config.eval_samples, 77);
  const double secs = seconds_since(t0);
  return {report.scores.accuracy >= 0.9 && report.calibration.score <= 0.10 &&
              report.noisy_pixels > 0 && report.noisy_entropy_median > report.clean_entropy_median,
          "accuracy " + fmt(report.scores.accuracy) + " (>= 0.9); calibration " +
              fmt(report.calibration.score) + " (<= 0.10); entropy median noisy " +
              fmt(report.noisy_entropy_median) + " > clean " + fmt(report.clean_entropy_median) + " over " +
              std::to_string(report.noisy_pixels) + " noisy pixels; mean IoU " +
              fmt(report.scores.mean_iou) + "; " + fmt(secs) + " s"};
}

CheckResult check_single_forward() {
  std::mt19937_64 rng(909);
  bool ok = true;
  std::string detail;
  {
    Config config = toy_regression_config();
    config.epochs = 1;
    FviModel model = config_model(config);
    model.family.net().reset_forward_count();
    for (int i = 1; i <= 5; ++i) {
      predict_regression(model, encode_regression_1d(0.5 * i - 1.0));
      ok = ok && model.family.net().forward_count() == static_cast<std::size_t>(i);
    }
    detail += "regression: " + std::to_string(model.family.net().forward_count()) + " forwards for 5 inputs; ";
  }
  {
    const Config config = toy_segmentation_config();
    FviModel model = config_model(config);
    model.family.net().reset_forward_count();
    for (int i = 1; i <= 3; ++i) {
      predict_classes(model, random_image(model.prior.input, rng), 32, 5);
      ok = ok && model.family.net().forward_count() == static_cast<std::size_t>(i);
    }
    detail += "segmentation (32 logit samples): " + std::to_string(model.family.net().forward_count()) +
              " forwards for 3 inputs";
  }
  return {ok, detail};
}

namespace {

bool same_bits(double a, double b) { return std::memcmp(&a, &b, sizeof(double)) == 0; }

bool same_logs(const TrainLog& a, const TrainLog& b) {
  if (a.rows.size() != b.rows.size()) return false;
  for (std::size_t i = 0; i < a.rows.size(); ++i) {
    const LogRow& x = a.rows[i];
    const LogRow& y = b.rows[i];
    if (x.epoch != y.epoch || x.step != y.step || !same_bits(x.objective, y.objective) ||
        !same_bits(x.data_term, y.data_term) || !same_bits(x.kl, y.kl) || !same_bits(x.lr, y.lr) ||
        !same_bits(x.c_threshold, y.c_threshold)) {
      return false;
    }
  }
  return true;
}

}  // namespace

CheckResult check_determinism() {
  bool ok = true;
  std::string detail;
  {
    Config config = toy_regression_config();
    config.likelihood = "berhu";
    config.n_train = 64;
    config.n_test = 32;
    config.epochs = 20;
    const auto run = [&] {
      const ToyDataset data = config_dataset(config);
      FviModel model = config_model(config);
      TrainLog log = train(model, data.train, config_train(config));
      std::vector<double> preds;
      for (const auto& x : data.test.inputs) {
        for (const auto& px : predict_regression(model, x).pixels) {
          preds.insert(preds.end(), {px.mean, px.epistemic_var, px.aleatoric_var});
        }
      }
      return std::make_pair(log, preds);
    };
    const auto a = run();
    const auto b = run();
    const bool same = same_logs(a.first, b.first) &&
                      std::memcmp(a.second.data(), b.second.data(), a.second.size() * sizeof(double)) == 0;
    ok = ok && same;
    detail += std::string("berHu regression (") + std::to_string(a.first.rows.size()) + " steps): " +
              (same ? "identical" : "DIFFERENT") + "; ";
  }
  {
    Config config = toy_segmentation_config();
    config.n_train = 16;
    config.n_test = 8;
    config.epochs = 2;
    const auto run = [&] {
      const ToyDataset data = config_dataset(config);
      FviModel model = config_model(config);
      TrainLog log = train(model, data.train, config_train(config));
      std::vector<double> probs;
      for (std::size_t i = 0; i < data.test.size(); ++i) {
        const auto p = predict_classes(model, data.test.inputs[i], 32, i);
        probs.insert(probs.end(), p.probs.begin(), p.probs.end());
      }
      return std::make_pair(log, probs);
    };
    const auto a = run();
    const auto b = run();
    const bool same = same_logs(a.first, b.first) &&
                      std::memcmp(a.second.data(), b.second.data(), a.second.size() * sizeof(double)) == 0;
    ok = ok && same;
    detail += std::string("segmentation (") + std::to_string(a.first.rows.size()) + " steps): " +
              (same ? "identical" : "DIFFERENT");
  }
  return {ok, detail};
}

std::vector<NamedCheck> acceptance_checks() {
  return {
      {"C1", "structured inversion vs dense", check_structured_inversion},
      {"C2", "inversion cost linear in P", check_inversion_scaling},
      {"C3", "KL vs dense oracle", check_kl},
      {"C4", "CNN-GP kernel vs wide random CNN", check_kernel_mc},
      {"C5", "berHu normalizer, weight and densities", check_berhu},
      {"C6", "objective gradients vs finite differences", check_gradients},
      {"C7", "toy 1D heteroscedastic regression", check_toy_regression},
      {"C8", "toy 8x8 segmentation", check_toy_segmentation},
      {"C9", "one network forward per prediction", check_single_forward},
      {"C10", "bit-identical reruns", check_determinism},
  };
}

std::vector<NamedCheck> selftest_checks() {
  std::vector<NamedCheck> out;
  for (auto& c : acceptance_checks()) {
    if (c.id != "C7" && c.id != "C8" && c.id != "C10") out.push_back(std::move(c));
  }
  return out;
}

bool run_checks(const std::vector<NamedCheck>& checks, std::ostream& out) {
  bool all = true;
  for (const auto& check : checks) {
    const auto t0 = Clock::now();
    CheckResult result;
    try {
      result = check.run();
    } catch (const std::exception& e) {
      result = {false, std::string("threw: ") + e.what()};
    }
    all = all && result.passed;
    out << (result.passed ? "PASS " : "FAIL ") << check.id << ' ' << check.title << " | " << result.detail
        << " [" << fmt(seconds_since(t0)) << " s]" << std::endl;
  }
  out << (all ? "all checks passed" : "SOME CHECKS FAILED") << std::endl;
  return all;
}

}  // namespace fvi::checks
