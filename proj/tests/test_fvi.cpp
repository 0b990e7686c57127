#include <doctest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "fvi/config.hpp"
#include "fvi/error.hpp"
#include "fvi/evaluate.hpp"
#include "fvi/fvi.hpp"
#include "fvi_checks/oracles.hpp"

using namespace fvi;

namespace {

Tensor random_image(Shape shape, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Tensor t(shape);
  for (auto& v : t.data) v = unit(rng);
  return t;
}

FviModel regression_model(std::size_t rank = 3) {
  Config cfg;
  cfg.task = "regression1d";
  cfg.rank = rank;
  cfg.hidden = "dense:8,relu";
  return config_model(cfg);
}

FviModel segmentation_model() {
  Config cfg;
  cfg.task = "miniseg";
  cfg.rank = 3;
  cfg.hidden = "conv:4,relu";
  return config_model(cfg);
}

// Heads whose q equals the prior exactly: features are sqrt(L) times the
// columns of each per-pixel Cholesky factor and D is zero.
std::vector<VarHeads> heads_matching(const GaussianBatch& prior) {
  const std::size_t b = prior.cov.batch();
  const std::size_t dim = prior.cov.dim();
  const PerPixelView factors = cholesky_per_pixel(prior.cov);
  std::vector<VarHeads> heads;
  for (std::size_t i = 0; i < b; ++i) {
    VarHeads h = zero_heads(b, dim);
    for (std::size_t p = 0; p < dim; ++p) {
      h.mean[p] = prior.mean[i * dim + p];
      h.scale[p] = 1.0;
      for (std::size_t k = 0; k < b; ++k) {
        h.features[k * dim + p] = std::sqrt(static_cast<double>(b)) * factors.pixels[p](static_cast<Eigen::Index>(i),
                                                                                     static_cast<Eigen::Index>(k));
      }
    }
    heads.push_back(h);
  }
  return heads;
}

Dataset toy_batch(const FviModel& model, std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  Dataset d;
  for (std::size_t i = 0; i < n; ++i) {
    d.inputs.push_back(random_image(model.prior.input, rng));
    std::vector<double> y(model.family.dim());
    for (auto& v : y) v = 0.5 + 0.3 * normal(rng);
    d.targets.push_back(y);
  }
  return d;
}

}  // namespace

TEST_SUITE("fvi") {
  TEST_CASE("inducing input: copy, reproducibility and noise variance") {
    std::mt19937_64 rng(61);
    const Shape shape{1, 4, 4};
    const std::vector<Tensor> batch{random_image(shape, rng), random_image(shape, rng), random_image(shape, rng)};
    const Tensor copy = inducing_input(batch, 0.0, 5);
    bool member = false;
    for (const auto& x : batch) member = member || x.data == copy.data;
    CHECK(member);
    CHECK(inducing_input(batch, 0.1, 7).data == inducing_input(batch, 0.1, 7).data);
    CHECK_THROWS_AS(inducing_input({}, 0.1, 1), DomainError);

    const std::vector<Tensor> single{batch[0]};
    const std::size_t draws = 10000;
    double sum_sq = 0.0;
    std::size_t n = 0;
    for (std::size_t s = 0; s < draws; ++s) {
      const Tensor x = inducing_input(single, 0.1, 1000 + s);
      for (std::size_t k = 0; k < x.size(); ++k, ++n) {
        const double d = x.data[k] - batch[0].data[k];
        sum_sq += d * d;
      }
    }
    CHECK(std::abs(sum_sq / static_cast<double>(n) - 0.1) <= 3.0 * std::sqrt(2.0 * 0.01 / static_cast<double>(n)));
  }

  TEST_CASE("objective vanishes when q equals the prior and data carries no weight") {
    const FviModel model = regression_model();
    std::mt19937_64 rng(62);
    const GaussianBatch prior =
        prior_structured_cov(model.prior, {random_image(model.prior.input, rng), random_image(model.prior.input, rng)});
    const auto heads = heads_matching(prior);
    const HeadObjective obj =
        fvi_objective_heads(TaskKind::Regression, heads, {}, prior, model.likelihood, 0.0, {});
    CHECK(std::abs(obj.terms.kl) <= 1e-10);
    CHECK(std::abs(obj.terms.objective) <= 1e-10);
    // Stationary point of -KL in the mean.
    for (const auto& d : obj.d_heads) {
      for (const double v : d.mean) CHECK(std::abs(v) <= 1e-10);
    }
  }

  TEST_CASE("Gaussian closed-form data term agrees with Monte Carlo") {
    const FviModel model = regression_model(4);
    const Dataset batch = toy_batch(model, 2, 63);
    const QBatch q = q_at(model.family, batch.inputs);
    const GaussianBatch prior = prior_structured_cov(model.prior, batch.inputs);
    const HeadObjective closed =
        fvi_objective_heads(TaskKind::Regression, q.heads, batch.targets, prior, model.likelihood, 1.0, {});
    const std::size_t samples = 10000;
    double sum = 0.0, sum_sq = 0.0;
    for (std::size_t s = 0; s < samples; ++s) {
      const auto f = rsample_q(q.heads, draw_noise(2, 4, model.family.dim(), 500 + s));
      double ll = 0.0;
      for (std::size_t i = 0; i < 2; ++i) {
        for (std::size_t p = 0; p < f[i].size(); ++p) {
          ll += location_scale_logpdf(LikelihoodFamily::gaussian(), batch.targets[i][p], f[i][p], q.heads[i].scale[p]);
        }
      }
      sum += ll;
      sum_sq += ll * ll;
    }
    const double mean = sum / samples;
    const double se = std::sqrt((sum_sq / samples - mean * mean) / samples);
    CHECK(std::abs(closed.terms.data_term - mean) <= 3.0 * se);
  }

  TEST_CASE("data weight scales the data term linearly") {
    FviModel model = regression_model();
    const Dataset batch = toy_batch(model, 3, 64);
    std::mt19937_64 rng(65);
    const std::vector<Tensor> inducing{random_image(model.prior.input, rng)};
    const ObjectiveEval a = fvi_objective(model, batch, inducing, 64.0, {});
    const ObjectiveEval b = fvi_objective(model, batch, inducing, 128.0, {});
    CHECK(a.terms.data_term == b.terms.data_term);
    CHECK(a.terms.kl == b.terms.kl);
    CHECK(b.terms.objective - a.terms.objective == doctest::Approx(64.0 * a.terms.data_term).epsilon(1e-12));
    CHECK(a.terms.kl >= -1e-9);
  }

  TEST_CASE("objective gradients match finite differences on a small model") {
    FviModel model = regression_model();
    const Dataset batch = toy_batch(model, 3, 66);
    std::mt19937_64 rng(67);
    const std::vector<Tensor> inducing{random_image(model.prior.input, rng)};
    const auto result = checks::gradient_check(model, batch, inducing, 10.0, {}, 40, 68);
    CHECK(result.coordinates == 40);
    CHECK(result.failures == 0);

    FviModel laplace = regression_model();
    laplace.likelihood = LikelihoodFamily::laplace();
    const auto noise = draw_objective_noise(laplace, batch.size(), 2, 69);
    CHECK(checks::gradient_check(laplace, batch, inducing, 10.0, noise, 40, 70).failures == 0);
  }

  TEST_CASE("noise-free priors reject duplicate inputs") {
    FviModel model = regression_model();
    model.prior.noise_var = 0.0;
    Dataset batch = toy_batch(model, 2, 71);
    batch.inputs[1] = batch.inputs[0];
    CHECK_THROWS_AS(fvi_objective(model, batch, {}, 1.0, {}), DomainError);
    model.prior.noise_var = 0.1;
    CHECK_NOTHROW(fvi_objective(model, batch, {}, 1.0, {}));
  }

  TEST_CASE("MC families require noise samples") {
    FviModel model = regression_model();
    model.likelihood = LikelihoodFamily::berhu(1.0);
    const Dataset batch = toy_batch(model, 2, 72);
    CHECK_THROWS_AS(fvi_objective(model, batch, {}, 1.0, {}), DomainError);
    CHECK(draw_objective_noise(regression_model(), 2, 4, 1).empty());
    CHECK(draw_objective_noise(model, 2, 4, 1).size() == 4);
  }

  TEST_CASE("zero learning rate leaves parameters unchanged but logs every step") {
    Config cfg;
    cfg.n_train = 16;
    cfg.n_test = 4;
    FviModel model = regression_model();
    const ToyDataset data = config_dataset(cfg);
    const auto before = model.family.net().params();
    TrainConfig tc;
    tc.lr = 0.0;
    tc.epochs = 2;
    tc.batch_size = 4;
    const TrainLog log = train(model, data.train, tc);
    CHECK(log.rows.size() == 8);
    CHECK(log.rows.front().epoch == 1);
    for (std::size_t t = 0; t < before.size(); ++t) CHECK(model.family.net().params()[t].values == before[t].values);
  }

  TEST_CASE("seeded training is reproducible and improves the objective") {
    Config cfg;
    cfg.n_train = 128;
    cfg.n_test = 8;
    const ToyDataset data = config_dataset(cfg);
    TrainConfig tc;
    tc.epochs = 500;
    tc.batch_size = 16;
    tc.lr = 2e-3;
    tc.seed = 3;
    FviModel a = regression_model();
    FviModel b = regression_model();
    const TrainLog la = train(a, data.train, tc);
    const TrainLog lb = train(b, data.train, tc);
    std::ostringstream sa, sb;
    write_train_log(sa, la);
    write_train_log(sb, lb);
    CHECK(sa.str() == sb.str());
    CHECK(sa.str().rfind("epoch,step,objective,data_term,kl,lr,c_threshold\n", 0) == 0);

    const auto epoch_mean = [&](std::size_t epoch) {
      double s = 0.0;
      std::size_t n = 0;
      for (const auto& row : la.rows) {
        if (row.epoch == epoch) {
          s += row.objective;
          ++n;
        }
      }
      return s / static_cast<double>(n);
    };
    CHECK(epoch_mean(tc.epochs) > epoch_mean(1));
  }

  TEST_CASE("non-finite targets are masked; non-finite parameters abort training") {
    FviModel model = regression_model();
    Dataset data = toy_batch(model, 4, 73);
    data.targets[2][0] = std::nan("");
    TrainConfig tc;
    tc.epochs = 1;
    const TrainLog log = train(model, data, tc);
    for (const auto& row : log.rows) CHECK(std::isfinite(row.objective));

    FviModel broken = regression_model();
    broken.family.net().params().front().values[0] = std::nan("");
    CHECK_THROWS_AS(train(broken, toy_batch(broken, 4, 74), tc), NumericalError);
  }

  TEST_CASE("regression prediction: one forward and additive variances") {
    FviModel model = regression_model();
    std::mt19937_64 rng(74);
    const Tensor x = random_image(model.prior.input, rng);
    model.family.net().reset_forward_count();
    const RegressionPrediction pred = predict_regression(model, x);
    CHECK(model.family.net().forward_count() == 1);
    const QBatch q = q_at(model.family, {x});
    REQUIRE(pred.pixels.size() == q.heads[0].dim());
    for (std::size_t p = 0; p < pred.pixels.size(); ++p) {
      CHECK(pred.pixels[p].mean == q.heads[0].mean[p]);
      CHECK(pred.pixels[p].epistemic_var == doctest::Approx(q.q.cov.at(0, 0, p)).epsilon(1e-14));
      CHECK(pred.pixels[p].aleatoric_var == doctest::Approx(q.heads[0].scale[p] * q.heads[0].scale[p]).epsilon(1e-14));
      CHECK(pred.pixels[p].total_var == doctest::Approx(pred.pixels[p].epistemic_var + pred.pixels[p].aleatoric_var));
    }
  }

  TEST_CASE("class prediction: confident logits give near-zero entropy") {
    FviModel model = segmentation_model();
    auto& params = model.family.net().params();
    for (auto& v : params[params.size() - 2].values) v = 0.0;
    auto& bias = params.back().values;
    const std::size_t classes = model.classes();
    const std::size_t rank = model.family.rank();
    for (std::size_t k = 0; k < classes; ++k) {
      bias[k] = k == 1 ? 50.0 : 0.0;
      for (std::size_t f = 0; f < rank; ++f) bias[(1 + f) * classes + k] = 0.0;
    }
    std::mt19937_64 rng(75);
    const Tensor x = random_image(model.prior.input, rng);
    model.family.net().reset_forward_count();
    const ClassPrediction pred = predict_classes(model, x, 32, 1);
    CHECK(model.family.net().forward_count() == 1);
    for (std::size_t s = 0; s < pred.labels.size(); ++s) {
      CHECK(pred.labels[s] == 1);
      CHECK(pred.entropy[s] <= 1e-9);
      double total = 0.0;
      for (std::size_t k = 0; k < classes; ++k) total += pred.probs[s * classes + k];
      CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
    }
    CHECK(predict_classes(model, x, 32, 1).probs == pred.probs);
  }

  TEST_CASE("off-distribution input is less certain than training inputs") {
    Config cfg;
    cfg.task = "miniseg";
    cfg.n_train = 64;
    cfg.n_test = 4;
    cfg.epochs = 8;
    cfg.batch_size = 4;
    const ToyDataset data = config_dataset(cfg);
    FviModel model = config_model(cfg);
    train(model, data.train, config_train(cfg));
    std::vector<double> train_entropy;
    for (const auto& x : data.train.inputs) {
      for (const double h : predict_classes(model, x, 32, 2).entropy) train_entropy.push_back(h);
    }
    // White-noise images lack the blob structure of every training image.
    std::mt19937_64 rng(77);
    std::vector<double> probe_entropy;
    for (int i = 0; i < 20; ++i) {
      const Tensor probe = random_image(model.prior.input, rng);
      for (const double h : predict_classes(model, probe, 32, 3 + i).entropy) probe_entropy.push_back(h);
    }
    CHECK(median(probe_entropy) >= median(train_entropy));
  }

  TEST_CASE("model checkpoint round trip preserves predictions") {
    FviModel model = regression_model();
    model.likelihood = LikelihoodFamily::berhu(0.37);
    std::stringstream ss;
    write_model(ss, model);
    const FviModel back = read_model(ss);
    CHECK(back.likelihood.tag == FamilyTag::BerHu);
    CHECK(back.likelihood.berhu_c == 0.37);
    std::mt19937_64 rng(76);
    const Tensor x = random_image(model.prior.input, rng);
    const auto a = predict_regression(model, x);
    const auto b = predict_regression(back, x);
    CHECK(a.pixels[0].mean == b.pixels[0].mean);
    CHECK(a.pixels[0].total_var == b.pixels[0].total_var);

    std::istringstream junk("fvi-model v0\n");
    CHECK_THROWS_AS(read_model(junk), DomainError);
  }

  TEST_CASE("validate rejects mismatched prior and network") {
    FviModel model = regression_model();
    CHECK_NOTHROW(validate(model));
    model.prior.input = Shape{1, 4, 4};
    CHECK_THROWS_AS(validate(model), DomainError);
  }
}
