// fvi: train, evaluate and inspect functional-VI models on the toy tasks.
//
// Exit codes: 0 success, 1 usage or input error, 2 numerical failure.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <limits>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "fvi/config.hpp"
#include "fvi/error.hpp"
#include "fvi/evaluate.hpp"
#include "fvi_checks/checks.hpp"

namespace fs = std::filesystem;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitNumerical = 2;
constexpr const char* kOutputEnv = "FVI_OUTPUT_DIR";

struct CommonOptions {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string output;
};

fvi::Config load_config(const CommonOptions& opts) {
  fvi::Config config;
  if (!opts.config_path.empty()) {
    std::ifstream in(opts.config_path);
    if (!in) throw fvi::DomainError("cannot open config '" + opts.config_path + "'");
    config = fvi::parse_config(in);
    // An arch path inside a config file is relative to that file.
    if (!config.arch.empty() && fs::path(config.arch).is_relative()) {
      config.arch = (fs::path(opts.config_path).parent_path() / config.arch).string();
    }
  }
  for (const auto& o : opts.overrides) fvi::apply_override(config, o);
  if (const char* env = std::getenv(kOutputEnv); env != nullptr && *env != '\0') config.output_dir = env;
  if (!opts.output.empty()) config.output_dir = opts.output;
  return config;
}

fs::path output_dir(const fvi::Config& config) {
  fs::path dir(config.output_dir);
  fs::create_directories(dir);
  return dir;
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw fvi::DomainError("cannot write '" + path.string() + "'");
  return out;
}

void add_common(CLI::App* cmd, CommonOptions& opts) {
  cmd->add_option("-c,--config", opts.config_path, "key = value config file");
  cmd->add_option("-s,--set", opts.overrides, "override a config key (key=value)")->take_all();
  cmd->add_option("-o,--output", opts.output, "output directory (overrides config and $FVI_OUTPUT_DIR)");
}

int cmd_train(const CommonOptions& opts) {
  const fvi::Config config = load_config(opts);
  const fs::path dir = output_dir(config);
  const fvi::ToyDataset data = fvi::config_dataset(config);
  fvi::FviModel model = fvi::config_model(config);
  const fvi::TrainLog log = fvi::train(model, data.train, fvi::config_train(config));
  {
    auto out = open_out(dir / "config.txt");
    fvi::write_config(out, config);
  }
  {
    auto out = open_out(dir / "train_log.csv");
    fvi::write_train_log(out, log);
  }
  {
    auto out = open_out(dir / "model.txt");
    fvi::write_model(out, model);
  }
  const auto& last = log.rows.back();
  std::cout << "trained " << config.task << " for " << config.epochs << " epochs; final objective "
            << last.objective << " (data " << last.data_term << ", kl " << last.kl << ")\n"
            << "wrote " << (dir / "model.txt").string() << '\n';
  return 0;
}

int cmd_eval(const CommonOptions& opts, const std::string& checkpoint_arg) {
  const fvi::Config config = load_config(opts);
  const fs::path dir = output_dir(config);
  const fs::path checkpoint = checkpoint_arg.empty() ? dir / "model.txt" : fs::path(checkpoint_arg);
  std::ifstream in(checkpoint);
  if (!in) {
    throw fvi::DomainError("no checkpoint at '" + checkpoint.string() + "'; run `fvi train` first or pass --checkpoint");
  }
  const fvi::FviModel model = fvi::read_model(in);
  const fvi::ToyDataset data = fvi::config_dataset(config);

  auto metrics = open_out(dir / "metrics.csv");
  metrics << "metric,value\n" << std::setprecision(std::numeric_limits<double>::max_digits10);
  if (model.task == fvi::TaskKind::Regression) {
    const fvi::RegressionReport r = fvi::evaluate_regression(model, data);
    auto preds = open_out(dir / "predictions.csv");
    fvi::write_regression_predictions(preds, r.test);
    auto cal = open_out(dir / "calibration.csv");
    fvi::write_calibration_csv(cal, r.calibration.curve);
    metrics << "calibration_score," << r.calibration.score << "\nrel," << r.errors.rel << "\nlog10,"
            << r.errors.log10 << "\nrms," << r.errors.rms << "\ntrain_epistemic_median,"
            << r.train_epistemic_median << "\nood_epistemic_median," << r.ood_epistemic_median << '\n';
    std::cout << "calibration " << r.calibration.score << ", rms " << r.errors.rms << '\n';
  } else {
    const fvi::SegmentationReport r =
        fvi::evaluate_segmentation(model, data, config.eval_samples, config.seed);
    auto preds = open_out(dir / "predictions.csv");
    fvi::write_class_predictions(preds, r.test);
    auto cal = open_out(dir / "calibration.csv");
    fvi::write_calibration_csv(cal, r.calibration.curve);
    metrics << "accuracy," << r.scores.accuracy << "\nmean_iou," << r.scores.mean_iou
            << "\ncalibration_score," << r.calibration.score << "\nnoisy_entropy_median,"
            << r.noisy_entropy_median << "\nclean_entropy_median," << r.clean_entropy_median << '\n';
    std::cout << "accuracy " << r.scores.accuracy << ", mean IoU " << r.scores.mean_iou
              << ", calibration " << r.calibration.score << '\n';
  }
  std::cout << "wrote metrics to " << (dir / "metrics.csv").string() << '\n';
  return 0;
}

int cmd_kernel(const CommonOptions& opts, std::size_t count, const std::string& split) {
  const fvi::Config config = load_config(opts);
  const fs::path dir = output_dir(config);
  const fvi::ToyDataset data = fvi::config_dataset(config);
  const fvi::Dataset& source = split == "test" ? data.test : data.train;
  if (count == 0 || count > source.size()) {
    throw fvi::DomainError("kernel: --count must be in [1, " + std::to_string(source.size()) + "]");
  }
  const std::vector<fvi::Tensor> batch(source.inputs.begin(),
                                       source.inputs.begin() + static_cast<std::ptrdiff_t>(count));
  const fvi::GaussianBatch prior = fvi::prior_structured_cov(fvi::config_arch(config), batch);
  auto out = open_out(dir / "kernel.csv");
  fvi::write_csv(out, prior.cov);
  std::cout << "wrote " << count << "-input kernel to " << (dir / "kernel.csv").string() << '\n';
  return 0;
}

int cmd_gen_data(const CommonOptions& opts, std::size_t images) {
  const fvi::Config config = load_config(opts);
  const fs::path dir = output_dir(config);
  const fvi::ToyDataset data = fvi::config_dataset(config);
  {
    auto out = open_out(dir / "dataset.csv");
    fvi::write_dataset_csv(out, data);
  }
  {
    auto out = open_out(dir / "manifest.txt");
    out << "task = " << data.name << "\nseed = " << data.seed << "\ntrain = " << data.train.size()
        << "\ntest = " << data.test.size() << "\nood = " << data.ood.size()
        << "\ninput_shape = " << data.train.inputs.front().shape.channels << 'x'
        << data.train.inputs.front().shape.height << 'x' << data.train.inputs.front().shape.width
        << "\ntarget_size = " << data.train.targets.front().size() << '\n';
  }
  const auto& shape = data.train.inputs.front().shape;
  if (shape.plane() > 1) {
    const std::size_t n = std::min(images, data.train.size());
    const bool labels = data.name == "miniseg";
    for (std::size_t i = 0; i < n; ++i) {
      auto img = open_out(dir / ("train_" + std::to_string(i) + "_input.pgm"));
      fvi::write_pgm(img, shape.height, shape.width,
                     std::vector<double>(data.train.inputs[i].channel(0).begin(),
                                         data.train.inputs[i].channel(0).end()),
                     0.0, 1.0);
      auto tgt = open_out(dir / ("train_" + std::to_string(i) + "_target.pgm"));
      std::vector<double> target = data.train.targets[i];
      if (labels) {
        for (double& v : target) v = v == fvi::kIgnoreLabel ? 0.0 : (v + 1.0) / fvi::kSegClasses;
      }
      fvi::write_pgm(tgt, shape.height, shape.width, target, 0.0, 1.0);
    }
  }
  std::cout << "wrote " << data.name << " (" << data.train.size() << " train, " << data.test.size()
            << " test) to " << dir.string() << '\n';
  return 0;
}

int cmd_selftest(bool full) {
  const auto checks = full ? fvi::checks::acceptance_checks() : fvi::checks::selftest_checks();
  return fvi::checks::run_checks(checks, std::cout) ? 0 : kExitUsage;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Functional variational inference with CNN-GP priors"};
  app.require_subcommand(1);

  CommonOptions train_opts, eval_opts, kernel_opts, data_opts;
  std::string checkpoint;
  std::size_t kernel_count = 4;
  std::string kernel_split = "train";
  std::size_t pgm_images = 4;
  bool full = false;

  auto* train = app.add_subcommand("train", "train a model; writes model.txt, train_log.csv, config.txt");
  add_common(train, train_opts);
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint; writes predictions, calibration and metrics CSVs");
  add_common(eval, eval_opts);
  eval->add_option("--checkpoint", checkpoint, "model file (default: <output>/model.txt)");
  auto* kernel = app.add_subcommand("kernel", "dump the prior kernel of a batch as CSV");
  add_common(kernel, kernel_opts);
  kernel->add_option("-n,--count", kernel_count, "number of inputs");
  kernel->add_option("--split", kernel_split, "train or test")->check(CLI::IsMember({"train", "test"}));
  auto* gen = app.add_subcommand("gen-data", "write the task dataset as CSV plus graymaps");
  add_common(gen, data_opts);
  gen->add_option("--images", pgm_images, "number of graymap dumps");
  auto* selftest = app.add_subcommand("selftest", "run the oracle checks and print a pass/fail table");
  selftest->add_flag("--full", full, "run the full acceptance suite, including training runs");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (*train) return cmd_train(train_opts);
    if (*eval) return cmd_eval(eval_opts, checkpoint);
    if (*kernel) return cmd_kernel(kernel_opts, kernel_count, kernel_split);
    if (*gen) return cmd_gen_data(data_opts, pgm_images);
    if (*selftest) return cmd_selftest(full);
  } catch (const fvi::NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  }
  return kExitUsage;
}
