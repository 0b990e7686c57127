#pragma once

// Line-oriented `key = value` experiment configuration. Unknown keys are
// rejected; `#` starts a comment.

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "fvi/fvi.hpp"
#include "fvi/toytasks.hpp"

namespace fvi {

struct Config {
  std::string task = "regression1d";  // regression1d | minidepth | miniseg
  std::string likelihood;             // empty: gaussian, or boltzmann for miniseg
  std::string arch;                   // prior ArchSpec file; empty: builtin for the task
  std::string hidden;                 // e.g. "dense:64,relu"; empty: task default
  std::size_t rank = 20;
  double jitter = 1e-3;
  double noise_var = 0.1;
  double prior_mean = -1.0;  // < 0: keep the arch value
  double initial_scale = 0.5;
  double initial_diag = 0.1;
  double lr = 1e-3;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  double lr_decay = 1.0;
  double grad_clip = 0.0;
  std::size_t epochs = 10;
  std::size_t batch_size = 4;
  std::size_t mc_samples = 8;
  std::size_t eval_samples = 32;
  double inducing_noise_var = 0.1;
  std::size_t inducing_count = 1;
  bool data_scale = true;
  std::size_t n_train = 512;
  std::size_t n_test = 256;
  std::uint64_t seed = 0;       // network init and training
  std::uint64_t data_seed = 1;  // dataset generation
  std::string output_dir = "fvi-out";
};

/// Throws DomainError on unknown keys or malformed values.
Config parse_config(std::istream& in);
/// Applies one `key=value` override.
void apply_override(Config& config, const std::string& assignment);
void write_config(std::ostream& out, const Config& config);
std::vector<std::string> config_keys();

/// Layer list from "dense:64,relu,conv:32,upsample:2".
std::vector<LayerSpec> parse_hidden(const std::string& text);

ArchSpec config_arch(const Config& config);
LikelihoodFamily config_likelihood(const Config& config);
TrainConfig config_train(const Config& config);
ToyDataset config_dataset(const Config& config);
/// Freshly initialised model matching the task's input and output shapes.
FviModel config_model(const Config& config);

}  // namespace fvi
