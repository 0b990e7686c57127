#pragma once

// Functional variational inference: maximise
//   (N/B) sum_i E_q[log p(y_i | f(x_i))] - KL(q(f^X) || p(f^X)),  X = X_B u X'
// with q the variational GP of varfam and p the CNN-GP prior of cnngp_kernel.

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <vector>

#include "fvi/cnngp_kernel.hpp"
#include "fvi/likelihoods.hpp"
#include "fvi/varfam.hpp"

namespace fvi {

/// Label value excluded from classification losses and metrics.
inline constexpr int kIgnoreLabel = 255;

enum class TaskKind { Regression, Classification };

struct FviModel {
  TaskKind task = TaskKind::Regression;
  VarFamily family;
  ArchSpec prior;
  /// For berHu, berhu_c holds the threshold recorded during training.
  LikelihoodFamily likelihood;

  std::size_t classes() const { return task == TaskKind::Classification ? likelihood.classes : 1; }
};

/// Checks that network and prior agree on input shape and output size.
void validate(const FviModel& model);

struct TrainConfig {
  std::size_t batch_size = 4;
  std::size_t mc_samples = 8;
  std::size_t epochs = 10;
  double lr = 1e-3;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  double lr_decay = 1.0;  // multiplied into lr after every epoch
  double inducing_noise_var = 0.1;
  std::size_t inducing_count = 1;
  bool data_scale = true;
  std::uint64_t seed = 0;
  /// Gradients are rescaled to this max-abs norm when > 0.
  double grad_clip = 0.0;
};

/// Targets per input: P regression values, or one label per output pixel.
struct Dataset {
  std::vector<Tensor> inputs;
  std::vector<std::vector<double>> targets;
  std::size_t size() const { return inputs.size(); }
};

/// A uniformly chosen batch member plus elementwise N(0, noise_var).
Tensor inducing_input(const std::vector<Tensor>& batch, double noise_var, std::uint64_t seed);

struct ObjectiveTerms {
  double objective = 0.0;
  double data_term = 0.0;
  double kl = 0.0;
};

struct HeadObjective {
  ObjectiveTerms terms;
  /// d(objective)/d(heads) for every input of X, data inputs first.
  std::vector<VarHeads> d_heads;
};

/// Objective in terms of head values. heads covers X (the first
/// targets.size() entries carry data), prior is p(f^X). For the Gaussian
/// family the data term is closed form and `noise` may be empty.
HeadObjective fvi_objective_heads(TaskKind task, const std::vector<VarHeads>& heads,
                                  const std::vector<std::vector<double>>& targets,
                                  const GaussianBatch& prior, const LikelihoodFamily& likelihood,
                                  double data_weight, const std::vector<QNoise>& noise);

/// One MC noise set per sample for the data inputs.
std::vector<QNoise> draw_objective_noise(const FviModel& model, std::size_t n_data,
                                         std::size_t samples, std::uint64_t seed);

struct ObjectiveEval {
  ObjectiveTerms terms;
  Gradients grads;  // d(objective)/d(params)
};

/// Forward all of X = batch u inducing, build the prior, evaluate the
/// objective and back-propagate it to the network parameters.
ObjectiveEval fvi_objective(const FviModel& model, const Dataset& batch,
                            const std::vector<Tensor>& inducing, double data_weight,
                            const std::vector<QNoise>& noise);

/// Threshold from MC estimates of E|y - f| over a batch, floored at
/// kBerhuMinThreshold.
double batch_berhu_threshold(const FviModel& model, const Dataset& batch,
                             const std::vector<QNoise>& noise);

struct LogRow {
  std::size_t epoch = 0;
  std::size_t step = 0;
  double objective = 0.0;
  double data_term = 0.0;
  double kl = 0.0;
  double lr = 0.0;
  double c_threshold = 0.0;
};

struct TrainLog {
  std::vector<LogRow> rows;
};

/// Mini-batch momentum SGD on -objective / N. Throws NonFinite on a
/// non-finite objective or gradient.
TrainLog train(FviModel& model, const Dataset& data, const TrainConfig& config);

struct RegressionPrediction {
  std::vector<PredictiveMoments> pixels;
};

struct ClassPrediction {
  std::size_t classes = 0;
  std::vector<double> probs;    // pixel-major: probs[s * K + k]
  std::vector<double> entropy;  // per pixel
  std::vector<int> labels;      // argmax per pixel
};

/// One network evaluation; moments in closed form from the heads.
RegressionPrediction predict_regression(const FviModel& model, const Tensor& x);

/// One network evaluation plus `samples` Gaussian draws of the logits per
/// pixel; probabilities are averaged and their entropy reported.
ClassPrediction predict_classes(const FviModel& model, const Tensor& x, std::size_t samples,
                                std::uint64_t seed);

void write_train_log(std::ostream& out, const TrainLog& log);

void write_model(std::ostream& out, const FviModel& model);
FviModel read_model(std::istream& in);

}  // namespace fvi
