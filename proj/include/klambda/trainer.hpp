#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "klambda/features.hpp"
#include "klambda/mlp.hpp"

namespace klambda {

struct TrainConfig {
  int epochs = 5000;
  double learning_rate = 0.001;
  double momentum = 0.9;
  int batch_size = 32;
  std::uint64_t rng_seed = 1;
  /// Infer-mode train/validation MAE is measured every this many epochs (and at the last).
  int eval_every = 1;
  /// Batch-norm on the final scalar block.
  bool final_batch_norm = true;
  /// Overrides the hidden/output blocks; empty means the full layout.
  std::vector<BlockSpec> blocks;

  void validate() const;
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;               ///< sample-weighted mean of train-mode batch losses
  std::optional<double> train_mae;       ///< infer mode over the whole training set
  std::optional<double> validation_mae;  ///< infer mode
};

struct TrainReport {
  std::vector<EpochRecord> epochs;
  double final_train_mae = 0.0;
  std::optional<double> final_validation_mae;
};

/// Mini-batch SGD with momentum on MAE (v = m v - lr g; w += v). Columns of
/// `x` are samples. The order of samples is reshuffled every epoch from the
/// seed, so two runs with the same inputs produce bit-identical models. A
/// trailing batch of one sample is merged into the previous batch when the
/// model has batch-norm. Throws EmptyDataset or NonFiniteLoss.
TrainReport fit(MLPModel& model, const Matrix& x, const Vector& labels, const TrainConfig& cfg,
                const Matrix* validation_x = nullptr, const Vector* validation_labels = nullptr);

struct TrainOutcome {
  MLPModel model;
  TrainReport report;
};

/// Standardizes the features, builds the network for their width, trains it
/// and records the configuration in the model metadata. Labels must lie in (0, 3].
TrainOutcome train(const std::vector<FeatureVector>& features, const std::vector<double>& labels,
                   const TrainConfig& cfg,
                   const std::vector<FeatureVector>* validation_features = nullptr,
                   const std::vector<double>* validation_labels = nullptr);

/// Stacks normalized feature vectors into a column-per-sample matrix.
Matrix to_matrix(const NormStats& norm, const std::vector<FeatureVector>& features);

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t parameters_checked = 0;
  std::size_t samples_excluded = 0;  ///< residuals too close to the MAE kink
};

/// Relative difference used by the gradient checks: |a - n| / max(|a|, |n|),
/// or the absolute difference when both are below 1e-8.
double relative_error(double analytic, double numeric);

/// Compares back-propagated MAE gradients with central differences on up to
/// `per_layer` sampled parameters of every parameterized layer. Runs in train
/// mode with dropout off, batch-norm in batch mode and running statistics
/// frozen. Samples whose residual is within 1e-4 of zero are dropped from the
/// loss.
GradCheckResult gradient_check(MLPModel& model, const Matrix& x, const Vector& labels,
                               double epsilon = 1e-5, std::size_t per_layer = 128,
                               std::uint64_t seed = 0);

/// Checks one layer in isolation with the loss sum(R .* layer(x)) for a fixed
/// random R, covering input gradients and parameter gradients.
GradCheckResult check_layer_gradients(Layer& layer, const Matrix& x, double epsilon = 1e-5,
                                      std::uint64_t seed = 0);

struct Prediction {
  double k = 1.0;    ///< clamped to [0.2, 3]
  double raw = 1.0;  ///< network output before clamping
};

inline constexpr double kMinK = 0.2;
inline constexpr double kMaxK = 3.0;

/// assemble -> normalize with the model's statistics -> infer -> clamp.
/// Throws FeatureLayoutMismatch when semantic presence differs from training.
Prediction predict_k(const MLPModel& model, const StatsLog& stats,
                     const SemanticFeatures* semantic = nullptr);
Prediction predict_k(const MLPModel& model, const FeatureVector& features);

}  // namespace klambda
