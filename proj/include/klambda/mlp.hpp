#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Dense>

#include "klambda/features.hpp"
#include "klambda/rng.hpp"

namespace klambda {

/// Activations are stored feature-major: one column per sample.
using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

enum class Mode { Train, Infer };

struct PassOptions {
  Mode mode = Mode::Infer;
  Rng* rng = nullptr;                 ///< dropout masks; required when dropout is active
  bool update_running_stats = true;   ///< batch-norm moving averages in train mode
  bool dropout = true;                ///< false forces the dropout rate to zero
};

struct Param {
  std::string name;
  Matrix value;
  Matrix grad;
  Matrix velocity;

  void resize_like_value() {
    grad = Matrix::Zero(value.rows(), value.cols());
    velocity = Matrix::Zero(value.rows(), value.cols());
  }
};

/// Fully connected layer: y = W x + b.
class Dense {
 public:
  Dense() = default;
  Dense(int in, int out);

  Matrix forward(const Matrix& x);
  Matrix infer(const Matrix& x) const;
  /// Fills weight/bias gradients; returns dL/dx unless `input_grad` is false.
  Matrix backward(const Matrix& grad_out, bool input_grad = true);

  int in() const { return static_cast<int>(weight.value.cols()); }
  int out() const { return static_cast<int>(weight.value.rows()); }

  Param weight{"weight", {}, {}, {}};
  Param bias{"bias", {}, {}, {}};

 private:
  Matrix input_;
};

/// Per-feature batch normalization with learned scale and shift.
///
/// Train mode normalizes with the batch mean and biased batch variance and
/// moves the running statistics as running = m * running + (1 - m) * batch.
/// Infer mode uses the running statistics.
class BatchNorm {
 public:
  BatchNorm() = default;
  BatchNorm(int features, double momentum, double eps);

  Matrix forward(const Matrix& x, const PassOptions& opts);
  Matrix infer(const Matrix& x) const;
  Matrix backward(const Matrix& grad_out);

  int features() const { return static_cast<int>(running_mean.size()); }

  Param gamma{"gamma", {}, {}, {}};
  Param beta{"beta", {}, {}, {}};
  Vector running_mean;
  Vector running_var;
  double momentum = 0.9;
  double eps = 1e-5;

 private:
  bool batch_mode_ = true;
  Matrix xhat_;
  Vector inv_std_;
};

/// Exact GELU, x * Phi(x).
class Gelu {
 public:
  Matrix forward(const Matrix& x);
  Matrix infer(const Matrix& x) const;
  Matrix backward(const Matrix& grad_out) const;

  static double value(double x);
  static double derivative(double x);

 private:
  Matrix input_;
};

/// Inverted dropout: kept units are scaled by 1 / (1 - rate) in train mode.
class Dropout {
 public:
  Dropout() = default;
  explicit Dropout(double rate) : rate(rate) {}

  Matrix forward(const Matrix& x, const PassOptions& opts);
  Matrix infer(const Matrix& x) const { return x; }
  Matrix backward(const Matrix& grad_out) const;

  double rate = 0.0;

 private:
  Matrix mask_;
};

using Layer = std::variant<Dense, BatchNorm, Gelu, Dropout>;

std::vector<Param*> params_of(Layer& layer);
const char* layer_kind(const Layer& layer);

/// One dense block: linear, optional batch-norm, GELU, optional dropout.
struct BlockSpec {
  int units = 1;
  bool batch_norm = false;
  bool dropout = false;

  friend bool operator==(const BlockSpec&, const BlockSpec&) = default;
};

struct Architecture {
  int input = 0;
  std::vector<BlockSpec> blocks;
  double dropout_rate = 0.1;
  double bn_momentum = 0.9;
  double bn_eps = 1e-5;

  /// 1000-800-600-200-100-64-32-16-8-4-1, batch-norm on blocks 1, 2 and 11,
  /// dropout 0.1 on blocks 1, 2, 3 and 8, GELU everywhere.
  static Architecture full(int input, bool final_batch_norm = true);

  friend bool operator==(const Architecture&, const Architecture&) = default;
};

/// Dense network with a single output.
class MLPModel {
 public:
  MLPModel() = default;
  /// Weights uniform in +-1/sqrt(fan_in), biases zero, batch-norm identity.
  MLPModel(Architecture arch, std::uint64_t seed);

  /// Throws DimensionMismatch when x.rows() != input width. Returns 1 x batch.
  Matrix forward(const Matrix& x, const PassOptions& opts);
  /// Pure inference pass (running statistics, no dropout).
  Matrix infer(const Matrix& x) const;
  /// Back-propagates dL/doutput (1 x batch) from the most recent forward call.
  void backward(const Matrix& grad_out);

  std::vector<Param*> params();
  std::vector<Layer>& layers() { return layers_; }
  const std::vector<Layer>& layers() const { return layers_; }
  const Architecture& architecture() const { return arch_; }
  int input_width() const { return arch_.input; }

  NormStats norm;                              ///< empty for models fed pre-normalized data
  bool expects_semantic = false;
  std::map<std::string, std::string> metadata;

 private:
  Architecture arch_;
  std::vector<Layer> layers_;
};

/// Mean absolute error and its gradient with respect to the predictions. The
/// subgradient at a zero residual is zero.
struct LossValue {
  double loss = 0.0;
  Matrix grad;
};
LossValue mae_loss(const Matrix& predictions, const Vector& labels);

}  // namespace klambda
