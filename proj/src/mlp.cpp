#include "klambda/mlp.hpp"

#include <cmath>
#include <numbers>

#include "klambda/error.hpp"

namespace klambda {

namespace {

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

}  // namespace

Dense::Dense(int in, int out) {
  weight.value = Matrix::Zero(out, in);
  bias.value = Matrix::Zero(out, 1);
  weight.resize_like_value();
  bias.resize_like_value();
}

Matrix Dense::forward(const Matrix& x) {
  input_ = x;
  return infer(x);
}

Matrix Dense::infer(const Matrix& x) const {
  Matrix y = weight.value * x;
  y.colwise() += bias.value.col(0);
  return y;
}

Matrix Dense::backward(const Matrix& grad_out, bool input_grad) {
  weight.grad.noalias() = grad_out * input_.transpose();
  bias.grad = grad_out.rowwise().sum();
  if (!input_grad) return {};
  return weight.value.transpose() * grad_out;
}

BatchNorm::BatchNorm(int features, double momentum, double eps) : momentum(momentum), eps(eps) {
  gamma.value = Matrix::Ones(features, 1);
  beta.value = Matrix::Zero(features, 1);
  gamma.resize_like_value();
  beta.resize_like_value();
  running_mean = Vector::Zero(features);
  running_var = Vector::Ones(features);
}

Matrix BatchNorm::forward(const Matrix& x, const PassOptions& opts) {
  if (opts.mode == Mode::Infer) {
    batch_mode_ = false;
    inv_std_ = (running_var.array() + eps).rsqrt().matrix();
    xhat_ = (x.colwise() - running_mean).array().colwise() * inv_std_.array();
  } else {
    batch_mode_ = true;
    const Vector mean = x.rowwise().mean();
    const Matrix centered = x.colwise() - mean;
    const Vector var = centered.array().square().rowwise().mean().matrix();
    inv_std_ = (var.array() + eps).rsqrt().matrix();
    xhat_ = centered.array().colwise() * inv_std_.array();
    if (opts.update_running_stats) {
      running_mean = momentum * running_mean + (1.0 - momentum) * mean;
      running_var = momentum * running_var + (1.0 - momentum) * var;
    }
  }
  Matrix y = xhat_.array().colwise() * gamma.value.col(0).array();
  y.colwise() += beta.value.col(0);
  return y;
}

Matrix BatchNorm::infer(const Matrix& x) const {
  const Vector scale = gamma.value.col(0).array() * (running_var.array() + eps).rsqrt();
  Matrix y = (x.colwise() - running_mean).array().colwise() * scale.array();
  y.colwise() += beta.value.col(0);
  return y;
}

Matrix BatchNorm::backward(const Matrix& grad_out) {
  gamma.grad = (grad_out.array() * xhat_.array()).rowwise().sum().matrix();
  beta.grad = grad_out.rowwise().sum();
  const Matrix dxhat = grad_out.array().colwise() * gamma.value.col(0).array();
  if (!batch_mode_) return dxhat.array().colwise() * inv_std_.array();

  const double n = static_cast<double>(grad_out.cols());
  const Vector sum_dxhat = dxhat.rowwise().sum();
  const Vector sum_dxhat_xhat = (dxhat.array() * xhat_.array()).rowwise().sum().matrix();
  Matrix dx = n * dxhat;
  dx.colwise() -= sum_dxhat;
  dx.array() -= xhat_.array().colwise() * sum_dxhat_xhat.array();
  dx.array().colwise() *= inv_std_.array() / n;
  return dx;
}

double Gelu::value(double x) { return 0.5 * x * std::erfc(-x / std::numbers::sqrt2); }

double Gelu::derivative(double x) {
  const double cdf = 0.5 * std::erfc(-x / std::numbers::sqrt2);
  const double pdf = std::exp(-0.5 * x * x) * (0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2);
  return cdf + x * pdf;
}

Matrix Gelu::forward(const Matrix& x) {
  input_ = x;
  return infer(x);
}

Matrix Gelu::infer(const Matrix& x) const { return x.unaryExpr([](double v) { return value(v); }); }

Matrix Gelu::backward(const Matrix& grad_out) const {
  return grad_out.cwiseProduct(input_.unaryExpr([](double v) { return derivative(v); }));
}

Matrix Dropout::forward(const Matrix& x, const PassOptions& opts) {
  if (opts.mode != Mode::Train || !opts.dropout || rate <= 0.0) {
    mask_.resize(0, 0);
    return x;
  }
  if (!opts.rng) throw Error(Errc::InvalidArgument, "dropout in train mode needs an rng");
  const double keep = 1.0 - rate;
  mask_.resize(x.rows(), x.cols());
  for (Eigen::Index c = 0; c < x.cols(); ++c) {
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      mask_(r, c) = opts.rng->bernoulli(keep) ? 1.0 / keep : 0.0;
    }
  }
  return x.cwiseProduct(mask_);
}

Matrix Dropout::backward(const Matrix& grad_out) const {
  if (mask_.size() == 0) return grad_out;
  return grad_out.cwiseProduct(mask_);
}

std::vector<Param*> params_of(Layer& layer) {
  return std::visit(Overloaded{
                        [](Dense& d) { return std::vector<Param*>{&d.weight, &d.bias}; },
                        [](BatchNorm& b) { return std::vector<Param*>{&b.gamma, &b.beta}; },
                        [](auto&) { return std::vector<Param*>{}; },
                    },
                    layer);
}

const char* layer_kind(const Layer& layer) {
  return std::visit(Overloaded{
                        [](const Dense&) { return "dense"; },
                        [](const BatchNorm&) { return "batch_norm"; },
                        [](const Gelu&) { return "gelu"; },
                        [](const Dropout&) { return "dropout"; },
                    },
                    layer);
}

Architecture Architecture::full(int input, bool final_batch_norm) {
  Architecture arch;
  arch.input = input;
  const int units[] = {1000, 800, 600, 200, 100, 64, 32, 16, 8, 4, 1};
  for (int i = 0; i < 11; ++i) {
    BlockSpec b;
    b.units = units[i];
    b.batch_norm = i == 0 || i == 1 || (i == 10 && final_batch_norm);
    b.dropout = i == 0 || i == 1 || i == 2 || i == 7;
    arch.blocks.push_back(b);
  }
  return arch;
}

MLPModel::MLPModel(Architecture arch, std::uint64_t seed) : arch_(std::move(arch)) {
  if (arch_.input < 1 || arch_.blocks.empty() || arch_.blocks.back().units != 1) {
    throw Error(Errc::InvalidArgument, "architecture needs an input width and a single output unit");
  }
  Rng rng(mix_seed(seed, 0));
  int fan_in = arch_.input;
  for (const auto& block : arch_.blocks) {
    Dense dense(fan_in, block.units);
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (Eigen::Index r = 0; r < dense.weight.value.rows(); ++r) {
      for (Eigen::Index c = 0; c < dense.weight.value.cols(); ++c) {
        dense.weight.value(r, c) = rng.uniform(-bound, bound);
      }
    }
    layers_.emplace_back(std::move(dense));
    if (block.batch_norm) layers_.emplace_back(BatchNorm(block.units, arch_.bn_momentum, arch_.bn_eps));
    layers_.emplace_back(Gelu{});
    if (block.dropout) layers_.emplace_back(Dropout(arch_.dropout_rate));
    fan_in = block.units;
  }
}

Matrix MLPModel::forward(const Matrix& x, const PassOptions& opts) {
  if (x.rows() != arch_.input) {
    throw Error(Errc::DimensionMismatch, "model expects " + std::to_string(arch_.input) +
                                             " inputs, got " + std::to_string(x.rows()));
  }
  Matrix h = x;
  for (auto& layer : layers_) {
    h = std::visit(Overloaded{
                       [&](Dense& d) { return d.forward(h); },
                       [&](BatchNorm& b) { return b.forward(h, opts); },
                       [&](Gelu& g) { return g.forward(h); },
                       [&](Dropout& d) { return d.forward(h, opts); },
                   },
                   layer);
  }
  return h;
}

Matrix MLPModel::infer(const Matrix& x) const {
  if (x.rows() != arch_.input) {
    throw Error(Errc::DimensionMismatch, "model expects " + std::to_string(arch_.input) +
                                             " inputs, got " + std::to_string(x.rows()));
  }
  Matrix h = x;
  for (const auto& layer : layers_) {
    h = std::visit([&](const auto& l) { return l.infer(h); }, layer);
  }
  return h;
}

void MLPModel::backward(const Matrix& grad_out) {
  Matrix g = grad_out;
  for (std::size_t i = layers_.size(); i-- > 0;) {
    const bool first = i == 0;
    g = std::visit(Overloaded{
                       [&](Dense& d) { return d.backward(g, !first); },
                       [&](BatchNorm& b) { return b.backward(g); },
                       [&](Gelu& l) { return l.backward(g); },
                       [&](Dropout& d) { return d.backward(g); },
                   },
                   layers_[i]);
  }
}

std::vector<Param*> MLPModel::params() {
  std::vector<Param*> out;
  for (auto& layer : layers_) {
    for (Param* p : params_of(layer)) out.push_back(p);
  }
  return out;
}

LossValue mae_loss(const Matrix& predictions, const Vector& labels) {
  if (predictions.rows() != 1 || predictions.cols() != labels.size()) {
    throw Error(Errc::DimensionMismatch, "predictions and labels differ in size");
  }
  const double n = static_cast<double>(labels.size());
  LossValue out;
  out.grad.resize(1, predictions.cols());
  double total = 0.0;
  for (Eigen::Index i = 0; i < predictions.cols(); ++i) {
    const double r = predictions(0, i) - labels(i);
    total += std::abs(r);
    out.grad(0, i) = (r > 0.0 ? 1.0 : r < 0.0 ? -1.0 : 0.0) / n;
  }
  out.loss = total / n;
  return out;
}

}  // namespace klambda
