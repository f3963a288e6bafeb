#include "klambda/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "klambda/error.hpp"
#include "klambda/format.hpp"

namespace klambda {

void TrainConfig::validate() const {
  if (epochs < 0) throw Error(Errc::InvalidArgument, "epochs must be non-negative");
  if (!(learning_rate >= 0.0)) throw Error(Errc::InvalidArgument, "learning rate must be non-negative");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw Error(Errc::InvalidArgument, "momentum must lie in [0, 1)");
  if (batch_size < 1) throw Error(Errc::InvalidArgument, "batch size must be positive");
  if (eval_every < 1) throw Error(Errc::InvalidArgument, "eval_every must be positive");
}

namespace {

bool has_batch_norm(const MLPModel& model) {
  return std::any_of(model.layers().begin(), model.layers().end(),
                     [](const Layer& l) { return std::holds_alternative<BatchNorm>(l); });
}

double infer_mae(const MLPModel& model, const Matrix& x, const Vector& labels) {
  return mae_loss(model.infer(x), labels).loss;
}

}  // namespace

TrainReport fit(MLPModel& model, const Matrix& x, const Vector& labels, const TrainConfig& cfg,
                const Matrix* validation_x, const Vector* validation_labels) {
  cfg.validate();
  if (x.cols() == 0) throw Error(Errc::EmptyDataset, "no training samples");
  if (labels.size() != x.cols()) throw Error(Errc::DimensionMismatch, "one label per sample required");
  const bool validate = validation_x && validation_labels && validation_x->cols() > 0;

  Rng shuffle_rng(mix_seed(cfg.rng_seed, 1));
  Rng dropout_rng(mix_seed(cfg.rng_seed, 2));
  const bool merge_singletons = has_batch_norm(model);
  const auto params = model.params();
  const auto n = static_cast<std::size_t>(x.cols());
  const auto batch = static_cast<std::size_t>(cfg.batch_size);

  std::vector<Eigen::Index> order(n);
  std::iota(order.begin(), order.end(), Eigen::Index{0});

  TrainReport report;
  report.epochs.reserve(static_cast<std::size_t>(cfg.epochs));
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    shuffle_rng.shuffle(std::span<Eigen::Index>(order));
    double loss_sum = 0.0;
    for (std::size_t begin = 0; begin < n;) {
      std::size_t end = std::min(n, begin + batch);
      if (merge_singletons && n - end == 1) end = n;
      const std::vector<Eigen::Index> idx(order.begin() + static_cast<std::ptrdiff_t>(begin),
                                          order.begin() + static_cast<std::ptrdiff_t>(end));
      const Matrix xb = x(Eigen::all, idx);
      const Vector yb = labels(idx);

      const Matrix pred = model.forward(xb, {Mode::Train, &dropout_rng, true, true});
      const LossValue lv = mae_loss(pred, yb);
      if (!std::isfinite(lv.loss)) {
        throw Error(Errc::NonFiniteLoss, "loss diverged in epoch " + std::to_string(epoch));
      }
      model.backward(lv.grad);
      for (Param* p : params) {
        p->velocity = cfg.momentum * p->velocity - cfg.learning_rate * p->grad;
        p->value += p->velocity;
      }
      loss_sum += lv.loss * static_cast<double>(end - begin);
      begin = end;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(n);
    if (epoch % cfg.eval_every == 0 || epoch == cfg.epochs) {
      rec.train_mae = infer_mae(model, x, labels);
      if (validate) rec.validation_mae = infer_mae(model, *validation_x, *validation_labels);
    }
    report.epochs.push_back(rec);
  }
  report.final_train_mae = infer_mae(model, x, labels);
  if (validate) report.final_validation_mae = infer_mae(model, *validation_x, *validation_labels);
  return report;
}

Matrix to_matrix(const NormStats& norm, const std::vector<FeatureVector>& features) {
  const auto width = static_cast<Eigen::Index>(norm.size());
  Matrix x(width, static_cast<Eigen::Index>(features.size()));
  for (std::size_t i = 0; i < features.size(); ++i) {
    const auto v = norm.apply(features[i].values);
    x.col(static_cast<Eigen::Index>(i)) = Eigen::Map<const Vector>(v.data(), width);
  }
  return x;
}

TrainOutcome train(const std::vector<FeatureVector>& features, const std::vector<double>& labels,
                   const TrainConfig& cfg, const std::vector<FeatureVector>* validation_features,
                   const std::vector<double>* validation_labels) {
  cfg.validate();
  if (features.empty()) throw Error(Errc::EmptyDataset, "no training samples");
  if (features.size() != labels.size()) {
    throw Error(Errc::DimensionMismatch, "one label per feature vector required");
  }
  for (double k : labels) {
    if (!(k > 0.0 && k <= 3.0)) throw Error(Errc::InvalidArgument, "labels must lie in (0, 3]");
  }
  const bool semantic = features.front().has_semantic;
  for (const auto& f : features) {
    if (f.has_semantic != semantic) {
      throw Error(Errc::FeatureLayoutMismatch, "training set mixes semantic and encoding-only vectors");
    }
  }

  NormStats norm = fit_norm_stats(features);
  Architecture arch = Architecture::full(static_cast<int>(norm.size()), cfg.final_batch_norm);
  if (!cfg.blocks.empty()) arch.blocks = cfg.blocks;

  TrainOutcome out{MLPModel(arch, cfg.rng_seed), {}};
  MLPModel& model = out.model;
  model.norm = norm;
  model.expects_semantic = semantic;

  const Matrix x = to_matrix(norm, features);
  const Vector y = Eigen::Map<const Vector>(labels.data(), static_cast<Eigen::Index>(labels.size()));
  std::optional<Matrix> vx;
  std::optional<Vector> vy;
  if (validation_features && validation_labels && !validation_features->empty()) {
    vx = to_matrix(norm, *validation_features);
    vy = Eigen::Map<const Vector>(validation_labels->data(),
                                  static_cast<Eigen::Index>(validation_labels->size()));
  }
  out.report = fit(model, x, y, cfg, vx ? &*vx : nullptr, vy ? &*vy : nullptr);

  auto& meta = model.metadata;
  meta["rng_seed"] = std::to_string(cfg.rng_seed);
  meta["epochs"] = std::to_string(cfg.epochs);
  meta["learning_rate"] = format_number(cfg.learning_rate);
  meta["momentum"] = format_number(cfg.momentum);
  meta["batch_size"] = std::to_string(cfg.batch_size);
  meta["loss"] = "mean_absolute_error";
  meta["optimizer"] = "sgd_momentum";
  meta["training_samples"] = std::to_string(features.size());
  meta["final_train_mae"] = format_number(out.report.final_train_mae);
  meta["assumption.layer_order"] = "linear>batch_norm>gelu>dropout";
  meta["assumption.final_batch_norm"] = cfg.final_batch_norm ? "true" : "false";
  meta["assumption.output_activation"] = "gelu";
  meta["assumption.batch_norm_momentum"] = format_number(arch.bn_momentum);
  meta["assumption.init"] = "uniform(+-1/sqrt(fan_in)), zero bias";
  meta["assumption.clip_block_extras"] = "total_frames,avg_qp,elapsed_s";
  meta["semantic_features"] = semantic ? "present" : "absent";
  return out;
}

double relative_error(double analytic, double numeric) {
  const double diff = std::abs(analytic - numeric);
  const double scale = std::max(std::abs(analytic), std::abs(numeric));
  return scale < 1e-8 ? diff : diff / scale;
}

namespace {

constexpr double kKinkMargin = 1e-4;

struct Coordinate {
  Param* param;
  Eigen::Index index;
};

std::vector<Coordinate> sample_coordinates(const std::vector<Param*>& params, std::size_t limit,
                                           Rng& rng) {
  std::vector<Coordinate> all;
  for (Param* p : params) {
    for (Eigen::Index i = 0; i < p->value.size(); ++i) all.push_back({p, i});
  }
  rng.shuffle(std::span<Coordinate>(all));
  if (all.size() > limit) all.resize(limit);
  return all;
}

}  // namespace

GradCheckResult gradient_check(MLPModel& model, const Matrix& x, const Vector& labels,
                               double epsilon, std::size_t per_layer, std::uint64_t seed) {
  const PassOptions opts{Mode::Train, nullptr, false, false};
  const Matrix pred = model.forward(x, opts);

  std::vector<Eigen::Index> included;
  GradCheckResult result;
  for (Eigen::Index i = 0; i < labels.size(); ++i) {
    if (std::abs(pred(0, i) - labels(i)) <= kKinkMargin) {
      ++result.samples_excluded;
    } else {
      included.push_back(i);
    }
  }
  if (included.empty()) return result;
  const double n = static_cast<double>(included.size());

  const auto loss_of = [&](const Matrix& p) {
    double total = 0.0;
    for (auto i : included) total += std::abs(p(0, i) - labels(i));
    return total / n;
  };

  Matrix grad = Matrix::Zero(1, pred.cols());
  for (auto i : included) {
    const double r = pred(0, i) - labels(i);
    grad(0, i) = (r > 0.0 ? 1.0 : -1.0) / n;
  }
  model.backward(grad);

  Rng rng(mix_seed(seed, 3));
  for (auto& layer : model.layers()) {
    const auto params = params_of(layer);
    if (params.empty()) continue;
    std::vector<Matrix> analytic;
    for (Param* p : params) analytic.push_back(p->grad);
    for (const auto& [param, index] : sample_coordinates(params, per_layer, rng)) {
      const std::size_t which = static_cast<std::size_t>(
          std::find(params.begin(), params.end(), param) - params.begin());
      double& value = param->value.data()[index];
      const double saved = value;
      value = saved + epsilon;
      const double up = loss_of(model.forward(x, opts));
      value = saved - epsilon;
      const double down = loss_of(model.forward(x, opts));
      value = saved;
      const double numeric = (up - down) / (2.0 * epsilon);
      result.max_rel_error =
          std::max(result.max_rel_error, relative_error(analytic[which].data()[index], numeric));
      ++result.parameters_checked;
    }
  }
  return result;
}

GradCheckResult check_layer_gradients(Layer& layer, const Matrix& x, double epsilon,
                                      std::uint64_t seed) {
  const PassOptions opts{Mode::Train, nullptr, false, false};
  const auto run = [&](const Matrix& input) {
    return std::visit(
        [&](auto& l) -> Matrix {
          using L = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<L, Dense> || std::is_same_v<L, Gelu>) {
            return l.forward(input);
          } else {
            return l.forward(input, opts);
          }
        },
        layer);
  };

  Rng rng(mix_seed(seed, 4));
  const Matrix out = run(x);
  Matrix projection(out.rows(), out.cols());
  for (Eigen::Index i = 0; i < projection.size(); ++i) projection.data()[i] = rng.normal();
  const auto loss_of = [&](const Matrix& y) { return (projection.array() * y.array()).sum(); };

  const Matrix input_grad = std::visit(
      [&](auto& l) -> Matrix {
        using L = std::decay_t<decltype(l)>;
        if constexpr (std::is_same_v<L, Dense>) {
          return l.backward(projection, true);
        } else {
          return l.backward(projection);
        }
      },
      layer);

  GradCheckResult result;
  const auto params = params_of(layer);
  std::vector<Matrix> analytic;
  for (Param* p : params) analytic.push_back(p->grad);
  for (const auto& [param, index] : sample_coordinates(params, 128, rng)) {
    const std::size_t which = static_cast<std::size_t>(
        std::find(params.begin(), params.end(), param) - params.begin());
    double& value = param->value.data()[index];
    const double saved = value;
    value = saved + epsilon;
    const double up = loss_of(run(x));
    value = saved - epsilon;
    const double down = loss_of(run(x));
    value = saved;
    result.max_rel_error = std::max(result.max_rel_error,
                                    relative_error(analytic[which].data()[index],
                                                   (up - down) / (2.0 * epsilon)));
    ++result.parameters_checked;
  }

  Matrix probe = x;
  std::vector<Eigen::Index> inputs(static_cast<std::size_t>(x.size()));
  std::iota(inputs.begin(), inputs.end(), Eigen::Index{0});
  rng.shuffle(std::span<Eigen::Index>(inputs));
  if (inputs.size() > 128) inputs.resize(128);
  for (auto index : inputs) {
    const double saved = probe.data()[index];
    probe.data()[index] = saved + epsilon;
    const double up = loss_of(run(probe));
    probe.data()[index] = saved - epsilon;
    const double down = loss_of(run(probe));
    probe.data()[index] = saved;
    result.max_rel_error = std::max(
        result.max_rel_error, relative_error(input_grad.data()[index], (up - down) / (2.0 * epsilon)));
    ++result.parameters_checked;
  }
  return result;
}

Prediction predict_k(const MLPModel& model, const FeatureVector& features) {
  if (features.has_semantic != model.expects_semantic) {
    throw Error(Errc::FeatureLayoutMismatch,
                model.expects_semantic ? "model was trained with semantic features"
                                       : "model was trained without semantic features");
  }
  if (static_cast<int>(features.size()) != model.input_width()) {
    throw Error(Errc::FeatureLayoutMismatch, "feature width " + std::to_string(features.size()) +
                                                 " does not match model input " +
                                                 std::to_string(model.input_width()));
  }
  const std::vector<double> input =
      model.norm.size() ? model.norm.apply(features.values) : features.values;
  const Matrix x = Eigen::Map<const Matrix>(input.data(), static_cast<Eigen::Index>(input.size()), 1);
  Prediction p;
  p.raw = model.infer(x)(0, 0);
  p.k = std::clamp(std::isfinite(p.raw) ? p.raw : 1.0, kMinK, kMaxK);
  return p;
}

Prediction predict_k(const MLPModel& model, const StatsLog& stats, const SemanticFeatures* semantic) {
  return predict_k(model, assemble_features(stats, semantic));
}

}  // namespace klambda
