#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <functional>
#include <iostream>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "cdformer/augmentation.hpp"
#include "cdformer/checkpoint.hpp"
#include "cdformer/dataset.hpp"
#include "cdformer/evaluation.hpp"
#include "cdformer/model.hpp"
#include "cdformer/train_config.hpp"

namespace cdformer {

/// Mean Huber loss: 0.5 e^2 for |e| <= delta, delta (|e| - delta / 2) beyond.
template <typename Scalar>
Tensor<Scalar> huber_loss(const Tensor<Scalar>& pred, const Tensor<Scalar>& target, Scalar delta) {
  if (pred.shape() != target.shape()) throw detail::mismatch("huber_loss", pred.shape(), target.shape());
  if (!(delta > Scalar(0))) throw ConfigError("huber_loss: delta must be > 0");
  if (pred.size() == 0) throw DimensionError("huber_loss on an empty batch");
  const Vec<Scalar> err = pred.value() - target.value();
  const Scalar inv_n = Scalar(1) / static_cast<Scalar>(err.size());
  const auto a = err.array().abs();
  Vec<Scalar> out(1);
  out[0] = (a <= delta).select(Scalar(0.5) * err.array().square(), delta * (a - Scalar(0.5) * delta)).sum() * inv_n;
  return make_op<Scalar>("huber_loss", {}, std::move(out), {pred, target},
                         [pred, target, err, delta, inv_n](const Vec<Scalar>& g) {
                           const Vec<Scalar> slope = err.cwiseMax(-delta).cwiseMin(delta) * (g[0] * inv_n);
                           detail::accumulate(pred, slope);
                           detail::accumulate(target, -slope);
                         });
}

template <typename Scalar>
struct AdamState {
  std::vector<Vec<Scalar>> m;
  std::vector<Vec<Scalar>> v;
  long long step = 0;
};

/// One bias-corrected Adam update with classic L2 (weight_decay * w added to
/// the gradient). Throws NumericError naming the first non-finite gradient.
template <typename Scalar>
void adam_step(const ParamList<Scalar>& params, AdamState<Scalar>& state, const TrainConfig& cfg) {
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.push_back(Vec<Scalar>::Zero(p.tensor.size()));
      state.v.push_back(Vec<Scalar>::Zero(p.tensor.size()));
    }
  }
  if (state.m.size() != params.size()) throw ContractError("adam_step: state does not match parameter list");
  for (const auto& p : params) {
    if (p.tensor.has_grad() && !p.tensor.node()->grad.allFinite()) {
      throw NumericError("adam_step: non-finite gradient in parameter " + p.name);
    }
  }
  ++state.step;
  const Scalar b1 = static_cast<Scalar>(cfg.beta1), b2 = static_cast<Scalar>(cfg.beta2);
  const Scalar lr = static_cast<Scalar>(cfg.lr), eps = static_cast<Scalar>(cfg.adam_eps);
  const Scalar decay = static_cast<Scalar>(cfg.weight_decay);
  const Scalar c1 = Scalar(1) - static_cast<Scalar>(std::pow(cfg.beta1, static_cast<double>(state.step)));
  const Scalar c2 = Scalar(1) - static_cast<Scalar>(std::pow(cfg.beta2, static_cast<double>(state.step)));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<Scalar> w = params[i].tensor;
    Vec<Scalar> g = w.grad();
    if (decay != Scalar(0)) g += decay * w.value();
    state.m[i] = b1 * state.m[i] + (Scalar(1) - b1) * g;
    state.v[i] = b2 * state.v[i] + (Scalar(1) - b2) * g.cwiseProduct(g);
    w.mutable_value().array() -=
        lr * (state.m[i].array() / c1) / ((state.v[i].array() / c2).sqrt() + eps);
  }
}

/// Stacks [C x L] windows into a [B x C x L] tensor.
template <typename Scalar>
Tensor<Scalar> stack_windows(std::span<const Eigen::MatrixXd> windows) {
  if (windows.empty()) throw DimensionError("stack_windows: empty batch");
  const Index channels = windows.front().rows(), len = windows.front().cols();
  Vec<Scalar> data(static_cast<Index>(windows.size()) * channels * len);
  Index pos = 0;
  for (const auto& w : windows) {
    if (w.rows() != channels || w.cols() != len) throw DimensionError("stack_windows: ragged batch");
    for (Index c = 0; c < channels; ++c) {
      for (Index t = 0; t < len; ++t) data[pos++] = static_cast<Scalar>(w(c, t));
    }
  }
  return Tensor<Scalar>({static_cast<Index>(windows.size()), channels, len}, std::move(data));
}

/// Eval-mode predictions (normalised units) for a list of windows.
template <typename Scalar>
std::vector<double> predict_windows(CdformerModel<Scalar>& model, std::span<const Eigen::MatrixXd> windows,
                                    std::size_t chunk = 256) {
  NoGradGuard no_grad;
  std::vector<double> out;
  out.reserve(windows.size());
  for (std::size_t start = 0; start < windows.size(); start += chunk) {
    const auto count = std::min(chunk, windows.size() - start);
    const auto pred = model.forward(stack_windows<Scalar>(windows.subspan(start, count)), Mode::eval);
    for (Index i = 0; i < pred.size(); ++i) out.push_back(static_cast<double>(pred[i]));
  }
  return out;
}

template <typename Scalar>
Predictor make_predictor(CdformerModel<Scalar>& model) {
  return [&model](const std::vector<Eigen::MatrixXd>& windows) { return predict_windows(model, windows); };
}

template <typename Scalar>
double evaluate_loss(CdformerModel<Scalar>& model, std::span<const WindowedSample> samples, double delta) {
  if (samples.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::vector<Eigen::MatrixXd> windows;
  windows.reserve(samples.size());
  for (const auto& s : samples) windows.push_back(s.features);
  const auto pred = predict_windows(model, windows);
  double total = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double a = std::abs(pred[i] - samples[i].target);
    total += a <= delta ? 0.5 * a * a : delta * (a - 0.5 * delta);
  }
  return total / static_cast<double>(samples.size());
}

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
};

/// Observation points for tests; both may be called from worker threads.
struct TrainHooks {
  std::function<void(const WindowedSample&)> on_augment;
  std::function<void(const std::vector<std::string>& fit_ids, const std::string& test_id)> on_normalizer_fit;
};

template <typename Scalar>
struct TrainOutcome {
  Snapshot<Scalar> best;
  std::vector<EpochRecord> history;
  int best_epoch = 0;  // 0: the initial weights
  double best_val = std::numeric_limits<double>::infinity();
  long long steps = 0;
  bool diverged = false;
  std::string diagnostic;
};

/// Mini-batch Adam with early stopping on validation loss (training loss when
/// there is no validation data). Leaves the model at the best checkpoint.
template <typename Scalar>
TrainOutcome<Scalar> train_split(CdformerModel<Scalar>& model, std::span<const WindowedSample> train,
                                 std::span<const WindowedSample> val, const TrainConfig& cfg,
                                 const TrainHooks& hooks = {}) {
  cfg.validate();
  if (train.empty()) throw DataError("train_split: empty training set");
  TrainOutcome<Scalar> outcome;
  outcome.best = take_snapshot(model);
  AdamState<Scalar> adam;
  auto params = model.parameters();
  std::mt19937_64 shuffle_rng(cfg.seed);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::uint64_t augment_counter = 0;
  int since_best = 0;
  const auto delta = static_cast<Scalar>(cfg.huber_delta);

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double loss_sum = 0.0;
    bool bad = false;
    for (std::size_t start = 0; start < order.size() && !bad; start += static_cast<std::size_t>(cfg.batch_size)) {
      const auto end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      std::vector<Eigen::MatrixXd> windows;
      Vec<Scalar> targets(static_cast<Index>(end - start));
      for (std::size_t i = start; i < end; ++i) {
        const auto& sample = train[order[i]];
        if (cfg.augment) {
          if (hooks.on_augment) hooks.on_augment(sample);
          // Sequences are [T x C]; windows are stored [C x T].
          windows.push_back(apply_composite(sample.features.transpose(), *cfg.augment, augment_counter++)
                                .values.transpose());
        } else {
          windows.push_back(sample.features);
        }
        targets[static_cast<Index>(i - start)] = static_cast<Scalar>(sample.target);
      }
      model.zero_grad();
      auto pred = model.forward(stack_windows<Scalar>(windows), Mode::train);
      auto loss = huber_loss(pred, Tensor<Scalar>({targets.size()}, targets), delta);
      const double value = static_cast<double>(loss.item());
      if (!std::isfinite(value)) {
        bad = true;
        outcome.diagnostic = "non-finite training loss at epoch " + std::to_string(epoch);
        break;
      }
      backward(loss);
      try {
        adam_step(params, adam, cfg);
      } catch (const NumericError& e) {
        bad = true;
        outcome.diagnostic = e.what();
        break;
      }
      ++outcome.steps;
      loss_sum += value * static_cast<double>(end - start);
    }
    if (bad) {
      outcome.diverged = true;
      break;
    }
    EpochRecord record;
    record.epoch = epoch;
    record.train_loss = loss_sum / static_cast<double>(train.size());
    record.val_loss = val.empty() ? record.train_loss : evaluate_loss(model, val, cfg.huber_delta);
    outcome.history.push_back(record);
    if (!std::isfinite(record.val_loss)) {
      outcome.diverged = true;
      outcome.diagnostic = "non-finite validation loss at epoch " + std::to_string(epoch);
      break;
    }
    if (record.val_loss < outcome.best_val) {
      outcome.best_val = record.val_loss;
      outcome.best_epoch = epoch;
      outcome.best = take_snapshot(model);
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      break;
    }
  }
  restore_snapshot(model, outcome.best);
  return outcome;
}

/// Repeated Adam steps on one fixed batch; stops once the loss drops below
/// `stop_below`. Returns the per-step loss.
template <typename Scalar>
std::vector<double> fit_batch(CdformerModel<Scalar>& model, const Tensor<Scalar>& x, const Tensor<Scalar>& y,
                              const TrainConfig& cfg, int max_steps, double stop_below) {
  AdamState<Scalar> adam;
  auto params = model.parameters();
  std::vector<double> history;
  for (int step = 0; step < max_steps; ++step) {
    model.zero_grad();
    auto loss = huber_loss(model.forward(x, Mode::train), y, static_cast<Scalar>(cfg.huber_delta));
    history.push_back(static_cast<double>(loss.item()));
    if (history.back() < stop_below) break;
    backward(loss);
    adam_step(params, adam, cfg);
  }
  return history;
}

struct SplitResult {
  std::string battery_id;
  std::optional<Checkpoint> checkpoint;
  std::optional<EvalReport> report;
  std::vector<EpochRecord> history;
  int best_epoch = 0;
  bool diverged = false;
  std::string error;  // nonempty when the split failed
  ExitCode error_code = ExitCode::ok;
};

struct LoocvOptions {
  RolloutMode mode = RolloutMode::one_step;
  int parallel = 1;
  TrainHooks hooks;
};

struct LoocvResult {
  std::vector<SplitResult> splits;
  std::vector<EvalReport> reports;  // successful splits, in battery order
  std::optional<AggregateMetrics> aggregate;
};

/// Splits each training battery's windows into a chronological head (train)
/// and tail (validation).
inline void split_train_val(const std::vector<WindowedSample>& windows, double val_fraction,
                            std::vector<WindowedSample>& train, std::vector<WindowedSample>& val) {
  std::size_t n_val = static_cast<std::size_t>(std::floor(val_fraction * static_cast<double>(windows.size())));
  if (val_fraction > 0.0 && n_val == 0 && windows.size() >= 2) n_val = 1;
  const std::size_t n_train = windows.size() - n_val;
  train.insert(train.end(), windows.begin(), windows.begin() + static_cast<std::ptrdiff_t>(n_train));
  val.insert(val.end(), windows.begin() + static_cast<std::ptrdiff_t>(n_train), windows.end());
}

template <typename Scalar>
SplitResult run_split(const std::vector<BatterySeries>& batteries, const LoocvSplit& split,
                      const ModelConfig& model_cfg, const TrainConfig& train_cfg, const LoocvOptions& options) {
  const auto& test = batteries[split.test];
  SplitResult result;
  result.battery_id = test.battery_id;
  std::vector<BatterySeries> pool;
  std::vector<std::string> pool_ids;
  for (std::size_t i : split.train) {
    pool.push_back(batteries[i]);
    pool_ids.push_back(batteries[i].battery_id);
  }
  const auto features = feature_set(test.profile);
  if (static_cast<int>(features.size()) != model_cfg.input_channels) {
    throw ConfigError("/model/input_channels: " + std::to_string(model_cfg.input_channels) + " but profile '" +
                      to_string(test.profile) + "' has " + std::to_string(features.size()) + " features");
  }
  if (options.hooks.on_normalizer_fit) options.hooks.on_normalizer_fit(pool_ids, test.battery_id);
  const auto normalizer = fit_normalizer(pool, features);

  std::vector<WindowedSample> train, val;
  for (const auto& b : pool) {
    split_train_val(make_windows(b, normalizer, static_cast<std::size_t>(model_cfg.window_len)),
                    train_cfg.val_fraction, train, val);
  }
  CdformerModel<Scalar> model(model_cfg);
  auto outcome = train_split<Scalar>(model, train, val, train_cfg, options.hooks);
  result.history = std::move(outcome.history);
  result.best_epoch = outcome.best_epoch;
  result.diverged = outcome.diverged;
  if (outcome.diverged) {
    std::cerr << "warning: split " << test.battery_id << " diverged (" << outcome.diagnostic
              << "); using the last good checkpoint\n";
  }
  const auto trajectory = rollout(make_predictor(model), test, normalizer,
                                  static_cast<std::size_t>(model_cfg.window_len), options.mode);
  result.report = make_report(test.battery_id, trajectory, test.rated_capacity, options.mode);
  result.checkpoint = make_checkpoint(model, normalizer);
  return result;
}

/// Leave-one-battery-out training and evaluation. A failing split records its
/// error and does not stop the others.
template <typename Scalar>
LoocvResult run_loocv(const std::vector<BatterySeries>& batteries, const ModelConfig& model_cfg,
                      const TrainConfig& train_cfg, const LoocvOptions& options = {}) {
  model_cfg.validate();
  train_cfg.validate();
  const auto splits = make_loocv_splits(batteries.size());
  LoocvResult result;
  result.splits.resize(splits.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    for (std::size_t i = next++; i < splits.size(); i = next++) {
      try {
        result.splits[i] = run_split<Scalar>(batteries, splits[i], model_cfg, train_cfg, options);
      } catch (const Error& e) {
        result.splits[i].battery_id = batteries[splits[i].test].battery_id;
        result.splits[i].error = e.what();
        result.splits[i].error_code = e.exit_code();
      } catch (const std::exception& e) {
        result.splits[i].battery_id = batteries[splits[i].test].battery_id;
        result.splits[i].error = e.what();
        result.splits[i].error_code = ExitCode::internal;
      }
    }
  };
  const int threads = std::clamp(options.parallel, 1, static_cast<int>(splits.size()));
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (const auto& s : result.splits) {
    if (s.report) result.reports.push_back(*s.report);
  }
  if (!result.reports.empty()) result.aggregate = aggregate(result.reports);
  return result;
}

}  // namespace cdformer
