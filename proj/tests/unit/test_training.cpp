#include <gtest/gtest.h>

#include <cmath>
#include <mutex>
#include <random>
#include <set>

#include "cdformer/training.hpp"
#include "../support/gradcheck.hpp"

using namespace cdformer;
using cdformer::testing::gradcheck;
using cdformer::testing::random_tensor;
using T = Tensor<double>;

namespace {

ModelConfig small_config(Variant variant) {
  ModelConfig cfg;
  cfg.input_channels = 4;
  cfg.window_len = 6;
  cfg.cnn_channels = 4;
  cfg.drsn_blocks = 1;
  cfg.d_model = 8;
  cfg.heads = 2;
  cfg.d_ff = 12;
  cfg.encoder_layers = 1;
  cfg.reg_hidden = 6;
  cfg.variant = variant;
  return cfg;
}

TrainConfig quick_train() {
  TrainConfig cfg;
  cfg.lr = 5e-3;
  cfg.batch_size = 8;
  cfg.max_epochs = 3;
  cfg.patience = 5;
  return cfg;
}

BatterySeries battery(std::uint64_t seed, const std::string& id, int cycles = 50) {
  SynthParams p;
  p.seed = seed;
  p.battery_id = id;
  p.n_cycles = cycles;
  p.knee_cycle = 20;
  p.fade_rate = 3e-3;
  return synthesize_battery(p);
}

std::vector<WindowedSample> samples(std::size_t n, std::uint64_t seed, double target_shift = 0.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(0.0, 1.0);
  std::vector<WindowedSample> out(n);
  for (auto& s : out) {
    s.features = Eigen::MatrixXd(4, 6);
    for (Eigen::Index i = 0; i < s.features.size(); ++i) s.features.data()[i] = dist(rng);
    s.target = s.features(3, 5) + target_shift;
  }
  return out;
}

}  // namespace

TEST(Huber, HandValues) {
  auto loss = [](double p, double t) { return huber_loss(T({1}, Vec<double>::Constant(1, p)), T({1}, Vec<double>::Constant(1, t)), 1.0).item(); };
  EXPECT_EQ(loss(0.3, 0.3), 0.0);
  EXPECT_DOUBLE_EQ(loss(0.5, 0.0), 0.125);
  EXPECT_DOUBLE_EQ(loss(2.0, 0.0), 1.5);
  EXPECT_DOUBLE_EQ(loss(-2.0, 0.0), 1.5);
  EXPECT_THROW(huber_loss(T::zeros({2}), T::zeros({3}), 1.0), DimensionError);
  EXPECT_THROW(huber_loss(T::zeros({2}), T::zeros({2}), 0.0), ConfigError);
}

TEST(Huber, GradientMatchesFiniteDifferences) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    std::mt19937_64 rng(seed);
    auto pred = random_tensor({9}, rng, -2.5, 2.5);
    auto target = random_tensor({9}, rng, -0.5, 0.5);
    auto r = gradcheck([&] { return huber_loss(pred, target, 1.0); }, {{"pred", pred}, {"target", target}});
    EXPECT_LT(r.max_rel, 1e-4) << r.worst;
  }
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  TrainConfig cfg;
  cfg.weight_decay = 0.0;
  T w({3}, Vec<double>::LinSpaced(3, -1, 1));
  w.set_requires_grad(true);
  ParamList<double> params{{"w", w}};
  AdamState<double> state;
  const Vec<double> before = w.value();
  for (int i = 0; i < 10; ++i) {
    w.zero_grad();
    backward(sum(scale(w, 0.0)));
    adam_step(params, state, cfg);
  }
  EXPECT_EQ(w.value(), before);
  EXPECT_EQ(state.step, 10);
}

TEST(Adam, FirstStepIsLearningRateTimesSign) {
  TrainConfig cfg;
  cfg.weight_decay = 0.0;
  cfg.lr = 1e-3;
  for (double g : {3.0, -0.02}) {
    T w({1}, Vec<double>::Constant(1, 0.5));
    w.set_requires_grad(true);
    ParamList<double> params{{"w", w}};
    AdamState<double> state;
    backward(sum(scale(w, g)));
    adam_step(params, state, cfg);
    EXPECT_NEAR(w[0] - 0.5, -cfg.lr * (g > 0 ? 1 : -1), 1e-8);
  }
}

TEST(Adam, NonFiniteGradientNamesTheParameter) {
  TrainConfig cfg;
  T a({2}, Vec<double>::Ones(2)), b({2}, Vec<double>::Ones(2));
  a.set_requires_grad(true);
  b.set_requires_grad(true);
  ParamList<double> params{{"layer.a", a}, {"layer.b", b}};
  AdamState<double> state;
  backward(sum(add(a, scale(b, std::numeric_limits<double>::quiet_NaN()))));
  try {
    adam_step(params, state, cfg);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("layer.b"), std::string::npos);
  }
  EXPECT_EQ(a.value(), Vec<double>::Ones(2));
}

TEST(Adam, ClassicL2PullsTowardZero) {
  TrainConfig cfg;
  cfg.weight_decay = 0.5;
  T w({1}, Vec<double>::Constant(1, 2.0));
  w.set_requires_grad(true);
  ParamList<double> params{{"w", w}};
  AdamState<double> state;
  w.zero_grad();
  backward(sum(scale(w, 0.0)));
  adam_step(params, state, cfg);
  EXPECT_LT(w[0], 2.0);
}

TEST(TrainSplit, ZeroEpochsReturnsInitialWeights) {
  CdformerModel<double> model(small_config(Variant::cdformer));
  const auto before = take_snapshot(model);
  auto cfg = quick_train();
  cfg.max_epochs = 0;
  auto train = samples(10, 1);
  auto out = train_split<double>(model, train, {}, cfg);
  EXPECT_TRUE(out.history.empty());
  EXPECT_EQ(out.best_epoch, 0);
  const auto after = take_snapshot(model);
  EXPECT_EQ(after.params, before.params);
  EXPECT_EQ(after.buffers, before.buffers);
}

TEST(TrainSplit, PatienceOneStopsAfterTwoEpochsWhenValidationWorsens) {
  CdformerModel<double> model(small_config(Variant::baseline_fc));
  auto cfg = quick_train();
  cfg.max_epochs = 50;
  cfg.patience = 1;
  cfg.lr = 1e-2;
  cfg.weight_decay = 0.0;
  // Training pushes outputs up toward +1; validation wants -1 on the same inputs.
  auto train = samples(16, 2, 1.0);
  auto val = train;
  for (auto& s : val) s.target = -1.0;
  auto out = train_split<double>(model, train, val, cfg);
  ASSERT_EQ(out.history.size(), 2u);
  EXPECT_GT(out.history[1].val_loss, out.history[0].val_loss);
  EXPECT_EQ(out.best_epoch, 1);
  EXPECT_NEAR(evaluate_loss(model, val, cfg.huber_delta), out.history[0].val_loss, 1e-12);
}

TEST(TrainSplit, ReturnsBestValidationCheckpoint) {
  CdformerModel<double> model(small_config(Variant::cnn_fc));
  auto cfg = quick_train();
  cfg.max_epochs = 12;
  auto train = samples(24, 3);
  auto val = samples(8, 4);
  auto out = train_split<double>(model, train, val, cfg);
  double best = std::numeric_limits<double>::infinity();
  for (const auto& r : out.history) best = std::min(best, r.val_loss);
  EXPECT_EQ(out.best_val, best);
  EXPECT_EQ(out.history[static_cast<std::size_t>(out.best_epoch - 1)].val_loss, best);
  EXPECT_NEAR(evaluate_loss(model, val, cfg.huber_delta), best, 1e-12);
}

TEST(TrainSplit, DeterministicReplay) {
  auto cfg = quick_train();
  cfg.augment = AugmentConfig{};
  auto train = samples(20, 5);
  auto val = samples(6, 6);
  CdformerModel<double> a(small_config(Variant::cdformer)), b(small_config(Variant::cdformer));
  auto ra = train_split<double>(a, train, val, cfg);
  auto rb = train_split<double>(b, train, val, cfg);
  EXPECT_EQ(take_snapshot(a).params, take_snapshot(b).params);
  ASSERT_EQ(ra.history.size(), rb.history.size());
  for (std::size_t i = 0; i < ra.history.size(); ++i) {
    EXPECT_EQ(ra.history[i].train_loss, rb.history[i].train_loss);
    EXPECT_EQ(ra.history[i].val_loss, rb.history[i].val_loss);
  }
}

TEST(TrainSplit, EmptyTrainingSetIsADataError) {
  CdformerModel<double> model(small_config(Variant::cdformer));
  EXPECT_THROW(train_split<double>(model, {}, {}, quick_train()), DataError);
}

TEST(TrainSplit, DivergenceKeepsLastGoodCheckpoint) {
  CdformerModel<double> model(small_config(Variant::baseline_fc));
  auto cfg = quick_train();
  cfg.max_epochs = 4;
  auto train = samples(8, 7);
  train[3].target = std::numeric_limits<double>::quiet_NaN();
  const auto before = take_snapshot(model);
  auto out = train_split<double>(model, train, {}, cfg);
  EXPECT_TRUE(out.diverged);
  EXPECT_FALSE(out.diagnostic.empty());
  EXPECT_EQ(take_snapshot(model).params, before.params);
}

TEST(TrainSplit, AugmentationOnlyTouchesTrainingInputs) {
  auto cfg = quick_train();
  cfg.max_epochs = 2;
  cfg.patience = 10;
  cfg.augment = AugmentConfig{};
  auto train = samples(13, 8);
  auto val = samples(5, 9);
  std::set<const WindowedSample*> seen;
  std::size_t calls = 0;
  TrainHooks hooks;
  hooks.on_augment = [&](const WindowedSample& s) {
    seen.insert(&s);
    ++calls;
  };
  CdformerModel<double> model(small_config(Variant::cdformer));
  const auto before = augment_call_count();
  train_split<double>(model, train, val, cfg, hooks);
  EXPECT_EQ(calls, 2 * train.size());
  EXPECT_EQ(augment_call_count() - before, 2 * train.size());
  for (const auto& s : val) EXPECT_EQ(seen.count(&s), 0u);
  for (const auto& s : train) EXPECT_EQ(seen.count(&s), 1u);

  const auto eval_before = augment_call_count();
  auto b = battery(1, "E");
  std::vector<BatterySeries> pool{b};
  auto state = fit_normalizer(pool, feature_set(Profile::synthetic));
  rollout(make_predictor(model), b, state, 6, RolloutMode::one_step);
  rollout(make_predictor(model), b, state, 6, RolloutMode::recursive);
  evaluate_loss(model, val, 1.0);
  EXPECT_EQ(augment_call_count(), eval_before);
}

TEST(Memorization, EveryVariantOverfitsEightSamples) {
  auto cfg = quick_train();
  cfg.weight_decay = 0.0;
  cfg.lr = 1e-3;
  auto data = samples(8, 10);
  std::vector<Eigen::MatrixXd> windows;
  Vec<double> y(8);
  for (std::size_t i = 0; i < data.size(); ++i) {
    windows.push_back(data[i].features);
    y[static_cast<Index>(i)] = data[i].target;
  }
  const auto x = stack_windows<double>(windows);
  for (Variant v : {Variant::baseline_fc, Variant::cnn_fc, Variant::cnn_transformer, Variant::cdformer}) {
    CdformerModel<double> model(small_config(v));
    auto history = fit_batch(model, x, T({8}, y), cfg, 2000, 1e-3);
    EXPECT_LT(history.back(), 1e-3) << to_string(v) << " after " << history.size() << " steps";
    if (history.size() > 100) {
      auto mean = [&](std::size_t from) {
        return std::accumulate(history.begin() + static_cast<std::ptrdiff_t>(from),
                               history.begin() + static_cast<std::ptrdiff_t>(from + 50), 0.0) / 50.0;
      };
      EXPECT_LT(mean(history.size() - 50), mean(0)) << to_string(v);
    }
  }
}

TEST(SplitTrainVal, ChronologicalTail) {
  auto windows = samples(10, 11);
  for (std::size_t i = 0; i < windows.size(); ++i) windows[i].end_cycle = static_cast<int>(i + 1);
  std::vector<WindowedSample> train, val;
  split_train_val(windows, 0.2, train, val);
  ASSERT_EQ(train.size(), 8u);
  ASSERT_EQ(val.size(), 2u);
  EXPECT_EQ(val[0].end_cycle, 9);
  EXPECT_EQ(val[1].end_cycle, 10);
}

TEST(Loocv, NormalizerNeverSeesTheTestBattery) {
  std::vector<BatterySeries> batteries{battery(1, "A"), battery(2, "B"), battery(3, "C")};
  auto tcfg = quick_train();
  tcfg.max_epochs = 1;
  std::mutex lock;
  std::vector<std::string> tested;
  LoocvOptions options;
  options.hooks.on_normalizer_fit = [&](const std::vector<std::string>& fit, const std::string& test) {
    std::lock_guard guard(lock);
    EXPECT_EQ(fit.size(), 2u);
    EXPECT_EQ(std::count(fit.begin(), fit.end(), test), 0);
    tested.push_back(test);
  };
  auto result = run_loocv<double>(batteries, small_config(Variant::cdformer), tcfg, options);
  EXPECT_EQ(tested.size(), 3u);
  ASSERT_EQ(result.reports.size(), 3u);
  for (const auto& s : result.splits) {
    ASSERT_TRUE(s.checkpoint.has_value());
    ASSERT_TRUE(s.checkpoint->normalizer.has_value());
    std::vector<BatterySeries> pool;
    for (const auto& b : batteries) {
      if (b.battery_id != s.battery_id) pool.push_back(b);
    }
    const auto expected = fit_normalizer(pool, feature_set(Profile::synthetic));
    EXPECT_EQ(s.checkpoint->normalizer->min, expected.min);
    EXPECT_EQ(s.checkpoint->normalizer->max, expected.max);
  }
}

TEST(Loocv, AggregateIsTheMeanAndFailuresStayLocal) {
  std::vector<BatterySeries> batteries{battery(1, "A"), battery(2, "B"), battery(3, "C"), battery(4, "D")};
  batteries[2].profile = Profile::calce;  // feature count no longer matches the model
  auto tcfg = quick_train();
  tcfg.max_epochs = 2;
  LoocvOptions options;
  options.parallel = 2;
  auto result = run_loocv<double>(batteries, small_config(Variant::cnn_transformer), tcfg, options);
  ASSERT_EQ(result.splits.size(), 4u);
  EXPECT_FALSE(result.splits[2].error.empty());
  EXPECT_NE(result.splits[2].error.find("/model/input_channels"), std::string::npos);
  ASSERT_EQ(result.reports.size(), 3u);
  double rmse = 0, mae = 0;
  for (const auto& r : result.reports) {
    rmse += r.rmse;
    mae += r.mae;
  }
  ASSERT_TRUE(result.aggregate.has_value());
  EXPECT_NEAR(result.aggregate->rmse, rmse / 3, 1e-12);
  EXPECT_NEAR(result.aggregate->mae, mae / 3, 1e-12);
}

TEST(Loocv, ParallelMatchesSerial) {
  std::vector<BatterySeries> batteries{battery(1, "A"), battery(2, "B"), battery(3, "C")};
  auto tcfg = quick_train();
  tcfg.max_epochs = 2;
  LoocvOptions serial, parallel;
  parallel.parallel = 3;
  auto a = run_loocv<double>(batteries, small_config(Variant::cdformer), tcfg, serial);
  auto b = run_loocv<double>(batteries, small_config(Variant::cdformer), tcfg, parallel);
  ASSERT_EQ(a.reports.size(), b.reports.size());
  for (std::size_t i = 0; i < a.reports.size(); ++i) {
    EXPECT_EQ(a.reports[i].rmse, b.reports[i].rmse);
    EXPECT_EQ(a.reports[i].pred_capacity, b.reports[i].pred_capacity);
  }
}

TEST(Loocv, IdenticalBatteriesGiveNearEqualRmse) {
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    auto a = battery(seed, "A", 60), b = a;
    b.battery_id = "B";
    std::vector<BatterySeries> batteries{a, b};
    auto tcfg = quick_train();
    tcfg.max_epochs = 5;
    auto result = run_loocv<double>(batteries, small_config(Variant::cdformer), tcfg);
    ASSERT_EQ(result.reports.size(), 2u);
    // Same data, same seeds: the splits are the same computation.
    EXPECT_NEAR(result.reports[0].rmse, result.reports[1].rmse, 1e-12);
  }
}

TEST(Loocv, NeedsTwoBatteries) {
  std::vector<BatterySeries> one{battery(1, "A")};
  EXPECT_THROW(run_loocv<double>(one, small_config(Variant::cdformer), quick_train()), DataError);
}
