#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include <nlohmann/json.hpp>

#include "cdformer/errors.hpp"
#include "cdformer/evaluation.hpp"

using namespace cdformer;
namespace fs = std::filesystem;

namespace {

BatterySeries synthetic(std::uint64_t seed, const std::string& id) {
  SynthParams p;
  p.seed = seed;
  p.battery_id = id;
  p.n_cycles = 120;
  p.knee_cycle = 60;
  p.fade_rate = 1e-3;
  return synthesize_battery(p);
}

// Returns the true next-cycle normalised capacity for each window, in call order.
Predictor oracle(const BatterySeries& battery, const NormalizationState& state, std::size_t window_len) {
  auto counter = std::make_shared<std::size_t>(0);
  const std::size_t cap = capacity_channel(state.features);
  return [=, &battery](const std::vector<Eigen::MatrixXd>& windows) {
    std::vector<double> out;
    for (std::size_t i = 0; i < windows.size(); ++i) {
      out.push_back(state.normalize(cap, battery.records[window_len + (*counter)++].capacity));
    }
    return out;
  };
}

}  // namespace

TEST(Metrics, HandValues) {
  std::vector<double> t{1, 1}, p{1, 2};
  EXPECT_NEAR(rmse(t, p), std::sqrt(0.5), 1e-15);
  EXPECT_DOUBLE_EQ(mae(t, p), 0.5);
  EXPECT_EQ(rmse(t, t), 0.0);
  EXPECT_EQ(mae(t, t), 0.0);
  std::vector<double> empty;
  EXPECT_THROW(rmse(empty, empty), DimensionError);
  std::vector<double> three{1, 2, 3};
  EXPECT_THROW(mae(t, three), DimensionError);
}

TEST(Metrics, HomogeneityAndJensen) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> dist(-3, 3);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> a(17), b(17), ca(17), cb(17);
    const double c = dist(rng);
    for (std::size_t i = 0; i < a.size(); ++i) {
      a[i] = dist(rng);
      b[i] = dist(rng);
      ca[i] = c * a[i];
      cb[i] = c * b[i];
    }
    EXPECT_LE(mae(a, b), rmse(a, b) + 1e-15);
    EXPECT_NEAR(rmse(ca, cb), std::abs(c) * rmse(a, b), 1e-12);
  }
}

TEST(Eol, Examples) {
  EXPECT_EQ(find_eol(std::vector<double>{1.5, 1.41, 1.39, 1.2}, 2.0), 3);
  EXPECT_EQ(find_eol(std::vector<double>{1.5, 1.45}, 2.0), std::nullopt);
  EXPECT_EQ(find_eol(std::vector<double>{1.0, 1.5}, 2.0), 1);
  EXPECT_EQ(find_eol(std::vector<double>{1.4}, 2.0), std::nullopt);  // strict inequality
}

TEST(RelativeError, Examples) {
  std::vector<double> t(150, 2.0), p(150, 2.0);
  for (std::size_t i = 99; i < 150; ++i) t[i] = 1.0;
  for (std::size_t i = 89; i < 150; ++i) p[i] = 1.0;
  EXPECT_NEAR(*relative_error(t, p, 2.0), 0.1, 1e-15);
  EXPECT_EQ(*relative_error(t, t, 2.0), 0.0);
  std::vector<double> never(150, 1.9);
  EXPECT_FALSE(relative_error(t, never, 2.0).has_value());
}

TEST(Rollout, OracleIsExactInBothModes) {
  auto battery = synthetic(1, "B");
  std::vector<BatterySeries> train{battery};
  auto state = fit_normalizer(train, feature_set(Profile::synthetic));
  for (RolloutMode mode : {RolloutMode::one_step, RolloutMode::recursive}) {
    auto traj = rollout(oracle(battery, state, 10), battery, state, 10, mode);
    ASSERT_EQ(traj.cycles.size(), battery.size() - 10);
    EXPECT_EQ(traj.cycles.front(), 11);
    EXPECT_EQ(traj.cycles.back(), static_cast<int>(battery.size()));
    for (std::size_t i = 0; i < traj.true_capacity.size(); ++i) {
      EXPECT_NEAR(traj.pred_capacity[i], traj.true_capacity[i], 1e-12);
    }
    auto report = make_report("B", traj, battery.rated_capacity, mode);
    EXPECT_NEAR(report.rmse, 0.0, 1e-12);
    EXPECT_NEAR(report.mae, 0.0, 1e-12);
    ASSERT_TRUE(report.re.has_value());
    EXPECT_EQ(*report.re, 0.0);
  }
}

TEST(Rollout, RecursiveFeedsPredictionsBack) {
  auto battery = synthetic(2, "B");
  std::vector<BatterySeries> train{battery};
  auto state = fit_normalizer(train, feature_set(Profile::synthetic));
  const std::size_t cap = capacity_channel(state.features);
  std::vector<Eigen::MatrixXd> seen;
  Predictor constant = [&](const std::vector<Eigen::MatrixXd>& windows) {
    seen.insert(seen.end(), windows.begin(), windows.end());
    return std::vector<double>(windows.size(), 0.25);
  };
  auto traj = rollout(constant, battery, state, 8, RolloutMode::recursive);
  for (double p : traj.pred_capacity) EXPECT_NEAR(p, state.denormalize(cap, 0.25), 1e-12);
  // Window k sees min(k, 8) predicted capacities at its tail; other features stay measured.
  for (std::size_t k = 0; k < seen.size(); ++k) {
    const auto& w = seen[k];
    const std::size_t predicted = std::min<std::size_t>(k, 8);
    for (std::size_t t = 0; t < 8; ++t) {
      const std::size_t cycle_row = k + t;
      const double measured = state.normalize(cap, battery.records[cycle_row].capacity);
      const double expected = t >= 8 - predicted ? 0.25 : measured;
      EXPECT_EQ(w(static_cast<Eigen::Index>(cap), static_cast<Eigen::Index>(t)), expected);
      EXPECT_EQ(w(0, static_cast<Eigen::Index>(t)), state.normalize(0, *battery.records[cycle_row].voltage_avg));
    }
  }
  // One-step windows never contain predictions.
  seen.clear();
  rollout(constant, battery, state, 8, RolloutMode::one_step);
  EXPECT_EQ(seen.size(), battery.size() - 8);
  EXPECT_EQ(seen.back()(static_cast<Eigen::Index>(cap), 7), state.normalize(cap, battery.records[battery.size() - 2].capacity));
}

TEST(Rollout, ShortSeriesIsAnError) {
  auto battery = synthetic(3, "B");
  battery.records.resize(5);
  std::vector<BatterySeries> train{battery};
  auto state = fit_normalizer(train, feature_set(Profile::synthetic));
  EXPECT_THROW(rollout(oracle(battery, state, 5), battery, state, 5, RolloutMode::one_step), DataError);
}

TEST(Report, UndefinedReIsExcludedFromAggregate) {
  EvalReport a, b;
  a.battery_id = "a";
  a.rmse = 0.1;
  a.mae = 0.05;
  a.re = 0.2;
  b.battery_id = "b";
  b.rmse = 0.3;
  b.mae = 0.15;
  std::vector<EvalReport> reports{a, b};
  auto agg = aggregate(reports);
  EXPECT_NEAR(agg.rmse, 0.2, 1e-15);
  EXPECT_NEAR(agg.mae, 0.1, 1e-15);
  EXPECT_EQ(agg.re_count, 1u);
  EXPECT_NEAR(*agg.re, 0.2, 1e-15);
}

TEST(Report, JsonSchemaRoundTripAndAggregate) {
  const auto dir = fs::temp_directory_path() / ("cdformer_eval_" + std::to_string(std::random_device{}()));
  std::vector<EvalReport> reports;
  std::mt19937_64 rng(4);
  std::normal_distribution<double> noise(0.0, 0.01);
  for (int i = 0; i < 4; ++i) {
    auto battery = synthetic(static_cast<std::uint64_t>(10 + i), "B" + std::to_string(i));
    Trajectory t;
    for (const auto& r : battery.records) {
      t.cycles.push_back(r.cycle_index);
      t.true_capacity.push_back(r.capacity);
      t.pred_capacity.push_back(r.capacity + noise(rng));
    }
    reports.push_back(make_report(battery.battery_id, t, battery.rated_capacity, RolloutMode::one_step));
  }
  const auto text = emit_report(reports, {"synthetic", "cdformer", "abc"}, dir);
  const auto doc = nlohmann::json::parse(text);
  EXPECT_EQ(doc["dataset"], "synthetic");
  EXPECT_EQ(doc["model"], "cdformer");
  EXPECT_EQ(doc["config_hash"], "abc");
  ASSERT_EQ(doc["per_battery"].size(), 4u);
  double rmse_sum = 0, mae_sum = 0;
  for (const auto& e : doc["per_battery"]) {
    for (const char* key : {"id", "rmse", "mae", "re", "eol_true", "eol_pred"}) EXPECT_TRUE(e.contains(key)) << key;
    rmse_sum += e["rmse"].get<double>();
    mae_sum += e["mae"].get<double>();
  }
  EXPECT_NEAR(doc["aggregate"]["rmse"].get<double>(), rmse_sum / 4, 1e-12);
  EXPECT_NEAR(doc["aggregate"]["mae"].get<double>(), mae_sum / 4, 1e-12);
  EXPECT_TRUE(doc["aggregate"].contains("re"));
  // Key order is fixed.
  EXPECT_LT(text.find("\"dataset\""), text.find("\"model\""));
  EXPECT_LT(text.find("\"per_battery\""), text.find("\"aggregate\""));
  for (const auto& r : reports) {
    auto t = read_trajectory_csv(dir / ("trajectory_" + r.battery_id + ".csv"));
    ASSERT_EQ(t.cycles, r.cycles);
    for (std::size_t i = 0; i < t.cycles.size(); ++i) {
      EXPECT_NEAR(t.true_capacity[i], r.true_capacity[i], 1e-12);
      EXPECT_NEAR(t.pred_capacity[i], r.pred_capacity[i], 1e-12);
    }
  }
  EXPECT_EQ(report_json(reports, {"synthetic", "cdformer", "abc"}), text);
  fs::remove_all(dir);
}

TEST(Report, UnwritablePath) {
  EvalReport r;
  r.battery_id = "x";
  r.cycles = {1};
  r.true_capacity = {1};
  r.pred_capacity = {1};
  std::vector<EvalReport> reports{r};
  EXPECT_THROW(emit_report(reports, {}, "/proc/cdformer_nope/sub"), IoError);
}

TEST(RolloutMode, Parse) {
  EXPECT_EQ(parse_rollout_mode("recursive"), RolloutMode::recursive);
  EXPECT_THROW(parse_rollout_mode("beam"), ConfigError);
}
