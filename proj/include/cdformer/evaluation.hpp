#pragma once

#include <Eigen/Dense>

#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cdformer/dataset.hpp"

namespace cdformer {

/// Fraction of rated capacity that marks end of life.
inline constexpr double kEolFraction = 0.7;

double rmse(std::span<const double> y_true, std::span<const double> y_pred);
double mae(std::span<const double> y_true, std::span<const double> y_pred);

/// 1-based position of the first capacity strictly below 0.7 * rated.
std::optional<int> find_eol(std::span<const double> capacity, double rated);

/// |N_true - N_pred| / N_true with N counted from `first_cycle`; empty when
/// either trajectory never crosses the threshold.
std::optional<double> relative_error(std::span<const double> true_caps, std::span<const double> pred_caps,
                                     double rated, int first_cycle = 1);

enum class RolloutMode { one_step, recursive };

std::string to_string(RolloutMode mode);
RolloutMode parse_rollout_mode(const std::string& name);

struct EvalReport {
  std::string battery_id;
  double rmse = 0.0;
  double mae = 0.0;
  std::optional<double> re;
  double rated_capacity = 0.0;
  std::vector<int> cycles;
  std::vector<double> true_capacity;  // Ah
  std::vector<double> pred_capacity;  // Ah
  std::optional<int> eol_true;        // cycle index
  std::optional<int> eol_pred;
  RolloutMode mode = RolloutMode::one_step;
};

/// Maps a batch of normalised [C x L] windows to normalised next-cycle capacities.
using Predictor = std::function<std::vector<double>(const std::vector<Eigen::MatrixXd>&)>;

struct Trajectory {
  std::vector<int> cycles;
  std::vector<double> true_capacity;
  std::vector<double> pred_capacity;
};

/// Predicts cycles L+1..N. In recursive mode every window after the first
/// sees predicted capacities in place of measured ones.
Trajectory rollout(const Predictor& predict, const BatterySeries& battery, const NormalizationState& normalizer,
                   std::size_t window_len, RolloutMode mode);

/// Metrics over a trajectory; eol cycles are reported as absolute cycle numbers.
EvalReport make_report(const std::string& battery_id, const Trajectory& trajectory, double rated, RolloutMode mode);

struct AggregateMetrics {
  double rmse = 0.0;
  double mae = 0.0;
  std::optional<double> re;  // mean over batteries with a defined RE
  std::size_t re_count = 0;
};

AggregateMetrics aggregate(std::span<const EvalReport> reports);

struct ReportMeta {
  std::string dataset;
  std::string model;
  std::string config_hash;
};

/// Writes metrics.json (per-battery and aggregate) plus trajectory_<id>.csv
/// files into `dir`. Returns the JSON text written.
std::string emit_report(std::span<const EvalReport> reports, const ReportMeta& meta, const std::filesystem::path& dir);
std::string report_json(std::span<const EvalReport> reports, const ReportMeta& meta);

void write_trajectory_csv(const EvalReport& report, const std::filesystem::path& path);
Trajectory read_trajectory_csv(const std::filesystem::path& path);

}  // namespace cdformer
