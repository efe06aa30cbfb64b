#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace cdformer {

enum class Profile { nasa, calce, synthetic };

std::string to_string(Profile profile);
Profile parse_profile(const std::string& name);

/// Nameplate capacity used for EOL when the CSV carries none: 2.0 Ah (NASA
/// and synthetic cells), 1.1 Ah (CALCE).
double default_rated_capacity(Profile profile);

enum class Feature { voltage_avg, current_avg, temp_avg, capacity, cc_charge_time, soh };

std::string to_string(Feature feature);
Feature parse_feature(const std::string& name);

/// Model inputs per profile, in channel order.
std::vector<Feature> feature_set(Profile profile);
std::size_t capacity_channel(std::span<const Feature> features);

struct CycleRecord {
  int cycle_index = 0;
  double capacity = 0.0;  // Ah
  std::optional<double> voltage_avg;
  std::optional<double> current_avg;
  std::optional<double> temp_avg;
  std::optional<double> cc_charge_time;
  std::optional<double> soh;  // percent of the first cycle's capacity

  std::optional<double> get(Feature feature) const;
  void set(Feature feature, double value);
};

struct BatterySeries {
  std::string battery_id;
  double rated_capacity = 0.0;
  std::vector<CycleRecord> records;
  Profile profile = Profile::synthetic;

  std::size_t size() const { return records.size(); }
  std::vector<double> capacities() const;
  std::vector<int> cycles() const;
};

/// Reads a canonical cycle CSV. The file may hold several batteries, grouped
/// by battery_id in order of first appearance. Throws DataError with row
/// numbers on any violation; never returns partial data.
std::vector<BatterySeries> ingest_csv_all(const std::filesystem::path& path, Profile profile,
                                          std::optional<double> rated_capacity = std::nullopt);
/// Single-battery form of ingest_csv_all.
BatterySeries ingest_csv(const std::filesystem::path& path, Profile profile,
                         std::optional<double> rated_capacity = std::nullopt);
/// Every *.csv in a directory, sorted by file name.
std::vector<BatterySeries> ingest_directory(const std::filesystem::path& dir, Profile profile,
                                            std::optional<double> rated_capacity = std::nullopt);

void write_series_csv(std::span<const BatterySeries> batteries, const std::filesystem::path& path);
std::string format_number(double value);

/// soh_t = capacity_t / capacity_1 * 100.
BatterySeries compute_soh(BatterySeries series);

struct SynthParams {
  std::string battery_id = "SYN01";
  double c0 = 2.0;
  double fade_rate = 4e-4;        // fractional loss per cycle before the knee
  double knee_cycle = 150;        // cycles after cycle 1
  double post_knee_factor = 6.0;  // post-knee rate = factor * fade_rate
  double noise_std = 0.005;       // Ah
  int n_cycles = 300;
  std::uint64_t seed = 1;
};

/// Noise-free capacity at cycle index (1-based).
double synthetic_capacity(const SynthParams& params, double cycle);
/// First cycle index with noise-free capacity < fraction * c0, if any.
std::optional<int> synthetic_eol_cycle(const SynthParams& params, double fraction = 0.7);

/// Knee-shaped fade with smooth auxiliary features. Truncates at the first
/// nonpositive capacity and reports that through `warning`.
BatterySeries synthesize_battery(const SynthParams& params, std::string* warning = nullptr);

/// Parameters for `count` related cells: ids SYN01.., per-cell noise seeds, and
/// fade rate and knee position jittered by up to 15% / 15 cycles around `base`.
std::vector<SynthParams> synthetic_fleet(std::size_t count, std::uint64_t seed, const SynthParams& base = {});

/// Per-feature min-max scaling fitted on training batteries only.
struct NormalizationState {
  std::vector<Feature> features;
  std::vector<double> min;
  std::vector<double> max;

  double scale(std::size_t channel) const { return max[channel] - min[channel]; }
  double normalize(std::size_t channel, double value) const { return (value - min[channel]) / scale(channel); }
  double denormalize(std::size_t channel, double value) const { return value * scale(channel) + min[channel]; }
};

/// Raw [N x C] feature matrix of a series.
Eigen::MatrixXd feature_matrix(const BatterySeries& series, std::span<const Feature> features);

/// Constant features fall back to a unit range; their names are appended to
/// `warnings` when given.
NormalizationState fit_normalizer(std::span<const BatterySeries> train, std::span<const Feature> features,
                                  std::vector<std::string>* warnings = nullptr);
Eigen::MatrixXd apply_normalizer(const NormalizationState& state, const Eigen::MatrixXd& raw);

struct WindowedSample {
  Eigen::MatrixXd features;  // [C x L]
  double target = 0.0;       // capacity at end_cycle + 1
  std::string battery_id;
  int end_cycle = 0;
};

/// Stride-1 windows over rows of a [N x C] matrix; target column `target_channel`
/// of the row after each window. Yields N - L samples.
std::vector<WindowedSample> make_windows(const Eigen::MatrixXd& values, std::size_t target_channel,
                                         std::size_t window_len, const std::string& battery_id,
                                         std::span<const int> cycles);
/// Normalised windows of a series.
std::vector<WindowedSample> make_windows(const BatterySeries& series, const NormalizationState& state,
                                         std::size_t window_len);

struct LoocvSplit {
  std::vector<std::size_t> train;
  std::size_t test = 0;
};

std::vector<LoocvSplit> make_loocv_splits(std::size_t battery_count);

}  // namespace cdformer
