#include "cdformer/dataset.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <random>
#include <sstream>

#include "cdformer/errors.hpp"

namespace cdformer {

namespace {

constexpr std::size_t kMaxReportedErrors = 20;

struct ColumnSpec {
  const char* header;
  std::optional<Feature> feature;  // empty for identity columns
};

constexpr std::array<ColumnSpec, 7> kColumns{{
    {"battery_id", std::nullopt},
    {"cycle_index", std::nullopt},
    {"capacity_ah", Feature::capacity},
    {"voltage_avg_v", Feature::voltage_avg},
    {"current_avg_a", Feature::current_avg},
    {"temp_avg_c", Feature::temp_avg},
    {"cc_charge_time_s", Feature::cc_charge_time},
}};

const char* column_for(Feature f) {
  for (const auto& c : kColumns) {
    if (c.feature == f) return c.header;
  }
  return nullptr;
}

std::vector<Feature> raw_inputs(Profile profile) {
  std::vector<Feature> out;
  for (Feature f : feature_set(profile)) {
    if (f != Feature::soh) out.push_back(f);
  }
  return out;
}

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return std::string(s.substr(first, last - first + 1));
}

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> fields;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    fields.push_back(trim(std::string_view(line).substr(start, comma - start)));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return fields;
}

std::optional<double> parse_double(const std::string& text) {
  double value = 0.0;
  const char* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc() || ptr != end || !std::isfinite(value)) return std::nullopt;
  return value;
}

std::optional<int> parse_int(const std::string& text) {
  int value = 0;
  const char* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc() || ptr != end) return std::nullopt;
  return value;
}

void set_feature(CycleRecord& record, Feature f, double v) {
  switch (f) {
    case Feature::voltage_avg: record.voltage_avg = v; break;
    case Feature::current_avg: record.current_avg = v; break;
    case Feature::temp_avg: record.temp_avg = v; break;
    case Feature::capacity: record.capacity = v; break;
    case Feature::cc_charge_time: record.cc_charge_time = v; break;
    case Feature::soh: record.soh = v; break;
  }
}

[[noreturn]] void raise(const std::filesystem::path& path, const std::vector<std::string>& errors) {
  std::ostringstream os;
  os << path.string() << ": " << errors.size() << " ingestion error" << (errors.size() == 1 ? "" : "s");
  for (std::size_t i = 0; i < errors.size() && i < kMaxReportedErrors; ++i) os << "\n  " << errors[i];
  if (errors.size() > kMaxReportedErrors) os << "\n  ...";
  throw DataError(os.str());
}

}  // namespace

std::string to_string(Profile profile) {
  switch (profile) {
    case Profile::nasa: return "nasa";
    case Profile::calce: return "calce";
    case Profile::synthetic: return "synthetic";
  }
  return "?";
}

Profile parse_profile(const std::string& name) {
  if (name == "nasa") return Profile::nasa;
  if (name == "calce") return Profile::calce;
  if (name == "synthetic") return Profile::synthetic;
  throw ConfigError("unknown profile '" + name + "' (expected nasa, calce or synthetic)");
}

double default_rated_capacity(Profile profile) { return profile == Profile::calce ? 1.1 : 2.0; }

std::string to_string(Feature feature) {
  switch (feature) {
    case Feature::voltage_avg: return "voltage_avg";
    case Feature::current_avg: return "current_avg";
    case Feature::temp_avg: return "temp_avg";
    case Feature::capacity: return "capacity";
    case Feature::cc_charge_time: return "cc_charge_time";
    case Feature::soh: return "soh";
  }
  return "?";
}

Feature parse_feature(const std::string& name) {
  for (Feature f : {Feature::voltage_avg, Feature::current_avg, Feature::temp_avg, Feature::capacity,
                    Feature::cc_charge_time, Feature::soh}) {
    if (to_string(f) == name) return f;
  }
  throw ConfigError("unknown feature '" + name + "'");
}

std::vector<Feature> feature_set(Profile profile) {
  if (profile == Profile::calce) return {Feature::capacity, Feature::cc_charge_time, Feature::soh};
  return {Feature::voltage_avg, Feature::current_avg, Feature::temp_avg, Feature::capacity};
}

std::size_t capacity_channel(std::span<const Feature> features) {
  const auto it = std::find(features.begin(), features.end(), Feature::capacity);
  if (it == features.end()) throw ConfigError("feature set has no capacity channel");
  return static_cast<std::size_t>(it - features.begin());
}

std::optional<double> CycleRecord::get(Feature feature) const {
  switch (feature) {
    case Feature::voltage_avg: return voltage_avg;
    case Feature::current_avg: return current_avg;
    case Feature::temp_avg: return temp_avg;
    case Feature::capacity: return capacity;
    case Feature::cc_charge_time: return cc_charge_time;
    case Feature::soh: return soh;
  }
  return std::nullopt;
}

void CycleRecord::set(Feature feature, double value) {
  switch (feature) {
    case Feature::voltage_avg: voltage_avg = value; break;
    case Feature::current_avg: current_avg = value; break;
    case Feature::temp_avg: temp_avg = value; break;
    case Feature::capacity: capacity = value; break;
    case Feature::cc_charge_time: cc_charge_time = value; break;
    case Feature::soh: soh = value; break;
  }
}

std::vector<double> BatterySeries::capacities() const {
  std::vector<double> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(r.capacity);
  return out;
}

std::vector<int> BatterySeries::cycles() const {
  std::vector<int> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(r.cycle_index);
  return out;
}

std::vector<BatterySeries> ingest_csv_all(const std::filesystem::path& path, Profile profile,
                                          std::optional<double> rated_capacity) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  const double rated = rated_capacity.value_or(default_rated_capacity(profile));
  if (!(rated > 0.0)) throw ConfigError("rated capacity must be positive");

  std::string line;
  if (!std::getline(in, line)) raise(path, {"file is empty (expected a header row)"});
  if (line.rfind("\xEF\xBB\xBF", 0) == 0) line.erase(0, 3);
  const auto header = split_fields(line);

  std::vector<std::string> errors;
  std::vector<std::optional<std::size_t>> slot(kColumns.size());
  for (std::size_t i = 0; i < header.size(); ++i) {
    const auto it = std::find_if(kColumns.begin(), kColumns.end(),
                                 [&](const ColumnSpec& c) { return header[i] == c.header; });
    if (it == kColumns.end()) {
      errors.push_back("row 1: unknown column '" + header[i] + "'");
      continue;
    }
    auto& s = slot[static_cast<std::size_t>(it - kColumns.begin())];
    if (s) errors.push_back("row 1: duplicate column '" + header[i] + "'");
    s = i;
  }
  std::vector<std::string> missing;
  for (std::size_t c = 0; c < 3; ++c) {
    if (!slot[c]) missing.push_back(kColumns[c].header);
  }
  for (Feature f : raw_inputs(profile)) {
    const char* name = column_for(f);
    const auto idx = static_cast<std::size_t>(
        std::find_if(kColumns.begin(), kColumns.end(), [&](const ColumnSpec& c) { return c.header == name; }) -
        kColumns.begin());
    if (!slot[idx] && std::find(missing.begin(), missing.end(), name) == missing.end()) missing.push_back(name);
  }
  if (!missing.empty()) {
    std::string required;
    for (Feature f : feature_set(profile)) required += (required.empty() ? "" : ", ") + to_string(f);
    std::string names;
    for (const auto& m : missing) names += (names.empty() ? "" : ", ") + m;
    errors.push_back("row 1: missing column(s) " + names + "; profile '" + to_string(profile) +
                     "' requires features " + required);
  }
  if (!errors.empty()) raise(path, errors);

  std::vector<BatterySeries> batteries;
  std::map<std::string, std::size_t> by_id;
  std::map<std::string, int> last_row;
  const auto required_inputs = raw_inputs(profile);
  int row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (trim(line).empty()) continue;
    const auto fields = split_fields(line);
    if (fields.size() != header.size()) {
      errors.push_back("row " + std::to_string(row) + ": expected " + std::to_string(header.size()) +
                       " fields, got " + std::to_string(fields.size()));
      continue;
    }
    const std::string& id = fields[*slot[0]];
    if (id.empty()) {
      errors.push_back("row " + std::to_string(row) + ": empty battery_id");
      continue;
    }
    CycleRecord record;
    bool ok = true;
    const auto cycle = parse_int(fields[*slot[1]]);
    if (!cycle || *cycle < 1) {
      errors.push_back("row " + std::to_string(row) + ": cycle_index must be an integer >= 1");
      ok = false;
    } else {
      record.cycle_index = *cycle;
    }
    for (std::size_t c = 2; c < kColumns.size(); ++c) {
      if (!slot[c]) continue;
      const Feature f = *kColumns[c].feature;
      const std::string& text = fields[*slot[c]];
      const bool required = f == Feature::capacity ||
                            std::find(required_inputs.begin(), required_inputs.end(), f) != required_inputs.end();
      if (text.empty()) {
        if (required) {
          errors.push_back("row " + std::to_string(row) + ": missing required field " + kColumns[c].header);
          ok = false;
        }
        continue;
      }
      const auto value = parse_double(text);
      if (!value) {
        errors.push_back("row " + std::to_string(row) + ": " + kColumns[c].header + " is not a finite number ('" +
                         text + "')");
        ok = false;
        continue;
      }
      set_feature(record, f, *value);
    }
    if (ok && !(record.capacity > 0.0)) {
      errors.push_back("row " + std::to_string(row) + ": capacity_ah must be positive");
      ok = false;
    }
    if (!ok) continue;

    auto [it, inserted] = by_id.try_emplace(id, batteries.size());
    if (inserted) {
      BatterySeries series;
      series.battery_id = id;
      series.rated_capacity = rated;
      series.profile = profile;
      batteries.push_back(std::move(series));
    }
    auto& series = batteries[it->second];
    if (!series.records.empty() && record.cycle_index <= series.records.back().cycle_index) {
      const bool dup = record.cycle_index == series.records.back().cycle_index;
      errors.push_back("row " + std::to_string(row) + ": " + (dup ? "duplicate" : "non-increasing") +
                       " cycle_index " + std::to_string(record.cycle_index) + " for battery " + id +
                       " (previous at row " + std::to_string(last_row[id]) + ")");
      continue;
    }
    last_row[id] = row;
    series.records.push_back(record);
  }
  if (in.bad()) throw IoError("read failure on " + path.string());
  if (!errors.empty()) raise(path, errors);
  if (batteries.empty()) raise(path, {"no data rows"});
  for (auto& b : batteries) b = compute_soh(std::move(b));
  return batteries;
}

BatterySeries ingest_csv(const std::filesystem::path& path, Profile profile, std::optional<double> rated_capacity) {
  auto all = ingest_csv_all(path, profile, rated_capacity);
  if (all.size() != 1) {
    throw DataError(path.string() + ": expected one battery, found " + std::to_string(all.size()));
  }
  return std::move(all.front());
}

std::vector<BatterySeries> ingest_directory(const std::filesystem::path& dir, Profile profile,
                                            std::optional<double> rated_capacity) {
  if (!std::filesystem::is_directory(dir)) throw IoError("data directory not found: " + dir.string());
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".csv") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw DataError("no .csv files in " + dir.string());
  std::vector<BatterySeries> out;
  std::map<std::string, std::string> seen;
  for (const auto& f : files) {
    for (auto& b : ingest_csv_all(f, profile, rated_capacity)) {
      auto [it, inserted] = seen.emplace(b.battery_id, f.string());
      if (!inserted) {
        throw DataError("battery " + b.battery_id + " appears in both " + it->second + " and " + f.string());
      }
      out.push_back(std::move(b));
    }
  }
  return out;
}

std::string format_number(double value) {
  std::array<char, 64> buf{};
  auto [ptr, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), value);
  if (ec != std::errc()) throw IoError("number formatting failed");
  return std::string(buf.data(), ptr);
}

void write_series_csv(std::span<const BatterySeries> batteries, const std::filesystem::path& path) {
  std::vector<std::size_t> columns{0, 1, 2};
  for (std::size_t c = 3; c < kColumns.size(); ++c) {
    const Feature f = *kColumns[c].feature;
    const bool present = std::any_of(batteries.begin(), batteries.end(), [&](const BatterySeries& b) {
      return std::any_of(b.records.begin(), b.records.end(), [&](const CycleRecord& r) { return r.get(f).has_value(); });
    });
    if (present) columns.push_back(c);
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  for (std::size_t i = 0; i < columns.size(); ++i) out << (i ? "," : "") << kColumns[columns[i]].header;
  out << '\n';
  for (const auto& b : batteries) {
    for (const auto& r : b.records) {
      out << b.battery_id << ',' << r.cycle_index;
      for (std::size_t i = 2; i < columns.size(); ++i) {
        out << ',';
        if (auto v = r.get(*kColumns[columns[i]].feature)) out << format_number(*v);
      }
      out << '\n';
    }
  }
  if (!out) throw IoError("write failure on " + path.string());
}

BatterySeries compute_soh(BatterySeries series) {
  if (series.records.empty()) throw DataError("compute_soh: empty series " + series.battery_id);
  const double initial = series.records.front().capacity;
  if (!(initial > 0.0)) throw DataError("compute_soh: initial capacity of " + series.battery_id + " is not positive");
  for (auto& r : series.records) r.soh = r.capacity / initial * 100.0;
  return series;
}

double synthetic_capacity(const SynthParams& p, double cycle) {
  const double s = cycle - 1.0;
  const double post_rate = p.post_knee_factor * p.fade_rate;
  if (s < p.knee_cycle) return p.c0 * (1.0 - p.fade_rate * s);
  return p.c0 * (1.0 - p.fade_rate * p.knee_cycle - post_rate * (s - p.knee_cycle));
}

std::optional<int> synthetic_eol_cycle(const SynthParams& p, double fraction) {
  const double drop = 1.0 - fraction;
  const double post_rate = p.post_knee_factor * p.fade_rate;
  double crossing;  // cycles after cycle 1 where the clean curve hits fraction * c0
  if (p.fade_rate > 0.0 && drop / p.fade_rate <= p.knee_cycle) {
    crossing = drop / p.fade_rate;
  } else if (post_rate > 0.0) {
    crossing = p.knee_cycle + (drop - p.fade_rate * p.knee_cycle) / post_rate;
  } else {
    return std::nullopt;
  }
  const int cycle = static_cast<int>(std::floor(crossing)) + 2;  // first integer s strictly past the crossing
  if (cycle > p.n_cycles) return std::nullopt;
  return cycle;
}

BatterySeries synthesize_battery(const SynthParams& p, std::string* warning) {
  if (!(p.c0 > 0.0)) throw ConfigError("synthesize: c0 must be positive");
  if (p.n_cycles < 50) throw ConfigError("synthesize: n_cycles must be >= 50");
  if (p.fade_rate < 0.0 || p.post_knee_factor < 1.0 || p.noise_std < 0.0 || p.knee_cycle < 0.0) {
    throw ConfigError("synthesize: fade_rate, noise_std, knee_cycle must be >= 0 and post_knee_factor >= 1");
  }
  std::mt19937_64 rng(p.seed);
  std::normal_distribution<double> unit(0.0, 1.0);
  BatterySeries series;
  series.battery_id = p.battery_id;
  series.rated_capacity = p.c0;
  series.profile = Profile::synthetic;
  for (int cycle = 1; cycle <= p.n_cycles; ++cycle) {
    const double clean = synthetic_capacity(p, cycle);
    // Draw all noise terms every cycle so streams stay aligned.
    const double eps_cap = unit(rng), eps_v = unit(rng), eps_i = unit(rng), eps_t = unit(rng), eps_cc = unit(rng);
    const double capacity = clean + p.noise_std * eps_cap;
    if (!(capacity > 0.0)) {
      if (warning) {
        *warning = "synthesize: capacity of " + p.battery_id + " reached zero at cycle " + std::to_string(cycle) +
                   "; series truncated to " + std::to_string(cycle - 1) + " cycles";
      }
      break;
    }
    const double ratio = clean / p.c0;
    CycleRecord r;
    r.cycle_index = cycle;
    r.capacity = capacity;
    r.voltage_avg = 3.2 + 0.5 * ratio + 0.002 * eps_v;
    r.current_avg = -2.0 + 0.05 * (1.0 - ratio) + 0.001 * eps_i;
    r.temp_avg = 24.0 + 10.0 * (1.0 - ratio) + 0.1 * eps_t;
    r.cc_charge_time = 3600.0 * ratio * ratio + 10.0 * eps_cc;
    series.records.push_back(r);
  }
  if (series.records.empty()) throw DataError("synthesize: no cycle with positive capacity");
  return compute_soh(std::move(series));
}

std::vector<SynthParams> synthetic_fleet(std::size_t count, std::uint64_t seed, const SynthParams& base) {
  if (count < 1 || count > 99) throw ConfigError("synthesize: battery count must lie in [1, 99]");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> jitter(-1.0, 1.0);
  std::vector<SynthParams> fleet;
  for (std::size_t i = 0; i < count; ++i) {
    SynthParams p = base;
    char id[8];
    std::snprintf(id, sizeof id, "SYN%02zu", i + 1);
    p.battery_id = id;
    p.fade_rate = base.fade_rate * (1.0 + 0.15 * jitter(rng));
    p.knee_cycle = std::max(0.0, base.knee_cycle + 15.0 * jitter(rng));
    p.seed = rng();
    fleet.push_back(p);
  }
  return fleet;
}

Eigen::MatrixXd feature_matrix(const BatterySeries& series, std::span<const Feature> features) {
  Eigen::MatrixXd m(static_cast<Eigen::Index>(series.size()), static_cast<Eigen::Index>(features.size()));
  for (std::size_t i = 0; i < series.size(); ++i) {
    for (std::size_t c = 0; c < features.size(); ++c) {
      const auto v = series.records[i].get(features[c]);
      if (!v) {
        throw DataError("battery " + series.battery_id + " cycle " + std::to_string(series.records[i].cycle_index) +
                        " lacks feature " + to_string(features[c]));
      }
      m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = *v;
    }
  }
  return m;
}

NormalizationState fit_normalizer(std::span<const BatterySeries> train, std::span<const Feature> features,
                                  std::vector<std::string>* warnings) {
  if (train.empty()) throw ContractError("fit_normalizer: empty training set");
  NormalizationState state;
  state.features.assign(features.begin(), features.end());
  state.min.assign(features.size(), std::numeric_limits<double>::infinity());
  state.max.assign(features.size(), -std::numeric_limits<double>::infinity());
  for (const auto& series : train) {
    const auto m = feature_matrix(series, features);
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      if (m.rows() == 0) continue;
      state.min[c] = std::min(state.min[c], m.col(c).minCoeff());
      state.max[c] = std::max(state.max[c], m.col(c).maxCoeff());
    }
  }
  for (std::size_t c = 0; c < features.size(); ++c) {
    if (!std::isfinite(state.min[c])) throw DataError("fit_normalizer: training batteries contain no cycles");
    if (!(state.max[c] > state.min[c])) {
      state.max[c] = state.min[c] + 1.0;
      if (warnings) warnings->push_back("feature " + to_string(features[c]) + " is constant; using unit range");
    }
  }
  return state;
}

Eigen::MatrixXd apply_normalizer(const NormalizationState& state, const Eigen::MatrixXd& raw) {
  if (static_cast<std::size_t>(raw.cols()) != state.features.size()) {
    throw DimensionError("apply_normalizer: " + std::to_string(raw.cols()) + " columns for " +
                         std::to_string(state.features.size()) + " features");
  }
  Eigen::MatrixXd out(raw.rows(), raw.cols());
  for (Eigen::Index c = 0; c < raw.cols(); ++c) {
    out.col(c) = (raw.col(c).array() - state.min[c]) / state.scale(static_cast<std::size_t>(c));
  }
  return out;
}

std::vector<WindowedSample> make_windows(const Eigen::MatrixXd& values, std::size_t target_channel,
                                         std::size_t window_len, const std::string& battery_id,
                                         std::span<const int> cycles) {
  const auto n = static_cast<std::size_t>(values.rows());
  if (window_len < 1) throw ConfigError("window length must be >= 1");
  if (n < window_len + 1) {
    throw DataError("battery " + battery_id + " has " + std::to_string(n) + " cycles; windows of length " +
                    std::to_string(window_len) + " need at least " + std::to_string(window_len + 1));
  }
  if (cycles.size() != n) throw ContractError("make_windows: cycle list does not match rows");
  if (target_channel >= static_cast<std::size_t>(values.cols())) throw ContractError("make_windows: bad target column");
  std::vector<WindowedSample> out;
  out.reserve(n - window_len);
  const auto len = static_cast<Eigen::Index>(window_len);
  for (std::size_t t = window_len; t < n; ++t) {
    WindowedSample s;
    s.features = values.block(static_cast<Eigen::Index>(t) - len, 0, len, values.cols()).transpose();
    s.target = values(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(target_channel));
    s.battery_id = battery_id;
    s.end_cycle = cycles[t - 1];
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<WindowedSample> make_windows(const BatterySeries& series, const NormalizationState& state,
                                         std::size_t window_len) {
  const auto normalized = apply_normalizer(state, feature_matrix(series, state.features));
  const auto cycles = series.cycles();
  return make_windows(normalized, capacity_channel(state.features), window_len, series.battery_id, cycles);
}

std::vector<LoocvSplit> make_loocv_splits(std::size_t battery_count) {
  if (battery_count < 2) throw DataError("LOOCV needs at least 2 batteries, got " + std::to_string(battery_count));
  std::vector<LoocvSplit> splits;
  for (std::size_t test = 0; test < battery_count; ++test) {
    LoocvSplit split;
    split.test = test;
    for (std::size_t i = 0; i < battery_count; ++i) {
      if (i != test) split.train.push_back(i);
    }
    splits.push_back(std::move(split));
  }
  return splits;
}

}  // namespace cdformer
