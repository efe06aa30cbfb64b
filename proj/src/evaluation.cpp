#include "cdformer/evaluation.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <iostream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "cdformer/errors.hpp"

namespace cdformer {

namespace {

void check_pair(std::span<const double> a, std::span<const double> b, const char* what) {
  if (a.empty() || a.size() != b.size()) {
    throw DimensionError(std::string(what) + ": need equal nonzero lengths, got " + std::to_string(a.size()) +
                         " and " + std::to_string(b.size()));
  }
}

nlohmann::ordered_json optional_json(const std::optional<double>& v) {
  return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr);
}
nlohmann::ordered_json optional_json(const std::optional<int>& v) {
  return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr);
}

}  // namespace

double rmse(std::span<const double> y_true, std::span<const double> y_pred) {
  check_pair(y_true, y_pred, "rmse");
  double acc = 0.0;
  for (std::size_t i = 0; i < y_true.size(); ++i) {
    const double e = y_true[i] - y_pred[i];
    acc += e * e;
  }
  return std::sqrt(acc / static_cast<double>(y_true.size()));
}

double mae(std::span<const double> y_true, std::span<const double> y_pred) {
  check_pair(y_true, y_pred, "mae");
  double acc = 0.0;
  for (std::size_t i = 0; i < y_true.size(); ++i) acc += std::abs(y_true[i] - y_pred[i]);
  return acc / static_cast<double>(y_true.size());
}

std::optional<int> find_eol(std::span<const double> capacity, double rated) {
  if (!(rated > 0.0)) throw ContractError("find_eol: rated capacity must be positive");
  const double threshold = kEolFraction * rated;
  for (std::size_t i = 0; i < capacity.size(); ++i) {
    if (capacity[i] < threshold) return static_cast<int>(i) + 1;
  }
  return std::nullopt;
}

std::optional<double> relative_error(std::span<const double> true_caps, std::span<const double> pred_caps,
                                     double rated, int first_cycle) {
  if (true_caps.empty() || pred_caps.empty()) throw DimensionError("relative_error: empty trajectory");
  const auto n_true = find_eol(true_caps, rated);
  const auto n_pred = find_eol(pred_caps, rated);
  if (!n_true || !n_pred) return std::nullopt;
  const double t = *n_true + first_cycle - 1;
  const double p = *n_pred + first_cycle - 1;
  return std::abs(t - p) / t;
}

std::string to_string(RolloutMode mode) { return mode == RolloutMode::one_step ? "one_step" : "recursive"; }

RolloutMode parse_rollout_mode(const std::string& name) {
  if (name == "one_step") return RolloutMode::one_step;
  if (name == "recursive") return RolloutMode::recursive;
  throw ConfigError("unknown rollout mode '" + name + "' (expected one_step or recursive)");
}

Trajectory rollout(const Predictor& predict, const BatterySeries& battery, const NormalizationState& normalizer,
                   std::size_t window_len, RolloutMode mode) {
  const std::size_t n = battery.size();
  if (window_len < 1 || n < window_len + 1) {
    throw DataError("battery " + battery.battery_id + " is too short for one window of length " +
                    std::to_string(window_len));
  }
  Eigen::MatrixXd history = apply_normalizer(normalizer, feature_matrix(battery, normalizer.features));
  const std::size_t cap = capacity_channel(normalizer.features);
  const auto len = static_cast<Eigen::Index>(window_len);
  const auto cap_col = static_cast<Eigen::Index>(cap);

  Trajectory out;
  std::vector<double> normalized_pred;
  if (mode == RolloutMode::one_step) {
    std::vector<Eigen::MatrixXd> windows;
    for (std::size_t t = window_len; t < n; ++t) {
      windows.push_back(history.block(static_cast<Eigen::Index>(t) - len, 0, len, history.cols()).transpose());
    }
    normalized_pred = predict(windows);
  } else {
    for (std::size_t t = window_len; t < n; ++t) {
      std::vector<Eigen::MatrixXd> one{
          history.block(static_cast<Eigen::Index>(t) - len, 0, len, history.cols()).transpose()};
      const double p = predict(one).at(0);
      normalized_pred.push_back(p);
      history(static_cast<Eigen::Index>(t), cap_col) = p;
    }
  }
  if (normalized_pred.size() != n - window_len) throw ContractError("rollout: predictor returned wrong batch size");
  for (std::size_t t = window_len; t < n; ++t) {
    out.cycles.push_back(battery.records[t].cycle_index);
    out.true_capacity.push_back(battery.records[t].capacity);
    out.pred_capacity.push_back(normalizer.denormalize(cap, normalized_pred[t - window_len]));
  }
  return out;
}

EvalReport make_report(const std::string& battery_id, const Trajectory& trajectory, double rated, RolloutMode mode) {
  EvalReport r;
  r.battery_id = battery_id;
  r.rated_capacity = rated;
  r.cycles = trajectory.cycles;
  r.true_capacity = trajectory.true_capacity;
  r.pred_capacity = trajectory.pred_capacity;
  r.mode = mode;
  r.rmse = rmse(r.true_capacity, r.pred_capacity);
  r.mae = mae(r.true_capacity, r.pred_capacity);
  const auto pos_true = find_eol(r.true_capacity, rated);
  const auto pos_pred = find_eol(r.pred_capacity, rated);
  if (pos_true) r.eol_true = r.cycles[static_cast<std::size_t>(*pos_true - 1)];
  if (pos_pred) r.eol_pred = r.cycles[static_cast<std::size_t>(*pos_pred - 1)];
  if (r.eol_true && r.eol_pred) {
    r.re = std::abs(static_cast<double>(*r.eol_true - *r.eol_pred)) / static_cast<double>(*r.eol_true);
  }
  return r;
}

AggregateMetrics aggregate(std::span<const EvalReport> reports) {
  if (reports.empty()) throw ContractError("aggregate: no reports");
  AggregateMetrics agg;
  double re_sum = 0.0;
  for (const auto& r : reports) {
    agg.rmse += r.rmse;
    agg.mae += r.mae;
    if (r.re) {
      re_sum += *r.re;
      ++agg.re_count;
    } else {
      std::cerr << "warning: RE undefined for battery " << r.battery_id
                << " (EOL threshold not crossed); excluded from the aggregate\n";
    }
  }
  agg.rmse /= static_cast<double>(reports.size());
  agg.mae /= static_cast<double>(reports.size());
  if (agg.re_count > 0) agg.re = re_sum / static_cast<double>(agg.re_count);
  return agg;
}

std::string report_json(std::span<const EvalReport> reports, const ReportMeta& meta) {
  const auto agg = aggregate(reports);
  nlohmann::ordered_json doc;
  doc["dataset"] = meta.dataset;
  doc["model"] = meta.model;
  doc["config_hash"] = meta.config_hash;
  doc["mode"] = to_string(reports.front().mode);
  auto per = nlohmann::ordered_json::array();
  for (const auto& r : reports) {
    nlohmann::ordered_json e;
    e["id"] = r.battery_id;
    e["rmse"] = r.rmse;
    e["mae"] = r.mae;
    e["re"] = optional_json(r.re);
    e["eol_true"] = optional_json(r.eol_true);
    e["eol_pred"] = optional_json(r.eol_pred);
    e["rated_ah"] = r.rated_capacity;
    per.push_back(std::move(e));
  }
  doc["per_battery"] = std::move(per);
  doc["aggregate"] = {{"rmse", agg.rmse}, {"mae", agg.mae}, {"re", optional_json(agg.re)}};
  return doc.dump(2) + "\n";
}

void write_trajectory_csv(const EvalReport& report, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << "cycle,true_ah,pred_ah\n";
  for (std::size_t i = 0; i < report.cycles.size(); ++i) {
    out << report.cycles[i] << ',' << format_number(report.true_capacity[i]) << ','
        << format_number(report.pred_capacity[i]) << '\n';
  }
  if (!out) throw IoError("write failure on " + path.string());
}

Trajectory read_trajectory_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  if (line != "cycle,true_ah,pred_ah") throw DataError(path.string() + ": unexpected trajectory header");
  Trajectory t;
  int row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string a, b, c;
    if (!std::getline(ss, a, ',') || !std::getline(ss, b, ',') || !std::getline(ss, c)) {
      throw DataError(path.string() + ": malformed row " + std::to_string(row));
    }
    int cycle = 0;
    double tv = 0.0, pv = 0.0;
    const bool ok = std::from_chars(a.data(), a.data() + a.size(), cycle).ec == std::errc() &&
                    std::from_chars(b.data(), b.data() + b.size(), tv).ec == std::errc() &&
                    std::from_chars(c.data(), c.data() + c.size(), pv).ec == std::errc();
    if (!ok) throw DataError(path.string() + ": malformed row " + std::to_string(row));
    t.cycles.push_back(cycle);
    t.true_capacity.push_back(tv);
    t.pred_capacity.push_back(pv);
  }
  return t;
}

std::string emit_report(std::span<const EvalReport> reports, const ReportMeta& meta,
                        const std::filesystem::path& dir) {
  if (reports.empty()) throw ContractError("emit_report: no reports");
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  const auto text = report_json(reports, meta);
  std::ofstream out(dir / "metrics.json", std::ios::binary);
  if (!out) throw IoError("cannot write " + (dir / "metrics.json").string());
  out << text;
  if (!out) throw IoError("write failure on " + (dir / "metrics.json").string());
  for (const auto& r : reports) write_trajectory_csv(r, dir / ("trajectory_" + r.battery_id + ".csv"));
  return text;
}

}  // namespace cdformer
