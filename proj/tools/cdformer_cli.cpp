// Command-line front end: ingest, synthesize, augment, train, eval, predict, report.

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "cdformer/checkpoint.hpp"
#include "cdformer/config.hpp"
#include "cdformer/errors.hpp"
#include "cdformer/evaluation.hpp"
#include "cdformer/training.hpp"

namespace fs = std::filesystem;
using namespace cdformer;

namespace {

constexpr const char* kToolVersion = "0.1.0";

constexpr const char* kExitCodes =
    "Exit codes: 0 ok, 1 internal, 2 usage, 3 config, 4 data, 5 io, 6 numeric, 7 dimension, 8 contract.\n"
    "Default output root: $CDFORMER_OUT_ROOT, else ./runs.\n";

fs::path output_root() {
  const char* env = std::getenv("CDFORMER_OUT_ROOT");
  return env && *env ? fs::path(env) : fs::path("runs");
}

std::string utc_now() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failure on " + path.string());
}

Json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return Json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

void require_exists(const fs::path& path, const char* what) {
  if (!fs::exists(path)) throw IoError(std::string(what) + " not found: " + path.string());
}

std::vector<BatterySeries> load_batteries(const fs::path& path, Profile profile, std::optional<double> rated) {
  require_exists(path, "data");
  auto batteries = fs::is_directory(path) ? ingest_directory(path, profile, rated) : ingest_csv_all(path, profile, rated);
  if (batteries.empty()) throw DataError("no battery data under " + path.string());
  return batteries;
}

struct AugmentFlags {
  std::optional<double> alpha, rho, sigma, prob;
  std::optional<std::uint64_t> seed;
  bool no_warp = false, no_resample = false, no_noise = false;

  bool any() const { return alpha || rho || sigma || prob || seed || no_warp || no_resample || no_noise; }

  AugmentConfig apply(AugmentConfig c) const {
    if (alpha) c.alpha = *alpha;
    if (rho) c.rho = *rho;
    if (sigma) c.sigma = *sigma;
    if (prob) c.per_technique_prob = *prob;
    if (seed) c.seed = *seed;
    if (no_warp) c.warp = false;
    if (no_resample) c.resample = false;
    if (no_noise) c.noise = false;
    try {
      c.validate();
    } catch (const ConfigError& e) {
      throw ConfigError(std::string("/augment/") + e.what());
    }
    return c;
  }
};

void add_augment_flags(CLI::App* cmd, AugmentFlags& f) {
  cmd->add_option("--alpha", f.alpha, "time-warp strength (fraction of one step)");
  cmd->add_option("--rho", f.rho, "fraction of time points kept by resampling, in (0, 1]");
  cmd->add_option("--sigma", f.sigma, "Gaussian noise std in normalised units");
  cmd->add_option("--prob", f.prob, "per-technique probability");
  cmd->add_option("--augment-seed", f.seed, "augmentation RNG seed");
  cmd->add_flag("--no-warp", f.no_warp, "disable time warping");
  cmd->add_flag("--no-resample", f.no_resample, "disable time resampling");
  cmd->add_flag("--no-noise", f.no_noise, "disable Gaussian noise");
}

std::string history_csv(const std::vector<EpochRecord>& history) {
  std::ostringstream os;
  os << "epoch,train_loss,val_loss\n";
  for (const auto& r : history) os << r.epoch << ',' << format_number(r.train_loss) << ',' << format_number(r.val_loss) << '\n';
  return os.str();
}

Json versions() {
  std::ostringstream eigen, json;
  eigen << EIGEN_WORLD_VERSION << '.' << EIGEN_MAJOR_VERSION << '.' << EIGEN_MINOR_VERSION;
  json << NLOHMANN_JSON_VERSION_MAJOR << '.' << NLOHMANN_JSON_VERSION_MINOR << '.' << NLOHMANN_JSON_VERSION_PATCH;
  return Json{{"cdformer", kToolVersion}, {"eigen", eigen.str()}, {"nlohmann_json", json.str()}, {"compiler", __VERSION__}};
}

/// Profile of the data a checkpoint was trained on, from its feature list.
Profile profile_for(const NormalizationState& norm) {
  return feature_set(Profile::calce) == norm.features ? Profile::calce : Profile::nasa;
}

// ---------------------------------------------------------------- ingest

struct IngestArgs {
  std::string data, out, profile = "nasa";
  std::optional<double> rated;
};

int cmd_ingest(const IngestArgs& a) {
  const auto batteries = load_batteries(a.data, parse_profile(a.profile), a.rated);
  for (const auto& b : batteries) {
    const auto eol = find_eol(b.capacities(), b.rated_capacity);
    std::cout << b.battery_id << ": " << b.size() << " cycles, " << format_number(b.records.front().capacity) << " -> "
              << format_number(b.records.back().capacity) << " Ah, eol "
              << (eol ? std::to_string(b.records[static_cast<std::size_t>(*eol - 1)].cycle_index) : "none") << '\n';
  }
  if (!a.out.empty()) write_series_csv(batteries, a.out);
  return 0;
}

// ---------------------------------------------------------------- synthesize

struct SynthArgs {
  std::string out, config;
  int batteries = 4;
  std::uint64_t seed = 1;
  std::optional<int> n_cycles;
  std::optional<double> noise_std;
};

int cmd_synthesize(const SynthArgs& a) {
  SynthParams base;
  if (!a.config.empty()) base = parse_synth_params(read_json(a.config));
  if (a.n_cycles) base.n_cycles = *a.n_cycles;
  if (a.noise_std) base.noise_std = *a.noise_std;
  if (a.batteries < 1) throw ConfigError("--batteries must be >= 1");
  const auto fleet = synthetic_fleet(static_cast<std::size_t>(a.batteries), a.seed, base);
  std::vector<BatterySeries> series;
  for (const auto& p : fleet) {
    std::string warning;
    series.push_back(synthesize_battery(p, &warning));
    if (!warning.empty()) std::cerr << "warning: " << warning << '\n';
  }
  fs::create_directories(a.out);
  Json params = Json::array();
  for (std::size_t i = 0; i < series.size(); ++i) {
    write_series_csv(std::span(&series[i], 1), fs::path(a.out) / (series[i].battery_id + ".csv"));
    auto j = to_json(fleet[i]);
    const auto eol = synthetic_eol_cycle(fleet[i]);
    j["eol_cycle"] = eol ? Json(*eol) : Json(nullptr);
    params.push_back(std::move(j));
  }
  write_text(fs::path(a.out) / "synthesize.json",
             Json{{"seed", a.seed}, {"batteries", params}}.dump(2) + "\n");
  std::cout << "wrote " << series.size() << " batteries to " << a.out << '\n';
  return 0;
}

// ---------------------------------------------------------------- augment

struct AugmentArgs {
  std::string data, out, profile = "nasa", config;
  std::uint64_t counter = 0;
  AugmentFlags flags;
};

int cmd_augment(const AugmentArgs& a) {
  AugmentConfig cfg;
  if (!a.config.empty()) cfg = parse_augment_config(read_json(a.config));
  cfg = a.flags.apply(cfg);
  auto batteries = load_batteries(a.data, parse_profile(a.profile), std::nullopt);
  const auto features = feature_set(parse_profile(a.profile));
  Json provenance = Json::array();
  std::uint64_t counter = a.counter;
  for (auto& b : batteries) {
    // Augment in per-battery normalised units so sigma means the same thing for
    // every feature, then map the change back onto the raw values.
    std::vector<BatterySeries> one{b};
    const auto norm = fit_normalizer(one, features);
    const Eigen::MatrixXd raw = feature_matrix(b, features);
    const Eigen::MatrixXd scaled = apply_normalizer(norm, raw);
    const auto result = apply_composite(scaled, cfg, counter);
    Json applied = Json::array();
    for (const auto& t : result.provenance) applied.push_back(Json{{"name", t.name}, {"parameter", t.parameter}});
    provenance.push_back(Json{{"battery_id", b.battery_id}, {"counter", counter}, {"applied", applied}});
    ++counter;
    for (Eigen::Index c = 0; c < raw.cols(); ++c) {
      const double scale = norm.scale(static_cast<std::size_t>(c));
      for (Eigen::Index t = 0; t < raw.rows(); ++t) {
        const double delta = result.values(t, c) - scaled(t, c);
        if (delta != 0.0) b.records[static_cast<std::size_t>(t)].set(features[static_cast<std::size_t>(c)], raw(t, c) + delta * scale);
      }
    }
  }
  write_series_csv(batteries, a.out);
  write_text(a.out + ".provenance.json",
             Json{{"source", a.data}, {"profile", a.profile}, {"config", to_json(cfg)}, {"batteries", provenance}}.dump(2) +
                 "\n");
  return 0;
}

// ---------------------------------------------------------------- train

struct TrainArgs {
  std::string config, data, out, profile = "nasa", data_profile, mode = "one_step", precision = "f64", variant;
  std::optional<std::uint64_t> seed;
  std::optional<int> epochs;
  std::optional<double> rated;
  int parallel = 1;
  bool augment = false;
  AugmentFlags flags;
};

Profile default_data_profile(TrainProfile p) {
  switch (p) {
    case TrainProfile::nasa: return Profile::nasa;
    case TrainProfile::calce: return Profile::calce;
    case TrainProfile::custom: return Profile::synthetic;
  }
  return Profile::synthetic;
}

template <typename Scalar>
LoocvResult run(const std::vector<BatterySeries>& batteries, const RunConfig& cfg, const LoocvOptions& options) {
  return run_loocv<Scalar>(batteries, cfg.model, cfg.train, options);
}

int cmd_train(const TrainArgs& a, const std::vector<std::string>& argv) {
  // Everything is validated before the output directory is touched.
  const auto profile = parse_train_profile(a.profile);
  const Json doc = a.config.empty() ? Json::object() : read_json(a.config);
  RunConfig cfg = parse_run_config(doc, profile);
  const Profile data_profile = a.data_profile.empty() ? default_data_profile(profile) : parse_profile(a.data_profile);
  const int channels = static_cast<int>(feature_set(data_profile).size());
  const bool explicit_channels = doc.contains("model") && doc["model"].is_object() && doc["model"].contains("input_channels");
  if (explicit_channels && cfg.model.input_channels != channels) {
    throw ConfigError("/model/input_channels: " + std::to_string(cfg.model.input_channels) + " but profile '" +
                      to_string(data_profile) + "' has " + std::to_string(channels) + " features");
  }
  cfg.model.input_channels = channels;
  if (!a.variant.empty()) cfg.model.variant = parse_variant(a.variant);
  if (a.seed) {
    cfg.train.seed = *a.seed;
    cfg.model.init_seed = *a.seed;
  }
  if (a.epochs) cfg.train.max_epochs = *a.epochs;
  if (a.augment || a.flags.any()) cfg.train.augment = a.flags.apply(cfg.train.augment.value_or(AugmentConfig{}));
  try {
    cfg.model.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("/model/") + e.what());
  }
  try {
    cfg.train.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("/train/") + e.what());
  }
  const auto mode = parse_rollout_mode(a.mode);
  if (a.precision != "f64" && a.precision != "f32") throw ConfigError("--precision: expected f64 or f32");
  if (a.parallel < 1) throw ConfigError("--parallel: must be >= 1");
  if (a.data.empty()) throw ConfigError("--data is required");
  const auto batteries = load_batteries(a.data, data_profile, a.rated);
  if (batteries.size() < 2) throw DataError("LOOCV needs at least 2 batteries, got " + std::to_string(batteries.size()));

  const Json resolved = to_json(cfg);
  const Json identity{{"config", resolved}, {"data_profile", to_string(data_profile)}, {"mode", a.mode},
                      {"precision", a.precision}};
  const std::string hash = config_hash(identity);
  const fs::path out = a.out.empty() ? output_root() / hash : fs::path(a.out);
  const std::string started = utc_now();

  LoocvOptions options;
  options.mode = mode;
  options.parallel = a.parallel;
  const auto result = a.precision == "f32" ? run<float>(batteries, cfg, options) : run<double>(batteries, cfg, options);

  fs::create_directories(out);
  write_text(out / "config.json", resolved.dump(2) + "\n");
  Json splits = Json::array();
  ExitCode status = ExitCode::ok;
  for (const auto& s : result.splits) {
    Json entry{{"battery_id", s.battery_id}, {"best_epoch", s.best_epoch},
               {"epochs_run", static_cast<int>(s.history.size())}, {"diverged", s.diverged}};
    if (!s.error.empty()) {
      entry["error"] = s.error;
      std::cerr << "cdformer: split " << s.battery_id << " failed: " << s.error << '\n';
      if (status == ExitCode::ok) status = s.error_code;
    } else {
      write_text(out / ("history_" + s.battery_id + ".csv"), history_csv(s.history));
      save_checkpoint(*s.checkpoint, out / ("checkpoint_" + s.battery_id + ".json"));
    }
    splits.push_back(std::move(entry));
  }
  if (!result.reports.empty()) {
    emit_report(result.reports, {to_string(data_profile), to_string(cfg.model.variant), hash}, out);
  }
  Json data = Json::array();
  for (const auto& b : batteries) {
    data.push_back(Json{{"battery_id", b.battery_id}, {"cycles", static_cast<int>(b.size())},
                        {"rated_capacity", b.rated_capacity}});
  }
  Json command = Json::array();
  for (const auto& arg : argv) command.push_back(arg);
  const Json manifest{{"config_hash", hash},
                      {"seed", cfg.train.seed},
                      {"profile", a.profile},
                      {"data_profile", to_string(data_profile)},
                      {"mode", a.mode},
                      {"precision", a.precision},
                      {"data", a.data},
                      {"batteries", data},
                      {"splits", splits},
                      {"versions", versions()},
                      {"command", command},
                      {"started_at", started},
                      {"finished_at", utc_now()}};
  write_text(out / "manifest.json", manifest.dump(2) + "\n");
  if (result.aggregate) {
    std::cout << "aggregate rmse " << format_number(result.aggregate->rmse) << " mae "
              << format_number(result.aggregate->mae) << " re "
              << (result.aggregate->re ? format_number(*result.aggregate->re) : "undefined") << '\n';
  }
  std::cout << "wrote " << out.string() << '\n';
  return static_cast<int>(status);
}

// ---------------------------------------------------------------- eval / predict

struct EvalArgs {
  std::string checkpoint, battery, profile, mode = "one_step", out, id;
  std::optional<double> rated;
};

struct Evaluated {
  Checkpoint checkpoint;
  Profile profile = Profile::nasa;
  std::vector<EvalReport> reports;
};

template <typename Scalar>
std::vector<EvalReport> evaluate(const Checkpoint& ckpt, const std::vector<BatterySeries>& batteries, RolloutMode mode) {
  auto model = load_model<Scalar>(ckpt);
  std::vector<EvalReport> reports;
  for (const auto& b : batteries) {
    const auto traj = rollout(make_predictor(model), b, *ckpt.normalizer,
                              static_cast<std::size_t>(ckpt.config.window_len), mode);
    reports.push_back(make_report(b.battery_id, traj, b.rated_capacity, mode));
  }
  return reports;
}

Evaluated run_eval(const EvalArgs& a) {
  require_exists(a.checkpoint, "checkpoint");
  require_exists(a.battery, "battery data");
  const auto mode = parse_rollout_mode(a.mode);
  Evaluated e;
  e.checkpoint = load_checkpoint(a.checkpoint);
  if (!e.checkpoint.normalizer) throw DataError(a.checkpoint + ": checkpoint carries no normalizer");
  e.profile = a.profile.empty() ? profile_for(*e.checkpoint.normalizer) : parse_profile(a.profile);
  if (feature_set(e.profile) != e.checkpoint.normalizer->features) {
    throw ConfigError("--profile " + to_string(e.profile) + " does not match the checkpoint feature set");
  }
  auto batteries = load_batteries(a.battery, e.profile, a.rated);
  if (!a.id.empty()) {
    std::erase_if(batteries, [&](const BatterySeries& b) { return b.battery_id != a.id; });
    if (batteries.empty()) throw DataError("battery '" + a.id + "' not found in " + a.battery);
  }
  e.reports = e.checkpoint.precision == "f32" ? evaluate<float>(e.checkpoint, batteries, mode)
                                              : evaluate<double>(e.checkpoint, batteries, mode);
  return e;
}

int cmd_eval(const EvalArgs& a) {
  const auto e = run_eval(a);
  const ReportMeta meta{to_string(e.profile), to_string(e.checkpoint.config.variant),
                        config_hash(to_json(e.checkpoint.config))};
  if (!a.out.empty()) {
    fs::create_directories(a.out);
    std::cout << emit_report(e.reports, meta, a.out);
  } else {
    std::cout << report_json(e.reports, meta);
  }
  return 0;
}

int cmd_predict(const EvalArgs& a) {
  const auto e = run_eval(a);
  if (e.reports.size() != 1 && a.out.empty()) {
    throw ConfigError("--battery holds " + std::to_string(e.reports.size()) + " batteries; pass --id or --out DIR");
  }
  if (a.out.empty()) {
    const auto& r = e.reports.front();
    std::cout << "cycle,true_ah,pred_ah\n";
    for (std::size_t i = 0; i < r.cycles.size(); ++i) {
      std::cout << r.cycles[i] << ',' << format_number(r.true_capacity[i]) << ',' << format_number(r.pred_capacity[i]) << '\n';
    }
    return 0;
  }
  fs::create_directories(a.out);
  for (const auto& r : e.reports) write_trajectory_csv(r, fs::path(a.out) / ("trajectory_" + r.battery_id + ".csv"));
  return 0;
}

// ---------------------------------------------------------------- report

struct ReportArgs {
  std::string run, out;
};

int cmd_report(const ReportArgs& a) {
  const fs::path dir(a.run);
  require_exists(dir / "manifest.json", "run manifest");
  const Json manifest = read_json(dir / "manifest.json");
  const Json config = read_json(dir / "config.json");
  std::vector<EvalReport> reports;
  try {
    const auto mode = parse_rollout_mode(manifest.at("mode").get<std::string>());
    for (const auto& b : manifest.at("batteries")) {
      const auto id = b.at("battery_id").get<std::string>();
      const auto path = dir / ("trajectory_" + id + ".csv");
      if (!fs::exists(path)) continue;  // failed split
      reports.push_back(make_report(id, read_trajectory_csv(path), b.at("rated_capacity").get<double>(), mode));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError((dir / "manifest.json").string() + ": " + e.what());
  }
  if (reports.empty()) throw DataError("no trajectories under " + dir.string());
  const ReportMeta meta{manifest.value("data_profile", std::string{}),
                        config.at("model").value("variant", std::string{}),
                        manifest.value("config_hash", std::string{})};
  const auto text = report_json(reports, meta);
  if (!a.out.empty()) write_text(a.out, text);
  std::cout << text;
  return 0;
}

std::string one_line(std::string s) {
  for (std::size_t pos; (pos = s.find("\n  ")) != std::string::npos;) s.replace(pos, 3, "; ");
  for (auto& ch : s) {
    if (ch == '\n') ch = ' ';
  }
  return s;
}

void report_error(bool as_json, const char* kind, int code, const std::string& message) {
  if (as_json) {
    std::cerr << Json{{"error", Json{{"kind", kind}, {"exit_code", code}, {"message", message}}}}.dump() << '\n';
  } else {
    std::cerr << "cdformer: " << kind << " error: " << one_line(message) << '\n';
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"CNN-DRSN-Transformer battery capacity forecasting"};
  app.footer(std::string(kExitCodes) + "\n" + config_reference());
  app.require_subcommand(1);
  bool json_errors = false;
  app.add_flag("--json-errors", json_errors, "print errors as one JSON object on stderr");

  const std::vector<std::string> data_profiles{"nasa", "calce", "synthetic"};

  IngestArgs ingest;
  auto* c_ingest = app.add_subcommand("ingest", "validate canonical cycle CSVs and write a combined copy");
  c_ingest->add_option("--data", ingest.data, "CSV file or directory of CSVs")->required();
  c_ingest->add_option("--profile", ingest.profile, "feature set")->check(CLI::IsMember(data_profiles));
  c_ingest->add_option("--rated", ingest.rated, "rated capacity in Ah (default by profile)");
  c_ingest->add_option("--out", ingest.out, "combined canonical CSV to write");

  SynthArgs synth;
  auto* c_synth = app.add_subcommand("synthesize", "generate knee-shaped synthetic batteries");
  c_synth->add_option("--batteries", synth.batteries, "number of batteries")->capture_default_str();
  c_synth->add_option("--seed", synth.seed, "fleet seed")->capture_default_str();
  c_synth->add_option("--out", synth.out, "output directory")->required();
  c_synth->add_option("--config", synth.config, "JSON with base synthetic parameters");
  c_synth->add_option("--n-cycles", synth.n_cycles, "cycles per battery");
  c_synth->add_option("--noise-std", synth.noise_std, "capacity noise std in Ah");

  AugmentArgs aug;
  auto* c_aug = app.add_subcommand("augment", "apply the composite augmentation to battery CSVs");
  c_aug->add_option("--data", aug.data, "input CSV file or directory")->required();
  c_aug->add_option("--out", aug.out, "output CSV")->required();
  c_aug->add_option("--profile", aug.profile, "feature set to augment")->check(CLI::IsMember(data_profiles));
  c_aug->add_option("--config", aug.config, "JSON augmentation config");
  c_aug->add_option("--counter", aug.counter, "first augmentation stream index")->capture_default_str();
  add_augment_flags(c_aug, aug.flags);

  TrainArgs train;
  auto* c_train = app.add_subcommand("train", "LOOCV training and evaluation");
  c_train->footer(config_reference());
  c_train->add_option("--config", train.config, "JSON run config {model, train, augment}");
  c_train->add_option("--data", train.data, "directory of per-battery CSVs or one combined CSV")->required();
  c_train->add_option("--out", train.out, "output directory (default $CDFORMER_OUT_ROOT/<config hash>)");
  c_train->add_option("--profile", train.profile, "hyperparameter profile")
      ->check(CLI::IsMember({"nasa", "calce", "custom"}))
      ->capture_default_str();
  c_train->add_option("--data-profile", train.data_profile, "feature set (default follows --profile)")
      ->check(CLI::IsMember(data_profiles));
  c_train->add_option("--seed", train.seed, "overrides train.seed and model.init_seed");
  c_train->add_option("--epochs", train.epochs, "overrides train.max_epochs");
  c_train->add_option("--variant", train.variant, "baseline_fc, cnn_fc, cnn_transformer or cdformer");
  c_train->add_option("--mode", train.mode, "rollout mode")
      ->check(CLI::IsMember({"one_step", "recursive"}))
      ->capture_default_str();
  c_train->add_option("--precision", train.precision, "f64 or f32")->capture_default_str();
  c_train->add_option("--parallel", train.parallel, "splits trained concurrently")->capture_default_str();
  c_train->add_option("--rated", train.rated, "rated capacity in Ah (default by profile)");
  c_train->add_flag("--augment", train.augment, "enable augmentation with default parameters");
  add_augment_flags(c_train, train.flags);

  EvalArgs eval;
  auto* c_eval = app.add_subcommand("eval", "evaluate a checkpoint on battery data");
  EvalArgs predict;
  auto* c_predict = app.add_subcommand("predict", "write the predicted capacity trajectory");
  for (auto [cmd, args] : {std::pair{c_eval, &eval}, std::pair{c_predict, &predict}}) {
    cmd->add_option("--checkpoint", args->checkpoint, "checkpoint JSON")->required();
    cmd->add_option("--battery", args->battery, "battery CSV")->required();
    cmd->add_option("--id", args->id, "battery id inside a combined CSV");
    cmd->add_option("--profile", args->profile, "feature set (default from the checkpoint)")
        ->check(CLI::IsMember(data_profiles));
    cmd->add_option("--mode", args->mode, "rollout mode")
        ->check(CLI::IsMember({"one_step", "recursive"}))
        ->capture_default_str();
    cmd->add_option("--rated", args->rated, "rated capacity in Ah");
    cmd->add_option("--out", args->out, "output directory");
  }

  ReportArgs report;
  auto* c_report = app.add_subcommand("report", "recompute the metrics JSON of a training run");
  c_report->add_option("--run", report.run, "training output directory")->required();
  c_report->add_option("--out", report.out, "file for the report JSON");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    report_error(json_errors, "usage", static_cast<int>(ExitCode::usage), e.what());
    return static_cast<int>(ExitCode::usage);
  }

  try {
    if (c_ingest->parsed()) return cmd_ingest(ingest);
    if (c_synth->parsed()) return cmd_synthesize(synth);
    if (c_aug->parsed()) return cmd_augment(aug);
    if (c_train->parsed()) return cmd_train(train, std::vector<std::string>(argv, argv + argc));
    if (c_eval->parsed()) return cmd_eval(eval);
    if (c_predict->parsed()) return cmd_predict(predict);
    if (c_report->parsed()) return cmd_report(report);
  } catch (const Error& e) {
    report_error(json_errors, e.kind(), static_cast<int>(e.exit_code()), e.what());
    return static_cast<int>(e.exit_code());
  } catch (const fs::filesystem_error& e) {
    report_error(json_errors, "io", static_cast<int>(ExitCode::io), e.what());
    return static_cast<int>(ExitCode::io);
  } catch (const std::exception& e) {
    report_error(json_errors, "internal", static_cast<int>(ExitCode::internal), e.what());
    return static_cast<int>(ExitCode::internal);
  }
  return static_cast<int>(ExitCode::usage);
}
