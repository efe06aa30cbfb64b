// Acceptance suite: one PASS/FAIL/SKIP line per criterion.
//   acceptance [--cli PATH] [ids...]
// Exit status is 0 when no selected criterion fails.

#include "CLI11.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cdformer/augmentation.hpp"
#include "cdformer/evaluation.hpp"
#include "cdformer/training.hpp"
#include "../support/gradcheck.hpp"

using namespace cdformer;
using cdformer::testing::gradcheck;
using cdformer::testing::project;
using cdformer::testing::random_tensor;
namespace fs = std::filesystem;
using T = Tensor<double>;

namespace {

enum class Status { pass, fail, skip };

struct Outcome {
  Status status = Status::pass;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string fmt(double v, int precision = 3) {
  std::ostringstream os;
  os.precision(precision);
  os << v;
  return os.str();
}

/// Collects failures; the first few are kept for the report line.
struct Checker {
  std::size_t failed = 0;
  std::vector<std::string> failures;

  void expect(bool ok, const std::string& what) {
    if (ok) return;
    ++failed;
    if (failures.size() < 5) failures.push_back(what);
  }

  Outcome outcome(const std::string& summary) const {
    if (failed == 0) return {Status::pass, summary};
    std::string text = std::to_string(failed) + " check(s) failed";
    for (const auto& f : failures) text += "; " + f;
    return {Status::fail, text};
  }
};

// Criterion 1 ----------------------------------------------------------------

constexpr double kGradTol = 1e-4;

Outcome gradient_checks() {
  const auto start = Clock::now();
  Checker c;
  double worst = 0.0;
  auto check = [&](const std::string& layer, std::uint64_t seed, const testing::GradCheck& r) {
    worst = std::max(worst, r.max_rel);
    c.expect(r.max_rel < kGradTol, layer + " seed " + std::to_string(seed) + ": " + fmt(r.max_rel) + " at " + r.worst);
  };
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    Rng rng(seed);
    std::mt19937_64 data(seed + 100);

    Conv1dLayer<double> conv(3, 4, 3, 1, true, rng);
    auto s = random_tensor({2, 3, 7}, data);
    check("conv1d", seed,
          gradcheck([&] { return project(conv(s), seed); }, {{"x", s}, {"w", conv.weight}, {"b", conv.bias}}));

    BatchNorm1d<double> bn(4);
    auto f = random_tensor({3, 4, 5}, data);
    check("batchnorm", seed,
          gradcheck([&] { return project(bn(f, Mode::train), seed); }, {{"x", f}, {"gamma", bn.gamma}, {"beta", bn.beta}}));

    LayerNorm<double> ln(6);
    auto x2 = random_tensor({5, 6}, data);
    check("layernorm", seed,
          gradcheck([&] { return project(ln(x2), seed); }, {{"x", x2}, {"gamma", ln.gamma}, {"beta", ln.beta}}));

    auto feat = random_tensor({2, 6, 5}, data);
    auto lambda = random_tensor({2, 6}, data, 0.05, 1.0);
    check("soft_threshold", seed,
          gradcheck([&] { return project(soft_threshold(feat, lambda), seed); }, {{"x", feat}, {"lambda", lambda}}));

    ThresholdGenerator<double> gen(6, 2, rng);
    check("threshold_generator", seed,
          gradcheck([&] { return project(soft_threshold(feat, generate_thresholds(feat, gen)), seed); },
                    {{"x", feat}, {"fc1.w", gen.fc1.weight}, {"fc1.b", gen.fc1.bias}, {"fc2.w", gen.fc2.weight},
                     {"fc2.b", gen.fc2.bias}}));

    DrsnBlock<double> block(3, 4, 3, 2, rng);
    ParamList<double> block_params;
    BufferList<double> block_buffers;
    block.collect(block_params, block_buffers, "drsn");
    std::vector<std::pair<std::string, T>> block_leaves{{"x", s}};
    for (const auto& p : block_params) block_leaves.emplace_back(p.name, p.tensor);
    check("drsn_block", seed, gradcheck([&] { return project(block.forward(s, Mode::train), seed); }, block_leaves));

    AttentionHeadSet<double> heads(6, 2, rng);
    auto seq = random_tensor({2, 4, 6}, data);
    std::vector<std::pair<std::string, T>> attn_leaves{{"x", seq}, {"output", heads.output}};
    for (Index h = 0; h < 2; ++h) {
      attn_leaves.emplace_back("q" + std::to_string(h), heads.query[h]);
      attn_leaves.emplace_back("k" + std::to_string(h), heads.key[h]);
      attn_leaves.emplace_back("v" + std::to_string(h), heads.value[h]);
    }
    check("attention", seed, gradcheck([&] { return project(multi_head_attention(seq, heads), seed); }, attn_leaves));

    DenseLayer<double> d1(6, 10, rng), d2(10, 6, rng);
    check("ffn", seed,
          gradcheck([&] { return project(position_wise_ffn(seq, d1, d2), seed); },
                    {{"x", seq}, {"w1", d1.weight}, {"b1", d1.bias}, {"w2", d2.weight}, {"b2", d2.bias}}));

    DenseLayer<double> h1(6, 5, rng), h2(5, 1, rng);
    auto z = random_tensor({4, 6}, data);
    check("regression_head", seed,
          gradcheck([&] { return project(h2(relu(h1(z))), seed); },
                    {{"z", z}, {"w1", h1.weight}, {"b1", h1.bias}, {"w2", h2.weight}, {"b2", h2.bias}}));
  }
  const double elapsed = seconds_since(start);
  c.expect(elapsed < 60.0, "runtime " + fmt(elapsed) + " s >= 60 s");
  return c.outcome("9 layers x 5 seeds, max rel err " + fmt(worst) + ", " + fmt(elapsed) + " s");
}

// Criterion 2 ----------------------------------------------------------------

double rmse_oracle(const std::vector<double>& a, const std::vector<double>& b) {
  long double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (static_cast<long double>(a[i]) - b[i]) * (static_cast<long double>(a[i]) - b[i]);
  return static_cast<double>(std::sqrt(s / a.size()));
}

double mae_oracle(const std::vector<double>& a, const std::vector<double>& b) {
  long double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::fabs(static_cast<long double>(a[i]) - b[i]);
  return static_cast<double>(s / a.size());
}

int eol_scan(const std::vector<double>& caps, double rated) {
  for (std::size_t i = 0; i < caps.size(); ++i) {
    if (caps[i] < 0.7 * rated) return static_cast<int>(i) + 1;
  }
  return -1;
}

Outcome metric_oracles() {
  Checker c;
  std::mt19937_64 rng(2024);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int pair = 0; pair < 50; ++pair) {
    const std::size_t n = 1 + rng() % 400;
    std::vector<double> a(n), b(n);
    for (std::size_t i = 0; i < n; ++i) {
      a[i] = 2.0 - 1.2 * unit(rng);
      b[i] = a[i] + 0.2 * (unit(rng) - 0.5);
    }
    c.expect(std::abs(rmse(a, b) - rmse_oracle(a, b)) <= 1e-12, "rmse pair " + std::to_string(pair));
    c.expect(std::abs(mae(a, b) - mae_oracle(a, b)) <= 1e-12, "mae pair " + std::to_string(pair));
    const int nt = eol_scan(a, 2.0), np = eol_scan(b, 2.0);
    const auto re = relative_error(a, b, 2.0);
    if (nt < 0 || np < 0) {
      c.expect(!re.has_value(), "relative_error pair " + std::to_string(pair) + " should be undefined");
    } else {
      const double expected = std::abs(static_cast<double>(nt - np)) / nt;
      c.expect(re.has_value() && std::abs(*re - expected) <= 1e-12, "relative_error pair " + std::to_string(pair));
    }
  }
  std::size_t crossing = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 1 + rng() % 300;
    const double rated = 1.0 + unit(rng);
    std::vector<double> caps(n);
    double level = rated * (0.95 + 0.1 * unit(rng));
    for (auto& v : caps) {
      level -= 0.004 * rated * unit(rng);
      v = level + 0.02 * rated * (unit(rng) - 0.5);
    }
    const int expected = eol_scan(caps, rated);
    const auto got = find_eol(caps, rated);
    if (expected > 0) ++crossing;
    c.expect(expected < 0 ? !got.has_value() : got == expected, "find_eol trial " + std::to_string(trial));
  }
  return c.outcome("50 metric pairs, 1000 eol trajectories (" + std::to_string(crossing) + " crossing)");
}

// Criterion 3 ----------------------------------------------------------------

Eigen::MatrixXd ramp(Eigen::Index length, Eigen::Index channels, double slope, double offset) {
  Eigen::MatrixXd x(length, channels);
  for (Eigen::Index t = 0; t < length; ++t) {
    for (Eigen::Index ch = 0; ch < channels; ++ch) {
      x(t, ch) = (slope + 0.5 * static_cast<double>(ch)) * static_cast<double>(t + 1) + offset;
    }
  }
  return x;
}

Outcome augmentation_identities() {
  Checker c;
  std::mt19937_64 data(9);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    Eigen::MatrixXd x(24, 4);
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = unit(data);
    AugmentRng rng(seed);
    c.expect(time_warp(x, 0.0, rng) == x, "alpha=0 seed " + std::to_string(seed));
    c.expect(time_resample(x, 1.0, rng) == x, "rho=1 seed " + std::to_string(seed));
    c.expect(gaussian_noise(x, 0.0, rng) == x, "sigma=0 seed " + std::to_string(seed));

    const auto r = ramp(24, 3, 0.1 * static_cast<double>(seed), -0.7);
    const double alpha = 0.04 * static_cast<double>(seed);
    AugmentRng wa(seed), wb(seed);
    const auto warped = time_warp(r, alpha, wa);
    const auto grid = warped_grid(24, alpha, wb);
    double err = 0.0;
    for (Eigen::Index t = 0; t < 24; ++t) {
      for (Eigen::Index ch = 0; ch < 3; ++ch) {
        const double expected = (0.1 * static_cast<double>(seed) + 0.5 * static_cast<double>(ch)) *
                                    grid[static_cast<std::size_t>(t)] - 0.7;
        err = std::max(err, std::abs(warped(t, ch) - expected));
      }
    }
    c.expect(err <= 1e-12, "warp ramp oracle seed " + std::to_string(seed) + " err " + fmt(err));
    for (double rho : {0.3, 0.5, 0.8}) {
      const double e = (time_resample(r, rho, rng) - r).cwiseAbs().maxCoeff();
      c.expect(e <= 1e-12, "resample ramp rho " + fmt(rho) + " err " + fmt(e));
    }
  }
  // 1e6 draws: the mean is within 5 standard errors and the sample std within 1%.
  AugmentRng rng(77);
  const double sigma = 0.02;
  const Eigen::MatrixXd zero = Eigen::MatrixXd::Zero(1000, 1000);
  const Eigen::MatrixXd d = gaussian_noise(zero, sigma, rng);
  const double n = static_cast<double>(d.size());
  const double mean = d.mean();
  const double sd = std::sqrt((d.array() - mean).square().sum() / (n - 1));
  c.expect(std::abs(mean) < 5.0 * sigma / std::sqrt(n), "noise mean " + fmt(mean));
  c.expect(std::abs(sd - sigma) < 0.01 * sigma, "noise std " + fmt(sd));
  return c.outcome("identities, ramp oracles, noise mean " + fmt(mean) + " std " + fmt(sd, 6));
}

// Criterion 4 ----------------------------------------------------------------

Outcome tiny_overfit() {
  Checker c;
  SynthParams p;
  p.seed = 5;
  const auto battery = synthesize_battery(p);
  const std::vector<BatterySeries> fleet{battery};
  const auto state = fit_normalizer(fleet, feature_set(Profile::synthetic));
  ModelConfig model_cfg;
  const auto windows = make_windows(battery, state, static_cast<std::size_t>(model_cfg.window_len));
  std::vector<Eigen::MatrixXd> batch;
  Vec<double> y(8);
  for (std::size_t i = 0; i < 8; ++i) {
    const auto& w = windows[i * windows.size() / 8];
    batch.push_back(w.features);
    y[static_cast<Index>(i)] = w.target;
  }
  const auto x = stack_windows<double>(batch);
  TrainConfig train_cfg = profile_defaults(TrainProfile::custom);
  std::string summary;
  for (Variant v : {Variant::baseline_fc, Variant::cnn_fc, Variant::cnn_transformer, Variant::cdformer}) {
    model_cfg.variant = v;
    CdformerModel<double> model(model_cfg);
    const auto start = Clock::now();
    const auto history = fit_batch(model, x, T({8}, y), train_cfg, 2000, 1e-3);
    const double elapsed = seconds_since(start);
    const bool ok = history.back() < 1e-3 && elapsed < 120.0;
    c.expect(ok, to_string(v) + " loss " + fmt(history.back()) + " after " + std::to_string(history.size()) +
                     " steps, " + fmt(elapsed) + " s");
    summary += (summary.empty() ? "" : ", ") + to_string(v) + " " + std::to_string(history.size()) + " steps/" +
               fmt(elapsed, 2) + " s";
  }
  return c.outcome(summary);
}

// Criterion 5 ----------------------------------------------------------------

// Desk-scale settings shared by 5a and 5b.
constexpr int kSeeds = 5;
constexpr double kNoiseStd = 0.01;

ModelConfig desk_model() {
  ModelConfig m;
  m.input_channels = 4;
  m.window_len = 16;
  m.cnn_channels = 16;
  m.drsn_blocks = 1;
  m.d_model = 32;
  m.heads = 4;
  m.d_ff = 64;
  m.encoder_layers = 1;
  m.reg_hidden = 16;
  return m;
}

TrainConfig desk_train() {
  TrainConfig t = profile_defaults(TrainProfile::custom);
  t.lr = 5e-4;
  t.max_epochs = 120;
  t.patience = 15;
  return t;
}

std::vector<BatterySeries> desk_fleet(std::uint64_t seed) {
  SynthParams base;
  base.noise_std = kNoiseStd;
  std::vector<BatterySeries> out;
  for (const auto& p : synthetic_fleet(4, seed, base)) out.push_back(synthesize_battery(p));
  return out;
}

double loocv_rmse(const std::vector<BatterySeries>& fleet, ModelConfig m, TrainConfig t, std::uint64_t seed) {
  m.init_seed = seed;
  t.seed = seed;
  const auto result = run_loocv<double>(fleet, m, t);
  for (const auto& split : result.splits) {
    if (!split.error.empty()) throw NumericError("split " + split.battery_id + ": " + split.error);
  }
  return result.aggregate->rmse;
}

Outcome compare_over_seeds(const std::string& label_a, const std::string& label_b,
                           const std::function<double(std::uint64_t, bool)>& run) {
  const auto start = Clock::now();
  int wins = 0;
  std::string table;
  for (std::uint64_t seed = 1; seed <= kSeeds; ++seed) {
    const double a = run(seed, false), b = run(seed, true);
    if (b <= a) ++wins;
    table += " s" + std::to_string(seed) + " " + fmt(b, 4) + (b <= a ? "<=" : ">") + fmt(a, 4);
  }
  const std::string detail = label_b + " <= " + label_a + " in " + std::to_string(wins) + "/" +
                             std::to_string(kSeeds) + " seeds (" + fmt(seconds_since(start), 4) + " s):" + table;
  return {wins >= 4 ? Status::pass : Status::fail, detail};
}

Outcome cdformer_vs_baseline() {
  return compare_over_seeds("baseline_fc", "cdformer", [](std::uint64_t seed, bool second) {
    auto m = desk_model();
    m.variant = second ? Variant::cdformer : Variant::baseline_fc;
    return loocv_rmse(desk_fleet(seed), m, desk_train(), seed);
  });
}

Outcome augmentation_vs_none() {
  return compare_over_seeds("no augmentation", "augmentation", [](std::uint64_t seed, bool second) {
    auto t = desk_train();
    if (second) {
      AugmentConfig a;
      a.seed = seed;
      t.augment = a;
    }
    return loocv_rmse(desk_fleet(seed), desk_model(), t, seed);
  });
}

// Criteria 6 and 7 -----------------------------------------------------------

std::string cli_path;

int run_cli(const std::string& args, const fs::path& log) {
  const std::string cmd = "\"" + cli_path + "\" " + args + " > \"" + log.string() + "\" 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

fs::path scratch_dir(const std::string& tag) {
  const auto dir = fs::temp_directory_path() / ("cdformer_acceptance_" + tag + "_" + std::to_string(std::random_device{}()));
  fs::create_directories(dir);
  return dir;
}

Outcome real_data() {
  struct Dataset {
    const char* env;
    const char* profile;
    double bound;
  };
  Checker c;
  std::string summary;
  bool any = false;
  for (const Dataset& d : {Dataset{"CDFORMER_NASA_DATA", "nasa", 0.2}, Dataset{"CDFORMER_CALCE_DATA", "calce", 0.0}}) {
    const char* path = std::getenv(d.env);
    if (!path || !*path) continue;
    any = true;
    const auto dir = scratch_dir(d.profile);
    const int rc = run_cli("train --profile " + std::string(d.profile) + " --data \"" + path + "\" --out \"" +
                               (dir / "run").string() + "\"",
                           dir / "train.log");
    c.expect(rc == 0, std::string(d.profile) + " train exit " + std::to_string(rc) + " (log " + (dir / "train.log").string() + ")");
    if (rc != 0) continue;
    const auto doc = nlohmann::json::parse(slurp(dir / "run" / "metrics.json"));
    bool finite = true;
    for (const auto& e : doc["per_battery"]) {
      finite = finite && std::isfinite(e["rmse"].get<double>()) && std::isfinite(e["mae"].get<double>());
    }
    const double agg = doc["aggregate"]["rmse"].get<double>();
    c.expect(finite && std::isfinite(agg), std::string(d.profile) + " has non-finite metrics");
    if (d.bound > 0) c.expect(agg < d.bound, std::string(d.profile) + " rmse " + fmt(agg) + " >= " + fmt(d.bound));
    summary += std::string(summary.empty() ? "" : ", ") + d.profile + " rmse " + fmt(agg, 4);
    fs::remove_all(dir);
  }
  if (!any) return {Status::skip, "set CDFORMER_NASA_DATA or CDFORMER_CALCE_DATA to run"};
  return c.outcome(summary);
}

Outcome determinism() {
  const auto dir = scratch_dir("determinism");
  Checker c;
  c.expect(run_cli("synthesize --batteries 3 --seed 11 --n-cycles 120 --out \"" + (dir / "data").string() + "\"",
                   dir / "synth.log") == 0,
           "synthesize failed");
  std::ofstream(dir / "config.json") << R"({"model": {"cnn_channels": 8, "drsn_blocks": 1, "d_model": 16, "heads": 2,
    "d_ff": 32, "encoder_layers": 1, "reg_hidden": 8}, "train": {"max_epochs": 4, "seed": 3}})";
  for (const char* run : {"a", "b"}) {
    const int rc = run_cli("train --profile custom --data-profile synthetic --config \"" + (dir / "config.json").string() +
                               "\" --data \"" + (dir / "data").string() + "\" --out \"" + (dir / run).string() + "\"",
                           dir / (std::string(run) + ".log"));
    c.expect(rc == 0, std::string("train run ") + run + " exit " + std::to_string(rc));
  }
  const auto a = slurp(dir / "a" / "metrics.json"), b = slurp(dir / "b" / "metrics.json");
  c.expect(!a.empty() && a == b, "metrics.json differs between identical runs");
  auto outcome = c.outcome("two train runs, metrics.json byte-identical (" + std::to_string(a.size()) + " bytes)");
  if (outcome.status == Status::pass) fs::remove_all(dir);
  else outcome.detail += " (artifacts in " + dir.string() + ")";
  return outcome;
}

struct Criterion {
  std::string id;
  std::string title;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance suite"};
  std::vector<std::string> selected;
  app.add_option("--cli", cli_path, "path to the cdformer executable");
  app.add_option("ids", selected, "criteria to run (default: all)");
  CLI11_PARSE(app, argc, argv);

  const std::vector<Criterion> criteria{
      {"1", "gradient correctness", gradient_checks},
      {"2", "metric oracles", metric_oracles},
      {"3", "augmentation identities and oracles", augmentation_identities},
      {"4", "tiny overfit, all variants", tiny_overfit},
      {"5a", "cdformer vs baseline_fc on synthetic LOOCV", cdformer_vs_baseline},
      {"5b", "augmentation vs none on synthetic LOOCV", augmentation_vs_none},
      {"6", "real data end to end", real_data},
      {"7", "train determinism", determinism},
  };

  const auto suite_start = Clock::now();
  int failed = 0;
  for (const auto& criterion : criteria) {
    if (!selected.empty() && std::find(selected.begin(), selected.end(), criterion.id) == selected.end()) continue;
    Outcome outcome;
    if ((criterion.id == "6" || criterion.id == "7") && cli_path.empty()) {
      outcome = {Status::skip, "no --cli path given"};
    } else {
      try {
        outcome = criterion.run();
      } catch (const std::exception& e) {
        outcome = {Status::fail, std::string("exception: ") + e.what()};
      }
    }
    const char* tag = outcome.status == Status::pass ? "PASS" : outcome.status == Status::fail ? "FAIL" : "SKIP";
    if (outcome.status == Status::fail) ++failed;
    std::cout << tag << " [" << criterion.id << "] " << criterion.title << ": " << outcome.detail << std::endl;
  }
  std::cout << "suite runtime " << fmt(seconds_since(suite_start), 4) << " s, " << failed << " failed" << std::endl;
  return failed == 0 ? 0 : 1;
}
