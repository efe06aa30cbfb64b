#include "cdformer/augmentation.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>

#include "cdformer/errors.hpp"

namespace cdformer {

namespace {

std::atomic<std::uint64_t> g_augment_calls{0};

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

void require_length(const Eigen::MatrixXd& x, const char* op) {
  if (x.rows() < 2) {
    throw DataError(std::string(op) + ": sequence too short (" + std::to_string(x.rows()) + " steps, need 2)");
  }
}

// Interpolates every column of x (knots at 1..T) at the given query points.
Eigen::MatrixXd interpolate_columns(const std::vector<double>& knots, const Eigen::MatrixXd& values,
                                    const std::vector<double>& queries) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(queries.size()), values.cols());
  std::vector<double> ys(knots.size());
  for (Eigen::Index c = 0; c < values.cols(); ++c) {
    for (std::size_t i = 0; i < knots.size(); ++i) ys[i] = values(static_cast<Eigen::Index>(i), c);
    for (std::size_t q = 0; q < queries.size(); ++q) {
      out(static_cast<Eigen::Index>(q), c) = linear_interpolate(knots, ys, queries[q]);
    }
  }
  return out;
}

std::vector<double> unit_grid(std::size_t length) {
  std::vector<double> grid(length);
  std::iota(grid.begin(), grid.end(), 1.0);
  return grid;
}

}  // namespace

void AugmentConfig::validate() const {
  if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw ConfigError("alpha: must be >= 0");
  if (!(rho > 0.0 && rho <= 1.0)) throw ConfigError("rho: must lie in (0, 1]");
  if (!(sigma >= 0.0) || !std::isfinite(sigma)) throw ConfigError("sigma: must be >= 0");
  if (!(per_technique_prob >= 0.0 && per_technique_prob <= 1.0)) {
    throw ConfigError("per_technique_prob: must lie in [0, 1]");
  }
}

double linear_interpolate(std::span<const double> xs, std::span<const double> ys, double q) {
  if (xs.size() < 2 || xs.size() != ys.size()) {
    throw ContractError("linear_interpolate: need >= 2 knots with matching values");
  }
  for (std::size_t i = 1; i < xs.size(); ++i) {
    if (!(xs[i] > xs[i - 1])) throw ContractError("linear_interpolate: knots must be strictly increasing");
  }
  if (q <= xs.front()) return ys.front();
  if (q >= xs.back()) return ys.back();
  const auto hi = static_cast<std::size_t>(std::upper_bound(xs.begin(), xs.end(), q) - xs.begin());
  const std::size_t lo = hi - 1;
  if (q == xs[lo]) return ys[lo];
  const double w = (q - xs[lo]) / (xs[hi] - xs[lo]);
  return ys[lo] + w * (ys[hi] - ys[lo]);
}

std::vector<double> warped_grid(std::size_t length, double alpha, AugmentRng& rng) {
  if (alpha < 0.0) throw ConfigError("time_warp: alpha must be >= 0");
  auto grid = unit_grid(length);
  if (alpha == 0.0 || length < 3) return grid;
  std::uniform_real_distribution<double> jitter(-alpha, alpha);
  const double last = static_cast<double>(length);
  for (std::size_t t = 1; t + 1 < length; ++t) grid[t] = std::clamp(grid[t] + jitter(rng), 1.0, last);
  std::sort(grid.begin(), grid.end());
  grid.front() = 1.0;
  grid.back() = last;
  return grid;
}

Eigen::MatrixXd time_warp(const Eigen::MatrixXd& x, double alpha, AugmentRng& rng) {
  require_length(x, "time_warp");
  const auto length = static_cast<std::size_t>(x.rows());
  return interpolate_columns(unit_grid(length), x, warped_grid(length, alpha, rng));
}

Eigen::MatrixXd time_resample(const Eigen::MatrixXd& x, double rho, AugmentRng& rng) {
  require_length(x, "time_resample");
  if (!(rho > 0.0 && rho <= 1.0)) throw ConfigError("time_resample: rho must lie in (0, 1]");
  const auto length = static_cast<std::size_t>(x.rows());
  const auto kept = static_cast<std::size_t>(std::floor(rho * static_cast<double>(length)));
  if (kept < 2) {
    throw ConfigError("time_resample: floor(rho * T) = " + std::to_string(kept) + " keeps fewer than 2 points");
  }
  if (kept >= length) return x;

  // Endpoints are always kept; the other kept - 2 indices are drawn from the
  // interior without replacement.
  std::vector<std::size_t> interior(length - 2);
  std::iota(interior.begin(), interior.end(), std::size_t{1});
  std::vector<std::size_t> chosen;
  chosen.reserve(kept);
  std::sample(interior.begin(), interior.end(), std::back_inserter(chosen), kept - 2, rng);
  chosen.push_back(0);
  chosen.push_back(length - 1);
  std::sort(chosen.begin(), chosen.end());

  std::vector<double> knots;
  Eigen::MatrixXd values(static_cast<Eigen::Index>(chosen.size()), x.cols());
  for (std::size_t i = 0; i < chosen.size(); ++i) {
    knots.push_back(static_cast<double>(chosen[i] + 1));
    values.row(static_cast<Eigen::Index>(i)) = x.row(static_cast<Eigen::Index>(chosen[i]));
  }
  return interpolate_columns(knots, values, unit_grid(length));
}

Eigen::MatrixXd gaussian_noise(const Eigen::MatrixXd& x, double sigma, AugmentRng& rng) {
  if (!(sigma >= 0.0)) throw ConfigError("gaussian_noise: sigma must be >= 0");
  if (sigma == 0.0) return x;
  std::normal_distribution<double> dist(0.0, sigma);
  Eigen::MatrixXd out = x;
  // Column-major fill order is part of the reproducibility contract.
  for (Eigen::Index i = 0; i < out.size(); ++i) out.data()[i] += dist(rng);
  return out;
}

AugmentRng stream_rng(std::uint64_t seed, std::uint64_t counter) {
  return AugmentRng(splitmix64(splitmix64(seed) ^ splitmix64(counter + 0x5851f42d4c957f2dULL)));
}

AugmentedSequence apply_composite(const Eigen::MatrixXd& x, const AugmentConfig& cfg, std::uint64_t counter) {
  cfg.validate();
  g_augment_calls.fetch_add(1, std::memory_order_relaxed);
  AugmentRng rng = stream_rng(cfg.seed, counter);
  std::bernoulli_distribution fires(cfg.per_technique_prob);
  AugmentedSequence out{x, {}};
  // Coin flips are drawn for every technique so enabling one does not shift
  // the others' streams.
  const bool do_warp = fires(rng) && cfg.warp;
  const bool do_resample = fires(rng) && cfg.resample;
  const bool do_noise = fires(rng) && cfg.noise;
  if (do_warp) {
    out.values = time_warp(out.values, cfg.alpha, rng);
    out.provenance.push_back({"time_warp", cfg.alpha});
  }
  if (do_resample) {
    out.values = time_resample(out.values, cfg.rho, rng);
    out.provenance.push_back({"time_resample", cfg.rho});
  }
  if (do_noise) {
    out.values = gaussian_noise(out.values, cfg.sigma, rng);
    out.provenance.push_back({"gaussian_noise", cfg.sigma});
  }
  return out;
}

std::uint64_t augment_call_count() { return g_augment_calls.load(std::memory_order_relaxed); }

}  // namespace cdformer
