#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace cdformer {

using AugmentRng = std::mt19937_64;

/// Composite augmentation settings. Sequences are [T x C] matrices, one row
/// per cycle.
struct AugmentConfig {
  double alpha = 0.1;  // warp strength as a fraction of one step
  double rho = 0.8;    // fraction of time points kept by resampling
  double sigma = 0.01; // noise std in normalised units
  double per_technique_prob = 0.5;
  std::uint64_t seed = 0;
  bool warp = true;
  bool resample = true;
  bool noise = true;

  void validate() const;
  bool operator==(const AugmentConfig&) const = default;
};

struct AppliedTechnique {
  std::string name;
  double parameter;
};

struct AugmentedSequence {
  Eigen::MatrixXd values;
  std::vector<AppliedTechnique> provenance;
};

/// Piecewise-linear interpolation; queries outside [xs.front(), xs.back()]
/// clamp to the boundary value.
double linear_interpolate(std::span<const double> xs, std::span<const double> ys, double q);

Eigen::MatrixXd time_warp(const Eigen::MatrixXd& x, double alpha, AugmentRng& rng);
Eigen::MatrixXd time_resample(const Eigen::MatrixXd& x, double rho, AugmentRng& rng);
Eigen::MatrixXd gaussian_noise(const Eigen::MatrixXd& x, double sigma, AugmentRng& rng);

/// Perturbed 1-based time grid used by time_warp (sorted, endpoints pinned).
std::vector<double> warped_grid(std::size_t length, double alpha, AugmentRng& rng);

/// Independent RNG stream for (seed, counter).
AugmentRng stream_rng(std::uint64_t seed, std::uint64_t counter);

/// Warp, resample and noise, each firing independently with
/// per_technique_prob. Deterministic in (x, cfg, counter).
AugmentedSequence apply_composite(const Eigen::MatrixXd& x, const AugmentConfig& cfg, std::uint64_t counter);

/// Number of apply_composite calls made by this process.
std::uint64_t augment_call_count();

}  // namespace cdformer
