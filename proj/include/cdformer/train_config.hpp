#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "cdformer/augmentation.hpp"

namespace cdformer {

enum class TrainProfile { nasa, calce, custom };

std::string to_string(TrainProfile profile);
TrainProfile parse_train_profile(const std::string& name);

struct TrainConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 1e-3;
  int batch_size = 32;
  int max_epochs = 200;
  int patience = 15;
  double huber_delta = 1.0;
  double val_fraction = 0.2;  // chronological tail of each training battery
  std::uint64_t seed = 42;
  std::optional<AugmentConfig> augment;
  TrainProfile profile = TrainProfile::custom;

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

/// Hyperparameters of the published protocol: Adam (0.9, 0.999), weight decay
/// 1e-3, batch 32, patience 15; lr 5e-4 / 200 epochs for NASA and
/// lr 1e-3 / 500 epochs for CALCE.
TrainConfig profile_defaults(TrainProfile profile);

}  // namespace cdformer
