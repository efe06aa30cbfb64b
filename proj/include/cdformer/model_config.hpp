#pragma once

#include <cstdint>
#include <string>

namespace cdformer {

enum class Variant { baseline_fc, cnn_fc, cnn_transformer, cdformer };

std::string to_string(Variant variant);
Variant parse_variant(const std::string& name);

/// Architecture hyperparameters. Defaults are the desk-scale configuration.
struct ModelConfig {
  int input_channels = 4;
  int window_len = 16;
  int cnn_channels = 32;
  int cnn_kernel = 3;
  int drsn_blocks = 2;
  int d_model = 64;
  int heads = 4;
  int d_ff = 128;
  int encoder_layers = 2;
  int reg_hidden = 32;
  int threshold_reduction = 4;
  Variant variant = Variant::cdformer;
  bool output_relu = false;
  bool positional_encoding = true;
  std::uint64_t init_seed = 1;

  /// Throws ConfigError naming the offending field.
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

}  // namespace cdformer
