#pragma once

#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cdformer/augmentation.hpp"
#include "cdformer/dataset.hpp"
#include "cdformer/model_config.hpp"
#include "cdformer/train_config.hpp"

namespace cdformer {

using Json = nlohmann::ordered_json;

// Parsers reject unknown keys and wrong types with a ConfigError whose
// message starts with the JSON pointer of the offending value.
ModelConfig parse_model_config(const Json& j, const ModelConfig& base = {}, const std::string& pointer = "/model");
TrainConfig parse_train_config(const Json& j, const TrainConfig& base = {}, const std::string& pointer = "/train");
AugmentConfig parse_augment_config(const Json& j, const AugmentConfig& base = {},
                                   const std::string& pointer = "/augment");
SynthParams parse_synth_params(const Json& j, const SynthParams& base = {}, const std::string& pointer = "");

Json to_json(const ModelConfig& c);
Json to_json(const TrainConfig& c);
Json to_json(const AugmentConfig& c);
Json to_json(const SynthParams& p);
Json to_json(const NormalizationState& s);
NormalizationState normalizer_from_json(const Json& j);

/// Full run document {"model": ..., "train": ..., "augment": ...|null}.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
};

/// Profile defaults are applied first, then the document overrides them.
RunConfig parse_run_config(const Json& doc, TrainProfile profile);
Json to_json(const RunConfig& run);

/// FNV-1a 64 of the canonical JSON dump, as 16 hex digits.
std::string config_hash(const Json& j);

/// One line per config key with its default, for --help output.
std::string config_reference();

}  // namespace cdformer
