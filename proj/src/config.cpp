#include "cdformer/config.hpp"

#include <cstdio>
#include <set>
#include <sstream>

#include "cdformer/errors.hpp"

namespace cdformer {

namespace {

/// Reads typed members of one JSON object and rejects anything it did not read.
class ObjectReader {
 public:
  ObjectReader(const Json& j, std::string pointer) : j_(j), pointer_(std::move(pointer)) {
    if (!j_.is_object()) fail(pointer_, "expected an object");
  }

  void get(const char* key, int& out) {
    if (const Json* v = find(key)) {
      if (!v->is_number_integer()) fail(path(key), "expected an integer");
      const auto value = v->get<long long>();
      if (value < INT32_MIN || value > INT32_MAX) fail(path(key), "integer out of range");
      out = static_cast<int>(value);
    }
  }
  void get(const char* key, double& out) {
    if (const Json* v = find(key)) {
      if (!v->is_number()) fail(path(key), "expected a number");
      out = v->get<double>();
    }
  }
  void get(const char* key, bool& out) {
    if (const Json* v = find(key)) {
      if (!v->is_boolean()) fail(path(key), "expected a boolean");
      out = v->get<bool>();
    }
  }
  void get(const char* key, std::string& out) {
    if (const Json* v = find(key)) {
      if (!v->is_string()) fail(path(key), "expected a string");
      out = v->get<std::string>();
    }
  }
  void get(const char* key, std::uint64_t& out) {
    if (const Json* v = find(key)) {
      if (!v->is_number_integer() || (v->is_number_integer() && !v->is_number_unsigned() && v->get<long long>() < 0)) {
        fail(path(key), "expected a nonnegative integer");
      }
      out = v->get<std::uint64_t>();
    }
  }
  template <typename Parse, typename T>
  void get_enum(const char* key, T& out, Parse parse) {
    std::string name;
    if (find(key)) {
      get(key, name);
      try {
        out = parse(name);
      } catch (const ConfigError& e) {
        fail(path(key), e.what());
      }
    }
  }

  const Json* find(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) fail(path(it.key()), "unknown key");
    }
  }

  std::string path(const std::string& key) const { return pointer_ + "/" + key; }

  [[noreturn]] static void fail(const std::string& pointer, const std::string& message) {
    throw ConfigError((pointer.empty() ? std::string("/") : pointer) + ": " + message);
  }

 private:
  const Json& j_;
  std::string pointer_;
  std::set<std::string> seen_;
};

template <typename Config>
void validate_at(const Config& c, const std::string& pointer) {
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(pointer + "/" + e.what());
  }
}

}  // namespace

std::string to_string(Variant variant) {
  switch (variant) {
    case Variant::baseline_fc: return "baseline_fc";
    case Variant::cnn_fc: return "cnn_fc";
    case Variant::cnn_transformer: return "cnn_transformer";
    case Variant::cdformer: return "cdformer";
  }
  return "?";
}

Variant parse_variant(const std::string& name) {
  for (Variant v : {Variant::baseline_fc, Variant::cnn_fc, Variant::cnn_transformer, Variant::cdformer}) {
    if (to_string(v) == name) return v;
  }
  throw ConfigError("unknown variant '" + name + "' (expected baseline_fc, cnn_fc, cnn_transformer or cdformer)");
}

void ModelConfig::validate() const {
  const std::pair<const char*, int> extents[] = {
      {"input_channels", input_channels}, {"window_len", window_len},   {"cnn_channels", cnn_channels},
      {"cnn_kernel", cnn_kernel},         {"d_model", d_model},         {"heads", heads},
      {"d_ff", d_ff},                     {"encoder_layers", encoder_layers}, {"reg_hidden", reg_hidden},
      {"threshold_reduction", threshold_reduction}};
  for (const auto& [name, value] : extents) {
    if (value < 1) throw ConfigError(std::string(name) + ": must be >= 1");
  }
  if (drsn_blocks < 0) throw ConfigError("drsn_blocks: must be >= 0");
  if (variant == Variant::cdformer && drsn_blocks < 1) {
    throw ConfigError("drsn_blocks: cdformer needs at least one DRSN block (use cnn_transformer for none)");
  }
  if (d_model % heads != 0) {
    throw ConfigError("heads: " + std::to_string(heads) + " does not divide d_model " + std::to_string(d_model));
  }
  if (cnn_kernel % 2 == 0) throw ConfigError("cnn_kernel: must be odd");
  if (window_len < cnn_kernel) throw ConfigError("window_len: must be >= cnn_kernel");
}

std::string to_string(TrainProfile profile) {
  switch (profile) {
    case TrainProfile::nasa: return "nasa";
    case TrainProfile::calce: return "calce";
    case TrainProfile::custom: return "custom";
  }
  return "?";
}

TrainProfile parse_train_profile(const std::string& name) {
  if (name == "nasa") return TrainProfile::nasa;
  if (name == "calce") return TrainProfile::calce;
  if (name == "custom") return TrainProfile::custom;
  throw ConfigError("unknown profile '" + name + "' (expected nasa, calce or custom)");
}

void TrainConfig::validate() const {
  if (!(lr > 0.0)) throw ConfigError("lr: must be > 0");
  if (!(beta1 > 0.0 && beta1 < 1.0)) throw ConfigError("beta1: must lie in (0, 1)");
  if (!(beta2 > 0.0 && beta2 < 1.0)) throw ConfigError("beta2: must lie in (0, 1)");
  if (!(adam_eps > 0.0)) throw ConfigError("adam_eps: must be > 0");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay: must be >= 0");
  if (batch_size < 1) throw ConfigError("batch_size: must be >= 1");
  if (max_epochs < 0) throw ConfigError("max_epochs: must be >= 0");
  if (patience < 1) throw ConfigError("patience: must be >= 1");
  if (!(huber_delta > 0.0)) throw ConfigError("huber_delta: must be > 0");
  if (!(val_fraction >= 0.0 && val_fraction < 1.0)) throw ConfigError("val_fraction: must lie in [0, 1)");
  if (augment) augment->validate();
}

TrainConfig profile_defaults(TrainProfile profile) {
  TrainConfig c;
  c.profile = profile;
  c.beta1 = 0.9;
  c.beta2 = 0.999;
  c.weight_decay = 1e-3;
  c.batch_size = 32;
  c.patience = 15;
  switch (profile) {
    case TrainProfile::nasa:
      c.lr = 5e-4;
      c.max_epochs = 200;
      break;
    case TrainProfile::calce:
      c.lr = 1e-3;
      c.max_epochs = 500;
      break;
    case TrainProfile::custom:
      break;
  }
  return c;
}

ModelConfig parse_model_config(const Json& j, const ModelConfig& base, const std::string& pointer) {
  ModelConfig c = base;
  ObjectReader r(j, pointer);
  r.get("input_channels", c.input_channels);
  r.get("window_len", c.window_len);
  r.get("cnn_channels", c.cnn_channels);
  r.get("cnn_kernel", c.cnn_kernel);
  r.get("drsn_blocks", c.drsn_blocks);
  r.get("d_model", c.d_model);
  r.get("heads", c.heads);
  r.get("d_ff", c.d_ff);
  r.get("encoder_layers", c.encoder_layers);
  r.get("reg_hidden", c.reg_hidden);
  r.get("threshold_reduction", c.threshold_reduction);
  r.get_enum("variant", c.variant, parse_variant);
  r.get("output_relu", c.output_relu);
  r.get("positional_encoding", c.positional_encoding);
  r.get("init_seed", c.init_seed);
  r.finish();
  validate_at(c, pointer);
  return c;
}

AugmentConfig parse_augment_config(const Json& j, const AugmentConfig& base, const std::string& pointer) {
  AugmentConfig c = base;
  ObjectReader r(j, pointer);
  r.get("alpha", c.alpha);
  r.get("rho", c.rho);
  r.get("sigma", c.sigma);
  r.get("per_technique_prob", c.per_technique_prob);
  r.get("seed", c.seed);
  r.get("warp", c.warp);
  r.get("resample", c.resample);
  r.get("noise", c.noise);
  r.finish();
  validate_at(c, pointer);
  return c;
}

TrainConfig parse_train_config(const Json& j, const TrainConfig& base, const std::string& pointer) {
  TrainConfig c = base;
  ObjectReader r(j, pointer);
  r.get("lr", c.lr);
  r.get("beta1", c.beta1);
  r.get("beta2", c.beta2);
  r.get("adam_eps", c.adam_eps);
  r.get("weight_decay", c.weight_decay);
  r.get("batch_size", c.batch_size);
  r.get("max_epochs", c.max_epochs);
  r.get("patience", c.patience);
  r.get("huber_delta", c.huber_delta);
  r.get("val_fraction", c.val_fraction);
  r.get("seed", c.seed);
  r.get_enum("profile", c.profile, parse_train_profile);
  r.finish();
  validate_at(c, pointer);
  return c;
}

SynthParams parse_synth_params(const Json& j, const SynthParams& base, const std::string& pointer) {
  SynthParams p = base;
  ObjectReader r(j, pointer);
  r.get("battery_id", p.battery_id);
  r.get("c0", p.c0);
  r.get("fade_rate", p.fade_rate);
  r.get("knee_cycle", p.knee_cycle);
  r.get("post_knee_factor", p.post_knee_factor);
  r.get("noise_std", p.noise_std);
  r.get("n_cycles", p.n_cycles);
  r.get("seed", p.seed);
  r.finish();
  return p;
}

Json to_json(const ModelConfig& c) {
  return Json{{"input_channels", c.input_channels},
              {"window_len", c.window_len},
              {"cnn_channels", c.cnn_channels},
              {"cnn_kernel", c.cnn_kernel},
              {"drsn_blocks", c.drsn_blocks},
              {"d_model", c.d_model},
              {"heads", c.heads},
              {"d_ff", c.d_ff},
              {"encoder_layers", c.encoder_layers},
              {"reg_hidden", c.reg_hidden},
              {"threshold_reduction", c.threshold_reduction},
              {"variant", to_string(c.variant)},
              {"output_relu", c.output_relu},
              {"positional_encoding", c.positional_encoding},
              {"init_seed", c.init_seed}};
}

Json to_json(const AugmentConfig& c) {
  return Json{{"alpha", c.alpha},
              {"rho", c.rho},
              {"sigma", c.sigma},
              {"per_technique_prob", c.per_technique_prob},
              {"seed", c.seed},
              {"warp", c.warp},
              {"resample", c.resample},
              {"noise", c.noise}};
}

Json to_json(const TrainConfig& c) {
  return Json{{"lr", c.lr},
              {"beta1", c.beta1},
              {"beta2", c.beta2},
              {"adam_eps", c.adam_eps},
              {"weight_decay", c.weight_decay},
              {"batch_size", c.batch_size},
              {"max_epochs", c.max_epochs},
              {"patience", c.patience},
              {"huber_delta", c.huber_delta},
              {"val_fraction", c.val_fraction},
              {"seed", c.seed},
              {"profile", to_string(c.profile)}};
}

Json to_json(const SynthParams& p) {
  return Json{{"battery_id", p.battery_id}, {"c0", p.c0},
              {"fade_rate", p.fade_rate},   {"knee_cycle", p.knee_cycle},
              {"post_knee_factor", p.post_knee_factor}, {"noise_std", p.noise_std},
              {"n_cycles", p.n_cycles},     {"seed", p.seed}};
}

Json to_json(const NormalizationState& s) {
  Json features = Json::array();
  for (Feature f : s.features) features.push_back(to_string(f));
  return Json{{"features", features}, {"min", s.min}, {"max", s.max}};
}

NormalizationState normalizer_from_json(const Json& j) {
  NormalizationState s;
  try {
    for (const auto& f : j.at("features")) s.features.push_back(parse_feature(f.get<std::string>()));
    s.min = j.at("min").get<std::vector<double>>();
    s.max = j.at("max").get<std::vector<double>>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("/normalizer: ") + e.what());
  }
  if (s.min.size() != s.features.size() || s.max.size() != s.features.size()) {
    throw ConfigError("/normalizer: feature, min and max lengths differ");
  }
  return s;
}

RunConfig parse_run_config(const Json& doc, TrainProfile profile) {
  RunConfig run;
  run.train = profile_defaults(profile);
  run.model.output_relu = profile == TrainProfile::nasa;
  ObjectReader r(doc, "");
  if (const Json* m = r.find("model")) run.model = parse_model_config(*m, run.model, "/model");
  if (const Json* t = r.find("train")) run.train = parse_train_config(*t, run.train, "/train");
  if (const Json* a = r.find("augment"); a && !a->is_null()) {
    run.train.augment = parse_augment_config(*a, AugmentConfig{}, "/augment");
  }
  r.finish();
  return run;
}

Json to_json(const RunConfig& run) {
  return Json{{"model", to_json(run.model)},
              {"train", to_json(run.train)},
              {"augment", run.train.augment ? to_json(*run.train.augment) : Json(nullptr)}};
}

std::string config_hash(const Json& j) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : j.dump()) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string config_reference() {
  std::ostringstream os;
  os << "Config keys (JSON document {\"model\": {...}, \"train\": {...}, \"augment\": {...} | null}):\n";
  auto dump = [&os](const char* section, const Json& defaults) {
    for (auto it = defaults.begin(); it != defaults.end(); ++it) {
      os << "  " << section << '.' << it.key() << " = " << it.value().dump() << '\n';
    }
  };
  dump("model", to_json(ModelConfig{}));
  dump("train", to_json(TrainConfig{}));
  dump("augment", to_json(AugmentConfig{}));
  os << "Profiles: nasa -> train.lr=0.0005, train.max_epochs=200, model.output_relu=true;\n"
        "          calce -> train.lr=0.001, train.max_epochs=500, model.output_relu=false.\n"
        "model.input_channels is taken from the profile feature set when the data is loaded.\n";
  return os.str();
}

}  // namespace cdformer
