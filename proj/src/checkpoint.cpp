#include "cdformer/checkpoint.hpp"

#include <fstream>

namespace cdformer {

namespace {
constexpr const char* kFormat = "cdformer-checkpoint";
constexpr int kVersion = 1;
}  // namespace

Json checkpoint_to_json(const Checkpoint& c) {
  Json doc;
  doc["format"] = kFormat;
  doc["version"] = kVersion;
  doc["precision"] = c.precision;
  doc["config"] = to_json(c.config);
  doc["normalizer"] = c.normalizer ? to_json(*c.normalizer) : Json(nullptr);
  Json tensors = Json::array();
  for (const auto& t : c.tensors) {
    tensors.push_back(Json{{"name", t.name}, {"shape", t.shape}, {"values", t.values}});
  }
  doc["tensors"] = std::move(tensors);
  return doc;
}

Checkpoint checkpoint_from_json(const Json& doc) {
  if (!doc.is_object() || doc.value("format", std::string{}) != kFormat) {
    throw DataError("not a cdformer checkpoint (missing or wrong /format)");
  }
  if (doc.value("version", 0) != kVersion) throw DataError("/version: unsupported checkpoint version");
  Checkpoint c;
  c.config = parse_model_config(doc.at("config"), ModelConfig{}, "/config");
  c.precision = doc.value("precision", std::string("f64"));
  if (c.precision != "f64" && c.precision != "f32") throw DataError("/precision: expected f64 or f32");
  if (doc.contains("normalizer") && !doc["normalizer"].is_null()) c.normalizer = normalizer_from_json(doc["normalizer"]);
  try {
    for (const auto& t : doc.at("tensors")) {
      CheckpointTensor ct;
      ct.name = t.at("name").get<std::string>();
      ct.shape = t.at("shape").get<Shape>();
      ct.values = t.at("values").get<std::vector<double>>();
      if (static_cast<Index>(ct.values.size()) != numel(ct.shape)) {
        throw DataError("/tensors: '" + ct.name + "' value count does not match shape " + shape_string(ct.shape));
      }
      c.tensors.push_back(std::move(ct));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("/tensors: ") + e.what());
  }
  return c;
}

void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << checkpoint_to_json(c).dump() << '\n';
  if (!out) throw IoError("write failure on " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  Json doc;
  try {
    doc = Json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  return checkpoint_from_json(doc);
}

}  // namespace cdformer
