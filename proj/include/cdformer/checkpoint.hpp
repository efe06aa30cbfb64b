#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <type_traits>
#include <vector>

#include "cdformer/config.hpp"
#include "cdformer/dataset.hpp"
#include "cdformer/model.hpp"

namespace cdformer {

/// In-memory copy of every parameter and buffer value of a model.
template <typename Scalar>
struct Snapshot {
  std::vector<Vec<Scalar>> params;
  std::vector<Vec<Scalar>> buffers;
};

template <typename Scalar>
Snapshot<Scalar> take_snapshot(CdformerModel<Scalar>& model) {
  Snapshot<Scalar> s;
  for (const auto& p : model.parameters()) s.params.push_back(p.tensor.value());
  for (const auto& b : model.buffers()) s.buffers.push_back(*b.values);
  return s;
}

template <typename Scalar>
void restore_snapshot(CdformerModel<Scalar>& model, const Snapshot<Scalar>& s) {
  auto params = model.parameters();
  auto buffers = model.buffers();
  if (params.size() != s.params.size() || buffers.size() != s.buffers.size()) {
    throw ContractError("restore_snapshot: snapshot does not match the model layout");
  }
  for (std::size_t i = 0; i < params.size(); ++i) params[i].tensor.mutable_value() = s.params[i];
  for (std::size_t i = 0; i < buffers.size(); ++i) *buffers[i].values = s.buffers[i];
}

struct CheckpointTensor {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

/// Serialisable model state: config header, optional normaliser, and named
/// tensors in row-major order. Buffers are stored alongside parameters.
struct Checkpoint {
  ModelConfig config;
  std::string precision = "f64";
  std::optional<NormalizationState> normalizer;
  std::vector<CheckpointTensor> tensors;
};

template <typename Scalar>
constexpr const char* precision_name() {
  return std::is_same_v<Scalar, float> ? "f32" : "f64";
}

template <typename Scalar>
Checkpoint make_checkpoint(CdformerModel<Scalar>& model, std::optional<NormalizationState> normalizer = std::nullopt) {
  Checkpoint c;
  c.config = model.config();
  c.precision = precision_name<Scalar>();
  c.normalizer = std::move(normalizer);
  for (const auto& p : model.parameters()) {
    const auto& v = p.tensor.value();
    c.tensors.push_back({p.name, p.tensor.shape(), std::vector<double>(v.data(), v.data() + v.size())});
  }
  for (const auto& b : model.buffers()) {
    const auto& v = *b.values;
    c.tensors.push_back({b.name, {v.size()}, std::vector<double>(v.data(), v.data() + v.size())});
  }
  return c;
}

/// Builds a model from the checkpoint config and loads every tensor, checking
/// names and shapes.
template <typename Scalar>
CdformerModel<Scalar> load_model(const Checkpoint& c) {
  CdformerModel<Scalar> model(c.config);
  auto params = model.parameters();
  auto buffers = model.buffers();
  if (c.tensors.size() != params.size() + buffers.size()) {
    throw DataError("checkpoint holds " + std::to_string(c.tensors.size()) + " tensors, model expects " +
                    std::to_string(params.size() + buffers.size()));
  }
  auto load = [](const CheckpointTensor& t, const std::string& name, const Shape& shape, Vec<Scalar>& dst) {
    if (t.name != name || t.shape != shape || static_cast<Index>(t.values.size()) != dst.size()) {
      throw DataError("checkpoint tensor '" + t.name + "' " + shape_string(t.shape) + " does not match model tensor '" +
                      name + "' " + shape_string(shape));
    }
    for (Index i = 0; i < dst.size(); ++i) dst[i] = static_cast<Scalar>(t.values[static_cast<std::size_t>(i)]);
  };
  for (std::size_t i = 0; i < params.size(); ++i) {
    load(c.tensors[i], params[i].name, params[i].tensor.shape(), params[i].tensor.mutable_value());
  }
  for (std::size_t i = 0; i < buffers.size(); ++i) {
    auto& dst = *buffers[i].values;
    load(c.tensors[params.size() + i], buffers[i].name, {dst.size()}, dst);
  }
  return model;
}

Json checkpoint_to_json(const Checkpoint& c);
Checkpoint checkpoint_from_json(const Json& j);
void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace cdformer
