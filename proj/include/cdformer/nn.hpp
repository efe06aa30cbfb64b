#pragma once

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "cdformer/ops.hpp"

namespace cdformer {

using Rng = std::mt19937_64;

template <typename Scalar>
struct NamedTensor {
  std::string name;
  Tensor<Scalar> tensor;
};

template <typename Scalar>
struct NamedBuffer {
  std::string name;
  Vec<Scalar>* values;
};

template <typename Scalar>
using ParamList = std::vector<NamedTensor<Scalar>>;
template <typename Scalar>
using BufferList = std::vector<NamedBuffer<Scalar>>;

// Glorot-uniform for dense/projection weights.
template <typename Scalar>
Tensor<Scalar> glorot_uniform(Shape shape, Index fan_in, Index fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-limit, limit);
  Vec<Scalar> v(numel(shape));
  for (Index i = 0; i < v.size(); ++i) v[i] = static_cast<Scalar>(dist(rng));
  return Tensor<Scalar>(std::move(shape), std::move(v), true);
}

// He-scaled normal for convolution kernels.
template <typename Scalar>
Tensor<Scalar> he_normal(Shape shape, Index fan_in, Rng& rng) {
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  Vec<Scalar> v(numel(shape));
  for (Index i = 0; i < v.size(); ++i) v[i] = static_cast<Scalar>(dist(rng));
  return Tensor<Scalar>(std::move(shape), std::move(v), true);
}

template <typename Scalar>
struct DenseLayer {
  Tensor<Scalar> weight;  // [out x in]
  Tensor<Scalar> bias;    // [out]

  DenseLayer() = default;
  DenseLayer(Index in, Index out, Rng& rng)
      : weight(glorot_uniform<Scalar>({out, in}, in, out, rng)), bias(Tensor<Scalar>::zeros({out}, true)) {}

  Index in_features() const { return weight.dim(1); }
  Index out_features() const { return weight.dim(0); }

  /// Applies to the last axis of any rank >= 2 input.
  Tensor<Scalar> operator()(const Tensor<Scalar>& x) const {
    if (x.rank() == 2) return linear(x, weight, bias);
    if (x.rank() < 2) throw DimensionError("dense layer needs rank >= 2 input, got " + shape_string(x.shape()));
    Shape out_shape = x.shape();
    const Index width = out_shape.back();
    out_shape.back() = out_features();
    return reshape(linear(reshape(x, {x.size() / width, width}), weight, bias), out_shape);
  }

  void collect(ParamList<Scalar>& params, const std::string& prefix) const {
    params.push_back({prefix + ".weight", weight});
    params.push_back({prefix + ".bias", bias});
  }
};

template <typename Scalar>
struct Conv1dLayer {
  Tensor<Scalar> weight;  // [C_out x C_in x K]
  Tensor<Scalar> bias;    // [C_out], undefined when the conv feeds a batch norm
  Index stride = 1;
  Index padding = 0;

  Conv1dLayer() = default;
  Conv1dLayer(Index in, Index out, Index kernel, Index pad, bool with_bias, Rng& rng)
      : weight(he_normal<Scalar>({out, in, kernel}, in * kernel, rng)), padding(pad) {
    if (with_bias) bias = Tensor<Scalar>::zeros({out}, true);
  }

  Index in_channels() const { return weight.dim(1); }
  Index out_channels() const { return weight.dim(0); }

  Tensor<Scalar> operator()(const Tensor<Scalar>& x) const { return conv1d(x, weight, bias, stride, padding); }

  void collect(ParamList<Scalar>& params, const std::string& prefix) const {
    params.push_back({prefix + ".weight", weight});
    if (bias.defined()) params.push_back({prefix + ".bias", bias});
  }
};

template <typename Scalar>
struct BatchNorm1d {
  Tensor<Scalar> gamma;
  Tensor<Scalar> beta;
  BatchNormState<Scalar> state;

  BatchNorm1d() = default;
  explicit BatchNorm1d(Index channels)
      : gamma(Tensor<Scalar>::ones({channels}, true)), beta(Tensor<Scalar>::zeros({channels}, true)), state(channels) {}

  Tensor<Scalar> operator()(const Tensor<Scalar>& x, Mode mode) { return batchnorm1d(x, gamma, beta, state, mode); }

  void collect(ParamList<Scalar>& params, BufferList<Scalar>& buffers, const std::string& prefix) {
    params.push_back({prefix + ".gamma", gamma});
    params.push_back({prefix + ".beta", beta});
    buffers.push_back({prefix + ".running_mean", &state.running_mean});
    buffers.push_back({prefix + ".running_var", &state.running_var});
  }
};

template <typename Scalar>
struct LayerNorm {
  Tensor<Scalar> gamma;
  Tensor<Scalar> beta;

  LayerNorm() = default;
  explicit LayerNorm(Index width)
      : gamma(Tensor<Scalar>::ones({width}, true)), beta(Tensor<Scalar>::zeros({width}, true)) {}

  Tensor<Scalar> operator()(const Tensor<Scalar>& x) const { return layer_norm(x, gamma, beta); }

  void collect(ParamList<Scalar>& params, const std::string& prefix) const {
    params.push_back({prefix + ".gamma", gamma});
    params.push_back({prefix + ".beta", beta});
  }
};

// ---------------------------------------------------------------------------
// Shrinkage

/// Hidden width of the threshold subnetwork: C / r, floored, at least 1.
inline Index threshold_hidden_width(Index channels, Index reduction) {
  if (reduction < 1) throw ConfigError("threshold reduction ratio must be >= 1");
  return std::max<Index>(1, channels / reduction);
}

/// Two-layer sigmoid subnetwork mapping pooled channels to per-channel thresholds.
template <typename Scalar>
struct ThresholdGenerator {
  DenseLayer<Scalar> fc1;  // C -> C/r
  DenseLayer<Scalar> fc2;  // C/r -> C
  Index reduction = 4;

  ThresholdGenerator() = default;
  ThresholdGenerator(Index channels, Index r, Rng& rng)
      : fc1(channels, threshold_hidden_width(channels, r), rng),
        fc2(threshold_hidden_width(channels, r), channels, rng),
        reduction(r) {}

  Index channels() const { return fc1.in_features(); }

  void collect(ParamList<Scalar>& params, const std::string& prefix) const {
    fc1.collect(params, prefix + ".fc1");
    fc2.collect(params, prefix + ".fc2");
  }
};

/// sign(x) * max(|x| - lambda, 0) with lambda [B x C] repeated over time.
template <typename Scalar>
Tensor<Scalar> soft_threshold(const Tensor<Scalar>& x, const Tensor<Scalar>& lambda) {
  detail::require_rank("soft_threshold", x.shape(), 3);
  if (lambda.rank() != 2 || lambda.dim(0) != x.dim(0) || lambda.dim(1) != x.dim(1)) {
    throw detail::mismatch("soft_threshold", x.shape(), lambda.shape());
  }
  if ((lambda.value().array() < Scalar(0)).any()) throw ContractError("soft_threshold: negative threshold");
  return mul(sign(x), max_with_scalar(sub(abs(x), expand_time(lambda, x.dim(2))), Scalar(0)));
}

/// lambda = sigmoid(fc2(relu(fc1(avgpool(f))))), shape [B x C], values in (0, 1).
template <typename Scalar>
Tensor<Scalar> generate_thresholds(const Tensor<Scalar>& features, const ThresholdGenerator<Scalar>& gen) {
  detail::require_rank("generate_thresholds", features.shape(), 3);
  if (features.dim(1) != gen.channels()) {
    throw detail::mismatch("generate_thresholds", features.shape(), gen.fc1.weight.shape());
  }
  return sigmoid(gen.fc2(relu(gen.fc1(global_avg_pool(features)))));
}

// ---------------------------------------------------------------------------
// Attention

/// softmax(Q K^T / sqrt(d_k)) V for [L x d_k] or batched [B x L x d_k] inputs.
template <typename Scalar>
Tensor<Scalar> scaled_dot_product_attention(const Tensor<Scalar>& q, const Tensor<Scalar>& k,
                                            const Tensor<Scalar>& v) {
  if (q.shape() != k.shape() || q.shape() != v.shape()) throw detail::mismatch("attention", q.shape(), k.shape());
  if (q.rank() == 2) {
    const Index len = q.dim(0), dk = q.dim(1);
    auto out = scaled_dot_product_attention(reshape(q, {1, len, dk}), reshape(k, {1, len, dk}),
                                            reshape(v, {1, len, dk}));
    return reshape(out, {len, dk});
  }
  detail::require_rank("attention", q.shape(), 3);
  const Index dk = q.dim(2);
  if (dk == 0) throw ConfigError("attention: key dimension must be positive");
  const Scalar inv_sqrt = Scalar(1) / std::sqrt(static_cast<Scalar>(dk));
  auto weights = softmax(scale(bmm(q, swap_last_axes(k)), inv_sqrt), -1);
  return bmm(weights, v);
}

template <typename Scalar>
struct AttentionHeadSet {
  std::vector<Tensor<Scalar>> query;  // h x [d_model x d_k]
  std::vector<Tensor<Scalar>> key;
  std::vector<Tensor<Scalar>> value;
  Tensor<Scalar> output;  // [h*d_k x d_model]
  Index heads = 1;
  Index key_dim = 0;

  AttentionHeadSet() = default;
  AttentionHeadSet(Index d_model, Index h, Rng& rng) : heads(h) {
    if (h < 1 || d_model % h != 0) {
      throw ConfigError("attention heads (" + std::to_string(h) + ") must divide d_model (" +
                        std::to_string(d_model) + ")");
    }
    key_dim = d_model / h;
    for (Index i = 0; i < h; ++i) {
      query.push_back(glorot_uniform<Scalar>({d_model, key_dim}, d_model, key_dim, rng));
      key.push_back(glorot_uniform<Scalar>({d_model, key_dim}, d_model, key_dim, rng));
      value.push_back(glorot_uniform<Scalar>({d_model, key_dim}, d_model, key_dim, rng));
    }
    output = glorot_uniform<Scalar>({h * key_dim, d_model}, h * key_dim, d_model, rng);
  }

  Index model_dim() const { return output.dim(1); }

  void collect(ParamList<Scalar>& params, const std::string& prefix) const {
    for (Index i = 0; i < heads; ++i) {
      const std::string head = prefix + ".head" + std::to_string(i);
      params.push_back({head + ".query", query[i]});
      params.push_back({head + ".key", key[i]});
      params.push_back({head + ".value", value[i]});
    }
    params.push_back({prefix + ".output", output});
  }
};

/// Self-attention over x [L x d_model] or [B x L x d_model]; Q = K = V = x.
template <typename Scalar>
Tensor<Scalar> multi_head_attention(const Tensor<Scalar>& x, const AttentionHeadSet<Scalar>& heads) {
  if (x.rank() == 2) {
    return reshape(multi_head_attention(reshape(x, {1, x.dim(0), x.dim(1)}), heads), x.shape());
  }
  detail::require_rank("multi_head_attention", x.shape(), 3);
  const Index batch = x.dim(0), len = x.dim(1), width = x.dim(2);
  if (width != heads.model_dim()) throw detail::mismatch("multi_head_attention", x.shape(), heads.output.shape());
  auto rows = reshape(x, {batch * len, width});
  std::vector<Tensor<Scalar>> outputs;
  outputs.reserve(heads.heads);
  for (Index i = 0; i < heads.heads; ++i) {
    const Shape head_shape{batch, len, heads.key_dim};
    auto q = reshape(matmul(rows, heads.query[i]), head_shape);
    auto k = reshape(matmul(rows, heads.key[i]), head_shape);
    auto v = reshape(matmul(rows, heads.value[i]), head_shape);
    outputs.push_back(scaled_dot_product_attention(q, k, v));
  }
  auto joined = outputs.size() == 1 ? outputs.front() : concat_last(outputs);
  return reshape(matmul(reshape(joined, {batch * len, heads.heads * heads.key_dim}), heads.output),
                 {batch, len, width});
}

/// relu(x W1 + b1) W2 + b2, independently per position.
template <typename Scalar>
Tensor<Scalar> position_wise_ffn(const Tensor<Scalar>& x, const DenseLayer<Scalar>& d1, const DenseLayer<Scalar>& d2) {
  if (x.rank() < 1 || x.shape().back() != d1.in_features() || d1.out_features() != d2.in_features() ||
      d2.out_features() != d1.in_features()) {
    throw detail::mismatch("position_wise_ffn", x.shape(), d1.weight.shape());
  }
  if (x.rank() == 1) return reshape(d2(relu(d1(reshape(x, {1, x.dim(0)})))), x.shape());
  return d2(relu(d1(x)));
}

}  // namespace cdformer
