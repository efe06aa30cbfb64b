#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "cdformer/model_config.hpp"
#include "cdformer/nn.hpp"

namespace cdformer {

/// Two 'same'-padded convolutions with batch norm, channel-wise soft
/// thresholding of the second feature map, and a residual connection.
template <typename Scalar>
struct DrsnBlock {
  Conv1dLayer<Scalar> conv1;
  BatchNorm1d<Scalar> bn1;
  Conv1dLayer<Scalar> conv2;
  BatchNorm1d<Scalar> bn2;
  ThresholdGenerator<Scalar> thresholds;
  std::optional<Conv1dLayer<Scalar>> shortcut_conv;  // present iff C_in != C_out
  std::optional<BatchNorm1d<Scalar>> shortcut_bn;

  DrsnBlock() = default;
  DrsnBlock(Index in, Index out, Index kernel, Index reduction, Rng& rng)
      : conv1(in, out, kernel, kernel / 2, false, rng),
        bn1(out),
        conv2(out, out, kernel, kernel / 2, false, rng),
        bn2(out),
        thresholds(out, reduction, rng) {
    if (kernel % 2 == 0) throw ConfigError("DRSN kernel must be odd to preserve sequence length");
    if (in != out) {
      shortcut_conv.emplace(in, out, 1, 0, false, rng);
      shortcut_bn.emplace(out);
    }
  }

  Index in_channels() const { return conv1.in_channels(); }
  Index out_channels() const { return conv1.out_channels(); }

  Tensor<Scalar> shortcut(const Tensor<Scalar>& x, Mode mode) {
    if (!shortcut_conv) {
      if (x.dim(1) != out_channels()) {
        throw ConfigError("DRSN block without shortcut projection needs C_in == C_out");
      }
      return x;
    }
    return (*shortcut_bn)((*shortcut_conv)(x), mode);
  }

  Tensor<Scalar> forward(const Tensor<Scalar>& x, Mode mode) {
    if (x.rank() != 3 || x.dim(1) != in_channels()) throw detail::mismatch("drsn_forward", x.shape(), conv1.weight.shape());
    auto f1 = relu(bn1(conv1(x), mode));
    auto f2 = bn2(conv2(f1), mode);
    auto lambda = generate_thresholds(f2, thresholds);
    auto denoised = soft_threshold(f2, lambda);
    return relu(add(denoised, shortcut(x, mode)));
  }

  void collect(ParamList<Scalar>& params, BufferList<Scalar>& buffers, const std::string& prefix) {
    conv1.collect(params, prefix + ".conv1");
    bn1.collect(params, buffers, prefix + ".bn1");
    conv2.collect(params, prefix + ".conv2");
    bn2.collect(params, buffers, prefix + ".bn2");
    thresholds.collect(params, prefix + ".thresholds");
    if (shortcut_conv) {
      shortcut_conv->collect(params, prefix + ".shortcut_conv");
      shortcut_bn->collect(params, buffers, prefix + ".shortcut_bn");
    }
  }
};

/// Post-norm encoder layer: attention, add & norm, feed-forward, add & norm.
template <typename Scalar>
struct EncoderLayer {
  AttentionHeadSet<Scalar> attention;
  LayerNorm<Scalar> norm1;
  DenseLayer<Scalar> ffn1;
  DenseLayer<Scalar> ffn2;
  LayerNorm<Scalar> norm2;

  EncoderLayer() = default;
  EncoderLayer(Index d_model, Index heads, Index d_ff, Rng& rng)
      : attention(d_model, heads, rng), norm1(d_model), ffn1(d_model, d_ff, rng), ffn2(d_ff, d_model, rng),
        norm2(d_model) {}

  Tensor<Scalar> forward(const Tensor<Scalar>& x) const {
    auto h = norm1(add(x, multi_head_attention(x, attention)));
    return norm2(add(h, position_wise_ffn(h, ffn1, ffn2)));
  }

  void collect(ParamList<Scalar>& params, const std::string& prefix) const {
    attention.collect(params, prefix + ".attention");
    norm1.collect(params, prefix + ".norm1");
    ffn1.collect(params, prefix + ".ffn1");
    ffn2.collect(params, prefix + ".ffn2");
    norm2.collect(params, prefix + ".norm2");
  }
};

/// Fixed sinusoidal position table [L x d].
template <typename Scalar>
RowMat<Scalar> sinusoidal_positions(Index len, Index width) {
  RowMat<Scalar> table(len, width);
  for (Index pos = 0; pos < len; ++pos) {
    for (Index i = 0; i < width; ++i) {
      const double rate = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(width));
      const double angle = static_cast<double>(pos) * rate;
      table(pos, i) = static_cast<Scalar>(i % 2 == 0 ? std::sin(angle) : std::cos(angle));
    }
  }
  return table;
}

/// The full network and its ablation variants. The layers a variant does not
/// use stay empty.
template <typename Scalar>
class CdformerModel {
 public:
  explicit CdformerModel(const ModelConfig& config) : config_(config) {
    config_.validate();
    Rng rng(config_.init_seed);
    const Index window = config_.window_len;
    const Index channels = config_.cnn_channels;
    switch (config_.variant) {
      case Variant::baseline_fc:
        flat1_ = DenseLayer<Scalar>(config_.input_channels * window, config_.d_model, rng);
        flat2_ = DenseLayer<Scalar>(config_.d_model, config_.d_model, rng);
        break;
      case Variant::cnn_fc:
        build_stem(rng);
        flat1_ = DenseLayer<Scalar>(channels * window, config_.d_model, rng);
        break;
      case Variant::cnn_transformer:
      case Variant::cdformer:
        build_stem(rng);
        if (config_.variant == Variant::cdformer) {
          for (int i = 0; i < config_.drsn_blocks; ++i) {
            blocks_.emplace_back(channels, channels, config_.cnn_kernel, config_.threshold_reduction, rng);
          }
        }
        projection_ = Conv1dLayer<Scalar>(channels, config_.d_model, 1, 0, true, rng);
        for (int i = 0; i < config_.encoder_layers; ++i) {
          encoder_.emplace_back(config_.d_model, config_.heads, config_.d_ff, rng);
        }
        positions_ = sinusoidal_positions<Scalar>(window, config_.d_model);
        break;
    }
    head1_ = DenseLayer<Scalar>(config_.d_model, config_.reg_hidden, rng);
    head2_ = DenseLayer<Scalar>(config_.reg_hidden, 1, rng);
  }

  const ModelConfig& config() const { return config_; }

  /// x [B x C_in x L] -> [B] next-cycle capacity in normalised units.
  Tensor<Scalar> forward(const Tensor<Scalar>& x, Mode mode) {
    if (x.rank() != 3 || x.dim(1) != config_.input_channels || x.dim(2) != config_.window_len) {
      throw DimensionError("model input must be [B x " + std::to_string(config_.input_channels) + " x " +
                           std::to_string(config_.window_len) + "], got " + shape_string(x.shape()));
    }
    auto z = features(x, mode);
    auto out = head2_(relu(head1_(z)));
    out = reshape(out, {x.dim(0)});
    return config_.output_relu ? relu(out) : out;
  }

  /// Representation fed to the regression head, [B x d_model].
  Tensor<Scalar> features(const Tensor<Scalar>& x, Mode mode) {
    switch (config_.variant) {
      case Variant::baseline_fc:
        return relu(flat2_(relu(flat1_(flatten(x)))));
      case Variant::cnn_fc:
        return relu(flat1_(flatten(stem(x, mode))));
      default:
        break;
    }
    auto h = stem(x, mode);
    for (auto& block : blocks_) h = block.forward(h, mode);
    return take_step(encode(swap_last_axes(projection_(h))), -1);
  }

  /// Positional encoding followed by the encoder stack on [B x L x d_model].
  Tensor<Scalar> encode(const Tensor<Scalar>& seq) const {
    auto h = seq;
    if (config_.positional_encoding) {
      const Index batch = seq.dim(0), len = seq.dim(1), width = seq.dim(2);
      Vec<Scalar> table(seq.size());
      for (Index b = 0; b < batch; ++b) {
        MatMap<Scalar>(table.data() + b * len * width, len, width) = positions_.topRows(len);
      }
      h = add(h, Tensor<Scalar>(seq.shape(), std::move(table)));
    }
    for (const auto& layer : encoder_) h = layer.forward(h);
    return h;
  }

  ParamList<Scalar> parameters() {
    ParamList<Scalar> params;
    BufferList<Scalar> buffers;
    collect(params, buffers);
    return params;
  }

  BufferList<Scalar> buffers() {
    ParamList<Scalar> params;
    BufferList<Scalar> buffers;
    collect(params, buffers);
    return buffers;
  }

  Index parameter_count() {
    Index total = 0;
    for (const auto& p : parameters()) total += p.tensor.size();
    return total;
  }

  void zero_grad() {
    for (auto& p : parameters()) p.tensor.zero_grad();
  }

  std::vector<DrsnBlock<Scalar>>& blocks() { return blocks_; }
  std::vector<EncoderLayer<Scalar>>& encoder() { return encoder_; }

 private:
  void build_stem(Rng& rng) {
    stem_conv_ = Conv1dLayer<Scalar>(config_.input_channels, config_.cnn_channels, config_.cnn_kernel,
                                     config_.cnn_kernel / 2, false, rng);
    stem_bn_ = BatchNorm1d<Scalar>(config_.cnn_channels);
    has_stem_ = true;
  }

  Tensor<Scalar> stem(const Tensor<Scalar>& x, Mode mode) { return relu(stem_bn_(stem_conv_(x), mode)); }

  void collect(ParamList<Scalar>& params, BufferList<Scalar>& buffers) {
    if (has_stem_) {
      stem_conv_.collect(params, "stem.conv");
      stem_bn_.collect(params, buffers, "stem.bn");
    }
    for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].collect(params, buffers, "drsn" + std::to_string(i));
    if (projection_.weight.defined()) projection_.collect(params, "projection");
    for (std::size_t i = 0; i < encoder_.size(); ++i) encoder_[i].collect(params, "encoder" + std::to_string(i));
    if (flat1_.weight.defined()) flat1_.collect(params, "flat1");
    if (flat2_.weight.defined()) flat2_.collect(params, "flat2");
    head1_.collect(params, "head1");
    head2_.collect(params, "head2");
  }

  ModelConfig config_;
  bool has_stem_ = false;
  Conv1dLayer<Scalar> stem_conv_;
  BatchNorm1d<Scalar> stem_bn_;
  std::vector<DrsnBlock<Scalar>> blocks_;
  Conv1dLayer<Scalar> projection_;
  std::vector<EncoderLayer<Scalar>> encoder_;
  RowMat<Scalar> positions_;
  DenseLayer<Scalar> flat1_;
  DenseLayer<Scalar> flat2_;
  DenseLayer<Scalar> head1_;
  DenseLayer<Scalar> head2_;
};

/// Builds the configured variant; validates the config first.
template <typename Scalar>
CdformerModel<Scalar> build_variant(const ModelConfig& config) {
  return CdformerModel<Scalar>(config);
}

}  // namespace cdformer
