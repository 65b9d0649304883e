// The Subscale Pixel Network: a context embedder over preceding slices and a
// hybrid decoder (causal 1D attention feeding a conditional gated PixelCNN)
// for one target slice. The decoder-only variant swaps the embedder for a
// learned constant map and models standalone slices.

#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "spn/nn_blocks.hpp"
#include "spn/subscale.hpp"

namespace spn {

enum class ModelKind { Spn, DecoderOnly };

enum class EmbedderOrder {
  ConvAttentionResidual,  // convs -> self-attention -> residual blocks
  AttentionConvResidual,  // self-attention -> convs -> residual blocks
};

struct SPNConfig {
  ModelKind kind = ModelKind::Spn;
  int factor = 2;  // S
  int slice_height = 8;
  int slice_width = 8;
  int depth = 3;       // modeled bits per channel
  int cond_depth = 0;  // bits of the conditioning image; 0 when not depth upscaling
  bool one_hot_embedding = false;
  bool zero_head = true;
  // Decoder-only training draws only slice (0,0) instead of every position.
  bool first_slice_only = false;

  int embed_conv_layers = 5;
  int embed_channels = 0;  // 0: pixelcnn.conv_channels
  int embed_kernel = 3;
  int embed_residual_blocks = 1;
  int embed_residual_channels = 48;
  nn::AttentionConfig embed_attention{1, 2, 16, 8, 32, nn::AttentionMask::None};
  EmbedderOrder embed_order = EmbedderOrder::ConvAttentionResidual;

  nn::AttentionConfig decoder_attention{1, 2, 16, 8, 32, nn::AttentionMask::CausalShifted};
  nn::PixelCNNParams pixelcnn{4, 48, 48, 3};

  std::uint64_t init_seed = 1;

  int classes() const { return 1 << depth; }
  int image_height() const { return factor * slice_height; }
  int image_width() const { return factor * slice_width; }
  int slice_pixels() const { return slice_height * slice_width; }
  int context_channels() const { return embed_channels > 0 ? embed_channels : pixelcnn.conv_channels; }
  void validate() const;
  bool operator==(const SPNConfig&) const = default;
};

class ModelError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class SpnModel {
 public:
  explicit SpnModel(const SPNConfig& cfg);

  const SPNConfig& config() const { return cfg_; }
  const nn::ParamLayout& layout() const { return layout_; }
  std::vector<ag::Tensor<float>> init_params() const { return layout_.initialize(cfg_.init_seed); }

  // Slice-sized context feature map s, [1, C_s, H', W']. `cond` holds all S*S
  // slices of the conditioning image and must be given iff cond_depth > 0.
  template <typename T>
  ag::Var<T> embed_context(ag::Tape<T>& tape, const nn::Params<T>& p, const ContextWindow& ctx,
                           const SliceGrid* cond) const;

  // Learned constant map used in place of s by the decoder-only model.
  template <typename T>
  ag::Var<T> constant_context(const nn::Params<T>& p) const;

  // Logits [H'*W'*3, K], rows in (h, w, c) order.
  template <typename T>
  ag::Var<T> decode_logits(ag::Tape<T>& tape, const nn::Params<T>& p, const ImageTensor& target,
                           const ag::Var<T>& s) const;

  // Logits for slice `meta_index` of a complete slice grid: context assembly
  // (only from preceding slices) + embedding + decoding. For the decoder-only
  // model the context is the constant map.
  template <typename T>
  ag::Var<T> slice_logits(ag::Tape<T>& tape, const nn::Params<T>& p, const SliceGrid& grid,
                          const SliceGrid* cond, int meta_index) const;

 private:
  SPNConfig cfg_;
  nn::ParamLayout layout_;

  nn::PixelEmbedding pixel_embed_;
  nn::PixelEmbedding cond_embed_;
  nn::MetaEmbedding meta_embed_;
  std::vector<nn::Conv> embed_convs_;
  std::optional<nn::AttentionStack> embed_attention_;
  std::vector<nn::ResidualConvBlock> embed_res_;
  int constant_map_ = -1;

  nn::AttentionStack decoder_attention_;
  nn::PixelCNNStack pixelcnn_;
};

struct SliceNll {
  double nats = 0.0;
  double bits_per_dim = 0.0;
};

// Sum of -log P over the slice's subpixels, accumulated in double.
SliceNll slice_nll(std::span<const float> logits, int classes, const ImageTensor& target);

// Targets in (h, w, c) order.
std::vector<int> slice_targets(const ImageTensor& slice);

}  // namespace spn
