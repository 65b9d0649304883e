#include "spn/spn_model.hpp"

#include <cmath>
#include <numbers>

namespace spn {

using ag::Tape;
using ag::Tensor;
using ag::Var;

void SPNConfig::validate() const {
  if (factor < 1) throw ModelError("S must be >= 1");
  if (slice_height < 1 || slice_width < 1) throw ModelError("slice extents must be >= 1");
  if (depth < 1 || depth > 8) throw ModelError("depth must be in [1, 8]");
  if (cond_depth < 0 || cond_depth + depth > 8) throw ModelError("cond_depth + depth must be <= 8");
  if (kind == ModelKind::DecoderOnly && cond_depth > 0) {
    throw ModelError("the decoder-only model takes no conditioning image");
  }
  if (one_hot_embedding && (depth != 3 || (cond_depth != 0 && cond_depth != 3))) {
    throw ModelError("one-hot embedding is only defined for 3-bit data");
  }
  if (embed_conv_layers < 1) throw ModelError("embedder needs at least one conv layer");
  if (embed_kernel % 2 == 0) throw ModelError("embedder kernel must be odd");
  if (embed_residual_blocks < 0 || embed_residual_channels < 1) {
    throw ModelError("invalid embedder residual settings");
  }
  if (context_channels() < 1) throw ModelError("context width must be >= 1");
  embed_attention.validate();
  decoder_attention.validate();
  pixelcnn.validate();
}

SpnModel::SpnModel(const SPNConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  auto& L = layout_;
  const int cs = cfg_.context_channels();
  const int tokens = cfg_.slice_pixels();
  const int pix_width = kChannels * nn::kEmbedWidth;

  pixel_embed_ = nn::PixelEmbedding(L, "pixel_embed", cfg_.classes(), cfg_.one_hot_embedding);

  if (cfg_.kind == ModelKind::Spn) {
    if (cfg_.cond_depth > 0) {
      cond_embed_ = nn::PixelEmbedding(L, "cond_embed", 1 << cfg_.cond_depth, cfg_.one_hot_embedding);
    }
    meta_embed_ = nn::MetaEmbedding(L, "meta_embed", cfg_.factor * cfg_.factor);
    const int slots = static_cast<int>(slot_layout(cfg_.factor).size());
    const int cond_slices = cfg_.cond_depth > 0 ? cfg_.factor * cfg_.factor : 0;
    const int in_channels = pix_width * (slots + cond_slices) + nn::kMetaWidth;

    const bool attention_first = cfg_.embed_order == EmbedderOrder::AttentionConvResidual;
    auto attn_cfg = cfg_.embed_attention;
    attn_cfg.mask = nn::AttentionMask::None;
    if (attn_cfg.layers > 0 && attention_first) {
      embed_attention_.emplace(L, "embed.attention", attn_cfg, tokens, in_channels, in_channels);
    }
    for (int l = 0; l < cfg_.embed_conv_layers; ++l) {
      embed_convs_.emplace_back(L, "embed.conv" + std::to_string(l), l == 0 ? in_channels : cs, cs,
                                cfg_.embed_kernel);
    }
    if (attn_cfg.layers > 0 && !attention_first) {
      embed_attention_.emplace(L, "embed.attention", attn_cfg, tokens, cs, cs);
    }
    for (int r = 0; r < cfg_.embed_residual_blocks; ++r) {
      embed_res_.emplace_back(L, "embed.res" + std::to_string(r), cs, cfg_.embed_residual_channels,
                              cfg_.embed_kernel);
    }
  } else {
    constant_map_ = L.add("constant_map", {1, cs, cfg_.slice_height, cfg_.slice_width},
                          nn::Init::Normal, 1.0f);
  }

  decoder_attention_ = nn::AttentionStack(L, "decoder.attention", cfg_.decoder_attention, tokens,
                                          pix_width, cfg_.decoder_attention.model_width);
  pixelcnn_ = nn::PixelCNNStack(L, "decoder.pixelcnn", cfg_.pixelcnn, pix_width,
                                cfg_.decoder_attention.model_width + cs, cfg_.classes(),
                                cfg_.zero_head);
}

namespace {

// [T, C] tokens <-> [1, C, H, W] maps.
template <typename T>
Var<T> tokens_to_map(const Var<T>& tokens, int height, int width) {
  const int channels = tokens.shape()[1];
  return ag::reshape(ag::transpose(tokens), {1, channels, height, width});
}

template <typename T>
Var<T> map_to_tokens(const Var<T>& map) {
  const auto& s = map.shape();
  return ag::transpose(ag::reshape(map, {s[1], s[2] * s[3]}));
}

template <typename T>
Var<T> attend_residual(const nn::AttentionStack& stack, const nn::Params<T>& p, const Var<T>& map) {
  const auto& s = map.shape();
  auto out = stack.forward(p, map_to_tokens(map));
  return ag::add(map, tokens_to_map(out, s[2], s[3]));
}

}  // namespace

template <typename T>
Var<T> SpnModel::embed_context(Tape<T>& tape, const nn::Params<T>& p, const ContextWindow& ctx,
                               const SliceGrid* cond) const {
  if (cfg_.kind != ModelKind::Spn) throw ModelError("decoder-only model has no context embedder");
  if (ctx.factor != cfg_.factor) throw ModelError("context window built for a different S");
  if ((cond != nullptr) != (cfg_.cond_depth > 0)) {
    throw ModelError(cfg_.cond_depth > 0 ? "depth-upscaling model needs a conditioning image"
                                         : "model takes no conditioning image");
  }
  const int h = cfg_.slice_height, w = cfg_.slice_width;
  const int tokens = h * w;
  const int pix_width = kChannels * nn::kEmbedWidth;

  std::vector<Var<T>> planes;
  auto add_slice = [&](const nn::PixelEmbedding& embed, const ImageTensor& slice) {
    if (slice.height() != h || slice.width() != w) throw ModelError("context slice has wrong size");
    planes.push_back(ag::transpose(embed.forward(tape, p, slice.values())));
  };
  for (const auto& slot : ctx.slots) {
    if (slot) {
      add_slice(pixel_embed_, *slot);
    } else {
      // Padding lives in embedded space: zeros, not pixel value 0.
      planes.push_back(tape.constant(Tensor<T>({pix_width, tokens})));
    }
  }
  if (cond) {
    if (cond->factor != cfg_.factor || cond->depth != cfg_.cond_depth) {
      throw ModelError("conditioning grid does not match model config");
    }
    for (int k = 0; k < cond->count(); ++k) add_slice(cond_embed_, cond->slice(cond->position_of(k)));
  }
  planes.push_back(ag::reshape(meta_embed_.forward(p, ctx.target_index, h, w), {nn::kMetaWidth, tokens}));
  auto stacked = ag::concat(planes, 0);  // [channels, T]
  Var<T> x = ag::reshape(stacked, {1, stacked.shape()[0], h, w});

  const bool attention_first = cfg_.embed_order == EmbedderOrder::AttentionConvResidual;
  if (embed_attention_ && attention_first) x = attend_residual(*embed_attention_, p, x);
  for (const auto& conv : embed_convs_) x = ag::relu(conv.forward(p, x));
  if (embed_attention_ && !attention_first) x = attend_residual(*embed_attention_, p, x);
  for (const auto& block : embed_res_) x = block.forward(p, x);
  return x;
}

template <typename T>
Var<T> SpnModel::constant_context(const nn::Params<T>& p) const {
  if (constant_map_ < 0) throw ModelError("only the decoder-only model has a constant context");
  return p[constant_map_];
}

template <typename T>
Var<T> SpnModel::decode_logits(Tape<T>& tape, const nn::Params<T>& p, const ImageTensor& target,
                               const Var<T>& s) const {
  const int h = cfg_.slice_height, w = cfg_.slice_width;
  if (target.height() != h || target.width() != w) {
    throw ModelError("target slice is " + std::to_string(target.height()) + "x" +
                     std::to_string(target.width()) + ", model expects " + std::to_string(h) + "x" +
                     std::to_string(w));
  }
  if (target.depth() != cfg_.depth) throw ModelError("target slice depth does not match model");
  if (s.shape() != ag::Shape{1, cfg_.context_channels(), h, w}) {
    throw ModelError("context map has shape " + ag::shape_str(s.shape()));
  }
  auto emb = pixel_embed_.forward(tape, p, target.values());  // [T, 24]
  auto att = decoder_attention_.forward(p, emb);              // [T, A]
  auto cond = ag::concat<T>({tokens_to_map(att, h, w), s}, 1);
  auto logits = pixelcnn_.forward(p, tokens_to_map(emb, h, w), cond);  // [1, 3K, H, W]
  const int k = cfg_.classes();
  auto per_pixel = ag::transpose(ag::reshape(logits, {kChannels * k, h * w}));  // [T, 3K]
  return ag::reshape(per_pixel, {h * w * kChannels, k});
}

template <typename T>
Var<T> SpnModel::slice_logits(Tape<T>& tape, const nn::Params<T>& p, const SliceGrid& grid,
                              const SliceGrid* cond, int meta_index) const {
  if (grid.factor != cfg_.factor) throw ModelError("slice grid built for a different S");
  if (meta_index < 0 || meta_index >= grid.count()) throw ModelError("meta index out of range");
  const MetaPosition target = grid.position_of(meta_index);
  Var<T> s;
  if (cfg_.kind == ModelKind::Spn) {
    s = embed_context(tape, p, assemble_context(preceding(grid, meta_index), target), cond);
  } else {
    s = constant_context(p);
  }
  return decode_logits(tape, p, grid.slice(target), s);
}

std::vector<int> slice_targets(const ImageTensor& slice) {
  return std::vector<int>(slice.values().begin(), slice.values().end());
}

SliceNll slice_nll(std::span<const float> logits, int classes, const ImageTensor& target) {
  const auto targets = slice_targets(target);
  const auto rows = ag::cross_entropy_rows<float>(logits, classes, targets);
  SliceNll out;
  for (double r : rows) out.nats += r;
  out.bits_per_dim = out.nats / (static_cast<double>(rows.size()) * std::numbers::ln2);
  return out;
}

#define SPN_MODEL_INSTANTIATE(T)                                                              \
  template Var<T> SpnModel::embed_context(Tape<T>&, const nn::Params<T>&, const ContextWindow&, \
                                          const SliceGrid*) const;                            \
  template Var<T> SpnModel::constant_context(const nn::Params<T>&) const;                     \
  template Var<T> SpnModel::decode_logits(Tape<T>&, const nn::Params<T>&, const ImageTensor&,   \
                                          const Var<T>&) const;                               \
  template Var<T> SpnModel::slice_logits(Tape<T>&, const nn::Params<T>&, const SliceGrid&,      \
                                         const SliceGrid*, int) const;

SPN_MODEL_INSTANTIATE(float)
SPN_MODEL_INSTANTIATE(double)

}  // namespace spn
