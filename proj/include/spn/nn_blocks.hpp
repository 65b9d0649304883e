// Neural building blocks. Each block declares its parameters into a
// ParamLayout at construction and runs on parameters bound to a tape, in
// layout order, so the same block serves float training and double gradient
// checks.

#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "spn/autograd.hpp"
#include "spn/subscale.hpp"

namespace spn::nn {

using ag::Mask;
using ag::Shape;
using ag::Tape;
using ag::Tensor;
using ag::Var;

template <typename T>
using Params = std::vector<Var<T>>;

enum class Init { Zero, One, Normal };

struct ParamSpec {
  std::string name;
  Shape shape;
  Init init = Init::Normal;
  float stddev = 0.0f;
};

class ParamLayout {
 public:
  int add(std::string name, Shape shape, Init init, float stddev = 0.0f);
  const std::vector<ParamSpec>& specs() const { return specs_; }
  std::size_t size() const { return specs_.size(); }
  std::size_t parameter_count() const;
  // Index of the parameter called `name`; throws if absent.
  int index(const std::string& name) const;
  std::vector<Tensor<float>> initialize(std::uint64_t seed) const;

 private:
  std::vector<ParamSpec> specs_;
};

template <typename T>
Params<T> bind_params(Tape<T>& tape, const std::vector<Tensor<T>>& values, bool requires_grad);

// Pixel embedding width per channel.
inline constexpr int kEmbedWidth = 8;
inline constexpr int kMetaWidth = 8;

enum class MaskType { A, B };

// Raster + channel-group causal mask for a [out, in, k, k] kernel. Channels
// of both sides are split into R/G/B thirds. Rows above and taps left of the
// center are open; at the center, output group g sees input groups < g (A)
// or <= g (B).
Mask causal_mask(int out_channels, int in_channels, int kernel, MaskType type);

// Intensity embedding shared by R, G and B: values [npix * 3] ((h,w,c) order)
// -> [npix, 24]. One-hot mode uses a fixed identity table and needs 8 levels.
class PixelEmbedding {
 public:
  PixelEmbedding() = default;
  PixelEmbedding(ParamLayout& layout, const std::string& prefix, int levels, bool one_hot);

  template <typename T>
  Var<T> forward(Tape<T>& tape, const Params<T>& p, std::span<const std::uint8_t> values) const;

  int levels() const { return levels_; }

 private:
  int table_ = -1;
  int levels_ = 0;
  bool one_hot_ = false;
};

// Meta-position embedding row tiled over the slice: -> [8, height, width].
class MetaEmbedding {
 public:
  MetaEmbedding() = default;
  MetaEmbedding(ParamLayout& layout, const std::string& prefix, int positions);

  template <typename T>
  Var<T> forward(const Params<T>& p, int index, int height, int width) const;

 private:
  int table_ = -1;
  int positions_ = 0;
};

class Conv {
 public:
  Conv() = default;
  // Unmasked convolution; `zero_init` zeroes weight and bias.
  Conv(ParamLayout& layout, const std::string& prefix, int in, int out, int kernel,
       bool zero_init = false);
  // Causal masked convolution.
  Conv(ParamLayout& layout, const std::string& prefix, int in, int out, int kernel,
       MaskType type, bool zero_init = false);

  template <typename T>
  Var<T> forward(const Params<T>& p, const Var<T>& x) const;

  const Mask* mask() const { return masked_ ? &mask_ : nullptr; }

 private:
  int weight_ = -1;
  int bias_ = -1;
  bool masked_ = false;
  Mask mask_;
};

// x + conv(relu(conv(x))), unmasked, hidden width `residual_channels`.
class ResidualConvBlock {
 public:
  ResidualConvBlock() = default;
  ResidualConvBlock(ParamLayout& layout, const std::string& prefix, int channels,
                    int residual_channels, int kernel, bool zero_init_output = false);

  template <typename T>
  Var<T> forward(const Params<T>& p, const Var<T>& x) const;

 private:
  Conv inner_;
  Conv outer_;
};

enum class AttentionMask { CausalShifted, None };

struct AttentionConfig {
  int layers = 1;
  int heads = 2;
  int model_width = 16;
  int head_width = 8;
  int ffn_width = 32;
  AttentionMask mask = AttentionMask::CausalShifted;

  void validate() const;
  bool operator==(const AttentionConfig&) const = default;
};

// Pre-norm transformer stack over a token sequence [T, in] -> [T, out], with
// learned positional embeddings. In CausalShifted mode the input is shifted
// right by one token behind a learned start token, so output t depends only
// on inputs 0..t-1.
class AttentionStack {
 public:
  AttentionStack() = default;
  AttentionStack(ParamLayout& layout, const std::string& prefix, const AttentionConfig& cfg,
                 int tokens, int in_width, int out_width);

  template <typename T>
  Var<T> forward(const Params<T>& p, const Var<T>& x) const;

 private:
  struct Layer {
    int ln1_g, ln1_b, wq, wk, wv, wo, bo, ln2_g, ln2_b, ff1_w, ff1_b, ff2_w, ff2_b;
  };
  AttentionConfig cfg_;
  int tokens_ = 0;
  int start_ = -1;
  int in_w_ = -1, in_b_ = -1, pos_ = -1;
  std::vector<Layer> layers_;
  int lnf_g_ = -1, lnf_b_ = -1, out_w_ = -1, out_b_ = -1;
};

// y = tanh(Wf * x + Vf s) . sigmoid(Wg * x + Vg s), Wf/Wg causal masked convs
// and Vf/Vg 1x1 maps of the conditioning map s.
class GatedPixelCNNLayer {
 public:
  GatedPixelCNNLayer() = default;
  GatedPixelCNNLayer(ParamLayout& layout, const std::string& prefix, int in, int out,
                     int cond, int kernel, MaskType type);

  template <typename T>
  Var<T> forward(const Params<T>& p, const Var<T>& x, const Var<T>& s) const;

 private:
  Conv filter_, gate_;
  Conv cond_filter_, cond_gate_;
};

struct PixelCNNParams {
  int layers = 15;
  int conv_channels = 48;
  int residual_channels = 48;
  int kernel = 3;

  void validate() const;
  bool operator==(const PixelCNNParams&) const = default;
};

// Gated PixelCNN stack mapping the embedded target [1, 24, H, W] and the
// conditioning map [1, cond, H, W] to logits [1, 3K, H, W] grouped R, G, B.
class PixelCNNStack {
 public:
  PixelCNNStack() = default;
  PixelCNNStack(ParamLayout& layout, const std::string& prefix, const PixelCNNParams& cfg,
                int in_channels, int cond_channels, int classes, bool zero_head);

  template <typename T>
  Var<T> forward(const Params<T>& p, const Var<T>& x, const Var<T>& s) const;

 private:
  std::vector<GatedPixelCNNLayer> gated_;
  std::vector<Conv> proj_;
  Conv head_;
};

// (position, channel) of a subpixel in raster/channel order.
struct Coord {
  int position = 0;
  int channel = 0;
  auto operator<=>(const Coord&) const = default;
};

// Logits [positions * 3 * K] of a deterministic slice decoder, for a slice.
using SliceLogitsFn = std::function<std::vector<float>(const ImageTensor& slice)>;

// Input coordinates whose perturbation changes any logit of (position,
// channel). Every alternative value of every coordinate is tried.
std::vector<Coord> masked_dependency_probe(const SliceLogitsFn& decoder, const ImageTensor& base,
                                           int position, int channel);

// Dependency sets for all (position, channel) outputs at once, indexed by
// position * 3 + channel.
std::vector<std::vector<Coord>> dependency_map(const SliceLogitsFn& decoder,
                                               const ImageTensor& base);

}  // namespace spn::nn
