#include "spn/nn_blocks.hpp"

#include <cmath>
#include <random>
#include <set>

namespace spn::nn {

int ParamLayout::add(std::string name, Shape shape, Init init, float stddev) {
  specs_.push_back({std::move(name), std::move(shape), init, stddev});
  return static_cast<int>(specs_.size() - 1);
}

std::size_t ParamLayout::parameter_count() const {
  std::size_t n = 0;
  for (const auto& s : specs_) n += ag::numel(s.shape);
  return n;
}

int ParamLayout::index(const std::string& name) const {
  for (std::size_t i = 0; i < specs_.size(); ++i) {
    if (specs_[i].name == name) return static_cast<int>(i);
  }
  throw std::out_of_range("no parameter named " + name);
}

std::vector<Tensor<float>> ParamLayout::initialize(std::uint64_t seed) const {
  std::mt19937_64 rng(seed);
  std::vector<Tensor<float>> out;
  out.reserve(specs_.size());
  for (const auto& s : specs_) {
    Tensor<float> t(s.shape);
    switch (s.init) {
      case Init::Zero:
        break;
      case Init::One:
        std::fill(t.data.begin(), t.data.end(), 1.0f);
        break;
      case Init::Normal: {
        std::normal_distribution<float> n(0.0f, s.stddev);
        for (auto& x : t.data) x = n(rng);
        break;
      }
    }
    out.push_back(std::move(t));
  }
  return out;
}

template <typename T>
Params<T> bind_params(Tape<T>& tape, const std::vector<Tensor<T>>& values, bool requires_grad) {
  Params<T> p;
  p.reserve(values.size());
  for (const auto& v : values) p.push_back(tape.bind(v, requires_grad));
  return p;
}

Mask causal_mask(int out_channels, int in_channels, int kernel, MaskType type) {
  if (out_channels % 3 != 0 || in_channels % 3 != 0) {
    throw std::invalid_argument("channel-group masking needs channel counts divisible by 3");
  }
  Mask m({out_channels, in_channels, kernel, kernel}, std::uint8_t{0});
  const int center = (kernel - 1) / 2;
  const int out_group = out_channels / 3, in_group = in_channels / 3;
  for (int o = 0; o < out_channels; ++o) {
    for (int c = 0; c < in_channels; ++c) {
      for (int ky = 0; ky < kernel; ++ky) {
        for (int kx = 0; kx < kernel; ++kx) {
          bool open = ky < center || (ky == center && kx < center);
          if (ky == center && kx == center) {
            const int go = o / out_group, gi = c / in_group;
            open = type == MaskType::A ? gi < go : gi <= go;
          }
          m.data[((static_cast<std::size_t>(o) * in_channels + c) * kernel + ky) * kernel + kx] =
              open ? 1 : 0;
        }
      }
    }
  }
  return m;
}

// ---- embeddings -----------------------------------------------------------

PixelEmbedding::PixelEmbedding(ParamLayout& layout, const std::string& prefix, int levels,
                               bool one_hot)
    : levels_(levels), one_hot_(one_hot) {
  if (one_hot) {
    if (levels != kEmbedWidth) {
      throw std::invalid_argument("one-hot pixel embedding needs exactly 8 levels (3-bit data)");
    }
    return;
  }
  table_ = layout.add(prefix + ".table", {levels, kEmbedWidth}, Init::Normal, 1.0f);
}

template <typename T>
Var<T> PixelEmbedding::forward(Tape<T>& tape, const Params<T>& p,
                               std::span<const std::uint8_t> values) const {
  if (values.empty() || values.size() % kChannels != 0) {
    throw ag::ShapeError("pixel embedding expects whole RGB pixels");
  }
  std::vector<int> ids(values.begin(), values.end());
  for (int id : ids) {
    if (id >= levels_) {
      throw std::out_of_range("pixel value " + std::to_string(id) + " outside " +
                              std::to_string(levels_) + " levels");
    }
  }
  Var<T> table;
  if (one_hot_) {
    Tensor<T> eye({kEmbedWidth, kEmbedWidth});
    for (int i = 0; i < kEmbedWidth; ++i) eye.data[i * kEmbedWidth + i] = T(1);
    table = tape.constant(std::move(eye));
  } else {
    table = p[table_];
  }
  const int pixels = static_cast<int>(values.size() / kChannels);
  return ag::reshape(ag::embed_lookup(table, ids), {pixels, kChannels * kEmbedWidth});
}

MetaEmbedding::MetaEmbedding(ParamLayout& layout, const std::string& prefix, int positions)
    : positions_(positions) {
  table_ = layout.add(prefix + ".table", {positions, kMetaWidth}, Init::Normal, 1.0f);
}

template <typename T>
Var<T> MetaEmbedding::forward(const Params<T>& p, int index, int height, int width) const {
  if (index < 0 || index >= positions_) {
    throw std::out_of_range("meta index " + std::to_string(index) + " outside [0," +
                            std::to_string(positions_) + ")");
  }
  std::vector<int> id{index};
  auto row = ag::reshape(ag::embed_lookup(p[table_], id), {kMetaWidth});
  return ag::tile_spatial(row, height, width);
}

// ---- convolutions -----------------------------------------------------------

Conv::Conv(ParamLayout& layout, const std::string& prefix, int in, int out, int kernel,
           bool zero_init) {
  const float sd = 1.0f / std::sqrt(static_cast<float>(in * kernel * kernel));
  weight_ = layout.add(prefix + ".w", {out, in, kernel, kernel}, zero_init ? Init::Zero : Init::Normal, sd);
  bias_ = layout.add(prefix + ".b", {out}, Init::Zero);
}

Conv::Conv(ParamLayout& layout, const std::string& prefix, int in, int out, int kernel,
           MaskType type, bool zero_init)
    : Conv(layout, prefix, in, out, kernel, zero_init) {
  masked_ = true;
  mask_ = causal_mask(out, in, kernel, type);
}

template <typename T>
Var<T> Conv::forward(const Params<T>& p, const Var<T>& x) const {
  if (masked_) return ag::conv2d_masked(x, p[weight_], mask_, p[bias_]);
  return ag::conv2d(x, p[weight_], p[bias_]);
}

ResidualConvBlock::ResidualConvBlock(ParamLayout& layout, const std::string& prefix, int channels,
                                     int residual_channels, int kernel, bool zero_init_output)
    : inner_(layout, prefix + ".conv1", channels, residual_channels, kernel),
      outer_(layout, prefix + ".conv2", residual_channels, channels, kernel, zero_init_output) {}

template <typename T>
Var<T> ResidualConvBlock::forward(const Params<T>& p, const Var<T>& x) const {
  return ag::add(x, outer_.forward(p, ag::relu(inner_.forward(p, x))));
}

// ---- attention --------------------------------------------------------------

void AttentionConfig::validate() const {
  if (layers < 0 || heads < 1 || head_width < 1 || ffn_width < 1) {
    throw std::invalid_argument("attention config has non-positive extents");
  }
  if (heads * head_width != model_width) {
    throw std::invalid_argument("attention heads * head_width must equal model_width");
  }
}

AttentionStack::AttentionStack(ParamLayout& layout, const std::string& prefix,
                               const AttentionConfig& cfg, int tokens, int in_width,
                               int out_width)
    : cfg_(cfg), tokens_(tokens) {
  cfg.validate();
  const int w = cfg.model_width;
  auto sd = [](int fan_in) { return 1.0f / std::sqrt(static_cast<float>(fan_in)); };
  if (cfg.mask == AttentionMask::CausalShifted) {
    start_ = layout.add(prefix + ".start", {in_width}, Init::Normal, 1.0f);
  }
  in_w_ = layout.add(prefix + ".in.w", {in_width, w}, Init::Normal, sd(in_width));
  in_b_ = layout.add(prefix + ".in.b", {w}, Init::Zero);
  pos_ = layout.add(prefix + ".pos", {tokens, w}, Init::Normal, 0.1f);
  for (int l = 0; l < cfg.layers; ++l) {
    const std::string lp = prefix + ".layer" + std::to_string(l);
    Layer L{};
    L.ln1_g = layout.add(lp + ".ln1.g", {w}, Init::One);
    L.ln1_b = layout.add(lp + ".ln1.b", {w}, Init::Zero);
    L.wq = layout.add(lp + ".wq", {w, w}, Init::Normal, sd(w));
    L.wk = layout.add(lp + ".wk", {w, w}, Init::Normal, sd(w));
    L.wv = layout.add(lp + ".wv", {w, w}, Init::Normal, sd(w));
    L.wo = layout.add(lp + ".wo", {w, w}, Init::Normal, sd(w));
    L.bo = layout.add(lp + ".bo", {w}, Init::Zero);
    L.ln2_g = layout.add(lp + ".ln2.g", {w}, Init::One);
    L.ln2_b = layout.add(lp + ".ln2.b", {w}, Init::Zero);
    L.ff1_w = layout.add(lp + ".ff1.w", {w, cfg.ffn_width}, Init::Normal, sd(w));
    L.ff1_b = layout.add(lp + ".ff1.b", {cfg.ffn_width}, Init::Zero);
    L.ff2_w = layout.add(lp + ".ff2.w", {cfg.ffn_width, w}, Init::Normal, sd(cfg.ffn_width));
    L.ff2_b = layout.add(lp + ".ff2.b", {w}, Init::Zero);
    layers_.push_back(L);
  }
  lnf_g_ = layout.add(prefix + ".lnf.g", {w}, Init::One);
  lnf_b_ = layout.add(prefix + ".lnf.b", {w}, Init::Zero);
  out_w_ = layout.add(prefix + ".out.w", {w, out_width}, Init::Normal, sd(w));
  out_b_ = layout.add(prefix + ".out.b", {out_width}, Init::Zero);
}

template <typename T>
Var<T> AttentionStack::forward(const Params<T>& p, const Var<T>& x) const {
  const auto& s = x.shape();
  if (s.size() != 2 || s[0] != tokens_) {
    throw ag::ShapeError("attention stack expects [" + std::to_string(tokens_) + ", D] tokens, got " +
                         ag::shape_str(s));
  }
  Var<T> in = x;
  const bool causal = cfg_.mask == AttentionMask::CausalShifted;
  if (causal) {
    auto start = ag::reshape(p[start_], {1, s[1]});
    in = tokens_ == 1 ? start : ag::concat<T>({start, ag::rows(x, 0, tokens_ - 1)}, 0);
  }
  Var<T> h = ag::add(ag::linear(in, p[in_w_], p[in_b_]), p[pos_]);
  for (const auto& L : layers_) {
    auto a = ag::layer_norm(h, p[L.ln1_g], p[L.ln1_b]);
    auto q = ag::linear(a, p[L.wq], Var<T>());
    auto k = ag::linear(a, p[L.wk], Var<T>());
    auto v = ag::linear(a, p[L.wv], Var<T>());
    auto att = ag::attention(q, k, v, cfg_.heads, causal);
    h = ag::add(h, ag::linear(att, p[L.wo], p[L.bo]));
    auto b = ag::layer_norm(h, p[L.ln2_g], p[L.ln2_b]);
    auto ff = ag::linear(ag::relu(ag::linear(b, p[L.ff1_w], p[L.ff1_b])), p[L.ff2_w], p[L.ff2_b]);
    h = ag::add(h, ff);
  }
  return ag::linear(ag::layer_norm(h, p[lnf_g_], p[lnf_b_]), p[out_w_], p[out_b_]);
}

// ---- gated PixelCNN -----------------------------------------------------------

GatedPixelCNNLayer::GatedPixelCNNLayer(ParamLayout& layout, const std::string& prefix, int in,
                                       int out, int cond, int kernel, MaskType type)
    : filter_(layout, prefix + ".wf", in, out, kernel, type),
      gate_(layout, prefix + ".wg", in, out, kernel, type),
      cond_filter_(layout, prefix + ".vf", cond, out, 1),
      cond_gate_(layout, prefix + ".vg", cond, out, 1) {}

template <typename T>
Var<T> GatedPixelCNNLayer::forward(const Params<T>& p, const Var<T>& x, const Var<T>& s) const {
  const auto& xs = x.shape();
  const auto& ss = s.shape();
  if (xs.size() != 4 || ss.size() != 4 || xs[0] != ss[0] || xs[2] != ss[2] || xs[3] != ss[3]) {
    throw ag::ShapeError("gated layer: conditioning map " + ag::shape_str(ss) +
                         " not aligned with features " + ag::shape_str(xs));
  }
  auto f = ag::add(filter_.forward(p, x), cond_filter_.forward(p, s));
  auto g = ag::add(gate_.forward(p, x), cond_gate_.forward(p, s));
  return ag::mul(ag::tanh(f), ag::sigmoid(g));
}

void PixelCNNParams::validate() const {
  if (layers < 1 || kernel < 1 || kernel % 2 == 0) {
    throw std::invalid_argument("pixelcnn needs >= 1 layer and an odd kernel");
  }
  if (conv_channels % 3 != 0 || residual_channels % 3 != 0 || conv_channels < 3 ||
      residual_channels < 3) {
    throw std::invalid_argument("pixelcnn channel counts must be positive multiples of 3");
  }
}

PixelCNNStack::PixelCNNStack(ParamLayout& layout, const std::string& prefix,
                             const PixelCNNParams& cfg, int in_channels, int cond_channels,
                             int classes, bool zero_head) {
  cfg.validate();
  for (int l = 0; l < cfg.layers; ++l) {
    const std::string lp = prefix + ".layer" + std::to_string(l);
    const int in = l == 0 ? in_channels : cfg.conv_channels;
    gated_.emplace_back(layout, lp, in, cfg.residual_channels, cond_channels, cfg.kernel,
                        l == 0 ? MaskType::A : MaskType::B);
    proj_.emplace_back(layout, lp + ".proj", cfg.residual_channels, cfg.conv_channels, 1,
                       MaskType::B);
  }
  head_ = Conv(layout, prefix + ".head", cfg.conv_channels, kChannels * classes, 1, MaskType::B,
               zero_head);
}

template <typename T>
Var<T> PixelCNNStack::forward(const Params<T>& p, const Var<T>& x, const Var<T>& s) const {
  Var<T> h = proj_[0].forward(p, gated_[0].forward(p, x, s));
  for (std::size_t l = 1; l < gated_.size(); ++l) {
    h = ag::add(h, proj_[l].forward(p, gated_[l].forward(p, h, s)));
  }
  return head_.forward(p, ag::relu(h));
}

// ---- dependency probing ---------------------------------------------------------

namespace {

std::vector<std::vector<Coord>> probe(const SliceLogitsFn& decoder, const ImageTensor& base,
                                      int only_row) {
  const int positions = base.height() * base.width();
  const int rows = positions * kChannels;
  const auto reference = decoder(base);
  if (reference.size() % rows != 0) throw ag::ShapeError("probe: logits size mismatch");
  const std::size_t classes = reference.size() / rows;
  std::vector<std::set<Coord>> deps(rows);
  for (int pos = 0; pos < positions; ++pos) {
    for (int c = 0; c < kChannels; ++c) {
      const int h = pos / base.width(), w = pos % base.width();
      for (int v = 0; v < base.levels(); ++v) {
        if (v == base.at(h, w, c)) continue;
        ImageTensor perturbed = base;
        perturbed.set(h, w, c, v);
        const auto out = decoder(perturbed);
        for (int r = 0; r < rows; ++r) {
          if (only_row >= 0 && r != only_row) continue;
          for (std::size_t k = 0; k < classes; ++k) {
            if (out[r * classes + k] != reference[r * classes + k]) {
              deps[r].insert({pos, c});
              break;
            }
          }
        }
      }
    }
  }
  std::vector<std::vector<Coord>> result(rows);
  for (int r = 0; r < rows; ++r) result[r].assign(deps[r].begin(), deps[r].end());
  return result;
}

}  // namespace

std::vector<Coord> masked_dependency_probe(const SliceLogitsFn& decoder, const ImageTensor& base,
                                           int position, int channel) {
  const int row = position * kChannels + channel;
  if (position < 0 || position >= base.height() * base.width() || channel < 0 ||
      channel >= kChannels) {
    throw std::out_of_range("probe target outside the slice");
  }
  return probe(decoder, base, row)[row];
}

std::vector<std::vector<Coord>> dependency_map(const SliceLogitsFn& decoder,
                                               const ImageTensor& base) {
  return probe(decoder, base, -1);
}

#define SPN_NN_INSTANTIATE(T)                                                                  \
  template Params<T> bind_params(Tape<T>&, const std::vector<Tensor<T>>&, bool);               \
  template Var<T> PixelEmbedding::forward(Tape<T>&, const Params<T>&,                          \
                                          std::span<const std::uint8_t>) const;                \
  template Var<T> MetaEmbedding::forward(const Params<T>&, int, int, int) const;               \
  template Var<T> Conv::forward(const Params<T>&, const Var<T>&) const;                        \
  template Var<T> ResidualConvBlock::forward(const Params<T>&, const Var<T>&) const;           \
  template Var<T> AttentionStack::forward(const Params<T>&, const Var<T>&) const;              \
  template Var<T> GatedPixelCNNLayer::forward(const Params<T>&, const Var<T>&, const Var<T>&)  \
      const;                                                                                   \
  template Var<T> PixelCNNStack::forward(const Params<T>&, const Var<T>&, const Var<T>&) const;

SPN_NN_INSTANTIATE(float)
SPN_NN_INSTANTIATE(double)

}  // namespace spn::nn
