// Subscale ordering: slicing an image into S*S interleaved sub-images, the
// meta-position order they are generated in, and the fixed-layout context
// window that conditions each target slice on the slices before it.

#pragma once

#include <compare>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace spn {

inline constexpr int kChannels = 3;

// Integer image, H x W x 3, values in [0, 2^depth). Layout (h, w, c).
class ImageTensor {
 public:
  ImageTensor() = default;
  ImageTensor(int height, int width, int depth);
  ImageTensor(int height, int width, int depth, std::vector<std::uint8_t> values);

  int height() const { return height_; }
  int width() const { return width_; }
  int depth() const { return depth_; }
  int levels() const { return 1 << depth_; }

  std::uint8_t at(int h, int w, int c) const { return values_[index(h, w, c)]; }
  void set(int h, int w, int c, int v);

  const std::vector<std::uint8_t>& values() const { return values_; }
  std::size_t index(int h, int w, int c) const {
    return (static_cast<std::size_t>(h) * width_ + w) * kChannels + c;
  }

  bool operator==(const ImageTensor&) const = default;

 private:
  int height_ = 0;
  int width_ = 0;
  int depth_ = 8;
  std::vector<std::uint8_t> values_;
};

struct MetaPosition {
  int i = 0;  // row offset in [0, S)
  int j = 0;  // column offset in [0, S)
  auto operator<=>(const MetaPosition&) const = default;
};

// Relative offset between meta-positions.
struct MetaOffset {
  int di = 0;
  int dj = 0;
  auto operator<=>(const MetaOffset&) const = default;
};

class SubscaleError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Slices of one image indexed by meta-position index i*S + j. A partial grid
// (during sampling or context assembly) has empty entries.
struct SliceGrid {
  int factor = 1;
  int slice_height = 0;
  int slice_width = 0;
  int depth = 8;
  std::vector<std::optional<ImageTensor>> slices;

  int count() const { return factor * factor; }
  int index_of(MetaPosition m) const { return m.i * factor + m.j; }
  MetaPosition position_of(int index) const { return {index / factor, index % factor}; }
  const ImageTensor& slice(MetaPosition m) const;
  bool has(MetaPosition m) const { return slices[index_of(m)].has_value(); }

  static SliceGrid empty(int factor, int slice_height, int slice_width, int depth);
};

// Context for one target slice: one entry per slot of slot_layout(S); an empty
// slot stands for an all-zero padding slice.
struct ContextWindow {
  MetaPosition target;
  int target_index = 0;
  int factor = 1;
  std::vector<MetaOffset> offsets;
  std::vector<std::optional<ImageTensor>> slots;

  int filled() const;
};

SliceGrid deinterleave(const ImageTensor& image, int factor);
ImageTensor interleave(const SliceGrid& grid);

std::vector<MetaPosition> meta_order(int factor);

// The 2S(S-1) offsets (di, dj), di in [-(S-1), 0], dj in [-(S-1), S-1], that
// precede (0, 0) in meta raster order, listed in raster order.
std::vector<MetaOffset> slot_layout(int factor);

// Requires `grid` to hold exactly the slices preceding `target`.
ContextWindow assemble_context(const SliceGrid& grid, MetaPosition target);

// Copy of `grid` holding only the slices before meta index `target_index`.
SliceGrid preceding(const SliceGrid& grid, int target_index);

}  // namespace spn
