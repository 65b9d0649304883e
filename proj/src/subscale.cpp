#include "spn/subscale.hpp"

namespace spn {

ImageTensor::ImageTensor(int height, int width, int depth)
    : ImageTensor(height, width, depth,
                  std::vector<std::uint8_t>(static_cast<std::size_t>(std::max(height, 0)) *
                                            std::max(width, 0) * kChannels)) {}

ImageTensor::ImageTensor(int height, int width, int depth, std::vector<std::uint8_t> values)
    : height_(height), width_(width), depth_(depth), values_(std::move(values)) {
  if (height < 1 || width < 1) throw std::invalid_argument("image extents must be >= 1");
  if (depth < 1 || depth > 8) {
    throw std::invalid_argument("image depth must be in [1, 8], got " + std::to_string(depth));
  }
  if (values_.size() != static_cast<std::size_t>(height) * width * kChannels) {
    throw std::invalid_argument("image value count does not match geometry");
  }
  for (auto v : values_) {
    if (v >= levels()) {
      throw std::invalid_argument("image value " + std::to_string(v) + " exceeds depth " +
                                  std::to_string(depth));
    }
  }
}

void ImageTensor::set(int h, int w, int c, int v) {
  if (v < 0 || v >= levels()) {
    throw std::out_of_range("value " + std::to_string(v) + " outside depth " +
                            std::to_string(depth_));
  }
  values_[index(h, w, c)] = static_cast<std::uint8_t>(v);
}

const ImageTensor& SliceGrid::slice(MetaPosition m) const {
  const auto& s = slices.at(index_of(m));
  if (!s) {
    throw SubscaleError("slice (" + std::to_string(m.i) + "," + std::to_string(m.j) +
                        ") is missing");
  }
  return *s;
}

SliceGrid SliceGrid::empty(int factor, int slice_height, int slice_width, int depth) {
  if (factor < 1) throw SubscaleError("scaling factor must be >= 1");
  SliceGrid g;
  g.factor = factor;
  g.slice_height = slice_height;
  g.slice_width = slice_width;
  g.depth = depth;
  g.slices.resize(static_cast<std::size_t>(factor) * factor);
  return g;
}

int ContextWindow::filled() const {
  int n = 0;
  for (const auto& s : slots) n += s.has_value() ? 1 : 0;
  return n;
}

SliceGrid deinterleave(const ImageTensor& image, int factor) {
  if (factor < 1) throw SubscaleError("scaling factor must be >= 1");
  if (image.height() % factor != 0 || image.width() % factor != 0) {
    throw SubscaleError("image " + std::to_string(image.height()) + "x" +
                        std::to_string(image.width()) + " not divisible by S=" +
                        std::to_string(factor));
  }
  const int sh = image.height() / factor;
  const int sw = image.width() / factor;
  SliceGrid grid = SliceGrid::empty(factor, sh, sw, image.depth());
  for (int i = 0; i < factor; ++i) {
    for (int j = 0; j < factor; ++j) {
      std::vector<std::uint8_t> vals(static_cast<std::size_t>(sh) * sw * kChannels);
      for (int h = 0; h < sh; ++h)
        for (int w = 0; w < sw; ++w)
          for (int c = 0; c < kChannels; ++c)
            vals[(static_cast<std::size_t>(h) * sw + w) * kChannels + c] =
                image.at(i + factor * h, j + factor * w, c);
      grid.slices[i * factor + j] = ImageTensor(sh, sw, image.depth(), std::move(vals));
    }
  }
  return grid;
}

ImageTensor interleave(const SliceGrid& grid) {
  const int s = grid.factor;
  std::vector<std::uint8_t> vals(static_cast<std::size_t>(grid.slice_height) * s *
                                 grid.slice_width * s * kChannels);
  const int width = grid.slice_width * s;
  for (int i = 0; i < s; ++i) {
    for (int j = 0; j < s; ++j) {
      const ImageTensor& sl = grid.slice({i, j});
      if (sl.height() != grid.slice_height || sl.width() != grid.slice_width ||
          sl.depth() != grid.depth) {
        throw SubscaleError("slice geometry does not match grid");
      }
      for (int h = 0; h < grid.slice_height; ++h)
        for (int w = 0; w < grid.slice_width; ++w)
          for (int c = 0; c < kChannels; ++c)
            vals[(static_cast<std::size_t>(i + s * h) * width + (j + s * w)) * kChannels + c] =
                sl.at(h, w, c);
    }
  }
  return ImageTensor(grid.slice_height * s, width, grid.depth, std::move(vals));
}

std::vector<MetaPosition> meta_order(int factor) {
  if (factor < 1) throw SubscaleError("scaling factor must be >= 1");
  std::vector<MetaPosition> order;
  order.reserve(static_cast<std::size_t>(factor) * factor);
  for (int i = 0; i < factor; ++i)
    for (int j = 0; j < factor; ++j) order.push_back({i, j});
  return order;
}

std::vector<MetaOffset> slot_layout(int factor) {
  if (factor < 1) throw SubscaleError("scaling factor must be >= 1");
  std::vector<MetaOffset> slots;
  for (int di = -(factor - 1); di <= 0; ++di) {
    for (int dj = -(factor - 1); dj <= factor - 1; ++dj) {
      if (di < 0 || dj < 0) slots.push_back({di, dj});
    }
  }
  return slots;
}

ContextWindow assemble_context(const SliceGrid& grid, MetaPosition target) {
  const int s = grid.factor;
  if (target.i < 0 || target.i >= s || target.j < 0 || target.j >= s) {
    throw SubscaleError("target meta-position outside the grid");
  }
  const int target_index = grid.index_of(target);
  for (int k = 0; k < grid.count(); ++k) {
    const bool present = grid.slices[k].has_value();
    if (k >= target_index && present) {
      throw SubscaleError("context leakage: slice " + std::to_string(k) +
                          " is not before target " + std::to_string(target_index));
    }
    if (k < target_index && !present) {
      throw SubscaleError("missing preceding slice " + std::to_string(k));
    }
  }
  ContextWindow ctx;
  ctx.target = target;
  ctx.target_index = target_index;
  ctx.factor = s;
  ctx.offsets = slot_layout(s);
  ctx.slots.resize(ctx.offsets.size());
  for (std::size_t r = 0; r < ctx.offsets.size(); ++r) {
    const MetaPosition src{target.i + ctx.offsets[r].di, target.j + ctx.offsets[r].dj};
    if (src.i < 0 || src.i >= s || src.j < 0 || src.j >= s) continue;
    if (grid.index_of(src) >= target_index) continue;
    ctx.slots[r] = grid.slice(src);
  }
  return ctx;
}

SliceGrid preceding(const SliceGrid& grid, int target_index) {
  SliceGrid out = SliceGrid::empty(grid.factor, grid.slice_height, grid.slice_width, grid.depth);
  for (int k = 0; k < target_index && k < grid.count(); ++k) out.slices[k] = grid.slices[k];
  return out;
}

}  // namespace spn
