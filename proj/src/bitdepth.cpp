#include "spn/bitdepth.hpp"

namespace spn {

void DepthStageSpec::validate() const {
  if (d1 < 1 || d2 < 0 || d1 + d2 > 8) {
    throw DepthError("invalid depth split (" + std::to_string(d1) + "," +
                     std::to_string(d2) + ")");
  }
}

BitPlaneImage split_bits(const ImageTensor& image, const DepthStageSpec& spec) {
  spec.validate();
  if (spec.d2 < 1) throw DepthError("split_bits needs a two-stage spec");
  if (spec.total() != image.depth()) {
    throw DepthError("spec total " + std::to_string(spec.total()) +
                     " does not match image depth " + std::to_string(image.depth()));
  }
  const auto& v = image.values();
  std::vector<std::uint8_t> hi(v.size()), lo(v.size());
  const unsigned low_mask = (1u << spec.d2) - 1;
  for (std::size_t i = 0; i < v.size(); ++i) {
    hi[i] = static_cast<std::uint8_t>(v[i] >> spec.d2);
    lo[i] = static_cast<std::uint8_t>(v[i] & low_mask);
  }
  return {ImageTensor(image.height(), image.width(), spec.d1, std::move(hi)),
          ImageTensor(image.height(), image.width(), spec.d2, std::move(lo))};
}

ImageTensor join_bits(const BitPlaneImage& planes) {
  const auto& msb = planes.msb;
  const auto& lsb = planes.lsb;
  if (msb.height() != lsb.height() || msb.width() != lsb.width()) {
    throw DepthError("bit planes have different shapes");
  }
  const int depth = msb.depth() + lsb.depth();
  if (depth > 8) throw DepthError("joined depth exceeds 8 bits");
  std::vector<std::uint8_t> out(msb.values().size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const unsigned lo = lsb.values()[i];
    if (lo >= (1u << lsb.depth())) throw DepthError("lsb value overflows its bit count");
    out[i] = static_cast<std::uint8_t>((static_cast<unsigned>(msb.values()[i]) << lsb.depth()) | lo);
  }
  return ImageTensor(msb.height(), msb.width(), depth, std::move(out));
}

ImageTensor reduce_depth(const ImageTensor& image, int depth) {
  if (depth < 1 || depth > image.depth()) {
    throw DepthError("cannot reduce depth " + std::to_string(image.depth()) + " to " +
                     std::to_string(depth));
  }
  const int shift = image.depth() - depth;
  std::vector<std::uint8_t> out(image.values().size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<std::uint8_t>(image.values()[i] >> shift);
  return ImageTensor(image.height(), image.width(), depth, std::move(out));
}

ImageTensor preview_quantize(const ImageTensor& image, PreviewMode mode) {
  const int d = image.depth();
  std::vector<std::uint8_t> out(image.values().size());
  const unsigned max_in = (1u << d) - 1;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const unsigned v = image.values()[i];
    if (mode == PreviewMode::LeftShift) {
      out[i] = static_cast<std::uint8_t>(v << (8 - d));
    } else {
      // Integer round-half-up of v * 255 / max_in.
      out[i] = static_cast<std::uint8_t>((2 * v * 255 + max_in) / (2 * max_in));
    }
  }
  return ImageTensor(image.height(), image.width(), 8, std::move(out));
}

}  // namespace spn
