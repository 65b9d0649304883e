// Bit-plane split/join for depth upscaling and low-depth preview rendering.

#pragma once

#include "spn/subscale.hpp"

namespace spn {

// Stage 1 models the d1 most significant bits, stage 2 the next d2 bits.
// d2 == 0 denotes a single-stage model.
struct DepthStageSpec {
  int d1 = 3;
  int d2 = 5;

  int total() const { return d1 + d2; }
  void validate() const;
  bool operator==(const DepthStageSpec&) const = default;
};

struct BitPlaneImage {
  ImageTensor msb;  // depth d1
  ImageTensor lsb;  // depth d2
};

class DepthError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

BitPlaneImage split_bits(const ImageTensor& image, const DepthStageSpec& spec);
ImageTensor join_bits(const BitPlaneImage& planes);

// Keeps the `depth` most significant bits.
ImageTensor reduce_depth(const ImageTensor& image, int depth);

enum class PreviewMode {
  Stretch,    // round(v * 255 / (2^D - 1))
  LeftShift,  // v << (8 - D)
};

ImageTensor preview_quantize(const ImageTensor& image, PreviewMode mode = PreviewMode::Stretch);

}  // namespace spn
