// Files: PPM images, dataset manifests, synthetic corpora and checkpoints.

#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "spn/bitdepth.hpp"
#include "spn/config.hpp"
#include "spn/pipeline.hpp"

namespace spn::io {

namespace fs = std::filesystem;

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DepthUnsupported : public FormatError {
 public:
  using FormatError::FormatError;
};

// ---- PPM ---------------------------------------------------------------------

// Binary P6 with maxval 255. Images below 8 bits are written as their preview
// with a "# spn depth=D preview=stretch|shift" comment after the magic.
void write_ppm(const fs::path& path, const ImageTensor& image, PreviewMode mode = PreviewMode::Stretch);
std::string encode_ppm(const ImageTensor& image, PreviewMode mode = PreviewMode::Stretch);

// The stored 8-bit samples.
ImageTensor read_ppm(const fs::path& path);
ImageTensor decode_ppm(const std::string& bytes);

// As read_ppm, but images carrying a depth comment come back at that depth
// (the depth MSBs of the preview).
ImageTensor read_ppm_native(const fs::path& path);

// ---- manifests -----------------------------------------------------------------

enum class Split { Train, Valid };

struct ManifestEntry {
  std::string path;  // relative to the manifest's directory
  Split split = Split::Train;
};

// Text format:
//   spn-manifest 1
//   height=<H>
//   width=<W>
//   depth=<D>
//   train <relative path>
//   valid <relative path>
struct DatasetManifest {
  fs::path root;
  int height = 0;
  int width = 0;
  int depth = 0;
  std::vector<ManifestEntry> entries;
};

DatasetManifest read_manifest(const fs::path& path);
void write_manifest(const fs::path& path, const DatasetManifest& manifest);

// Loads one split, checking geometry and keeping the `depth` MSBs.
std::vector<ImageTensor> load_split(const DatasetManifest& manifest, Split split);

enum class CorpusKind { Stripes, Gradients, Checker, Blobs };
CorpusKind parse_corpus_kind(const std::string& name);

// Deterministic images for `seed`.
std::vector<ImageTensor> synthetic_images(CorpusKind kind, int count, int height, int width,
                                          int depth, std::uint64_t seed);

// Writes `count` train and `valid_count` valid images plus manifest.txt into
// `dir`; returns the manifest.
DatasetManifest make_synthetic_corpus(CorpusKind kind, int count, int height, int width, int depth,
                                      std::uint64_t seed, const fs::path& dir, int valid_count = 0);

// ---- checkpoints -----------------------------------------------------------

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  RunConfig config;
  std::int64_t step = 0;
  std::string rng_state;
  Weights params;
  Weights shadow;
  Weights ms;
  Weights mom;
};

Checkpoint snapshot(const Trainer& trainer, const RunConfig& config);
Trainer restore_trainer(const Checkpoint& ckpt);

std::string encode_checkpoint(const Checkpoint& ckpt);
// With `expected`, a model config mismatch is rejected after reading the
// metadata block and before any parameter data is read.
Checkpoint decode_checkpoint(const std::string& bytes, const SPNConfig* expected = nullptr);

void save_checkpoint(const fs::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const fs::path& path, const SPNConfig* expected = nullptr);

std::string read_file(const fs::path& path);
void write_file(const fs::path& path, const std::string& bytes);

}  // namespace spn::io
