#include "spn/io.hpp"

#include <array>
#include <bit>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

namespace spn::io {

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, const std::string& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("write failed for " + path.string());
}

// ---- PPM ---------------------------------------------------------------------

std::string encode_ppm(const ImageTensor& image, PreviewMode mode) {
  std::string out = "P6\n";
  const ImageTensor* px = &image;
  ImageTensor preview;
  if (image.depth() < 8) {
    out += "# spn depth=" + std::to_string(image.depth()) +
           (mode == PreviewMode::Stretch ? " preview=stretch\n" : " preview=shift\n");
    preview = preview_quantize(image, mode);
    px = &preview;
  }
  out += std::to_string(image.width()) + " " + std::to_string(image.height()) + "\n255\n";
  out.append(px->values().begin(), px->values().end());
  return out;
}

void write_ppm(const fs::path& path, const ImageTensor& image, PreviewMode mode) {
  write_file(path, encode_ppm(image, mode));
}

namespace {

struct PpmHeader {
  int width = 0, height = 0, maxval = 0;
  int depth = 8;  // from the spn comment, if any
  std::size_t payload = 0;
};

PpmHeader parse_ppm_header(const std::string& b) {
  if (b.size() < 2 || b[0] != 'P' || b[1] != '6') throw FormatError("not a binary PPM (P6)");
  PpmHeader h;
  std::size_t i = 2;
  auto skip = [&] {
    for (;;) {
      while (i < b.size() && std::isspace(static_cast<unsigned char>(b[i]))) ++i;
      if (i < b.size() && b[i] == '#') {
        const auto end = b.find('\n', i);
        const std::string comment = b.substr(i, end == std::string::npos ? std::string::npos : end - i);
        const auto at = comment.find("spn depth=");
        if (at != std::string::npos) {
          const int d = std::atoi(comment.c_str() + at + 10);
          if (d < 1 || d > 8) throw FormatError("bad depth comment: " + comment);
          h.depth = d;
        }
        if (end == std::string::npos) throw FormatError("PPM header ends inside a comment");
        i = end + 1;
        continue;
      }
      return;
    }
  };
  auto number = [&](const char* what) {
    skip();
    if (i >= b.size() || !std::isdigit(static_cast<unsigned char>(b[i]))) {
      throw FormatError(std::string("malformed PPM header: expected ") + what);
    }
    long v = 0;
    while (i < b.size() && std::isdigit(static_cast<unsigned char>(b[i]))) {
      v = v * 10 + (b[i] - '0');
      if (v > 1 << 24) throw FormatError(std::string("PPM ") + what + " too large");
      ++i;
    }
    return static_cast<int>(v);
  };
  h.width = number("width");
  h.height = number("height");
  h.maxval = number("maxval");
  if (i >= b.size() || !std::isspace(static_cast<unsigned char>(b[i]))) {
    throw FormatError("malformed PPM header: no separator before pixel data");
  }
  ++i;
  if (h.width < 1 || h.height < 1) throw FormatError("PPM has zero extent");
  if (h.maxval > 255) throw DepthUnsupported("PPM maxval " + std::to_string(h.maxval) + " unsupported: only 8-bit (255) images");
  if (h.maxval != 255) throw FormatError("PPM maxval " + std::to_string(h.maxval) + " unsupported: expected 255");
  h.payload = i;
  return h;
}

}  // namespace

ImageTensor decode_ppm(const std::string& bytes) {
  const auto h = parse_ppm_header(bytes);
  const std::size_t n = static_cast<std::size_t>(h.width) * h.height * kChannels;
  if (bytes.size() - h.payload < n) {
    throw FormatError("truncated PPM payload: " + std::to_string(bytes.size() - h.payload) + " of " +
                      std::to_string(n) + " bytes");
  }
  std::vector<std::uint8_t> v(bytes.begin() + static_cast<std::ptrdiff_t>(h.payload),
                              bytes.begin() + static_cast<std::ptrdiff_t>(h.payload + n));
  return ImageTensor(h.height, h.width, 8, std::move(v));
}

ImageTensor read_ppm(const fs::path& path) { return decode_ppm(read_file(path)); }

ImageTensor read_ppm_native(const fs::path& path) {
  const auto bytes = read_file(path);
  const auto h = parse_ppm_header(bytes);
  auto img = decode_ppm(bytes);
  return h.depth < 8 ? reduce_depth(img, h.depth) : img;
}

// ---- manifests -----------------------------------------------------------------

DatasetManifest read_manifest(const fs::path& path) {
  std::istringstream in(read_file(path));
  std::string line;
  if (!std::getline(in, line) || line != "spn-manifest 1") throw FormatError(path.string() + ": not an spn manifest");
  DatasetManifest m;
  m.root = path.parent_path();
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    auto bad = [&] { return FormatError(path.string() + ":" + std::to_string(lineno) + ": cannot parse '" + line + "'"); };
    if (auto eq = line.find('='); eq != std::string::npos) {
      const auto key = line.substr(0, eq);
      int v = 0;
      try {
        v = std::stoi(line.substr(eq + 1));
      } catch (const std::exception&) {
        throw bad();
      }
      if (key == "height") m.height = v;
      else if (key == "width") m.width = v;
      else if (key == "depth") m.depth = v;
      else throw bad();
    } else if (line.rfind("train ", 0) == 0) {
      m.entries.push_back({line.substr(6), Split::Train});
    } else if (line.rfind("valid ", 0) == 0) {
      m.entries.push_back({line.substr(6), Split::Valid});
    } else {
      throw bad();
    }
  }
  if (m.height < 1 || m.width < 1 || m.depth < 1 || m.depth > 8) {
    throw FormatError(path.string() + ": manifest needs height, width and depth in [1,8]");
  }
  return m;
}

void write_manifest(const fs::path& path, const DatasetManifest& m) {
  std::string out = "spn-manifest 1\nheight=" + std::to_string(m.height) + "\nwidth=" + std::to_string(m.width) +
                    "\ndepth=" + std::to_string(m.depth) + "\n";
  for (const auto& e : m.entries) out += (e.split == Split::Train ? "train " : "valid ") + e.path + "\n";
  write_file(path, out);
}

std::vector<ImageTensor> load_split(const DatasetManifest& m, Split split) {
  std::vector<ImageTensor> out;
  for (const auto& e : m.entries) {
    if (e.split != split) continue;
    auto img = read_ppm(m.root / e.path);
    if (img.height() != m.height || img.width() != m.width) {
      throw FormatError(e.path + " is " + std::to_string(img.height()) + "x" + std::to_string(img.width()) +
                        ", manifest declares " + std::to_string(m.height) + "x" + std::to_string(m.width));
    }
    out.push_back(reduce_depth(img, m.depth));
  }
  return out;
}

// ---- synthetic corpora -------------------------------------------------------

CorpusKind parse_corpus_kind(const std::string& name) {
  if (name == "stripes") return CorpusKind::Stripes;
  if (name == "gradients") return CorpusKind::Gradients;
  if (name == "checker") return CorpusKind::Checker;
  if (name == "blobs") return CorpusKind::Blobs;
  throw std::invalid_argument("unknown corpus kind '" + name + "' (stripes, gradients, checker, blobs)");
}

std::vector<ImageTensor> synthetic_images(CorpusKind kind, int count, int height, int width, int depth,
                                          std::uint64_t seed) {
  if (count < 0 || height < 1 || width < 1 || depth < 1 || depth > 8) {
    throw std::invalid_argument("invalid corpus geometry");
  }
  std::mt19937_64 rng(seed);
  const int levels = 1 << depth;
  auto uniform = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };
  auto color = [&] {
    std::array<int, 3> c{};
    for (auto& x : c) x = uniform(0, levels - 1);
    return c;
  };
  std::vector<ImageTensor> out;
  for (int n = 0; n < count; ++n) {
    ImageTensor img(height, width, depth);
    auto fill = [&](auto pick) {
      for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x) {
          const auto c = pick(y, x);
          for (int k = 0; k < kChannels; ++k) img.set(y, x, k, c[k]);
        }
    };
    switch (kind) {
      case CorpusKind::Stripes: {
        const auto a = color(), b = color();
        const int w = uniform(1, 4), phase = uniform(0, 7);
        fill([&](int, int x) { return ((x + phase) / w) % 2 ? b : a; });
        break;
      }
      case CorpusKind::Checker: {
        const auto a = color(), b = color();
        const int cell = uniform(1, 4);
        fill([&](int y, int x) { return (y / cell + x / cell) % 2 ? b : a; });
        break;
      }
      case CorpusKind::Gradients: {
        const auto a = color(), b = color();
        const bool vertical = uniform(0, 1) == 1;
        fill([&](int y, int x) {
          const int t = vertical ? y : x, span = std::max(1, (vertical ? height : width) - 1);
          std::array<int, 3> c{};
          for (int k = 0; k < 3; ++k) c[k] = (a[k] * (span - t) + b[k] * t + span / 2) / span;
          return c;
        });
        break;
      }
      case CorpusKind::Blobs: {
        const auto bg = color();
        const int blobs = uniform(1, 3);
        struct Blob {
          int cy, cx, r2;
          std::array<int, 3> c;
        };
        std::vector<Blob> bl;
        for (int i = 0; i < blobs; ++i) {
          const int r = uniform(1, std::max(1, std::min(height, width) / 3));
          bl.push_back({uniform(0, height - 1), uniform(0, width - 1), r * r, color()});
        }
        fill([&](int y, int x) {
          auto c = bg;
          for (const auto& b : bl)
            if ((y - b.cy) * (y - b.cy) + (x - b.cx) * (x - b.cx) <= b.r2) c = b.c;
          return c;
        });
        break;
      }
    }
    out.push_back(std::move(img));
  }
  return out;
}

DatasetManifest make_synthetic_corpus(CorpusKind kind, int count, int height, int width, int depth,
                                      std::uint64_t seed, const fs::path& dir, int valid_count) {
  if (valid_count < 0) throw std::invalid_argument("valid_count must be >= 0");
  const auto images = synthetic_images(kind, count + valid_count, height, width, depth, seed);
  DatasetManifest m;
  m.root = dir;
  m.height = height;
  m.width = width;
  m.depth = depth;
  fs::create_directories(dir);
  for (int n = 0; n < count + valid_count; ++n) {
    char name[32];
    std::snprintf(name, sizeof name, "img_%05d.ppm", n);
    write_ppm(dir / name, images[n]);
    m.entries.push_back({name, n < count ? Split::Train : Split::Valid});
  }
  write_manifest(dir / "manifest.txt", m);
  return m;
}

// ---- checkpoints -----------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'S', 'P', 'N', 'C', 'K', 'P', 'T', '\0'};
constexpr char kEnd[8] = {'S', 'P', 'N', 'E', 'N', 'D', '\0', '\0'};

enum class BlockKind : std::uint8_t { Param = 0, Shadow = 1, RmsAccumulator = 2, Momentum = 3 };

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class Reader {
 public:
  explicit Reader(const std::string& b) : b_(b) {}
  const char* take(std::size_t n, const char* what) {
    if (b_.size() - pos_ < n) throw FormatError(std::string("truncated checkpoint while reading ") + what);
    const char* p = b_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::uint32_t u32(const char* what) {
    const auto* p = reinterpret_cast<const unsigned char*>(take(4, what));
    return std::uint32_t(p[0]) | std::uint32_t(p[1]) << 8 | std::uint32_t(p[2]) << 16 | std::uint32_t(p[3]) << 24;
  }
  std::uint8_t u8(const char* what) { return static_cast<std::uint8_t>(*take(1, what)); }

 private:
  const std::string& b_;
  std::size_t pos_ = 0;
};

void put_blocks(std::string& out, BlockKind kind, const Weights& ws, const nn::ParamLayout& layout) {
  for (std::size_t i = 0; i < ws.size(); ++i) {
    out.push_back(static_cast<char>(kind));
    const auto& name = layout.specs()[i].name;
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    out.push_back(static_cast<char>(ws[i].shape.size()));
    for (int d : ws[i].shape) put_u32(out, static_cast<std::uint32_t>(d));
    for (float x : ws[i].data) put_u32(out, std::bit_cast<std::uint32_t>(x));
  }
}

const char* kind_name(BlockKind k) {
  switch (k) {
    case BlockKind::Param: return "param";
    case BlockKind::Shadow: return "shadow";
    case BlockKind::RmsAccumulator: return "rms";
    case BlockKind::Momentum: return "momentum";
  }
  return "?";
}

}  // namespace

Checkpoint snapshot(const Trainer& trainer, const RunConfig& config) {
  if (!(trainer.model().config() == config.model)) throw ConfigError("snapshot config does not match the trainer's model");
  Checkpoint c;
  c.config = config;
  c.config.train = trainer.config();
  c.step = trainer.steps_done();
  c.rng_state = trainer.rng_state();
  c.params = trainer.params();
  c.shadow = trainer.state().shadow;
  c.ms = trainer.state().ms;
  c.mom = trainer.state().mom;
  return c;
}

Trainer restore_trainer(const Checkpoint& ckpt) {
  // Optimizer groups are optional in the file; missing ones start fresh.
  OptimizerState st = OptimizerState::init(ckpt.params);
  st.step = ckpt.step;
  if (!ckpt.ms.empty()) st.ms = ckpt.ms;
  if (!ckpt.mom.empty()) st.mom = ckpt.mom;
  if (!ckpt.shadow.empty()) st.shadow = ckpt.shadow;
  return Trainer(SpnModel(ckpt.config.model), ckpt.config.train, ckpt.params, std::move(st), ckpt.rng_state);
}

std::string encode_checkpoint(const Checkpoint& ckpt) {
  const SpnModel model(ckpt.config.model);
  const auto& layout = model.layout();
  std::string meta = format_config(ckpt.config);
  meta += "step=" + std::to_string(ckpt.step) + "\n";
  meta += "rng_state=" + ckpt.rng_state + "\n";
  meta += "threads=1\n";

  std::string out(kMagic, sizeof kMagic);
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(meta.size()));
  out += meta;
  const Weights* groups[] = {&ckpt.params, &ckpt.shadow, &ckpt.ms, &ckpt.mom};
  std::uint32_t blocks = 0;
  for (const auto* g : groups) {
    if (!g->empty() && g->size() != layout.size()) throw ModelError("checkpoint tensor count does not match the model");
    blocks += static_cast<std::uint32_t>(g->size());
  }
  put_u32(out, blocks);
  put_blocks(out, BlockKind::Param, ckpt.params, layout);
  put_blocks(out, BlockKind::Shadow, ckpt.shadow, layout);
  put_blocks(out, BlockKind::RmsAccumulator, ckpt.ms, layout);
  put_blocks(out, BlockKind::Momentum, ckpt.mom, layout);
  out.append(kEnd, sizeof kEnd);
  return out;
}

Checkpoint decode_checkpoint(const std::string& bytes, const SPNConfig* expected) {
  Reader r(bytes);
  if (std::string(r.take(8, "magic"), 8) != std::string(kMagic, 8)) throw FormatError("not an spn checkpoint (bad magic)");
  const auto version = r.u32("version");
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint version " + std::to_string(version) + " unsupported (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  }
  const auto meta_len = r.u32("metadata length");
  const std::string meta(r.take(meta_len, "metadata"), meta_len);

  Checkpoint c;
  std::string config_text;
  {
    std::istringstream in(meta);
    std::string line;
    bool have_step = false, have_rng = false;
    while (std::getline(in, line)) {
      if (line.rfind("step=", 0) == 0) {
        c.step = std::stoll(line.substr(5));
        have_step = true;
      } else if (line.rfind("rng_state=", 0) == 0) {
        c.rng_state = line.substr(10);
        have_rng = true;
      } else if (line.rfind("threads=", 0) == 0) {
        continue;
      } else {
        config_text += line + "\n";
      }
    }
    if (!have_step || !have_rng) throw FormatError("checkpoint metadata lacks step or rng_state");
  }
  c.config = parse_config(config_text);
  if (expected && !(c.config.model == *expected)) {
    throw ConfigError("checkpoint model config does not match the requested model");
  }

  const SpnModel model(c.config.model);
  const auto& specs = model.layout().specs();
  const auto blocks = r.u32("block count");
  Weights* groups[] = {&c.params, &c.shadow, &c.ms, &c.mom};
  for (std::uint32_t b = 0; b < blocks; ++b) {
    const auto kind = r.u8("block kind");
    if (kind > 3) throw FormatError("unknown checkpoint block kind " + std::to_string(kind));
    auto& group = *groups[kind];
    const auto name_len = r.u32("block name length");
    const std::string name(r.take(name_len, "block name"), name_len);
    const std::size_t idx = group.size();
    if (idx >= specs.size() || specs[idx].name != name) {
      throw FormatError(std::string("unexpected ") + kind_name(static_cast<BlockKind>(kind)) + " block '" + name + "'");
    }
    const auto rank = r.u8("block rank");
    ag::Shape shape(rank);
    for (auto& d : shape) d = static_cast<int>(r.u32("block shape"));
    if (shape != specs[idx].shape) throw FormatError("block '" + name + "' has shape " + ag::shape_str(shape));
    ag::Tensor<float> t(shape);
    for (auto& x : t.data) x = std::bit_cast<float>(r.u32("block data"));
    group.push_back(std::move(t));
  }
  if (c.params.size() != specs.size()) throw FormatError("checkpoint is missing parameter blocks");
  for (const auto* g : {&c.shadow, &c.ms, &c.mom}) {
    if (!g->empty() && g->size() != specs.size()) throw FormatError("checkpoint has a partial state group");
  }
  if (std::string(r.take(8, "end marker"), 8) != std::string(kEnd, 8)) throw FormatError("checkpoint end marker missing");
  return c;
}

void save_checkpoint(const fs::path& path, const Checkpoint& ckpt) {
  // Write-then-rename so a crash never leaves a half-written checkpoint.
  fs::path tmp = path;
  tmp += ".tmp";
  write_file(tmp, encode_checkpoint(ckpt));
  fs::rename(tmp, path);
}

Checkpoint load_checkpoint(const fs::path& path, const SPNConfig* expected) {
  return decode_checkpoint(read_file(path), expected);
}

}  // namespace spn::io
