#include "spn/config.hpp"

#include <charconv>
#include <cstdio>
#include <functional>
#include <set>
#include <sstream>
#include <vector>

namespace spn {

namespace {

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename N>
N parse_number(const std::string& key, const std::string& v) {
  N out{};
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw ConfigError("bad value for " + key + ": '" + v + "'");
  }
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("bad boolean for " + key + ": '" + v + "'");
}

std::string fmt(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

template <typename I>
std::string fmt_int(I v) {
  return std::to_string(v);
}

struct Field {
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

template <typename I, typename Access>
Field int_field(std::string key, Access access) {
  return {key, [access](const RunConfig& c) { return fmt_int(access(const_cast<RunConfig&>(c))); },
          [access, key](RunConfig& c, const std::string& v) { access(c) = parse_number<I>(key, v); }};
}

template <typename Access>
Field double_field(std::string key, Access access) {
  return {key, [access](const RunConfig& c) { return fmt(access(const_cast<RunConfig&>(c))); },
          [access, key](RunConfig& c, const std::string& v) { access(c) = parse_number<double>(key, v); }};
}

template <typename Access>
Field bool_field(std::string key, Access access) {
  return {key, [access](const RunConfig& c) { return std::string(access(const_cast<RunConfig&>(c)) ? "true" : "false"); },
          [access, key](RunConfig& c, const std::string& v) { access(c) = parse_bool(key, v); }};
}

void attention_fields(std::vector<Field>& f, const std::string& prefix,
                      nn::AttentionConfig& (*sel)(RunConfig&)) {
  f.push_back(int_field<int>(prefix + ".layers", [sel](RunConfig& c) -> int& { return sel(c).layers; }));
  f.push_back(int_field<int>(prefix + ".heads", [sel](RunConfig& c) -> int& { return sel(c).heads; }));
  f.push_back(int_field<int>(prefix + ".model_width", [sel](RunConfig& c) -> int& { return sel(c).model_width; }));
  f.push_back(int_field<int>(prefix + ".head_width", [sel](RunConfig& c) -> int& { return sel(c).head_width; }));
  f.push_back(int_field<int>(prefix + ".ffn_width", [sel](RunConfig& c) -> int& { return sel(c).ffn_width; }));
}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    std::vector<Field> f;
    f.push_back({"model.kind",
                 [](const RunConfig& c) { return std::string(c.model.kind == ModelKind::Spn ? "spn" : "decoder_only"); },
                 [](RunConfig& c, const std::string& v) {
                   if (v == "spn") c.model.kind = ModelKind::Spn;
                   else if (v == "decoder_only") c.model.kind = ModelKind::DecoderOnly;
                   else throw ConfigError("model.kind must be spn or decoder_only, got '" + v + "'");
                 }});
    f.push_back(int_field<int>("model.factor", [](RunConfig& c) -> int& { return c.model.factor; }));
    f.push_back(int_field<int>("model.slice_height", [](RunConfig& c) -> int& { return c.model.slice_height; }));
    f.push_back(int_field<int>("model.slice_width", [](RunConfig& c) -> int& { return c.model.slice_width; }));
    f.push_back(int_field<int>("model.depth", [](RunConfig& c) -> int& { return c.model.depth; }));
    f.push_back(int_field<int>("model.cond_depth", [](RunConfig& c) -> int& { return c.model.cond_depth; }));
    f.push_back(bool_field("model.one_hot_embedding", [](RunConfig& c) -> bool& { return c.model.one_hot_embedding; }));
    f.push_back(bool_field("model.zero_head", [](RunConfig& c) -> bool& { return c.model.zero_head; }));
    f.push_back(bool_field("model.first_slice_only", [](RunConfig& c) -> bool& { return c.model.first_slice_only; }));
    f.push_back(int_field<int>("embed.conv_layers", [](RunConfig& c) -> int& { return c.model.embed_conv_layers; }));
    f.push_back(int_field<int>("embed.channels", [](RunConfig& c) -> int& { return c.model.embed_channels; }));
    f.push_back(int_field<int>("embed.kernel", [](RunConfig& c) -> int& { return c.model.embed_kernel; }));
    f.push_back(int_field<int>("embed.residual_blocks", [](RunConfig& c) -> int& { return c.model.embed_residual_blocks; }));
    f.push_back(int_field<int>("embed.residual_channels", [](RunConfig& c) -> int& { return c.model.embed_residual_channels; }));
    f.push_back({"embed.order",
                 [](const RunConfig& c) {
                   return std::string(c.model.embed_order == EmbedderOrder::ConvAttentionResidual
                                          ? "conv_attention_residual"
                                          : "attention_conv_residual");
                 },
                 [](RunConfig& c, const std::string& v) {
                   if (v == "conv_attention_residual") c.model.embed_order = EmbedderOrder::ConvAttentionResidual;
                   else if (v == "attention_conv_residual") c.model.embed_order = EmbedderOrder::AttentionConvResidual;
                   else throw ConfigError("embed.order must be conv_attention_residual or attention_conv_residual");
                 }});
    attention_fields(f, "embed.attention", [](RunConfig& c) -> nn::AttentionConfig& { return c.model.embed_attention; });
    attention_fields(f, "decoder.attention", [](RunConfig& c) -> nn::AttentionConfig& { return c.model.decoder_attention; });
    f.push_back(int_field<int>("pixelcnn.layers", [](RunConfig& c) -> int& { return c.model.pixelcnn.layers; }));
    f.push_back(int_field<int>("pixelcnn.conv_channels", [](RunConfig& c) -> int& { return c.model.pixelcnn.conv_channels; }));
    f.push_back(int_field<int>("pixelcnn.residual_channels", [](RunConfig& c) -> int& { return c.model.pixelcnn.residual_channels; }));
    f.push_back(int_field<int>("pixelcnn.kernel", [](RunConfig& c) -> int& { return c.model.pixelcnn.kernel; }));
    f.push_back(int_field<std::uint64_t>("model.init_seed", [](RunConfig& c) -> std::uint64_t& { return c.model.init_seed; }));

    f.push_back(int_field<int>("train.batch_size", [](RunConfig& c) -> int& { return c.train.batch_size; }));
    f.push_back(double_field("train.learning_rate", [](RunConfig& c) -> double& { return c.train.learning_rate; }));
    f.push_back({"train.lr_drops",
                 [](const RunConfig& c) {
                   std::string out;
                   for (const auto& [at, r] : c.train.lr_drops) {
                     if (!out.empty()) out += ",";
                     out += std::to_string(at) + ":" + fmt(r);
                   }
                   return out;
                 },
                 [](RunConfig& c, const std::string& v) {
                   c.train.lr_drops.clear();
                   std::stringstream ss(v);
                   std::string item;
                   while (std::getline(ss, item, ',')) {
                     item = trim(item);
                     if (item.empty()) continue;
                     const auto colon = item.find(':');
                     if (colon == std::string::npos) throw ConfigError("train.lr_drops entries are step:rate");
                     c.train.lr_drops.emplace_back(parse_number<std::int64_t>("train.lr_drops", item.substr(0, colon)),
                                                   parse_number<double>("train.lr_drops", item.substr(colon + 1)));
                   }
                 }});
    f.push_back(double_field("train.rmsprop_momentum", [](RunConfig& c) -> double& { return c.train.rmsprop_momentum; }));
    f.push_back(double_field("train.rmsprop_decay", [](RunConfig& c) -> double& { return c.train.rmsprop_decay; }));
    f.push_back(double_field("train.rmsprop_epsilon", [](RunConfig& c) -> double& { return c.train.rmsprop_epsilon; }));
    f.push_back(double_field("train.polyak_decay", [](RunConfig& c) -> double& { return c.train.polyak_decay; }));
    f.push_back(double_field("train.clip_norm", [](RunConfig& c) -> double& { return c.train.clip_norm; }));
    f.push_back(int_field<std::uint64_t>("train.seed", [](RunConfig& c) -> std::uint64_t& { return c.train.seed; }));
    f.push_back(int_field<std::int64_t>("train.steps", [](RunConfig& c) -> std::int64_t& { return c.train.steps; }));
    f.push_back(int_field<std::int64_t>("train.log_every", [](RunConfig& c) -> std::int64_t& { return c.loop.log_every; }));
    f.push_back(int_field<std::int64_t>("train.checkpoint_every", [](RunConfig& c) -> std::int64_t& { return c.loop.checkpoint_every; }));
    return f;
  }();
  return table;
}

}  // namespace

RunConfig parse_config(const std::string& text) { return parse_config(text, RunConfig{}); }

RunConfig parse_config(const std::string& text, RunConfig base) {
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  std::set<std::string> seen;
  while (std::getline(in, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key=value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    const Field* field = nullptr;
    for (const auto& f : fields())
      if (f.key == key) field = &f;
    if (!field) throw ConfigError("line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    if (!seen.insert(key).second) throw ConfigError("line " + std::to_string(lineno) + ": duplicate key '" + key + "'");
    field->set(base, value);
  }
  base.model.validate();
  base.train.validate();
  return base;
}

std::string format_config(const RunConfig& cfg) {
  std::string out;
  for (const auto& f : fields()) out += f.key + "=" + f.get(cfg) + "\n";
  return out;
}

std::string format_model_config(const SPNConfig& cfg) {
  RunConfig rc;
  rc.model = cfg;
  std::string out;
  for (const auto& f : fields()) {
    if (f.key.rfind("train.", 0) == 0) continue;
    out += f.key + "=" + f.get(rc) + "\n";
  }
  return out;
}

std::string config_hash(const RunConfig& cfg) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : format_config(cfg)) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

RunConfig desk_config() {
  RunConfig c;
  auto& m = c.model;
  m.factor = 2;
  m.slice_height = 8;
  m.slice_width = 8;
  m.depth = 3;
  m.embed_conv_layers = 2;
  m.embed_channels = 24;
  m.embed_residual_blocks = 1;
  m.embed_residual_channels = 24;
  m.embed_attention = {1, 2, 16, 8, 32, nn::AttentionMask::None};
  m.decoder_attention = {1, 2, 16, 8, 32, nn::AttentionMask::CausalShifted};
  m.pixelcnn = {3, 24, 24, 3};
  c.train.batch_size = 8;
  c.train.learning_rate = 3e-4;
  c.train.lr_drops = {};
  c.train.polyak_decay = 0.995;
  c.train.steps = 2000;
  c.loop.log_every = 100;
  return c;
}

}  // namespace spn
