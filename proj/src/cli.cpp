#include "spn/cli.hpp"

#include <CLI11.hpp>
#include <chrono>
#include <fstream>
#include <random>

#include "spn/config.hpp"
#include "spn/gradcheck.hpp"
#include "spn/io.hpp"

namespace spn {

namespace {

namespace fs = std::filesystem;

struct LoadedModel {
  RunConfig config;
  SpnModel model;
  Weights weights;
};

LoadedModel load_model(const std::string& path, bool use_shadow) {
  auto ckpt = io::load_checkpoint(path);
  SpnModel model(ckpt.config.model);
  Weights w = use_shadow && !ckpt.shadow.empty() ? std::move(ckpt.shadow) : std::move(ckpt.params);
  return {ckpt.config, std::move(model), std::move(w)};
}

SampleOptions sample_options(const std::vector<double>& temps, std::size_t index, double fallback, bool greedy) {
  SampleOptions o;
  o.temperature = index < temps.size() ? temps[index] : fallback;
  o.greedy = greedy;
  if (!(o.temperature > 0)) throw std::invalid_argument("temperatures must be > 0");
  return o;
}

void log_run(std::ostream& err, std::uint64_t seed, const RunConfig& cfg) {
  err << "seed=" << seed << " config_hash=" << config_hash(cfg) << "\n";
}

void print_slices(std::ostream& out, const SliceGrid& grid) {
  for (int m = 0; m < grid.count(); ++m) {
    const auto pos = grid.position_of(m);
    const auto& s = grid.slice(pos);
    out << "slice (" << pos.i << "," << pos.j << "):\n";
    for (int y = 0; y < s.height(); ++y) {
      for (int x = 0; x < s.width(); ++x) {
        if (x) out << " ";
        const int r = s.at(y, x, 0), g = s.at(y, x, 1), b = s.at(y, x, 2);
        if (r == g && g == b) {
          out << r;
        } else {
          out << r << "," << g << "," << b;
        }
      }
      out << "\n";
    }
  }
}

// ---- verify ---------------------------------------------------------------

SPNConfig verify_config(int depth) {
  SPNConfig c;
  c.factor = 2;
  c.slice_height = c.slice_width = 2;
  c.depth = depth;
  c.zero_head = false;
  c.embed_conv_layers = 1;
  c.embed_channels = 6;
  c.embed_residual_channels = 6;
  c.embed_attention = {1, 2, 8, 4, 8, nn::AttentionMask::None};
  c.decoder_attention = {1, 2, 8, 4, 8, nn::AttentionMask::CausalShifted};
  c.pixelcnn = {2, 12, 12, 3};
  return c;
}

ImageTensor verify_image(int h, int w, int depth, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> d(0, (1 << depth) - 1);
  std::vector<std::uint8_t> v(static_cast<std::size_t>(h) * w * kChannels);
  for (auto& x : v) x = static_cast<std::uint8_t>(d(rng));
  return ImageTensor(h, w, depth, std::move(v));
}

}  // namespace

bool run_verify(std::ostream& out) {
  bool all = true;
  auto report = [&](const std::string& name, bool ok, const std::string& detail = "") {
    out << (ok ? "PASS " : "FAIL ") << name << (detail.empty() ? "" : ": " + detail) << "\n";
    all &= ok;
  };
  auto guarded = [&](const std::string& name, const std::function<std::pair<bool, std::string>()>& f) {
    try {
      auto [ok, detail] = f();
      report(name, ok, detail);
    } catch (const std::exception& e) {
      report(name, false, e.what());
    }
  };
  std::mt19937_64 rng(1);

  guarded("subscale bijection", [&] {
    for (int factor : {1, 2, 4})
      for (int n = 0; n < 50; ++n) {
        auto img = verify_image(8, 8, 1 + n % 8, rng);
        if (!(interleave(deinterleave(img, factor)) == img)) return std::pair{false, std::string("roundtrip mismatch")};
      }
    return std::pair{true, std::string()};
  });
  guarded("slot layout size", [&] {
    for (int s = 1; s <= 8; ++s)
      if (static_cast<int>(slot_layout(s).size()) != 2 * s * (s - 1)) return std::pair{false, "S=" + std::to_string(s)};
    return std::pair{true, std::string()};
  });
  guarded("bit split roundtrip", [&] {
    for (int v = 0; v < 256; ++v) {
      ImageTensor img(1, 1, 8, {static_cast<std::uint8_t>(v), 0, 255});
      if (!(join_bits(split_bits(img, {3, 5})) == img)) return std::pair{false, "value " + std::to_string(v)};
    }
    return std::pair{true, std::string()};
  });

  const SpnModel model(verify_config(2));
  const auto params = model.init_params();
  guarded("decoder causality probe", [&] {
    auto grid = deinterleave(verify_image(4, 4, 2, rng), 2);
    ag::Tensor<float> s;
    {
      ag::Tape<float> tape;
      auto p = nn::bind_params(tape, params, false);
      s = model.embed_context(tape, p, assemble_context(preceding(grid, 3), {1, 1}), nullptr).tensor();
    }
    nn::SliceLogitsFn f = [&](const ImageTensor& slice) {
      ag::Tape<float> t;
      auto l = model.decode_logits(t, nn::bind_params(t, params, false), slice, t.constant(s));
      return std::vector<float>(l.value().begin(), l.value().end());
    };
    auto deps = nn::dependency_map(f, grid.slice({1, 1}));
    for (int r = 0; r < static_cast<int>(deps.size()); ++r)
      for (auto c : deps[r])
        if (c.position * 3 + c.channel >= r) return std::pair{false, "output " + std::to_string(r) + " sees its future"};
    return std::pair{true, std::string()};
  });
  guarded("future-slice poisoning", [&] {
    auto a = deinterleave(verify_image(4, 4, 2, rng), 2);
    auto b = deinterleave(verify_image(4, 4, 2, rng), 2);
    for (int m = 0; m < 4; ++m) {
      auto poisoned = a;
      for (int k = m + 1; k < 4; ++k) poisoned.slices[k] = b.slices[k];
      ag::Tape<float> t1, t2;
      auto l1 = model.slice_logits(t1, nn::bind_params(t1, params, false), a, nullptr, m).tensor();
      auto l2 = model.slice_logits(t2, nn::bind_params(t2, params, false), poisoned, nullptr, m).tensor();
      if (!(l1 == l2)) return std::pair{false, "slice " + std::to_string(m)};
    }
    return std::pair{true, std::string()};
  });
  guarded("gradient check (tiny SPN, directional)", [&] {
    auto grid = deinterleave(verify_image(4, 4, 2, rng), 2);
    auto f = [&](ag::Tape<double>& tape, const std::vector<ag::Var<double>>& p) {
      auto l = model.slice_logits(tape, p, grid, nullptr, 3);
      const auto targets = slice_targets(grid.slice({1, 1}));
      return ag::softmax_cross_entropy(l, std::span<const int>(targets));
    };
    std::vector<ag::Tensor<double>> dp;
    for (const auto& p : params) dp.push_back(p.cast<double>());
    auto r = ag::check_gradients(f, dp, {.step = 1e-5, .directional_probes = 4});
    char buf[48];
    std::snprintf(buf, sizeof buf, "max rel error %.2e", r.max_rel_error);
    return std::pair{r.max_rel_error < 1e-4, std::string(buf)};
  });
  guarded("uniform baseline", [&] {
    auto cfg = verify_config(3);
    cfg.zero_head = true;
    SpnModel uniform(cfg);
    auto data = make_examples({verify_image(4, 4, 8, rng)}, cfg);
    const double bpd = evaluate_bits_per_dim(uniform, uniform.init_params(), data);
    return std::pair{std::abs(bpd - 3.0) < 1e-9, "bits/dim " + std::to_string(bpd)};
  });
  return all;
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Subscale Pixel Network: train, evaluate and sample subscale image models"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Help for every subcommand");

  std::string config_path, data_path, checkpoint, out_path, resume, stage2_path, first_path, inject_path;
  std::string split = "valid", in_path, kind = "stripes";
  std::uint64_t seed = 1;
  std::int64_t steps = -1;
  std::vector<double> temps;
  bool greedy = false, no_shadow = false;
  int factor = 2, count = 64, valid = 0, height = 16, width = 16, depth = 3;

  auto* train = app.add_subcommand("train", "Train a model; writes <out>/model.ckpt and <out>/metrics.log");
  train->add_option("--config", config_path, "key=value config file (default: built-in desk config)");
  train->add_option("--data", data_path, "Dataset manifest")->required();
  train->add_option("--out", out_path, "Run directory")->required();
  train->add_option("--checkpoint", resume, "Resume from this checkpoint");
  train->add_option("--seed", seed, "Training seed (overrides train.seed)");
  train->add_option("--steps", steps, "Total step budget (overrides train.steps)");

  auto* eval = app.add_subcommand("eval", "Bits/dim of a model on a dataset split");
  eval->add_option("--checkpoint", checkpoint, "Model checkpoint (stage 1 when --stage2 is given)");
  eval->add_option("--config", config_path, "Evaluate a freshly initialized model from this config");
  eval->add_option("--stage2", stage2_path, "Stage-2 (depth upscaling) checkpoint: prints total (stage1, stage2)");
  eval->add_option("--data", data_path, "Dataset manifest")->required();
  eval->add_option("--split", split, "train or valid")->check(CLI::IsMember({"train", "valid"}));
  eval->add_flag("--no-shadow", no_shadow, "Use raw rather than Polyak-averaged parameters");

  auto* sample = app.add_subcommand("sample", "Sample an image (or a slice, for decoder-only models)");
  sample->add_option("--checkpoint", checkpoint, "Model checkpoint")->required();
  sample->add_option("--out", out_path, "Output PPM")->required();
  sample->add_option("--seed", seed, "Sampling seed");
  sample->add_option("--temperature", temps, "Sampling temperature (default 1.0)");
  sample->add_flag("--greedy", greedy, "Argmax decoding");
  sample->add_flag("--no-shadow", no_shadow, "Use raw rather than Polyak-averaged parameters");

  auto* upsize = app.add_subcommand("upscale-size", "First slice from a decoder-only model, the rest from an SPN");
  upsize->add_option("--first", first_path, "Decoder-only checkpoint")->required();
  upsize->add_option("--checkpoint", checkpoint, "SPN checkpoint")->required();
  upsize->add_option("--inject", inject_path, "Use this PPM as slice (0,0) instead of sampling it");
  upsize->add_option("--out", out_path, "Output PPM")->required();
  upsize->add_option("--seed", seed, "Sampling seed");
  upsize->add_option("--temperature", temps, "Temperatures: first slice (0.99), SPN (1.0)");
  upsize->add_flag("--greedy", greedy, "Argmax decoding");
  upsize->add_flag("--no-shadow", no_shadow, "Use raw rather than Polyak-averaged parameters");

  auto* updepth = app.add_subcommand("upscale-depth", "Sample MSBs with stage 1, then LSBs with stage 2");
  updepth->add_option("--checkpoint", checkpoint, "Stage-1 SPN checkpoint")->required();
  updepth->add_option("--stage2", stage2_path, "Stage-2 SPN checkpoint")->required();
  updepth->add_option("--first", first_path, "Optional decoder-only checkpoint for stage-1 size upscaling");
  updepth->add_option("--out", out_path, "Output PPM")->required();
  updepth->add_option("--seed", seed, "Sampling seed");
  updepth->add_option("--temperature", temps, "Temperatures: stage 1 (0.99), stage 2 (1.0), first slice (0.99)");
  updepth->add_flag("--greedy", greedy, "Argmax decoding");
  updepth->add_flag("--no-shadow", no_shadow, "Use raw rather than Polyak-averaged parameters");

  auto* slice = app.add_subcommand("slice", "Print (and optionally write) the S*S slices of an image");
  slice->add_option("--in", in_path, "Input PPM")->required();
  slice->add_option("--S", factor, "Subscaling factor")->check(CLI::PositiveNumber);
  slice->add_option("--out", out_path, "Directory for slice_<i>_<j>.ppm");

  auto* verify = app.add_subcommand("verify", "Run the invariant suite");

  auto* synth = app.add_subcommand("synth", "Write a synthetic corpus and its manifest");
  synth->add_option("--kind", kind, "stripes, gradients, checker or blobs");
  synth->add_option("--count", count, "Training images");
  synth->add_option("--valid", valid, "Validation images");
  synth->add_option("--height", height);
  synth->add_option("--width", width);
  synth->add_option("--depth", depth);
  synth->add_option("--seed", seed);
  synth->add_option("--out", out_path, "Output directory")->required();

  std::vector<std::string> rev(args.rbegin(), args.rend());
  if (!rev.empty()) rev.pop_back();  // program name
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }

  try {
    if (*train) {
      RunConfig cfg = config_path.empty() ? desk_config() : parse_config(io::read_file(config_path), desk_config());
      if (train->count("--seed")) cfg.train.seed = seed;
      if (steps >= 0) cfg.train.steps = steps;
      cfg.train.validate();
      const auto manifest = io::read_manifest(data_path);
      if (manifest.depth < cfg.model.depth + cfg.model.cond_depth) {
        throw std::invalid_argument("dataset depth " + std::to_string(manifest.depth) + " is below the model's total depth");
      }
      const auto data = make_examples(io::load_split(manifest, io::Split::Train), cfg.model);
      if (data.empty()) throw std::invalid_argument("training split is empty");

      std::optional<Trainer> trainer;
      if (!resume.empty()) {
        auto ckpt = io::load_checkpoint(resume, &cfg.model);
        ckpt.config.train.steps = cfg.train.steps;
        trainer.emplace(io::restore_trainer(ckpt));
        cfg.train = trainer->config();
      } else {
        trainer.emplace(SpnModel(cfg.model), cfg.train);
      }
      log_run(err, cfg.train.seed, cfg);
      fs::create_directories(out_path);
      std::ofstream log(fs::path(out_path) / "metrics.log", resume.empty() ? std::ios::trunc : std::ios::app);
      const auto ckpt_path = fs::path(out_path) / "model.ckpt";
      train_loop(*trainer, data, cfg.loop, &log,
                 [&](const Trainer& t) { io::save_checkpoint(ckpt_path, io::snapshot(t, cfg)); });
      out << "trained " << trainer->steps_done() << " steps; checkpoint " << ckpt_path.string() << "\n";
      return 0;
    }

    if (*eval) {
      const auto manifest = io::read_manifest(data_path);
      const auto images = io::load_split(manifest, split == "train" ? io::Split::Train : io::Split::Valid);
      if (images.empty()) throw std::invalid_argument(split + " split of " + data_path + " is empty");
      if (!stage2_path.empty()) {
        if (checkpoint.empty()) throw std::invalid_argument("--stage2 needs --checkpoint for stage 1");
        auto s1 = load_model(checkpoint, !no_shadow);
        auto s2 = load_model(stage2_path, !no_shadow);
        log_run(err, s1.config.train.seed, s1.config);
        const DepthStageSpec spec{s1.config.model.depth, s2.config.model.depth};
        out << format_staged(evaluate_staged(s1.model, s1.weights, s2.model, s2.weights, spec, images)) << "\n";
        return 0;
      }
      LoadedModel m = [&] {
        if (!checkpoint.empty()) return load_model(checkpoint, !no_shadow);
        if (config_path.empty()) throw std::invalid_argument("eval needs --checkpoint or --config");
        auto cfg = parse_config(io::read_file(config_path), desk_config());
        SpnModel model(cfg.model);
        auto w = model.init_params();
        return LoadedModel{cfg, std::move(model), std::move(w)};
      }();
      log_run(err, m.config.train.seed, m.config);
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.4f", evaluate_bits_per_dim(m.model, m.weights, make_examples(images, m.config.model)));
      out << buf << "\n";
      return 0;
    }

    if (*sample) {
      auto m = load_model(checkpoint, !no_shadow);
      log_run(err, seed, m.config);
      const auto opts = sample_options(temps, 0, 1.0, greedy);
      ImageTensor img;
      if (m.config.model.kind == ModelKind::DecoderOnly) {
        auto rng = slice_stream(seed, 0, 0);
        img = sample_slice(m.model, m.weights, nullptr, opts, rng);
      } else {
        img = sample_image(m.model, m.weights, opts, seed);
      }
      io::write_ppm(out_path, img);
      out << "wrote " << out_path << "\n";
      return 0;
    }

    if (*upsize) {
      auto first = load_model(first_path, !no_shadow);
      auto spn = load_model(checkpoint, !no_shadow);
      log_run(err, seed, spn.config);
      std::optional<ImageTensor> injected;
      if (!inject_path.empty()) injected = reduce_depth(io::read_ppm_native(inject_path), spn.config.model.depth);
      auto img = sample_size_upscaled(first.model, first.weights, spn.model, spn.weights,
                                      sample_options(temps, 0, 0.99, greedy), sample_options(temps, 1, 1.0, greedy),
                                      seed, injected ? &*injected : nullptr);
      io::write_ppm(out_path, img);
      out << "wrote " << out_path << "\n";
      return 0;
    }

    if (*updepth) {
      auto s1 = load_model(checkpoint, !no_shadow);
      auto s2 = load_model(stage2_path, !no_shadow);
      std::optional<LoadedModel> first;
      if (!first_path.empty()) first.emplace(load_model(first_path, !no_shadow));
      log_run(err, seed, s1.config);
      DepthUpscaleModels models{&s1.model, &s1.weights, &s2.model, &s2.weights,
                                first ? &first->model : nullptr, first ? &first->weights : nullptr};
      DepthUpscaleOptions opts;
      opts.stage1 = sample_options(temps, 0, 0.99, greedy);
      opts.stage2 = sample_options(temps, 1, 1.0, greedy);
      opts.first = sample_options(temps, 2, 0.99, greedy);
      const DepthStageSpec spec{s1.config.model.depth, s2.config.model.depth};
      auto res = sample_depth_upscaled(models, spec, opts, seed);
      io::write_ppm(out_path, res.image);
      out << "wrote " << out_path << " (" << res.image.depth() << " bits)\n";
      return 0;
    }

    if (*slice) {
      log_run(err, seed, RunConfig{});
      const auto img = io::read_ppm_native(in_path);
      const auto grid = deinterleave(img, factor);
      print_slices(out, grid);
      if (!out_path.empty()) {
        for (int m = 0; m < grid.count(); ++m) {
          const auto p = grid.position_of(m);
          io::write_ppm(fs::path(out_path) / ("slice_" + std::to_string(p.i) + "_" + std::to_string(p.j) + ".ppm"),
                        grid.slice(p));
        }
      }
      return 0;
    }

    if (*verify) {
      log_run(err, 1, RunConfig{});
      return run_verify(out) ? 0 : 1;
    }

    if (*synth) {
      log_run(err, seed, RunConfig{});
      auto m = io::make_synthetic_corpus(io::parse_corpus_kind(kind), count, height, width, depth, seed, out_path, valid);
      out << "wrote " << m.entries.size() << " images and " << (fs::path(out_path) / "manifest.txt").string() << "\n";
      return 0;
    }
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}

}  // namespace spn
