#include "spn/pipeline.hpp"

#include <chrono>
#include <cmath>
#include <numbers>
#include <ostream>
#include <sstream>

namespace spn {

using ag::Tape;
using ag::Tensor;
using ag::Var;

// ---- config / optimizer ----------------------------------------------------

double TrainConfig::rate_at(std::int64_t step) const {
  double rate = learning_rate;
  for (const auto& [at, r] : lr_drops) {
    if (step >= at) rate = r;
  }
  return rate;
}

void TrainConfig::validate() const {
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (learning_rate < 0) throw std::invalid_argument("learning_rate must be >= 0");
  std::int64_t prev = -1;
  for (const auto& [at, r] : lr_drops) {
    if (at <= prev || r < 0) throw std::invalid_argument("lr drops must have increasing steps and rates >= 0");
    prev = at;
  }
  if (rmsprop_momentum < 0 || rmsprop_momentum >= 1) throw std::invalid_argument("rmsprop_momentum must be in [0,1)");
  if (rmsprop_decay <= 0 || rmsprop_decay >= 1) throw std::invalid_argument("rmsprop_decay must be in (0,1)");
  if (rmsprop_epsilon <= 0) throw std::invalid_argument("rmsprop_epsilon must be > 0");
  if (polyak_decay <= 0 || polyak_decay >= 1) throw std::invalid_argument("polyak_decay must be in (0,1)");
  if (clip_norm < 0) throw std::invalid_argument("clip_norm must be >= 0");
  if (steps < 0) throw std::invalid_argument("steps must be >= 0");
}

OptimizerState OptimizerState::init(const Weights& params) {
  OptimizerState s;
  for (const auto& p : params) {
    s.ms.emplace_back(p.shape);
    s.mom.emplace_back(p.shape);
  }
  s.shadow = params;
  return s;
}

void apply_update(Weights& params, const std::vector<std::vector<float>>& grads, OptimizerState& state,
                  const TrainConfig& cfg, double learning_rate) {
  if (grads.size() != params.size()) throw std::invalid_argument("one gradient per parameter expected");
  const double decay = cfg.rmsprop_decay, momentum = cfg.rmsprop_momentum, eps = cfg.rmsprop_epsilon;
  const double polyak = cfg.polyak_decay;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i].data;
    auto& ms = state.ms[i].data;
    auto& mom = state.mom[i].data;
    auto& sh = state.shadow[i].data;
    const auto& g = grads[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double gj = g.empty() ? 0.0 : g[j];
      const double m = decay * ms[j] + (1 - decay) * gj * gj;
      const double v = momentum * mom[j] + learning_rate * gj / std::sqrt(m + eps);
      ms[j] = static_cast<float>(m);
      mom[j] = static_cast<float>(v);
      p[j] = static_cast<float>(p[j] - v);
      sh[j] = static_cast<float>(polyak * sh[j] + (1 - polyak) * p[j]);
    }
  }
  ++state.step;
}

double clip_global_norm(std::vector<std::vector<float>>& grads, double max_norm) {
  double sq = 0;
  for (const auto& g : grads)
    for (float x : g) sq += static_cast<double>(x) * x;
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const double f = max_norm / norm;
    for (auto& g : grads)
      for (float& x : g) x = static_cast<float>(x * f);
  }
  return norm;
}

std::vector<Example> make_examples(const std::vector<ImageTensor>& images, const SPNConfig& cfg) {
  std::vector<Example> out;
  out.reserve(images.size());
  for (const auto& img : images) {
    if (img.height() != cfg.image_height() || img.width() != cfg.image_width()) {
      throw ModelError("image is " + std::to_string(img.height()) + "x" + std::to_string(img.width()) +
                       ", model expects " + std::to_string(cfg.image_height()) + "x" +
                       std::to_string(cfg.image_width()));
    }
    if (cfg.cond_depth > 0) {
      auto planes = split_bits(reduce_depth(img, cfg.cond_depth + cfg.depth), {cfg.cond_depth, cfg.depth});
      out.push_back({std::move(planes.lsb), std::move(planes.msb)});
    } else {
      out.push_back({reduce_depth(img, cfg.depth), std::nullopt});
    }
  }
  return out;
}

TrainingDiverged::TrainingDiverged(std::int64_t step, const std::string& what)
    : std::runtime_error("training diverged at step " + std::to_string(step) + ": " + what), step_(step) {}

// ---- trainer ---------------------------------------------------------------

namespace {

struct ExampleGrids {
  SliceGrid target;
  std::optional<SliceGrid> cond;
};

ExampleGrids grids_of(const Example& ex, int factor) {
  ExampleGrids g{deinterleave(ex.target, factor), std::nullopt};
  if (ex.cond) g.cond = deinterleave(*ex.cond, factor);
  return g;
}

std::vector<float> forward_logits(const SpnModel& model, const Weights& w, const ExampleGrids& g, int m) {
  Tape<float> tape;
  auto p = nn::bind_params(tape, w, false);
  auto l = model.slice_logits(tape, p, g.target, g.cond ? &*g.cond : nullptr, m);
  return {l.value().begin(), l.value().end()};
}

}  // namespace

Trainer::Trainer(SpnModel model, TrainConfig cfg)
    : model_(std::move(model)), cfg_(std::move(cfg)), rng_(cfg_.seed) {
  cfg_.validate();
  params_ = model_.init_params();
  state_ = OptimizerState::init(params_);
}

Trainer::Trainer(SpnModel model, TrainConfig cfg, Weights params, OptimizerState state,
                 const std::string& rng_state)
    : model_(std::move(model)), cfg_(std::move(cfg)), params_(std::move(params)), state_(std::move(state)) {
  cfg_.validate();
  const auto& specs = model_.layout().specs();
  auto check = [&](const Weights& ws, const char* what) {
    if (ws.size() != specs.size()) throw ModelError(std::string(what) + " count does not match the model");
    for (std::size_t i = 0; i < ws.size(); ++i) {
      if (ws[i].shape != specs[i].shape) throw ModelError(std::string(what) + " shape mismatch for " + specs[i].name);
    }
  };
  check(params_, "parameter");
  check(state_.ms, "optimizer accumulator");
  check(state_.mom, "optimizer momentum");
  check(state_.shadow, "shadow parameter");
  std::istringstream in(rng_state);
  in >> rng_;
  if (!in) throw std::invalid_argument("malformed RNG state");
}

std::string Trainer::rng_state() const {
  std::ostringstream out;
  out << rng_;
  return out.str();
}

std::vector<int> Trainer::draw_positions(std::size_t count) {
  const int n = model_.config().factor * model_.config().factor;
  std::vector<int> pos(count, 0);
  if (model_.config().first_slice_only) return pos;
  std::uniform_int_distribution<int> d(0, n - 1);
  for (auto& p : pos) p = d(rng_);
  return pos;
}

double Trainer::step(std::span<const Example> dataset) {
  if (dataset.empty()) throw std::invalid_argument("cannot train on an empty dataset");
  std::uniform_int_distribution<std::size_t> d(0, dataset.size() - 1);
  std::vector<Example> batch;
  batch.reserve(cfg_.batch_size);
  for (int b = 0; b < cfg_.batch_size; ++b) batch.push_back(dataset[d(rng_)]);
  return train_step(batch);
}

double Trainer::train_step(std::span<const Example> batch) {
  if (batch.empty()) throw std::invalid_argument("empty batch");
  const auto positions = draw_positions(batch.size());
  const int factor = model_.config().factor;
  const int classes = model_.config().classes();
  const std::int64_t step = state_.step + 1;

  std::vector<std::vector<float>> grads(params_.size());
  double loss = 0;
  try {
    Tape<float> tape;
    auto p = nn::bind_params(tape, params_, true);
    Var<float> total;
    const float weight = static_cast<float>(1.0 / (batch.size() * std::numbers::ln2));
    for (std::size_t b = 0; b < batch.size(); ++b) {
      auto g = grids_of(batch[b], factor);
      auto logits = model_.slice_logits(tape, p, g.target, g.cond ? &*g.cond : nullptr, positions[b]);
      const auto& target = g.target.slice(g.target.position_of(positions[b]));
      loss += slice_nll(logits.value(), classes, target).bits_per_dim;
      const auto targets = slice_targets(target);
      auto ce = ag::scale(ag::softmax_cross_entropy(logits, std::span<const int>(targets), ag::Reduction::Mean), weight);
      total = total.valid() ? ag::add(total, ce) : ce;
    }
    loss /= static_cast<double>(batch.size());
    if (!std::isfinite(loss)) throw TrainingDiverged(step, "non-finite loss");
    tape.backward(total);
    for (std::size_t i = 0; i < params_.size(); ++i) grads[i] = tape.grad(p[i]);
  } catch (const ag::NonFiniteError& e) {
    throw TrainingDiverged(step, e.what());
  }
  const double norm = clip_global_norm(grads, cfg_.clip_norm);
  if (!std::isfinite(norm)) throw TrainingDiverged(step, "non-finite gradient");
  apply_update(params_, grads, state_, cfg_, cfg_.rate_at(state_.step));
  return loss;
}

double Trainer::loss_at(std::span<const Example> batch, std::span<const int> positions) const {
  if (batch.size() != positions.size()) throw std::invalid_argument("one position per example expected");
  double loss = 0;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    auto g = grids_of(batch[b], model_.config().factor);
    auto logits = forward_logits(model_, params_, g, positions[b]);
    loss += slice_nll(logits, model_.config().classes(), g.target.slice(g.target.position_of(positions[b]))).bits_per_dim;
  }
  return loss / static_cast<double>(batch.size());
}

double Trainer::enumeration_loss(std::span<const Example> dataset) const {
  if (dataset.empty()) throw std::invalid_argument("empty dataset");
  const int n = model_.config().factor * model_.config().factor;
  double total = 0;
  for (int m = 0; m < n; ++m) {
    std::vector<int> positions(dataset.size(), m);
    total += loss_at(dataset, positions);
  }
  return total / n;
}

void train_loop(Trainer& trainer, std::span<const Example> dataset, const TrainLoopOptions& options,
                std::ostream* log, const std::function<void(const Trainer&)>& checkpoint) {
  const auto start = std::chrono::steady_clock::now();
  double acc = 0;
  int count = 0;
  while (trainer.steps_done() < trainer.config().steps) {
    acc += trainer.step(dataset);
    ++count;
    const auto step = trainer.steps_done();
    const bool last = step == trainer.config().steps;
    if (log && (last || (options.log_every > 0 && step % options.log_every == 0))) {
      const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      char line[128];
      std::snprintf(line, sizeof line, "step=%lld bits_per_dim=%.6f wall_s=%.3f\n",
                    static_cast<long long>(step), acc / count, wall);
      *log << line << std::flush;
      acc = 0;
      count = 0;
    }
    if (checkpoint && (last || (options.checkpoint_every > 0 && step % options.checkpoint_every == 0))) {
      checkpoint(trainer);
    }
  }
}

// ---- evaluation ------------------------------------------------------------

std::vector<double> slice_nlls(const SpnModel& model, const Weights& w, const Example& ex) {
  auto g = grids_of(ex, model.config().factor);
  std::vector<double> out;
  for (int m = 0; m < g.target.count(); ++m) {
    auto logits = forward_logits(model, w, g, m);
    out.push_back(slice_nll(logits, model.config().classes(), g.target.slice(g.target.position_of(m))).nats);
  }
  return out;
}

double evaluate_bits_per_dim(const SpnModel& model, const Weights& w, std::span<const Example> data) {
  if (data.empty()) throw std::invalid_argument("cannot evaluate an empty dataset");
  double nats = 0;
  double dims = 0;
  for (const auto& ex : data) {
    for (double n : slice_nlls(model, w, ex)) nats += n;
    dims += static_cast<double>(ex.target.values().size());
  }
  return nats / (dims * std::numbers::ln2);
}

StagedResult evaluate_staged(const SpnModel& stage1, const Weights& w1, const SpnModel& stage2,
                             const Weights& w2, const DepthStageSpec& spec,
                             const std::vector<ImageTensor>& images) {
  spec.validate();
  const auto& c1 = stage1.config();
  const auto& c2 = stage2.config();
  if (c1.depth != spec.d1 || c1.cond_depth != 0) throw DepthError("stage-1 model does not model the d1 MSBs");
  if (c2.depth != spec.d2 || c2.cond_depth != spec.d1) throw DepthError("stage-2 model does not model d2 LSBs given d1 MSBs");
  StagedResult r;
  r.stage1 = evaluate_bits_per_dim(stage1, w1, make_examples(images, c1));
  r.stage2 = evaluate_bits_per_dim(stage2, w2, make_examples(images, c2));
  r.total = r.stage1 + r.stage2;
  return r;
}

std::string format_staged(const StagedResult& r) {
  char buf[96];
  std::snprintf(buf, sizeof buf, "%.4f (%.4f, %.4f)", r.total, r.stage1, r.stage2);
  return buf;
}

// ---- sampling --------------------------------------------------------------

std::vector<double> tempered_probs(std::span<const float> logits, double temperature) {
  if (!(temperature > 0)) throw std::invalid_argument("temperature must be > 0");
  std::vector<double> p(logits.size());
  double mx = -INFINITY;
  for (float l : logits) mx = std::max(mx, l / temperature);
  double z = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] = std::exp(logits[i] / temperature - mx);
    z += p[i];
  }
  for (auto& x : p) x /= z;
  return p;
}

double entropy_nats(std::span<const double> probs) {
  double h = 0;
  for (double p : probs)
    if (p > 0) h -= p * std::log(p);
  return h;
}

int draw_value(std::span<const float> logits, const SampleOptions& opts, std::mt19937_64& rng) {
  if (opts.greedy) {
    int best = 0;
    for (std::size_t i = 1; i < logits.size(); ++i)
      if (logits[i] > logits[best]) best = static_cast<int>(i);
    return best;
  }
  const auto p = tempered_probs(logits, opts.temperature);
  const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  double c = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    c += p[i];
    if (u < c) return static_cast<int>(i);
  }
  // Rounding left u above the last partial sum: take the last non-zero class.
  for (std::size_t i = p.size(); i-- > 0;)
    if (p[i] > 0) return static_cast<int>(i);
  return 0;
}

std::mt19937_64 slice_stream(std::uint64_t seed, int stage, int slice_index) {
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  const std::uint64_t key = mix(mix(mix(seed) ^ static_cast<std::uint64_t>(stage)) ^ static_cast<std::uint64_t>(slice_index));
  std::seed_seq seq{static_cast<std::uint32_t>(key), static_cast<std::uint32_t>(key >> 32)};
  return std::mt19937_64(seq);
}

ImageTensor sample_slice(const SpnModel& model, const Weights& w, const Tensor<float>* s,
                         const SampleOptions& opts, std::mt19937_64& rng) {
  const auto& cfg = model.config();
  const int k = cfg.classes();
  ImageTensor slice(cfg.slice_height, cfg.slice_width, cfg.depth);
  const int subpixels = cfg.slice_pixels() * kChannels;
  for (int r = 0; r < subpixels; ++r) {
    Tape<float> tape;
    auto p = nn::bind_params(tape, w, false);
    Var<float> sv = cfg.kind == ModelKind::Spn ? tape.constant(*s) : model.constant_context(p);
    auto logits = model.decode_logits(tape, p, slice, sv);
    std::span<const float> row = logits.value().subspan(static_cast<std::size_t>(r) * k, k);
    const int v = draw_value(row, opts, rng);
    if (opts.on_step) opts.on_step(row, v);
    const int pix = r / kChannels;
    slice.set(pix / cfg.slice_width, pix % cfg.slice_width, r % kChannels, v);
  }
  return slice;
}

ImageTensor sample_image(const SpnModel& model, const Weights& w, const SampleOptions& opts,
                         std::uint64_t seed, int stage, const SliceGrid* cond,
                         const ImageTensor* first_slice) {
  const auto& cfg = model.config();
  if (cfg.kind != ModelKind::Spn) throw ModelError("sample_image needs an SPN; use sample_size_upscaled");
  auto grid = SliceGrid::empty(cfg.factor, cfg.slice_height, cfg.slice_width, cfg.depth);
  for (int m = 0; m < grid.count(); ++m) {
    const auto target = grid.position_of(m);
    if (m == 0 && first_slice) {
      if (first_slice->height() != cfg.slice_height || first_slice->width() != cfg.slice_width ||
          first_slice->depth() != cfg.depth) {
        throw ModelError("first slice does not match the SPN's slice geometry");
      }
      grid.slices[0] = *first_slice;
      continue;
    }
    Tensor<float> s;
    {
      Tape<float> tape;
      auto p = nn::bind_params(tape, w, false);
      s = model.embed_context(tape, p, assemble_context(grid, target), cond).tensor();
    }
    auto rng = slice_stream(seed, stage, m);
    grid.slices[m] = sample_slice(model, w, &s, opts, rng);
  }
  return interleave(grid);
}

ImageTensor sample_size_upscaled(const SpnModel& first_model, const Weights& first_w,
                                 const SpnModel& spn, const Weights& spn_w,
                                 const SampleOptions& first_opts, const SampleOptions& spn_opts,
                                 std::uint64_t seed, const ImageTensor* injected) {
  const auto& fc = first_model.config();
  const auto& sc = spn.config();
  if (fc.kind != ModelKind::DecoderOnly) throw ModelError("first-slice model must be decoder-only");
  if (fc.slice_height != sc.slice_height || fc.slice_width != sc.slice_width || fc.depth != sc.depth) {
    throw ModelError("first-slice model and SPN disagree on slice size or depth");
  }
  ImageTensor first;
  if (injected) {
    first = *injected;
  } else {
    auto rng = slice_stream(seed, 0, 0);
    first = sample_slice(first_model, first_w, nullptr, first_opts, rng);
  }
  return sample_image(spn, spn_w, spn_opts, seed, 0, nullptr, &first);
}

DepthUpscaled sample_depth_upscaled(const DepthUpscaleModels& models, const DepthStageSpec& spec,
                                    const DepthUpscaleOptions& opts, std::uint64_t seed) {
  spec.validate();
  if (!models.stage1 || !models.stage1_w || !models.stage2 || !models.stage2_w) {
    throw std::invalid_argument("both stage models are required");
  }
  const auto& c1 = models.stage1->config();
  const auto& c2 = models.stage2->config();
  if (c1.depth != spec.d1 || c1.cond_depth != 0) throw DepthError("stage-1 model does not model the d1 MSBs");
  if (c2.depth != spec.d2 || c2.cond_depth != spec.d1) throw DepthError("stage-2 model does not model d2 LSBs given d1 MSBs");
  if (c1.factor != c2.factor || c1.slice_height != c2.slice_height || c1.slice_width != c2.slice_width) {
    throw DepthError("stage models disagree on image geometry");
  }
  DepthUpscaled out;
  if (models.first) {
    out.msb = sample_size_upscaled(*models.first, *models.first_w, *models.stage1, *models.stage1_w,
                                   opts.first, opts.stage1, seed);
  } else {
    out.msb = sample_image(*models.stage1, *models.stage1_w, opts.stage1, seed, 0);
  }
  const auto cond = deinterleave(out.msb, c2.factor);
  out.lsb = sample_image(*models.stage2, *models.stage2_w, opts.stage2, seed, 1, &cond);
  out.image = join_bits({out.msb, out.lsb});
  return out;
}

}  // namespace spn
