// Training, evaluation and sampling.

#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "spn/bitdepth.hpp"
#include "spn/spn_model.hpp"

namespace spn {

using Weights = std::vector<ag::Tensor<float>>;

struct TrainConfig {
  int batch_size = 8;
  // Piecewise constant: `learning_rate` until the first drop, then each
  // (step, rate) pair from its step on.
  double learning_rate = 1e-4;
  std::vector<std::pair<std::int64_t, double>> lr_drops{{50000, 3e-5}, {100000, 1e-5}};
  double rmsprop_momentum = 0.9;
  double rmsprop_decay = 0.95;
  double rmsprop_epsilon = 1e-8;
  double polyak_decay = 0.9999;
  double clip_norm = 1.0;  // global-norm clipping; 0 disables
  std::uint64_t seed = 1;
  std::int64_t steps = 1000;

  double rate_at(std::int64_t step) const;
  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

struct OptimizerState {
  std::int64_t step = 0;
  Weights ms;      // RMS accumulator
  Weights mom;     // momentum buffer
  Weights shadow;  // Polyak average

  static OptimizerState init(const Weights& params);
};

// One RMSProp step (TF form) on every parameter, then the Polyak update.
//   ms  <- decay*ms + (1-decay)*g^2
//   mom <- momentum*mom + lr*g/sqrt(ms+eps)
//   p   <- p - mom
//   shadow <- polyak*shadow + (1-polyak)*p
void apply_update(Weights& params, const std::vector<std::vector<float>>& grads, OptimizerState& state,
                  const TrainConfig& cfg, double learning_rate);

// Scales grads in place so their global L2 norm is <= max_norm; returns the
// norm before clipping.
double clip_global_norm(std::vector<std::vector<float>>& grads, double max_norm);

// A training/evaluation example at model depth. `cond` is the conditioning
// image (msb part) for depth-upscaling stage-2 models.
struct Example {
  ImageTensor target;
  std::optional<ImageTensor> cond;
};

// Images at any depth >= the model's total depth. Without cond_depth the
// image is reduced to its `depth` MSBs; with it, the top cond_depth+depth
// bits are split into cond (msb) and target (lsb).
std::vector<Example> make_examples(const std::vector<ImageTensor>& images, const SPNConfig& cfg);

class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(std::int64_t step, const std::string& what);
  std::int64_t step() const { return step_; }

 private:
  std::int64_t step_;
};

class Trainer {
 public:
  Trainer(SpnModel model, TrainConfig cfg);
  // Resume from saved state.
  Trainer(SpnModel model, TrainConfig cfg, Weights params, OptimizerState state,
          const std::string& rng_state);

  // Draws a batch (uniform, with replacement) then runs train_step on it.
  double step(std::span<const Example> dataset);

  // One update on `batch`: a uniformly drawn meta-position per image (slice
  // (0,0) for first-slice-only models); returns the mean slice bits/dim.
  double train_step(std::span<const Example> batch);

  // The training loss at explicit positions, without updating.
  double loss_at(std::span<const Example> batch, std::span<const int> positions) const;
  // Training loss averaged over every meta-position of every example.
  double enumeration_loss(std::span<const Example> dataset) const;

  const SpnModel& model() const { return model_; }
  const TrainConfig& config() const { return cfg_; }
  const Weights& params() const { return params_; }
  const OptimizerState& state() const { return state_; }
  const Weights& weights(bool use_shadow) const { return use_shadow ? state_.shadow : params_; }
  std::int64_t steps_done() const { return state_.step; }
  std::string rng_state() const;

 private:
  std::vector<int> draw_positions(std::size_t count);

  SpnModel model_;
  TrainConfig cfg_;
  Weights params_;
  OptimizerState state_;
  std::mt19937_64 rng_;
};

struct TrainLoopOptions {
  std::int64_t log_every = 50;
  std::int64_t checkpoint_every = 0;  // 0: only at the end
};

// Runs until trainer.steps_done() == trainer.config().steps. Log lines are
// "step=<n> bits_per_dim=<f> wall_s=<f>", bits/dim being the mean training
// loss since the previous line.
void train_loop(Trainer& trainer, std::span<const Example> dataset, const TrainLoopOptions& options,
                std::ostream* log, const std::function<void(const Trainer&)>& checkpoint);

// Per-slice NLL (nats) of every slice of `ex`, in meta order.
std::vector<double> slice_nlls(const SpnModel& model, const Weights& w, const Example& ex);

// Exact bits/dim over all S*S slices of every example.
double evaluate_bits_per_dim(const SpnModel& model, const Weights& w, std::span<const Example> data);

struct StagedResult {
  double total = 0;
  double stage1 = 0;
  double stage2 = 0;
};

// Stage 1 models the d1 MSBs, stage 2 the d2 LSBs given the MSBs; both terms
// are normalized by the same H*W*3 count. `images` are at depth >= d1+d2.
StagedResult evaluate_staged(const SpnModel& stage1, const Weights& w1, const SpnModel& stage2,
                             const Weights& w2, const DepthStageSpec& spec,
                             const std::vector<ImageTensor>& images);

// "total (stage1, stage2)" with 4 decimals.
std::string format_staged(const StagedResult& r);

struct SampleOptions {
  double temperature = 1.0;
  bool greedy = false;  // argmax instead of drawing; temperature ignored
  // Called at every step with the untempered logits and the chosen value.
  std::function<void(std::span<const float> logits, int chosen)> on_step;
};

// Softmax of logits / temperature, in double.
std::vector<double> tempered_probs(std::span<const float> logits, double temperature);
double entropy_nats(std::span<const double> probs);

// Draws from (or takes the argmax of) the tempered categorical.
int draw_value(std::span<const float> logits, const SampleOptions& opts, std::mt19937_64& rng);

// Separate generator per (seed, stage, slice index), so each slice's draws
// do not depend on how many numbers other slices consumed.
std::mt19937_64 slice_stream(std::uint64_t seed, int stage, int slice_index);

// Ancestral raster/channel sampling of one slice given the context map s
// ([1, C_s, H', W']; unused by decoder-only models, pass nullptr).
ImageTensor sample_slice(const SpnModel& model, const Weights& w, const ag::Tensor<float>* s,
                         const SampleOptions& opts, std::mt19937_64& rng);

// Subscale sampling of a whole image with an SPN. `cond` is the conditioning
// grid for stage-2 models; `first_slice` if given is used as slice (0,0).
ImageTensor sample_image(const SpnModel& model, const Weights& w, const SampleOptions& opts,
                         std::uint64_t seed, int stage = 0, const SliceGrid* cond = nullptr,
                         const ImageTensor* first_slice = nullptr);

// Slice (0,0) from a decoder-only model (or `injected`), the other S*S-1
// slices from the SPN.
ImageTensor sample_size_upscaled(const SpnModel& first_model, const Weights& first_w,
                                 const SpnModel& spn, const Weights& spn_w,
                                 const SampleOptions& first_opts, const SampleOptions& spn_opts,
                                 std::uint64_t seed, const ImageTensor* injected = nullptr);

struct DepthUpscaleModels {
  const SpnModel* stage1 = nullptr;
  const Weights* stage1_w = nullptr;
  const SpnModel* stage2 = nullptr;
  const Weights* stage2_w = nullptr;
  // Optional decoder-only model for stage 1 size upscaling.
  const SpnModel* first = nullptr;
  const Weights* first_w = nullptr;
};

struct DepthUpscaleOptions {
  DepthUpscaleOptions() { first.temperature = 0.99; stage1.temperature = 0.99; }
  SampleOptions first;
  SampleOptions stage1;
  SampleOptions stage2;
};

struct DepthUpscaled {
  ImageTensor image;  // d1+d2 bits
  ImageTensor msb;
  ImageTensor lsb;
};

DepthUpscaled sample_depth_upscaled(const DepthUpscaleModels& models, const DepthStageSpec& spec,
                                    const DepthUpscaleOptions& opts, std::uint64_t seed);

}  // namespace spn
