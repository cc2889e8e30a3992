#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "wav2sleep/datapipe.hpp"
#include "wav2sleep/masking.hpp"
#include "wav2sleep/model.hpp"

namespace wav2sleep {

struct TrainConfig {
  double max_lr = 1e-3;
  std::size_t warmup_steps = 2000;
  double decay_half_life_steps = 6000.0;
  double weight_decay = 1e-2;
  std::size_t effective_batch = 16;
  std::size_t micro_batch = 4;
  std::size_t patience_epochs = 5;
  std::size_t max_epochs = 100;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_epsilon = 1e-8;
  bool augment_invert = true;
  bool stochastic_masking = true;
  // Worker threads for micro-batches. Results do not depend on this value.
  std::size_t threads = 1;
  MaskingConfig masking;

  void validate() const;
  // Masking lives in its own config section; it is not part of this JSON.
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

// Linear warm-up to max_lr, then halving every decay_half_life_steps.
double lr_at(std::size_t step, const TrainConfig& config);

template <typename T>
struct AdamState {
  std::size_t step = 0;  // updates applied so far
  std::vector<std::vector<T>> first;
  std::vector<std::vector<T>> second;

  // Zero moments shaped like params.
  static AdamState zeros_like(const Params<T>& params);
};

// One AdamW update with decoupled weight decay, using each parameter's grad
// (missing grad = zero). Increments state.step first, so bias correction uses
// the new count. Throws NumericalError, leaving everything untouched, if any
// gradient is not finite.
template <typename T>
void adamw_step(Params<T>& params, AdamState<T>& state, double lr, const TrainConfig& config);

struct TrainState {
  std::size_t step = 0;
  std::size_t epoch = 0;  // completed epochs
  double best_val_loss = std::numeric_limits<double>::infinity();
  std::size_t best_epoch = 0;
  std::size_t epochs_without_improvement = 0;
  std::uint64_t seed = 0;
  std::mt19937_64 rng;
};

struct Checkpoint {
  ModelConfig model;
  TrainConfig train;
  Params<float> params;
  AdamState<float> adam;
  TrainState state;
  // Best-so-far weights when they differ from params (mid-training snapshots).
  std::optional<Params<float>> best_params;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

// Layout: 8-byte magic, u64 little-endian header length, JSON header listing
// {name, shape, offset} per parameter with model/train config and train state
// (step, RNG state, seed), then little-endian float32 parameters, Adam first
// and second moments and optional best weights. Errors are ContainerError with
// VersionMismatch, ChecksumMismatch, TruncatedPayload or CorruptHeader.
std::string encode_checkpoint(const Checkpoint& checkpoint);
Checkpoint decode_checkpoint(std::string_view bytes);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

struct LogRecord {
  std::size_t step = 0;
  double lr = 0.0;
  double train_loss = 0.0;  // mean -log p per labelled epoch in the step
  std::size_t epoch = 0;
  std::optional<double> val_loss;  // set on the last step of an epoch

  nlohmann::json to_json() const;
};

// Mean cross-entropy per labelled epoch with dropout off, no augmentation and
// every available modality kept. Throws NumericalError on a non-finite result.
double validation_loss(const std::vector<const PreprocessedRecording*>& recordings,
                       const Params<float>& params, const ModelConfig& config,
                       std::size_t batch = 8);

/// Owns parameters, optimizer state and the RNG stream for one training run.
/// The same seed and data give bit-identical results for any thread count.
class Trainer {
 public:
  Trainer(ModelConfig model, TrainConfig train, std::uint64_t seed);
  // Continues from a checkpoint. With resume_schedule the step counter, Adam
  // moments and early-stopping state carry over; otherwise only weights do.
  Trainer(const Checkpoint& from, TrainConfig train, std::uint64_t seed, bool resume_schedule);

  void set_data(std::vector<const PreprocessedRecording*> train,
                std::vector<const PreprocessedRecording*> validation);
  void on_log(std::function<void(const LogRecord&)> sink) { sink_ = std::move(sink); }

  // One optimizer step over the given recordings. Returns the mean loss per
  // labelled epoch.
  double step(const std::vector<const PreprocessedRecording*>& recordings);
  // Shuffled pass over the training set followed by validation and the
  // early-stopping update. Returns false once patience is exhausted.
  bool run_epoch();
  // Epochs until early stopping or max_epochs, then restores the best weights.
  void fit();

  const Params<float>& params() const { return params_; }
  Params<float>& params() { return params_; }
  const TrainState& state() const { return state_; }
  const AdamState<float>& adam() const { return adam_; }
  const ModelConfig& model_config() const { return model_; }
  const TrainConfig& train_config() const { return train_; }
  const std::vector<LogRecord>& log() const { return log_; }

  // Resumable snapshot of the current state.
  Checkpoint snapshot() const;
  // Snapshot taken at the end of the best epoch so far (current state if none).
  Checkpoint best_checkpoint() const;

 private:
  // Summed gradient of sum-over-recordings CE / divisor for the recordings,
  // split into micro-batches. Returns the summed CE and labelled epoch count.
  std::pair<double, std::size_t> accumulate(const std::vector<const PreprocessedRecording*>& recordings,
                                            double divisor);

  ModelConfig model_;
  TrainConfig train_;
  Params<float> params_;
  AdamState<float> adam_;
  TrainState state_;
  std::optional<Checkpoint> best_;
  std::vector<const PreprocessedRecording*> train_data_;
  std::vector<const PreprocessedRecording*> val_data_;
  std::vector<LogRecord> log_;
  std::function<void(const LogRecord&)> sink_;
};

// Gradient of the summed cross-entropy of a batch, for accumulation checks.
// Dropout off, masks as given.
double batch_loss_and_grad(const Batch& batch, Params<float>& params, const ModelConfig& config,
                           double scale);

}  // namespace wav2sleep
