#include "wav2sleep/train.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <thread>

#include "bytes.hpp"
#include "json_util.hpp"
#include "wav2sleep/container.hpp"
#include "wav2sleep/inference.hpp"
#include "wav2sleep/ops.hpp"

namespace wav2sleep {

using nlohmann::json;

void TrainConfig::validate() const {
  auto require = [](bool ok, const char* message) {
    if (!ok) throw ConfigError(std::string("train config: ") + message);
  };
  require(max_lr > 0.0 && std::isfinite(max_lr), "max_lr must be positive");
  require(decay_half_life_steps > 0.0, "decay_half_life_steps must be positive");
  require(weight_decay >= 0.0, "weight_decay must be non-negative");
  require(effective_batch >= 1, "effective_batch must be positive");
  require(micro_batch >= 1 && micro_batch <= effective_batch,
          "micro_batch must lie in [1, effective_batch]");
  require(effective_batch % micro_batch == 0, "effective_batch must be divisible by micro_batch");
  require(patience_epochs >= 1, "patience_epochs must be positive");
  require(max_epochs >= 1, "max_epochs must be positive");
  require(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0, "betas must lie in [0, 1)");
  require(adam_epsilon > 0.0, "adam_epsilon must be positive");
  require(threads >= 1, "threads must be positive");
  masking.validate();
}

json TrainConfig::to_json() const {
  return {{"max_lr", max_lr},
          {"warmup_steps", warmup_steps},
          {"decay_half_life_steps", decay_half_life_steps},
          {"weight_decay", weight_decay},
          {"effective_batch", effective_batch},
          {"micro_batch", micro_batch},
          {"patience_epochs", patience_epochs},
          {"max_epochs", max_epochs},
          {"beta1", beta1},
          {"beta2", beta2},
          {"adam_epsilon", adam_epsilon},
          {"augment_invert", augment_invert},
          {"stochastic_masking", stochastic_masking},
          {"threads", threads}};
}

TrainConfig TrainConfig::from_json(const json& j) {
  constexpr std::string_view s = "train";
  detail::reject_unknown_keys(j, s,
                              {"max_lr", "warmup_steps", "decay_half_life_steps", "weight_decay",
                               "effective_batch", "micro_batch", "patience_epochs", "max_epochs",
                               "beta1", "beta2", "adam_epsilon", "augment_invert",
                               "stochastic_masking", "threads"});
  TrainConfig c;
  detail::read_if_present(j, "max_lr", c.max_lr, s);
  detail::read_if_present(j, "warmup_steps", c.warmup_steps, s);
  detail::read_if_present(j, "decay_half_life_steps", c.decay_half_life_steps, s);
  detail::read_if_present(j, "weight_decay", c.weight_decay, s);
  detail::read_if_present(j, "effective_batch", c.effective_batch, s);
  detail::read_if_present(j, "micro_batch", c.micro_batch, s);
  detail::read_if_present(j, "patience_epochs", c.patience_epochs, s);
  detail::read_if_present(j, "max_epochs", c.max_epochs, s);
  detail::read_if_present(j, "beta1", c.beta1, s);
  detail::read_if_present(j, "beta2", c.beta2, s);
  detail::read_if_present(j, "adam_epsilon", c.adam_epsilon, s);
  detail::read_if_present(j, "augment_invert", c.augment_invert, s);
  detail::read_if_present(j, "stochastic_masking", c.stochastic_masking, s);
  detail::read_if_present(j, "threads", c.threads, s);
  c.validate();
  return c;
}

double lr_at(std::size_t step, const TrainConfig& config) {
  const double s = static_cast<double>(step);
  const double warmup = static_cast<double>(config.warmup_steps);
  if (config.warmup_steps > 0 && step <= config.warmup_steps) return config.max_lr * s / warmup;
  return config.max_lr * std::pow(0.5, (s - warmup) / config.decay_half_life_steps);
}

template <typename T>
AdamState<T> AdamState<T>::zeros_like(const Params<T>& params) {
  AdamState<T> state;
  for (const auto& [name, t] : params) {
    state.first.emplace_back(t.numel(), T{0});
    state.second.emplace_back(t.numel(), T{0});
  }
  return state;
}

template <typename T>
void adamw_step(Params<T>& params, AdamState<T>& state, double lr, const TrainConfig& config) {
  auto& entries = params.entries();
  if (state.first.size() != entries.size() || state.second.size() != entries.size()) {
    throw PreconditionError("adamw_step: optimizer state does not match parameters");
  }
  for (const auto& [name, t] : entries) {
    if (!t.has_grad()) continue;
    for (T g : t.grad()) {
      if (!std::isfinite(static_cast<double>(g))) {
        throw NumericalError("non-finite gradient in " + name + " at step " +
                             std::to_string(state.step + 1) + "; step aborted");
      }
    }
  }
  ++state.step;
  const double b1 = config.beta1, b2 = config.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  const double decay = lr * config.weight_decay;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    auto& t = entries[i].second;
    auto p = t.mutable_values();
    auto& m = state.first[i];
    auto& v = state.second[i];
    const bool has = t.has_grad();
    std::span<const T> g = has ? t.grad() : std::span<const T>{};
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double gj = has ? static_cast<double>(g[j]) : 0.0;
      m[j] = static_cast<T>(b1 * m[j] + (1.0 - b1) * gj);
      v[j] = static_cast<T>(b2 * v[j] + (1.0 - b2) * gj * gj);
      const double mhat = m[j] / c1;
      const double vhat = v[j] / c2;
      double pj = static_cast<double>(p[j]);
      pj -= decay * pj;
      pj -= lr * mhat / (std::sqrt(vhat) + config.adam_epsilon);
      p[j] = static_cast<T>(pj);
    }
  }
}

template struct AdamState<float>;
template struct AdamState<double>;
template void adamw_step(Params<float>&, AdamState<float>&, double, const TrainConfig&);
template void adamw_step(Params<double>&, AdamState<double>&, double, const TrainConfig&);

// --- checkpoint ---------------------------------------------------------------

namespace {

constexpr std::string_view kCheckpointMagic{"W2SCKPT\n", 8};

[[noreturn]] void fail(ContainerErrorKind kind, const std::string& message) {
  throw ContainerError(kind, "checkpoint: " + message);
}

std::string rng_to_string(const std::mt19937_64& rng) {
  std::ostringstream out;
  out << rng;
  return out.str();
}

std::mt19937_64 rng_from_string(const std::string& text) {
  std::istringstream in(text);
  std::mt19937_64 rng;
  in >> rng;
  if (in.fail()) fail(ContainerErrorKind::CorruptHeader, "bad RNG state");
  return rng;
}

}  // namespace

std::string encode_checkpoint(const Checkpoint& c) {
  std::string payload;
  json entries = json::array();
  for (const auto& [name, t] : c.params) {
    entries.push_back({{"name", name}, {"shape", t.shape()}, {"offset", payload.size()}});
    detail::append_floats(payload, t.values());
  }
  const std::size_t block = payload.size();
  if (c.adam.first.size() != c.params.size() || c.adam.second.size() != c.params.size()) {
    throw PreconditionError("encode_checkpoint: optimizer state does not match parameters");
  }
  for (const auto& m : c.adam.first) detail::append_floats(payload, m);
  for (const auto& v : c.adam.second) detail::append_floats(payload, v);
  json best = nullptr;
  if (c.best_params) {
    best = payload.size();
    for (const auto& [name, t] : *c.best_params) detail::append_floats(payload, t.values());
  }

  const auto& s = c.state;
  json header;
  header["format"] = "wav2sleep-checkpoint";
  header["version"] = kCheckpointVersion;
  header["model"] = c.model.to_json();
  header["train"] = c.train.to_json();
  header["masking"] = c.train.masking.to_json();
  header["state"] = {{"step", s.step},
                     {"epoch", s.epoch},
                     {"best_val_loss", std::isfinite(s.best_val_loss) ? json(s.best_val_loss) : json(nullptr)},
                     {"best_epoch", s.best_epoch},
                     {"epochs_without_improvement", s.epochs_without_improvement},
                     {"seed", s.seed},
                     {"rng", rng_to_string(s.rng)},
                     {"adam_step", c.adam.step}};
  header["parameters"] = entries;
  header["blocks"] = {{"adam_first", block}, {"adam_second", 2 * block}, {"best", best}};
  header["payload_bytes"] = payload.size();
  header["crc32"] = detail::crc32_of(payload);
  const std::string text = header.dump();
  std::string out(kCheckpointMagic);
  detail::append_u64(out, text.size());
  out += text;
  out += payload;
  return out;
}

Checkpoint decode_checkpoint(std::string_view bytes) {
  if (bytes.size() < 16 || bytes.substr(0, 8) != kCheckpointMagic) {
    fail(ContainerErrorKind::CorruptHeader, "not a wav2sleep checkpoint (bad magic)");
  }
  const std::uint64_t length = detail::read_u64(bytes, 8);
  if (length > bytes.size() - 16) fail(ContainerErrorKind::CorruptHeader, "header length exceeds file size");
  json h;
  try {
    h = json::parse(bytes.substr(16, length));
  } catch (const json::exception& e) {
    fail(ContainerErrorKind::CorruptHeader, std::string("header is not valid JSON: ") + e.what());
  }
  const auto payload = bytes.substr(16 + length);
  try {
    if (h.at("format").get<std::string>() != "wav2sleep-checkpoint") {
      fail(ContainerErrorKind::CorruptHeader, "wrong format tag");
    }
    const auto version = h.at("version").get<std::uint32_t>();
    if (version != kCheckpointVersion) {
      fail(ContainerErrorKind::VersionMismatch, "version " + std::to_string(version) + ", expected " +
                                                    std::to_string(kCheckpointVersion));
    }
    if (h.at("payload_bytes").get<std::uint64_t>() != payload.size()) {
      fail(ContainerErrorKind::TruncatedPayload,
           "header declares " + h.at("payload_bytes").dump() + " payload bytes, file has " +
               std::to_string(payload.size()));
    }
    if (detail::crc32_of(payload) != h.at("crc32").get<std::uint32_t>()) {
      fail(ContainerErrorKind::ChecksumMismatch, "payload checksum mismatch");
    }

    Checkpoint c;
    c.model = ModelConfig::from_json(h.at("model"));
    c.train = TrainConfig::from_json(h.at("train"));
    c.train.masking = MaskingConfig::from_json(h.at("masking"));
    const auto& blocks = h.at("blocks");
    const auto first_base = blocks.at("adam_first").get<std::size_t>();
    const auto second_base = blocks.at("adam_second").get<std::size_t>();
    std::optional<std::size_t> best_base;
    if (!blocks.at("best").is_null()) best_base = blocks.at("best").get<std::size_t>();

    auto slice = [&](std::size_t offset, std::size_t count) {
      if (offset + count * 4 > payload.size()) {
        fail(ContainerErrorKind::TruncatedPayload, "parameter data extends past the payload");
      }
      return detail::read_floats(payload, offset, count);
    };
    Params<float> best;
    for (const auto& e : h.at("parameters")) {
      const auto name = e.at("name").get<std::string>();
      const auto shape = e.at("shape").get<Shape>();
      const auto offset = e.at("offset").get<std::size_t>();
      const std::size_t n = numel(shape);
      c.params.add(name, Tensor<float>::from(shape, slice(offset, n)));
      c.adam.first.push_back(slice(first_base + offset, n));
      c.adam.second.push_back(slice(second_base + offset, n));
      if (best_base) best.add(name, Tensor<float>::from(shape, slice(*best_base + offset, n)));
    }
    if (best_base) c.best_params = std::move(best);

    const auto& s = h.at("state");
    c.state.step = s.at("step").get<std::size_t>();
    c.state.epoch = s.at("epoch").get<std::size_t>();
    c.state.best_val_loss = s.at("best_val_loss").is_null()
                                ? std::numeric_limits<double>::infinity()
                                : s.at("best_val_loss").get<double>();
    c.state.best_epoch = s.at("best_epoch").get<std::size_t>();
    c.state.epochs_without_improvement = s.at("epochs_without_improvement").get<std::size_t>();
    c.state.seed = s.at("seed").get<std::uint64_t>();
    c.state.rng = rng_from_string(s.at("rng").get<std::string>());
    c.adam.step = s.at("adam_step").get<std::size_t>();
    return c;
  } catch (const json::exception& e) {
    fail(ContainerErrorKind::CorruptHeader, std::string("malformed header: ") + e.what());
  } catch (const ConfigError& e) {
    fail(ContainerErrorKind::CorruptHeader, std::string("stored config invalid: ") + e.what());
  } catch (const ShapeError& e) {
    fail(ContainerErrorKind::CorruptHeader, std::string("malformed parameter: ") + e.what());
  }
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  if (!detail::write_file_atomic(path, encode_checkpoint(checkpoint))) {
    throw ContainerError(ContainerErrorKind::Io, "cannot write checkpoint " + path.string());
  }
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::string bytes;
  if (!detail::read_file(path, bytes)) {
    throw ContainerError(ContainerErrorKind::Io, "cannot read checkpoint " + path.string());
  }
  try {
    return decode_checkpoint(bytes);
  } catch (const ContainerError& e) {
    throw ContainerError(e.kind(), path.string() + ": " + e.what());
  }
}

// --- training -------------------------------------------------------------------

json LogRecord::to_json() const {
  return {{"step", step},
          {"lr", lr},
          {"train_loss", train_loss},
          {"epoch", epoch},
          {"val_loss", val_loss ? json(*val_loss) : json(nullptr)}};
}

double validation_loss(const std::vector<const PreprocessedRecording*>& recordings,
                       const Params<float>& params, const ModelConfig& config, std::size_t batch) {
  if (recordings.empty()) throw DataError("validation set is empty");
  NoGradGuard no_grad;
  ForwardContext ctx;
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t start = 0; start < recordings.size(); start += batch) {
    const std::size_t end = std::min(recordings.size(), start + batch);
    std::vector<const PreprocessedRecording*> chunk(recordings.begin() + start, recordings.begin() + end);
    std::vector<ModalityMask> masks;
    for (const auto* r : chunk) masks.push_back(full_mask(available_kinds(*r)));
    auto b = collate(chunk, masks);
    total += softmax_cross_entropy(forward(b.input, params, config, ctx), b.labels).item();
    count += b.labelled_epochs();
  }
  const double loss = count ? total / static_cast<double>(count) : 0.0;
  if (!std::isfinite(loss)) throw NumericalError("validation loss is not finite (" + std::to_string(loss) + ")");
  return loss;
}

double batch_loss_and_grad(const Batch& batch, Params<float>& params, const ModelConfig& config,
                           double scale_by) {
  ForwardContext ctx;
  auto ce = softmax_cross_entropy(forward(batch.input, params, config, ctx), batch.labels);
  const double value = ce.item();
  scale(ce, static_cast<float>(scale_by)).backward();
  return value;
}

Trainer::Trainer(ModelConfig model, TrainConfig train, std::uint64_t seed)
    : model_(std::move(model)), train_(std::move(train)) {
  model_.validate();
  train_.validate();
  params_ = init_params<float>(model_, seed);
  params_.set_requires_grad(true);
  adam_ = AdamState<float>::zeros_like(params_);
  state_.seed = seed;
  state_.rng.seed(seed ^ 0x5851f42d4c957f2dULL);
}

Trainer::Trainer(const Checkpoint& from, TrainConfig train, std::uint64_t seed, bool resume_schedule)
    : model_(from.model), train_(std::move(train)) {
  model_.validate();
  train_.validate();
  params_ = from.params.clone();
  params_.set_requires_grad(true);
  if (resume_schedule) {
    adam_ = from.adam;
    state_ = from.state;
    if (state_.best_epoch > 0) {
      Checkpoint best = from;
      if (from.best_params) best.params = from.best_params->clone();
      best.best_params.reset();
      best_ = std::move(best);
    }
  } else {
    adam_ = AdamState<float>::zeros_like(params_);
    state_.seed = seed;
    state_.rng.seed(seed ^ 0x5851f42d4c957f2dULL);
  }
}

void Trainer::set_data(std::vector<const PreprocessedRecording*> train,
                       std::vector<const PreprocessedRecording*> validation) {
  if (train.empty()) throw DataError("training set is empty");
  if (validation.empty()) throw DataError("validation set is empty");
  for (const auto* r : train) require_compatible(*r, model_);
  for (const auto* r : validation) require_compatible(*r, model_);
  train_data_ = std::move(train);
  val_data_ = std::move(validation);
}

std::pair<double, std::size_t> Trainer::accumulate(
    const std::vector<const PreprocessedRecording*>& recordings, double divisor) {
  // Every random draw comes from the trainer stream in a fixed order before any
  // work is farmed out, so results do not depend on the thread count.
  struct Micro {
    std::vector<const PreprocessedRecording*> recordings;
    std::vector<ModalityMask> masks;
    std::vector<std::array<bool, kKindCount>> invert;
    std::uint64_t dropout_seed = 0;
  };
  std::vector<Micro> micros;
  std::bernoulli_distribution flip(train_.masking.invert_probability);
  for (std::size_t start = 0; start < recordings.size(); start += train_.micro_batch) {
    Micro m;
    const std::size_t end = std::min(recordings.size(), start + train_.micro_batch);
    for (std::size_t i = start; i < end; ++i) {
      const auto* r = recordings[i];
      const auto available = available_kinds(*r);
      std::array<bool, kKindCount> inv{};
      if (train_.augment_invert) {
        for (auto kind : kAllKinds) inv[index_of(kind)] = available[index_of(kind)] && flip(state_.rng);
      }
      m.recordings.push_back(r);
      m.invert.push_back(inv);
      m.masks.push_back(train_.stochastic_masking ? sample_mask(available, train_.masking, state_.rng)
                                                  : full_mask(available));
    }
    m.dropout_seed = state_.rng();
    micros.push_back(std::move(m));
  }

  std::vector<std::vector<std::vector<float>>> grads(micros.size());
  std::vector<double> losses(micros.size(), 0.0);
  std::vector<std::size_t> counts(micros.size(), 0);
  const float factor = static_cast<float>(1.0 / divisor);

  auto run = [&](Params<float>& p, std::size_t first, std::size_t stride) {
    for (std::size_t i = first; i < micros.size(); i += stride) {
      auto& m = micros[i];
      auto batch = collate(m.recordings, m.masks);
      for (auto kind : kAllKinds) {
        auto& signal = batch.input.signals[index_of(kind)];
        if (signal.numel() == 0) continue;
        auto values = signal.mutable_values();
        const std::size_t width = signal.dim(1);
        for (std::size_t b = 0; b < batch.size(); ++b) {
          if (!m.invert[b][index_of(kind)]) continue;
          for (std::size_t j = 0; j < width; ++j) values[b * width + j] = -values[b * width + j];
        }
      }
      std::mt19937_64 dropout_rng(m.dropout_seed);
      ForwardContext ctx{true, &dropout_rng};
      p.zero_grad();
      auto ce = softmax_cross_entropy(forward(batch.input, p, model_, ctx), batch.labels);
      losses[i] = ce.item();
      counts[i] = batch.labelled_epochs();
      scale(ce, factor).backward();
      auto& out = grads[i];
      for (const auto& [name, t] : p) {
        if (t.has_grad()) out.emplace_back(t.grad().begin(), t.grad().end());
        else out.emplace_back(t.numel(), 0.0f);
      }
    }
  };

  const std::size_t workers = std::min(train_.threads, micros.size());
  if (workers <= 1) {
    run(params_, 0, 1);
  } else {
    std::vector<Params<float>> copies;
    for (std::size_t w = 1; w < workers; ++w) {
      copies.push_back(params_.clone());
      copies.back().set_requires_grad(true);
    }
    std::vector<std::thread> pool;
    for (std::size_t w = 1; w < workers; ++w) {
      pool.emplace_back([&, w] { run(copies[w - 1], w, workers); });
    }
    std::exception_ptr error;
    try {
      run(params_, 0, workers);
    } catch (...) {
      error = std::current_exception();
    }
    for (auto& t : pool) t.join();
    if (error) std::rethrow_exception(error);
  }

  // Fixed-order reduction into params_' gradient buffers.
  params_.zero_grad();
  auto& entries = params_.entries();
  for (std::size_t k = 0; k < entries.size(); ++k) {
    auto g = entries[k].second.mutable_grad();
    std::fill(g.begin(), g.end(), 0.0f);
    for (const auto& micro_grads : grads) {
      const auto& src = micro_grads[k];
      for (std::size_t j = 0; j < g.size(); ++j) g[j] += src[j];
    }
  }
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < micros.size(); ++i) {
    total += losses[i];
    count += counts[i];
  }
  return {total, count};
}

double Trainer::step(const std::vector<const PreprocessedRecording*>& recordings) {
  if (recordings.empty()) throw DataError("training step with no recordings");
  auto [total, count] = accumulate(recordings, static_cast<double>(recordings.size()));
  const double lr = lr_at(state_.step + 1, train_);
  adamw_step(params_, adam_, lr, train_);
  params_.zero_grad();
  ++state_.step;
  const double loss = count ? total / static_cast<double>(count) : 0.0;
  if (!std::isfinite(loss)) throw NumericalError("training loss is not finite at step " + std::to_string(state_.step));
  LogRecord record{state_.step, lr, loss, state_.epoch + 1, std::nullopt};
  log_.push_back(record);
  return loss;
}

bool Trainer::run_epoch() {
  if (train_data_.empty()) throw DataError("Trainer::run_epoch: no training data set");
  std::vector<const PreprocessedRecording*> order = train_data_;
  std::shuffle(order.begin(), order.end(), state_.rng);
  const std::size_t first_record = log_.size();
  for (std::size_t start = 0; start < order.size(); start += train_.effective_batch) {
    const std::size_t end = std::min(order.size(), start + train_.effective_batch);
    step({order.begin() + start, order.begin() + end});
  }
  const double val = validation_loss(val_data_, params_, model_);
  ++state_.epoch;
  log_.back().val_loss = val;
  for (std::size_t i = first_record; i < log_.size(); ++i) {
    if (sink_) sink_(log_[i]);
  }
  if (val < state_.best_val_loss) {
    state_.best_val_loss = val;
    state_.best_epoch = state_.epoch;
    state_.epochs_without_improvement = 0;
    best_ = snapshot();
  } else {
    ++state_.epochs_without_improvement;
  }
  return state_.epochs_without_improvement < train_.patience_epochs;
}

void Trainer::fit() {
  while (state_.epoch < train_.max_epochs) {
    if (!run_epoch()) break;
  }
  if (best_) {
    params_ = best_->params.clone();
    params_.set_requires_grad(true);
  }
}

Checkpoint Trainer::snapshot() const {
  Checkpoint c{model_, train_, params_.clone(), adam_, state_, std::nullopt};
  if (best_ && state_.best_epoch != state_.epoch) c.best_params = best_->params.clone();
  return c;
}

Checkpoint Trainer::best_checkpoint() const { return best_ ? *best_ : snapshot(); }

}  // namespace wav2sleep
