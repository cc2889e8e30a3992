#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "wav2sleep/ops.hpp"
#include "wav2sleep/tensor.hpp"
#include "wav2sleep/types.hpp"

namespace wav2sleep {

/// Architecture hyper-parameters. Defaults reproduce the published model:
/// 128-wide features, six/eight residual encoder layers for the 256/1024
/// sample-per-epoch signals, a two-layer CLS transformer and two dilated blocks.
struct ModelConfig {
  std::size_t feature_dim = 128;
  double dropout = 0.1;
  std::size_t encoder_kernel = 3;
  std::vector<std::size_t> respiratory_channels{16, 32, 64, 64, 128, 128};
  std::vector<std::size_t> cardiac_channels{16, 16, 32, 32, 64, 64, 128, 128};
  std::size_t mixer_layers = 2;
  std::size_t mixer_hidden = 512;
  std::size_t mixer_heads = 8;
  std::size_t seq_blocks = 2;
  std::size_t seq_kernel = 7;
  std::vector<std::size_t> seq_dilations{1, 2, 4, 8, 16, 32};
  std::size_t classes = 4;
  std::size_t epochs = 1200;
  std::size_t cardiac_samples_per_epoch = 1024;
  std::size_t respiratory_samples_per_epoch = 256;
  bool modality_embeddings = true;
  bool encoder_instance_norm = true;
  double norm_epsilon = 1e-5;

  std::size_t samples_per_epoch(SignalKind kind) const;
  const std::vector<std::size_t>& encoder_channels(SignalKind kind) const;
  // Width of the flattened per-epoch encoder output: 4 x last channel count.
  std::size_t encoder_flat_width(SignalKind kind) const;
  // One-sided receptive radius of the sequence mixer, in sleep epochs.
  std::size_t sequence_receptive_radius() const;

  // Throws ConfigError describing the first violated invariant.
  void validate() const;

  // T=8, k=16, feature_dim=8: small enough for finite-difference checks.
  static ModelConfig tiny();

  nlohmann::json to_json() const;
  // Unknown keys are rejected; missing keys keep their defaults.
  static ModelConfig from_json(const nlohmann::json& j);
};

/// Named parameter tensors in a fixed enumeration order.
template <typename T>
class Params {
 public:
  using Entry = std::pair<std::string, Tensor<T>>;

  void add(std::string name, Tensor<T> tensor);
  bool contains(std::string_view name) const;
  const Tensor<T>& at(std::string_view name) const;
  Tensor<T>& at(std::string_view name);

  std::size_t size() const { return entries_.size(); }
  std::size_t parameter_count() const;
  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Entry>& entries() { return entries_; }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  void zero_grad();
  void set_requires_grad(bool flag);
  // Deep copy with fresh leaves (no shared storage, no grads).
  Params clone() const;
  template <typename U>
  Params<U> cast() const;

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

extern template class Params<float>;
extern template class Params<double>;

// Fan-in scaled uniform initialization, deterministic in the seed.
template <typename T>
Params<T> init_params(const ModelConfig& config, std::uint64_t seed);

// Training mode enables dropout, drawing masks from rng.
struct ForwardContext {
  bool training = false;
  std::mt19937_64* rng = nullptr;
};

/// Input to a batched forward pass: per kind a [batch, k*T] tensor (rows of
/// absent kinds may hold anything; they are never read) and which rows carry
/// that kind.
template <typename T>
struct ModelInput {
  std::size_t batch = 0;
  std::array<Tensor<T>, kKindCount> signals;
  std::array<std::vector<bool>, kKindCount> kept;
};

// x: [B, k*T] -> [B, T, feature_dim]
template <typename T>
Tensor<T> encode_signal(const Tensor<T>& x, SignalKind kind, const Params<T>& params,
                        const ModelConfig& config, ForwardContext& ctx);

// Pre-dense encoder output [B, T, 4 * last channels]; exposed for shape checks.
template <typename T>
Tensor<T> encode_signal_flat(const Tensor<T>& x, SignalKind kind, const Params<T>& params,
                             const ModelConfig& config, ForwardContext& ctx);

/// Fuses modality tokens into one vector per row. tokens[i] is [N, F] for
/// kinds[i]; present (optional) is [groups][tokens] and excludes tokens from
/// attention for the rows of that group. Returns the CLS output, [N, F].
template <typename T>
Tensor<T> mix_tokens(const std::vector<SignalKind>& kinds, const std::vector<Tensor<T>>& tokens,
                     const std::vector<std::vector<bool>>* present, const Params<T>& params,
                     const ModelConfig& config, ForwardContext& ctx);

// Single-epoch convenience form of mix_tokens: features is a non-empty set of
// (kind, [F]) pairs in any order. Returns [F].
template <typename T>
Tensor<T> mix_epoch(const std::vector<std::pair<SignalKind, Tensor<T>>>& features,
                    const Params<T>& params, const ModelConfig& config, ForwardContext& ctx);

// z: [B, T, F] -> logits [B, T, classes]
template <typename T>
Tensor<T> mix_sequence(const Tensor<T>& z, const Params<T>& params, const ModelConfig& config,
                       ForwardContext& ctx);

// Full network. Returns logits [B, T, classes].
template <typename T>
Tensor<T> forward(const ModelInput<T>& input, const Params<T>& params, const ModelConfig& config,
                  ForwardContext& ctx);

}  // namespace wav2sleep
