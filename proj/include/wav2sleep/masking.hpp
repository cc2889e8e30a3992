#pragma once

#include <array>
#include <cstddef>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "wav2sleep/datapipe.hpp"
#include "wav2sleep/model.hpp"
#include "wav2sleep/ops.hpp"

namespace wav2sleep {

using KindSet = std::array<bool, kKindCount>;

std::vector<SignalKind> kinds_in(const KindSet& set);
KindSet kind_set(const std::vector<SignalKind>& kinds);
KindSet available_kinds(const PreprocessedRecording& recording);

struct MaskingConfig {
  // Probability that each kind is dropped, indexed by SignalKind.
  std::array<double, kKindCount> drop_probability{0.5, 0.1, 0.7, 0.7};
  // Draws that come out empty are repeated this many times before keeping everything.
  std::size_t max_retries = 8;
  double invert_probability = 0.5;

  void validate() const;
  nlohmann::json to_json() const;
  static MaskingConfig from_json(const nlohmann::json& j);
};

struct ModalityMask {
  KindSet available{};
  KindSet kept{};

  bool operator==(const ModalityMask&) const = default;
};

// Every available kind kept.
ModalityMask full_mask(const KindSet& available);

// Drops each available kind independently with its probability. An empty
// draw is retried; after max_retries empty draws all available kinds are kept.
ModalityMask sample_mask(const KindSet& available, const MaskingConfig& config,
                         std::mt19937_64& rng);

// Flips the sign of the whole signal with the given probability. Returns
// whether it flipped.
bool augment_invert(std::span<float> signal, double probability, std::mt19937_64& rng);

/// A fixed-shape training or evaluation batch. Absent and dropped kinds are
/// zero rows in input.signals and false in input.kept; labels are flattened
/// [B * T] class codes with -1 for Ignore.
struct Batch {
  ModelInput<float> input;
  std::vector<int> labels;
  std::vector<std::string> ids;
  std::size_t epochs = 0;

  std::size_t size() const { return input.batch; }
  // Epoch-mixer keys per recording: CLS then ECG, PPG, ABD, THX.
  AttentionMask attention_mask() const;
  std::size_t labelled_epochs() const;
};

// Recordings must share the epoch count and samples per epoch. Throws
// DataError when a mask keeps a kind its recording lacks.
Batch collate(const std::vector<const PreprocessedRecording*>& recordings,
              const std::vector<ModalityMask>& masks);

}  // namespace wav2sleep
