#pragma once

#include <array>
#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "wav2sleep/types.hpp"

namespace wav2sleep {

struct ModelConfig;

inline constexpr double kEpochSeconds = 30.0;

struct Channel {
  double rate_hz = 0.0;
  std::vector<float> samples;
  bool operator==(const Channel&) const = default;
};

/// A night as recorded: native-rate series per kind plus one AASM stage per
/// 30 s epoch. Metadata holds group keys such as an age band.
struct RawRecording {
  std::string id;
  std::map<SignalKind, Channel> channels;
  std::vector<AasmStage> labels;
  std::map<std::string, std::string> metadata;

  std::size_t epochs() const { return labels.size(); }
  // Each series must cover the labelled span to within one epoch.
  void validate() const;
  bool operator==(const RawRecording&) const = default;
};

struct Signal {
  std::size_t samples_per_epoch = 0;
  std::vector<float> values;  // samples_per_epoch * epochs
  bool operator==(const Signal&) const = default;
};

/// Fixed-grid model input: per kind k samples per epoch, one four-class label
/// per epoch. recorded_epochs counts epochs before padding.
struct PreprocessedRecording {
  std::string id;
  std::size_t epochs = 0;
  std::size_t recorded_epochs = 0;
  std::map<SignalKind, Signal> signals;
  std::vector<SleepStage> labels;
  std::map<std::string, std::string> metadata;

  bool has(SignalKind kind) const { return signals.count(kind) != 0; }
  std::vector<SignalKind> kinds() const;
  void validate() const;
  bool operator==(const PreprocessedRecording&) const = default;
};

struct PreprocessOptions {
  std::size_t epochs = 1200;
  std::array<std::size_t, kKindCount> samples_per_epoch{1024, 1024, 256, 256};

  static PreprocessOptions from(const ModelConfig& config);
};

// Endpoint-inclusive linear interpolation to out_length samples: output i
// reads input position i * (n_in - 1) / (n_out - 1).
std::vector<float> resample(std::span<const float> series, std::size_t out_length);
// Resamples a native-rate series onto samples_per_epoch * epochs points.
std::vector<float> resample(std::span<const float> series, double native_rate_hz,
                            std::size_t samples_per_epoch, std::size_t epochs);

// Z-score with the population standard deviation; constant input gives zeros.
std::vector<float> normalize(std::span<const float> series);

// Start-aligned: keeps the first `epochs` epochs, or zero-pads at the end with
// Ignore labels.
PreprocessedRecording pad_truncate(const PreprocessedRecording& recording, std::size_t epochs);

// resample -> normalize -> pad_truncate, with labels merged to four classes.
PreprocessedRecording preprocess(const RawRecording& raw, const PreprocessOptions& options);

Hypnogram merge_stages(const std::vector<AasmStage>& labels);

// "ECG,PPG" style listing of the kinds present.
std::string kind_list(const std::vector<SignalKind>& kinds);

}  // namespace wav2sleep
