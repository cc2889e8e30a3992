#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "wav2sleep/datapipe.hpp"
#include "wav2sleep/model.hpp"

namespace wav2sleep {

/// counts[truth][predicted] over Wake, Light, Deep, REM.
struct ConfusionMatrix {
  std::array<std::array<std::uint64_t, kClassCount>, kClassCount> counts{};

  std::uint64_t total() const;
  std::uint64_t trace() const;
  ConfusionMatrix& operator+=(const ConfusionMatrix& other);
  bool operator==(const ConfusionMatrix&) const = default;
  nlohmann::json to_json() const;
};

// Ignore-labelled truth epochs are skipped. Throws PreconditionError on a
// length mismatch.
ConfusionMatrix confusion(const Hypnogram& predicted, const Hypnogram& truth);

// Cohen's kappa. When expected agreement is 1 the value is defined as 0 and
// *degenerate is set. Throws PreconditionError for an empty matrix.
double kappa(const ConfusionMatrix& cm, bool* degenerate = nullptr);
double accuracy(const ConfusionMatrix& cm);

struct RecordingScore {
  std::string id;
  std::uint64_t epochs = 0;  // labelled epochs scored
  std::optional<double> kappa;
  double accuracy = 0.0;
};

struct MetricsReport {
  std::string config_digest;
  std::vector<SignalKind> subset;
  std::size_t n_recordings = 0;
  std::size_t skipped_recordings = 0;
  ConfusionMatrix confusion;
  double kappa_total = 0.0;
  double accuracy_total = 0.0;
  std::vector<RecordingScore> per_recording;
  std::map<std::string, MetricsReport> groups;
  std::vector<std::string> warnings;

  nlohmann::json to_json() const;
};

// Pools per-recording matrices into a report (no grouping).
MetricsReport summarize(const std::vector<std::pair<std::string, ConfusionMatrix>>& recordings);

// Predicts every recording that has all subset kinds (others are skipped with
// a warning), pools epochs into kappa_total/accuracy_total, and with a group
// key adds one sub-report per metadata value ("unknown" when missing).
// Throws DataError if no recording is left.
MetricsReport evaluate(const std::vector<const PreprocessedRecording*>& recordings,
                       const std::vector<SignalKind>& subset, const Params<float>& params,
                       const ModelConfig& config, const std::optional<std::string>& group_key = {});

// Short hex digest of the model config and weights, for report provenance.
std::string config_digest(const ModelConfig& config, const Params<float>& params);

// Self-contained SVG heatmap with counts and row-normalized shading.
std::string confusion_svg(const ConfusionMatrix& cm, const std::string& title);

}  // namespace wav2sleep
