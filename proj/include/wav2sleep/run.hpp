#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "wav2sleep/datapipe.hpp"
#include "wav2sleep/masking.hpp"
#include "wav2sleep/model.hpp"
#include "wav2sleep/synth.hpp"
#include "wav2sleep/train.hpp"

namespace wav2sleep {

struct DataConfig {
  std::size_t recordings = 240;
  // Relative weights of the train / val / test splits.
  std::array<double, 3> split{200.0, 20.0, 20.0};
  SynthConfig synth;

  // Recording counts per split: val and test are rounded, train takes the rest.
  std::array<std::size_t, 3> split_counts() const;
};

struct EvalConfig {
  std::vector<SignalKind> modalities{kAllKinds.begin(), kAllKinds.end()};
  std::optional<std::string> group_by;
};

/// Everything a run needs, as one JSON document with sections model, train,
/// masking, data, eval and seed. Unknown keys are rejected; missing keys keep
/// their defaults.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;  // train.masking mirrors the masking section
  DataConfig data;
  EvalConfig eval;
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig load(const std::filesystem::path& path);

  // Named presets: "default" (full-size model, 10-hour grid), "tiny"
  // (finite-difference scale, seconds to train) and "desk" (small model on
  // 2-hour nights, trainable on one CPU core in minutes).
  static RunConfig preset(const std::string& name);
};

enum class Split { Train, Val, Test };
std::string_view name_of(Split split);
std::optional<Split> parse_split(std::string_view name);

struct ManifestEntry {
  std::filesystem::path path;  // absolute, or relative to the manifest file
  Split split = Split::Train;
  std::map<std::string, std::string> group_keys;
};

/// {"recordings": [{"path", "split", "group_keys"}]}
struct Manifest {
  std::vector<ManifestEntry> recordings;

  std::vector<const ManifestEntry*> in_split(Split split) const;
  nlohmann::json to_json() const;
  static Manifest from_json(const nlohmann::json& j);
  // Relative paths are resolved against the manifest's directory.
  static Manifest load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;
};

// Synthetic recording `index` of a dataset: its seed mixes the run seed, the
// synth seed and the index.
RawRecording synth_recording(const DataConfig& data, std::uint64_t run_seed, std::size_t index);

// Writes one raw container per recording plus manifest.json. Returns the manifest.
Manifest write_synth_dataset(const RunConfig& config, const std::filesystem::path& out_dir);

// Reads a container and returns it on the model's grid: raw recordings are
// preprocessed, preprocessed ones must already match. Manifest group keys are
// merged into the metadata.
PreprocessedRecording load_for_model(const ManifestEntry& entry, const ModelConfig& model);
std::vector<PreprocessedRecording> load_split(const Manifest& manifest, Split split,
                                              const ModelConfig& model);

}  // namespace wav2sleep
