#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "wav2sleep/datapipe.hpp"

namespace wav2sleep {

using StageArray = std::array<double, kAasmStageCount>;

/// Generative parameters for synthetic nights. Per-stage arrays are indexed by
/// AasmStage (Wake, N1, N2, N3, REM).
struct SynthConfig {
  // Jump-chain transition probabilities; row = current stage.
  std::array<StageArray, kAasmStageCount> transitions{{
      {0.00, 0.60, 0.30, 0.00, 0.10},
      {0.25, 0.00, 0.65, 0.00, 0.10},
      {0.15, 0.15, 0.00, 0.40, 0.30},
      {0.10, 0.05, 0.85, 0.00, 0.00},
      {0.35, 0.25, 0.40, 0.00, 0.00},
  }};
  // Dwell times are geometric with these means (epochs, >= 1).
  StageArray mean_dwell_epochs{8.0, 3.0, 15.0, 12.0, 14.0};
  AasmStage initial_stage = AasmStage::Wake;

  StageArray heart_rate_bpm{74.0, 66.0, 62.0, 57.0, 70.0};
  // Standard deviation of beat-to-beat interval jitter, as a fraction of the interval.
  StageArray heart_rate_variability{0.06, 0.04, 0.03, 0.015, 0.07};
  StageArray respiratory_rate_bpm{17.0, 15.0, 14.0, 13.0, 18.0};
  // Standard deviation of breath-to-breath period jitter, as a fraction of the period.
  StageArray respiratory_rate_variability{0.25, 0.12, 0.07, 0.03, 0.30};
  // Probability that an epoch carries a movement artifact burst.
  StageArray artifact_probability{0.35, 0.08, 0.02, 0.0, 0.03};

  double ecg_noise = 0.05;
  double ppg_noise = 0.05;
  double respiratory_noise = 0.05;
  // Width (s) of the smoothing kernel that turns beat impulses into the ECG complex.
  double ecg_pulse_width_s = 0.04;
  // Time constant (s) of each of the two PPG low-pass stages.
  double ppg_smoothing_s = 0.12;
  // Per-recording multiplicative spread of heart and breathing rates.
  double subject_rate_spread = 0.06;

  std::size_t duration_epochs = 960;
  double cardiac_rate_hz = 64.0;
  double respiratory_rate_hz = 8.0;
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static SynthConfig from_json(const nlohmann::json& j);
};

// Long-run fraction of epochs spent in each stage: the jump chain's
// stationary distribution weighted by mean dwell.
StageArray stationary_occupancy(const SynthConfig& config);

// Semi-Markov hypnogram of `epochs` epochs.
std::vector<AasmStage> synth_hypnogram(const SynthConfig& config, std::size_t epochs,
                                       std::uint64_t seed);

RawRecording synth_generate(const SynthConfig& config, const std::string& id = "synth");

}  // namespace wav2sleep
