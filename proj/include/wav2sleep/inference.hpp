#pragma once

#include <array>
#include <vector>

#include "wav2sleep/datapipe.hpp"
#include "wav2sleep/model.hpp"

namespace wav2sleep {

struct Prediction {
  Hypnogram stages;                                  // argmax, lowest class on ties
  std::vector<std::array<float, kClassCount>> probabilities;
};

// Runs the model on the requested subset of the recording's signals with
// dropout off. Throws DataError listing the available kinds when a requested
// kind is missing, PreconditionError for an empty subset.
Prediction predict(const PreprocessedRecording& recording, const std::vector<SignalKind>& subset,
                   const Params<float>& params, const ModelConfig& config);

// Same as predict over several recordings, batched `batch` at a time.
std::vector<Prediction> predict_all(const std::vector<const PreprocessedRecording*>& recordings,
                                    const std::vector<SignalKind>& subset,
                                    const Params<float>& params, const ModelConfig& config,
                                    std::size_t batch = 8);

// Checks a recording's grid against the model's epochs and samples per epoch.
void require_compatible(const PreprocessedRecording& recording, const ModelConfig& config);

}  // namespace wav2sleep
