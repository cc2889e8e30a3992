#include "wav2sleep/inference.hpp"

#include "wav2sleep/masking.hpp"
#include "wav2sleep/ops.hpp"

namespace wav2sleep {

void require_compatible(const PreprocessedRecording& recording, const ModelConfig& config) {
  if (recording.epochs != config.epochs) {
    throw DataError("recording '" + recording.id + "' has " + std::to_string(recording.epochs) +
                    " epochs, model expects " + std::to_string(config.epochs));
  }
  for (const auto& [kind, signal] : recording.signals) {
    if (signal.samples_per_epoch != config.samples_per_epoch(kind)) {
      throw DataError("recording '" + recording.id + "': " + std::string(name_of(kind)) + " has " +
                      std::to_string(signal.samples_per_epoch) + " samples per epoch, model expects " +
                      std::to_string(config.samples_per_epoch(kind)));
    }
  }
}

std::vector<Prediction> predict_all(const std::vector<const PreprocessedRecording*>& recordings,
                                    const std::vector<SignalKind>& subset,
                                    const Params<float>& params, const ModelConfig& config,
                                    std::size_t batch) {
  if (subset.empty()) throw PreconditionError("predict: empty modality subset");
  const KindSet wanted = kind_set(subset);
  for (const auto* r : recordings) {
    for (auto kind : subset) {
      if (!r->has(kind)) {
        throw DataError("recording '" + r->id + "' has no " + std::string(name_of(kind)) +
                        " signal (available: " + kind_list(r->kinds()) + ")");
      }
    }
    require_compatible(*r, config);
  }

  NoGradGuard no_grad;
  ForwardContext ctx;
  std::vector<Prediction> out;
  out.reserve(recordings.size());
  for (std::size_t start = 0; start < recordings.size(); start += batch) {
    const std::size_t end = std::min(recordings.size(), start + batch);
    std::vector<const PreprocessedRecording*> chunk(recordings.begin() + start, recordings.begin() + end);
    std::vector<ModalityMask> masks(chunk.size(), ModalityMask{wanted, wanted});
    auto b = collate(chunk, masks);
    auto probs = softmax(forward(b.input, params, config, ctx));
    auto p = probs.values();
    const std::size_t T = config.epochs;
    for (std::size_t i = 0; i < chunk.size(); ++i) {
      Prediction pred;
      pred.stages.resize(T);
      pred.probabilities.resize(T);
      for (std::size_t t = 0; t < T; ++t) {
        const float* row = p.data() + (i * T + t) * kClassCount;
        std::size_t best = 0;
        for (std::size_t c = 0; c < kClassCount; ++c) {
          pred.probabilities[t][c] = row[c];
          if (row[c] > row[best]) best = c;
        }
        pred.stages[t] = static_cast<SleepStage>(best);
      }
      out.push_back(std::move(pred));
    }
  }
  return out;
}

Prediction predict(const PreprocessedRecording& recording, const std::vector<SignalKind>& subset,
                   const Params<float>& params, const ModelConfig& config) {
  return std::move(predict_all({&recording}, subset, params, config, 1).front());
}

}  // namespace wav2sleep
