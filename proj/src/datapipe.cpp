#include "wav2sleep/datapipe.hpp"

#include <cmath>

#include "wav2sleep/model.hpp"

namespace wav2sleep {

void RawRecording::validate() const {
  if (labels.empty()) throw DataError("recording '" + id + "' has no labelled epochs");
  for (const auto& [kind, channel] : channels) {
    if (!(channel.rate_hz > 0.0) || !std::isfinite(channel.rate_hz)) {
      throw DataError("recording '" + id + "': " + std::string(name_of(kind)) +
                      " has a non-positive sampling rate");
    }
    const double per_epoch = channel.rate_hz * kEpochSeconds;
    const double expected = per_epoch * static_cast<double>(labels.size());
    if (std::abs(static_cast<double>(channel.samples.size()) - expected) > per_epoch + 1.0) {
      throw DataError("recording '" + id + "': " + std::string(name_of(kind)) + " has " +
                      std::to_string(channel.samples.size()) + " samples, expected about " +
                      std::to_string(static_cast<long long>(expected)) + " for " +
                      std::to_string(labels.size()) + " epochs");
    }
  }
}

std::vector<SignalKind> PreprocessedRecording::kinds() const {
  std::vector<SignalKind> out;
  for (const auto& [kind, signal] : signals) out.push_back(kind);
  return out;
}

void PreprocessedRecording::validate() const {
  if (labels.size() != epochs) {
    throw DataError("recording '" + id + "': " + std::to_string(labels.size()) +
                    " labels for " + std::to_string(epochs) + " epochs");
  }
  for (const auto& [kind, signal] : signals) {
    if (signal.samples_per_epoch == 0 || signal.values.size() != signal.samples_per_epoch * epochs) {
      throw DataError("recording '" + id + "': " + std::string(name_of(kind)) + " has " +
                      std::to_string(signal.values.size()) + " samples, expected " +
                      std::to_string(signal.samples_per_epoch * epochs));
    }
  }
}

PreprocessOptions PreprocessOptions::from(const ModelConfig& config) {
  PreprocessOptions options;
  options.epochs = config.epochs;
  for (auto kind : kAllKinds) options.samples_per_epoch[index_of(kind)] = config.samples_per_epoch(kind);
  return options;
}

std::vector<float> resample(std::span<const float> series, std::size_t out_length) {
  if (series.empty()) throw DataError("resample: empty series");
  if (out_length == 0) return {};
  if (series.size() == 1) {
    if (out_length > 1) throw DataError("resample: cannot interpolate a single sample");
    return {series[0]};
  }
  std::vector<float> out(out_length);
  if (out_length == 1) {
    out[0] = series[0];
    return out;
  }
  const std::size_t n_in = series.size();
  const double step = static_cast<double>(n_in - 1) / static_cast<double>(out_length - 1);
  for (std::size_t i = 0; i < out_length; ++i) {
    const double pos = static_cast<double>(i) * step;
    std::size_t j = static_cast<std::size_t>(pos);
    if (j >= n_in - 1) j = n_in - 2;
    const double frac = pos - static_cast<double>(j);
    out[i] = static_cast<float>((1.0 - frac) * series[j] + frac * series[j + 1]);
  }
  return out;
}

std::vector<float> resample(std::span<const float> series, double native_rate_hz,
                            std::size_t samples_per_epoch, std::size_t epochs) {
  if (!(native_rate_hz > 0.0)) throw DataError("resample: native rate must be positive");
  return resample(series, samples_per_epoch * epochs);
}

std::vector<float> normalize(std::span<const float> series) {
  if (series.empty()) throw DataError("normalize: empty series");
  double mean = 0.0;
  for (float v : series) mean += v;
  mean /= static_cast<double>(series.size());
  double var = 0.0;
  for (float v : series) var += (v - mean) * (v - mean);
  var /= static_cast<double>(series.size());
  std::vector<float> out(series.size(), 0.0f);
  const double sd = std::sqrt(var);
  // Relative floor so float rounding of a constant series does not blow up.
  if (!(sd > 1e-7 * std::max(1.0, std::abs(mean)))) return out;
  for (std::size_t i = 0; i < series.size(); ++i) {
    out[i] = static_cast<float>((series[i] - mean) / sd);
  }
  return out;
}

PreprocessedRecording pad_truncate(const PreprocessedRecording& recording, std::size_t epochs) {
  if (recording.epochs == 0) throw DataError("recording '" + recording.id + "' is empty");
  recording.validate();
  PreprocessedRecording out;
  out.id = recording.id;
  out.metadata = recording.metadata;
  out.epochs = epochs;
  out.recorded_epochs = std::min(recording.recorded_epochs ? recording.recorded_epochs : recording.epochs,
                                 epochs);
  const std::size_t keep = std::min(recording.epochs, epochs);
  out.labels.assign(epochs, SleepStage::Ignore);
  std::copy_n(recording.labels.begin(), keep, out.labels.begin());
  for (const auto& [kind, signal] : recording.signals) {
    Signal s;
    s.samples_per_epoch = signal.samples_per_epoch;
    s.values.assign(signal.samples_per_epoch * epochs, 0.0f);
    std::copy_n(signal.values.begin(), signal.samples_per_epoch * keep, s.values.begin());
    out.signals.emplace(kind, std::move(s));
  }
  return out;
}

Hypnogram merge_stages(const std::vector<AasmStage>& labels) {
  Hypnogram out;
  out.reserve(labels.size());
  for (auto stage : labels) out.push_back(merge_stages(stage));
  return out;
}

PreprocessedRecording preprocess(const RawRecording& raw, const PreprocessOptions& options) {
  raw.validate();
  if (raw.channels.empty()) throw DataError("recording '" + raw.id + "' has no signals");
  PreprocessedRecording full;
  full.id = raw.id;
  full.metadata = raw.metadata;
  full.epochs = raw.epochs();
  full.recorded_epochs = raw.epochs();
  full.labels = merge_stages(raw.labels);
  for (const auto& [kind, channel] : raw.channels) {
    const std::size_t k = options.samples_per_epoch[index_of(kind)];
    Signal s;
    s.samples_per_epoch = k;
    s.values = normalize(resample(channel.samples, channel.rate_hz, k, full.epochs));
    full.signals.emplace(kind, std::move(s));
  }
  return pad_truncate(full, options.epochs);
}

std::string kind_list(const std::vector<SignalKind>& kinds) {
  std::string out;
  for (auto kind : kinds) {
    if (!out.empty()) out += ",";
    out += name_of(kind);
  }
  return out;
}

}  // namespace wav2sleep
