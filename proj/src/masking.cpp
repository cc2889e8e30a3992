#include "wav2sleep/masking.hpp"

#include <cmath>

#include "json_util.hpp"

namespace wav2sleep {

std::vector<SignalKind> kinds_in(const KindSet& set) {
  std::vector<SignalKind> out;
  for (auto kind : kAllKinds) {
    if (set[index_of(kind)]) out.push_back(kind);
  }
  return out;
}

KindSet kind_set(const std::vector<SignalKind>& kinds) {
  KindSet set{};
  for (auto kind : kinds) set[index_of(kind)] = true;
  return set;
}

KindSet available_kinds(const PreprocessedRecording& recording) {
  return kind_set(recording.kinds());
}

void MaskingConfig::validate() const {
  for (double p : drop_probability) {
    if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("masking.drop_probability entries must lie in [0, 1]");
  }
  if (!(invert_probability >= 0.0 && invert_probability <= 1.0)) {
    throw ConfigError("masking.invert_probability must lie in [0, 1]");
  }
}

nlohmann::json MaskingConfig::to_json() const {
  nlohmann::json probs;
  for (auto kind : kAllKinds) probs[std::string(name_of(kind))] = drop_probability[index_of(kind)];
  return {{"drop_probability", probs},
          {"max_retries", max_retries},
          {"invert_probability", invert_probability}};
}

MaskingConfig MaskingConfig::from_json(const nlohmann::json& j) {
  detail::reject_unknown_keys(j, "masking", {"drop_probability", "max_retries", "invert_probability"});
  MaskingConfig c;
  if (auto it = j.find("drop_probability"); it != j.end()) {
    detail::reject_unknown_keys(*it, "masking.drop_probability", {"ECG", "PPG", "ABD", "THX"});
    for (auto kind : kAllKinds) {
      detail::read_if_present(*it, std::string(name_of(kind)).c_str(),
                              c.drop_probability[index_of(kind)], "masking.drop_probability");
    }
  }
  detail::read_if_present(j, "max_retries", c.max_retries, "masking");
  detail::read_if_present(j, "invert_probability", c.invert_probability, "masking");
  c.validate();
  return c;
}

ModalityMask full_mask(const KindSet& available) { return {available, available}; }

ModalityMask sample_mask(const KindSet& available, const MaskingConfig& config,
                         std::mt19937_64& rng) {
  bool any = false;
  for (bool a : available) any = any || a;
  if (!any) throw DataError("sample_mask: recording has no available modality");
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  ModalityMask mask{available, {}};
  for (std::size_t attempt = 0; attempt <= config.max_retries; ++attempt) {
    bool kept_any = false;
    for (std::size_t i = 0; i < kKindCount; ++i) {
      // One draw per available kind keeps the stream layout independent of outcomes.
      mask.kept[i] = available[i] && uniform(rng) >= config.drop_probability[i];
      kept_any = kept_any || mask.kept[i];
    }
    if (kept_any) return mask;
  }
  return full_mask(available);
}

bool augment_invert(std::span<float> signal, double probability, std::mt19937_64& rng) {
  std::bernoulli_distribution coin(probability);
  const bool flip = coin(rng);
  if (flip) {
    for (float& v : signal) v = -v;
  }
  return flip;
}

AttentionMask Batch::attention_mask() const {
  std::vector<std::vector<bool>> keys(input.batch, std::vector<bool>(1 + kKindCount, false));
  for (std::size_t b = 0; b < input.batch; ++b) {
    keys[b][0] = true;
    for (auto kind : kAllKinds) keys[b][1 + index_of(kind)] = input.kept[index_of(kind)][b];
  }
  return AttentionMask::from_keys(keys, 1 + kKindCount);
}

std::size_t Batch::labelled_epochs() const {
  std::size_t n = 0;
  for (int l : labels) n += l >= 0 ? 1 : 0;
  return n;
}

Batch collate(const std::vector<const PreprocessedRecording*>& recordings,
              const std::vector<ModalityMask>& masks) {
  if (recordings.empty()) throw DataError("collate: empty batch");
  if (recordings.size() != masks.size()) throw DataError("collate: one mask per recording required");
  const std::size_t B = recordings.size();
  const std::size_t T = recordings.front()->epochs;
  Batch batch;
  batch.epochs = T;
  batch.input.batch = B;
  batch.labels.reserve(B * T);

  std::array<std::size_t, kKindCount> k{};
  for (std::size_t b = 0; b < B; ++b) {
    const auto& r = *recordings[b];
    if (r.epochs != T) {
      throw DataError("collate: recording '" + r.id + "' has " + std::to_string(r.epochs) +
                      " epochs, batch uses " + std::to_string(T));
    }
    for (auto kind : kAllKinds) {
      const std::size_t i = index_of(kind);
      if (masks[b].kept[i] && !r.has(kind)) {
        throw DataError("collate: mask keeps " + std::string(name_of(kind)) + " but recording '" +
                        r.id + "' only has " + kind_list(r.kinds()));
      }
      if (r.has(kind)) {
        const std::size_t spe = r.signals.at(kind).samples_per_epoch;
        if (k[i] != 0 && k[i] != spe) {
          throw DataError("collate: inconsistent samples per epoch for " + std::string(name_of(kind)));
        }
        k[i] = spe;
      }
    }
    batch.ids.push_back(r.id);
    for (auto stage : r.labels) batch.labels.push_back(code_of(stage));
  }

  for (auto kind : kAllKinds) {
    const std::size_t i = index_of(kind);
    batch.input.kept[i].assign(B, false);
    const std::size_t width = k[i] * T;
    std::vector<float> values(B * width, 0.0f);
    for (std::size_t b = 0; b < B; ++b) {
      if (!masks[b].kept[i]) continue;
      batch.input.kept[i][b] = true;
      const auto& src = recordings[b]->signals.at(kind).values;
      std::copy(src.begin(), src.end(), values.begin() + b * width);
    }
    batch.input.signals[i] = Tensor<float>::from({B, width}, std::move(values));
  }
  return batch;
}

}  // namespace wav2sleep
