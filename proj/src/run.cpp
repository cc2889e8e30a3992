#include "wav2sleep/run.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "bytes.hpp"
#include "json_util.hpp"
#include "wav2sleep/container.hpp"

namespace wav2sleep {

using nlohmann::json;

std::array<std::size_t, 3> DataConfig::split_counts() const {
  const double total = split[0] + split[1] + split[2];
  const auto share = [&](double w) {
    return static_cast<std::size_t>(std::llround(static_cast<double>(recordings) * w / total));
  };
  const std::size_t val = share(split[1]);
  const std::size_t test = std::min(share(split[2]), recordings - val);
  return {recordings - val - test, val, test};
}

void RunConfig::validate() const {
  model.validate();
  train.validate();
  data.synth.validate();
  if (data.recordings == 0) throw ConfigError("data.recordings must be positive");
  for (double w : data.split) {
    if (!(w >= 0.0 && std::isfinite(w))) throw ConfigError("data.split weights must be non-negative");
  }
  if (data.split[0] + data.split[1] + data.split[2] <= 0.0) throw ConfigError("data.split weights sum to zero");
  if (eval.modalities.empty()) throw ConfigError("eval.modalities must not be empty");
}

namespace {

json kinds_json(const std::vector<SignalKind>& kinds) {
  json out = json::array();
  for (auto k : kinds) out.push_back(std::string(name_of(k)));
  return out;
}

std::vector<SignalKind> kinds_from_json(const json& j, const std::string& where) {
  if (!j.is_array()) throw ConfigError(where + " must be a list of signal kinds");
  std::vector<SignalKind> out;
  for (const auto& item : j) {
    if (!item.is_string()) throw ConfigError(where + " entries must be strings");
    auto kind = parse_kind(item.get<std::string>());
    if (!kind) throw ConfigError("unknown signal kind '" + item.get<std::string>() + "' in " + where);
    if (std::find(out.begin(), out.end(), *kind) == out.end()) out.push_back(*kind);
  }
  return out;
}

// SplitMix64 finalizer; spreads consecutive indices over the seed space.
std::uint64_t mix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

json RunConfig::to_json() const {
  json data_json{{"recordings", data.recordings},
                 {"split", {{"train", data.split[0]}, {"val", data.split[1]}, {"test", data.split[2]}}},
                 {"synth", data.synth.to_json()}};
  json eval_json{{"modalities", kinds_json(eval.modalities)},
                 {"group_by", eval.group_by ? json(*eval.group_by) : json(nullptr)}};
  return {{"model", model.to_json()},     {"train", train.to_json()},
          {"masking", train.masking.to_json()}, {"data", data_json},
          {"eval", eval_json},            {"seed", seed}};
}

RunConfig RunConfig::from_json(const json& j) {
  detail::reject_unknown_keys(j, "run", {"model", "train", "masking", "data", "eval", "seed"});
  RunConfig c;
  if (j.contains("model")) c.model = ModelConfig::from_json(j["model"]);
  if (j.contains("train")) c.train = TrainConfig::from_json(j["train"]);
  if (j.contains("masking")) c.train.masking = MaskingConfig::from_json(j["masking"]);
  if (j.contains("data")) {
    const auto& d = j["data"];
    detail::reject_unknown_keys(d, "data", {"recordings", "split", "synth"});
    detail::read_if_present(d, "recordings", c.data.recordings, "data");
    if (d.contains("split")) {
      const auto& s = d["split"];
      detail::reject_unknown_keys(s, "data.split", {"train", "val", "test"});
      detail::read_if_present(s, "train", c.data.split[0], "data.split");
      detail::read_if_present(s, "val", c.data.split[1], "data.split");
      detail::read_if_present(s, "test", c.data.split[2], "data.split");
    }
    if (d.contains("synth")) c.data.synth = SynthConfig::from_json(d["synth"]);
  }
  if (j.contains("eval")) {
    const auto& e = j["eval"];
    detail::reject_unknown_keys(e, "eval", {"modalities", "group_by"});
    if (e.contains("modalities")) c.eval.modalities = kinds_from_json(e["modalities"], "eval.modalities");
    if (e.contains("group_by") && !e["group_by"].is_null()) {
      std::string key;
      detail::read_if_present(e, "group_by", key, "eval");
      c.eval.group_by = key;
    }
  }
  detail::read_if_present(j, "seed", c.seed, "run");
  c.validate();
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
  }
  return from_json(j);
}

RunConfig RunConfig::preset(const std::string& name) {
  RunConfig c;
  if (name == "default") return c;
  if (name == "tiny") {
    c.model = ModelConfig::tiny();
    c.train.warmup_steps = 5;
    c.train.decay_half_life_steps = 50;
    c.train.effective_batch = 4;
    c.train.micro_batch = 2;
    c.train.max_epochs = 3;
    c.data.recordings = 10;
    c.data.split = {8, 1, 1};
    c.data.synth.duration_epochs = c.model.epochs;
    return c;
  }
  if (name == "desk") {
    c.model.feature_dim = 32;
    c.model.mixer_hidden = 64;
    c.model.mixer_heads = 4;
    c.model.cardiac_samples_per_epoch = 128;
    c.model.cardiac_channels = {8, 8, 16, 16, 32};
    c.model.respiratory_samples_per_epoch = 32;
    c.model.respiratory_channels = {8, 16, 32};
    c.model.epochs = 240;
    c.train.warmup_steps = 50;
    c.train.decay_half_life_steps = 300;
    c.train.max_epochs = 10;
    c.data.synth.duration_epochs = 240;
    // Wider QRS complexes survive resampling to 128 samples per epoch.
    c.data.synth.ecg_pulse_width_s = 0.15;
    return c;
  }
  throw ConfigError("unknown preset '" + name + "' (expected default, tiny or desk)");
}

std::string_view name_of(Split split) {
  switch (split) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "?";
}

std::optional<Split> parse_split(std::string_view name) {
  if (name == "train") return Split::Train;
  if (name == "val") return Split::Val;
  if (name == "test") return Split::Test;
  return std::nullopt;
}

std::vector<const ManifestEntry*> Manifest::in_split(Split split) const {
  std::vector<const ManifestEntry*> out;
  for (const auto& r : recordings) {
    if (r.split == split) out.push_back(&r);
  }
  return out;
}

json Manifest::to_json() const {
  json list = json::array();
  for (const auto& r : recordings) {
    list.push_back({{"path", r.path.generic_string()}, {"split", std::string(name_of(r.split))},
                    {"group_keys", r.group_keys}});
  }
  return {{"recordings", list}};
}

Manifest Manifest::from_json(const json& j) {
  if (!j.is_object() || !j.contains("recordings") || !j["recordings"].is_array()) {
    throw DataError("manifest must be an object with a 'recordings' list");
  }
  Manifest m;
  for (const auto& item : j["recordings"]) {
    if (!item.is_object() || !item.contains("path") || !item["path"].is_string()) {
      throw DataError("manifest entry without a string 'path'");
    }
    ManifestEntry e;
    e.path = item["path"].get<std::string>();
    const std::string split = item.value("split", std::string("train"));
    auto parsed = parse_split(split);
    if (!parsed) throw DataError("manifest entry " + e.path.string() + " has unknown split '" + split + "'");
    e.split = *parsed;
    if (item.contains("group_keys")) {
      for (const auto& [k, v] : item["group_keys"].items()) {
        e.group_keys[k] = v.is_string() ? v.get<std::string>() : v.dump();
      }
    }
    m.recordings.push_back(std::move(e));
  }
  return m;
}

Manifest Manifest::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw DataError("manifest " + path.string() + " is not valid JSON: " + e.what());
  }
  auto m = from_json(j);
  const auto base = path.parent_path();
  for (auto& r : m.recordings) {
    if (r.path.is_relative()) r.path = base / r.path;
  }
  return m;
}

void Manifest::save(const std::filesystem::path& path) const {
  detail::write_file_atomic(path, to_json().dump(2) + "\n");
}

RawRecording synth_recording(const DataConfig& data, std::uint64_t run_seed, std::size_t index) {
  SynthConfig c = data.synth;
  c.seed = mix(mix(run_seed) ^ mix(data.synth.seed + 0x632be59bd9b4e019ULL) ^ index);
  char id[32];
  std::snprintf(id, sizeof id, "synth%05zu", index);
  return synth_generate(c, id);
}

Manifest write_synth_dataset(const RunConfig& config, const std::filesystem::path& out_dir) {
  config.validate();
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw DataError("cannot create output directory " + out_dir.string() + ": " + ec.message());
  const auto counts = config.data.split_counts();
  Manifest manifest;
  for (std::size_t i = 0; i < config.data.recordings; ++i) {
    auto rec = synth_recording(config.data, config.seed, i);
    const auto file = rec.id + ".w2s";
    write_container(out_dir / file, rec);
    ManifestEntry e;
    e.path = file;
    e.split = i < counts[0] ? Split::Train : i < counts[0] + counts[1] ? Split::Val : Split::Test;
    auto age = rec.metadata.find("age_band");
    if (age != rec.metadata.end()) e.group_keys["age_band"] = age->second;
    manifest.recordings.push_back(std::move(e));
  }
  manifest.save(out_dir / "manifest.json");
  return manifest;
}

PreprocessedRecording load_for_model(const ManifestEntry& entry, const ModelConfig& model) {
  PreprocessedRecording rec;
  if (is_preprocessed_container(entry.path)) {
    rec = read_preprocessed(entry.path);
  } else {
    rec = preprocess(read_raw(entry.path), PreprocessOptions::from(model));
  }
  for (const auto& [k, v] : entry.group_keys) rec.metadata[k] = v;
  return rec;
}

std::vector<PreprocessedRecording> load_split(const Manifest& manifest, Split split,
                                              const ModelConfig& model) {
  std::vector<PreprocessedRecording> out;
  for (const auto* e : manifest.in_split(split)) out.push_back(load_for_model(*e, model));
  return out;
}

}  // namespace wav2sleep
