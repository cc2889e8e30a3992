#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "wav2sleep/container.hpp"
#include "wav2sleep/datapipe.hpp"
#include "wav2sleep/model.hpp"
#include "wav2sleep/synth.hpp"

using namespace wav2sleep;

namespace {

std::filesystem::path temp_path(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "wav2sleep_test_datapipe";
  std::filesystem::create_directories(dir);
  return dir / name;
}

PreprocessedRecording ramp_recording(std::size_t epochs, std::size_t k) {
  PreprocessedRecording r;
  r.id = "ramp";
  r.epochs = epochs;
  r.recorded_epochs = epochs;
  Signal s;
  s.samples_per_epoch = k;
  for (std::size_t i = 0; i < epochs * k; ++i) s.values.push_back(1.0f + static_cast<float>(i));
  r.signals[SignalKind::ABD] = s;
  r.labels.assign(epochs, SleepStage::Light);
  return r;
}

RawRecording random_raw(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> stage(0, 4);
  std::normal_distribution<float> normal(0.0f, 3.0f);
  RawRecording r;
  r.id = "rec-" + std::to_string(rng() % 1000);
  const std::size_t epochs = 1 + rng() % 5;
  for (std::size_t e = 0; e < epochs; ++e) r.labels.push_back(aasm_from_code(stage(rng)));
  for (auto kind : kAllKinds) {
    if (rng() % 3 == 0) continue;
    Channel c;
    c.rate_hz = is_cardiac(kind) ? 12.5 : 2.0;
    c.samples.resize(static_cast<std::size_t>(c.rate_hz * 30 * epochs));
    for (auto& v : c.samples) v = normal(rng);
    r.channels[kind] = c;
  }
  r.metadata["age_band"] = "40-65";
  return r;
}

// Linear solve of pi (P - I) = 0 with sum(pi) = 1, then dwell weighting.
StageArray occupancy_oracle(const SynthConfig& c) {
  constexpr std::size_t n = kAasmStageCount;
  double a[n][n + 1] = {};
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) a[i][j] = c.transitions[j][i] - (i == j ? 1.0 : 0.0);
  }
  for (std::size_t j = 0; j < n; ++j) a[n - 1][j] = 1.0;
  a[n - 1][n] = 1.0;
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t piv = col;
    for (std::size_t r = col; r < n; ++r)
      if (std::abs(a[r][col]) > std::abs(a[piv][col])) piv = r;
    for (std::size_t k = 0; k <= n; ++k) std::swap(a[col][k], a[piv][k]);
    for (std::size_t r = 0; r < n; ++r) {
      if (r == col) continue;
      const double f = a[r][col] / a[col][col];
      for (std::size_t k = 0; k <= n; ++k) a[r][k] -= f * a[col][k];
    }
  }
  StageArray pi;
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    pi[i] = a[i][n] / a[i][i] * c.mean_dwell_epochs[i];
    total += pi[i];
  }
  for (double& v : pi) v /= total;
  return pi;
}

// Breath durations from upward crossings with hysteresis, per stage.
std::vector<double> breath_intervals(const RawRecording& r, AasmStage stage) {
  const auto& c = r.channels.at(SignalKind::ABD);
  std::vector<double> out;
  bool armed = false;
  double last = -1.0;
  for (std::size_t n = 0; n < c.samples.size(); ++n) {
    const double t = n / c.rate_hz;
    if (c.samples[n] < -0.4) armed = true;
    if (armed && c.samples[n] > 0.4) {
      armed = false;
      const std::size_t e = static_cast<std::size_t>(t / 30.0);
      const std::size_t e0 = static_cast<std::size_t>(last / 30.0);
      if (last >= 0 && e < r.labels.size() && e == e0 && r.labels[e] == stage) out.push_back(t - last);
      last = t;
    }
  }
  return out;
}

double stddev(const std::vector<double>& x) {
  double m = 0.0;
  for (double v : x) m += v;
  m /= x.size();
  double s = 0.0;
  for (double v : x) s += (v - m) * (v - m);
  return std::sqrt(s / x.size());
}

}  // namespace

TEST_CASE("resample examples") {
  const std::vector<float> two{0.0f, 2.0f};
  auto up = resample(two, 4);
  REQUIRE(up.size() == 4);
  CHECK(up[0] == 0.0f);
  CHECK(up[1] == doctest::Approx(2.0 / 3.0));
  CHECK(up[2] == doctest::Approx(4.0 / 3.0));
  CHECK(up[3] == 2.0f);

  std::vector<float> series(3 * 8);
  for (std::size_t i = 0; i < series.size(); ++i) series[i] = std::sin(0.7f * i);
  CHECK(resample(series, 8.0 / 30.0, 8, 3) == series);

  const std::vector<float> one{5.0f};
  CHECK_THROWS_AS(resample(one, 3), DataError);
  CHECK(resample(one, 1) == one);
  CHECK_THROWS_AS(resample(std::vector<float>{}, 3), DataError);
}

TEST_CASE("resample preserves monotonicity") {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<float> step(0.0f, 1.0f);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<float> x(2 + rng() % 40);
    float acc = 0.0f;
    for (auto& v : x) v = acc += step(rng);
    auto y = resample(x, 1 + rng() % 200);
    for (std::size_t i = 1; i < y.size(); ++i) CHECK(y[i] >= y[i - 1]);
  }
}

TEST_CASE("normalize examples") {
  CHECK(normalize(std::vector<float>{1.0f, 3.0f}) == std::vector<float>{-1.0f, 1.0f});
  for (float v : normalize(std::vector<float>(17, 4.2f))) CHECK(v == 0.0f);
  std::mt19937_64 rng(1);
  std::normal_distribution<float> normal(3.0f, 7.0f);
  std::vector<float> x(5000);
  for (auto& v : x) v = normal(rng);
  auto y = normalize(x);
  auto z = normalize(y);
  for (std::size_t i = 0; i < y.size(); ++i) CHECK(std::abs(z[i] - y[i]) < 1e-6);
  double mean = 0.0;
  for (float v : y) mean += v;
  CHECK(std::abs(mean / y.size()) < 1e-5);
}

TEST_CASE("pad_truncate rules") {
  auto longer = pad_truncate(ramp_recording(13, 4), 12);
  CHECK(longer.epochs == 12);
  CHECK(longer.signals.at(SignalKind::ABD).values.back() == 48.0f);

  auto shorter = pad_truncate(ramp_recording(10, 4), 12);
  CHECK(shorter.recorded_epochs == 10);
  for (std::size_t e = 10; e < 12; ++e) {
    CHECK(shorter.labels[e] == SleepStage::Ignore);
    for (std::size_t i = 0; i < 4; ++i) CHECK(shorter.signals.at(SignalKind::ABD).values[e * 4 + i] == 0.0f);
  }
  CHECK(shorter.labels[9] == SleepStage::Light);

  auto exact = ramp_recording(12, 4);
  CHECK(pad_truncate(exact, 12) == exact);

  CHECK_THROWS_AS(pad_truncate(ramp_recording(0, 4), 12), DataError);
}

TEST_CASE("merge_stages is total and onto the four classes") {
  CHECK(merge_stages(AasmStage::N1) == SleepStage::Light);
  CHECK(merge_stages(AasmStage::N2) == SleepStage::Light);
  CHECK(merge_stages(AasmStage::REM) == SleepStage::REM);
  CHECK(merge_stages(AasmStage::Wake) == SleepStage::Wake);
  CHECK(merge_stages(AasmStage::N3) == SleepStage::Deep);
  std::set<SleepStage> image;
  for (int c = 0; c < 5; ++c) image.insert(merge_stages(aasm_from_code(c)));
  CHECK(image.size() == 4);
  CHECK_THROWS(aasm_from_code(5));
  CHECK_THROWS(aasm_from_code(-1));
}

TEST_CASE("preprocess output lengths match the model grid") {
  SynthConfig sc;
  sc.duration_epochs = 30;
  sc.seed = 4;
  auto raw = synth_generate(sc);
  auto config = ModelConfig::tiny();
  config.epochs = 24;
  auto pre = preprocess(raw, PreprocessOptions::from(config));
  CHECK(pre.epochs == 24);
  CHECK(pre.recorded_epochs == 24);
  for (auto kind : kAllKinds) {
    CHECK(pre.signals.at(kind).values.size() == config.samples_per_epoch(kind) * 24);
  }
  PreprocessOptions full;
  auto big = preprocess(raw, full);
  CHECK(big.signals.at(SignalKind::ECG).values.size() == 1024u * 1200);
  CHECK(big.signals.at(SignalKind::THX).values.size() == 256u * 1200);
  CHECK(big.recorded_epochs == 30);
  // z-score over the recorded span
  const auto& ecg = big.signals.at(SignalKind::ECG).values;
  double mean = 0.0;
  for (std::size_t i = 0; i < 1024u * 30; ++i) mean += ecg[i];
  CHECK(std::abs(mean / (1024.0 * 30)) < 1e-5);
}

TEST_CASE("raw recordings must cover their labels") {
  RawRecording r;
  r.id = "short";
  r.labels.assign(4, AasmStage::N2);
  r.channels[SignalKind::ABD] = {2.0, std::vector<float>(60, 0.0f)};
  CHECK_THROWS_AS(r.validate(), DataError);
  r.channels[SignalKind::ABD].samples.resize(200);
  CHECK_NOTHROW(r.validate());
}

TEST_CASE("container round-trip is bit exact") {
  std::mt19937_64 rng(99);
  for (int trial = 0; trial < 20; ++trial) {
    auto raw = random_raw(rng);
    auto bytes = encode_container(raw);
    auto back = std::get<RawRecording>(decode_container(bytes));
    CHECK(back == raw);
    CHECK(encode_container(back) == bytes);

    PreprocessOptions opts;
    opts.epochs = 6;
    opts.samples_per_epoch = {16, 16, 8, 8};
    if (raw.channels.empty()) continue;
    auto pre = preprocess(raw, opts);
    auto pre_back = std::get<PreprocessedRecording>(decode_container(encode_container(pre)));
    CHECK(pre_back == pre);
  }
  auto raw = random_raw(rng);
  const auto path = temp_path("roundtrip.w2s");
  write_container(path, raw);
  CHECK(read_raw(path) == raw);
  CHECK_FALSE(is_preprocessed_container(path));
  CHECK_THROWS_AS(read_preprocessed(path), DataError);
}

TEST_CASE("container corruption maps to distinct errors") {
  std::mt19937_64 rng(5);
  RawRecording raw;
  raw.id = "x";
  raw.labels = {AasmStage::N1, AasmStage::REM};
  raw.channels[SignalKind::ECG] = {1.0, std::vector<float>(60, 0.5f)};
  const auto bytes = encode_container(raw);
  auto kind_of = [](const std::string& b) {
    try {
      decode_container(b);
    } catch (const ContainerError& e) {
      return e.kind();
    }
    return ContainerErrorKind::Io;
  };
  auto header_end = bytes.find("}", bytes.rfind("\"version\""));
  REQUIRE(header_end != std::string::npos);

  CHECK(kind_of(bytes.substr(0, bytes.size() - 8)) == ContainerErrorKind::TruncatedPayload);

  auto tampered = bytes;
  tampered.back() ^= 0x10;
  CHECK(kind_of(tampered) == ContainerErrorKind::ChecksumMismatch);

  auto renamed = bytes;
  renamed.replace(renamed.find("\"ECG\""), 5, "\"EEG\"");
  CHECK(kind_of(renamed) == ContainerErrorKind::UnknownKind);

  auto version = bytes;
  version.replace(version.find("\"version\":1"), 11, "\"version\":7");
  CHECK(kind_of(version) == ContainerErrorKind::VersionMismatch);

  auto garbled = bytes;
  garbled[17] = '#';
  CHECK(kind_of(garbled) == ContainerErrorKind::CorruptHeader);
  CHECK(kind_of("not a container at all") == ContainerErrorKind::CorruptHeader);

  auto longer = bytes;
  longer.replace(longer.find("\"length\":60"), 11, "\"length\":90");
  CHECK(kind_of(longer) == ContainerErrorKind::TruncatedPayload);

  try {
    read_container(temp_path("missing.w2s"));
    FAIL("expected an error");
  } catch (const ContainerError& e) {
    CHECK(e.kind() == ContainerErrorKind::Io);
  }
}

TEST_CASE("synthetic generator is deterministic and validated") {
  SynthConfig c;
  c.duration_epochs = 20;
  c.seed = 17;
  auto a = synth_generate(c);
  auto b = synth_generate(c);
  CHECK(a == b);
  CHECK(encode_container(a) == encode_container(b));
  c.seed = 18;
  CHECK_FALSE(synth_generate(c) == a);
  CHECK_NOTHROW(a.validate());
  CHECK(a.channels.size() == 4);

  auto bad = c;
  bad.transitions[2][0] += 0.2;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  CHECK_THROWS_AS(synth_generate(bad), ConfigError);

  auto j = c.to_json();
  CHECK(SynthConfig::from_json(j).to_json() == j);
  j["heart_rate"] = 3;
  CHECK_THROWS_AS(SynthConfig::from_json(j), ConfigError);
}

TEST_CASE("stage marginals match the stationary occupancy") {
  SynthConfig c;
  const auto expected = stationary_occupancy(c);
  const auto oracle = occupancy_oracle(c);
  for (std::size_t s = 0; s < kAasmStageCount; ++s) CHECK(expected[s] == doctest::Approx(oracle[s]).epsilon(1e-9));

  // Batch means give a standard error that accounts for dwell correlation.
  const std::size_t batches = 50, per_batch = 4000;
  auto labels = synth_hypnogram(c, batches * per_batch, 3);
  for (std::size_t s = 0; s < kAasmStageCount; ++s) {
    std::vector<double> means(batches, 0.0);
    for (std::size_t b = 0; b < batches; ++b) {
      for (std::size_t i = 0; i < per_batch; ++i) {
        if (static_cast<std::size_t>(labels[b * per_batch + i]) == s) means[b] += 1.0 / per_batch;
      }
    }
    double overall = 0.0;
    for (double m : means) overall += m / batches;
    const double se = stddev(means) / std::sqrt(static_cast<double>(batches - 1));
    INFO("stage " << s << " observed " << overall << " expected " << expected[s] << " se " << se);
    CHECK(std::abs(overall - expected[s]) < 3.0 * se + 1e-3);
  }
}

TEST_CASE("REM breathing is more variable than deep-sleep breathing") {
  SynthConfig c;
  c.duration_epochs = 1200;
  c.seed = 8;
  auto r = synth_generate(c);
  auto rem = breath_intervals(r, AasmStage::REM);
  auto deep = breath_intervals(r, AasmStage::N3);
  REQUIRE(rem.size() > 50);
  REQUIRE(deep.size() > 50);
  CHECK(stddev(rem) > 2.0 * stddev(deep));
}
