#include "wav2sleep/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "json_util.hpp"

namespace wav2sleep {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

void require(bool ok, const std::string& message) {
  if (!ok) throw ConfigError("synth config: " + message);
}

void require_stage_array(const StageArray& a, const char* name, double lo, double hi) {
  for (double v : a) {
    require(std::isfinite(v) && v >= lo && v <= hi,
            std::string(name) + " entries must lie in [" + std::to_string(lo) + ", " +
                std::to_string(hi) + "]");
  }
}

// Rescales to unit standard deviation around zero mean.
void standardize(std::vector<double>& x) {
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(x.size());
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / static_cast<double>(x.size()));
  for (double& v : x) v = sd > 0.0 ? (v - mean) / sd : 0.0;
}

std::vector<float> to_float(const std::vector<double>& x) {
  return std::vector<float>(x.begin(), x.end());
}

struct Breath {
  double start;
  double period;
  double amplitude;
};

// Piecewise sinusoid: each breath is one full cycle with its own period and depth.
class Respiration {
 public:
  explicit Respiration(std::vector<Breath> breaths) : breaths_(std::move(breaths)) {}

  double phase(double t) const {
    const auto& b = find(t);
    return kTwoPi * (t - b.start) / b.period;
  }
  double value(double t) const {
    const auto& b = find(t);
    return b.amplitude * std::sin(kTwoPi * (t - b.start) / b.period);
  }

 private:
  const Breath& find(double t) const {
    auto it = std::upper_bound(breaths_.begin(), breaths_.end(), t,
                               [](double x, const Breath& b) { return x < b.start; });
    return it == breaths_.begin() ? breaths_.front() : *(it - 1);
  }
  std::vector<Breath> breaths_;
};

// Band-limited movement noise added to every channel during artifact bursts.
void add_artifacts(std::vector<double>& x, double rate_hz,
                   const std::vector<std::pair<double, double>>& bursts, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  const double alpha = 1.0 - std::exp(-1.0 / (0.3 * rate_hz));
  for (const auto& [start, length] : bursts) {
    const auto first = static_cast<std::size_t>(start * rate_hz);
    const auto last = std::min(x.size(), static_cast<std::size_t>((start + length) * rate_hz));
    const double gain = 2.0 + 2.0 * std::abs(normal(rng));
    double state = 0.0;
    for (std::size_t n = first; n < last; ++n) {
      state += alpha * (normal(rng) * 6.0 - state);
      x[n] += gain * state;
    }
  }
}

}  // namespace

void SynthConfig::validate() const {
  for (std::size_t s = 0; s < kAasmStageCount; ++s) {
    double total = 0.0;
    for (double p : transitions[s]) {
      require(std::isfinite(p) && p >= 0.0 && p <= 1.0,
              "transition probabilities must lie in [0, 1]");
      total += p;
    }
    require(std::abs(total - 1.0) < 1e-6,
            "transition row " + std::string(name_of(static_cast<AasmStage>(s))) +
                " sums to " + std::to_string(total) + ", expected 1");
  }
  require_stage_array(mean_dwell_epochs, "mean_dwell_epochs", 1.0, 1e9);
  require_stage_array(heart_rate_bpm, "heart_rate_bpm", 20.0, 240.0);
  require_stage_array(heart_rate_variability, "heart_rate_variability", 0.0, 0.5);
  require_stage_array(respiratory_rate_bpm, "respiratory_rate_bpm", 4.0, 40.0);
  require_stage_array(respiratory_rate_variability, "respiratory_rate_variability", 0.0, 0.5);
  require_stage_array(artifact_probability, "artifact_probability", 0.0, 1.0);
  for (double v : {ecg_noise, ppg_noise, respiratory_noise, subject_rate_spread}) {
    require(std::isfinite(v) && v >= 0.0, "noise levels and spreads must be non-negative");
  }
  require(ecg_pulse_width_s > 0.0 && ppg_smoothing_s > 0.0, "pulse shape constants must be positive");
  require(duration_epochs > 0, "duration_epochs must be positive");
  require(cardiac_rate_hz > 0.0 && respiratory_rate_hz > 0.0, "sampling rates must be positive");
}

nlohmann::json SynthConfig::to_json() const {
  return {{"transitions", transitions},
          {"mean_dwell_epochs", mean_dwell_epochs},
          {"initial_stage", name_of(initial_stage)},
          {"heart_rate_bpm", heart_rate_bpm},
          {"heart_rate_variability", heart_rate_variability},
          {"respiratory_rate_bpm", respiratory_rate_bpm},
          {"respiratory_rate_variability", respiratory_rate_variability},
          {"artifact_probability", artifact_probability},
          {"ecg_noise", ecg_noise},
          {"ppg_noise", ppg_noise},
          {"respiratory_noise", respiratory_noise},
          {"ecg_pulse_width_s", ecg_pulse_width_s},
          {"ppg_smoothing_s", ppg_smoothing_s},
          {"subject_rate_spread", subject_rate_spread},
          {"duration_epochs", duration_epochs},
          {"cardiac_rate_hz", cardiac_rate_hz},
          {"respiratory_rate_hz", respiratory_rate_hz},
          {"seed", seed}};
}

SynthConfig SynthConfig::from_json(const nlohmann::json& j) {
  constexpr std::string_view section = "synth";
  detail::reject_unknown_keys(
      j, section,
      {"transitions", "mean_dwell_epochs", "initial_stage", "heart_rate_bpm",
       "heart_rate_variability", "respiratory_rate_bpm", "respiratory_rate_variability",
       "artifact_probability", "ecg_noise", "ppg_noise", "respiratory_noise", "ecg_pulse_width_s",
       "ppg_smoothing_s", "subject_rate_spread", "duration_epochs", "cardiac_rate_hz",
       "respiratory_rate_hz", "seed"});
  SynthConfig c;
  detail::read_if_present(j, "transitions", c.transitions, section);
  detail::read_if_present(j, "mean_dwell_epochs", c.mean_dwell_epochs, section);
  if (j.contains("initial_stage")) {
    std::string name;
    detail::read_if_present(j, "initial_stage", name, section);
    bool found = false;
    for (std::size_t s = 0; s < kAasmStageCount; ++s) {
      if (name_of(static_cast<AasmStage>(s)) == name) {
        c.initial_stage = static_cast<AasmStage>(s);
        found = true;
      }
    }
    if (!found) throw ConfigError("synth.initial_stage: unknown stage '" + name + "'");
  }
  detail::read_if_present(j, "heart_rate_bpm", c.heart_rate_bpm, section);
  detail::read_if_present(j, "heart_rate_variability", c.heart_rate_variability, section);
  detail::read_if_present(j, "respiratory_rate_bpm", c.respiratory_rate_bpm, section);
  detail::read_if_present(j, "respiratory_rate_variability", c.respiratory_rate_variability, section);
  detail::read_if_present(j, "artifact_probability", c.artifact_probability, section);
  detail::read_if_present(j, "ecg_noise", c.ecg_noise, section);
  detail::read_if_present(j, "ppg_noise", c.ppg_noise, section);
  detail::read_if_present(j, "respiratory_noise", c.respiratory_noise, section);
  detail::read_if_present(j, "ecg_pulse_width_s", c.ecg_pulse_width_s, section);
  detail::read_if_present(j, "ppg_smoothing_s", c.ppg_smoothing_s, section);
  detail::read_if_present(j, "subject_rate_spread", c.subject_rate_spread, section);
  detail::read_if_present(j, "duration_epochs", c.duration_epochs, section);
  detail::read_if_present(j, "cardiac_rate_hz", c.cardiac_rate_hz, section);
  detail::read_if_present(j, "respiratory_rate_hz", c.respiratory_rate_hz, section);
  detail::read_if_present(j, "seed", c.seed, section);
  c.validate();
  return c;
}

StageArray stationary_occupancy(const SynthConfig& config) {
  config.validate();
  // Power iteration on the lazy chain (P + I) / 2, which shares P's stationary
  // distribution and cannot be periodic.
  StageArray pi;
  pi.fill(1.0 / kAasmStageCount);
  for (int iter = 0; iter < 20000; ++iter) {
    StageArray next{};
    for (std::size_t i = 0; i < kAasmStageCount; ++i) {
      next[i] += 0.5 * pi[i];
      for (std::size_t j = 0; j < kAasmStageCount; ++j) next[j] += 0.5 * pi[i] * config.transitions[i][j];
    }
    pi = next;
  }
  double total = 0.0;
  for (std::size_t s = 0; s < kAasmStageCount; ++s) {
    pi[s] *= config.mean_dwell_epochs[s];
    total += pi[s];
  }
  for (double& v : pi) v /= total;
  return pi;
}

std::vector<AasmStage> synth_hypnogram(const SynthConfig& config, std::size_t epochs,
                                       std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  std::vector<AasmStage> out;
  out.reserve(epochs);
  auto stage = static_cast<std::size_t>(config.initial_stage);
  while (out.size() < epochs) {
    std::geometric_distribution<std::size_t> extra(1.0 / config.mean_dwell_epochs[stage]);
    const std::size_t dwell = 1 + extra(rng);
    for (std::size_t i = 0; i < dwell && out.size() < epochs; ++i) {
      out.push_back(static_cast<AasmStage>(stage));
    }
    const auto& row = config.transitions[stage];
    std::discrete_distribution<std::size_t> next(row.begin(), row.end());
    stage = next(rng);
  }
  return out;
}

RawRecording synth_generate(const SynthConfig& config, const std::string& id) {
  config.validate();
  std::mt19937_64 rng(config.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);

  RawRecording rec;
  rec.id = id;
  rec.labels = synth_hypnogram(config, config.duration_epochs, rng());
  const std::size_t epochs = rec.labels.size();
  const double duration = kEpochSeconds * static_cast<double>(epochs);
  auto stage_at = [&](double t) {
    auto e = static_cast<std::size_t>(t / kEpochSeconds);
    return static_cast<std::size_t>(rec.labels[std::min(e, epochs - 1)]);
  };

  const double hr_scale = std::exp(config.subject_rate_spread * normal(rng));
  const double rr_scale = std::exp(config.subject_rate_spread * normal(rng));

  // Breaths first: heart rhythm is modulated by the breathing phase.
  std::vector<Breath> breaths;
  for (double t = -uniform(rng) * 4.0; t < duration + 1.0;) {
    const std::size_t s = stage_at(std::max(t, 0.0));
    const double rrv = config.respiratory_rate_variability[s];
    double period = 60.0 / (config.respiratory_rate_bpm[s] * rr_scale) * (1.0 + rrv * normal(rng));
    period = std::clamp(period, 1.5, 12.0);
    const double amplitude = std::max(0.2, 1.0 + rrv * normal(rng));
    breaths.push_back({t, period, amplitude});
    t += period;
  }
  const Respiration resp(std::move(breaths));

  std::vector<double> beats;
  for (double t = uniform(rng) * 0.8; t < duration + 1.0;) {
    beats.push_back(t);
    const std::size_t s = stage_at(t);
    double rr = 60.0 / (config.heart_rate_bpm[s] * hr_scale);
    rr *= 1.0 - 0.04 * std::sin(resp.phase(t)) + config.heart_rate_variability[s] * normal(rng);
    t += std::clamp(rr, 0.3, 2.0);
  }

  std::vector<std::pair<double, double>> bursts;
  for (std::size_t e = 0; e < epochs; ++e) {
    if (uniform(rng) < config.artifact_probability[static_cast<std::size_t>(rec.labels[e])]) {
      const double length = 2.0 + 8.0 * uniform(rng);
      bursts.emplace_back(kEpochSeconds * e + (kEpochSeconds - length) * uniform(rng), length);
    }
  }

  const double fc = config.cardiac_rate_hz;
  const auto n_cardiac = static_cast<std::size_t>(std::llround(duration * fc));

  // ECG: beat impulses smoothed into a QRS complex with a trailing T wave,
  // riding on respiratory baseline wander.
  std::vector<double> ecg(n_cardiac, 0.0);
  const double qrs = config.ecg_pulse_width_s;
  const double twave = 2.5 * qrs;
  for (double b : beats) {
    for (auto [center, width, height] : {std::tuple{b, qrs, 1.0}, std::tuple{b + 0.25, twave, 0.25}}) {
      const auto lo = static_cast<long long>(std::floor((center - 5.0 * width) * fc));
      const auto hi = static_cast<long long>(std::ceil((center + 5.0 * width) * fc));
      for (long long n = std::max(0LL, lo); n <= hi && n < static_cast<long long>(n_cardiac); ++n) {
        const double d = (static_cast<double>(n) / fc - center) / width;
        ecg[n] += height * std::exp(-0.5 * d * d);
      }
    }
  }
  for (std::size_t n = 0; n < n_cardiac; ++n) ecg[n] += 0.1 * resp.value(n / fc);

  // PPG: the same beats after a transit delay, through two one-pole low-pass stages.
  std::vector<double> ppg(n_cardiac, 0.0);
  for (double b : beats) {
    const auto n = static_cast<std::size_t>((b + 0.25) * fc);
    if (n < n_cardiac) ppg[n] += 1.0 + 0.1 * resp.value(b);
  }
  const double alpha = 1.0 - std::exp(-1.0 / (config.ppg_smoothing_s * fc));
  for (int stage = 0; stage < 2; ++stage) {
    double state = 0.0;
    for (double& v : ppg) {
      state += alpha * (v - state);
      v = state;
    }
  }

  const double fr = config.respiratory_rate_hz;
  const auto n_resp = static_cast<std::size_t>(std::llround(duration * fr));
  std::vector<double> abd(n_resp), thx(n_resp);
  for (std::size_t n = 0; n < n_resp; ++n) {
    const double t = n / fr;
    abd[n] = resp.value(t);
    thx[n] = 0.8 * resp.value(t - 0.2);
  }

  auto finish = [&](std::vector<double>& x, double rate, double noise) {
    standardize(x);
    for (double& v : x) v += noise * normal(rng);
    add_artifacts(x, rate, bursts, rng);
    return to_float(x);
  };
  rec.channels[SignalKind::ECG] = {fc, finish(ecg, fc, config.ecg_noise)};
  rec.channels[SignalKind::PPG] = {fc, finish(ppg, fc, config.ppg_noise)};
  rec.channels[SignalKind::ABD] = {fr, finish(abd, fr, config.respiratory_noise)};
  rec.channels[SignalKind::THX] = {fr, finish(thx, fr, config.respiratory_noise)};
  rec.metadata["source"] = "synthetic";
  rec.metadata["seed"] = std::to_string(config.seed);
  constexpr const char* kAgeBands[] = {"18-40", "40-65", "65+"};
  rec.metadata["age_band"] = kAgeBands[static_cast<std::size_t>(uniform(rng) * 3.0) % 3];
  return rec;
}

}  // namespace wav2sleep
