// Acceptance checks. `acceptance N` runs criterion N and prints one PASS/FAIL
// line; the exit status is non-zero on failure. With no argument all run.

#include <algorithm>
#include <cstring>
#include <chrono>
#include <cmath>
#include <functional>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <random>
#include <sstream>
#include <string>

#include "wav2sleep/eval.hpp"
#include "wav2sleep/gradcheck.hpp"
#include "wav2sleep/masking.hpp"
#include "wav2sleep/model.hpp"
#include "wav2sleep/ops.hpp"
#include "wav2sleep/run.hpp"
#include "wav2sleep/train.hpp"

using namespace wav2sleep;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool passed = true;
  std::ostringstream detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      passed = false;
      detail << " [failed: " << what << "]";
    }
  }
};

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

template <typename T>
double max_rel_diff(std::span<const T> a, std::span<const T> b) {
  if (a.size() != b.size()) return INFINITY;
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double x = a[i], y = b[i];
    worst = std::max(worst, std::abs(x - y) / std::max({std::abs(x), std::abs(y), 1e-12}));
  }
  return worst;
}

Tensor<double> random_tensor(Shape shape, std::mt19937_64& rng, bool requires_grad = false) {
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor<double>::from(std::move(shape), std::move(v), requires_grad);
}

std::vector<const PreprocessedRecording*> pointers(const std::vector<PreprocessedRecording>& recs) {
  std::vector<const PreprocessedRecording*> out;
  for (const auto& r : recs) out.push_back(&r);
  return out;
}

// ---------------------------------------------------------------------------

void gradient_suite(Outcome& o) {
  const auto start = Clock::now();
  auto results = check_primitives(5, 2024);
  results.push_back(check_tiny_model(0));
  double worst = 0.0;
  std::size_t coords = 0;
  for (const auto& r : results) {
    o.require(r.passed(), r.name);
    worst = std::max(worst, r.max_relative_error);
    coords += r.coordinates;
  }
  const double secs = seconds_since(start);
  o.require(secs < 120.0, "runtime under 2 minutes");
  const auto tiny = ModelConfig::tiny();
  o.require(tiny.epochs == 8 && tiny.cardiac_samples_per_epoch == 16 && tiny.respiratory_samples_per_epoch == 16 &&
                tiny.feature_dim == 8,
            "tiny model is T=8, k=16, feature_dim=8");
  o.detail << results.size() << " checks, " << coords << " coordinates, max rel err " << std::scientific
           << std::setprecision(2) << worst << std::defaultfloat << " < 1e-4, " << std::fixed << std::setprecision(1)
           << secs << " s";
}

// A random small architecture; every field that shapes the graph varies.
ModelConfig random_small_config(std::mt19937_64& rng) {
  auto pick = [&](std::initializer_list<std::size_t> xs) {
    std::vector<std::size_t> v(xs);
    return v[std::uniform_int_distribution<std::size_t>(0, v.size() - 1)(rng)];
  };
  auto channels = [&](std::size_t k) {
    std::vector<std::size_t> c;
    for (std::size_t n = k; n > 4; n /= 2) c.push_back(pick({2, 3, 4, 6}));
    return c;
  };
  ModelConfig c = ModelConfig::tiny();
  c.dropout = 0.0;
  c.mixer_heads = pick({1, 2, 4});
  c.feature_dim = c.mixer_heads * pick({2, 3, 4});
  c.mixer_layers = pick({1, 2});
  c.mixer_hidden = pick({8, 16});
  c.cardiac_samples_per_epoch = pick({16, 32});
  c.respiratory_samples_per_epoch = pick({8, 16});
  c.cardiac_channels = channels(c.cardiac_samples_per_epoch);
  c.respiratory_channels = channels(c.respiratory_samples_per_epoch);
  c.seq_kernel = pick({3, 5});
  c.seq_dilations = pick({0, 1}) ? std::vector<std::size_t>{1, 2} : std::vector<std::size_t>{1, 2, 4};
  c.seq_blocks = pick({1, 2});
  c.epochs = pick({20, 24, 30});
  c.modality_embeddings = pick({0, 1}) == 1;
  c.encoder_instance_norm = pick({0, 1}) == 1;
  c.validate();
  return c;
}

// Logits for one recording built from its kept kinds only: encode each kept
// signal, fuse the kept tokens without any attention mask, mix the sequence.
Tensor<double> forward_deleted(const ModelInput<double>& in, std::size_t row, const Params<double>& params,
                               const ModelConfig& c) {
  ForwardContext ctx;
  std::vector<SignalKind> kinds;
  std::vector<Tensor<double>> tokens;
  for (auto kind : kAllKinds) {
    if (!in.kept[index_of(kind)][row]) continue;
    const std::size_t w = c.samples_per_epoch(kind) * c.epochs;
    auto v = in.signals[index_of(kind)].values();
    auto x = Tensor<double>::from({1, w}, std::vector<double>(v.begin() + static_cast<std::ptrdiff_t>(row * w),
                                                              v.begin() + static_cast<std::ptrdiff_t>((row + 1) * w)));
    kinds.push_back(kind);
    tokens.push_back(reshape(encode_signal(x, kind, params, c, ctx), {c.epochs, c.feature_dim}));
  }
  auto z = mix_tokens(kinds, tokens, nullptr, params, c, ctx);
  return mix_sequence(reshape(z, {1, c.epochs, c.feature_dim}), params, c, ctx);
}

void masking_soundness(Outcome& o) {
  std::size_t bit_identical = 0;
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    std::mt19937_64 rng(seed);
    const auto c = random_small_config(rng);
    const auto params = init_params<double>(c, seed);
    const std::size_t B = std::uniform_int_distribution<std::size_t>(1, 3)(rng);
    ModelInput<double> in;
    in.batch = B;
    std::bernoulli_distribution keep(0.5);
    for (auto kind : kAllKinds) {
      in.signals[index_of(kind)] = random_tensor({B, c.samples_per_epoch(kind) * c.epochs}, rng);
      in.kept[index_of(kind)].assign(B, false);
    }
    for (std::size_t b = 0; b < B; ++b) {
      // A random non-empty, non-full subset per row.
      std::size_t count = 0;
      do {
        count = 0;
        for (auto kind : kAllKinds) {
          const bool k = keep(rng);
          in.kept[index_of(kind)][b] = k;
          count += k;
        }
      } while (count == 0 || count == kKindCount);
    }
    ForwardContext ctx;
    const auto ref = forward(in, params, c, ctx);

    // Overwrite every masked row with fresh noise, huge values and NaN.
    auto rewritten = in;
    for (auto kind : kAllKinds) {
      auto v = std::vector<double>(in.signals[index_of(kind)].values().begin(),
                                   in.signals[index_of(kind)].values().end());
      const std::size_t w = c.samples_per_epoch(kind) * c.epochs;
      std::normal_distribution<double> noise(0.0, 1e6);
      for (std::size_t b = 0; b < B; ++b) {
        if (in.kept[index_of(kind)][b]) continue;
        for (std::size_t i = 0; i < w; ++i) v[b * w + i] = (i % 7 == 3) ? std::nan("") : noise(rng);
      }
      rewritten.signals[index_of(kind)] = Tensor<double>::from(in.signals[index_of(kind)].shape(), std::move(v));
    }
    const auto again = forward(rewritten, params, c, ctx);
    const bool same = std::equal(ref.values().begin(), ref.values().end(), again.values().begin(),
                                 again.values().end(), [](double a, double b) {
                                   return std::memcmp(&a, &b, sizeof a) == 0;
                                 });
    bit_identical += same;

    const std::size_t row = c.epochs * c.classes;
    for (std::size_t b = 0; b < B; ++b) {
      const auto deleted = forward_deleted(in, b, params, c);
      worst = std::max(worst, max_rel_diff<double>(std::span(ref.values()).subspan(b * row, row), deleted.values()));
    }
  }
  o.require(bit_identical == 50, "logits bit-identical under masked rewrites");
  o.require(worst < 1e-5, "masked equals deleted within 1e-5");
  o.detail << bit_identical << "/50 configs bit-identical, masked-vs-deleted max rel diff " << std::scientific
           << std::setprecision(2) << worst;
}

void permutation_invariance(Outcome& o) {
  double worst = 0.0, worst_float = 0.0;
  ForwardContext ctx;
  for (std::uint64_t trial = 0; trial < 100; ++trial) {
    std::mt19937_64 rng(1000 + trial);
    const auto c = random_small_config(rng);
    const auto params = init_params<double>(c, trial);
    std::vector<std::pair<SignalKind, Tensor<double>>> set;
    for (auto kind : kAllKinds) {
      if (set.empty() || std::bernoulli_distribution(0.7)(rng)) set.emplace_back(kind, random_tensor({c.feature_dim}, rng));
    }
    const auto ref = mix_epoch(set, params, c, ctx);
    auto shuffled = set;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    worst = std::max(worst, max_rel_diff<double>(ref.values(), mix_epoch(shuffled, params, c, ctx).values()));

    // Float path as used in training.
    const auto pf = params.cast<float>();
    std::vector<std::pair<SignalKind, Tensor<float>>> fset, fshuf;
    auto to_float = [](const Tensor<double>& t) {
      return Tensor<float>::from(t.shape(), std::vector<float>(t.values().begin(), t.values().end()));
    };
    for (const auto& [k, t] : set) fset.emplace_back(k, to_float(t));
    for (const auto& [k, t] : shuffled) fshuf.emplace_back(k, to_float(t));
    // Single precision is compared against the output's scale: elementwise
    // ratios on near-zero entries only measure float rounding.
    const auto a = mix_epoch(fset, pf, c, ctx), b = mix_epoch(fshuf, pf, c, ctx);
    double diff = 0.0, scale = 1e-30;
    for (std::size_t i = 0; i < a.numel(); ++i) {
      diff = std::max(diff, std::abs(double(a.values()[i]) - double(b.values()[i])));
      scale = std::max(scale, std::abs(double(a.values()[i])));
    }
    worst_float = std::max(worst_float, diff / scale);
  }
  o.require(worst < 1e-5, "CLS output invariant within 1e-5 (double, elementwise)");
  o.require(worst_float < 1e-5, "CLS output invariant within 1e-5 (float, relative to max entry)");
  o.detail << "100 trials, max rel diff " << std::scientific << std::setprecision(2) << worst
           << " elementwise in double, " << worst_float << " in float";
}

void architecture_arithmetic(Outcome& o) {
  const ModelConfig c;
  ForwardContext ctx;
  auto params = init_params<float>(c, 0);
  std::mt19937_64 rng(4);
  std::normal_distribution<float> dist(0.0f, 1.0f);
  for (auto kind : {SignalKind::ECG, SignalKind::ABD}) {
    const std::size_t k = c.samples_per_epoch(kind);
    std::vector<float> v(k * c.epochs);
    for (auto& x : v) x = dist(rng);
    auto x = Tensor<float>::from({1, k * c.epochs}, std::move(v));
    NoGradGuard no_grad;
    const auto flat = encode_signal_flat(x, kind, params, c, ctx);
    const auto out = encode_signal(x, kind, params, c, ctx);
    o.require(flat.shape() == Shape{1, 1200, 512}, "pre-dense width 512 for k=" + std::to_string(k));
    o.require(out.shape() == Shape{1, 1200, 128}, "encoder output [1200, 128] for k=" + std::to_string(k));
    o.detail << "k=" << k << ": pre-dense " << flat.shape()[2] << ", out [" << out.shape()[1] << ", "
             << out.shape()[2] << "]; ";
  }
  o.require(c.sequence_receptive_radius() == 378, "configured radius is 378");

  // Gradient of the logits at epoch t with respect to z, full-size sequence mixer.
  auto p64 = init_params<double>(c, 1);
  auto z = random_tensor({1, c.epochs, c.feature_dim}, rng, true);
  auto logits = mix_sequence(z, p64, c, ctx);
  const std::size_t t = 600;
  std::vector<double> pick(logits.numel(), 0.0);
  for (std::size_t j = 0; j < c.classes; ++j) pick[t * c.classes + j] = 1.0;
  sum(mul(logits, Tensor<double>::from(logits.shape(), pick))).backward();
  const auto g = z.grad();
  std::size_t lo = c.epochs, hi = 0;
  for (std::size_t e = 0; e < c.epochs; ++e) {
    double s = 0.0;
    for (std::size_t f = 0; f < c.feature_dim; ++f) s += std::abs(g[e * c.feature_dim + f]);
    if (s != 0.0) {
      lo = std::min(lo, e);
      hi = std::max(hi, e);
    }
  }
  o.require(t - lo == 378 && hi - t == 378, "nonzero gradient exactly within +-378 epochs");
  o.detail << "gradient support [t-" << t - lo << ", t+" << hi - t << "]";
}

void schedule_and_optimizer(Outcome& o) {
  const TrainConfig c;
  o.require(lr_at(1000, c) == 5e-4, "lr_at(1000) == 5e-4");
  o.require(lr_at(2000, c) == 1e-3, "lr_at(2000) == 1e-3");

  Params<double> p;
  p.add("w", Tensor<double>::from({3}, {1.0, -2.0, 0.5}, true));
  const std::vector<double> grad{0.3, -4.0, 1e-3};
  for (std::size_t i = 0; i < 3; ++i) p.at("w").mutable_grad()[i] = grad[i];
  auto state = AdamState<double>::zeros_like(p);
  TrainConfig tc;
  tc.weight_decay = 0.01;
  adamw_step(p, state, 1e-3, tc);
  // Step 1 by hand: m = (1-b1) g, v = (1-b2) g^2, both bias-corrected back to g and g^2.
  double worst = 0.0;
  const std::vector<double> w0{1.0, -2.0, 0.5};
  for (std::size_t i = 0; i < 3; ++i) {
    const double m = (1 - tc.beta1) * grad[i] / (1 - tc.beta1);
    const double v = (1 - tc.beta2) * grad[i] * grad[i] / (1 - tc.beta2);
    const double expected = w0[i] - 1e-3 * tc.weight_decay * w0[i] - 1e-3 * m / (std::sqrt(v) + tc.adam_epsilon);
    worst = std::max(worst, std::abs(p.at("w").values()[i] - expected));
  }
  o.require(worst < 1e-9, "AdamW step within 1e-9");

  auto model = ModelConfig::tiny();
  model.dropout = 0.0;
  SynthConfig sc;
  sc.duration_epochs = model.epochs;
  std::vector<PreprocessedRecording> recs;
  for (std::uint64_t i = 0; i < 8; ++i) {
    sc.seed = 50 + i;
    recs.push_back(preprocess(synth_generate(sc, "acc" + std::to_string(i)), PreprocessOptions::from(model)));
  }
  auto ptrs = pointers(recs);
  std::vector<ModalityMask> masks;
  std::mt19937_64 rng(5);
  for (const auto* r : ptrs) masks.push_back(sample_mask(available_kinds(*r), MaskingConfig{}, rng));
  auto full = init_params<float>(model, 3);
  auto split = full.clone();
  full.set_requires_grad(true);
  split.set_requires_grad(true);
  batch_loss_and_grad(collate(ptrs, masks), full, model, 1.0 / 8);
  for (std::size_t start = 0; start < 8; start += 2) {
    std::vector<const PreprocessedRecording*> part(ptrs.begin() + start, ptrs.begin() + start + 2);
    std::vector<ModalityMask> pm(masks.begin() + start, masks.begin() + start + 2);
    batch_loss_and_grad(collate(part, pm), split, model, 1.0 / 8);
  }
  double acc_worst = 0.0;
  for (std::size_t i = 0; i < full.size(); ++i) {
    auto a = full.entries()[i].second.grad();
    auto b = split.entries()[i].second.grad();
    double scale = 1e-12, diff = 0.0;
    for (std::size_t j = 0; j < a.size(); ++j) {
      scale = std::max({scale, std::abs(double(a[j])), std::abs(double(b[j]))});
      diff = std::max(diff, std::abs(double(a[j]) - double(b[j])));
    }
    acc_worst = std::max(acc_worst, diff / scale);
  }
  o.require(acc_worst < 1e-6, "accumulated gradient within 1e-6");
  o.detail << "lr_at(1000)=" << lr_at(1000, c) << " lr_at(2000)=" << lr_at(2000, c) << ", AdamW err "
           << std::scientific << std::setprecision(2) << worst << ", 4x2 vs 1x8 gradient rel diff " << acc_worst
           << " (relative to each tensor's largest entry)";
}

void masking_statistics(Outcome& o) {
  const MaskingConfig config;
  const std::size_t draws = 10000;
  const double z99 = 2.5758293035489;
  const std::vector<std::vector<SignalKind>> sets{
      {SignalKind::ECG, SignalKind::PPG, SignalKind::ABD, SignalKind::THX},
      {SignalKind::ECG, SignalKind::ABD},
      {SignalKind::ABD, SignalKind::THX}};
  std::mt19937_64 rng(2024);
  double worst_z = 0.0;
  for (const auto& kinds : sets) {
    const auto avail = kind_set(kinds);
    // P(all dropped) for one attempt; the fallback keeps everything after max_retries empty redraws.
    double q = 1.0;
    for (auto k : kinds) q *= config.drop_probability[index_of(k)];
    const double q_all = std::pow(q, static_cast<double>(config.max_retries + 1));
    std::array<std::size_t, kKindCount> kept{};
    for (std::size_t i = 0; i < draws; ++i) {
      const auto m = sample_mask(avail, config, rng);
      for (auto k : kinds) kept[index_of(k)] += m.kept[index_of(k)];
    }
    for (auto k : kinds) {
      const double p = config.drop_probability[index_of(k)];
      const double expected = (1.0 - q_all) * (1.0 - p) / (1.0 - q) + q_all;
      const double observed = static_cast<double>(kept[index_of(k)]) / draws;
      const double sigma = std::sqrt(expected * (1.0 - expected) / draws);
      const double zscore = std::abs(observed - expected) / sigma;
      worst_z = std::max(worst_z, zscore);
      o.require(zscore <= z99, std::string(name_of(k)) + " keep rate within 99% CI");
    }
  }
  std::size_t flips = 0;
  const std::size_t invert_draws = 100000;
  std::vector<float> signal{1.0f};
  for (std::size_t i = 0; i < invert_draws; ++i) flips += augment_invert(signal, config.invert_probability, rng);
  const double rate = static_cast<double>(flips) / invert_draws;
  o.require(std::abs(rate - 0.5) <= 0.01, "inversion rate 0.50 +- 0.01");
  o.detail << "3 availability sets x 10000 draws, worst |z| " << std::fixed << std::setprecision(2) << worst_z
           << " <= 2.58; inversion rate " << std::setprecision(4) << rate;
}

void metric_oracles(Outcome& o) {
  ConfusionMatrix hand;
  hand.counts[0][0] = 2;
  hand.counts[0][1] = 1;
  hand.counts[1][0] = 1;
  hand.counts[1][1] = 2;
  o.require(kappa(hand) == 1.0 / 3.0, "[[2,1],[1,2]] gives kappa 1/3 exactly");

  std::mt19937_64 rng(77);
  std::uniform_int_distribution<std::uint64_t> count(0, 40);
  double worst = 0.0;
  std::size_t tested = 0;
  while (tested < 1000) {
    ConfusionMatrix cm;
    for (auto& row : cm.counts) {
      for (auto& c : row) c = count(rng);
    }
    if (cm.total() == 0) continue;
    // Oracle: expand into (truth, predicted) pairs and count agreement and marginals.
    std::vector<std::pair<int, int>> pairs;
    for (int t = 0; t < 4; ++t)
      for (int p = 0; p < 4; ++p)
        for (std::uint64_t n = 0; n < cm.counts[t][p]; ++n) pairs.emplace_back(t, p);
    const double n = static_cast<double>(pairs.size());
    double agree = 0.0, tf[4] = {}, pf[4] = {};
    for (auto [t, p] : pairs) {
      agree += t == p;
      tf[t] += 1.0;
      pf[p] += 1.0;
    }
    double pe = 0.0;
    for (int c = 0; c < 4; ++c) pe += (tf[c] / n) * (pf[c] / n);
    const double po = agree / n;
    worst = std::max({worst, std::abs(kappa(cm) - (po - pe) / (1.0 - pe)), std::abs(accuracy(cm) - po)});
    ++tested;
  }
  o.require(worst <= 1e-12, "kappa and accuracy within 1e-12 of the oracle");
  o.detail << "kappa([[2,1],[1,2]]) = " << std::setprecision(17) << kappa(hand) << "; 1000 matrices, max abs diff "
           << std::scientific << std::setprecision(2) << worst;
}

void loss_conformance(Outcome& o) {
  // Uniform logits: -log(1/4) per labelled row.
  auto uniform = Tensor<double>::from({3, 4}, std::vector<double>(12, 0.7));
  const std::vector<int> labels{0, 2, 3};
  const double u = softmax_cross_entropy(uniform, labels).item();
  o.require(std::abs(u - 3 * std::log(4.0)) < 1e-6 && std::abs(u / 3 - 1.38629436) < 1e-6, "uniform gives ln 4");

  // Hand example against -sum y * log p with p computed directly.
  const std::vector<double> lv{2.0, -1.0, 0.5, 0.0, -3.0, 1.0, 1.0, 4.0};
  auto logits = Tensor<double>::from({2, 4}, lv, true);
  const std::vector<int> hl{0, 3};
  double expected = 0.0;
  for (std::size_t r = 0; r < 2; ++r) {
    double z = 0.0;
    for (std::size_t c = 0; c < 4; ++c) z += std::exp(lv[r * 4 + c]);
    for (std::size_t c = 0; c < 4; ++c) {
      const double y = static_cast<int>(c) == hl[r] ? 1.0 : 0.0;
      expected -= y * std::log(std::exp(lv[r * 4 + c]) / z);
    }
  }
  const double got = softmax_cross_entropy(logits, hl).item();
  o.require(std::abs(got - expected) < 1e-6, "hand example matches -sum y log p");

  // Ignore rows: no loss and exactly zero gradient, whatever their logits.
  auto with_ignore = Tensor<double>::from({3, 4}, {2.0, -1.0, 0.5, 0.0, 50.0, -40.0, 3.0, 9.0, -3.0, 1.0, 1.0, 4.0}, true);
  const std::vector<int> il{0, -1, 3};
  auto loss = softmax_cross_entropy(with_ignore, il);
  loss.backward();
  const auto g = with_ignore.grad();
  const bool zero_grad = std::all_of(g.begin() + 4, g.begin() + 8, [](double x) { return x == 0.0; });
  o.require(loss.item() == got, "Ignore row adds exactly zero");
  o.require(zero_grad, "Ignore row gets exactly zero gradient");
  o.detail << "uniform " << std::setprecision(9) << u / 3 << " per epoch, hand |diff| " << std::scientific
           << std::setprecision(2) << std::abs(got - expected) << ", Ignore contribution "
           << loss.item() - got;
}

void learnability(Outcome& o) {
  const auto base = RunConfig::preset("desk");
  const std::vector<SignalKind> all(kAllKinds.begin(), kAllKinds.end());
  std::size_t reached = 0;
  bool ordering_ok = true;
  for (std::uint64_t seed : {1, 2, 3}) {
    const auto start = Clock::now();
    auto config = base;
    config.seed = seed;
    const auto counts = config.data.split_counts();
    std::vector<PreprocessedRecording> recs;
    for (std::size_t i = 0; i < config.data.recordings; ++i) {
      recs.push_back(preprocess(synth_recording(config.data, seed, i), PreprocessOptions::from(config.model)));
    }
    const auto ptrs = pointers(recs);
    std::vector<const PreprocessedRecording*> train(ptrs.begin(), ptrs.begin() + counts[0]);
    std::vector<const PreprocessedRecording*> val(ptrs.begin() + counts[0], ptrs.begin() + counts[0] + counts[1]);
    std::vector<const PreprocessedRecording*> test(ptrs.begin() + counts[0] + counts[1], ptrs.end());

    Trainer trainer(config.model, config.train, seed);
    trainer.set_data(train, val);
    trainer.fit();
    const double k_all = evaluate(test, all, trainer.params(), config.model).kappa_total;
    double worst_single = INFINITY;
    std::ostringstream singles;
    for (auto kind : kAllKinds) {
      const double k = evaluate(test, {kind}, trainer.params(), config.model).kappa_total;
      worst_single = std::min(worst_single, k);
      singles << " " << name_of(kind) << "=" << std::fixed << std::setprecision(3) << k;
    }
    const double secs = seconds_since(start);
    // Soft multi-modal check, reported only: adding THX to ECG should not cost
    // more than 0.05 kappa.
    const double k_ecg_thx =
        evaluate(test, {SignalKind::ECG, SignalKind::THX}, trainer.params(), config.model).kappa_total;
    const double k_ecg = evaluate(test, {SignalKind::ECG}, trainer.params(), config.model).kappa_total;
    singles << " ECG,THX=" << k_ecg_thx << (k_ecg_thx >= k_ecg - 0.05 ? " (>= ECG - 0.05)" : " (< ECG - 0.05)");
    const bool ok = k_all >= 0.6 && secs < 1800.0;
    reached += ok;
    ordering_ok = ordering_ok && k_all > worst_single;
    o.detail << "\n    seed " << seed << ": kappa_all " << std::fixed << std::setprecision(3) << k_all << singles.str()
             << ", " << trainer.state().epoch << " epochs, " << std::setprecision(0) << secs << " s";
  }
  o.require(reached >= 2, "kappa >= 0.6 within 30 minutes for at least 2 of 3 seeds");
  o.require(ordering_ok, "all-modality kappa above the worst single modality");
}

void reproducibility(Outcome& o) {
  auto config = RunConfig::preset("tiny");
  config.data.recordings = 12;
  config.data.split = {10, 2, 0};
  config.train.max_epochs = 3;
  std::vector<PreprocessedRecording> recs;
  for (std::size_t i = 0; i < config.data.recordings; ++i) {
    recs.push_back(preprocess(synth_recording(config.data, 7, i), PreprocessOptions::from(config.model)));
  }
  const auto ptrs = pointers(recs);
  std::vector<const PreprocessedRecording*> train(ptrs.begin(), ptrs.begin() + 10), val(ptrs.begin() + 10, ptrs.end());

  auto run = [&](std::size_t threads) {
    auto tc = config.train;
    tc.threads = threads;
    Trainer t(config.model, tc, 7);
    t.set_data(train, val);
    std::string log;
    t.on_log([&](const LogRecord& r) { log += r.to_json().dump() + "\n"; });
    t.fit();
    return std::pair{log, encode_checkpoint(t.snapshot())};
  };
  const auto [log1, ckpt1] = run(1);
  const auto [log2, ckpt2] = run(1);
  const auto [log3, ckpt3] = run(2);
  o.require(!log1.empty() && log1 == log2, "training logs byte-identical");
  o.require(ckpt1 == ckpt2, "checkpoints byte-identical");
  // The thread count is recorded in the checkpoint's train config; everything else must match.
  auto threaded = decode_checkpoint(ckpt3);
  threaded.train.threads = 1;
  o.require(log1 == log3 && encode_checkpoint(threaded) == ckpt1, "identical with two worker threads");

  const auto decoded = decode_checkpoint(ckpt1);
  o.require(encode_checkpoint(decoded) == ckpt1, "checkpoint round trip bit-exact");
  o.detail << log1.size() << " log bytes and " << ckpt1.size() << " checkpoint bytes identical across runs; "
           << "decode/encode round trip identical";
}

struct Criterion {
  const char* title;
  std::function<void(Outcome&)> run;
};

const std::vector<Criterion>& criteria() {
  static const std::vector<Criterion> list{
      {"gradient suite", gradient_suite},
      {"masking soundness", masking_soundness},
      {"set-permutation invariance", permutation_invariance},
      {"shape and receptive-field arithmetic", architecture_arithmetic},
      {"schedule and optimizer", schedule_and_optimizer},
      {"masking statistics", masking_statistics},
      {"metric oracles", metric_oracles},
      {"loss conformance", loss_conformance},
      {"end-to-end learnability", learnability},
      {"reproducibility", reproducibility},
  };
  return list;
}

bool run_one(std::size_t n) {
  const auto& c = criteria().at(n - 1);
  Outcome o;
  const auto start = Clock::now();
  try {
    c.run(o);
  } catch (const std::exception& e) {
    o.require(false, std::string("exception: ") + e.what());
  }
  std::cout << (o.passed ? "PASS" : "FAIL") << " criterion " << n << " (" << c.title << "): " << o.detail.str()
            << " [" << std::fixed << std::setprecision(1) << seconds_since(start) << " s]" << std::endl;
  return o.passed;
}

}  // namespace

int main(int argc, char** argv) {
  bool ok = true;
  if (argc > 1) {
    for (int i = 1; i < argc; ++i) {
      const std::size_t n = std::stoul(argv[i]);
      if (n < 1 || n > criteria().size()) {
        std::cerr << "criterion must be 1.." << criteria().size() << "\n";
        return 1;
      }
      ok = run_one(n) && ok;
    }
  } else {
    for (std::size_t n = 1; n <= criteria().size(); ++n) ok = run_one(n) && ok;
  }
  return ok ? 0 : 1;
}
