#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "wav2sleep/eval.hpp"
#include "wav2sleep/synth.hpp"

using namespace wav2sleep;

namespace {

ConfusionMatrix from_rows(std::initializer_list<std::initializer_list<std::uint64_t>> rows) {
  ConfusionMatrix cm;
  std::size_t i = 0;
  for (const auto& row : rows) {
    std::size_t j = 0;
    for (auto v : row) cm.counts[i][j++] = v;
    ++i;
  }
  return cm;
}

// Brute force: expand the matrix into (truth, predicted) pairs and count.
std::pair<double, double> brute_force_kappa_accuracy(const ConfusionMatrix& cm) {
  std::vector<std::pair<int, int>> pairs;
  for (int t = 0; t < 4; ++t) {
    for (int p = 0; p < 4; ++p) {
      for (std::uint64_t c = 0; c < cm.counts[t][p]; ++c) pairs.emplace_back(t, p);
    }
  }
  const double n = static_cast<double>(pairs.size());
  double agree = 0.0;
  double truth_freq[4] = {}, pred_freq[4] = {};
  for (auto [t, p] : pairs) {
    agree += t == p;
    truth_freq[t] += 1.0 / n;
    pred_freq[p] += 1.0 / n;
  }
  const double po = agree / n;
  double pe = 0.0;
  for (int c = 0; c < 4; ++c) pe += truth_freq[c] * pred_freq[c];
  return {(po - pe) / (1.0 - pe), po};
}

Hypnogram random_hypnogram(std::size_t n, std::mt19937_64& rng, bool with_ignore) {
  std::uniform_int_distribution<int> d(with_ignore ? -1 : 0, 3);
  Hypnogram h(n);
  for (auto& s : h) s = static_cast<SleepStage>(d(rng));
  return h;
}

}  // namespace

TEST_CASE("kappa hand cases") {
  auto cm = from_rows({{2, 1}, {1, 2}});
  CHECK(kappa(cm) == 1.0 / 3.0);
  CHECK(accuracy(cm) == 4.0 / 6.0);

  auto perfect = from_rows({{3, 0, 0, 0}, {0, 5, 0, 0}, {0, 0, 2, 0}, {0, 0, 0, 1}});
  CHECK(kappa(perfect) == 1.0);
  CHECK(accuracy(perfect) == 1.0);

  // Predictions independent of truth: p_o = p_e, kappa 0.
  auto chance = from_rows({{1, 1}, {1, 1}});
  CHECK(kappa(chance) == 0.0);

  bool degenerate = false;
  CHECK(kappa(from_rows({{0, 0}, {0, 7}}), &degenerate) == 0.0);
  CHECK(degenerate);
  CHECK(kappa(cm, &degenerate) > 0.0);
  CHECK_FALSE(degenerate);

  CHECK_THROWS_AS(kappa(ConfusionMatrix{}), PreconditionError);
  CHECK_THROWS_AS(accuracy(ConfusionMatrix{}), PreconditionError);
}

TEST_CASE("kappa and accuracy match a brute-force oracle on random matrices") {
  std::mt19937_64 rng(77);
  std::uniform_int_distribution<std::uint64_t> count(0, 40);
  for (int trial = 0; trial < 1000; ++trial) {
    ConfusionMatrix cm;
    for (auto& row : cm.counts) {
      for (auto& c : row) c = count(rng);
    }
    if (cm.total() == 0) continue;
    const auto [k, a] = brute_force_kappa_accuracy(cm);
    REQUIRE(std::abs(kappa(cm) - k) <= 1e-12);
    REQUIRE(std::abs(accuracy(cm) - a) <= 1e-12);
  }
}

TEST_CASE("confusion: Ignore truth skipped, invariant to epoch order and consistent relabelling") {
  Hypnogram truth{SleepStage::Wake, SleepStage::Ignore, SleepStage::REM, SleepStage::Deep};
  Hypnogram pred{SleepStage::Wake, SleepStage::REM, SleepStage::Light, SleepStage::Deep};
  auto cm = confusion(pred, truth);
  CHECK(cm.total() == 3);
  CHECK(cm.counts[0][0] == 1);
  CHECK(cm.counts[3][1] == 1);
  CHECK(cm.counts[2][2] == 1);
  CHECK_THROWS_AS(confusion(pred, Hypnogram{SleepStage::Wake}), PreconditionError);

  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    auto t = random_hypnogram(200, rng, true);
    auto p = random_hypnogram(200, rng, false);
    const auto base = confusion(p, t);
    std::vector<std::size_t> order(t.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    Hypnogram ts, ps;
    for (auto i : order) {
      ts.push_back(t[i]);
      ps.push_back(p[i]);
    }
    CHECK(confusion(ps, ts) == base);

    // Renaming classes by a permutation applied to both sides keeps kappa.
    std::array<int, 4> perm{0, 1, 2, 3};
    std::shuffle(perm.begin(), perm.end(), rng);
    auto rename = [&](SleepStage s) {
      return s == SleepStage::Ignore ? s : static_cast<SleepStage>(perm[static_cast<int>(s)]);
    };
    Hypnogram tr, pr;
    for (std::size_t i = 0; i < t.size(); ++i) {
      tr.push_back(rename(t[i]));
      pr.push_back(rename(p[i]));
    }
    CHECK(std::abs(kappa(confusion(pr, tr)) - kappa(base)) < 1e-12);
  }
}

TEST_CASE("summarize pools epochs rather than averaging per-recording kappas") {
  auto a = from_rows({{5, 0}, {0, 5}});
  auto b = from_rows({{0, 4}, {4, 0}});
  auto report = summarize({{"a", a}, {"b", b}});
  ConfusionMatrix pooled = a;
  pooled += b;
  CHECK(report.confusion == pooled);
  CHECK(report.kappa_total == kappa(pooled));
  CHECK(report.accuracy_total == accuracy(pooled));
  CHECK(report.n_recordings == 2);
  REQUIRE(report.per_recording.size() == 2);
  CHECK(*report.per_recording[0].kappa == 1.0);
  CHECK(*report.per_recording[1].kappa == -1.0);
  CHECK(report.kappa_total != doctest::Approx(0.0));

  auto j = report.to_json();
  CHECK(j["kappa_total"].get<double>() == report.kappa_total);
  CHECK_FALSE(j["confusion"].is_null());

  CHECK_THROWS_AS(summarize({{"empty", ConfusionMatrix{}}}), DataError);
}

TEST_CASE("evaluate: skipped recordings, grouping and digest") {
  auto model = ModelConfig::tiny();
  SynthConfig sc;
  sc.duration_epochs = model.epochs;
  std::vector<PreprocessedRecording> recs;
  for (std::uint64_t i = 0; i < 4; ++i) {
    sc.seed = i;
    recs.push_back(preprocess(synth_generate(sc, "r" + std::to_string(i)), PreprocessOptions::from(model)));
  }
  recs[1].signals.erase(SignalKind::PPG);
  recs[2].metadata.erase("age_band");
  std::vector<const PreprocessedRecording*> ptrs;
  for (const auto& r : recs) ptrs.push_back(&r);
  auto params = init_params<float>(model, 1);

  auto report = evaluate(ptrs, {SignalKind::PPG}, params, model, std::string("age_band"));
  CHECK(report.n_recordings == 3);
  CHECK(report.skipped_recordings == 1);
  REQUIRE_FALSE(report.warnings.empty());
  CHECK(report.warnings.front().find("r1") != std::string::npos);
  CHECK(report.groups.count("unknown") == 1);
  std::uint64_t grouped = 0;
  for (const auto& [key, g] : report.groups) grouped += g.confusion.total();
  CHECK(grouped == report.confusion.total());

  auto all = evaluate(ptrs, {SignalKind::ECG}, params, model);
  CHECK(all.n_recordings == 4);
  CHECK(all.groups.empty());
  CHECK(all.config_digest == config_digest(model, params));
  CHECK(all.config_digest.size() == 8);
  auto other = init_params<float>(model, 2);
  CHECK(config_digest(model, other) != all.config_digest);

  for (auto& r : recs) r.signals.erase(SignalKind::ABD);
  CHECK_THROWS_AS(evaluate(ptrs, {SignalKind::ABD}, params, model), DataError);
  CHECK_THROWS_AS(evaluate(ptrs, {}, params, model), PreconditionError);
}

TEST_CASE("confusion_svg renders counts and escapes the title") {
  auto svg = confusion_svg(from_rows({{12, 3}, {4, 56}}), "ECG <test> & more");
  CHECK(svg.rfind("<svg", 0) == 0);
  CHECK(svg.find(">56<") != std::string::npos);
  CHECK(svg.find("&lt;test&gt; &amp; more") != std::string::npos);
  CHECK(svg.find("</svg>") != std::string::npos);
}
