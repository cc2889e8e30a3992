#include "wav2sleep/eval.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

#include "bytes.hpp"
#include "wav2sleep/inference.hpp"
#include "wav2sleep/tensor.hpp"

namespace wav2sleep {

using nlohmann::json;

std::uint64_t ConfusionMatrix::total() const {
  std::uint64_t n = 0;
  for (const auto& row : counts)
    for (auto c : row) n += c;
  return n;
}

std::uint64_t ConfusionMatrix::trace() const {
  std::uint64_t n = 0;
  for (std::size_t i = 0; i < kClassCount; ++i) n += counts[i][i];
  return n;
}

ConfusionMatrix& ConfusionMatrix::operator+=(const ConfusionMatrix& other) {
  for (std::size_t i = 0; i < kClassCount; ++i)
    for (std::size_t j = 0; j < kClassCount; ++j) counts[i][j] += other.counts[i][j];
  return *this;
}

json ConfusionMatrix::to_json() const { return counts; }

ConfusionMatrix confusion(const Hypnogram& predicted, const Hypnogram& truth) {
  if (predicted.size() != truth.size()) {
    throw PreconditionError("confusion: " + std::to_string(predicted.size()) + " predictions for " +
                            std::to_string(truth.size()) + " reference epochs");
  }
  ConfusionMatrix cm;
  for (std::size_t t = 0; t < truth.size(); ++t) {
    if (truth[t] == SleepStage::Ignore) continue;
    if (predicted[t] == SleepStage::Ignore) {
      throw PreconditionError("confusion: prediction is Ignore at epoch " + std::to_string(t));
    }
    ++cm.counts[static_cast<std::size_t>(truth[t])][static_cast<std::size_t>(predicted[t])];
  }
  return cm;
}

double kappa(const ConfusionMatrix& cm, bool* degenerate) {
  // kappa = (n * trace - sum row*col) / (n^2 - sum row*col), evaluated in exact
  // integers so that only the final division rounds.
  using Wide = unsigned __int128;
  const Wide n = cm.total();
  if (n == 0) throw PreconditionError("kappa: empty confusion matrix");
  Wide chance = 0;
  for (std::size_t i = 0; i < kClassCount; ++i) {
    Wide row = 0, col = 0;
    for (std::size_t j = 0; j < kClassCount; ++j) {
      row += cm.counts[i][j];
      col += cm.counts[j][i];
    }
    chance += row * col;
  }
  if (degenerate) *degenerate = false;
  if (chance >= n * n) {
    if (degenerate) *degenerate = true;
    return 0.0;
  }
  const Wide observed = n * cm.trace();
  const double numerator = observed >= chance ? static_cast<double>(observed - chance)
                                              : -static_cast<double>(chance - observed);
  return numerator / static_cast<double>(n * n - chance);
}

double accuracy(const ConfusionMatrix& cm) {
  const auto n = cm.total();
  if (n == 0) throw PreconditionError("accuracy: empty confusion matrix");
  return static_cast<double>(cm.trace()) / static_cast<double>(n);
}

json MetricsReport::to_json() const {
  json subset_names = json::array();
  for (auto kind : subset) subset_names.push_back(name_of(kind));
  json per = json::array();
  for (const auto& r : per_recording) {
    per.push_back({{"id", r.id},
                   {"epochs", r.epochs},
                   {"kappa", r.kappa ? json(*r.kappa) : json(nullptr)},
                   {"accuracy", r.accuracy}});
  }
  json group_reports = json::object();
  for (const auto& [key, report] : groups) {
    auto sub = report.to_json();
    sub.erase("groups");
    sub.erase("config_digest");
    sub.erase("subset");
    group_reports[key] = sub;
  }
  return {{"config_digest", config_digest},
          {"subset", subset_names},
          {"n_recordings", n_recordings},
          {"skipped_recordings", skipped_recordings},
          {"confusion", confusion.to_json()},
          {"kappa_total", kappa_total},
          {"accuracy_total", accuracy_total},
          {"per_recording", per},
          {"groups", group_reports},
          {"warnings", warnings}};
}

MetricsReport summarize(const std::vector<std::pair<std::string, ConfusionMatrix>>& recordings) {
  MetricsReport report;
  for (const auto& [id, cm] : recordings) {
    report.confusion += cm;
    RecordingScore score;
    score.id = id;
    score.epochs = cm.total();
    if (score.epochs > 0) {
      bool degenerate = false;
      score.kappa = kappa(cm, &degenerate);
      score.accuracy = accuracy(cm);
      if (degenerate) report.warnings.push_back("kappa undefined for recording '" + id + "' (single class); reported as 0");
    }
    report.per_recording.push_back(score);
  }
  report.n_recordings = recordings.size();
  if (report.confusion.total() == 0) throw DataError("evaluation has no labelled epochs");
  bool degenerate = false;
  report.kappa_total = kappa(report.confusion, &degenerate);
  if (degenerate) report.warnings.push_back("pooled kappa undefined (single class); reported as 0");
  report.accuracy_total = accuracy(report.confusion);
  return report;
}

MetricsReport evaluate(const std::vector<const PreprocessedRecording*>& recordings,
                       const std::vector<SignalKind>& subset, const Params<float>& params,
                       const ModelConfig& config, const std::optional<std::string>& group_key) {
  if (subset.empty()) throw PreconditionError("evaluate: empty modality subset");
  std::vector<const PreprocessedRecording*> usable;
  std::vector<std::string> warnings;
  for (const auto* r : recordings) {
    bool ok = true;
    for (auto kind : subset) ok = ok && r->has(kind);
    if (ok) {
      usable.push_back(r);
    } else {
      warnings.push_back("skipped '" + r->id + "': lacks " + kind_list(subset) + " (has " +
                         kind_list(r->kinds()) + ")");
    }
  }
  if (usable.empty()) throw DataError("no test recording has all of " + kind_list(subset));

  const auto predictions = predict_all(usable, subset, params, config);
  std::vector<std::pair<std::string, ConfusionMatrix>> matrices;
  std::map<std::string, std::vector<std::pair<std::string, ConfusionMatrix>>> grouped;
  for (std::size_t i = 0; i < usable.size(); ++i) {
    auto cm = confusion(predictions[i].stages, usable[i]->labels);
    matrices.emplace_back(usable[i]->id, cm);
    if (group_key) {
      auto it = usable[i]->metadata.find(*group_key);
      grouped[it == usable[i]->metadata.end() ? "unknown" : it->second].emplace_back(usable[i]->id, cm);
    }
  }
  auto report = summarize(matrices);
  report.subset = subset;
  report.skipped_recordings = recordings.size() - usable.size();
  report.warnings.insert(report.warnings.begin(), warnings.begin(), warnings.end());
  report.config_digest = config_digest(config, params);
  for (const auto& [value, members] : grouped) {
    try {
      report.groups[value] = summarize(members);
    } catch (const DataError&) {
      report.warnings.push_back("group '" + value + "' has no labelled epochs");
    }
  }
  return report;
}

std::string config_digest(const ModelConfig& config, const Params<float>& params) {
  std::string bytes = config.to_json().dump();
  for (const auto& [name, t] : params) {
    bytes += name;
    detail::append_floats(bytes, t.values());
  }
  char hex[9];
  std::snprintf(hex, sizeof hex, "%08x", detail::crc32_of(bytes));
  return hex;
}

std::string confusion_svg(const ConfusionMatrix& cm, const std::string& title) {
  constexpr const char* labels[] = {"Wake", "Light", "Deep", "REM"};
  constexpr int cell = 72, left = 90, top = 70;
  std::ostringstream svg;
  const int size = left + cell * 4 + 20;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << size << "\" height=\"" << size + 30
      << "\" font-family=\"sans-serif\" font-size=\"13\">\n";
  std::string escaped;
  for (char c : title) {
    if (c == '<') escaped += "&lt;";
    else if (c == '>') escaped += "&gt;";
    else if (c == '&') escaped += "&amp;";
    else escaped += c;
  }
  svg << "<text x=\"" << left << "\" y=\"24\" font-size=\"15\">" << escaped << "</text>\n";
  svg << "<text x=\"" << left + cell * 2 << "\" y=\"" << top - 28
      << "\" text-anchor=\"middle\">predicted</text>\n";
  svg << "<text x=\"20\" y=\"" << top + cell * 2 << "\" transform=\"rotate(-90 20 " << top + cell * 2
      << ")\" text-anchor=\"middle\">reference</text>\n";
  for (std::size_t i = 0; i < kClassCount; ++i) {
    std::uint64_t row_total = 0;
    for (auto c : cm.counts[i]) row_total += c;
    svg << "<text x=\"" << left - 8 << "\" y=\"" << top + cell * i + cell / 2 + 5
        << "\" text-anchor=\"end\">" << labels[i] << "</text>\n";
    svg << "<text x=\"" << left + cell * i + cell / 2 << "\" y=\"" << top - 8
        << "\" text-anchor=\"middle\">" << labels[i] << "</text>\n";
    for (std::size_t j = 0; j < kClassCount; ++j) {
      const double share = row_total ? static_cast<double>(cm.counts[i][j]) / row_total : 0.0;
      const int shade = static_cast<int>(std::lround(255 - 200 * share));
      svg << "<rect x=\"" << left + cell * j << "\" y=\"" << top + cell * i << "\" width=\"" << cell
          << "\" height=\"" << cell << "\" fill=\"rgb(" << shade << "," << shade << ",255)\" stroke=\"#444\"/>\n";
      svg << "<text x=\"" << left + cell * j + cell / 2 << "\" y=\"" << top + cell * i + cell / 2 + 5
          << "\" text-anchor=\"middle\" fill=\"" << (share > 0.6 ? "#fff" : "#000") << "\">"
          << cm.counts[i][j] << "</text>\n";
    }
  }
  svg << "</svg>\n";
  return svg.str();
}

}  // namespace wav2sleep
