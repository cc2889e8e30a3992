#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "wav2sleep/eval.hpp"
#include "wav2sleep/gradcheck.hpp"
#include "wav2sleep/inference.hpp"
#include "wav2sleep/run.hpp"
#include "wav2sleep/train.hpp"

namespace py = pybind11;
using namespace wav2sleep;
using nlohmann::json;

namespace {

// JSON crosses the boundary as text through Python's json module.
py::object to_python(const json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

json from_python(const py::handle& obj) {
  return json::parse(py::module_::import("json").attr("dumps")(obj).cast<std::string>());
}

// A config argument is a preset name or a dict in the run-config layout.
RunConfig resolve(const py::object& config) {
  if (py::isinstance<py::str>(config)) return RunConfig::preset(config.cast<std::string>());
  return RunConfig::from_json(from_python(config));
}

std::vector<SignalKind> kinds_from(const std::optional<std::vector<std::string>>& names) {
  if (!names) return {kAllKinds.begin(), kAllKinds.end()};
  std::vector<SignalKind> out;
  for (const auto& n : *names) {
    auto k = parse_kind(n);
    if (!k) throw ConfigError("unknown modality '" + n + "'; valid kinds are ECG, PPG, ABD, THX");
    out.push_back(*k);
  }
  return out;
}

std::vector<const PreprocessedRecording*> pointers(const std::vector<PreprocessedRecording>& recs) {
  std::vector<const PreprocessedRecording*> out;
  for (const auto& r : recs) out.push_back(&r);
  return out;
}

ConfusionMatrix confusion_from(const std::vector<std::vector<std::uint64_t>>& rows) {
  if (rows.size() > kClassCount) throw PreconditionError("confusion matrix has more than 4 rows");
  ConfusionMatrix cm;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() > kClassCount) throw PreconditionError("confusion matrix has more than 4 columns");
    for (std::size_t j = 0; j < rows[i].size(); ++j) cm.counts[i][j] = rows[i][j];
  }
  return cm;
}

py::dict train_run(const py::object& config, const std::filesystem::path& manifest_path,
                   const std::filesystem::path& out, std::optional<std::uint64_t> seed) {
  auto c = resolve(config);
  if (seed) c.seed = *seed;
  auto manifest = Manifest::load(manifest_path);
  auto train = load_split(manifest, Split::Train, c.model);
  auto val = load_split(manifest, Split::Val, c.model);
  py::list log;
  Checkpoint best;
  {
    py::gil_scoped_release release;
    Trainer trainer(c.model, c.train, c.seed);
    trainer.set_data(pointers(train), pointers(val));
    trainer.fit();
    best = trainer.best_checkpoint();
    save_checkpoint(out, best);
    py::gil_scoped_acquire acquire;
    for (const auto& r : trainer.log()) log.append(to_python(r.to_json()));
  }
  py::dict result;
  result["checkpoint"] = out.string();
  result["best_epoch"] = best.state.best_epoch;
  result["best_val_loss"] = best.state.best_val_loss;
  result["log"] = log;
  return result;
}

py::object evaluate_run(const std::filesystem::path& checkpoint, const std::filesystem::path& manifest_path,
                        const std::string& split, const std::optional<std::vector<std::string>>& modalities,
                        const std::optional<std::string>& group_by) {
  auto s = parse_split(split);
  if (!s) throw ConfigError("split must be train, val or test");
  auto ckpt = load_checkpoint(checkpoint);
  auto recs = load_split(Manifest::load(manifest_path), *s, ckpt.model);
  MetricsReport report;
  {
    py::gil_scoped_release release;
    report = evaluate(pointers(recs), kinds_from(modalities), ckpt.params, ckpt.model, group_by);
  }
  return to_python(report.to_json());
}

py::tuple infer_one(const std::filesystem::path& checkpoint, const std::filesystem::path& input,
                    const std::optional<std::vector<std::string>>& modalities) {
  auto ckpt = load_checkpoint(checkpoint);
  ManifestEntry entry;
  entry.path = input;
  auto rec = load_for_model(entry, ckpt.model);
  auto subset = modalities ? kinds_from(modalities) : rec.kinds();
  auto p = predict(rec, subset, ckpt.params, ckpt.model);
  std::vector<std::string> stages;
  for (auto st : p.stages) stages.emplace_back(name_of(st));
  py::array_t<float> probs({p.probabilities.size(), static_cast<std::size_t>(kClassCount)});
  auto m = probs.mutable_unchecked<2>();
  for (std::size_t e = 0; e < p.probabilities.size(); ++e) {
    for (std::size_t c = 0; c < kClassCount; ++c) m(e, c) = p.probabilities[e][c];
  }
  return py::make_tuple(stages, probs);
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "wav2sleep core: data synthesis, training, evaluation and inference";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<DataError>(m, "DataError", PyExc_RuntimeError);
  py::register_exception<NumericalError>(m, "NumericalError", PyExc_ArithmeticError);
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const PreconditionError& e) {
      PyErr_SetString(PyExc_ValueError, e.what());
    } catch (const ShapeError& e) {
      PyErr_SetString(PyExc_ValueError, e.what());
    }
  });

  m.def("preset", [](const std::string& name) { return to_python(RunConfig::preset(name).to_json()); },
        py::arg("name") = "default", "Run configuration preset as a dict: default, tiny or desk.");

  m.def(
      "synth",
      [](const py::object& config, const std::filesystem::path& out_dir, std::optional<std::uint64_t> seed) {
        auto c = resolve(config);
        if (seed) c.seed = *seed;
        Manifest manifest;
        {
          py::gil_scoped_release release;
          manifest = write_synth_dataset(c, out_dir);
        }
        return to_python(manifest.to_json());
      },
      py::arg("config"), py::arg("out_dir"), py::arg("seed") = py::none(),
      "Writes a synthetic dataset and manifest.json; returns the manifest.");

  m.def("train", &train_run, py::arg("config"), py::arg("manifest"), py::arg("out"), py::arg("seed") = py::none(),
        "Trains on the manifest's train split with early stopping on val; saves the best checkpoint.");

  m.def("evaluate", &evaluate_run, py::arg("checkpoint"), py::arg("manifest"), py::arg("split") = "test",
        py::arg("modalities") = py::none(), py::arg("group_by") = py::none(),
        "Pooled kappa and accuracy report for one split and modality subset.");

  m.def("infer", &infer_one, py::arg("checkpoint"), py::arg("input"), py::arg("modalities") = py::none(),
        "Returns (stage names, [epochs, 4] class probabilities) for one recording.");

  m.def(
      "kappa",
      [](const std::vector<std::vector<std::uint64_t>>& rows) { return kappa(confusion_from(rows)); },
      py::arg("confusion"), "Cohen's kappa of a confusion matrix (rows = truth).");
  m.def(
      "accuracy",
      [](const std::vector<std::vector<std::uint64_t>>& rows) { return accuracy(confusion_from(rows)); },
      py::arg("confusion"));

  m.def(
      "gradcheck",
      [](std::size_t trials, std::uint64_t seed, bool inject_fault) {
        std::vector<GradcheckResult> results;
        {
          py::gil_scoped_release release;
          results = check_primitives(trials, seed, inject_fault);
          results.push_back(check_tiny_model(0));
        }
        py::list out;
        for (const auto& r : results) {
          py::dict d;
          d["name"] = r.name;
          d["max_relative_error"] = r.max_relative_error;
          d["coordinates"] = r.coordinates;
          d["passed"] = r.passed();
          out.append(d);
        }
        return out;
      },
      py::arg("trials") = 2, py::arg("seed") = 2024, py::arg("inject_fault") = false,
      "Finite-difference gradient checks of every primitive and the tiny model.");
}
