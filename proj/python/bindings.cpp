#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "spen/experiment.hpp"

namespace py = pybind11;
using namespace spen;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;
using LabelArray = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;

Array to_array(const std::vector<Vector>& rows, std::size_t cols) {
  Array out({rows.size(), cols});
  auto v = out.mutable_unchecked<2>();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = 0; j < cols; ++j) v(i, j) = rows[i][j];
  }
  return out;
}

Array to_array(const Matrix& m) {
  Array out({m.rows(), m.cols()});
  std::copy(m.values().begin(), m.values().end(), out.mutable_data());
  return out;
}

Matrix to_matrix(const Array& a) {
  if (a.ndim() != 2) throw DimensionError("expected a 2-d array");
  Matrix m(a.shape(0), a.shape(1));
  std::copy(a.data(), a.data() + a.size(), m.values().begin());
  return m;
}

std::vector<BinaryLabels> to_labels(const LabelArray& y) {
  if (y.ndim() != 2) throw DimensionError("expected a 2-d label array");
  std::vector<BinaryLabels> out;
  for (py::ssize_t i = 0; i < y.shape(0); ++i) out.emplace_back(y.data(i, 0), y.data(i, 0) + y.shape(1));
  return out;
}

Dataset to_dataset(const Array& x, const LabelArray& y) {
  if (x.ndim() != 2 || y.ndim() != 2 || x.shape(0) != y.shape(0)) {
    throw DimensionError("features and labels must be 2-d arrays with the same number of rows");
  }
  Dataset ds;
  ds.num_features = x.shape(1);
  ds.num_labels = y.shape(1);
  for (py::ssize_t i = 0; i < x.shape(0); ++i) {
    const double* xr = x.data(i, 0);
    const std::uint8_t* yr = y.data(i, 0);
    ds.examples.push_back({Vector(xr, xr + ds.num_features), BinaryLabels(yr, yr + ds.num_labels)});
  }
  ds.validate();
  return ds;
}

py::tuple from_dataset(const Dataset& ds) {
  LabelArray y({ds.size(), ds.num_labels});
  auto yv = y.mutable_unchecked<2>();
  for (std::size_t i = 0; i < ds.size(); ++i) {
    for (std::size_t j = 0; j < ds.num_labels; ++j) yv(i, j) = ds.examples[i].labels[j];
  }
  return py::make_tuple(to_array(ds.feature_vectors(), ds.num_features), y);
}

ExperimentConfig make_config(const std::string& text, const std::map<std::string, std::string>& overrides) {
  std::istringstream in(text);
  ExperimentConfig cfg = parse_config(in);
  for (const auto& [k, v] : overrides) set_config_value(cfg, k, v);
  validate_config(cfg);
  return cfg;
}

py::list report_rows(const TrainingReport& report) {
  py::list rows;
  for (const auto& e : report.epochs) {
    py::dict d;
    d["stage"] = e.stage;
    d["epoch"] = e.epoch;
    d["mean_loss"] = e.mean_loss;
    d["dev_f1"] = e.dev_f1 ? py::cast(*e.dev_f1) : py::none();
    d["dev_hamming"] = e.dev_hamming ? py::cast(*e.dev_hamming) : py::none();
    rows.append(d);
  }
  return rows;
}

// Held by value so that pybind's std::variant caster does not claim it.
struct ModelHandle {
  Model model;
};

const SpenParams& spen_of(const ModelHandle& h) {
  if (const auto* p = std::get_if<SpenParams>(&h.model)) return *p;
  throw Error("this operation needs a SPEN model, not a mean-field model");
}

}  // namespace

PYBIND11_MODULE(_spen, m) {
  py::register_exception<Error>(m, "SpenError", PyExc_ValueError);

  m.def("synthetic", [](std::uint64_t seed, std::size_t n, std::size_t num_features, std::size_t num_labels,
                        std::size_t block_size) {
    SynthConfig sc;
    sc.seed = seed;
    sc.n_examples = n;
    sc.num_features = num_features;
    sc.num_labels = num_labels;
    sc.block_size = block_size;
    return from_dataset(generate_synthetic(sc));
  }, py::arg("seed") = 0, py::arg("n") = 1000, py::arg("num_features") = 64, py::arg("num_labels") = 16,
     py::arg("block_size") = 4, "Features and block-argmax labels of the synthetic exclusivity task.");

  m.def("load_dataset", [](const std::filesystem::path& path) { return from_dataset(load_multilabel(path)); });
  m.def("save_dataset", [](const std::filesystem::path& path, const Array& x, const LabelArray& y) {
    save_multilabel(path, to_dataset(x, y));
  });

  m.def("macro_f1", [](const LabelArray& pred, const LabelArray& gold) { return macro_f1(to_labels(pred), to_labels(gold)); });
  m.def("hamming_error",
        [](const LabelArray& pred, const LabelArray& gold) { return hamming_error(to_labels(pred), to_labels(gold)); });

  m.def("block_alignment_score", [](const Array& c, std::size_t block) { return block_alignment_score(to_matrix(c), block); });
  m.def("block_alignment_null", [](const Array& c, std::size_t block, std::size_t permutations, std::uint64_t seed) {
    return block_alignment_null(to_matrix(c), block, permutations, seed);
  }, py::arg("measurements"), py::arg("block_size"), py::arg("permutations") = 1000, py::arg("seed") = 0);

  py::class_<ModelHandle>(m, "Model")
      .def_static("load", [](const std::filesystem::path& path) { return ModelHandle{load_model(path)}; })
      .def("save", [](const ModelHandle& self, const std::filesystem::path& path) { save_model(path, self.model); })
      .def_property_readonly("kind", [](const ModelHandle& self) {
        if (std::holds_alternative<DmfParams>(self.model)) return std::string("dmf");
        return is_feed_forward(self.model) ? std::string("feed_forward") : std::string("spen");
      })
      .def("predict", [](const ModelHandle& self, const Array& x, std::size_t max_iters, double step_size) {
        InferenceConfig ic;
        ic.max_iters = max_iters;
        ic.step_size = step_size;
        const std::size_t L = std::holds_alternative<SpenParams>(self.model)
                                  ? std::get<SpenParams>(self.model).local.bias.size()
                                  : std::get<DmfParams>(self.model).unary_adjust.size();
        LabelArray unlabeled({x.shape(0), static_cast<py::ssize_t>(L)});
        std::fill_n(unlabeled.mutable_data(), unlabeled.size(), std::uint8_t{0});
        const Dataset with_labels = to_dataset(x, unlabeled);
        return to_array(predict_relaxed(self.model, with_labels, ic, 1), L);
      }, py::arg("x"), py::arg("max_iters") = 60, py::arg("step_size") = 0.1,
         "Relaxed per-label outputs in (0, 1), one row per input row.")
      .def("energy", [](const ModelHandle& self, const Array& x, const Array& y) {
        const SpenParams& p = spen_of(self);
        if (x.ndim() != 1 || y.ndim() != 1) throw DimensionError("energy takes one feature vector and one label vector");
        const Vector features = feature_forward(p.features, std::span<const double>(x.data(), x.size()));
        return total_energy(p, features, std::span<const double>(y.data(), y.size()));
      })
      .def("measurements", [](const ModelHandle& self) { return to_array(measurement_matrix(spen_of(self))); });

  py::class_<TrainOutcome>(m, "TrainOutcome")
      .def_property_readonly("model", [](const TrainOutcome& t) { return ModelHandle{t.model}; })
      .def_property_readonly("report", [](const TrainOutcome& t) { return report_rows(t.report); });

  m.def("train", [](const std::string& config_text, const std::map<std::string, std::string>& overrides) {
    const ExperimentConfig cfg = make_config(config_text, overrides);
    const ExperimentData data = load_experiment_data(cfg);
    py::gil_scoped_release release;
    return run_training(cfg, data);
  }, py::arg("config") = "", py::arg("overrides") = std::map<std::string, std::string>{},
     "Trains from config text in the CLI's key = value format.");

  m.def("evaluate", [](const ModelHandle& model, const Array& x, const LabelArray& y, std::optional<double> threshold,
                       std::size_t max_iters) {
    InferenceConfig ic;
    ic.max_iters = max_iters;
    EvalOptions opts;
    opts.threshold = threshold;
    const EvalReport r = evaluate_model(model.model, to_dataset(x, y), ic, opts);
    py::dict d;
    d["macro_f1"] = r.macro_f1;
    d["hamming_error"] = r.hamming_error;
    d["threshold"] = r.threshold_used;
    d["examples"] = r.examples;
    return d;
  }, py::arg("model"), py::arg("x"), py::arg("y"), py::arg("threshold") = py::none(), py::arg("max_iters") = 60);
}
