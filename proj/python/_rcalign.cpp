#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <optional>
#include <string>
#include <vector>

#include "rcalign/attention.hpp"
#include "rcalign/checkpoint.hpp"
#include "rcalign/corpus.hpp"
#include "rcalign/error.hpp"
#include "rcalign/eval.hpp"
#include "rcalign/model.hpp"
#include "rcalign/viz.hpp"

namespace py = pybind11;
using namespace rcalign;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

py::array_t<double> to_numpy(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<double> out(shape);
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

Tensor from_numpy(const Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

py::dict output_dict(const SynthesisOutput& o) {
  py::dict d;
  d["frames"] = to_numpy(o.frames);
  d["stop_logits"] = to_numpy(o.stop_logits);
  d["alignment"] = to_numpy(o.alignment);
  d["omegas"] = o.omegas ? py::object(to_numpy(*o.omegas)) : py::none();
  d["truncated"] = o.truncated;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Bindings for the rcalign attention library";
  m.attr("__version__") = "0.1.0";

  auto base = py::register_exception<Error>(m, "RcAlignError", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", base);
  py::register_exception<FormatError>(m, "FormatError", base);
  py::register_exception<CapabilityError>(m, "CapabilityError", base);

  m.def("mechanism_names", &attention::mechanism_names);

  m.def(
      "rc_recursion",
      [](const std::vector<double>& prev, const std::vector<double>& gates) {
        return attention::rc_recursion_values(prev, gates);
      },
      py::arg("prev"), py::arg("gates"), "One step of the stay/advance alignment recursion.");

  m.def("quantize_duration", &quantize_duration, py::arg("frames"), py::arg("n_buckets") = 5);

  m.def(
      "spearman",
      [](const std::vector<double>& x, const std::vector<double>& y) -> std::optional<double> {
        const Correlation c = spearman(x, y);
        if (!c.defined) return std::nullopt;
        return c.value;
      },
      py::arg("x"), py::arg("y"));

  m.def(
      "alignment_defects",
      [](const Array& alignment, bool truncated) {
        const UtteranceDefects d = detect_defects(from_numpy(alignment), truncated);
        py::dict out;
        out["skips"] = d.skips;
        out["repeats"] = d.repeats;
        out["collapses"] = d.collapses;
        out["truncated"] = d.truncated;
        return out;
      },
      py::arg("alignment"), py::arg("truncated") = false);

  m.def(
      "to_pgm", [](const Array& a) { return py::bytes(viz::to_pgm(from_numpy(a))); }, py::arg("alignment"));
  m.def(
      "to_ppm", [](const Array& a) { return py::bytes(viz::to_ppm(from_numpy(a))); }, py::arg("alignment"));

  py::class_<Corpus>(m, "Corpus")
      .def_property_readonly("content_hash", [](const Corpus& c) { return hash_hex(c.content_hash); })
      .def_property_readonly("vocab_size", [](const Corpus& c) { return c.table.vocab_size; })
      .def_property_readonly("feature_dim", [](const Corpus& c) { return c.table.feature_dim; })
      .def_readonly("train_indices", &Corpus::train_indices)
      .def_readonly("validation_indices", &Corpus::validation_indices)
      .def("__len__", [](const Corpus& c) { return c.utterances.size(); })
      .def("utterance",
           [](const Corpus& c, std::size_t i) {
             const Utterance& u = c.utterances.at(i);
             py::dict d;
             d["symbol_ids"] = u.symbol_ids;
             d["durations"] = u.durations;
             d["style_class"] = u.style_class;
             d["frames"] = to_numpy(u.frames);
             return d;
           })
      .def("save", [](const Corpus& c, const std::string& path) { save_corpus(c, path); });

  m.def(
      "gen_corpus",
      [](const std::string& config_json) {
        return gen_corpus(corpus_config_from_json(nlohmann::json::parse(config_json)));
      },
      py::arg("config_json") = "{}", "Generate a corpus from a JSON config string.");
  m.def("load_corpus", &load_corpus, py::arg("path"));

  py::class_<Model>(m, "Model")
      .def_property_readonly("mechanism",
                             [](const Model& md) { return std::string(attention::mechanism_name(md.config().mechanism)); })
      .def_property_readonly("config", [](const Model& md) { return to_json(md.config()).dump(); })
      .def_property_readonly("num_parameters", [](const Model& md) { return md.params().num_values(); })
      .def(
          "synthesize",
          [](const Model& md, const std::vector<std::size_t>& ids, const std::vector<std::size_t>& durations,
             std::size_t style, std::optional<std::size_t> max_steps) {
            FreeRunOptions opt;
            opt.max_steps = max_steps;
            SynthesisOutput o;
            {
              py::gil_scoped_release release;
              o = synthesize_free_run(md, ids, durations, style, opt);
            }
            return output_dict(o);
          },
          py::arg("symbol_ids"), py::arg("durations"), py::arg("style") = 0, py::arg("max_steps") = py::none());

  m.def(
      "new_model",
      [](const std::string& config_json, std::uint64_t seed) {
        return Model(model_config_from_json(nlohmann::json::parse(config_json)), seed);
      },
      py::arg("config_json"), py::arg("seed") = 1);
  m.def(
      "load_model", [](const std::string& path) { return load_checkpoint(path).model; }, py::arg("path"));
}
