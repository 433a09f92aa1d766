#include "saev/exemplar_index.hpp"
#include "saev/intervention.hpp"
#include "saev/synth.hpp"
#include "saev/task_heads.hpp"
#include "saev/trainer.hpp"

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

namespace py = pybind11;
using namespace saev;

namespace {

RowMatrix codes_of(const SaeCheckpoint& c, RowMatrix x, bool normalize) {
  if (normalize) {
    Eigen::VectorXf scales;
    normalize_rows(c.normalizer, x, scales);
  }
  return encode_rows<float>(c.params, x);
}

}  // namespace

PYBIND11_MODULE(_saev, m) {
  m.doc() = "Sparse autoencoders over vision transformer activations";

  py::register_exception<FormatError>(m, "FormatError", PyExc_ValueError);
  py::register_exception<ArgumentError>(m, "ArgumentError", PyExc_ValueError);
  py::register_exception<IoError>(m, "IoError", PyExc_OSError);

  py::class_<ActivationStore>(m, "ActivationStore")
      .def_static("open", &ActivationStore::open, py::arg("dir"))
      .def_property_readonly("n_rows", &ActivationStore::n_rows)
      .def_property_readonly("d", &ActivationStore::d)
      .def_property_readonly("patches_per_image", &ActivationStore::patches_per_image)
      .def_property_readonly("n_shards", &ActivationStore::n_shards)
      .def("read", &ActivationStore::read_range, py::arg("first"), py::arg("count"))
      .def("ref", [](const ActivationStore& s, std::uint64_t g) {
        const PatchRef r = s.ref(g);
        return py::make_tuple(r.image_id, r.patch_idx);
      })
      .def("fingerprint", &ActivationStore::fingerprint);

  m.def(
      "write_shard",
      [](const fs::path& path, const RowMatrix& rows, std::uint32_t ppi, std::uint32_t shard_index,
         std::uint64_t row_offset) { write_shard(path, rows, ppi, {"python", -1, "python", shard_index, row_offset}); },
      py::arg("path"), py::arg("rows"), py::arg("patches_per_image"), py::arg("shard_index") = 0,
      py::arg("row_offset") = 0);

  py::class_<SaeCheckpoint>(m, "Sae")
      .def_property_readonly("d", [](const SaeCheckpoint& c) { return c.params.d(); })
      .def_property_readonly("n", [](const SaeCheckpoint& c) { return c.params.n(); })
      .def_property_readonly("w_enc", [](const SaeCheckpoint& c) { return c.params.w_enc; })
      .def_property_readonly("b_enc", [](const SaeCheckpoint& c) { return c.params.b_enc; })
      .def_property_readonly("w_dec", [](const SaeCheckpoint& c) { return c.params.w_dec; })
      .def_property_readonly("b_dec", [](const SaeCheckpoint& c) { return c.params.b_dec; })
      .def_property_readonly("mu", [](const SaeCheckpoint& c) { return c.normalizer.mu; })
      .def_property_readonly("config", [](const SaeCheckpoint& c) { return c.config.dump(); })
      .def("encode", &codes_of, py::arg("x"), py::arg("normalize") = true)
      .def(
          "intervene",
          [](const SaeCheckpoint& c, const RowMatrix& x, const std::string& edits, const std::string& scope,
             const std::vector<std::uint32_t>& patches, bool normalize) {
            auto sc = parse_scope(scope);
            if (!sc) throw ArgumentError("scope must be 'selected' or 'all'");
            InterventionOptions o;
            o.normalize = normalize;
            return intervene(c.params, c.normalizer, x, parse_edits(edits), *sc, patches, o).activations;
          },
          py::arg("x"), py::arg("edits") = "", py::arg("scope") = "all", py::arg("patches") = std::vector<std::uint32_t>{},
          py::arg("normalize") = true);
  m.def("load_sae", &load_checkpoint, py::arg("path"));

  m.def(
      "train",
      [](const fs::path& store_dir, int width, double l1, double lr, std::size_t batch, std::uint64_t total,
         std::int64_t warmup, std::uint64_t seed, const std::optional<fs::path>& out) {
        const ActivationStore store = ActivationStore::open(store_dir);
        TrainConfig c;
        c.width = width;
        c.lambda_max = l1;
        c.lr_max = lr;
        c.batch_size = batch;
        c.total_activations = total;
        c.lambda_warmup = c.lr_warmup = warmup;
        c.seed = seed;
        TrainOptions o;
        o.output_dir = out;
        py::gil_scoped_release release;
        return std::move(train(store, {c}, o).front().checkpoint);
      },
      py::arg("store"), py::arg("width"), py::arg("l1") = 8e-4, py::arg("lr") = 1e-3, py::arg("batch") = 1024,
      py::arg("total") = 1 << 20, py::arg("warmup") = 500, py::arg("seed") = 0, py::arg("out") = py::none());

  m.def("warmup_value", &warmup_value, py::arg("step"), py::arg("warmup_steps"), py::arg("max_value"));

  m.def(
      "top_exemplars",
      [](const fs::path& path, std::uint32_t feature) {
        const ExemplarIndex idx = ExemplarIndex::load(path);
        if (feature >= idx.n()) throw ArgumentError("feature out of range");
        py::list out;
        for (const auto& e : idx.exemplars[feature]) out.append(py::make_tuple(e.ref.image_id, e.ref.patch_idx, e.activation));
        return out;
      },
      py::arg("index"), py::arg("feature"));

  m.def(
      "miou",
      [](const std::vector<std::int32_t>& pred, const std::vector<std::int32_t>& gt, int classes, std::int32_t ignore) {
        return miou(pred, gt, classes, ignore);
      },
      py::arg("pred"), py::arg("gt"), py::arg("classes"), py::arg("ignore") = kIgnoreLabel);
  m.def(
      "upsample_bilinear",
      [](const std::vector<float>& plane, int in_h, int in_w, int out_h, int out_w) {
        return upsample_bilinear(plane, in_h, in_w, out_h, out_w);
      },
      py::arg("plane"), py::arg("in_h"), py::arg("in_w"), py::arg("out_h"), py::arg("out_w"));

  m.def(
      "gen_world",
      [](int d, int n_true, int k, double sigma, std::uint64_t seed, std::uint64_t count) {
        const PlantedWorld w = gen_world(d, n_true, k, sigma, seed);
        SyntheticSamples s = gen_samples(w, count);
        return py::make_tuple(w.dictionary, s.x, s.labels);
      },
      py::arg("d"), py::arg("n_true"), py::arg("k"), py::arg("sigma"), py::arg("seed"), py::arg("count"));
  m.def(
      "dictionary_recovery",
      [](const Eigen::MatrixXf& w_dec, const Eigen::MatrixXf& dictionary) {
        const Recovery r = dictionary_recovery(w_dec, dictionary);
        return py::make_tuple(r.mean_cosine, r.match);
      },
      py::arg("w_dec"), py::arg("dictionary"));
}
