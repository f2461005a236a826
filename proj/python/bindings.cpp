#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <algorithm>
#include <cstring>
#include <stdexcept>
#include <string>

#include "ralnet/binary_io.hpp"
#include "ralnet/data.hpp"
#include "ralnet/eval.hpp"
#include "ralnet/gradcheck.hpp"
#include "ralnet/loss.hpp"
#include "ralnet/net.hpp"
#include "ralnet/parallel.hpp"
#include "ralnet/train.hpp"

namespace py = pybind11;
using namespace ralnet;

namespace {

using F32Array = py::array_t<float, py::array::c_style | py::array::forcecast>;
using F64Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

template <typename T>
py::array_t<T> to_numpy(const Tensor<T>& t, std::vector<py::ssize_t> shape) {
  py::array_t<T> out(shape);
  std::memcpy(out.mutable_data(), t.data(), t.size() * sizeof(T));
  return out;
}

// (N, 32, 32) or (N, 1, 32, 32) float patches.
Tensor<float> patches_from_numpy(const F32Array& a) {
  if (a.ndim() != 3 && a.ndim() != 4) throw std::invalid_argument("patches must be (N, H, W) or (N, 1, H, W)");
  if (a.ndim() == 4 && a.shape(1) != 1) throw std::invalid_argument("patches must have one channel");
  const int n = static_cast<int>(a.shape(0));
  const int h = static_cast<int>(a.shape(a.ndim() - 2)), w = static_cast<int>(a.shape(a.ndim() - 1));
  return Tensor<float>(Shape{n, 1, h, w}, std::vector<float>(a.data(), a.data() + a.size()));
}

template <typename T, typename Array>
Tensor<T> matrix_from_numpy(const Array& a, const char* what) {
  if (a.ndim() != 2) throw std::invalid_argument(std::string(what) + " must be a 2-D array");
  return Tensor<T>(matrix_shape(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1))),
                   std::vector<T>(a.data(), a.data() + a.size()));
}

ScoredPairSet scored_set(const F64Array& scores, const py::array_t<std::uint8_t, py::array::forcecast>& labels) {
  if (scores.ndim() != 1 || labels.ndim() != 1 || scores.size() != labels.size()) {
    throw std::invalid_argument("scores and labels must be 1-D arrays of equal length");
  }
  ScoredPairSet s;
  s.scores.assign(scores.data(), scores.data() + scores.size());
  s.labels.assign(labels.data(), labels.data() + labels.size());
  for (auto& l : s.labels) l = l ? 1 : 0;
  return s;
}

}  // namespace

PYBIND11_MODULE(_ralnet, m) {
  m.doc() = "Descriptor learning with the robust angular triplet loss";

  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);
  py::register_exception<FormatError>(m, "FormatError", PyExc_ValueError);

  m.def("set_num_threads", &set_num_threads, py::arg("threads"));

  py::class_<DescriptorNet<float>>(m, "DescriptorNet")
      .def(py::init([](std::uint64_t seed, double dropout) { return DescriptorNet<float>(NetConfig::l2net(seed, dropout)); }),
           py::arg("seed") = 0, py::arg("dropout") = 0.3)
      .def_static("load", [](const std::filesystem::path& p) { return load_model(p); }, py::arg("path"))
      .def("save", [](const DescriptorNet<float>& net, const std::filesystem::path& p) { save_model(net, p); },
           py::arg("path"))
      .def_property_readonly("parameter_count", &DescriptorNet<float>::parameter_count)
      .def_property_readonly("layer_count", &DescriptorNet<float>::layer_count)
      .def(
          "describe",
          [](const DescriptorNet<float>& net, const F32Array& patches) {
            const Tensor<float> x = patches_from_numpy(patches);
            Tensor<float> d;
            {
              py::gil_scoped_release release;
              d = net.infer(x);
            }
            return to_numpy(d, {d.shape().n, d.shape().c});
          },
          py::arg("patches"), "Eval-mode unit-norm descriptors, shape (N, 128)");

  m.def(
      "similarity_matrix",
      [](const F64Array& anchors, const F64Array& positives, const std::string& kind) {
        const auto d = similarity_matrix(matrix_from_numpy<double>(anchors, "anchors"),
                                         matrix_from_numpy<double>(positives, "positives"),
                                         parse_similarity_kind(kind));
        return to_numpy(d.values, {d.size(), d.size()});
      },
      py::arg("anchors"), py::arg("positives"), py::arg("kind") = "cosine");

  m.def(
      "mine_hard_negatives",
      [](const F64Array& d) {
        const Tensor<double> v = matrix_from_numpy<double>(d, "similarity matrix");
        const auto sel = mine_hard_negatives(SimilarityMatrix<double>{SimilarityKind::Cosine, v});
        py::dict out;
        out["pos"] = sel.pos;
        out["neg"] = sel.neg;
        out["neg_row"] = sel.neg_row;
        out["neg_col"] = sel.neg_col;
        return out;
      },
      py::arg("similarity"), "Hardest negative per anchor: largest entry of row i and column i off the diagonal");

  m.def(
      "loss",
      [](const F64Array& pos, const F64Array& neg, const std::string& variant, double margin) {
        if (pos.ndim() != 1 || neg.ndim() != 1) throw std::invalid_argument("pos and neg must be 1-D");
        LossConfig cfg;
        cfg.variant = parse_loss_variant(variant);
        cfg.margin = margin;
        const LossResult r = compute_loss(cfg, std::span<const double>(pos.data(), pos.size()),
                                          std::span<const double>(neg.data(), neg.size()));
        return py::make_tuple(r.loss, r.dpos, r.dneg);
      },
      py::arg("pos"), py::arg("neg"), py::arg("variant") = "robust", py::arg("margin") = 1.0,
      "Batch-mean loss and its derivatives (loss, dpos, dneg)");

  m.def(
      "loss_surface",
      [](const std::string& variant, double margin, int grid) {
        const auto cells = dump_loss_surface(parse_loss_variant(variant), margin, grid);
        py::array_t<double> out({static_cast<py::ssize_t>(cells.size()), py::ssize_t{5}});
        auto v = out.mutable_unchecked<2>();
        for (std::size_t i = 0; i < cells.size(); ++i) {
          const auto& c = cells[i];
          const double row[5] = {c.pos, c.neg, c.loss, c.dpos_abs, c.dneg_abs};
          for (int k = 0; k < 5; ++k) v(static_cast<py::ssize_t>(i), k) = row[k];
        }
        return out;
      },
      py::arg("variant") = "robust", py::arg("margin") = 1.0, py::arg("grid") = 256,
      "Rows of (pos, neg, loss, |dL/dpos|, |dL/dneg|), pos-major");

  m.def(
      "fpr95",
      [](const F64Array& scores, const py::array_t<std::uint8_t, py::array::forcecast>& labels) {
        const Fpr95Result r = fpr95(scored_set(scores, labels));
        return py::make_tuple(r.fpr, r.threshold);
      },
      py::arg("scores"), py::arg("labels"), "(fpr, threshold)");

  m.def(
      "average_precision",
      [](const F64Array& scores, const py::array_t<std::uint8_t, py::array::forcecast>& labels) {
        return average_precision(scored_set(scores, labels));
      },
      py::arg("scores"), py::arg("labels"));

  m.def(
      "resize_bicubic",
      [](const F32Array& patch, int side) {
        if (patch.ndim() != 2 || patch.shape(0) != patch.shape(1)) throw std::invalid_argument("patch must be square");
        const auto out = resize_bicubic(std::span<const float>(patch.data(), patch.size()),
                                        static_cast<int>(patch.shape(0)), side);
        py::array_t<float> a({side, side});
        std::copy(out.begin(), out.end(), a.mutable_data());
        return a;
      },
      py::arg("patch"), py::arg("side"));

  m.def(
      "generate_synthetic",
      [](int classes, int per_class, std::uint64_t seed) {
        const PatchStore s = generate_synthetic(classes, per_class, seed);
        py::array_t<float> patches({static_cast<py::ssize_t>(s.size()), py::ssize_t{s.side}, py::ssize_t{s.side}});
        std::copy(s.pixels.begin(), s.pixels.end(), patches.mutable_data());
        py::array_t<std::uint32_t> ids(static_cast<py::ssize_t>(s.size()));
        std::copy(s.class_ids.begin(), s.class_ids.end(), ids.mutable_data());
        return py::make_tuple(patches, ids);
      },
      py::arg("classes"), py::arg("per_class") = 2, py::arg("seed") = 0, "(patches (N, 32, 32), class_ids (N,))");

  m.def(
      "gradcheck",
      [](std::uint64_t seed) {
        std::vector<GradcheckCase> cases;
        {
          py::gil_scoped_release release;
          cases = run_gradcheck(seed);
        }
        py::list out;
        for (const auto& c : cases) out.append(py::make_tuple(c.name, c.max_rel_error, c.tolerance, c.pass()));
        return out;
      },
      py::arg("seed") = 0, "List of (name, max_rel_error, tolerance, passed)");

  m.def(
      "train_synthetic",
      [](int classes, std::size_t pairs_total, int batch_size, int epochs, const std::string& loss, double margin,
         double lr0, std::uint64_t seed, bool augment) {
        RunConfig c = RunConfig::strategy1();
        c.synth_classes = classes;
        c.pairs_total = pairs_total;
        c.batch_size = batch_size;
        c.epochs = epochs;
        c.loss.variant = parse_loss_variant(loss);
        c.loss.margin = margin;
        c.lr0 = lr0;
        c.seed = seed;
        c.augment = augment;
        c.validate();
        py::gil_scoped_release release;
        TrainResult r = train(c);
        py::gil_scoped_acquire acquire;
        py::dict out;
        out["initial_val_fpr95"] = r.initial_val_fpr95;
        out["final_val_fpr95"] = r.final_val_fpr95;
        out["total_steps"] = r.total_steps;
        std::vector<double> losses;
        for (const auto& row : r.log)
          if (row.loss) losses.push_back(*row.loss);
        out["losses"] = losses;
        out["net"] = py::cast(std::move(r.net));
        return out;
      },
      py::arg("classes") = 2000, py::arg("pairs_total") = 1800, py::arg("batch_size") = 128, py::arg("epochs") = 5,
      py::arg("loss") = "robust", py::arg("margin") = 1.0, py::arg("lr0") = 10.0, py::arg("seed") = 0,
      py::arg("augment") = false, "Train on a generated synthetic dataset with the strategy-1 optimiser settings");
}
