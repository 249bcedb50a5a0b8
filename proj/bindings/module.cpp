#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstring>

#include "uroscan/architectures.hpp"
#include "uroscan/dataset.hpp"
#include "uroscan/gradcam.hpp"
#include "uroscan/metrics.hpp"
#include "uroscan/nn.hpp"

namespace py = pybind11;
using namespace uroscan;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
  Shape shape(a.ndim());
  for (py::ssize_t i = 0; i < a.ndim(); ++i) shape[i] = a.shape(i);
  Tensor t(shape, Dtype::f64);
  std::memcpy(t.data<double>().data(), a.data(), sizeof(double) * t.numel());
  return t;
}

py::array_t<double> to_array(const Tensor& t) {
  Tensor d = t.dtype() == Dtype::f64 ? t : t.to(Dtype::f64);
  std::vector<py::ssize_t> shape(d.shape().begin(), d.shape().end());
  py::array_t<double> out(shape);
  std::memcpy(out.mutable_data(), d.data<double>().data(), sizeof(double) * d.numel());
  return out;
}

// Thin owner so Python holds a stable handle to a graph plus its weights.
struct PyNetwork {
  nn::Network net;

  py::array_t<double> forward(const Array& batch) {
    Tensor x = to_tensor(batch).to(net.spec.dtype);
    return to_array(net.forward(x, /*training=*/false));
  }
  py::dict spec() const {
    py::dict d;
    d["arch"] = net.spec.arch;
    d["width_scale"] = net.spec.width_scale;
    d["image_size"] = net.spec.image_size;
    d["in_channels"] = net.spec.in_channels;
    d["classes"] = net.spec.classes;
    d["dtype"] = std::string(dtype_name(net.spec.dtype));
    return d;
  }
};

Dtype dtype_from_name(const std::string& name) {
  if (name == "f32") return Dtype::f32;
  if (name == "f64") return Dtype::f64;
  throw ValidationError("dtype must be f32 or f64, got '" + name + "'");
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "uroscan core: tensors, backbones, training metrics and heatmaps";
  py::register_exception<Error>(m, "UroscanError");

  m.def("version", [] { return std::string("0.1.0"); });

  // -- functional tensor operations (float64 in, float64 out) --------------
  m.def(
      "conv2d",
      [](const Array& x, const Array& w, const Array& b, int stride, int padding) {
        return to_array(ops::conv2d(to_tensor(x), to_tensor(w), to_tensor(b), stride,
                                    padding));
      },
      py::arg("input"), py::arg("weight"), py::arg("bias"), py::arg("stride") = 1,
      py::arg("padding") = 0);
  m.def(
      "dense",
      [](const Array& x, const Array& w, const Array& b) {
        return to_array(ops::dense(to_tensor(x), to_tensor(w), to_tensor(b)));
      },
      py::arg("input"), py::arg("weight"), py::arg("bias"));
  m.def(
      "max_pool2d",
      [](const Array& x, int window, int stride, int padding) {
        return to_array(ops::max_pool2d(to_tensor(x), window, stride, padding));
      },
      py::arg("input"), py::arg("window"), py::arg("stride"), py::arg("padding") = 0);
  m.def(
      "avg_pool2d",
      [](const Array& x, int window, int stride, int padding) {
        return to_array(ops::avg_pool2d(to_tensor(x), window, stride, padding));
      },
      py::arg("input"), py::arg("window"), py::arg("stride"), py::arg("padding") = 0);
  m.def("global_avg_pool",
        [](const Array& x) { return to_array(ops::global_avg_pool(to_tensor(x))); });
  m.def("relu", [](const Array& x) { return to_array(ops::relu(to_tensor(x))); });
  m.def("softmax", [](const Array& x) { return to_array(ops::softmax(to_tensor(x))); });
  m.def(
      "batch_norm",
      [](const Array& x, const Array& gamma, const Array& beta, const Array& mean,
         const Array& var) {
        Tensor rm = to_tensor(mean), rv = to_tensor(var);
        return to_array(ops::batch_norm(to_tensor(x), to_tensor(gamma), to_tensor(beta),
                                        rm, rv, /*training=*/false, nn::kBnMomentum,
                                        nn::kBnEps));
      },
      py::arg("input"), py::arg("gamma"), py::arg("beta"), py::arg("running_mean"),
      py::arg("running_var"));
  m.def(
      "cross_entropy",
      [](const Array& probs, const Array& onehot) {
        return ops::cross_entropy(to_tensor(probs), to_tensor(onehot)).item();
      },
      py::arg("probs"), py::arg("onehot"));

  // -- metrics ---------------------------------------------------------------
  m.def(
      "auc",
      [](const std::vector<double>& scores, const std::vector<int>& labels) {
        if (scores.size() != labels.size())
          throw ValidationError("scores and labels differ in length");
        std::vector<metrics::ScoredSample> samples(scores.size());
        for (size_t i = 0; i < scores.size(); ++i) {
          samples[i].score = scores[i];
          samples[i].label = labels[i] ? data::Label::lesion : data::Label::no_lesion;
        }
        return metrics::roc_curve(samples).auc;
      },
      py::arg("scores"), py::arg("labels"),
      "Area under the ROC curve of binary labels (ties get half credit).");

  // -- networks ----------------------------------------------------------------
  py::class_<PyNetwork>(m, "Network")
      .def_static(
          "build",
          [](const std::string& arch, double width_scale, int64_t image_size,
             uint64_t seed, const std::string& dtype) {
            nn::NetworkSpec spec{arch, width_scale, image_size, 3, 2,
                                 dtype_from_name(dtype)};
            return PyNetwork{arch::build_network(spec, seed)};
          },
          py::arg("arch"), py::arg("width_scale") = 1.0, py::arg("image_size") = 224,
          py::arg("seed") = 0, py::arg("dtype") = "f32")
      .def_static("load",
                  [](const std::string& path) {
                    return PyNetwork{arch::load_checkpoint(path)};
                  })
      .def("save",
           [](const PyNetwork& self, const std::string& path) {
             arch::save_checkpoint(self.net, path);
           })
      .def("forward", &PyNetwork::forward, py::arg("batch"),
           "Class probabilities for a [N,3,S,S] batch, as float64 [N,2].")
      .def("spec", &PyNetwork::spec)
      .def("provenance", [](const PyNetwork& self) { return self.net.provenance; })
      .def("weights_hash",
           [](const PyNetwork& self) { return hex64(self.net.weights_hash()); })
      .def("trainable_parameter_count",
           [](const PyNetwork& self) { return self.net.trainable_parameter_count(); })
      .def("total_parameter_count",
           [](const PyNetwork& self) { return self.net.total_parameter_count(); })
      .def(
          "freeze_all_but_last",
          [](PyNetwork& self, int64_t k) {
            nn::apply_freeze(self.net, {"all_but_last_k", k});
          },
          py::arg("k"))
      .def("layer_names", [](const PyNetwork& self) {
        std::vector<std::string> names;
        names.reserve(self.net.layers.size());
        for (const auto& l : self.net.layers) names.push_back(l.name);
        return names;
      });

  // -- heatmaps ---------------------------------------------------------------
  m.def(
      "gradcam",
      [](PyNetwork& net, const Array& image, int64_t class_index,
         const std::string& layer) {
        cam::Heatmap map = cam::gradcam(net.net, to_tensor(image), class_index, layer);
        py::dict d;
        d["values"] = to_array(map.values);
        d["layer"] = map.layer;
        d["class_index"] = map.class_index;
        d["degenerate"] = map.degenerate;
        return d;
      },
      py::arg("network"), py::arg("image"), py::arg("class_index"),
      py::arg("layer") = "");
  m.def(
      "overlay",
      [](const Array& image, const Array& heatmap, double opacity) {
        cam::Heatmap map;
        map.values = to_tensor(heatmap);
        return to_array(cam::overlay(to_tensor(image), map, opacity));
      },
      py::arg("image"), py::arg("heatmap"), py::arg("opacity") = 0.5);

  // -- data -------------------------------------------------------------------
  m.def(
      "generate_synthetic",
      [](const std::string& out_dir, int64_t per_cell, int64_t resolution,
         uint64_t seed) {
        data::SyntheticConfig cfg{data::Composition::uniform(per_cell), resolution, seed,
                                  out_dir};
        data::generate_synthetic(cfg);
        return out_dir + "/manifest.csv";
      },
      py::arg("out_dir"), py::arg("per_cell") = 10, py::arg("resolution") = 64,
      py::arg("seed") = 0,
      "Writes a labeled synthetic dataset and returns the manifest path.");
  m.def("load_image",
        [](const std::string& path) { return to_array(data::load_image(path)); });
  m.def(
      "save_image",
      [](const std::string& path, const Array& img) {
        data::save_image(path, to_tensor(img).to(Dtype::f32));
      },
      py::arg("path"), py::arg("image"));
}
