// Python bindings. Tensors cross the boundary as float32 numpy copies.
#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <algorithm>
#include <cstring>

#include "mtgaze/cost.hpp"
#include "mtgaze/errors.hpp"
#include "mtgaze/gaze_math.hpp"
#include "mtgaze/gradcheck.hpp"
#include "mtgaze/model.hpp"
#include "mtgaze/train.hpp"

namespace py = pybind11;
using namespace mtgaze;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;
using LabelArray = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const FloatArray& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  std::vector<float> v(a.data(), a.data() + a.size());
  return Tensor(std::move(shape), std::move(v));
}

py::array_t<float> to_array(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<float> out(shape);
  std::copy(t.values().begin(), t.values().end(), out.mutable_data());
  return out;
}

py::array_t<float> images_array(const std::vector<GazeSample>& data) {
  const auto& s = data.front().image.shape();
  py::array_t<float> out({static_cast<py::ssize_t>(data.size()), static_cast<py::ssize_t>(s[0]),
                          static_cast<py::ssize_t>(s[1]), static_cast<py::ssize_t>(s[2])});
  float* dst = out.mutable_data();
  for (const auto& d : data) dst = std::copy(d.image.values().begin(), d.image.values().end(), dst);
  return out;
}

py::array_t<double> labels_array(const std::vector<GazeSample>& data) {
  py::array_t<double> out({static_cast<py::ssize_t>(data.size()), py::ssize_t{2}});
  auto r = out.mutable_unchecked<2>();
  for (std::size_t i = 0; i < data.size(); ++i) {
    r(static_cast<py::ssize_t>(i), 0) = data[i].label.yaw;
    r(static_cast<py::ssize_t>(i), 1) = data[i].label.pitch;
  }
  return out;
}

// images [N, 3, H, W], labels [N, 2] (yaw, pitch in radians)
std::vector<GazeSample> to_samples(const FloatArray& images,
                                   const LabelArray& labels) {
  if (images.ndim() != 4) throw ShapeError("images must be [N, 3, H, W]");
  if (labels.ndim() != 2 || labels.shape(1) != 2 || labels.shape(0) != images.shape(0))
    throw ShapeError("labels must be [N, 2] with N matching images");
  const Shape one{images.shape(1), images.shape(2), images.shape(3)};
  const auto per = static_cast<std::size_t>(images.shape(1) * images.shape(2) * images.shape(3));
  std::vector<GazeSample> out;
  out.reserve(static_cast<std::size_t>(images.shape(0)));
  auto l = labels.unchecked<2>();
  for (py::ssize_t n = 0; n < images.shape(0); ++n) {
    const float* p = images.data() + static_cast<std::size_t>(n) * per;
    out.push_back({Tensor(one, std::vector<float>(p, p + per)), GazeAngles{l(n, 0), l(n, 1)}});
  }
  return out;
}

py::dict metrics_dict(const EpochMetrics& m) {
  py::dict d;
  d["epoch"] = m.epoch;
  d["l_total"] = m.l_total;
  d["l_yaw"] = m.l_yaw;
  d["l_pitch"] = m.l_pitch;
  d["l_joint"] = m.l_joint;
  d["ang_err_deg"] = m.ang_err_deg;
  d["dropout"] = m.dropout;
  d["learning_rate"] = m.learning_rate;
  return d;
}

std::string ablation_text(const ModelConfig& c) {
  std::string s;
  for (auto a : c.ablate) s += (s.empty() ? "" : ",") + to_string(a);
  return s;
}

}  // namespace

PYBIND11_MODULE(_mtgaze, m) {
  m.doc() = "Lightweight multitask gaze CNN: model, costs, receptive fields, training";

  auto validation = py::register_exception<ValidationError>(m, "ValidationError", PyExc_ValueError);
  py::register_exception<ShapeError>(m, "ShapeError", validation.ptr());
  py::register_exception<FormatError>(m, "FormatError", validation.ptr());
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);

  py::class_<ModelConfig>(m, "ModelConfig")
      .def(py::init<>())
      .def_static("default", &ModelConfig::multitask_gaze)
      .def_static("reduced", &ModelConfig::reduced)
      .def_static("from_json", &ModelConfig::from_text, py::arg("text"))
      .def_static("load", [](const std::filesystem::path& p) { return ModelConfig::load_file(p); })
      .def("to_json", &ModelConfig::to_text)
      .def("validate", &ModelConfig::validate)
      .def_readwrite("input_hw", &ModelConfig::input_hw)
      .def_readwrite("sca_after", &ModelConfig::sca_after)
      .def_readwrite("sca_window", &ModelConfig::sca_window)
      .def_readwrite("feature_width", &ModelConfig::feature_width)
      .def_readwrite("gcm_norm_act", &ModelConfig::gcm_norm_act)
      .def_readwrite("mrm_hidden", &ModelConfig::mrm_hidden)
      .def_property(
          "ablate", &ablation_text, [](ModelConfig& c, const std::string& s) { c.ablate = parse_ablations(s); },
          "comma list drawn from sca, gcm, mrm")
      .def_property_readonly("num_bnecks", [](const ModelConfig& c) { return c.bnecks.size(); })
      .def("__eq__", [](const ModelConfig& a, const ModelConfig& b) { return a == b; })
      .def("__repr__", [](const ModelConfig& c) { return "ModelConfig(" + c.to_text() + ")"; });

  py::class_<Model>(m, "Model")
      .def_static("build", &Model::build, py::arg("config"), py::arg("seed") = 0)
      .def_static("load", [](const std::filesystem::path& p) { return Model::load(p); })
      .def("save", [](Model& self, const std::filesystem::path& p) { self.save(p); })
      .def_property_readonly("config", &Model::config)
      .def("parameter_count", &Model::parameter_count)
      .def(
          "forward",
          [](Model& self, const FloatArray& images) {
            const ModelOutput o = self.forward(to_tensor(images), ForwardContext{});
            py::dict d;
            d["fused"] = to_array(o.fused);
            d["yaw"] = to_array(o.yaw);
            d["pitch"] = to_array(o.pitch);
            d["joint"] = to_array(o.joint);
            return d;
          },
          py::arg("images"), "Inference-mode forward pass on [N, 3, H, W] float32 images")
      .def("state_dict", [](Model& self) {
        py::dict d;
        for (auto& p : self.named_tensors()) d[py::str(p.name)] = to_array(*p.tensor);
        return d;
      });

  m.def("count_model", [](const ModelConfig& c) {
    const CostReport r = count_model(c);
    py::list rows;
    for (const auto& row : r.rows) rows.append(py::make_tuple(row.name, row.params, row.macs));
    return py::make_tuple(rows, r.total_params(), r.total_macs());
  }, py::arg("config"), "Per-layer (name, params, macs) rows plus totals");

  m.def(
      "count_conv",
      [](std::int64_t k_h, std::int64_t k_w, std::int64_t c_in, std::int64_t c_out, std::int64_t h_out,
         std::int64_t w_out, std::int64_t groups, bool bias) {
        ConvSpec s{k_h, k_w, c_in, c_out, 1, 1, 0, 0, groups};
        const LayerCost c = count_conv(s, h_out, w_out, bias);
        return py::make_tuple(c.params, c.macs);
      },
      py::arg("k_h"), py::arg("k_w"), py::arg("c_in"), py::arg("c_out"), py::arg("h_out"), py::arg("w_out"),
      py::arg("groups") = 1, py::arg("bias") = false, "(params, macs) of one convolution");

  m.def(
      "compare_factorized",
      [](std::int64_t k, std::int64_t channels, std::int64_t extent) {
        const FactorizationCost f = compare_factorized(ConvSpec::standard(k, k, channels, channels), extent, extent);
        py::dict d;
        d["standard"] = py::make_tuple(f.standard.params, f.standard.macs);
        d["factorized"] = py::make_tuple(f.factorized.params, f.factorized.macs);
        d["param_reduction"] = f.param_reduction;
        d["mac_reduction"] = f.mac_reduction;
        return d;
      },
      py::arg("k"), py::arg("channels"), py::arg("extent"));

  m.def("receptive_field", [](const std::string& stack) -> py::tuple {
    const auto rows = theoretical_rf(make_stack(stack).rf_layers());
    if (rows.empty()) return py::make_tuple(std::int64_t{1}, std::int64_t{1});
    return py::make_tuple(rows.back().rf_h, rows.back().rf_w);
  }, py::arg("stack"), "Theoretical (h, w) receptive field of a stack such as \"5x5\" or \"1x5,5x1\"");

  m.def(
      "effective_rf",
      [](const std::string& token, std::int64_t extent, std::int64_t channels, int draws, std::uint64_t seed) {
        const ConvStack stack = make_stack(token, channels);
        const Heatmap h = effective_rf(stack, random_stack_weights(stack, seed), extent, draws, seed);
        py::array_t<float> out({static_cast<py::ssize_t>(h.height), static_cast<py::ssize_t>(h.width)});
        std::copy(h.values.begin(), h.values.end(), out.mutable_data());
        return out;
      },
      py::arg("stack"), py::arg("extent"), py::arg("channels") = 4, py::arg("draws") = 32, py::arg("seed") = 2024,
      "Gradient heatmap normalized to a peak of 1");

  m.def(
      "angles_to_vector",
      [](double yaw, double pitch) {
        const GazeVector g = angles_to_vector({yaw, pitch});
        return py::make_tuple(g.x, g.y, g.z);
      },
      py::arg("yaw"), py::arg("pitch"));
  m.def(
      "angular_error",
      [](double yaw, double pitch, double yaw_hat, double pitch_hat) {
        return angular_error(GazeAngles{yaw, pitch}, GazeAngles{yaw_hat, pitch_hat});
      },
      py::arg("yaw"), py::arg("pitch"), py::arg("yaw_hat"), py::arg("pitch_hat"), "Degrees between two gazes");
  m.def(
      "multitask_loss",
      [](const FloatArray& fused, const FloatArray& yaw, const FloatArray& pitch, const FloatArray& joint,
         const FloatArray& target) {
        const LossTerms l = multitask_loss(to_tensor(fused), to_tensor(yaw), to_tensor(pitch), to_tensor(joint),
                                           to_tensor(target));
        py::dict d;
        d["total"] = l.total[0];
        d["yaw"] = l.yaw[0];
        d["pitch"] = l.pitch[0];
        d["joint"] = l.joint[0];
        return d;
      },
      py::arg("fused"), py::arg("yaw"), py::arg("pitch"), py::arg("joint"), py::arg("target"));
  m.def("zero_predictor_error", [](double range) { return zero_predictor_error(range); }, py::arg("range") = 0.6);

  m.def(
      "generate",
      [](std::int64_t n, std::uint64_t seed, std::int64_t image_size, double label_range, double noise) {
        const auto data = generate(n, seed, GeneratorConfig{image_size, label_range, noise});
        return py::make_tuple(images_array(data), labels_array(data));
      },
      py::arg("n"), py::arg("seed") = 0, py::arg("image_size") = 64, py::arg("label_range") = 0.6,
      py::arg("noise") = 0.02, "Synthetic eye images [N, 3, H, W] and labels [N, 2]");

  m.def(
      "train",
      [](Model& model, const FloatArray& images, const LabelArray& labels, int epochs, std::int64_t holdout,
         std::int64_t batch_size, float lr, std::uint64_t seed, const std::function<void(py::dict)>& on_epoch) {
        auto data = to_samples(images, labels);
        TrainConfig tc;
        tc.epochs = epochs;
        tc.batch_size = batch_size;
        tc.learning_rate = lr;
        tc.seed = seed;
        tc.samples = static_cast<std::int64_t>(data.size());
        tc.holdout = holdout;
        tc.data.image_size = model.config().input_hw;
        tc.validate();
        std::vector<GazeSample> held(data.end() - holdout, data.end());
        data.resize(data.size() - static_cast<std::size_t>(holdout));
        EpochCallback cb;
        if (on_epoch) cb = [&](const EpochMetrics& e) { on_epoch(metrics_dict(e)); };
        py::list out;
        for (const auto& e : train(model, tc, data, held, cb)) out.append(metrics_dict(e));
        return out;
      },
      py::arg("model"), py::arg("images"), py::arg("labels"), py::arg("epochs") = 15, py::arg("holdout") = 400,
      py::arg("batch_size") = 32, py::arg("lr") = 0.01f, py::arg("seed") = 0, py::arg("on_epoch") = nullptr,
      "Trains in place; the last `holdout` samples are scored each epoch. Returns one dict per epoch, 0 first");

  m.def(
      "evaluate",
      [](Model& model, const FloatArray& images, const LabelArray& labels) {
        const EvalResult r = evaluate(model, to_samples(images, labels));
        py::array_t<double> pred({static_cast<py::ssize_t>(r.rows.size()), py::ssize_t{2}});
        py::array_t<double> err(static_cast<py::ssize_t>(r.rows.size()));
        auto p = pred.mutable_unchecked<2>();
        auto e = err.mutable_unchecked<1>();
        for (std::size_t i = 0; i < r.rows.size(); ++i) {
          const auto k = static_cast<py::ssize_t>(i);
          p(k, 0) = r.rows[i].pred.yaw;
          p(k, 1) = r.rows[i].pred.pitch;
          e(k) = r.rows[i].ang_err_deg;
        }
        py::dict d;
        d["mean_ang_err_deg"] = r.mean_ang_err_deg;
        d["predictions"] = pred;
        d["errors_deg"] = err;
        return d;
      },
      py::arg("model"), py::arg("images"), py::arg("labels"));

  m.def(
      "gradcheck",
      [](std::uint64_t seed) {
        py::list out;
        for (const auto& r : run_gradcheck(seed)) out.append(py::make_tuple(r.name, r.worst_rel_error));
        return out;
      },
      py::arg("seed") = 0, "(block, worst relative error) for every differentiable block");
}
