#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "pkgnet/config.hpp"
#include "pkgnet/data.hpp"
#include "pkgnet/error.hpp"
#include "pkgnet/eval.hpp"
#include "pkgnet/loss.hpp"
#include "pkgnet/model.hpp"
#include "pkgnet/pipeline.hpp"
#include "pkgnet/scoring.hpp"

namespace py = pybind11;
using namespace pkgnet;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;
using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

torch::Tensor to_tensor(const Array& a) {
  std::vector<int64_t> shape(a.shape(), a.shape() + a.ndim());
  return torch::from_blob(const_cast<double*>(a.data()), shape, torch::kFloat64).clone();
}

FloatArray to_numpy(const torch::Tensor& t) {
  const auto c = t.detach().to(torch::kFloat32).contiguous();
  FloatArray out(std::vector<py::ssize_t>(c.sizes().begin(), c.sizes().end()));
  std::memcpy(out.mutable_data(), c.data_ptr<float>(), sizeof(float) * c.numel());
  return out;
}

config::TrainConfig parse_config(const std::string& text) {
  auto cfg = config::from_json(nlohmann::json::parse(text));
  config::validate(cfg);
  return cfg;
}

std::vector<uint8_t> to_labels(const py::array_t<uint8_t, py::array::c_style | py::array::forcecast>& a) {
  return {a.data(), a.data() + a.size()};
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Native core of pkgnet.";

  const auto& error = py::register_exception<Error>(m, "PkgnetError", PyExc_RuntimeError);
  const auto& config_error = py::register_exception<ConfigError>(m, "ConfigError", error.ptr());
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const nlohmann::json::exception& e) {
      py::set_error(py::module_::import("pkgnet._core").attr("ConfigError"), e.what());
    }
  });
  (void)config_error;

  m.def("auroc", [](const Array& scores, const py::array_t<uint8_t, py::array::c_style | py::array::forcecast>& labels) {
    const auto l = to_labels(labels);
    return eval::auroc(std::span<const double>(scores.data(), scores.size()), l);
  }, py::arg("scores"), py::arg("labels"));

  m.def("smooth_series", [](const Array& raw, int64_t window) {
    return scoring::smooth_series(std::span<const double>(raw.data(), raw.size()), window);
  }, py::arg("raw"), py::arg("window"));

  m.def("aggregate_frame", [](const Array& scores, const std::string& policy) {
    return scoring::aggregate_frame(std::span<const double>(scores.data(), scores.size()),
                                    scoring::parse_policy(policy));
  }, py::arg("object_scores"), py::arg("policy") = "max");

  m.def("combined_score",
        [](double s_e, const std::map<int, double>& s_c, double mu_e, double sigma_e,
           const std::map<int, double>& mu_c, const std::map<int, double>& sigma_c, double w_e,
           const std::map<int, double>& w_c) {
          scoring::ScoreStats stats;
          stats.mu_e = mu_e;
          stats.sigma_e = sigma_e;
          stats.mu_c = mu_c;
          stats.sigma_c = sigma_c;
          return scoring::combined_score({s_e, s_c, "", 0}, stats, {w_e, w_c});
        },
        py::arg("s_e"), py::arg("s_c"), py::arg("mu_e"), py::arg("sigma_e"), py::arg("mu_c"), py::arg("sigma_c"),
        py::arg("w_e"), py::arg("w_c"));

  m.def("prediction_loss", [](const Array& pred, const Array& target) {
    return loss::prediction_loss(to_tensor(pred), to_tensor(target)).item<double>();
  }, py::arg("pred"), py::arg("target"));

  m.def("gradient_loss", [](const Array& pred, const Array& target, int alpha) {
    return loss::gradient_loss(to_tensor(pred), to_tensor(target), alpha).item<double>();
  }, py::arg("pred"), py::arg("target"), py::arg("alpha") = 1);

  m.def("feature_inconsistency_loss", [](const std::vector<std::pair<Array, Array>>& taps) {
    std::vector<std::pair<torch::Tensor, torch::Tensor>> t;
    for (const auto& [s, te] : taps) t.emplace_back(to_tensor(s), to_tensor(te));
    return loss::feature_inconsistency_loss(t).item<double>();
  }, py::arg("taps"));

  m.def("default_config", [] { return config::to_json(config::TrainConfig{}).dump(); },
        "Default configuration as a JSON string.");
  m.def("load_config", [](const std::filesystem::path& path) { return config::to_json(config::load_config(path)).dump(); },
        py::arg("path"), "Validated configuration file as a JSON string.");
  m.def("validate_config", [](const std::string& text) { return config::to_json(parse_config(text)).dump(); },
        py::arg("config_json"));

  m.def("synth_data", [](const std::string& text, const std::filesystem::path& out) {
    const auto cfg = parse_config(text).data.synthetic;
    py::gil_scoped_release release;
    data::write_dataset(data::generate_synthetic_dataset(cfg, cfg.seed), out);
  }, py::arg("config_json"), py::arg("out_dir"));

  m.def("teacher_taps", [](const std::string& backbone, const std::string& weights, const std::vector<int>& blocks,
                           const FloatArray& images) {
    model::TeacherSpec spec{model::parse_backbone(backbone), weights, blocks};
    const auto teacher = model::build_teacher(spec);
    std::vector<int64_t> shape(images.shape(), images.shape() + images.ndim());
    const auto x = torch::from_blob(const_cast<float*>(images.data()), shape, torch::kFloat32).clone();
    std::map<int, FloatArray> out;
    for (const auto& [block, f] : teacher.tap(x)) out.emplace(block, to_numpy(f));
    return out;
  }, py::arg("backbone"), py::arg("weights"), py::arg("blocks"), py::arg("images"),
     "Teacher features for (N, C, H, W) images in [0, 1].");

  m.def("train", [](const std::string& text, const std::filesystem::path& run_dir) {
    const auto cfg = parse_config(text);
    py::gil_scoped_release release;
    return run_dir / pipeline::train(cfg, run_dir).final_checkpoint;
  }, py::arg("config_json"), py::arg("run_dir"), "Trains a run; returns the final checkpoint path.");

  m.def("calibrate", [](const std::filesystem::path& run_dir) {
    pipeline::CalibrationArtifact artifact;
    {
      py::gil_scoped_release release;
      artifact = pipeline::calibrate_run(run_dir);
    }
    return py::make_tuple(scoring::to_json(artifact.stats).dump(), artifact.warnings);
  }, py::arg("run_dir"), "Returns (stats JSON, warnings).");

  m.def("score", [](const std::filesystem::path& run_dir) {
    py::gil_scoped_release release;
    pipeline::score_run(run_dir);
  }, py::arg("run_dir"));

  m.def("evaluate", [](const std::filesystem::path& run_dir, bool smoothing) {
    py::gil_scoped_release release;
    const auto report = pipeline::evaluate_run(run_dir, {smoothing});
    return std::make_tuple(report.auroc_micro, report.per_video_auroc);
  }, py::arg("run_dir"), py::arg("smoothing") = true, "Returns (micro AUROC, per-video AUROC).");
}
