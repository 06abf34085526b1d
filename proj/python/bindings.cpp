#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "klora/cli.hpp"
#include "klora/engine.hpp"
#include "klora/error.hpp"
#include "klora/export.hpp"
#include "klora/manifest.hpp"
#include "klora/safetensors.hpp"
#include "klora/tensor.hpp"

namespace py = pybind11;

namespace {

klora::DenseMatrix to_matrix(const std::vector<std::vector<float>>& rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.front().size() : 0;
    std::vector<float> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
        if (row.size() != c) throw klora::Error(klora::ErrorKind::Shape, "ragged matrix");
        data.insert(data.end(), row.begin(), row.end());
    }
    return klora::DenseMatrix(r, c, std::move(data));
}

std::vector<std::vector<float>> to_rows(const klora::DenseMatrix& m) {
    std::vector<std::vector<float>> rows(m.rows());
    for (std::size_t r = 0; r < m.rows(); ++r) rows[r].assign(m.row(r).begin(), m.row(r).end());
    return rows;
}

std::vector<std::string> grid_rows(const klora::SelectionSchedule& s) {
    std::vector<std::string> out;
    for (std::size_t l = 0; l < s.grid.layers(); ++l) {
        std::string row;
        for (auto src : s.grid.row(l)) row.push_back(klora::source_symbol(src));
        out.push_back(std::move(row));
    }
    return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Top-K LoRA selection engine";

    py::register_exception<klora::Error>(m, "KLoraError");

    py::enum_<klora::ScaleMode>(m, "ScaleMode")
        .value("Linear", klora::ScaleMode::Linear)
        .value("Modular", klora::ScaleMode::Modular)
        .value("None_", klora::ScaleMode::None);

    py::enum_<klora::Source>(m, "Source")
        .value("Content", klora::Source::Content)
        .value("Style", klora::Source::Style)
        .value("Off", klora::Source::Off);

    py::class_<klora::ScheduleParams>(m, "ScheduleParams")
        .def(py::init<>())
        .def_readwrite("total_steps", &klora::ScheduleParams::total_steps)
        .def_readwrite("alpha", &klora::ScheduleParams::alpha)
        .def_readwrite("beta", &klora::ScheduleParams::beta)
        .def_readwrite("scale_mode", &klora::ScheduleParams::scale_mode)
        .def_readwrite("alpha_prime", &klora::ScheduleParams::alpha_prime)
        .def_readwrite("beta_prime", &klora::ScheduleParams::beta_prime)
        .def_readwrite("k_override", &klora::ScheduleParams::k_override)
        .def_readwrite("apply_lora_alpha", &klora::ScheduleParams::apply_lora_alpha);

    py::class_<klora::LayerImportance>(m, "LayerImportance")
        .def_readonly("base_module", &klora::LayerImportance::base_module)
        .def_readonly("s_content", &klora::LayerImportance::s_content)
        .def_readonly("s_style", &klora::LayerImportance::s_style)
        .def_readonly("k_used", &klora::LayerImportance::k_used)
        .def_readonly("rank_content", &klora::LayerImportance::rank_content)
        .def_readonly("rank_style", &klora::LayerImportance::rank_style);

    py::class_<klora::GammaFactor>(m, "GammaFactor")
        .def_readonly("value", &klora::GammaFactor::value)
        .def_readonly("content_total", &klora::GammaFactor::content_total)
        .def_readonly("style_total", &klora::GammaFactor::style_total);

    py::class_<klora::LoraModel>(m, "LoraModel")
        .def_property_readonly("layer_names",
                               [](const klora::LoraModel& model) {
                                   std::vector<std::string> names;
                                   for (const auto& l : model.layers()) names.push_back(l.base_module);
                                   return names;
                               })
        .def_property_readonly("ranks",
                               [](const klora::LoraModel& model) {
                                   std::vector<std::size_t> ranks;
                                   for (const auto& l : model.layers()) ranks.push_back(l.rank);
                                   return ranks;
                               })
        .def_readonly("source_path", &klora::LoraModel::source_path)
        .def_readonly("sha256", &klora::LoraModel::sha256)
        .def_readonly("warnings", &klora::LoraModel::warnings)
        .def("__len__", &klora::LoraModel::size);

    py::class_<klora::SelectionSchedule>(m, "SelectionSchedule")
        .def_readonly("layer_order", &klora::SelectionSchedule::layer_order)
        .def_readonly("params", &klora::SelectionSchedule::params)
        .def_readonly("gamma", &klora::SelectionSchedule::gamma)
        .def_readonly("importances", &klora::SelectionSchedule::importances)
        .def_property_readonly("grid", &grid_rows, "One string per layer; C/S/N per step")
        .def("to_json", &klora::manifest_to_string);

    m.def("parse_file", &klora::parse_file, py::arg("path"));
    m.def("build_schedule",
          [](const klora::LoraModel& c, const klora::LoraModel& s, const klora::ScheduleParams& p) {
              return klora::build_schedule(c, s, p);
          },
          py::arg("content"), py::arg("style"), py::arg("params") = klora::ScheduleParams{});
    m.def("compute_gamma",
          [](const klora::LoraModel& c, const klora::LoraModel& s, bool apply_lora_alpha) {
              return klora::compute_gamma(c, s, klora::matched_layers(c, s), apply_lora_alpha);
          },
          py::arg("content"), py::arg("style"), py::arg("apply_lora_alpha") = true);
    m.def("scale_at", &klora::scale_at, py::arg("step_index"), py::arg("params"));
    m.def("topk_abs_sum",
          [](const std::vector<std::vector<float>>& rows, std::size_t k) {
              return klora::topk_abs_sum(to_matrix(rows), k);
          },
          py::arg("matrix"), py::arg("k"));
    m.def("abs_sum", [](const std::vector<std::vector<float>>& rows) { return klora::abs_sum(to_matrix(rows)); });
    m.def("matmul",
          [](const std::vector<std::vector<float>>& b, const std::vector<std::vector<float>>& a) {
              return to_rows(klora::matmul(to_matrix(b), to_matrix(a)));
          });
    m.def("write_manifest", &klora::write_manifest, py::arg("schedule"), py::arg("path"));
    m.def("read_manifest", &klora::read_manifest, py::arg("path"));
    m.def("export_merged_lora", &klora::export_merged_lora, py::arg("content"), py::arg("style"),
          py::arg("schedule"), py::arg("step"), py::arg("path"));
    m.def("render_heatmap",
          [](const klora::SelectionSchedule& s, const std::filesystem::path& path, const std::string& format,
             std::size_t cell) { klora::render_heatmap(s, path, klora::parse_heatmap_format(format), cell); },
          py::arg("schedule"), py::arg("path"), py::arg("format") = "svg", py::arg("cell") = 4);
    m.def("run_cli",
          [](const std::vector<std::string>& args) {
              std::ostringstream out;
              std::ostringstream err;
              std::vector<std::string> argv{"klora"};
              argv.insert(argv.end(), args.begin(), args.end());
              const int code = klora::cli::run(argv, out, err);
              return py::make_tuple(code, out.str(), err.str());
          },
          py::arg("args"), "Run the command line in-process; returns (exit_code, stdout, stderr).");
}
