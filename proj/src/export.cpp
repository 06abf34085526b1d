#include "klora/export.hpp"

#include <array>
#include <sstream>

#include "klora/error.hpp"

namespace klora {

std::vector<TensorBlob> merged_step_tensors(const LoraModel& content, const LoraModel& style,
                                            const SelectionSchedule& schedule, std::size_t step) {
    if (step >= schedule.grid.steps()) {
        throw Error(ErrorKind::Argument, "step " + std::to_string(step) + " outside the schedule's " +
                                             std::to_string(schedule.grid.steps()) + " steps");
    }
    std::vector<TensorBlob> blobs;
    for (std::size_t l = 0; l < schedule.layer_order.size(); ++l) {
        const std::string& name = schedule.layer_order[l];
        const Source src = schedule.grid.at(l, step);
        if (src == Source::Off) continue;
        const LoraModel& from = src == Source::Content ? content : style;
        const LoraLayer* layer = from.find(name);
        if (!layer) {
            throw Error(ErrorKind::Pairing, "layer '" + name + "' selected from the " +
                                                (src == Source::Content ? "content" : "style") +
                                                " model, which does not contain it");
        }
        auto lb = layer_blobs(*layer, content.convention());
        std::move(lb.begin(), lb.end(), std::back_inserter(blobs));
    }
    return blobs;
}

void export_merged_lora(const LoraModel& content, const LoraModel& style, const SelectionSchedule& schedule,
                        std::size_t step, const std::filesystem::path& path) {
    const auto blobs = merged_step_tensors(content, style, schedule, step);
    Metadata meta{{"klora.step", std::to_string(step)},
                  {"klora.total_steps", std::to_string(schedule.grid.steps())}};
    write_file_atomic(path, write_container(blobs, meta));
}

std::vector<std::size_t> boundary_steps(const SelectionSchedule& schedule) {
    std::vector<std::size_t> out;
    const auto& g = schedule.grid;
    for (std::size_t t = 0; t < g.steps(); ++t) {
        bool differs = t == 0;
        for (std::size_t l = 0; l < g.layers() && !differs; ++l) {
            differs = g.at(l, t) != g.at(l, t - 1);
        }
        if (differs) out.push_back(t);
    }
    return out;
}

HeatmapFormat parse_heatmap_format(const std::string& text) {
    if (text == "svg") return HeatmapFormat::Svg;
    if (text == "ppm") return HeatmapFormat::Ppm;
    throw Error(ErrorKind::Argument, "unknown heatmap format '" + text + "' (expected svg or ppm)");
}

namespace {

const char* cell_color(Source s) {
    switch (s) {
    case Source::Content: return kContentColor;
    case Source::Style: return kStyleColor;
    case Source::Off: return kOffColor;
    }
    return kOffColor;
}

std::array<unsigned char, 3> cell_rgb(Source s) {
    switch (s) {
    case Source::Content: return {0x3B, 0x6F, 0xB5};
    case Source::Style: return {0x4C, 0xAF, 0x50};
    case Source::Off: return {0xD0, 0xD0, 0xD0};
    }
    return {0, 0, 0};
}

void check_cell(std::size_t cell) {
    if (cell == 0) throw Error(ErrorKind::Argument, "heatmap cell size must be positive");
}

}  // namespace

std::string render_svg(const SelectionSchedule& schedule, std::size_t cell) {
    check_cell(cell);
    const auto& g = schedule.grid;
    const std::size_t width = g.layers() * cell;
    const std::size_t height = g.steps() * cell;
    std::ostringstream svg;
    svg << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
        << "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"" << width << "\" height=\"" << height
        << "\" viewBox=\"0 0 " << width << " " << height << "\" shape-rendering=\"crispEdges\">\n"
        << "<title>LoRA selection: " << g.steps() << " steps x " << g.layers() << " layers</title>\n";
    for (std::size_t t = 0; t < g.steps(); ++t) {
        for (std::size_t l = 0; l < g.layers(); ++l) {
            svg << "<rect x=\"" << l * cell << "\" y=\"" << t * cell << "\" width=\"" << cell << "\" height=\""
                << cell << "\" fill=\"" << cell_color(g.at(l, t)) << "\"/>\n";
        }
    }
    svg << "</svg>\n";
    return svg.str();
}

std::vector<std::byte> render_ppm(const SelectionSchedule& schedule, std::size_t cell) {
    check_cell(cell);
    const auto& g = schedule.grid;
    const std::size_t width = g.layers() * cell;
    const std::size_t height = g.steps() * cell;
    const std::string header = "P6\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
    std::vector<std::byte> out;
    out.reserve(header.size() + width * height * 3);
    for (char c : header) out.push_back(static_cast<std::byte>(c));
    for (std::size_t y = 0; y < height; ++y) {
        for (std::size_t x = 0; x < width; ++x) {
            for (unsigned char channel : cell_rgb(g.at(x / cell, y / cell))) {
                out.push_back(static_cast<std::byte>(channel));
            }
        }
    }
    return out;
}

void render_heatmap(const SelectionSchedule& schedule, const std::filesystem::path& path, HeatmapFormat format,
                    std::size_t cell) {
    if (format == HeatmapFormat::Svg) {
        write_file_atomic(path, render_svg(schedule, cell));
    } else {
        write_file_atomic(path, render_ppm(schedule, cell));
    }
}

}  // namespace klora
