#include "klora/safetensors.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <system_error>

#include <unistd.h>

#include "json.hpp"
#include "klora/digest.hpp"
#include "klora/error.hpp"

namespace klora {

namespace {

using ordered_json = nlohmann::ordered_json;

constexpr std::uint64_t kMaxHeaderBytes = 100ull * 1024 * 1024;

std::optional<std::size_t> tag_width(std::string_view tag) {
    static const std::map<std::string, std::size_t, std::less<>> widths = {
        {"F64", 8}, {"F32", 4}, {"F16", 2}, {"BF16", 2}, {"I64", 8}, {"I32", 4},
        {"I16", 2}, {"I8", 1},  {"U64", 8}, {"U32", 4},  {"U16", 2}, {"U8", 1},
        {"BOOL", 1}, {"F8_E4M3", 1}, {"F8_E5M2", 1},
    };
    if (auto it = widths.find(tag); it != widths.end()) return it->second;
    return std::nullopt;
}

std::optional<DType> tag_dtype(std::string_view tag) {
    if (tag == "F32") return DType::F32;
    if (tag == "F16") return DType::F16;
    if (tag == "BF16") return DType::BF16;
    return std::nullopt;
}

std::uint64_t load_u64(std::span<const std::byte> b) {
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) {
        v = (v << 8) | std::to_integer<std::uint64_t>(b[static_cast<std::size_t>(i)]);
    }
    return v;
}

[[noreturn]] void format_error(const std::string& what) {
    throw Error(ErrorKind::Format, "safetensors: " + what);
}

TensorRecord parse_record(const std::string& name, const ordered_json& entry) {
    if (!entry.is_object()) format_error("entry for '" + name + "' is not an object");
    TensorRecord rec;
    rec.name = name;
    const auto dt = entry.find("dtype");
    const auto sh = entry.find("shape");
    const auto off = entry.find("data_offsets");
    if (dt == entry.end() || !dt->is_string() || sh == entry.end() || !sh->is_array() || off == entry.end() ||
        !off->is_array() || off->size() != 2) {
        format_error("tensor '" + name + "' lacks dtype/shape/data_offsets");
    }
    rec.dtype_tag = dt->get<std::string>();
    const auto width = tag_width(rec.dtype_tag);
    if (!width) format_error("tensor '" + name + "' has unknown dtype " + rec.dtype_tag);
    rec.dtype = tag_dtype(rec.dtype_tag);
    for (const auto& d : *sh) {
        if (!d.is_number_integer() || d.get<std::int64_t>() < 0) {
            format_error("tensor '" + name + "' has an invalid shape");
        }
        rec.shape.push_back(d.get<std::int64_t>());
    }
    for (const auto& o : *off) {
        if (!o.is_number_unsigned() && !(o.is_number_integer() && o.get<std::int64_t>() >= 0)) {
            format_error("tensor '" + name + "' has invalid data_offsets");
        }
    }
    rec.begin = (*off)[0].get<std::uint64_t>();
    rec.end = (*off)[1].get<std::uint64_t>();
    if (rec.end < rec.begin || rec.end - rec.begin != rec.element_count() * *width) {
        format_error("tensor '" + name + "' byte range does not match dtype and shape");
    }
    return rec;
}

std::int64_t product(const std::vector<std::int64_t>& dims, std::size_t from = 0) {
    std::int64_t p = 1;
    for (std::size_t i = from; i < dims.size(); ++i) p *= dims[i];
    return p;
}

std::string shape_text(const std::vector<std::int64_t>& dims) {
    std::string s = "[";
    for (std::size_t i = 0; i < dims.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(dims[i]);
    }
    return s + "]";
}

}  // namespace

std::uint64_t TensorRecord::element_count() const noexcept {
    std::uint64_t n = 1;
    for (auto d : shape) n *= static_cast<std::uint64_t>(d);
    return n;
}

std::span<const std::byte> Container::payload(const TensorRecord& record) const {
    return std::span<const std::byte>(data).subspan(record.begin, record.end - record.begin);
}

Container read_container(std::span<const std::byte> bytes) {
    if (bytes.size() < 8) format_error("file shorter than the 8-byte header length");
    const std::uint64_t header_len = load_u64(bytes.first(8));
    if (header_len > kMaxHeaderBytes) format_error("header length " + std::to_string(header_len) + " is implausible");
    if (bytes.size() - 8 < header_len) format_error("truncated header");
    const auto header_bytes = bytes.subspan(8, header_len);
    const std::string header(reinterpret_cast<const char*>(header_bytes.data()), header_bytes.size());

    std::set<std::string> seen;
    std::string duplicate;
    const ordered_json::parser_callback_t dedupe = [&](int depth, ordered_json::parse_event_t event,
                                                       ordered_json& parsed) {
        if (event == ordered_json::parse_event_t::key && depth == 1) {
            auto key = parsed.get<std::string>();
            if (!seen.insert(key).second && duplicate.empty()) duplicate = key;
        }
        return true;
    };
    ordered_json doc;
    try {
        doc = ordered_json::parse(header, dedupe);
    } catch (const nlohmann::json::exception& e) {
        format_error(std::string("malformed header JSON: ") + e.what());
    }
    if (!duplicate.empty()) {
        throw Error(ErrorKind::Pairing, "ambiguous tensor: '" + duplicate + "' appears twice in the header");
    }
    if (!doc.is_object()) format_error("header is not a JSON object");

    Container out;
    for (const auto& [key, value] : doc.items()) {
        if (key == "__metadata__") {
            if (!value.is_object()) format_error("__metadata__ is not an object");
            for (const auto& [mk, mv] : value.items()) {
                if (!mv.is_string()) format_error("metadata value for '" + mk + "' is not a string");
                out.metadata[mk] = mv.get<std::string>();
            }
            continue;
        }
        out.records.push_back(parse_record(key, value));
    }

    const auto data = bytes.subspan(8 + header_len);
    std::vector<const TensorRecord*> by_offset;
    for (const auto& r : out.records) by_offset.push_back(&r);
    std::sort(by_offset.begin(), by_offset.end(),
              [](const TensorRecord* a, const TensorRecord* b) { return a->begin < b->begin; });
    std::uint64_t cursor = 0;
    for (const auto* r : by_offset) {
        if (r->end > data.size()) format_error("truncated data region: tensor '" + r->name + "' ends past EOF");
        if (r->begin < cursor && r->end > r->begin) format_error("tensor '" + r->name + "' overlaps another tensor");
        cursor = std::max(cursor, r->end);
    }
    out.data.assign(data.begin(), data.end());
    return out;
}

std::vector<std::byte> write_container(std::span<const TensorBlob> tensors, const Metadata& metadata) {
    ordered_json header = ordered_json::object();
    if (!metadata.empty()) {
        ordered_json meta = ordered_json::object();
        for (const auto& [k, v] : metadata) meta[k] = v;
        header["__metadata__"] = std::move(meta);
    }
    std::uint64_t offset = 0;
    for (const auto& t : tensors) {
        if (header.contains(t.name)) {
            throw Error(ErrorKind::Argument, "duplicate tensor name '" + t.name + "'");
        }
        const auto expected = static_cast<std::uint64_t>(product(t.shape)) * dtype_size(t.dtype);
        if (expected != t.bytes.size()) {
            throw Error(ErrorKind::Shape, "tensor '" + t.name + "' payload does not match its shape");
        }
        header[t.name] = {{"dtype", std::string(dtype_name(t.dtype))},
                          {"shape", t.shape},
                          {"data_offsets", {offset, offset + t.bytes.size()}}};
        offset += t.bytes.size();
    }
    std::string text = header.dump();
    while ((8 + text.size()) % 8 != 0) text.push_back(' ');

    std::vector<std::byte> out;
    out.reserve(8 + text.size() + offset);
    const std::uint64_t len = text.size();
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::byte>((len >> (8 * i)) & 0xffu));
    for (char c : text) out.push_back(static_cast<std::byte>(c));
    for (const auto& t : tensors) out.insert(out.end(), t.bytes.begin(), t.bytes.end());
    return out;
}

std::vector<std::byte> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorKind::Io, "cannot open '" + path.string() + "'");
    in.seekg(0, std::ios::end);
    const auto size = static_cast<std::size_t>(in.tellg());
    in.seekg(0);
    std::vector<std::byte> bytes(size);
    if (size && !in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size))) {
        throw Error(ErrorKind::Io, "failed reading '" + path.string() + "'");
    }
    return bytes;
}

void write_file_atomic(const std::filesystem::path& path, std::span<const std::byte> bytes) {
    auto tmp = path;
    tmp += ".tmp." + std::to_string(::getpid());
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error(ErrorKind::Io, "cannot write '" + path.string() + "'");
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw Error(ErrorKind::Io, "failed writing '" + tmp.string() + "'");
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        std::filesystem::remove(tmp, ec);
        throw Error(ErrorKind::Io, "cannot move output into place at '" + path.string() + "'");
    }
}

void write_file_atomic(const std::filesystem::path& path, std::string_view text) {
    write_file_atomic(path, std::as_bytes(std::span<const char>(text.data(), text.size())));
}

std::string_view convention_name(NamingConvention convention) noexcept {
    return convention == NamingConvention::UpDown ? "up_down" : "a_b";
}

std::string down_suffix(NamingConvention convention) {
    return convention == NamingConvention::UpDown ? ".lora_down.weight" : ".lora_A.weight";
}

std::string up_suffix(NamingConvention convention) {
    return convention == NamingConvention::UpDown ? ".lora_up.weight" : ".lora_B.weight";
}

namespace {

enum class Role { Down, Up, Alpha };

struct Classified {
    std::string base;
    Role role;
    std::optional<NamingConvention> convention;
};

bool strip_suffix(std::string_view name, std::string_view suffix, std::string& base) {
    if (name.size() > suffix.size() && name.ends_with(suffix)) {
        base = std::string(name.substr(0, name.size() - suffix.size()));
        return true;
    }
    return false;
}

std::optional<Classified> classify(std::string_view name) {
    std::string base;
    for (auto conv : {NamingConvention::UpDown, NamingConvention::AB}) {
        if (strip_suffix(name, down_suffix(conv), base)) return Classified{base, Role::Down, conv};
        if (strip_suffix(name, up_suffix(conv), base)) return Classified{base, Role::Up, conv};
    }
    if (strip_suffix(name, ".alpha", base)) return Classified{base, Role::Alpha, std::nullopt};
    return std::nullopt;
}

struct Slot {
    std::size_t first_seen = 0;
    const TensorRecord* down = nullptr;
    const TensorRecord* up = nullptr;
    const TensorRecord* alpha = nullptr;
};

DenseMatrix decode_factor(const TensorRecord& rec, std::span<const std::byte> data) {
    if (!rec.dtype) {
        throw Error(ErrorKind::Format, "tensor '" + rec.name + "' has unsupported dtype " + rec.dtype_tag);
    }
    if (rec.shape.size() != 2 && rec.shape.size() != 4) {
        throw Error(ErrorKind::Shape, "tensor '" + rec.name + "' has shape " + shape_text(rec.shape) +
                                          "; expected a 2-D matrix or 4-D conv kernel");
    }
    if (std::any_of(rec.shape.begin(), rec.shape.end(), [](std::int64_t d) { return d <= 0; })) {
        throw Error(ErrorKind::Shape, "tensor '" + rec.name + "' has an empty dimension");
    }
    if (rec.end > data.size()) {
        throw Error(ErrorKind::Format, "tensor '" + rec.name + "' ends past the data region");
    }
    const auto rows = static_cast<std::size_t>(rec.shape[0]);
    const auto cols = static_cast<std::size_t>(product(rec.shape, 1));
    auto values = decode_to_f32(data.subspan(rec.begin, rec.end - rec.begin), *rec.dtype, rows * cols, rec.name);
    return DenseMatrix(rows, cols, std::move(values));
}

LoraLayer build_layer(const std::string& base, const Slot& slot, std::span<const std::byte> data) {
    LoraLayer layer;
    layer.base_module = base;
    DenseMatrix down = decode_factor(*slot.down, data);
    DenseMatrix up = decode_factor(*slot.up, data);
    layer.down_layout = {*slot.down->dtype, slot.down->shape, false};
    layer.up_layout = {*slot.up->dtype, slot.up->shape, false};

    const bool two_d = slot.down->shape.size() == 2 && slot.up->shape.size() == 2;
    const bool standard_fits = down.rows() == up.cols();
    const bool swapped_fits = two_d && down.cols() == up.rows();
    const bool standard_low_rank = standard_fits && down.rows() <= std::min(up.rows(), down.cols());
    const bool swapped_low_rank = swapped_fits && down.cols() <= std::min(down.rows(), up.cols());
    const bool standard = standard_low_rank || (standard_fits && !swapped_low_rank);
    const bool swapped = !standard && swapped_low_rank;
    if (standard) {
        layer.down = std::move(down);
        layer.up = std::move(up);
    } else if (swapped) {
        layer.down = down.transposed();
        layer.up = up.transposed();
        layer.down_layout.transposed = true;
        layer.up_layout.transposed = true;
    } else {
        throw Error(ErrorKind::Shape, "layer '" + base + "': factor shapes " + shape_text(slot.down->shape) + " and " +
                                          shape_text(slot.up->shape) + " do not share a rank dimension");
    }
    layer.rank = layer.down.rows();

    if (slot.alpha) {
        const auto& rec = *slot.alpha;
        if (!rec.dtype || rec.element_count() != 1) {
            throw Error(ErrorKind::Format, "alpha tensor '" + rec.name + "' must be a single float");
        }
        const float a = decode_to_f32(data.subspan(rec.begin, rec.end - rec.begin), *rec.dtype, 1, rec.name)[0];
        if (!(a > 0.0f)) {
            throw Error(ErrorKind::Data, "alpha tensor '" + rec.name + "' must be positive");
        }
        layer.alpha = a;
    }
    return layer;
}

}  // namespace

PairingResult pair_lora_layers(std::span<const TensorRecord> records, std::span<const std::byte> data) {
    PairingResult result;
    std::map<std::string, Slot> slots;
    std::set<NamingConvention> conventions;
    std::size_t order = 0;

    for (const auto& rec : records) {
        const auto cls = classify(rec.name);
        if (!cls) {
            result.warnings.push_back("ignored non-LoRA tensor '" + rec.name + "'");
            continue;
        }
        if (cls->convention) conventions.insert(*cls->convention);
        auto [it, inserted] = slots.try_emplace(cls->base);
        if (inserted) it->second.first_seen = order++;
        const TensorRecord** target = cls->role == Role::Down ? &it->second.down
                                      : cls->role == Role::Up ? &it->second.up
                                                              : &it->second.alpha;
        if (*target) {
            throw Error(ErrorKind::Pairing, "ambiguous pairing for '" + cls->base + "': both '" + (*target)->name +
                                                "' and '" + rec.name + "' fill the same slot");
        }
        *target = &rec;
    }
    if (conventions.size() > 1) {
        throw Error(ErrorKind::Format, "mixed naming conventions (lora_down/lora_up and lora_A/lora_B) in one file");
    }
    if (!conventions.empty()) result.convention = *conventions.begin();

    std::vector<std::pair<std::size_t, const std::string*>> ordered;
    for (const auto& [base, slot] : slots) ordered.emplace_back(slot.first_seen, &base);
    std::sort(ordered.begin(), ordered.end());

    for (const auto& [pos, base] : ordered) {
        const Slot& slot = slots.at(*base);
        if (!slot.down && !slot.up) {
            result.warnings.push_back("ignored alpha without factors '" + slot.alpha->name + "'");
            continue;
        }
        if (!slot.down || !slot.up) {
            const auto* present = slot.down ? slot.down : slot.up;
            throw Error(ErrorKind::Pairing, "orphan factor '" + present->name + "' has no matching " +
                                                (slot.down ? "up" : "down") + " factor");
        }
        result.layers.push_back(build_layer(*base, slot, data));
    }
    return result;
}

LoraModel::LoraModel(std::vector<LoraLayer> layers, NamingConvention convention)
    : layers_(std::move(layers)), convention_(convention) {
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        const auto& l = layers_[i];
        if (l.down.rows() != l.rank || l.up.cols() != l.rank) {
            throw Error(ErrorKind::Shape, "layer '" + l.base_module + "' factors disagree with rank " +
                                              std::to_string(l.rank));
        }
        if (!index_.emplace(l.base_module, i).second) {
            throw Error(ErrorKind::Pairing, "duplicate layer '" + l.base_module + "'");
        }
    }
}

const LoraLayer* LoraModel::find(std::string_view base_module) const {
    const auto it = index_.find(base_module);
    return it == index_.end() ? nullptr : &layers_[it->second];
}

LoraModel parse_buffer(std::span<const std::byte> file_bytes, std::string source_name) {
    Container container = read_container(file_bytes);
    PairingResult paired = pair_lora_layers(container.records, container.data);
    LoraModel model(std::move(paired.layers), paired.convention);
    model.source_path = std::move(source_name);
    model.sha256 = sha256_hex(file_bytes);
    model.metadata = std::move(container.metadata);
    model.warnings = std::move(paired.warnings);
    return model;
}

LoraModel parse_file(const std::filesystem::path& path) {
    const auto bytes = read_file_bytes(path);
    try {
        return parse_buffer(bytes, path.string());
    } catch (const Error& e) {
        throw Error(e.kind(), path.string() + ": " + e.what());
    }
}

namespace {

TensorBlob factor_blob(std::string name, const DenseMatrix& m, const FactorLayout& layout) {
    for (float v : m.values()) {
        if (!std::isfinite(v)) throw Error(ErrorKind::Data, "tensor '" + name + "' holds a non-finite value");
    }
    TensorBlob blob;
    blob.name = std::move(name);
    blob.dtype = layout.dtype;
    const DenseMatrix stored = layout.transposed ? m.transposed() : m;
    if (!layout.shape.empty() &&
        static_cast<std::size_t>(product(layout.shape)) == stored.size() &&
        static_cast<std::size_t>(layout.shape[0]) == stored.rows()) {
        blob.shape = layout.shape;
    } else {
        blob.shape = {static_cast<std::int64_t>(stored.rows()), static_cast<std::int64_t>(stored.cols())};
    }
    blob.bytes = encode_from_f32(stored.values(), layout.dtype);
    return blob;
}

}  // namespace

std::vector<TensorBlob> layer_blobs(const LoraLayer& layer, NamingConvention convention) {
    std::vector<TensorBlob> blobs;
    blobs.push_back(factor_blob(layer.base_module + down_suffix(convention), layer.down, layer.down_layout));
    blobs.push_back(factor_blob(layer.base_module + up_suffix(convention), layer.up, layer.up_layout));
    if (layer.alpha) {
        const float a = *layer.alpha;
        blobs.push_back({layer.base_module + ".alpha", DType::F32, {}, encode_from_f32(std::span(&a, 1), DType::F32)});
    }
    return blobs;
}

std::vector<std::byte> serialize_model(const LoraModel& model) {
    std::vector<TensorBlob> blobs;
    for (const auto& layer : model.layers()) {
        auto lb = layer_blobs(layer, model.convention());
        std::move(lb.begin(), lb.end(), std::back_inserter(blobs));
    }
    return write_container(blobs, model.metadata);
}

void serialize_file(const LoraModel& model, const std::filesystem::path& path) {
    write_file_atomic(path, serialize_model(model));
}

}  // namespace klora
