#include <bit>
#include <cstring>

#include "doctest.h"
#include "klora/error.hpp"
#include "klora/safetensors.hpp"
#include "support/fixtures.hpp"

using namespace klora;
using namespace klora::testing;

namespace {

TensorBlob f32_blob(std::string name, std::vector<std::int64_t> shape, std::mt19937_64& gen) {
    std::size_t n = 1;
    for (auto d : shape) n *= static_cast<std::size_t>(d);
    std::vector<float> v(n);
    for (auto& x : v) x = static_cast<float>(uniform(gen));
    return {std::move(name), DType::F32, std::move(shape), encode_from_f32(v, DType::F32)};
}

TensorBlob scalar_blob(std::string name, float value) {
    return {std::move(name), DType::F32, {}, encode_from_f32(std::span(&value, 1), DType::F32)};
}

std::vector<std::byte> container_bytes(const std::vector<TensorBlob>& blobs, const Metadata& meta = {}) {
    return write_container(blobs, meta);
}

std::vector<std::byte> raw_file(const std::string& header, std::size_t data_bytes) {
    std::vector<std::byte> out(8);
    const std::uint64_t n = header.size();
    for (int i = 0; i < 8; ++i) out[static_cast<std::size_t>(i)] = static_cast<std::byte>((n >> (8 * i)) & 0xff);
    for (char c : header) out.push_back(static_cast<std::byte>(c));
    out.resize(out.size() + data_bytes);
    return out;
}

void check_error(const std::function<void()>& fn, ErrorKind kind, const std::string& needle) {
    try {
        fn();
        FAIL("expected an error containing '" << needle << "'");
    } catch (const Error& e) {
        CHECK(e.kind() == kind);
        CHECK_MESSAGE(std::string(e.what()).find(needle) != std::string::npos, e.what());
    }
}

}  // namespace

TEST_SUITE("safetensors") {

TEST_CASE("container header layout is bit-exact") {
    const float v = 1.0f;
    const std::vector<TensorBlob> blobs = {{"t", DType::F32, {1}, encode_from_f32(std::span(&v, 1), DType::F32)}};
    const auto bytes = container_bytes(blobs);
    std::uint64_t n = 0;
    for (int i = 7; i >= 0; --i) n = (n << 8) | std::to_integer<std::uint64_t>(bytes[static_cast<std::size_t>(i)]);
    const std::string header(reinterpret_cast<const char*>(bytes.data()) + 8, n);
    CHECK(header.rfind(R"({"t":{"dtype":"F32","shape":[1],"data_offsets":[0,4]}})", 0) == 0);
    CHECK((8 + n) % 8 == 0);
    CHECK(bytes.size() == 8 + n + 4);
    CHECK(std::to_integer<int>(bytes[8 + n + 3]) == 0x3f);
}

TEST_CASE("parse single UpDown pair with alpha") {
    std::mt19937_64 gen(1);
    const auto bytes = container_bytes({f32_blob("x.lora_down.weight", {4, 320}, gen),
                                        f32_blob("x.lora_up.weight", {320, 4}, gen), scalar_blob("x.alpha", 4.0f)});
    const auto model = parse_buffer(bytes, "mem");
    REQUIRE(model.size() == 1);
    const auto& l = model.layers()[0];
    CHECK(l.base_module == "x");
    CHECK(l.rank == 4);
    REQUIRE(l.alpha.has_value());
    CHECK(*l.alpha == 4.0f);
    CHECK(model.convention() == NamingConvention::UpDown);
    CHECK(model.sha256.size() == 64);
}

TEST_CASE("AB convention yields the same layer keys") {
    std::mt19937_64 gen(2);
    const auto ab = parse_buffer(container_bytes({f32_blob("x.lora_A.weight", {4, 320}, gen),
                                                  f32_blob("x.lora_B.weight", {320, 4}, gen)}));
    REQUIRE(ab.size() == 1);
    CHECK(ab.layers()[0].base_module == "x");
    CHECK(ab.convention() == NamingConvention::AB);
}

TEST_CASE("orphan factor is an error") {
    std::mt19937_64 gen(3);
    const auto bytes = container_bytes({f32_blob("x.lora_down.weight", {4, 8}, gen)});
    check_error([&] { parse_buffer(bytes); }, ErrorKind::Pairing, "orphan factor");
}

TEST_CASE("kohya names strip only the convention suffix") {
    std::mt19937_64 gen(4);
    const auto model = parse_buffer(container_bytes(
        {f32_blob("lora_unet_down_blocks_0_attn_to_k.lora_down.weight", {8, 64}, gen),
         f32_blob("lora_unet_down_blocks_0_attn_to_k.lora_up.weight", {64, 8}, gen)}));
    REQUIRE(model.size() == 1);
    CHECK(model.layers()[0].base_module == "lora_unet_down_blocks_0_attn_to_k");
    CHECK(model.layers()[0].rank == 8);
}

TEST_CASE("rank mismatch inside a pair is a shape error") {
    std::mt19937_64 gen(5);
    const auto bytes = container_bytes({f32_blob("unet.attn1.to_q.lora_down.weight", {8, 640}, gen),
                                        f32_blob("unet.attn1.to_q.lora_up.weight", {640, 16}, gen)});
    check_error([&] { parse_buffer(bytes); }, ErrorKind::Shape, "unet.attn1.to_q");
}

TEST_CASE("standard layout is accepted when the rank exceeds a layer dimension") {
    std::mt19937_64 gen(55);
    const auto bytes = container_bytes({f32_blob("narrow.lora_down.weight", {6, 17}, gen),
                                        f32_blob("narrow.lora_up.weight", {5, 6}, gen)});
    const auto model = parse_buffer(bytes);
    const auto* layer = model.find("narrow");
    REQUIRE(layer != nullptr);
    CHECK(layer->rank == 6);
    CHECK(layer->down.rows() == 6);
    CHECK(layer->up.rows() == 5);
    CHECK_FALSE(layer->down_layout.transposed);
}

TEST_CASE("mixed conventions are rejected") {
    std::mt19937_64 gen(6);
    const auto bytes = container_bytes({f32_blob("a.lora_down.weight", {2, 8}, gen),
                                        f32_blob("a.lora_up.weight", {8, 2}, gen),
                                        f32_blob("b.lora_A.weight", {2, 8}, gen),
                                        f32_blob("b.lora_B.weight", {8, 2}, gen)});
    check_error([&] { parse_buffer(bytes); }, ErrorKind::Format, "mixed naming conventions");
}

TEST_CASE("duplicate header keys are an ambiguity error") {
    const std::string header =
        R"({"x.lora_down.weight":{"dtype":"F32","shape":[1,1],"data_offsets":[0,4]},)"
        R"("x.lora_down.weight":{"dtype":"F32","shape":[1,1],"data_offsets":[4,8]},)"
        R"("x.lora_up.weight":{"dtype":"F32","shape":[1,1],"data_offsets":[8,12]}})";
    const auto bytes = raw_file(header, 12);
    check_error([&] { parse_buffer(bytes); }, ErrorKind::Pairing, "ambiguous");
}

TEST_CASE("pair_lora_layers reports ambiguity for duplicated records") {
    std::mt19937_64 gen(7);
    const auto container = read_container(container_bytes(
        {f32_blob("x.lora_down.weight", {2, 4}, gen), f32_blob("x.lora_up.weight", {4, 2}, gen)}));
    auto records = container.records;
    records.push_back(records[0]);
    check_error([&] { pair_lora_layers(records, container.data); }, ErrorKind::Pairing, "ambiguous");
}

TEST_CASE("non-LoRA tensors become warnings") {
    std::mt19937_64 gen(8);
    std::vector<std::int64_t> ids = {0, 1, 2};
    std::vector<std::byte> id_bytes(24);
    std::memcpy(id_bytes.data(), ids.data(), 24);
    const std::string header =
        R"({"te.position_ids":{"dtype":"I64","shape":[3],"data_offsets":[0,24]},)"
        R"("x.lora_down.weight":{"dtype":"F32","shape":[1,2],"data_offsets":[24,32]},)"
        R"("x.lora_up.weight":{"dtype":"F32","shape":[2,1],"data_offsets":[32,40]}})";
    auto bytes = raw_file(header, 40);
    std::memcpy(bytes.data() + 8 + header.size(), id_bytes.data(), 24);
    const auto model = parse_buffer(bytes);
    CHECK(model.size() == 1);
    REQUIRE(model.warnings.size() == 1);
    CHECK(model.warnings[0].find("te.position_ids") != std::string::npos);
}

TEST_CASE("malformed containers") {
    check_error([] { parse_buffer(std::vector<std::byte>(4)); }, ErrorKind::Format, "shorter");
    check_error([] { parse_buffer(raw_file("{not json", 0)); }, ErrorKind::Format, "malformed header JSON");
    check_error(
        [] { parse_buffer(raw_file(R"({"x.lora_down.weight":{"dtype":"F32","shape":[2,2],"data_offsets":[0,16]}})", 8)); },
        ErrorKind::Format, "truncated data region");
    check_error(
        [] { parse_buffer(raw_file(R"({"x.lora_down.weight":{"dtype":"Q4","shape":[2],"data_offsets":[0,2]}})", 2)); },
        ErrorKind::Format, "unknown dtype");
    check_error(
        [] { parse_buffer(raw_file(R"({"x.lora_down.weight":{"dtype":"F32","shape":[2],"data_offsets":[0,4]}})", 4)); },
        ErrorKind::Format, "byte range");
    check_error(
        [] {
            parse_buffer(raw_file(R"({"a.lora_down.weight":{"dtype":"F32","shape":[1,2],"data_offsets":[0,8]},)"
                                  R"("a.lora_up.weight":{"dtype":"F32","shape":[2,1],"data_offsets":[4,12]}})",
                                  12));
        },
        ErrorKind::Format, "overlaps");
    check_error(
        [] {
            parse_buffer(raw_file(R"({"a.lora_down.weight":{"dtype":"I32","shape":[1,2],"data_offsets":[0,8]},)"
                                  R"("a.lora_up.weight":{"dtype":"F32","shape":[2,1],"data_offsets":[8,16]}})",
                                  16));
        },
        ErrorKind::Format, "unsupported dtype");
}

TEST_CASE("NaN in a factor is a data error naming the tensor") {
    const float nan = std::numeric_limits<float>::quiet_NaN();
    const float one = 1.0f;
    const std::vector<TensorBlob> blobs = {
        {"bad.lora_down.weight", DType::F32, {1, 1}, encode_from_f32(std::span(&nan, 1), DType::F32)},
        {"bad.lora_up.weight", DType::F32, {1, 1}, encode_from_f32(std::span(&one, 1), DType::F32)}};
    check_error([&] { parse_buffer(write_container(blobs, {})); }, ErrorKind::Data, "bad.lora_down.weight");
}

TEST_CASE("conv kernels flatten to 2-D and keep their on-disk shape") {
    std::mt19937_64 gen(9);
    const auto bytes = container_bytes({f32_blob("c.lora_down.weight", {4, 8, 3, 3}, gen),
                                        f32_blob("c.lora_up.weight", {16, 4, 1, 1}, gen)});
    const auto model = parse_buffer(bytes);
    const auto& l = model.layers()[0];
    CHECK(l.down.rows() == 4);
    CHECK(l.down.cols() == 72);
    CHECK(l.up.rows() == 16);
    CHECK(l.up.cols() == 4);
    const auto again = read_container(serialize_model(model));
    CHECK(again.records[0].shape == std::vector<std::int64_t>{4, 8, 3, 3});
    CHECK(again.records[1].shape == std::vector<std::int64_t>{16, 4, 1, 1});
}

TEST_CASE("transposed factor storage is detected and written back as stored") {
    std::mt19937_64 gen(10);
    // down stored [in, rank], up stored [rank, out]
    const auto bytes = container_bytes({f32_blob("t.lora_down.weight", {12, 3}, gen),
                                        f32_blob("t.lora_up.weight", {3, 10}, gen)});
    const auto model = parse_buffer(bytes);
    const auto& l = model.layers()[0];
    CHECK(l.rank == 3);
    CHECK(l.down.rows() == 3);
    CHECK(l.down.cols() == 12);
    CHECK(l.up.rows() == 10);
    CHECK(l.up.cols() == 3);
    CHECK(serialize_model(model) == bytes);
}

TEST_CASE("square factors follow the name suffix") {
    std::mt19937_64 gen(11);
    const auto bytes = container_bytes({f32_blob("s.lora_down.weight", {4, 4}, gen),
                                        f32_blob("s.lora_up.weight", {4, 4}, gen)});
    const auto model = parse_buffer(bytes);
    const auto container = read_container(bytes);
    const auto down_values = decode_to_f32(container.payload(container.records[0]), DType::F32, 16);
    CHECK(std::equal(down_values.begin(), down_values.end(), model.layers()[0].down.values().begin()));
    CHECK_FALSE(model.layers()[0].down_layout.transposed);
}

TEST_CASE("F16 and BF16 payloads survive serialization byte for byte") {
    std::mt19937_64 gen(12);
    std::vector<float> d(2 * 6), u(5 * 2);
    for (auto& v : d) v = static_cast<float>(uniform(gen));
    for (auto& v : u) v = static_cast<float>(uniform(gen));
    const std::vector<TensorBlob> blobs = {
        {"h.lora_down.weight", DType::F16, {2, 6}, encode_from_f32(d, DType::F16)},
        {"h.lora_up.weight", DType::BF16, {5, 2}, encode_from_f32(u, DType::BF16)}};
    const auto bytes = write_container(blobs, {{"ss_network_dim", "2"}});
    const auto model = parse_buffer(bytes);
    CHECK(model.metadata.at("ss_network_dim") == "2");
    CHECK(serialize_model(model) == bytes);
}

TEST_CASE("serialize/parse round trip preserves names, shapes and payloads") {
    TempDir tmp("st_roundtrip");
    const auto model = random_model(13, {{"down.0.to_q", 16, 24, 4, 4.0f}, {"down.0.to_k", 16, 24, 8, std::nullopt}},
                                    NamingConvention::AB);
    const auto path = tmp / "m.safetensors";
    serialize_file(model, path);
    const auto back = parse_file(path);
    REQUIRE(back.size() == 2);
    CHECK(back.convention() == NamingConvention::AB);
    for (std::size_t i = 0; i < 2; ++i) {
        CHECK(back.layers()[i].base_module == model.layers()[i].base_module);
        CHECK(back.layers()[i].down == model.layers()[i].down);
        CHECK(back.layers()[i].up == model.layers()[i].up);
        CHECK(back.layers()[i].alpha == model.layers()[i].alpha);
    }
    serialize_file(back, tmp / "again.safetensors");
    CHECK(read_file_bytes(tmp / "again.safetensors") == read_file_bytes(path));
}

TEST_CASE("empty model serializes to a valid empty container") {
    const LoraModel empty;
    const auto bytes = serialize_model(empty);
    const auto container = read_container(bytes);
    CHECK(container.records.empty());
    CHECK(parse_buffer(bytes).size() == 0);
}

TEST_CASE("layer order follows first appearance in the header") {
    std::mt19937_64 gen(14);
    const auto model = parse_buffer(container_bytes({scalar_blob("zeta.alpha", 2.0f),
                                                     f32_blob("alpha_layer.lora_up.weight", {4, 2}, gen),
                                                     f32_blob("zeta.lora_down.weight", {2, 4}, gen),
                                                     f32_blob("zeta.lora_up.weight", {4, 2}, gen),
                                                     f32_blob("alpha_layer.lora_down.weight", {2, 4}, gen)}));
    REQUIRE(model.size() == 2);
    CHECK(model.layers()[0].base_module == "zeta");
    CHECK(model.layers()[1].base_module == "alpha_layer");
}

TEST_CASE("missing file is an I/O error") {
    check_error([] { parse_file("/nonexistent/klora/file.safetensors"); }, ErrorKind::Io, "cannot open");
}

}  // TEST_SUITE
