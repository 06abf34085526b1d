#include "klora/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <functional>
#include <sstream>

#include "klora/error.hpp"

namespace klora {

std::string_view to_string(ErrorKind kind) {
    switch (kind) {
    case ErrorKind::Format: return "format error";
    case ErrorKind::Data: return "data error";
    case ErrorKind::Shape: return "shape error";
    case ErrorKind::Argument: return "argument error";
    case ErrorKind::Pairing: return "pairing error";
    case ErrorKind::Degenerate: return "degenerate model";
    case ErrorKind::Io: return "I/O error";
    case ErrorKind::UnsupportedVersion: return "unsupported version";
    case ErrorKind::State: return "state error";
    }
    return "error";
}

std::size_t dtype_size(DType dtype) noexcept {
    return dtype == DType::F32 ? 4 : 2;
}

std::string_view dtype_name(DType dtype) noexcept {
    switch (dtype) {
    case DType::F32: return "F32";
    case DType::F16: return "F16";
    case DType::BF16: return "BF16";
    }
    return "?";
}

float half_to_float(std::uint16_t h) noexcept {
    const std::uint32_t sign = static_cast<std::uint32_t>(h & 0x8000u) << 16;
    const std::uint32_t exp = (h >> 10) & 0x1fu;
    const std::uint32_t man = h & 0x3ffu;
    if (exp == 0) {
        const float mag = std::ldexp(static_cast<float>(man), -24);
        return sign ? -mag : mag;
    }
    if (exp == 31) {
        return std::bit_cast<float>(sign | 0x7f800000u | (man << 13));
    }
    return std::bit_cast<float>(sign | ((exp + 112) << 23) | (man << 13));
}

float bfloat16_to_float(std::uint16_t bits) noexcept {
    return std::bit_cast<float>(static_cast<std::uint32_t>(bits) << 16);
}

std::uint16_t float_to_half(float value) noexcept {
    std::uint32_t x = std::bit_cast<std::uint32_t>(value);
    const auto sign = static_cast<std::uint16_t>((x >> 16) & 0x8000u);
    x &= 0x7fffffffu;
    if (x >= 0x7f800000u) {
        const std::uint16_t payload = x > 0x7f800000u ? static_cast<std::uint16_t>(0x200u | ((x >> 13) & 0x3ffu)) : 0;
        return sign | 0x7c00u | payload;
    }
    if (x >= 0x477ff000u) {  // rounds past 65504
        return sign | 0x7c00u;
    }
    if (x < 0x38800000u) {  // half subnormal range
        const int e = static_cast<int>(x >> 23);
        const int shift = 126 - e;
        if (shift > 24) {
            return sign;
        }
        const std::uint32_t m = (x & 0x7fffffu) | 0x800000u;
        std::uint32_t r = m >> shift;
        const std::uint32_t rem = m & ((1u << shift) - 1u);
        const std::uint32_t halfway = 1u << (shift - 1);
        if (rem > halfway || (rem == halfway && (r & 1u))) {
            ++r;
        }
        return static_cast<std::uint16_t>(sign | r);
    }
    std::uint32_t h = (x - 0x38000000u) >> 13;
    const std::uint32_t rem = x & 0x1fffu;
    if (rem > 0x1000u || (rem == 0x1000u && (h & 1u))) {
        ++h;
    }
    return static_cast<std::uint16_t>(sign | h);
}

std::uint16_t float_to_bfloat16(float value) noexcept {
    const std::uint32_t x = std::bit_cast<std::uint32_t>(value);
    if ((x & 0x7fffffffu) > 0x7f800000u) {
        return static_cast<std::uint16_t>((x >> 16) | 0x40u);
    }
    const std::uint32_t rounding = 0x7fffu + ((x >> 16) & 1u);
    return static_cast<std::uint16_t>((x + rounding) >> 16);
}

namespace {

std::uint16_t load_u16(const std::byte* p) noexcept {
    return static_cast<std::uint16_t>(std::to_integer<std::uint16_t>(p[0]) |
                                      (std::to_integer<std::uint16_t>(p[1]) << 8));
}

std::uint32_t load_u32(const std::byte* p) noexcept {
    return std::to_integer<std::uint32_t>(p[0]) | (std::to_integer<std::uint32_t>(p[1]) << 8) |
           (std::to_integer<std::uint32_t>(p[2]) << 16) | (std::to_integer<std::uint32_t>(p[3]) << 24);
}

void store_u16(std::byte* p, std::uint16_t v) noexcept {
    p[0] = static_cast<std::byte>(v & 0xffu);
    p[1] = static_cast<std::byte>(v >> 8);
}

void store_u32(std::byte* p, std::uint32_t v) noexcept {
    for (int i = 0; i < 4; ++i) {
        p[i] = static_cast<std::byte>((v >> (8 * i)) & 0xffu);
    }
}

}  // namespace

std::vector<float> decode_to_f32(std::span<const std::byte> raw, DType dtype, std::size_t count,
                                 std::string_view tensor_name) {
    const std::size_t width = dtype_size(dtype);
    if (raw.size() != count * width) {
        std::ostringstream msg;
        msg << "tensor '" << tensor_name << "': expected " << count * width << " bytes of " << dtype_name(dtype)
            << ", got " << raw.size();
        throw Error(ErrorKind::Format, msg.str());
    }
    std::vector<float> out(count);
    const std::byte* p = raw.data();
    switch (dtype) {
    case DType::F32:
        for (std::size_t i = 0; i < count; ++i) out[i] = std::bit_cast<float>(load_u32(p + 4 * i));
        break;
    case DType::F16:
        for (std::size_t i = 0; i < count; ++i) out[i] = half_to_float(load_u16(p + 2 * i));
        break;
    case DType::BF16:
        for (std::size_t i = 0; i < count; ++i) out[i] = bfloat16_to_float(load_u16(p + 2 * i));
        break;
    }
    for (std::size_t i = 0; i < count; ++i) {
        if (!std::isfinite(out[i])) {
            std::ostringstream msg;
            msg << "tensor '" << tensor_name << "': non-finite value at element " << i;
            throw Error(ErrorKind::Data, msg.str());
        }
    }
    return out;
}

std::vector<std::byte> encode_from_f32(std::span<const float> values, DType dtype) {
    std::vector<std::byte> out(values.size() * dtype_size(dtype));
    std::byte* p = out.data();
    switch (dtype) {
    case DType::F32:
        for (std::size_t i = 0; i < values.size(); ++i) store_u32(p + 4 * i, std::bit_cast<std::uint32_t>(values[i]));
        break;
    case DType::F16:
        for (std::size_t i = 0; i < values.size(); ++i) store_u16(p + 2 * i, float_to_half(values[i]));
        break;
    case DType::BF16:
        for (std::size_t i = 0; i < values.size(); ++i) store_u16(p + 2 * i, float_to_bfloat16(values[i]));
        break;
    }
    return out;
}

DenseMatrix::DenseMatrix(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), data_(rows * cols, 0.0f) {}

DenseMatrix::DenseMatrix(std::size_t rows, std::size_t cols, std::vector<float> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows * cols) {
        std::ostringstream msg;
        msg << "matrix data length " << data_.size() << " does not match " << rows << "x" << cols;
        throw Error(ErrorKind::Shape, msg.str());
    }
}

DenseMatrix DenseMatrix::from_rows(std::initializer_list<std::initializer_list<float>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<float> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
        if (row.size() != c) {
            throw Error(ErrorKind::Shape, "ragged matrix literal");
        }
        data.insert(data.end(), row.begin(), row.end());
    }
    return DenseMatrix(r, c, std::move(data));
}

DenseMatrix DenseMatrix::transposed() const {
    DenseMatrix t(cols_, rows_);
    for (std::size_t r = 0; r < rows_; ++r) {
        for (std::size_t c = 0; c < cols_; ++c) {
            t(c, r) = (*this)(r, c);
        }
    }
    return t;
}

std::string DenseMatrix::shape_string() const {
    return "[" + std::to_string(rows_) + "x" + std::to_string(cols_) + "]";
}

DenseMatrix matmul(const DenseMatrix& b, const DenseMatrix& a, std::string_view context) {
    if (b.cols() != a.rows()) {
        std::ostringstream msg;
        msg << "matmul inner dimensions disagree: " << b.shape_string() << " * " << a.shape_string();
        if (!context.empty()) msg << " in layer '" << context << "'";
        throw Error(ErrorKind::Shape, msg.str());
    }
    const std::size_t m = b.rows();
    const std::size_t inner = b.cols();
    const std::size_t n = a.cols();
    DenseMatrix out(m, n);
    std::vector<double> acc(n);
    // i-k-j order: every output element still sums over k in ascending order.
    for (std::size_t i = 0; i < m; ++i) {
        std::fill(acc.begin(), acc.end(), 0.0);
        for (std::size_t k = 0; k < inner; ++k) {
            const double bik = b(i, k);
            const float* arow = a.row(k).data();
            double* dst = acc.data();
            for (std::size_t j = 0; j < n; ++j) {
                dst[j] += bik * static_cast<double>(arow[j]);
            }
        }
        for (std::size_t j = 0; j < n; ++j) {
            out(i, j) = static_cast<float>(acc[j]);
        }
    }
    return out;
}

double abs_sum(const DenseMatrix& m) noexcept {
    double total = 0.0;
    for (float v : m.values()) {
        total += std::fabs(static_cast<double>(v));
    }
    return total;
}

double topk_abs_sum(const DenseMatrix& m, std::size_t k) {
    if (k == 0) {
        throw Error(ErrorKind::Argument, "topk_abs_sum: k must be at least 1");
    }
    const std::size_t n = m.size();
    if (k >= n) {
        return abs_sum(m);
    }
    std::vector<float> mags(n);
    std::transform(m.values().begin(), m.values().end(), mags.begin(), [](float v) { return std::fabs(v); });
    const auto kth = mags.begin() + static_cast<std::ptrdiff_t>(k);
    std::nth_element(mags.begin(), kth - 1, mags.end(), std::greater<>());
    std::sort(mags.begin(), kth, std::greater<>());
    double total = 0.0;
    for (auto it = mags.begin(); it != kth; ++it) {
        total += static_cast<double>(*it);
    }
    return total;
}

}  // namespace klora
