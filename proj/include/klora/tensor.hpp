#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace klora {

enum class DType { F32, F16, BF16 };

std::size_t dtype_size(DType dtype) noexcept;
std::string_view dtype_name(DType dtype) noexcept;

/// Widen little-endian F32/F16/BF16 bytes to f32. `tensor_name` only feeds diagnostics.
/// Throws Format on a length mismatch and Data when a decoded value is NaN or Inf.
std::vector<float> decode_to_f32(std::span<const std::byte> raw, DType dtype, std::size_t count,
                                 std::string_view tensor_name = {});

/// Narrow f32 values to little-endian bytes of `dtype` (round to nearest even).
/// Values that were decoded from `dtype` encode back to identical bytes.
std::vector<std::byte> encode_from_f32(std::span<const float> values, DType dtype);

float half_to_float(std::uint16_t bits) noexcept;
float bfloat16_to_float(std::uint16_t bits) noexcept;
std::uint16_t float_to_half(float value) noexcept;
std::uint16_t float_to_bfloat16(float value) noexcept;

/// Row-major f32 matrix.
class DenseMatrix {
public:
    DenseMatrix() = default;
    DenseMatrix(std::size_t rows, std::size_t cols);
    DenseMatrix(std::size_t rows, std::size_t cols, std::vector<float> data);

    static DenseMatrix from_rows(std::initializer_list<std::initializer_list<float>> rows);

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    float operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }
    float& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }

    std::span<const float> values() const noexcept { return data_; }
    std::span<float> values() noexcept { return data_; }
    std::span<const float> row(std::size_t r) const noexcept {
        return std::span<const float>(data_).subspan(r * cols_, cols_);
    }

    DenseMatrix transposed() const;
    std::string shape_string() const;

    bool operator==(const DenseMatrix&) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<float> data_;
};

/// b[m×r] · a[r×n]. Each output element is accumulated in f64 over the inner index in
/// ascending order, then rounded to f32. `context` names the layer in shape errors.
DenseMatrix matmul(const DenseMatrix& b, const DenseMatrix& a, std::string_view context = {});

/// Sum of |x| over all entries, f64, row-major order.
double abs_sum(const DenseMatrix& m) noexcept;

/// Sum of the k largest |x| (with multiplicity). k is clamped to the element count.
/// The selected magnitudes are summed largest first, so the result equals a full
/// descending sort followed by a prefix sum.
double topk_abs_sum(const DenseMatrix& m, std::size_t k);

}  // namespace klora
