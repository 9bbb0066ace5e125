#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <memory>
#include <span>
#include <vector>

namespace mosaic {

// Byte counters fed by TrackingAllocator. Used by the benchmark to report
// peak tensor memory without any platform-specific probing.
namespace memory {
std::size_t current_bytes();
std::size_t peak_bytes();
void reset_peak();
void record_alloc(std::size_t bytes);
void record_free(std::size_t bytes);
}  // namespace memory

template <class T>
struct TrackingAllocator {
    using value_type = T;

    TrackingAllocator() noexcept = default;
    template <class U>
    TrackingAllocator(const TrackingAllocator<U>&) noexcept {}

    T* allocate(std::size_t n) {
        memory::record_alloc(n * sizeof(T));
        return std::allocator<T>{}.allocate(n);
    }
    void deallocate(T* p, std::size_t n) noexcept {
        memory::record_free(n * sizeof(T));
        std::allocator<T>{}.deallocate(p, n);
    }

    template <class U>
    bool operator==(const TrackingAllocator<U>&) const noexcept { return true; }
};

using FloatBuffer = std::vector<float, TrackingAllocator<float>>;

class DenseVector {
public:
    DenseVector() = default;
    explicit DenseVector(std::size_t len, float fill = 0.0f);
    DenseVector(std::initializer_list<float> values);
    explicit DenseVector(std::span<const float> values);

    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    float operator[](std::size_t i) const { return data_[i]; }
    float& operator[](std::size_t i) { return data_[i]; }

    std::span<float> values() { return data_; }
    std::span<const float> values() const { return data_; }

    bool operator==(const DenseVector& other) const { return data_ == other.data_; }

private:
    FloatBuffer data_;
};

// Row-major 32-bit matrix. Projection weights are stored [out, in] so that a
// column is one input channel.
class DenseMatrix {
public:
    DenseMatrix() = default;
    DenseMatrix(std::size_t rows, std::size_t cols, float fill = 0.0f);
    DenseMatrix(std::size_t rows, std::size_t cols, std::span<const float> data);

    static DenseMatrix from_rows(std::initializer_list<std::initializer_list<float>> rows);
    static DenseMatrix identity(std::size_t n);

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    float operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
    float& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }

    std::span<float> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const float> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    std::span<float> values() { return data_; }
    std::span<const float> values() const { return data_; }

    bool operator==(const DenseMatrix& other) const {
        return rows_ == other.rows_ && cols_ == other.cols_ && data_ == other.data_;
    }

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    FloatBuffer data_;
};

// Worker count for row-parallel kernels. Output is bitwise identical for any
// setting because rows never share accumulators.
void set_num_threads(int n);
int num_threads();

DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b);
// a · bᵀ, the layout used by every projection (weights are [out, in]).
DenseMatrix matmul_transposed(const DenseMatrix& a, const DenseMatrix& b);

DenseVector column_l2_norms(const DenseMatrix& x);
DenseMatrix softmax_rows(const DenseMatrix& x);
void softmax_inplace(std::span<float> row);

DenseVector rms_norm(const DenseVector& x, const DenseVector& gain, float eps);
void rms_norm_into(std::span<const float> x, std::span<const float> gain, float eps,
                   std::span<float> out);

float silu(float x);
DenseVector silu(const DenseVector& x);

bool all_finite(std::span<const float> values);

DenseMatrix select_rows(const DenseMatrix& m, std::span<const std::size_t> rows);
DenseMatrix select_cols(const DenseMatrix& m, std::span<const std::size_t> cols);

// Mask cutoff for pruning the lowest `fraction` of a value set. An element is
// selected iff value < threshold, or value == threshold and it is among the
// first `ties_selected` such elements in index order. `count` is always
// floor(fraction * len).
struct Cutoff {
    float threshold = -std::numeric_limits<float>::infinity();
    std::size_t ties_selected = 0;
    std::size_t count = 0;
};

Cutoff threshold_for_fraction(std::span<const float> values, double fraction);
Cutoff threshold_for_count(std::span<const float> values, std::size_t count);

// One byte per element, 1 = selected by the cutoff.
std::vector<std::uint8_t> apply_cutoff(std::span<const float> values, const Cutoff& cutoff);

}  // namespace mosaic
