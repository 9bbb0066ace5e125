#include "mosaic/tensor.h"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <string>
#include <thread>

#include "mosaic/errors.h"

namespace mosaic {

namespace memory {
namespace {
std::atomic<std::size_t> g_current{0};
std::atomic<std::size_t> g_peak{0};
}  // namespace

std::size_t current_bytes() { return g_current.load(); }
std::size_t peak_bytes() { return g_peak.load(); }
void reset_peak() { g_peak.store(g_current.load()); }

void record_alloc(std::size_t bytes) {
    const std::size_t now = g_current.fetch_add(bytes) + bytes;
    std::size_t peak = g_peak.load();
    while (now > peak && !g_peak.compare_exchange_weak(peak, now)) {
    }
}

void record_free(std::size_t bytes) { g_current.fetch_sub(bytes); }
}  // namespace memory

DenseVector::DenseVector(std::size_t len, float fill) : data_(len, fill) {}

DenseVector::DenseVector(std::initializer_list<float> values) : data_(values.begin(), values.end()) {}

DenseVector::DenseVector(std::span<const float> values) : data_(values.begin(), values.end()) {}

DenseMatrix::DenseMatrix(std::size_t rows, std::size_t cols, float fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

DenseMatrix::DenseMatrix(std::size_t rows, std::size_t cols, std::span<const float> data)
    : rows_(rows), cols_(cols), data_(data.begin(), data.end()) {
    if (data.size() != rows * cols) {
        throw ShapeError("matrix data length " + std::to_string(data.size()) + " != " +
                         std::to_string(rows) + "x" + std::to_string(cols));
    }
}

DenseMatrix DenseMatrix::from_rows(std::initializer_list<std::initializer_list<float>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r == 0 ? 0 : rows.begin()->size();
    DenseMatrix m(r, c);
    std::size_t i = 0;
    for (const auto& row : rows) {
        if (row.size() != c) throw ShapeError("ragged row list");
        std::copy(row.begin(), row.end(), m.row(i++).begin());
    }
    return m;
}

DenseMatrix DenseMatrix::identity(std::size_t n) {
    DenseMatrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0f;
    return m;
}

namespace {

int g_num_threads = 1;

template <class Fn>
void parallel_rows(std::size_t rows, Fn&& fn) {
    const auto workers = static_cast<std::size_t>(std::max(1, g_num_threads));
    if (workers == 1 || rows < 2 * workers) {
        for (std::size_t r = 0; r < rows; ++r) fn(r);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(workers);
    const std::size_t chunk = (rows + workers - 1) / workers;
    for (std::size_t w = 0; w < workers; ++w) {
        const std::size_t begin = w * chunk;
        const std::size_t end = std::min(rows, begin + chunk);
        if (begin >= end) break;
        pool.emplace_back([&fn, begin, end] {
            for (std::size_t r = begin; r < end; ++r) fn(r);
        });
    }
    for (auto& t : pool) t.join();
}

// Eight independent partial sums in a fixed order: vectorizes without
// reassociation flags and stays bitwise reproducible.
float dot(const float* a, const float* b, std::size_t n) {
    float acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        for (std::size_t l = 0; l < 8; ++l) acc[l] += a[i + l] * b[i + l];
    }
    float tail = 0.0f;
    for (; i < n; ++i) tail += a[i] * b[i];
    return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail;
}

}  // namespace

void set_num_threads(int n) { g_num_threads = std::max(1, n); }
int num_threads() { return g_num_threads; }

DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b) {
    if (a.cols() != b.rows()) {
        throw ShapeError("matmul: " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                         " by " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
    }
    DenseMatrix out(a.rows(), b.cols());
    parallel_rows(a.rows(), [&](std::size_t i) {
        auto dst = out.row(i);
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const float s = a(i, k);
            const auto src = b.row(k);
            for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += s * src[j];
        }
    });
    return out;
}

DenseMatrix matmul_transposed(const DenseMatrix& a, const DenseMatrix& b) {
    if (a.cols() != b.cols()) {
        throw ShapeError("matmul_transposed: " + std::to_string(a.rows()) + "x" +
                         std::to_string(a.cols()) + " by (" + std::to_string(b.rows()) + "x" +
                         std::to_string(b.cols()) + ")^T");
    }
    DenseMatrix out(a.rows(), b.rows());
    const std::size_t k = a.cols();
    parallel_rows(a.rows(), [&](std::size_t i) {
        const float* x = a.row(i).data();
        auto dst = out.row(i);
        for (std::size_t j = 0; j < b.rows(); ++j) dst[j] = dot(x, b.row(j).data(), k);
    });
    return out;
}

DenseVector column_l2_norms(const DenseMatrix& x) {
    std::vector<double> sums(x.cols(), 0.0);
    for (std::size_t i = 0; i < x.rows(); ++i) {
        const auto r = x.row(i);
        for (std::size_t j = 0; j < r.size(); ++j) sums[j] += static_cast<double>(r[j]) * r[j];
    }
    DenseVector out(x.cols());
    for (std::size_t j = 0; j < sums.size(); ++j) out[j] = static_cast<float>(std::sqrt(sums[j]));
    return out;
}

void softmax_inplace(std::span<float> row) {
    if (row.empty()) return;
    const float max = *std::max_element(row.begin(), row.end());
    double denom = 0.0;
    for (float& v : row) {
        v = std::exp(v - max);
        denom += v;
    }
    const double inv = 1.0 / denom;
    for (float& v : row) v = static_cast<float>(v * inv);
}

DenseMatrix softmax_rows(const DenseMatrix& x) {
    DenseMatrix out = x;
    for (std::size_t i = 0; i < out.rows(); ++i) softmax_inplace(out.row(i));
    return out;
}

void rms_norm_into(std::span<const float> x, std::span<const float> gain, float eps,
                   std::span<float> out) {
    if (x.size() != gain.size() || out.size() != x.size()) {
        throw ShapeError("rms_norm: length mismatch");
    }
    double ss = 0.0;
    for (float v : x) ss += static_cast<double>(v) * v;
    const double mean = x.empty() ? 0.0 : ss / static_cast<double>(x.size());
    const double denom = std::sqrt(mean + eps);
    // Only reachable with eps == 0 and an all-zero input.
    const double scale = denom > 0.0 ? 1.0 / denom : 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        out[i] = static_cast<float>(gain[i] * (x[i] * scale));
    }
}

DenseVector rms_norm(const DenseVector& x, const DenseVector& gain, float eps) {
    DenseVector out(x.size());
    rms_norm_into(x.values(), gain.values(), eps, out.values());
    return out;
}

float silu(float x) { return x / (1.0f + std::exp(-x)); }

DenseVector silu(const DenseVector& x) {
    DenseVector out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = silu(x[i]);
    return out;
}

bool all_finite(std::span<const float> values) {
    return std::all_of(values.begin(), values.end(), [](float v) { return std::isfinite(v); });
}

DenseMatrix select_rows(const DenseMatrix& m, std::span<const std::size_t> rows) {
    DenseMatrix out(rows.size(), m.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] >= m.rows()) throw ShapeError("select_rows: index out of range");
        std::copy_n(m.row(rows[i]).begin(), m.cols(), out.row(i).begin());
    }
    return out;
}

DenseMatrix select_cols(const DenseMatrix& m, std::span<const std::size_t> cols) {
    for (std::size_t c : cols) {
        if (c >= m.cols()) throw ShapeError("select_cols: index out of range");
    }
    DenseMatrix out(m.rows(), cols.size());
    for (std::size_t i = 0; i < m.rows(); ++i) {
        const auto src = m.row(i);
        auto dst = out.row(i);
        for (std::size_t j = 0; j < cols.size(); ++j) dst[j] = src[cols[j]];
    }
    return out;
}

Cutoff threshold_for_count(std::span<const float> values, std::size_t count) {
    if (values.empty()) throw ArgumentError("threshold: empty value set");
    if (count >= values.size()) throw ArgumentError("threshold: count must be below length");
    Cutoff cut;
    cut.count = count;
    if (count == 0) return cut;

    std::vector<std::uint32_t> order(values.size());
    std::iota(order.begin(), order.end(), 0u);
    const auto less = [&](std::uint32_t a, std::uint32_t b) {
        return values[a] < values[b] || (values[a] == values[b] && a < b);
    };
    std::nth_element(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(count), order.end(),
                     less);
    cut.threshold = values[order[count]];
    cut.ties_selected = static_cast<std::size_t>(
        std::count_if(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(count),
                      [&](std::uint32_t i) { return values[i] == cut.threshold; }));
    return cut;
}

Cutoff threshold_for_fraction(std::span<const float> values, double fraction) {
    if (!(fraction >= 0.0 && fraction < 1.0)) {
        throw ArgumentError("threshold: fraction must lie in [0, 1)");
    }
    if (values.empty()) throw ArgumentError("threshold: empty value set");
    const auto count =
        static_cast<std::size_t>(std::floor(fraction * static_cast<double>(values.size())));
    return threshold_for_count(values, std::min(count, values.size() - 1));
}

std::vector<std::uint8_t> apply_cutoff(std::span<const float> values, const Cutoff& cutoff) {
    std::vector<std::uint8_t> mask(values.size(), 0);
    std::size_t ties = cutoff.ties_selected;
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (values[i] < cutoff.threshold) {
            mask[i] = 1;
        } else if (ties > 0 && values[i] == cutoff.threshold) {
            mask[i] = 1;
            --ties;
        }
    }
    return mask;
}

}  // namespace mosaic
