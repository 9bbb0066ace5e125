#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "mosaic/model.h"
#include "mosaic/pruning.h"
#include "mosaic/ranking.h"

namespace testing {

using namespace mosaic;

inline ModelConfig tiny_config(std::size_t layers = 2, std::size_t d_model = 16, std::size_t heads = 2,
                               std::size_t d_ff = 32, std::size_t vocab = 23, std::size_t max_seq = 32) {
    ModelConfig c;
    c.n_layers = layers;
    c.d_model = d_model;
    c.n_heads = heads;
    c.head_dim = d_model / heads;
    c.d_ff = d_ff;
    c.vocab_size = vocab;
    c.max_seq_len = max_seq;
    return c;
}

inline std::vector<TokenId> random_tokens(std::size_t n, std::size_t vocab, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> d(0, vocab - 1);
    std::vector<TokenId> out(n);
    for (auto& t : out) t = static_cast<TokenId>(d(rng));
    return out;
}

inline DenseMatrix random_matrix(std::size_t rows, std::size_t cols, std::mt19937_64& rng, float scale = 1.0f) {
    std::normal_distribution<float> n(0.0f, scale);
    DenseMatrix m(rows, cols);
    for (float& v : m.values()) v = n(rng);
    return m;
}

using Mat = std::vector<std::vector<double>>;

inline Mat to_mat(const DenseMatrix& m) {
    Mat out(m.rows(), std::vector<double>(m.cols()));
    for (std::size_t i = 0; i < m.rows(); ++i)
        for (std::size_t j = 0; j < m.cols(); ++j) out[i][j] = m(i, j);
    return out;
}

// x · wᵀ for w stored [out, in].
inline Mat ref_project(const Mat& x, const DenseMatrix& w) {
    Mat out(x.size(), std::vector<double>(w.rows(), 0.0));
    for (std::size_t s = 0; s < x.size(); ++s)
        for (std::size_t o = 0; o < w.rows(); ++o)
            for (std::size_t i = 0; i < w.cols(); ++i) out[s][o] += x[s][i] * w(o, i);
    return out;
}

inline Mat ref_rms(const Mat& x, const DenseVector& g, double eps) {
    Mat out = x;
    for (auto& row : out) {
        double ss = 0.0;
        for (double v : row) ss += v * v;
        const double r = 1.0 / std::sqrt(ss / static_cast<double>(row.size()) + eps);
        for (std::size_t i = 0; i < row.size(); ++i) row[i] = row[i] * r * g[i];
    }
    return out;
}

inline void ref_rope(std::vector<double>& head, std::size_t pos, double base) {
    const std::size_t half = head.size() / 2;
    for (std::size_t i = 0; i < half; ++i) {
        const double theta = static_cast<double>(pos) * std::pow(base, -2.0 * i / static_cast<double>(head.size()));
        const double a = head[i];
        const double b = head[i + half];
        head[i] = a * std::cos(theta) - b * std::sin(theta);
        head[i + half] = b * std::cos(theta) + a * std::sin(theta);
    }
}

struct RefTaps {
    std::vector<Mat> inputs;  // indexed by ProjectionId::flat()
};

// Straight-line double-precision decoder, independent of the library kernels.
inline Mat reference_forward(const LanguageModel& m, std::span<const TokenId> tokens, RefTaps* taps = nullptr) {
    const auto& c = m.config;
    const std::size_t seq = tokens.size();
    if (taps) taps->inputs.assign(m.projection_count(), {});
    Mat x(seq, std::vector<double>(c.d_model));
    for (std::size_t s = 0; s < seq; ++s)
        for (std::size_t i = 0; i < c.d_model; ++i) x[s][i] = m.embedding(tokens[s], i);

    for (std::size_t n = 0; n < m.layers.size(); ++n) {
        const auto& L = m.layers[n];
        const std::size_t heads = L.live_heads.size();
        const std::size_t hd = c.head_dim;
        const Mat h = ref_rms(x, L.attn_norm_gain, c.norm_eps);
        Mat q = ref_project(h, L[ProjectionKind::Q]);
        Mat k = ref_project(h, L[ProjectionKind::K]);
        const Mat v = ref_project(h, L[ProjectionKind::V]);
        Mat attn(seq, std::vector<double>(heads * hd, 0.0));
        for (std::size_t hh = 0; hh < heads; ++hh) {
            std::vector<std::vector<double>> qh(seq), kh(seq);
            for (std::size_t s = 0; s < seq; ++s) {
                qh[s].assign(q[s].begin() + hh * hd, q[s].begin() + (hh + 1) * hd);
                kh[s].assign(k[s].begin() + hh * hd, k[s].begin() + (hh + 1) * hd);
                ref_rope(qh[s], s, c.rope_base);
                ref_rope(kh[s], s, c.rope_base);
            }
            for (std::size_t s = 0; s < seq; ++s) {
                std::vector<double> sc(s + 1);
                double mx = -1e300;
                for (std::size_t j = 0; j <= s; ++j) {
                    double d = 0.0;
                    for (std::size_t e = 0; e < hd; ++e) d += qh[s][e] * kh[j][e];
                    sc[j] = d / std::sqrt(static_cast<double>(hd));
                    mx = std::max(mx, sc[j]);
                }
                double z = 0.0;
                for (double& w : sc) z += (w = std::exp(w - mx));
                for (std::size_t j = 0; j <= s; ++j)
                    for (std::size_t e = 0; e < hd; ++e) attn[s][hh * hd + e] += sc[j] / z * v[j][hh * hd + e];
            }
        }
        const Mat o = ref_project(attn, L[ProjectionKind::O]);
        for (std::size_t s = 0; s < seq; ++s)
            for (std::size_t i = 0; i < c.d_model; ++i) x[s][i] += o[s][i];

        const Mat h2 = ref_rms(x, L.ffn_norm_gain, c.norm_eps);
        const Mat g = ref_project(h2, L[ProjectionKind::G]);
        const Mat u = ref_project(h2, L[ProjectionKind::U]);
        Mat act = g;
        for (std::size_t s = 0; s < seq; ++s)
            for (std::size_t i = 0; i < act[s].size(); ++i) act[s][i] = g[s][i] / (1.0 + std::exp(-g[s][i])) * u[s][i];
        const Mat d = ref_project(act, L[ProjectionKind::D]);
        for (std::size_t s = 0; s < seq; ++s)
            for (std::size_t i = 0; i < c.d_model; ++i) x[s][i] += d[s][i];

        if (taps) {
            auto& t = taps->inputs;
            const std::size_t base = n * kProjectionsPerLayer;
            t[base + 0] = t[base + 1] = t[base + 2] = h;
            t[base + 3] = attn;
            t[base + 4] = t[base + 5] = h2;
            t[base + 6] = act;
        }
    }
    return ref_project(ref_rms(x, m.final_norm_gain, c.norm_eps), m.lm_head);
}

inline double max_rel_error(const DenseMatrix& got, const Mat& want) {
    double worst = 0.0;
    double scale = 0.0;
    for (const auto& row : want)
        for (double v : row) scale = std::max(scale, std::fabs(v));
    for (std::size_t i = 0; i < got.rows(); ++i)
        for (std::size_t j = 0; j < got.cols(); ++j)
            worst = std::max(worst, std::fabs(got(i, j) - want[i][j]) / std::max(scale, 1e-30));
    return worst;
}

// Random rank matrix with spread, mean exactly representable as 1 after
// normalization.
inline GlobalRank random_rank(std::size_t n_layers, std::mt19937_64& rng,
                              const std::vector<std::size_t>& params_per_kind = {1024, 1024, 1024, 1024, 2752,
                                                                                 2752, 2752}) {
    std::uniform_real_distribution<double> u(0.0, 5.0);
    GlobalRank r;
    r.n_layers = n_layers;
    for (std::size_t i = 0; i < n_layers * kProjectionsPerLayer; ++i) {
        r.raw.push_back(u(rng));
        r.outlier_counts.push_back(0);
        r.param_counts.push_back(params_per_kind[i % kProjectionsPerLayer]);
    }
    r.model_fingerprint = "0000000000000000";
    normalize_rank(r);
    return r;
}

inline std::filesystem::path temp_dir(const std::string& tag) {
    auto p = std::filesystem::temp_directory_path() /
             ("mosaic-" + tag + "-" + std::to_string(std::random_device{}()));
    std::filesystem::create_directories(p);
    return p;
}

}  // namespace testing
