#include "mosaic/model.h"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <random>
#include <string>

#include "mosaic/errors.h"

namespace mosaic {

namespace {

constexpr std::array<std::string_view, kProjectionsPerLayer> kNames = {"q", "k", "v", "o",
                                                                       "g", "u", "d"};

std::string dims(std::size_t r, std::size_t c) {
    return std::to_string(r) + "x" + std::to_string(c);
}

void expect_shape(const DenseMatrix& m, std::size_t rows, std::size_t cols, const std::string& what) {
    if (m.rows() != rows || m.cols() != cols) {
        throw ShapeError(what + ": expected " + dims(rows, cols) + ", got " + dims(m.rows(), m.cols()));
    }
}

void check_ids(const std::vector<std::size_t>& ids, std::size_t limit, const std::string& what) {
    if (ids.empty()) throw ShapeError(what + ": no live entries");
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] >= limit) throw ShapeError(what + ": id out of range");
        if (i > 0 && ids[i] <= ids[i - 1]) throw ShapeError(what + ": ids must be strictly increasing");
    }
}

}  // namespace

std::string_view projection_name(ProjectionKind kind) { return kNames[static_cast<std::size_t>(kind)]; }

ProjectionKind projection_from_name(std::string_view name) {
    for (std::size_t i = 0; i < kNames.size(); ++i) {
        if (kNames[i] == name) return static_cast<ProjectionKind>(i);
    }
    throw InputError("unknown projection name '" + std::string(name) + "'");
}

std::string ProjectionId::label() const {
    return "layers." + std::to_string(layer) + "." + std::string(projection_name(kind));
}

std::pair<std::size_t, std::size_t> dense_projection_shape(const ModelConfig& cfg, ProjectionKind kind) {
    const std::size_t attn = cfg.n_heads * cfg.head_dim;
    switch (kind) {
        case ProjectionKind::Q:
        case ProjectionKind::K:
        case ProjectionKind::V:
            return {attn, cfg.d_model};
        case ProjectionKind::O:
            return {cfg.d_model, attn};
        case ProjectionKind::G:
        case ProjectionKind::U:
            return {cfg.d_ff, cfg.d_model};
        case ProjectionKind::D:
            return {cfg.d_model, cfg.d_ff};
    }
    return {0, 0};
}

void validate(const LanguageModel& model) {
    const auto& cfg = model.config;
    if (cfg.n_heads * cfg.head_dim != cfg.d_model) {
        throw ShapeError("n_heads * head_dim must equal d_model");
    }
    if (cfg.head_dim % 2 != 0) throw ShapeError("head_dim must be even for rotary encoding");
    if (cfg.max_seq_len < 1) throw ShapeError("max_seq_len must be >= 1");
    if (cfg.vocab_size < 1) throw ShapeError("vocab_size must be >= 1");
    if (model.layers.size() != cfg.n_layers) throw ShapeError("layer count does not match config");
    expect_shape(model.embedding, cfg.vocab_size, cfg.d_model, "embedding");
    expect_shape(model.lm_head, cfg.vocab_size, cfg.d_model, "lm_head");
    if (model.final_norm_gain.size() != cfg.d_model) throw ShapeError("final norm length");

    for (std::size_t n = 0; n < model.layers.size(); ++n) {
        const auto& layer = model.layers[n];
        const std::string where = "layer " + std::to_string(n);
        check_ids(layer.live_heads, cfg.n_heads, where + " live_heads");
        check_ids(layer.live_ff_channels, cfg.d_ff, where + " live_ff_channels");
        const std::size_t attn = layer.live_heads.size() * cfg.head_dim;
        const std::size_t ff = layer.live_ff_channels.size();
        expect_shape(layer[ProjectionKind::Q], attn, cfg.d_model, where + " q");
        expect_shape(layer[ProjectionKind::K], attn, cfg.d_model, where + " k");
        expect_shape(layer[ProjectionKind::V], attn, cfg.d_model, where + " v");
        expect_shape(layer[ProjectionKind::O], cfg.d_model, attn, where + " o");
        expect_shape(layer[ProjectionKind::G], ff, cfg.d_model, where + " g");
        expect_shape(layer[ProjectionKind::U], ff, cfg.d_model, where + " u");
        expect_shape(layer[ProjectionKind::D], cfg.d_model, ff, where + " d");
        if (layer.attn_norm_gain.size() != cfg.d_model || layer.ffn_norm_gain.size() != cfg.d_model) {
            throw ShapeError(where + ": norm gain length");
        }
    }
}

std::size_t projection_param_count(const LanguageModel& model) {
    std::size_t total = 0;
    for (const auto& layer : model.layers) {
        for (const auto& p : layer.proj) total += p.size();
    }
    return total;
}

std::size_t total_param_count(const LanguageModel& model) {
    std::size_t total = model.embedding.size() + model.lm_head.size() + model.final_norm_gain.size();
    for (const auto& layer : model.layers) {
        total += layer.attn_norm_gain.size() + layer.ffn_norm_gain.size();
    }
    return total + projection_param_count(model);
}

namespace {

struct Fnv1a {
    std::uint64_t state = 0xcbf29ce484222325ull;

    void bytes(const void* data, std::size_t n) {
        const auto* p = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < n; ++i) {
            state ^= p[i];
            state *= 0x100000001b3ull;
        }
    }
    void u64(std::uint64_t v) {
        unsigned char b[8];
        for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
        bytes(b, 8);
    }
    void f32(float f) {
        std::uint32_t bits;
        std::memcpy(&bits, &f, 4);
        u64(bits);
    }
    void floats(std::span<const float> v) {
        u64(v.size());
        for (float f : v) f32(f);
    }
};

}  // namespace

std::string model_fingerprint(const LanguageModel& model) {
    Fnv1a h;
    const auto& c = model.config;
    for (std::size_t v : {c.n_layers, c.d_model, c.n_heads, c.head_dim, c.d_ff, c.vocab_size, c.max_seq_len}) {
        h.u64(v);
    }
    h.f32(c.norm_eps);
    h.f32(c.rope_base);
    h.floats(model.embedding.values());
    for (const auto& layer : model.layers) {
        h.u64(layer.live_heads.size());
        for (auto id : layer.live_heads) h.u64(id);
        h.u64(layer.live_ff_channels.size());
        for (auto id : layer.live_ff_channels) h.u64(id);
        for (const auto& p : layer.proj) h.floats(p.values());
        h.floats(layer.attn_norm_gain.values());
        h.floats(layer.ffn_norm_gain.values());
    }
    h.floats(model.final_norm_gain.values());
    h.floats(model.lm_head.values());
    static constexpr char kHex[] = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 0; i < 16; ++i) out[15 - i] = kHex[(h.state >> (4 * i)) & 0xf];
    return out;
}

LanguageModel random_model(const ModelConfig& cfg, const RandomModelOptions& opts) {
    std::mt19937_64 rng(opts.seed);
    std::normal_distribution<float> normal(0.0f, 1.0f);
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    auto fill = [&](DenseMatrix& m, float scale, double heavy) {
        for (float& v : m.values()) {
            float w = normal(rng) * scale;
            if (unit(rng) < heavy) w *= opts.heavy_tail_scale;
            v = w;
        }
    };

    LanguageModel model;
    model.config = cfg;
    model.embedding = DenseMatrix(cfg.vocab_size, cfg.d_model);
    fill(model.embedding, 1.0f, 0.0);
    model.lm_head = DenseMatrix(cfg.vocab_size, cfg.d_model);
    fill(model.lm_head, 1.0f / std::sqrt(static_cast<float>(cfg.d_model)), 0.0);
    model.final_norm_gain = DenseVector(cfg.d_model, 1.0f);

    model.layers.resize(cfg.n_layers);
    for (auto& layer : model.layers) {
        for (ProjectionKind kind : kAllProjections) {
            const auto [rows, cols] = dense_projection_shape(cfg, kind);
            layer[kind] = DenseMatrix(rows, cols);
            // Spread the heavy-tail share over [0.25x, 1.75x] so projections
            // carry distinguishable outlier ratios.
            const double heavy = opts.heavy_tail_fraction * (0.25 + 1.5 * unit(rng));
            fill(layer[kind], 1.0f / std::sqrt(static_cast<float>(cols)), heavy);
        }
        layer.attn_norm_gain = DenseVector(cfg.d_model);
        layer.ffn_norm_gain = DenseVector(cfg.d_model);
        for (float& g : layer.attn_norm_gain.values()) g = 1.0f + 0.1f * normal(rng);
        for (float& g : layer.ffn_norm_gain.values()) g = 1.0f + 0.1f * normal(rng);
        layer.live_heads.resize(cfg.n_heads);
        for (std::size_t h = 0; h < cfg.n_heads; ++h) layer.live_heads[h] = h;
        layer.live_ff_channels.resize(cfg.d_ff);
        for (std::size_t c = 0; c < cfg.d_ff; ++c) layer.live_ff_channels[c] = c;
    }
    validate(model);
    return model;
}

namespace {

// Rotate-half rotary encoding: dimension i pairs with i + head_dim/2, the
// convention of LLaMA checkpoints in the common Python ecosystem.
class Rotary {
public:
    Rotary(std::size_t seq, std::size_t head_dim, float base) : half_(head_dim / 2) {
        cos_.resize(seq * half_);
        sin_.resize(seq * half_);
        for (std::size_t pos = 0; pos < seq; ++pos) {
            for (std::size_t i = 0; i < half_; ++i) {
                const double freq = std::pow(static_cast<double>(base), -2.0 * static_cast<double>(i) /
                                                                            static_cast<double>(head_dim));
                const double angle = static_cast<double>(pos) * freq;
                cos_[pos * half_ + i] = static_cast<float>(std::cos(angle));
                sin_[pos * half_ + i] = static_cast<float>(std::sin(angle));
            }
        }
    }

    void apply(float* head, std::size_t pos) const {
        const float* c = cos_.data() + pos * half_;
        const float* s = sin_.data() + pos * half_;
        for (std::size_t i = 0; i < half_; ++i) {
            const float x0 = head[i];
            const float x1 = head[i + half_];
            head[i] = x0 * c[i] - x1 * s[i];
            head[i + half_] = x1 * c[i] + x0 * s[i];
        }
    }

private:
    std::size_t half_;
    std::vector<float> cos_;
    std::vector<float> sin_;
};

DenseMatrix norm_rows(const DenseMatrix& x, const DenseVector& gain, float eps) {
    DenseMatrix out(x.rows(), x.cols());
    for (std::size_t i = 0; i < x.rows(); ++i) rms_norm_into(x.row(i), gain.values(), eps, out.row(i));
    return out;
}

void add_into(DenseMatrix& dst, const DenseMatrix& src) {
    auto d = dst.values();
    auto s = src.values();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

DenseMatrix attention(const DenseMatrix& q_in, const DenseMatrix& k_in, const DenseMatrix& v,
                      std::size_t heads, std::size_t head_dim, const Rotary& rope) {
    const std::size_t seq = q_in.rows();
    DenseMatrix q = q_in;
    DenseMatrix k = k_in;
    for (std::size_t s = 0; s < seq; ++s) {
        for (std::size_t h = 0; h < heads; ++h) {
            rope.apply(q.row(s).data() + h * head_dim, s);
            rope.apply(k.row(s).data() + h * head_dim, s);
        }
    }
    const float scale = 1.0f / std::sqrt(static_cast<float>(head_dim));
    DenseMatrix out(seq, heads * head_dim);
    std::vector<float> scores(seq);
    for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t off = h * head_dim;
        for (std::size_t s = 0; s < seq; ++s) {
            const float* qs = q.row(s).data() + off;
            for (std::size_t j = 0; j <= s; ++j) {
                const float* kj = k.row(j).data() + off;
                float acc = 0.0f;
                for (std::size_t d = 0; d < head_dim; ++d) acc += qs[d] * kj[d];
                scores[j] = acc * scale;
            }
            softmax_inplace(std::span<float>(scores.data(), s + 1));
            float* dst = out.row(s).data() + off;
            for (std::size_t j = 0; j <= s; ++j) {
                const float p = scores[j];
                const float* vj = v.row(j).data() + off;
                for (std::size_t d = 0; d < head_dim; ++d) dst[d] += p * vj[d];
            }
        }
    }
    return out;
}

DenseMatrix run(const LanguageModel& model, std::span<const TokenId> tokens, ActivationSink* sink) {
    const auto& cfg = model.config;
    if (tokens.empty()) throw InputError("forward: empty token sequence");
    if (tokens.size() > cfg.max_seq_len) {
        throw InputError("forward: sequence length " + std::to_string(tokens.size()) +
                         " exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
    }
    for (TokenId t : tokens) {
        if (t >= cfg.vocab_size) {
            throw InputError("forward: token id " + std::to_string(t) + " out of range");
        }
    }

    const std::size_t seq = tokens.size();
    DenseMatrix x(seq, cfg.d_model);
    for (std::size_t s = 0; s < seq; ++s) {
        std::copy_n(model.embedding.row(tokens[s]).begin(), cfg.d_model, x.row(s).begin());
    }
    const Rotary rope(seq, cfg.head_dim, cfg.rope_base);

    auto tap = [&](std::size_t n, ProjectionKind kind, const DenseMatrix& in) {
        if (sink) sink->observe({n, kind}, in);
    };

    for (std::size_t n = 0; n < model.layers.size(); ++n) {
        const auto& layer = model.layers[n];
        const DenseMatrix h = norm_rows(x, layer.attn_norm_gain, cfg.norm_eps);
        tap(n, ProjectionKind::Q, h);
        tap(n, ProjectionKind::K, h);
        tap(n, ProjectionKind::V, h);
        const DenseMatrix q = matmul_transposed(h, layer[ProjectionKind::Q]);
        const DenseMatrix k = matmul_transposed(h, layer[ProjectionKind::K]);
        const DenseMatrix v = matmul_transposed(h, layer[ProjectionKind::V]);
        const DenseMatrix attn = attention(q, k, v, layer.live_heads.size(), cfg.head_dim, rope);
        tap(n, ProjectionKind::O, attn);
        add_into(x, matmul_transposed(attn, layer[ProjectionKind::O]));

        const DenseMatrix h2 = norm_rows(x, layer.ffn_norm_gain, cfg.norm_eps);
        tap(n, ProjectionKind::G, h2);
        tap(n, ProjectionKind::U, h2);
        DenseMatrix gate = matmul_transposed(h2, layer[ProjectionKind::G]);
        const DenseMatrix up = matmul_transposed(h2, layer[ProjectionKind::U]);
        auto gv = gate.values();
        auto uv = up.values();
        for (std::size_t i = 0; i < gv.size(); ++i) gv[i] = silu(gv[i]) * uv[i];
        tap(n, ProjectionKind::D, gate);
        add_into(x, matmul_transposed(gate, layer[ProjectionKind::D]));
    }

    const DenseMatrix final = norm_rows(x, model.final_norm_gain, cfg.norm_eps);
    return matmul_transposed(final, model.lm_head);
}

}  // namespace

DenseMatrix forward(const LanguageModel& model, std::span<const TokenId> tokens) {
    return run(model, tokens, nullptr);
}

DenseMatrix forward_with_taps(const LanguageModel& model, std::span<const TokenId> tokens,
                              ActivationSink& sink) {
    return run(model, tokens, &sink);
}

std::vector<TokenId> generate_greedy(const LanguageModel& model, std::span<const TokenId> prompt,
                                     std::size_t new_tokens) {
    std::vector<TokenId> seq(prompt.begin(), prompt.end());
    for (std::size_t step = 0; step < new_tokens; ++step) {
        const DenseMatrix logits = forward(model, seq);
        const auto last = logits.row(logits.rows() - 1);
        const auto best = std::max_element(last.begin(), last.end()) - last.begin();
        seq.push_back(static_cast<TokenId>(best));
    }
    return std::vector<TokenId>(seq.begin() + static_cast<std::ptrdiff_t>(prompt.size()), seq.end());
}

NormAccumulator::NormAccumulator(std::size_t n_layers)
    : sums_(n_layers * kProjectionsPerLayer), rows_seen_(n_layers * kProjectionsPerLayer, 0) {}

void NormAccumulator::observe(ProjectionId id, const DenseMatrix& inputs) {
    const std::size_t slot = id.flat();
    if (slot >= sums_.size()) throw ShapeError("norm accumulator: projection outside model");
    auto& acc = sums_[slot];
    if (acc.empty()) {
        acc.assign(inputs.cols(), 0.0);
    } else if (acc.size() != inputs.cols()) {
        throw ShapeError("norm accumulator: input width changed for " + id.label());
    }
    for (std::size_t i = 0; i < inputs.rows(); ++i) {
        const auto r = inputs.row(i);
        for (std::size_t j = 0; j < r.size(); ++j) acc[j] += static_cast<double>(r[j]) * r[j];
    }
    rows_seen_[slot] += inputs.rows();
    if (slot == 0) tokens_ += inputs.rows();
}

void NormAccumulator::merge(const NormAccumulator& other) {
    if (other.sums_.size() != sums_.size()) throw ShapeError("norm accumulator: layer count mismatch");
    for (std::size_t s = 0; s < sums_.size(); ++s) {
        const auto& src = other.sums_[s];
        if (src.empty()) continue;
        auto& dst = sums_[s];
        if (dst.empty()) dst.assign(src.size(), 0.0);
        if (dst.size() != src.size()) throw ShapeError("norm accumulator: width mismatch on merge");
        for (std::size_t j = 0; j < src.size(); ++j) dst[j] += src[j];
        rows_seen_[s] += other.rows_seen_[s];
    }
    tokens_ += other.tokens_;
}

ActivationNorms finalize_norms(const NormAccumulator& acc) {
    if (acc.token_count() == 0) throw StateError("finalize_norms: no tokens accumulated");
    ActivationNorms norms;
    norms.token_count = acc.token_count();
    norms.per_projection.reserve(acc.sums().size());
    for (const auto& s : acc.sums()) {
        if (s.empty()) throw StateError("finalize_norms: a projection received no activations");
        DenseVector v(s.size());
        for (std::size_t j = 0; j < s.size(); ++j) v[j] = static_cast<float>(std::sqrt(s[j]));
        norms.per_projection.push_back(std::move(v));
    }
    return norms;
}

}  // namespace mosaic
