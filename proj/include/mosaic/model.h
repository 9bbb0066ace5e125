#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mosaic/tensor.h"

namespace mosaic {

using TokenId = std::uint32_t;

enum class ProjectionKind : std::uint8_t { Q = 0, K, V, O, G, U, D };

inline constexpr std::size_t kProjectionsPerLayer = 7;
inline constexpr std::array<ProjectionKind, kProjectionsPerLayer> kAllProjections = {
    ProjectionKind::Q, ProjectionKind::K, ProjectionKind::V, ProjectionKind::O,
    ProjectionKind::G, ProjectionKind::U, ProjectionKind::D};

std::string_view projection_name(ProjectionKind kind);
ProjectionKind projection_from_name(std::string_view name);

inline bool is_attention(ProjectionKind k) { return static_cast<int>(k) <= static_cast<int>(ProjectionKind::O); }

struct ProjectionId {
    std::size_t layer = 0;
    ProjectionKind kind = ProjectionKind::Q;

    std::size_t flat() const { return layer * kProjectionsPerLayer + static_cast<std::size_t>(kind); }
    static ProjectionId from_flat(std::size_t i) {
        return {i / kProjectionsPerLayer, static_cast<ProjectionKind>(i % kProjectionsPerLayer)};
    }
    std::string label() const;
    bool operator==(const ProjectionId&) const = default;
};

// n_heads and d_ff describe the dense architecture. A structurally pruned
// layer keeps its surviving head and channel ids in DecoderLayer instead.
struct ModelConfig {
    std::size_t n_layers = 0;
    std::size_t d_model = 0;
    std::size_t n_heads = 0;
    std::size_t head_dim = 0;
    std::size_t d_ff = 0;
    std::size_t vocab_size = 0;
    std::size_t max_seq_len = 0;
    float norm_eps = 1e-5f;
    float rope_base = 10000.0f;

    bool operator==(const ModelConfig&) const = default;
};

struct DecoderLayer {
    std::array<DenseMatrix, kProjectionsPerLayer> proj;
    DenseVector attn_norm_gain;
    DenseVector ffn_norm_gain;
    std::vector<std::size_t> live_heads;
    std::vector<std::size_t> live_ff_channels;

    DenseMatrix& operator[](ProjectionKind k) { return proj[static_cast<std::size_t>(k)]; }
    const DenseMatrix& operator[](ProjectionKind k) const { return proj[static_cast<std::size_t>(k)]; }

    bool operator==(const DecoderLayer&) const = default;
};

struct LanguageModel {
    ModelConfig config;
    DenseMatrix embedding;  // [vocab, d_model]
    std::vector<DecoderLayer> layers;
    DenseVector final_norm_gain;
    DenseMatrix lm_head;  // [vocab, d_model]

    const DenseMatrix& projection(ProjectionId id) const { return layers[id.layer][id.kind]; }
    DenseMatrix& projection(ProjectionId id) { return layers[id.layer][id.kind]; }
    std::size_t projection_count() const { return layers.size() * kProjectionsPerLayer; }

    bool operator==(const LanguageModel&) const = default;
};

// Shape of projection `kind` in the dense (unpruned) architecture.
std::pair<std::size_t, std::size_t> dense_projection_shape(const ModelConfig& cfg, ProjectionKind kind);

// Throws ShapeError on any broken structural invariant.
void validate(const LanguageModel& model);

std::size_t projection_param_count(const LanguageModel& model);
std::size_t total_param_count(const LanguageModel& model);

// FNV-1a over config, structure and every tensor byte, as 16 hex digits.
std::string model_fingerprint(const LanguageModel& model);

struct RandomModelOptions {
    std::uint64_t seed = 1;
    // Fraction of weights drawn from a widened distribution; varied per
    // projection so outlier ratios differ across the model.
    double heavy_tail_fraction = 0.01;
    float heavy_tail_scale = 8.0f;
};

LanguageModel random_model(const ModelConfig& cfg, const RandomModelOptions& opts = {});

// Receives the input matrix of every projection (one row per position).
class ActivationSink {
public:
    virtual ~ActivationSink() = default;
    virtual void observe(ProjectionId id, const DenseMatrix& inputs) = 0;
};

DenseMatrix forward(const LanguageModel& model, std::span<const TokenId> tokens);
DenseMatrix forward_with_taps(const LanguageModel& model, std::span<const TokenId> tokens,
                              ActivationSink& sink);

// Greedy continuation without a KV cache: each step reruns the full prefix.
std::vector<TokenId> generate_greedy(const LanguageModel& model, std::span<const TokenId> prompt,
                                     std::size_t new_tokens);

struct ActivationNorms {
    std::vector<DenseVector> per_projection;  // indexed by ProjectionId::flat()
    std::size_t token_count = 0;

    const DenseVector& at(ProjectionId id) const { return per_projection.at(id.flat()); }
};

// Running per-input-channel sums of squares, 64-bit. Partial accumulators
// from parallel calibration runs combine with merge().
class NormAccumulator : public ActivationSink {
public:
    explicit NormAccumulator(std::size_t n_layers);

    void observe(ProjectionId id, const DenseMatrix& inputs) override;
    void merge(const NormAccumulator& other);

    std::size_t token_count() const { return tokens_; }
    const std::vector<std::vector<double>>& sums() const { return sums_; }

private:
    std::vector<std::vector<double>> sums_;
    std::vector<std::size_t> rows_seen_;
    std::size_t tokens_ = 0;
};

ActivationNorms finalize_norms(const NormAccumulator& acc);

}  // namespace mosaic
