#include "mosaic/ranking.h"

#include <cmath>
#include <string>

#include "mosaic/errors.h"
#include "mosaic/log.h"

namespace mosaic {

std::string_view rank_scope_name(RankScope scope) {
    switch (scope) {
        case RankScope::Projection:
            return "projection";
        case RankScope::Layer:
            return "layer";
        case RankScope::Uniform:
            return "global";
    }
    return "projection";
}

RankScope rank_scope_from_name(std::string_view name) {
    if (name == "projection") return RankScope::Projection;
    if (name == "layer") return RankScope::Layer;
    if (name == "global") return RankScope::Uniform;
    throw FormatError("unknown rank scope '" + std::string(name) + "'");
}

WeightMetricMatrix weight_metric(const DenseMatrix& weights, const DenseVector& input_norms, ProjectionId id) {
    if (input_norms.size() != weights.cols()) {
        throw ShapeError("weight_metric: " + std::to_string(input_norms.size()) + " norms for " +
                         std::to_string(weights.cols()) + " input channels");
    }
    WeightMetricMatrix out{id, DenseMatrix(weights.rows(), weights.cols())};
    for (std::size_t i = 0; i < weights.rows(); ++i) {
        const auto w = weights.row(i);
        auto dst = out.values.row(i);
        for (std::size_t j = 0; j < w.size(); ++j) dst[j] = std::fabs(w[j]) * input_norms[j];
    }
    return out;
}

std::vector<WeightMetricMatrix> all_weight_metrics(const LanguageModel& model, const ActivationNorms& norms) {
    if (norms.per_projection.size() != model.projection_count()) {
        throw ShapeError("activation norms cover " + std::to_string(norms.per_projection.size()) +
                         " projections, model has " + std::to_string(model.projection_count()));
    }
    std::vector<WeightMetricMatrix> out;
    out.reserve(model.projection_count());
    for (std::size_t i = 0; i < model.projection_count(); ++i) {
        const auto id = ProjectionId::from_flat(i);
        out.push_back(weight_metric(model.projection(id), norms.at(id), id));
    }
    return out;
}

namespace {

double mean_of(std::span<const float> v) {
    double s = 0.0;
    for (float x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

std::size_t count_above(std::span<const float> v, double threshold) {
    std::size_t n = 0;
    for (float x : v) n += static_cast<double>(x) > threshold ? 1 : 0;
    return n;
}

}  // namespace

std::size_t count_projection_outliers(const WeightMetricMatrix& metric, double alpha) {
    if (!(alpha > 0.0)) throw ArgumentError("alpha must be positive");
    const auto v = metric.values.values();
    return count_above(v, alpha * mean_of(v));
}

std::size_t count_layer_outliers(std::span<const WeightMetricMatrix> layer_metrics, double alpha) {
    if (!(alpha > 0.0)) throw ArgumentError("alpha must be positive");
    if (layer_metrics.size() != kProjectionsPerLayer) {
        throw InputError("count_layer_outliers: expected 7 projections, got " +
                         std::to_string(layer_metrics.size()));
    }
    std::array<bool, kProjectionsPerLayer> seen{};
    double sum = 0.0;
    std::size_t count = 0;
    for (const auto& m : layer_metrics) {
        seen[static_cast<std::size_t>(m.projection.kind)] = true;
        for (float x : m.values.values()) sum += x;
        count += m.values.size();
    }
    for (bool s : seen) {
        if (!s) throw InputError("count_layer_outliers: missing projection in layer");
    }
    const double threshold = alpha * (count == 0 ? 0.0 : sum / static_cast<double>(count));
    std::size_t outliers = 0;
    for (const auto& m : layer_metrics) outliers += count_above(m.values.values(), threshold);
    return outliers;
}

std::vector<ProjectionRank> rank_projections(const LanguageModel& model, const ActivationNorms& norms,
                                             double alpha) {
    const auto metrics = all_weight_metrics(model, norms);
    std::vector<ProjectionRank> out;
    out.reserve(metrics.size());
    for (const auto& m : metrics) {
        ProjectionRank r;
        r.projection = m.projection;
        r.param_count = m.values.size();
        r.outlier_count = count_projection_outliers(m, alpha);
        r.rank = r.param_count == 0 ? 0.0
                                    : static_cast<double>(r.outlier_count) /
                                          static_cast<double>(r.param_count) * 100.0;
        out.push_back(r);
    }
    return out;
}

void normalize_rank(GlobalRank& rank) {
    double sum = 0.0;
    for (double r : rank.raw) sum += r;
    rank.entries.assign(rank.raw.size(), 1.0);
    rank.degenerate = !(sum > 0.0);
    if (rank.degenerate) {
        log::warn("global rank has no outliers anywhere; falling back to uniform ranks");
        return;
    }
    const double mean = sum / static_cast<double>(rank.raw.size());
    for (std::size_t i = 0; i < rank.raw.size(); ++i) rank.entries[i] = rank.raw[i] / mean;
}

namespace {

GlobalRank empty_rank(const LanguageModel& model, double alpha, RankScope scope, const CalibrationInfo& cal) {
    GlobalRank rank;
    rank.alpha = alpha;
    rank.scope = scope;
    rank.n_layers = model.layers.size();
    rank.model_fingerprint = model_fingerprint(model);
    rank.calibration = cal;
    rank.param_counts.reserve(model.projection_count());
    for (std::size_t i = 0; i < model.projection_count(); ++i) {
        rank.param_counts.push_back(model.projection(ProjectionId::from_flat(i)).size());
    }
    return rank;
}

}  // namespace

GlobalRank build_global_rank(const LanguageModel& model, const ActivationNorms& norms, double alpha,
                             const CalibrationInfo& calibration) {
    if (norms.token_count == 0) throw StateError("build_global_rank: norms cover no tokens");
    GlobalRank rank = empty_rank(model, alpha, RankScope::Projection, calibration);
    for (const auto& pr : rank_projections(model, norms, alpha)) {
        rank.outlier_counts.push_back(pr.outlier_count);
        rank.raw.push_back(pr.rank);
    }
    normalize_rank(rank);
    return rank;
}

GlobalRank build_layer_rank(const LanguageModel& model, const ActivationNorms& norms, double alpha,
                            const CalibrationInfo& calibration) {
    if (norms.token_count == 0) throw StateError("build_layer_rank: norms cover no tokens");
    GlobalRank rank = empty_rank(model, alpha, RankScope::Layer, calibration);
    const auto metrics = all_weight_metrics(model, norms);
    for (std::size_t n = 0; n < model.layers.size(); ++n) {
        const std::span<const WeightMetricMatrix> layer(metrics.data() + n * kProjectionsPerLayer,
                                                        kProjectionsPerLayer);
        std::size_t params = 0;
        for (const auto& m : layer) params += m.values.size();
        const std::size_t outliers = count_layer_outliers(layer, alpha);
        const double ratio = static_cast<double>(outliers) / static_cast<double>(params) * 100.0;
        for (std::size_t m = 0; m < kProjectionsPerLayer; ++m) {
            rank.outlier_counts.push_back(outliers);
            rank.raw.push_back(ratio);
        }
    }
    normalize_rank(rank);
    return rank;
}

GlobalRank uniform_rank(const LanguageModel& model) {
    GlobalRank rank = empty_rank(model, kDefaultAlpha, RankScope::Uniform, {});
    rank.raw.assign(model.projection_count(), 1.0);
    rank.outlier_counts.assign(model.projection_count(), 0);
    rank.entries.assign(model.projection_count(), 1.0);
    return rank;
}

ActivationNorms collect_activation_norms(const LanguageModel& model, std::span<const TokenId> stream,
                                         std::size_t samples, std::size_t seq_len) {
    if (samples == 0 || seq_len == 0) throw ArgumentError("calibration needs samples >= 1 and seq_len >= 1");
    if (seq_len > model.config.max_seq_len) {
        throw InputError("calibration seq_len " + std::to_string(seq_len) + " exceeds max_seq_len " +
                         std::to_string(model.config.max_seq_len));
    }
    const std::size_t available = stream.size() / seq_len;
    if (available == 0) throw InputError("calibration stream shorter than one window");
    if (available < samples) {
        log::warn("calibration stream holds " + std::to_string(available) + " windows, " +
                  std::to_string(samples) + " requested; using all of them");
        samples = available;
    }
    NormAccumulator acc(model.layers.size());
    for (std::size_t s = 0; s < samples; ++s) {
        forward_with_taps(model, stream.subspan(s * seq_len, seq_len), acc);
    }
    return finalize_norms(acc);
}

}  // namespace mosaic
