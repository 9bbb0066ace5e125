#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "mosaic/model.h"
#include "mosaic/tensor.h"

namespace mosaic {

inline constexpr double kDefaultAlpha = 5.0;

// |w[i,j]| * input_norm[j] for one projection.
struct WeightMetricMatrix {
    ProjectionId projection;
    DenseMatrix values;
};

struct ProjectionRank {
    ProjectionId projection;
    std::size_t outlier_count = 0;
    std::size_t param_count = 0;
    double rank = 0.0;  // outlier_count / param_count * 100
};

struct CalibrationInfo {
    std::size_t sample_count = 0;
    std::size_t seq_len = 0;
    std::string corpus;

    bool operator==(const CalibrationInfo&) const = default;
};

enum class RankScope { Projection, Layer, Uniform };

std::string_view rank_scope_name(RankScope scope);
RankScope rank_scope_from_name(std::string_view name);

// Normalized N x M importance matrix with mean 1. `raw` keeps the
// un-normalized outlier percentages it was derived from.
struct GlobalRank {
    double alpha = kDefaultAlpha;
    RankScope scope = RankScope::Projection;
    std::size_t n_layers = 0;
    std::vector<double> entries;  // row-major [n_layers][7]
    std::vector<double> raw;
    std::vector<std::size_t> outlier_counts;
    std::vector<std::size_t> param_counts;
    std::string model_fingerprint;
    CalibrationInfo calibration;
    bool degenerate = false;

    double entry(ProjectionId id) const { return entries.at(id.flat()); }
    bool operator==(const GlobalRank&) const = default;
};

WeightMetricMatrix weight_metric(const DenseMatrix& weights, const DenseVector& input_norms,
                                 ProjectionId id = {});

std::vector<WeightMetricMatrix> all_weight_metrics(const LanguageModel& model, const ActivationNorms& norms);

// Entries strictly greater than alpha times the projection's own mean.
std::size_t count_projection_outliers(const WeightMetricMatrix& metric, double alpha);

// Same test against the mean of all seven projections of one layer.
std::size_t count_layer_outliers(std::span<const WeightMetricMatrix> layer_metrics, double alpha);

std::vector<ProjectionRank> rank_projections(const LanguageModel& model, const ActivationNorms& norms,
                                             double alpha);

// Normalize raw ranks to mean 1. An all-zero input falls back to uniform
// ones and sets `degenerate`.
void normalize_rank(GlobalRank& rank);

GlobalRank build_global_rank(const LanguageModel& model, const ActivationNorms& norms, double alpha,
                             const CalibrationInfo& calibration = {});

// Layer-granularity baseline: outlier ratio per layer, broadcast to all
// seven projections of that layer so it can drive the same planner.
GlobalRank build_layer_rank(const LanguageModel& model, const ActivationNorms& norms, double alpha,
                            const CalibrationInfo& calibration = {});

// All-ones rank: reduces allocation to global pruning.
GlobalRank uniform_rank(const LanguageModel& model);

// Streams `samples` consecutive non-overlapping windows of `seq_len` tokens
// through the model and returns the pooled input norms.
ActivationNorms collect_activation_norms(const LanguageModel& model, std::span<const TokenId> stream,
                                         std::size_t samples, std::size_t seq_len);

}  // namespace mosaic
