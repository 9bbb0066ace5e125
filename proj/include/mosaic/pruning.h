#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mosaic/model.h"
#include "mosaic/ranking.h"

namespace mosaic {

inline constexpr double kDefaultLambda = 0.08;
inline constexpr double kDefaultStructuredShare = 0.5;
// No projection is ever planned above this sparsity.
inline constexpr double kTargetCeiling = 0.95;

enum class PruneCategory { Unstructured, Structured, Composite };

std::string_view category_name(PruneCategory c);
PruneCategory category_from_name(std::string_view name);

struct PruningPlan {
    double p = 0.0;
    double lambda = kDefaultLambda;
    std::size_t n_layers = 0;
    std::vector<double> targets;  // row-major [n_layers][7]
    std::vector<std::size_t> param_counts;
    PruneCategory category = PruneCategory::Unstructured;
    double structured_share = kDefaultStructuredShare;
    RankScope scope = RankScope::Projection;
    std::string rank_fingerprint;
    std::vector<std::string> warnings;

    double target(ProjectionId id) const { return targets.at(id.flat()); }
    double weighted_mean() const;
    bool operator==(const PruningPlan&) const = default;
};

// Linear modulation around p: higher rank, lower target. Targets are held
// inside [max(0, p - lambda), min(0.95, p + lambda)] and shifted until their
// parameter-weighted mean is exactly p. Throws AllocationError if no such
// assignment exists.
PruningPlan allocate_targets(const GlobalRank& rank, double p, double lambda = kDefaultLambda);
// Same, after checking the rank was built for this model.
PruningPlan allocate_targets(const GlobalRank& rank, double p, double lambda, const LanguageModel& model);

enum class DeviceTier { Cloud, Desktop, Soc, CpuOnly };

std::string_view tier_name(DeviceTier t);
DeviceTier tier_from_name(std::string_view name);

struct DeviceProfile {
    std::uint64_t gpu_memory_bytes = 0;
    bool has_sparse_accelerator = false;
    DeviceTier tier = DeviceTier::Desktop;
};

PruneCategory select_category(const DeviceProfile& profile, std::uint64_t model_size_bytes);

// Byte-per-element mask over the current (possibly shrunk) weight shape;
// 1 marks a zeroed parameter. Empty means nothing masked.
struct Mask {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<std::uint8_t> bits;

    std::size_t count() const;
    bool empty() const { return bits.empty(); }
    bool operator==(const Mask&) const = default;
};

struct LedgerEntry {
    std::size_t original_params = 0;
    std::size_t zeroed_params = 0;
    std::size_t removed_params = 0;
    // Structure removed more than this projection's target on its own.
    bool over_delivered = false;

    double effective_sparsity() const {
        return original_params == 0 ? 0.0
                                    : static_cast<double>(zeroed_params + removed_params) /
                                          static_cast<double>(original_params);
    }
    bool operator==(const LedgerEntry&) const = default;
};

struct SparsityLedger {
    std::vector<LedgerEntry> per_projection;  // indexed by ProjectionId::flat()

    LedgerEntry totals() const;
    bool operator==(const SparsityLedger&) const = default;
};

struct PrunedModel {
    LanguageModel model;
    std::vector<Mask> masks;  // indexed by ProjectionId::flat()
    SparsityLedger ledger;
    PruningPlan plan;
    std::vector<std::string> warnings;

    static PrunedModel from_dense(LanguageModel model);
    std::size_t live_param_count() const;
};

// Ledger derived from tensor shapes and mask bits alone.
SparsityLedger recount_ledger(const LanguageModel& model, std::span<const Mask> masks);

PrunedModel unstructured_prune(const PrunedModel& input, const PruningPlan& plan,
                               std::span<const WeightMetricMatrix> metrics);
PrunedModel unstructured_prune(const LanguageModel& model, const PruningPlan& plan,
                               std::span<const WeightMetricMatrix> metrics);

PrunedModel structured_prune(const PrunedModel& input, const PruningPlan& plan);
PrunedModel structured_prune(const LanguageModel& model, const PruningPlan& plan);

PrunedModel composite_prune(const PrunedModel& input, const PruningPlan& plan,
                            std::span<const WeightMetricMatrix> metrics);
PrunedModel composite_prune(const LanguageModel& model, const PruningPlan& plan,
                            std::span<const WeightMetricMatrix> metrics);

// Dispatches on plan.category. Metrics are ignored for Structured.
PrunedModel prune(const LanguageModel& model, const PruningPlan& plan,
                  std::span<const WeightMetricMatrix> metrics);

// Group importances used by structured removal, exposed for inspection.
std::vector<double> head_importance(const LanguageModel& model, std::size_t layer);
std::vector<double> ff_channel_importance(const LanguageModel& model, std::size_t layer);

// Removes the given head / channel ids (dense ids, not positions) from one
// layer, shrinking tensors and any masks with them.
void remove_heads(PrunedModel& state, std::size_t layer, std::span<const std::size_t> head_ids);
void remove_ff_channels(PrunedModel& state, std::size_t layer, std::span<const std::size_t> channel_ids);

// Compacted checkpoint bytes (see io.h). Throws IntegrityError when the
// ledger disagrees with the tensors.
std::vector<std::uint8_t> finalize_for_deployment(const PrunedModel& pruned);

}  // namespace mosaic
