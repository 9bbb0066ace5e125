#include "mosaic/pruning.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "mosaic/errors.h"
#include "mosaic/io.h"
#include "mosaic/log.h"

namespace mosaic {

std::string_view category_name(PruneCategory c) {
    switch (c) {
        case PruneCategory::Unstructured:
            return "unstructured";
        case PruneCategory::Structured:
            return "structured";
        case PruneCategory::Composite:
            return "composite";
    }
    return "unstructured";
}

PruneCategory category_from_name(std::string_view name) {
    if (name == "unstructured") return PruneCategory::Unstructured;
    if (name == "structured") return PruneCategory::Structured;
    if (name == "composite") return PruneCategory::Composite;
    throw InputError("unknown pruning category '" + std::string(name) + "'");
}

std::string_view tier_name(DeviceTier t) {
    switch (t) {
        case DeviceTier::Cloud:
            return "cloud";
        case DeviceTier::Desktop:
            return "desktop";
        case DeviceTier::Soc:
            return "soc";
        case DeviceTier::CpuOnly:
            return "cpu-only";
    }
    return "desktop";
}

DeviceTier tier_from_name(std::string_view name) {
    if (name == "cloud") return DeviceTier::Cloud;
    if (name == "desktop") return DeviceTier::Desktop;
    if (name == "soc") return DeviceTier::Soc;
    if (name == "cpu-only") return DeviceTier::CpuOnly;
    throw InputError("unknown device tier '" + std::string(name) + "'");
}

double PruningPlan::weighted_mean() const {
    double num = 0.0;
    double den = 0.0;
    for (std::size_t i = 0; i < targets.size(); ++i) {
        const double w = param_counts.empty() ? 1.0 : static_cast<double>(param_counts[i]);
        num += w * targets[i];
        den += w;
    }
    return den == 0.0 ? 0.0 : num / den;
}

PruningPlan allocate_targets(const GlobalRank& rank, double p, double lambda) {
    if (!(p >= 0.0 && p < 1.0)) throw ArgumentError("pruning target p must lie in [0, 1)");
    if (!(lambda >= 0.0)) throw ArgumentError("lambda must be non-negative");
    const std::size_t n = rank.entries.size();
    if (n == 0 || n != rank.n_layers * kProjectionsPerLayer) {
        throw InputError("rank matrix is not N x 7");
    }
    if (rank.param_counts.size() != n) throw InputError("rank carries no parameter counts");

    PruningPlan plan;
    plan.p = p;
    plan.lambda = lambda;
    plan.n_layers = rank.n_layers;
    plan.param_counts = rank.param_counts;
    plan.scope = rank.scope;
    plan.rank_fingerprint = rank.model_fingerprint;

    const double lo = std::max(0.0, p - lambda);
    const double hi = std::min(kTargetCeiling, p + lambda);
    if (p > hi) {
        throw AllocationError("p = " + std::to_string(p) + " exceeds the per-projection ceiling " +
                              std::to_string(kTargetCeiling));
    }
    if (p + lambda >= kTargetCeiling) {
        plan.warnings.push_back("target band clipped at the " + std::to_string(kTargetCeiling) + " ceiling");
    }

    double max_dev = 0.0;
    for (double r : rank.entries) max_dev = std::max(max_dev, std::fabs(r - 1.0));
    if (max_dev == 0.0 || lambda == 0.0) {
        plan.targets.assign(n, p);
        return plan;
    }

    std::vector<double> t(n);
    for (std::size_t i = 0; i < n; ++i) {
        t[i] = std::clamp(p - lambda * (rank.entries[i] - 1.0) / max_dev, lo, hi);
    }

    std::vector<double> w(n);
    double total_w = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        w[i] = static_cast<double>(rank.param_counts[i]);
        total_w += w[i];
    }

    // Shift the unclamped targets by one common offset, re-clamp, repeat.
    for (int iter = 0; iter < 20; ++iter) {
        double current = 0.0;
        for (std::size_t i = 0; i < n; ++i) current += w[i] * t[i];
        const double residual = p * total_w - current;
        if (std::fabs(residual) <= 1e-13 * total_w) break;
        double free_w = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            if (residual > 0 ? t[i] < hi : t[i] > lo) free_w += w[i];
        }
        if (free_w == 0.0) break;
        const double shift = residual / free_w;
        for (std::size_t i = 0; i < n; ++i) {
            if (residual > 0 ? t[i] < hi : t[i] > lo) t[i] = std::clamp(t[i] + shift, lo, hi);
        }
    }
    plan.targets = std::move(t);
    if (std::fabs(plan.weighted_mean() - p) > 1e-9) {
        throw AllocationError("could not reach weighted mean " + std::to_string(p) + " inside band [" +
                              std::to_string(lo) + ", " + std::to_string(hi) + "]");
    }
    return plan;
}

PruningPlan allocate_targets(const GlobalRank& rank, double p, double lambda, const LanguageModel& model) {
    const std::string fp = model_fingerprint(model);
    if (rank.model_fingerprint != fp) {
        throw IntegrityError("rank was built for model " + rank.model_fingerprint + ", not " + fp);
    }
    return allocate_targets(rank, p, lambda);
}

PruneCategory select_category(const DeviceProfile& profile, std::uint64_t model_size_bytes) {
    if (profile.tier == DeviceTier::CpuOnly) return PruneCategory::Structured;
    if (model_size_bytes <= profile.gpu_memory_bytes && profile.has_sparse_accelerator) {
        return PruneCategory::Unstructured;
    }
    return PruneCategory::Composite;
}

std::size_t Mask::count() const {
    return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), std::uint8_t{1}));
}

LedgerEntry SparsityLedger::totals() const {
    LedgerEntry t;
    for (const auto& e : per_projection) {
        t.original_params += e.original_params;
        t.zeroed_params += e.zeroed_params;
        t.removed_params += e.removed_params;
        t.over_delivered = t.over_delivered || e.over_delivered;
    }
    return t;
}

SparsityLedger recount_ledger(const LanguageModel& model, std::span<const Mask> masks) {
    SparsityLedger ledger;
    ledger.per_projection.resize(model.projection_count());
    for (std::size_t i = 0; i < model.projection_count(); ++i) {
        const auto id = ProjectionId::from_flat(i);
        const auto [rows, cols] = dense_projection_shape(model.config, id.kind);
        auto& e = ledger.per_projection[i];
        e.original_params = rows * cols;
        e.removed_params = e.original_params - model.projection(id).size();
        e.zeroed_params = i < masks.size() ? masks[i].count() : 0;
    }
    return ledger;
}

PrunedModel PrunedModel::from_dense(LanguageModel model) {
    validate(model);
    PrunedModel out;
    out.masks.resize(model.projection_count());
    out.ledger = recount_ledger(model, out.masks);
    out.model = std::move(model);
    return out;
}

std::size_t PrunedModel::live_param_count() const {
    return total_param_count(model) - ledger.totals().zeroed_params;
}

namespace {

void check_plan_shape(const PruningPlan& plan, const LanguageModel& model) {
    if (plan.n_layers != model.layers.size() || plan.targets.size() != model.projection_count()) {
        throw InputError("plan covers " + std::to_string(plan.targets.size()) + " projections, model has " +
                         std::to_string(model.projection_count()));
    }
}

double abs_sum(std::span<const float> v) {
    double s = 0.0;
    for (float x : v) s += std::fabs(x);
    return s;
}

Mask rows_of(const Mask& m, std::span<const std::size_t> rows) {
    if (m.empty()) return {};
    Mask out{rows.size(), m.cols, std::vector<std::uint8_t>(rows.size() * m.cols)};
    for (std::size_t i = 0; i < rows.size(); ++i) {
        std::copy_n(m.bits.begin() + static_cast<std::ptrdiff_t>(rows[i] * m.cols), m.cols,
                    out.bits.begin() + static_cast<std::ptrdiff_t>(i * m.cols));
    }
    return out;
}

Mask cols_of(const Mask& m, std::span<const std::size_t> cols) {
    if (m.empty()) return {};
    Mask out{m.rows, cols.size(), std::vector<std::uint8_t>(m.rows * cols.size())};
    for (std::size_t r = 0; r < m.rows; ++r) {
        for (std::size_t j = 0; j < cols.size(); ++j) out.bits[r * cols.size() + j] = m.bits[r * m.cols + cols[j]];
    }
    return out;
}

// Positions (into the current live list) that survive removing `ids`.
std::vector<std::size_t> surviving_positions(const std::vector<std::size_t>& live,
                                             std::span<const std::size_t> ids) {
    std::vector<std::size_t> keep;
    for (std::size_t pos = 0; pos < live.size(); ++pos) {
        if (std::find(ids.begin(), ids.end(), live[pos]) == ids.end()) keep.push_back(pos);
    }
    return keep;
}

std::vector<std::size_t> expand(std::span<const std::size_t> positions, std::size_t width) {
    std::vector<std::size_t> out;
    out.reserve(positions.size() * width);
    for (std::size_t p : positions) {
        for (std::size_t d = 0; d < width; ++d) out.push_back(p * width + d);
    }
    return out;
}

std::size_t mask_slot(std::size_t layer, ProjectionKind k) { return ProjectionId{layer, k}.flat(); }

void refresh_ledger(PrunedModel& state) {
    auto fresh = recount_ledger(state.model, state.masks);
    const auto& old = state.ledger.per_projection;
    for (std::size_t i = 0; i < fresh.per_projection.size() && i < old.size(); ++i) {
        fresh.per_projection[i].over_delivered = old[i].over_delivered;
    }
    state.ledger = std::move(fresh);
}

// Lowest `count` of `importance` by (value, id); ids are dense group ids.
std::vector<std::size_t> lowest_groups(const std::vector<double>& importance,
                                       const std::vector<std::size_t>& ids, std::size_t count) {
    std::vector<std::size_t> order(ids.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return importance[a] < importance[b] || (importance[a] == importance[b] && ids[a] < ids[b]);
    });
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < count && i < order.size(); ++i) out.push_back(ids[order[i]]);
    std::sort(out.begin(), out.end());
    return out;
}

// Number of groups (out of `total`) whose removal lands nearest to
// `fraction`, keeping at least one alive.
std::size_t groups_for_fraction(double fraction, std::size_t total, bool& clamped) {
    const auto want = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(total)));
    clamped = want >= total;
    return std::min(want, total - 1);
}

struct StructuredPositions {
    std::vector<std::vector<std::size_t>> heads;     // per layer, kept head positions
    std::vector<std::vector<std::size_t>> channels;  // per layer, kept channel positions
};

StructuredPositions apply_structured(PrunedModel& state, const PruningPlan& plan, double scale) {
    const auto& cfg = state.model.config;
    StructuredPositions kept;
    kept.heads.resize(state.model.layers.size());
    kept.channels.resize(state.model.layers.size());

    for (std::size_t n = 0; n < state.model.layers.size(); ++n) {
        const auto& layer = state.model.layers[n];
        double attn_target = 0.0;
        double ff_target = 0.0;
        for (ProjectionKind k : kAllProjections) {
            (is_attention(k) ? attn_target : ff_target) += plan.target({n, k});
        }
        attn_target = scale * attn_target / 4.0;
        ff_target = scale * ff_target / 3.0;

        bool clamped = false;
        const std::size_t heads_goal = groups_for_fraction(attn_target, cfg.n_heads, clamped);
        if (clamped) state.warnings.push_back("layer " + std::to_string(n) + ": keeping one attention head");
        const std::size_t heads_gone = cfg.n_heads - layer.live_heads.size();
        std::vector<std::size_t> drop_heads;
        if (heads_goal > heads_gone) {
            drop_heads = lowest_groups(head_importance(state.model, n), layer.live_heads, heads_goal - heads_gone);
        }

        const std::size_t ch_goal = groups_for_fraction(ff_target, cfg.d_ff, clamped);
        if (clamped) state.warnings.push_back("layer " + std::to_string(n) + ": keeping one ff channel");
        const std::size_t ch_gone = cfg.d_ff - layer.live_ff_channels.size();
        std::vector<std::size_t> drop_channels;
        if (ch_goal > ch_gone) {
            drop_channels =
                lowest_groups(ff_channel_importance(state.model, n), layer.live_ff_channels, ch_goal - ch_gone);
        }

        kept.heads[n] = surviving_positions(layer.live_heads, drop_heads);
        kept.channels[n] = surviving_positions(layer.live_ff_channels, drop_channels);
        if (!drop_heads.empty()) remove_heads(state, n, drop_heads);
        if (!drop_channels.empty()) remove_ff_channels(state, n, drop_channels);
    }
    refresh_ledger(state);
    return kept;
}

void apply_unstructured(PrunedModel& state, const PruningPlan& plan, std::span<const WeightMetricMatrix> metrics) {
    if (metrics.size() != state.model.projection_count()) {
        throw InputError("unstructured pruning needs one metric per projection");
    }
    for (std::size_t i = 0; i < metrics.size(); ++i) {
        const auto id = ProjectionId::from_flat(i);
        DenseMatrix& w = state.model.projection(id);
        const auto& metric = metrics[i].values;
        if (metric.rows() != w.rows() || metric.cols() != w.cols()) {
            throw InputError("metric shape does not match weights for " + id.label());
        }
        auto& entry = state.ledger.per_projection[i];
        // floor(p * C_original) minus what structure already removed, which is
        // floor(p' * C_surviving) for the adjusted rate p' = (p - r) / (1 - r).
        const auto goal = static_cast<std::size_t>(
            std::floor(plan.target(id) * static_cast<double>(entry.original_params)));
        std::size_t count = 0;
        if (goal >= entry.removed_params) {
            count = goal - entry.removed_params;
        } else {
            entry.over_delivered = true;
        }

        Mask& mask = state.masks[i];
        std::vector<float> values(metric.values().begin(), metric.values().end());
        if (!mask.empty()) {
            // Already-zeroed entries go first so re-pruning is a no-op.
            for (std::size_t j = 0; j < values.size(); ++j) {
                if (mask.bits[j]) values[j] = -std::numeric_limits<float>::infinity();
            }
            count = std::max(count, mask.count());
        }
        if (count == 0) continue;
        count = std::min(count, values.size() - 1);
        const auto selected = apply_cutoff(values, threshold_for_count(values, count));
        if (mask.empty()) mask = Mask{w.rows(), w.cols(), std::vector<std::uint8_t>(w.size(), 0)};
        auto wv = w.values();
        for (std::size_t j = 0; j < selected.size(); ++j) {
            if (selected[j]) {
                mask.bits[j] = 1;
                wv[j] = 0.0f;
            }
        }
        entry.zeroed_params = mask.count();
    }
}

void require_category(const PruningPlan& plan, std::initializer_list<PruneCategory> allowed, const char* op) {
    if (std::find(allowed.begin(), allowed.end(), plan.category) == allowed.end()) {
        throw ArgumentError(std::string(op) + ": plan category '" + std::string(category_name(plan.category)) +
                            "' not accepted");
    }
}

std::vector<WeightMetricMatrix> slice_metrics(std::span<const WeightMetricMatrix> metrics,
                                              const StructuredPositions& kept, std::size_t head_dim) {
    std::vector<WeightMetricMatrix> out;
    out.reserve(metrics.size());
    for (const auto& m : metrics) {
        const std::size_t n = m.projection.layer;
        const auto heads = expand(kept.heads[n], head_dim);
        const auto& ch = kept.channels[n];
        WeightMetricMatrix s{m.projection, {}};
        switch (m.projection.kind) {
            case ProjectionKind::Q:
            case ProjectionKind::K:
            case ProjectionKind::V:
                s.values = select_rows(m.values, heads);
                break;
            case ProjectionKind::O:
                s.values = select_cols(m.values, heads);
                break;
            case ProjectionKind::G:
            case ProjectionKind::U:
                s.values = select_rows(m.values, ch);
                break;
            case ProjectionKind::D:
                s.values = select_cols(m.values, ch);
                break;
        }
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace

std::vector<double> head_importance(const LanguageModel& model, std::size_t layer) {
    const auto& l = model.layers.at(layer);
    const std::size_t hd = model.config.head_dim;
    std::vector<double> out(l.live_heads.size(), 0.0);
    for (std::size_t h = 0; h < out.size(); ++h) {
        for (std::size_t d = 0; d < hd; ++d) {
            const std::size_t r = h * hd + d;
            out[h] += abs_sum(l[ProjectionKind::Q].row(r)) + abs_sum(l[ProjectionKind::K].row(r)) +
                      abs_sum(l[ProjectionKind::V].row(r));
        }
    }
    const auto& o = l[ProjectionKind::O];
    for (std::size_t i = 0; i < o.rows(); ++i) {
        const auto row = o.row(i);
        for (std::size_t c = 0; c < row.size(); ++c) out[c / hd] += std::fabs(row[c]);
    }
    return out;
}

std::vector<double> ff_channel_importance(const LanguageModel& model, std::size_t layer) {
    const auto& l = model.layers.at(layer);
    std::vector<double> out(l.live_ff_channels.size(), 0.0);
    for (std::size_t c = 0; c < out.size(); ++c) {
        out[c] = abs_sum(l[ProjectionKind::G].row(c)) + abs_sum(l[ProjectionKind::U].row(c));
    }
    const auto& d = l[ProjectionKind::D];
    for (std::size_t i = 0; i < d.rows(); ++i) {
        const auto row = d.row(i);
        for (std::size_t c = 0; c < row.size(); ++c) out[c] += std::fabs(row[c]);
    }
    return out;
}

void remove_heads(PrunedModel& state, std::size_t layer, std::span<const std::size_t> head_ids) {
    auto& l = state.model.layers.at(layer);
    const auto keep = surviving_positions(l.live_heads, head_ids);
    if (keep.empty()) throw ArgumentError("cannot remove every attention head");
    const auto rows = expand(keep, state.model.config.head_dim);
    for (ProjectionKind k : {ProjectionKind::Q, ProjectionKind::K, ProjectionKind::V}) {
        l[k] = select_rows(l[k], rows);
        auto& m = state.masks[mask_slot(layer, k)];
        m = rows_of(m, rows);
    }
    l[ProjectionKind::O] = select_cols(l[ProjectionKind::O], rows);
    auto& mo = state.masks[mask_slot(layer, ProjectionKind::O)];
    mo = cols_of(mo, rows);
    std::vector<std::size_t> live;
    for (std::size_t p : keep) live.push_back(l.live_heads[p]);
    l.live_heads = std::move(live);
    refresh_ledger(state);
}

void remove_ff_channels(PrunedModel& state, std::size_t layer, std::span<const std::size_t> channel_ids) {
    auto& l = state.model.layers.at(layer);
    const auto keep = surviving_positions(l.live_ff_channels, channel_ids);
    if (keep.empty()) throw ArgumentError("cannot remove every feed-forward channel");
    for (ProjectionKind k : {ProjectionKind::G, ProjectionKind::U}) {
        l[k] = select_rows(l[k], keep);
        auto& m = state.masks[mask_slot(layer, k)];
        m = rows_of(m, keep);
    }
    l[ProjectionKind::D] = select_cols(l[ProjectionKind::D], keep);
    auto& md = state.masks[mask_slot(layer, ProjectionKind::D)];
    md = cols_of(md, keep);
    std::vector<std::size_t> live;
    for (std::size_t p : keep) live.push_back(l.live_ff_channels[p]);
    l.live_ff_channels = std::move(live);
    refresh_ledger(state);
}

PrunedModel unstructured_prune(const PrunedModel& input, const PruningPlan& plan,
                               std::span<const WeightMetricMatrix> metrics) {
    require_category(plan, {PruneCategory::Unstructured, PruneCategory::Composite}, "unstructured_prune");
    check_plan_shape(plan, input.model);
    PrunedModel out = input;
    out.plan = plan;
    apply_unstructured(out, plan, metrics);
    return out;
}

PrunedModel unstructured_prune(const LanguageModel& model, const PruningPlan& plan,
                               std::span<const WeightMetricMatrix> metrics) {
    return unstructured_prune(PrunedModel::from_dense(model), plan, metrics);
}

PrunedModel structured_prune(const PrunedModel& input, const PruningPlan& plan) {
    require_category(plan, {PruneCategory::Structured, PruneCategory::Composite}, "structured_prune");
    check_plan_shape(plan, input.model);
    PrunedModel out = input;
    out.plan = plan;
    apply_structured(out, plan, 1.0);
    return out;
}

PrunedModel structured_prune(const LanguageModel& model, const PruningPlan& plan) {
    return structured_prune(PrunedModel::from_dense(model), plan);
}

PrunedModel composite_prune(const PrunedModel& input, const PruningPlan& plan,
                            std::span<const WeightMetricMatrix> metrics) {
    require_category(plan, {PruneCategory::Composite}, "composite_prune");
    check_plan_shape(plan, input.model);
    if (!(plan.structured_share >= 0.0 && plan.structured_share <= 1.0)) {
        throw ArgumentError("structured_share must lie in [0, 1]");
    }
    if (metrics.size() != input.model.projection_count()) {
        throw InputError("composite pruning needs one metric per projection");
    }
    PrunedModel out = input;
    out.plan = plan;
    const auto kept = apply_structured(out, plan, plan.structured_share);
    // A full structured share leaves no budget to the masking phase.
    if (plan.structured_share < 1.0) {
        const auto sliced = slice_metrics(metrics, kept, out.model.config.head_dim);
        apply_unstructured(out, plan, sliced);
    }
    for (std::size_t i = 0; i < out.ledger.per_projection.size(); ++i) {
        if (out.ledger.per_projection[i].over_delivered) {
            out.warnings.push_back(ProjectionId::from_flat(i).label() +
                                   ": structure removed more than the projection target");
        }
    }
    return out;
}

PrunedModel composite_prune(const LanguageModel& model, const PruningPlan& plan,
                            std::span<const WeightMetricMatrix> metrics) {
    return composite_prune(PrunedModel::from_dense(model), plan, metrics);
}

PrunedModel prune(const LanguageModel& model, const PruningPlan& plan, std::span<const WeightMetricMatrix> metrics) {
    switch (plan.category) {
        case PruneCategory::Unstructured:
            return unstructured_prune(model, plan, metrics);
        case PruneCategory::Structured:
            return structured_prune(model, plan);
        case PruneCategory::Composite:
            return composite_prune(model, plan, metrics);
    }
    throw ArgumentError("unknown pruning category");
}

std::vector<std::uint8_t> finalize_for_deployment(const PrunedModel& pruned) {
    const auto recount = recount_ledger(pruned.model, pruned.masks);
    for (std::size_t i = 0; i < recount.per_projection.size(); ++i) {
        const auto& a = recount.per_projection[i];
        const auto& b = pruned.ledger.per_projection.at(i);
        if (a.original_params != b.original_params || a.zeroed_params != b.zeroed_params ||
            a.removed_params != b.removed_params) {
            throw IntegrityError("ledger disagrees with tensors at " + ProjectionId::from_flat(i).label());
        }
        const auto& mask = pruned.masks.at(i);
        if (mask.empty()) continue;
        const auto w = pruned.model.projection(ProjectionId::from_flat(i)).values();
        for (std::size_t j = 0; j < w.size(); ++j) {
            if (mask.bits[j] && w[j] != 0.0f) {
                throw IntegrityError("masked weight is nonzero at " + ProjectionId::from_flat(i).label());
            }
        }
    }
    return serialize_checkpoint(pruned.model, pruned.masks);
}

}  // namespace mosaic
