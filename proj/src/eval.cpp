#include "mosaic/eval.h"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <random>
#include <sstream>

#include "mosaic/errors.h"
#include "mosaic/log.h"

namespace mosaic {

double token_nll(std::span<const float> logits, TokenId target) {
    if (target >= logits.size()) throw InputError("target token outside logits row");
    const float max = *std::max_element(logits.begin(), logits.end());
    double sum = 0.0;
    for (float v : logits) sum += std::exp(static_cast<double>(v) - max);
    return std::log(sum) - (static_cast<double>(logits[target]) - max);
}

PerplexityReport perplexity(const LogitsFn& logits, std::span<const TokenId> tokens, std::size_t context_len,
                            std::size_t stride, std::string corpus) {
    if (tokens.size() < 2) throw InputError("perplexity needs at least two tokens");
    if (context_len == 0) throw ArgumentError("context_len must be >= 1");
    if (stride == 0 || stride > context_len) throw ArgumentError("stride must lie in [1, context_len]");

    const std::size_t n = tokens.size();
    double total = 0.0;
    std::size_t predicted = 0;
    for (std::size_t first = 1; first < n;) {
        const std::size_t end = std::min(first + stride, n);
        const std::size_t begin = end - 1 > context_len ? end - 1 - context_len : 0;
        const DenseMatrix out = logits(tokens.subspan(begin, end - 1 - begin));
        for (std::size_t t = first; t < end; ++t) {
            total += token_nll(out.row(t - 1 - begin), tokens[t]);
            ++predicted;
        }
        first = end;
    }

    PerplexityReport r;
    r.corpus = std::move(corpus);
    r.token_count = predicted;
    r.mean_nll = total / static_cast<double>(predicted);
    r.ppl = std::exp(r.mean_nll);
    r.context_len = context_len;
    r.stride = stride;
    return r;
}

PerplexityReport perplexity(const LanguageModel& model, std::span<const TokenId> tokens, std::size_t context_len,
                            std::size_t stride, std::string corpus) {
    return perplexity([&model](std::span<const TokenId> w) { return forward(model, w); }, tokens, context_len,
                      stride, std::move(corpus));
}

SparsityAudit sparsity_audit(const PrunedModel& pruned) {
    const auto& model = pruned.model;
    SparsityAudit audit;
    audit.recount.per_projection.resize(model.projection_count());
    audit.unmasked_zeros.assign(model.projection_count(), 0);

    for (std::size_t i = 0; i < model.projection_count(); ++i) {
        const auto id = ProjectionId::from_flat(i);
        const DenseMatrix& w = model.projection(id);
        const std::size_t dh = model.config.head_dim;
        const auto& layer = model.layers[id.layer];
        // Original size from the dense architecture; current size from the
        // live groups actually present in the tensor.
        std::size_t orig_rows = 0;
        std::size_t orig_cols = 0;
        std::size_t live_rows = 0;
        std::size_t live_cols = 0;
        switch (id.kind) {
            case ProjectionKind::Q:
            case ProjectionKind::K:
            case ProjectionKind::V:
                orig_rows = model.config.n_heads * dh;
                orig_cols = model.config.d_model;
                live_rows = layer.live_heads.size() * dh;
                live_cols = model.config.d_model;
                break;
            case ProjectionKind::O:
                orig_rows = model.config.d_model;
                orig_cols = model.config.n_heads * dh;
                live_rows = model.config.d_model;
                live_cols = layer.live_heads.size() * dh;
                break;
            case ProjectionKind::G:
            case ProjectionKind::U:
                orig_rows = model.config.d_ff;
                orig_cols = model.config.d_model;
                live_rows = layer.live_ff_channels.size();
                live_cols = model.config.d_model;
                break;
            case ProjectionKind::D:
                orig_rows = model.config.d_model;
                orig_cols = model.config.d_ff;
                live_rows = model.config.d_model;
                live_cols = layer.live_ff_channels.size();
                break;
        }
        if (w.rows() != live_rows || w.cols() != live_cols) {
            throw IntegrityError(id.label() + ": tensor shape disagrees with live head/channel lists");
        }

        const Mask* mask = i < pruned.masks.size() && !pruned.masks[i].empty() ? &pruned.masks[i] : nullptr;
        if (mask && (mask->rows != w.rows() || mask->cols != w.cols())) {
            throw IntegrityError(id.label() + ": mask shape disagrees with weights");
        }
        std::size_t zeroed = 0;
        const auto values = w.values();
        for (std::size_t j = 0; j < values.size(); ++j) {
            const bool masked = mask && mask->bits[j];
            if (masked) {
                if (values[j] != 0.0f) throw IntegrityError(id.label() + ": masked weight is nonzero");
                ++zeroed;
            } else if (values[j] == 0.0f) {
                ++audit.unmasked_zeros[i];
            }
        }

        auto& e = audit.recount.per_projection[i];
        e.original_params = orig_rows * orig_cols;
        e.removed_params = e.original_params - values.size();
        e.zeroed_params = zeroed;

        if (i >= pruned.ledger.per_projection.size()) throw IntegrityError("ledger is missing projections");
        const auto& l = pruned.ledger.per_projection[i];
        if (l.original_params != e.original_params || l.removed_params != e.removed_params ||
            l.zeroed_params != e.zeroed_params) {
            throw IntegrityError(id.label() + ": ledger (" + std::to_string(l.zeroed_params) + " zeroed, " +
                                 std::to_string(l.removed_params) + " removed) != recount (" +
                                 std::to_string(e.zeroed_params) + ", " + std::to_string(e.removed_params) + ")");
        }
        e.over_delivered = l.over_delivered;
    }
    return audit;
}

BenchReport bench(const LanguageModel& model, const BenchOptions& opts, std::size_t masked_params) {
    if (opts.trials < 1) throw ArgumentError("bench needs at least one trial");
    if (opts.batch < 1) throw ArgumentError("bench batch must be >= 1");
    if (opts.input_tokens < 1) throw ArgumentError("bench needs at least one input token");
    if (opts.input_tokens + opts.output_tokens > model.config.max_seq_len) {
        throw InputError("bench prompt plus output (" + std::to_string(opts.input_tokens + opts.output_tokens) +
                         ") exceeds max_seq_len " + std::to_string(model.config.max_seq_len));
    }

    std::mt19937_64 rng(opts.seed);
    std::uniform_int_distribution<std::uint32_t> dist(0, static_cast<std::uint32_t>(model.config.vocab_size - 1));
    std::vector<std::vector<TokenId>> prompts(opts.batch);
    for (auto& p : prompts) {
        p.resize(opts.input_tokens);
        for (auto& t : p) t = dist(rng);
    }

    BenchReport r;
    r.input_tokens = opts.input_tokens;
    r.output_tokens = opts.output_tokens;
    r.batch = opts.batch;
    r.trials = opts.trials;
    r.threads = num_threads();
    r.model_param_count = total_param_count(model) - masked_params;

    memory::reset_peak();
    const std::size_t base = memory::current_bytes();
    for (std::size_t trial = 0; trial < opts.trials; ++trial) {
        const auto start = std::chrono::steady_clock::now();
        for (const auto& prompt : prompts) {
            if (opts.output_tokens == 0) {
                const DenseMatrix logits = forward(model, prompt);
                (void)logits;
            } else {
                (void)generate_greedy(model, prompt, opts.output_tokens);
            }
        }
        const auto stop = std::chrono::steady_clock::now();
        r.trial_seconds.push_back(std::chrono::duration<double>(stop - start).count());
    }
    // Weights are resident throughout; the allocator only sees transients.
    r.peak_resident_bytes = (memory::peak_bytes() - base) + total_param_count(model) * sizeof(float);

    double sum = 0.0;
    for (double s : r.trial_seconds) sum += s;
    r.mean_latency_s = sum / static_cast<double>(r.trial_seconds.size());
    if (r.trial_seconds.size() > 1) {
        double ss = 0.0;
        for (double s : r.trial_seconds) ss += (s - r.mean_latency_s) * (s - r.mean_latency_s);
        r.stddev_latency_s = std::sqrt(ss / static_cast<double>(r.trial_seconds.size() - 1));
    }
    return r;
}

BenchReport bench(const PrunedModel& pruned, const BenchOptions& opts) {
    return bench(pruned.model, opts, pruned.ledger.totals().zeroed_params);
}

namespace {

struct Resolved {
    std::size_t seq_len;
    std::size_t context;
    std::size_t stride;
};

Resolved resolve(const LanguageModel& model, const CompareOptions& opts) {
    Resolved r;
    r.seq_len = opts.seq_len ? opts.seq_len : model.config.max_seq_len;
    r.context = opts.context_len ? opts.context_len : model.config.max_seq_len;
    r.stride = opts.stride ? opts.stride : r.context;
    return r;
}

PrunedModel prune_with(const LanguageModel& model, const GlobalRank& rank, double p,
                       std::span<const WeightMetricMatrix> metrics, const CompareOptions& opts) {
    PruningPlan plan = allocate_targets(rank, p, opts.lambda);
    plan.category = opts.category;
    plan.structured_share = opts.structured_share;
    return prune(model, plan, metrics);
}

}  // namespace

std::vector<ComparisonRow> compare_methods(const LanguageModel& model, std::span<const TokenId> calib,
                                           std::span<const TokenId> eval, std::span<const double> p_list,
                                           const CompareOptions& opts) {
    const Resolved res = resolve(model, opts);
    const ActivationNorms norms = collect_activation_norms(model, calib, opts.samples, res.seq_len);
    const auto metrics = all_weight_metrics(model, norms);
    const GlobalRank ranks[] = {uniform_rank(model), build_layer_rank(model, norms, opts.alpha),
                                build_global_rank(model, norms, opts.alpha)};

    std::vector<ComparisonRow> rows;
    for (double p : p_list) {
        for (const GlobalRank& rank : ranks) {
            const PrunedModel pruned = prune_with(model, rank, p, metrics, opts);
            const SparsityAudit audit = sparsity_audit(pruned);
            ComparisonRow row;
            row.p = p;
            row.method = rank.scope;
            row.plan_weighted_mean = pruned.plan.weighted_mean();
            row.effective_sparsity = audit.effective_sparsity();
            row.live_params = pruned.live_param_count();
            row.ppl = perplexity(pruned.model, eval, res.context, res.stride).ppl;
            log::info("compare p=" + std::to_string(p) + " " + std::string(rank_scope_name(rank.scope)) +
                      " ppl=" + std::to_string(row.ppl));
            rows.push_back(row);
        }
    }
    return rows;
}

std::string comparison_csv(std::span<const ComparisonRow> rows) {
    std::ostringstream out;
    out << "p,method,ppl,plan_weighted_mean,effective_sparsity,live_params\n";
    char buf[256];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%.4f,%s,%.6f,%.8f,%.8f,%zu\n", r.p,
                      std::string(rank_scope_name(r.method)).c_str(), r.ppl, r.plan_weighted_mean,
                      r.effective_sparsity, r.live_params);
        out << buf;
    }
    return out.str();
}

std::string comparison_text(std::span<const ComparisonRow> rows) {
    std::ostringstream out;
    char buf[256];
    std::snprintf(buf, sizeof buf, "%-6s  %-10s  %12s  %10s  %12s\n", "p", "method", "ppl", "sparsity", "live params");
    out << buf;
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%-6.2f  %-10s  %12.4f  %9.2f%%  %12zu\n", r.p,
                      std::string(rank_scope_name(r.method)).c_str(), r.ppl, 100.0 * r.effective_sparsity,
                      r.live_params);
        out << buf;
    }
    return out.str();
}

std::vector<SweepRow> calibration_sweep(const LanguageModel& model, std::span<const TokenId> calib,
                                        std::span<const TokenId> eval, double p,
                                        std::span<const std::size_t> sample_sizes, const CompareOptions& opts) {
    const Resolved res = resolve(model, opts);
    std::vector<SweepRow> rows;
    for (std::size_t samples : sample_sizes) {
        const auto start = std::chrono::steady_clock::now();
        const ActivationNorms norms = collect_activation_norms(model, calib, samples, res.seq_len);
        const GlobalRank rank = build_global_rank(model, norms, opts.alpha);
        const auto stop = std::chrono::steady_clock::now();
        const auto metrics = all_weight_metrics(model, norms);
        const PrunedModel pruned = prune_with(model, rank, p, metrics, opts);
        SweepRow row;
        row.sample_size = samples;
        row.rank_time_s = std::chrono::duration<double>(stop - start).count();
        row.ppl = perplexity(pruned.model, eval, res.context, res.stride).ppl;
        rows.push_back(row);
    }
    return rows;
}

std::string sweep_csv(std::span<const SweepRow> rows) {
    std::ostringstream out;
    out << "sample_size,ppl,rank_time\n";
    char buf[128];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%zu,%.6f,%.6f\n", r.sample_size, r.ppl, r.rank_time_s);
        out << buf;
    }
    return out.str();
}

}  // namespace mosaic
