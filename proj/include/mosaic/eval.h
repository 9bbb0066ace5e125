#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "mosaic/model.h"
#include "mosaic/pruning.h"
#include "mosaic/ranking.h"

namespace mosaic {

struct PerplexityReport {
    std::string corpus;
    std::size_t token_count = 0;  // predicted positions
    double mean_nll = 0.0;        // nats
    double ppl = 1.0;
    std::size_t context_len = 0;
    std::size_t stride = 0;
};

// Anything that maps a token window to per-position logits.
using LogitsFn = std::function<DenseMatrix(std::span<const TokenId>)>;

// -log softmax(logits)[target], with a 64-bit log-sum-exp.
double token_nll(std::span<const float> logits, TokenId target);

// Sliding-window next-token cross-entropy. Targets 1..n-1 are processed in
// blocks of `stride`; each block is scored with up to `context_len` tokens of
// preceding input, so every position is predicted exactly once.
PerplexityReport perplexity(const LogitsFn& logits, std::span<const TokenId> tokens, std::size_t context_len,
                            std::size_t stride, std::string corpus = {});
PerplexityReport perplexity(const LanguageModel& model, std::span<const TokenId> tokens, std::size_t context_len,
                            std::size_t stride, std::string corpus = {});

struct SparsityAudit {
    SparsityLedger recount;
    // Exact zeros found in weights outside any mask (informational).
    std::vector<std::size_t> unmasked_zeros;

    double effective_sparsity() const { return recount.totals().effective_sparsity(); }
};

// Recounts masks and dimensions directly from the tensors and verifies that
// masked weights are zero. Throws IntegrityError if the ledger disagrees.
SparsityAudit sparsity_audit(const PrunedModel& pruned);

struct BenchOptions {
    std::size_t input_tokens = 256;
    std::size_t output_tokens = 16;
    std::size_t batch = 1;
    std::size_t trials = 5;
    std::uint64_t seed = 7;
};

struct BenchReport {
    std::size_t input_tokens = 0;
    std::size_t output_tokens = 0;
    std::size_t batch = 0;
    std::size_t trials = 0;
    int threads = 1;
    std::vector<double> trial_seconds;
    double mean_latency_s = 0.0;
    double stddev_latency_s = 0.0;  // sample standard deviation
    std::size_t peak_resident_bytes = 0;
    std::size_t model_param_count = 0;  // stored parameters minus masked ones
};

BenchReport bench(const LanguageModel& model, const BenchOptions& opts, std::size_t masked_params = 0);
BenchReport bench(const PrunedModel& pruned, const BenchOptions& opts);

struct CompareOptions {
    double alpha = kDefaultAlpha;
    double lambda = kDefaultLambda;
    PruneCategory category = PruneCategory::Unstructured;
    double structured_share = kDefaultStructuredShare;
    std::size_t samples = 128;
    std::size_t seq_len = 0;  // 0 = model max_seq_len
    std::size_t context_len = 0;  // 0 = model max_seq_len
    std::size_t stride = 0;       // 0 = context_len
};

struct ComparisonRow {
    double p = 0.0;
    RankScope method = RankScope::Uniform;
    double ppl = 0.0;
    double plan_weighted_mean = 0.0;
    double effective_sparsity = 0.0;
    std::size_t live_params = 0;
};

// For every p, plans with uniform (global), layer and projection ranks,
// prunes with opts.category and scores perplexity on the eval stream.
std::vector<ComparisonRow> compare_methods(const LanguageModel& model, std::span<const TokenId> calib,
                                           std::span<const TokenId> eval, std::span<const double> p_list,
                                           const CompareOptions& opts = {});

std::string comparison_csv(std::span<const ComparisonRow> rows);
std::string comparison_text(std::span<const ComparisonRow> rows);

struct SweepRow {
    std::size_t sample_size = 0;
    double ppl = 0.0;
    double rank_time_s = 0.0;
};

// Rebuilds the projection rank from 2^k-style calibration sizes and scores the
// pruned model at a fixed p.
std::vector<SweepRow> calibration_sweep(const LanguageModel& model, std::span<const TokenId> calib,
                                        std::span<const TokenId> eval, double p,
                                        std::span<const std::size_t> sample_sizes, const CompareOptions& opts = {});

std::string sweep_csv(std::span<const SweepRow> rows);

}  // namespace mosaic
