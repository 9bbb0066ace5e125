// One line per criterion: "PASS <name>: ..." or "FAIL <name>: ...".
// Run with a name to evaluate only that criterion.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "mosaic/errors.h"
#include "mosaic/eval.h"
#include "mosaic/io.h"
#include "mosaic/pruning.h"
#include "mosaic/ranking.h"
#include "support.h"

using namespace mosaic;
using namespace testing;

namespace {

struct Outcome {
    bool pass = true;
    std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

// Brute force: full scan for the mean, second full scan for the count.
std::size_t oracle_count(std::span<const float> v, double alpha) {
    double sum = 0.0;
    for (float x : v) sum += x;
    const double cut = alpha * (sum / static_cast<double>(v.size()));
    std::size_t n = 0;
    for (float x : v)
        if (static_cast<double>(x) > cut) ++n;
    return n;
}

Outcome pod_oracle() {
    const auto t0 = Clock::now();
    std::mt19937_64 rng(1001);
    std::uniform_int_distribution<std::size_t> dim(1, 32);
    std::normal_distribution<float> normal;
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::size_t projections = 0, mismatches = 0, checks = 0, outliers_seen = 0;
    while (projections < 1000) {
        std::vector<WeightMetricMatrix> layer;
        for (ProjectionKind k : kAllProjections) {
            const std::size_t r = dim(rng), c = dim(rng);
            DenseMatrix w(r, c);
            const double heavy = 0.05 * u(rng);
            for (float& x : w.values()) x = normal(rng) * (u(rng) < heavy ? 10.0f : 1.0f);
            DenseVector norms(c);
            for (float& x : norms.values()) x = std::exp(normal(rng));
            layer.push_back(weight_metric(w, norms, {projections / 7, k}));
            ++projections;
        }
        std::vector<float> all;
        for (const auto& m : layer) all.insert(all.end(), m.values.values().begin(), m.values.values().end());
        for (double alpha : {3.0, 5.0, 7.0}) {
            for (const auto& m : layer) {
                const auto want = oracle_count(m.values.values(), alpha);
                mismatches += count_projection_outliers(m, alpha) != want;
                outliers_seen += want;
                ++checks;
            }
            mismatches += count_layer_outliers(layer, alpha) != oracle_count(all, alpha);
            ++checks;
        }
    }
    const double dt = seconds_since(t0);
    return {mismatches == 0 && dt < 10.0,
            fmt("%zu projections, %zu checks, %zu mismatches, %zu outliers, %.3fs", projections, checks, mismatches,
                outliers_seen, dt)};
}

Outcome scale_invariance() {
    std::size_t changed = 0, checks = 0, nonzero = 0;
    for (std::uint64_t seed = 1; seed <= 2; ++seed) {
        const auto cfg = tiny_config(2, 32, 4, 64, 41, 32);
        const auto base_model = random_model(cfg, {.seed = seed, .heavy_tail_fraction = 0.03});
        const auto stream = random_tokens(4 * 32, 41, seed);
        const auto base = build_global_rank(base_model, collect_activation_norms(base_model, stream, 4, 32), 5.0);
        for (std::size_t i = 0; i < base_model.projection_count(); ++i) {
            nonzero += base.outlier_counts[i] > 0;
            for (float c : {0.01f, 1.0f, 100.0f}) {
                LanguageModel m = base_model;
                for (float& x : m.projection(ProjectionId::from_flat(i)).values()) x *= c;
                // Full recalibration: downstream activations move, this
                // projection's own count must not.
                const auto r = build_global_rank(m, collect_activation_norms(m, stream, 4, 32), 5.0);
                changed += r.outlier_counts[i] != base.outlier_counts[i];
                ++checks;
            }
        }
    }
    return {changed == 0 && nonzero > 0,
            fmt("%zu scaled projections, %zu changed counts (%zu with outliers)", checks, changed, nonzero)};
}

Outcome plan_exactness() {
    std::mt19937_64 rng(77);
    std::uniform_int_distribution<std::size_t> layers(1, 12);
    double worst_mean = 0.0, worst_band = 0.0;
    std::size_t plans = 0;
    for (int t = 0; t < 50; ++t) {
        const auto r = random_rank(layers(rng), rng);
        for (double p : {0.2, 0.4, 0.6, 0.8}) {
            const auto plan = allocate_targets(r, p, kDefaultLambda);
            worst_mean = std::max(worst_mean, std::fabs(plan.weighted_mean() - p));
            const double lo = std::max(0.0, p - kDefaultLambda), hi = std::min(kTargetCeiling, p + kDefaultLambda);
            for (double x : plan.targets) worst_band = std::max({worst_band, lo - x, x - hi});
            ++plans;
        }
    }
    // Uniform ranks: every target is exactly p.
    bool uniform_exact = true;
    const auto model = random_model(tiny_config(3));
    for (double p : {0.2, 0.4, 0.6, 0.8}) {
        const auto plan = allocate_targets(uniform_rank(model), p, kDefaultLambda);
        for (double x : plan.targets) uniform_exact = uniform_exact && x == p;
    }
    return {worst_mean <= 1e-6 && worst_band <= 0.0 && uniform_exact,
            fmt("%zu plans, max |mean - p| = %.3g, max band violation = %.3g, uniform exact = %s", plans, worst_mean,
                std::max(worst_band, 0.0), uniform_exact ? "yes" : "no")};
}

Outcome sparsity_accounting() {
    const auto cfg = tiny_config(4, 64, 4, 128, 97, 32);
    const auto model = random_model(cfg, {.seed = 404, .heavy_tail_fraction = 0.02});
    const auto norms = collect_activation_norms(model, random_tokens(8 * 32, 97, 404), 8, 32);
    const auto metrics = all_weight_metrics(model, norms);
    const auto rank = build_global_rank(model, norms, kDefaultAlpha);

    bool pass = true;
    std::ostringstream detail;
    for (PruneCategory c : {PruneCategory::Unstructured, PruneCategory::Structured, PruneCategory::Composite}) {
        std::size_t off_target = 0, ledger_mismatch = 0;
        double worst = 0.0;
        for (double p : {0.2, 0.5, 0.8}) {
            auto plan = allocate_targets(rank, p, kDefaultLambda, model);
            plan.category = c;
            const auto pruned = prune(model, plan, metrics);
            try {
                const auto audit = sparsity_audit(pruned);
                if (!(audit.recount == pruned.ledger)) ++ledger_mismatch;
                for (std::size_t i = 0; i < plan.targets.size(); ++i) {
                    const auto& e = audit.recount.per_projection[i];
                    const double dev = std::fabs(e.effective_sparsity() - plan.targets[i]);
                    worst = std::max(worst, dev * static_cast<double>(e.original_params));
                    if (dev > 1.0 / static_cast<double>(e.original_params) + 1e-12) ++off_target;
                }
            } catch (const IntegrityError&) {
                ++ledger_mismatch;
            }
        }
        const bool ok = off_target == 0 && ledger_mismatch == 0;
        pass = pass && ok;
        detail << category_name(c) << " " << (ok ? "ok" : "off") << " (ledger mismatches " << ledger_mismatch
               << ", off-target " << off_target << "/84, worst " << fmt("%.1f", worst) << "/C); ";
    }
    auto s = detail.str();
    s.resize(s.size() - 2);
    return {pass, s};
}

Outcome mask_structure_equivalence() {
    const auto cfg = tiny_config(4, 64, 4, 128, 97, 32);
    const auto model = random_model(cfg, {.seed = 505});
    std::mt19937_64 rng(505);
    const std::size_t hd = cfg.head_dim;

    // A different arbitrary (non-empty, non-full) head set per layer.
    std::vector<std::vector<std::size_t>> heads(cfg.n_layers);
    for (auto& set : heads) {
        while (set.empty() || set.size() == cfg.n_heads) {
            set.clear();
            for (std::size_t h = 0; h < cfg.n_heads; ++h)
                if (rng() & 1u) set.push_back(h);
        }
    }

    auto masked = PrunedModel::from_dense(model);
    for (std::size_t n = 0; n < cfg.n_layers; ++n) {
        for (ProjectionKind k : {ProjectionKind::Q, ProjectionKind::K, ProjectionKind::V, ProjectionKind::O}) {
            auto& w = masked.model.layers[n][k];
            Mask m{w.rows(), w.cols(), std::vector<std::uint8_t>(w.size(), 0)};
            for (std::size_t h : heads[n]) {
                for (std::size_t d = h * hd; d < (h + 1) * hd; ++d) {
                    for (std::size_t j = 0; j < (k == ProjectionKind::O ? w.rows() : w.cols()); ++j) {
                        const std::size_t idx = k == ProjectionKind::O ? j * w.cols() + d : d * w.cols() + j;
                        m.bits[idx] = 1;
                        w.values()[idx] = 0.0f;
                    }
                }
            }
            masked.masks[ProjectionId{n, k}.flat()] = std::move(m);
        }
    }
    auto removed = PrunedModel::from_dense(model);
    for (std::size_t n = 0; n < cfg.n_layers; ++n) remove_heads(removed, n, heads[n]);

    double worst = 0.0;
    for (int t = 0; t < 20; ++t) {
        const auto toks = random_tokens(1 + rng() % 32, cfg.vocab_size, 9000 + t);
        const auto a = forward(masked.model, toks);
        const auto b = forward(removed.model, toks);
        worst = std::max(worst, max_rel_error(b, to_mat(a)));
    }
    std::size_t gone = 0;
    for (const auto& s : heads) gone += s.size();
    return {worst <= 1e-4, fmt("%zu heads across 4 layers, 20 prompts, max rel error %.3g", gone, worst)};
}

Outcome degenerate_split() {
    const auto cfg = tiny_config(4, 64, 4, 128, 97, 32);
    const auto model = random_model(cfg, {.seed = 606, .heavy_tail_fraction = 0.02});
    const auto norms = collect_activation_norms(model, random_tokens(4 * 32, 97, 606), 4, 32);
    const auto metrics = all_weight_metrics(model, norms);
    const auto rank = build_global_rank(model, norms, kDefaultAlpha);
    std::size_t ok = 0, total = 0;
    for (double p : {0.2, 0.5, 0.8}) {
        auto plan = allocate_targets(rank, p);
        plan.category = PruneCategory::Unstructured;
        const auto u = serialize_checkpoint(unstructured_prune(model, plan, metrics).model,
                                            unstructured_prune(model, plan, metrics).masks);
        plan.category = PruneCategory::Structured;
        const auto sp = structured_prune(model, plan);
        const auto s = serialize_checkpoint(sp.model, sp.masks);
        plan.category = PruneCategory::Composite;
        plan.structured_share = 0.0;
        const auto c0 = composite_prune(model, plan, metrics);
        plan.structured_share = 1.0;
        const auto c1 = composite_prune(model, plan, metrics);
        ok += serialize_checkpoint(c0.model, c0.masks) == u;
        ok += serialize_checkpoint(c1.model, c1.masks) == s;
        total += 2;
    }
    return {ok == total, fmt("%zu/%zu checkpoints byte-identical (share 0 vs unstructured, share 1 vs structured)",
                             ok, total)};
}

Outcome rank_reuse() {
    const auto cfg = tiny_config(2, 32, 4, 64, 41, 32);
    const auto model = random_model(cfg, {.seed = 707, .heavy_tail_fraction = 0.03});
    const auto rank =
        build_global_rank(model, collect_activation_norms(model, random_tokens(128, 41, 707), 4, 32), 5.0,
                          {4, 32, "synthetic"});
    const auto dir = temp_dir("reuse");
    save_rank(dir / "rank.json", rank);
    const auto reloaded = load_rank(dir / "rank.json");
    std::filesystem::remove_all(dir);

    std::size_t identical = 0;
    bool distinct = true;
    std::vector<PruningPlan> plans;
    for (double p : {0.2, 0.4, 0.6, 0.8}) {
        const auto a = allocate_targets(rank, p, kDefaultLambda, model);
        const auto b = allocate_targets(reloaded, p, kDefaultLambda, model);
        identical += a == b && plan_to_json(a).dump() == plan_to_json(b).dump();
        for (const auto& q : plans) distinct = distinct && q.targets != a.targets;
        plans.push_back(a);
    }
    return {identical == 4 && distinct && reloaded == rank,
            fmt("4 plans from one rank file, %zu bit-identical after reload", identical)};
}

Outcome perplexity_sanity() {
    const std::size_t vocab = 97;
    const auto toks = random_tokens(1000, vocab, 808);
    // Uniform logits through a real model: zero lm_head.
    auto model = random_model(tiny_config(2, 32, 4, 64, vocab, 64), {.seed = 808});
    for (float& x : model.lm_head.values()) x = 0.0f;
    const double ppl_model = perplexity(model, toks, 64, 32).ppl;
    const LogitsFn stub = [&](std::span<const TokenId> w) { return DenseMatrix(w.size(), vocab, 3.0f); };
    const double ppl_stub = perplexity(stub, toks, 64, 64).ppl;
    const LogitsFn perfect = [&](std::span<const TokenId> w) {
        DenseMatrix out(w.size(), vocab, 0.0f);
        const auto begin = static_cast<std::size_t>(w.data() - toks.data());
        for (std::size_t i = 0; i < w.size(); ++i) out(i, toks[begin + i + 1]) = 1e4f;
        return out;
    };
    const double ppl_perfect = perplexity(perfect, toks, 64, 16).ppl;
    const bool pass = std::fabs(ppl_model / vocab - 1.0) <= 1e-3 && std::fabs(ppl_stub / vocab - 1.0) <= 1e-3 &&
                      std::fabs(ppl_perfect - 1.0) <= 1e-9;
    return {pass, fmt("uniform model %.6f, uniform stub %.6f (vocab %zu), perfect stub %.9f", ppl_model, ppl_stub,
                      vocab, ppl_perfect)};
}

Outcome runtime_direction() {
    set_num_threads(1);
    const auto cfg = tiny_config(4, 64, 4, 128, 64, 256);
    const auto model = random_model(cfg, {.seed = 909, .heavy_tail_fraction = 0.02});
    const auto norms = collect_activation_norms(model, random_tokens(4 * 256, 64, 909), 4, 256);
    auto plan = allocate_targets(build_global_rank(model, norms, kDefaultAlpha), 0.5);
    plan.category = PruneCategory::Composite;
    plan.structured_share = 0.5;
    const auto pruned = composite_prune(model, plan, all_weight_metrics(model, norms));

    BenchOptions o;
    o.input_tokens = 256;
    o.output_tokens = 0;  // one full forward per trial
    o.trials = 5;
    (void)bench(model, {.input_tokens = 256, .output_tokens = 0, .trials = 1});  // warm-up
    const auto dense = bench(model, o);
    const auto small = bench(pruned, o);
    const double lat = small.mean_latency_s / dense.mean_latency_s;
    const double params = static_cast<double>(small.model_param_count) / static_cast<double>(dense.model_param_count);
    return {lat <= 0.8 && params <= 0.75,
            fmt("latency %.2fx (%.2f ms vs %.2f ms, sd %.2f/%.2f ms), params %.2fx (%zu vs %zu)", lat,
                1e3 * small.mean_latency_s, 1e3 * dense.mean_latency_s, 1e3 * small.stddev_latency_s,
                1e3 * dense.stddev_latency_s, params, small.model_param_count, dense.model_param_count)};
}

struct CountingSink : ActivationSink {
    std::size_t calls = 0;
    std::size_t bad = 0;
    const LanguageModel* model = nullptr;
    std::size_t seq = 0;
    void observe(ProjectionId id, const DenseMatrix& in) override {
        ++calls;
        if (in.rows() != seq || in.cols() != model->projection(id).cols()) ++bad;
    }
};

Outcome causality_taps() {
    std::mt19937_64 rng(1010);
    std::size_t causal_fail = 0, tap_fail = 0;
    for (int t = 0; t < 100; ++t) {
        const std::size_t heads = 1 + rng() % 4;
        const std::size_t hd = 2 * (1 + rng() % 4);
        const auto cfg = tiny_config(1 + rng() % 3, heads * hd, heads, 4 + rng() % 29, 5 + rng() % 40, 24);
        const auto model = random_model(cfg, {.seed = 5000 + static_cast<std::uint64_t>(t)});
        auto toks = random_tokens(2 + rng() % 23, cfg.vocab_size, 6000 + t);
        const auto base = forward(model, toks);

        CountingSink sink;
        sink.model = &model;
        sink.seq = toks.size();
        const auto tapped = forward_with_taps(model, toks, sink);
        if (!(tapped == base) || sink.calls != model.projection_count() || sink.bad) ++tap_fail;

        const std::size_t k = 1 + rng() % (toks.size() - 1);
        for (std::size_t s = k; s < toks.size(); ++s) toks[s] = static_cast<TokenId>(rng() % cfg.vocab_size);
        const auto after = forward(model, toks);
        for (std::size_t s = 0; s < k; ++s) {
            if (!std::equal(base.row(s).begin(), base.row(s).end(), after.row(s).begin())) {
                ++causal_fail;
                break;
            }
        }
    }
    return {causal_fail == 0 && tap_fail == 0,
            fmt("100 models: %zu causality violations, %zu tap violations", causal_fail, tap_fail)};
}

}  // namespace

int main(int argc, char** argv) {
    const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
        {"pod_oracle", pod_oracle},
        {"scale_invariance", scale_invariance},
        {"plan_exactness", plan_exactness},
        {"sparsity_accounting", sparsity_accounting},
        {"mask_structure_equivalence", mask_structure_equivalence},
        {"degenerate_split", degenerate_split},
        {"rank_reuse", rank_reuse},
        {"perplexity_sanity", perplexity_sanity},
        {"runtime_direction", runtime_direction},
        {"causality_taps", causality_taps},
    };
    const char* only = argc > 1 ? argv[1] : nullptr;
    int failed = 0;
    bool matched = false;
    for (const auto& [name, fn] : criteria) {
        if (only && std::strcmp(only, name) != 0) continue;
        matched = true;
        Outcome o;
        try {
            o = fn();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        std::printf("%s %s: %s\n", o.pass ? "PASS" : "FAIL", name, o.detail.c_str());
        std::fflush(stdout);
        failed += !o.pass;
    }
    if (!matched) {
        std::fprintf(stderr, "unknown criterion '%s'\n", only);
        return 2;
    }
    return failed == 0 ? 0 : 1;
}
