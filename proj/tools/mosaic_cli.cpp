#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mosaic/errors.h"
#include "mosaic/eval.h"
#include "mosaic/io.h"
#include "mosaic/log.h"
#include "mosaic/pruning.h"
#include "mosaic/ranking.h"

using namespace mosaic;

namespace {

enum Exit { kOk = 0, kFailure = 1, kInput = 2, kIntegrity = 3, kInfeasible = 4 };

std::uint64_t parse_bytes(const std::string& s) {
    if (s.empty()) throw InputError("empty memory size");
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    const std::string unit = s.substr(pos);
    double scale = 1.0;
    if (unit == "" || unit == "B") scale = 1.0;
    else if (unit == "K" || unit == "KB") scale = 1024.0;
    else if (unit == "M" || unit == "MB") scale = 1024.0 * 1024.0;
    else if (unit == "G" || unit == "GB") scale = 1024.0 * 1024.0 * 1024.0;
    else throw InputError("bad memory unit in '" + s + "'");
    return static_cast<std::uint64_t>(v * scale);
}

void print_outlier_table(const GlobalRank& rank) {
    std::printf("%-14s %10s %10s %10s %8s\n", "projection", "outliers", "params", "ratio %", "rank");
    for (std::size_t i = 0; i < rank.entries.size(); ++i) {
        std::printf("%-14s %10zu %10zu %10.4f %8.4f\n", ProjectionId::from_flat(i).label().c_str(),
                    rank.outlier_counts[i], rank.param_counts[i], rank.raw[i], rank.entries[i]);
    }
    if (rank.degenerate) std::printf("note: no outliers found, rank is uniform\n");
}

void print_ledger(const SparsityLedger& ledger, const PruningPlan* plan) {
    std::printf("%-14s %10s %10s %10s %10s%s\n", "projection", "original", "zeroed", "removed", "effective",
                plan ? "   target" : "");
    for (std::size_t i = 0; i < ledger.per_projection.size(); ++i) {
        const auto& e = ledger.per_projection[i];
        std::printf("%-14s %10zu %10zu %10zu %9.4f%s", ProjectionId::from_flat(i).label().c_str(), e.original_params,
                    e.zeroed_params, e.removed_params, e.effective_sparsity(), e.over_delivered ? "*" : " ");
        if (plan && i < plan->targets.size()) std::printf(" %8.4f", plan->targets[i]);
        std::printf("\n");
    }
    const auto t = ledger.totals();
    std::printf("%-14s %10zu %10zu %10zu %9.4f\n", "total", t.original_params, t.zeroed_params, t.removed_params,
                t.effective_sparsity());
}

std::vector<TokenId> load_tokens(const std::string& path, const LanguageModel& model) {
    TokenStream s = load_token_stream(path);
    if (s.vocab_size > model.config.vocab_size) {
        throw InputError(path + ": stream vocabulary " + std::to_string(s.vocab_size) + " exceeds model's " +
                         std::to_string(model.config.vocab_size));
    }
    return std::move(s.tokens);
}

std::size_t seq_len_or_default(std::size_t seq_len, const LanguageModel& m) {
    return seq_len ? seq_len : m.config.max_seq_len;
}

}  // namespace

int run(int argc, char** argv) {
    CLI::App app{"Outlier-guided projection pruning for decoder language models"};
    app.require_subcommand(1);
    std::uint64_t seed = 1;
    int threads = 1;
    app.add_option("--seed", seed, "Random seed")->capture_default_str();
    app.add_option("--threads", threads, "Worker threads")->capture_default_str()->check(CLI::PositiveNumber);

    // init
    auto* init = app.add_subcommand("init", "Write a random model checkpoint");
    std::string init_out;
    ModelConfig cfg{2, 64, 4, 16, 128, 256, 512};
    double heavy_tail = 0.01;
    init->add_option("--out", init_out)->required();
    init->add_option("--layers", cfg.n_layers)->capture_default_str();
    init->add_option("--d-model", cfg.d_model)->capture_default_str();
    init->add_option("--heads", cfg.n_heads)->capture_default_str();
    init->add_option("--d-ff", cfg.d_ff)->capture_default_str();
    init->add_option("--vocab", cfg.vocab_size)->capture_default_str();
    init->add_option("--max-seq", cfg.max_seq_len)->capture_default_str();
    init->add_option("--heavy-tail", heavy_tail, "Fraction of widened weights")->capture_default_str();

    // gen-stream
    auto* gen = app.add_subcommand("gen-stream", "Write a uniform random token stream");
    std::string gen_out;
    std::uint32_t gen_vocab = 256;
    std::size_t gen_count = 4096;
    gen->add_option("--out", gen_out)->required();
    gen->add_option("--vocab", gen_vocab)->capture_default_str();
    gen->add_option("--count", gen_count)->capture_default_str();

    // rank
    auto* rank_cmd = app.add_subcommand("rank", "Profile outliers and write the global rank");
    std::string model_path, calib_path, rank_out;
    std::size_t samples = 128, seq_len = 0;
    double alpha = kDefaultAlpha;
    std::string scope_name = "projection";
    rank_cmd->add_option("--model", model_path)->required()->check(CLI::ExistingFile);
    rank_cmd->add_option("--calib", calib_path)->required()->check(CLI::ExistingFile);
    rank_cmd->add_option("--samples", samples)->capture_default_str();
    rank_cmd->add_option("--seq-len", seq_len, "Window length (default: model max)");
    rank_cmd->add_option("--alpha", alpha)->capture_default_str();
    rank_cmd->add_option("--scope", scope_name, "projection | layer | global")->capture_default_str();
    rank_cmd->add_option("--out", rank_out)->required();

    // plan
    auto* plan_cmd = app.add_subcommand("plan", "Allocate per-projection sparsity targets");
    std::string rank_path, plan_out, category = "auto", device_mem, tier = "desktop", plan_model;
    double p = 0.0, lambda = kDefaultLambda, share = kDefaultStructuredShare;
    bool accelerator = false;
    plan_cmd->add_option("--rank", rank_path)->required()->check(CLI::ExistingFile);
    plan_cmd->add_option("--p", p)->required();
    plan_cmd->add_option("--lambda", lambda)->capture_default_str();
    plan_cmd->add_option("--category", category, "auto | unstructured | structured | composite")
        ->capture_default_str();
    plan_cmd->add_option("--structured-share", share)->capture_default_str();
    plan_cmd->add_option("--device-mem", device_mem, "Accelerator memory, e.g. 10G (auto only)");
    plan_cmd->add_option("--tier", tier, "cloud | desktop | soc | cpu-only")->capture_default_str();
    plan_cmd->add_flag("--sparse-accelerator", accelerator, "Device runs sparse kernels");
    plan_cmd->add_option("--model", plan_model, "Checkpoint used for size under auto")->check(CLI::ExistingFile);
    plan_cmd->add_option("--out", plan_out)->required();

    // prune
    auto* prune_cmd = app.add_subcommand("prune", "Execute a plan and write the pruned checkpoint");
    std::string plan_path, prune_out;
    prune_cmd->add_option("--model", model_path)->required()->check(CLI::ExistingFile);
    prune_cmd->add_option("--plan", plan_path)->required()->check(CLI::ExistingFile);
    prune_cmd->add_option("--calib", calib_path, "Calibration stream (masking categories)")
        ->check(CLI::ExistingFile);
    prune_cmd->add_option("--samples", samples)->capture_default_str();
    prune_cmd->add_option("--seq-len", seq_len);
    prune_cmd->add_option("--out", prune_out)->required();

    // audit
    auto* audit_cmd = app.add_subcommand("audit", "Recount the sparsity ledger of a checkpoint");
    audit_cmd->add_option("--model", model_path)->required()->check(CLI::ExistingFile);

    // eval
    auto* eval_cmd = app.add_subcommand("eval", "Sliding-window perplexity");
    std::string stream_path;
    std::size_t context = 0, stride = 0;
    eval_cmd->add_option("--model", model_path)->required()->check(CLI::ExistingFile);
    eval_cmd->add_option("--stream", stream_path)->required()->check(CLI::ExistingFile);
    eval_cmd->add_option("--context", context, "Context window (default: model max)");
    eval_cmd->add_option("--stride", stride, "Target block size (default: context)");

    // bench
    auto* bench_cmd = app.add_subcommand("bench", "Generation latency and memory");
    BenchOptions bopts;
    std::string bench_json;
    bench_cmd->add_option("--model", model_path)->required()->check(CLI::ExistingFile);
    bench_cmd->add_option("--in", bopts.input_tokens)->capture_default_str();
    bench_cmd->add_option("--out-tokens", bopts.output_tokens)->capture_default_str();
    bench_cmd->add_option("--batch", bopts.batch)->capture_default_str();
    bench_cmd->add_option("--trials", bopts.trials)->capture_default_str();
    bench_cmd->add_option("--json", bench_json, "Also write the report as JSON");

    // compare / sweep
    auto* compare_cmd = app.add_subcommand("compare", "Global vs layer vs projection ranking");
    auto* sweep_cmd = app.add_subcommand("sweep", "Calibration sample-size study");
    std::string eval_path, csv_out, p_list = "0.5,0.6", sizes = "1,2,4,8,16,32,64,128,256";
    std::string cmp_category = "unstructured";
    for (auto* sc : {compare_cmd, sweep_cmd}) {
        sc->add_option("--model", model_path)->required()->check(CLI::ExistingFile);
        sc->add_option("--calib", calib_path)->required()->check(CLI::ExistingFile);
        sc->add_option("--eval", eval_path)->required()->check(CLI::ExistingFile);
        sc->add_option("--seq-len", seq_len);
        sc->add_option("--context", context);
        sc->add_option("--stride", stride);
        sc->add_option("--alpha", alpha)->capture_default_str();
        sc->add_option("--lambda", lambda)->capture_default_str();
        sc->add_option("--category", cmp_category)->capture_default_str();
        sc->add_option("--structured-share", share)->capture_default_str();
        sc->add_option("--csv", csv_out, "Write CSV here instead of stdout");
    }
    compare_cmd->add_option("--p-list", p_list)->capture_default_str();
    compare_cmd->add_option("--samples", samples)->capture_default_str();
    sweep_cmd->add_option("--p", p)->required();
    sweep_cmd->add_option("--sample-sizes", sizes)->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kInput;
    }

    set_num_threads(threads);

    if (init->parsed()) {
        cfg.head_dim = cfg.n_heads ? cfg.d_model / cfg.n_heads : 0;
        if (cfg.n_heads == 0 || cfg.head_dim * cfg.n_heads != cfg.d_model || cfg.head_dim % 2 != 0) {
            throw ArgumentError("d_model must split into an even head_dim per head");
        }
        RandomModelOptions ro;
        ro.seed = seed;
        ro.heavy_tail_fraction = heavy_tail;
        const LanguageModel m = random_model(cfg, ro);
        save_checkpoint(init_out, m);
        std::printf("wrote %s (%zu params, fingerprint %s)\n", init_out.c_str(), total_param_count(m),
                    model_fingerprint(m).c_str());
    } else if (gen->parsed()) {
        if (gen_vocab == 0) throw ArgumentError("vocab must be >= 1");
        std::mt19937_64 rng(seed);
        std::uniform_int_distribution<TokenId> dist(0, gen_vocab - 1);
        TokenStream s{gen_vocab, std::vector<TokenId>(gen_count)};
        for (auto& t : s.tokens) t = dist(rng);
        save_token_stream(gen_out, s);
        std::printf("wrote %s (%zu tokens)\n", gen_out.c_str(), gen_count);
    } else if (rank_cmd->parsed()) {
        const LanguageModel m = load_checkpoint(model_path).model;
        const auto tokens = load_tokens(calib_path, m);
        const std::size_t L = seq_len_or_default(seq_len, m);
        const std::size_t used = std::min(samples, tokens.size() / std::max<std::size_t>(L, 1));
        const CalibrationInfo info{used, L, std::filesystem::path(calib_path).filename().string()};
        const RankScope scope = rank_scope_from_name(scope_name);
        GlobalRank r;
        if (scope == RankScope::Uniform) {
            r = uniform_rank(m);
        } else {
            const ActivationNorms norms = collect_activation_norms(m, tokens, samples, L);
            r = scope == RankScope::Layer ? build_layer_rank(m, norms, alpha, info)
                                          : build_global_rank(m, norms, alpha, info);
        }
        save_rank(rank_out, r);
        print_outlier_table(r);
    } else if (plan_cmd->parsed()) {
        const GlobalRank r = load_rank(rank_path);
        PruningPlan plan = allocate_targets(r, p, lambda);
        if (category == "auto") {
            DeviceProfile dev;
            dev.gpu_memory_bytes = device_mem.empty() ? 0 : parse_bytes(device_mem);
            dev.has_sparse_accelerator = accelerator;
            dev.tier = tier_from_name(tier);
            std::uint64_t size = 0;
            if (!plan_model.empty()) {
                size = total_param_count(load_checkpoint(plan_model).model) * sizeof(float);
            } else {
                for (auto c : r.param_counts) size += c * sizeof(float);
            }
            plan.category = select_category(dev, size);
            log::info("auto category: " + std::string(category_name(plan.category)));
        } else {
            plan.category = category_from_name(category);
        }
        if (!(share >= 0.0 && share <= 1.0)) throw ArgumentError("--structured-share must lie in [0, 1]");
        plan.structured_share = share;
        for (const auto& w : plan.warnings) log::warn(w);
        save_plan(plan_out, plan);
        std::printf("plan: p=%.4f category=%s weighted mean=%.9f targets in [%.4f, %.4f]\n", plan.p,
                    std::string(category_name(plan.category)).c_str(), plan.weighted_mean(),
                    *std::min_element(plan.targets.begin(), plan.targets.end()),
                    *std::max_element(plan.targets.begin(), plan.targets.end()));
    } else if (prune_cmd->parsed()) {
        const LanguageModel m = load_checkpoint(model_path).model;
        const PruningPlan plan = load_plan(plan_path);
        const std::string fp = model_fingerprint(m);
        if (plan.rank_fingerprint != fp) {
            throw IntegrityError("plan was built for model " + plan.rank_fingerprint + ", this model is " + fp);
        }
        std::vector<WeightMetricMatrix> metrics;
        if (plan.category != PruneCategory::Structured) {
            if (calib_path.empty()) throw InputError("--calib is required for " +
                                                     std::string(category_name(plan.category)) + " pruning");
            const auto tokens = load_tokens(calib_path, m);
            metrics = all_weight_metrics(m, collect_activation_norms(m, tokens, samples, seq_len_or_default(seq_len, m)));
        }
        const PrunedModel pruned = prune(m, plan, metrics);
        for (const auto& w : pruned.warnings) log::warn(w);
        write_file_atomic(prune_out, finalize_for_deployment(pruned));
        print_ledger(pruned.ledger, &pruned.plan);
    } else if (audit_cmd->parsed()) {
        const PrunedModel pm = load_pruned(model_path);
        const SparsityAudit a = sparsity_audit(pm);
        print_ledger(a.recount, nullptr);
    } else if (eval_cmd->parsed()) {
        const LanguageModel m = load_checkpoint(model_path).model;
        const auto tokens = load_tokens(stream_path, m);
        const std::size_t ctx = context ? context : m.config.max_seq_len;
        const PerplexityReport r =
            perplexity(m, tokens, ctx, stride ? stride : ctx, std::filesystem::path(stream_path).filename().string());
        std::printf("corpus=%s tokens=%zu context=%zu stride=%zu nll=%.6f ppl=%.6f\n", r.corpus.c_str(),
                    r.token_count, r.context_len, r.stride, r.mean_nll, r.ppl);
    } else if (bench_cmd->parsed()) {
        const PrunedModel pm = load_pruned(model_path);
        bopts.seed = seed;
        const BenchReport r = bench(pm, bopts);
        std::printf("in=%zu out=%zu batch=%zu trials=%zu threads=%d\n", r.input_tokens, r.output_tokens, r.batch,
                    r.trials, r.threads);
        std::printf("latency mean=%.6fs stddev=%.6fs peak_bytes=%zu params=%zu\n", r.mean_latency_s,
                    r.stddev_latency_s, r.peak_resident_bytes, r.model_param_count);
        if (!bench_json.empty()) {
            const nlohmann::json j{{"input_tokens", r.input_tokens},
                                   {"output_tokens", r.output_tokens},
                                   {"batch", r.batch},
                                   {"trials", r.trials},
                                   {"threads", r.threads},
                                   {"trial_seconds", r.trial_seconds},
                                   {"mean_latency_s", r.mean_latency_s},
                                   {"stddev_latency_s", r.stddev_latency_s},
                                   {"peak_resident_bytes", r.peak_resident_bytes},
                                   {"model_param_count", r.model_param_count}};
            write_file_atomic(bench_json, j.dump(2) + "\n");
        }
    } else if (compare_cmd->parsed() || sweep_cmd->parsed()) {
        const LanguageModel m = load_checkpoint(model_path).model;
        const auto calib = load_tokens(calib_path, m);
        const auto eval = load_tokens(eval_path, m);
        CompareOptions o;
        o.alpha = alpha;
        o.lambda = lambda;
        o.category = category_from_name(cmp_category);
        o.structured_share = share;
        o.samples = samples;
        o.seq_len = seq_len;
        o.context_len = context;
        o.stride = stride;
        std::string csv;
        if (compare_cmd->parsed()) {
            std::vector<double> ps;
            std::stringstream ss(p_list);
            for (std::string item; std::getline(ss, item, ',');) ps.push_back(std::stod(item));
            const auto rows = compare_methods(m, calib, eval, ps, o);
            csv = comparison_csv(rows);
            if (!csv_out.empty()) std::fputs(comparison_text(rows).c_str(), stdout);
        } else {
            std::vector<std::size_t> ns;
            std::stringstream ss(sizes);
            for (std::string item; std::getline(ss, item, ',');) ns.push_back(std::stoul(item));
            csv = sweep_csv(calibration_sweep(m, calib, eval, p, ns, o));
        }
        if (csv_out.empty()) std::fputs(csv.c_str(), stdout);
        else write_file_atomic(csv_out, csv);
    }
    return kOk;
}

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const IntegrityError& e) {
        log::error(e.what());
        return kIntegrity;
    } catch (const AllocationError& e) {
        log::error(e.what());
        return kInfeasible;
    } catch (const InputError& e) {
        log::error(e.what());
        return kInput;
    } catch (const FormatError& e) {
        log::error(e.what());
        return kInput;
    } catch (const ShapeError& e) {
        log::error(e.what());
        return kInput;
    } catch (const ArgumentError& e) {
        log::error(e.what());
        return kInput;
    } catch (const std::invalid_argument& e) {
        log::error(std::string("bad number: ") + e.what());
        return kInput;
    } catch (const std::exception& e) {
        log::error(e.what());
        return kFailure;
    }
}
