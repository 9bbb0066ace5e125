#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "mosaic/errors.h"
#include "mosaic/eval.h"
#include "mosaic/io.h"
#include "mosaic/pruning.h"
#include "mosaic/ranking.h"

namespace py = pybind11;
using namespace mosaic;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;
using TokenArray = py::array_t<TokenId, py::array::c_style | py::array::forcecast>;

py::array_t<float> to_numpy(const DenseMatrix& m) {
    py::array_t<float> out({m.rows(), m.cols()});
    std::copy(m.values().begin(), m.values().end(), out.mutable_data());
    return out;
}

py::array_t<double> grid(const std::vector<double>& flat, std::size_t n_layers) {
    py::array_t<double> out({n_layers, kProjectionsPerLayer});
    std::copy(flat.begin(), flat.end(), out.mutable_data());
    return out;
}

template <class T>
py::array_t<T> vector_copy(std::span<const T> v) {
    py::array_t<T> out(std::vector<py::ssize_t>{static_cast<py::ssize_t>(v.size())});
    std::copy(v.begin(), v.end(), out.mutable_data());
    return out;
}

DenseMatrix from_numpy(const FloatArray& a) {
    if (a.ndim() != 2) throw ShapeError("expected a 2-D array");
    return DenseMatrix(a.shape(0), a.shape(1), std::span<const float>(a.data(), a.size()));
}

std::span<const TokenId> tokens_of(const TokenArray& a) {
    if (a.ndim() != 1) throw ShapeError("expected a 1-D token array");
    return {a.data(), static_cast<std::size_t>(a.size())};
}

ProjectionId projection_arg(std::size_t layer, const std::string& kind) {
    return {layer, projection_from_name(kind)};
}

}  // namespace

PYBIND11_MODULE(_mosaic, m) {
    m.doc() = "Outlier-guided pruning for small decoder language models";

    auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
    py::register_exception<ShapeError>(m, "ShapeError", base.ptr());
    py::register_exception<InputError>(m, "InputError", base.ptr());
    py::register_exception<ArgumentError>(m, "ArgumentError", base.ptr());
    py::register_exception<StateError>(m, "StateError", base.ptr());
    py::register_exception<FormatError>(m, "FormatError", base.ptr());
    py::register_exception<IntegrityError>(m, "IntegrityError", base.ptr());
    py::register_exception<AllocationError>(m, "AllocationError", base.ptr());

    m.attr("DEFAULT_ALPHA") = kDefaultAlpha;
    m.attr("DEFAULT_LAMBDA") = kDefaultLambda;
    m.attr("PROJECTIONS") = py::make_tuple("q", "k", "v", "o", "g", "u", "d");

    m.def("set_num_threads", &set_num_threads, py::arg("n"));
    m.def("num_threads", &num_threads);

    py::class_<ModelConfig>(m, "ModelConfig")
        .def(py::init([](std::size_t n_layers, std::size_t d_model, std::size_t n_heads, std::size_t d_ff,
                         std::size_t vocab_size, std::size_t max_seq_len) {
                 if (n_heads == 0 || d_model % n_heads != 0) {
                     throw ArgumentError("d_model must be a multiple of n_heads");
                 }
                 ModelConfig c;
                 c.n_layers = n_layers;
                 c.d_model = d_model;
                 c.n_heads = n_heads;
                 c.head_dim = d_model / n_heads;
                 c.d_ff = d_ff;
                 c.vocab_size = vocab_size;
                 c.max_seq_len = max_seq_len;
                 return c;
             }),
             py::arg("n_layers"), py::arg("d_model"), py::arg("n_heads"), py::arg("d_ff"), py::arg("vocab_size"),
             py::arg("max_seq_len"))
        .def_readonly("n_layers", &ModelConfig::n_layers)
        .def_readonly("d_model", &ModelConfig::d_model)
        .def_readonly("n_heads", &ModelConfig::n_heads)
        .def_readonly("head_dim", &ModelConfig::head_dim)
        .def_readonly("d_ff", &ModelConfig::d_ff)
        .def_readonly("vocab_size", &ModelConfig::vocab_size)
        .def_readonly("max_seq_len", &ModelConfig::max_seq_len)
        .def("__eq__", [](const ModelConfig& a, const ModelConfig& b) { return a == b; })
        .def("__repr__", [](const ModelConfig& c) { return config_to_json(c).dump(); });

    py::class_<LanguageModel>(m, "LanguageModel")
        .def_readonly("config", &LanguageModel::config)
        .def("projection", [](const LanguageModel& lm, std::size_t layer,
                              const std::string& kind) { return to_numpy(lm.projection(projection_arg(layer, kind))); },
             py::arg("layer"), py::arg("kind"))
        .def("set_projection",
             [](LanguageModel& lm, std::size_t layer, const std::string& kind, const FloatArray& w) {
                 auto& dst = lm.projection(projection_arg(layer, kind));
                 auto src = from_numpy(w);
                 if (src.rows() != dst.rows() || src.cols() != dst.cols()) throw ShapeError("projection shape mismatch");
                 dst = std::move(src);
             },
             py::arg("layer"), py::arg("kind"), py::arg("weights"))
        .def("live_heads", [](const LanguageModel& lm, std::size_t layer) { return lm.layers.at(layer).live_heads; })
        .def("live_ff_channels",
             [](const LanguageModel& lm, std::size_t layer) { return lm.layers.at(layer).live_ff_channels; })
        .def_property_readonly("param_count", &total_param_count)
        .def_property_readonly("fingerprint", &model_fingerprint)
        .def("__eq__", [](const LanguageModel& a, const LanguageModel& b) { return a == b; });

    m.def("random_model",
          [](const ModelConfig& cfg, std::uint64_t seed, double heavy_tail_fraction) {
              return random_model(cfg, {.seed = seed, .heavy_tail_fraction = heavy_tail_fraction});
          },
          py::arg("config"), py::arg("seed") = 1, py::arg("heavy_tail_fraction") = 0.01);

    m.def("forward", [](const LanguageModel& lm, const TokenArray& t) { return to_numpy(forward(lm, tokens_of(t))); },
          py::arg("model"), py::arg("tokens"));
    m.def("generate_greedy",
          [](const LanguageModel& lm, const TokenArray& t, std::size_t n) {
              return generate_greedy(lm, tokens_of(t), n);
          },
          py::arg("model"), py::arg("prompt"), py::arg("new_tokens"));

    py::class_<ActivationNorms>(m, "ActivationNorms")
        .def_readonly("token_count", &ActivationNorms::token_count)
        .def("norms", [](const ActivationNorms& n, std::size_t layer, const std::string& kind) {
            return vector_copy(n.at(projection_arg(layer, kind)).values());
        });
    m.def("collect_activation_norms",
          [](const LanguageModel& lm, const TokenArray& stream, std::size_t samples, std::size_t seq_len) {
              return collect_activation_norms(lm, tokens_of(stream), samples, seq_len);
          },
          py::arg("model"), py::arg("stream"), py::arg("samples") = 128, py::arg("seq_len"));

    m.def("weight_metric",
          [](const FloatArray& w, const py::array_t<float, py::array::c_style | py::array::forcecast>& norms) {
              const DenseVector n(std::span<const float>(norms.data(), norms.size()));
              return to_numpy(weight_metric(from_numpy(w), n).values);
          },
          py::arg("weights"), py::arg("input_norms"));
    m.def("count_outliers",
          [](const FloatArray& metric, double alpha) {
              return count_projection_outliers({{}, from_numpy(metric)}, alpha);
          },
          py::arg("metric"), py::arg("alpha") = kDefaultAlpha);

    py::class_<GlobalRank>(m, "Rank")
        .def_readonly("alpha", &GlobalRank::alpha)
        .def_readonly("n_layers", &GlobalRank::n_layers)
        .def_readonly("degenerate", &GlobalRank::degenerate)
        .def_readonly("model_fingerprint", &GlobalRank::model_fingerprint)
        .def_property_readonly("scope", [](const GlobalRank& r) { return std::string(rank_scope_name(r.scope)); })
        .def_property_readonly("entries", [](const GlobalRank& r) { return grid(r.entries, r.n_layers); })
        .def_property_readonly("outlier_counts", [](const GlobalRank& r) { return r.outlier_counts; })
        .def("to_json", [](const GlobalRank& r) { return rank_to_json(r).dump(2); })
        .def_static("from_json", [](const std::string& s) { return rank_from_json(nlohmann::json::parse(s)); })
        .def("save", [](const GlobalRank& r, const std::filesystem::path& p) { save_rank(p, r); })
        .def_static("load", &load_rank)
        .def("__eq__", [](const GlobalRank& a, const GlobalRank& b) { return a == b; });

    m.def("build_rank",
          [](const LanguageModel& lm, const ActivationNorms& norms, double alpha, const std::string& scope) {
              switch (rank_scope_from_name(scope)) {
                  case RankScope::Projection: return build_global_rank(lm, norms, alpha);
                  case RankScope::Layer: return build_layer_rank(lm, norms, alpha);
                  case RankScope::Uniform: break;
              }
              return uniform_rank(lm);
          },
          py::arg("model"), py::arg("norms"), py::arg("alpha") = kDefaultAlpha, py::arg("scope") = "projection");

    py::class_<PruningPlan>(m, "Plan")
        .def_readonly("p", &PruningPlan::p)
        .def_readonly("lambda_", &PruningPlan::lambda)
        .def_readonly("warnings", &PruningPlan::warnings)
        .def_readwrite("structured_share", &PruningPlan::structured_share)
        .def_property(
            "category", [](const PruningPlan& p) { return std::string(category_name(p.category)); },
            [](PruningPlan& p, const std::string& c) { p.category = category_from_name(c); })
        .def_property_readonly("targets", [](const PruningPlan& p) { return grid(p.targets, p.n_layers); })
        .def_property_readonly("weighted_mean", &PruningPlan::weighted_mean)
        .def("to_json", [](const PruningPlan& p) { return plan_to_json(p).dump(2); })
        .def_static("from_json", [](const std::string& s) { return plan_from_json(nlohmann::json::parse(s)); })
        .def("__eq__", [](const PruningPlan& a, const PruningPlan& b) { return a == b; });

    m.def("allocate_targets",
          [](const GlobalRank& r, double p, double lambda, const LanguageModel* lm) {
              return lm ? allocate_targets(r, p, lambda, *lm) : allocate_targets(r, p, lambda);
          },
          py::arg("rank"), py::arg("p"), py::arg("lambda_") = kDefaultLambda, py::arg("model") = nullptr);

    m.def("select_category",
          [](std::uint64_t gpu_memory_bytes, bool sparse_accelerator, const std::string& tier,
             std::uint64_t model_bytes) {
              const DeviceProfile d{gpu_memory_bytes, sparse_accelerator, tier_from_name(tier)};
              return std::string(category_name(select_category(d, model_bytes)));
          },
          py::arg("gpu_memory_bytes"), py::arg("sparse_accelerator"), py::arg("tier"), py::arg("model_bytes"));

    py::class_<PrunedModel>(m, "PrunedModel")
        .def_readonly("model", &PrunedModel::model)
        .def_readonly("plan", &PrunedModel::plan)
        .def_readonly("warnings", &PrunedModel::warnings)
        .def_property_readonly("live_param_count", &PrunedModel::live_param_count)
        .def_property_readonly("effective_sparsity",
                               [](const PrunedModel& p) { return p.ledger.totals().effective_sparsity(); })
        .def("projection_sparsity",
             [](const PrunedModel& p, std::size_t layer, const std::string& kind) {
                 return p.ledger.per_projection.at(projection_arg(layer, kind).flat()).effective_sparsity();
             })
        .def("audit", [](const PrunedModel& p) { return sparsity_audit(p).effective_sparsity(); })
        .def("save",
             [](const PrunedModel& p, const std::filesystem::path& path) {
                 write_file_atomic(path, finalize_for_deployment(p));
             })
        .def_static("load", &load_pruned);

    m.def("prune",
          [](const LanguageModel& lm, const PruningPlan& plan, const ActivationNorms& norms) {
              return prune(lm, plan, all_weight_metrics(lm, norms));
          },
          py::arg("model"), py::arg("plan"), py::arg("norms"));

    m.def("perplexity",
          [](const LanguageModel& lm, const TokenArray& t, std::size_t ctx, std::size_t stride) {
              const auto r = perplexity(lm, tokens_of(t), ctx, stride);
              py::dict d;
              d["ppl"] = r.ppl;
              d["mean_nll"] = r.mean_nll;
              d["token_count"] = r.token_count;
              return d;
          },
          py::arg("model"), py::arg("tokens"), py::arg("context_len"), py::arg("stride"));

    m.def("save_checkpoint",
          [](const std::filesystem::path& p, const LanguageModel& lm) { save_checkpoint(p, lm); });
    m.def("load_model", [](const std::filesystem::path& p) { return load_checkpoint(p).model; });

    m.def("save_token_stream",
          [](const std::filesystem::path& p, const TokenArray& t, std::uint32_t vocab) {
              const auto s = tokens_of(t);
              save_token_stream(p, {vocab, {s.begin(), s.end()}});
          },
          py::arg("path"), py::arg("tokens"), py::arg("vocab_size"));
    m.def("load_token_stream", [](const std::filesystem::path& p) {
        auto s = load_token_stream(p);
        return py::make_tuple(vector_copy<TokenId>(s.tokens), s.vocab_size);
    });
}
