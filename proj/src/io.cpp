#include "mosaic/io.h"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include "mosaic/errors.h"

namespace mosaic {

using nlohmann::json;

namespace {

constexpr char kCheckpointMagic[4] = {'M', 'O', 'S', 'C'};
constexpr char kStreamMagic[4] = {'M', 'O', 'S', 'T'};
constexpr std::size_t kPreambleBytes = 4 + 4 + 8 + 8;

class ByteWriter {
public:
    void raw(const void* p, std::size_t n) {
        const auto* b = static_cast<const std::uint8_t*>(p);
        out_.insert(out_.end(), b, b + n);
    }
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void floats(std::span<const float> v) {
        for (float f : v) {
            std::uint32_t bits;
            std::memcpy(&bits, &f, 4);
            u32(bits);
        }
    }
    std::size_t size() const { return out_.size(); }
    std::vector<std::uint8_t> take() { return std::move(out_); }

private:
    std::vector<std::uint8_t> out_;
};

class ByteReader {
public:
    explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

    void need(std::size_t n) const {
        if (pos_ + n > bytes_.size()) throw FormatError("truncated file");
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
        pos_ += 4;
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
        pos_ += 8;
        return v;
    }
    std::span<const std::uint8_t> take(std::size_t n) {
        need(n);
        auto s = bytes_.subspan(pos_, n);
        pos_ += n;
        return s;
    }
    std::size_t pos() const { return pos_; }
    std::size_t remaining() const { return bytes_.size() - pos_; }

private:
    std::span<const std::uint8_t> bytes_;
    std::size_t pos_ = 0;
};

std::uint64_t fnv1a(std::span<const std::uint8_t> data) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (std::uint8_t b : data) {
        h ^= b;
        h *= 0x100000001b3ull;
    }
    return h;
}

void read_floats(std::span<const std::uint8_t> src, std::span<float> dst) {
    for (std::size_t i = 0; i < dst.size(); ++i) {
        std::uint32_t bits = 0;
        for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(src[4 * i + b]) << (8 * b);
        std::memcpy(&dst[i], &bits, 4);
    }
}

// Walks every tensor of the model in payload order.
template <class Fn>
void for_each_tensor(const LanguageModel& model, Fn&& fn) {
    fn(std::string("embedding"), model.embedding.rows(), model.embedding.cols(), model.embedding.values());
    for (std::size_t n = 0; n < model.layers.size(); ++n) {
        const auto& l = model.layers[n];
        const std::string prefix = "layers." + std::to_string(n) + ".";
        fn(prefix + "attn_norm", l.attn_norm_gain.size(), std::size_t{0}, l.attn_norm_gain.values());
        for (ProjectionKind k : kAllProjections) {
            fn(prefix + std::string(projection_name(k)), l[k].rows(), l[k].cols(), l[k].values());
            if (k == ProjectionKind::O) {
                fn(prefix + "ffn_norm", l.ffn_norm_gain.size(), std::size_t{0}, l.ffn_norm_gain.values());
            }
        }
    }
    fn(std::string("final_norm"), model.final_norm_gain.size(), std::size_t{0}, model.final_norm_gain.values());
    fn(std::string("lm_head"), model.lm_head.rows(), model.lm_head.cols(), model.lm_head.values());
}

json shape_json(std::size_t rows, std::size_t cols) {
    return cols == 0 ? json::array({rows}) : json::array({rows, cols});
}

template <class T>
T field(const json& j, const char* key) {
    if (!j.contains(key)) throw FormatError(std::string("missing field '") + key + "'");
    try {
        return j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw FormatError(std::string("bad field '") + key + "': " + e.what());
    }
}

json parse_json(std::span<const std::uint8_t> bytes) {
    try {
        return json::parse(bytes.begin(), bytes.end());
    } catch (const json::exception& e) {
        throw FormatError(std::string("invalid JSON: ") + e.what());
    }
}

}  // namespace

json config_to_json(const ModelConfig& c) {
    return json{{"n_layers", c.n_layers},     {"d_model", c.d_model},       {"n_heads", c.n_heads},
                {"head_dim", c.head_dim},     {"d_ff", c.d_ff},             {"vocab_size", c.vocab_size},
                {"max_seq_len", c.max_seq_len}, {"norm_eps", c.norm_eps}, {"rope_base", c.rope_base}};
}

ModelConfig config_from_json(const json& j) {
    ModelConfig c;
    c.n_layers = field<std::size_t>(j, "n_layers");
    c.d_model = field<std::size_t>(j, "d_model");
    c.n_heads = field<std::size_t>(j, "n_heads");
    c.head_dim = field<std::size_t>(j, "head_dim");
    c.d_ff = field<std::size_t>(j, "d_ff");
    c.vocab_size = field<std::size_t>(j, "vocab_size");
    c.max_seq_len = field<std::size_t>(j, "max_seq_len");
    c.norm_eps = field<float>(j, "norm_eps");
    c.rope_base = field<float>(j, "rope_base");
    return c;
}

std::vector<std::uint8_t> serialize_checkpoint(const LanguageModel& model, std::span<const Mask> masks) {
    validate(model);
    if (!masks.empty() && masks.size() != model.projection_count()) {
        throw ShapeError("mask table must cover every projection");
    }

    json tensors = json::object();
    std::size_t offset = 0;
    for_each_tensor(model, [&](const std::string& name, std::size_t r, std::size_t c, std::span<const float> v) {
        tensors[name] = {{"dtype", "f32"}, {"shape", shape_json(r, c)}, {"offset", offset}};
        offset += v.size() * 4;
    });

    json mask_table = json::object();
    for (std::size_t i = 0; i < masks.size(); ++i) {
        const Mask& m = masks[i];
        if (m.empty()) continue;
        const auto id = ProjectionId::from_flat(i);
        const auto& w = model.projection(id);
        if (m.rows != w.rows() || m.cols != w.cols()) throw ShapeError("mask shape mismatch at " + id.label());
        const std::size_t nbytes = (m.bits.size() + 7) / 8;
        mask_table[id.label()] = {{"shape", json::array({m.rows, m.cols})},
                                  {"offset", offset},
                                  {"bytes", nbytes},
                                  {"count", m.count()}};
        offset += nbytes;
    }

    json layers = json::array();
    for (const auto& l : model.layers) {
        layers.push_back({{"live_heads", l.live_heads}, {"live_ff_channels", l.live_ff_channels}});
    }

    const json header = {{"format", "mosaic-checkpoint"}, {"version", kCheckpointVersion},
                         {"config", config_to_json(model.config)}, {"layers", layers},
                         {"tensors", tensors}, {"masks", mask_table}, {"payload_bytes", offset}};
    const std::string text = header.dump();

    ByteWriter out;
    out.raw(kCheckpointMagic, 4);
    out.u32(kCheckpointVersion);
    out.u64(text.size());
    out.u64(fnv1a({reinterpret_cast<const std::uint8_t*>(text.data()), text.size()}));
    out.raw(text.data(), text.size());
    const std::size_t payload_start = out.size();
    for_each_tensor(model, [&](const std::string&, std::size_t, std::size_t, std::span<const float> v) {
        out.floats(v);
    });
    for (const Mask& m : masks) {
        if (m.empty()) continue;
        std::vector<std::uint8_t> packed((m.bits.size() + 7) / 8, 0);
        for (std::size_t b = 0; b < m.bits.size(); ++b) {
            if (m.bits[b]) packed[b / 8] |= static_cast<std::uint8_t>(1u << (b % 8));
        }
        out.raw(packed.data(), packed.size());
    }
    if (out.size() - payload_start != offset) throw IntegrityError("payload size bookkeeping mismatch");
    return out.take();
}

Checkpoint deserialize_checkpoint(std::span<const std::uint8_t> bytes) {
    ByteReader in(bytes);
    const auto magic = in.take(4);
    if (!std::equal(magic.begin(), magic.end(), kCheckpointMagic)) throw FormatError("not a MOSC checkpoint");
    const std::uint32_t version = in.u32();
    if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
    const std::uint64_t header_len = in.u64();
    const std::uint64_t header_hash = in.u64();
    if (header_len > in.remaining()) throw FormatError("header length exceeds file");
    const auto header_bytes = in.take(header_len);
    if (fnv1a(header_bytes) != header_hash) throw IntegrityError("checkpoint header hash mismatch");
    const json header = parse_json(header_bytes);
    const auto payload = bytes.subspan(in.pos());
    if (field<std::size_t>(header, "payload_bytes") != payload.size()) {
        throw FormatError("payload length does not match header");
    }

    Checkpoint ck;
    LanguageModel& model = ck.model;
    model.config = config_from_json(field<json>(header, "config"));
    const auto& cfg = model.config;
    const json layers = field<json>(header, "layers");
    if (!layers.is_array() || layers.size() != cfg.n_layers) throw FormatError("layer table size mismatch");
    model.layers.resize(cfg.n_layers);
    for (std::size_t n = 0; n < cfg.n_layers; ++n) {
        model.layers[n].live_heads = field<std::vector<std::size_t>>(layers[n], "live_heads");
        model.layers[n].live_ff_channels = field<std::vector<std::size_t>>(layers[n], "live_ff_channels");
    }

    const json tensors = field<json>(header, "tensors");
    std::vector<std::pair<std::size_t, std::size_t>> extents;
    auto load_region = [&](const json& entry, std::size_t nbytes) {
        const auto off = field<std::size_t>(entry, "offset");
        if (off > payload.size() || nbytes > payload.size() - off) throw FormatError("tensor region out of bounds");
        extents.emplace_back(off, off + nbytes);
        return payload.subspan(off, nbytes);
    };
    auto tensor_entry = [&](const std::string& name) -> const json& {
        if (!tensors.contains(name)) throw FormatError("missing tensor '" + name + "'");
        const json& e = tensors.at(name);
        if (field<std::string>(e, "dtype") != "f32") throw FormatError("tensor '" + name + "' is not f32");
        return e;
    };
    auto read_matrix = [&](const std::string& name) {
        const json& e = tensor_entry(name);
        const auto shape = field<std::vector<std::size_t>>(e, "shape");
        if (shape.size() != 2) throw FormatError("tensor '" + name + "' is not 2-D");
        DenseMatrix m(shape[0], shape[1]);
        read_floats(load_region(e, m.size() * 4), m.values());
        return m;
    };
    auto read_vector = [&](const std::string& name) {
        const json& e = tensor_entry(name);
        const auto shape = field<std::vector<std::size_t>>(e, "shape");
        if (shape.size() != 1) throw FormatError("tensor '" + name + "' is not 1-D");
        DenseVector v(shape[0]);
        read_floats(load_region(e, v.size() * 4), v.values());
        return v;
    };

    model.embedding = read_matrix("embedding");
    for (std::size_t n = 0; n < cfg.n_layers; ++n) {
        auto& l = model.layers[n];
        const std::string prefix = "layers." + std::to_string(n) + ".";
        l.attn_norm_gain = read_vector(prefix + "attn_norm");
        l.ffn_norm_gain = read_vector(prefix + "ffn_norm");
        for (ProjectionKind k : kAllProjections) l[k] = read_matrix(prefix + std::string(projection_name(k)));
    }
    model.final_norm_gain = read_vector("final_norm");
    model.lm_head = read_matrix("lm_head");
    try {
        validate(model);
    } catch (const ShapeError& e) {
        throw FormatError(std::string("checkpoint structure invalid: ") + e.what());
    }

    ck.masks.resize(model.projection_count());
    const json masks = field<json>(header, "masks");
    for (auto it = masks.begin(); it != masks.end(); ++it) {
        std::size_t slot = model.projection_count();
        for (std::size_t i = 0; i < model.projection_count(); ++i) {
            if (ProjectionId::from_flat(i).label() == it.key()) slot = i;
        }
        if (slot == model.projection_count()) throw FormatError("mask for unknown projection '" + it.key() + "'");
        const auto shape = field<std::vector<std::size_t>>(it.value(), "shape");
        const auto& w = model.projection(ProjectionId::from_flat(slot));
        if (shape.size() != 2 || shape[0] != w.rows() || shape[1] != w.cols()) {
            throw FormatError("mask shape mismatch for '" + it.key() + "'");
        }
        const std::size_t nbits = w.size();
        const auto packed = load_region(it.value(), (nbits + 7) / 8);
        Mask m{w.rows(), w.cols(), std::vector<std::uint8_t>(nbits, 0)};
        for (std::size_t b = 0; b < nbits; ++b) m.bits[b] = (packed[b / 8] >> (b % 8)) & 1u;
        if (field<std::size_t>(it.value(), "count") != m.count()) throw IntegrityError("mask popcount mismatch");
        const auto wv = w.values();
        for (std::size_t b = 0; b < nbits; ++b) {
            if (m.bits[b] && wv[b] != 0.0f) throw IntegrityError("masked weight is nonzero in '" + it.key() + "'");
        }
        ck.masks[slot] = std::move(m);
    }

    std::sort(extents.begin(), extents.end());
    for (std::size_t i = 1; i < extents.size(); ++i) {
        if (extents[i].first < extents[i - 1].second) throw FormatError("overlapping payload regions");
    }
    return ck;
}

void save_checkpoint(const std::filesystem::path& path, const LanguageModel& model, std::span<const Mask> masks) {
    write_file_atomic(path, serialize_checkpoint(model, masks));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return deserialize_checkpoint(read_file(path)); }

PrunedModel load_pruned(const std::filesystem::path& path) {
    Checkpoint ck = load_checkpoint(path);
    PrunedModel out;
    out.ledger = recount_ledger(ck.model, ck.masks);
    out.masks = std::move(ck.masks);
    out.model = std::move(ck.model);
    return out;
}

namespace {

template <class T>
json as_rows(const std::vector<T>& flat, std::size_t n_layers) {
    json rows = json::array();
    for (std::size_t n = 0; n < n_layers; ++n) {
        json row = json::array();
        for (std::size_t m = 0; m < kProjectionsPerLayer; ++m) row.push_back(flat[n * kProjectionsPerLayer + m]);
        rows.push_back(row);
    }
    return rows;
}

template <class T>
std::vector<T> from_rows(const json& j, const char* key, std::size_t n_layers) {
    const auto rows = field<std::vector<std::vector<T>>>(j, key);
    if (rows.size() != n_layers) throw FormatError(std::string("'") + key + "' must have one row per layer");
    std::vector<T> flat;
    flat.reserve(n_layers * kProjectionsPerLayer);
    for (const auto& r : rows) {
        if (r.size() != kProjectionsPerLayer) throw FormatError(std::string("'") + key + "' rows must have 7 entries");
        flat.insert(flat.end(), r.begin(), r.end());
    }
    return flat;
}

json projection_names() {
    json names = json::array();
    for (ProjectionKind k : kAllProjections) names.push_back(std::string(projection_name(k)));
    return names;
}

}  // namespace

json rank_to_json(const GlobalRank& r) {
    return json{{"format", "mosaic-rank"},
                {"version", 1},
                {"scope", std::string(rank_scope_name(r.scope))},
                {"alpha", r.alpha},
                {"calibration",
                 {{"samples", r.calibration.sample_count},
                  {"seq_len", r.calibration.seq_len},
                  {"corpus", r.calibration.corpus}}},
                {"model_fingerprint", r.model_fingerprint},
                {"n_layers", r.n_layers},
                {"projections", projection_names()},
                {"entries", as_rows(r.entries, r.n_layers)},
                {"raw_outlier_ratios", as_rows(r.raw, r.n_layers)},
                {"outlier_counts", as_rows(r.outlier_counts, r.n_layers)},
                {"param_counts", as_rows(r.param_counts, r.n_layers)},
                {"degenerate", r.degenerate}};
}

GlobalRank rank_from_json(const json& j) {
    if (field<std::string>(j, "format") != "mosaic-rank") throw FormatError("not a rank file");
    GlobalRank r;
    r.scope = rank_scope_from_name(field<std::string>(j, "scope"));
    r.alpha = field<double>(j, "alpha");
    const json cal = field<json>(j, "calibration");
    r.calibration.sample_count = field<std::size_t>(cal, "samples");
    r.calibration.seq_len = field<std::size_t>(cal, "seq_len");
    r.calibration.corpus = field<std::string>(cal, "corpus");
    r.model_fingerprint = field<std::string>(j, "model_fingerprint");
    r.n_layers = field<std::size_t>(j, "n_layers");
    r.entries = from_rows<double>(j, "entries", r.n_layers);
    r.raw = from_rows<double>(j, "raw_outlier_ratios", r.n_layers);
    r.outlier_counts = from_rows<std::size_t>(j, "outlier_counts", r.n_layers);
    r.param_counts = from_rows<std::size_t>(j, "param_counts", r.n_layers);
    r.degenerate = field<bool>(j, "degenerate");
    if (r.n_layers == 0) throw FormatError("rank file has no layers");
    double sum = 0.0;
    for (double e : r.entries) {
        if (!std::isfinite(e) || e < 0.0) throw FormatError("rank entries must be finite and non-negative");
        sum += e;
    }
    if (std::fabs(sum / static_cast<double>(r.entries.size()) - 1.0) > 1e-9) {
        throw FormatError("rank entries must have mean 1");
    }
    return r;
}

void save_rank(const std::filesystem::path& path, const GlobalRank& rank) {
    write_file_atomic(path, rank_to_json(rank).dump(2) + "\n");
}

GlobalRank load_rank(const std::filesystem::path& path) { return rank_from_json(parse_json(read_file(path))); }

json plan_to_json(const PruningPlan& p) {
    return json{{"format", "mosaic-plan"},
                {"version", 1},
                {"p", p.p},
                {"lambda", p.lambda},
                {"category", std::string(category_name(p.category))},
                {"structured_share", p.structured_share},
                {"scope", std::string(rank_scope_name(p.scope))},
                {"rank_fingerprint", p.rank_fingerprint},
                {"n_layers", p.n_layers},
                {"projections", projection_names()},
                {"targets", as_rows(p.targets, p.n_layers)},
                {"param_counts", as_rows(p.param_counts, p.n_layers)},
                {"warnings", p.warnings}};
}

PruningPlan plan_from_json(const json& j) {
    if (field<std::string>(j, "format") != "mosaic-plan") throw FormatError("not a plan file");
    PruningPlan p;
    p.p = field<double>(j, "p");
    p.lambda = field<double>(j, "lambda");
    try {
        p.category = category_from_name(field<std::string>(j, "category"));
    } catch (const InputError& e) {
        throw FormatError(e.what());
    }
    p.structured_share = field<double>(j, "structured_share");
    p.scope = rank_scope_from_name(field<std::string>(j, "scope"));
    p.rank_fingerprint = field<std::string>(j, "rank_fingerprint");
    p.n_layers = field<std::size_t>(j, "n_layers");
    p.targets = from_rows<double>(j, "targets", p.n_layers);
    p.param_counts = from_rows<std::size_t>(j, "param_counts", p.n_layers);
    p.warnings = field<std::vector<std::string>>(j, "warnings");
    for (double t : p.targets) {
        if (!(t >= 0.0 && t < 1.0)) throw FormatError("plan targets must lie in [0, 1)");
    }
    return p;
}

void save_plan(const std::filesystem::path& path, const PruningPlan& plan) {
    write_file_atomic(path, plan_to_json(plan).dump(2) + "\n");
}

PruningPlan load_plan(const std::filesystem::path& path) { return plan_from_json(parse_json(read_file(path))); }

std::vector<std::uint8_t> serialize_token_stream(const TokenStream& stream) {
    ByteWriter out;
    out.raw(kStreamMagic, 4);
    out.u32(stream.vocab_size);
    out.u64(stream.tokens.size());
    for (TokenId t : stream.tokens) {
        if (t >= stream.vocab_size) throw InputError("token id " + std::to_string(t) + " >= vocab_size");
        out.u32(t);
    }
    return out.take();
}

TokenStream deserialize_token_stream(std::span<const std::uint8_t> bytes) {
    ByteReader in(bytes);
    const auto magic = in.take(4);
    if (!std::equal(magic.begin(), magic.end(), kStreamMagic)) throw FormatError("not a MOST token stream");
    TokenStream s;
    s.vocab_size = in.u32();
    const std::uint64_t count = in.u64();
    if (count > in.remaining() / 4) throw FormatError("token count exceeds file");
    if (in.remaining() != count * 4) throw FormatError("trailing bytes after token stream");
    s.tokens.resize(count);
    for (auto& t : s.tokens) {
        t = in.u32();
        if (t >= s.vocab_size) throw FormatError("token id " + std::to_string(t) + " >= vocab_size");
    }
    return s;
}

void save_token_stream(const std::filesystem::path& path, const TokenStream& stream) {
    write_file_atomic(path, serialize_token_stream(stream));
}

TokenStream load_token_stream(const std::filesystem::path& path) {
    return deserialize_token_stream(read_file(path));
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open '" + path.string() + "'");
    return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw InputError("cannot write '" + tmp.string() + "'");
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw InputError("short write to '" + tmp.string() + "'");
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw InputError("cannot publish '" + path.string() + "': " + ec.message());
}

void write_file_atomic(const std::filesystem::path& path, const std::string& text) {
    write_file_atomic(path, std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()),
                                                          text.size()));
}

}  // namespace mosaic
