#include <doctest.h>

#include <cstring>
#include <filesystem>

#include "mosaic/errors.h"
#include "mosaic/io.h"
#include "support.h"

using namespace mosaic;
using namespace testing;
namespace fs = std::filesystem;

namespace {

PrunedModel pruned_fixture() {
    const auto m = random_model(tiny_config(2, 32, 4, 64, 29, 16), {.seed = 5, .heavy_tail_fraction = 0.03});
    const auto norms = collect_activation_norms(m, random_tokens(64, 29, 1), 4, 16);
    auto plan = allocate_targets(build_global_rank(m, norms, 5.0), 0.5);
    plan.category = PruneCategory::Composite;
    return composite_prune(m, plan, all_weight_metrics(m, norms));
}

std::uint64_t read_u64(const std::vector<std::uint8_t>& b, std::size_t at) {
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = v << 8 | b[at + i];
    return v;
}

}  // namespace

TEST_CASE("checkpoint layout starts with magic, version and header") {
    const auto m = random_model(tiny_config());
    const auto bytes = serialize_checkpoint(m);
    REQUIRE(bytes.size() > 24);
    CHECK(std::memcmp(bytes.data(), "MOSC", 4) == 0);
    CHECK(bytes[4] == 1);
    const auto header_len = read_u64(bytes, 8);
    const auto header = nlohmann::json::parse(bytes.begin() + 24, bytes.begin() + 24 + header_len);
    CHECK(header["format"] == "mosaic-checkpoint");
    CHECK(header["config"]["n_layers"] == 2);
    CHECK(header["tensors"]["embedding"]["dtype"] == "f32");
    CHECK(header["tensors"]["embedding"]["shape"] == nlohmann::json::array({23, 16}));
    // Payload is every float in the model, nothing more (no masks here).
    CHECK(bytes.size() - 24 - header_len == total_param_count(m) * 4 + 0);
    CHECK(header["payload_bytes"] == total_param_count(m) * 4);
}

TEST_CASE("checkpoint round-trip is bitwise for dense and pruned models") {
    const auto dense = random_model(tiny_config(), {.seed = 3});
    const auto back = deserialize_checkpoint(serialize_checkpoint(dense));
    CHECK(back.model == dense);
    CHECK(model_fingerprint(back.model) == model_fingerprint(dense));

    const auto pruned = pruned_fixture();
    const auto ck = deserialize_checkpoint(serialize_checkpoint(pruned.model, pruned.masks));
    CHECK(ck.model == pruned.model);
    CHECK(ck.masks == pruned.masks);
    CHECK(serialize_checkpoint(ck.model, ck.masks) == serialize_checkpoint(pruned.model, pruned.masks));
    CHECK(ck.model.layers[0].live_heads == pruned.model.layers[0].live_heads);
}

TEST_CASE("checkpoint corruption is detected") {
    const auto pruned = pruned_fixture();
    const auto good = serialize_checkpoint(pruned.model, pruned.masks);

    auto bad_magic = good;
    bad_magic[0] = 'X';
    CHECK_THROWS_AS(deserialize_checkpoint(bad_magic), FormatError);

    auto bad_version = good;
    bad_version[4] = 9;
    CHECK_THROWS_AS(deserialize_checkpoint(bad_version), FormatError);

    auto bad_header = good;
    bad_header[30] ^= 0x01;
    CHECK_THROWS_AS(deserialize_checkpoint(bad_header), IntegrityError);

    auto truncated = good;
    truncated.resize(good.size() - 3);
    CHECK_THROWS_AS(deserialize_checkpoint(truncated), FormatError);
    CHECK_THROWS_AS(deserialize_checkpoint(std::vector<std::uint8_t>(10, 0)), FormatError);

    // Break a masked weight: find layers.0.q's first masked element.
    const auto header_len = read_u64(good, 8);
    const auto header = nlohmann::json::parse(good.begin() + 24, good.begin() + 24 + header_len);
    const std::size_t payload = 24 + header_len;
    const std::size_t q_off = header["tensors"]["layers.0.q"]["offset"];
    const auto& mask = pruned.masks[0];
    std::size_t j = 0;
    while (!mask.bits[j]) ++j;
    auto dirty = good;
    const float one = 1.0f;
    std::memcpy(dirty.data() + payload + q_off + 4 * j, &one, 4);
    CHECK_THROWS_AS(deserialize_checkpoint(dirty), IntegrityError);
}

TEST_CASE("serializing inconsistent masks fails") {
    const auto pruned = pruned_fixture();
    auto masks = pruned.masks;
    masks[2].rows += 1;
    CHECK_THROWS_AS(serialize_checkpoint(pruned.model, masks), ShapeError);
    masks.pop_back();
    CHECK_THROWS_AS(serialize_checkpoint(pruned.model, masks), ShapeError);
}

TEST_CASE("files publish atomically and load_pruned recounts the ledger") {
    const auto dir = temp_dir("io");
    const auto pruned = pruned_fixture();
    save_checkpoint(dir / "m.mosc", pruned.model, pruned.masks);
    CHECK(fs::exists(dir / "m.mosc"));
    CHECK(!fs::exists(dir / "m.mosc.tmp"));
    const auto lp = load_pruned(dir / "m.mosc");
    CHECK(lp.ledger.totals() == recount_ledger(pruned.model, pruned.masks).totals());
    CHECK(lp.model == pruned.model);
    CHECK_THROWS_AS(load_checkpoint(dir / "missing.mosc"), InputError);
    fs::remove_all(dir);
}

TEST_CASE("rank JSON round-trip and validation") {
    const auto m = random_model(tiny_config(), {.seed = 2, .heavy_tail_fraction = 0.05});
    const auto norms = collect_activation_norms(m, random_tokens(128, 23, 3), 4, 32);
    const auto r = build_global_rank(m, norms, 5.0, {4, 32, "calib.most"});
    const auto j = rank_to_json(r);
    CHECK(j["entries"].size() == 2);
    CHECK(j["entries"][0].size() == 7);
    CHECK(j["calibration"]["samples"] == 4);
    const auto back = rank_from_json(j);
    CHECK(back == r);
    // Text round-trip keeps doubles bit-exact.
    CHECK(rank_from_json(nlohmann::json::parse(j.dump(2))) == r);

    auto skewed = j;
    skewed["entries"][0][0] = skewed["entries"][0][0].get<double>() + 0.1;
    CHECK_THROWS_AS(rank_from_json(skewed), FormatError);
    auto ragged = j;
    ragged["entries"][1].erase(0);
    CHECK_THROWS_AS(rank_from_json(ragged), FormatError);
    auto missing = j;
    missing.erase("alpha");
    CHECK_THROWS_AS(rank_from_json(missing), FormatError);
    CHECK_THROWS_AS(rank_from_json(nlohmann::json{{"format", "other"}}), FormatError);
}

TEST_CASE("plan JSON round-trip") {
    std::mt19937_64 rng(4);
    auto plan = allocate_targets(random_rank(3, rng), 0.9);
    plan.category = PruneCategory::Structured;
    plan.structured_share = 0.25;
    const auto back = plan_from_json(nlohmann::json::parse(plan_to_json(plan).dump()));
    CHECK(back == plan);
    auto j = plan_to_json(plan);
    j["category"] = "bogus";
    CHECK_THROWS_AS(plan_from_json(j), FormatError);
    j = plan_to_json(plan);
    j["targets"][0][0] = 1.5;
    CHECK_THROWS_AS(plan_from_json(j), FormatError);
}

TEST_CASE("token stream round-trip and validation") {
    const TokenStream s{50, random_tokens(77, 50, 8)};
    const auto bytes = serialize_token_stream(s);
    CHECK(bytes.size() == 16 + 77 * 4);
    CHECK(std::memcmp(bytes.data(), "MOST", 4) == 0);
    const auto back = deserialize_token_stream(bytes);
    CHECK(back.vocab_size == 50);
    CHECK(back.tokens == s.tokens);

    CHECK_THROWS_AS(serialize_token_stream({10, {3, 10}}), InputError);
    auto high = bytes;
    high[16] = 60;  // first id := 60 >= 50
    CHECK_THROWS_AS(deserialize_token_stream(high), FormatError);
    auto trailing = bytes;
    trailing.push_back(0);
    CHECK_THROWS_AS(deserialize_token_stream(trailing), FormatError);
    auto short_count = bytes;
    short_count.resize(bytes.size() - 4);
    CHECK_THROWS_AS(deserialize_token_stream(short_count), FormatError);

    const auto dir = temp_dir("stream");
    save_token_stream(dir / "s.most", s);
    CHECK(load_token_stream(dir / "s.most").tokens == s.tokens);
    fs::remove_all(dir);
}
