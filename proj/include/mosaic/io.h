#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "mosaic/model.h"
#include "mosaic/pruning.h"
#include "mosaic/ranking.h"

namespace mosaic {

// Checkpoint layout, all integers little-endian:
//   "MOSC" | u32 version | u64 header_len | u64 fnv1a(header) | header JSON | payload
// The header's tensor table gives each tensor's shape and byte offset into the
// payload; mask bitsets follow the tensors, LSB-first, bit i = row * cols + col.
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    LanguageModel model;
    std::vector<Mask> masks;  // one per projection, empty when unmasked
};

std::vector<std::uint8_t> serialize_checkpoint(const LanguageModel& model, std::span<const Mask> masks = {});
Checkpoint deserialize_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const std::filesystem::path& path, const LanguageModel& model,
                     std::span<const Mask> masks = {});
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Reassembles the pruning state (ledger recounted from tensors).
PrunedModel load_pruned(const std::filesystem::path& path);

nlohmann::json config_to_json(const ModelConfig& cfg);
ModelConfig config_from_json(const nlohmann::json& j);

nlohmann::json rank_to_json(const GlobalRank& rank);
GlobalRank rank_from_json(const nlohmann::json& j);
void save_rank(const std::filesystem::path& path, const GlobalRank& rank);
GlobalRank load_rank(const std::filesystem::path& path);

nlohmann::json plan_to_json(const PruningPlan& plan);
PruningPlan plan_from_json(const nlohmann::json& j);
void save_plan(const std::filesystem::path& path, const PruningPlan& plan);
PruningPlan load_plan(const std::filesystem::path& path);

// "MOST" | u32 vocab_size | u64 token_count | u32 ids[token_count]
struct TokenStream {
    std::uint32_t vocab_size = 0;
    std::vector<TokenId> tokens;
};

std::vector<std::uint8_t> serialize_token_stream(const TokenStream& stream);
TokenStream deserialize_token_stream(std::span<const std::uint8_t> bytes);
void save_token_stream(const std::filesystem::path& path, const TokenStream& stream);
TokenStream load_token_stream(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
// Writes to a sibling temp file, then renames over the destination.
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_file_atomic(const std::filesystem::path& path, const std::string& text);

}  // namespace mosaic
