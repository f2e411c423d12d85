// Batch assembly from synthetic splits and no-grad bulk encoding.
#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "motis/data_synth.hpp"
#include "motis/encoders.hpp"

namespace motis {

// Token sequences are cut to the encoder's max_positions.
enc::TokenBatch token_batch(const data::Split& split, std::span<const std::size_t> rows, std::size_t max_len);
enc::PatchBatch patch_batch(const data::Split& split, std::span<const std::size_t> rows);

std::vector<std::uint64_t> split_ids(const data::Split& split);

// Encodes every sample of the split in order, batch rows at a time, without
// recording gradients. Result: size() × output_dim, row-major. Rows do not
// depend on the batch size.
std::vector<float> embed_split(const enc::TextEncoder& encoder, const data::Split& split, std::size_t batch = 256);
std::vector<float> embed_split(const enc::ImageEncoder& encoder, const data::Split& split, std::size_t batch = 256);

// Encodes the given rows of the split as one batch without gradients.
std::vector<float> embed_rows(const enc::TextEncoder& encoder, const data::Split& split,
                              std::span<const std::size_t> rows);
std::vector<float> embed_rows(const enc::ImageEncoder& encoder, const data::Split& split,
                              std::span<const std::size_t> rows);

}  // namespace motis
