#include "motis/embed.hpp"

#include <numeric>

namespace motis {

enc::TokenBatch token_batch(const data::Split& split, std::span<const std::size_t> rows, std::size_t max_len) {
  std::vector<std::vector<std::uint32_t>> seqs;
  seqs.reserve(rows.size());
  for (auto r : rows) seqs.push_back(split.samples.at(r).tokens);
  return enc::TokenBatch::from_sequences(seqs, max_len);
}

enc::PatchBatch patch_batch(const data::Split& split, std::span<const std::size_t> rows) {
  enc::PatchBatch b;
  b.batch = rows.size();
  b.num_patches = split.num_patches;
  b.patch_dim = split.patch_dim;
  b.values.reserve(rows.size() * split.num_patches * split.patch_dim);
  for (auto r : rows) {
    const auto& p = split.samples.at(r).patches;
    b.values.insert(b.values.end(), p.begin(), p.end());
  }
  return b;
}

std::vector<std::uint64_t> split_ids(const data::Split& split) {
  std::vector<std::uint64_t> ids;
  ids.reserve(split.size());
  for (const auto& s : split.samples) ids.push_back(s.id);
  return ids;
}

std::vector<float> embed_rows(const enc::TextEncoder& encoder, const data::Split& split,
                              std::span<const std::size_t> rows) {
  ad::NoGradGuard no_grad;
  auto out = encoder.encode(token_batch(split, rows, encoder.config().max_positions));
  return {out.data().begin(), out.data().end()};
}

std::vector<float> embed_rows(const enc::ImageEncoder& encoder, const data::Split& split,
                              std::span<const std::size_t> rows) {
  ad::NoGradGuard no_grad;
  auto out = encoder.encode(patch_batch(split, rows));
  return {out.data().begin(), out.data().end()};
}

namespace {

template <class E>
std::vector<float> embed_all(const E& encoder, const data::Split& split, std::size_t batch) {
  if (batch == 0) batch = 1;
  std::vector<float> out;
  out.reserve(split.size() * encoder.config().output_dim);
  std::vector<std::size_t> rows;
  for (std::size_t start = 0; start < split.size(); start += batch) {
    rows.resize(std::min(batch, split.size() - start));
    std::iota(rows.begin(), rows.end(), start);
    auto e = embed_rows(encoder, split, rows);
    out.insert(out.end(), e.begin(), e.end());
  }
  return out;
}

}  // namespace

std::vector<float> embed_split(const enc::TextEncoder& encoder, const data::Split& split, std::size_t batch) {
  return embed_all(encoder, split, batch);
}

std::vector<float> embed_split(const enc::ImageEncoder& encoder, const data::Split& split, std::size_t batch) {
  return embed_all(encoder, split, batch);
}

}  // namespace motis
