// Corpus-level hard-negative mining: the opposite modality of a corpus is
// embedded by a frozen encoder and indexed; each training query fetches its
// top-k non-positive neighbours together with their stored embeddings.
#pragma once

#include <cstdint>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "motis/data_synth.hpp"
#include "motis/encoders.hpp"
#include "motis/vector_index.hpp"

namespace motis::hn {

class MiningError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Direction { kImageQueriesText, kTextQueriesImage };
std::string to_string(Direction d);

struct MiningPlan {
  Direction direction = Direction::kImageQueriesText;
  std::size_t k = 8;
  std::uint64_t refresh_every = 0;  // 0: never
  // True when the index holds embeddings from the encoder being trained, so
  // they go stale; only then does maybe_refresh rebuild.
  bool self_index = false;
};

struct NegativeList {
  std::uint64_t query_id = 0;
  std::vector<std::uint64_t> ids;  // best first, never the query's own id
  std::vector<float> scores;
};

struct NegativeSet {
  std::vector<NegativeList> lists;
  std::uint64_t source_generation = 0;
  bool degraded = false;  // some list is shorter than k

  // Shortest list length; the usable k for a fixed-width loss.
  std::size_t min_count() const;
  // One JSON object per line: {query_id, neg_ids, scores, generation}.
  void write_jsonl(std::ostream& os) const;
};

// Embeds every corpus item with a frozen encoder and indexes it by sample id.
// Encoding failures name the offending item.
index::VectorIndex build_mining_index(const enc::TextEncoder& frozen, const data::Split& corpus, index::Mode mode,
                                      index::IvfParams ivf = {}, std::size_t batch = 256);
index::VectorIndex build_mining_index(const enc::ImageEncoder& frozen, const data::Split& corpus,
                                      index::Mode mode, index::IvfParams ivf = {}, std::size_t batch = 256);

// queries: query_ids.size() × index.dim() embeddings (not recorded for
// gradients). A query's positive is the corpus item sharing its id. Searches
// k+1, drops the positive, truncates to k.
NegativeSet mine(const MiningPlan& plan, std::span<const float> queries, std::span<const std::uint64_t> query_ids,
                 const index::VectorIndex& index);

// Encodes the given split rows with the query-side encoder, then mines.
NegativeSet mine(const MiningPlan& plan, const enc::ImageEncoder& student, const data::Split& queries,
                 std::span<const std::size_t> rows, const index::VectorIndex& index);
NegativeSet mine(const MiningPlan& plan, const enc::TextEncoder& student, const data::Split& queries,
                 std::span<const std::size_t> rows, const index::VectorIndex& index);

// Stored embeddings of the first k negatives of every list, list-major:
// (lists × k) × dim. Requires k <= min_count().
std::vector<float> negative_embeddings(const NegativeSet& set, const index::VectorIndex& index, std::size_t k);

bool refresh_due(const MiningPlan& plan, std::uint64_t step);

// Re-embeds the corpus with `encoder` and swaps it into the index when
// refresh_due. Returns whether a rebuild happened.
bool maybe_refresh(const MiningPlan& plan, std::uint64_t step, const enc::TextEncoder& encoder,
                   const data::Split& corpus, index::VectorIndex& index);
bool maybe_refresh(const MiningPlan& plan, std::uint64_t step, const enc::ImageEncoder& encoder,
                   const data::Split& corpus, index::VectorIndex& index);

}  // namespace motis::hn
