#include "motis/hn_miner.hpp"

#include <cmath>
#include <numeric>

#include <json.hpp>

#include "motis/embed.hpp"

namespace motis::hn {

std::string to_string(Direction d) {
  return d == Direction::kImageQueriesText ? "IMAGE_QUERIES_TEXT" : "TEXT_QUERIES_IMAGE";
}

std::size_t NegativeSet::min_count() const {
  if (lists.empty()) return 0;
  std::size_t m = lists.front().ids.size();
  for (const auto& l : lists) m = std::min(m, l.ids.size());
  return m;
}

void NegativeSet::write_jsonl(std::ostream& os) const {
  for (const auto& l : lists) {
    nlohmann::json j{{"query_id", l.query_id}, {"neg_ids", l.ids}, {"scores", l.scores},
                     {"generation", source_generation}};
    os << j.dump() << '\n';
  }
}

namespace {

bool finite_unit_rows(std::span<const float> v, std::size_t dim) {
  for (std::size_t r = 0; r * dim < v.size(); ++r) {
    double ss = 0;
    for (std::size_t j = 0; j < dim; ++j) {
      const float x = v[r * dim + j];
      if (!std::isfinite(x)) return false;
      ss += double(x) * x;
    }
    if (!(std::abs(std::sqrt(ss) - 1.0) <= index::kNormTolerance)) return false;
  }
  return true;
}

// Embeds the corpus; on failure re-encodes item by item to name the culprit.
template <class E>
std::vector<float> embed_corpus(const E& encoder, const data::Split& corpus, std::size_t batch) {
  const auto dim = encoder.config().output_dim;
  try {
    auto v = embed_split(encoder, corpus, batch);
    if (finite_unit_rows(v, dim)) return v;
  } catch (const std::exception&) {
  }
  for (std::size_t r = 0; r < corpus.size(); ++r) {
    const std::size_t row[] = {r};
    std::string why = "non-finite embedding";
    try {
      if (finite_unit_rows(embed_rows(encoder, corpus, row), dim)) continue;
    } catch (const std::exception& e) {
      why = e.what();
    }
    throw MiningError("encoding failed for corpus item " + std::to_string(corpus.samples[r].id) + ": " + why);
  }
  throw MiningError("encoding failed for the corpus batch but no single item reproduces it");
}

template <class E>
index::VectorIndex build_index(const E& frozen, const data::Split& corpus, index::Mode mode, index::IvfParams ivf,
                               std::size_t batch) {
  if (frozen.trainable()) throw MiningError("mining index encoder must be frozen");
  if (corpus.size() == 0) throw MiningError("mining corpus is empty");
  const auto ids = split_ids(corpus);
  const auto vecs = embed_corpus(frozen, corpus, batch);
  return index::VectorIndex::build(frozen.config().output_dim, ids, vecs, mode, ivf);
}

template <class E>
bool refresh(const MiningPlan& plan, std::uint64_t step, const E& encoder, const data::Split& corpus,
             index::VectorIndex& index) {
  if (!refresh_due(plan, step)) return false;
  const auto ids = split_ids(corpus);
  const auto vecs = embed_corpus(encoder, corpus, 256);
  index.replace_all(ids, vecs);
  return true;
}

}  // namespace

index::VectorIndex build_mining_index(const enc::TextEncoder& frozen, const data::Split& corpus, index::Mode mode,
                                      index::IvfParams ivf, std::size_t batch) {
  return build_index(frozen, corpus, mode, ivf, batch);
}

index::VectorIndex build_mining_index(const enc::ImageEncoder& frozen, const data::Split& corpus,
                                      index::Mode mode, index::IvfParams ivf, std::size_t batch) {
  return build_index(frozen, corpus, mode, ivf, batch);
}

NegativeSet mine(const MiningPlan& plan, std::span<const float> queries, std::span<const std::uint64_t> query_ids,
                 const index::VectorIndex& index) {
  if (plan.k == 0) throw MiningError("mining k must be >= 1");
  const auto dim = index.dim();
  if (queries.size() != query_ids.size() * dim)
    throw MiningError("mine: " + std::to_string(queries.size()) + " floats do not form " +
                      std::to_string(query_ids.size()) + " queries of dim " + std::to_string(dim));
  NegativeSet out;
  out.source_generation = index.generation();
  out.lists.reserve(query_ids.size());
  for (std::size_t i = 0; i < query_ids.size(); ++i) {
    auto hits = index.search(queries.subspan(i * dim, dim), plan.k + 1);
    NegativeList l;
    l.query_id = query_ids[i];
    for (std::size_t j = 0; j < hits.ids.size() && l.ids.size() < plan.k; ++j) {
      if (hits.ids[j] == query_ids[i]) continue;
      l.ids.push_back(hits.ids[j]);
      l.scores.push_back(hits.scores[j]);
    }
    out.degraded |= l.ids.size() < plan.k;
    out.lists.push_back(std::move(l));
  }
  return out;
}

NegativeSet mine(const MiningPlan& plan, const enc::ImageEncoder& student, const data::Split& queries,
                 std::span<const std::size_t> rows, const index::VectorIndex& index) {
  std::vector<std::uint64_t> ids;
  for (auto r : rows) ids.push_back(queries.samples.at(r).id);
  return mine(plan, embed_rows(student, queries, rows), ids, index);
}

NegativeSet mine(const MiningPlan& plan, const enc::TextEncoder& student, const data::Split& queries,
                 std::span<const std::size_t> rows, const index::VectorIndex& index) {
  std::vector<std::uint64_t> ids;
  for (auto r : rows) ids.push_back(queries.samples.at(r).id);
  return mine(plan, embed_rows(student, queries, rows), ids, index);
}

std::vector<float> negative_embeddings(const NegativeSet& set, const index::VectorIndex& index, std::size_t k) {
  if (k > set.min_count()) throw MiningError("negative_embeddings: k exceeds the shortest list");
  std::vector<float> out;
  out.reserve(set.lists.size() * k * index.dim());
  for (const auto& l : set.lists)
    for (std::size_t j = 0; j < k; ++j) {
      auto v = index.vector(l.ids[j]);
      out.insert(out.end(), v.begin(), v.end());
    }
  return out;
}

bool refresh_due(const MiningPlan& plan, std::uint64_t step) {
  return plan.self_index && plan.refresh_every > 0 && step > 0 && step % plan.refresh_every == 0;
}

bool maybe_refresh(const MiningPlan& plan, std::uint64_t step, const enc::TextEncoder& encoder,
                   const data::Split& corpus, index::VectorIndex& index) {
  return refresh(plan, step, encoder, corpus, index);
}

bool maybe_refresh(const MiningPlan& plan, std::uint64_t step, const enc::ImageEncoder& encoder,
                   const data::Split& corpus, index::VectorIndex& index) {
  return refresh(plan, step, encoder, corpus, index);
}

}  // namespace motis::hn
