// Id-addressed store of unit-norm embeddings with exact and inverted-file
// top-k inner-product search. Ranking: score descending, then id ascending.
#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace motis::index {

class IndexError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class SnapshotError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Mode { kExact, kIvf };
std::string to_string(Mode m);
Mode mode_from_string(const std::string& s);

inline constexpr double kNormTolerance = 1e-4;

struct IvfParams {
  std::size_t nlist = 0;   // 0: ceil(sqrt(n))
  std::size_t nprobe = 0;  // 0: max(1, nlist / 8)
  std::uint64_t seed = 42;
  int iterations = 20;
};

struct SearchResult {
  std::vector<std::uint64_t> ids;
  std::vector<float> scores;
  std::uint64_t generation = 0;
};

class VectorIndex {
 public:
  VectorIndex() = default;
  VectorIndex(std::size_t dim, Mode mode, IvfParams ivf = {});

  // vectors: ids.size() × dim, row-major. IVF clusters immediately.
  static VectorIndex build(std::size_t dim, std::span<const std::uint64_t> ids, std::span<const float> vectors,
                           Mode mode, IvfParams ivf = {});

  // Appends without re-clustering; IVF places the vector in its nearest list.
  void add(std::uint64_t id, std::span<const float> vector);
  void add_batch(std::span<const std::uint64_t> ids, std::span<const float> vectors);

  // Re-runs clustering (IVF) over all stored vectors and bumps the generation.
  void rebuild();
  // Swaps in a new set of vectors (re-clustering under IVF) and bumps the
  // generation past the current one.
  void replace_all(std::span<const std::uint64_t> ids, std::span<const float> vectors);

  SearchResult search(std::span<const float> query, std::size_t k,
                      std::span<const std::uint64_t> exclude = {}) const;
  // Scans every stored vector regardless of mode.
  SearchResult search_exhaustive(std::span<const float> query, std::size_t k,
                                 std::span<const std::uint64_t> exclude = {}) const;

  std::size_t dim() const { return dim_; }
  std::size_t size() const { return ids_.size(); }
  Mode mode() const { return mode_; }
  std::uint64_t generation() const { return generation_; }
  std::size_t nlist() const { return centroids_.size() / (dim_ ? dim_ : 1); }
  std::size_t nprobe() const { return nprobe_; }
  void set_nprobe(std::size_t nprobe);
  bool trained() const { return mode_ == Mode::kExact || !centroids_.empty(); }

  bool contains(std::uint64_t id) const { return pos_.count(id) != 0; }
  std::span<const float> vector(std::uint64_t id) const;
  const std::vector<std::uint64_t>& ids() const { return ids_; }
  std::span<const float> centroids() const { return centroids_; }
  // Posting lists hold ids.
  std::vector<std::vector<std::uint64_t>> posting_lists() const;
  std::size_t list_of(std::uint64_t id) const;
  // Messages such as the nlist > n fallback.
  const std::vector<std::string>& warnings() const { return warnings_; }

  void save(const std::filesystem::path& path) const;
  static VectorIndex load(const std::filesystem::path& path);

 private:
  void check_vector(std::span<const float> v, const char* what) const;
  void cluster();
  std::size_t nearest_centroid(const float* v) const;

  std::size_t dim_ = 0;
  Mode mode_ = Mode::kExact;
  IvfParams ivf_;
  std::size_t nprobe_ = 1;
  std::uint64_t generation_ = 0;
  std::vector<std::uint64_t> ids_;
  std::vector<float> data_;  // size × dim
  std::unordered_map<std::uint64_t, std::size_t> pos_;
  std::vector<float> centroids_;               // nlist × dim
  std::vector<std::vector<std::size_t>> lists_;  // rows per centroid
  std::vector<std::size_t> assign_;            // list per row
  std::vector<std::string> warnings_;
};

// Inner product of two equal-length vectors; every search path scores with it.
float dot(const float* a, const float* b, std::size_t n);

// Mean fraction of the exhaustive top-k recovered by index.search.
double recall_vs_exact(const VectorIndex& index, std::span<const float> queries, std::size_t k);

}  // namespace motis::index
