#include "motis/vector_index.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <limits>
#include <random>

namespace motis::index {

static_assert(std::endian::native == std::endian::little, "index snapshots assume a little-endian host");

namespace {

constexpr char kMagic[4] = {'M', 'T', 'I', 'X'};
constexpr std::uint32_t kSnapshotVersion = 1;

float sq_dist(const float* a, const float* b, std::size_t n) {
  using V = Eigen::Map<const Eigen::VectorXf>;
  return (V(a, static_cast<Eigen::Index>(n)) - V(b, static_cast<Eigen::Index>(n))).squaredNorm();
}

bool rank_before(const std::pair<float, std::uint64_t>& a, const std::pair<float, std::uint64_t>& b) {
  return a.first != b.first ? a.first > b.first : a.second < b.second;
}

// Bounded selection of the k best (score, id) pairs under rank_before.
class TopK {
 public:
  explicit TopK(std::size_t k) : k_(k) { best_.reserve(k + 1); }
  void offer(float score, std::uint64_t id) {
    const std::pair<float, std::uint64_t> c{score, id};
    if (best_.size() == k_ && !rank_before(c, best_.back())) return;
    auto it = std::upper_bound(best_.begin(), best_.end(), c, rank_before);
    best_.insert(it, c);
    if (best_.size() > k_) best_.pop_back();
  }
  SearchResult result(std::uint64_t generation) const {
    SearchResult r;
    r.generation = generation;
    for (const auto& [score, id] : best_) {
      r.scores.push_back(score);
      r.ids.push_back(id);
    }
    return r;
  }

 private:
  std::size_t k_;
  std::vector<std::pair<float, std::uint64_t>> best_;
};

// Exclusion test that stays cheap for the common one-id case.
class Excluder {
 public:
  explicit Excluder(std::span<const std::uint64_t> ex) : ex_(ex) {
    if (ex.size() > 16) {
      sorted_.assign(ex.begin(), ex.end());
      std::sort(sorted_.begin(), sorted_.end());
    }
  }
  bool operator()(std::uint64_t id) const {
    if (!sorted_.empty()) return std::binary_search(sorted_.begin(), sorted_.end(), id);
    return std::find(ex_.begin(), ex_.end(), id) != ex_.end();
  }

 private:
  std::span<const std::uint64_t> ex_;
  std::vector<std::uint64_t> sorted_;
};

template <class T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class T>
T get(std::istream& is, const std::filesystem::path& p, const char* what) {
  T v{};
  const auto at = static_cast<long long>(is.tellg());
  if (!is.read(reinterpret_cast<char*>(&v), sizeof v))
    throw SnapshotError(p.string() + ": truncated " + what + " at offset " + std::to_string(at));
  return v;
}

}  // namespace

float dot(const float* a, const float* b, std::size_t n) {
  using V = Eigen::Map<const Eigen::VectorXf>;
  return V(a, static_cast<Eigen::Index>(n)).dot(V(b, static_cast<Eigen::Index>(n)));
}

std::string to_string(Mode m) { return m == Mode::kExact ? "EXACT" : "IVF"; }

Mode mode_from_string(const std::string& s) {
  if (s == "EXACT" || s == "exact") return Mode::kExact;
  if (s == "IVF" || s == "ivf") return Mode::kIvf;
  throw IndexError("unknown index mode '" + s + "'");
}

VectorIndex::VectorIndex(std::size_t dim, Mode mode, IvfParams ivf) : dim_(dim), mode_(mode), ivf_(ivf) {
  if (dim == 0) throw IndexError("index dimension must be positive");
  generation_ = 1;
}

VectorIndex VectorIndex::build(std::size_t dim, std::span<const std::uint64_t> ids, std::span<const float> vectors,
                               Mode mode, IvfParams ivf) {
  VectorIndex ix(dim, mode, ivf);
  if (vectors.size() != ids.size() * dim)
    throw IndexError("build: " + std::to_string(vectors.size()) + " floats do not form " +
                     std::to_string(ids.size()) + " vectors of dim " + std::to_string(dim));
  ix.ids_.reserve(ids.size());
  ix.data_.reserve(vectors.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    auto v = vectors.subspan(i * dim, dim);
    ix.check_vector(v, "build");
    if (!ix.pos_.emplace(ids[i], i).second) throw IndexError("build: duplicate id " + std::to_string(ids[i]));
    ix.ids_.push_back(ids[i]);
    ix.data_.insert(ix.data_.end(), v.begin(), v.end());
  }
  if (mode == Mode::kIvf) ix.cluster();
  return ix;
}

void VectorIndex::check_vector(std::span<const float> v, const char* what) const {
  if (v.size() != dim_)
    throw IndexError(std::string(what) + ": vector has dim " + std::to_string(v.size()) + ", index has " +
                     std::to_string(dim_));
  double ss = 0;
  for (float x : v) ss += double(x) * x;
  if (!(std::abs(std::sqrt(ss) - 1.0) <= kNormTolerance))
    throw IndexError(std::string(what) + ": vector norm " + std::to_string(std::sqrt(ss)) + " is not 1");
}

void VectorIndex::add(std::uint64_t id, std::span<const float> v) {
  check_vector(v, "add");
  if (pos_.count(id)) throw IndexError("add: duplicate id " + std::to_string(id));
  const std::size_t row = ids_.size();
  pos_.emplace(id, row);
  ids_.push_back(id);
  data_.insert(data_.end(), v.begin(), v.end());
  if (mode_ == Mode::kIvf && !centroids_.empty()) {
    const auto c = nearest_centroid(v.data());
    lists_[c].push_back(row);
    assign_.push_back(c);
  }
  ++generation_;
}

void VectorIndex::add_batch(std::span<const std::uint64_t> ids, std::span<const float> vectors) {
  if (vectors.size() != ids.size() * dim_) throw IndexError("add_batch: size mismatch");
  for (std::size_t i = 0; i < ids.size(); ++i) add(ids[i], vectors.subspan(i * dim_, dim_));
}

void VectorIndex::rebuild() {
  if (mode_ == Mode::kIvf) cluster();
  ++generation_;
}

void VectorIndex::replace_all(std::span<const std::uint64_t> ids, std::span<const float> vectors) {
  auto next = build(dim_, ids, vectors, Mode::kExact, ivf_);
  const auto gen = generation_;
  ids_ = std::move(next.ids_);
  data_ = std::move(next.data_);
  pos_ = std::move(next.pos_);
  centroids_.clear();
  lists_.clear();
  assign_.clear();
  if (mode_ == Mode::kIvf) cluster();
  generation_ = gen + 1;
}

void VectorIndex::set_nprobe(std::size_t nprobe) {
  if (nprobe == 0) throw IndexError("nprobe must be >= 1");
  nprobe_ = nprobe;
}

std::size_t VectorIndex::nearest_centroid(const float* v) const {
  std::size_t best = 0;
  float best_d = std::numeric_limits<float>::infinity();
  for (std::size_t c = 0; c < nlist(); ++c) {
    const float d = sq_dist(v, centroids_.data() + c * dim_, dim_);
    if (d < best_d) {
      best_d = d;
      best = c;
    }
  }
  return best;
}

void VectorIndex::cluster() {
  const std::size_t n = ids_.size();
  centroids_.clear();
  lists_.clear();
  assign_.clear();
  if (n == 0) return;
  std::size_t k = ivf_.nlist ? ivf_.nlist : static_cast<std::size_t>(std::ceil(std::sqrt(double(n))));
  if (k > n) {
    warnings_.push_back("nlist " + std::to_string(k) + " exceeds " + std::to_string(n) +
                        " vectors; using nlist = " + std::to_string(n));
    k = n;
  }

  // k-means++ seeding.
  std::mt19937_64 rng(ivf_.seed);
  centroids_.reserve(k * dim_);
  std::vector<double> d2(n, std::numeric_limits<double>::infinity());
  std::size_t first = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
  centroids_.insert(centroids_.end(), data_.begin() + first * dim_, data_.begin() + (first + 1) * dim_);
  for (std::size_t c = 1; c < k; ++c) {
    const float* last = centroids_.data() + (c - 1) * dim_;
    double total = 0;
    for (std::size_t i = 0; i < n; ++i) {
      d2[i] = std::min(d2[i], double(sq_dist(data_.data() + i * dim_, last, dim_)));
      total += d2[i];
    }
    std::size_t pick = 0;
    if (total > 0) {
      double r = std::uniform_real_distribution<double>(0.0, total)(rng);
      for (pick = 0; pick + 1 < n; ++pick) {
        r -= d2[pick];
        if (r < 0) break;
      }
      while (d2[pick] == 0 && pick + 1 < n) ++pick;
    } else {
      pick = c % n;
    }
    centroids_.insert(centroids_.end(), data_.begin() + pick * dim_, data_.begin() + (pick + 1) * dim_);
  }

  // Lloyd iterations; an empty cluster keeps its previous centroid.
  assign_.assign(n, 0);
  std::vector<double> sums(k * dim_);
  std::vector<std::size_t> counts(k);
  for (int it = 0; it < ivf_.iterations; ++it) {
    for (std::size_t i = 0; i < n; ++i) assign_[i] = nearest_centroid(data_.data() + i * dim_);
    std::fill(sums.begin(), sums.end(), 0.0);
    std::fill(counts.begin(), counts.end(), 0);
    for (std::size_t i = 0; i < n; ++i) {
      ++counts[assign_[i]];
      for (std::size_t j = 0; j < dim_; ++j) sums[assign_[i] * dim_ + j] += data_[i * dim_ + j];
    }
    for (std::size_t c = 0; c < k; ++c)
      if (counts[c])
        for (std::size_t j = 0; j < dim_; ++j)
          centroids_[c * dim_ + j] = static_cast<float>(sums[c * dim_ + j] / double(counts[c]));
  }
  lists_.assign(k, {});
  for (std::size_t i = 0; i < n; ++i) {
    assign_[i] = nearest_centroid(data_.data() + i * dim_);
    lists_[assign_[i]].push_back(i);
  }
  nprobe_ = ivf_.nprobe ? std::min(ivf_.nprobe, k) : std::max<std::size_t>(1, k / 8);
}

std::span<const float> VectorIndex::vector(std::uint64_t id) const {
  auto it = pos_.find(id);
  if (it == pos_.end()) throw IndexError("unknown id " + std::to_string(id));
  return {data_.data() + it->second * dim_, dim_};
}

std::vector<std::vector<std::uint64_t>> VectorIndex::posting_lists() const {
  std::vector<std::vector<std::uint64_t>> out(lists_.size());
  for (std::size_t c = 0; c < lists_.size(); ++c)
    for (auto r : lists_[c]) out[c].push_back(ids_[r]);
  return out;
}

std::size_t VectorIndex::list_of(std::uint64_t id) const {
  auto it = pos_.find(id);
  if (it == pos_.end()) throw IndexError("unknown id " + std::to_string(id));
  if (assign_.empty()) throw IndexError("index has no posting lists");
  return assign_[it->second];
}

SearchResult VectorIndex::search_exhaustive(std::span<const float> q, std::size_t k,
                                            std::span<const std::uint64_t> exclude) const {
  if (k == 0) throw IndexError("search: k must be >= 1");
  if (q.size() != dim_)
    throw IndexError("search: query has dim " + std::to_string(q.size()) + ", index has " + std::to_string(dim_));
  Excluder ex(exclude);
  TopK top(k);
  for (std::size_t r = 0; r < ids_.size(); ++r)
    if (!ex(ids_[r])) top.offer(dot(q.data(), data_.data() + r * dim_, dim_), ids_[r]);
  return top.result(generation_);
}

SearchResult VectorIndex::search(std::span<const float> q, std::size_t k, std::span<const std::uint64_t> exclude) const {
  if (mode_ == Mode::kExact || centroids_.empty()) return search_exhaustive(q, k, exclude);
  if (k == 0) throw IndexError("search: k must be >= 1");
  if (q.size() != dim_)
    throw IndexError("search: query has dim " + std::to_string(q.size()) + ", index has " + std::to_string(dim_));
  const std::size_t nl = nlist();
  std::vector<std::pair<float, std::size_t>> cd(nl);
  for (std::size_t c = 0; c < nl; ++c) cd[c] = {sq_dist(q.data(), centroids_.data() + c * dim_, dim_), c};
  const std::size_t probe = std::min(nprobe_, nl);
  std::partial_sort(cd.begin(), cd.begin() + static_cast<std::ptrdiff_t>(probe), cd.end());

  Excluder ex(exclude);
  TopK top(k);
  for (std::size_t p = 0; p < probe; ++p)
    for (auto r : lists_[cd[p].second])
      if (!ex(ids_[r])) top.offer(dot(q.data(), data_.data() + r * dim_, dim_), ids_[r]);
  return top.result(generation_);
}

void VectorIndex::save(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw SnapshotError("cannot write index snapshot " + path.string());
    os.write(kMagic, 4);
    put<std::uint32_t>(os, kSnapshotVersion);
    put<std::uint32_t>(os, mode_ == Mode::kExact ? 0u : 1u);
    put<std::uint64_t>(os, dim_);
    put<std::uint64_t>(os, ids_.size());
    put<std::uint64_t>(os, generation_);
    for (std::size_t r = 0; r < ids_.size(); ++r) {
      put<std::uint64_t>(os, ids_[r]);
      os.write(reinterpret_cast<const char*>(data_.data() + r * dim_), static_cast<std::streamsize>(dim_ * 4));
    }
    if (mode_ == Mode::kIvf) {
      put<std::uint64_t>(os, nlist());
      put<std::uint64_t>(os, nprobe_);
      put<std::uint64_t>(os, ivf_.nlist);
      put<std::uint64_t>(os, ivf_.seed);
      put<std::int32_t>(os, ivf_.iterations);
      os.write(reinterpret_cast<const char*>(centroids_.data()), static_cast<std::streamsize>(centroids_.size() * 4));
      for (const auto& l : lists_) {
        put<std::uint64_t>(os, l.size());
        for (auto r : l) put<std::uint64_t>(os, ids_[r]);
      }
    }
    if (!os) throw SnapshotError("failed writing index snapshot " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

VectorIndex VectorIndex::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw SnapshotError("cannot open index snapshot " + path.string());
  char magic[4];
  if (!is.read(magic, 4) || !std::equal(magic, magic + 4, kMagic))
    throw SnapshotError(path.string() + ": bad magic at offset 0");
  if (get<std::uint32_t>(is, path, "version") != kSnapshotVersion)
    throw SnapshotError(path.string() + ": unsupported version at offset 4");
  const auto mode = get<std::uint32_t>(is, path, "mode");
  if (mode > 1) throw SnapshotError(path.string() + ": bad mode at offset 8");
  const auto dim = get<std::uint64_t>(is, path, "dim");
  const auto count = get<std::uint64_t>(is, path, "count");
  if (dim == 0 || dim > (1u << 16)) throw SnapshotError(path.string() + ": bad dim at offset 12");
  VectorIndex ix(dim, mode == 0 ? Mode::kExact : Mode::kIvf);
  ix.generation_ = get<std::uint64_t>(is, path, "generation");
  ix.ids_.reserve(count);
  ix.data_.resize(count * dim);
  for (std::uint64_t r = 0; r < count; ++r) {
    const auto id = get<std::uint64_t>(is, path, "record id");
    const auto at = static_cast<long long>(is.tellg());
    if (!is.read(reinterpret_cast<char*>(ix.data_.data() + r * dim), static_cast<std::streamsize>(dim * 4)))
      throw SnapshotError(path.string() + ": truncated vector at offset " + std::to_string(at));
    if (!ix.pos_.emplace(id, r).second)
      throw SnapshotError(path.string() + ": duplicate id " + std::to_string(id) + " at offset " + std::to_string(at));
    ix.ids_.push_back(id);
  }
  if (ix.mode_ == Mode::kIvf) {
    const auto nl = get<std::uint64_t>(is, path, "nlist");
    ix.nprobe_ = get<std::uint64_t>(is, path, "nprobe");
    ix.ivf_.nlist = get<std::uint64_t>(is, path, "configured nlist");
    ix.ivf_.seed = get<std::uint64_t>(is, path, "seed");
    ix.ivf_.iterations = get<std::int32_t>(is, path, "iterations");
    ix.centroids_.resize(nl * dim);
    const auto at = static_cast<long long>(is.tellg());
    if (!is.read(reinterpret_cast<char*>(ix.centroids_.data()), static_cast<std::streamsize>(nl * dim * 4)))
      throw SnapshotError(path.string() + ": truncated centroids at offset " + std::to_string(at));
    ix.lists_.assign(nl, {});
    ix.assign_.assign(count, 0);
    std::uint64_t seen = 0;
    for (std::uint64_t c = 0; c < nl; ++c) {
      const auto len = get<std::uint64_t>(is, path, "posting list length");
      for (std::uint64_t j = 0; j < len; ++j) {
        const auto id = get<std::uint64_t>(is, path, "posting id");
        auto it = ix.pos_.find(id);
        if (it == ix.pos_.end()) throw SnapshotError(path.string() + ": posting list names unknown id");
        ix.lists_[c].push_back(it->second);
        ix.assign_[it->second] = c;
        ++seen;
      }
    }
    if (seen != count) throw SnapshotError(path.string() + ": posting lists do not cover every id");
  }
  return ix;
}

double recall_vs_exact(const VectorIndex& index, std::span<const float> queries, std::size_t k) {
  const std::size_t d = index.dim();
  if (queries.empty() || queries.size() % d != 0) throw IndexError("recall_vs_exact: bad query matrix");
  const std::size_t nq = queries.size() / d;
  double total = 0;
  for (std::size_t i = 0; i < nq; ++i) {
    auto q = queries.subspan(i * d, d);
    auto exact = index.search_exhaustive(q, k);
    auto approx = index.search(q, k);
    if (exact.ids.empty()) {
      total += 1.0;
      continue;
    }
    std::size_t hit = 0;
    for (auto id : exact.ids) hit += std::find(approx.ids.begin(), approx.ids.end(), id) != approx.ids.end();
    total += double(hit) / double(exact.ids.size());
  }
  return total / double(nq);
}

}  // namespace motis::index
