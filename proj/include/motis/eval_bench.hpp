// Retrieval quality (R@K over text->image queries), encoder throughput and
// disk size, and the markdown/CSV/JSON report tree.
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "motis/data_synth.hpp"
#include "motis/encoders.hpp"

namespace motis::eval {

class EvalError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

using Recall = std::map<std::size_t, double>;  // K -> fraction in [0, 1]

inline const std::vector<std::size_t> kDefaultKs = {1, 5, 10};

// ranks are 1-based gold ranks, one per query.
Recall recall_at_k(std::span<const std::size_t> ranks, std::span<const std::size_t> ks = kDefaultKs);

// Query i's gold item is item i. Ties rank the gold item after every
// equal-scoring other item. Scores use index::dot.
std::vector<std::size_t> gold_ranks(std::span<const float> queries, std::span<const float> items, std::size_t dim);

// {"R@1": ..., "R@5": ...}
nlohmann::json recall_json(const Recall& r);

struct RetrievalRun {
  std::string image_model;
  std::string text_model;
  std::size_t corpus_size = 0;
  std::vector<std::size_t> ranks;
  Recall recall;

  nlohmann::json to_json() const;
};

// Encodes every image once, then ranks all images for each caption.
RetrievalRun evaluate_retrieval(const enc::ImageEncoder& image, const enc::TextEncoder& text,
                                const data::Split& test, std::span<const std::size_t> ks = kDefaultKs,
                                std::size_t batch = 256);

struct QpsResult {
  double items_per_second = 0;  // median over timed runs
  std::size_t batch_size = 0;
  std::size_t threads = 1;
  std::size_t warmup = 0;
  std::vector<double> run_seconds;
};

// Times run_batch (which encodes batch_size items) warmup + timed times.
QpsResult qps_benchmark(const std::function<void()>& run_batch, std::size_t batch_size, std::size_t warmup = 3,
                        std::size_t timed = 10);
QpsResult qps_image(const enc::ImageEncoder& e, std::size_t batch_size = 32, std::size_t warmup = 3,
                    std::size_t timed = 10, std::uint64_t seed = 1);
// Synthetic captions of max_positions / 2 tokens.
QpsResult qps_text(const enc::TextEncoder& e, std::size_t batch_size = 32, std::size_t warmup = 3,
                   std::size_t timed = 10, std::uint64_t seed = 1);

struct EfficiencyEntry {
  std::string model;
  std::uintmax_t disk_bytes_image = 0;
  std::uintmax_t disk_bytes_text = 0;
  QpsResult qps_image;
  QpsResult qps_text;
};

struct EfficiencyReport {
  std::string reference;  // model the speedups are relative to
  std::vector<EfficiencyEntry> entries;

  const EfficiencyEntry& find(const std::string& model) const;
  double speedup_image(const EfficiencyEntry& e) const;
  double speedup_text(const EfficiencyEntry& e) const;
  nlohmann::json to_json() const;
};

// One table row aggregated over seeds.
struct ResultRow {
  std::string name;
  std::vector<Recall> per_seed;
  std::string note;  // e.g. a flagged directional expectation

  double mean(std::size_t k) const;
  double sd(std::size_t k) const;  // sample standard deviation; 0 for one seed
};

struct Tables {
  std::vector<ResultRow> retrieval;
  std::vector<ResultRow> ablation;
  std::string ablation_reference = "full";
  EfficiencyReport efficiency;
  // Written as runs/<name>.json.
  std::vector<std::pair<std::string, nlohmann::json>> runs;
};

// Run names as file stems: characters outside [A-Za-z0-9._-] become '_'
// ("w/o KD" -> "w_o_KD").
std::string run_file_stem(const std::string& name);

// Writes tables.md, tables.csv and runs/*.json into dir. CSV columns are
// fixed; recalls are fractions, Δ R@1 is variant minus reference.
void emit_tables(const std::filesystem::path& dir, const Tables& tables);

inline constexpr const char* kCsvHeader =
    "table,name,seeds,r1_mean,r1_sd,r5_mean,r5_sd,r10_mean,r10_sd,delta_r1,"
    "disk_mb_image,disk_mb_text,qps_image,qps_text,speedup_image,speedup_text,note";

}  // namespace motis::eval
