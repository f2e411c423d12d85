// Text-to-image search service over a growing gallery: JSON over HTTP with
// /search, /images, /stats and /thumbnails/{id}.
//
// Readers search an immutable snapshot (index + entry metadata) taken under
// a short lock; uploads are decoded and encoded on the request thread, then
// committed by a single writer thread that persists the entry and swaps in a
// new snapshot. The gallery directory is append-only: entries.jsonl commits
// each entry after its files are written, and a restart rebuilds the index
// from the stored embeddings.
#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "motis/vector_index.hpp"

namespace motis::svc {

// Carries the HTTP status and a stable error code for the JSON error body.
class ServiceError : public std::runtime_error {
 public:
  ServiceError(int status, std::string code, const std::string& message)
      : std::runtime_error(message), status_(status), code_(std::move(code)) {}
  int status() const { return status_; }
  const std::string& code() const { return code_; }

 private:
  int status_;
  std::string code_;
};

inline constexpr std::size_t kMaxUploadBytes = 8u << 20;
inline constexpr std::size_t kMaxK = 100;
inline constexpr std::size_t kDefaultK = 10;
inline constexpr std::size_t kThumbnailSide = 96;

struct ServiceOptions {
  std::filesystem::path model_dir;    // holds <model>.ckpt; empty: no model (503s)
  std::filesystem::path gallery_dir;  // created if missing
  std::string model = "student";      // "student" or "teacher"
  index::Mode index_mode = index::Mode::kExact;
  bool measure_qps = true;            // encoder throughput for /stats at startup

  // MOTIS_MODEL_DIR and MOTIS_GALLERY_DIR fill unset paths.
  static ServiceOptions from_env(ServiceOptions base);
};

struct Hit {
  std::uint64_t id = 0;
  float score = 0;
  std::string thumbnail_url;
};

struct SearchResponse {
  std::vector<Hit> results;
  double encode_ms = 0;
  double search_ms = 0;
  double latency_ms = 0;  // encode_ms + search_ms
  std::uint64_t generation = 0;
  nlohmann::json to_json() const;
};

struct AddResult {
  std::uint64_t id = 0;
  std::uint64_t generation = 0;  // first generation whose snapshot holds the image
  nlohmann::json to_json() const;
};

class Service {
 public:
  explicit Service(ServiceOptions options);
  ~Service();
  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  bool model_loaded() const;

  // k in [1, 100]. Throws ServiceError (400 empty text or bad k, 503 no model).
  SearchResponse search(const std::string& text, std::size_t k) const;
  // Throws ServiceError (413 too large, 415 undecodable, 409 duplicate with
  // the existing id in the message and existing_id(), 503 no model).
  AddResult add_image(const std::string& bytes);
  nlohmann::json stats() const;
  std::optional<std::string> thumbnail(std::uint64_t id) const;

  // Serves HTTP until stop(). Returns false if the address cannot be bound.
  bool listen(const std::string& host, int port);
  // Binds and serves on a background thread; returns the bound port (port 0
  // picks a free one) or -1.
  int start(const std::string& host, int port);
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

// 409 bodies carry the id of the entry that already holds the content.
class DuplicateImage : public ServiceError {
 public:
  explicit DuplicateImage(std::uint64_t existing)
      : ServiceError(409, "duplicate", "image already in the gallery as id " + std::to_string(existing)),
        existing_(existing) {}
  std::uint64_t existing_id() const { return existing_; }

 private:
  std::uint64_t existing_;
};

}  // namespace motis::svc
