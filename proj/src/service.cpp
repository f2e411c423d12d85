#include "motis/service.hpp"

#include <condition_variable>
#include <cstdlib>
#include <cstring>
#include <ctime>
#include <deque>
#include <fstream>
#include <future>
#include <iostream>
#include <mutex>
#include <thread>
#include <unordered_map>

#include <httplib.h>

#include "motis/checkpoint.hpp"
#include "motis/encoders.hpp"
#include "motis/eval_bench.hpp"
#include "motis/image_io.hpp"

namespace motis::svc {

namespace fs = std::filesystem;
using clock_type = std::chrono::steady_clock;

ServiceOptions ServiceOptions::from_env(ServiceOptions base) {
  if (base.model_dir.empty())
    if (const char* v = std::getenv("MOTIS_MODEL_DIR")) base.model_dir = v;
  if (base.gallery_dir.empty())
    if (const char* v = std::getenv("MOTIS_GALLERY_DIR")) base.gallery_dir = v;
  return base;
}

nlohmann::json SearchResponse::to_json() const {
  nlohmann::json hits = nlohmann::json::array();
  for (const auto& h : results) hits.push_back({{"id", h.id}, {"score", h.score}, {"thumbnail_url", h.thumbnail_url}});
  return {{"results", hits},
          {"latency_ms", latency_ms},
          {"encode_ms", encode_ms},
          {"search_ms", search_ms},
          {"generation", generation}};
}

nlohmann::json AddResult::to_json() const { return {{"id", id}, {"generation", generation}}; }

namespace {

struct EntryMeta {
  std::string sha256;
  std::string format;
  std::string added_at;
};

// Immutable once published; replaced wholesale by the writer.
struct Snapshot {
  index::VectorIndex index;
  std::unordered_map<std::uint64_t, EntryMeta> entries;
  std::unordered_map<std::string, std::uint64_t> by_hash;
  std::size_t clustered_at = 0;  // IVF: gallery size at the last clustering
};

struct Model {
  std::string name;
  enc::TextEncoder text;
  enc::ImageEncoder image;
  std::size_t side = 0;  // upload downscale side
  fs::path path;
  std::string file_sha256;
  std::string config_digest;
  std::uintmax_t bytes = 0;
  std::optional<double> qps_text, qps_image;
};

struct Job {
  std::string bytes;
  std::string sha256;
  img::Format format = img::Format::kUnknown;
  std::vector<float> features;
  std::vector<float> embedding;
  std::string thumbnail_png;
  std::promise<AddResult> done;
};

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string read_file(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + p.string());
  return {std::istreambuf_iterator<char>(is), {}};
}

void write_file(const fs::path& p, std::string_view data) {
  std::ofstream os(p, std::ios::binary | std::ios::trunc);
  os.write(data.data(), static_cast<std::streamsize>(data.size()));
  if (!os.flush()) throw std::runtime_error("cannot write " + p.string());
}

std::string float_bytes(std::span<const float> v) {
  return {reinterpret_cast<const char*>(v.data()), v.size() * sizeof(float)};
}

std::vector<float> floats_of(const std::string& s, std::size_t expected, const fs::path& p) {
  if (s.size() != expected * sizeof(float))
    throw std::runtime_error(p.string() + ": expected " + std::to_string(expected) + " floats");
  std::vector<float> v(expected);
  std::memcpy(v.data(), s.data(), s.size());
  return v;
}

double ms_since(clock_type::time_point t) {
  return std::chrono::duration<double, std::milli>(clock_type::now() - t).count();
}

std::vector<float> encode_features(const enc::ImageEncoder& e, const std::vector<float>& features) {
  ad::NoGradGuard no_grad;
  const auto& c = e.config();
  enc::PatchBatch batch{1, c.num_patches, c.patch_dim, features};
  auto out = e.encode(batch);
  return {out.data().begin(), out.data().end()};
}

std::optional<Model> load_model(const ServiceOptions& o) {
  if (o.model != "student" && o.model != "teacher")
    throw std::invalid_argument("model must be 'student' or 'teacher', got '" + o.model + "'");
  if (o.model_dir.empty()) return std::nullopt;
  std::vector<fs::path> candidates;
  if (o.model == "teacher") candidates.push_back(o.model_dir / "teacher_ft.ckpt");
  candidates.push_back(o.model_dir / (o.model + ".ckpt"));
  for (const auto& p : candidates) {
    if (!fs::exists(p)) continue;
    ckpt::CheckpointInfo info;
    auto dual = ckpt::load(p, &info);
    Model m;
    m.name = o.model;
    const auto& ic = dual.image.config();
    if (ic.patch_dim != img::kPatchSide * img::kPatchSide * 3)
      throw std::runtime_error(p.string() + ": image tower expects " + std::to_string(ic.patch_dim) +
                               "-feature patches; uploads produce 48");
    m.side = img::side_for_patches(ic.num_patches);
    m.text = std::move(dual.text);
    m.image = std::move(dual.image);
    m.text.set_trainable(false);
    m.image.set_trainable(false);
    m.path = p;
    m.file_sha256 = ckpt::sha256_hex(read_file(p));
    m.config_digest = info.digest;
    m.bytes = ckpt::disk_size(p);
    if (o.measure_qps) {
      m.qps_text = eval::qps_text(m.text).items_per_second;
      m.qps_image = eval::qps_image(m.image).items_per_second;
    }
    return m;
  }
  std::cerr << "motis: no " << o.model << " checkpoint in " << o.model_dir << "; search and upload return 503\n";
  return std::nullopt;
}

nlohmann::json error_body(const std::string& code, const std::string& message) {
  return {{"code", code}, {"message", message}};
}

std::string status_code_name(int status) {
  switch (status) {
    case 400: return "bad_request";
    case 404: return "not_found";
    case 405: return "method_not_allowed";
    case 409: return "duplicate";
    case 413: return "payload_too_large";
    case 415: return "unsupported_media_type";
    case 503: return "model_not_loaded";
    default: return status >= 500 ? "internal_error" : "error";
  }
}

}  // namespace

struct Service::Impl {
  Service* owner = nullptr;
  ServiceOptions opt;
  std::optional<Model> model;
  fs::path gallery;

  mutable std::mutex snap_mu;
  std::shared_ptr<const Snapshot> snap;

  std::mutex q_mu;
  std::condition_variable q_cv;
  std::deque<Job*> queue;
  bool stopping = false;
  std::thread writer;
  std::uint64_t next_id = 1;  // writer thread only
  std::ofstream log;          // writer thread only

  httplib::Server server;
  std::thread server_thread;

  std::shared_ptr<const Snapshot> current() const {
    std::lock_guard lk(snap_mu);
    return snap;
  }
  void publish(std::shared_ptr<const Snapshot> s) {
    std::lock_guard lk(snap_mu);
    snap = std::move(s);
  }

  std::size_t dim() const { return model ? model->image.config().output_dim : 0; }

  void open_gallery();
  void writer_loop();
  void commit(Job& job);
  void routes();
};

void Service::Impl::open_gallery() {
  if (gallery.empty()) throw std::runtime_error("gallery directory is not set");
  for (const char* sub : {"images", "thumbnails", "features", "embeddings"}) fs::create_directories(gallery / sub);
  auto s = std::make_shared<Snapshot>();
  std::vector<std::uint64_t> ids;
  std::vector<float> vectors;
  const fs::path log_path = gallery / "entries.jsonl";
  std::size_t reencoded = 0;
  if (fs::exists(log_path)) {
    std::ifstream is(log_path);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(is, line)) {
      ++line_no;
      if (line.empty()) continue;
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(line);
      } catch (const nlohmann::json::parse_error&) {
        if (is.peek() == EOF) break;  // torn final append
        throw std::runtime_error(log_path.string() + ": malformed line " + std::to_string(line_no));
      }
      const auto id = j.at("id").get<std::uint64_t>();
      EntryMeta meta{j.at("sha256").get<std::string>(), j.at("format").get<std::string>(),
                     j.at("added_at").get<std::string>()};
      next_id = std::max(next_id, id + 1);
      s->by_hash.emplace(meta.sha256, id);
      s->entries.emplace(id, std::move(meta));
      if (!model) continue;
      std::vector<float> emb;
      const auto emb_path = gallery / "embeddings" / (std::to_string(id) + ".f32");
      if (j.value("encoder_sha256", "") == model->file_sha256) {
        emb = floats_of(read_file(emb_path), dim(), emb_path);
      } else {
        // Stored embeddings came from another checkpoint; the stored patch
        // features are re-encoded so the index matches the loaded encoder.
        const auto f_path = gallery / "features" / (std::to_string(id) + ".f32");
        const auto& ic = model->image.config();
        emb = encode_features(model->image, floats_of(read_file(f_path), ic.num_patches * ic.patch_dim, f_path));
        ++reencoded;
      }
      ids.push_back(id);
      vectors.insert(vectors.end(), emb.begin(), emb.end());
    }
  }
  if (reencoded) std::cerr << "motis: re-encoded " << reencoded << " gallery entries for the loaded checkpoint\n";
  if (model) {
    const bool cluster = opt.index_mode == index::Mode::kIvf && !ids.empty();
    s->index = index::VectorIndex::build(dim(), ids, vectors, cluster ? index::Mode::kIvf : index::Mode::kExact);
    if (opt.index_mode == index::Mode::kIvf && !cluster) s->index = index::VectorIndex(dim(), index::Mode::kIvf);
    s->clustered_at = cluster ? ids.size() : 0;
  }
  snap = std::move(s);
  const bool needs_newline = fs::exists(log_path) && fs::file_size(log_path) > 0 && read_file(log_path).back() != '\n';
  log.open(log_path, std::ios::app);
  if (!log) throw std::runtime_error("cannot append to " + log_path.string());
  if (needs_newline) log << '\n';  // seal a torn final line
}

void Service::Impl::commit(Job& job) {
  const auto cur = current();
  if (auto it = cur->by_hash.find(job.sha256); it != cur->by_hash.end())
    throw DuplicateImage(it->second);
  const std::uint64_t id = next_id;
  const auto name = std::to_string(id);
  write_file(gallery / "images" / (name + "." + img::extension(job.format)), job.bytes);
  write_file(gallery / "thumbnails" / (name + ".png"), job.thumbnail_png);
  write_file(gallery / "features" / (name + ".f32"), float_bytes(job.features));
  write_file(gallery / "embeddings" / (name + ".f32"), float_bytes(job.embedding));
  EntryMeta meta{job.sha256, img::extension(job.format), utc_now()};
  // The log line is the commit point.
  const nlohmann::json rec{{"id", id},
                           {"sha256", meta.sha256},
                           {"format", meta.format},
                           {"added_at", meta.added_at},
                           {"encoder_sha256", model->file_sha256}};
  log << rec.dump() << '\n';
  if (!log.flush()) throw std::runtime_error("cannot append to the gallery log");
  ++next_id;

  auto next = std::make_shared<Snapshot>(*cur);
  next->index.add(id, job.embedding);
  if (opt.index_mode == index::Mode::kIvf && next->index.size() >= 2 * std::max<std::size_t>(next->clustered_at, 8)) {
    next->index.rebuild();
    next->clustered_at = next->index.size();
  }
  next->by_hash.emplace(meta.sha256, id);
  next->entries.emplace(id, std::move(meta));
  const auto generation = next->index.generation();
  publish(std::move(next));
  job.done.set_value({id, generation});
}

void Service::Impl::writer_loop() {
  for (;;) {
    Job* job = nullptr;
    {
      std::unique_lock lk(q_mu);
      q_cv.wait(lk, [&] { return stopping || !queue.empty(); });
      if (queue.empty()) return;
      job = queue.front();
      queue.pop_front();
    }
    try {
      commit(*job);
    } catch (...) {
      job->done.set_exception(std::current_exception());
    }
  }
}

Service::Service(ServiceOptions options) : impl_(std::make_unique<Impl>()) {
  impl_->owner = this;
  impl_->opt = ServiceOptions::from_env(std::move(options));
  impl_->gallery = impl_->opt.gallery_dir;
  impl_->model = load_model(impl_->opt);
  impl_->open_gallery();
  impl_->writer = std::thread([this] { impl_->writer_loop(); });
  impl_->routes();
}

Service::~Service() {
  stop();
  {
    std::lock_guard lk(impl_->q_mu);
    impl_->stopping = true;
  }
  impl_->q_cv.notify_all();
  if (impl_->writer.joinable()) impl_->writer.join();
}

bool Service::model_loaded() const { return impl_->model.has_value(); }

SearchResponse Service::search(const std::string& text, std::size_t k) const {
  if (!impl_->model) throw ServiceError(503, "model_not_loaded", "no model is loaded");
  if (k == 0 || k > kMaxK) throw ServiceError(400, "bad_k", "k must lie in [1, " + std::to_string(kMaxK) + "]");
  const auto& m = *impl_->model;
  const auto& tc = m.text.config();
  auto tokens = enc::tokenize(text, tc.vocab_size, tc.max_positions);
  if (tokens.empty()) throw ServiceError(400, "empty_text", "query text is empty");

  const auto t0 = clock_type::now();
  std::vector<float> query;
  {
    ad::NoGradGuard no_grad;
    auto e = m.text.encode(enc::TokenBatch::from_sequences({tokens}, tc.max_positions));
    query.assign(e.data().begin(), e.data().end());
  }
  const double encode_ms = ms_since(t0);
  const auto snap = impl_->current();
  const auto t1 = clock_type::now();
  SearchResponse r;
  if (snap->index.size() > 0) {
    auto found = snap->index.search(query, k);
    for (std::size_t i = 0; i < found.ids.size(); ++i)
      r.results.push_back({found.ids[i], found.scores[i], "/thumbnails/" + std::to_string(found.ids[i])});
  }
  r.search_ms = ms_since(t1);
  r.encode_ms = encode_ms;
  r.latency_ms = r.encode_ms + r.search_ms;
  r.generation = snap->index.generation();
  return r;
}

AddResult Service::add_image(const std::string& bytes) {
  if (!impl_->model) throw ServiceError(503, "model_not_loaded", "no model is loaded");
  if (bytes.size() > kMaxUploadBytes)
    throw ServiceError(413, "payload_too_large", "image exceeds " + std::to_string(kMaxUploadBytes) + " bytes");
  Job job;
  job.format = img::sniff(bytes);
  img::Image image;
  try {
    image = img::decode(bytes);
  } catch (const img::DecodeError& e) {
    throw ServiceError(415, "unsupported_media_type", e.what());
  }
  job.sha256 = ckpt::sha256_hex(bytes);
  if (auto snap = impl_->current(); snap->by_hash.count(job.sha256)) throw DuplicateImage(snap->by_hash.at(job.sha256));
  job.features = img::featurize(image, impl_->model->side);
  job.embedding = encode_features(impl_->model->image, job.features);
  job.thumbnail_png = img::encode_png(img::thumbnail(image, kThumbnailSide));
  job.bytes = bytes;
  auto done = job.done.get_future();
  {
    std::lock_guard lk(impl_->q_mu);
    if (impl_->stopping) throw ServiceError(503, "shutting_down", "service is stopping");
    impl_->queue.push_back(&job);
  }
  impl_->q_cv.notify_one();
  return done.get();
}

nlohmann::json Service::stats() const {
  const auto snap = impl_->current();
  nlohmann::json digests = nlohmann::json::object(), qps = nlohmann::json::object();
  std::uintmax_t disk = 0;
  if (const auto& m = impl_->model) {
    digests[m->name] = {{"checkpoint_sha256", m->file_sha256}, {"config_sha256", m->config_digest}};
    disk = m->bytes;
    qps["text"] = m->qps_text ? nlohmann::json(*m->qps_text) : nlohmann::json(nullptr);
    qps["image"] = m->qps_image ? nlohmann::json(*m->qps_image) : nlohmann::json(nullptr);
  }
  return {{"image_count", snap->entries.size()},
          {"index_mode", index::to_string(impl_->opt.index_mode)},
          {"generation", snap->index.generation()},
          {"model", impl_->model ? impl_->model->name : ""},
          {"model_loaded", impl_->model.has_value()},
          {"model_digests", digests},
          {"disk_bytes", disk},
          {"qps_estimates", qps}};
}

std::optional<std::string> Service::thumbnail(std::uint64_t id) const {
  if (!impl_->current()->entries.count(id)) return std::nullopt;
  return read_file(impl_->gallery / "thumbnails" / (std::to_string(id) + ".png"));
}

void Service::Impl::routes() {
  auto& s = server;
  s.set_payload_max_length(kMaxUploadBytes + (1u << 20));  // multipart framing headroom
  s.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                         {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"},
                         {"Access-Control-Allow-Headers", "Content-Type"}});
  auto send_json = [](httplib::Response& res, int status, const nlohmann::json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
  };
  s.set_error_handler([send_json](const httplib::Request&, httplib::Response& res) {
    if (res.body.empty())
      send_json(res, res.status, error_body(status_code_name(res.status), httplib::status_message(res.status)));
  });
  s.set_exception_handler([send_json](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
    try {
      std::rethrow_exception(ep);
    } catch (const DuplicateImage& e) {
      auto body = error_body(e.code(), e.what());
      body["id"] = e.existing_id();
      send_json(res, e.status(), body);
    } catch (const ServiceError& e) {
      send_json(res, e.status(), error_body(e.code(), e.what()));
    } catch (const std::exception& e) {
      send_json(res, 500, error_body("internal_error", e.what()));
    }
  });
  s.Options(R"(.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });

  auto* self = this;
  s.Post("/search", [self, send_json](const httplib::Request& req, httplib::Response& res) {
    nlohmann::json body;
    try {
      body = nlohmann::json::parse(req.body);
    } catch (const nlohmann::json::parse_error&) {
      throw ServiceError(400, "bad_json", "request body is not JSON");
    }
    if (!body.is_object() || !body.contains("text") || !body["text"].is_string())
      throw ServiceError(400, "empty_text", "field 'text' (string) is required");
    std::size_t k = kDefaultK;
    if (body.contains("k")) {
      if (!body["k"].is_number_integer() || body["k"].get<long long>() < 1)
        throw ServiceError(400, "bad_k", "k must be a positive integer");
      k = body["k"].get<std::size_t>();
    }
    const Service* svc = self->owner;
    send_json(res, 200, svc->search(body["text"].get<std::string>(), k).to_json());
  });
  s.Post("/images", [self, send_json](const httplib::Request& req, httplib::Response& res) {
    const std::string* bytes = &req.body;
    if (req.is_multipart_form_data()) {
      if (req.files.empty()) throw ServiceError(400, "no_file", "multipart upload carries no file");
      auto it = req.files.find("image");
      bytes = &(it != req.files.end() ? it->second : req.files.begin()->second).content;
    }
    send_json(res, 200, self->owner->add_image(*bytes).to_json());
  });
  s.Get("/stats", [self, send_json](const httplib::Request&, httplib::Response& res) {
    send_json(res, 200, self->owner->stats());
  });
  s.Get(R"(/thumbnails/(\d{1,19}))", [self](const httplib::Request& req, httplib::Response& res) {
    std::uint64_t id = 0;
    try {
      id = std::stoull(req.matches[1].str());
    } catch (const std::exception&) {
      throw ServiceError(404, "not_found", "no image " + req.matches[1].str());
    }
    auto png = self->owner->thumbnail(id);
    if (!png) throw ServiceError(404, "not_found", "no image " + std::to_string(id));
    res.set_content(*png, "image/png");
  });
}

bool Service::listen(const std::string& host, int port) { return impl_->server.listen(host, port); }

int Service::start(const std::string& host, int port) {
  int bound = port;
  if (port == 0) {
    bound = impl_->server.bind_to_any_port(host);
  } else if (!impl_->server.bind_to_port(host, port)) {
    bound = -1;
  }
  if (bound < 0) return -1;
  impl_->server_thread = std::thread([this] { impl_->server.listen_after_bind(); });
  impl_->server.wait_until_ready();
  return bound;
}

void Service::stop() {
  impl_->server.stop();
  if (impl_->server_thread.joinable()) impl_->server_thread.join();
}

}  // namespace motis::svc
