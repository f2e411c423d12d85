#include "motis/checkpoint.hpp"

#include <openssl/sha.h>

#include <bit>
#include <cstdio>
#include <fstream>
#include <vector>

namespace motis::ckpt {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'M', 'T', 'K', 'T'};

const char* contents_name(Contents c) {
  switch (c) {
    case Contents::kDual: return "dual";
    case Contents::kText: return "text";
    case Contents::kImage: return "image";
  }
  return "dual";
}

Contents contents_from(const std::string& s) {
  if (s == "dual") return Contents::kDual;
  if (s == "text") return Contents::kText;
  if (s == "image") return Contents::kImage;
  throw FormatError("checkpoint: unknown contents '" + s + "'");
}

template <class T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class T>
T get(std::istream& is, const std::filesystem::path& path, const char* what) {
  T v{};
  const auto at = static_cast<long long>(is.tellg());
  if (!is.read(reinterpret_cast<char*>(&v), sizeof v))
    throw FormatError(path.string() + ": truncated " + what + " at offset " + std::to_string(at));
  return v;
}

void write_file(const std::filesystem::path& path, Contents contents, const nlohmann::json& config, enc::Role role,
                std::uint64_t step, const std::vector<const enc::ParameterSet*>& sets) {
  nlohmann::json header{{"contents", contents_name(contents)},
                        {"config", config},
                        {"digest", config_digest(config)},
                        {"role", enc::to_string(role)},
                        {"step", step}};
  const std::string blob = header.dump();
  std::uint64_t n = 0;
  for (const auto* s : sets) n += s->count();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write checkpoint " + path.string());
    os.write(kMagic, 4);
    put<std::uint32_t>(os, kVersion);
    put<std::uint64_t>(os, blob.size());
    os.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    put<std::uint64_t>(os, n);
    for (const auto* s : sets)
      for (const auto& p : s->items())
        os.write(reinterpret_cast<const char*>(p.tensor.data().data()),
                 static_cast<std::streamsize>(p.tensor.numel() * sizeof(float)));
    if (!os) throw std::runtime_error("failed writing checkpoint " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

struct Opened {
  std::ifstream is;
  CheckpointInfo info;
  std::uint64_t floats = 0;
};

Opened open(const std::filesystem::path& path) {
  Opened o;
  o.is.open(path, std::ios::binary);
  if (!o.is) throw std::runtime_error("cannot open checkpoint " + path.string());
  char magic[4];
  if (!o.is.read(magic, 4) || !std::equal(magic, magic + 4, kMagic))
    throw FormatError(path.string() + ": bad magic at offset 0");
  const auto version = get<std::uint32_t>(o.is, path, "version");
  if (version != kVersion)
    throw FormatError(path.string() + ": unsupported version " + std::to_string(version) + " at offset 4");
  const auto len = get<std::uint64_t>(o.is, path, "header length");
  if (len > (1u << 24)) throw FormatError(path.string() + ": implausible header length at offset 8");
  std::string blob(len, '\0');
  if (!o.is.read(blob.data(), static_cast<std::streamsize>(len)))
    throw FormatError(path.string() + ": truncated header at offset 16");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(blob);
    o.info.contents = contents_from(header.at("contents").get<std::string>());
    o.info.config = header.at("config");
    o.info.digest = header.at("digest").get<std::string>();
    o.info.role = enc::role_from_string(header.at("role").get<std::string>());
    o.info.step = header.at("step").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": malformed header at offset 16: " + e.what());
  }
  if (o.info.digest != config_digest(o.info.config))
    throw FormatError(path.string() + ": config digest mismatch");
  o.floats = get<std::uint64_t>(o.is, path, "parameter count");
  o.info.bytes = std::filesystem::file_size(path);
  return o;
}

void read_params(Opened& o, const std::filesystem::path& path, const std::vector<enc::ParameterSet*>& sets) {
  std::uint64_t n = 0;
  for (const auto* s : sets) n += s->count();
  if (n != o.floats)
    throw FormatError(path.string() + ": parameter count " + std::to_string(o.floats) + " does not match config (" +
                      std::to_string(n) + ")");
  for (auto* s : sets)
    for (auto& p : s->items()) {
      auto dst = p.tensor.mutable_data();
      const auto at = static_cast<long long>(o.is.tellg());
      if (!o.is.read(reinterpret_cast<char*>(dst.data()), static_cast<std::streamsize>(dst.size() * sizeof(float))))
        throw FormatError(path.string() + ": truncated parameter '" + p.name + "' at offset " + std::to_string(at));
    }
  if (o.is.peek() != std::char_traits<char>::eof())
    throw FormatError(path.string() + ": trailing bytes after parameters");
}

}  // namespace

std::string sha256_hex(std::string_view data) {
  unsigned char md[SHA256_DIGEST_LENGTH];
  SHA256(reinterpret_cast<const unsigned char*>(data.data()), data.size(), md);
  std::string hex;
  hex.reserve(2 * SHA256_DIGEST_LENGTH);
  char buf[3];
  for (unsigned char b : md) {
    std::snprintf(buf, sizeof buf, "%02x", b);
    hex += buf;
  }
  return hex;
}

std::string config_digest(const nlohmann::json& config) { return sha256_hex(config.dump()); }

void save(const std::filesystem::path& path, const enc::DualEncoder& m) {
  nlohmann::json cfg{{"text", m.text.config().to_json()}, {"image", m.image.config().to_json()}};
  write_file(path, Contents::kDual, cfg, m.role, m.step, {&m.text.parameters(), &m.image.parameters(), &m.head});
}

enc::DualEncoder load(const std::filesystem::path& path, CheckpointInfo* info) {
  auto o = open(path);
  if (o.info.contents != Contents::kDual) throw FormatError(path.string() + ": not a dual-encoder checkpoint");
  enc::DualEncoder m(enc::EncoderConfig::from_json(o.info.config.at("text")),
                     enc::EncoderConfig::from_json(o.info.config.at("image")), o.info.role, 0);
  read_params(o, path, {&m.text.parameters(), &m.image.parameters(), &m.head});
  m.step = o.info.step;
  if (info) *info = o.info;
  return m;
}

void save_text(const std::filesystem::path& path, const enc::TextEncoder& e, enc::Role role, std::uint64_t step) {
  write_file(path, Contents::kText, nlohmann::json{{"text", e.config().to_json()}}, role, step, {&e.parameters()});
}

void save_image(const std::filesystem::path& path, const enc::ImageEncoder& e, enc::Role role, std::uint64_t step) {
  write_file(path, Contents::kImage, nlohmann::json{{"image", e.config().to_json()}}, role, step, {&e.parameters()});
}

enc::TextEncoder load_text(const std::filesystem::path& path, CheckpointInfo* info) {
  auto o = open(path);
  if (!o.info.config.contains("text")) throw FormatError(path.string() + ": no text encoder in checkpoint");
  if (o.info.contents != Contents::kText) {
    // Dual file: read everything, keep the text tower.
    o.is.close();
    auto m = load(path, info);
    return std::move(m.text);
  }
  enc::TextEncoder e(enc::EncoderConfig::from_json(o.info.config.at("text")), 0);
  read_params(o, path, {&e.parameters()});
  if (info) *info = o.info;
  return e;
}

enc::ImageEncoder load_image(const std::filesystem::path& path, CheckpointInfo* info) {
  auto o = open(path);
  if (!o.info.config.contains("image")) throw FormatError(path.string() + ": no image encoder in checkpoint");
  if (o.info.contents != Contents::kImage) {
    o.is.close();
    auto m = load(path, info);
    return std::move(m.image);
  }
  enc::ImageEncoder e(enc::EncoderConfig::from_json(o.info.config.at("image")), 0);
  read_params(o, path, {&e.parameters()});
  if (info) *info = o.info;
  return e;
}

CheckpointInfo inspect(const std::filesystem::path& path) { return open(path).info; }

std::uintmax_t disk_size(const std::filesystem::path& path) { return std::filesystem::file_size(path); }

}  // namespace motis::ckpt
