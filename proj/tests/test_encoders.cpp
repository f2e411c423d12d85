#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>

#include "motis/checkpoint.hpp"
#include "motis/encoders.hpp"
#include "support/encoder_oracle.hpp"

using namespace motis;
using enc::EncoderConfig;

namespace {

EncoderConfig small_text(std::size_t layers = 1) {
  auto c = enc::student_text_config(50, 8);
  c.num_layers = layers;
  c.hidden_dim = 16;
  c.num_heads = 2;
  c.ffn_dim = 32;
  c.output_dim = 8;
  return c;
}

EncoderConfig small_image(std::size_t layers = 1) {
  auto c = enc::student_image_config(4, 12);
  c.num_layers = layers;
  c.hidden_dim = 16;
  c.num_heads = 2;
  c.ffn_dim = 32;
  c.output_dim = 8;
  return c;
}

enc::TokenBatch random_tokens(std::size_t n, std::size_t max_len, std::size_t vocab, std::mt19937_64& rng) {
  std::uniform_int_distribution<std::uint32_t> tok(1, static_cast<std::uint32_t>(vocab - 1));
  std::uniform_int_distribution<std::size_t> len(1, max_len);
  std::vector<std::vector<std::uint32_t>> seqs(n);
  for (auto& s : seqs) {
    s.resize(len(rng));
    for (auto& t : s) t = tok(rng);
  }
  return enc::TokenBatch::from_sequences(seqs, max_len);
}

enc::PatchBatch random_patches(std::size_t n, const EncoderConfig& c, std::mt19937_64& rng) {
  std::normal_distribution<float> d(0.f, 1.f);
  enc::PatchBatch b{n, c.num_patches, c.patch_dim, std::vector<float>(n * c.num_patches * c.patch_dim)};
  for (auto& v : b.values) v = d(rng);
  return b;
}

void check_unit_rows(const ad::Tensor& t) {
  for (std::size_t r = 0; r < t.rows(); ++r) {
    double s = 0;
    for (std::size_t c = 0; c < t.cols(); ++c) s += double(t.at(r, c)) * t.at(r, c);
    CHECK(std::abs(std::sqrt(s) - 1.0) <= 1e-5);
  }
}

std::vector<float> row(const ad::Tensor& t, std::size_t r) {
  return {t.data().begin() + r * t.cols(), t.data().begin() + (r + 1) * t.cols()};
}

std::filesystem::path scratch(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "motis_test_encoders";
  std::filesystem::create_directories(dir);
  return dir / name;
}

bool same_bytes(const enc::ParameterSet& a, const enc::ParameterSet& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    auto x = a[i].data(), y = b[i].data();
    if (x.size() != y.size() || std::memcmp(x.data(), y.data(), x.size_bytes()) != 0) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("config validation and json round trip") {
  auto c = enc::teacher_text_config();
  CHECK_NOTHROW(c.validate());
  CHECK(EncoderConfig::from_json(c.to_json()) == c);
  auto i = enc::teacher_image_config();
  CHECK(EncoderConfig::from_json(i.to_json()) == i);
  auto bad = c;
  bad.hidden_dim = 130;
  CHECK_THROWS_AS(bad.validate(), enc::ConfigError);
  CHECK_THROWS_AS(enc::DualEncoder(small_text(), [] {
                    auto x = small_image();
                    x.output_dim = 4;
                    return x;
                  }(), enc::Role::kStudent, 1),
                  enc::ConfigError);
}

TEST_CASE("text encoder output contract") {
  std::mt19937_64 rng(3);
  enc::TextEncoder e(enc::student_text_config(), 11);
  auto batch = random_tokens(12, 16, 512, rng);
  auto out = e.encode(batch);
  CHECK(out.rows() == 12);
  CHECK(out.cols() == 64);
  check_unit_rows(out);

  // Duplicated sample, different batch positions.
  auto dup = enc::TokenBatch::from_sequences({{5, 9, 2}, {7, 7}, {5, 9, 2}}, 16);
  auto d = e.encode(dup);
  CHECK(row(d, 0) == row(d, 2));
  CHECK(e.encode(dup).data().size() == d.data().size());
  CHECK(std::equal(d.data().begin(), d.data().end(), e.encode(dup).data().begin()));
}

TEST_CASE("text encoder masking") {
  enc::TextEncoder e(small_text(1), 5);
  auto alone = e.encode(enc::TokenBatch::from_sequences({{17}}, 8));
  auto padded = e.encode(enc::TokenBatch::from_sequences({{17}, {3, 4, 5, 6}}, 8));
  for (std::size_t c = 0; c < alone.cols(); ++c) CHECK(alone.at(0, c) == doctest::Approx(padded.at(0, c)).epsilon(1e-6));

  // Hand-evaluated reference for the padded row and the full row.
  auto ref0 = testing::reference_text(e, {17, 0, 0, 0}, {1, 0, 0, 0});
  auto ref1 = testing::reference_text(e, {3, 4, 5, 6}, {1, 1, 1, 1});
  for (std::size_t c = 0; c < padded.cols(); ++c) {
    CHECK(std::abs(padded.at(0, c) - ref0[c]) <= 1e-5);
    CHECK(std::abs(padded.at(1, c) - ref1[c]) <= 1e-5);
  }

  // Changing the padding token ids must not matter.
  enc::TokenBatch b = enc::TokenBatch::from_sequences({{17}, {3, 4, 5, 6}}, 8);
  b.ids[1] = 42;
  b.ids[2] = 43;
  auto junk = e.encode(b);
  CHECK(std::equal(junk.data().begin(), junk.data().end(), padded.data().begin()));
}

TEST_CASE("multi-layer text encoder matches reference") {
  std::mt19937_64 rng(8);
  enc::TextEncoder e(small_text(3), 21);
  auto b = random_tokens(5, 8, 50, rng);
  auto out = e.encode(b);
  for (std::size_t i = 0; i < b.batch; ++i) {
    std::vector<std::uint32_t> ids(b.ids.begin() + i * b.seq, b.ids.begin() + (i + 1) * b.seq);
    std::vector<std::uint8_t> mask(b.mask.begin() + i * b.seq, b.mask.begin() + (i + 1) * b.seq);
    auto ref = testing::reference_text(e, ids, mask);
    for (std::size_t c = 0; c < out.cols(); ++c) CHECK(std::abs(out.at(i, c) - ref[c]) <= 1e-5);
  }
}

TEST_CASE("text encoder input errors and truncation") {
  enc::TextEncoder e(small_text(1), 5);
  CHECK_THROWS_AS(e.encode(enc::TokenBatch::from_sequences({{50}}, 8)), enc::InputError);
  auto b = enc::TokenBatch::from_sequences({{1, 2, 3, 4, 5, 6, 7, 8, 9, 10}}, 8);
  CHECK(b.truncated);
  CHECK(b.seq == 8);
  enc::EncodeInfo info;
  auto out = e.encode(b, &info);
  CHECK(info.truncated);
  check_unit_rows(out);

  // A batch wider than the position table is cut to max_positions and flagged.
  auto wide = enc::TokenBatch::from_sequences({{1, 2, 3, 4, 5, 6, 7, 8, 9, 10}}, 12);
  CHECK_FALSE(wide.truncated);
  enc::EncodeInfo info2;
  auto cut = e.encode(wide, &info2);
  CHECK(info2.truncated);
  CHECK(std::equal(cut.data().begin(), cut.data().end(), out.data().begin()));
}

TEST_CASE("image encoder output contract and reference") {
  std::mt19937_64 rng(4);
  auto cfg = small_image(2);
  enc::ImageEncoder e(cfg, 9);
  auto b = random_patches(6, cfg, rng);
  auto out = e.encode(b);
  check_unit_rows(out);
  for (std::size_t i = 0; i < b.batch; ++i) {
    std::vector<float> one(b.values.begin() + i * 4 * 12, b.values.begin() + (i + 1) * 4 * 12);
    auto ref = testing::reference_image(e, one);
    for (std::size_t c = 0; c < out.cols(); ++c) CHECK(std::abs(out.at(i, c) - ref[c]) <= 1e-5);
  }

  // Permuting the batch permutes the outputs.
  const std::vector<std::size_t> perm{3, 0, 5, 1, 4, 2};
  enc::PatchBatch pb = b;
  const std::size_t stride = 4 * 12;
  for (std::size_t i = 0; i < perm.size(); ++i)
    std::copy_n(b.values.begin() + perm[i] * stride, stride, pb.values.begin() + i * stride);
  auto po = e.encode(pb);
  for (std::size_t i = 0; i < perm.size(); ++i)
    for (std::size_t c = 0; c < out.cols(); ++c) CHECK(po.at(i, c) == doctest::Approx(out.at(perm[i], c)).epsilon(1e-6));

  b.num_patches = 3;
  b.values.resize(6 * 3 * 12);
  CHECK_THROWS_AS(e.encode(b), enc::InputError);
}

TEST_CASE("default image encoder contract") {
  std::mt19937_64 rng(6);
  enc::ImageEncoder e(enc::teacher_image_config(), 2);
  check_unit_rows(e.encode(random_patches(3, e.config(), rng)));
}

TEST_CASE("golden image embedding") {
  // Zero patches on a freshly seeded default student image tower.
  enc::ImageEncoder e(enc::student_image_config(), 1234);
  enc::PatchBatch zero{1, enc::kDefaultPatches, enc::kDefaultPatchDim,
                       std::vector<float>(enc::kDefaultPatches * enc::kDefaultPatchDim, 0.f)};
  auto out = e.encode(zero);
  std::ifstream in(std::filesystem::path(MOTIS_TEST_DATA_DIR) / "golden_image_embedding.txt");
  REQUIRE(in.good());
  std::vector<double> golden;
  for (double v; in >> v;) golden.push_back(v);
  REQUIRE(golden.size() == out.cols());
  for (std::size_t c = 0; c < golden.size(); ++c) CHECK(std::abs(out.at(0, c) - golden[c]) <= 1e-5);
}

TEST_CASE("student initialization from teacher") {
  std::mt19937_64 rng(10);
  enc::DualEncoder teacher(small_text(4), small_image(4), enc::Role::kTeacher, 3);

  SUBCASE("identical config copies everything") {
    enc::InitReport rep;
    auto s = enc::init_student_from_teacher(small_text(4), small_image(4), teacher, enc::LayerMap::kFirstK, 99, &rep);
    CHECK(rep.random.empty());
    CHECK(s.role == enc::Role::kStudent);
    auto tb = random_tokens(4, 8, 50, rng);
    auto ta = teacher.text.encode(tb), sa = s.text.encode(tb);
    CHECK(std::equal(ta.data().begin(), ta.data().end(), sa.data().begin()));
    auto pb = random_patches(3, small_image(4), rng);
    auto ti = teacher.image.encode(pb), si = s.image.encode(pb);
    CHECK(std::equal(ti.data().begin(), ti.data().end(), si.data().begin()));
    CHECK(s.log_temperature().item() == teacher.log_temperature().item());
  }

  SUBCASE("shallower student takes the first layers") {
    enc::InitReport rep;
    auto s = enc::init_student_from_teacher(small_text(2), small_image(2), teacher, enc::LayerMap::kFirstK, 99, &rep);
    CHECK(rep.random.empty());
    for (const auto& p : s.text.parameters().items()) {
      const auto* t = teacher.text.parameters().find(p.name);
      REQUIRE(t);
      CHECK(std::equal(p.tensor.data().begin(), p.tensor.data().end(), t->tensor.data().begin()));
    }
    CHECK(s.text.parameters().find("block2.ln1.gain") == nullptr);
    CHECK(s.image.parameters().find("block1.mlp.fc2.weight") != nullptr);
  }

  SUBCASE("mismatched widths fall back to seeded random with a report") {
    auto narrow_t = small_text(2);
    narrow_t.hidden_dim = 8;
    narrow_t.ffn_dim = 16;
    enc::InitReport rep;
    auto s = enc::init_student_from_teacher(narrow_t, small_image(2), teacher, enc::LayerMap::kFirstK, 7, &rep);
    CHECK_FALSE(rep.random.empty());
    for (const auto& name : rep.random) CHECK(name.rfind("text.", 0) == 0);
    auto again = enc::init_student_from_teacher(narrow_t, small_image(2), teacher, enc::LayerMap::kFirstK, 7);
    CHECK(same_bytes(s.text.parameters(), again.text.parameters()));
  }

  SUBCASE("random map is deterministic per seed") {
    enc::InitReport rep;
    auto a = enc::init_student_from_teacher(small_text(2), small_image(2), teacher, enc::LayerMap::kRandom, 5, &rep);
    auto b = enc::init_student_from_teacher(small_text(2), small_image(2), teacher, enc::LayerMap::kRandom, 5);
    CHECK(rep.copied.empty());
    CHECK(same_bytes(a.text.parameters(), b.text.parameters()));
    CHECK(same_bytes(a.image.parameters(), b.image.parameters()));
    auto c = enc::init_student_from_teacher(small_text(2), small_image(2), teacher, enc::LayerMap::kRandom, 6);
    CHECK_FALSE(same_bytes(a.text.parameters(), c.text.parameters()));
  }
}

TEST_CASE("parameter sets copy deeply") {
  enc::DualEncoder a(small_text(), small_image(), enc::Role::kStudent, 1);
  enc::DualEncoder b = a;
  b.text.parameters().items()[0].tensor.mutable_data()[0] += 1.0f;
  b.head.items()[0].tensor.mutable_data()[0] += 1.0f;
  CHECK(a.text.parameters()[0].data()[0] != b.text.parameters()[0].data()[0]);
  CHECK(a.log_temperature().item() != b.log_temperature().item());
}

TEST_CASE("parameter counts") {
  enc::ParameterSet linear;
  linear.add("weight", ad::Tensor::zeros({4, 3}));
  linear.add("bias", ad::Tensor::zeros({3}));
  CHECK(linear.count() == 15);

  for (auto cfg : {enc::teacher_text_config(), enc::student_text_config(), small_text(3)}) {
    enc::TextEncoder e(cfg, 1);
    CHECK(e.count_params() == testing::text_params(cfg));
  }
  for (auto cfg : {enc::teacher_image_config(), enc::student_image_config(), small_image(3)}) {
    enc::ImageEncoder e(cfg, 1);
    CHECK(e.count_params() == testing::image_params(cfg));
  }

  auto deeper = enc::student_text_config();
  const auto base = testing::text_params(deeper);
  deeper.num_layers *= 2;
  CHECK(enc::TextEncoder(deeper, 1).count_params() > base);

  const double text_ratio = double(testing::text_params(enc::student_text_config())) /
                            double(testing::text_params(enc::teacher_text_config()));
  const double image_ratio = double(testing::image_params(enc::student_image_config())) /
                             double(testing::image_params(enc::teacher_image_config()));
  MESSAGE("student/teacher parameter ratio: text " << text_ratio << ", image " << image_ratio);
  CHECK(text_ratio < 1.0);
  CHECK(image_ratio < 1.0);
}

TEST_CASE("temperature init and clamp") {
  enc::DualEncoder m(small_text(), small_image(), enc::Role::kTeacher, 1);
  CHECK(m.tau() == doctest::Approx(0.07).epsilon(1e-6));
  CHECK(m.logit_scale().item() == doctest::Approx(1.0 / 0.07).epsilon(1e-5));
  m.head.items()[0].tensor.mutable_data()[0] = 50.0f;
  m.clamp_temperature();
  CHECK(m.tau() == doctest::Approx(0.01).epsilon(1e-5));
  m.head.items()[0].tensor.mutable_data()[0] = -3.0f;
  m.clamp_temperature();
  CHECK(m.tau() == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("freezing toggles gradient tracking") {
  enc::TextEncoder e(small_text(), 1);
  e.set_trainable(false);
  CHECK_FALSE(e.trainable());
  for (const auto& p : e.parameters().items()) CHECK_FALSE(p.tensor.requires_grad());
  auto out = e.encode(enc::TokenBatch::from_sequences({{1, 2}}, 8));
  CHECK_FALSE(out.requires_grad());
  e.set_trainable(true);
  CHECK(e.encode(enc::TokenBatch::from_sequences({{1, 2}}, 8)).requires_grad());
}

TEST_CASE("checkpoint round trip") {
  std::mt19937_64 rng(12);
  enc::DualEncoder m(small_text(2), small_image(2), enc::Role::kTeacherFinetuned, 4);
  m.step = 321;
  m.head.items()[0].tensor.mutable_data()[0] = 3.3f;
  auto tb = random_tokens(5, 8, 50, rng);
  auto pb = random_patches(5, small_image(2), rng);
  auto t0 = m.text.encode(tb), i0 = m.image.encode(pb);

  const auto path = scratch("dual.ckpt");
  ckpt::save(path, m);
  ckpt::CheckpointInfo info;
  auto back = ckpt::load(path, &info);
  CHECK(info.role == enc::Role::kTeacherFinetuned);
  CHECK(info.step == 321);
  CHECK(back.step == 321);
  CHECK(info.bytes == std::filesystem::file_size(path));
  CHECK(ckpt::disk_size(path) == info.bytes);
  CHECK(info.digest == ckpt::config_digest(info.config));
  CHECK(info.digest.size() == 64);
  CHECK(back.log_temperature().item() == 3.3f);
  auto t1 = back.text.encode(tb), i1 = back.image.encode(pb);
  CHECK(std::memcmp(t0.data().data(), t1.data().data(), t0.data().size_bytes()) == 0);
  CHECK(std::memcmp(i0.data().data(), i1.data().data(), i0.data().size_bytes()) == 0);

  // Saving twice yields identical bytes.
  const auto path2 = scratch("dual2.ckpt");
  ckpt::save(path2, back);
  std::ifstream a(path, std::ios::binary), b(path2, std::ios::binary);
  std::string sa((std::istreambuf_iterator<char>(a)), {}), sb((std::istreambuf_iterator<char>(b)), {});
  CHECK(sa == sb);

  SUBCASE("single towers") {
    const auto tp = scratch("text.ckpt"), ip = scratch("image.ckpt");
    ckpt::save_text(tp, m.text, m.role, m.step);
    ckpt::save_image(ip, m.image, m.role, m.step);
    auto te = ckpt::load_text(tp);
    auto ie = ckpt::load_image(ip);
    auto t2 = te.encode(tb), i2 = ie.encode(pb);
    CHECK(std::memcmp(t0.data().data(), t2.data().data(), t0.data().size_bytes()) == 0);
    CHECK(std::memcmp(i0.data().data(), i2.data().data(), i0.data().size_bytes()) == 0);
    CHECK(ckpt::disk_size(tp) + ckpt::disk_size(ip) < ckpt::disk_size(path) + 4096);
    CHECK_THROWS_AS(ckpt::load(tp), ckpt::FormatError);
    // A dual checkpoint also serves a single tower.
    auto from_dual = ckpt::load_image(path);
    CHECK(same_bytes(from_dual.parameters(), m.image.parameters()));
  }

  SUBCASE("corruption is reported") {
    auto bad = sa;
    bad[0] = 'X';
    const auto p = scratch("bad.ckpt");
    std::ofstream(p, std::ios::binary) << bad;
    CHECK_THROWS_AS(ckpt::load(p), ckpt::FormatError);
    std::ofstream(p, std::ios::binary | std::ios::trunc) << sa.substr(0, sa.size() - 10);
    CHECK_THROWS_AS(ckpt::load(p), ckpt::FormatError);
    CHECK_THROWS_AS(ckpt::load(scratch("missing.ckpt")), std::runtime_error);
  }
}

TEST_CASE("tokenizer and patch featurizer") {
  auto a = enc::tokenize("A red  Car", 512, 16);
  auto b = enc::tokenize("a RED car", 512, 16);
  CHECK(a == b);
  CHECK(a.size() == 3);
  for (auto id : a) CHECK((id >= 1 && id < 512));
  CHECK(enc::tokenize("one two three four", 512, 2).size() == 2);
  CHECK(enc::tokenize("   ", 512, 16).empty());

  std::vector<float> rgb(8 * 8 * 3);
  for (std::size_t i = 0; i < rgb.size(); ++i) rgb[i] = float(i);
  auto p = enc::patches_from_rgb(rgb, 8, 4);
  CHECK(p.size() == 4 * 48);
  // Second patch (top-right) starts at pixel (0,4).
  CHECK(p[48] == rgb[(0 * 8 + 4) * 3]);
  // Its second row starts at pixel (1,4).
  CHECK(p[48 + 12] == rgb[(1 * 8 + 4) * 3]);
  CHECK_THROWS_AS(enc::patches_from_rgb(rgb, 8, 3), enc::InputError);
}
