#include <doctest.h>

#include <cmath>
#include <random>

#include "motis/autodiff.hpp"
#include "support/gradcheck.hpp"

using namespace motis;
using ad::Tensor;
using ad::Tensor64;
using testing::GradInput;
using testing::gradcheck_rel_error;
using testing::random_input;
using testing::weighted_sum;

namespace {
constexpr double kFdTol = 1e-6;
constexpr int kSeeds = 20;
}  // namespace

TEST_CASE("matmul examples") {
  auto a = Tensor::from({2, 2}, {1, 2, 3, 4});
  auto eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  auto c = ad::matmul(a, eye);
  CHECK(std::vector<float>(c.data().begin(), c.data().end()) == std::vector<float>{1, 2, 3, 4});

  auto b = Tensor::from({2, 1}, {2, 3});
  auto d = ad::matmul(eye, b);
  CHECK(d.shape() == ad::Shape{2, 1});
  CHECK(d.at(0) == 2);
  CHECK(d.at(1) == 3);

  auto bad = Tensor::from({3, 1}, {1, 2, 3});
  try {
    ad::matmul(a, bad);
    FAIL("expected dimension error");
  } catch (const ad::DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2x2]") != std::string::npos);
    CHECK(msg.find("[3x1]") != std::string::npos);
  }
}

TEST_CASE("matmul gradient of sum vs finite differences") {
  for (int s = 0; s < kSeeds; ++s) {
    std::mt19937_64 rng(s);
    auto err = gradcheck_rel_error(
        [](const std::vector<Tensor64>& x) { return ad::sum(ad::matmul(x[0], x[1])); },
        {random_input({3, 4}, rng), random_input({4, 2}, rng)});
    CHECK(err < kFdTol);
  }
}

TEST_CASE("matmul_nt and transpose gradients") {
  for (int s = 0; s < kSeeds; ++s) {
    std::mt19937_64 rng(100 + s);
    CHECK(gradcheck_rel_error(
              [](const std::vector<Tensor64>& x) { return weighted_sum(ad::matmul_nt(x[0], x[1])); },
              {random_input({3, 5}, rng), random_input({4, 5}, rng)}) < kFdTol);
    CHECK(gradcheck_rel_error([](const std::vector<Tensor64>& x) { return weighted_sum(ad::transpose(x[0])); },
                              {random_input({3, 5}, rng)}) < kFdTol);
  }
}

TEST_CASE("l2_normalize_rows") {
  auto y = ad::l2_normalize_rows(Tensor::from({1, 2}, {3, 4}));
  CHECK(y.at(0) == doctest::Approx(0.6f));
  CHECK(y.at(1) == doctest::Approx(0.8f));

  auto unit = Tensor::from({1, 3}, {0, 1, 0});
  auto u2 = ad::l2_normalize_rows(unit);
  CHECK(std::vector<float>(u2.data().begin(), u2.data().end()) == std::vector<float>{0, 1, 0});

  CHECK_THROWS_AS(ad::l2_normalize_rows(Tensor::from({2, 2}, {1, 1, 0, 0})), ad::DegenerateInputError);

  std::mt19937_64 rng(3);
  auto x = random_input({6, 9}, rng);
  auto n = ad::l2_normalize_rows(Tensor::from(x.shape, std::vector<float>(x.values.begin(), x.values.end())));
  for (std::size_t r = 0; r < 6; ++r) {
    double ss = 0;
    for (std::size_t c = 0; c < 9; ++c) ss += double(n.at(r, c)) * n.at(r, c);
    CHECK(std::abs(std::sqrt(ss) - 1.0) < 1e-5);
  }

  for (int s = 0; s < kSeeds; ++s) {
    std::mt19937_64 g(200 + s);
    CHECK(gradcheck_rel_error([](const std::vector<Tensor64>& v) { return weighted_sum(ad::l2_normalize_rows(v[0])); },
                              {random_input({5, 8}, g)}) < kFdTol);
  }
}

TEST_CASE("l2_normalize_rows is idempotent in 64-bit") {
  for (int s = 0; s < kSeeds; ++s) {
    std::mt19937_64 rng(300 + s);
    auto x = random_input({7, 5}, rng, -10, 10);
    auto once = ad::l2_normalize_rows(Tensor64::from(x.shape, x.values));
    auto twice = ad::l2_normalize_rows(once);
    for (std::size_t i = 0; i < once.numel(); ++i) CHECK(std::abs(once.at(i) - twice.at(i)) <= 1e-12);
  }
}

TEST_CASE("log_softmax_rows") {
  auto u = ad::log_softmax_rows(Tensor64::from({1, 2}, {0, 0}));
  CHECK(u.at(0) == doctest::Approx(-std::log(2.0)).epsilon(1e-12));
  CHECK(u.at(1) == doctest::Approx(-std::log(2.0)).epsilon(1e-12));

  auto big = ad::log_softmax_rows(Tensor::from({1, 2}, {1000, 0}));
  CHECK(std::isfinite(big.at(0)));
  CHECK(big.at(0) == doctest::Approx(0.0f));
  CHECK(big.at(1) == doctest::Approx(-1000.0f));

  CHECK_THROWS_AS(ad::log_softmax_rows(Tensor::from({1, 2}, {NAN, 0})), ad::NumericError);
  CHECK_THROWS_AS(ad::log_softmax_rows(Tensor::from({1, 2}, {INFINITY, 0})), ad::NumericError);

  for (int s = 0; s < kSeeds; ++s) {
    std::mt19937_64 rng(400 + s);
    auto x = random_input({4, 6}, rng, -1000, 1000);
    auto y = ad::log_softmax_rows(Tensor64::from(x.shape, x.values));
    for (std::size_t r = 0; r < 4; ++r) {
      double es = 0;
      for (std::size_t c = 0; c < 6; ++c) es += std::exp(y.at(r, c));
      CHECK(std::abs(es - 1.0) <= 1e-6);
    }
    std::mt19937_64 g(450 + s);
    CHECK(gradcheck_rel_error([](const std::vector<Tensor64>& v) { return weighted_sum(ad::log_softmax_rows(v[0])); },
                              {random_input({4, 6}, g, -3, 3)}) < kFdTol);
  }
}

TEST_CASE("layer_norm") {
  auto g = Tensor::filled({4}, 1.0f);
  auto b = Tensor::zeros({4});
  auto y = ad::layer_norm(Tensor::from({1, 4}, {2, 2, 2, 2}), g, b);
  for (std::size_t i = 0; i < 4; ++i) CHECK(y.at(i) == 0.0f);

  auto y2 = ad::layer_norm(Tensor64::from({1, 2}, {-1, 1}), Tensor64::filled({2}, 1.0), Tensor64::zeros({2}));
  // variance 1 plus epsilon 1e-5 inside the square root
  CHECK(y2.at(0) == doctest::Approx(-1.0 / std::sqrt(1.0 + 1e-5)).epsilon(1e-12));
  CHECK(y2.at(1) == doctest::Approx(1.0 / std::sqrt(1.0 + 1e-5)).epsilon(1e-12));
  CHECK(y2.at(1) == doctest::Approx(1.0).epsilon(1e-5));

  CHECK_THROWS_AS(ad::layer_norm(Tensor::from({2, 1}, {1, 2}), Tensor::filled({1}, 1.0f), Tensor::zeros({1})),
                  ad::DimensionError);

  for (int s = 0; s < kSeeds; ++s) {
    std::mt19937_64 rng(500 + s);
    CHECK(gradcheck_rel_error(
              [](const std::vector<Tensor64>& v) { return weighted_sum(ad::layer_norm(v[0], v[1], v[2])); },
              {random_input({3, 5}, rng), random_input({5}, rng), random_input({5}, rng)}) < kFdTol);
  }
}

TEST_CASE("elementwise suite") {
  auto z = ad::gelu(Tensor64::from({1, 1}, {0.0}));
  CHECK(z.at(0) == 0.0);
  // tanh-approximation reference value at x = 1
  auto one = ad::gelu(Tensor64::from({1, 1}, {1.0}));
  CHECK(one.at(0) == doctest::Approx(0.5 * (1 + std::tanh(std::sqrt(2 / M_PI) * (1 + 0.044715)))).epsilon(1e-14));

  auto a = Tensor::from({2, 2}, {1, 2, 3, 4});
  auto s = ad::add(a, Tensor::zeros({2, 2}));
  CHECK(std::vector<float>(s.data().begin(), s.data().end()) == std::vector<float>{1, 2, 3, 4});

  for (int seed = 0; seed < kSeeds; ++seed) {
    std::mt19937_64 rng(600 + seed);
    using V = std::vector<Tensor64>;
    CHECK(gradcheck_rel_error([](const V& v) { return weighted_sum(ad::add(v[0], v[1])); },
                              {random_input({3, 4}, rng), random_input({3, 4}, rng)}) < kFdTol);
    CHECK(gradcheck_rel_error([](const V& v) { return weighted_sum(ad::sub(v[0], v[1])); },
                              {random_input({3, 4}, rng), random_input({3, 4}, rng)}) < kFdTol);
    CHECK(gradcheck_rel_error([](const V& v) { return weighted_sum(ad::mul(v[0], v[1])); },
                              {random_input({3, 4}, rng), random_input({3, 4}, rng)}) < kFdTol);
    CHECK(gradcheck_rel_error([](const V& v) { return weighted_sum(ad::add_row_vector(v[0], v[1])); },
                              {random_input({3, 4}, rng), random_input({4}, rng)}) < kFdTol);
    CHECK(gradcheck_rel_error([](const V& v) { return weighted_sum(ad::scale(v[0], 2.5)); },
                              {random_input({3, 4}, rng)}) < kFdTol);
    CHECK(gradcheck_rel_error([](const V& v) { return weighted_sum(ad::scale_by(v[0], v[1])); },
                              {random_input({3, 4}, rng), random_input({1}, rng)}) < kFdTol);
    CHECK(gradcheck_rel_error([](const V& v) { return weighted_sum(ad::exp(v[0])); },
                              {random_input({3, 4}, rng)}) < kFdTol);
    CHECK(gradcheck_rel_error([](const V& v) { return weighted_sum(ad::square(v[0])); },
                              {random_input({3, 4}, rng)}) < kFdTol);
    CHECK(gradcheck_rel_error([](const V& v) { return weighted_sum(ad::gelu(v[0])); },
                              {random_input({3, 4}, rng, -3, 3)}) < kFdTol);
    CHECK(gradcheck_rel_error([](const V& v) { return weighted_sum(ad::mean_rows(v[0])); },
                              {random_input({5, 3}, rng)}) < kFdTol);
    CHECK(gradcheck_rel_error([](const V& v) { return ad::mean(ad::square(v[0])); },
                              {random_input({5, 3}, rng)}) < kFdTol);
    CHECK(gradcheck_rel_error([](const V& v) { return weighted_sum(ad::concat_rows<double>({v[0], v[1]})); },
                              {random_input({2, 3}, rng), random_input({4, 3}, rng)}) < kFdTol);
    const std::vector<std::uint32_t> ids{3, 0, 3, 1};
    CHECK(gradcheck_rel_error([&](const V& v) { return weighted_sum(ad::embedding_lookup<double>(v[0], ids)); },
                              {random_input({5, 3}, rng)}) < kFdTol);
    const std::vector<std::size_t> rows{2, 0, 2};
    CHECK(gradcheck_rel_error([&](const V& v) { return weighted_sum(ad::gather_rows<double>(v[0], rows)); },
                              {random_input({4, 3}, rng)}) < kFdTol);
    const std::vector<std::size_t> cols{1, 0, 2};
    CHECK(gradcheck_rel_error([&](const V& v) { return weighted_sum(ad::pick_per_row<double>(v[0], cols)); },
                              {random_input({3, 4}, rng)}) < kFdTol);
    const std::vector<std::size_t> idx{0, 3, 1, 1, 2, 0};
    CHECK(gradcheck_rel_error([&](const V& v) { return weighted_sum(ad::gather_per_row<double>(v[0], idx, 2)); },
                              {random_input({3, 4}, rng)}) < kFdTol);
    CHECK(gradcheck_rel_error([](const V& v) { return weighted_sum(ad::add_positional(v[0], v[1], 3)); },
                              {random_input({6, 4}, rng), random_input({5, 4}, rng)}) < kFdTol);
    CHECK(gradcheck_rel_error([](const V& v) { return weighted_sum(ad::prepend_token(v[0], v[1], 2, 3)); },
                              {random_input({6, 4}, rng), random_input({1, 4}, rng)}) < kFdTol);
    const std::vector<std::uint8_t> mask{1, 1, 0, 1, 0, 0};
    CHECK(gradcheck_rel_error([&](const V& v) { return weighted_sum(ad::masked_mean_pool<double>(v[0], 2, 3, mask)); },
                              {random_input({6, 4}, rng)}) < kFdTol);
  }
}

TEST_CASE("masked_mean_pool ignores padding") {
  auto x = Tensor64::from({4, 2}, {1, 2, 100, 100, 3, 4, 5, 6});
  const std::vector<std::uint8_t> mask{1, 0, 1, 1};
  auto y = ad::masked_mean_pool<double>(x, 2, 2, mask);
  CHECK(y.at(0, 0) == 1);
  CHECK(y.at(0, 1) == 2);
  CHECK(y.at(1, 0) == 4);
  CHECK(y.at(1, 1) == 5);
  const std::vector<std::uint8_t> dead{0, 0, 1, 1};
  CHECK_THROWS_AS(ad::masked_mean_pool<double>(x, 2, 2, dead), ad::DegenerateInputError);
}

TEST_CASE("self_attention gradients, with and without key mask") {
  for (int s = 0; s < kSeeds; ++s) {
    std::mt19937_64 rng(700 + s);
    const std::vector<std::uint8_t> mask{1, 1, 0, 1, 1, 1};
    CHECK(gradcheck_rel_error(
              [&](const std::vector<Tensor64>& v) { return weighted_sum(ad::self_attention<double>(v[0], 2, 3, 2, mask)); },
              {random_input({6, 12}, rng)}) < kFdTol);
    CHECK(gradcheck_rel_error(
              [&](const std::vector<Tensor64>& v) { return weighted_sum(ad::self_attention<double>(v[0], 2, 3, 1, {})); },
              {random_input({6, 6}, rng)}) < kFdTol);
  }
}

TEST_CASE("self_attention never attends to masked keys") {
  // One sample, two positions; second position masked. Output of every query
  // must equal V of the first position regardless of the masked V values.
  std::vector<double> qkv{0.3, -0.2, 0.5, 0.1, 1.0, 2.0,  //
                          0.7, 0.4, -0.9, 0.8, 50.0, -50.0};
  const std::vector<std::uint8_t> mask{1, 0};
  auto y = ad::self_attention<double>(Tensor64::from({2, 6}, qkv), 1, 2, 1, mask);
  CHECK(y.at(0, 0) == doctest::Approx(1.0));
  CHECK(y.at(0, 1) == doctest::Approx(2.0));
  CHECK(y.at(1, 0) == doctest::Approx(1.0));
}

TEST_CASE("backward examples") {
  auto x = Tensor64::from({2, 3}, {1, 2, 3, 4, 5, 6}, true);
  ad::backward(ad::sum(x));
  for (double g : x.grad()) CHECK(g == 1.0);

  auto s = Tensor64::scalar(3.0, true);
  ad::backward(ad::mul(s, s));
  CHECK(s.grad()[0] == doctest::Approx(6.0));

  CHECK_THROWS_AS(ad::backward(ad::mul(x, x)), ad::UsageError);
}

TEST_CASE("backward rejects a second pass over the same graph") {
  auto x = Tensor64::from({2}, {1, 2}, true);
  auto y = ad::sum(ad::square(x));
  ad::backward(y);
  CHECK_THROWS_AS(ad::backward(y), ad::UsageError);
  // a fresh forward is fine
  ad::backward(ad::sum(ad::square(x)));
  CHECK(x.grad()[0] == doctest::Approx(4.0));
}

TEST_CASE("replay order is the exact reverse of recording") {
  auto x = Tensor64::from({2, 2}, {1, 2, 3, 4}, true);
  auto a = ad::square(x);
  auto b = ad::exp(x);
  auto c = ad::add(a, b);
  auto d = ad::sum(c);
  auto order = ad::topological_replay_order(d);
  REQUIRE(order.size() == 5);
  CHECK(order[0] == d.node().get());
  CHECK(order[1] == c.node().get());
  CHECK(order[2] == b.node().get());
  CHECK(order[3] == a.node().get());
  CHECK(order[4] == x.node().get());
}

TEST_CASE("every requires-grad tensor has a grad after backward") {
  auto x = Tensor64::from({2, 2}, {1, 2, 3, 4}, true);
  auto unused_branch = Tensor64::from({2, 2}, {1, 1, 1, 1}, true);
  auto mid = ad::mul(x, unused_branch);
  auto y = ad::sum(mid);
  ad::backward(y);
  CHECK(x.has_grad());
  CHECK(unused_branch.has_grad());
  CHECK(mid.has_grad());
  CHECK(mid.grad().size() == mid.numel());
}

TEST_CASE("composite matmul -> layer_norm -> l2_normalize -> log_softmax vs finite differences") {
  for (int s = 0; s < kSeeds; ++s) {
    std::mt19937_64 rng(800 + s);
    auto err = gradcheck_rel_error(
        [](const std::vector<Tensor64>& v) {
          auto h = ad::matmul(v[0], v[1]);
          auto n = ad::layer_norm(h, v[2], v[3]);
          auto u = ad::l2_normalize_rows(n);
          auto logits = ad::scale(ad::matmul_nt(u, u), 5.0);
          return weighted_sum(ad::log_softmax_rows(logits));
        },
        {random_input({4, 3}, rng), random_input({3, 6}, rng), random_input({6}, rng, 0.5, 1.5),
         random_input({6}, rng)});
    CHECK(err < 1e-5);
  }
}

TEST_CASE("forward is deterministic") {
  std::mt19937_64 rng(5);
  auto a = random_input({8, 16}, rng);
  auto b = random_input({16, 8}, rng);
  auto run = [&] {
    auto x = Tensor::from(a.shape, std::vector<float>(a.values.begin(), a.values.end()));
    auto y = Tensor::from(b.shape, std::vector<float>(b.values.begin(), b.values.end()));
    auto out = ad::log_softmax_rows(ad::matmul(x, y));
    return std::vector<float>(out.data().begin(), out.data().end());
  };
  CHECK(run() == run());
}
