#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "pelta/rng.hpp"
#include "pelta/tensor.hpp"
#include "testutil.hpp"

using namespace pelta;
using namespace pelta::testing;

namespace {
std::string read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}
}  // namespace

TEST_CASE("tensor invariants") {
  CHECK_THROWS_AS(Tensor(Shape{2, 3}, std::vector<Scalar>{1, 2}), ShapeError);
  CHECK_THROWS_AS(Tensor(Shape{2, 0}), ShapeError);
  CHECK_THROWS_AS(Tensor(Shape{2}, {1.0, std::nan("")}), Error);
  CHECK_THROWS_AS(Tensor(Shape{1}, {std::numeric_limits<Scalar>::infinity()}), Error);
  Tensor t(Shape{2, 3}, 1.5);
  CHECK(t.numel() == 6);
  CHECK(t.rank() == 2);
}

TEST_CASE("matmul identity") {
  Tensor eye(Shape{2, 2}, {1, 0, 0, 1});
  Tensor a(Shape{2, 2}, {1, 2, 3, 4});
  CHECK(matmul(eye, a) == a);
}

TEST_CASE("matmul 1x1 dot product") {
  Tensor a(Shape{1, 2}, {1, 2});
  Tensor b(Shape{2, 1}, {3, 4});
  const Tensor c = matmul(a, b);
  CHECK(c.shape() == Shape{1, 1});
  CHECK(c[0] == doctest::Approx(11.0));
}

TEST_CASE("matmul against triple-loop oracle") {
  Rng rng(11);
  const Tensor a = random_tensor({3, 4}, rng);
  const Tensor b = random_tensor({4, 2}, rng);
  CHECK(tensors_close(matmul(a, b), naive_matmul(a, b)));
}

TEST_CASE("matmul shape mismatch") {
  Tensor a(Shape{2, 3}), b(Shape{2, 3});
  CHECK_THROWS_AS(matmul(a, b), ShapeError);
}

TEST_CASE("conv2d all-ones") {
  Tensor x(Shape{1, 2, 2}, 1.0);
  Tensor w(Shape{1, 1, 2, 2}, 1.0);
  const Tensor y = conv2d(x, w, 1);
  CHECK(y.shape() == Shape{1, 1, 1});
  CHECK(y[0] == doctest::Approx(4.0));
}

TEST_CASE("conv2d ramp against sliding-window oracle") {
  Tensor x(Shape{1, 3, 3}, {0, 1, 2, 3, 4, 5, 6, 7, 8});
  Tensor w(Shape{1, 1, 2, 2}, {1, 1, 1, 1});
  const Tensor y = conv2d(x, w, 1);
  CHECK(y.shape() == Shape{1, 2, 2});
  CHECK(tensors_close(y, naive_conv2d(x, w, 1)));
  CHECK(y.at(0, 0, 0) == doctest::Approx(0 + 1 + 3 + 4));
}

TEST_CASE("conv2d stride-2 output shape") {
  Tensor x(Shape{1, 4, 4});
  Tensor w(Shape{1, 1, 2, 2});
  CHECK(conv2d(x, w, 2).shape() == Shape{1, 2, 2});
}

TEST_CASE("conv2d kernel too large") {
  Tensor x(Shape{1, 2, 2});
  Tensor w(Shape{1, 1, 3, 3});
  CHECK_THROWS_AS(conv2d(x, w, 1), ShapeError);
}

TEST_CASE("maxpool constant input") {
  Tensor x(Shape{1, 4, 4}, 2.5);
  const auto r = maxpool2d(x, 2, 2);
  for (Scalar v : r.values.data()) CHECK(v == doctest::Approx(2.5));
}

TEST_CASE("maxpool single window argmax") {
  Tensor x(Shape{1, 2, 2}, {1, 2, 3, 4});
  const auto r = maxpool2d(x, 2, 2);
  CHECK(r.values.numel() == 1);
  CHECK(r.values[0] == doctest::Approx(4.0));
  CHECK(r.argmax[0] == 3);  // flat index of (1,1)
}

TEST_CASE("maxpool tie breaks to first row-major index") {
  Tensor x(Shape{1, 2, 2}, {7, 7, 7, 7});
  const auto r = maxpool2d(x, 2, 2);
  CHECK(r.argmax[0] == 0);
}

TEST_CASE("maxpool against window-scan oracle") {
  Rng rng(13);
  const Tensor x = random_tensor({1, 4, 4}, rng);
  const auto r = maxpool2d(x, 2, 2);
  CHECK(tensors_close(r.values, naive_maxpool(x, 2, 2)));
}

TEST_CASE("maxpool window exceeds input") {
  Tensor x(Shape{1, 2, 2});
  CHECK_THROWS_AS(maxpool2d(x, 3, 1), ShapeError);
}

TEST_CASE("softmax_ce uniform logits gives ln(classes)") {
  for (std::size_t classes : {2u, 5u, 9u}) {
    Tensor logits(Shape{classes}, 0.7);
    CHECK(softmax_cross_entropy(logits, 0) == doctest::Approx(std::log((double)classes)));
  }
}

TEST_CASE("softmax_ce large logits stay finite") {
  Tensor logits(Shape{2}, {1000.0, 0.0});
  const Scalar loss = softmax_cross_entropy(logits, 0);
  CHECK(std::isfinite(loss));
  CHECK(loss == doctest::Approx(0.0).epsilon(1e-6));
}

TEST_CASE("softmax_ce matches naive formula on small magnitudes") {
  Rng rng(17);
  for (int t = 0; t < 20; ++t) {
    const Tensor logits = random_tensor({5}, rng, -2.0, 2.0);
    const std::size_t label = static_cast<std::size_t>(rng.uniform_int(0, 4));
    CHECK(close(softmax_cross_entropy(logits, label), naive_softmax_ce(logits, label), 1e-6,
                1e-9));
  }
}

TEST_CASE("softmax_ce errors") {
  Tensor one(Shape{1});
  CHECK_THROWS_AS(softmax_cross_entropy(one, 0), Error);
  Tensor two(Shape{2});
  CHECK_THROWS_AS(softmax_cross_entropy(two, 2), Error);
}

TEST_CASE("softmax_ce shift invariance") {
  Rng rng(19);
  for (int t = 0; t < 10; ++t) {
    const Tensor logits = random_tensor({4}, rng, -3.0, 3.0);
    const Scalar c = rng.uniform(-50.0, 50.0);
    Tensor shifted = logits;
    for (Scalar& v : shifted.data()) v += c;
    const std::size_t label = static_cast<std::size_t>(rng.uniform_int(0, 3));
    CHECK(close(softmax_cross_entropy(logits, label), softmax_cross_entropy(shifted, label),
                1e-9, 1e-9));
  }
}

TEST_CASE("conv and pool shape formulas across geometries") {
  for (std::size_t H = 1; H <= 8; ++H)
    for (std::size_t k = 1; k <= H; ++k)
      for (std::size_t stride = 1; stride <= 3; ++stride) {
        Tensor x(Shape{1, H, H});
        Tensor w(Shape{1, 1, k, k});
        const std::size_t expect = (H - k) / stride + 1;
        CHECK(conv2d(x, w, stride).shape() == Shape{1, expect, expect});
        CHECK(maxpool2d(x, k, stride).values.shape() == Shape{1, expect, expect});
      }
}

TEST_CASE("transposed conv broadcast case") {
  Tensor adj(Shape{1, 1, 1}, {3.25});
  Tensor kernel(Shape{1, 1, 2, 2}, 1.0);
  const Tensor y = transposed_conv2d(adj, kernel, 2);
  CHECK(y.shape() == Shape{1, 2, 2});
  for (Scalar v : y.data()) CHECK(v == doctest::Approx(3.25));
}

TEST_CASE("transposed conv against gather oracle") {
  Rng rng(23);
  const Tensor adj = random_tensor({1, 2, 2}, rng);
  const Tensor kernel = random_tensor({1, 1, 2, 2}, rng);
  const Tensor y = transposed_conv2d(adj, kernel, 2);
  CHECK(y.shape() == Shape{1, 4, 4});
  CHECK(tensors_close(y, naive_transposed_conv(adj, kernel, 2)));

  // overlapping stride as well
  const Tensor adj2 = random_tensor({2, 3, 3}, rng);
  const Tensor kernel2 = random_tensor({2, 1, 3, 3}, rng);
  CHECK(tensors_close(transposed_conv2d(adj2, kernel2, 1),
                      naive_transposed_conv(adj2, kernel2, 1)));
}

TEST_CASE("ops match naive references on random inputs") {
  Rng rng(29);
  for (int t = 0; t < 10; ++t) {
    const std::size_t m = static_cast<std::size_t>(rng.uniform_int(1, 6));
    const std::size_t k = static_cast<std::size_t>(rng.uniform_int(1, 6));
    const std::size_t p = static_cast<std::size_t>(rng.uniform_int(1, 6));
    const Tensor a = random_tensor({m, k}, rng);
    const Tensor b = random_tensor({k, p}, rng);
    CHECK(tensors_close(matmul(a, b), naive_matmul(a, b)));

    const std::size_t H = static_cast<std::size_t>(rng.uniform_int(2, 6));
    const std::size_t kk = static_cast<std::size_t>(rng.uniform_int(1, H));
    const Tensor x = random_tensor({2, H, H}, rng);
    const Tensor w = random_tensor({2, 2, kk, kk}, rng);
    CHECK(tensors_close(conv2d(x, w, 1), naive_conv2d(x, w, 1)));
    CHECK(tensors_close(maxpool2d(x, kk, 1).values, naive_maxpool(x, kk, 1)));
  }
}

TEST_CASE("binary container round trip") {
  const std::string path = (std::filesystem::temp_directory_path() / "pelta_t.pelt").string();
  Rng rng(31);
  for (int t = 0; t < 5; ++t) {
    Tensor x = random_tensor({2, 3, 2}, rng);
    // container payload is f32; store f32-representable values
    for (Scalar& v : x.data()) v = static_cast<float>(v);
    save_tensor(path, x);
    const Tensor y = load_tensor(path);
    CHECK(y == x);
  }
  std::filesystem::remove(path);
}

TEST_CASE("container rejects foreign data") {
  const std::string path = (std::filesystem::temp_directory_path() / "pelta_bad.pelt").string();
  {
    std::ofstream f(path, std::ios::binary);
    f << "not a tensor at all";
  }
  CHECK_THROWS_AS(load_tensor(path), Error);
  std::filesystem::remove(path);
}

TEST_CASE("container layout is bit-exact") {
  const std::string path = (std::filesystem::temp_directory_path() / "pelta_fmt.pelt").string();
  save_tensor(path, Tensor(Shape{2}, {1.0, -2.0}));
  const std::string raw = read_file_bytes(path);
  REQUIRE(raw.size() == 4 + 1 + 4 + 4 + 8);
  CHECK(raw.substr(0, 4) == "PELT");
  CHECK(raw[4] == 1);                      // version
  CHECK(static_cast<unsigned char>(raw[5]) == 1);  // rank u32 LE
  CHECK(static_cast<unsigned char>(raw[9]) == 2);  // extent u32 LE
  // 1.0f little-endian
  CHECK(static_cast<unsigned char>(raw[13]) == 0x00);
  CHECK(static_cast<unsigned char>(raw[16]) == 0x3f);
  std::filesystem::remove(path);
}
