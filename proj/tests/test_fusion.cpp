#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "reddot/fusion.hpp"
#include "reddot/rng.hpp"

using namespace reddot;
using namespace reddot::fusion;

namespace {

VectorF random_vector(Rng& rng, int dim) {
  VectorF v(dim);
  for (int i = 0; i < dim; ++i) v[i] = static_cast<float>(rng.normal());
  return v;
}

}  // namespace

TEST_CASE("equal inputs collapse to the symmetric pattern") {
  Rng rng(1);
  VectorF v = random_vector(rng, 6);
  MatrixF tokens = fuse<float>(v, v, FusionConfig::full());
  REQUIRE(tokens.rows() == 5);
  CHECK(tokens.row(0) == v.transpose());
  CHECK(tokens.row(1) == v.transpose());
  CHECK(tokens.row(2) == (2.0f * v).transpose());
  CHECK(tokens.row(3) == VectorF::Zero(6).transpose());
  CHECK(tokens.row(4) == v.cwiseProduct(v).transpose());
}

TEST_CASE("zero text is absorbing for mul, identity for add/sub") {
  Rng rng(2);
  VectorF img = random_vector(rng, 4);
  VectorF zero = VectorF::Zero(4);
  MatrixF tokens = fuse<float>(img, zero, FusionConfig::full());
  CHECK(tokens.row(0) == img.transpose());
  CHECK(tokens.row(1) == zero.transpose());
  CHECK(tokens.row(2) == img.transpose());
  CHECK(tokens.row(3) == img.transpose());
  CHECK(tokens.row(4) == zero.transpose());
}

TEST_CASE("hand arithmetic oracle") {
  VectorF img(2), txt(2);
  img << 1, 2;
  txt << 3, -1;
  MatrixF tokens = fuse<float>(img, txt, FusionConfig::full());
  MatrixF expected(5, 2);
  expected << 1, 2, 3, -1, 4, 1, -2, 3, 3, -2;
  CHECK(tokens == expected);
}

TEST_CASE("all five tokens exact against elementwise loops, 1000 random pairs") {
  Rng rng(3);
  for (int trial = 0; trial < 1000; ++trial) {
    const int dim = 1 + static_cast<int>(rng.below(16));
    VectorF img = random_vector(rng, dim);
    VectorF txt = random_vector(rng, dim);
    MatrixF tokens = fuse<float>(img, txt, FusionConfig::full());
    REQUIRE(tokens.rows() == 5);
    for (int i = 0; i < dim; ++i) {
      REQUIRE(tokens(0, i) == img[i]);
      REQUIRE(tokens(1, i) == txt[i]);
      REQUIRE(tokens(2, i) == img[i] + txt[i]);
      REQUIRE(tokens(3, i) == img[i] - txt[i]);
      REQUIRE(tokens(4, i) == img[i] * txt[i]);
    }
  }
}

TEST_CASE("ablation configs emit the documented subsets in order") {
  CHECK(FusionConfig::full().names() ==
        std::vector<std::string>{"image", "text", "add", "sub", "mul"});
  CHECK(FusionConfig::concat_only().names() == std::vector<std::string>{"image", "text"});
  CHECK(FusionConfig::full_without(FusionOp::sub).names() ==
        std::vector<std::string>{"image", "text", "add", "mul"});
  CHECK(FusionConfig::full_without(FusionOp::add).names() ==
        std::vector<std::string>{"image", "text", "sub", "mul"});
  CHECK(FusionConfig::full_without(FusionOp::mul).names() ==
        std::vector<std::string>{"image", "text", "add", "sub"});

  Rng rng(4);
  VectorF img = random_vector(rng, 3), txt = random_vector(rng, 3);
  MatrixF full = fuse<float>(img, txt, FusionConfig::full());
  MatrixF no_sub = fuse<float>(img, txt, FusionConfig::full_without(FusionOp::sub));
  REQUIRE(no_sub.rows() == 4);
  CHECK(no_sub.row(0) == full.row(0));
  CHECK(no_sub.row(1) == full.row(1));
  CHECK(no_sub.row(2) == full.row(2));
  CHECK(no_sub.row(3) == full.row(4));

  MatrixF concat = fuse<float>(img, txt, FusionConfig::concat_only());
  CHECK(concat.row(0) == img.transpose());
  CHECK(concat.row(1) == txt.transpose());
}

TEST_CASE("algebraic properties of the derived tokens") {
  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    VectorF a = random_vector(rng, 8), b = random_vector(rng, 8);
    MatrixF ab = fuse<float>(a, b, FusionConfig::full());
    MatrixF ba = fuse<float>(b, a, FusionConfig::full());
    // mul symmetric, sub antisymmetric
    CHECK(ab.row(4) == ba.row(4));
    CHECK(ab.row(3) == (-ba.row(3)));
    // add token is homogeneous of degree 1
    const float alpha = 2.5f;
    MatrixF scaled = fuse<float>((alpha * a).eval(), (alpha * b).eval(), FusionConfig::full());
    CHECK((scaled.row(2) - alpha * ab.row(2)).cwiseAbs().maxCoeff() <= 1e-5f);
  }
}

TEST_CASE("config and input validation") {
  CHECK_THROWS_AS(FusionConfig{{FusionOp::image}}.validate(), ConfigError);
  CHECK_THROWS_AS(FusionConfig({{FusionOp::add, FusionOp::sub}}).validate(), ConfigError);
  CHECK_THROWS_AS(FusionConfig({{FusionOp::image, FusionOp::image, FusionOp::text}}).validate(),
                  ConfigError);
  CHECK_THROWS_AS(FusionConfig::from_names({"image", "text", "outer"}), ConfigError);
  CHECK(FusionConfig::from_names({"image", "text", "mul"}).token_count() == 3);

  VectorF a(3), b(4);
  a.setZero();
  b.setZero();
  CHECK_THROWS_AS(fuse<float>(a, b, FusionConfig::full()), DataError);
}
