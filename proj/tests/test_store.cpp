#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <set>

#include "reddot/retrieval.hpp"
#include "reddot/rng.hpp"
#include "reddot/store.hpp"
#include "test_util.hpp"

using namespace reddot;
using namespace reddot::store;
using testutil::TempDir;

namespace {

EmbeddingMatrix random_matrix(Rng& rng, Role role, int n, int dim, const std::string& prefix) {
  MatrixF rows(n, dim);
  for (Eigen::Index i = 0; i < rows.size(); ++i) {
    rows.data()[i] = static_cast<float>(rng.normal());
  }
  std::vector<std::string> ids(n);
  for (int i = 0; i < n; ++i) ids[i] = prefix + std::to_string(i);
  return EmbeddingMatrix(role, std::move(rows), std::move(ids));
}

}  // namespace

TEST_CASE("embedding file round-trips exact rows") {
  TempDir dir("rede");
  MatrixF rows(2, 4);
  rows << 1, 0, 0, 0, 0, 1, 0, 0;
  EmbeddingMatrix m(Role::text_claim, rows, {"a", "b"});
  const auto path = dir.path() / "m.rede";
  save_embeddings(m, path);
  EmbeddingMatrix loaded = load_embeddings(path, Role::text_claim);
  CHECK(loaded.dim() == 4);
  CHECK(loaded.size() == 2);
  CHECK(loaded.rows() == rows);
  CHECK(loaded.ids() == std::vector<std::string>{"a", "b"});
}

TEST_CASE("empty matrix keeps its dim through the file") {
  TempDir dir("rede");
  EmbeddingMatrix empty(Role::image_claim, MatrixF(0, 7), {});
  const auto path = dir.path() / "empty.rede";
  save_embeddings(empty, path);
  EmbeddingMatrix loaded = load_embeddings(path, Role::image_claim);
  CHECK(loaded.size() == 0);
  CHECK(loaded.dim() == 7);
}

TEST_CASE("file size is header plus 4 bytes per value") {
  TempDir dir("rede");
  EmbeddingMatrix m(Role::text_evidence, MatrixF::Zero(1, 4), {"z"});
  const auto path = dir.path() / "z.rede";
  save_embeddings(m, path);
  // magic(4) + version(2) + role(1) + dim(4) + N(8) + id "z\0"(2) + payload(16)
  CHECK(std::filesystem::file_size(path) == 4 + 2 + 1 + 4 + 8 + 2 + 16);

  Rng rng(7);
  EmbeddingMatrix big = random_matrix(rng, Role::image_evidence, 3, 512, "r");
  const auto big_path = dir.path() / "big.rede";
  save_embeddings(big, big_path);
  size_t header = 4 + 2 + 1 + 4 + 8;
  for (const auto& id : big.ids()) header += id.size() + 1;
  CHECK(std::filesystem::file_size(big_path) == header + 3 * 512 * 4);
}

TEST_CASE("round-trip is byte-identical over random matrices") {
  TempDir dir("rede");
  Rng rng(123);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = static_cast<int>(rng.below(20));
    const int dim = 1 + static_cast<int>(rng.below(32));
    EmbeddingMatrix m = random_matrix(rng, Role::text_evidence, n, dim, "t");
    const auto first = dir.path() / "first.rede";
    const auto second = dir.path() / "second.rede";
    save_embeddings(m, first);
    save_embeddings(load_embeddings(first, Role::text_evidence), second);
    REQUIRE(testutil::read_file_bytes(first) == testutil::read_file_bytes(second));
  }
}

TEST_CASE("malformed containers are rejected") {
  TempDir dir("rede");
  const auto path = dir.path() / "bad.rede";

  SUBCASE("bad magic") {
    testutil::write_file_bytes(path, "NOPE rest of file");
    CHECK_THROWS_AS(load_embeddings(path, Role::text_claim), FormatError);
  }
  SUBCASE("truncated payload") {
    EmbeddingMatrix m(Role::text_claim, MatrixF::Zero(2, 8), {"a", "b"});
    save_embeddings(m, path);
    std::string bytes = testutil::read_file_bytes(path);
    testutil::write_file_bytes(path, bytes.substr(0, bytes.size() - 5));
    CHECK_THROWS_AS(load_embeddings(path, Role::text_claim), FormatError);
  }
  SUBCASE("role mismatch") {
    EmbeddingMatrix m(Role::text_claim, MatrixF::Zero(1, 2), {"a"});
    save_embeddings(m, path);
    CHECK_THROWS_AS(load_embeddings(path, Role::image_claim), FormatError);
  }
  SUBCASE("non-finite payload") {
    EmbeddingMatrix m(Role::text_claim, MatrixF::Ones(1, 2), {"a"});
    save_embeddings(m, path);
    std::string bytes = testutil::read_file_bytes(path);
    const float nan = std::numeric_limits<float>::quiet_NaN();
    std::memcpy(bytes.data() + bytes.size() - 4, &nan, 4);
    testutil::write_file_bytes(path, bytes);
    CHECK_THROWS_AS(load_embeddings(path, Role::text_claim), DataError);
  }
}

TEST_CASE("duplicate ids are rejected at construction") {
  CHECK_THROWS_AS(EmbeddingMatrix(Role::text_claim, MatrixF::Zero(2, 3), {"a", "a"}), DataError);
}

TEST_CASE("manifest jsonl round-trip") {
  TempDir dir("manifest");
  DatasetManifest m;
  m.split = Split::train;
  m.dim = 4;
  m.pairs.push_back({"p0", "t0", "i0", 0, {"te0", "te1"}, {"ie0"}});
  m.pairs.push_back({"p1", "t1", "i1", 1, {}, {}});
  const auto path = dir.path() / "train.jsonl";
  save_manifest(m, path);
  DatasetManifest loaded = load_manifest(path, Split::train, 4);
  REQUIRE(loaded.pairs.size() == 2);
  CHECK(loaded.pairs[0].pair_id == "p0");
  CHECK(loaded.pairs[0].candidate_text_evidence == std::vector<std::string>{"te0", "te1"});
  CHECK(loaded.pairs[1].verdict == 1);
  CHECK(loaded.pairs[1].candidate_image_evidence.empty());
}

namespace {

SynthDataset small_valid_dataset() {
  SynthConfig cfg;
  cfg.pairs = 6;
  cfg.dim = 8;
  cfg.sigma = 0.05f;
  return generate_synthetic(cfg, 42);
}

}  // namespace

TEST_CASE("validator accepts a consistent dataset") {
  SynthDataset ds = small_valid_dataset();
  ValidationReport report = validate_dataset(ds.manifest, ds.matrices);
  CHECK(report.usable());
  CHECK(report.errors.empty());
  CHECK(report.warnings.empty());
}

TEST_CASE("validator names the dangling id") {
  SynthDataset ds = small_valid_dataset();
  ds.manifest.pairs[2].image_id = "x9";
  ValidationReport report = validate_dataset(ds.manifest, ds.matrices);
  REQUIRE(report.errors.size() == 1);
  CHECK(report.errors[0].kind == "dangling_id");
  CHECK(report.errors[0].subject == "x9");
  CHECK_FALSE(report.usable());
}

TEST_CASE("validator flags duplicate pair ids") {
  SynthDataset ds = small_valid_dataset();
  ds.manifest.pairs[1].pair_id = ds.manifest.pairs[0].pair_id;
  ValidationReport report = validate_dataset(ds.manifest, ds.matrices);
  REQUIRE_FALSE(report.usable());
  CHECK(report.errors[0].kind == "duplicate_pair_id");
}

TEST_CASE("duplicate pool entries are warnings, not errors") {
  SynthDataset ds = small_valid_dataset();
  auto& pool = ds.manifest.pairs[0].candidate_text_evidence;
  pool.push_back(pool.front());
  ValidationReport report = validate_dataset(ds.manifest, ds.matrices);
  CHECK(report.usable());
  REQUIRE(report.warnings.size() == 1);
  CHECK(report.warnings[0].kind == "duplicate_pool_entry");
}

TEST_CASE("any id mutation produces a non-empty report") {
  SynthDataset ds = small_valid_dataset();
  Rng rng(9);
  for (int trial = 0; trial < 25; ++trial) {
    DatasetManifest mutated = ds.manifest;
    auto& pair = mutated.pairs[rng.below(mutated.pairs.size())];
    switch (rng.below(4)) {
      case 0: pair.text_id += "?"; break;
      case 1: pair.image_id += "?"; break;
      case 2:
        if (pair.candidate_text_evidence.empty()) continue;
        pair.candidate_text_evidence[0] += "?";
        break;
      default:
        if (pair.candidate_image_evidence.empty()) continue;
        pair.candidate_image_evidence[0] += "?";
        break;
    }
    CHECK_FALSE(validate_dataset(mutated, ds.matrices).usable());
  }
}

TEST_CASE("split overlap is an error") {
  SynthDataset a = small_valid_dataset();
  SynthDataset b = small_valid_dataset();
  b.manifest.split = Split::val;
  ValidationReport report = validate_splits({&a.manifest, &b.manifest});
  CHECK_FALSE(report.errors.empty());
  CHECK(report.errors[0].kind == "split_overlap");
}

TEST_CASE("zero-noise truthful pairs copy the image embedding exactly") {
  SynthConfig cfg;
  cfg.pairs = 20;
  cfg.dim = 16;
  cfg.sigma = 0.0f;
  cfg.truthful_fraction = 1.0f;
  SynthDataset ds = generate_synthetic(cfg, 3);
  const auto& texts = ds.matrices.at(Role::text_claim);
  const auto& images = ds.matrices.at(Role::image_claim);
  for (const auto& pair : ds.manifest.pairs) {
    REQUIRE(pair.verdict == 0);
    CHECK(texts.row(pair.text_id) == images.row(pair.image_id));
    // relevant evidence is an exact copy at sigma = 0 too
    CHECK(ds.matrices.at(Role::text_evidence).row(pair.candidate_text_evidence[0]) ==
          texts.row(pair.text_id));
  }
}

TEST_CASE("generator is deterministic given the seed") {
  SynthConfig cfg;
  cfg.pairs = 30;
  cfg.dim = 12;
  SynthDataset a = generate_synthetic(cfg, 11);
  SynthDataset b = generate_synthetic(cfg, 11);
  for (Role role : {Role::text_claim, Role::image_claim, Role::text_evidence,
                    Role::image_evidence}) {
    CHECK(a.matrices.at(role).rows() == b.matrices.at(role).rows());
    CHECK(a.matrices.at(role).ids() == b.matrices.at(role).ids());
  }
  REQUIRE(a.manifest.pairs.size() == b.manifest.pairs.size());
  for (size_t i = 0; i < a.manifest.pairs.size(); ++i) {
    CHECK(a.manifest.pairs[i].pair_id == b.manifest.pairs[i].pair_id);
    CHECK(a.manifest.pairs[i].verdict == b.manifest.pairs[i].verdict);
  }

  SynthDataset c = generate_synthetic(cfg, 12);
  CHECK(a.matrices.at(Role::text_claim).rows() != c.matrices.at(Role::text_claim).rows());
}

TEST_CASE("truthful image-text similarity dominates misinformation pairs") {
  SynthConfig cfg;
  cfg.pairs = 2000;
  cfg.dim = 64;
  cfg.sigma = 0.1f;
  SynthDataset ds = generate_synthetic(cfg, 0);
  const auto& texts = ds.matrices.at(Role::text_claim);
  const auto& images = ds.matrices.at(Role::image_claim);

  std::vector<float> truthful, misinfo;
  for (const auto& pair : ds.manifest.pairs) {
    const float sim =
        retrieval::cosine_similarity(texts.row(pair.text_id), images.row(pair.image_id));
    (pair.verdict == 0 ? truthful : misinfo).push_back(sim);
  }
  REQUIRE(truthful.size() > 100);
  REQUIRE(misinfo.size() > 100);

  size_t wins = 0, total = 0;
  for (float t : truthful) {
    for (float m : misinfo) {
      wins += t > m;
      ++total;
    }
  }
  CHECK(static_cast<double>(wins) / static_cast<double>(total) > 0.99);
}

TEST_CASE("generator rejects invalid configs") {
  SynthConfig cfg;
  cfg.pairs = 0;
  cfg.dim = 8;
  CHECK_THROWS_AS(generate_synthetic(cfg, 0), ConfigError);
  cfg.pairs = 4;
  cfg.sigma = -0.1f;
  CHECK_THROWS_AS(generate_synthetic(cfg, 0), ConfigError);
}

TEST_CASE("dataset directory round-trip and on-disk determinism") {
  TempDir dir("dataset");
  SynthConfig cfg;
  cfg.pairs = 10;
  cfg.dim = 8;
  std::vector<SynthDataset> parts;
  parts.push_back(generate_synthetic(cfg, derive_seed(0, "train"), Split::train, "tr-"));
  cfg.pairs = 4;
  parts.push_back(generate_synthetic(cfg, derive_seed(0, "val"), Split::val, "va-"));
  Dataset ds = merge_synthetic(parts, "unit test");

  const auto a_dir = dir.path() / "a";
  const auto b_dir = dir.path() / "b";
  save_dataset(ds, a_dir);
  save_dataset(ds, b_dir);
  for (const auto& entry : std::filesystem::directory_iterator(a_dir)) {
    const auto name = entry.path().filename();
    CHECK(testutil::read_file_bytes(entry.path()) == testutil::read_file_bytes(b_dir / name));
  }

  Dataset loaded = load_dataset(a_dir);
  CHECK(loaded.dim == 8);
  CHECK(loaded.manifest(Split::train).pairs.size() == 10);
  CHECK(loaded.manifest(Split::val).pairs.size() == 4);
  CHECK(loaded.matrices.at(Role::text_claim).rows() ==
        ds.matrices.at(Role::text_claim).rows());
  ValidationReport report = validate_dataset(loaded.manifest(Split::train), loaded.matrices);
  CHECK(report.usable());
}
