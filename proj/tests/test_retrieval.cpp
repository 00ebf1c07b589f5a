#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <map>
#include <numeric>

#include "reddot/retrieval.hpp"
#include "reddot/store.hpp"
#include "test_util.hpp"

using namespace reddot;
using namespace reddot::retrieval;
using namespace reddot::store;
using testutil::TempDir;

namespace {

// Independent reference: plain double-precision-free cosine on raw loops.
float oracle_cosine(const Eigen::RowVectorXf& a, const Eigen::RowVectorXf& b) {
  float dot = 0, na = 0, nb = 0;
  for (int i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0f || nb == 0.0f) return 0.0f;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

MatrixF random_rows(Rng& rng, int n, int dim) {
  MatrixF m(n, dim);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<float>(rng.normal());
  return m;
}

// Exhaustive top-k: compute every cosine, stable sort by (score desc, row asc).
std::vector<NeighborIndex::Hit> oracle_topk(const EmbeddingMatrix& matrix,
                                            const Eigen::RowVectorXf& query, int k) {
  std::vector<NeighborIndex::Hit> hits(matrix.size());
  for (int i = 0; i < matrix.size(); ++i) {
    hits[i] = {i, cosine_similarity(query, matrix.rows().row(i))};
  }
  std::stable_sort(hits.begin(), hits.end(), [](const auto& a, const auto& b) {
    return a.score > b.score;
  });
  hits.resize(std::min<size_t>(hits.size(), k));
  return hits;
}

}  // namespace

TEST_CASE("cosine similarity fixed values") {
  Eigen::RowVectorXf a(3), b(3);
  a << 1, 2, 3;
  CHECK(cosine_similarity(a, a) == doctest::Approx(1.0).epsilon(1e-6));

  Eigen::RowVectorXf e1(2), e2(2);
  e1 << 1, 0;
  e2 << 0, 1;
  CHECK(cosine_similarity(e1, e2) == 0.0f);

  b << 4, 5, 6;
  // <a,b>/(|a||b|) = 32 / (sqrt(14)*sqrt(77))
  CHECK(cosine_similarity(a, b) == doctest::Approx(0.9746318).epsilon(1e-6));
  CHECK(cosine_similarity(a, b) == cosine_similarity(b, a));
}

TEST_CASE("cosine similarity degenerate inputs") {
  Eigen::RowVectorXf zero = Eigen::RowVectorXf::Zero(4);
  Eigen::RowVectorXf v(4);
  v << 1, 2, 3, 4;
  CHECK(cosine_similarity(zero, v) == 0.0f);
  CHECK(cosine_similarity(zero, zero) == 0.0f);

  Eigen::RowVectorXf bad = v;
  bad[2] = std::numeric_limits<float>::quiet_NaN();
  CHECK_THROWS_AS(cosine_similarity(bad, v), DataError);
  CHECK_THROWS_AS(cosine_similarity(v, bad), DataError);
}

namespace {

// Minimal dataset with explicit features for ranking tests.
struct TinyData {
  RoleMatrices matrices;
  VerificationPair pair;
};

TinyData tiny_ranking_data() {
  TinyData d;
  const int dim = 4;
  MatrixF claims(1, dim);
  claims << 1, 0, 0, 0;
  d.matrices.emplace(Role::text_claim, EmbeddingMatrix(Role::text_claim, claims, {"t0"}));
  d.matrices.emplace(Role::image_claim, EmbeddingMatrix(Role::image_claim, claims, {"i0"}));

  MatrixF text_ev(3, dim);
  text_ev << 0, 1, 0, 0,   // orthogonal
             1, 0, 0, 0,   // exact match
             1, 1, 0, 0;   // 45 degrees
  d.matrices.emplace(Role::text_evidence,
                     EmbeddingMatrix(Role::text_evidence, text_ev, {"e0", "e1", "e2"}));
  MatrixF image_ev(1, dim);
  image_ev << 1, 0, 0, 0;
  d.matrices.emplace(Role::image_evidence,
                     EmbeddingMatrix(Role::image_evidence, image_ev, {"ie0"}));

  d.pair = {"p0", "t0", "i0", 0, {"e0", "e1", "e2"}, {"ie0"}};
  return d;
}

}  // namespace

TEST_CASE("exact match ranks first with score 1") {
  TinyData d = tiny_ranking_data();
  RankedEvidence ranked = rank_relevant(d.pair, d.matrices);
  REQUIRE(ranked.ranked_text_ids.size() == 3);
  CHECK(ranked.ranked_text_ids[0] == "e1");
  CHECK(ranked.text_scores[0] == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(ranked.ranked_text_ids[1] == "e2");
  CHECK(ranked.ranked_text_ids[2] == "e0");
  // scores non-increasing
  CHECK(std::is_sorted(ranked.text_scores.rbegin(), ranked.text_scores.rend()));
}

TEST_CASE("empty pool ranks to an empty list without error") {
  TinyData d = tiny_ranking_data();
  d.pair.candidate_text_evidence.clear();
  RankedEvidence ranked = rank_relevant(d.pair, d.matrices);
  CHECK(ranked.ranked_text_ids.empty());
  CHECK(ranked.text_scores.empty());
  CHECK(ranked.ranked_image_ids.size() == 1);
}

TEST_CASE("ranking matches the exhaustive oracle and permutes the pool") {
  Rng rng(77);
  const int dim = 16;
  const int candidates = 50;

  MatrixF claims = random_rows(rng, 1, dim);
  MatrixF ev = random_rows(rng, candidates, dim);
  // duplicated rows exercise the stable tie-break
  ev.row(10) = ev.row(3);
  ev.row(20) = ev.row(3);

  RoleMatrices matrices;
  matrices.emplace(Role::text_claim, EmbeddingMatrix(Role::text_claim, claims, {"t0"}));
  matrices.emplace(Role::image_claim, EmbeddingMatrix(Role::image_claim, claims, {"i0"}));
  std::vector<std::string> ev_ids(candidates);
  for (int i = 0; i < candidates; ++i) ev_ids[i] = "e" + std::to_string(i);
  matrices.emplace(Role::text_evidence, EmbeddingMatrix(Role::text_evidence, ev, ev_ids));
  matrices.emplace(Role::image_evidence, EmbeddingMatrix(Role::image_evidence, MatrixF(0, dim), {}));

  VerificationPair pair{"p0", "t0", "i0", 0, ev_ids, {}};
  RankedEvidence ranked = rank_relevant(pair, matrices);

  // oracle: stable sort of pool indices by descending cosine
  std::vector<int> order(candidates);
  std::iota(order.begin(), order.end(), 0);
  std::vector<float> scores(candidates);
  for (int i = 0; i < candidates; ++i) scores[i] = oracle_cosine(claims.row(0), ev.row(i));
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return scores[a] > scores[b]; });

  REQUIRE(ranked.ranked_text_ids.size() == static_cast<size_t>(candidates));
  for (int i = 0; i < candidates; ++i) {
    CHECK(ranked.ranked_text_ids[i] == ev_ids[order[i]]);
  }

  // permutation property: sorted output ids == sorted input ids
  auto sorted_out = ranked.ranked_text_ids;
  auto sorted_in = ev_ids;
  std::sort(sorted_out.begin(), sorted_out.end());
  std::sort(sorted_in.begin(), sorted_in.end());
  CHECK(sorted_out == sorted_in);
}

TEST_CASE("index equals linear-scan oracle on 1000 rows x 100 queries") {
  Rng rng(2024);
  const int n = 1000, dim = 64, k = 10;
  MatrixF rows = random_rows(rng, n, dim);
  rows.row(500) = rows.row(2);  // force a tie
  std::vector<std::string> ids(n);
  for (int i = 0; i < n; ++i) ids[i] = "r" + std::to_string(i);
  EmbeddingMatrix matrix(Role::text_evidence, rows, ids);

  NeighborIndex exact(matrix, NeighborIndex::Mode::exact);
  NeighborIndex oracle(matrix, NeighborIndex::Mode::oracle);

  for (int q = 0; q < 100; ++q) {
    Eigen::RowVectorXf query = random_rows(rng, 1, dim).row(0);
    auto exact_hits = exact.query(query, k);
    auto oracle_hits = oracle.query(query, k);
    auto brute = oracle_topk(matrix, query, k);
    REQUIRE(exact_hits.size() == static_cast<size_t>(k));
    for (int i = 0; i < k; ++i) {
      CHECK(exact_hits[i].row == brute[i].row);
      CHECK(exact_hits[i].score == brute[i].score);
      CHECK(oracle_hits[i].row == brute[i].row);
      CHECK(oracle_hits[i].score == brute[i].score);
    }
  }
}

TEST_CASE("index trivia") {
  Rng rng(5);
  MatrixF rows = random_rows(rng, 1, 8);
  EmbeddingMatrix matrix(Role::image_evidence, rows, {"only"});
  NeighborIndex index(matrix);
  auto hits = index.query(random_rows(rng, 1, 8).row(0), 3);
  REQUIRE(hits.size() == 1);
  CHECK(hits[0].row == 0);

  MatrixF many = random_rows(rng, 10, 8);
  std::vector<std::string> ids(10);
  for (int i = 0; i < 10; ++i) ids[i] = std::to_string(i);
  EmbeddingMatrix matrix2(Role::image_evidence, many, ids);
  NeighborIndex index2(matrix2);
  auto top = index2.query(many.row(4), 1);
  CHECK(top[0].row == 4);
  CHECK(top[0].score == doctest::Approx(1.0).epsilon(1e-6));

  CHECK_THROWS_AS(NeighborIndex(EmbeddingMatrix(Role::text_claim, MatrixF(0, 4), {}), // empty
                                NeighborIndex::Mode::exact),
                  ConfigError);
}

namespace {

struct MiningFixture {
  SynthDataset ds;
  std::map<std::string, RankedEvidence> ranked;

  explicit MiningFixture(int pairs, uint64_t seed, int dim = 12) {
    SynthConfig cfg;
    cfg.pairs = pairs;
    cfg.dim = dim;
    cfg.sigma = 0.1f;
    ds = generate_synthetic(cfg, seed);
    for (const auto& pair : ds.manifest.pairs) {
      ranked.emplace(pair.pair_id, rank_relevant(pair, ds.matrices));
    }
  }
};

}  // namespace

TEST_CASE("two-pair mining is a forced choice") {
  MiningFixture fx(2, 1);
  ClaimIndices indices = build_claim_indices(fx.ds.manifest.pairs, fx.ds.matrices);
  for (size_t i = 0; i < 2; ++i) {
    NegativeAssignment neg =
        mine_hard_negatives(i, fx.ds.manifest.pairs, indices, fx.ranked, 1, 1);
    const std::string other = fx.ds.manifest.pairs[1 - i].pair_id;
    CHECK(neg.donor_pair_id_for_images == other);
    CHECK(neg.donor_pair_id_for_texts == other);
    CHECK(neg.pair_id != neg.donor_pair_id_for_images);
  }
}

TEST_CASE("an exact duplicate claim text wins the donor argmax") {
  MiningFixture fx(5, 2);
  // duplicate pair 3's claim text under pair 4's text id
  auto& pairs = fx.ds.manifest.pairs;
  MatrixF texts = fx.ds.matrices.at(Role::text_claim).rows();
  const int row3 = fx.ds.matrices.at(Role::text_claim).find(pairs[3].text_id);
  const int row4 = fx.ds.matrices.at(Role::text_claim).find(pairs[4].text_id);
  texts.row(row4) = texts.row(row3);
  fx.ds.matrices.insert_or_assign(
      Role::text_claim, EmbeddingMatrix(Role::text_claim, texts,
                                        fx.ds.matrices.at(Role::text_claim).ids()));

  ClaimIndices indices = build_claim_indices(pairs, fx.ds.matrices);
  NegativeAssignment neg = mine_hard_negatives(3, pairs, indices, fx.ranked, 1, 1);
  CHECK(neg.donor_pair_id_for_images == pairs[4].pair_id);
}

TEST_CASE("donor selection matches the O(N^2) exhaustive oracle") {
  MiningFixture fx(200, 3);
  const auto& pairs = fx.ds.manifest.pairs;
  ClaimIndices indices = build_claim_indices(pairs, fx.ds.matrices);
  const auto& texts = fx.ds.matrices.at(Role::text_claim);
  const auto& images = fx.ds.matrices.at(Role::image_claim);

  for (size_t i = 0; i < pairs.size(); ++i) {
    NegativeAssignment neg = mine_hard_negatives(i, pairs, indices, fx.ranked, 1, 1);

    // oracle: first argmax over j != i, scanning in pair order
    int best_text = -1, best_image = -1;
    float best_text_score = -2.0f, best_image_score = -2.0f;
    for (size_t j = 0; j < pairs.size(); ++j) {
      if (j == i) continue;
      const float ts =
          oracle_cosine(texts.row(texts.find(pairs[i].text_id)), texts.row(texts.find(pairs[j].text_id)));
      if (ts > best_text_score) {
        best_text_score = ts;
        best_text = static_cast<int>(j);
      }
      const float is = oracle_cosine(images.row(images.find(pairs[i].image_id)),
                                     images.row(images.find(pairs[j].image_id)));
      if (is > best_image_score) {
        best_image_score = is;
        best_image = static_cast<int>(j);
      }
    }
    REQUIRE(neg.donor_pair_id_for_images == pairs[best_text].pair_id);
    REQUIRE(neg.donor_pair_id_for_texts == pairs[best_image].pair_id);
    REQUIRE(neg.pair_id != neg.donor_pair_id_for_images);
    REQUIRE(neg.pair_id != neg.donor_pair_id_for_texts);

    // negatives come from the donor's ranked lists, in rank order
    const auto& image_donor_ranked = fx.ranked.at(neg.donor_pair_id_for_images);
    for (size_t x = 0; x < neg.negative_image_ids.size(); ++x) {
      CHECK(neg.negative_image_ids[x] == image_donor_ranked.ranked_image_ids[x]);
    }
  }
}

TEST_CASE("mining requires at least two pairs") {
  MiningFixture fx(2, 4);
  std::vector<VerificationPair> one = {fx.ds.manifest.pairs[0]};
  ClaimIndices indices = build_claim_indices(fx.ds.manifest.pairs, fx.ds.matrices);
  CHECK_THROWS_AS(mine_hard_negatives(0, one, indices, fx.ranked, 1, 1), ConfigError);
}

namespace {

// Finds a seed whose first permutation draw over n slots (after `skip` pad
// draws) is the identity, to pin the pre-shuffle layout.
uint64_t identity_permutation_seed(int n) {
  for (uint64_t seed = 0; seed < 100000; ++seed) {
    Rng rng(seed);
    std::vector<int> p = rng.permutation(n);
    bool identity = true;
    for (int i = 0; i < n; ++i) identity = identity && p[i] == i;
    if (identity) return seed;
  }
  throw std::runtime_error("no identity seed found");
}

}  // namespace

TEST_CASE("bundle layout, cardinality and permutation recovery") {
  MiningFixture fx(10, 6);
  const auto& pairs = fx.ds.manifest.pairs;
  ClaimIndices indices = build_claim_indices(pairs, fx.ds.matrices);
  NegativeAssignment neg = mine_hard_negatives(0, pairs, indices, fx.ranked, 1, 1);
  const RankedEvidence& ranked = fx.ranked.at(pairs[0].pair_id);

  SUBCASE("cardinality: 4 slots, two labels of each") {
    EvidenceBundle b = assemble_bundle(pairs[0], ranked, neg, 1, 1, fx.ds.matrices, 99);
    CHECK(b.slots() == 4);
    CHECK(std::count(b.relevance_labels.begin(), b.relevance_labels.end(), 1) == 2);
    CHECK(std::count(b.relevance_labels.begin(), b.relevance_labels.end(), 0) == 2);
    CHECK(std::count(b.padded_flags.begin(), b.padded_flags.end(), true) == 0);
  }

  SUBCASE("identity permutation exposes the [T+, I+, T-, I-] layout") {
    const uint64_t seed = identity_permutation_seed(4);
    EvidenceBundle b = assemble_bundle(pairs[0], ranked, neg, 1, 1, fx.ds.matrices, seed);
    CHECK(b.permutation == std::vector<int>{0, 1, 2, 3});
    CHECK(b.slot_ids[0] == ranked.ranked_text_ids[0]);
    CHECK(b.slot_ids[1] == ranked.ranked_image_ids[0]);
    CHECK(b.slot_ids[2] == neg.negative_text_ids[0]);
    CHECK(b.slot_ids[3] == neg.negative_image_ids[0]);
    CHECK(b.relevance_labels == std::vector<int>{1, 1, 0, 0});
    CHECK(b.modality_tags == std::vector<Modality>{Modality::text, Modality::image,
                                                   Modality::text, Modality::image});
  }

  SUBCASE("sorting slots by P recovers the pre-shuffle arrays") {
    for (uint64_t seed : {1ULL, 2ULL, 3ULL, 42ULL}) {
      EvidenceBundle b = assemble_bundle(pairs[0], ranked, neg, 2, 1, fx.ds.matrices, seed);
      REQUIRE(b.slots() == 6);
      std::vector<int> inverse(b.slots());
      for (int s = 0; s < b.slots(); ++s) inverse[b.permutation[s]] = s;

      const std::vector<int> expected_labels = {1, 1, 1, 0, 0, 0};
      const std::vector<Modality> expected_tags = {Modality::text, Modality::text,
                                                   Modality::image, Modality::text,
                                                   Modality::text, Modality::image};
      for (int t = 0; t < b.slots(); ++t) {
        CHECK(b.relevance_labels[inverse[t]] == expected_labels[t]);
        CHECK(b.modality_tags[inverse[t]] == expected_tags[t]);
      }
      // first pre-shuffle slot is the top-ranked text
      CHECK(b.slot_ids[inverse[0]] == ranked.ranked_text_ids[0]);
    }
  }
}

TEST_CASE("padding fills shortfalls from the dataset-wide pool") {
  MiningFixture fx(4, 7);
  auto pair = fx.ds.manifest.pairs[0];
  pair.candidate_text_evidence.clear();  // force an empty text pool
  RankedEvidence ranked = rank_relevant(pair, fx.ds.matrices);
  ClaimIndices indices = build_claim_indices(fx.ds.manifest.pairs, fx.ds.matrices);
  NegativeAssignment neg = mine_hard_negatives(0, fx.ds.manifest.pairs, indices, fx.ranked, 2, 1);

  EvidenceBundle b = assemble_bundle(pair, ranked, neg, 2, 1, fx.ds.matrices, 5);
  CHECK(b.slots() == 6);
  CHECK(std::count(b.relevance_labels.begin(), b.relevance_labels.end(), 1) == 3);
  int padded_relevant = 0;
  for (int s = 0; s < b.slots(); ++s) {
    if (b.padded_flags[s]) {
      CHECK(b.relevance_labels[s] == 1);  // only the relevant-text section was short
      CHECK(b.modality_tags[s] == Modality::text);
      ++padded_relevant;
    }
  }
  CHECK(padded_relevant == 2);

  // determinism
  EvidenceBundle again = assemble_bundle(pair, ranked, neg, 2, 1, fx.ds.matrices, 5);
  CHECK(again.slot_ids == b.slot_ids);
  CHECK(again.evidence_features == b.evidence_features);
}

TEST_CASE("padding from an empty dataset-wide pool is a data error") {
  TinyData d = tiny_ranking_data();
  d.matrices.insert_or_assign(Role::image_evidence,
                              EmbeddingMatrix(Role::image_evidence, MatrixF(0, 4), {}));
  d.pair.candidate_image_evidence.clear();
  RankedEvidence ranked = rank_relevant(d.pair, d.matrices);
  NegativeAssignment neg;
  neg.pair_id = d.pair.pair_id;
  CHECK_THROWS_AS(assemble_bundle(d.pair, ranked, neg, 1, 1, d.matrices, 0), DataError);
}

TEST_CASE("bundle m/k preconditions") {
  TinyData d = tiny_ranking_data();
  RankedEvidence ranked = rank_relevant(d.pair, d.matrices);
  NegativeAssignment neg;
  CHECK_THROWS_AS(assemble_bundle(d.pair, ranked, neg, 0, 0, d.matrices, 0), ConfigError);
  CHECK_THROWS_AS(assemble_bundle(d.pair, ranked, neg, -1, 2, d.matrices, 0), ConfigError);
}

TEST_CASE("relevant-only bundle has m+k slots, labels all one, identity permutation") {
  MiningFixture fx(4, 8);
  const auto& pair = fx.ds.manifest.pairs[1];
  EvidenceBundle b = assemble_relevant_only_bundle(pair, fx.ranked.at(pair.pair_id), 1, 1,
                                                   fx.ds.matrices, 3);
  CHECK(b.slots() == 2);
  CHECK(b.relevance_labels == std::vector<int>{1, 1});
  CHECK(b.permutation == std::vector<int>{0, 1});
  CHECK(b.modality_tags == std::vector<Modality>{Modality::text, Modality::image});
  CHECK(b.slot_ids[0] == fx.ranked.at(pair.pair_id).ranked_text_ids[0]);
}

TEST_CASE("randomized bundle invariants") {
  MiningFixture fx(12, 9);
  const auto& pairs = fx.ds.manifest.pairs;
  ClaimIndices indices = build_claim_indices(pairs, fx.ds.matrices);
  Rng rng(31);
  for (int trial = 0; trial < 300; ++trial) {
    const size_t i = rng.below(pairs.size());
    const int m = static_cast<int>(rng.below(4));
    const int k = static_cast<int>(rng.below(4));
    if (m + k < 1) continue;
    auto pair = pairs[i];
    // randomly shrink pools to exercise padding
    if (rng.below(2) && !pair.candidate_text_evidence.empty()) {
      pair.candidate_text_evidence.resize(rng.below(pair.candidate_text_evidence.size() + 1));
    }
    RankedEvidence ranked = rank_relevant(pair, fx.ds.matrices);
    NegativeAssignment neg = mine_hard_negatives(i, pairs, indices, fx.ranked, m, k);
    EvidenceBundle b = assemble_bundle(pair, ranked, neg, m, k, fx.ds.matrices, rng.next_u64());

    REQUIRE(b.slots() == 2 * (m + k));
    REQUIRE(std::accumulate(b.relevance_labels.begin(), b.relevance_labels.end(), 0) == m + k);
    // permutation is a bijection
    std::vector<int> sorted = b.permutation;
    std::sort(sorted.begin(), sorted.end());
    for (int s = 0; s < b.slots(); ++s) REQUIRE(sorted[s] == s);
  }
}

TEST_CASE("bundle container + sidecar round-trip") {
  TempDir dir("bundles");
  MiningFixture fx(6, 10);
  const auto& pairs = fx.ds.manifest.pairs;
  ClaimIndices indices = build_claim_indices(pairs, fx.ds.matrices);

  std::vector<EvidenceBundle> bundles;
  for (size_t i = 0; i < pairs.size(); ++i) {
    NegativeAssignment neg = mine_hard_negatives(i, pairs, indices, fx.ranked, 1, 1);
    bundles.push_back(assemble_bundle(pairs[i], fx.ranked.at(pairs[i].pair_id), neg, 1, 1,
                                      fx.ds.matrices, derive_seed(0, pairs[i].pair_id)));
  }
  const auto features = dir.path() / "bundles.rede";
  const auto sidecar = dir.path() / "bundles.json";
  save_bundles(bundles, features, sidecar);
  std::vector<EvidenceBundle> loaded = load_bundles(features, sidecar);
  REQUIRE(loaded.size() == bundles.size());
  for (size_t i = 0; i < bundles.size(); ++i) {
    CHECK(loaded[i].pair_id == bundles[i].pair_id);
    CHECK(loaded[i].evidence_features == bundles[i].evidence_features);
    CHECK(loaded[i].relevance_labels == bundles[i].relevance_labels);
    CHECK(loaded[i].permutation == bundles[i].permutation);
    CHECK(loaded[i].slot_ids == bundles[i].slot_ids);
  }
}
