#pragma once

#include <cmath>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "reddot/errors.hpp"
#include "reddot/rng.hpp"
#include "reddot/store.hpp"
#include "reddot/types.hpp"

namespace reddot::retrieval {

using store::EmbeddingMatrix;
using store::RoleMatrices;
using store::VerificationPair;

// Cosine similarity with zero-norm vectors mapping to 0 rather than NaN, so
// degenerate padding rows cannot poison rankings.
template <typename A, typename B>
float cosine_similarity(const Eigen::MatrixBase<A>& a, const Eigen::MatrixBase<B>& b) {
  if (a.size() != b.size()) throw ShapeError("cosine_similarity: size mismatch");
  if (!a.allFinite() || !b.allFinite()) throw DataError("cosine_similarity: non-finite input");
  const float na = a.template cast<float>().norm();
  const float nb = b.template cast<float>().norm();
  if (na == 0.0f || nb == 0.0f) return 0.0f;
  const float dot = a.template cast<float>().cwiseProduct(b.template cast<float>()).sum();
  return dot / (na * nb);
}

// Evidence ids sorted by descending intra-modal cosine similarity to the
// claim. Ties break by original pool index, so rankings are reproducible.
struct RankedEvidence {
  std::string pair_id;
  std::vector<std::string> ranked_text_ids;
  std::vector<std::string> ranked_image_ids;
  std::vector<float> text_scores;
  std::vector<float> image_scores;
};

RankedEvidence rank_relevant(const VerificationPair& pair, const RoleMatrices& matrices);

// Exact cosine top-k over an embedding matrix. `exact` precomputes row norms;
// `oracle` is the reference linear scan recomputing everything per query.
// Both produce identical results (same arithmetic, same tie-break).
class NeighborIndex {
 public:
  enum class Mode { exact, oracle };

  struct Hit {
    int row;
    float score;
  };

  explicit NeighborIndex(const EmbeddingMatrix& matrix, Mode mode = Mode::exact);

  // Top-k by descending cosine similarity; ties break by row index ascending.
  std::vector<Hit> query(const Eigen::Ref<const Eigen::RowVectorXf>& vector, int k) const;

  const EmbeddingMatrix& matrix() const { return *matrix_; }

 private:
  const EmbeddingMatrix* matrix_;
  Mode mode_;
  VectorF row_norms_;  // exact mode only
};

// Hard-negative donors: the most text-similar other pair donates image
// negatives, the most image-similar other pair donates text negatives.
struct NegativeAssignment {
  std::string pair_id;
  std::string donor_pair_id_for_images;  // argmax over j != i of text-text similarity
  std::string donor_pair_id_for_texts;   // argmax over j != i of image-image similarity
  std::vector<std::string> negative_text_ids;
  std::vector<std::string> negative_image_ids;
};

// Indices over the claim features of a pair collection, rows aligned with the
// pair order they were built from. Non-movable: the indices point into the
// owned matrices.
struct ClaimIndices {
  EmbeddingMatrix text_claims;   // row r = claim text feature of pairs[r]
  EmbeddingMatrix image_claims;  // row r = claim image feature of pairs[r]
  NeighborIndex text;
  NeighborIndex image;

  ClaimIndices(EmbeddingMatrix text_mat, EmbeddingMatrix image_mat)
      : text_claims(std::move(text_mat)),
        image_claims(std::move(image_mat)),
        text(text_claims),
        image(image_claims) {}
  ClaimIndices(const ClaimIndices&) = delete;
  ClaimIndices& operator=(const ClaimIndices&) = delete;
};

ClaimIndices build_claim_indices(const std::vector<VerificationPair>& pairs,
                                 const RoleMatrices& matrices);

NegativeAssignment mine_hard_negatives(size_t pair_index,
                                       const std::vector<VerificationPair>& pairs,
                                       const ClaimIndices& indices,
                                       const std::map<std::string, RankedEvidence>& ranked,
                                       int m, int k);

enum class Modality : uint8_t { text = 0, image = 1 };

// The permuted evidence array E fed to the model: always 2*(m+k) slots, half
// labeled relevant pre-permutation. permutation[s] is the pre-shuffle position
// of the item now in slot s.
struct EvidenceBundle {
  std::string pair_id;
  MatrixF evidence_features;       // 2*(m+k) x dim
  std::vector<int> relevance_labels;
  std::vector<int> permutation;
  std::vector<Modality> modality_tags;
  std::vector<bool> padded_flags;
  std::vector<std::string> slot_ids;  // evidence id, or "pad:<n>" for sampled fill

  int slots() const { return static_cast<int>(evidence_features.rows()); }
};

// Takes top-m texts / top-k images from `ranked` (label 1) and m texts /
// k images from `negatives` (label 0), pads shortfalls by uniform sampling
// from the dataset-wide evidence matrix (label inherited from the slot), then
// applies a seeded uniform random permutation to features and labels alike.
EvidenceBundle assemble_bundle(const VerificationPair& pair, const RankedEvidence& ranked,
                               const NegativeAssignment& negatives, int m, int k,
                               const RoleMatrices& matrices, uint64_t rng_seed);

// Relevant-only bundle for external-benchmark style inference: m + k slots,
// no injected negatives, no permutation.
EvidenceBundle assemble_relevant_only_bundle(const VerificationPair& pair,
                                             const RankedEvidence& ranked, int m, int k,
                                             const RoleMatrices& matrices, uint64_t rng_seed);

// Bundles persist as one embedding container (rows = slots of all bundles in
// order) plus a JSON sidecar with labels, permutation, tags and flags.
void save_bundles(const std::vector<EvidenceBundle>& bundles,
                  const std::filesystem::path& features_path,
                  const std::filesystem::path& sidecar_path);
std::vector<EvidenceBundle> load_bundles(const std::filesystem::path& features_path,
                                         const std::filesystem::path& sidecar_path);

}  // namespace reddot::retrieval
