#include "reddot/retrieval.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>

#include <nlohmann/json.hpp>

namespace reddot::retrieval {

using nlohmann::json;
using store::Role;

namespace {

// Sort candidate indices by descending score, ties by pool index ascending.
std::vector<int> ranking_order(const std::vector<float>& scores) {
  std::vector<int> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a < b;
  });
  return order;
}

}  // namespace

RankedEvidence rank_relevant(const VerificationPair& pair, const RoleMatrices& matrices) {
  const EmbeddingMatrix& text_claims = matrices.at(Role::text_claim);
  const EmbeddingMatrix& image_claims = matrices.at(Role::image_claim);
  const EmbeddingMatrix& text_ev = matrices.at(Role::text_evidence);
  const EmbeddingMatrix& image_ev = matrices.at(Role::image_evidence);

  RankedEvidence out;
  out.pair_id = pair.pair_id;

  auto rank_pool = [](const Eigen::Ref<const Eigen::RowVectorXf>& claim,
                      const std::vector<std::string>& pool, const EmbeddingMatrix& ev,
                      std::vector<std::string>& ids_out, std::vector<float>& scores_out) {
    std::vector<float> scores(pool.size());
    for (size_t c = 0; c < pool.size(); ++c) {
      scores[c] = cosine_similarity(claim, ev.row(pool[c]));
    }
    for (int idx : ranking_order(scores)) {
      ids_out.push_back(pool[idx]);
      scores_out.push_back(scores[idx]);
    }
  };

  rank_pool(text_claims.row(pair.text_id), pair.candidate_text_evidence, text_ev,
            out.ranked_text_ids, out.text_scores);
  rank_pool(image_claims.row(pair.image_id), pair.candidate_image_evidence, image_ev,
            out.ranked_image_ids, out.image_scores);
  return out;
}

NeighborIndex::NeighborIndex(const EmbeddingMatrix& matrix, Mode mode)
    : matrix_(&matrix), mode_(mode) {
  if (matrix.size() < 1) throw ConfigError("NeighborIndex: empty matrix");
  if (mode_ == Mode::exact) {
    row_norms_.resize(matrix.size());
    for (int i = 0; i < matrix.size(); ++i) row_norms_[i] = matrix.rows().row(i).norm();
  }
}

std::vector<NeighborIndex::Hit> NeighborIndex::query(
    const Eigen::Ref<const Eigen::RowVectorXf>& vector, int k) const {
  if (vector.size() != matrix_->dim()) throw ShapeError("NeighborIndex: query dim mismatch");
  if (!vector.allFinite()) throw DataError("NeighborIndex: non-finite query");
  if (k < 1) throw ConfigError("NeighborIndex: k must be positive");

  const int n = matrix_->size();
  std::vector<float> scores(n);
  if (mode_ == Mode::exact) {
    // Same arithmetic as cosine_similarity, with row norms precomputed. Norm
    // values are identical either way, so both modes agree bit-exactly.
    const float q_norm = vector.norm();
    for (int i = 0; i < n; ++i) {
      const float r_norm = row_norms_[i];
      if (q_norm == 0.0f || r_norm == 0.0f) {
        scores[i] = 0.0f;
        continue;
      }
      const float dot = vector.cwiseProduct(matrix_->rows().row(i)).sum();
      scores[i] = dot / (q_norm * r_norm);
    }
  } else {
    for (int i = 0; i < n; ++i) {
      scores[i] = cosine_similarity(vector, matrix_->rows().row(i));
    }
  }

  const int take = std::min(k, n);
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::partial_sort(order.begin(), order.begin() + take, order.end(), [&](int a, int b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a < b;
  });

  std::vector<Hit> hits;
  hits.reserve(take);
  for (int i = 0; i < take; ++i) hits.push_back({order[i], scores[order[i]]});
  return hits;
}

ClaimIndices build_claim_indices(const std::vector<VerificationPair>& pairs,
                                 const RoleMatrices& matrices) {
  if (pairs.empty()) throw ConfigError("build_claim_indices: no pairs");
  const EmbeddingMatrix& text_claims = matrices.at(Role::text_claim);
  const EmbeddingMatrix& image_claims = matrices.at(Role::image_claim);
  const int dim = text_claims.dim();

  MatrixF text_rows(pairs.size(), dim), image_rows(pairs.size(), dim);
  std::vector<std::string> ids(pairs.size());
  for (size_t i = 0; i < pairs.size(); ++i) {
    text_rows.row(static_cast<Eigen::Index>(i)) = text_claims.row(pairs[i].text_id);
    image_rows.row(static_cast<Eigen::Index>(i)) = image_claims.row(pairs[i].image_id);
    ids[i] = pairs[i].pair_id;
  }

  EmbeddingMatrix text_mat(Role::text_claim, std::move(text_rows), ids);
  EmbeddingMatrix image_mat(Role::image_claim, std::move(image_rows), std::move(ids));
  return ClaimIndices(std::move(text_mat), std::move(image_mat));
}

NegativeAssignment mine_hard_negatives(size_t pair_index,
                                       const std::vector<VerificationPair>& pairs,
                                       const ClaimIndices& indices,
                                       const std::map<std::string, RankedEvidence>& ranked,
                                       int m, int k) {
  if (pairs.size() < 2) throw ConfigError("mine_hard_negatives: need at least 2 pairs");
  if (pair_index >= pairs.size()) throw ConfigError("mine_hard_negatives: pair index out of range");

  // Top-2 suffices: self scores maximal, so the nearest non-self row is
  // always within the first two hits under the (score desc, row asc) order.
  auto nearest_other = [&](const NeighborIndex& index, const Eigen::Ref<const Eigen::RowVectorXf>& q) {
    for (const auto& hit : index.query(q, 2)) {
      if (hit.row != static_cast<int>(pair_index)) return hit.row;
    }
    throw StateError("mine_hard_negatives: no non-self neighbor found");
  };

  const int donor_images =
      nearest_other(indices.text, indices.text_claims.row(static_cast<int>(pair_index)));
  const int donor_texts =
      nearest_other(indices.image, indices.image_claims.row(static_cast<int>(pair_index)));

  auto ranked_for = [&](const std::string& pair_id) -> const RankedEvidence& {
    auto it = ranked.find(pair_id);
    if (it == ranked.end()) {
      throw StateError("mine_hard_negatives: missing ranked evidence for pair " + pair_id);
    }
    return it->second;
  };

  NegativeAssignment out;
  out.pair_id = pairs[pair_index].pair_id;
  out.donor_pair_id_for_images = pairs[donor_images].pair_id;
  out.donor_pair_id_for_texts = pairs[donor_texts].pair_id;

  const RankedEvidence& image_donor = ranked_for(out.donor_pair_id_for_images);
  const RankedEvidence& text_donor = ranked_for(out.donor_pair_id_for_texts);
  for (int i = 0; i < k && i < static_cast<int>(image_donor.ranked_image_ids.size()); ++i) {
    out.negative_image_ids.push_back(image_donor.ranked_image_ids[i]);
  }
  for (int i = 0; i < m && i < static_cast<int>(text_donor.ranked_text_ids.size()); ++i) {
    out.negative_text_ids.push_back(text_donor.ranked_text_ids[i]);
  }
  return out;
}

namespace {

struct SlotSpec {
  Modality modality;
  int label;
  const std::vector<std::string>* ids;  // available ids for this section, in order
  int count;                            // slots in this section
};

EvidenceBundle fill_bundle(const VerificationPair& pair, const std::vector<SlotSpec>& sections,
                           const RoleMatrices& matrices, Rng& rng) {
  const EmbeddingMatrix& text_ev = matrices.at(Role::text_evidence);
  const EmbeddingMatrix& image_ev = matrices.at(Role::image_evidence);

  int total = 0;
  for (const auto& s : sections) total += s.count;

  const int dim = text_ev.size() > 0 ? text_ev.dim() : image_ev.dim();
  EvidenceBundle bundle;
  bundle.pair_id = pair.pair_id;
  bundle.evidence_features.resize(total, dim);
  bundle.relevance_labels.reserve(total);
  bundle.modality_tags.reserve(total);
  bundle.padded_flags.reserve(total);
  bundle.slot_ids.reserve(total);

  int slot = 0;
  for (const auto& section : sections) {
    const EmbeddingMatrix& pool = section.modality == Modality::text ? text_ev : image_ev;
    for (int i = 0; i < section.count; ++i, ++slot) {
      bool padded = false;
      std::string id;
      if (i < static_cast<int>(section.ids->size())) {
        id = (*section.ids)[i];
      } else {
        if (pool.size() == 0) {
          throw DataError("assemble_bundle: pair " + pair.pair_id +
                          " needs padding but the dataset-wide " +
                          (section.modality == Modality::text ? "text" : "image") +
                          " evidence pool is empty");
        }
        id = pool.id(static_cast<int>(rng.below(pool.size())));
        padded = true;
      }
      bundle.evidence_features.row(slot) = pool.row(id);
      bundle.relevance_labels.push_back(section.label);
      bundle.modality_tags.push_back(section.modality);
      bundle.padded_flags.push_back(padded);
      bundle.slot_ids.push_back(std::move(id));
    }
  }
  return bundle;
}

}  // namespace

EvidenceBundle assemble_bundle(const VerificationPair& pair, const RankedEvidence& ranked,
                               const NegativeAssignment& negatives, int m, int k,
                               const RoleMatrices& matrices, uint64_t rng_seed) {
  if (m < 0 || k < 0 || m + k < 1) throw ConfigError("assemble_bundle: need m >= 0, k >= 0, m+k >= 1");

  Rng rng(rng_seed);
  const std::vector<SlotSpec> sections = {
      {Modality::text, 1, &ranked.ranked_text_ids, m},
      {Modality::image, 1, &ranked.ranked_image_ids, k},
      {Modality::text, 0, &negatives.negative_text_ids, m},
      {Modality::image, 0, &negatives.negative_image_ids, k},
  };
  EvidenceBundle bundle = fill_bundle(pair, sections, matrices, rng);

  // E = E'[P]: slot s receives the pre-shuffle item at position P[s].
  const std::vector<int> perm = rng.permutation(bundle.slots());
  EvidenceBundle shuffled = bundle;
  shuffled.permutation = perm;
  for (int s = 0; s < bundle.slots(); ++s) {
    const int src = perm[s];
    shuffled.evidence_features.row(s) = bundle.evidence_features.row(src);
    shuffled.relevance_labels[s] = bundle.relevance_labels[src];
    shuffled.modality_tags[s] = bundle.modality_tags[src];
    shuffled.padded_flags[s] = bundle.padded_flags[src];
    shuffled.slot_ids[s] = bundle.slot_ids[src];
  }
  return shuffled;
}

EvidenceBundle assemble_relevant_only_bundle(const VerificationPair& pair,
                                             const RankedEvidence& ranked, int m, int k,
                                             const RoleMatrices& matrices, uint64_t rng_seed) {
  if (m < 0 || k < 0 || m + k < 1) throw ConfigError("assemble_bundle: need m >= 0, k >= 0, m+k >= 1");

  Rng rng(rng_seed);
  const std::vector<SlotSpec> sections = {
      {Modality::text, 1, &ranked.ranked_text_ids, m},
      {Modality::image, 1, &ranked.ranked_image_ids, k},
  };
  EvidenceBundle bundle = fill_bundle(pair, sections, matrices, rng);
  bundle.permutation.resize(bundle.slots());
  std::iota(bundle.permutation.begin(), bundle.permutation.end(), 0);
  return bundle;
}

void save_bundles(const std::vector<EvidenceBundle>& bundles,
                  const std::filesystem::path& features_path,
                  const std::filesystem::path& sidecar_path) {
  if (bundles.empty()) throw ConfigError("save_bundles: nothing to save");

  const int dim = static_cast<int>(bundles.front().evidence_features.cols());
  Eigen::Index total = 0;
  for (const auto& b : bundles) total += b.slots();

  MatrixF rows(total, dim);
  std::vector<std::string> ids;
  ids.reserve(total);
  json sidecar;
  sidecar["bundles"] = json::array();

  Eigen::Index at = 0;
  for (const auto& b : bundles) {
    rows.middleRows(at, b.slots()) = b.evidence_features;
    at += b.slots();

    json jb;
    jb["pair_id"] = b.pair_id;
    jb["relevance_labels"] = b.relevance_labels;
    jb["permutation"] = b.permutation;
    json tags = json::array();
    for (Modality mod : b.modality_tags) tags.push_back(mod == Modality::text ? "text" : "image");
    jb["modality_tags"] = tags;
    jb["padded_flags"] = std::vector<int>(b.padded_flags.begin(), b.padded_flags.end());
    jb["slot_ids"] = b.slot_ids;
    sidecar["bundles"].push_back(std::move(jb));

    for (int s = 0; s < b.slots(); ++s) ids.push_back(b.pair_id + "#" + std::to_string(s));
  }

  save_embeddings(EmbeddingMatrix(Role::evidence_bundle, std::move(rows), std::move(ids)),
                  features_path);
  std::ofstream out(sidecar_path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + sidecar_path.string());
  out << sidecar.dump() << '\n';
}

std::vector<EvidenceBundle> load_bundles(const std::filesystem::path& features_path,
                                         const std::filesystem::path& sidecar_path) {
  const EmbeddingMatrix features = load_embeddings(features_path, Role::evidence_bundle);
  std::ifstream in(sidecar_path);
  if (!in) throw IoError("cannot open " + sidecar_path.string());
  json sidecar;
  try {
    sidecar = json::parse(in);
  } catch (const json::parse_error& e) {
    throw FormatError(sidecar_path.string() + ": " + e.what());
  }

  std::vector<EvidenceBundle> bundles;
  Eigen::Index at = 0;
  for (const auto& jb : sidecar.at("bundles")) {
    EvidenceBundle b;
    b.pair_id = jb.at("pair_id").get<std::string>();
    b.relevance_labels = jb.at("relevance_labels").get<std::vector<int>>();
    b.permutation = jb.at("permutation").get<std::vector<int>>();
    for (const auto& tag : jb.at("modality_tags")) {
      b.modality_tags.push_back(tag.get<std::string>() == "text" ? Modality::text
                                                                 : Modality::image);
    }
    for (int flag : jb.at("padded_flags").get<std::vector<int>>()) {
      b.padded_flags.push_back(flag != 0);
    }
    b.slot_ids = jb.at("slot_ids").get<std::vector<std::string>>();

    const auto slots = static_cast<Eigen::Index>(b.relevance_labels.size());
    if (at + slots > features.rows().rows()) {
      throw FormatError(sidecar_path.string() + ": sidecar slots exceed container rows");
    }
    b.evidence_features = features.rows().middleRows(at, slots);
    at += slots;
    bundles.push_back(std::move(b));
  }
  if (at != features.rows().rows()) {
    throw FormatError(sidecar_path.string() + ": container rows exceed sidecar slots");
  }
  return bundles;
}

}  // namespace reddot::retrieval
