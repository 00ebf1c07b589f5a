#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "reddot/errors.hpp"
#include "reddot/types.hpp"

namespace reddot::store {

enum class Role : uint8_t {
  text_claim = 0,
  image_claim = 1,
  text_evidence = 2,
  image_evidence = 3,
  // Bundles reuse the embedding container with their own role tag.
  evidence_bundle = 4,
};

const char* role_name(Role role);
Role role_from_name(const std::string& name);

// Dense float feature rows keyed by record id, one matrix per modality/role.
// Immutable after load; safe for concurrent reads.
class EmbeddingMatrix {
 public:
  EmbeddingMatrix() = default;
  EmbeddingMatrix(Role role, MatrixF rows, std::vector<std::string> ids);

  Role role() const { return role_; }
  int dim() const { return static_cast<int>(rows_.cols()); }
  int size() const { return static_cast<int>(rows_.rows()); }
  const MatrixF& rows() const { return rows_; }
  const std::vector<std::string>& ids() const { return ids_; }
  const std::string& id(int row) const { return ids_[row]; }

  // Row index for an id, or -1 when absent.
  int find(const std::string& id) const;
  bool contains(const std::string& id) const { return find(id) >= 0; }

  // Row by id; throws DataError when the id does not resolve.
  Eigen::Ref<const Eigen::RowVectorXf> row(const std::string& id) const;
  Eigen::Ref<const Eigen::RowVectorXf> row(int index) const { return rows_.row(index); }

 private:
  Role role_ = Role::text_claim;
  MatrixF rows_;
  std::vector<std::string> ids_;
  std::unordered_map<std::string, int> index_;
};

using RoleMatrices = std::map<Role, EmbeddingMatrix>;

// Binary container: magic "REDE", version u16 (=1), role u8, dim u32, N u64,
// N null-terminated UTF-8 ids, then N*dim little-endian f32 values row-major.
EmbeddingMatrix load_embeddings(const std::filesystem::path& path, Role role);
void save_embeddings(const EmbeddingMatrix& matrix, const std::filesystem::path& path);

// An (image, text) claim with verdict label and raw candidate evidence pools.
struct VerificationPair {
  std::string pair_id;
  std::string text_id;
  std::string image_id;
  int verdict = 0;  // 0 = truthful, 1 = misinformation
  std::vector<std::string> candidate_text_evidence;
  std::vector<std::string> candidate_image_evidence;
};

enum class Split : uint8_t { train = 0, val = 1, test = 2, external = 3 };

const char* split_name(Split split);
Split split_from_name(const std::string& name);

struct DatasetManifest {
  Split split = Split::train;
  std::vector<VerificationPair> pairs;
  int dim = 0;
  std::string provenance;
};

// Newline-delimited JSON, one VerificationPair object per line.
DatasetManifest load_manifest(const std::filesystem::path& path, Split split, int dim,
                              std::string provenance = {});
void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);

struct ValidationFinding {
  std::string kind;     // dangling_id | duplicate_pair_id | dim_mismatch | ...
  std::string subject;  // the offending id
  std::string detail;
};

struct ValidationReport {
  std::vector<ValidationFinding> errors;
  // Duplicate ids inside a candidate pool are reported but do not make the
  // dataset unusable.
  std::vector<ValidationFinding> warnings;

  bool usable() const { return errors.empty(); }
  std::string to_string() const;
};

ValidationReport validate_dataset(const DatasetManifest& manifest, const RoleMatrices& matrices);

// Split-level disjointness check across the manifests of one dataset.
ValidationReport validate_splits(const std::vector<const DatasetManifest*>& manifests);

struct SynthConfig {
  int pairs = 0;
  int dim = 0;
  int m = 1;  // relevant text evidence per pair
  int k = 1;  // relevant image evidence per pair
  float sigma = 0.1f;
  float truthful_fraction = 0.5f;
  // Random unit vectors mixed into each candidate pool.
  int text_distractors = 3;
  int image_distractors = 3;
};

struct SynthDataset {
  DatasetManifest manifest;
  RoleMatrices matrices;
};

// Deterministic synthetic dataset. Truthful pairs get correlated image/text
// claim embeddings; misinformation pairs get independent directions. Relevant
// evidence is a noisy copy of the same-modality claim embedding; distractors
// are random unit vectors.
SynthDataset generate_synthetic(const SynthConfig& config, uint64_t seed,
                                Split split = Split::train, const std::string& id_prefix = {});

// A dataset directory: dataset.json + one .rede per role + one .jsonl per split.
struct Dataset {
  int dim = 0;
  std::string provenance;
  RoleMatrices matrices;
  std::map<Split, DatasetManifest> manifests;

  const DatasetManifest& manifest(Split split) const;
  bool has_split(Split split) const { return manifests.count(split) > 0; }
};

void save_dataset(const Dataset& dataset, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

// Concatenates per-split synthetic outputs into one dataset (shared matrices,
// one manifest per split). Ids must be disjoint across the inputs.
Dataset merge_synthetic(const std::vector<SynthDataset>& parts, std::string provenance);

}  // namespace reddot::store
