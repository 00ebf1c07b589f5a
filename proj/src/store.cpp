#include "reddot/store.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "reddot/rng.hpp"

namespace reddot::store {

using nlohmann::json;

static_assert(std::endian::native == std::endian::little,
              "on-disk format is little-endian; big-endian hosts are unsupported");

const char* role_name(Role role) {
  switch (role) {
    case Role::text_claim: return "text_claim";
    case Role::image_claim: return "image_claim";
    case Role::text_evidence: return "text_evidence";
    case Role::image_evidence: return "image_evidence";
    case Role::evidence_bundle: return "evidence_bundle";
  }
  return "?";
}

Role role_from_name(const std::string& name) {
  for (Role r : {Role::text_claim, Role::image_claim, Role::text_evidence, Role::image_evidence,
                 Role::evidence_bundle}) {
    if (name == role_name(r)) return r;
  }
  throw ConfigError("unknown role: " + name);
}

const char* split_name(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
    case Split::external: return "external";
  }
  return "?";
}

Split split_from_name(const std::string& name) {
  for (Split s : {Split::train, Split::val, Split::test, Split::external}) {
    if (name == split_name(s)) return s;
  }
  throw ConfigError("unknown split: " + name);
}

EmbeddingMatrix::EmbeddingMatrix(Role role, MatrixF rows, std::vector<std::string> ids)
    : role_(role), rows_(std::move(rows)), ids_(std::move(ids)) {
  if (static_cast<size_t>(rows_.rows()) != ids_.size()) {
    throw DataError("embedding matrix: id count does not match row count");
  }
  if (rows_.rows() > 0 && rows_.cols() < 1) {
    throw DataError("embedding matrix: dim must be positive");
  }
  if (!rows_.allFinite()) {
    throw DataError("embedding matrix (" + std::string(role_name(role_)) +
                    "): non-finite values");
  }
  index_.reserve(ids_.size());
  for (size_t i = 0; i < ids_.size(); ++i) {
    if (!index_.emplace(ids_[i], static_cast<int>(i)).second) {
      throw DataError("embedding matrix (" + std::string(role_name(role_)) +
                      "): duplicate id '" + ids_[i] + "'");
    }
  }
}

int EmbeddingMatrix::find(const std::string& id) const {
  auto it = index_.find(id);
  return it == index_.end() ? -1 : it->second;
}

Eigen::Ref<const Eigen::RowVectorXf> EmbeddingMatrix::row(const std::string& id) const {
  int i = find(id);
  if (i < 0) {
    throw DataError("embedding matrix (" + std::string(role_name(role_)) + "): unknown id '" +
                    id + "'");
  }
  return rows_.row(i);
}

namespace {

constexpr char kMagic[4] = {'R', 'E', 'D', 'E'};
constexpr uint16_t kFormatVersion = 1;

template <typename T>
void write_pod(std::ostream& out, const T& value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in, const char* what) {
  T value;
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!in) throw FormatError(std::string("truncated file while reading ") + what);
  return value;
}

}  // namespace

EmbeddingMatrix load_embeddings(const std::filesystem::path& path, Role role) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());

  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0) {
    throw FormatError(path.string() + ": bad magic (expected REDE)");
  }
  const auto version = read_pod<uint16_t>(in, "version");
  if (version != kFormatVersion) {
    throw FormatError(path.string() + ": unsupported format version " + std::to_string(version));
  }
  const auto file_role = read_pod<uint8_t>(in, "role");
  if (file_role > static_cast<uint8_t>(Role::evidence_bundle)) {
    throw FormatError(path.string() + ": invalid role byte " + std::to_string(file_role));
  }
  if (file_role != static_cast<uint8_t>(role)) {
    throw FormatError(path.string() + ": role mismatch (file has " +
                      role_name(static_cast<Role>(file_role)) + ", expected " + role_name(role) +
                      ")");
  }
  const auto dim = read_pod<uint32_t>(in, "dim");
  if (dim == 0) throw FormatError(path.string() + ": dim must be positive");
  const auto n = read_pod<uint64_t>(in, "row count");

  std::vector<std::string> ids(n);
  for (uint64_t i = 0; i < n; ++i) {
    std::string id;
    if (!std::getline(in, id, '\0')) {
      throw FormatError(path.string() + ": truncated id table");
    }
    ids[i] = std::move(id);
  }

  MatrixF rows(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(dim));
  in.read(reinterpret_cast<char*>(rows.data()),
          static_cast<std::streamsize>(n * dim * sizeof(float)));
  if (!in) throw FormatError(path.string() + ": truncated payload");

  return EmbeddingMatrix(role, std::move(rows), std::move(ids));
}

void save_embeddings(const EmbeddingMatrix& matrix, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());

  out.write(kMagic, 4);
  write_pod(out, kFormatVersion);
  write_pod(out, static_cast<uint8_t>(matrix.role()));
  write_pod(out, static_cast<uint32_t>(matrix.dim()));
  write_pod(out, static_cast<uint64_t>(matrix.size()));
  for (const auto& id : matrix.ids()) {
    out.write(id.data(), static_cast<std::streamsize>(id.size()));
    out.put('\0');
  }
  out.write(reinterpret_cast<const char*>(matrix.rows().data()),
            static_cast<std::streamsize>(static_cast<size_t>(matrix.size()) * matrix.dim() *
                                         sizeof(float)));
  if (!out) throw IoError("failed writing " + path.string());
}

namespace {

VerificationPair pair_from_json(const json& j) {
  VerificationPair p;
  p.pair_id = j.at("pair_id").get<std::string>();
  p.text_id = j.at("text_id").get<std::string>();
  p.image_id = j.at("image_id").get<std::string>();
  p.verdict = j.at("verdict").get<int>();
  if (p.verdict != 0 && p.verdict != 1) {
    throw DataError("pair " + p.pair_id + ": verdict must be 0 or 1");
  }
  p.candidate_text_evidence = j.at("candidate_text_evidence").get<std::vector<std::string>>();
  p.candidate_image_evidence = j.at("candidate_image_evidence").get<std::vector<std::string>>();
  return p;
}

json pair_to_json(const VerificationPair& p) {
  return json{{"pair_id", p.pair_id},
              {"text_id", p.text_id},
              {"image_id", p.image_id},
              {"verdict", p.verdict},
              {"candidate_text_evidence", p.candidate_text_evidence},
              {"candidate_image_evidence", p.candidate_image_evidence}};
}

}  // namespace

DatasetManifest load_manifest(const std::filesystem::path& path, Split split, int dim,
                              std::string provenance) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());

  DatasetManifest m;
  m.split = split;
  m.dim = dim;
  m.provenance = std::move(provenance);

  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
    m.pairs.push_back(pair_from_json(j));
  }
  return m;
}

void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  for (const auto& p : manifest.pairs) {
    out << pair_to_json(p).dump() << '\n';
  }
  if (!out) throw IoError("failed writing " + path.string());
}

std::string ValidationReport::to_string() const {
  std::ostringstream os;
  for (const auto& f : errors) {
    os << "error: " << f.kind << " " << f.subject << ": " << f.detail << '\n';
  }
  for (const auto& f : warnings) {
    os << "warning: " << f.kind << " " << f.subject << ": " << f.detail << '\n';
  }
  return os.str();
}

ValidationReport validate_dataset(const DatasetManifest& manifest, const RoleMatrices& matrices) {
  ValidationReport report;

  int dim = 0;
  for (const auto& [role, matrix] : matrices) {
    if (matrix.size() == 0) continue;
    if (dim == 0) {
      dim = matrix.dim();
    } else if (matrix.dim() != dim) {
      report.errors.push_back({"dim_mismatch", role_name(role),
                               "dim " + std::to_string(matrix.dim()) + " differs from " +
                                   std::to_string(dim)});
    }
  }
  if (manifest.dim > 0 && dim > 0 && manifest.dim != dim) {
    report.errors.push_back({"dim_mismatch", "manifest",
                             "manifest dim " + std::to_string(manifest.dim) +
                                 " differs from matrices dim " + std::to_string(dim)});
  }

  auto matrix_for = [&](Role role) -> const EmbeddingMatrix* {
    auto it = matrices.find(role);
    return it == matrices.end() ? nullptr : &it->second;
  };
  auto check_id = [&](Role role, const std::string& id, const std::string& pair_id) {
    const EmbeddingMatrix* m = matrix_for(role);
    if (m == nullptr || !m->contains(id)) {
      report.errors.push_back({"dangling_id", id,
                               std::string("pair ") + pair_id + " references missing " +
                                   role_name(role) + " id"});
    }
  };

  std::set<std::string> seen;
  for (const auto& p : manifest.pairs) {
    if (!seen.insert(p.pair_id).second) {
      report.errors.push_back({"duplicate_pair_id", p.pair_id, "pair_id appears more than once"});
    }
    check_id(Role::text_claim, p.text_id, p.pair_id);
    check_id(Role::image_claim, p.image_id, p.pair_id);
    std::set<std::string> pool;
    for (const auto& id : p.candidate_text_evidence) {
      check_id(Role::text_evidence, id, p.pair_id);
      if (!pool.insert("t:" + id).second) {
        report.warnings.push_back(
            {"duplicate_pool_entry", id, "pair " + p.pair_id + " lists text evidence twice"});
      }
    }
    for (const auto& id : p.candidate_image_evidence) {
      check_id(Role::image_evidence, id, p.pair_id);
      if (!pool.insert("i:" + id).second) {
        report.warnings.push_back(
            {"duplicate_pool_entry", id, "pair " + p.pair_id + " lists image evidence twice"});
      }
    }
  }
  return report;
}

ValidationReport validate_splits(const std::vector<const DatasetManifest*>& manifests) {
  ValidationReport report;
  std::map<std::string, Split> owner;
  for (const DatasetManifest* m : manifests) {
    for (const auto& p : m->pairs) {
      auto [it, inserted] = owner.emplace(p.pair_id, m->split);
      if (!inserted && it->second != m->split) {
        report.errors.push_back({"split_overlap", p.pair_id,
                                 std::string("appears in both ") + split_name(it->second) +
                                     " and " + split_name(m->split)});
      }
    }
  }
  return report;
}

namespace {

Eigen::RowVectorXf random_unit(Rng& rng, int dim) {
  Eigen::RowVectorXf v(dim);
  for (int i = 0; i < dim; ++i) v[i] = static_cast<float>(rng.normal());
  v.normalize();
  return v;
}

// normalize(base + sigma * gaussian); returns base unchanged when sigma == 0
// so the zero-noise case is bit-exact.
Eigen::RowVectorXf perturb(Rng& rng, const Eigen::RowVectorXf& base, float sigma) {
  if (sigma == 0.0f) return base;
  Eigen::RowVectorXf v = base;
  for (int i = 0; i < v.size(); ++i) v[i] += sigma * static_cast<float>(rng.normal());
  v.normalize();
  return v;
}

}  // namespace

SynthDataset generate_synthetic(const SynthConfig& config, uint64_t seed, Split split,
                                const std::string& id_prefix) {
  if (config.pairs <= 0) throw ConfigError("synth: pairs must be positive");
  if (config.dim <= 0) throw ConfigError("synth: dim must be positive");
  if (config.sigma < 0.0f) throw ConfigError("synth: sigma must be non-negative");
  if (config.m < 0 || config.k < 0) throw ConfigError("synth: m and k must be non-negative");
  if (config.truthful_fraction < 0.0f || config.truthful_fraction > 1.0f) {
    throw ConfigError("synth: truthful_fraction must lie in [0, 1]");
  }
  if (config.text_distractors < 0 || config.image_distractors < 0) {
    throw ConfigError("synth: distractor counts must be non-negative");
  }

  Rng rng(seed);
  const int n = config.pairs;
  const int dim = config.dim;
  const int texts_per_pair = config.m + config.text_distractors;
  const int images_per_pair = config.k + config.image_distractors;

  MatrixF text_claims(n, dim), image_claims(n, dim);
  MatrixF text_evidence(static_cast<Eigen::Index>(n) * texts_per_pair, dim);
  MatrixF image_evidence(static_cast<Eigen::Index>(n) * images_per_pair, dim);
  std::vector<std::string> text_ids(n), image_ids(n);
  std::vector<std::string> text_ev_ids(text_evidence.rows()), image_ev_ids(image_evidence.rows());

  DatasetManifest manifest;
  manifest.split = split;
  manifest.dim = dim;
  manifest.provenance = "synthetic";
  manifest.pairs.reserve(n);

  for (int i = 0; i < n; ++i) {
    const std::string tag = id_prefix + std::to_string(i);
    const bool truthful = rng.uniform() < config.truthful_fraction;

    const Eigen::RowVectorXf image = random_unit(rng, dim);
    const Eigen::RowVectorXf text =
        truthful ? perturb(rng, image, config.sigma) : random_unit(rng, dim);
    image_claims.row(i) = image;
    text_claims.row(i) = text;
    text_ids[i] = "t-" + tag;
    image_ids[i] = "i-" + tag;

    VerificationPair pair;
    pair.pair_id = "p-" + tag;
    pair.text_id = text_ids[i];
    pair.image_id = image_ids[i];
    pair.verdict = truthful ? 0 : 1;

    // Relevant evidence first, then distractors; the pool order carries no
    // information since ranking reorders it anyway.
    for (int e = 0; e < texts_per_pair; ++e) {
      const Eigen::Index row = static_cast<Eigen::Index>(i) * texts_per_pair + e;
      text_evidence.row(row) =
          e < config.m ? perturb(rng, text_claims.row(i), config.sigma) : random_unit(rng, dim);
      text_ev_ids[row] = "te-" + tag + "-" + std::to_string(e);
      pair.candidate_text_evidence.push_back(text_ev_ids[row]);
    }
    for (int e = 0; e < images_per_pair; ++e) {
      const Eigen::Index row = static_cast<Eigen::Index>(i) * images_per_pair + e;
      image_evidence.row(row) =
          e < config.k ? perturb(rng, image_claims.row(i), config.sigma) : random_unit(rng, dim);
      image_ev_ids[row] = "ie-" + tag + "-" + std::to_string(e);
      pair.candidate_image_evidence.push_back(image_ev_ids[row]);
    }
    manifest.pairs.push_back(std::move(pair));
  }

  SynthDataset out;
  out.manifest = std::move(manifest);
  out.matrices.emplace(Role::text_claim,
                       EmbeddingMatrix(Role::text_claim, std::move(text_claims), std::move(text_ids)));
  out.matrices.emplace(Role::image_claim, EmbeddingMatrix(Role::image_claim, std::move(image_claims),
                                                          std::move(image_ids)));
  out.matrices.emplace(Role::text_evidence,
                       EmbeddingMatrix(Role::text_evidence, std::move(text_evidence),
                                       std::move(text_ev_ids)));
  out.matrices.emplace(Role::image_evidence,
                       EmbeddingMatrix(Role::image_evidence, std::move(image_evidence),
                                       std::move(image_ev_ids)));
  return out;
}

const DatasetManifest& Dataset::manifest(Split split) const {
  auto it = manifests.find(split);
  if (it == manifests.end()) {
    throw ConfigError(std::string("dataset has no ") + split_name(split) + " split");
  }
  return it->second;
}

void save_dataset(const Dataset& dataset, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);

  json meta;
  meta["dim"] = dataset.dim;
  meta["provenance"] = dataset.provenance;
  json roles = json::object();
  for (const auto& [role, matrix] : dataset.matrices) {
    const std::string file = std::string(role_name(role)) + ".rede";
    save_embeddings(matrix, dir / file);
    roles[role_name(role)] = file;
  }
  meta["roles"] = roles;
  json splits = json::object();
  for (const auto& [split, manifest] : dataset.manifests) {
    const std::string file = std::string(split_name(split)) + ".jsonl";
    save_manifest(manifest, dir / file);
    splits[split_name(split)] = file;
  }
  meta["splits"] = splits;

  std::ofstream out(dir / "dataset.json", std::ios::trunc);
  if (!out) throw IoError("cannot write " + (dir / "dataset.json").string());
  out << meta.dump(2) << '\n';
}

Dataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream in(dir / "dataset.json");
  if (!in) throw IoError("cannot open " + (dir / "dataset.json").string());
  json meta;
  try {
    meta = json::parse(in);
  } catch (const json::parse_error& e) {
    throw FormatError((dir / "dataset.json").string() + ": " + e.what());
  }

  Dataset dataset;
  dataset.dim = meta.at("dim").get<int>();
  dataset.provenance = meta.value("provenance", std::string{});
  for (const auto& [name, file] : meta.at("roles").items()) {
    const Role role = role_from_name(name);
    dataset.matrices.emplace(role, load_embeddings(dir / file.get<std::string>(), role));
  }
  for (const auto& [name, file] : meta.at("splits").items()) {
    const Split split = split_from_name(name);
    dataset.manifests.emplace(
        split, load_manifest(dir / file.get<std::string>(), split, dataset.dim,
                             dataset.provenance));
  }
  return dataset;
}

Dataset merge_synthetic(const std::vector<SynthDataset>& parts, std::string provenance) {
  if (parts.empty()) throw ConfigError("merge_synthetic: no parts");

  Dataset out;
  out.dim = parts.front().manifest.dim;
  out.provenance = std::move(provenance);

  for (Role role : {Role::text_claim, Role::image_claim, Role::text_evidence,
                    Role::image_evidence}) {
    Eigen::Index total = 0;
    for (const auto& part : parts) total += part.matrices.at(role).size();
    MatrixF rows(total, out.dim);
    std::vector<std::string> ids;
    ids.reserve(total);
    Eigen::Index at = 0;
    for (const auto& part : parts) {
      const EmbeddingMatrix& m = part.matrices.at(role);
      if (m.dim() != out.dim) throw DataError("merge_synthetic: dim mismatch across parts");
      rows.middleRows(at, m.size()) = m.rows();
      ids.insert(ids.end(), m.ids().begin(), m.ids().end());
      at += m.size();
    }
    out.matrices.emplace(role, EmbeddingMatrix(role, std::move(rows), std::move(ids)));
  }
  for (const auto& part : parts) {
    if (!out.manifests.emplace(part.manifest.split, part.manifest).second) {
      throw ConfigError("merge_synthetic: duplicate split");
    }
  }
  return out;
}

}  // namespace reddot::store
