#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "reddot/errors.hpp"
#include "reddot/types.hpp"

namespace reddot::fusion {

enum class FusionOp { image, text, add, sub, mul };

inline const char* fusion_op_name(FusionOp op) {
  switch (op) {
    case FusionOp::image: return "image";
    case FusionOp::text: return "text";
    case FusionOp::add: return "add";
    case FusionOp::sub: return "sub";
    case FusionOp::mul: return "mul";
  }
  return "?";
}

inline FusionOp fusion_op_from_name(const std::string& name) {
  for (FusionOp op : {FusionOp::image, FusionOp::text, FusionOp::add, FusionOp::sub,
                      FusionOp::mul}) {
    if (name == fusion_op_name(op)) return op;
  }
  throw ConfigError("unknown fusion op: " + name);
}

// Ordered subset of the five fusion operations; must keep at least the two
// raw modality tokens.
struct FusionConfig {
  std::vector<FusionOp> ops;

  // All five tokens in canonical order: image, text, add, sub, mul.
  static FusionConfig full() {
    return FusionConfig{{FusionOp::image, FusionOp::text, FusionOp::add, FusionOp::sub,
                         FusionOp::mul}};
  }

  // Concatenation-only baseline: [image; text].
  static FusionConfig concat_only() { return FusionConfig{{FusionOp::image, FusionOp::text}}; }

  // Full config with one operation removed, survivors keeping their order.
  static FusionConfig full_without(FusionOp removed) {
    FusionConfig cfg = full();
    std::erase(cfg.ops, removed);
    return cfg;
  }

  static FusionConfig from_names(const std::vector<std::string>& names) {
    FusionConfig cfg;
    for (const auto& name : names) cfg.ops.push_back(fusion_op_from_name(name));
    cfg.validate();
    return cfg;
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (FusionOp op : ops) out.emplace_back(fusion_op_name(op));
    return out;
  }

  int token_count() const { return static_cast<int>(ops.size()); }

  void validate() const {
    if (ops.size() < 2 || ops.size() > 5) {
      throw ConfigError("fusion config must contain between 2 and 5 ops");
    }
    for (size_t i = 0; i < ops.size(); ++i) {
      for (size_t j = i + 1; j < ops.size(); ++j) {
        if (ops[i] == ops[j]) {
          throw ConfigError(std::string("fusion config repeats op '") +
                            fusion_op_name(ops[i]) + "'");
        }
      }
    }
    auto has = [&](FusionOp op) { return std::find(ops.begin(), ops.end(), op) != ops.end(); };
    if (!has(FusionOp::image) || !has(FusionOp::text)) {
      throw ConfigError("fusion config must contain the image and text tokens");
    }
  }
};

// Multimodal claim tokens, one row per configured op. Subtraction is
// image-minus-text; multiplication is elementwise.
template <typename Scalar>
Matrix<Scalar> fuse(const Vector<Scalar>& f_img, const Vector<Scalar>& f_txt,
                    const FusionConfig& config) {
  if (f_img.size() != f_txt.size()) {
    throw DataError("fuse: image and text feature dims differ");
  }
  config.validate();

  Matrix<Scalar> tokens(config.token_count(), f_img.size());
  for (int t = 0; t < config.token_count(); ++t) {
    switch (config.ops[t]) {
      case FusionOp::image: tokens.row(t) = f_img.transpose(); break;
      case FusionOp::text: tokens.row(t) = f_txt.transpose(); break;
      case FusionOp::add: tokens.row(t) = (f_img + f_txt).transpose(); break;
      case FusionOp::sub: tokens.row(t) = (f_img - f_txt).transpose(); break;
      case FusionOp::mul: tokens.row(t) = f_img.cwiseProduct(f_txt).transpose(); break;
    }
  }
  return tokens;
}

}  // namespace reddot::fusion
