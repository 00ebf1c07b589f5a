#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "reddot/autodiff.hpp"
#include "reddot/checkpoint.hpp"
#include "reddot/errors.hpp"
#include "reddot/fusion.hpp"
#include "reddot/rng.hpp"
#include "reddot/types.hpp"

namespace reddot::model {

using autodiff::AdamConfig;
using autodiff::ParameterSet;
using autodiff::Tape;
using autodiff::Var;

enum class Variant { baseline, ssl, ssl_ga, dsl, dsl_ga, dsl_d2 };

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::baseline: return "baseline";
    case Variant::ssl: return "ssl";
    case Variant::ssl_ga: return "ssl_ga";
    case Variant::dsl: return "dsl";
    case Variant::dsl_ga: return "dsl_ga";
    case Variant::dsl_d2: return "dsl_d2";
  }
  return "?";
}

inline Variant variant_from_name(const std::string& name) {
  for (Variant v : {Variant::baseline, Variant::ssl, Variant::ssl_ga, Variant::dsl,
                    Variant::dsl_ga, Variant::dsl_d2}) {
    if (name == variant_name(v)) return v;
  }
  throw ConfigError("unknown variant: " + name);
}

inline bool is_dual_stage(Variant v) {
  return v == Variant::dsl || v == Variant::dsl_ga || v == Variant::dsl_d2;
}

inline bool uses_guided_attention(Variant v) {
  return v == Variant::ssl_ga || v == Variant::dsl_ga;
}

inline bool has_relevance_head(Variant v) {
  return v == Variant::ssl || v == Variant::dsl || v == Variant::dsl_d2;
}

struct ModelConfig {
  Variant variant = Variant::dsl;
  int dim = 512;
  int layers = 4;
  int ff_width = 128;
  int heads = 2;
  double dropout = 0.1;
  int m = 1;
  int k = 1;
  fusion::FusionConfig fusion = fusion::FusionConfig::full();
  double inference_mask_threshold = 0.5;

  // CLS + fusion tokens + full evidence bundle.
  int max_seq_len() const { return 1 + fusion.token_count() + 2 * (m + k); }

  void validate() const {
    if (dim < 2 || dim % 2 != 0) throw ConfigError("model: dim must be a positive even number");
    if (heads < 1 || dim % heads != 0) {
      throw ConfigError("model: dim must be divisible by the head count");
    }
    if (layers < 1) throw ConfigError("model: layers must be >= 1");
    if (ff_width < 1) throw ConfigError("model: ff_width must be >= 1");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("model: dropout must lie in [0, 1)");
    if (m < 0 || k < 0) throw ConfigError("model: m and k must be non-negative");
    if (variant != Variant::baseline && m + k < 1) {
      throw ConfigError("model: evidence variants require m + k >= 1");
    }
    if (inference_mask_threshold <= 0.0 || inference_mask_threshold >= 1.0) {
      throw ConfigError("model: inference_mask_threshold must lie in (0, 1)");
    }
    fusion.validate();
  }

  nlohmann::json to_json() const {
    return nlohmann::json{{"variant", variant_name(variant)},
                          {"dim", dim},
                          {"layers", layers},
                          {"ff_width", ff_width},
                          {"heads", heads},
                          {"dropout", dropout},
                          {"m", m},
                          {"k", k},
                          {"fusion", fusion.names()},
                          {"inference_mask_threshold", inference_mask_threshold}};
  }

  static ModelConfig from_json(const nlohmann::json& j) {
    static const std::vector<std::string> known = {
        "variant", "dim",    "layers", "ff_width", "heads",
        "dropout", "m",      "k",      "fusion",   "inference_mask_threshold"};
    for (const auto& [key, _] : j.items()) {
      if (std::find(known.begin(), known.end(), key) == known.end()) {
        throw ConfigError("model config: unknown key '" + key + "'");
      }
    }
    ModelConfig cfg;
    cfg.variant = variant_from_name(j.at("variant").get<std::string>());
    cfg.dim = j.at("dim").get<int>();
    cfg.layers = j.value("layers", cfg.layers);
    cfg.ff_width = j.value("ff_width", cfg.ff_width);
    cfg.heads = j.value("heads", cfg.heads);
    cfg.dropout = j.value("dropout", cfg.dropout);
    cfg.m = j.value("m", cfg.m);
    cfg.k = j.value("k", cfg.k);
    if (j.contains("fusion")) {
      cfg.fusion = fusion::FusionConfig::from_names(j.at("fusion").get<std::vector<std::string>>());
    }
    cfg.inference_mask_threshold =
        j.value("inference_mask_threshold", cfg.inference_mask_threshold);
    cfg.validate();
    return cfg;
  }
};

enum class Mode { train, infer };

// Per-forward handles to the parameter leaves on a tape. One binding can be
// shared by every forward pass recorded on that tape (e.g. a whole batch).
template <typename Scalar>
struct ModelBinding {
  std::map<std::string, Var<Scalar>> vars;

  const Var<Scalar>& at(const std::string& name) const {
    auto it = vars.find(name);
    if (it == vars.end()) throw StateError("binding: unknown parameter '" + name + "'");
    return it->second;
  }
};

template <typename Scalar>
struct ForwardOutput {
  Var<Scalar> verdict_logit;     // [1, 1]
  Var<Scalar> relevance_scores;  // [n_evidence, 1]; invalid for baseline
  Var<Scalar> token_outputs;     // final-stage d, [L, dim]
  Var<Scalar> stage1_tokens;     // dual-stage only
  std::vector<int> applied_mask;  // dual-stage only
};

// Zeroes whole token vectors where mask == 0; token count is preserved.
template <typename Scalar>
Matrix<Scalar> apply_evidence_mask(const Matrix<Scalar>& evidence, const std::vector<int>& mask) {
  if (static_cast<Eigen::Index>(mask.size()) != evidence.rows()) {
    throw ShapeError("apply_evidence_mask: mask length does not match token count");
  }
  Matrix<Scalar> out = evidence;
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    if (mask[i] == 0) out.row(i).setZero();
  }
  return out;
}

template <typename Scalar>
class RedDotModel {
 public:
  RedDotModel() = default;
  RedDotModel(ModelConfig config, ParameterSet<Scalar> params)
      : config_(std::move(config)), params_(std::move(params)) {
    config_.validate();
  }

  static RedDotModel init(const ModelConfig& config, uint64_t seed) {
    config.validate();
    Rng rng(seed);
    ParameterSet<Scalar> params;

    auto normal_matrix = [&](Eigen::Index r, Eigen::Index c, double stddev) {
      Matrix<Scalar> m(r, c);
      for (Eigen::Index i = 0; i < m.size(); ++i) {
        m.data()[i] = static_cast<Scalar>(stddev * rng.normal());
      }
      return m;
    };
    auto xavier = [&](Eigen::Index fan_in, Eigen::Index fan_out) {
      const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
      Matrix<Scalar> m(fan_in, fan_out);
      for (Eigen::Index i = 0; i < m.size(); ++i) {
        m.data()[i] = static_cast<Scalar>((2.0 * rng.uniform() - 1.0) * limit);
      }
      return m;
    };
    auto zeros = [](Eigen::Index r, Eigen::Index c) { return Matrix<Scalar>::Zero(r, c).eval(); };
    auto ones = [](Eigen::Index r, Eigen::Index c) { return Matrix<Scalar>::Ones(r, c).eval(); };

    const int dim = config.dim;
    params.add("cls", normal_matrix(1, dim, 0.02));
    params.add("pos", normal_matrix(config.max_seq_len(), dim, 0.02));

    auto add_encoder = [&](const std::string& prefix) {
      for (int l = 0; l < config.layers; ++l) {
        const std::string base = prefix + "." + std::to_string(l) + ".";
        for (const char* name : {"attn.wq", "attn.wk", "attn.wv", "attn.wo"}) {
          params.add(base + name, xavier(dim, dim));
        }
        for (const char* name : {"attn.bq", "attn.bk", "attn.bv", "attn.bo"}) {
          params.add(base + name, zeros(1, dim));
        }
        params.add(base + "ln1.gain", ones(1, dim));
        params.add(base + "ln1.shift", zeros(1, dim));
        params.add(base + "ff.w1", xavier(dim, config.ff_width));
        params.add(base + "ff.b1", zeros(1, config.ff_width));
        params.add(base + "ff.w2", xavier(config.ff_width, dim));
        params.add(base + "ff.b2", zeros(1, dim));
        params.add(base + "ln2.gain", ones(1, dim));
        params.add(base + "ln2.shift", zeros(1, dim));
      }
    };
    add_encoder("enc");
    if (config.variant == Variant::dsl_d2) add_encoder("enc2");

    params.add("verdict.ln.gain", ones(1, dim));
    params.add("verdict.ln.shift", zeros(1, dim));
    params.add("verdict.w0", xavier(dim, dim / 2));
    params.add("verdict.b0", zeros(1, dim / 2));
    params.add("verdict.w1", xavier(dim / 2, 1));
    params.add("verdict.b1", zeros(1, 1));

    if (has_relevance_head(config.variant)) {
      params.add("relevance.ln.gain", ones(1, dim));
      params.add("relevance.ln.shift", zeros(1, dim));
      params.add("relevance.w2", xavier(dim, kRelevanceHidden));
      params.add("relevance.b2", zeros(1, kRelevanceHidden));
      params.add("relevance.w3", xavier(kRelevanceHidden, 1));
      params.add("relevance.b3", zeros(1, 1));
    }
    return RedDotModel(config, std::move(params));
  }

  const ModelConfig& config() const { return config_; }
  ParameterSet<Scalar>& params() { return params_; }
  const ParameterSet<Scalar>& params() const { return params_; }

  ModelBinding<Scalar> bind(Tape<Scalar>& tape, bool requires_grad) const {
    ModelBinding<Scalar> binding;
    for (const auto& [name, p] : params_) {
      binding.vars.emplace(name, autodiff::input(tape, p.value, requires_grad));
    }
    return binding;
  }

  // Adds each bound leaf's gradient into the parameter set; grads must have
  // been zeroed (or previously accumulated) beforehand.
  void accumulate_grads(const ModelBinding<Scalar>& binding) {
    for (auto& [name, p] : params_) {
      const Var<Scalar>& v = binding.at(name);
      if (v.grad().size() == 0) continue;
      if (p.grad.size() == 0) p.grad.setZero(p.value.rows(), p.value.cols());
      p.grad += v.grad();
    }
  }

  // D (or D2) applied to [CLS; claim tokens; evidence tokens] plus learned
  // positional embeddings. Output rows preserve input positions.
  Var<Scalar> encode(Tape<Scalar>& tape, const ModelBinding<Scalar>& binding,
                     const Matrix<Scalar>& claim_tokens, const Matrix<Scalar>& evidence_tokens,
                     bool second_encoder, bool training, Rng& rng) const {
    if (claim_tokens.cols() != config_.dim ||
        (evidence_tokens.rows() > 0 && evidence_tokens.cols() != config_.dim)) {
      throw ShapeError("encode: token dim does not match model dim");
    }
    const Eigen::Index len = 1 + claim_tokens.rows() + evidence_tokens.rows();
    if (len > config_.max_seq_len()) {
      throw ConfigError("encode: sequence length " + std::to_string(len) +
                        " exceeds maximum " + std::to_string(config_.max_seq_len()));
    }
    const std::string prefix = second_encoder ? "enc2" : "enc";
    if (second_encoder && !params_.contains("enc2.0.attn.wq")) {
      throw StateError("encode: this variant has no second encoder");
    }

    std::vector<Var<Scalar>> parts = {binding.at("cls")};
    if (claim_tokens.rows() > 0) parts.push_back(autodiff::input(tape, claim_tokens));
    if (evidence_tokens.rows() > 0) parts.push_back(autodiff::input(tape, evidence_tokens));
    Var<Scalar> x = concat_rows(parts);
    x = add(x, autodiff::slice_rows(binding.at("pos"), 0, len));

    for (int l = 0; l < config_.layers; ++l) {
      const std::string base = prefix + "." + std::to_string(l) + ".";
      autodiff::AttentionParams<Scalar> attn{
          binding.at(base + "attn.wq"), binding.at(base + "attn.bq"),
          binding.at(base + "attn.wk"), binding.at(base + "attn.bk"),
          binding.at(base + "attn.wv"), binding.at(base + "attn.bv"),
          binding.at(base + "attn.wo"), binding.at(base + "attn.bo")};
      Var<Scalar> attended = autodiff::multi_head_self_attention(
          x, config_.heads, attn, config_.dropout, training, rng);
      x = autodiff::layer_norm(add(x, attended), binding.at(base + "ln1.gain"),
                               binding.at(base + "ln1.shift"));
      Var<Scalar> hidden = autodiff::gelu(
          autodiff::linear(x, binding.at(base + "ff.w1"), binding.at(base + "ff.b1")));
      hidden = autodiff::dropout(hidden, config_.dropout, training, rng);
      Var<Scalar> ff =
          autodiff::linear(hidden, binding.at(base + "ff.w2"), binding.at(base + "ff.b2"));
      x = autodiff::layer_norm(add(x, ff), binding.at(base + "ln2.gain"),
                               binding.at(base + "ln2.shift"));
    }
    return x;
  }

  // LN -> W0 -> GELU -> W1 on the CLS output; a single logit.
  Var<Scalar> predict_verdict(const ModelBinding<Scalar>& binding, Var<Scalar> d) const {
    Var<Scalar> h = autodiff::slice_rows(d, 0, 1);
    h = autodiff::layer_norm(h, binding.at("verdict.ln.gain"), binding.at("verdict.ln.shift"));
    h = autodiff::gelu(autodiff::linear(h, binding.at("verdict.w0"), binding.at("verdict.b0")));
    return autodiff::linear(h, binding.at("verdict.w1"), binding.at("verdict.b1"));
  }

  // LN -> W2 -> GELU -> W3 shared across evidence slots; one logit per slot.
  Var<Scalar> predict_relevance_head(const ModelBinding<Scalar>& binding, Var<Scalar> d,
                                     int n_evidence) const {
    if (!has_relevance_head(config_.variant)) {
      throw StateError("predict_relevance_head: variant " +
                       std::string(variant_name(config_.variant)) + " has no relevance head");
    }
    Var<Scalar> h = autodiff::slice_rows(d, d.rows() - n_evidence, n_evidence);
    h = autodiff::layer_norm(h, binding.at("relevance.ln.gain"),
                             binding.at("relevance.ln.shift"));
    h = autodiff::gelu(autodiff::linear(h, binding.at("relevance.w2"), binding.at("relevance.b2")));
    return autodiff::linear(h, binding.at("relevance.w3"), binding.at("relevance.b3"));
  }

  // a = d d^T / dim over the final-layer token outputs.
  Var<Scalar> guided_attention_matrix(Var<Scalar> d) const {
    return autodiff::scale(autodiff::matmul_nt(d, d), Scalar(1) / Scalar(config_.dim));
  }

  // CLS row of `a` restricted to the trailing evidence positions, as a
  // column of raw scores (sigmoid is applied only in the loss / threshold).
  Var<Scalar> guided_attention_scores(Var<Scalar> d, int n_evidence) const {
    if (!uses_guided_attention(config_.variant)) {
      throw StateError("guided_attention_scores: variant " +
                       std::string(variant_name(config_.variant)) + " does not use GA");
    }
    if (d.rows() < 1 + n_evidence) {
      throw ShapeError("guided_attention_scores: sequence shorter than 1 + evidence count");
    }
    Var<Scalar> a = guided_attention_matrix(d);
    Var<Scalar> cls_row = autodiff::slice_rows(a, 0, 1);
    Var<Scalar> scores = autodiff::slice_cols(cls_row, a.cols() - n_evidence, n_evidence);
    return autodiff::transpose(scores);
  }

  // Variant dispatch. Evidence arrives as the bundle's feature rows plus its
  // relevance labels; the baseline consumes only label-1 rows. Dual-stage
  // variants mask with `teacher_labels` during training (required there) and
  // with thresholded stage-1 predictions at inference.
  ForwardOutput<Scalar> forward(Tape<Scalar>& tape, const ModelBinding<Scalar>& binding,
                                const Matrix<Scalar>& fused_claim,
                                const Matrix<Scalar>& evidence_features,
                                const std::vector<int>& evidence_labels, Mode mode, Rng& rng,
                                const std::vector<int>* teacher_labels = nullptr) const {
    if (static_cast<Eigen::Index>(evidence_labels.size()) != evidence_features.rows()) {
      throw ShapeError("forward: evidence labels do not match feature rows");
    }
    const bool training = mode == Mode::train;
    const int n_ev = static_cast<int>(evidence_features.rows());
    ForwardOutput<Scalar> out;

    if (config_.variant == Variant::baseline) {
      Eigen::Index n_rel = 0;
      for (int label : evidence_labels) n_rel += label == 1;
      Matrix<Scalar> relevant(n_rel, evidence_features.cols());
      Eigen::Index at = 0;
      for (int i = 0; i < n_ev; ++i) {
        if (evidence_labels[i] == 1) relevant.row(at++) = evidence_features.row(i);
      }
      Var<Scalar> d = encode(tape, binding, fused_claim, relevant, false, training, rng);
      out.token_outputs = d;
      out.verdict_logit = predict_verdict(binding, d);
      return out;
    }

    Var<Scalar> d1 = encode(tape, binding, fused_claim, evidence_features, false, training, rng);
    Var<Scalar> scores = uses_guided_attention(config_.variant)
                              ? guided_attention_scores(d1, n_ev)
                              : predict_relevance_head(binding, d1, n_ev);
    out.relevance_scores = scores;

    if (!is_dual_stage(config_.variant)) {
      out.token_outputs = d1;
      out.verdict_logit = predict_verdict(binding, d1);
      return out;
    }

    std::vector<int> mask;
    if (training) {
      if (teacher_labels == nullptr) {
        throw StateError("forward: dual-stage training requires teacher labels");
      }
      if (static_cast<int>(teacher_labels->size()) != n_ev) {
        throw ShapeError("forward: teacher label count does not match evidence");
      }
      mask = *teacher_labels;  // teacher forcing
    } else {
      mask.resize(n_ev);
      for (int i = 0; i < n_ev; ++i) {
        const double p = autodiff::detail::stable_sigmoid(
            static_cast<double>(scores.value()(i, 0)));
        mask[i] = p > config_.inference_mask_threshold ? 1 : 0;
      }
    }
    const Matrix<Scalar> masked = apply_evidence_mask(evidence_features, mask);
    Var<Scalar> d2 = encode(tape, binding, fused_claim, masked,
                            config_.variant == Variant::dsl_d2, training, rng);
    out.stage1_tokens = d1;
    out.token_outputs = d2;
    out.applied_mask = std::move(mask);
    out.verdict_logit = predict_verdict(binding, d2);
    return out;
  }

  static constexpr int kRelevanceHidden = 256;

 private:
  ModelConfig config_;
  ParameterSet<Scalar> params_;
};

template <typename Scalar>
struct LossTerms {
  Var<Scalar> total;
  Var<Scalar> verdict;
  Var<Scalar> evidence;  // invalid when the variant has no relevance output
};

// L = L^v + L^e with unit weights; the baseline contributes L^v alone.
template <typename Scalar>
LossTerms<Scalar> multitask_loss(const ForwardOutput<Scalar>& output, int verdict_label,
                                 const std::vector<int>& relevance_labels) {
  Matrix<Scalar> target(1, 1);
  target(0, 0) = static_cast<Scalar>(verdict_label);
  LossTerms<Scalar> loss;
  loss.verdict = autodiff::bce_with_logits_mean(output.verdict_logit, std::move(target));
  if (!output.relevance_scores.valid()) {
    loss.total = loss.verdict;
    return loss;
  }
  if (static_cast<Eigen::Index>(relevance_labels.size()) != output.relevance_scores.rows()) {
    throw ShapeError("multitask_loss: relevance label count does not match scores");
  }
  Matrix<Scalar> targets(relevance_labels.size(), 1);
  for (size_t i = 0; i < relevance_labels.size(); ++i) {
    targets(static_cast<Eigen::Index>(i), 0) = static_cast<Scalar>(relevance_labels[i]);
  }
  loss.evidence = autodiff::bce_with_logits_mean(output.relevance_scores, std::move(targets));
  loss.total = add(loss.verdict, loss.evidence);
  return loss;
}

inline void save_model(const RedDotModel<float>& model, const std::filesystem::path& path) {
  autodiff::save_checkpoint(model.params(), model.config().to_json().dump(), path);
}

inline RedDotModel<float> load_model(const std::filesystem::path& path) {
  auto [params, config_json] = autodiff::load_checkpoint(path);
  ModelConfig config = ModelConfig::from_json(nlohmann::json::parse(config_json));
  return RedDotModel<float>(std::move(config), std::move(params));
}

}  // namespace reddot::model
