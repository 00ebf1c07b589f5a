#include "reddot/protocol.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace reddot::protocol {

using autodiff::Tape;
using autodiff::Var;
using model::Mode;
using nlohmann::json;
using store::Role;

std::vector<Example> build_examples(
    const store::DatasetManifest& manifest, const store::RoleMatrices& matrices,
    const std::map<std::string, retrieval::EvidenceBundle>& bundles) {
  const store::EmbeddingMatrix& text_claims = matrices.at(Role::text_claim);
  const store::EmbeddingMatrix& image_claims = matrices.at(Role::image_claim);

  std::vector<Example> examples;
  examples.reserve(manifest.pairs.size());
  for (const auto& pair : manifest.pairs) {
    Example ex;
    ex.pair_id = pair.pair_id;
    ex.verdict = pair.verdict;
    ex.f_img = image_claims.row(pair.image_id).transpose();
    ex.f_txt = text_claims.row(pair.text_id).transpose();
    auto it = bundles.find(pair.pair_id);
    if (it != bundles.end()) {
      ex.bundle = it->second;
    } else {
      ex.bundle.pair_id = pair.pair_id;
      ex.bundle.evidence_features.resize(0, ex.f_img.size());
    }
    examples.push_back(std::move(ex));
  }
  return examples;
}

namespace {

// Verdict prediction for a block of examples; dropout off, predicted masks.
std::vector<int> predict_verdicts(const ModelF& model, const std::vector<Example>& examples) {
  std::vector<int> predictions;
  predictions.reserve(examples.size());
  Rng rng(0);  // unused in inference mode
  constexpr size_t kChunk = 64;
  for (size_t begin = 0; begin < examples.size(); begin += kChunk) {
    const size_t end = std::min(begin + kChunk, examples.size());
    Tape<float> tape(false);
    model::ModelBinding<float> binding = model.bind(tape, false);
    for (size_t i = begin; i < end; ++i) {
      const Example& ex = examples[i];
      const MatrixF fused = fusion::fuse<float>(ex.f_img, ex.f_txt, model.config().fusion);
      auto out = model.forward(tape, binding, fused, ex.bundle.evidence_features,
                               ex.bundle.relevance_labels, Mode::infer, rng);
      const float logit = out.verdict_logit.scalar();
      if (!std::isfinite(logit)) {
        throw NumericalError("inference produced a non-finite verdict logit for pair " +
                             ex.pair_id);
      }
      predictions.push_back(logit > 0.0f ? 1 : 0);
    }
  }
  return predictions;
}

double population_std(const std::vector<double>& values) {
  if (values.empty()) return 0.0;
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= static_cast<double>(values.size());
  double var = 0.0;
  for (double v : values) var += (v - mean) * (v - mean);
  return std::sqrt(var / static_cast<double>(values.size()));
}

json history_to_json(const std::vector<EpochStats>& history) {
  json out = json::array();
  for (const auto& h : history) {
    out.push_back({{"epoch", h.epoch}, {"train_loss", h.train_loss},
                   {"val_accuracy", h.val_accuracy}});
  }
  return out;
}

uint64_t config_hash(const json& model_config, const json& train_config) {
  const std::string blob = model_config.dump() + "|" + train_config.dump();
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : blob) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

void check_disjoint(const std::vector<Example>& a, const std::vector<Example>& b,
                    const char* what) {
  std::set<std::string> ids;
  for (const auto& ex : a) ids.insert(ex.pair_id);
  for (const auto& ex : b) {
    if (ids.count(ex.pair_id)) {
      throw DataError(std::string("overlapping splits (") + what + "): pair " + ex.pair_id);
    }
  }
}

}  // namespace

TrainResult train(ModelF& model, const std::vector<Example>& train_set,
                  const std::vector<Example>& val_set, const TrainConfig& config) {
  config.validate();
  if (train_set.empty()) throw ConfigError("train: empty training set");
  if (val_set.empty()) throw ConfigError("train: empty validation set");

  const autodiff::AdamConfig adam = config.adam();
  const int n = static_cast<int>(train_set.size());

  // Fusion tokens are constant per example; compute them once.
  std::vector<MatrixF> fused(train_set.size());
  for (size_t i = 0; i < train_set.size(); ++i) {
    fused[i] = fusion::fuse<float>(train_set[i].f_img, train_set[i].f_txt, model.config().fusion);
  }

  TrainResult result;
  EarlyStopping stopper(config.patience);

  for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
    Rng shuffle_rng(derive_seed(config.seed, "epoch-" + std::to_string(epoch)));
    std::vector<int> order(n);
    for (int i = 0; i < n; ++i) order[i] = i;
    shuffle_rng.shuffle(order);

    double epoch_loss = 0.0;
    int batch_index = 0;
    for (int begin = 0; begin < n; begin += config.batch_size, ++batch_index) {
      const int end = std::min(begin + config.batch_size, n);
      const float inv_batch = 1.0f / static_cast<float>(end - begin);

      Tape<float> tape(false);
      model::ModelBinding<float> binding = model.bind(tape, true);
      Rng dropout_rng(derive_seed(config.seed, "dropout-" + std::to_string(epoch) + "-" +
                                                   std::to_string(batch_index)));
      Var<float> batch_loss;
      for (int b = begin; b < end; ++b) {
        const Example& ex = train_set[order[b]];
        auto out = model.forward(tape, binding, fused[order[b]], ex.bundle.evidence_features,
                                 ex.bundle.relevance_labels, Mode::train, dropout_rng,
                                 &ex.bundle.relevance_labels);
        auto loss = model::multitask_loss(out, ex.verdict, ex.bundle.relevance_labels);
        Var<float> scaled = autodiff::scale(loss.total, inv_batch);
        batch_loss = batch_loss.valid() ? add(batch_loss, scaled) : scaled;
      }
      const float loss_value = batch_loss.scalar();
      if (!std::isfinite(loss_value)) {
        throw NumericalError("training loss became non-finite at epoch " +
                             std::to_string(epoch));
      }
      epoch_loss += static_cast<double>(loss_value) * (end - begin);

      model.params().zero_grads();
      tape.run_backward(batch_loss.id);
      model.accumulate_grads(binding);
      model.params().adam_step(adam);
    }

    const double val_accuracy = evaluate_accuracy(model, val_set);
    result.history.push_back({epoch, epoch_loss / n, val_accuracy});
    result.stopped_epoch = epoch;

    if (stopper.observe(epoch, val_accuracy)) {
      result.best_params = model.params();
    }
    if (stopper.should_stop()) break;
  }
  result.best_epoch = stopper.best_epoch();
  result.best_val_accuracy = stopper.best_accuracy();
  return result;
}

double evaluate_accuracy(const ModelF& model, const std::vector<Example>& dataset,
                         EvalMode mode) {
  (void)mode;  // see EvalMode: binary verdicts keep every example in both modes
  if (dataset.empty()) throw ConfigError("evaluate_accuracy: empty dataset");
  const std::vector<int> predictions = predict_verdicts(model, dataset);
  int correct = 0;
  for (size_t i = 0; i < dataset.size(); ++i) {
    correct += predictions[i] == dataset[i].verdict;
  }
  return static_cast<double>(correct) / static_cast<double>(dataset.size());
}

double evaluate_relevance_accuracy(const ModelF& model, const std::vector<Example>& dataset) {
  if (dataset.empty()) throw ConfigError("evaluate_relevance_accuracy: empty dataset");
  if (model.config().variant == model::Variant::baseline) {
    throw StateError("evaluate_relevance_accuracy: baseline has no relevance output");
  }
  Rng rng(0);
  int correct = 0;
  int total = 0;
  constexpr size_t kChunk = 64;
  for (size_t begin = 0; begin < dataset.size(); begin += kChunk) {
    const size_t end = std::min(begin + kChunk, dataset.size());
    Tape<float> tape(false);
    model::ModelBinding<float> binding = model.bind(tape, false);
    for (size_t i = begin; i < end; ++i) {
      const Example& ex = dataset[i];
      const MatrixF fused = fusion::fuse<float>(ex.f_img, ex.f_txt, model.config().fusion);
      auto out = model.forward(tape, binding, fused, ex.bundle.evidence_features,
                               ex.bundle.relevance_labels, Mode::infer, rng);
      for (Eigen::Index s = 0; s < out.relevance_scores.rows(); ++s) {
        const double p = autodiff::detail::stable_sigmoid(
            static_cast<double>(out.relevance_scores.value()(s, 0)));
        const int predicted = p > model.config().inference_mask_threshold ? 1 : 0;
        correct += predicted == ex.bundle.relevance_labels[s];
        ++total;
      }
    }
  }
  if (total == 0) throw ConfigError("evaluate_relevance_accuracy: no evidence slots");
  return static_cast<double>(correct) / static_cast<double>(total);
}

json ProtocolRun::to_json() const {
  json out;
  out["kind"] = kind;
  out["model_config"] = model_config;
  out["train_config"] = train_config;
  out["config_hash"] = config_hash(model_config, train_config);
  if (kind == "id_v") {
    out["val_accuracy"] = val_accuracy;
    out["test_accuracy"] = test_accuracy;
    if (external_accuracy.has_value()) out["external_accuracy"] = *external_accuracy;
    out["best_epoch"] = best_epoch;
    out["history"] = history_to_json(history);
  } else {
    out["folds"] = folds;
    out["fold_val_accuracy"] = fold_val_accuracy;
    out["fold_test_accuracy"] = fold_test_accuracy;
    out["fold_best_epoch"] = fold_best_epoch;
    json hist = json::array();
    for (const auto& h : fold_history) hist.push_back(history_to_json(h));
    out["fold_history"] = hist;
    out["mean_accuracy"] = mean_accuracy;
    out["std_accuracy"] = std_accuracy;
  }
  return out;
}

ProtocolRun run_id_v(const model::ModelConfig& model_config, const TrainConfig& train_config,
                     const std::vector<Example>& train_set, const std::vector<Example>& val_set,
                     const std::vector<Example>& test_set,
                     const std::vector<Example>& external_set) {
  check_disjoint(train_set, val_set, "train/val");
  check_disjoint(train_set, test_set, "train/test");
  check_disjoint(val_set, test_set, "val/test");

  ModelF model = ModelF::init(model_config, train_config.seed);
  TrainResult trained = train(model, train_set, val_set, train_config);

  ModelF best(model_config, trained.best_params);

  ProtocolRun run;
  run.kind = "id_v";
  run.model_config = model_config.to_json();
  run.train_config = train_config.to_json();
  run.val_accuracy = trained.best_val_accuracy;
  run.test_accuracy = evaluate_accuracy(best, test_set);
  if (!external_set.empty()) {
    run.external_accuracy = evaluate_accuracy(best, external_set, EvalMode::true_vs_ooc);
  }
  run.best_epoch = trained.best_epoch;
  run.history = trained.history;
  run.checkpoints.push_back(std::move(trained.best_params));
  return run;
}

std::vector<std::vector<size_t>> stratified_folds(const std::vector<Example>& examples,
                                                  int k_folds, uint64_t seed) {
  if (k_folds < 2) throw ConfigError("stratified_folds: need k >= 2");
  if (static_cast<int>(examples.size()) < k_folds) {
    throw ConfigError("stratified_folds: fewer items than folds");
  }
  std::vector<size_t> positives, negatives;
  for (size_t i = 0; i < examples.size(); ++i) {
    (examples[i].verdict == 1 ? positives : negatives).push_back(i);
  }
  Rng rng(derive_seed(seed, "folds"));
  rng.shuffle(positives);
  rng.shuffle(negatives);

  std::vector<std::vector<size_t>> folds(k_folds);
  // Deal round-robin with a counter continuing across label groups so both
  // fold sizes and per-fold label counts stay within one of proportional.
  size_t counter = 0;
  for (const auto* group : {&negatives, &positives}) {
    for (size_t idx : *group) folds[counter++ % k_folds].push_back(idx);
  }
  return folds;
}

ProtocolRun run_ood_cv(const model::ModelConfig& model_config, const TrainConfig& train_config,
                       const std::vector<Example>& in_dist_train,
                       const std::vector<Example>& external_set, int k_folds) {
  if (static_cast<int>(external_set.size()) < k_folds) {
    throw ConfigError("ood_cv: external set smaller than fold count");
  }
  const auto folds = stratified_folds(external_set, k_folds, train_config.seed);

  ProtocolRun run;
  run.kind = "ood_cv";
  run.model_config = model_config.to_json();
  run.train_config = train_config.to_json();

  for (int f = 0; f < k_folds; ++f) {
    std::vector<Example> val_fold, test_folds;
    std::vector<std::string> fold_ids;
    for (size_t idx : folds[f]) {
      val_fold.push_back(external_set[idx]);
      fold_ids.push_back(external_set[idx].pair_id);
    }
    for (int other = 0; other < k_folds; ++other) {
      if (other == f) continue;
      for (size_t idx : folds[other]) test_folds.push_back(external_set[idx]);
    }

    TrainConfig fold_config = train_config;
    fold_config.seed = derive_seed(train_config.seed, "fold-" + std::to_string(f));
    ModelF model = ModelF::init(model_config, fold_config.seed);
    TrainResult trained = train(model, in_dist_train, val_fold, fold_config);
    ModelF best(model_config, trained.best_params);

    run.folds.push_back(std::move(fold_ids));
    run.fold_val_accuracy.push_back(trained.best_val_accuracy);
    run.fold_test_accuracy.push_back(
        evaluate_accuracy(best, test_folds, EvalMode::true_vs_ooc));
    run.fold_best_epoch.push_back(trained.best_epoch);
    run.fold_history.push_back(trained.history);
    run.checkpoints.push_back(std::move(trained.best_params));
  }

  double mean = 0.0;
  for (double a : run.fold_test_accuracy) mean += a;
  run.mean_accuracy = mean / static_cast<double>(k_folds);
  run.std_accuracy = population_std(run.fold_test_accuracy);
  return run;
}

namespace {

// Continued-fraction evaluation of the regularized incomplete beta function
// (Lentz's algorithm).
double incomplete_beta_cf(double a, double b, double x) {
  constexpr int kMaxIter = 300;
  constexpr double kEps = 3e-14;
  constexpr double kTiny = 1e-300;

  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::abs(d) < kTiny) d = kTiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const int m2 = 2 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < kEps) break;
  }
  return h;
}

double regularized_incomplete_beta(double a, double b, double x) {
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  const double ln_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                          a * std::log(x) + b * std::log1p(-x);
  const double front = std::exp(ln_front);
  if (x < (a + 1.0) / (a + b + 2.0)) {
    return front * incomplete_beta_cf(a, b, x) / a;
  }
  return 1.0 - front * incomplete_beta_cf(b, a, 1.0 - x) / b;
}

}  // namespace

PointBiserial point_biserial(const std::vector<double>& similarities,
                             const std::vector<int>& labels) {
  const size_t n = similarities.size();
  if (labels.size() != n) throw DataError("point_biserial: array lengths differ");
  if (n < 3) throw DataError("point_biserial: need at least 3 observations");

  double sum = 0.0, sum1 = 0.0;
  size_t n1 = 0;
  for (size_t i = 0; i < n; ++i) {
    if (labels[i] != 0 && labels[i] != 1) throw DataError("point_biserial: labels must be binary");
    sum += similarities[i];
    if (labels[i] == 1) {
      sum1 += similarities[i];
      ++n1;
    }
  }
  const size_t n0 = n - n1;
  if (n1 == 0 || n0 == 0) throw DataError("point_biserial: both classes must be present");

  const double mean = sum / static_cast<double>(n);
  double var = 0.0;
  for (double s : similarities) var += (s - mean) * (s - mean);
  const double s_n = std::sqrt(var / static_cast<double>(n));
  if (s_n == 0.0) throw DataError("point_biserial: zero variance in similarities");

  const double mean1 = sum1 / static_cast<double>(n1);
  const double mean0 = (sum - sum1) / static_cast<double>(n0);
  const double r = (mean1 - mean0) / s_n *
                   std::sqrt(static_cast<double>(n1) * static_cast<double>(n0) /
                             (static_cast<double>(n) * static_cast<double>(n)));

  PointBiserial out;
  out.r = r;
  const double df = static_cast<double>(n) - 2.0;
  const double denom = 1.0 - r * r;
  if (denom <= 0.0) {
    out.p = 0.0;  // perfect separation
    return out;
  }
  const double t = r * std::sqrt(df / denom);
  out.p = regularized_incomplete_beta(df / 2.0, 0.5, df / (df + t * t));
  return out;
}

json attention_report(const ModelF& model, const Example& example) {
  if (model.config().variant == model::Variant::baseline) {
    throw StateError("attention_report: baseline has no relevance scores");
  }
  Rng rng(0);
  Tape<float> tape(true);
  model::ModelBinding<float> binding = model.bind(tape, false);
  const MatrixF fused = fusion::fuse<float>(example.f_img, example.f_txt, model.config().fusion);
  auto out = model.forward(tape, binding, fused, example.bundle.evidence_features,
                           example.bundle.relevance_labels, Mode::infer, rng);

  const double verdict_prob = autodiff::detail::stable_sigmoid(
      static_cast<double>(out.verdict_logit.scalar()));

  json slots = json::array();
  for (Eigen::Index s = 0; s < out.relevance_scores.rows(); ++s) {
    const double score = static_cast<double>(out.relevance_scores.value()(s, 0));
    const double prob = autodiff::detail::stable_sigmoid(score);
    const bool is_text = example.bundle.modality_tags[s] == retrieval::Modality::text;
    const bool relevant = example.bundle.relevance_labels[s] == 1;
    slots.push_back({{"slot", s},
                     {"tag", std::string(is_text ? "T^e" : "I^e") + (relevant ? "+" : "-")},
                     {"slot_id", example.bundle.slot_ids.empty()
                                     ? std::string{}
                                     : example.bundle.slot_ids[s]},
                     {"score", score},
                     {"probability", prob},
                     {"predicted_relevant",
                      prob > model.config().inference_mask_threshold ? 1 : 0},
                     {"label", example.bundle.relevance_labels[s]}});
  }

  json report;
  report["pair_id"] = example.pair_id;
  report["variant"] = model::variant_name(model.config().variant);
  report["verdict_probability"] = verdict_prob;
  report["predicted_verdict"] = verdict_prob > 0.5 ? 1 : 0;
  report["verdict_label"] = example.verdict;
  report["slots"] = slots;
  if (!out.applied_mask.empty()) report["applied_mask"] = out.applied_mask;
  report["ground_truth_relevance"] = example.bundle.relevance_labels;
  return report;
}

}  // namespace reddot::protocol
