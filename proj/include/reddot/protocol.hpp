#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "reddot/model.hpp"
#include "reddot/retrieval.hpp"
#include "reddot/store.hpp"

namespace reddot::protocol {

using ModelF = model::RedDotModel<float>;

struct TrainConfig {
  double lr = 1e-4;
  int max_epochs = 100;
  int patience = 10;
  int batch_size = 512;
  uint64_t seed = 0;

  autodiff::AdamConfig adam() const {
    autodiff::AdamConfig cfg;
    cfg.lr = lr;
    return cfg;
  }

  void validate() const {
    if (max_epochs < 1) throw ConfigError("train: max_epochs must be >= 1");
    if (patience < 1 || patience > max_epochs) {
      throw ConfigError("train: patience must lie in [1, max_epochs]");
    }
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (lr < 0.0) throw ConfigError("train: lr must be non-negative");
  }

  nlohmann::json to_json() const {
    return nlohmann::json{{"lr", lr},
                          {"max_epochs", max_epochs},
                          {"patience", patience},
                          {"batch_size", batch_size},
                          {"seed", seed}};
  }
};

// One claim pair ready for the model: raw claim features plus its evidence
// bundle (full bundle for training, relevant-only for external evaluation).
struct Example {
  std::string pair_id;
  int verdict = 0;
  VectorF f_img;
  VectorF f_txt;
  retrieval::EvidenceBundle bundle;
};

// Joins a manifest with claim features and per-pair bundles. Pairs without an
// entry in `bundles` get an empty bundle (valid only for m = k = 0 models).
std::vector<Example> build_examples(
    const store::DatasetManifest& manifest, const store::RoleMatrices& matrices,
    const std::map<std::string, retrieval::EvidenceBundle>& bundles);

struct EpochStats {
  int epoch = 0;
  double train_loss = 0.0;
  double val_accuracy = 0.0;
};

// Checkpoint-on-strict-improvement bookkeeping shared by the training loop.
struct EarlyStopping {
  explicit EarlyStopping(int patience) : patience_(patience) {}

  // Returns true when this epoch strictly improves the best accuracy.
  bool observe(int epoch, double accuracy) {
    if (accuracy > best_accuracy_) {
      best_accuracy_ = accuracy;
      best_epoch_ = epoch;
      epochs_without_improvement_ = 0;
      return true;
    }
    ++epochs_without_improvement_;
    return false;
  }

  bool should_stop() const { return epochs_without_improvement_ >= patience_; }
  int best_epoch() const { return best_epoch_; }
  double best_accuracy() const { return best_accuracy_; }

 private:
  int patience_;
  double best_accuracy_ = -1.0;
  int best_epoch_ = 0;
  int epochs_without_improvement_ = 0;
};

struct TrainResult {
  autodiff::ParameterSet<float> best_params;
  int best_epoch = 0;
  double best_val_accuracy = 0.0;
  int stopped_epoch = 0;
  std::vector<EpochStats> history;
};

// Seeded epoch shuffling, Adam on the mean multitask loss per batch,
// checkpoint on strict validation-accuracy improvement, stop after `patience`
// epochs without improvement. Returns the best checkpoint, never the last.
TrainResult train(ModelF& model, const std::vector<Example>& train_set,
                  const std::vector<Example>& val_set, const TrainConfig& config);

enum class EvalMode {
  standard,
  // Restricts to truthful and out-of-context items. With binary verdicts both
  // classes already qualify, so this keeps every example; the mode exists so
  // external-benchmark reports are explicit about what they measure.
  true_vs_ooc,
};

double evaluate_accuracy(const ModelF& model, const std::vector<Example>& dataset,
                         EvalMode mode = EvalMode::standard);

// Fraction of evidence slots whose thresholded relevance prediction matches
// the bundle label. Not defined for the baseline.
double evaluate_relevance_accuracy(const ModelF& model, const std::vector<Example>& dataset);

struct ProtocolRun {
  std::string kind;  // "id_v" | "ood_cv"
  nlohmann::json model_config;
  nlohmann::json train_config;

  // id_v
  double val_accuracy = 0.0;
  double test_accuracy = 0.0;
  std::optional<double> external_accuracy;
  std::vector<EpochStats> history;
  int best_epoch = 0;

  // ood_cv
  std::vector<std::vector<std::string>> folds;  // pair ids per fold
  std::vector<double> fold_val_accuracy;
  std::vector<double> fold_test_accuracy;
  std::vector<int> fold_best_epoch;
  std::vector<std::vector<EpochStats>> fold_history;
  double mean_accuracy = 0.0;
  double std_accuracy = 0.0;  // population standard deviation over folds

  // Checkpoints produced by the run (one for id_v, one per fold for ood_cv).
  std::vector<autodiff::ParameterSet<float>> checkpoints;

  nlohmann::json to_json() const;
};

// Train once with in-distribution validation/checkpointing, report in-dist
// test accuracy plus a single external accuracy when an external set exists.
ProtocolRun run_id_v(const model::ModelConfig& model_config, const TrainConfig& train_config,
                     const std::vector<Example>& train_set, const std::vector<Example>& val_set,
                     const std::vector<Example>& test_set,
                     const std::vector<Example>& external_set);

// k seeded label-stratified folds over the external set; per fold: train on
// the in-distribution training set, checkpoint on the fold, test on the
// remaining folds. Reports per-fold accuracies, their mean and population std.
ProtocolRun run_ood_cv(const model::ModelConfig& model_config, const TrainConfig& train_config,
                       const std::vector<Example>& in_dist_train,
                       const std::vector<Example>& external_set, int k_folds = 3);

// Seeded stratified partition: disjoint, exhaustive, per-fold label counts
// within one item of proportional.
std::vector<std::vector<size_t>> stratified_folds(const std::vector<Example>& examples,
                                                  int k_folds, uint64_t seed);

struct PointBiserial {
  double r = 0.0;
  double p = 1.0;
};

// r = (mean1 - mean0)/s_n * sqrt(n1*n0/n^2) with population std s_n; p from
// the two-sided t-test with n-2 degrees of freedom.
PointBiserial point_biserial(const std::vector<double>& similarities,
                             const std::vector<int>& labels);

// Per-slot relevance scores, predicted mask and verdict probability for one
// example, as JSON for inspection.
nlohmann::json attention_report(const ModelF& model, const Example& example);

}  // namespace reddot::protocol
