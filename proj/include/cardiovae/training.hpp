#pragma once

// Adam, tri-stream pre-training, frozen-encoder fine-tuning, stratified
// cross-validation and the lambda grid search.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "cardiovae/data.hpp"
#include "cardiovae/model.hpp"
#include "cardiovae/objectives.hpp"

namespace cardiovae {

/// SplitMix64 finalizer over (seed, tag); independent streams per purpose.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag);

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct OptimState {
  AdamConfig cfg;
  std::size_t step = 0;
  std::map<std::string, Tensor> m, v;
};

/// One bias-corrected Adam update of every tensor named in `grads`; other
/// tensors are left alone. Moments are created lazily.
void adam_step(std::map<std::string, Tensor>& params, const std::map<std::string, Tensor>& grads, OptimState& state);

struct RunConfig {
  std::size_t batch_size = 128;
  std::size_t epochs = 100;
  std::uint64_t seed = 0;
  StreamMode streams = StreamMode::tri;
  Modality modality = Modality::joint;
  double val_fraction = 0.1;  // pre-training hold-out; 0 trains on everything
  AdamConfig adam;

  static RunConfig finetune_defaults();
  void validate() const;
};

struct HistoryRow {
  std::size_t epoch = 0;  // 1-based
  std::string split;      // "train" or "val"
  double beta = 0;
  LossBreakdown loss;
};

/// Header: epoch,split,beta,<LossBreakdown fields>,total. Numbers use %.17g.
std::string history_csv(const std::vector<HistoryRow>& rows);
void write_history_csv(const std::filesystem::path& path, const std::vector<HistoryRow>& rows);

struct PretrainResult {
  Checkpoint final_checkpoint;
  Checkpoint best_checkpoint;  // lowest validation -total (the final one without validation)
  std::size_t best_epoch = 0;
  std::vector<HistoryRow> history;
};

/// Training and validation indices used by pretrain for `run`.
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> pretrain_split(std::size_t n, const RunConfig& run);

/// Minibatch Adam on -total (mean over each batch); beta advances per step.
PretrainResult pretrain(const Dataset& ds, const ArchConfig& arch, const ObjectiveConfig& obj, const RunConfig& run,
                        std::ostream* progress = nullptr);

/// Mean per-sample breakdown over `ds` with noise drawn from `noise_seed`.
LossBreakdown evaluate_loss(const Model& m, const Dataset& ds, const std::vector<std::size_t>& indices, double beta,
                            const ObjectiveConfig& obj, StreamMode mode, std::uint64_t noise_seed);

struct FinetuneRow {
  std::size_t epoch = 0;
  double train_bce = 0;
  double train_accuracy = 0;
};

struct FinetuneResult {
  ModelParams params;  // encoder and decoder tensors are the input's, bitwise
  std::vector<FinetuneRow> history;
};

/// Posterior-mean features of every sample under `modality`.
std::vector<std::vector<float>> extract_dataset_features(const Model& m, const Dataset& ds, Modality modality);

/// Re-draws the head from `run.seed` and trains it with BCE on fixed features.
FinetuneResult finetune_features(const Model& m, const std::vector<std::vector<float>>& features,
                                 const std::vector<int>& labels, const RunConfig& run);

FinetuneResult finetune(const Model& m, const Dataset& labeled, const RunConfig& run);

/// Eval-mode logits of the head on fixed features.
std::vector<double> head_logits(const Model& m, const std::vector<std::vector<float>>& features);

struct FoldResult {
  std::size_t fold = 0;
  double auroc = 0;     // on the fold's 20% validation slice
  double accuracy = 0;
  std::size_t n_train = 0, n_val = 0;
  std::vector<double> loss_curve;  // training BCE per epoch
};

struct CvResult {
  std::vector<FoldResult> folds;
  double auroc_mean = 0, auroc_std = 0;  // std with n-1 denominator
  double accuracy_mean = 0, accuracy_std = 0;
};

/// Stratified k folds; each fold's remaining samples are split 80:20 into
/// fine-tuning and validation data, and the validation slice is scored.
CvResult cross_validate(const Model& m, const Dataset& labeled, const RunConfig& run, std::size_t k = 10,
                        std::ostream* progress = nullptr);

std::string cv_csv(const CvResult& r);

struct GridCell {
  double lambda_cxr = 1, lambda_ecg = 1;
  double val_neg_total = 0;  // final-epoch validation -total
};

struct GridResult {
  GridCell best;
  std::vector<GridCell> table;  // in input order
};

/// Lowest val_neg_total; ties go to the lexicographically smallest (lambda_cxr, lambda_ecg).
GridCell select_grid_cell(const std::vector<GridCell>& table);

/// Short pre-training per cell (run settings as given), then select_grid_cell.
GridResult grid_search_lambda(const Dataset& ds, const std::vector<std::pair<double, double>>& grid,
                              const ArchConfig& arch, const ObjectiveConfig& obj, const RunConfig& run,
                              std::ostream* progress = nullptr);

}  // namespace cardiovae
