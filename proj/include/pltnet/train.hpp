#pragma once

#include <cstdint>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "pltnet/data.hpp"
#include "pltnet/models.hpp"
#include "pltnet/tensor.hpp"

namespace pltnet {

struct TrainConfig {
  int epochs = 50;
  double lr0 = 0.01;
  int batch_size = 48;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  int plateau_patience = 10;
  double plateau_factor = 0.1;
  int early_stop_patience = 20;
  double flip_prob = 0.5;
  uint64_t seed = 1;

  static TrainConfig desk(Backbone backbone);
  static TrainConfig paper(Backbone backbone);

  void validate() const;
  std::vector<std::pair<std::string, std::string>> to_kv() const;
  static TrainConfig from_kv(const std::vector<std::pair<std::string, std::string>>& kv);
};

// Mean over the batch of -[y ln p + (1-y) ln(1-p)], p clamped to
// [1e-7, 1-1e-7]. Differentiable in probas; labels must be exactly 0 or 1.
Tensor bce_loss(const Tensor& probas, const Tensor& labels);

// Classic SGD with momentum, decay folded into the gradient:
// g' = g + weight_decay*w; v = momentum*v + g'; w -= lr*v.
// Parameters without an accumulated gradient are stepped with g = 0, so
// weight decay still applies.
class SgdOptimizer {
 public:
  SgdOptimizer(std::vector<NamedParam> params, double momentum, double weight_decay);

  void zero_grad();
  void step(double lr);
  size_t parameter_count() const { return params_.size(); }

 private:
  std::vector<NamedParam> params_;
  std::vector<std::vector<float>> velocity_;
  double momentum_;
  double weight_decay_;
};

struct RecipeDecision {
  bool improved = false;
  bool decayed = false;
  bool stop = false;
};

// Reduce-on-plateau plus early stopping over one shared notion of
// improvement: val_loss < best - 1e-6. The plateau counter resets on decay
// and on improvement; the stop counter resets only on improvement.
class RecipeState {
 public:
  RecipeState(double lr0, int plateau_patience, double plateau_factor, int early_stop_patience);
  explicit RecipeState(const TrainConfig& cfg)
      : RecipeState(cfg.lr0, cfg.plateau_patience, cfg.plateau_factor, cfg.early_stop_patience) {}

  RecipeDecision observe(double val_loss);

  double lr() const { return lr_; }
  double best_val() const { return best_; }
  int best_epoch() const { return best_epoch_; }
  int epochs_seen() const { return seen_; }

 private:
  double lr_;
  int patience_;
  double factor_;
  int early_;
  double best_ = std::numeric_limits<double>::infinity();
  int best_epoch_ = 0;
  int seen_ = 0;
  int plateau_ = 0;
  int stall_ = 0;
};

struct EpochStats {
  int epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_loss = 0.0;
  double lr = 0.0;  // rate in effect during this epoch
  double wall_seconds = 0.0;
};

struct TrainHistory {
  std::vector<EpochStats> epochs;
  int best_epoch = 0;
  double best_val_loss = std::numeric_limits<double>::infinity();
  std::string stop_reason = "completed";  // completed|early_stopped

  std::string to_csv() const;  // epoch,train_loss,val_loss,lr
};

struct FoldItem {
  std::string patient_id;
  int label = 0;
  Tensor image;  // [2,T,T] raw (un-normalized) stack
};

struct FoldData {
  std::vector<FoldItem> train;
  std::vector<FoldItem> val;
  std::vector<FoldItem> test;
  ChannelStats stats;  // computed from train images only
};

// Partitions already-balanced records by subset_of, stacks every slice to
// [2,image_size,image_size], and fits normalization stats on the train
// subset alone.
FoldData prepare_fold(const std::vector<PatientRecord>& records, const SplitPlan& plan, int fold,
                      int image_size);

// Copies the leading `channels` image channels of a [B,2,H,W] batch
// (channel 0 = CT), used for the CT-only arm.
Tensor take_channels(const Tensor& batch, int channels);

// Full recipe on one fold: seeded epoch shuffles, flip+normalize on train
// batches, normalize-only on val, plateau schedule, early stopping. The model
// is left holding the weights and BN statistics of the best-val epoch.
TrainHistory train_model(Model& model, const FoldData& fold, const TrainConfig& cfg);

}  // namespace pltnet
