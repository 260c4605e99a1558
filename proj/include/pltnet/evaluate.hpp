#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "pltnet/data.hpp"
#include "pltnet/metrics.hpp"
#include "pltnet/models.hpp"
#include "pltnet/train.hpp"

namespace pltnet {

struct ScoredImage {
  std::string patient_id;
  int label = 0;
  double score = 0.0;
};

// Image-level metrics are canonical; patient-level folds every patient's
// slices into one decision (majority vote at 0.5, ties -> positive) and one
// score (mean slice probability, used for the patient AUC).
struct FoldEvaluation {
  std::vector<ScoredImage> images;
  MetricSet image_metrics;
  MetricSet patient_metrics;
  RocCurve roc_curve;  // image-level; empty when only one class is present
};

// Scores the fold's test images in eval mode (normalization only, never
// augmentation) and assembles both metric views.
FoldEvaluation evaluate_fold(Model& model, const FoldData& fold, int batch_size);

// Elementwise mean and population standard deviation over the folds in which
// each metric is defined.
std::pair<MetricSet, MetricSet> aggregate_metrics(const std::vector<MetricSet>& folds);

struct CvReport {
  int k = 0;
  SplitPlan plan;
  std::vector<MetricSet> folds;          // image-level per fold
  std::vector<MetricSet> patient_folds;  // patient-level per fold
  MetricSet mean;
  MetricSet stddev;
  MetricSet patient_mean;
  MetricSet patient_stddev;
  std::vector<std::pair<std::string, std::string>> config_echo;
};

using FoldSink = std::function<void(int fold, const Model& model, const TrainHistory& history,
                                    const FoldData& data, const FoldEvaluation& eval)>;

// Balances the cohort, splits it into k patient-level folds (split seed =
// train_cfg.seed), then trains and evaluates every fold with per-fold seeds
// train_cfg.seed + fold. Training errors are rethrown tagged with the fold.
CvReport cross_validate(const std::vector<PatientRecord>& cohort, const ModelConfig& model_cfg,
                        const TrainConfig& train_cfg, int k, const FoldSink& sink = {});

}  // namespace pltnet
