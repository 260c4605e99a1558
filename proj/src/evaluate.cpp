#include "pltnet/evaluate.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <stdexcept>

namespace pltnet {

namespace {

bool both_classes(const std::vector<int>& labels) {
  bool pos = false, neg = false;
  for (int y : labels) (y == 1 ? pos : neg) = true;
  return pos && neg;
}

}  // namespace

FoldEvaluation evaluate_fold(Model& model, const FoldData& fold, int batch_size) {
  if (fold.test.empty()) throw std::invalid_argument("fold has no test images");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be positive");
  const int in_channels = model.config().in_channels;

  FoldEvaluation out;
  out.images.reserve(fold.test.size());
  for (size_t start = 0; start < fold.test.size(); start += static_cast<size_t>(batch_size)) {
    const size_t stop = std::min(fold.test.size(), start + static_cast<size_t>(batch_size));
    const Tensor& first = fold.test[start].image;
    const int64_t b = static_cast<int64_t>(stop - start);
    Tensor batch(Shape{b, 2, first.dim(1), first.dim(2)});
    for (size_t i = start; i < stop; ++i) {
      Tensor norm = normalize_channels(fold.test[i].image, fold.stats);
      std::copy_n(norm.data().data(), norm.size(),
                  batch.data().data() + static_cast<int64_t>(i - start) * norm.size());
    }
    Tensor x = in_channels < 2 ? take_channels(batch, in_channels) : batch;
    Tensor probas = model.predict_proba(x);
    for (size_t i = start; i < stop; ++i) {
      out.images.push_back({fold.test[i].patient_id, fold.test[i].label,
                            static_cast<double>(probas.data()[i - start])});
    }
  }

  std::vector<double> scores;
  std::vector<int> labels;
  for (const auto& img : out.images) {
    scores.push_back(img.score);
    labels.push_back(img.label);
  }
  out.image_metrics = metrics(confusion(scores, labels));
  if (both_classes(labels)) {
    out.roc_curve = roc(scores, labels);
    out.image_metrics.auc = auc(out.roc_curve);
  }

  // collapse to patients
  struct Tally {
    int label = 0;
    int slices = 0;
    int positive_votes = 0;
    double score_sum = 0.0;
  };
  std::map<std::string, Tally> patients;
  for (const auto& img : out.images) {
    Tally& t = patients[img.patient_id];
    t.label = img.label;
    ++t.slices;
    if (img.score >= 0.5) ++t.positive_votes;
    t.score_sum += img.score;
  }
  std::vector<double> vote_scores, mean_scores;
  std::vector<int> patient_labels;
  for (const auto& [id, t] : patients) {
    const bool vote_positive = 2 * t.positive_votes >= t.slices;  // ties -> positive
    vote_scores.push_back(vote_positive ? 1.0 : 0.0);
    mean_scores.push_back(t.score_sum / t.slices);
    patient_labels.push_back(t.label);
  }
  out.patient_metrics = metrics(confusion(vote_scores, patient_labels));
  if (both_classes(patient_labels)) {
    out.patient_metrics.auc = auc(mean_scores, patient_labels);
  }
  return out;
}

std::pair<MetricSet, MetricSet> aggregate_metrics(const std::vector<MetricSet>& folds) {
  auto field = [](MetricSet& m) {
    return std::array{&m.accuracy, &m.sensitivity, &m.specificity, &m.ppv, &m.npv, &m.auc};
  };
  auto cfield = [](const MetricSet& m) {
    return std::array{&m.accuracy, &m.sensitivity, &m.specificity, &m.ppv, &m.npv, &m.auc};
  };

  MetricSet mean, stddev;
  auto mean_f = field(mean);
  auto std_f = field(stddev);
  for (size_t j = 0; j < mean_f.size(); ++j) {
    std::vector<double> values;
    for (const MetricSet& fold : folds) {
      const auto& v = *cfield(fold)[j];
      if (v) values.push_back(*v);
    }
    if (values.empty()) continue;
    double sum = 0.0;
    for (double v : values) sum += v;
    const double mu = sum / static_cast<double>(values.size());
    double var = 0.0;
    for (double v : values) var += (v - mu) * (v - mu);
    *mean_f[j] = mu;
    *std_f[j] = std::sqrt(var / static_cast<double>(values.size()));
  }
  return {mean, stddev};
}

CvReport cross_validate(const std::vector<PatientRecord>& cohort, const ModelConfig& model_cfg,
                        const TrainConfig& train_cfg, int k, const FoldSink& sink) {
  model_cfg.validate();
  train_cfg.validate();

  CvReport report;
  report.k = k;
  const std::vector<PatientRecord> balanced = balance_minority(cohort);
  report.plan = make_split(balanced, k, train_cfg.seed);

  for (int fold = 0; fold < k; ++fold) {
    try {
      FoldData data = prepare_fold(balanced, report.plan, fold, model_cfg.input_size);
      Model model(model_cfg, train_cfg.seed + static_cast<uint64_t>(fold));
      TrainConfig fold_cfg = train_cfg;
      fold_cfg.seed = train_cfg.seed + static_cast<uint64_t>(fold);
      TrainHistory history = train_model(model, data, fold_cfg);
      FoldEvaluation eval = evaluate_fold(model, data, fold_cfg.batch_size);
      report.folds.push_back(eval.image_metrics);
      report.patient_folds.push_back(eval.patient_metrics);
      if (sink) sink(fold, model, history, data, eval);
    } catch (const std::exception& e) {
      throw std::runtime_error("fold " + std::to_string(fold) + ": " + e.what());
    }
  }

  std::tie(report.mean, report.stddev) = aggregate_metrics(report.folds);
  std::tie(report.patient_mean, report.patient_stddev) = aggregate_metrics(report.patient_folds);

  for (const auto& [key, value] : model_cfg.to_kv()) report.config_echo.push_back({"model." + key, value});
  for (const auto& [key, value] : train_cfg.to_kv()) report.config_echo.push_back({"train." + key, value});
  report.config_echo.push_back({"k_folds", std::to_string(k)});
  return report;
}

}  // namespace pltnet
