#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

namespace pltnet {

// Positive class: platinum-resistant (label 1).
struct ConfusionMatrix {
  int64_t tp = 0;
  int64_t fp = 0;
  int64_t tn = 0;
  int64_t fn = 0;

  int64_t total() const { return tp + fp + tn + fn; }
};

// Predict positive iff score >= threshold.
ConfusionMatrix confusion(std::span<const double> scores, std::span<const int> labels,
                          double threshold = 0.5);

// Metrics with zero denominators stay disengaged ("n/a" downstream), never 0.
struct MetricSet {
  std::optional<double> accuracy;
  std::optional<double> sensitivity;
  std::optional<double> specificity;
  std::optional<double> ppv;
  std::optional<double> npv;
  std::optional<double> auc;
};

// Fills everything except auc.
MetricSet metrics(const ConfusionMatrix& cm);

struct RocPoint {
  double threshold = 0.0;  // +inf sentinel on the (0,0) anchor
  double fpr = 0.0;
  double tpr = 0.0;
};

// Threshold sweep over the unique scores (descending) behind a +inf anchor;
// consecutive duplicate (fpr,tpr) points collapse onto the earliest
// threshold. Starts at (0,0), ends at (1,1), fpr non-decreasing.
struct RocCurve {
  std::vector<RocPoint> points;
};

RocCurve roc(std::span<const double> scores, std::span<const int> labels);

// Trapezoidal area; equals P(score+ > score-) + 0.5 P(tie).
double auc(const RocCurve& curve);
double auc(std::span<const double> scores, std::span<const int> labels);

}  // namespace pltnet
