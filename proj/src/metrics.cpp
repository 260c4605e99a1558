#include "pltnet/metrics.hpp"

#include <algorithm>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>

namespace pltnet {

namespace {

void check_pairs(std::span<const double> scores, std::span<const int> labels) {
  if (scores.empty()) throw std::invalid_argument("need at least one scored sample");
  if (scores.size() != labels.size()) {
    throw std::invalid_argument("scores and labels must have equal length");
  }
  for (int y : labels) {
    if (y != 0 && y != 1) {
      throw std::invalid_argument("labels must be 0 or 1, got " + std::to_string(y));
    }
  }
}

}  // namespace

ConfusionMatrix confusion(std::span<const double> scores, std::span<const int> labels,
                          double threshold) {
  check_pairs(scores, labels);
  ConfusionMatrix cm;
  for (size_t i = 0; i < scores.size(); ++i) {
    const bool positive = scores[i] >= threshold;
    if (labels[i] == 1) {
      positive ? ++cm.tp : ++cm.fn;
    } else {
      positive ? ++cm.fp : ++cm.tn;
    }
  }
  return cm;
}

MetricSet metrics(const ConfusionMatrix& cm) {
  if (cm.total() <= 0) throw std::invalid_argument("empty confusion matrix");
  auto ratio = [](int64_t num, int64_t den) -> std::optional<double> {
    if (den == 0) return std::nullopt;
    return static_cast<double>(num) / static_cast<double>(den);
  };
  MetricSet m;
  m.accuracy = ratio(cm.tp + cm.tn, cm.total());
  m.sensitivity = ratio(cm.tp, cm.tp + cm.fn);
  m.specificity = ratio(cm.tn, cm.tn + cm.fp);
  m.ppv = ratio(cm.tp, cm.tp + cm.fp);
  m.npv = ratio(cm.tn, cm.tn + cm.fn);
  return m;
}

RocCurve roc(std::span<const double> scores, std::span<const int> labels) {
  check_pairs(scores, labels);
  const int64_t pos = std::count(labels.begin(), labels.end(), 1);
  const int64_t neg = static_cast<int64_t>(labels.size()) - pos;
  if (pos == 0 || neg == 0) {
    throw std::invalid_argument("roc needs both classes present");
  }

  std::vector<size_t> order(scores.size());
  std::iota(order.begin(), order.end(), size_t{0});
  std::sort(order.begin(), order.end(),
            [&](size_t a, size_t b) { return scores[a] > scores[b]; });

  RocCurve curve;
  curve.points.push_back({std::numeric_limits<double>::infinity(), 0.0, 0.0});
  int64_t tp = 0, fp = 0;
  size_t i = 0;
  while (i < order.size()) {
    const double t = scores[order[i]];
    while (i < order.size() && scores[order[i]] == t) {
      labels[order[i]] == 1 ? ++tp : ++fp;
      ++i;
    }
    const double fpr = static_cast<double>(fp) / static_cast<double>(neg);
    const double tpr = static_cast<double>(tp) / static_cast<double>(pos);
    const RocPoint& last = curve.points.back();
    if (fpr != last.fpr || tpr != last.tpr) curve.points.push_back({t, fpr, tpr});
  }
  return curve;
}

double auc(const RocCurve& curve) {
  double area = 0.0;
  for (size_t i = 1; i < curve.points.size(); ++i) {
    const RocPoint& a = curve.points[i - 1];
    const RocPoint& b = curve.points[i];
    area += (b.fpr - a.fpr) * (a.tpr + b.tpr) * 0.5;
  }
  return area;
}

double auc(std::span<const double> scores, std::span<const int> labels) {
  return auc(roc(scores, labels));
}

}  // namespace pltnet
