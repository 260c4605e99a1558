#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "pltnet/rng.hpp"
#include "pltnet/tensor.hpp"

namespace pltnet {

// One axial ROI slice. ct/pet are [H,W] with matching extents.
struct Sample {
  Tensor ct;
  Tensor pet;
  std::string provenance = "original";  // original|rotated90|flipped
};

struct PatientRecord {
  std::string patient_id;
  int label = 0;  // 1 = platinum-resistant (positive class), 0 = sensitive
  std::vector<Sample> slices;
};

// Knobs for the synthetic cohort generator. class_signal in [0,1] controls
// how separable the classes are; 0 makes the label draw from the identical
// distribution as the negatives.
struct CohortSpec {
  int n_resistant = 97;
  int n_sensitive = 192;
  int slices_min = 2;
  int slices_max = 3;
  int image_size = 64;
  double class_signal = 1.0;
  uint64_t seed = 1;

  void validate() const;
};

std::vector<PatientRecord> generate_cohort(const CohortSpec& spec);

// Corner-aligned bilinear resample of a square-or-rectangular [H,W] image to
// [target,target]. Identity when the size already matches.
Tensor resize_bilinear(const Tensor& image, int target);

// [2,target,target] with channel 0 = CT, channel 1 = PET.
Tensor stack_and_resize(const Sample& s, int target);

Tensor rotate90ccw(const Tensor& image);

// Reverses row order. Accepts [H,W] or [C,H,W].
Tensor flip_vertical(const Tensor& image);

// Doubles every slice of whichever class holds fewer slices by appending a
// 90deg-rotated copy inside the same patient. No-op when already balanced.
std::vector<PatientRecord> balance_minority(const std::vector<PatientRecord>& records);

struct SplitPlan {
  int k = 0;
  std::map<std::string, int> fold_of;
};

// Stratified patient-level folds: each class is shuffled and dealt round-robin
// with a cursor that rolls from one class into the next, keeping fold sizes
// within one patient of each other overall and per class.
SplitPlan make_split(const std::vector<PatientRecord>& records, int k, uint64_t seed);

enum class Subset { kTrain, kVal, kTest };

// Fold arrangement: test = fold f, val = fold (f+1) mod k, train = the rest.
Subset subset_of(const SplitPlan& plan, const std::string& patient_id, int fold);

// Per-channel statistics over a set of stacked [2,H,W] images; stddev is the
// population form.
struct ChannelStats {
  double mean[2] = {0.0, 0.0};
  double stddev[2] = {0.0, 0.0};
};

ChannelStats compute_channel_stats(std::span<const Tensor> images);

// (x - mean_c) / (stddev_c + 1e-8), channel-wise on a [2,H,W] image.
Tensor normalize_channels(const Tensor& image, const ChannelStats& stats);

// Training-time transform for a [B,2,H,W] batch: each sample is independently
// vertical-flipped with flip_prob, then normalized. The rng stream advances
// one bernoulli per sample regardless of outcome.
Tensor train_time_augment(const Tensor& batch, const ChannelStats& stats, double flip_prob,
                          Rng& rng);

namespace test_hooks {
// Counts flip_vertical applications; lets tests prove eval paths never augment.
extern int flip_transform_calls;
}  // namespace test_hooks

// On-disk cohort: P0001/label.txt + slice_000.ct.pltn/.pet.pltn per slice,
// cohort.json at the root. Only raw (provenance=original) cohorts may be
// persisted; balancing is an in-memory training-side step.
void save_cohort(const std::string& dir, const CohortSpec& spec,
                 const std::vector<PatientRecord>& records);
std::vector<PatientRecord> load_cohort(const std::string& dir);
CohortSpec load_cohort_spec(const std::string& dir);

void save_split(const std::string& path, const SplitPlan& plan);
SplitPlan load_split(const std::string& path);

}  // namespace pltnet
