#include "pltnet/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <stdexcept>

#include "json.hpp"
#include "pltnet/serialize.hpp"

namespace pltnet {

namespace fs = std::filesystem;
using nlohmann::json;

namespace test_hooks {
int flip_transform_calls = 0;
}

// ---------------------------------------------------------------------------
// synthetic generator

void CohortSpec::validate() const {
  if (n_resistant < 1 || n_sensitive < 1) {
    throw std::invalid_argument("cohort needs at least one patient per class");
  }
  if (slices_min < 1 || slices_max < slices_min) {
    throw std::invalid_argument("slices range must satisfy 1 <= min <= max");
  }
  if (image_size < 8) throw std::invalid_argument("image_size must be >= 8");
  if (class_signal < 0.0 || class_signal > 1.0) {
    throw std::invalid_argument("class_signal must lie in [0,1]");
  }
}

namespace {

uint64_t mix_seed(uint64_t seed, uint64_t index) {
  uint64_t z = seed + (index + 1) * 0x9E3779B97F4A7C15ull;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

// Signal layout: every patient carries one blob (the lesion) visible in both
// channels; resistance raises mainly the PET avidity of the blob, and only
// faintly its CT density, so the CT-only view is a strictly weaker signal.
constexpr double kCtBackground = 0.40;
constexpr double kCtBlob = 0.30;
constexpr double kCtSignalGain = 0.10;
constexpr double kPetBackground = 0.30;
constexpr double kPetBlob = 0.25;
constexpr double kPetSignalGain = 0.60;
constexpr double kPixelNoise = 0.05;

PatientRecord generate_patient(const CohortSpec& spec, int index, int label) {
  Rng rng(mix_seed(spec.seed, static_cast<uint64_t>(index)));
  PatientRecord rec;
  char name[16];
  std::snprintf(name, sizeof(name), "P%04d", index + 1);
  rec.patient_id = name;
  rec.label = label;

  const int size = spec.image_size;
  const double base = rng.uniform(0.85, 1.15);
  const double cx = rng.uniform(0.32, 0.68);
  const double cy = rng.uniform(0.32, 0.68);
  const double radius = rng.uniform(0.10, 0.18);
  const double avidity = rng.uniform(0.9, 1.1);
  const int n_slices = static_cast<int>(rng.uniform_int(spec.slices_min, spec.slices_max));
  const double s = spec.class_signal * static_cast<double>(label);

  rec.slices.reserve(static_cast<size_t>(n_slices));
  for (int sl = 0; sl < n_slices; ++sl) {
    const double jx = rng.uniform(-0.02, 0.02);
    const double jy = rng.uniform(-0.02, 0.02);
    const double jr = rng.uniform(-0.015, 0.015);
    const double r = radius + jr;

    Sample sample;
    sample.ct = Tensor(Shape{size, size});
    sample.pet = Tensor(Shape{size, size});
    float* ct = sample.ct.data().data();
    float* pet = sample.pet.data().data();
    for (int y = 0; y < size; ++y) {
      const double fy = static_cast<double>(y) / (size - 1);
      for (int x = 0; x < size; ++x) {
        const double fx = static_cast<double>(x) / (size - 1);
        const double dx = fx - cx - jx;
        const double dy = fy - cy - jy;
        const double g = std::exp(-(dx * dx + dy * dy) / (2.0 * r * r));
        // one texture + two noise draws per pixel, label-independent
        const double tex = rng.uniform(0.7, 1.3);
        const double nct = rng.normal() * kPixelNoise;
        const double npet = rng.normal() * kPixelNoise;
        const double ct_v = kCtBackground * base + kCtBlob * g + s * kCtSignalGain * g * tex + nct;
        const double pet_v =
            kPetBackground * base * avidity + kPetBlob * g * avidity +
            s * kPetSignalGain * g * tex * avidity + npet;
        ct[y * size + x] = static_cast<float>(ct_v);
        pet[y * size + x] = static_cast<float>(pet_v);
      }
    }
    rec.slices.push_back(std::move(sample));
  }
  return rec;
}

}  // namespace

std::vector<PatientRecord> generate_cohort(const CohortSpec& spec) {
  spec.validate();
  std::vector<PatientRecord> records;
  records.reserve(static_cast<size_t>(spec.n_resistant + spec.n_sensitive));
  int index = 0;
  for (int i = 0; i < spec.n_resistant; ++i) records.push_back(generate_patient(spec, index++, 1));
  for (int i = 0; i < spec.n_sensitive; ++i) records.push_back(generate_patient(spec, index++, 0));
  return records;
}

// ---------------------------------------------------------------------------
// geometric transforms

Tensor resize_bilinear(const Tensor& image, int target) {
  if (image.rank() != 2) {
    throw ShapeError("resize expects an [H,W] image, got " + shape_str(image.shape()));
  }
  const int64_t h = image.dim(0), w = image.dim(1);
  if (h < 2 || w < 2) {
    throw ShapeError("resize needs at least 2x2 input, got " + shape_str(image.shape()));
  }
  if (target < 2) throw ShapeError("resize target must be >= 2, got " + std::to_string(target));
  if (h == target && w == target) return image.clone();

  Tensor out(Shape{target, target});
  const float* src = image.data().data();
  float* dst = out.data().data();
  const double sy = static_cast<double>(h - 1) / (target - 1);
  const double sx = static_cast<double>(w - 1) / (target - 1);
  for (int i = 0; i < target; ++i) {
    const double y = i * sy;
    const int64_t y0 = std::min<int64_t>(static_cast<int64_t>(y), h - 2);
    const double ty = y - static_cast<double>(y0);
    for (int j = 0; j < target; ++j) {
      const double x = j * sx;
      const int64_t x0 = std::min<int64_t>(static_cast<int64_t>(x), w - 2);
      const double tx = x - static_cast<double>(x0);
      const double a = src[y0 * w + x0];
      const double b = src[y0 * w + x0 + 1];
      const double c = src[(y0 + 1) * w + x0];
      const double d = src[(y0 + 1) * w + x0 + 1];
      const double top = a + (b - a) * tx;
      const double bot = c + (d - c) * tx;
      dst[static_cast<int64_t>(i) * target + j] = static_cast<float>(top + (bot - top) * ty);
    }
  }
  return out;
}

Tensor stack_and_resize(const Sample& s, int target) {
  if (!s.ct.defined() || !s.pet.defined() || s.ct.shape() != s.pet.shape()) {
    throw ShapeError("sample channels must share one [H,W] shape");
  }
  Tensor ct = resize_bilinear(s.ct, target);
  Tensor pet = resize_bilinear(s.pet, target);
  Tensor out(Shape{2, target, target});
  std::copy(ct.data().begin(), ct.data().end(), out.data().begin());
  std::copy(pet.data().begin(), pet.data().end(),
            out.data().begin() + static_cast<int64_t>(target) * target);
  return out;
}

Tensor rotate90ccw(const Tensor& image) {
  if (image.rank() != 2) {
    throw ShapeError("rotate expects an [H,W] image, got " + shape_str(image.shape()));
  }
  const int64_t h = image.dim(0), w = image.dim(1);
  Tensor out(Shape{w, h});
  const float* src = image.data().data();
  float* dst = out.data().data();
  for (int64_t i = 0; i < w; ++i) {
    for (int64_t j = 0; j < h; ++j) {
      dst[i * h + j] = src[j * w + (w - 1 - i)];
    }
  }
  return out;
}

Tensor flip_vertical(const Tensor& image) {
  if (image.rank() != 2 && image.rank() != 3) {
    throw ShapeError("flip expects [H,W] or [C,H,W], got " + shape_str(image.shape()));
  }
  ++test_hooks::flip_transform_calls;
  const int64_t channels = image.rank() == 3 ? image.dim(0) : 1;
  const int64_t h = image.dim(image.rank() - 2);
  const int64_t w = image.dim(image.rank() - 1);
  Tensor out(image.shape());
  const float* src = image.data().data();
  float* dst = out.data().data();
  for (int64_t c = 0; c < channels; ++c) {
    for (int64_t y = 0; y < h; ++y) {
      std::copy_n(src + (c * h + y) * w, w, dst + (c * h + (h - 1 - y)) * w);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// balancing and splitting

std::vector<PatientRecord> balance_minority(const std::vector<PatientRecord>& records) {
  int64_t slices[2] = {0, 0};
  for (const auto& rec : records) {
    if (rec.label != 0 && rec.label != 1) {
      throw std::invalid_argument("labels must be 0 or 1, got " + std::to_string(rec.label));
    }
    slices[rec.label] += static_cast<int64_t>(rec.slices.size());
  }
  if (slices[0] == slices[1]) return records;
  const int minority = slices[0] < slices[1] ? 0 : 1;

  std::vector<PatientRecord> out = records;
  for (auto& rec : out) {
    if (rec.label != minority) continue;
    const size_t originals = rec.slices.size();
    rec.slices.reserve(originals * 2);
    for (size_t i = 0; i < originals; ++i) {
      Sample copy;
      copy.ct = rotate90ccw(rec.slices[i].ct);
      copy.pet = rotate90ccw(rec.slices[i].pet);
      copy.provenance = "rotated90";
      rec.slices.push_back(std::move(copy));
    }
  }
  return out;
}

SplitPlan make_split(const std::vector<PatientRecord>& records, int k, uint64_t seed) {
  if (k < 2) throw std::invalid_argument("k must be >= 2, got " + std::to_string(k));
  std::vector<std::string> by_class[2];
  for (const auto& rec : records) {
    if (rec.label != 0 && rec.label != 1) {
      throw std::invalid_argument("labels must be 0 or 1, got " + std::to_string(rec.label));
    }
    by_class[rec.label].push_back(rec.patient_id);
  }
  for (int cls : {1, 0}) {
    if (static_cast<int>(by_class[cls].size()) < k) {
      throw std::invalid_argument("k=" + std::to_string(k) + " exceeds the " +
                                  std::to_string(by_class[cls].size()) + " patients of class " +
                                  std::to_string(cls));
    }
  }

  Rng rng(seed);
  SplitPlan plan;
  plan.k = k;
  int cursor = 0;
  for (int cls : {1, 0}) {
    rng.shuffle(by_class[cls]);
    for (const auto& id : by_class[cls]) {
      if (plan.fold_of.count(id)) {
        throw std::invalid_argument("duplicate patient_id " + id);
      }
      plan.fold_of[id] = cursor % k;
      ++cursor;
    }
  }
  return plan;
}

Subset subset_of(const SplitPlan& plan, const std::string& patient_id, int fold) {
  if (fold < 0 || fold >= plan.k) {
    throw std::invalid_argument("fold " + std::to_string(fold) + " outside 0.." +
                                std::to_string(plan.k - 1));
  }
  auto it = plan.fold_of.find(patient_id);
  if (it == plan.fold_of.end()) {
    throw std::invalid_argument("patient " + patient_id + " is not in the split");
  }
  if (it->second == fold) return Subset::kTest;
  if (it->second == (fold + 1) % plan.k) return Subset::kVal;
  return Subset::kTrain;
}

// ---------------------------------------------------------------------------
// normalization and augmentation

ChannelStats compute_channel_stats(std::span<const Tensor> images) {
  if (images.empty()) throw std::invalid_argument("channel stats need at least one image");
  double sum[2] = {0.0, 0.0};
  double sumsq[2] = {0.0, 0.0};
  int64_t count = 0;
  for (const Tensor& img : images) {
    if (img.rank() != 3 || img.dim(0) != 2) {
      throw ShapeError("channel stats expect [2,H,W] images, got " + shape_str(img.shape()));
    }
    const int64_t plane = img.dim(1) * img.dim(2);
    const float* data = img.data().data();
    for (int c = 0; c < 2; ++c) {
      for (int64_t i = 0; i < plane; ++i) {
        const double v = data[c * plane + i];
        sum[c] += v;
        sumsq[c] += v * v;
      }
    }
    count += plane;
  }
  ChannelStats stats;
  for (int c = 0; c < 2; ++c) {
    stats.mean[c] = sum[c] / static_cast<double>(count);
    const double var = sumsq[c] / static_cast<double>(count) - stats.mean[c] * stats.mean[c];
    stats.stddev[c] = std::sqrt(std::max(var, 0.0));
  }
  return stats;
}

Tensor normalize_channels(const Tensor& image, const ChannelStats& stats) {
  if (image.rank() != 3 || image.dim(0) != 2) {
    throw ShapeError("normalize expects a [2,H,W] image, got " + shape_str(image.shape()));
  }
  Tensor out(image.shape());
  const int64_t plane = image.dim(1) * image.dim(2);
  const float* src = image.data().data();
  float* dst = out.data().data();
  for (int c = 0; c < 2; ++c) {
    const double mean = stats.mean[c];
    const double inv = 1.0 / (stats.stddev[c] + 1e-8);
    for (int64_t i = 0; i < plane; ++i) {
      dst[c * plane + i] = static_cast<float>((src[c * plane + i] - mean) * inv);
    }
  }
  return out;
}

Tensor train_time_augment(const Tensor& batch, const ChannelStats& stats, double flip_prob,
                          Rng& rng) {
  if (batch.rank() != 4 || batch.dim(1) != 2) {
    throw ShapeError("augment expects a [B,2,H,W] batch, got " + shape_str(batch.shape()));
  }
  const int64_t b = batch.dim(0);
  const int64_t item = batch.dim(1) * batch.dim(2) * batch.dim(3);
  Tensor out(batch.shape());
  for (int64_t i = 0; i < b; ++i) {
    Tensor sample(Shape{batch.dim(1), batch.dim(2), batch.dim(3)});
    std::copy_n(batch.data().data() + i * item, item, sample.data().data());
    const bool flip = rng.bernoulli(flip_prob);
    if (flip) sample = flip_vertical(sample);
    sample = normalize_channels(sample, stats);
    std::copy_n(sample.data().data(), item, out.data().data() + i * item);
  }
  return out;
}

// ---------------------------------------------------------------------------
// persistence

namespace {

std::string slice_stem(int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "slice_%03d", index);
  return buf;
}

}  // namespace

void save_cohort(const std::string& dir, const CohortSpec& spec,
                 const std::vector<PatientRecord>& records) {
  spec.validate();
  for (const auto& rec : records) {
    for (const auto& slice : rec.slices) {
      if (slice.provenance != "original") {
        throw std::invalid_argument("cohort directories hold raw cohorts only; patient " +
                                    rec.patient_id + " carries a '" + slice.provenance +
                                    "' slice");
      }
    }
  }

  json meta = {
      {"n_resistant", spec.n_resistant},   {"n_sensitive", spec.n_sensitive},
      {"slices_min", spec.slices_min},     {"slices_max", spec.slices_max},
      {"image_size", spec.image_size},     {"class_signal", spec.class_signal},
      {"seed", spec.seed},
  };
  atomic_write_text(dir + "/cohort.json", meta.dump(2) + "\n");

  for (const auto& rec : records) {
    const std::string pdir = dir + "/" + rec.patient_id;
    atomic_write_text(pdir + "/label.txt", rec.label == 1 ? "resistant\n" : "sensitive\n");
    for (size_t i = 0; i < rec.slices.size(); ++i) {
      const std::string stem = pdir + "/" + slice_stem(static_cast<int>(i));
      save_tensor(stem + ".ct.pltn", rec.slices[i].ct);
      save_tensor(stem + ".pet.pltn", rec.slices[i].pet);
    }
  }
}

CohortSpec load_cohort_spec(const std::string& dir) {
  json meta;
  try {
    meta = json::parse(read_text_file(dir + "/cohort.json"));
  } catch (const json::exception& e) {
    throw std::runtime_error("cannot parse " + dir + "/cohort.json: " + e.what());
  }
  CohortSpec spec;
  try {
    spec.n_resistant = meta.at("n_resistant").get<int>();
    spec.n_sensitive = meta.at("n_sensitive").get<int>();
    spec.slices_min = meta.at("slices_min").get<int>();
    spec.slices_max = meta.at("slices_max").get<int>();
    spec.image_size = meta.at("image_size").get<int>();
    spec.class_signal = meta.at("class_signal").get<double>();
    spec.seed = meta.at("seed").get<uint64_t>();
  } catch (const json::exception& e) {
    throw std::runtime_error("incomplete cohort.json in " + dir + ": " + e.what());
  }
  spec.validate();
  return spec;
}

std::vector<PatientRecord> load_cohort(const std::string& dir) {
  if (!fs::is_directory(dir)) throw std::runtime_error("no cohort directory at " + dir);
  load_cohort_spec(dir);  // insist the metadata is present and sane

  std::vector<std::string> patient_dirs;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_directory()) patient_dirs.push_back(entry.path().filename().string());
  }
  std::sort(patient_dirs.begin(), patient_dirs.end());
  if (patient_dirs.empty()) throw std::runtime_error("cohort at " + dir + " has no patients");

  std::vector<PatientRecord> records;
  records.reserve(patient_dirs.size());
  for (const auto& name : patient_dirs) {
    const std::string pdir = dir + "/" + name;
    PatientRecord rec;
    rec.patient_id = name;
    std::string label = read_text_file(pdir + "/label.txt");
    while (!label.empty() && (label.back() == '\n' || label.back() == '\r')) label.pop_back();
    if (label == "resistant") {
      rec.label = 1;
    } else if (label == "sensitive") {
      rec.label = 0;
    } else {
      throw std::runtime_error("patient " + name + " has unknown label '" + label + "'");
    }

    std::vector<std::string> stems;
    for (const auto& entry : fs::directory_iterator(pdir)) {
      const std::string file = entry.path().filename().string();
      if (file.size() > 8 && file.substr(file.size() - 8) == ".ct.pltn") {
        stems.push_back(file.substr(0, file.size() - 8));
      }
    }
    std::sort(stems.begin(), stems.end());
    if (stems.empty()) throw std::runtime_error("patient " + name + " has no slices");

    for (const auto& stem : stems) {
      Sample slice;
      slice.ct = load_tensor(pdir + "/" + stem + ".ct.pltn");
      slice.pet = load_tensor(pdir + "/" + stem + ".pet.pltn");
      if (slice.ct.shape() != slice.pet.shape()) {
        throw std::runtime_error("patient " + name + " slice " + stem +
                                 " has mismatched ct/pet shapes");
      }
      rec.slices.push_back(std::move(slice));
    }
    records.push_back(std::move(rec));
  }
  return records;
}

void save_split(const std::string& path, const SplitPlan& plan) {
  json folds = json::object();
  for (const auto& [id, fold] : plan.fold_of) folds[id] = fold;
  json doc = {{"k", plan.k}, {"folds", folds}};
  atomic_write_text(path, doc.dump(2) + "\n");
}

SplitPlan load_split(const std::string& path) {
  json doc;
  try {
    doc = json::parse(read_text_file(path));
  } catch (const json::exception& e) {
    throw std::runtime_error("cannot parse split at " + path + ": " + e.what());
  }
  SplitPlan plan;
  try {
    plan.k = doc.at("k").get<int>();
    for (const auto& [id, fold] : doc.at("folds").items()) {
      plan.fold_of[id] = fold.get<int>();
    }
  } catch (const json::exception& e) {
    throw std::runtime_error("malformed split at " + path + ": " + e.what());
  }
  if (plan.k < 2 || plan.fold_of.empty()) {
    throw std::runtime_error("split at " + path + " is degenerate");
  }
  for (const auto& [id, fold] : plan.fold_of) {
    if (fold < 0 || fold >= plan.k) {
      throw std::runtime_error("split at " + path + " sends " + id + " to fold " +
                               std::to_string(fold));
    }
  }
  return plan;
}

}  // namespace pltnet
