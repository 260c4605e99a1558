#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "doctest.h"
#include "pltnet/data.hpp"
#include "pltnet/serialize.hpp"

using namespace pltnet;
namespace fs = std::filesystem;

namespace {

bool same_bits(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  return std::memcmp(a.data().data(), b.data().data(), sizeof(float) * a.size()) == 0;
}

fs::path fresh_dir(const std::string& leaf) {
  fs::path dir = fs::temp_directory_path() / "pltnet_data_tests" / leaf;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

CohortSpec small_spec() {
  CohortSpec spec;
  spec.n_resistant = 3;
  spec.n_sensitive = 4;
  spec.slices_min = 2;
  spec.slices_max = 3;
  spec.image_size = 12;
  spec.seed = 11;
  return spec;
}

double channel_mean(const Tensor& t) {
  double sum = 0.0;
  for (float v : t.data()) sum += v;
  return sum / static_cast<double>(t.size());
}

// Mean pixel value of one channel across every slice of a class.
double class_mean(const std::vector<PatientRecord>& records, int label, bool pet) {
  double sum = 0.0;
  int64_t n = 0;
  for (const auto& rec : records) {
    if (rec.label != label) continue;
    for (const auto& s : rec.slices) {
      const Tensor& img = pet ? s.pet : s.ct;
      for (float v : img.data()) sum += v;
      n += img.size();
    }
  }
  return sum / static_cast<double>(n);
}

}  // namespace

TEST_CASE("cohort spec validation") {
  CHECK_NOTHROW(CohortSpec{}.validate());
  CohortSpec spec;
  spec.n_resistant = 0;
  CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
  spec = CohortSpec{};
  spec.slices_min = 0;
  CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
  spec = CohortSpec{};
  spec.slices_min = 3;
  spec.slices_max = 2;
  CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
  spec = CohortSpec{};
  spec.image_size = 7;
  CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
  spec = CohortSpec{};
  spec.class_signal = 1.5;
  CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
  spec.class_signal = -0.1;
  CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
}

TEST_CASE("generated cohort has the requested shape") {
  CohortSpec spec;
  spec.image_size = 16;  // keep the full-cohort scan cheap
  auto records = generate_cohort(spec);
  REQUIRE(records.size() == 289);

  for (int i = 0; i < 289; ++i) {
    const auto& rec = records[static_cast<size_t>(i)];
    char expect[16];
    std::snprintf(expect, sizeof(expect), "P%04d", i + 1);
    CHECK(rec.patient_id == expect);
    CHECK(rec.label == (i < 97 ? 1 : 0));
    CHECK(rec.slices.size() >= 2);
    CHECK(rec.slices.size() <= 3);
    for (const auto& s : rec.slices) {
      CHECK(s.provenance == "original");
      REQUIRE(s.ct.shape() == Shape{16, 16});
      REQUIRE(s.pet.shape() == Shape{16, 16});
      for (float v : s.ct.data()) {
        CHECK(std::isfinite(v));
        CHECK(v > -1.0f);
        CHECK(v < 3.0f);
      }
      for (float v : s.pet.data()) {
        CHECK(std::isfinite(v));
        CHECK(v > -1.0f);
        CHECK(v < 3.0f);
      }
    }
  }
}

TEST_CASE("cohort generation is deterministic in the seed") {
  auto a = generate_cohort(small_spec());
  auto b = generate_cohort(small_spec());
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].patient_id == b[i].patient_id);
    CHECK(a[i].label == b[i].label);
    REQUIRE(a[i].slices.size() == b[i].slices.size());
    for (size_t j = 0; j < a[i].slices.size(); ++j) {
      CHECK(same_bits(a[i].slices[j].ct, b[i].slices[j].ct));
      CHECK(same_bits(a[i].slices[j].pet, b[i].slices[j].pet));
    }
  }

  CohortSpec other = small_spec();
  other.seed = 12;
  auto c = generate_cohort(other);
  CHECK_FALSE(same_bits(a[0].slices[0].ct, c[0].slices[0].ct));
}

TEST_CASE("label enters generation only through the signal term") {
  // With class_signal 0 the positive class must draw from the identical
  // stream: sensitive patients are bit-equal across the two settings and a
  // resistant patient's pixels change only by the (now zeroed) signal term.
  CohortSpec on = small_spec();
  CohortSpec off = small_spec();
  off.class_signal = 0.0;
  auto with_signal = generate_cohort(on);
  auto without = generate_cohort(off);

  const size_t first_sensitive = 3;  // n_resistant patients come first
  REQUIRE(with_signal[first_sensitive].label == 0);
  for (size_t j = 0; j < with_signal[first_sensitive].slices.size(); ++j) {
    CHECK(same_bits(with_signal[first_sensitive].slices[j].ct,
                    without[first_sensitive].slices[j].ct));
    CHECK(same_bits(with_signal[first_sensitive].slices[j].pet,
                    without[first_sensitive].slices[j].pet));
  }
  REQUIRE(with_signal[0].label == 1);
  CHECK_FALSE(same_bits(with_signal[0].slices[0].pet, without[0].slices[0].pet));
}

TEST_CASE("signal lifts PET strongly and CT weakly") {
  CohortSpec spec;
  spec.n_resistant = 60;
  spec.n_sensitive = 60;
  spec.image_size = 16;
  spec.seed = 5;
  auto records = generate_cohort(spec);

  const double pet_diff = class_mean(records, 1, true) - class_mean(records, 0, true);
  const double ct_diff = class_mean(records, 1, false) - class_mean(records, 0, false);
  CHECK(pet_diff > 0.04);
  CHECK(ct_diff > 0.0);
  CHECK(ct_diff < 0.5 * pet_diff);

  spec.class_signal = 0.0;
  auto blank = generate_cohort(spec);
  const double null_pet = class_mean(blank, 1, true) - class_mean(blank, 0, true);
  const double null_ct = class_mean(blank, 1, false) - class_mean(blank, 0, false);
  CHECK(std::abs(null_pet) < 0.02);
  CHECK(std::abs(null_ct) < 0.02);
}

TEST_CASE("bilinear resize is identity at matching size") {
  Rng rng(77);
  Tensor img = Tensor::randn(Shape{9, 9}, rng);
  Tensor out = resize_bilinear(img, 9);
  CHECK(same_bits(img, out));
  CHECK(out.data().data() != img.data().data());
}

TEST_CASE("bilinear resize keeps constants constant") {
  Tensor img(Shape{4, 4});
  for (float& v : img.data()) v = 0.625f;
  for (int target : {2, 3, 7, 16}) {
    Tensor out = resize_bilinear(img, target);
    REQUIRE(out.shape() == Shape{target, target});
    for (float v : out.data()) CHECK(v == doctest::Approx(0.625f).epsilon(1e-6));
  }
}

TEST_CASE("bilinear resize oracle on a 2x2 checkerboard") {
  Tensor img(Shape{2, 2}, {0.0f, 1.0f, 1.0f, 0.0f});
  Tensor out = resize_bilinear(img, 3);
  const float expect[9] = {0.0f, 0.5f, 1.0f, 0.5f, 0.5f, 0.5f, 1.0f, 0.5f, 0.0f};
  for (int i = 0; i < 9; ++i) CHECK(out.data()[i] == doctest::Approx(expect[i]).epsilon(1e-6));
}

TEST_CASE("bilinear resize reproduces linear ramps exactly") {
  Tensor img(Shape{3, 3});
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) img.data()[i * 3 + j] = static_cast<float>(i + 2 * j);
  }
  Tensor up = resize_bilinear(img, 5);
  for (int i = 0; i < 5; ++i) {
    for (int j = 0; j < 5; ++j) {
      const double y = i * 0.5, x = j * 0.5;
      CHECK(up.data()[i * 5 + j] == doctest::Approx(y + 2 * x).epsilon(1e-6));
    }
  }

  Tensor down = resize_bilinear(img, 2);  // corner alignment: picks the corners
  CHECK(down.data()[0] == doctest::Approx(0.0f));
  CHECK(down.data()[1] == doctest::Approx(4.0f));
  CHECK(down.data()[2] == doctest::Approx(2.0f));
  CHECK(down.data()[3] == doctest::Approx(6.0f));
}

TEST_CASE("bilinear resize rejects degenerate inputs") {
  CHECK_THROWS_AS(resize_bilinear(Tensor(Shape{1, 1}, {1.0f}), 4), ShapeError);
  CHECK_THROWS_AS(resize_bilinear(Tensor(Shape{1, 5}), 4), ShapeError);
  CHECK_THROWS_AS(resize_bilinear(Tensor(Shape{4, 4}), 1), ShapeError);
  CHECK_THROWS_AS(resize_bilinear(Tensor(Shape{2, 2, 2}), 4), ShapeError);
}

TEST_CASE("stack_and_resize orders channels ct then pet") {
  Sample s;
  s.ct = Tensor(Shape{2, 2}, {1.0f, 2.0f, 3.0f, 4.0f});
  s.pet = Tensor(Shape{2, 2}, {5.0f, 6.0f, 7.0f, 8.0f});
  Tensor stacked = stack_and_resize(s, 2);
  REQUIRE(stacked.shape() == Shape{2, 2, 2});
  for (int i = 0; i < 8; ++i) CHECK(stacked.data()[i] == doctest::Approx(1.0f + i));

  Tensor up = stack_and_resize(s, 3);
  REQUIRE(up.shape() == Shape{2, 3, 3});
  Tensor ct_up = resize_bilinear(s.ct, 3);
  Tensor pet_up = resize_bilinear(s.pet, 3);
  for (int i = 0; i < 9; ++i) {
    CHECK(up.data()[i] == ct_up.data()[i]);
    CHECK(up.data()[9 + i] == pet_up.data()[i]);
  }

  Sample bad;
  bad.ct = Tensor(Shape{2, 2});
  bad.pet = Tensor(Shape{3, 3});
  CHECK_THROWS_AS(stack_and_resize(bad, 4), ShapeError);
  Sample tiny;
  tiny.ct = Tensor(Shape{1, 1}, {1.0f});
  tiny.pet = Tensor(Shape{1, 1}, {1.0f});
  CHECK_THROWS_AS(stack_and_resize(tiny, 4), ShapeError);
}

TEST_CASE("rotate90ccw oracle and periodicity") {
  Tensor img(Shape{2, 2}, {1.0f, 2.0f, 3.0f, 4.0f});
  Tensor rot = rotate90ccw(img);
  CHECK(rot.data()[0] == 2.0f);
  CHECK(rot.data()[1] == 4.0f);
  CHECK(rot.data()[2] == 1.0f);
  CHECK(rot.data()[3] == 3.0f);

  Tensor rect(Shape{2, 3}, {1.0f, 2.0f, 3.0f, 4.0f, 5.0f, 6.0f});
  Tensor rrot = rotate90ccw(rect);
  REQUIRE(rrot.shape() == Shape{3, 2});
  // rightmost column becomes the top row
  CHECK(rrot.data()[0] == 3.0f);
  CHECK(rrot.data()[1] == 6.0f);
  CHECK(rrot.data()[2] == 2.0f);
  CHECK(rrot.data()[3] == 5.0f);
  CHECK(rrot.data()[4] == 1.0f);
  CHECK(rrot.data()[5] == 4.0f);

  Rng rng(3);
  Tensor big = Tensor::randn(Shape{5, 7}, rng);
  Tensor four = rotate90ccw(rotate90ccw(rotate90ccw(rotate90ccw(big))));
  CHECK(same_bits(big, four));
  CHECK_THROWS_AS(rotate90ccw(Tensor(Shape{2, 2, 2})), ShapeError);
}

TEST_CASE("flip_vertical reverses rows and counts applications") {
  const int before = test_hooks::flip_transform_calls;
  Tensor img(Shape{2, 2}, {1.0f, 2.0f, 3.0f, 4.0f});
  Tensor flip = flip_vertical(img);
  CHECK(flip.data()[0] == 3.0f);
  CHECK(flip.data()[1] == 4.0f);
  CHECK(flip.data()[2] == 1.0f);
  CHECK(flip.data()[3] == 2.0f);
  CHECK(test_hooks::flip_transform_calls == before + 1);

  Rng rng(4);
  Tensor vol = Tensor::randn(Shape{2, 3, 4}, rng);
  Tensor once = flip_vertical(vol);
  for (int c = 0; c < 2; ++c) {
    for (int y = 0; y < 3; ++y) {
      for (int x = 0; x < 4; ++x) {
        CHECK(once.data()[(c * 3 + y) * 4 + x] == vol.data()[(c * 3 + (2 - y)) * 4 + x]);
      }
    }
  }
  CHECK(same_bits(flip_vertical(once), vol));
  CHECK(test_hooks::flip_transform_calls == before + 3);
  CHECK_THROWS_AS(flip_vertical(Tensor(Shape{4})), ShapeError);
}

namespace {

PatientRecord toy_patient(const std::string& id, int label, int n_slices, float fill) {
  PatientRecord rec;
  rec.patient_id = id;
  rec.label = label;
  for (int i = 0; i < n_slices; ++i) {
    Sample s;
    s.ct = Tensor(Shape{2, 3});
    s.pet = Tensor(Shape{2, 3});
    for (int j = 0; j < 6; ++j) {
      s.ct.data()[j] = fill + static_cast<float>(j);
      s.pet.data()[j] = fill + 10.0f + static_cast<float>(j);
    }
    rec.slices.push_back(std::move(s));
  }
  return rec;
}

}  // namespace

TEST_CASE("balance_minority doubles the smaller class in place") {
  std::vector<PatientRecord> cohort;
  cohort.push_back(toy_patient("P0001", 1, 1, 0.0f));
  cohort.push_back(toy_patient("P0002", 1, 2, 5.0f));
  cohort.push_back(toy_patient("P0003", 0, 5, 9.0f));

  auto balanced = balance_minority(cohort);
  REQUIRE(balanced.size() == 3);
  CHECK(cohort[0].slices.size() == 1);  // input untouched
  CHECK(balanced[0].slices.size() == 2);
  CHECK(balanced[1].slices.size() == 4);
  CHECK(balanced[2].slices.size() == 5);
  CHECK(balanced[0].label == 1);
  CHECK(balanced[2].label == 0);

  // copies live inside the same patient, tagged, and are true rotations
  for (size_t p : {size_t{0}, size_t{1}}) {
    const size_t originals = cohort[p].slices.size();
    for (size_t i = 0; i < originals; ++i) {
      const Sample& src = balanced[p].slices[i];
      const Sample& copy = balanced[p].slices[originals + i];
      CHECK(src.provenance == "original");
      CHECK(copy.provenance == "rotated90");
      CHECK(same_bits(copy.ct, rotate90ccw(src.ct)));
      CHECK(same_bits(copy.pet, rotate90ccw(src.pet)));
    }
  }
  for (const auto& s : balanced[2].slices) CHECK(s.provenance == "original");

  // already balanced: nothing changes
  std::vector<PatientRecord> even;
  even.push_back(toy_patient("P0001", 1, 2, 0.0f));
  even.push_back(toy_patient("P0002", 0, 2, 3.0f));
  auto same = balance_minority(even);
  CHECK(same[0].slices.size() == 2);
  CHECK(same[1].slices.size() == 2);

  // majority by patients can still be minority by slices
  std::vector<PatientRecord> skew;
  skew.push_back(toy_patient("P0001", 0, 1, 0.0f));
  skew.push_back(toy_patient("P0002", 0, 1, 1.0f));
  skew.push_back(toy_patient("P0003", 1, 6, 2.0f));
  auto fixed = balance_minority(skew);
  CHECK(fixed[0].slices.size() == 2);
  CHECK(fixed[1].slices.size() == 2);
  CHECK(fixed[2].slices.size() == 6);
}

namespace {

std::vector<PatientRecord> labeled_cohort(int n_resistant, int n_sensitive) {
  std::vector<PatientRecord> records;
  int idx = 0;
  for (int i = 0; i < n_resistant; ++i) {
    records.push_back(toy_patient("R" + std::to_string(idx++), 1, 1, 0.0f));
  }
  for (int i = 0; i < n_sensitive; ++i) {
    records.push_back(toy_patient("S" + std::to_string(idx++), 0, 1, 0.0f));
  }
  return records;
}

}  // namespace

TEST_CASE("make_split balances folds and stratifies classes") {
  auto records = labeled_cohort(97, 192);
  SplitPlan plan = make_split(records, 5, 17);
  REQUIRE(plan.k == 5);
  REQUIRE(plan.fold_of.size() == 289);

  int fold_total[5] = {0};
  int fold_resistant[5] = {0};
  for (const auto& rec : records) {
    REQUIRE(plan.fold_of.count(rec.patient_id) == 1);
    const int f = plan.fold_of.at(rec.patient_id);
    REQUIRE(f >= 0);
    REQUIRE(f < 5);
    ++fold_total[f];
    if (rec.label == 1) ++fold_resistant[f];
  }
  std::multiset<int> totals(fold_total, fold_total + 5);
  std::multiset<int> resistant(fold_resistant, fold_resistant + 5);
  CHECK(totals == std::multiset<int>{57, 58, 58, 58, 58});
  CHECK(resistant == std::multiset<int>{19, 19, 19, 20, 20});

  SplitPlan again = make_split(records, 5, 17);
  CHECK(again.fold_of == plan.fold_of);
  SplitPlan other = make_split(records, 5, 18);
  CHECK(other.fold_of != plan.fold_of);
}

TEST_CASE("make_split rejects impossible requests") {
  auto records = labeled_cohort(3, 10);
  CHECK_THROWS_WITH_AS(make_split(records, 5, 1), doctest::Contains("class 1"),
                       std::invalid_argument);
  CHECK_THROWS_AS(make_split(records, 1, 1), std::invalid_argument);

  auto dup = labeled_cohort(2, 2);
  dup[1].patient_id = dup[0].patient_id;
  CHECK_THROWS_AS(make_split(dup, 2, 1), std::invalid_argument);

  auto bad = labeled_cohort(2, 2);
  bad[0].label = 7;
  CHECK_THROWS_AS(make_split(bad, 2, 1), std::invalid_argument);
}

TEST_CASE("subset_of arranges test, val, train per fold") {
  auto records = labeled_cohort(5, 5);
  SplitPlan plan = make_split(records, 5, 9);
  for (int fold = 0; fold < 5; ++fold) {
    int counts[3] = {0, 0, 0};
    for (const auto& rec : records) {
      counts[static_cast<int>(subset_of(plan, rec.patient_id, fold))]++;
    }
    CHECK(counts[static_cast<int>(Subset::kTrain)] == 6);
    CHECK(counts[static_cast<int>(Subset::kVal)] == 2);
    CHECK(counts[static_cast<int>(Subset::kTest)] == 2);
  }

  // membership rotates: each patient is tested in exactly one fold
  for (const auto& rec : records) {
    int tested = 0;
    for (int fold = 0; fold < 5; ++fold) {
      if (subset_of(plan, rec.patient_id, fold) == Subset::kTest) ++tested;
    }
    CHECK(tested == 1);
  }

  CHECK_THROWS_AS(subset_of(plan, "nobody", 0), std::invalid_argument);
  CHECK_THROWS_AS(subset_of(plan, records[0].patient_id, 5), std::invalid_argument);
  CHECK_THROWS_AS(subset_of(plan, records[0].patient_id, -1), std::invalid_argument);
}

TEST_CASE("channel stats match a hand-worked oracle") {
  Tensor a(Shape{2, 1, 2}, {1.0f, 3.0f, 0.0f, 0.0f});
  Tensor b(Shape{2, 1, 2}, {5.0f, 7.0f, 2.0f, 6.0f});
  std::vector<Tensor> images;
  images.push_back(std::move(a));
  images.push_back(std::move(b));
  ChannelStats stats = compute_channel_stats(images);
  CHECK(stats.mean[0] == doctest::Approx(4.0));
  CHECK(stats.stddev[0] == doctest::Approx(std::sqrt(5.0)));
  CHECK(stats.mean[1] == doctest::Approx(2.0));
  CHECK(stats.stddev[1] == doctest::Approx(std::sqrt(6.0)));

  CHECK_THROWS_AS(compute_channel_stats(std::span<const Tensor>{}), std::invalid_argument);
  std::vector<Tensor> bad;
  bad.push_back(Tensor(Shape{3, 2, 2}));
  CHECK_THROWS_AS(compute_channel_stats(bad), ShapeError);
}

TEST_CASE("normalize_channels applies the affine law") {
  ChannelStats stats;
  stats.mean[0] = 2.0;
  stats.stddev[0] = 4.0;
  stats.mean[1] = -1.0;
  stats.stddev[1] = 0.5;
  Tensor img(Shape{2, 1, 2}, {6.0f, 2.0f, 0.0f, -1.0f});
  Tensor out = normalize_channels(img, stats);
  CHECK(out.data()[0] == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(out.data()[1] == doctest::Approx(0.0).epsilon(1e-6));
  CHECK(out.data()[2] == doctest::Approx(2.0).epsilon(1e-6));
  CHECK(out.data()[3] == doctest::Approx(0.0).epsilon(1e-6));
  CHECK_THROWS_AS(normalize_channels(Tensor(Shape{1, 2, 2}), stats), ShapeError);
}

TEST_CASE("normalizing by own stats whitens the set") {
  Rng rng(123);
  std::vector<Tensor> images;
  for (int i = 0; i < 6; ++i) {
    Tensor img = Tensor::randn(Shape{2, 5, 5}, rng, 2.5f);
    for (float& v : img.data()) v += 1.75f;
    images.push_back(std::move(img));
  }
  ChannelStats stats = compute_channel_stats(images);
  std::vector<Tensor> normed;
  for (const auto& img : images) normed.push_back(normalize_channels(img, stats));
  ChannelStats after = compute_channel_stats(normed);
  for (int c = 0; c < 2; ++c) {
    CHECK(std::abs(after.mean[c]) < 1e-4);
    CHECK(std::abs(after.stddev[c] - 1.0) < 1e-3);
  }

  // constant channel: zero stddev must not divide by zero
  Tensor flat(Shape{2, 2, 2});
  for (float& v : flat.data()) v = 3.0f;
  std::vector<Tensor> flats;
  flats.push_back(std::move(flat));
  ChannelStats zero = compute_channel_stats(flats);
  CHECK(zero.stddev[0] == doctest::Approx(0.0));
  Tensor whitened = normalize_channels(flats[0], zero);
  for (float v : whitened.data()) {
    CHECK(std::isfinite(v));
    CHECK(v == doctest::Approx(0.0));
  }
}

TEST_CASE("train_time_augment flips then normalizes per sample") {
  Rng data_rng(55);
  Tensor batch = Tensor::randn(Shape{4, 2, 3, 3}, data_rng);
  ChannelStats stats;
  stats.mean[0] = 0.2;
  stats.stddev[0] = 1.1;
  stats.mean[1] = -0.3;
  stats.stddev[1] = 0.9;

  auto nth_sample = [&](const Tensor& b, int i) {
    Tensor s(Shape{2, 3, 3});
    std::copy_n(b.data().data() + static_cast<int64_t>(i) * 18, 18, s.data().data());
    return s;
  };

  const int before = test_hooks::flip_transform_calls;
  Rng rng0(7);
  Tensor plain = train_time_augment(batch, stats, 0.0, rng0);
  CHECK(test_hooks::flip_transform_calls == before);
  for (int i = 0; i < 4; ++i) {
    CHECK(same_bits(nth_sample(plain, i), normalize_channels(nth_sample(batch, i), stats)));
  }

  Rng rng1(7);
  Tensor flipped = train_time_augment(batch, stats, 1.0, rng1);
  CHECK(test_hooks::flip_transform_calls == before + 4);
  for (int i = 0; i < 4; ++i) {
    CHECK(same_bits(nth_sample(flipped, i),
                    normalize_channels(flip_vertical(nth_sample(batch, i)), stats)));
  }

  // the stream advances one bernoulli per sample regardless of outcome
  Rng used(99);
  train_time_augment(batch, stats, 0.0, used);
  Rng manual(99);
  for (int i = 0; i < 4; ++i) manual.bernoulli(0.0);
  CHECK(used.next_u64() == manual.next_u64());

  // mixed probability matches a hand-rolled reference
  Rng mixed(31);
  Tensor some = train_time_augment(batch, stats, 0.5, mixed);
  Rng ref(31);
  for (int i = 0; i < 4; ++i) {
    Tensor s = nth_sample(batch, i);
    if (ref.bernoulli(0.5)) s = flip_vertical(s);
    CHECK(same_bits(nth_sample(some, i), normalize_channels(s, stats)));
  }

  Rng r(1);
  CHECK_THROWS_AS(train_time_augment(Tensor(Shape{2, 3, 3}), stats, 0.5, r), ShapeError);
  CHECK_THROWS_AS(train_time_augment(Tensor(Shape{1, 3, 3, 3}), stats, 0.5, r), ShapeError);
}

TEST_CASE("cohort persistence round-trips bit-exactly") {
  fs::path dir = fresh_dir("roundtrip");
  CohortSpec spec = small_spec();
  auto records = generate_cohort(spec);
  save_cohort(dir.string(), spec, records);

  CHECK(fs::exists(dir / "cohort.json"));
  CHECK(fs::exists(dir / "P0001" / "label.txt"));
  CHECK(fs::exists(dir / "P0001" / "slice_000.ct.pltn"));
  CHECK(fs::exists(dir / "P0001" / "slice_000.pet.pltn"));
  CHECK(fs::exists(dir / "P0001" / ("slice_00" + std::to_string(records[0].slices.size() - 1) +
                                    ".ct.pltn")));
  CHECK(read_text_file((dir / "P0001" / "label.txt").string()) == "resistant\n");
  CHECK(read_text_file((dir / "P0004" / "label.txt").string()) == "sensitive\n");

  CohortSpec echoed = load_cohort_spec(dir.string());
  CHECK(echoed.n_resistant == spec.n_resistant);
  CHECK(echoed.n_sensitive == spec.n_sensitive);
  CHECK(echoed.slices_min == spec.slices_min);
  CHECK(echoed.slices_max == spec.slices_max);
  CHECK(echoed.image_size == spec.image_size);
  CHECK(echoed.class_signal == spec.class_signal);
  CHECK(echoed.seed == spec.seed);

  auto loaded = load_cohort(dir.string());
  REQUIRE(loaded.size() == records.size());
  for (size_t i = 0; i < records.size(); ++i) {
    CHECK(loaded[i].patient_id == records[i].patient_id);
    CHECK(loaded[i].label == records[i].label);
    REQUIRE(loaded[i].slices.size() == records[i].slices.size());
    for (size_t j = 0; j < records[i].slices.size(); ++j) {
      CHECK(loaded[i].slices[j].provenance == "original");
      CHECK(same_bits(loaded[i].slices[j].ct, records[i].slices[j].ct));
      CHECK(same_bits(loaded[i].slices[j].pet, records[i].slices[j].pet));
    }
  }

  // saving again over the same directory stays loadable
  save_cohort(dir.string(), spec, records);
  CHECK(load_cohort(dir.string()).size() == records.size());
}

TEST_CASE("cohort persistence rejects derived slices and broken dirs") {
  fs::path dir = fresh_dir("guards");
  CohortSpec spec = small_spec();
  auto records = generate_cohort(spec);
  auto balanced = balance_minority(records);
  CHECK_THROWS_WITH_AS(save_cohort((dir / "balanced").string(), spec, balanced),
                       doctest::Contains("raw cohorts"), std::invalid_argument);
  CHECK_FALSE(fs::exists(dir / "balanced" / "P0001"));

  CHECK_THROWS_AS(load_cohort((dir / "missing").string()), std::runtime_error);
  fs::create_directories(dir / "empty");
  CHECK_THROWS_AS(load_cohort((dir / "empty").string()), std::runtime_error);

  fs::create_directories(dir / "nometa" / "P0001");
  CHECK_THROWS_AS(load_cohort((dir / "nometa").string()), std::runtime_error);

  save_cohort((dir / "badlabel").string(), spec, records);
  atomic_write_text((dir / "badlabel" / "P0001" / "label.txt").string(), "maybe\n");
  CHECK_THROWS_WITH_AS(load_cohort((dir / "badlabel").string()), doctest::Contains("label"),
                       std::runtime_error);
}

TEST_CASE("split persistence round-trips") {
  fs::path dir = fresh_dir("split");
  auto records = labeled_cohort(6, 9);
  SplitPlan plan = make_split(records, 3, 21);
  const std::string path = (dir / "split.json").string();
  save_split(path, plan);
  SplitPlan loaded = load_split(path);
  CHECK(loaded.k == plan.k);
  CHECK(loaded.fold_of == plan.fold_of);

  atomic_write_text(path, "not json");
  CHECK_THROWS_AS(load_split(path), std::runtime_error);
  atomic_write_text(path, "{\"k\": 3}");
  CHECK_THROWS_AS(load_split(path), std::runtime_error);
  atomic_write_text(path, "{\"k\": 3, \"folds\": {\"P1\": 5}}");
  CHECK_THROWS_AS(load_split(path), std::runtime_error);
  CHECK_THROWS_AS(load_split((dir / "absent.json").string()), std::runtime_error);
}

TEST_CASE("pipeline from disk is deterministic end to end") {
  auto run_once = [](const std::string& dir) {
    CohortSpec spec = small_spec();
    auto records = generate_cohort(spec);
    save_cohort(dir, spec, records);
    auto loaded = load_cohort(dir);
    auto balanced = balance_minority(loaded);
    SplitPlan plan = make_split(balanced, 3, spec.seed);

    std::vector<Tensor> train_images;
    for (const auto& rec : balanced) {
      if (subset_of(plan, rec.patient_id, 0) != Subset::kTrain) continue;
      for (const auto& s : rec.slices) train_images.push_back(stack_and_resize(s, 16));
    }
    REQUIRE_FALSE(train_images.empty());
    ChannelStats stats = compute_channel_stats(train_images);
    return std::tuple{plan.fold_of, stats.mean[0], stats.mean[1], stats.stddev[0],
                      stats.stddev[1], train_images.size()};
  };

  auto a = run_once(fresh_dir("e2e_a").string());
  auto b = run_once(fresh_dir("e2e_b").string());
  CHECK(std::get<0>(a) == std::get<0>(b));
  CHECK(std::get<1>(a) == std::get<1>(b));
  CHECK(std::get<2>(a) == std::get<2>(b));
  CHECK(std::get<3>(a) == std::get<3>(b));
  CHECK(std::get<4>(a) == std::get<4>(b));
  CHECK(std::get<5>(a) == std::get<5>(b));
}
