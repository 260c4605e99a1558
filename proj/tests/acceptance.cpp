// End-to-end acceptance gates. Each numbered gate prints one [PASS]/[FAIL]
// line plus measured detail; the process exit code is the number of failed
// gates. Everything runs on the desk preset and one CPU core.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "pltnet/data.hpp"
#include "pltnet/evaluate.hpp"
#include "pltnet/experiment.hpp"
#include "pltnet/layers.hpp"
#include "pltnet/metrics.hpp"
#include "pltnet/models.hpp"
#include "pltnet/rng.hpp"
#include "pltnet/tensor.hpp"
#include "pltnet/train.hpp"

namespace fs = std::filesystem;
using namespace pltnet;

namespace {

struct Gate {
  bool ok = true;
  std::vector<std::string> notes;

  void expect(bool cond, const std::string& what) {
    if (!cond) {
      ok = false;
      notes.push_back("failed: " + what);
    }
  }
  void note(const std::string& s) { notes.push_back(s); }
};

std::string fmt(const char* pattern, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, pattern, v);
  return buf;
}

struct TempDir {
  std::string path;
  TempDir() {
    std::string tmpl = (fs::temp_directory_path() / "pltnet-accept-XXXXXX").string();
    std::vector<char> buf(tmpl.begin(), tmpl.end());
    buf.push_back('\0');
    if (!mkdtemp(buf.data())) throw std::runtime_error("mkdtemp failed");
    path = buf.data();
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
};

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::vector<std::string>> parse_csv(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    rows.push_back(std::move(cells));
  }
  return rows;
}

// relative path -> bytes for every regular file under root
std::map<std::string, std::string> read_tree(const std::string& root) {
  std::map<std::string, std::string> tree;
  for (const auto& entry : fs::recursive_directory_iterator(root)) {
    if (!entry.is_regular_file()) continue;
    tree[fs::relative(entry.path(), root).generic_string()] = slurp(entry.path().string());
  }
  return tree;
}

bool bits_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(float)) == 0;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---------------------------------------------------------------------------
// 1. gradient audit

void gate_gradients(Gate& g) {
  const auto t0 = std::chrono::steady_clock::now();
  auto rows = gradcheck_suite();
  const double elapsed = seconds_since(t0);

  const std::vector<std::string> expected{
      "conv2d",         "dense_affine",      "add",
      "mul",            "avg_pool2d",        "global_avg_pool",
      "scale_channels", "concat_channels",   "slice_channels",
      "reshape",        "sum",               "relu",
      "sigmoid",        "max_pool2d",        "adaptive_max_pool2d",
      "batchnorm2d",    "bce_loss",          "se_block",
      "spp_layer",      "dense_block",       "transition",
      "residual_block", "se_spp_densenet_bce", "se_spp_resnet18_bce"};
  for (const auto& name : expected) {
    const auto it = std::find_if(rows.begin(), rows.end(),
                                 [&](const GradCheckRow& r) { return r.name == name; });
    g.expect(it != rows.end(), "missing audit row " + name);
  }
  g.expect(rows.size() == expected.size(), "unexpected audit row count");

  double worst = 0.0;
  std::string worst_name;
  for (const auto& r : rows) {
    g.expect(r.pass, r.name + " exceeded tolerance: max rel err " + fmt("%.3e", r.max_rel_err));
    if (r.max_rel_err > worst) {
      worst = r.max_rel_err;
      worst_name = r.name;
    }
  }
  g.expect(elapsed < 120.0, "audit took " + fmt("%.1f", elapsed) + "s, budget 120s");

  // planted defect: scaling the conv input gradient must trip the audit
  test_hooks::conv_input_grad_scale = 1.02f;
  auto mutated = gradcheck_suite();
  test_hooks::conv_input_grad_scale = 1.0f;
  bool conv_flagged = false;
  int trips = 0;
  for (const auto& r : mutated) {
    if (!r.pass) {
      ++trips;
      if (r.name == "conv2d") conv_flagged = true;
    }
  }
  g.expect(conv_flagged, "planted conv gradient defect not flagged by the conv2d row");

  g.note(std::to_string(rows.size()) + " rows within tolerance, worst " + worst_name + " at " +
         fmt("%.3e", worst) + ", " + fmt("%.1f", elapsed) + "s");
  g.note("planted 1.02x conv input-gradient defect trips " + std::to_string(trips) + " rows");
}

// ---------------------------------------------------------------------------
// 2. pyramid pooling

void gate_spp(Gate& g) {
  SppLayer spp({1, 2, 4});
  g.expect(spp.output_length(3) == 63, "output_length(3) != 63");

  Rng rng(801);
  for (int size : {8, 16, 32, 224}) {
    Tensor x = Tensor::randn(Shape{2, 3, size, size}, rng);
    Tensor y = spp.forward(x);
    g.expect(y.rank() == 2 && y.dim(0) == 2 && y.dim(1) == 63,
             "output shape at " + std::to_string(size) + "px is not [2,63]");
  }
  g.note("feature length 63 for 3 channels at 8/16/32/224 px");

  // brute-force region-max oracle with floor/ceil windows
  Rng gen(802);
  int mismatches = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const int b = static_cast<int>(gen.uniform_int(1, 2));
    const int c = static_cast<int>(gen.uniform_int(1, 6));
    const int h = static_cast<int>(gen.uniform_int(4, 33));
    const int w = static_cast<int>(gen.uniform_int(4, 33));
    Tensor x = Tensor::randn(Shape{b, c, h, w}, gen);
    Tensor y = spp.forward(x);
    const int64_t total = spp.output_length(c);
    if (y.dim(0) != b || y.dim(1) != total) {
      ++mismatches;
      continue;
    }
    for (int i = 0; i < b; ++i) {
      int64_t col = 0;
      for (int bin : spp.bins) {
        for (int ch = 0; ch < c; ++ch) {
          for (int oy = 0; oy < bin; ++oy) {
            const int y0 = static_cast<int>(std::floor(double(oy) * h / bin));
            const int y1 = static_cast<int>(std::ceil(double(oy + 1) * h / bin));
            for (int ox = 0; ox < bin; ++ox) {
              const int x0 = static_cast<int>(std::floor(double(ox) * w / bin));
              const int x1 = static_cast<int>(std::ceil(double(ox + 1) * w / bin));
              float best = -std::numeric_limits<float>::infinity();
              for (int yy = y0; yy < y1; ++yy) {
                for (int xx = x0; xx < x1; ++xx) {
                  best = std::max(best, x.data()[((int64_t(i) * c + ch) * h + yy) * w + xx]);
                }
              }
              if (y.data()[i * total + col] != best) ++mismatches;
              ++col;
            }
          }
        }
      }
    }
  }
  g.expect(mismatches == 0,
           std::to_string(mismatches) + " cells disagree with the region-max oracle");
  g.note("100 fuzzed maps match the brute-force region-max oracle bit for bit");
}

// ---------------------------------------------------------------------------
// 3. squeeze-excitation

int ref_reduction(int channels, int reduction) {
  int r = std::min(reduction, channels);
  while (r > 1 && channels % r != 0) --r;
  return r;
}

int64_t ref_se_params(int channels, int reduction) {
  const int64_t hidden = channels / ref_reduction(channels, reduction);
  return 2 * hidden * channels + hidden + channels;
}

void gate_se(Gate& g) {
  Rng rng(803);
  int violations = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const int c = static_cast<int>(rng.uniform_int(1, 16));
    const int h = static_cast<int>(rng.uniform_int(1, 8));
    const int w = static_cast<int>(rng.uniform_int(1, 8));
    const int b = static_cast<int>(rng.uniform_int(1, 3));
    SEBlock se(c, 16, rng);
    Tensor x = Tensor::randn(Shape{b, c, h, w}, rng);
    Tensor y = se.forward(x);
    for (int64_t i = 0; i < x.size(); ++i) {
      if (std::fabs(y.data()[i]) > std::fabs(x.data()[i])) ++violations;
    }
  }
  g.expect(violations == 0, std::to_string(violations) + " elements grew in magnitude");
  g.note("attenuation holds elementwise on 100 fuzzed tensors");

  SEBlock unit(8, 4, rng);
  unit.force_unit_scale = true;
  Tensor x = Tensor::randn(Shape{2, 8, 5, 5}, rng);
  g.expect(bits_equal(unit.forward(x), x), "forced unit scale is not the identity");
  g.note("forced unit scale returns the input bit for bit");

  for (int c : {3, 8, 16, 48}) {
    for (int r : {2, 4, 16, 32}) {
      SEBlock se(c, r, rng);
      g.expect(se.param_count() == ref_se_params(c, r),
               "param_count mismatch at channels " + std::to_string(c) + " reduction " +
                   std::to_string(r));
    }
  }

  for (Backbone backbone : {Backbone::kDensenet, Backbone::kResnet18}) {
    for (bool use_spp : {false, true}) {
      ModelConfig on = ModelConfig::desk(backbone);
      on.input_size = 16;
      on.use_spp = use_spp;
      on.use_se = true;
      ModelConfig off = on;
      off.use_se = false;
      Model with_se(on, 5);
      Model without(off, 5);
      int64_t analytic = 0;
      for (const SEBlock* se : with_se.se_blocks()) {
        analytic += ref_se_params(se->channels, se->reduction);
      }
      const int64_t delta = with_se.count_params() - without.count_params();
      g.expect(delta == analytic,
               backbone_name(backbone) + (use_spp ? "+spp" : "") + ": param delta " +
                   std::to_string(delta) + " != analytic " + std::to_string(analytic));
    }
  }
  g.note("parameter deltas match the bottleneck formula on all four grid pairings");
}

// ---------------------------------------------------------------------------
// 4. plateau schedule and early stopping

struct RefRecipe {
  double lr;
  int patience;
  double factor;
  int early;
  double best = std::numeric_limits<double>::infinity();
  int best_epoch = 0;
  int seen = 0;
  int plateau = 0;
  int stall = 0;

  RefRecipe(double lr0, int patience_, double factor_, int early_)
      : lr(lr0), patience(patience_), factor(factor_), early(early_) {}

  RecipeDecision observe(double val_loss) {
    ++seen;
    RecipeDecision d;
    if (val_loss < best - 1e-6) {
      best = val_loss;
      best_epoch = seen;
      plateau = 0;
      stall = 0;
      d.improved = true;
      return d;
    }
    ++plateau;
    ++stall;
    if (plateau >= patience) {
      lr *= factor;
      plateau = 0;
      d.decayed = true;
    }
    if (stall >= early) d.stop = true;
    return d;
  }
};

void gate_recipe(Gate& g) {
  // ten flat epochs decay, twenty stop, improvements reset both counters
  {
    RecipeState rs(0.01, 10, 0.1, 20);
    g.expect(rs.observe(1.0).improved, "first observation did not improve");
    for (int e = 2; e <= 10; ++e) {
      const auto d = rs.observe(1.0);
      g.expect(!d.improved && !d.decayed && !d.stop,
               "premature action at stagnant epoch " + std::to_string(e - 1));
    }
    const auto d10 = rs.observe(1.0);
    g.expect(d10.decayed && !d10.stop, "no decay at the tenth stagnant epoch");
    g.expect(rs.lr() == 0.01 * 0.1, "decayed rate is not lr0*factor");
    for (int e = 12; e <= 20; ++e) {
      const auto d = rs.observe(1.0);
      g.expect(!d.decayed && !d.stop, "premature action at stagnant epoch " + std::to_string(e - 1));
    }
    const auto d20 = rs.observe(1.0);
    g.expect(d20.stop, "no stop at the twentieth stagnant epoch");
    g.expect(d20.decayed && rs.lr() == 0.01 * 0.1 * 0.1, "second decay missing at epoch 21");
    g.expect(rs.best_epoch() == 1 && rs.best_val() == 1.0, "best tracking drifted");
  }
  {
    RecipeState rs(0.01, 10, 0.1, 20);
    rs.observe(1.0);
    for (int i = 0; i < 9; ++i) rs.observe(1.0);
    const auto d = rs.observe(0.5);
    g.expect(d.improved && rs.lr() == 0.01, "improvement at stagnant epoch 9 did not reset");
    for (int i = 0; i < 9; ++i) {
      g.expect(!rs.observe(0.5).decayed, "plateau counter not reset by improvement");
    }
    g.expect(rs.observe(0.5).decayed, "decay late after an improvement reset");
  }
  g.note("decay lands on the tenth stagnant epoch, stop on the twentieth");

  Rng rng(804);
  int decays = 0, stops = 0, divergences = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    double lr0 = 0.01;
    int patience = 10, early = 20;
    double factor = 0.1;
    if (trial >= 500) {
      patience = static_cast<int>(rng.uniform_int(1, 12));
      early = static_cast<int>(rng.uniform_int(1, 30));
      factor = rng.uniform(0.1, 0.9);
      lr0 = rng.uniform(0.001, 0.1);
    }
    RecipeState rs(lr0, patience, factor, early);
    RefRecipe ref(lr0, patience, factor, early);
    for (int e = 0; e < 60; ++e) {
      const double anchor = std::isinf(ref.best) ? 1.0 + rng.uniform() : ref.best;
      const double u = rng.uniform();
      double v;
      if (u < 0.35) {
        v = anchor - rng.uniform(0.0, 0.2);
      } else if (u < 0.55) {
        v = anchor + rng.uniform(-2e-6, 2e-6);  // probe the improvement epsilon
      } else {
        v = anchor + rng.uniform(0.0, 0.5);
      }
      const auto got = rs.observe(v);
      const auto want = ref.observe(v);
      if (got.improved != want.improved || got.decayed != want.decayed ||
          got.stop != want.stop || rs.lr() != ref.lr || rs.best_val() != ref.best ||
          rs.best_epoch() != ref.best_epoch || rs.epochs_seen() != ref.seen) {
        ++divergences;
        break;
      }
      decays += want.decayed ? 1 : 0;
      if (want.stop) {
        ++stops;
        break;
      }
    }
  }
  g.expect(divergences == 0,
           std::to_string(divergences) + " traces diverge from the reference counters");
  g.note("1000 random 60-epoch traces agree exactly (" + std::to_string(decays) + " decays, " +
         std::to_string(stops) + " early stops)");
}

// ---------------------------------------------------------------------------
// 5. classification metrics

void gate_metrics(Gate& g) {
  Rng rng(805);
  double worst_gap = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    const int pos = static_cast<int>(rng.uniform_int(1, 30));
    const int neg = static_cast<int>(rng.uniform_int(1, 30));
    const int levels = static_cast<int>(rng.uniform_int(1, 12));
    std::vector<double> scores;
    std::vector<int> labels;
    for (int i = 0; i < pos + neg; ++i) {
      scores.push_back(double(rng.uniform_int(0, levels)) / levels);
      labels.push_back(i < pos ? 1 : 0);
    }
    double concordant = 0.0;
    for (int i = 0; i < pos; ++i) {
      for (int j = pos; j < pos + neg; ++j) {
        if (scores[i] > scores[j]) concordant += 1.0;
        else if (scores[i] == scores[j]) concordant += 0.5;
      }
    }
    const double expected = concordant / (double(pos) * neg);
    const double gap = std::fabs(auc(scores, labels) - expected);
    worst_gap = std::max(worst_gap, gap);
  }
  g.expect(worst_gap <= 1e-9, "trapezoid vs concordance gap " + fmt("%.2e", worst_gap));
  g.note("trapezoidal area matches pairwise concordance on 200 fuzzed score sets (worst gap " +
         fmt("%.1e", worst_gap) + ")");

  auto check_ratio = [&](const std::optional<double>& got, int64_t num, int64_t den,
                         const std::string& what) {
    if (den == 0) {
      g.expect(!got.has_value(), what + " defined with a zero denominator");
    } else {
      g.expect(got.has_value() && std::fabs(*got - double(num) / double(den)) <= 1e-12,
               what + " off its defining ratio");
    }
  };
  for (int trial = 0; trial < 200; ++trial) {
    ConfusionMatrix cm;
    cm.tp = rng.uniform_int(0, 40);
    cm.fp = rng.uniform_int(0, 40);
    cm.tn = rng.uniform_int(0, 40);
    cm.fn = rng.uniform_int(0, 40);
    const MetricSet m = metrics(cm);
    check_ratio(m.accuracy, cm.tp + cm.tn, cm.total(), "accuracy");
    check_ratio(m.sensitivity, cm.tp, cm.tp + cm.fn, "sensitivity");
    check_ratio(m.specificity, cm.tn, cm.tn + cm.fp, "specificity");
    check_ratio(m.ppv, cm.tp, cm.tp + cm.fp, "ppv");
    check_ratio(m.npv, cm.tn, cm.tn + cm.fn, "npv");
  }
  g.note("ratio identities hold on 200 fuzzed confusion matrices, zero denominators stay n/a");

  // worked example: 86/14 on positives, 96/4 on negatives
  std::vector<double> scores;
  std::vector<int> labels;
  for (int i = 0; i < 86; ++i) { scores.push_back(0.9); labels.push_back(1); }
  for (int i = 0; i < 14; ++i) { scores.push_back(0.1); labels.push_back(1); }
  for (int i = 0; i < 96; ++i) { scores.push_back(0.1); labels.push_back(0); }
  for (int i = 0; i < 4; ++i) { scores.push_back(0.9); labels.push_back(0); }
  const ConfusionMatrix cm = confusion(scores, labels, 0.5);
  g.expect(cm.tp == 86 && cm.fn == 14 && cm.tn == 96 && cm.fp == 4, "confusion counts drifted");
  const MetricSet m = metrics(cm);
  const double sens = std::round(*m.sensitivity * 100) / 100;
  const double spec = std::round(*m.specificity * 100) / 100;
  g.expect(sens == 0.86, "sensitivity " + fmt("%.4f", *m.sensitivity) + " != 0.86");
  g.expect(spec == 0.96, "specificity " + fmt("%.4f", *m.specificity) + " != 0.96");
  g.note("86/14/96/4 example lands on sensitivity 0.86, specificity 0.96");
}

// ---------------------------------------------------------------------------
// 6. ablation grid learnability

struct Table {
  std::map<std::string, std::vector<std::string>> rows;  // first cell -> full row
  std::vector<std::string> header;
};

Table load_table(const std::string& path, const std::string& key_prefix = "") {
  Table t;
  auto rows = parse_csv(slurp(path));
  if (rows.empty()) throw std::runtime_error("empty table " + path);
  t.header = rows.front();
  for (size_t i = 1; i < rows.size(); ++i) {
    std::string key = rows[i].at(0);
    if (!key_prefix.empty()) key += "|" + rows[i].at(1);
    t.rows[key] = rows[i];
  }
  return t;
}

void gate_ablation(Gate& g, const ExperimentConfig& cfg) {
  std::ostringstream log;
  const auto t0 = std::chrono::steady_clock::now();
  g.expect(run_ablate(cfg, log) == 0, "ablation run failed:\n" + log.str());
  const double elapsed = seconds_since(t0);
  g.expect(elapsed < 1200.0, "grid took " + fmt("%.0f", elapsed) + "s, budget 1200s");

  const Table t = load_table(cfg.output_dir + "/table2.csv");
  const std::vector<std::string> trained{
      "Resnet18",
      "Resnet18 + SE Block",
      "Resnet18 + SPPLayer",
      "Resnet18 + SE Block + SPPLayer",
      "DenseNet",
      "DenseNet + SE Block",
      "DenseNet + SPPLayer",
      "DenseNet + SE Block + SPPLayer"};
  for (const auto& name : trained) {
    const auto it = t.rows.find(name);
    g.expect(it != t.rows.end() && it->second.back() == "ok", name + " row missing or not ok");
  }

  const double base = std::stod(t.rows.at("DenseNet").at(7));
  const double full = std::stod(t.rows.at("DenseNet + SE Block + SPPLayer").at(7));
  g.expect(full >= 0.95, "five-fold auc " + fmt("%.4f", full) + " below 0.95");
  g.expect(full >= base - 0.02,
           "auc " + fmt("%.4f", full) + " trails the plain backbone " + fmt("%.4f", base));
  g.note("eight cells trained in " + fmt("%.0f", elapsed) + "s; auc " + fmt("%.4f", full) +
         " with SE+SPP vs " + fmt("%.4f", base) + " plain");

  CohortSpec null_spec = cfg.cohort;
  null_spec.class_signal = 0.0;
  const CvReport rep = cross_validate(generate_cohort(null_spec), cfg.model, cfg.train,
                                      cfg.k_folds);
  g.expect(rep.mean.auc.has_value(), "null cohort auc undefined");
  const double null_auc = rep.mean.auc.value_or(-1.0);
  g.expect(null_auc >= 0.4 && null_auc <= 0.6,
           "auc " + fmt("%.4f", null_auc) + " outside [0.4, 0.6] with the signal off");
  g.note("zero-signal cohort scores auc " + fmt("%.4f", null_auc));
}

// ---------------------------------------------------------------------------
// 7. modality margin

void gate_modality(Gate& g, const ExperimentConfig& cfg) {
  std::ostringstream log;
  g.expect(run_modality(cfg, log) == 0, "modality run failed:\n" + log.str());

  const Table t = load_table(cfg.output_dir + "/table3.csv", "modality");
  const auto& sm = t.rows.at("DenseNet + SE Block + SPPLayer|SM");
  const auto& mm = t.rows.at("DenseNet + SE Block + SPPLayer|MM");
  g.expect(sm.back() == "ok" && mm.back() == "ok", "modality rows not ok");
  const double sm_auc = std::stod(sm.at(7));
  const double mm_auc = std::stod(mm.at(7));
  const double margin = mm_auc - sm_auc;
  g.expect(mm_auc >= sm_auc, "both channels score below the CT channel alone");
  g.note("auc " + fmt("%.4f", mm_auc) + " with both channels vs " + fmt("%.4f", sm_auc) +
         " CT-only (margin " + fmt("%+.4f", margin) + ")");
  if (cfg.cohort.class_signal == 1.0) {
    g.expect(margin >= 0.05,
             "margin " + fmt("%.4f", margin) + " below 0.05 at full class signal");
  }
}

// ---------------------------------------------------------------------------
// 8. cohort pipeline hygiene

void gate_pipeline(Gate& g) {
  const ExperimentConfig cfg = ExperimentConfig::desk();
  const auto records = generate_cohort(cfg.cohort);

  auto class_slices = [](const std::vector<PatientRecord>& recs, int label) {
    int64_t n = 0;
    for (const auto& r : recs) {
      if (r.label == label) n += static_cast<int64_t>(r.slices.size());
    }
    return n;
  };
  const int64_t res_before = class_slices(records, 1);
  const int64_t sen_before = class_slices(records, 0);
  g.expect(res_before != sen_before, "cohort is already balanced, nothing to double");
  const int minority = res_before < sen_before ? 1 : 0;

  const auto balanced = balance_minority(records);
  g.expect(balanced.size() == records.size(), "balancing changed the patient count");
  g.expect(class_slices(balanced, minority) == 2 * class_slices(records, minority),
           "minority slice count is not exactly doubled");
  g.expect(class_slices(balanced, 1 - minority) == class_slices(records, 1 - minority),
           "majority slice count changed");
  for (size_t p = 0; p < records.size(); ++p) {
    const auto& before = records[p];
    const auto& after = balanced[p];
    g.expect(after.patient_id == before.patient_id, "patient order changed");
    if (before.label != minority) {
      g.expect(after.slices.size() == before.slices.size(), "majority patient touched");
      continue;
    }
    const size_t n = before.slices.size();
    g.expect(after.slices.size() == 2 * n, "minority patient not doubled in place");
    for (size_t k = 0; k < n && after.slices.size() == 2 * n; ++k) {
      g.expect(bits_equal(after.slices[k].ct, before.slices[k].ct) &&
                   bits_equal(after.slices[k].pet, before.slices[k].pet),
               "original slice mutated by balancing");
      g.expect(after.slices[n + k].provenance == "rotated90" &&
                   bits_equal(after.slices[n + k].ct, rotate90ccw(before.slices[k].ct)) &&
                   bits_equal(after.slices[n + k].pet, rotate90ccw(before.slices[k].pet)),
               "appended slice is not the rotated copy of its source");
    }
  }
  g.note("minority class doubled in place: " + std::to_string(res_before) + " resistant + " +
         std::to_string(sen_before) + " sensitive slices -> " +
         std::to_string(class_slices(balanced, 1)) + " + " +
         std::to_string(class_slices(balanced, 0)));

  // every patient sits in exactly one test fold and one val fold; the rest train
  const SplitPlan plan = make_split(balanced, cfg.k_folds, cfg.train.seed);
  g.expect(static_cast<int64_t>(plan.fold_of.size()) == static_cast<int64_t>(balanced.size()),
           "split plan does not cover the cohort");
  for (const auto& rec : balanced) {
    int tests = 0, vals = 0, trains = 0;
    for (int f = 0; f < cfg.k_folds; ++f) {
      switch (subset_of(plan, rec.patient_id, f)) {
        case Subset::kTest: ++tests; break;
        case Subset::kVal: ++vals; break;
        case Subset::kTrain: ++trains; break;
      }
    }
    g.expect(tests == 1 && vals == 1 && trains == cfg.k_folds - 2,
             rec.patient_id + " is not partitioned across folds");
  }

  // train-only statistics and patient-level disjointness on the live pipeline
  int folds_seen = 0;
  cross_validate(records, cfg.model, cfg.train, cfg.k_folds,
                 [&](int fold, const Model&, const TrainHistory&, const FoldData& data,
                     const FoldEvaluation&) {
                   ++folds_seen;
                   auto ids = [](const std::vector<FoldItem>& items) {
                     std::set<std::string> s;
                     for (const auto& it : items) s.insert(it.patient_id);
                     return s;
                   };
                   const auto tr = ids(data.train), va = ids(data.val), te = ids(data.test);
                   auto disjoint = [](const std::set<std::string>& a,
                                      const std::set<std::string>& b) {
                     for (const auto& id : a) {
                       if (b.count(id)) return false;
                     }
                     return true;
                   };
                   g.expect(disjoint(tr, va) && disjoint(tr, te) && disjoint(va, te),
                            "fold " + std::to_string(fold) + " shares a patient across subsets");

                   std::vector<Tensor> train_images, all_images;
                   for (const auto& it : data.train) train_images.push_back(it.image);
                   for (const auto* bucket : {&data.train, &data.val, &data.test}) {
                     for (const auto& it : *bucket) all_images.push_back(it.image);
                   }
                   const ChannelStats train_only = compute_channel_stats(train_images);
                   const ChannelStats everything = compute_channel_stats(all_images);
                   bool matches = true, leaks = true;
                   for (int ch = 0; ch < 2; ++ch) {
                     matches = matches && train_only.mean[ch] == data.stats.mean[ch] &&
                               train_only.stddev[ch] == data.stats.stddev[ch];
                     leaks = leaks && everything.mean[ch] == data.stats.mean[ch] &&
                             everything.stddev[ch] == data.stats.stddev[ch];
                   }
                   g.expect(matches, "fold " + std::to_string(fold) +
                                         " statistics differ from its training subset");
                   g.expect(!leaks, "fold " + std::to_string(fold) +
                                        " statistics match the full fold, not train only");
                 });
  g.expect(folds_seen == cfg.k_folds, "sink saw " + std::to_string(folds_seen) + " folds");
  g.note("patient partition exhaustively clean across " + std::to_string(cfg.k_folds) +
         " folds; normalization fitted on training images only");

  // the whole pipeline twice, bit for bit
  TempDir a, b;
  for (const std::string& dir : {a.path, b.path}) {
    ExperimentConfig run = cfg;
    run.output_dir = dir;
    std::ostringstream log;
    g.expect(run_gen_data(run, log) == 0 && run_train(run, log) == 0,
             "pipeline run failed:\n" + log.str());
  }
  auto ta = read_tree(a.path);
  auto tb = read_tree(b.path);
  auto strip_meta = [](std::map<std::string, std::string>& t) {
    for (auto it = t.begin(); it != t.end();) {
      it = it->first.size() >= 13 &&
                   it->first.compare(it->first.size() - 13, 13, "run_meta.json") == 0
               ? t.erase(it)
               : std::next(it);
    }
  };
  strip_meta(ta);
  strip_meta(tb);
  g.expect(!ta.empty() && ta == tb, "repeated pipeline runs are not byte-identical");
  g.note("generate -> train -> report repeated byte-identically across " +
         std::to_string(ta.size()) + " files");
}

}  // namespace

int main() {
  struct Entry {
    std::string title;
    std::function<void(Gate&)> body;
  };

  TempDir shared;
  ExperimentConfig cfg = ExperimentConfig::desk();
  cfg.output_dir = shared.path;
  bool cohort_ready = false;

  const std::vector<Entry> entries{
      {"end-to-end gradient audit", gate_gradients},
      {"pyramid pooling fixed-length contract", gate_spp},
      {"squeeze-excitation contract", gate_se},
      {"plateau schedule and early stopping", gate_recipe},
      {"classification metrics", gate_metrics},
      {"ablation grid learnability",
       [&](Gate& g) {
         std::ostringstream log;
         cohort_ready = run_gen_data(cfg, log) == 0;
         g.expect(cohort_ready, "cohort generation failed:\n" + log.str());
         if (cohort_ready) gate_ablation(g, cfg);
       }},
      {"modality margin",
       [&](Gate& g) {
         g.expect(cohort_ready, "cohort unavailable");
         if (cohort_ready) gate_modality(g, cfg);
       }},
      {"cohort pipeline hygiene", gate_pipeline},
  };

  int failures = 0;
  for (size_t i = 0; i < entries.size(); ++i) {
    Gate gate;
    try {
      entries[i].body(gate);
    } catch (const std::exception& e) {
      gate.ok = false;
      gate.note(std::string("exception: ") + e.what());
    }
    failures += gate.ok ? 0 : 1;
    std::printf("[%s] %zu. %s\n", gate.ok ? "PASS" : "FAIL", i + 1, entries[i].title.c_str());
    for (const auto& line : gate.notes) std::printf("         %s\n", line.c_str());
    std::fflush(stdout);
  }
  std::printf("%d/%zu acceptance gates passed\n", static_cast<int>(entries.size()) - failures,
              entries.size());
  return failures;
}
