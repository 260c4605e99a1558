#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "pltnet/data.hpp"
#include "pltnet/evaluate.hpp"
#include "pltnet/models.hpp"
#include "pltnet/train.hpp"

namespace pltnet {

enum class Modality { kMultimodal, kCtOnly };

std::string modality_name(Modality m);
Modality modality_from_name(const std::string& name);

// One experiment, fully described. The modality knob owns the stem width:
// ct_only keeps channel 0 (CT) and forces in_channels = 1, multimodal
// forces 2.
struct ExperimentConfig {
  CohortSpec cohort;
  ModelConfig model;
  TrainConfig train;
  int k_folds = 5;
  Modality modality = Modality::kMultimodal;
  std::string output_dir = "out";

  static ExperimentConfig desk();
  static ExperimentConfig paper();

  void apply_modality();
  void validate() const;
};

// Sectioned key=value text ([cohort] [model] [train] [experiment]); rendering
// echoes every knob so a run is self-describing. Parsing starts from `base`,
// overrides the keys present, and rejects unknown sections or keys.
std::string render_config(const ExperimentConfig& cfg);
ExperimentConfig parse_config(const std::string& text, ExperimentConfig base);
ExperimentConfig load_config_file(const std::string& path, const ExperimentConfig& base);

// Deterministic run directory name, e.g. "densenet_se_spp_mm_k5_s1".
std::string run_slug(const ExperimentConfig& cfg);

// Cohort location inside the output directory, shared by gen-data (writer)
// and the training commands (readers).
std::string cohort_dir(const ExperimentConfig& cfg);

struct GradCheckRow {
  std::string name;
  double max_rel_err = 0.0;
  double tolerance = 0.0;
  bool pass = false;
};

// One finite-difference audit per differentiable primitive, per composite
// block, and per full desk model under BCE. Linear ops are held to 1e-6,
// everything with a nonlinearity to 1e-3.
std::vector<GradCheckRow> gradcheck_suite();

// Subcommand bodies; log lines go to `log`. Returned values are process exit
// codes: 0 ok, 1 invalid configuration, 2 runtime failure.
int run_gen_data(const ExperimentConfig& cfg, std::ostream& log);
int run_train(const ExperimentConfig& cfg, std::ostream& log);
int run_ablate(const ExperimentConfig& cfg, std::ostream& log);
int run_modality(const ExperimentConfig& cfg, std::ostream& log);
int run_gradcheck(std::ostream& log);

}  // namespace pltnet
