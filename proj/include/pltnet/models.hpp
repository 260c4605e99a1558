#pragma once

#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "pltnet/layers.hpp"
#include "pltnet/tensor.hpp"

namespace pltnet {

enum class Backbone { kDensenet, kResnet18 };

std::string backbone_name(Backbone b);
Backbone backbone_from_name(const std::string& name);

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Architecture knobs for both backbones. block_config counts dense layers per
// dense block, or residual blocks per stage; stages after the first run at
// stride 2.
struct ModelConfig {
  Backbone backbone = Backbone::kDensenet;
  bool use_se = true;
  bool use_spp = true;
  int in_channels = 2;
  std::vector<int> block_config{2, 2, 2};
  int growth_rate = 8;
  int init_features = 16;
  std::vector<int> spp_bins{1, 2, 4};
  int se_reduction = 16;
  std::string scale_preset = "desk";
  int input_size = 64;

  static ModelConfig desk(Backbone b);
  static ModelConfig paper(Backbone b);

  void validate() const;

  // Stem downsampling times one halving per transition / stride-2 stage.
  int total_downsample() const;
  int max_spp_bin() const;
  // Smallest admissible square input edge for this architecture.
  int min_input_size() const;

  // Ordered key=value echo; from_kv rejects unknown or missing keys.
  std::vector<std::pair<std::string, std::string>> to_kv() const;
  static ModelConfig from_kv(const std::vector<std::pair<std::string, std::string>>& kv);
};

struct ModelImpl;

// A built classifier: stem, backbone body with optional SE blocks, SPP or
// global-average head, one logit out. Movable, not copyable; the parameter
// registry stays valid across moves.
class Model {
 public:
  Model();
  Model(const ModelConfig& cfg, uint64_t seed);
  Model(Model&&) noexcept;
  Model& operator=(Model&&) noexcept;
  ~Model();

  bool built() const { return impl_ != nullptr; }
  const ModelConfig& config() const;

  Tensor forward(const Tensor& batch, Mode mode);
  // sigmoid of eval-mode logits
  Tensor predict_proba(const Tensor& batch);

  std::vector<NamedParam>& parameters();
  const std::vector<NamedParam>& parameters() const;
  std::vector<NamedState>& bn_state();
  std::vector<SEBlock*> se_blocks();

  int64_t count_params() const;
  void set_tracked(bool tracked);

  // Checkpoint directory: manifest.txt (config echo + name->offset table) and
  // params.bin (concatenated tensor records, parameters then running stats).
  void save_checkpoint(const std::string& dir) const;
  static Model load_checkpoint(const std::string& dir);

 private:
  std::unique_ptr<ModelImpl> impl_;
};

}  // namespace pltnet
