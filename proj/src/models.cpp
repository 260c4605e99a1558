#include "pltnet/models.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>

#include "pltnet/rng.hpp"
#include "pltnet/serialize.hpp"

namespace pltnet {

std::string backbone_name(Backbone b) {
  return b == Backbone::kDensenet ? "densenet" : "resnet18";
}

Backbone backbone_from_name(const std::string& name) {
  if (name == "densenet") return Backbone::kDensenet;
  if (name == "resnet18") return Backbone::kResnet18;
  throw ConfigError("unknown backbone '" + name + "', expected densenet or resnet18");
}

// ---------------------------------------------------------------------------
// ModelConfig

ModelConfig ModelConfig::desk(Backbone b) {
  ModelConfig cfg;
  cfg.backbone = b;
  cfg.block_config = {2, 2, 2};
  cfg.growth_rate = 8;
  cfg.init_features = 16;
  cfg.scale_preset = "desk";
  cfg.input_size = 64;
  return cfg;
}

ModelConfig ModelConfig::paper(Backbone b) {
  ModelConfig cfg;
  cfg.backbone = b;
  if (b == Backbone::kDensenet) {
    cfg.block_config = {6, 12, 24, 16};
    cfg.growth_rate = 32;
  } else {
    cfg.block_config = {2, 2, 2, 2};
    cfg.growth_rate = 32;
  }
  cfg.init_features = 64;
  cfg.scale_preset = "paper";
  cfg.input_size = 224;
  return cfg;
}

int ModelConfig::total_downsample() const {
  const int stem = scale_preset == "paper" ? 4 : 1;
  return stem * (1 << (static_cast<int>(block_config.size()) - 1));
}

int ModelConfig::max_spp_bin() const {
  int m = 1;
  for (const int b : spp_bins) m = std::max(m, b);
  return m;
}

int ModelConfig::min_input_size() const {
  return total_downsample() * (use_spp ? max_spp_bin() : 1);
}

void ModelConfig::validate() const {
  if (in_channels != 1 && in_channels != 2) {
    throw ConfigError("in_channels must be 1 (CT only) or 2 (PET+CT), got " +
                      std::to_string(in_channels));
  }
  if (block_config.empty()) throw ConfigError("block_config must list at least one block");
  if (block_config.size() > 6) throw ConfigError("block_config is implausibly deep");
  for (const int n : block_config) {
    if (n < 1) throw ConfigError("block_config entries must be >= 1, got " + std::to_string(n));
  }
  if (growth_rate < 1) throw ConfigError("growth_rate must be >= 1");
  if (init_features < 2) throw ConfigError("init_features must be >= 2");
  if (se_reduction < 1) throw ConfigError("se_reduction must be >= 1");
  if (use_spp) {
    if (spp_bins.empty()) throw ConfigError("spp_bins must list at least one level");
    for (const int b : spp_bins) {
      if (b < 1) throw ConfigError("spp_bins entries must be >= 1, got " + std::to_string(b));
    }
  }
  if (scale_preset != "desk" && scale_preset != "paper") {
    throw ConfigError("scale_preset must be desk or paper, got '" + scale_preset + "'");
  }
  if (input_size < min_input_size()) {
    throw ConfigError("input_size " + std::to_string(input_size) + " is below the minimum " +
                      std::to_string(min_input_size()) + " for this architecture");
  }
  if (input_size % total_downsample() != 0) {
    throw ConfigError("input_size " + std::to_string(input_size) + " must be divisible by " +
                      std::to_string(total_downsample()));
  }
}

namespace {

std::string join_ints(const std::vector<int>& xs) {
  std::string out;
  for (size_t i = 0; i < xs.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(xs[i]);
  }
  return out;
}

std::vector<int> split_ints(const std::string& key, const std::string& text) {
  std::vector<int> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      size_t used = 0;
      const int v = std::stoi(item, &used);
      if (used != item.size()) throw std::invalid_argument(item);
      out.push_back(v);
    } catch (const std::exception&) {
      throw ConfigError(key + ": cannot parse '" + item + "' as an integer");
    }
  }
  if (out.empty()) throw ConfigError(key + ": empty list");
  return out;
}

int parse_int(const std::string& key, const std::string& text) {
  try {
    size_t used = 0;
    const int v = std::stoi(text, &used);
    if (used != text.size()) throw std::invalid_argument(text);
    return v;
  } catch (const std::exception&) {
    throw ConfigError(key + ": cannot parse '" + text + "' as an integer");
  }
}

bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "1" || text == "true") return true;
  if (text == "0" || text == "false") return false;
  throw ConfigError(key + ": cannot parse '" + text + "' as a bool");
}

}  // namespace

std::vector<std::pair<std::string, std::string>> ModelConfig::to_kv() const {
  return {
      {"backbone", backbone_name(backbone)},
      {"use_se", use_se ? "1" : "0"},
      {"use_spp", use_spp ? "1" : "0"},
      {"in_channels", std::to_string(in_channels)},
      {"block_config", join_ints(block_config)},
      {"growth_rate", std::to_string(growth_rate)},
      {"init_features", std::to_string(init_features)},
      {"spp_bins", join_ints(spp_bins)},
      {"se_reduction", std::to_string(se_reduction)},
      {"scale_preset", scale_preset},
      {"input_size", std::to_string(input_size)},
  };
}

ModelConfig ModelConfig::from_kv(const std::vector<std::pair<std::string, std::string>>& kv) {
  ModelConfig cfg;
  std::map<std::string, bool> seen;
  for (const auto& [key, value] : kv) {
    if (seen[key]) throw ConfigError("duplicate model key '" + key + "'");
    seen[key] = true;
    if (key == "backbone") {
      cfg.backbone = backbone_from_name(value);
    } else if (key == "use_se") {
      cfg.use_se = parse_bool(key, value);
    } else if (key == "use_spp") {
      cfg.use_spp = parse_bool(key, value);
    } else if (key == "in_channels") {
      cfg.in_channels = parse_int(key, value);
    } else if (key == "block_config") {
      cfg.block_config = split_ints(key, value);
    } else if (key == "growth_rate") {
      cfg.growth_rate = parse_int(key, value);
    } else if (key == "init_features") {
      cfg.init_features = parse_int(key, value);
    } else if (key == "spp_bins") {
      cfg.spp_bins = split_ints(key, value);
    } else if (key == "se_reduction") {
      cfg.se_reduction = parse_int(key, value);
    } else if (key == "scale_preset") {
      cfg.scale_preset = value;
    } else if (key == "input_size") {
      cfg.input_size = parse_int(key, value);
    } else {
      throw ConfigError("unknown model key '" + key + "'");
    }
  }
  for (const char* key : {"backbone", "use_se", "use_spp", "in_channels", "block_config",
                          "growth_rate", "init_features", "spp_bins", "se_reduction",
                          "scale_preset", "input_size"}) {
    if (!seen[key]) throw ConfigError(std::string("missing model key '") + key + "'");
  }
  cfg.validate();
  return cfg;
}

// ---------------------------------------------------------------------------
// Model

struct ModelImpl {
  ModelConfig cfg;

  Conv2d stem_conv;
  BatchNorm2d stem_bn;
  bool stem_pool = false;

  std::vector<DenseBlock> dense_blocks;
  std::vector<Transition> transitions;
  BatchNorm2d final_bn;

  std::vector<std::vector<ResidualBlock>> stages;

  // one per dense block, or flattened per residual block, when use_se
  std::vector<SEBlock> se;
  std::vector<std::vector<SEBlock>> stage_se;

  SppLayer spp;
  Linear fc;
  int feature_channels = 0;

  std::vector<NamedParam> params;
  std::vector<NamedState> state;

  ModelImpl(const ModelConfig& cfg_in, uint64_t seed) : cfg(cfg_in) {
    cfg.validate();
    Rng rng(seed);

    const bool paper_stem = cfg.scale_preset == "paper";
    stem_conv = paper_stem ? Conv2d(cfg.in_channels, cfg.init_features, 7, 2, 3, false, rng)
                           : Conv2d(cfg.in_channels, cfg.init_features, 3, 1, 1, false, rng);
    stem_bn = BatchNorm2d(cfg.init_features);
    stem_pool = paper_stem;

    int channels = cfg.init_features;
    if (cfg.backbone == Backbone::kDensenet) {
      const int n = static_cast<int>(cfg.block_config.size());
      for (int i = 0; i < n; ++i) {
        dense_blocks.emplace_back(channels, cfg.block_config[static_cast<size_t>(i)],
                                  cfg.growth_rate, rng);
        channels = dense_blocks.back().out_channels();
        if (cfg.use_se) se.emplace_back(channels, cfg.se_reduction, rng);
        if (i + 1 < n) {
          transitions.emplace_back(channels, rng);
          channels = transitions.back().out_channels();
        }
      }
      final_bn = BatchNorm2d(channels);
    } else {
      const int n = static_cast<int>(cfg.block_config.size());
      stages.resize(static_cast<size_t>(n));
      if (cfg.use_se) stage_se.resize(static_cast<size_t>(n));
      for (int s = 0; s < n; ++s) {
        const int width = cfg.init_features << s;
        const int stage_stride = s == 0 ? 1 : 2;
        for (int b = 0; b < cfg.block_config[static_cast<size_t>(s)]; ++b) {
          stages[static_cast<size_t>(s)].emplace_back(channels, width, b == 0 ? stage_stride : 1,
                                                      rng);
          channels = width;
          if (cfg.use_se) stage_se[static_cast<size_t>(s)].emplace_back(width, cfg.se_reduction, rng);
        }
      }
    }
    feature_channels = channels;

    if (cfg.use_spp) spp = SppLayer(cfg.spp_bins);
    const int head_in = cfg.use_spp ? static_cast<int>(spp.output_length(channels)) : channels;
    fc = Linear(head_in, 1, rng);

    collect();
  }

  void collect() {
    params.clear();
    state.clear();
    stem_conv.collect("stem.conv", params, state);
    stem_bn.collect("stem.bn", params, state);
    if (cfg.backbone == Backbone::kDensenet) {
      for (size_t i = 0; i < dense_blocks.size(); ++i) {
        const std::string idx = std::to_string(i + 1);
        dense_blocks[i].collect("block" + idx, params, state);
        if (cfg.use_se) se[i].collect("se" + idx, params, state);
        if (i < transitions.size()) transitions[i].collect("trans" + idx, params, state);
      }
      final_bn.collect("final_bn", params, state);
    } else {
      for (size_t s = 0; s < stages.size(); ++s) {
        for (size_t b = 0; b < stages[s].size(); ++b) {
          const std::string prefix = "stage" + std::to_string(s + 1);
          stages[s][b].collect(prefix + ".block" + std::to_string(b + 1), params, state);
          if (cfg.use_se) stage_se[s][b].collect(prefix + ".se" + std::to_string(b + 1), params, state);
        }
      }
    }
    fc.collect("head.fc", params, state);
  }

  void check_input(const Tensor& x) const {
    if (x.rank() != 4) {
      throw ShapeError("model input must be [B,C,H,W], got " + shape_str(x.shape()));
    }
    const int64_t ch = x.dim(1);
    if (ch != cfg.in_channels) {
      if ((ch == 1 || ch == 2) && (cfg.in_channels == 1 || cfg.in_channels == 2)) {
        const char* want = cfg.in_channels == 2 ? "2-channel PET+CT multimodal" : "1-channel CT-only";
        const char* got = ch == 2 ? "2-channel PET+CT multimodal" : "1-channel CT-only";
        throw ShapeError(std::string("modality mismatch: model expects ") + want +
                         " input but batch is " + got);
      }
      throw ShapeError("channel mismatch: model expects " + std::to_string(cfg.in_channels) +
                       " channels, got " + shape_str(x.shape()));
    }
    const int64_t h = x.dim(2), w = x.dim(3);
    if (!cfg.use_spp) {
      if (h != cfg.input_size || w != cfg.input_size) {
        throw ShapeError("global-average head requires exactly " + std::to_string(cfg.input_size) +
                         "x" + std::to_string(cfg.input_size) + " inputs, got " +
                         shape_str(x.shape()));
      }
      return;
    }
    const int min_side = cfg.min_input_size();
    if (h < min_side || w < min_side) {
      throw ShapeError("spp head requires inputs of at least " + std::to_string(min_side) + "x" +
                       std::to_string(min_side) + ", got " + shape_str(x.shape()));
    }
    if (cfg.backbone == Backbone::kDensenet) {
      const int ds = cfg.total_downsample();
      if (h % ds != 0 || w % ds != 0) {
        throw ShapeError("densenet transitions require H and W divisible by " +
                         std::to_string(ds) + ", got " + shape_str(x.shape()));
      }
    }
  }

  Tensor forward(const Tensor& x, Mode mode) {
    check_input(x);
    Tensor h = relu(stem_bn.forward(stem_conv.forward(x), mode));
    if (stem_pool) h = pool2d(h, PoolMode::kMax, 3, 2, 1);

    if (cfg.backbone == Backbone::kDensenet) {
      for (size_t i = 0; i < dense_blocks.size(); ++i) {
        h = dense_blocks[i].forward(h, mode);
        if (cfg.use_se) h = se[i].forward(h);
        if (i < transitions.size()) h = transitions[i].forward(h, mode);
      }
      h = relu(final_bn.forward(h, mode));
    } else {
      for (size_t s = 0; s < stages.size(); ++s) {
        for (size_t b = 0; b < stages[s].size(); ++b) {
          h = stages[s][b].forward(h, mode);
          if (cfg.use_se) h = stage_se[s][b].forward(h);
        }
      }
    }

    Tensor feat = cfg.use_spp ? spp.forward(h) : global_avg_pool(h);
    return fc.forward(feat);
  }

  std::vector<SEBlock*> se_blocks() {
    std::vector<SEBlock*> out;
    for (auto& block : se) out.push_back(&block);
    for (auto& stage : stage_se) {
      for (auto& block : stage) out.push_back(&block);
    }
    return out;
  }
};

Model::Model() = default;
Model::Model(Model&&) noexcept = default;
Model& Model::operator=(Model&&) noexcept = default;
Model::~Model() = default;

Model::Model(const ModelConfig& cfg, uint64_t seed) : impl_(std::make_unique<ModelImpl>(cfg, seed)) {}

namespace {

ModelImpl& require_built(const std::unique_ptr<ModelImpl>& impl) {
  if (!impl) throw std::logic_error("model is not built");
  return *impl;
}

}  // namespace

const ModelConfig& Model::config() const { return require_built(impl_).cfg; }

Tensor Model::forward(const Tensor& batch, Mode mode) {
  return require_built(impl_).forward(batch, mode);
}

Tensor Model::predict_proba(const Tensor& batch) {
  return sigmoid(require_built(impl_).forward(batch, Mode::kEval));
}

std::vector<NamedParam>& Model::parameters() { return require_built(impl_).params; }
const std::vector<NamedParam>& Model::parameters() const { return require_built(impl_).params; }
std::vector<NamedState>& Model::bn_state() { return require_built(impl_).state; }
std::vector<SEBlock*> Model::se_blocks() { return require_built(impl_).se_blocks(); }

int64_t Model::count_params() const {
  int64_t total = 0;
  for (const auto& p : require_built(impl_).params) total += p.tensor.size();
  return total;
}

void Model::set_tracked(bool tracked) {
  for (auto& p : require_built(impl_).params) p.tensor.set_tracked(tracked);
}

void Model::save_checkpoint(const std::string& dir) const {
  ModelImpl& m = require_built(impl_);
  std::ostringstream blob(std::ios::binary);
  std::vector<std::pair<std::string, int64_t>> offsets;
  for (const auto& p : m.params) {
    offsets.emplace_back(p.name, static_cast<int64_t>(blob.tellp()));
    write_tensor(blob, p.tensor);
  }
  for (const auto& s : m.state) {
    offsets.emplace_back(s.name, static_cast<int64_t>(blob.tellp()));
    write_tensor(blob, Tensor(Shape{static_cast<int64_t>(s.values->size())}, *s.values));
  }

  std::ostringstream manifest;
  manifest << "pltnet-checkpoint v1\n[config]\n";
  for (const auto& [key, value] : m.cfg.to_kv()) manifest << key << "=" << value << "\n";
  manifest << "[tensors]\n";
  for (const auto& [name, offset] : offsets) manifest << name << " " << offset << "\n";

  atomic_write_bytes(dir + "/params.bin", blob.str());
  atomic_write_text(dir + "/manifest.txt", manifest.str());
}

Model Model::load_checkpoint(const std::string& dir) {
  const std::string text = read_text_file(dir + "/manifest.txt");
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "pltnet-checkpoint v1") {
    throw std::runtime_error("checkpoint: unrecognized manifest header in " + dir);
  }

  std::vector<std::pair<std::string, std::string>> kv;
  std::map<std::string, int64_t> offsets;
  int section = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line == "[config]") {
      section = 1;
      continue;
    }
    if (line == "[tensors]") {
      section = 2;
      continue;
    }
    if (section == 1) {
      const size_t eq = line.find('=');
      if (eq == std::string::npos) throw std::runtime_error("checkpoint: bad config line " + line);
      kv.emplace_back(line.substr(0, eq), line.substr(eq + 1));
    } else if (section == 2) {
      const size_t sp = line.rfind(' ');
      if (sp == std::string::npos) throw std::runtime_error("checkpoint: bad tensor line " + line);
      offsets[line.substr(0, sp)] = std::stoll(line.substr(sp + 1));
    } else {
      throw std::runtime_error("checkpoint: content outside any manifest section: " + line);
    }
  }

  Model model(ModelConfig::from_kv(kv), 0);

  std::ifstream blob(dir + "/params.bin", std::ios::binary);
  if (!blob) throw std::runtime_error("checkpoint: cannot open " + dir + "/params.bin");
  auto fetch = [&](const std::string& name, const Shape& expect) {
    auto it = offsets.find(name);
    if (it == offsets.end()) throw std::runtime_error("checkpoint: missing tensor " + name);
    blob.clear();
    blob.seekg(it->second);
    Tensor t = read_tensor(blob);
    if (t.shape() != expect) throw std::runtime_error("checkpoint: shape mismatch for " + name);
    return t;
  };

  for (auto& p : model.parameters()) {
    Tensor t = fetch(p.name, p.tensor.shape());
    std::copy(t.data().begin(), t.data().end(), p.tensor.data().begin());
  }
  for (auto& s : model.bn_state()) {
    Tensor t = fetch(s.name, Shape{static_cast<int64_t>(s.values->size())});
    s.values->assign(t.data().begin(), t.data().end());
  }
  if (offsets.size() != model.parameters().size() + model.bn_state().size()) {
    throw std::runtime_error("checkpoint: manifest lists tensors unknown to this architecture");
  }
  return model;
}

}  // namespace pltnet
