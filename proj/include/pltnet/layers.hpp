#pragma once

#include <string>
#include <vector>

#include "pltnet/rng.hpp"
#include "pltnet/tensor.hpp"

namespace pltnet {

// Registry entries collected from a layer tree. Param tensors are shared
// handles, so loading through the registry updates the layer in place; state
// entries point at batch-norm running statistics.
struct NamedParam {
  std::string name;
  Tensor tensor;
};

struct NamedState {
  std::string name;
  std::vector<float>* values;
};

class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(int in_ch, int out_ch, int kernel, int stride, int padding, bool with_bias, Rng& rng);

  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, std::vector<NamedParam>& params,
               std::vector<NamedState>& state);

  Tensor weight, bias;
  int stride = 1;
  int padding = 0;
};

class BatchNorm2d {
 public:
  BatchNorm2d() = default;
  explicit BatchNorm2d(int channels);

  Tensor forward(const Tensor& x, Mode mode);
  void collect(const std::string& prefix, std::vector<NamedParam>& params,
               std::vector<NamedState>& state);

  Tensor gamma, beta;
  BatchNormState stats;
  float momentum = 0.1f;
  float epsilon = 1e-5f;
};

class Linear {
 public:
  Linear() = default;
  Linear(int in_features, int out_features, Rng& rng);

  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, std::vector<NamedParam>& params,
               std::vector<NamedState>& state);

  Tensor weight, bias;
};

// Squeeze-excitation: global average pool, bottleneck affine + relu, restore
// affine + sigmoid, per-channel rescale.
class SEBlock {
 public:
  SEBlock() = default;
  SEBlock(int channels, int reduction, Rng& rng);

  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, std::vector<NamedParam>& params,
               std::vector<NamedState>& state);

  // Largest r <= min(reduction, channels) dividing channels, so the
  // bottleneck width channels/r is integral (1 unit when channels < r).
  static int effective_reduction(int channels, int reduction);
  int64_t param_count() const;

  Linear fc1, fc2;
  int channels = 0;
  int reduction = 0;
  bool force_unit_scale = false;  // test fixture: excitation replaced by ones
};

// Spatial pyramid pooling over max-pooled floor/ceil regions. Output layout:
// levels in listed order, channels major within a level.
class SppLayer {
 public:
  SppLayer() = default;
  explicit SppLayer(std::vector<int> bins);

  Tensor forward(const Tensor& x) const;
  int64_t output_length(int64_t channels) const;

  std::vector<int> bins;
};

// BN-ReLU-Conv1x1 (4k bottleneck) then BN-ReLU-Conv3x3 (k channels).
class DenseLayer {
 public:
  DenseLayer() = default;
  DenseLayer(int in_ch, int growth, Rng& rng);

  Tensor forward(const Tensor& x, Mode mode);
  void collect(const std::string& prefix, std::vector<NamedParam>& params,
               std::vector<NamedState>& state);

  BatchNorm2d bn1, bn2;
  Conv2d conv1, conv2;
};

class DenseBlock {
 public:
  DenseBlock() = default;
  DenseBlock(int in_ch, int num_layers, int growth, Rng& rng);

  Tensor forward(const Tensor& x, Mode mode);
  void collect(const std::string& prefix, std::vector<NamedParam>& params,
               std::vector<NamedState>& state);

  int out_channels() const { return in_channels + growth * static_cast<int>(layers.size()); }

  std::vector<DenseLayer> layers;
  int in_channels = 0;
  int growth = 0;
};

// BN-ReLU-Conv1x1 halving channels (floor), then 2x2/2 average pool.
class Transition {
 public:
  Transition() = default;
  Transition(int in_ch, Rng& rng);

  Tensor forward(const Tensor& x, Mode mode);
  void collect(const std::string& prefix, std::vector<NamedParam>& params,
               std::vector<NamedState>& state);

  int out_channels() const { return static_cast<int>(conv.weight.dim(0)); }

  BatchNorm2d bn;
  Conv2d conv;
};

class ResidualBlock {
 public:
  ResidualBlock() = default;
  ResidualBlock(int in_ch, int out_ch, int stride, Rng& rng);

  Tensor forward(const Tensor& x, Mode mode);
  void collect(const std::string& prefix, std::vector<NamedParam>& params,
               std::vector<NamedState>& state);

  Conv2d conv1, conv2;
  BatchNorm2d bn1, bn2;
  bool has_projection = false;
  Conv2d proj;
  BatchNorm2d proj_bn;
};

}  // namespace pltnet
