#include "pltnet/layers.hpp"

#include <cmath>

namespace pltnet {

namespace {

Tensor he_normal(Shape shape, int64_t fan_in, Rng& rng) {
  return Tensor::randn(std::move(shape), rng, std::sqrt(2.0 / static_cast<double>(fan_in)));
}

}  // namespace

// ---------------------------------------------------------------------------
// Conv2d

Conv2d::Conv2d(int in_ch, int out_ch, int kernel, int stride_, int padding_, bool with_bias,
               Rng& rng)
    : stride(stride_), padding(padding_) {
  weight = he_normal(Shape{out_ch, in_ch, kernel, kernel},
                     static_cast<int64_t>(in_ch) * kernel * kernel, rng);
  if (with_bias) bias = Tensor(Shape{out_ch}, 0.0f);
}

Tensor Conv2d::forward(const Tensor& x) const { return conv2d(x, weight, bias, stride, padding); }

void Conv2d::collect(const std::string& prefix, std::vector<NamedParam>& params,
                     std::vector<NamedState>&) {
  params.push_back({prefix + ".weight", weight});
  if (bias.defined()) params.push_back({prefix + ".bias", bias});
}

// ---------------------------------------------------------------------------
// BatchNorm2d

BatchNorm2d::BatchNorm2d(int channels) {
  gamma = Tensor(Shape{channels}, 1.0f);
  beta = Tensor(Shape{channels}, 0.0f);
  stats.running_mean.assign(static_cast<size_t>(channels), 0.0f);
  stats.running_var.assign(static_cast<size_t>(channels), 1.0f);
}

Tensor BatchNorm2d::forward(const Tensor& x, Mode mode) {
  return batchnorm2d(x, gamma, beta, stats, mode, momentum, epsilon);
}

void BatchNorm2d::collect(const std::string& prefix, std::vector<NamedParam>& params,
                          std::vector<NamedState>& state) {
  params.push_back({prefix + ".gamma", gamma});
  params.push_back({prefix + ".beta", beta});
  state.push_back({prefix + ".running_mean", &stats.running_mean});
  state.push_back({prefix + ".running_var", &stats.running_var});
}

// ---------------------------------------------------------------------------
// Linear

Linear::Linear(int in_features, int out_features, Rng& rng) {
  weight = he_normal(Shape{out_features, in_features}, in_features, rng);
  bias = Tensor(Shape{out_features}, 0.0f);
}

Tensor Linear::forward(const Tensor& x) const { return dense_affine(x, weight, bias); }

void Linear::collect(const std::string& prefix, std::vector<NamedParam>& params,
                     std::vector<NamedState>&) {
  params.push_back({prefix + ".weight", weight});
  params.push_back({prefix + ".bias", bias});
}

// ---------------------------------------------------------------------------
// SEBlock

int SEBlock::effective_reduction(int channels, int reduction) {
  int r = reduction < channels ? reduction : channels;
  while (r > 1 && channels % r != 0) --r;
  return r;
}

SEBlock::SEBlock(int channels_, int reduction_, Rng& rng)
    : channels(channels_), reduction(effective_reduction(channels_, reduction_)) {
  const int mid = channels / reduction;
  fc1 = Linear(channels, mid, rng);
  fc2 = Linear(mid, channels, rng);
}

Tensor SEBlock::forward(const Tensor& x) const {
  if (x.rank() != 4 || x.dim(1) != channels) {
    throw ShapeError("se block built for " + std::to_string(channels) + " channels, input is " +
                     shape_str(x.shape()));
  }
  if (force_unit_scale) {
    return scale_channels(x, Tensor(Shape{channels}, 1.0f));
  }
  Tensor s = sigmoid(fc2.forward(relu(fc1.forward(global_avg_pool(x)))));
  return scale_channels(x, s);
}

int64_t SEBlock::param_count() const {
  return fc1.weight.size() + fc1.bias.size() + fc2.weight.size() + fc2.bias.size();
}

void SEBlock::collect(const std::string& prefix, std::vector<NamedParam>& params,
                      std::vector<NamedState>& state) {
  fc1.collect(prefix + ".fc1", params, state);
  fc2.collect(prefix + ".fc2", params, state);
}

// ---------------------------------------------------------------------------
// SppLayer

SppLayer::SppLayer(std::vector<int> bins_) : bins(std::move(bins_)) {
  if (bins.empty()) throw ShapeError("spp needs at least one pyramid level");
  for (const int b : bins) {
    if (b < 1) throw ShapeError("spp level must be >= 1, got " + std::to_string(b));
  }
}

int64_t SppLayer::output_length(int64_t channels) const {
  int64_t regions = 0;
  for (const int b : bins) regions += static_cast<int64_t>(b) * b;
  return channels * regions;
}

Tensor SppLayer::forward(const Tensor& x) const {
  if (x.rank() != 4) throw ShapeError("spp input must be [B,C,H,W], got " + shape_str(x.shape()));
  const int64_t batch = x.dim(0);
  const int64_t channels = x.dim(1);
  for (const int b : bins) {
    if (x.dim(2) < b || x.dim(3) < b) {
      throw ShapeError("spp level " + std::to_string(b) + " needs at least " + std::to_string(b) +
                       "x" + std::to_string(b) + " input, got " + shape_str(x.shape()));
    }
  }
  std::vector<Tensor> parts;
  parts.reserve(bins.size());
  for (const int b : bins) {
    Tensor pooled = adaptive_max_pool2d(x, b, b);
    parts.push_back(reshape(pooled, Shape{batch, channels * b * b, 1, 1}));
  }
  return reshape(concat_channels(parts), Shape{batch, output_length(channels)});
}

// ---------------------------------------------------------------------------
// DenseLayer / DenseBlock / Transition

DenseLayer::DenseLayer(int in_ch, int growth, Rng& rng) {
  bn1 = BatchNorm2d(in_ch);
  conv1 = Conv2d(in_ch, 4 * growth, 1, 1, 0, false, rng);
  bn2 = BatchNorm2d(4 * growth);
  conv2 = Conv2d(4 * growth, growth, 3, 1, 1, false, rng);
}

Tensor DenseLayer::forward(const Tensor& x, Mode mode) {
  Tensor h = conv1.forward(relu(bn1.forward(x, mode)));
  return conv2.forward(relu(bn2.forward(h, mode)));
}

void DenseLayer::collect(const std::string& prefix, std::vector<NamedParam>& params,
                         std::vector<NamedState>& state) {
  bn1.collect(prefix + ".bn1", params, state);
  conv1.collect(prefix + ".conv1", params, state);
  bn2.collect(prefix + ".bn2", params, state);
  conv2.collect(prefix + ".conv2", params, state);
}

DenseBlock::DenseBlock(int in_ch, int num_layers, int growth_, Rng& rng)
    : in_channels(in_ch), growth(growth_) {
  layers.reserve(static_cast<size_t>(num_layers));
  for (int i = 0; i < num_layers; ++i) {
    layers.emplace_back(in_ch + i * growth, growth, rng);
  }
}

Tensor DenseBlock::forward(const Tensor& x, Mode mode) {
  Tensor cur = x;
  for (auto& layer : layers) {
    Tensor fresh = layer.forward(cur, mode);
    cur = concat_channels({cur, fresh});
  }
  return cur;
}

void DenseBlock::collect(const std::string& prefix, std::vector<NamedParam>& params,
                         std::vector<NamedState>& state) {
  for (size_t i = 0; i < layers.size(); ++i) {
    layers[i].collect(prefix + ".layer" + std::to_string(i + 1), params, state);
  }
}

Transition::Transition(int in_ch, Rng& rng) {
  bn = BatchNorm2d(in_ch);
  conv = Conv2d(in_ch, in_ch / 2, 1, 1, 0, false, rng);
}

Tensor Transition::forward(const Tensor& x, Mode mode) {
  if (x.dim(2) % 2 != 0 || x.dim(3) % 2 != 0) {
    throw ShapeError("transition needs even spatial dims, got " + shape_str(x.shape()));
  }
  Tensor h = conv.forward(relu(bn.forward(x, mode)));
  return pool2d(h, PoolMode::kAvg, 2, 2);
}

void Transition::collect(const std::string& prefix, std::vector<NamedParam>& params,
                         std::vector<NamedState>& state) {
  bn.collect(prefix + ".bn", params, state);
  conv.collect(prefix + ".conv", params, state);
}

// ---------------------------------------------------------------------------
// ResidualBlock

ResidualBlock::ResidualBlock(int in_ch, int out_ch, int stride, Rng& rng) {
  conv1 = Conv2d(in_ch, out_ch, 3, stride, 1, false, rng);
  bn1 = BatchNorm2d(out_ch);
  conv2 = Conv2d(out_ch, out_ch, 3, 1, 1, false, rng);
  bn2 = BatchNorm2d(out_ch);
  has_projection = stride != 1 || in_ch != out_ch;
  if (has_projection) {
    proj = Conv2d(in_ch, out_ch, 1, stride, 0, false, rng);
    proj_bn = BatchNorm2d(out_ch);
  }
}

Tensor ResidualBlock::forward(const Tensor& x, Mode mode) {
  Tensor main = bn2.forward(conv2.forward(relu(bn1.forward(conv1.forward(x), mode))), mode);
  Tensor shortcut = has_projection ? proj_bn.forward(proj.forward(x), mode) : x;
  return relu(add(main, shortcut));
}

void ResidualBlock::collect(const std::string& prefix, std::vector<NamedParam>& params,
                            std::vector<NamedState>& state) {
  conv1.collect(prefix + ".conv1", params, state);
  bn1.collect(prefix + ".bn1", params, state);
  conv2.collect(prefix + ".conv2", params, state);
  bn2.collect(prefix + ".bn2", params, state);
  if (has_projection) {
    proj.collect(prefix + ".proj", params, state);
    proj_bn.collect(prefix + ".proj_bn", params, state);
  }
}

}  // namespace pltnet
