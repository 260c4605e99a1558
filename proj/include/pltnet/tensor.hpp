#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "pltnet/rng.hpp"

namespace pltnet {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Mode { kTrain, kEval };

struct TensorImpl {
  Shape shape;
  std::vector<float> data;
  std::vector<float> grad;  // empty until backward first touches it
  bool tracked = false;
};

// Dense row-major float32 tensor. Copies are shallow handles onto shared
// storage; clone() for a deep copy. Values are written once at creation and
// then only read, except through the optimizer which owns its parameters.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f);
  Tensor(Shape shape, std::vector<float> values);

  static Tensor scalar(float v) { return Tensor(Shape{}, std::vector<float>{v}); }
  static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int rank() const { return static_cast<int>(impl_->shape.size()); }
  int64_t dim(int i) const { return impl_->shape[static_cast<size_t>(i)]; }
  int64_t size() const { return static_cast<int64_t>(impl_->data.size()); }

  std::span<float> data() { return impl_->data; }
  std::span<const float> data() const { return impl_->data; }
  float item() const;

  bool tracked() const { return impl_->tracked; }
  Tensor& set_tracked(bool tracked) {
    impl_->tracked = tracked;
    return *this;
  }

  bool has_grad() const { return defined() && !impl_->grad.empty(); }
  std::span<const float> grad() const { return impl_->grad; }
  // Zero-initialized on first use.
  std::span<float> grad_mut();
  void clear_grad() { impl_->grad.clear(); }

  Tensor clone() const;

  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

// Per-forward-pass record of backward closures, reverse-swept once and then
// dropped. One tape per thread may be active at a time; independent tapes on
// different threads share no state.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(std::function<void()> backward_fn) { nodes_.push_back(std::move(backward_fn)); }
  size_t size() const { return nodes_.size(); }

  // Seeds d(loss)/d(loss) = 1, sweeps nodes in reverse, then clears the tape.
  // loss must be a scalar.
  void backward(const Tensor& loss);

  static Tape* active();

 private:
  std::vector<std::function<void()>> nodes_;
  friend class TapeScope;
};

class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* prev_;
};

// ---------------------------------------------------------------------------
// Primitive ops. Each computes its forward result and, when a tape is active
// and any operand is tracked, records a backward closure. Gradients
// accumulate across consumers.

// bias may be a default-constructed Tensor for bias-free convolution.
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias,
              int stride, int padding);

enum class PoolMode { kMax, kAvg };
// Max pooling pads with -inf (padded cells never win); padding must be 0 for
// average pooling. Max ties route gradient to the first occurrence in
// row-major window order.
Tensor pool2d(const Tensor& input, PoolMode mode, int window, int stride,
              int padding = 0);

// Output cell (i,j) of a b_h x b_w grid covers input rows
// [floor(i*H/b_h), ceil((i+1)*H/b_h)) and analogous columns.
Tensor adaptive_max_pool2d(const Tensor& input, int out_h, int out_w);

// [B,C,H,W] -> [B,C]
Tensor global_avg_pool(const Tensor& input);

Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);

// x[B,C,H,W] scaled per channel by s of shape [B,C] or [C].
Tensor scale_channels(const Tensor& x, const Tensor& s);

// input[B,N] * weight[M,N]^T + bias[M] -> [B,M]
Tensor dense_affine(const Tensor& input, const Tensor& weight, const Tensor& bias);

struct BatchNormState {
  std::vector<float> running_mean;
  std::vector<float> running_var;
};

Tensor batchnorm2d(const Tensor& input, const Tensor& gamma, const Tensor& beta,
                   BatchNormState& state, Mode mode, float momentum = 0.1f,
                   float epsilon = 1e-5f);

Tensor concat_channels(const std::vector<Tensor>& inputs);
Tensor slice_channels(const Tensor& input, int64_t begin, int64_t count);
Tensor reshape(const Tensor& input, Shape new_shape);
Tensor sum(const Tensor& x);  // -> scalar

// ---------------------------------------------------------------------------
// Finite-difference gradient audit.

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst_tensor;
  int64_t worst_index = -1;
  bool nan_seen = false;

  bool passed(double tol) const { return !nan_seen && max_rel_err < tol; }
};

// Runs fn once under a tape to get analytic gradients of its scalar output,
// then central differences each checked coordinate: (f(x+h) - f(x-h)) / 2h,
// difference taken in double. Relative error per coordinate is
// |analytic - numeric| / max(1, |analytic|, |numeric|).
// max_coords_per_tensor < 0 checks every coordinate; otherwise a seeded
// random subset of that size per input tensor.
GradCheckReport grad_check(const std::function<Tensor()>& fn, std::span<Tensor> inputs,
                           double h, int max_coords_per_tensor = -1, uint64_t seed = 1);

namespace test_hooks {
// Gradcheck mutation fixture: conv2d's input-gradient path is multiplied by
// this factor. Production value is 1.0f.
extern float conv_input_grad_scale;
}  // namespace test_hooks

}  // namespace pltnet
