#include "pltnet/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <unordered_set>

#include "pltnet/kernels.hpp"

namespace pltnet {

namespace test_hooks {
float conv_input_grad_scale = 1.0f;
}

int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

namespace {

void require(bool cond, const std::string& msg) {
  if (!cond) throw ShapeError(msg);
}

void transpose_mat(const float* src, float* dst, int rows, int cols) {
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      dst[static_cast<size_t>(c) * rows + r] = src[static_cast<size_t>(r) * cols + c];
    }
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor(Shape shape, float fill) : impl_(std::make_shared<TensorImpl>()) {
  for (int64_t d : shape) require(d > 0, "tensor extent must be positive, got " + shape_str(shape));
  impl_->shape = std::move(shape);
  impl_->data.assign(static_cast<size_t>(shape_numel(impl_->shape)), fill);
}

Tensor::Tensor(Shape shape, std::vector<float> values) : impl_(std::make_shared<TensorImpl>()) {
  require(shape_numel(shape) == static_cast<int64_t>(values.size()),
          "value count " + std::to_string(values.size()) + " does not fill shape " + shape_str(shape));
  impl_->shape = std::move(shape);
  impl_->data = std::move(values);
}

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev) {
  Tensor t(std::move(shape));
  for (float& v : t.impl_->data) v = static_cast<float>(rng.normal() * stddev);
  return t;
}

float Tensor::item() const {
  require(size() == 1, "item() on non-scalar tensor " + shape_str(shape()));
  return impl_->data[0];
}

std::span<float> Tensor::grad_mut() {
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0f);
  return impl_->grad;
}

Tensor Tensor::clone() const {
  Tensor t;
  t.impl_ = std::make_shared<TensorImpl>(*impl_);
  return t;
}

// ---------------------------------------------------------------------------
// Tape

namespace {
thread_local Tape* t_active_tape = nullptr;
}

Tape* Tape::active() { return t_active_tape; }

TapeScope::TapeScope(Tape& tape) : prev_(t_active_tape) { t_active_tape = &tape; }
TapeScope::~TapeScope() { t_active_tape = prev_; }

void Tape::backward(const Tensor& loss) {
  require(loss.defined() && loss.size() == 1,
          "backward requires a scalar loss, got " + (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  require(!nodes_.empty(), "backward on an empty tape");
  loss.impl()->grad.assign(1, 1.0f);
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  nodes_.clear();
}

namespace {

bool want_grad(const Tensor& t) { return t.defined() && t.tracked(); }

// Accumulates src into dst's grad buffer.
void accumulate(const std::shared_ptr<TensorImpl>& dst, const float* src, size_t n) {
  if (dst->grad.empty()) dst->grad.assign(dst->data.size(), 0.0f);
  kernels::active().axpy(1.0f, src, dst->grad.data(), n);
}

// ---------------------------------------------------------------------------
// conv2d

struct ConvGeometry {
  int batch, cin, h, w, cout, kh, kw, stride, padding, oh, ow;
  int64_t patch;  // cin*kh*kw
  int64_t cells;  // oh*ow
};

ConvGeometry conv_geometry(const Tensor& input, const Tensor& weight, const Tensor& bias,
                           int stride, int padding) {
  require(input.rank() == 4, "conv2d input must be [B,C,H,W], got " + shape_str(input.shape()));
  require(weight.rank() == 4, "conv2d weight must be [Cout,Cin,kh,kw], got " + shape_str(weight.shape()));
  ConvGeometry g;
  g.batch = static_cast<int>(input.dim(0));
  g.cin = static_cast<int>(input.dim(1));
  g.h = static_cast<int>(input.dim(2));
  g.w = static_cast<int>(input.dim(3));
  g.cout = static_cast<int>(weight.dim(0));
  g.kh = static_cast<int>(weight.dim(2));
  g.kw = static_cast<int>(weight.dim(3));
  g.stride = stride;
  g.padding = padding;
  require(weight.dim(1) == g.cin,
          "conv2d channel mismatch: input " + shape_str(input.shape()) + " has Cin=" +
              std::to_string(g.cin) + " but weight " + shape_str(weight.shape()) + " expects Cin=" +
              std::to_string(weight.dim(1)));
  require(stride >= 1, "conv2d stride must be >= 1");
  require(padding >= 0, "conv2d padding must be >= 0");
  require(g.h + 2 * padding >= g.kh && g.w + 2 * padding >= g.kw,
          "conv2d kernel " + std::to_string(g.kh) + "x" + std::to_string(g.kw) +
              " larger than padded input " + shape_str(input.shape()));
  if (bias.defined()) {
    require(bias.rank() == 1 && bias.dim(0) == g.cout,
            "conv2d bias must be [Cout], got " + shape_str(bias.shape()));
  }
  g.oh = (g.h + 2 * padding - g.kh) / stride + 1;
  g.ow = (g.w + 2 * padding - g.kw) / stride + 1;
  g.patch = static_cast<int64_t>(g.cin) * g.kh * g.kw;
  g.cells = static_cast<int64_t>(g.oh) * g.ow;
  return g;
}

bool conv_is_pointwise(const ConvGeometry& g) {
  return g.kh == 1 && g.kw == 1 && g.stride == 1 && g.padding == 0;
}

void im2col(const float* image, const ConvGeometry& g, float* col) {
  const int64_t plane = static_cast<int64_t>(g.h) * g.w;
  for (int ci = 0; ci < g.cin; ++ci) {
    const float* src = image + ci * plane;
    for (int ky = 0; ky < g.kh; ++ky) {
      for (int kx = 0; kx < g.kw; ++kx) {
        float* dst = col + ((static_cast<int64_t>(ci) * g.kh + ky) * g.kw + kx) * g.cells;
        for (int oy = 0; oy < g.oh; ++oy) {
          const int iy = oy * g.stride + ky - g.padding;
          if (iy < 0 || iy >= g.h) {
            std::memset(dst + static_cast<int64_t>(oy) * g.ow, 0, sizeof(float) * g.ow);
            continue;
          }
          for (int ox = 0; ox < g.ow; ++ox) {
            const int ix = ox * g.stride + kx - g.padding;
            dst[static_cast<int64_t>(oy) * g.ow + ox] =
                (ix >= 0 && ix < g.w) ? src[static_cast<int64_t>(iy) * g.w + ix] : 0.0f;
          }
        }
      }
    }
  }
}

void col2im_accumulate(const float* col, const ConvGeometry& g, float* image) {
  const int64_t plane = static_cast<int64_t>(g.h) * g.w;
  for (int ci = 0; ci < g.cin; ++ci) {
    float* dst = image + ci * plane;
    for (int ky = 0; ky < g.kh; ++ky) {
      for (int kx = 0; kx < g.kw; ++kx) {
        const float* src = col + ((static_cast<int64_t>(ci) * g.kh + ky) * g.kw + kx) * g.cells;
        for (int oy = 0; oy < g.oh; ++oy) {
          const int iy = oy * g.stride + ky - g.padding;
          if (iy < 0 || iy >= g.h) continue;
          for (int ox = 0; ox < g.ow; ++ox) {
            const int ix = ox * g.stride + kx - g.padding;
            if (ix >= 0 && ix < g.w) dst[static_cast<int64_t>(iy) * g.w + ix] += src[static_cast<int64_t>(oy) * g.ow + ox];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, int stride,
              int padding) {
  const ConvGeometry g = conv_geometry(input, weight, bias, stride, padding);
  const auto& k = kernels::active();

  Tensor out(Shape{g.batch, g.cout, g.oh, g.ow});
  const bool pointwise = conv_is_pointwise(g);
  std::vector<float> col;
  if (!pointwise) col.resize(static_cast<size_t>(g.patch * g.cells));

  const int64_t in_item = static_cast<int64_t>(g.cin) * g.h * g.w;
  const int64_t out_item = static_cast<int64_t>(g.cout) * g.cells;
  for (int b = 0; b < g.batch; ++b) {
    const float* image = input.data().data() + b * in_item;
    const float* cols = image;
    if (!pointwise) {
      im2col(image, g, col.data());
      cols = col.data();
    }
    float* dst = out.data().data() + b * out_item;
    k.gemm(weight.data().data(), cols, dst, g.cout, static_cast<int>(g.patch),
           static_cast<int>(g.cells), false);
    if (bias.defined()) {
      for (int co = 0; co < g.cout; ++co) {
        const float bv = bias.data()[static_cast<size_t>(co)];
        float* row = dst + static_cast<int64_t>(co) * g.cells;
        for (int64_t p = 0; p < g.cells; ++p) row[p] += bv;
      }
    }
  }

  Tape* tape = Tape::active();
  if (tape && (want_grad(input) || want_grad(weight) || want_grad(bias))) {
    out.set_tracked(true);
    auto in_i = input.impl();
    auto w_i = weight.impl();
    auto b_i = bias.defined() ? bias.impl() : nullptr;
    auto out_i = out.impl();
    tape->record([in_i, w_i, b_i, out_i, g]() {
      if (out_i->grad.empty()) return;
      const auto& kk = kernels::active();
      const float* dy = out_i->grad.data();
      const bool pw = conv_is_pointwise(g);
      const int64_t in_item = static_cast<int64_t>(g.cin) * g.h * g.w;
      const int64_t out_item = static_cast<int64_t>(g.cout) * g.cells;

      std::vector<float> col, wt, dcol, dyt, dwt;
      if (!pw && (in_i->tracked || w_i->tracked)) col.resize(static_cast<size_t>(g.patch * g.cells));
      if (in_i->tracked) {
        wt.resize(static_cast<size_t>(g.patch) * g.cout);
        transpose_mat(w_i->data.data(), wt.data(), g.cout, static_cast<int>(g.patch));
        dcol.resize(static_cast<size_t>(g.patch * g.cells));
        if (in_i->grad.empty()) in_i->grad.assign(in_i->data.size(), 0.0f);
      }
      if (w_i->tracked) {
        dyt.resize(static_cast<size_t>(g.cells) * g.cout);
        dwt.assign(static_cast<size_t>(g.patch) * g.cout, 0.0f);
      }

      for (int b = 0; b < g.batch; ++b) {
        const float* dy_b = dy + b * out_item;
        const float* cols = nullptr;
        if (in_i->tracked || w_i->tracked) {
          if (pw) {
            cols = in_i->data.data() + b * in_item;
          } else {
            im2col(in_i->data.data() + b * in_item, g, col.data());
            cols = col.data();
          }
        }
        if (in_i->tracked) {
          kk.gemm(wt.data(), dy_b, dcol.data(), static_cast<int>(g.patch), g.cout,
                  static_cast<int>(g.cells), false);
          if (test_hooks::conv_input_grad_scale != 1.0f) {
            kk.scale(test_hooks::conv_input_grad_scale, dcol.data(), dcol.data(), dcol.size());
          }
          float* dst = in_i->grad.data() + b * in_item;
          if (pw) {
            kk.axpy(1.0f, dcol.data(), dst, dcol.size());
          } else {
            col2im_accumulate(dcol.data(), g, dst);
          }
        }
        if (w_i->tracked) {
          transpose_mat(dy_b, dyt.data(), g.cout, static_cast<int>(g.cells));
          kk.gemm(cols, dyt.data(), dwt.data(), static_cast<int>(g.patch),
                  static_cast<int>(g.cells), g.cout, true);
        }
        if (b_i && b_i->tracked) {
          if (b_i->grad.empty()) b_i->grad.assign(b_i->data.size(), 0.0f);
          for (int co = 0; co < g.cout; ++co) {
            const float* row = dy_b + static_cast<int64_t>(co) * g.cells;
            float acc = b_i->grad[static_cast<size_t>(co)];
            for (int64_t p = 0; p < g.cells; ++p) acc += row[p];
            b_i->grad[static_cast<size_t>(co)] = acc;
          }
        }
      }
      if (w_i->tracked) {
        if (w_i->grad.empty()) w_i->grad.assign(w_i->data.size(), 0.0f);
        // dwt is [patch, cout]; weight grad is [cout, patch].
        for (int co = 0; co < g.cout; ++co) {
          float* dst = w_i->grad.data() + static_cast<int64_t>(co) * g.patch;
          for (int64_t q = 0; q < g.patch; ++q) dst[q] += dwt[static_cast<size_t>(q) * g.cout + co];
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// pooling

namespace {

struct PoolGeometry {
  int batch, channels, h, w, window, stride, padding, oh, ow;
};

PoolGeometry pool_geometry(const Tensor& input, int window, int stride, int padding) {
  require(input.rank() == 4, "pool2d input must be [B,C,H,W], got " + shape_str(input.shape()));
  PoolGeometry g;
  g.batch = static_cast<int>(input.dim(0));
  g.channels = static_cast<int>(input.dim(1));
  g.h = static_cast<int>(input.dim(2));
  g.w = static_cast<int>(input.dim(3));
  g.window = window;
  g.stride = stride;
  g.padding = padding;
  require(window >= 1 && stride >= 1 && padding >= 0, "pool2d window/stride must be >= 1");
  require(padding < window, "pool2d padding must be smaller than the window");
  require(window <= g.h + 2 * padding && window <= g.w + 2 * padding,
          "pool2d window " + std::to_string(window) + " exceeds spatial extent of " +
              shape_str(input.shape()));
  g.oh = (g.h + 2 * padding - window) / stride + 1;
  g.ow = (g.w + 2 * padding - window) / stride + 1;
  return g;
}

}  // namespace

Tensor pool2d(const Tensor& input, PoolMode mode, int window, int stride, int padding) {
  const PoolGeometry g = pool_geometry(input, window, stride, padding);
  require(mode == PoolMode::kMax || padding == 0, "pool2d: padding only supported for max mode");

  Tensor out(Shape{g.batch, g.channels, g.oh, g.ow});
  const int64_t plane = static_cast<int64_t>(g.h) * g.w;
  const int64_t out_plane = static_cast<int64_t>(g.oh) * g.ow;
  const int64_t planes = static_cast<int64_t>(g.batch) * g.channels;
  // For max mode: flat index of the winning cell within its input plane.
  std::vector<int32_t> argmax;
  if (mode == PoolMode::kMax) argmax.resize(static_cast<size_t>(planes * out_plane));

  for (int64_t pc = 0; pc < planes; ++pc) {
    const float* src = input.data().data() + pc * plane;
    float* dst = out.data().data() + pc * out_plane;
    for (int oy = 0; oy < g.oh; ++oy) {
      for (int ox = 0; ox < g.ow; ++ox) {
        const int y0 = oy * g.stride - g.padding;
        const int x0 = ox * g.stride - g.padding;
        if (mode == PoolMode::kMax) {
          float best = -std::numeric_limits<float>::infinity();
          int32_t best_idx = -1;
          for (int y = std::max(y0, 0); y < std::min(y0 + g.window, g.h); ++y) {
            for (int x = std::max(x0, 0); x < std::min(x0 + g.window, g.w); ++x) {
              const float v = src[static_cast<int64_t>(y) * g.w + x];
              if (v > best) {
                best = v;
                best_idx = static_cast<int32_t>(y * g.w + x);
              }
            }
          }
          dst[static_cast<int64_t>(oy) * g.ow + ox] = best;
          argmax[static_cast<size_t>(pc * out_plane + oy * g.ow + ox)] = best_idx;
        } else {
          float acc = 0.0f;
          for (int y = y0; y < y0 + g.window; ++y) {
            for (int x = x0; x < x0 + g.window; ++x) {
              acc += src[static_cast<int64_t>(y) * g.w + x];
            }
          }
          dst[static_cast<int64_t>(oy) * g.ow + ox] = acc / static_cast<float>(g.window * g.window);
        }
      }
    }
  }

  Tape* tape = Tape::active();
  if (tape && want_grad(input)) {
    out.set_tracked(true);
    auto in_i = input.impl();
    auto out_i = out.impl();
    tape->record([in_i, out_i, g, mode, argmax = std::move(argmax), plane, out_plane, planes]() {
      if (out_i->grad.empty()) return;
      if (in_i->grad.empty()) in_i->grad.assign(in_i->data.size(), 0.0f);
      const float* dy = out_i->grad.data();
      for (int64_t pc = 0; pc < planes; ++pc) {
        float* dst = in_i->grad.data() + pc * plane;
        const float* dyp = dy + pc * out_plane;
        if (mode == PoolMode::kMax) {
          const int32_t* am = argmax.data() + pc * out_plane;
          for (int64_t i = 0; i < out_plane; ++i) dst[am[i]] += dyp[i];
        } else {
          const float inv = 1.0f / static_cast<float>(g.window * g.window);
          for (int oy = 0; oy < g.oh; ++oy) {
            for (int ox = 0; ox < g.ow; ++ox) {
              const float gv = dyp[static_cast<int64_t>(oy) * g.ow + ox] * inv;
              const int y0 = oy * g.stride;
              const int x0 = ox * g.stride;
              for (int y = y0; y < y0 + g.window; ++y) {
                for (int x = x0; x < x0 + g.window; ++x) {
                  dst[static_cast<int64_t>(y) * g.w + x] += gv;
                }
              }
            }
          }
        }
      }
    });
  }
  return out;
}

Tensor adaptive_max_pool2d(const Tensor& input, int out_h, int out_w) {
  require(input.rank() == 4, "adaptive_max_pool2d input must be [B,C,H,W], got " + shape_str(input.shape()));
  const int batch = static_cast<int>(input.dim(0));
  const int channels = static_cast<int>(input.dim(1));
  const int h = static_cast<int>(input.dim(2));
  const int w = static_cast<int>(input.dim(3));
  require(out_h >= 1 && out_w >= 1, "adaptive_max_pool2d output grid must be >= 1");
  require(h >= out_h && w >= out_w,
          "adaptive_max_pool2d: input " + shape_str(input.shape()) + " smaller than " +
              std::to_string(out_h) + "x" + std::to_string(out_w) + " grid");

  Tensor out(Shape{batch, channels, out_h, out_w});
  const int64_t plane = static_cast<int64_t>(h) * w;
  const int64_t out_plane = static_cast<int64_t>(out_h) * out_w;
  const int64_t planes = static_cast<int64_t>(batch) * channels;
  std::vector<int32_t> argmax(static_cast<size_t>(planes * out_plane));

  for (int64_t pc = 0; pc < planes; ++pc) {
    const float* src = input.data().data() + pc * plane;
    float* dst = out.data().data() + pc * out_plane;
    for (int oy = 0; oy < out_h; ++oy) {
      const int y0 = static_cast<int>((static_cast<int64_t>(oy) * h) / out_h);
      const int y1 = static_cast<int>((static_cast<int64_t>(oy + 1) * h + out_h - 1) / out_h);
      for (int ox = 0; ox < out_w; ++ox) {
        const int x0 = static_cast<int>((static_cast<int64_t>(ox) * w) / out_w);
        const int x1 = static_cast<int>((static_cast<int64_t>(ox + 1) * w + out_w - 1) / out_w);
        float best = -std::numeric_limits<float>::infinity();
        int32_t best_idx = -1;
        for (int y = y0; y < y1; ++y) {
          for (int x = x0; x < x1; ++x) {
            const float v = src[static_cast<int64_t>(y) * w + x];
            if (v > best) {
              best = v;
              best_idx = static_cast<int32_t>(y * w + x);
            }
          }
        }
        dst[static_cast<int64_t>(oy) * out_w + ox] = best;
        argmax[static_cast<size_t>(pc * out_plane + oy * out_w + ox)] = best_idx;
      }
    }
  }

  Tape* tape = Tape::active();
  if (tape && want_grad(input)) {
    out.set_tracked(true);
    auto in_i = input.impl();
    auto out_i = out.impl();
    tape->record([in_i, out_i, argmax = std::move(argmax), plane, out_plane, planes]() {
      if (out_i->grad.empty()) return;
      if (in_i->grad.empty()) in_i->grad.assign(in_i->data.size(), 0.0f);
      const float* dy = out_i->grad.data();
      for (int64_t pc = 0; pc < planes; ++pc) {
        float* dst = in_i->grad.data() + pc * plane;
        const int32_t* am = argmax.data() + pc * out_plane;
        const float* dyp = dy + pc * out_plane;
        for (int64_t i = 0; i < out_plane; ++i) dst[am[i]] += dyp[i];
      }
    });
  }
  return out;
}

Tensor global_avg_pool(const Tensor& input) {
  require(input.rank() == 4, "global_avg_pool input must be [B,C,H,W], got " + shape_str(input.shape()));
  const int64_t batch = input.dim(0);
  const int64_t channels = input.dim(1);
  const int64_t plane = input.dim(2) * input.dim(3);

  Tensor out(Shape{batch, channels});
  for (int64_t pc = 0; pc < batch * channels; ++pc) {
    const float* src = input.data().data() + pc * plane;
    double acc = 0.0;
    for (int64_t i = 0; i < plane; ++i) acc += src[i];
    out.data()[static_cast<size_t>(pc)] = static_cast<float>(acc / static_cast<double>(plane));
  }

  Tape* tape = Tape::active();
  if (tape && want_grad(input)) {
    out.set_tracked(true);
    auto in_i = input.impl();
    auto out_i = out.impl();
    tape->record([in_i, out_i, batch, channels, plane]() {
      if (out_i->grad.empty()) return;
      if (in_i->grad.empty()) in_i->grad.assign(in_i->data.size(), 0.0f);
      const float inv = 1.0f / static_cast<float>(plane);
      for (int64_t pc = 0; pc < batch * channels; ++pc) {
        const float gv = out_i->grad[static_cast<size_t>(pc)] * inv;
        float* dst = in_i->grad.data() + pc * plane;
        for (int64_t i = 0; i < plane; ++i) dst[i] += gv;
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// elementwise

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                      " vs " + shape_str(b.shape()));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor out(a.shape());
  kernels::active().add(a.data().data(), b.data().data(), out.data().data(),
                        static_cast<size_t>(a.size()));
  Tape* tape = Tape::active();
  if (tape && (want_grad(a) || want_grad(b))) {
    out.set_tracked(true);
    auto a_i = a.impl();
    auto b_i = b.impl();
    auto out_i = out.impl();
    tape->record([a_i, b_i, out_i]() {
      if (out_i->grad.empty()) return;
      if (a_i->tracked) accumulate(a_i, out_i->grad.data(), out_i->grad.size());
      if (b_i->tracked) accumulate(b_i, out_i->grad.data(), out_i->grad.size());
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Tensor out(a.shape());
  kernels::active().mul(a.data().data(), b.data().data(), out.data().data(),
                        static_cast<size_t>(a.size()));
  Tape* tape = Tape::active();
  if (tape && (want_grad(a) || want_grad(b))) {
    out.set_tracked(true);
    auto a_i = a.impl();
    auto b_i = b.impl();
    auto out_i = out.impl();
    tape->record([a_i, b_i, out_i]() {
      if (out_i->grad.empty()) return;
      const size_t n = out_i->grad.size();
      std::vector<float> tmp(n);
      const auto& k = kernels::active();
      if (a_i->tracked) {
        k.mul(out_i->grad.data(), b_i->data.data(), tmp.data(), n);
        accumulate(a_i, tmp.data(), n);
      }
      if (b_i->tracked) {
        k.mul(out_i->grad.data(), a_i->data.data(), tmp.data(), n);
        accumulate(b_i, tmp.data(), n);
      }
    });
  }
  return out;
}

Tensor relu(const Tensor& x) {
  Tensor out(x.shape());
  kernels::active().relu(x.data().data(), out.data().data(), static_cast<size_t>(x.size()));
  Tape* tape = Tape::active();
  if (tape && want_grad(x)) {
    out.set_tracked(true);
    auto x_i = x.impl();
    auto out_i = out.impl();
    tape->record([x_i, out_i]() {
      if (out_i->grad.empty()) return;
      if (x_i->grad.empty()) x_i->grad.assign(x_i->data.size(), 0.0f);
      kernels::active().relu_backward(x_i->data.data(), out_i->grad.data(), x_i->grad.data(),
                                      out_i->grad.size());
    });
  }
  return out;
}

Tensor sigmoid(const Tensor& x) {
  Tensor out(x.shape());
  const float* src = x.data().data();
  float* dst = out.data().data();
  for (int64_t i = 0; i < x.size(); ++i) {
    const float v = src[i];
    if (v >= 0.0f) {
      dst[i] = 1.0f / (1.0f + std::exp(-v));
    } else {
      const float e = std::exp(v);
      dst[i] = e / (1.0f + e);
    }
  }
  Tape* tape = Tape::active();
  if (tape && want_grad(x)) {
    out.set_tracked(true);
    auto x_i = x.impl();
    auto out_i = out.impl();
    tape->record([x_i, out_i]() {
      if (out_i->grad.empty()) return;
      if (x_i->grad.empty()) x_i->grad.assign(x_i->data.size(), 0.0f);
      for (size_t i = 0; i < out_i->grad.size(); ++i) {
        const float s = out_i->data[i];
        x_i->grad[i] += out_i->grad[i] * s * (1.0f - s);
      }
    });
  }
  return out;
}

Tensor scale_channels(const Tensor& x, const Tensor& s) {
  require(x.rank() == 4, "scale_channels input must be [B,C,H,W], got " + shape_str(x.shape()));
  const int64_t batch = x.dim(0);
  const int64_t channels = x.dim(1);
  const int64_t plane = x.dim(2) * x.dim(3);
  const bool per_sample = s.rank() == 2;
  if (per_sample) {
    require(s.dim(0) == batch && s.dim(1) == channels,
            "scale_channels: scale " + shape_str(s.shape()) + " does not broadcast over " +
                shape_str(x.shape()));
  } else {
    require(s.rank() == 1 && s.dim(0) == channels,
            "scale_channels: scale " + shape_str(s.shape()) + " does not broadcast over " +
                shape_str(x.shape()));
  }

  Tensor out(x.shape());
  const auto& k = kernels::active();
  for (int64_t b = 0; b < batch; ++b) {
    for (int64_t c = 0; c < channels; ++c) {
      const float sv = s.data()[static_cast<size_t>(per_sample ? b * channels + c : c)];
      const int64_t off = (b * channels + c) * plane;
      k.scale(sv, x.data().data() + off, out.data().data() + off, static_cast<size_t>(plane));
    }
  }

  Tape* tape = Tape::active();
  if (tape && (want_grad(x) || want_grad(s))) {
    out.set_tracked(true);
    auto x_i = x.impl();
    auto s_i = s.impl();
    auto out_i = out.impl();
    tape->record([x_i, s_i, out_i, batch, channels, plane, per_sample]() {
      if (out_i->grad.empty()) return;
      const auto& k = kernels::active();
      if (x_i->tracked && x_i->grad.empty()) x_i->grad.assign(x_i->data.size(), 0.0f);
      if (s_i->tracked && s_i->grad.empty()) s_i->grad.assign(s_i->data.size(), 0.0f);
      for (int64_t b = 0; b < batch; ++b) {
        for (int64_t c = 0; c < channels; ++c) {
          const size_t sidx = static_cast<size_t>(per_sample ? b * channels + c : c);
          const int64_t off = (b * channels + c) * plane;
          const float* dyp = out_i->grad.data() + off;
          if (x_i->tracked) {
            k.axpy(s_i->data[sidx], dyp, x_i->grad.data() + off, static_cast<size_t>(plane));
          }
          if (s_i->tracked) {
            const float* xp = x_i->data.data() + off;
            float acc = s_i->grad[sidx];
            for (int64_t i = 0; i < plane; ++i) acc += dyp[i] * xp[i];
            s_i->grad[sidx] = acc;
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// dense_affine

Tensor dense_affine(const Tensor& input, const Tensor& weight, const Tensor& bias) {
  require(input.rank() == 2, "dense_affine input must be [B,N], got " + shape_str(input.shape()));
  require(weight.rank() == 2, "dense_affine weight must be [M,N], got " + shape_str(weight.shape()));
  const int64_t batch = input.dim(0);
  const int64_t in_features = input.dim(1);
  const int64_t out_features = weight.dim(0);
  require(weight.dim(1) == in_features,
          "dense_affine: input " + shape_str(input.shape()) + " incompatible with weight " +
              shape_str(weight.shape()));
  require(bias.defined() && bias.rank() == 1 && bias.dim(0) == out_features,
          "dense_affine bias must be [M]");

  const auto& k = kernels::active();
  Tensor out(Shape{batch, out_features});
  std::vector<float> wt(static_cast<size_t>(in_features * out_features));
  transpose_mat(weight.data().data(), wt.data(), static_cast<int>(out_features),
                static_cast<int>(in_features));
  k.gemm(input.data().data(), wt.data(), out.data().data(), static_cast<int>(batch),
         static_cast<int>(in_features), static_cast<int>(out_features), false);
  for (int64_t b = 0; b < batch; ++b) {
    k.add(out.data().data() + b * out_features, bias.data().data(),
          out.data().data() + b * out_features, static_cast<size_t>(out_features));
  }

  Tape* tape = Tape::active();
  if (tape && (want_grad(input) || want_grad(weight) || want_grad(bias))) {
    out.set_tracked(true);
    auto in_i = input.impl();
    auto w_i = weight.impl();
    auto b_i = bias.impl();
    auto out_i = out.impl();
    tape->record([in_i, w_i, b_i, out_i, batch, in_features, out_features]() {
      if (out_i->grad.empty()) return;
      const auto& k = kernels::active();
      const float* dy = out_i->grad.data();
      if (in_i->tracked) {
        if (in_i->grad.empty()) in_i->grad.assign(in_i->data.size(), 0.0f);
        k.gemm(dy, w_i->data.data(), in_i->grad.data(), static_cast<int>(batch),
               static_cast<int>(out_features), static_cast<int>(in_features), true);
      }
      if (w_i->tracked) {
        if (w_i->grad.empty()) w_i->grad.assign(w_i->data.size(), 0.0f);
        std::vector<float> dyt(static_cast<size_t>(batch * out_features));
        transpose_mat(dy, dyt.data(), static_cast<int>(batch), static_cast<int>(out_features));
        k.gemm(dyt.data(), in_i->data.data(), w_i->grad.data(), static_cast<int>(out_features),
               static_cast<int>(batch), static_cast<int>(in_features), true);
      }
      if (b_i->tracked) {
        if (b_i->grad.empty()) b_i->grad.assign(b_i->data.size(), 0.0f);
        for (int64_t b = 0; b < batch; ++b) {
          k.axpy(1.0f, dy + b * out_features, b_i->grad.data(), static_cast<size_t>(out_features));
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// batchnorm2d

Tensor batchnorm2d(const Tensor& input, const Tensor& gamma, const Tensor& beta,
                   BatchNormState& state, Mode mode, float momentum, float epsilon) {
  require(input.rank() == 4, "batchnorm2d input must be [B,C,H,W], got " + shape_str(input.shape()));
  const int64_t batch = input.dim(0);
  const int64_t channels = input.dim(1);
  const int64_t plane = input.dim(2) * input.dim(3);
  const int64_t n = batch * plane;
  require(gamma.rank() == 1 && gamma.dim(0) == channels, "batchnorm2d gamma must be [C]");
  require(beta.rank() == 1 && beta.dim(0) == channels, "batchnorm2d beta must be [C]");
  if (state.running_mean.empty()) {
    state.running_mean.assign(static_cast<size_t>(channels), 0.0f);
    state.running_var.assign(static_cast<size_t>(channels), 1.0f);
  }
  require(static_cast<int64_t>(state.running_mean.size()) == channels,
          "batchnorm2d running stats sized for a different channel count");

  Tensor out(input.shape());
  std::vector<float> mean(static_cast<size_t>(channels));
  std::vector<float> inv_std(static_cast<size_t>(channels));

  if (mode == Mode::kTrain) {
    require(n >= 2, "batchnorm2d train mode needs B*H*W >= 2");
    for (int64_t c = 0; c < channels; ++c) {
      double sum = 0.0;
      for (int64_t b = 0; b < batch; ++b) {
        const float* src = input.data().data() + (b * channels + c) * plane;
        for (int64_t i = 0; i < plane; ++i) sum += src[i];
      }
      const double mu = sum / static_cast<double>(n);
      double sq = 0.0;
      for (int64_t b = 0; b < batch; ++b) {
        const float* src = input.data().data() + (b * channels + c) * plane;
        for (int64_t i = 0; i < plane; ++i) {
          const double d = src[i] - mu;
          sq += d * d;
        }
      }
      const double var = sq / static_cast<double>(n);
      mean[static_cast<size_t>(c)] = static_cast<float>(mu);
      inv_std[static_cast<size_t>(c)] = static_cast<float>(1.0 / std::sqrt(var + epsilon));
      const double unbiased = var * static_cast<double>(n) / static_cast<double>(n - 1);
      state.running_mean[static_cast<size_t>(c)] = static_cast<float>(
          (1.0 - momentum) * state.running_mean[static_cast<size_t>(c)] + momentum * mu);
      state.running_var[static_cast<size_t>(c)] = static_cast<float>(
          (1.0 - momentum) * state.running_var[static_cast<size_t>(c)] + momentum * unbiased);
    }
  } else {
    for (int64_t c = 0; c < channels; ++c) {
      mean[static_cast<size_t>(c)] = state.running_mean[static_cast<size_t>(c)];
      inv_std[static_cast<size_t>(c)] = static_cast<float>(
          1.0 / std::sqrt(static_cast<double>(state.running_var[static_cast<size_t>(c)]) + epsilon));
    }
  }

  for (int64_t b = 0; b < batch; ++b) {
    for (int64_t c = 0; c < channels; ++c) {
      const int64_t off = (b * channels + c) * plane;
      const float* src = input.data().data() + off;
      float* dst = out.data().data() + off;
      const float mu = mean[static_cast<size_t>(c)];
      const float is = inv_std[static_cast<size_t>(c)];
      const float gm = gamma.data()[static_cast<size_t>(c)];
      const float bt = beta.data()[static_cast<size_t>(c)];
      for (int64_t i = 0; i < plane; ++i) {
        dst[i] = gm * ((src[i] - mu) * is) + bt;
      }
    }
  }

  Tape* tape = Tape::active();
  if (tape && (want_grad(input) || want_grad(gamma) || want_grad(beta))) {
    out.set_tracked(true);
    auto in_i = input.impl();
    auto g_i = gamma.impl();
    auto b_i = beta.impl();
    auto out_i = out.impl();
    const bool train = mode == Mode::kTrain;
    tape->record([in_i, g_i, b_i, out_i, mean = std::move(mean), inv_std = std::move(inv_std),
                  batch, channels, plane, n, train]() {
      if (out_i->grad.empty()) return;
      if (in_i->tracked && in_i->grad.empty()) in_i->grad.assign(in_i->data.size(), 0.0f);
      if (g_i->tracked && g_i->grad.empty()) g_i->grad.assign(g_i->data.size(), 0.0f);
      if (b_i->tracked && b_i->grad.empty()) b_i->grad.assign(b_i->data.size(), 0.0f);
      for (int64_t c = 0; c < channels; ++c) {
        const float mu = mean[static_cast<size_t>(c)];
        const float is = inv_std[static_cast<size_t>(c)];
        const float gm = g_i->data[static_cast<size_t>(c)];
        double sum_dy = 0.0;
        double sum_dy_xhat = 0.0;
        for (int64_t b = 0; b < batch; ++b) {
          const int64_t off = (b * channels + c) * plane;
          const float* dy = out_i->grad.data() + off;
          const float* x = in_i->data.data() + off;
          for (int64_t i = 0; i < plane; ++i) {
            sum_dy += dy[i];
            sum_dy_xhat += dy[i] * ((x[i] - mu) * is);
          }
        }
        if (g_i->tracked) g_i->grad[static_cast<size_t>(c)] += static_cast<float>(sum_dy_xhat);
        if (b_i->tracked) b_i->grad[static_cast<size_t>(c)] += static_cast<float>(sum_dy);
        if (in_i->tracked) {
          if (train) {
            const double inv_n = 1.0 / static_cast<double>(n);
            for (int64_t b = 0; b < batch; ++b) {
              const int64_t off = (b * channels + c) * plane;
              const float* dy = out_i->grad.data() + off;
              const float* x = in_i->data.data() + off;
              float* dx = in_i->grad.data() + off;
              for (int64_t i = 0; i < plane; ++i) {
                const double xhat = (x[i] - mu) * is;
                const double term = static_cast<double>(dy[i]) - inv_n * sum_dy - xhat * inv_n * sum_dy_xhat;
                dx[i] += static_cast<float>(static_cast<double>(gm) * static_cast<double>(is) * term);
              }
            }
          } else {
            const float scale = gm * is;
            for (int64_t b = 0; b < batch; ++b) {
              const int64_t off = (b * channels + c) * plane;
              kernels::active().axpy(scale, out_i->grad.data() + off, in_i->grad.data() + off,
                                     static_cast<size_t>(plane));
            }
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// concat / slice / reshape / sum

Tensor concat_channels(const std::vector<Tensor>& inputs) {
  require(!inputs.empty(), "concat_channels needs at least one input");
  const Tensor& first = inputs.front();
  require(first.rank() == 4, "concat_channels inputs must be [B,C,H,W]");
  const int64_t batch = first.dim(0);
  const int64_t h = first.dim(2);
  const int64_t w = first.dim(3);
  int64_t total_c = 0;
  for (const Tensor& t : inputs) {
    require(t.rank() == 4 && t.dim(0) == batch && t.dim(2) == h && t.dim(3) == w,
            "concat_channels: mismatched dims " + shape_str(t.shape()) + " vs " +
                shape_str(first.shape()));
    total_c += t.dim(1);
  }

  Tensor out(Shape{batch, total_c, h, w});
  const int64_t plane = h * w;
  for (int64_t b = 0; b < batch; ++b) {
    int64_t c_off = 0;
    for (const Tensor& t : inputs) {
      const int64_t c = t.dim(1);
      std::memcpy(out.data().data() + (b * total_c + c_off) * plane,
                  t.data().data() + b * c * plane, sizeof(float) * static_cast<size_t>(c * plane));
      c_off += c;
    }
  }

  Tape* tape = Tape::active();
  bool any = false;
  for (const Tensor& t : inputs) any = any || want_grad(t);
  if (tape && any) {
    out.set_tracked(true);
    std::vector<std::shared_ptr<TensorImpl>> in_impls;
    in_impls.reserve(inputs.size());
    for (const Tensor& t : inputs) in_impls.push_back(t.impl());
    auto out_i = out.impl();
    tape->record([in_impls, out_i, batch, total_c, plane]() {
      if (out_i->grad.empty()) return;
      for (int64_t b = 0; b < batch; ++b) {
        int64_t c_off = 0;
        for (const auto& in_i : in_impls) {
          const int64_t c = static_cast<int64_t>(in_i->shape[1]);
          if (in_i->tracked) {
            if (in_i->grad.empty()) in_i->grad.assign(in_i->data.size(), 0.0f);
            kernels::active().axpy(1.0f, out_i->grad.data() + (b * total_c + c_off) * plane,
                                   in_i->grad.data() + b * c * plane,
                                   static_cast<size_t>(c * plane));
          }
          c_off += c;
        }
      }
    });
  }
  return out;
}

Tensor slice_channels(const Tensor& input, int64_t begin, int64_t count) {
  require(input.rank() == 4, "slice_channels input must be [B,C,H,W]");
  const int64_t batch = input.dim(0);
  const int64_t channels = input.dim(1);
  const int64_t plane = input.dim(2) * input.dim(3);
  require(begin >= 0 && count >= 1 && begin + count <= channels,
          "slice_channels range [" + std::to_string(begin) + "," + std::to_string(begin + count) +
              ") out of " + std::to_string(channels) + " channels");

  Tensor out(Shape{batch, count, input.dim(2), input.dim(3)});
  for (int64_t b = 0; b < batch; ++b) {
    std::memcpy(out.data().data() + b * count * plane,
                input.data().data() + (b * channels + begin) * plane,
                sizeof(float) * static_cast<size_t>(count * plane));
  }

  Tape* tape = Tape::active();
  if (tape && want_grad(input)) {
    out.set_tracked(true);
    auto in_i = input.impl();
    auto out_i = out.impl();
    tape->record([in_i, out_i, batch, channels, plane, begin, count]() {
      if (out_i->grad.empty()) return;
      if (in_i->grad.empty()) in_i->grad.assign(in_i->data.size(), 0.0f);
      for (int64_t b = 0; b < batch; ++b) {
        kernels::active().axpy(1.0f, out_i->grad.data() + b * count * plane,
                               in_i->grad.data() + (b * channels + begin) * plane,
                               static_cast<size_t>(count * plane));
      }
    });
  }
  return out;
}

Tensor reshape(const Tensor& input, Shape new_shape) {
  require(shape_numel(new_shape) == input.size(),
          "reshape " + shape_str(input.shape()) + " -> " + shape_str(new_shape) +
              " changes element count");
  Tensor out(std::move(new_shape), std::vector<float>(input.data().begin(), input.data().end()));
  Tape* tape = Tape::active();
  if (tape && want_grad(input)) {
    out.set_tracked(true);
    auto in_i = input.impl();
    auto out_i = out.impl();
    tape->record([in_i, out_i]() {
      if (out_i->grad.empty()) return;
      accumulate(in_i, out_i->grad.data(), out_i->grad.size());
    });
  }
  return out;
}

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (const float v : x.data()) acc += v;
  Tensor out = Tensor::scalar(static_cast<float>(acc));
  Tape* tape = Tape::active();
  if (tape && want_grad(x)) {
    out.set_tracked(true);
    auto x_i = x.impl();
    auto out_i = out.impl();
    tape->record([x_i, out_i]() {
      if (out_i->grad.empty()) return;
      if (x_i->grad.empty()) x_i->grad.assign(x_i->data.size(), 0.0f);
      const float g = out_i->grad[0];
      for (float& v : x_i->grad) v += g;
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// grad_check

GradCheckReport grad_check(const std::function<Tensor()>& fn, std::span<Tensor> inputs, double h,
                           int max_coords_per_tensor, uint64_t seed) {
  for (Tensor& t : inputs) {
    t.set_tracked(true);
    t.clear_grad();
  }

  Tape tape;
  Tensor loss;
  {
    TapeScope scope(tape);
    loss = fn();
  }
  require(loss.defined() && loss.size() == 1, "grad_check: fn must return a scalar");
  tape.backward(loss);

  std::vector<std::vector<float>> analytic;
  analytic.reserve(inputs.size());
  for (Tensor& t : inputs) {
    if (t.has_grad()) {
      analytic.emplace_back(t.grad().begin(), t.grad().end());
    } else {
      analytic.emplace_back(static_cast<size_t>(t.size()), 0.0f);
    }
  }

  GradCheckReport report;
  Rng rng(seed);
  for (size_t ti = 0; ti < inputs.size(); ++ti) {
    Tensor& t = inputs[ti];
    const int64_t size = t.size();
    std::vector<int64_t> coords;
    if (max_coords_per_tensor < 0 || size <= max_coords_per_tensor) {
      coords.resize(static_cast<size_t>(size));
      for (int64_t i = 0; i < size; ++i) coords[static_cast<size_t>(i)] = i;
    } else {
      std::unordered_set<int64_t> seen;
      while (static_cast<int>(seen.size()) < max_coords_per_tensor) {
        seen.insert(rng.uniform_int(0, size - 1));
      }
      coords.assign(seen.begin(), seen.end());
      std::sort(coords.begin(), coords.end());
    }

    for (const int64_t i : coords) {
      float& cell = t.data()[static_cast<size_t>(i)];
      const float original = cell;
      const float hi = original + static_cast<float>(h);
      const float lo = original - static_cast<float>(h);

      cell = hi;
      const double f_hi = static_cast<double>(fn().item());
      cell = lo;
      const double f_lo = static_cast<double>(fn().item());
      cell = original;

      const double numeric = (f_hi - f_lo) / (static_cast<double>(hi) - static_cast<double>(lo));
      const double exact = static_cast<double>(analytic[ti][static_cast<size_t>(i)]);
      if (!std::isfinite(numeric) || !std::isfinite(exact)) {
        report.nan_seen = true;
        report.worst_tensor = "inputs[" + std::to_string(ti) + "]";
        report.worst_index = i;
        report.max_rel_err = std::numeric_limits<double>::infinity();
        return report;
      }
      const double denom = std::max({1.0, std::abs(exact), std::abs(numeric)});
      const double rel = std::abs(exact - numeric) / denom;
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst_tensor = "inputs[" + std::to_string(ti) + "]";
        report.worst_index = i;
      }
    }
  }
  return report;
}

}  // namespace pltnet
