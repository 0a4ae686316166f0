#include "weckd/layers.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "weckd/errors.hpp"

namespace weckd::layers {

namespace {

void require_rank(const Tensor& t, std::size_t rank, const char* op, const char* what) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) +
                     ", got " + t.shape_string());
  }
}

// Column matrix for one sample: rows r = (c*k + ki)*k + kj, columns p = oh*OW + ow.
void im2col(const double* x, std::size_t channels, std::size_t height, std::size_t width,
            std::size_t k, std::size_t stride, std::size_t pad, std::size_t out_h, std::size_t out_w,
            double* cols) {
  const std::size_t plane = out_h * out_w;
  for (std::size_t c = 0; c < channels; ++c) {
    const double* xc = x + c * height * width;
    for (std::size_t ki = 0; ki < k; ++ki) {
      for (std::size_t kj = 0; kj < k; ++kj) {
        double* row = cols + ((c * k + ki) * k + kj) * plane;
        for (std::size_t oh = 0; oh < out_h; ++oh) {
          const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * stride + ki) -
                                    static_cast<std::ptrdiff_t>(pad);
          double* dst = row + oh * out_w;
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(height)) {
            std::fill(dst, dst + out_w, 0.0);
            continue;
          }
          const double* src = xc + static_cast<std::size_t>(ih) * width;
          for (std::size_t ow = 0; ow < out_w; ++ow) {
            const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * stride + kj) -
                                      static_cast<std::ptrdiff_t>(pad);
            dst[ow] = (iw < 0 || iw >= static_cast<std::ptrdiff_t>(width))
                          ? 0.0
                          : src[static_cast<std::size_t>(iw)];
          }
        }
      }
    }
  }
}

void col2im_add(const double* cols, std::size_t channels, std::size_t height, std::size_t width,
                std::size_t k, std::size_t stride, std::size_t pad, std::size_t out_h,
                std::size_t out_w, double* x) {
  const std::size_t plane = out_h * out_w;
  for (std::size_t c = 0; c < channels; ++c) {
    double* xc = x + c * height * width;
    for (std::size_t ki = 0; ki < k; ++ki) {
      for (std::size_t kj = 0; kj < k; ++kj) {
        const double* row = cols + ((c * k + ki) * k + kj) * plane;
        for (std::size_t oh = 0; oh < out_h; ++oh) {
          const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * stride + ki) -
                                    static_cast<std::ptrdiff_t>(pad);
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(height)) continue;
          double* dst = xc + static_cast<std::size_t>(ih) * width;
          const double* src = row + oh * out_w;
          for (std::size_t ow = 0; ow < out_w; ++ow) {
            const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * stride + kj) -
                                      static_cast<std::ptrdiff_t>(pad);
            if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(width)) continue;
            dst[static_cast<std::size_t>(iw)] += src[ow];
          }
        }
      }
    }
  }
}

struct ConvGeometry {
  std::size_t batch, channels, height, width, filters, k, out_h, out_w;
};

ConvGeometry conv_geometry(const Tensor& input, const Tensor& kernel, std::size_t stride,
                           std::size_t pad) {
  require_rank(input, 4, "conv2d", "input");
  require_rank(kernel, 4, "conv2d", "kernel");
  if (stride < 1) throw ContractError("conv2d: stride must be >= 1");
  if (input.dim(1) != kernel.dim(1)) {
    throw ShapeError("conv2d: input channels do not match kernel channels: input " +
                     input.shape_string() + ", kernel " + kernel.shape_string());
  }
  if (kernel.dim(2) != kernel.dim(3)) {
    throw ShapeError("conv2d: kernel must be square, got " + kernel.shape_string());
  }
  ConvGeometry g{input.dim(0), input.dim(1), input.dim(2), input.dim(3),
                 kernel.dim(0), kernel.dim(2), 0, 0};
  if (g.k > g.height + 2 * pad || g.k > g.width + 2 * pad) {
    throw ShapeError("conv2d: kernel " + kernel.shape_string() + " larger than padded input " +
                     input.shape_string() + " with pad " + std::to_string(pad));
  }
  g.out_h = (g.height + 2 * pad - g.k) / stride + 1;
  g.out_w = (g.width + 2 * pad - g.k) / stride + 1;
  return g;
}

}  // namespace

const char* layer_name(LayerKind kind) {
  switch (kind) {
    case LayerKind::relu: return "relu";
    case LayerKind::maxpool2: return "maxpool2";
    case LayerKind::dense: return "dense";
    case LayerKind::gap: return "gap";
    case LayerKind::sigmoid: return "sigmoid";
    case LayerKind::softmax: return "softmax";
  }
  return "unknown";
}

Tensor conv2d_forward(const Tensor& input, const Tensor& kernel, const Tensor& bias,
                      std::size_t stride, std::size_t pad) {
  const ConvGeometry g = conv_geometry(input, kernel, stride, pad);
  if (bias.numel() != g.filters) {
    throw ShapeError("conv2d: bias " + bias.shape_string() + " does not match kernel " +
                     kernel.shape_string());
  }
  const std::size_t plane = g.out_h * g.out_w;
  const std::size_t rows = g.channels * g.k * g.k;
  Tensor out({g.batch, g.filters, g.out_h, g.out_w});
  std::vector<double> cols(rows * plane);
  const double* kw = kernel.raw();
  for (std::size_t b = 0; b < g.batch; ++b) {
    im2col(input.raw() + b * g.channels * g.height * g.width, g.channels, g.height, g.width, g.k,
           stride, pad, g.out_h, g.out_w, cols.data());
    double* ob = out.raw() + b * g.filters * plane;
    for (std::size_t f = 0; f < g.filters; ++f) std::fill(ob + f * plane, ob + (f + 1) * plane, bias[f]);
    std::size_t f = 0;
    for (; f + 4 <= g.filters; f += 4) {
      double* o0 = ob + f * plane;
      double* o1 = o0 + plane;
      double* o2 = o1 + plane;
      double* o3 = o2 + plane;
      for (std::size_t r = 0; r < rows; ++r) {
        const double a0 = kw[f * rows + r], a1 = kw[(f + 1) * rows + r];
        const double a2 = kw[(f + 2) * rows + r], a3 = kw[(f + 3) * rows + r];
        const double* col = cols.data() + r * plane;
#pragma omp simd
        for (std::size_t p = 0; p < plane; ++p) {
          const double c = col[p];
          o0[p] += a0 * c;
          o1[p] += a1 * c;
          o2[p] += a2 * c;
          o3[p] += a3 * c;
        }
      }
    }
    for (; f < g.filters; ++f) {
      double* of = ob + f * plane;
      const double* kf = kw + f * rows;
      for (std::size_t r = 0; r < rows; ++r) {
        const double a = kf[r];
        const double* col = cols.data() + r * plane;
#pragma omp simd
        for (std::size_t p = 0; p < plane; ++p) of[p] += a * col[p];
      }
    }
  }
  return out;
}

Conv2dGrads conv2d_backward(const Tensor& input, const Tensor& kernel, const Tensor& grad_output,
                            std::size_t stride, std::size_t pad, bool need_input_grad) {
  const ConvGeometry g = conv_geometry(input, kernel, stride, pad);
  const Dims expected{g.batch, g.filters, g.out_h, g.out_w};
  if (grad_output.dims() != expected) {
    throw ShapeError("conv2d_backward: grad_output " + grad_output.shape_string() +
                     " does not match output dims " + format_dims(expected));
  }
  const std::size_t plane = g.out_h * g.out_w;
  const std::size_t rows = g.channels * g.k * g.k;
  Conv2dGrads grads{need_input_grad ? Tensor(input.dims()) : Tensor{}, Tensor(kernel.dims()),
                    Tensor({g.filters})};
  std::vector<double> cols(rows * plane);
  std::vector<double> dcols(need_input_grad ? rows * plane : 0);
  const double* kw = kernel.raw();
  double* dk = grads.kernel.raw();
  for (std::size_t b = 0; b < g.batch; ++b) {
    const std::size_t in_offset = b * g.channels * g.height * g.width;
    im2col(input.raw() + in_offset, g.channels, g.height, g.width, g.k, stride, pad, g.out_h,
           g.out_w, cols.data());
    const double* gb = grad_output.raw() + b * g.filters * plane;
    for (std::size_t f = 0; f < g.filters; ++f) {
      const double* gf = gb + f * plane;
      double bias_sum = 0.0;
#pragma omp simd reduction(+ : bias_sum)
      for (std::size_t p = 0; p < plane; ++p) bias_sum += gf[p];
      grads.bias[f] += bias_sum;
    }
    std::size_t f = 0;
    for (; f + 4 <= g.filters; f += 4) {
      const double* g0 = gb + f * plane;
      const double* g1 = g0 + plane;
      const double* g2 = g1 + plane;
      const double* g3 = g2 + plane;
      for (std::size_t r = 0; r < rows; ++r) {
        const double* col = cols.data() + r * plane;
        double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
#pragma omp simd reduction(+ : s0, s1, s2, s3)
        for (std::size_t p = 0; p < plane; ++p) {
          const double c = col[p];
          s0 += g0[p] * c;
          s1 += g1[p] * c;
          s2 += g2[p] * c;
          s3 += g3[p] * c;
        }
        dk[f * rows + r] += s0;
        dk[(f + 1) * rows + r] += s1;
        dk[(f + 2) * rows + r] += s2;
        dk[(f + 3) * rows + r] += s3;
      }
    }
    for (; f < g.filters; ++f) {
      const double* gf = gb + f * plane;
      double* dkf = dk + f * rows;
      for (std::size_t r = 0; r < rows; ++r) {
        const double* col = cols.data() + r * plane;
        double acc = 0.0;
#pragma omp simd reduction(+ : acc)
        for (std::size_t p = 0; p < plane; ++p) acc += gf[p] * col[p];
        dkf[r] += acc;
      }
    }
    if (need_input_grad) {
      std::fill(dcols.begin(), dcols.end(), 0.0);
      std::size_t f = 0;
      for (; f + 4 <= g.filters; f += 4) {
        const double* g0 = gb + f * plane;
        const double* g1 = g0 + plane;
        const double* g2 = g1 + plane;
        const double* g3 = g2 + plane;
        for (std::size_t r = 0; r < rows; ++r) {
          const double a0 = kw[f * rows + r], a1 = kw[(f + 1) * rows + r];
          const double a2 = kw[(f + 2) * rows + r], a3 = kw[(f + 3) * rows + r];
          double* dcol = dcols.data() + r * plane;
#pragma omp simd
          for (std::size_t p = 0; p < plane; ++p) dcol[p] += a0 * g0[p] + a1 * g1[p] + a2 * g2[p] + a3 * g3[p];
        }
      }
      for (; f < g.filters; ++f) {
        const double* gf = gb + f * plane;
        const double* kf = kw + f * rows;
        for (std::size_t r = 0; r < rows; ++r) {
          const double a = kf[r];
          double* dcol = dcols.data() + r * plane;
#pragma omp simd
          for (std::size_t p = 0; p < plane; ++p) dcol[p] += a * gf[p];
        }
      }
      col2im_add(dcols.data(), g.channels, g.height, g.width, g.k, stride, pad, g.out_h, g.out_w,
                 grads.input.raw() + in_offset);
    }
  }
  return grads;
}

Tensor relu_forward(const Tensor& x) {
  Tensor y = x;
  for (auto& v : y.data()) v = v > 0.0 ? v : 0.0;
  return y;
}

Tensor relu_backward(const Tensor& x, const Tensor& grad_output) {
  if (x.dims() != grad_output.dims()) {
    throw ShapeError("relu_backward: " + x.shape_string() + " vs " + grad_output.shape_string());
  }
  Tensor g(x.dims());
  for (std::size_t i = 0; i < x.numel(); ++i) g[i] = x[i] > 0.0 ? grad_output[i] : 0.0;
  return g;
}

MaxPoolResult maxpool2_forward(const Tensor& x) {
  require_rank(x, 4, "maxpool2", "input");
  const std::size_t batch = x.dim(0), channels = x.dim(1), height = x.dim(2), width = x.dim(3);
  if (height < 2 || width < 2) {
    throw ShapeError("maxpool2: spatial extent must be at least 2x2, got " + x.shape_string());
  }
  const std::size_t out_h = height / 2, out_w = width / 2;
  MaxPoolResult result{Tensor({batch, channels, out_h, out_w}), {}};
  result.argmax.resize(result.output.numel());
  std::size_t o = 0;
  for (std::size_t bc = 0; bc < batch * channels; ++bc) {
    const std::size_t base = bc * height * width;
    for (std::size_t oh = 0; oh < out_h; ++oh) {
      for (std::size_t ow = 0; ow < out_w; ++ow, ++o) {
        std::size_t best = base + (2 * oh) * width + 2 * ow;
        double best_value = x[best];
        for (std::size_t dh = 0; dh < 2; ++dh) {
          for (std::size_t dw = 0; dw < 2; ++dw) {
            const std::size_t idx = base + (2 * oh + dh) * width + 2 * ow + dw;
            if (x[idx] > best_value) {
              best_value = x[idx];
              best = idx;
            }
          }
        }
        result.output[o] = best_value;
        result.argmax[o] = best;
      }
    }
  }
  return result;
}

Tensor maxpool2_backward(const Dims& input_dims, std::span<const std::size_t> argmax,
                         const Tensor& grad_output) {
  if (argmax.size() != grad_output.numel()) {
    throw ShapeError("maxpool2_backward: routing table size does not match grad " +
                     grad_output.shape_string());
  }
  Tensor g(input_dims);
  for (std::size_t i = 0; i < argmax.size(); ++i) g[argmax[i]] += grad_output[i];
  return g;
}

Tensor dense_forward(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_rank(x, 2, "dense", "input");
  require_rank(weight, 2, "dense", "weight");
  if (x.dim(1) != weight.dim(0)) {
    throw ShapeError("dense: input " + x.shape_string() + " does not match weight inner dimension " +
                     weight.shape_string());
  }
  const std::size_t batch = x.dim(0), in = weight.dim(0), out_dim = weight.dim(1);
  if (bias.numel() != out_dim) {
    throw ShapeError("dense: bias " + bias.shape_string() + " does not match weight " +
                     weight.shape_string());
  }
  Tensor y({batch, out_dim});
  for (std::size_t b = 0; b < batch; ++b) {
    double* yb = y.raw() + b * out_dim;
    std::copy(bias.raw(), bias.raw() + out_dim, yb);
    const double* xb = x.raw() + b * in;
    for (std::size_t i = 0; i < in; ++i) {
      const double a = xb[i];
      const double* wi = weight.raw() + i * out_dim;
      for (std::size_t o = 0; o < out_dim; ++o) yb[o] += a * wi[o];
    }
  }
  return y;
}

DenseGrads dense_backward(const Tensor& x, const Tensor& weight, const Tensor& grad_output) {
  const std::size_t batch = x.dim(0), in = weight.dim(0), out_dim = weight.dim(1);
  if (grad_output.dims() != Dims{batch, out_dim}) {
    throw ShapeError("dense_backward: grad " + grad_output.shape_string() + " vs weight " +
                     weight.shape_string());
  }
  DenseGrads grads{Tensor(x.dims()), Tensor(weight.dims()), Tensor({out_dim})};
  for (std::size_t b = 0; b < batch; ++b) {
    const double* gb = grad_output.raw() + b * out_dim;
    const double* xb = x.raw() + b * in;
    double* dxb = grads.input.raw() + b * in;
    for (std::size_t o = 0; o < out_dim; ++o) grads.bias[o] += gb[o];
    for (std::size_t i = 0; i < in; ++i) {
      const double a = xb[i];
      const double* wi = weight.raw() + i * out_dim;
      double* dwi = grads.weight.raw() + i * out_dim;
      double acc = 0.0;
#pragma omp simd reduction(+ : acc)
      for (std::size_t o = 0; o < out_dim; ++o) {
        dwi[o] += a * gb[o];
        acc += wi[o] * gb[o];
      }
      dxb[i] = acc;
    }
  }
  return grads;
}

Tensor gap_forward(const Tensor& x) {
  require_rank(x, 4, "gap", "input");
  const std::size_t bc = x.dim(0) * x.dim(1), plane = x.dim(2) * x.dim(3);
  Tensor y({x.dim(0), x.dim(1)});
  const double inv = 1.0 / static_cast<double>(plane);
  for (std::size_t i = 0; i < bc; ++i) {
    const double* src = x.raw() + i * plane;
    double s = 0.0;
    for (std::size_t p = 0; p < plane; ++p) s += src[p];
    y[i] = s * inv;
  }
  return y;
}

Tensor gap_backward(const Dims& input_dims, const Tensor& grad_output) {
  Tensor g(input_dims);
  const std::size_t plane = input_dims[2] * input_dims[3];
  if (grad_output.numel() * plane != g.numel()) {
    throw ShapeError("gap_backward: grad " + grad_output.shape_string() + " vs input " +
                     format_dims(input_dims));
  }
  const double inv = 1.0 / static_cast<double>(plane);
  for (std::size_t i = 0; i < grad_output.numel(); ++i) {
    std::fill(g.raw() + i * plane, g.raw() + (i + 1) * plane, grad_output[i] * inv);
  }
  return g;
}

namespace {
double sigmoid(double v) {
  if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}
}  // namespace

Tensor sigmoid_forward(const Tensor& x) {
  Tensor y = x;
  for (auto& v : y.data()) v = sigmoid(v);
  return y;
}

Tensor sigmoid_backward(const Tensor& y, const Tensor& grad_output) {
  Tensor g(y.dims());
  for (std::size_t i = 0; i < y.numel(); ++i) g[i] = grad_output[i] * y[i] * (1.0 - y[i]);
  return g;
}

Tensor softmax_rows(const Tensor& z, double temperature) {
  require_rank(z, 2, "softmax", "logits");
  const std::size_t rows = z.dim(0), k = z.dim(1);
  Tensor p(z.dims());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* zr = z.raw() + r * k;
    double* pr = p.raw() + r * k;
    double top = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < k; ++c) top = std::max(top, zr[c]);
    double total = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      pr[c] = std::exp((zr[c] - top) / temperature);
      total += pr[c];
    }
    for (std::size_t c = 0; c < k; ++c) pr[c] /= total;
  }
  return p;
}

Tensor softmax_backward(const Tensor& y, const Tensor& grad_output) {
  const std::size_t rows = y.dim(0), k = y.dim(1);
  Tensor g(y.dims());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* yr = y.raw() + r * k;
    const double* gr = grad_output.raw() + r * k;
    double dot = 0.0;
    for (std::size_t c = 0; c < k; ++c) dot += yr[c] * gr[c];
    for (std::size_t c = 0; c < k; ++c) g.raw()[r * k + c] = yr[c] * (gr[c] - dot);
  }
  return g;
}

Tensor channel_projection_forward(const Tensor& f, const Tensor& weight, const Tensor& bias) {
  require_rank(f, 4, "channel_projection", "feature map");
  const std::size_t batch = f.dim(0), channels = f.dim(1), plane = f.dim(2) * f.dim(3);
  if (weight.numel() != channels || (weight.rank() == 2 && weight.dim(1) != 1)) {
    throw ShapeError("attention: feature channels " + f.shape_string() +
                     " do not match attention weight " + weight.shape_string());
  }
  if (bias.numel() != 1) {
    throw ShapeError("attention: bias must be a single scalar, got " + bias.shape_string());
  }
  Tensor out({batch, f.dim(2), f.dim(3)}, bias[0]);
  for (std::size_t b = 0; b < batch; ++b) {
    double* ob = out.raw() + b * plane;
    for (std::size_t c = 0; c < channels; ++c) {
      const double a = weight[c];
      const double* fc = f.raw() + (b * channels + c) * plane;
      for (std::size_t p = 0; p < plane; ++p) ob[p] += a * fc[p];
    }
  }
  return out;
}

ChannelProjectionGrads channel_projection_backward(const Tensor& f, const Tensor& weight,
                                                   const Tensor& grad_output) {
  const std::size_t batch = f.dim(0), channels = f.dim(1), plane = f.dim(2) * f.dim(3);
  ChannelProjectionGrads grads{Tensor(f.dims()), Tensor(weight.dims()), Tensor({1})};
  for (std::size_t b = 0; b < batch; ++b) {
    const double* gb = grad_output.raw() + b * plane;
    double bias_sum = 0.0;
    for (std::size_t p = 0; p < plane; ++p) bias_sum += gb[p];
    grads.bias[0] += bias_sum;
    for (std::size_t c = 0; c < channels; ++c) {
      const double a = weight[c];
      const double* fc = f.raw() + (b * channels + c) * plane;
      double* dfc = grads.input.raw() + (b * channels + c) * plane;
      double acc = 0.0;
#pragma omp simd reduction(+ : acc)
      for (std::size_t p = 0; p < plane; ++p) {
        dfc[p] = a * gb[p];
        acc += fc[p] * gb[p];
      }
      grads.weight[c] += acc;
    }
  }
  return grads;
}

Tensor spatial_gate_forward(const Tensor& f, const Tensor& gate) {
  require_rank(f, 4, "spatial_gate", "feature map");
  const Dims expected{f.dim(0), f.dim(2), f.dim(3)};
  if (gate.dims() != expected) {
    throw ShapeError("spatial_gate: gate " + gate.shape_string() + " does not match feature map " +
                     f.shape_string());
  }
  const std::size_t batch = f.dim(0), channels = f.dim(1), plane = f.dim(2) * f.dim(3);
  Tensor out(f.dims());
  for (std::size_t b = 0; b < batch; ++b) {
    const double* gb = gate.raw() + b * plane;
    for (std::size_t c = 0; c < channels; ++c) {
      const std::size_t off = (b * channels + c) * plane;
      for (std::size_t p = 0; p < plane; ++p) out[off + p] = f[off + p] * gb[p];
    }
  }
  return out;
}

SpatialGateGrads spatial_gate_backward(const Tensor& f, const Tensor& gate,
                                       const Tensor& grad_output) {
  const std::size_t batch = f.dim(0), channels = f.dim(1), plane = f.dim(2) * f.dim(3);
  SpatialGateGrads grads{Tensor(f.dims()), Tensor(gate.dims())};
  for (std::size_t b = 0; b < batch; ++b) {
    const double* gb = gate.raw() + b * plane;
    double* dgb = grads.gate.raw() + b * plane;
    for (std::size_t c = 0; c < channels; ++c) {
      const std::size_t off = (b * channels + c) * plane;
      for (std::size_t p = 0; p < plane; ++p) {
        grads.input[off + p] = grad_output[off + p] * gb[p];
        dgb[p] += grad_output[off + p] * f[off + p];
      }
    }
  }
  return grads;
}

Tensor layer_forward(LayerKind kind, const Tensor& input, std::span<const Tensor> params) {
  switch (kind) {
    case LayerKind::relu: return relu_forward(input);
    case LayerKind::maxpool2: return maxpool2_forward(input).output;
    case LayerKind::dense:
      if (params.size() != 2) throw ContractError("dense layer needs {weight, bias}");
      return dense_forward(input, params[0], params[1]);
    case LayerKind::gap: return gap_forward(input);
    case LayerKind::sigmoid: return sigmoid_forward(input);
    case LayerKind::softmax: return softmax_rows(input, 1.0);
  }
  throw ContractError("unknown layer kind");
}

}  // namespace weckd::layers
