#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "weckd/tensor.hpp"

// Forward and backward kernels for the closed set of primitives the backbone
// is built from. All kernels are pure and deterministic; reductions run in a
// fixed order so results are bit-reproducible for a given build.
namespace weckd::layers {

enum class LayerKind { relu, maxpool2, dense, gap, sigmoid, softmax };

const char* layer_name(LayerKind kind);

// Cross-correlation, zero padding, no dilation.
// input [B,C,H,W], kernel [F,C,k,k], bias [F] -> [B,F,H',W'],
// H' = (H + 2 pad - k) / stride + 1.
Tensor conv2d_forward(const Tensor& input, const Tensor& kernel, const Tensor& bias,
                      std::size_t stride, std::size_t pad);

struct Conv2dGrads {
  Tensor input;
  Tensor kernel;
  Tensor bias;
};

Conv2dGrads conv2d_backward(const Tensor& input, const Tensor& kernel, const Tensor& grad_output,
                            std::size_t stride, std::size_t pad, bool need_input_grad = true);

Tensor relu_forward(const Tensor& x);
Tensor relu_backward(const Tensor& x, const Tensor& grad_output);

// 2x2 window, stride 2, floor on odd extents. `argmax` holds the flat input
// index routed to each output; ties go to the first index in row-major order.
struct MaxPoolResult {
  Tensor output;
  std::vector<std::size_t> argmax;
};
MaxPoolResult maxpool2_forward(const Tensor& x);
Tensor maxpool2_backward(const Dims& input_dims, std::span<const std::size_t> argmax,
                         const Tensor& grad_output);

// x [B,in], weight [in,out], bias [out] -> [B,out]
Tensor dense_forward(const Tensor& x, const Tensor& weight, const Tensor& bias);

struct DenseGrads {
  Tensor input;
  Tensor weight;
  Tensor bias;
};
DenseGrads dense_backward(const Tensor& x, const Tensor& weight, const Tensor& grad_output);

// Spatial mean: [B,C,H,W] -> [B,C].
Tensor gap_forward(const Tensor& x);
Tensor gap_backward(const Dims& input_dims, const Tensor& grad_output);

Tensor sigmoid_forward(const Tensor& x);
Tensor sigmoid_backward(const Tensor& y, const Tensor& grad_output);

// Row-wise softmax of z / temperature over the last axis of a [B,K] tensor,
// max-subtracted.
Tensor softmax_rows(const Tensor& z, double temperature = 1.0);
Tensor softmax_backward(const Tensor& y, const Tensor& grad_output);

// Per-location linear map over channels: f [B,C,H,W], weight [C,1], bias [1]
// -> [B,H,W] with out[b,h,w] = sum_c weight[c] f[b,c,h,w] + bias.
Tensor channel_projection_forward(const Tensor& f, const Tensor& weight, const Tensor& bias);

struct ChannelProjectionGrads {
  Tensor input;
  Tensor weight;
  Tensor bias;
};
ChannelProjectionGrads channel_projection_backward(const Tensor& f, const Tensor& weight,
                                                   const Tensor& grad_output);

// Broadcast one gate per spatial location across channels:
// f [B,C,H,W], gate [B,H,W] -> f * gate.
Tensor spatial_gate_forward(const Tensor& f, const Tensor& gate);

struct SpatialGateGrads {
  Tensor input;
  Tensor gate;
};
SpatialGateGrads spatial_gate_backward(const Tensor& f, const Tensor& gate, const Tensor& grad_output);

// Dispatch for the parameter-free kinds plus dense (params = {weight, bias}).
Tensor layer_forward(LayerKind kind, const Tensor& input, std::span<const Tensor> params = {});

}  // namespace weckd::layers
