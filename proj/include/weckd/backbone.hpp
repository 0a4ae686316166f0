#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "weckd/tape.hpp"
#include "weckd/tensor.hpp"

namespace weckd {

struct InputSize {
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t channels = 3;
  friend bool operator==(const InputSize&, const InputSize&) = default;
};

// conv(kernel x kernel, same padding) -> ReLU -> optional 2x2 max-pool.
struct ConvBlock {
  std::size_t filters = 16;
  std::size_t kernel = 3;
  bool pool = true;
  friend bool operator==(const ConvBlock&, const ConvBlock&) = default;
};

struct BackboneConfig {
  InputSize input;
  std::vector<ConvBlock> conv_blocks{{16, 3, true}, {32, 3, true}, {64, 3, true}};
  std::size_t fc_width = 128;
  std::size_t num_classes = 4;
  bool attention_enabled = false;
  std::uint64_t init_seed = 0;

  // 32x32x3, blocks 16/32/64, fc 128, K = 4.
  static BackboneConfig desk_default();
  // 224x224x3 input with a 1024-wide FC layer.
  static BackboneConfig paper_fidelity();

  void validate() const;
  // {C', H', W'} of the final feature map.
  Dims feature_dims() const;

  friend bool operator==(const BackboneConfig&, const BackboneConfig&) = default;
};

namespace param_names {
std::string conv_kernel(std::size_t block);
std::string conv_bias(std::size_t block);
inline constexpr const char* att_weight = "att.weight";
inline constexpr const char* att_bias = "att.bias";
inline constexpr const char* fc_weight = "fc.weight";
inline constexpr const char* fc_bias = "fc.bias";
inline constexpr const char* head_weight = "head.weight";
inline constexpr const char* head_bias = "head.bias";
}  // namespace param_names

// One chain member: config plus every trainable tensor. The attention
// tensors always exist; they only participate when attention is enabled.
struct Model {
  BackboneConfig config;
  ParameterSet params;

  const Tensor& param(const std::string& name) const { return params.at(name); }
  Tensor& param(const std::string& name) { return params.at(name); }
  std::size_t parameter_count() const;
};

// He-normal weights (variance 2 / fan_in), zero biases, seeded by
// config.init_seed. The draws do not depend on attention_enabled.
Model build_model(const BackboneConfig& config);

// Expected parameter shapes for a config, keyed by parameter name.
std::map<std::string, Dims> parameter_shapes(const BackboneConfig& config);

struct ForwardOutput {
  Tensor features;   // f_base [B,C',H',W'] (pre-attention, pre-GAP)
  Tensor attention;  // [B,H',W']; empty for the base path
  Tensor pooled;     // GAP output [B,C']
  Tensor probs;      // [B,K]
  Tensor logits;     // [B,K]
};

// a[b,h,w] = sigmoid(W_att . f[b,:,h,w] + b_att) with one shared scalar bias.
Tensor attention_scores(const Tensor& features, const Tensor& att_weight, const Tensor& att_bias);

ForwardOutput forward_base(const Model& model, const Tensor& batch);

// `forced_attention` replaces the computed score map (for diagnostics).
ForwardOutput forward_attended(const Model& model, const Tensor& batch,
                               const std::optional<Tensor>& forced_attention = std::nullopt);

// Attended path if the model has attention enabled, base path otherwise.
ForwardOutput forward(const Model& model, const Tensor& batch);

struct TapedForward {
  Tape tape;
  ValueId logits;
};

// Same computation as forward(), recorded for reverse-mode differentiation.
TapedForward record_forward(const ParameterSet& params, const BackboneConfig& config,
                            const Tensor& batch);

// Replace the student's attention weights with the teacher's.
void copy_attention_weights(const Model& teacher, Model& student);

}  // namespace weckd
