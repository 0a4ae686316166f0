#include "weckd/backbone.hpp"

#include <cmath>

#include "weckd/errors.hpp"
#include "weckd/layers.hpp"
#include "weckd/rng.hpp"

namespace weckd {

namespace ly = layers;

BackboneConfig BackboneConfig::desk_default() { return BackboneConfig{}; }

BackboneConfig BackboneConfig::paper_fidelity() {
  BackboneConfig c;
  c.input = {224, 224, 3};
  c.fc_width = 1024;
  return c;
}

void BackboneConfig::validate() const {
  if (input.height == 0 || input.width == 0 || input.channels == 0) {
    throw ConfigError("input size must be positive", "backbone.input");
  }
  if (conv_blocks.empty()) throw ConfigError("at least one conv block is required", "backbone.conv_blocks");
  if (fc_width == 0) throw ConfigError("fc_width must be positive", "backbone.fc_width");
  if (num_classes < 2) throw ConfigError("need at least 2 classes", "backbone.num_classes");
  std::size_t h = input.height, w = input.width;
  for (std::size_t i = 0; i < conv_blocks.size(); ++i) {
    const auto& block = conv_blocks[i];
    const std::string path = "backbone.conv_blocks[" + std::to_string(i) + "]";
    if (block.filters == 0) throw ConfigError("filters must be positive", path);
    if (block.kernel == 0 || block.kernel % 2 == 0) {
      throw ConfigError("kernel must be odd and positive", path);
    }
    if (block.pool) {
      if (h < 2 || w < 2) {
        throw ConfigError("spatial size collapses below 1x1 at block " + std::to_string(i) + " (input " +
                              std::to_string(h) + "x" + std::to_string(w) + " to 2x2 pooling)",
                          path);
      }
      h /= 2;
      w /= 2;
    }
  }
}

Dims BackboneConfig::feature_dims() const {
  std::size_t h = input.height, w = input.width;
  for (const auto& block : conv_blocks) {
    if (block.pool) {
      h /= 2;
      w /= 2;
    }
  }
  return {conv_blocks.back().filters, h, w};
}

namespace param_names {
std::string conv_kernel(std::size_t block) { return "conv" + std::to_string(block) + ".kernel"; }
std::string conv_bias(std::size_t block) { return "conv" + std::to_string(block) + ".bias"; }
}  // namespace param_names

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : params) n += t.numel();
  return n;
}

std::map<std::string, Dims> parameter_shapes(const BackboneConfig& config) {
  std::map<std::string, Dims> shapes;
  std::size_t channels = config.input.channels;
  for (std::size_t i = 0; i < config.conv_blocks.size(); ++i) {
    const auto& b = config.conv_blocks[i];
    shapes[param_names::conv_kernel(i)] = {b.filters, channels, b.kernel, b.kernel};
    shapes[param_names::conv_bias(i)] = {b.filters};
    channels = b.filters;
  }
  shapes[param_names::att_weight] = {channels, 1};
  shapes[param_names::att_bias] = {1};
  shapes[param_names::fc_weight] = {channels, config.fc_width};
  shapes[param_names::fc_bias] = {config.fc_width};
  shapes[param_names::head_weight] = {config.fc_width, config.num_classes};
  shapes[param_names::head_bias] = {config.num_classes};
  return shapes;
}

Model build_model(const BackboneConfig& config) {
  config.validate();
  Model model{config, {}};
  Rng rng(config.init_seed);
  const auto he = [&](Dims dims, std::size_t fan_in) {
    Tensor t(std::move(dims));
    const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (auto& v : t.data()) v = rng.normal(0.0, stddev);
    return t;
  };
  // Draw order is fixed: conv blocks, attention, fc, head.
  std::size_t channels = config.input.channels;
  for (std::size_t i = 0; i < config.conv_blocks.size(); ++i) {
    const auto& b = config.conv_blocks[i];
    model.params[param_names::conv_kernel(i)] =
        he({b.filters, channels, b.kernel, b.kernel}, channels * b.kernel * b.kernel);
    model.params[param_names::conv_bias(i)] = Tensor({b.filters});
    channels = b.filters;
  }
  model.params[param_names::att_weight] = he({channels, 1}, channels);
  model.params[param_names::att_bias] = Tensor({1});
  model.params[param_names::fc_weight] = he({channels, config.fc_width}, channels);
  model.params[param_names::fc_bias] = Tensor({config.fc_width});
  model.params[param_names::head_weight] = he({config.fc_width, config.num_classes}, config.fc_width);
  model.params[param_names::head_bias] = Tensor({config.num_classes});
  return model;
}

namespace {

void check_batch(const BackboneConfig& config, const Tensor& batch) {
  const auto& in = config.input;
  if (batch.rank() != 4 || batch.dim(1) != in.channels || batch.dim(2) != in.height ||
      batch.dim(3) != in.width) {
    throw ShapeError("backbone expects [B," + std::to_string(in.channels) + "," +
                     std::to_string(in.height) + "," + std::to_string(in.width) + "], got " +
                     batch.shape_string());
  }
}

Tensor extract_features(const Model& model, const Tensor& batch) {
  check_batch(model.config, batch);
  Tensor x = batch;
  for (std::size_t i = 0; i < model.config.conv_blocks.size(); ++i) {
    const auto& b = model.config.conv_blocks[i];
    x = ly::conv2d_forward(x, model.param(param_names::conv_kernel(i)),
                           model.param(param_names::conv_bias(i)), 1, b.kernel / 2);
    x = ly::relu_forward(x);
    if (b.pool) x = ly::maxpool2_forward(x).output;
  }
  return x;
}

void classify(const Model& model, ForwardOutput& out, const Tensor& gated) {
  out.pooled = ly::gap_forward(gated);
  const Tensor hidden = ly::relu_forward(
      ly::dense_forward(out.pooled, model.param(param_names::fc_weight), model.param(param_names::fc_bias)));
  out.logits = ly::dense_forward(hidden, model.param(param_names::head_weight),
                                 model.param(param_names::head_bias));
  out.probs = ly::softmax_rows(out.logits, 1.0);
}

}  // namespace

Tensor attention_scores(const Tensor& features, const Tensor& att_weight, const Tensor& att_bias) {
  return ly::sigmoid_forward(ly::channel_projection_forward(features, att_weight, att_bias));
}

ForwardOutput forward_base(const Model& model, const Tensor& batch) {
  ForwardOutput out;
  out.features = extract_features(model, batch);
  classify(model, out, out.features);
  return out;
}

ForwardOutput forward_attended(const Model& model, const Tensor& batch,
                               const std::optional<Tensor>& forced_attention) {
  if (!model.config.attention_enabled) {
    throw ContractError("forward_attended called on a model with attention disabled");
  }
  ForwardOutput out;
  out.features = extract_features(model, batch);
  out.attention = forced_attention ? *forced_attention
                                   : attention_scores(out.features, model.param(param_names::att_weight),
                                                      model.param(param_names::att_bias));
  classify(model, out, ly::spatial_gate_forward(out.features, out.attention));
  return out;
}

ForwardOutput forward(const Model& model, const Tensor& batch) {
  return model.config.attention_enabled ? forward_attended(model, batch) : forward_base(model, batch);
}

TapedForward record_forward(const ParameterSet& params, const BackboneConfig& config,
                            const Tensor& batch) {
  check_batch(config, batch);
  TapedForward out;
  Tape& t = out.tape;
  std::map<std::string, ValueId> ids;
  for (const auto& [name, value] : params) ids[name] = t.parameter(name, value);
  const auto id = [&](const std::string& name) {
    const auto it = ids.find(name);
    if (it == ids.end()) throw ContractError("record_forward: missing parameter " + name);
    return it->second;
  };
  ValueId x = t.constant(batch);
  for (std::size_t i = 0; i < config.conv_blocks.size(); ++i) {
    const auto& b = config.conv_blocks[i];
    x = t.conv2d(x, id(param_names::conv_kernel(i)), id(param_names::conv_bias(i)), 1, b.kernel / 2);
    x = t.relu(x);
    if (b.pool) x = t.maxpool2(x);
  }
  if (config.attention_enabled) {
    const ValueId scores =
        t.sigmoid(t.channel_projection(x, id(param_names::att_weight), id(param_names::att_bias)));
    x = t.spatial_gate(x, scores);
  }
  x = t.gap(x);
  x = t.relu(t.dense(x, id(param_names::fc_weight), id(param_names::fc_bias)));
  out.logits = t.dense(x, id(param_names::head_weight), id(param_names::head_bias));
  return out;
}

void copy_attention_weights(const Model& teacher, Model& student) {
  const Tensor& w = teacher.param(param_names::att_weight);
  Tensor& target = student.param(param_names::att_weight);
  if (w.dims() != target.dims()) {
    throw ShapeError("copy_attention_weights: teacher attention " + w.shape_string() +
                     " does not match student " + target.shape_string() + " (feature channels differ)");
  }
  target = w;
  student.param(param_names::att_bias) = teacher.param(param_names::att_bias);
}

}  // namespace weckd
