#include "weckd/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "weckd/errors.hpp"

namespace weckd::config {

namespace {

std::string join(const std::string& path, const std::string& key) { return path.empty() ? key : path + "." + key; }

// Typed, strict view of one JSON object: every key read is remembered, and
// finish() rejects the rest.
class Object {
 public:
  Object(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j.is_object()) throw ConfigError("expected an object", path_.empty() ? "<root>" : path_);
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  const json* child(const std::string& key) {
    seen_.insert(key);
    const auto it = j_.find(key);
    return it == j_.end() || it->is_null() ? nullptr : &*it;
  }

  double number(const std::string& key, double fallback) {
    const json* v = child(key);
    if (!v) return fallback;
    if (!v->is_number()) throw ConfigError("expected a number", join(path_, key));
    return v->get<double>();
  }

  std::uint64_t unsigned_int(const std::string& key, std::uint64_t fallback) {
    const json* v = child(key);
    if (!v) return fallback;
    if (!v->is_number_integer() || (v->is_number_integer() && !v->is_number_unsigned() && v->get<std::int64_t>() < 0)) {
      throw ConfigError("expected a non-negative integer", join(path_, key));
    }
    return v->get<std::uint64_t>();
  }

  bool boolean(const std::string& key, bool fallback) {
    const json* v = child(key);
    if (!v) return fallback;
    if (!v->is_boolean()) throw ConfigError("expected true or false", join(path_, key));
    return v->get<bool>();
  }

  std::string string(const std::string& key, const std::string& fallback) {
    const json* v = child(key);
    if (!v) return fallback;
    if (!v->is_string()) throw ConfigError("expected a string", join(path_, key));
    return v->get<std::string>();
  }

  std::string path(const std::string& key) const { return join(path_, key); }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.count(key)) throw ConfigError("unknown key", join(path_, key));
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

template <std::size_t N>
std::array<bool, N> bool_array(Object& o, const std::string& key, std::array<bool, N> fallback) {
  const json* v = o.child(key);
  if (!v) return fallback;
  if (!v->is_array() || v->size() != N) {
    throw ConfigError("expected an array of " + std::to_string(N) + " booleans", o.path(key));
  }
  std::array<bool, N> out{};
  for (std::size_t i = 0; i < N; ++i) {
    if (!(*v)[i].is_boolean()) throw ConfigError("expected a boolean", o.path(key) + "[" + std::to_string(i) + "]");
    out[i] = (*v)[i].get<bool>();
  }
  return out;
}

const char* augment_name(data::AugmentOp op) {
  switch (op) {
    case data::AugmentOp::hflip: return "hflip";
    case data::AugmentOp::vflip: return "vflip";
    case data::AugmentOp::rot90: return "rot90";
  }
  return "?";
}

json synthetic_to_json(const data::SyntheticSpec& s) {
  return {{"n", s.n},         {"classes", s.classes},     {"height", s.height},
          {"width", s.width}, {"noise_std", s.noise_std}, {"seed", s.seed}};
}

data::SyntheticSpec synthetic_from_json(const json& j, const std::string& path) {
  Object o(j, path);
  data::SyntheticSpec s;
  s.n = o.unsigned_int("n", s.n);
  s.classes = o.unsigned_int("classes", s.classes);
  s.height = o.unsigned_int("height", s.height);
  s.width = o.unsigned_int("width", s.width);
  s.noise_std = o.number("noise_std", s.noise_std);
  s.seed = o.unsigned_int("seed", s.seed);
  o.finish();
  if (s.classes < 2 || s.classes > data::kMaxSyntheticClasses) throw ConfigError("must lie in [2, 8]", o.path("classes"));
  if (s.n < 10 * s.classes) throw ConfigError("must be at least 10 * classes", o.path("n"));
  if (s.height < 8) throw ConfigError("must be at least 8", o.path("height"));
  if (s.width < 8) throw ConfigError("must be at least 8", o.path("width"));
  if (!(s.noise_std >= 0.0)) throw ConfigError("must be non-negative", o.path("noise_std"));
  return s;
}

}  // namespace

json to_json(const BackboneConfig& c) {
  json blocks = json::array();
  for (const auto& b : c.conv_blocks) blocks.push_back({{"filters", b.filters}, {"kernel", b.kernel}, {"pool", b.pool}});
  return {{"input", {{"height", c.input.height}, {"width", c.input.width}, {"channels", c.input.channels}}},
          {"conv_blocks", blocks},
          {"fc_width", c.fc_width},
          {"num_classes", c.num_classes},
          {"attention_enabled", c.attention_enabled},
          {"init_seed", c.init_seed}};
}

namespace {

BackboneConfig backbone_fields(Object& o, bool allow_attention) {
  BackboneConfig c;
  if (const json* in = o.child("input")) {
    Object i(*in, o.path("input"));
    c.input.height = i.unsigned_int("height", c.input.height);
    c.input.width = i.unsigned_int("width", c.input.width);
    c.input.channels = i.unsigned_int("channels", c.input.channels);
    i.finish();
  }
  if (const json* blocks = o.child("conv_blocks")) {
    if (!blocks->is_array() || blocks->empty()) throw ConfigError("expected a non-empty array", o.path("conv_blocks"));
    c.conv_blocks.clear();
    for (std::size_t k = 0; k < blocks->size(); ++k) {
      Object b((*blocks)[k], o.path("conv_blocks") + "[" + std::to_string(k) + "]");
      ConvBlock block;
      block.filters = b.unsigned_int("filters", block.filters);
      block.kernel = b.unsigned_int("kernel", block.kernel);
      block.pool = b.boolean("pool", block.pool);
      b.finish();
      c.conv_blocks.push_back(block);
    }
  }
  c.fc_width = o.unsigned_int("fc_width", c.fc_width);
  c.num_classes = o.unsigned_int("num_classes", c.num_classes);
  if (allow_attention) c.attention_enabled = o.boolean("attention_enabled", c.attention_enabled);
  c.init_seed = o.unsigned_int("init_seed", c.init_seed);
  return c;
}

}  // namespace

BackboneConfig backbone_from_json(const json& j, const std::string& path) {
  Object o(j, path);
  BackboneConfig c = backbone_fields(o, true);
  o.finish();
  c.validate();
  return c;
}

json to_json(const TrainConfig& c) {
  json augment = json::array();
  for (const auto op : c.augment) augment.push_back(augment_name(op));
  return {{"learning_rate", c.learning_rate},
          {"batch_size", c.batch_size},
          {"max_epochs", c.max_epochs},
          {"patience", c.patience},
          {"lr_decay_factor", c.lr_decay_factor},
          {"lr_patience", c.lr_patience},
          {"max_lr_decays", c.max_lr_decays},
          {"momentum", c.momentum},
          {"stage_attention", c.stage_attention},
          {"anneal_stages", c.anneal_stages},
          {"student_init", student_init_name(c.student_init)},
          {"validation_fraction", c.validation_fraction},
          {"augment", augment},
          {"seed", c.seed}};
}

TrainConfig train_from_json(const json& train, const json* distill) {
  TrainConfig c;
  Object o(train, "train");
  c.learning_rate = o.number("learning_rate", c.learning_rate);
  c.batch_size = o.unsigned_int("batch_size", c.batch_size);
  c.max_epochs = o.unsigned_int("max_epochs", c.max_epochs);
  c.patience = o.unsigned_int("patience", c.patience);
  c.lr_decay_factor = o.number("lr_decay_factor", c.lr_decay_factor);
  c.lr_patience = o.unsigned_int("lr_patience", c.lr_patience);
  c.max_lr_decays = o.unsigned_int("max_lr_decays", c.max_lr_decays);
  c.momentum = o.number("momentum", c.momentum);
  c.stage_attention = bool_array<3>(o, "stage_attention", c.stage_attention);
  c.anneal_stages = bool_array<2>(o, "anneal_stages", c.anneal_stages);
  const std::string init = o.string("student_init", student_init_name(c.student_init));
  if (init == "shared_base") {
    c.student_init = StudentInit::shared_base;
  } else if (init == "inherit") {
    c.student_init = StudentInit::inherit;
  } else {
    throw ConfigError("expected \"shared_base\" or \"inherit\"", "train.student_init");
  }
  c.validation_fraction = o.number("validation_fraction", c.validation_fraction);
  if (const json* aug = o.child("augment")) {
    if (!aug->is_array()) throw ConfigError("expected an array", "train.augment");
    for (std::size_t k = 0; k < aug->size(); ++k) {
      const json& v = (*aug)[k];
      const std::string name = v.is_string() ? v.get<std::string>() : "";
      if (name == "hflip") {
        c.augment.push_back(data::AugmentOp::hflip);
      } else if (name == "vflip") {
        c.augment.push_back(data::AugmentOp::vflip);
      } else if (name == "rot90") {
        c.augment.push_back(data::AugmentOp::rot90);
      } else {
        throw ConfigError("expected one of hflip, vflip, rot90", "train.augment[" + std::to_string(k) + "]");
      }
    }
  }
  c.seed = o.unsigned_int("seed", c.seed);
  o.finish();

  if (distill) {
    Object d(*distill, "distill");
    c.distill.alpha = d.number("alpha", c.distill.alpha);
    c.distill.t_max = d.number("t_max", c.distill.t_max);
    c.distill.t_min = d.number("t_min", c.distill.t_min);
    c.distill.t_squared = d.boolean("t_squared", c.distill.t_squared);
    d.finish();
  }
  c.distill.total_epochs = static_cast<int>(c.max_epochs);
  c.validate();
  return c;
}

json to_json(const ExperimentConfig& c) {
  json j;
  if (c.synthetic) j["dataset"]["synthetic"] = synthetic_to_json(*c.synthetic);
  if (c.idx) j["dataset"]["idx"] = {{"images", c.idx->images}, {"labels", c.idx->labels}};
  j["partition"] = {{"seed", c.partition.seed}, {"stratified", c.partition.stratified}};
  json b = to_json(c.backbone);
  b.erase("attention_enabled");
  if (c.warm_start) b["warm_start"] = *c.warm_start;
  j["backbone"] = b;
  j["train"] = to_json(c.train);
  j["distill"] = {{"alpha", c.train.distill.alpha},
                  {"t_max", c.train.distill.t_max},
                  {"t_min", c.train.distill.t_min},
                  {"t_squared", c.train.distill.t_squared}};
  j["hyperopt"] = {{"enabled", c.hyperopt.enabled}, {"n_trials", c.hyperopt.n_trials}, {"seed", c.hyperopt.seed}};
  j["output_dir"] = c.output_dir;
  j["repeat_seeds"] = c.repeat_seeds;
  return j;
}

ExperimentConfig experiment_from_json(const json& j) {
  ExperimentConfig c;
  Object root(j, "");

  const json* ds = root.child("dataset");
  if (!ds) throw ConfigError("a dataset source is required", "dataset");
  Object dso(*ds, "dataset");
  const json* syn = dso.child("synthetic");
  const json* idx = dso.child("idx");
  dso.finish();
  if ((syn != nullptr) == (idx != nullptr)) {
    throw ConfigError("exactly one of dataset.synthetic and dataset.idx must be given", "dataset");
  }
  if (syn) c.synthetic = synthetic_from_json(*syn, "dataset.synthetic");
  if (idx) {
    Object io(*idx, "dataset.idx");
    IdxSource src{io.string("images", ""), io.string("labels", "")};
    io.finish();
    if (src.images.empty()) throw ConfigError("path required", "dataset.idx.images");
    if (src.labels.empty()) throw ConfigError("path required", "dataset.idx.labels");
    c.idx = src;
  }

  if (const json* p = root.child("partition")) {
    Object po(*p, "partition");
    c.partition.seed = po.unsigned_int("seed", c.partition.seed);
    c.partition.stratified = po.boolean("stratified", c.partition.stratified);
    po.finish();
  }

  bool classes_given = false;
  if (const json* b = root.child("backbone")) {
    Object bo(*b, "backbone");
    classes_given = bo.has("num_classes");
    c.backbone = backbone_fields(bo, false);
    const std::string warm = bo.string("warm_start", "");
    if (!warm.empty()) c.warm_start = warm;
    bo.finish();
  }
  if (!classes_given && c.synthetic) c.backbone.num_classes = c.synthetic->classes;
  if (!classes_given && c.idx) throw ConfigError("required for IDX datasets", "backbone.num_classes");
  if (c.synthetic && c.backbone.num_classes != c.synthetic->classes) {
    throw ConfigError("does not match dataset.synthetic.classes", "backbone.num_classes");
  }
  c.backbone.validate();

  static const json empty_object = json::object();
  const json* train = root.child("train");
  c.train = train_from_json(train ? *train : empty_object, root.child("distill"));

  if (const json* h = root.child("hyperopt")) {
    Object ho(*h, "hyperopt");
    c.hyperopt.enabled = ho.boolean("enabled", c.hyperopt.enabled);
    c.hyperopt.n_trials = ho.unsigned_int("n_trials", c.hyperopt.n_trials);
    c.hyperopt.seed = ho.unsigned_int("seed", c.hyperopt.seed);
    ho.finish();
    if (c.hyperopt.n_trials == 0) throw ConfigError("must be at least 1", "hyperopt.n_trials");
  }

  c.output_dir = root.string("output_dir", c.output_dir);
  if (const json* r = root.child("repeat_seeds")) {
    if (!r->is_array()) throw ConfigError("expected an array of seeds", "repeat_seeds");
    for (std::size_t k = 0; k < r->size(); ++k) {
      const json& v = (*r)[k];
      if (!v.is_number_unsigned()) {
        throw ConfigError("expected a non-negative integer", "repeat_seeds[" + std::to_string(k) + "]");
      }
      c.repeat_seeds.push_back(v.get<std::uint64_t>());
    }
  }
  root.finish();
  return c;
}

bool operator==(const TrainConfig& a, const TrainConfig& b) {
  return to_json(a) == to_json(b) && a.distill.alpha == b.distill.alpha && a.distill.t_max == b.distill.t_max &&
         a.distill.t_min == b.distill.t_min && a.distill.t_squared == b.distill.t_squared;
}

bool operator==(const ExperimentConfig& a, const ExperimentConfig& b) { return to_json(a) == to_json(b); }

ExperimentConfig parse_config_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("malformed JSON: ") + e.what(), "<root>");
  }
  return experiment_from_json(j);
}

ExperimentConfig parse_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string(), "<file>");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str());
}

ExperimentConfig with_seed(const ExperimentConfig& base, std::uint64_t seed) {
  ExperimentConfig c = base;
  c.partition.seed = seed;
  c.backbone.init_seed = seed;
  c.train.seed = seed;
  return c;
}

data::LabeledDataset load_dataset(const ExperimentConfig& config) {
  data::LabeledDataset ds = config.synthetic ? data::generate_synthetic(*config.synthetic)
                                             : data::load_idx(config.idx->images, config.idx->labels);
  ds.validate();
  return ds;
}

}  // namespace weckd::config
