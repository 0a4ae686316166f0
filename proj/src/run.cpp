#include "weckd/run.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <future>
#include <iostream>
#include <iterator>
#include <thread>

#include "CLI11.hpp"
#include "weckd/checkpoint.hpp"
#include "weckd/errors.hpp"

namespace weckd::run {

namespace fs = std::filesystem;

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

namespace {

json read_json(const fs::path& path) {
  try {
    return json::parse(read_text(path));
  } catch (const json::parse_error& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

std::string fixed(double v, int digits = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

json optional_string(const std::optional<std::string>& s) { return s ? json(*s) : json(nullptr); }

// Evaluation thread count: hardware threads, capped by WECKD_THREADS.
std::size_t eval_threads() {
  std::size_t n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("WECKD_THREADS")) {
    char* end = nullptr;
    const unsigned long cap = std::strtoul(env, &end, 10);
    if (end == env || *end != '\0' || cap == 0) throw ConfigError("expected a positive integer", "WECKD_THREADS");
    n = std::min<std::size_t>(n, cap);
  }
  return n;
}

// Relative dataset and warm-start paths are pinned so the snapshot works
// from any directory.
config::ExperimentConfig resolved(config::ExperimentConfig c, const fs::path& out_dir) {
  if (c.idx) {
    c.idx->images = fs::absolute(c.idx->images).lexically_normal().string();
    c.idx->labels = fs::absolute(c.idx->labels).lexically_normal().string();
  }
  if (c.warm_start) c.warm_start = fs::absolute(*c.warm_start).lexically_normal().string();
  c.output_dir = out_dir.string();
  return c;
}

void write_rendered(const fs::path& dir, const json& metrics, const json& stages, const std::string& dataset) {
  write_text(dir / kMetricsFile, metrics.dump(2) + "\n");
  std::vector<StageMetrics> progression;
  for (const auto& s : metrics.at("stages")) {
    progression.push_back({s.at("train").at("accuracy").get<double>(), s.at("test").at("accuracy").get<double>(),
                           s.at("train").at("loss").get<double>(), s.at("test").at("loss").get<double>()});
  }
  write_text(dir / kProgressionFile, metrics::chain_progression_csv(dataset, progression));
  write_text(dir / kTimingFile, timing_csv(stages));
  write_text(dir / kCurvesFile, curves_csv(dataset, stages));
}

std::string error_kind(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return "config";
  if (dynamic_cast<const ParseError*>(&e)) return "parse";
  if (dynamic_cast<const NumericError*>(&e)) return "numeric";
  if (dynamic_cast<const ChainError*>(&e)) return "chain";
  if (dynamic_cast<const hyperopt::StudyError*>(&e)) return "study";
  if (dynamic_cast<const ShapeError*>(&e)) return "shape";
  if (dynamic_cast<const std::logic_error*>(&e)) return "contract";
  return "runtime";
}

std::pair<fs::path, fs::path> idx_paths(const fs::path& prefix) {
  return {prefix.string() + "-images.idx3", prefix.string() + "-labels.idx1"};
}

}  // namespace

std::string dataset_name(const config::ExperimentConfig& config) {
  if (config.synthetic) return "synthetic";
  std::string stem = fs::path(config.idx->images).filename().string();
  for (const char* suffix : {"-images.idx3", ".idx3", "-images-idx3-ubyte"}) {
    const std::string s = suffix;
    if (stem.size() > s.size() && stem.compare(stem.size() - s.size(), s.size(), s) == 0) {
      return stem.substr(0, stem.size() - s.size());
    }
  }
  return stem;
}

json stages_json(const ChainResult& chain) {
  json out = json::array();
  for (std::size_t s = 0; s < 3; ++s) {
    const StageResult& r = chain.stages[s];
    json curves = json::array();
    for (const auto& e : r.epoch_curves) {
      curves.push_back({{"train_loss", e.train_loss},
                        {"train_acc", e.train_acc},
                        {"val_loss", e.val_loss},
                        {"val_acc", e.val_acc},
                        {"learning_rate", e.learning_rate},
                        {"temperature", e.temperature},
                        {"digest", e.digest}});
    }
    const StageHyperparams& h = r.hyperparams;
    out.push_back({{"name", metrics::kStageNames[s]},
                   {"epochs_run", r.stopped_epoch},
                   {"best_epoch", r.best_epoch},
                   {"lr_decays", r.lr_decays},
                   {"steps_per_epoch", r.steps_per_epoch},
                   {"ms_per_step", r.ms_per_step},
                   {"hyperparams",
                    {{"learning_rate", h.learning_rate},
                     {"alpha", h.alpha},
                     {"t_max", h.t_max},
                     {"t_min", h.t_min},
                     {"annealed", h.annealed},
                     {"attention", h.attention}}},
                   {"digest", parameter_digest(r.model.params)},
                   {"teacher_digest_before", optional_string(r.teacher_digest_before)},
                   {"teacher_digest_after", optional_string(r.teacher_digest_after)},
                   {"warnings", r.warnings},
                   {"train_indices", r.train_indices},
                   {"val_indices", r.val_indices},
                   {"curves", std::move(curves)}});
  }
  return out;
}

json metrics_json(const std::string& dataset, const data::LabeledDataset& ds, const json& stages,
                  const std::array<Evaluation, 3>& test, const std::array<Evaluation, 3>& train) {
  json stage_rows = json::array();
  for (std::size_t s = 0; s < 3; ++s) {
    const json& st = stages.at(s);
    const std::size_t best = st.at("best_epoch").get<std::size_t>();
    stage_rows.push_back({{"name", st.at("name")},
                          {"test", metrics::evaluation_json(test[s], ds.class_names)},
                          {"train", {{"accuracy", train[s].accuracy}, {"loss", train[s].loss}}},
                          {"validation",
                           {{"accuracy", st.at("curves").at(best).at("val_acc")},
                            {"loss", st.at("curves").at(best).at("val_loss")}}},
                          {"epochs_run", st.at("epochs_run")},
                          {"best_epoch", best},
                          {"lr_decays", st.at("lr_decays")},
                          {"hyperparams", st.at("hyperparams")},
                          {"digest", st.at("digest")},
                          {"teacher_digest_before", st.at("teacher_digest_before")},
                          {"teacher_digest_after", st.at("teacher_digest_after")},
                          {"warnings", st.at("warnings")}});
  }
  const double a1 = test[0].accuracy, a2 = test[1].accuracy, a3 = test[2].accuracy;
  return {{"dataset", dataset},
          {"num_classes", ds.num_classes},
          {"class_names", ds.class_names},
          {"overall", metrics::evaluation_json(test[2], ds.class_names)},
          {"stages", std::move(stage_rows)},
          {"deltas", {{"m1_m2", a2 - a1}, {"m2_m3", a3 - a2}, {"m1_m3", a3 - a1}}},
          {"theory", metrics::to_json(metrics::theory_report(test, train))}};
}

std::string timing_csv(const json& stages) {
  std::string out = "stage,epochs_run,steps_per_epoch,ms_per_step\n";
  for (const auto& s : stages) {
    out += s.at("name").get<std::string>() + ',' + std::to_string(s.at("epochs_run").get<std::size_t>()) + ',' +
           std::to_string(s.at("steps_per_epoch").get<std::size_t>()) + ',' +
           fixed(s.at("ms_per_step").get<double>(), 3) + '\n';
  }
  return out;
}

std::string curves_csv(const std::string& dataset, const json& stages) {
  std::string out = "dataset,stage,epoch,train_loss,train_acc,val_loss,val_acc,learning_rate,temperature\n";
  for (const auto& s : stages) {
    const auto& curves = s.at("curves");
    for (std::size_t e = 0; e < curves.size(); ++e) {
      const auto& c = curves[e];
      out += dataset + ',' + s.at("name").get<std::string>() + ',' + std::to_string(e) + ',' +
             fixed(c.at("train_loss")) + ',' + fixed(c.at("train_acc")) + ',' + fixed(c.at("val_loss")) + ',' +
             fixed(c.at("val_acc")) + ',' + fixed(c.at("learning_rate"), 9) + ',' + fixed(c.at("temperature")) + '\n';
    }
  }
  return out;
}

RunOutcome train_run(const config::ExperimentConfig& config, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  fs::remove(out_dir / kErrorFile);
  try {
    const config::ExperimentConfig snapshot = resolved(config, out_dir);
    write_text(out_dir / kConfigFile, config::to_json(snapshot).dump(2) + "\n");

    const data::LabeledDataset ds = config::load_dataset(snapshot);
    const data::DatasetSplit split = data::partition(ds, snapshot.partition.seed, snapshot.partition.stratified);
    std::optional<Model> warm;
    if (snapshot.warm_start) warm = load_checkpoint(*snapshot.warm_start);
    TrainConfig cfg = snapshot.train;
    cfg.eval_threads = eval_threads();

    RunOutcome out;
    out.chain = run_chain(ds, split, snapshot.backbone, cfg, warm);
    for (std::size_t s = 0; s < 3; ++s) save_checkpoint(out.chain.stages[s].model, out_dir / kCheckpointNames[s]);
    const json stages = stages_json(out.chain);
    write_text(out_dir / kStagesFile, stages.dump(1) + "\n");
    write_text(out_dir / kTestIndicesFile, json(split.d_test).dump() + "\n");
    out.metrics = metrics_json(dataset_name(snapshot), ds, stages, out.chain.test_evaluations,
                               out.chain.train_evaluations);
    write_rendered(out_dir, out.metrics, stages, dataset_name(snapshot));
    return out;
  } catch (const std::exception& e) {
    try {
      write_text(out_dir / kErrorFile, json{{"error", error_kind(e)}, {"message", e.what()}}.dump(2) + "\n");
    } catch (...) {
    }
    throw;
  }
}

json render_report(const fs::path& run_dir, std::size_t threads) {
  const config::ExperimentConfig c = config::parse_config(run_dir / kConfigFile);
  const data::LabeledDataset ds = config::load_dataset(c);
  const data::DatasetSplit split = data::partition(ds, c.partition.seed, c.partition.stratified);
  const json stages = read_json(run_dir / kStagesFile);
  std::array<Evaluation, 3> test, train;
  for (std::size_t s = 0; s < 3; ++s) {
    const Model m = load_checkpoint(run_dir / kCheckpointNames[s]);
    if (parameter_digest(m.params) != stages.at(s).at("digest").get<std::string>()) {
      throw std::runtime_error(std::string(kCheckpointNames[s]) + " does not match the digest in " + kStagesFile);
    }
    const auto idx = stages.at(s).at("train_indices").get<std::vector<std::size_t>>();
    test[s] = evaluate_model(m, ds, split.d_test, 64, threads);
    train[s] = evaluate_model(m, ds, idx, 64, threads);
  }
  const json metrics = metrics_json(dataset_name(c), ds, stages, test, train);
  write_rendered(run_dir, metrics, stages, dataset_name(c));
  return metrics;
}

config::ExperimentConfig apply_params(const config::ExperimentConfig& base, const hyperopt::Params& p) {
  config::ExperimentConfig c = base;
  c.train.learning_rate = p.eta;
  c.train.distill.alpha = p.alpha;
  c.train.distill.t_max = p.temp;
  c.train.distill.t_min = std::min(c.train.distill.t_min, p.temp);
  c.train.validate();
  return c;
}

TuneOutcome tune(const config::ExperimentConfig& config, std::size_t n_trials, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  const data::LabeledDataset ds = config::load_dataset(config);
  const data::DatasetSplit split = data::partition(ds, config.partition.seed, config.partition.stratified);
  std::optional<Model> warm;
  if (config.warm_start) warm = load_checkpoint(*config.warm_start);
  const std::size_t threads = eval_threads();

  const hyperopt::Objective objective = [&](const hyperopt::Params& p, std::size_t i) {
    TrainConfig cfg = apply_params(config, p).train;
    cfg.eval_threads = threads;
    const ChainResult chain = run_chain(ds, split, config.backbone, cfg, warm);
    const StageResult& m3 = chain.stages[2];
    const double val_acc = m3.epoch_curves[m3.best_epoch].val_acc;
    const double gap = val_acc - chain.progression[2].train_acc;
    std::fprintf(stderr, "trial %zu: eta %.3g alpha %.3f T %.3f -> M3 val acc %.4f (val-train gap %+.4f)\n", i,
                 p.eta, p.alpha, p.temp, val_acc, gap);
    return hyperopt::ObjectiveValue{val_acc, gap};
  };

  TuneOutcome out;
  out.study = hyperopt::run_study(objective, hyperopt::SearchSpace{}, n_trials, config.hyperopt.seed);
  hyperopt::write_trials_csv(out_dir / "trials.csv", out.study.trials);
  json trials = json::array();
  for (const auto& t : out.study.trials) {
    trials.push_back({{"trial_index", t.trial_index},
                      {"eta", t.params.eta},
                      {"alpha", t.params.alpha},
                      {"temp", t.params.temp},
                      {"objective", t.status == hyperopt::TrialStatus::complete ? json(t.objective) : json(nullptr)},
                      {"status", hyperopt::status_name(t.status)},
                      {"val_train_gap", t.generalization_gap ? json(*t.generalization_gap) : json(nullptr)},
                      {"error", t.error}});
  }
  write_text(out_dir / "study.json", json{{"best_trial", out.study.best.trial_index},
                                          {"trials", std::move(trials)},
                                          {"warnings", out.study.warnings}}
                                         .dump(2) +
                                         "\n");
  out.best_config = apply_params(config, out.study.best.params);
  write_text(out_dir / "best-config.json", config::to_json(out.best_config).dump(2) + "\n");
  return out;
}

json evaluate_checkpoint(const fs::path& checkpoint, const fs::path& images, const fs::path& labels,
                         const std::optional<fs::path>& indices, std::size_t threads) {
  const Model model = load_checkpoint(checkpoint);
  const data::LabeledDataset ds = data::load_idx(images, labels);
  if (ds.num_classes != model.config.num_classes) {
    throw ChainError("checkpoint expects " + std::to_string(model.config.num_classes) + " classes, data has " +
                     std::to_string(ds.num_classes));
  }
  std::vector<std::size_t> idx;
  if (indices) {
    idx = read_json(*indices).get<std::vector<std::size_t>>();
    for (const std::size_t i : idx) {
      if (i >= ds.size()) throw ConfigError("index " + std::to_string(i) + " outside the dataset", "--indices");
    }
  } else {
    idx.resize(ds.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  }
  const Evaluation ev = evaluate_model(model, ds, idx, 64, threads);
  return {{"checkpoint", checkpoint.string()},
          {"digest", parameter_digest(model.params)},
          {"evaluation", metrics::evaluation_json(ev, ds.class_names)}};
}

namespace {

void print_progression(const json& metrics) {
  std::printf("%-8s %10s %10s %10s\n", "stage", "train_acc", "test_acc", "delta");
  double prev = 0.0;
  for (std::size_t s = 0; s < 3; ++s) {
    const json& st = metrics.at("stages").at(s);
    const double acc = st.at("test").at("accuracy").get<double>();
    std::printf("%-8s %10.4f %10.4f", st.at("name").get<std::string>().c_str(),
                st.at("train").at("accuracy").get<double>(), acc);
    if (s > 0) std::printf(" %+10.4f", acc - prev);
    std::printf("\n");
    prev = acc;
  }
}

int train_command(const fs::path& config_path, const std::optional<fs::path>& out_dir_flag,
                  std::vector<std::uint64_t> seeds, bool parallel) {
  const config::ExperimentConfig c = config::parse_config(config_path);
  const fs::path out_dir = out_dir_flag ? *out_dir_flag : fs::path(c.output_dir);
  if (seeds.empty()) seeds = c.repeat_seeds;
  if (seeds.empty()) {
    print_progression(train_run(c, out_dir).metrics);
    return kExitOk;
  }
  // One self-contained run directory per seed.
  const auto one = [&](std::uint64_t seed) {
    config::ExperimentConfig s = config::with_seed(c, seed);
    s.repeat_seeds.clear();
    return train_run(s, out_dir / ("seed-" + std::to_string(seed))).metrics;
  };
  std::vector<json> results;
  if (parallel) {
    std::vector<std::future<json>> jobs;
    for (const auto seed : seeds) jobs.push_back(std::async(std::launch::async, one, seed));
    for (auto& j : jobs) results.push_back(j.get());
  } else {
    for (const auto seed : seeds) results.push_back(one(seed));
  }
  std::string summary = "seed,m1_test_acc,m2_test_acc,m3_test_acc,delta_m1_m3\n";
  for (std::size_t k = 0; k < seeds.size(); ++k) {
    const json& st = results[k].at("stages");
    summary += std::to_string(seeds[k]);
    for (std::size_t s = 0; s < 3; ++s) summary += ',' + fixed(st.at(s).at("test").at("accuracy").get<double>());
    summary += ',' + fixed(results[k].at("deltas").at("m1_m3").get<double>()) + '\n';
  }
  write_text(out_dir / "repeat_summary.csv", summary);
  std::fputs(summary.c_str(), stdout);
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sequential chain knowledge distillation trainer"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("gen-data", "Write a synthetic shape dataset as an IDX pair");
  std::string gen_out;
  data::SyntheticSpec spec;
  std::size_t size = 32;
  gen->add_option("--out", gen_out, "Output prefix; writes <out>-images.idx3 and <out>-labels.idx1")->required();
  gen->add_option("--n", spec.n, "Number of samples")->capture_default_str();
  gen->add_option("--classes", spec.classes, "Number of classes (at most 8)")->capture_default_str();
  gen->add_option("--size", size, "Image height and width")->capture_default_str();
  gen->add_option("--noise", spec.noise_std, "Gaussian pixel noise std")->capture_default_str();
  gen->add_option("--seed", spec.seed, "Generator seed")->capture_default_str();

  auto* train = app.add_subcommand("train", "Train the three-stage chain into a run directory");
  fs::path train_config;
  std::optional<fs::path> train_out;
  std::vector<std::uint64_t> repeat_seeds;
  bool parallel = false;
  train->add_option("--config", train_config, "Experiment config (JSON)")->required();
  train->add_option("--out-dir", train_out, "Run directory (defaults to output_dir)");
  train->add_option("--repeat-seeds", repeat_seeds, "Run once per seed, each in <out-dir>/seed-<s>")->delimiter(',');
  train->add_flag("--parallel", parallel, "Run repeat seeds concurrently");

  auto* tune_cmd = app.add_subcommand("tune", "TPE search over learning rate, alpha and T");
  fs::path tune_config;
  std::optional<std::size_t> trials;
  std::optional<fs::path> tune_out;
  tune_cmd->add_option("--config", tune_config, "Experiment config (JSON)")->required();
  tune_cmd->add_option("--trials", trials, "Number of trials (defaults to hyperopt.n_trials)");
  tune_cmd->add_option("--out-dir", tune_out, "Output directory (defaults to output_dir)");

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on an IDX dataset; metrics JSON on stdout");
  fs::path checkpoint, data_prefix;
  std::optional<fs::path> indices;
  eval->add_option("--checkpoint", checkpoint, "Checkpoint (.wckd)")->required();
  eval->add_option("--data", data_prefix, "IDX prefix as written by gen-data")->required();
  eval->add_option("--indices", indices, "JSON array of sample indices to evaluate");

  auto* report = app.add_subcommand("report", "Re-render metrics and tables of a run directory");
  fs::path run_dir;
  report->add_option("--run-dir", run_dir, "Run directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (gen->parsed()) {
      spec.height = spec.width = size;
      const auto [images, labels] = idx_paths(gen_out);
      if (images.has_parent_path()) fs::create_directories(images.parent_path());
      data::write_idx(data::generate_synthetic(spec), images, labels);
      std::printf("%s\n%s\n", images.string().c_str(), labels.string().c_str());
      return kExitOk;
    }
    if (train->parsed()) return train_command(train_config, train_out, repeat_seeds, parallel);
    if (tune_cmd->parsed()) {
      const config::ExperimentConfig c = config::parse_config(tune_config);
      const std::size_t n = trials.value_or(c.hyperopt.n_trials);
      if (n == 0) throw ConfigError("must be at least 1", "--trials");
      const TuneOutcome out = tune(c, n, tune_out.value_or(fs::path(c.output_dir)));
      for (const auto& w : out.study.warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());
      std::fputs(hyperopt::trials_csv(out.study.trials).c_str(), stdout);
      return kExitOk;
    }
    if (eval->parsed()) {
      const auto [images, labels] = idx_paths(data_prefix);
      std::printf("%s\n", evaluate_checkpoint(checkpoint, images, labels, indices, eval_threads()).dump(2).c_str());
      return kExitOk;
    }
    if (report->parsed()) {
      print_progression(render_report(run_dir, eval_threads()));
      return kExitOk;
    }
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitUsage;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error (%s): %s\n", error_kind(e).c_str(), e.what());
    return kExitRuntime;
  }
  return kExitUsage;
}

}  // namespace weckd::run
