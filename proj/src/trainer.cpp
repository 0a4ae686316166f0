#include "weckd/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <stdexcept>
#include <thread>

#include "weckd/checkpoint.hpp"
#include "weckd/errors.hpp"
#include "weckd/optim.hpp"
#include "weckd/rng.hpp"

namespace weckd {

std::string student_init_name(StudentInit init) {
  switch (init) {
    case StudentInit::shared_base: return "shared_base";
    case StudentInit::inherit: return "inherit";
  }
  return "unknown";
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
    throw ConfigError("learning rate must be positive", "train.learning_rate");
  }
  if (batch_size == 0) throw ConfigError("must be at least 1", "train.batch_size");
  if (max_epochs == 0) throw ConfigError("must be at least 1", "train.max_epochs");
  if (patience == 0) throw ConfigError("must be at least 1", "train.patience");
  if (lr_patience == 0) throw ConfigError("must be at least 1", "train.lr_patience");
  if (!(lr_decay_factor > 0.0 && lr_decay_factor < 1.0)) {
    throw ConfigError("must lie in (0,1)", "train.lr_decay_factor");
  }
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("must lie in [0,1)", "train.momentum");
  if (!(validation_fraction > 0.0 && validation_fraction < 1.0)) {
    throw ConfigError("must lie in (0,1)", "train.validation_fraction");
  }
  if (eval_threads == 0) throw ConfigError("must be at least 1", "train.eval_threads");
  distill::DistillParams d = distill;
  d.total_epochs = static_cast<int>(max_epochs);
  d.validate();
}

PlateauScheduler::PlateauScheduler(double initial_lr, const TrainConfig& cfg)
    : lr_(initial_lr),
      decay_factor_(cfg.lr_decay_factor),
      patience_(cfg.patience),
      lr_patience_(cfg.lr_patience),
      max_decays_(cfg.max_lr_decays) {}

SchedulerDecision PlateauScheduler::observe(double val_loss) {
  SchedulerDecision out;
  if (!has_best_ || val_loss <= best_ - kMinImprovement) {
    best_ = val_loss;
    has_best_ = true;
    since_best_ = 0;
    since_decay_or_best_ = 0;
  } else {
    ++since_best_;
    ++since_decay_or_best_;
    if (since_decay_or_best_ >= lr_patience_ && decays_ < max_decays_) {
      lr_ *= decay_factor_;
      ++decays_;
      since_decay_or_best_ = 0;
      out.decayed = true;
    }
  }
  out.learning_rate = lr_;
  out.stop = since_best_ >= patience_;
  return out;
}

SchedulerDecision scheduler_step(std::span<const double> history, double initial_lr, const TrainConfig& cfg) {
  if (history.empty()) throw ContractError("scheduler_step: empty validation history");
  PlateauScheduler scheduler(initial_lr, cfg);
  SchedulerDecision last;
  for (const double loss : history) last = scheduler.observe(loss);
  return last;
}

void quantize_to_f32(ParameterSet& params) {
  for (auto& [name, t] : params) {
    for (auto& v : t.data()) v = static_cast<double>(static_cast<float>(v));
  }
}

Evaluation evaluate_model(const Model& model, const data::LabeledDataset& dataset,
                          std::span<const std::size_t> indices, std::size_t batch_size, std::size_t threads) {
  if (indices.empty()) throw ContractError("evaluate_model: empty index set");
  if (dataset.num_classes != model.config.num_classes) {
    throw ChainError("model has " + std::to_string(model.config.num_classes) + " classes, dataset has " +
                     std::to_string(dataset.num_classes));
  }
  const std::size_t n = indices.size(), K = model.config.num_classes;
  Evaluation ev;
  ev.logits = Tensor({n, K});
  ev.labels = data::gather_labels(dataset, indices);

  const std::size_t n_batches = (n + batch_size - 1) / batch_size;
  const auto run = [&](std::size_t first, std::size_t step) {
    for (std::size_t b = first; b < n_batches; b += step) {
      const std::size_t begin = b * batch_size, end = std::min(n, begin + batch_size);
      const Tensor images = data::gather_images(dataset, indices.subspan(begin, end - begin), model.config.input.channels);
      const Tensor logits = forward(model, images).logits;
      std::copy(logits.data().begin(), logits.data().end(), ev.logits.raw() + begin * K);
    }
  };
  const std::size_t workers = std::clamp<std::size_t>(threads, 1, n_batches);
  if (workers == 1) {
    run(0, 1);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(run, w, workers);
    for (auto& t : pool) t.join();
  }

  ev.probs = distill::softmax_temperature(ev.logits, 1.0);
  ev.predictions.resize(n);
  std::size_t correct = 0;
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = ev.probs.raw() + i * K;
    ev.predictions[i] = static_cast<int>(std::max_element(row, row + K) - row);
    if (ev.predictions[i] == ev.labels[i]) ++correct;
    loss -= std::log(std::max(row[ev.labels[i]], distill::kLogClamp));
  }
  ev.accuracy = static_cast<double>(correct) / static_cast<double>(n);
  ev.loss = loss / static_cast<double>(n);
  return ev;
}

namespace {

std::size_t count_correct(const Tensor& logits, std::span<const int> labels) {
  const std::size_t K = logits.dim(1);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double* row = logits.raw() + i * K;
    if (static_cast<int>(std::max_element(row, row + K) - row) == labels[i]) ++correct;
  }
  return correct;
}

StageResult train_stage(Model model, const Model* teacher, std::span<const std::size_t> subset,
                        const data::LabeledDataset& dataset, const TrainConfig& cfg, int stage_index) {
  cfg.validate();
  if (dataset.num_classes != model.config.num_classes) {
    throw ChainError("stage " + std::to_string(stage_index) + ": model has " +
                     std::to_string(model.config.num_classes) + " classes, dataset has " +
                     std::to_string(dataset.num_classes));
  }
  StageResult result;
  const data::TrainValSplit tv = data::carve_validation(subset, cfg.validation_fraction, mix_seed(cfg.seed, 1));
  result.train_indices = tv.train;
  result.val_indices = tv.validation;
  result.steps_per_epoch = (tv.train.size() + cfg.batch_size - 1) / cfg.batch_size;

  const bool distilling = teacher != nullptr;
  const double alpha = distilling ? cfg.distill.alpha : 1.0;
  const bool annealed = distilling && cfg.anneal_stages[static_cast<std::size_t>(stage_index - 2)];
  result.hyperparams = {cfg.learning_rate, alpha,           cfg.distill.t_max,
                        cfg.distill.t_min, annealed,        model.config.attention_enabled};

  std::optional<std::string> teacher_digest;
  if (distilling) {
    teacher_digest = parameter_digest(teacher->params);
    result.teacher_digest_before = teacher_digest;
  }

  const std::size_t channels = model.config.input.channels;
  PlateauScheduler scheduler(cfg.learning_rate, cfg);
  SgdState sgd_state;
  double lr = cfg.learning_rate;
  double best_val = 0.0;
  ParameterSet best_params;
  double train_ms = 0.0;
  std::size_t steps = 0;

  for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    EpochRecord rec;
    rec.learning_rate = lr;
    double temperature = cfg.distill.t_max;
    if (annealed) {
      const auto a = distill::anneal_temperature(static_cast<int>(epoch), static_cast<int>(cfg.max_epochs),
                                                 cfg.distill.t_max, cfg.distill.t_min);
      temperature = a.temperature;
      if (a.warning) result.warnings.push_back(*a.warning);
    }
    rec.temperature = distilling ? temperature : 1.0;

    auto batches = data::make_batches(dataset, tv.train, cfg.batch_size, mix_seed(cfg.seed, 1000 + epoch), channels);
    double loss_sum = 0.0;
    std::size_t correct = 0, seen = 0;
    for (std::size_t bi = 0; bi < batches.size(); ++bi) {
      auto& batch = batches[bi];
      if (!cfg.augment.empty()) {
        batch.images = data::augment(batch.images, cfg.augment, mix_seed(cfg.seed, (epoch << 20) + bi));
      }
      const auto t0 = std::chrono::steady_clock::now();
      HybridObjectiveSpec spec;
      spec.targets = distill::one_hot(batch.labels, model.config.num_classes);
      spec.alpha = alpha;
      spec.temperature = rec.temperature;
      spec.t_squared = cfg.distill.t_squared;
      if (distilling) spec.teacher_logits = forward(*teacher, batch.images).logits;

      const auto fail = [&](const std::string& what) {
        return NumericError("stage " + std::to_string(stage_index) + " epoch " + std::to_string(epoch) +
                            " batch " + std::to_string(bi) + ": " + what);
      };
      GradientMap grads;
      double batch_loss = 0.0;
      try {
        TapedForward fwd = record_forward(model.params, model.config, batch.images);
        correct += count_correct(fwd.tape.value(fwd.logits), batch.labels);
        fwd.tape.hybrid_objective(fwd.logits, std::move(spec));
        batch_loss = fwd.tape.loss();
        grads = backward(fwd.tape);
        sgd_step(model.params, grads, {lr, cfg.momentum}, sgd_state);
      } catch (const NumericError& e) {
        throw fail(e.what());
      }
      train_ms += std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
      ++steps;
      loss_sum += batch_loss * static_cast<double>(batch.labels.size());
      seen += batch.labels.size();
    }
    rec.train_loss = loss_sum / static_cast<double>(seen);
    rec.train_acc = static_cast<double>(correct) / static_cast<double>(seen);

    const Evaluation val = evaluate_model(model, dataset, tv.validation, 64, cfg.eval_threads);
    rec.val_loss = val.loss;
    rec.val_acc = val.accuracy;
    ParameterSet snapshot = model.params;
    quantize_to_f32(snapshot);
    rec.digest = parameter_digest(snapshot);
    if (epoch == 0 || val.loss < best_val) {
      best_val = val.loss;
      best_params = std::move(snapshot);
      result.best_epoch = epoch;
    }
    result.epoch_curves.push_back(std::move(rec));

    const SchedulerDecision d = scheduler.observe(val.loss);
    lr = d.learning_rate;
    if (d.stop) break;
  }

  if (distilling) {
    result.teacher_digest_after = parameter_digest(teacher->params);
    if (*result.teacher_digest_after != *teacher_digest) {
      throw std::logic_error("internal invariant violated: teacher parameters changed during stage " +
                             std::to_string(stage_index));
    }
  }
  result.stopped_epoch = result.epoch_curves.size();
  result.lr_decays = scheduler.decays();
  result.ms_per_step = steps ? train_ms / static_cast<double>(steps) : 0.0;
  model.params = std::move(best_params);
  result.model = std::move(model);
  return result;
}

}  // namespace

StageResult train_stage1(Model model, std::span<const std::size_t> subset, const data::LabeledDataset& dataset,
                         const TrainConfig& cfg) {
  return train_stage(std::move(model), nullptr, subset, dataset, cfg, 1);
}

StageResult train_distill_stage(Model student, const Model& teacher, std::span<const std::size_t> subset,
                                const data::LabeledDataset& dataset, const TrainConfig& cfg, int stage_index) {
  if (stage_index != 2 && stage_index != 3) throw ContractError("distillation stage index must be 2 or 3");
  if (teacher.config.num_classes != student.config.num_classes) {
    throw ChainError("stage " + std::to_string(stage_index) + ": teacher has " +
                     std::to_string(teacher.config.num_classes) + " classes, student has " +
                     std::to_string(student.config.num_classes));
  }
  return train_stage(std::move(student), &teacher, subset, dataset, cfg, stage_index);
}

Model make_base_model(const BackboneConfig& config, const std::optional<Model>& warm_start) {
  Model base = build_model(config);
  if (warm_start) {
    if (parameter_shapes(warm_start->config) != parameter_shapes(config)) {
      throw ConfigError("warm-start checkpoint architecture does not match the backbone config",
                        "backbone.warm_start");
    }
    base.params = warm_start->params;
  }
  return base;
}

namespace {

Model student_from(const Model& base, const Model& teacher, bool attention, StudentInit init) {
  Model student = init == StudentInit::inherit ? teacher : base;
  student.config.attention_enabled = attention;
  if (init == StudentInit::shared_base && teacher.config.attention_enabled) copy_attention_weights(teacher, student);
  return student;
}

TrainConfig stage_config(const TrainConfig& cfg, int stage) {
  TrainConfig c = cfg;
  c.seed = mix_seed(cfg.seed, static_cast<std::uint64_t>(stage));
  return c;
}

StageMetrics metrics_of(const Evaluation& train, const Evaluation& test) {
  return {train.accuracy, test.accuracy, train.loss, test.loss};
}

}  // namespace

ChainResult run_chain(const data::LabeledDataset& dataset, const data::DatasetSplit& split,
                      const BackboneConfig& backbone, const TrainConfig& cfg, const std::optional<Model>& warm_start) {
  cfg.validate();
  dataset.validate();
  data::check_disjoint(split, dataset.size());
  if (backbone.num_classes != dataset.num_classes) {
    throw ChainError("backbone has " + std::to_string(backbone.num_classes) + " classes, dataset has " +
                     std::to_string(dataset.num_classes));
  }
  BackboneConfig base_config = backbone;
  base_config.attention_enabled = cfg.stage_attention[0];
  const Model base = make_base_model(base_config, warm_start);

  ChainResult chain;
  const std::array<const std::vector<std::size_t>*, 3> subsets{&split.d1, &split.d2, &split.d3};
  for (int stage = 1; stage <= 3; ++stage) {
    const auto s = static_cast<std::size_t>(stage - 1);
    try {
      if (stage == 1) {
        chain.stages[s] = train_stage1(base, *subsets[s], dataset, stage_config(cfg, stage));
      } else {
        const Model& teacher = chain.stages[s - 1].model;
        Model student = student_from(base, teacher, cfg.stage_attention[s], cfg.student_init);
        chain.stages[s] = train_distill_stage(std::move(student), teacher, *subsets[s], dataset,
                                              stage_config(cfg, stage), stage);
      }
    } catch (const ConfigError&) {
      throw;
    } catch (const std::logic_error&) {
      throw;
    } catch (const std::exception& e) {
      throw ChainError("chain aborted at stage " + std::to_string(stage) + ": " + e.what());
    }
    chain.test_evaluations[s] = evaluate_model(chain.stages[s].model, dataset, split.d_test, 64, cfg.eval_threads);
    chain.train_evaluations[s] =
        evaluate_model(chain.stages[s].model, dataset, chain.stages[s].train_indices, 64, cfg.eval_threads);
    chain.progression[s] = metrics_of(chain.train_evaluations[s], chain.test_evaluations[s]);
  }
  return chain;
}

SingleModelResult train_single_model(const data::LabeledDataset& dataset, const data::DatasetSplit& split,
                                     const BackboneConfig& backbone, const TrainConfig& cfg,
                                     const std::optional<Model>& warm_start) {
  cfg.validate();
  data::check_disjoint(split, dataset.size());
  BackboneConfig config = backbone;
  config.attention_enabled = cfg.stage_attention[2];
  std::vector<std::size_t> pooled = split.d1;
  pooled.insert(pooled.end(), split.d2.begin(), split.d2.end());
  pooled.insert(pooled.end(), split.d3.begin(), split.d3.end());
  SingleModelResult out;
  out.stage = train_stage1(make_base_model(config, warm_start), pooled, dataset, stage_config(cfg, 9));
  out.test = evaluate_model(out.stage.model, dataset, split.d_test, 64, cfg.eval_threads);
  const Evaluation train = evaluate_model(out.stage.model, dataset, out.stage.train_indices, 64, cfg.eval_threads);
  out.metrics = metrics_of(train, out.test);
  return out;
}

}  // namespace weckd
