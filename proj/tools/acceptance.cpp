// Acceptance suite: one PASS/FAIL line per criterion. Tolerances and
// runtime budgets are pinned below; exit status is nonzero if any fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "weckd/checkpoint.hpp"
#include "weckd/config.hpp"
#include "weckd/data.hpp"
#include "weckd/distill_loss.hpp"
#include "weckd/gradcheck.hpp"
#include "weckd/hyperopt.hpp"
#include "weckd/rng.hpp"
#include "weckd/run.hpp"

using namespace weckd;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

constexpr double kGradTolerance = 1e-4;
constexpr double kGradEpsilon = 1e-5;
constexpr std::size_t kGradSeeds = 20;
constexpr std::size_t kGradCoordsPerTensor = 20;
constexpr double kGradBudgetS = 60.0;

constexpr std::size_t kKdPairs = 10000;
constexpr double kKdZeroTolerance = 1e-12;
constexpr double kAnnealMidTolerance = 1e-12;
constexpr double kLossBudgetS = 10.0;

constexpr std::size_t kPartitionTrials = 1000;
constexpr double kPartitionBudgetS = 10.0;

constexpr std::size_t kChainSeeds = 5;
constexpr std::size_t kMinMonotoneSeeds = 4;
constexpr double kMinMeanDelta13 = 0.05;
constexpr double kChainBudgetS = 15 * 60.0;
constexpr double kSingleSlack = 0.01;
constexpr double kSingleBudgetS = 10 * 60.0;
constexpr std::size_t kMinHierarchySeeds = 4;

constexpr std::size_t kTpeStudies = 10;
constexpr std::size_t kTpeTrials = 20;
constexpr double kTpeAlphaTolerance = 0.05;
constexpr std::size_t kTpeMinHits = 8;
constexpr double kTpeBudgetS = 5.0;
constexpr std::size_t kTuneTrials = 5;
constexpr double kTuneBudgetS = 45 * 60.0;

constexpr double kCheckpointTolerance = 1e-6;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Line {
  int criterion;
  bool pass;
  std::string detail;
};

std::vector<Line> g_lines;

void report(int criterion, bool pass, const std::string& detail) {
  g_lines.push_back({criterion, pass, detail});
  std::printf("criterion %2d: %s  %s\n", criterion, pass ? "PASS" : "FAIL", detail.c_str());
  std::fflush(stdout);
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

int cli(std::vector<std::string> args) {
  args.insert(args.begin(), "weckd");
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  return run::main(static_cast<int>(argv.size()), argv.data());
}

Tensor random_tensor(Dims dims, Rng& rng, double scale) {
  Tensor t(std::move(dims));
  for (auto& v : t.data()) v = rng.normal(0.0, scale);
  return t;
}

void gradient_oracle() {
  const auto t0 = Clock::now();
  double worst = 0.0;
  std::string where;
  std::size_t checked = 0, skipped = 0;
  for (bool attention : {false, true}) {
    for (std::uint64_t seed = 0; seed < kGradSeeds; ++seed) {
      BackboneConfig config = BackboneConfig::desk_default();
      config.attention_enabled = attention;
      config.init_seed = seed;
      const Model model = build_model(config);
      Rng rng(mix_seed(seed, 77));
      Tensor batch({2, 3, 32, 32});
      for (auto& v : batch.data()) v = rng.uniform();
      const Tensor targets = distill::one_hot(std::vector<int>{static_cast<int>(seed % 4), 3}, 4);
      const Tensor teacher = random_tensor({2, 4}, rng, 2.0);
      const TapedLoss loss = [&](const ParameterSet& params) {
        auto fwd = record_forward(params, config, batch);
        fwd.tape.hybrid_objective(fwd.logits, {targets, teacher, 0.6, 2.0, false});
        return std::move(fwd.tape);
      };
      const auto r = finite_diff_check(loss, model.params, {kGradEpsilon, kGradCoordsPerTensor, seed});
      checked += r.coordinates_checked;
      skipped += r.kinks_skipped;
      if (r.max_relative_error >= worst) {
        worst = r.max_relative_error;
        where = fmt("attention=%d seed=%llu %s[%zu]", attention, static_cast<unsigned long long>(seed),
                    r.worst_parameter.c_str(), r.worst_index);
      }
    }
  }
  const double s = seconds_since(t0);
  report(1, worst < kGradTolerance && s < kGradBudgetS,
         fmt("default backbone, attention off/on x %zu seeds: max rel err %.3g (< %.0e, eps %.0e) at %s; "
             "%zu coords checked, %zu kinks skipped; %.1fs (< %.0fs)",
             kGradSeeds, worst, kGradTolerance, kGradEpsilon, where.c_str(), checked, skipped, s, kGradBudgetS));
}

void loss_identities() {
  const auto t0 = Clock::now();
  Rng rng(2024);
  double min_kd = 1e300, max_zero = 0.0;
  for (std::size_t i = 0; i < kKdPairs; ++i) {
    const std::size_t B = 1 + rng.index(8), K = 2 + rng.index(9);
    const double scale = rng.uniform(0.1, 20.0), T = rng.uniform(0.5, 10.0);
    const Tensor s = random_tensor({B, K}, rng, scale), t = random_tensor({B, K}, rng, scale);
    min_kd = std::min(min_kd, distill::kd_loss(s, t, T));
    max_zero = std::max(max_zero, std::abs(distill::kd_loss(s, s, T)));
  }

  bool linear = true;
  for (int k = 0; k <= 10; ++k) {
    const double alpha = k / 10.0;
    for (int trial = 0; trial < 20; ++trial) {
      const std::size_t B = 1 + rng.index(8), K = 2 + rng.index(9);
      const Tensor s = random_tensor({B, K}, rng, 3.0), t = random_tensor({B, K}, rng, 3.0);
      std::vector<int> y(B);
      for (auto& v : y) v = static_cast<int>(rng.index(K));
      const Tensor onehot = distill::one_hot(y, K);
      const double T = rng.uniform(1.0, 5.0);
      const auto h = distill::hybrid_loss(s, &t, onehot, alpha, T);
      const double ce = distill::ce_loss(distill::softmax_temperature(s, 1.0), onehot);
      const double kd = distill::kd_loss(s, t, T);
      linear = linear && h.total == alpha * ce + (1.0 - alpha) * kd;
    }
  }

  bool endpoints = true;
  double max_mid = 0.0;
  for (int i = 0; i < 100; ++i) {
    const double t_min = rng.uniform(0.5, 3.0), t_max = t_min + rng.uniform(0.0, 7.0);
    const int E = 2 * static_cast<int>(1 + rng.index(100));
    endpoints = endpoints && distill::anneal_temperature(0, E, t_max, t_min).temperature == t_max &&
                distill::anneal_temperature(E, E, t_max, t_min).temperature == t_min;
    max_mid = std::max(max_mid,
                       std::abs(distill::anneal_temperature(E / 2, E, t_max, t_min).temperature - (t_max + t_min) / 2));
  }
  const double s = seconds_since(t0);
  report(2,
         min_kd >= 0.0 && max_zero <= kKdZeroTolerance && linear && endpoints && max_mid <= kAnnealMidTolerance &&
             s < kLossBudgetS,
         fmt("min kd %.3g over %zu pairs (>= 0); max |kd(z,z)| %.3g (<= %.0e); hybrid linear exact: %s; anneal "
             "endpoints exact: %s, max midpoint err %.3g (<= %.0e); %.2fs (< %.0fs)",
             min_kd, kKdPairs, max_zero, kKdZeroTolerance, linear ? "yes" : "no", endpoints ? "yes" : "no",
             max_mid, kAnnealMidTolerance, s, kLossBudgetS));
}

void partition_protocol() {
  const auto t0 = Clock::now();
  Rng rng(99);
  std::size_t bad = 0;
  std::string first_bad;
  for (std::size_t i = 0; i < kPartitionTrials; ++i) {
    const std::size_t n = 10 + rng.index(100000 - 10 + 1);
    const std::uint64_t seed = rng.next_u64();
    data::LabeledDataset ds;
    ds.images = Tensor({n, 1, 1, 1});
    ds.labels.assign(n, 0);
    ds.num_classes = 1;
    ds.class_names = {"c"};
    const auto split = data::partition(ds, seed);
    const std::size_t tenth = n / 10;
    bool ok = split.d1.size() == tenth && split.d2.size() == tenth && split.d3.size() == tenth &&
              split.d_test.size() == n - 3 * tenth;
    try {
      data::check_disjoint(split, n);
    } catch (const std::exception&) {
      ok = false;
    }
    if (!ok && bad++ == 0) first_bad = fmt(" first failure N=%zu", n);
  }
  const double s = seconds_since(t0);
  report(3, bad == 0 && s < kPartitionBudgetS,
         fmt("%zu/%zu random (N, seed) pairs with sizes floor(N/10) x3 + remainder and disjoint sets%s; %.2fs (< %.0fs)",
             kPartitionTrials - bad, kPartitionTrials, first_bad.c_str(), s, kPartitionBudgetS));
}

config::json read_json(const fs::path& p) { return config::json::parse(run::read_text(p)); }

struct ChainRuns {
  std::vector<config::json> metrics;
  fs::path seed0_config;
  std::vector<config::ExperimentConfig> configs;
};

ChainRuns chain_runs(const fs::path& work) {
  ChainRuns out;
  const config::ExperimentConfig base = config::parse_config_text(R"({"dataset": {"synthetic": {}}})");
  const auto t0 = Clock::now();
  std::vector<double> a1, a2, a3;
  std::size_t monotone = 0;
  bool all_ok = true;
  for (std::uint64_t seed = 0; seed < kChainSeeds; ++seed) {
    config::ExperimentConfig c = config::with_seed(base, seed);
    const fs::path cfg = work / ("chain-seed-" + std::to_string(seed) + ".json");
    run::write_text(cfg, config::to_json(c).dump(2));
    out.configs.push_back(c);
    if (seed == 0) out.seed0_config = cfg;
    const fs::path dir = work / ("chain-seed-" + std::to_string(seed));
    if (cli({"train", "--config", cfg.string(), "--out-dir", dir.string()}) != 0) {
      all_ok = false;
      out.metrics.push_back(nullptr);
      continue;
    }
    const auto m = read_json(dir / run::kMetricsFile);
    out.metrics.push_back(m);
    const double x1 = m.at("stages")[0].at("test").at("accuracy"), x2 = m.at("stages")[1].at("test").at("accuracy"),
                 x3 = m.at("stages")[2].at("test").at("accuracy");
    a1.push_back(x1);
    a2.push_back(x2);
    a3.push_back(x3);
    monotone += x3 > x2 && x2 > x1;
    std::printf("  chain seed %llu: M1 %.4f  M2 %.4f  M3 %.4f\n", static_cast<unsigned long long>(seed), x1, x2, x3);
    std::fflush(stdout);
  }
  const double s = seconds_since(t0);
  double mean_delta = 0.0;
  for (std::size_t i = 0; i < a1.size(); ++i) mean_delta += (a3[i] - a1[i]) / static_cast<double>(a1.size());
  report(4, all_ok && monotone >= kMinMonotoneSeeds && mean_delta >= kMinMeanDelta13 && s < kChainBudgetS,
         fmt("synthetic n=1000 K=4 32x32 noise 0.15, default config: M3>M2>M1 in %zu/%zu seeds (>= %zu); mean "
             "delta(M1->M3) %+.2f pp (>= %+.0f pp); %.0fs (< %.0fs)",
             monotone, kChainSeeds, kMinMonotoneSeeds, 100 * mean_delta, 100 * kMinMeanDelta13, s, kChainBudgetS));
  return out;
}

void single_model(const ChainRuns& runs) {
  const auto t0 = Clock::now();
  double chain_sum = 0.0, single_sum = 0.0;
  std::size_t n = 0;
  std::string pairs;
  for (std::size_t k = 0; k < runs.configs.size(); ++k) {
    if (runs.metrics[k].is_null()) continue;
    const auto& c = runs.configs[k];
    const data::LabeledDataset ds = config::load_dataset(c);
    const data::DatasetSplit split = data::partition(ds, c.partition.seed, c.partition.stratified);
    const SingleModelResult single = train_single_model(ds, split, c.backbone, c.train);
    const double m3 = runs.metrics[k].at("stages")[2].at("test").at("accuracy");
    chain_sum += m3;
    single_sum += single.metrics.test_acc;
    ++n;
    pairs += fmt(" %.3f/%.3f", m3, single.metrics.test_acc);
  }
  const double s = seconds_since(t0);
  const double chain_mean = n ? chain_sum / n : 0.0, single_mean = n ? single_sum / n : 0.0;
  report(5, n == kChainSeeds && chain_mean >= single_mean - kSingleSlack && s < kSingleBudgetS,
         fmt("mean M3 %.4f vs single model on d1+d2+d3 %.4f (need >= single - %.0f pp); per seed M3/single:%s; "
             "%.0fs (< %.0fs)",
             chain_mean, single_mean, 100 * kSingleSlack, pairs.c_str(), s, kSingleBudgetS));
}

void risk_hierarchy(const ChainRuns& runs) {
  std::size_t holds = 0, n = 0;
  bool kl_ok = true;
  std::string risks;
  for (const auto& m : runs.metrics) {
    if (m.is_null()) continue;
    const auto& t = m.at("theory");
    ++n;
    holds += t.at("hierarchy_holds").get<bool>();
    kl_ok = kl_ok && t.at("kl_m2_m1").get<double>() >= 0.0 && t.at("kl_m3_m2").get<double>() >= 0.0;
    risks += fmt(" (%.3f,%.3f,%.3f)", t.at("risks")[0].get<double>(), t.at("risks")[1].get<double>(),
                 t.at("risks")[2].get<double>());
  }
  report(6, n == kChainSeeds && holds >= kMinHierarchySeeds && kl_ok,
         fmt("R(M3) <= R(M2) <= R(M1) in %zu/%zu runs (>= %zu); KL terms >= 0: %s; risks:%s", holds, kChainSeeds,
             kMinHierarchySeeds, kl_ok ? "yes" : "no", risks.c_str()));
}

void teacher_freezing(const ChainRuns& runs) {
  std::size_t frozen = 0, n = 0;
  for (const auto& m : runs.metrics) {
    if (m.is_null()) continue;
    ++n;
    const auto& st = m.at("stages");
    const bool ok = st[1].at("teacher_digest_before") == st[0].at("digest") &&
                    st[1].at("teacher_digest_after") == st[0].at("digest") &&
                    st[2].at("teacher_digest_before") == st[1].at("digest") &&
                    st[2].at("teacher_digest_after") == st[1].at("digest");
    frozen += ok;
  }
  report(7, n == kChainSeeds && frozen == n,
         fmt("teacher SHA-256 digests unchanged across stages 2 and 3 in %zu/%zu runs", frozen, kChainSeeds));
}

void tpe_sanity(const fs::path& work, const fs::path& tune_config) {
  const auto t0 = Clock::now();
  const hyperopt::Objective quadratic = [](const hyperopt::Params& p, std::size_t) {
    return hyperopt::ObjectiveValue{-(p.alpha - 0.7) * (p.alpha - 0.7), std::nullopt};
  };
  hyperopt::TpeOptions random_only;
  random_only.n_startup = kTpeTrials + 1;
  std::size_t hits = 0;
  std::vector<double> tpe, rnd;
  for (std::uint64_t seed = 0; seed < kTpeStudies; ++seed) {
    const auto r = hyperopt::run_study(quadratic, {}, kTpeTrials, seed);
    hits += std::abs(r.best.params.alpha - 0.7) <= kTpeAlphaTolerance;
    tpe.push_back(r.best.objective);
    rnd.push_back(hyperopt::run_study(quadratic, {}, kTpeTrials, seed, random_only).best.objective);
  }
  const auto median = [](std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t m = v.size() / 2;
    return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
  };
  const double analytic_s = seconds_since(t0);

  const auto t1 = Clock::now();
  const fs::path out = work / "tune";
  const int rc = cli({"tune", "--config", tune_config.string(), "--trials", std::to_string(kTuneTrials), "--out-dir",
                      out.string()});
  const double tune_s = seconds_since(t1);
  std::size_t rows = 0;
  bool header = false, reparse = false;
  if (rc == 0) {
    const std::string csv = run::read_text(out / "trials.csv");
    header = csv.rfind("trial_index,eta,alpha,temp,objective,status\n", 0) == 0;
    rows = static_cast<std::size_t>(std::count(csv.begin(), csv.end(), '\n')) - 1;
    try {
      config::parse_config(out / "best-config.json");
      reparse = true;
    } catch (const std::exception&) {
    }
  }
  report(8,
         hits >= kTpeMinHits && median(tpe) >= median(rnd) && analytic_s < kTpeBudgetS && rc == 0 && header &&
             rows == kTuneTrials && reparse && tune_s < kTuneBudgetS,
         fmt("best-of-%zu alpha within %.2f in %zu/%zu studies (>= %zu); median best TPE %.3g vs random %.3g; %.2fs "
             "(< %.0fs); tune --trials %zu: exit %d, %zu rows, header %s, best-config re-parses %s; %.0fs (< %.0fs)",
             kTpeTrials, kTpeAlphaTolerance, hits, kTpeStudies, kTpeMinHits, median(tpe), median(rnd), analytic_s,
             kTpeBudgetS, kTuneTrials, rc, rows, header ? "ok" : "bad", reparse ? "yes" : "no", tune_s,
             kTuneBudgetS));
}

void serialization(const fs::path& work) {
  double worst = 0.0;
  bool canonical = true;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    BackboneConfig cfg = BackboneConfig::desk_default();
    cfg.attention_enabled = seed % 2 == 0;
    cfg.init_seed = seed;
    const Model m = build_model(cfg);
    const fs::path a = work / "ckpt-a.wckd", b = work / "ckpt-b.wckd";
    save_checkpoint(m, a);
    const Model back = load_checkpoint(a);
    save_checkpoint(back, b);
    canonical = canonical && run::read_text(a) == run::read_text(b) && back.config == m.config;
    Rng rng(seed);
    Tensor x({8, 3, 32, 32});
    for (auto& v : x.data()) v = rng.uniform();
    const auto f0 = forward(m, x), f1 = forward(back, x);
    worst = std::max({worst, max_abs_diff(f0.logits, f1.logits), max_abs_diff(f0.probs, f1.probs)});
  }

  const data::LabeledDataset ds = data::generate_synthetic({500, 4, 32, 32, 0.15, 7});
  const fs::path i1 = work / "rt1-images.idx3", l1 = work / "rt1-labels.idx1";
  const fs::path i2 = work / "rt2-images.idx3", l2 = work / "rt2-labels.idx1";
  data::write_idx(ds, i1, l1);
  const data::LabeledDataset back = data::load_idx(i1, l1);
  data::write_idx(back, i2, l2);
  const data::LabeledDataset again = data::load_idx(i2, l2);
  const bool idx_exact = run::read_text(i1) == run::read_text(i2) && run::read_text(l1) == run::read_text(l2) &&
                         again.images == back.images && again.labels == ds.labels;
  report(9, worst <= kCheckpointTolerance && canonical && idx_exact,
         fmt("checkpoint forward max abs diff %.3g (<= %.0e); re-serialization byte-identical: %s; IDX round trip "
             "bit-exact: %s",
             worst, kCheckpointTolerance, canonical ? "yes" : "no", idx_exact ? "yes" : "no"));
}

void determinism(const fs::path& work, const ChainRuns& runs) {
  const fs::path first = work / "chain-seed-0", second = work / "chain-seed-0-again";
  const int rc = cli({"train", "--config", runs.seed0_config.string(), "--out-dir", second.string()});
  const bool same = rc == 0 && fs::exists(first / run::kMetricsFile) &&
                    run::read_text(first / run::kMetricsFile) == run::read_text(second / run::kMetricsFile);
  report(10, same, fmt("two `train` executions of %s: exit %d, metrics.json identical: %s",
                       runs.seed0_config.filename().string().c_str(), rc, same ? "yes" : "no"));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"weckd acceptance suite"};
  fs::path work = fs::temp_directory_path() / "weckd-acceptance";
  std::vector<int> only;
  app.add_option("--work-dir", work, "Scratch directory for run outputs")->capture_default_str();
  app.add_option("--only", only, "Run only these criteria")->delimiter(',');
  CLI11_PARSE(app, argc, argv);

  const std::set<int> selected(only.begin(), only.end());
  const auto want = [&](int c) { return selected.empty() || selected.count(c) > 0; };
  fs::create_directories(work);

  const auto guarded = [](int c, const std::function<void()>& body) {
    try {
      body();
    } catch (const std::exception& e) {
      report(c, false, std::string("threw: ") + e.what());
    }
  };

  if (want(1)) guarded(1, gradient_oracle);
  if (want(2)) guarded(2, loss_identities);
  if (want(3)) guarded(3, partition_protocol);
  ChainRuns runs;
  if (want(4) || want(5) || want(6) || want(7) || want(10)) {
    try {
      runs = chain_runs(work);
    } catch (const std::exception& e) {
      report(4, false, std::string("threw: ") + e.what());
    }
  }
  if (want(5)) guarded(5, [&] { single_model(runs); });
  if (want(6)) guarded(6, [&] { risk_hierarchy(runs); });
  if (want(7)) guarded(7, [&] { teacher_freezing(runs); });
  if (want(8)) {
    guarded(8, [&] {
      const fs::path cfg = work / "tune-config.json";
      run::write_text(cfg, config::to_json(config::parse_config_text(R"({"dataset": {"synthetic": {}}})")).dump(2));
      tpe_sanity(work, cfg);
    });
  }
  if (want(9)) guarded(9, [&] { serialization(work); });
  if (want(10)) guarded(10, [&] { determinism(work, runs); });

  std::size_t passed = 0;
  for (const auto& l : g_lines) passed += l.pass;
  std::printf("acceptance: %zu/%zu criteria passed\n", passed, g_lines.size());
  return passed == g_lines.size() ? 0 : 1;
}
