#include "weckd/hyperopt.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numbers>

#include "weckd/errors.hpp"
#include "weckd/rng.hpp"

namespace weckd::hyperopt {

namespace {

// Bounds in the modelling domain (log10 for log-scaled dimensions).
struct Domain {
  double lo, hi;
  bool log10;

  explicit Domain(const Interval& iv)
      : lo(iv.log10 ? std::log10(iv.lo) : iv.lo), hi(iv.log10 ? std::log10(iv.hi) : iv.hi), log10(iv.log10) {}

  double range() const { return hi - lo; }
  double to_model(double v) const { return log10 ? std::log10(v) : v; }
  // Clamped so round-off in pow never leaves the interval.
  double to_value(double u, const Interval& iv) const {
    const double v = log10 ? std::pow(10.0, u) : u;
    return std::clamp(v, iv.lo, iv.hi);
  }
};

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

class TruncatedKde {
 public:
  TruncatedKde(std::vector<double> centres, const Domain& d, double min_fraction) : centres_(std::move(centres)), d_(d) {
    const double n = static_cast<double>(centres_.size());
    h_ = std::max(d.range() / std::sqrt(n), min_fraction * d.range());
    for (const double c : centres_) {
      mass_.push_back(normal_cdf((d.hi - c) / h_) - normal_cdf((d.lo - c) / h_));
    }
  }

  double log_pdf(double x) const {
    double sum = 0.0;
    for (std::size_t i = 0; i < centres_.size(); ++i) {
      const double z = (x - centres_[i]) / h_;
      sum += std::exp(-0.5 * z * z) / (h_ * std::sqrt(2.0 * std::numbers::pi) * mass_[i]);
    }
    sum /= static_cast<double>(centres_.size());
    return std::log(std::max(sum, std::numeric_limits<double>::min()));
  }

  double sample(Rng& rng) const {
    const double c = centres_[rng.index(centres_.size())];
    // Each component keeps at least ~16% of its mass inside the bounds, so
    // rejection terminates quickly; the cap is a guard only.
    for (int attempt = 0; attempt < 1000; ++attempt) {
      const double x = rng.normal(c, h_);
      if (x >= d_.lo && x <= d_.hi) return x;
    }
    return std::clamp(c, d_.lo, d_.hi);
  }

 private:
  std::vector<double> centres_;
  Domain d_;
  double h_ = 1.0;
  std::vector<double> mass_;
};

Params uniform_params(const SearchSpace& space, Rng& rng) {
  std::array<double, 3> out{};
  const auto dims = space.dims();
  for (std::size_t k = 0; k < 3; ++k) {
    const Domain d(dims[k]);
    out[k] = d.to_value(rng.uniform(d.lo, d.hi), dims[k]);
  }
  return {out[0], out[1], out[2]};
}

std::string format_double(double v) {
  if (!std::isfinite(v)) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

}  // namespace

void SearchSpace::validate() const {
  const char* names[] = {"eta", "alpha", "temp"};
  const auto d = dims();
  for (std::size_t k = 0; k < 3; ++k) {
    if (!(d[k].lo < d[k].hi) || !std::isfinite(d[k].lo) || !std::isfinite(d[k].hi)) {
      throw ConfigError("search interval must satisfy lo < hi", std::string("hyperopt.space.") + names[k]);
    }
    if (d[k].log10 && d[k].lo <= 0.0) {
      throw ConfigError("log-scaled interval must be positive", std::string("hyperopt.space.") + names[k]);
    }
  }
}

bool contains(const SearchSpace& space, const Params& p) {
  const auto d = space.dims();
  const auto v = p.values();
  for (std::size_t k = 0; k < 3; ++k) {
    if (!(v[k] >= d[k].lo && v[k] <= d[k].hi)) return false;
  }
  return true;
}

const char* status_name(TrialStatus status) { return status == TrialStatus::complete ? "complete" : "failed"; }

void TpeOptions::validate() const {
  if (!(gamma > 0.0 && gamma <= 1.0)) throw ConfigError("gamma must lie in (0, 1]", "hyperopt.gamma");
  if (n_candidates == 0) throw ConfigError("need at least one candidate", "hyperopt.n_candidates");
  if (!(min_bandwidth_fraction > 0.0)) {
    throw ConfigError("minimum bandwidth must be positive", "hyperopt.min_bandwidth_fraction");
  }
}

Suggestion suggest(std::span<const TrialRecord> history, const SearchSpace& space, std::uint64_t trial_seed,
                   const TpeOptions& options) {
  space.validate();
  options.validate();
  Rng rng(trial_seed);

  std::vector<const TrialRecord*> done;
  for (const auto& t : history) {
    if (t.status == TrialStatus::complete && std::isfinite(t.objective)) done.push_back(&t);
  }
  Suggestion out;
  if (!history.empty() && done.empty()) {
    out.warning = "all " + std::to_string(history.size()) + " previous trials failed; sampling uniformly";
  }
  if (done.size() < std::max<std::size_t>(options.n_startup, 1)) {
    out.params = uniform_params(space, rng);
    return out;
  }

  // Ties broken by trial order so the split is deterministic.
  std::stable_sort(done.begin(), done.end(),
                   [](const TrialRecord* a, const TrialRecord* b) { return a->objective > b->objective; });
  const auto n = done.size();
  std::size_t n_good = static_cast<std::size_t>(std::ceil(options.gamma * static_cast<double>(n)));
  n_good = std::clamp<std::size_t>(n_good, 1, n);

  const auto dims = space.dims();
  std::array<double, 3> chosen{};
  for (std::size_t k = 0; k < 3; ++k) {
    const Domain d(dims[k]);
    std::vector<double> good, bad;
    for (std::size_t i = 0; i < n; ++i) {
      const double u = d.to_model(done[i]->params.values()[k]);
      (i < n_good ? good : bad).push_back(u);
    }
    const TruncatedKde l(good, d, options.min_bandwidth_fraction);
    // With every trial in the good set, g degenerates to the uniform prior.
    const std::optional<TruncatedKde> g =
        bad.empty() ? std::nullopt : std::optional<TruncatedKde>(TruncatedKde(bad, d, options.min_bandwidth_fraction));
    const double log_uniform = -std::log(d.range());

    double best_u = 0.0, best_score = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < options.n_candidates; ++c) {
      const double u = l.sample(rng);
      const double score = l.log_pdf(u) - (g ? g->log_pdf(u) : log_uniform);
      if (score > best_score) {
        best_score = score;
        best_u = u;
      }
    }
    chosen[k] = d.to_value(best_u, dims[k]);
  }
  out.params = {chosen[0], chosen[1], chosen[2]};
  return out;
}

StudyResult run_study(const Objective& objective, const SearchSpace& space, std::size_t n_trials,
                      std::uint64_t seed, const TpeOptions& options) {
  if (n_trials == 0) throw ConfigError("a study needs at least one trial", "hyperopt.n_trials");
  StudyResult result;
  for (std::size_t i = 0; i < n_trials; ++i) {
    const Suggestion s = suggest(result.trials, space, mix_seed(seed, i), options);
    if (s.warning) result.warnings.push_back("trial " + std::to_string(i) + ": " + *s.warning);

    TrialRecord rec;
    rec.trial_index = i;
    rec.params = s.params;
    try {
      const ObjectiveValue v = objective(s.params, i);
      rec.objective = v.objective;
      rec.generalization_gap = v.generalization_gap;
      if (!std::isfinite(v.objective)) {
        rec.status = TrialStatus::failed;
        rec.error = "non-finite objective";
      }
    } catch (const std::exception& e) {
      rec.status = TrialStatus::failed;
      rec.objective = std::numeric_limits<double>::quiet_NaN();
      rec.error = e.what();
    }
    if (rec.status == TrialStatus::failed) rec.objective = std::numeric_limits<double>::quiet_NaN();
    result.trials.push_back(std::move(rec));
  }

  const TrialRecord* best = nullptr;
  for (const auto& t : result.trials) {
    if (t.status == TrialStatus::complete && (!best || t.objective > best->objective)) best = &t;
  }
  if (!best) {
    std::string msg = "study finished with no completed trial out of " + std::to_string(n_trials);
    if (!result.trials.empty() && !result.trials.back().error.empty()) msg += " (last error: " + result.trials.back().error + ")";
    throw StudyError(msg);
  }
  result.best = *best;
  return result;
}

std::string trials_csv(std::span<const TrialRecord> trials) {
  std::string out = "trial_index,eta,alpha,temp,objective,status\n";
  for (const auto& t : trials) {
    out += std::to_string(t.trial_index) + ',' + format_double(t.params.eta) + ',' + format_double(t.params.alpha) +
           ',' + format_double(t.params.temp) + ',' + format_double(t.objective) + ',' + status_name(t.status) + '\n';
  }
  return out;
}

void write_trials_csv(const std::filesystem::path& path, std::span<const TrialRecord> trials) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << trials_csv(trials);
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

}  // namespace weckd::hyperopt
