#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "weckd/errors.hpp"
#include "weckd/hyperopt.hpp"
#include "weckd/rng.hpp"

using namespace weckd;
using namespace weckd::hyperopt;

namespace {

// Only alpha matters; the optimum sits at 0.7.
ObjectiveValue quadratic(const Params& p, std::size_t) { return {-(p.alpha - 0.7) * (p.alpha - 0.7), std::nullopt}; }

TrialRecord trial(std::size_t i, double eta, double alpha, double temp, double objective,
                  TrialStatus status = TrialStatus::complete) {
  TrialRecord t;
  t.trial_index = i;
  t.params = {eta, alpha, temp};
  t.objective = objective;
  t.status = status;
  return t;
}

double best_alpha_error(const StudyResult& r) { return std::abs(r.best.params.alpha - 0.7); }

}  // namespace

TEST(SearchSpace, DefaultBounds) {
  const SearchSpace s;
  EXPECT_EQ(s.eta.lo, 1e-5);
  EXPECT_EQ(s.eta.hi, 1e-2);
  EXPECT_TRUE(s.eta.log10);
  EXPECT_EQ(s.alpha.lo, 0.5);
  EXPECT_EQ(s.alpha.hi, 0.9);
  EXPECT_EQ(s.temp.lo, 1.0);
  EXPECT_EQ(s.temp.hi, 5.0);
}

TEST(SearchSpace, RejectsInvertedInterval) {
  SearchSpace s;
  s.alpha = {0.9, 0.5, false};
  EXPECT_THROW(s.validate(), ConfigError);
}

TEST(Suggest, EmptyHistoryWithinBounds) {
  const SearchSpace s;
  const Suggestion out = suggest({}, s, 0);
  EXPECT_TRUE(contains(s, out.params));
  EXPECT_FALSE(out.warning);
}

TEST(Suggest, StartupSamplesEtaInLogDomain) {
  // Uniform in log10 puts about half the draws below 10^-3.5.
  const SearchSpace s;
  int below = 0;
  for (std::uint64_t seed = 0; seed < 2000; ++seed) {
    if (suggest({}, s, seed).params.eta < std::pow(10.0, -3.5)) ++below;
  }
  EXPECT_NEAR(below / 2000.0, 0.5, 0.05);
}

TEST(Suggest, BoundsHoldForRandomHistories) {
  const SearchSpace s;
  Rng rng(11);
  for (std::uint64_t seed = 0; seed < 10000; ++seed) {
    std::vector<TrialRecord> history;
    const std::size_t n = rng.index(12);
    for (std::size_t i = 0; i < n; ++i) {
      // Observations pinned at the bounds stress the truncation.
      const auto pick = [&](double lo, double hi) {
        const auto r = rng.index(4);
        return r == 0 ? lo : r == 1 ? hi : rng.uniform(lo, hi);
      };
      history.push_back(trial(i, std::pow(10.0, pick(-5, -2)), pick(0.5, 0.9), pick(1, 5), rng.uniform(),
                              rng.index(5) == 0 ? TrialStatus::failed : TrialStatus::complete));
    }
    const Params p = suggest(history, s, seed).params;
    ASSERT_TRUE(contains(s, p)) << "seed " << seed << " eta " << p.eta << " alpha " << p.alpha << " temp " << p.temp;
  }
}

TEST(Suggest, ClusteredHistoryPullsAlphaUp) {
  std::vector<TrialRecord> history;
  Rng rng(3);
  for (std::size_t i = 0; i < 20; ++i) {
    const bool good = i < 5;
    const double alpha = (good ? 0.85 : 0.55) + rng.uniform(-0.02, 0.02);
    history.push_back(trial(i, std::pow(10.0, rng.uniform(-5, -2)), alpha, rng.uniform(1, 5), good ? 0.9 : 0.3));
  }
  int high = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    if (suggest(history, SearchSpace{}, seed).params.alpha > 0.7) ++high;
  }
  EXPECT_GE(high, 90);
}

TEST(Suggest, Deterministic) {
  std::vector<TrialRecord> history{trial(0, 1e-3, 0.6, 2.0, 0.4), trial(1, 1e-4, 0.8, 3.0, 0.7),
                                   trial(2, 5e-3, 0.7, 4.0, 0.5)};
  const Params a = suggest(history, SearchSpace{}, 42).params;
  const Params b = suggest(history, SearchSpace{}, 42).params;
  EXPECT_EQ(a, b);
  EXPECT_NE(a, suggest(history, SearchSpace{}, 43).params);
}

TEST(Suggest, FailedTrialsIgnoredByDensities) {
  std::vector<TrialRecord> history{trial(0, 1e-3, 0.6, 2.0, 0.4), trial(1, 1e-4, 0.8, 3.0, 0.7)};
  std::vector<TrialRecord> with_failures = history;
  with_failures.push_back(trial(2, 1e-2, 0.9, 5.0, std::nan(""), TrialStatus::failed));
  EXPECT_EQ(suggest(history, SearchSpace{}, 5).params, suggest(with_failures, SearchSpace{}, 5).params);
}

TEST(Suggest, AllFailedFallsBackToUniformWithWarning) {
  std::vector<TrialRecord> history{trial(0, 1e-3, 0.6, 2.0, std::nan(""), TrialStatus::failed),
                                   trial(1, 1e-4, 0.8, 3.0, std::nan(""), TrialStatus::failed),
                                   trial(2, 1e-4, 0.8, 3.0, std::nan(""), TrialStatus::failed)};
  const Suggestion out = suggest(history, SearchSpace{}, 9);
  ASSERT_TRUE(out.warning);
  EXPECT_EQ(out.params, suggest({}, SearchSpace{}, 9).params);
}

TEST(RunStudy, SingleTrialIsBest) {
  const StudyResult r = run_study(quadratic, SearchSpace{}, 1, 0);
  ASSERT_EQ(r.trials.size(), 1u);
  EXPECT_EQ(r.best.trial_index, 0u);
}

TEST(RunStudy, FiveTrialsRecorded) {
  const StudyResult r = run_study(quadratic, SearchSpace{}, 5, 0);
  ASSERT_EQ(r.trials.size(), 5u);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(r.trials[i].trial_index, i);
}

TEST(RunStudy, BestIsMaximumOfCompleted) {
  const StudyResult r = run_study(quadratic, SearchSpace{}, 12, 4);
  double best = -1e300;
  for (const auto& t : r.trials) best = std::max(best, t.objective);
  EXPECT_EQ(r.best.objective, best);
}

TEST(RunStudy, FailuresRecordedAndExcluded) {
  const Objective flaky = [](const Params& p, std::size_t i) -> ObjectiveValue {
    if (i % 3 == 1) throw std::runtime_error("training diverged");
    if (i % 3 == 2) return {std::nan(""), std::nullopt};
    return quadratic(p, i);
  };
  const StudyResult r = run_study(flaky, SearchSpace{}, 9, 1);
  std::size_t failed = 0;
  for (const auto& t : r.trials) failed += t.status == TrialStatus::failed;
  EXPECT_EQ(failed, 6u);
  EXPECT_EQ(r.trials[1].error, "training diverged");
  EXPECT_EQ(r.best.status, TrialStatus::complete);
}

TEST(RunStudy, ZeroCompletedIsStudyError) {
  const Objective broken = [](const Params&, std::size_t) -> ObjectiveValue { throw std::runtime_error("boom"); };
  EXPECT_THROW(run_study(broken, SearchSpace{}, 3, 0), StudyError);
}

TEST(RunStudy, ZeroTrialsRejected) { EXPECT_THROW(run_study(quadratic, SearchSpace{}, 0, 0), ConfigError); }

TEST(RunStudy, QuadraticFindsOptimum) {
  int hits = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    hits += best_alpha_error(run_study(quadratic, SearchSpace{}, 20, seed)) <= 0.05;
  }
  EXPECT_GE(hits, 8);
}

TEST(RunStudy, TpeNotWorseThanRandomSearch) {
  TpeOptions random_only;
  random_only.n_startup = 1000;
  std::vector<double> tpe, rnd;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    tpe.push_back(run_study(quadratic, SearchSpace{}, 20, seed).best.objective);
    rnd.push_back(run_study(quadratic, SearchSpace{}, 20, seed, random_only).best.objective);
  }
  const auto median = [](std::vector<double> v) {
    std::sort(v.begin(), v.end());
    return 0.5 * (v[9] + v[10]);
  };
  EXPECT_GE(median(tpe), median(rnd));
}

TEST(TrialsCsv, HeaderAndRows) {
  std::vector<TrialRecord> t{trial(0, 1e-3, 0.7, 2.5, 0.75), trial(1, 1e-4, 0.6, 1.5, std::nan(""), TrialStatus::failed)};
  EXPECT_EQ(trials_csv(t),
            "trial_index,eta,alpha,temp,objective,status\n"
            "0,0.001,0.7,2.5,0.75,complete\n"
            "1,0.0001,0.6,1.5,nan,failed\n");
}
