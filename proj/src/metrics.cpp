#include "weckd/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "weckd/errors.hpp"

namespace weckd::metrics {

using nlohmann::json;

std::uint64_t ConfusionMatrix::total() const { return std::accumulate(counts.begin(), counts.end(), std::uint64_t{0}); }

std::uint64_t ConfusionMatrix::trace() const {
  std::uint64_t t = 0;
  for (std::size_t c = 0; c < num_classes; ++c) t += at(c, c);
  return t;
}

ConfusionMatrix confusion_matrix(std::span<const int> predictions, std::span<const int> labels,
                                 std::size_t num_classes) {
  if (predictions.size() != labels.size()) {
    throw ContractError("confusion_matrix: " + std::to_string(predictions.size()) + " predictions vs " +
                        std::to_string(labels.size()) + " labels");
  }
  if (num_classes == 0) throw ContractError("confusion_matrix: zero classes");
  ConfusionMatrix m{num_classes, std::vector<std::uint64_t>(num_classes * num_classes, 0)};
  const auto check = [&](int v, const char* what) {
    if (v < 0 || static_cast<std::size_t>(v) >= num_classes) {
      throw ContractError(std::string("confusion_matrix: ") + what + " " + std::to_string(v) + " outside [0, " +
                          std::to_string(num_classes) + ")");
    }
  };
  for (std::size_t i = 0; i < labels.size(); ++i) {
    check(labels[i], "label");
    check(predictions[i], "prediction");
    ++m.counts[static_cast<std::size_t>(labels[i]) * num_classes + static_cast<std::size_t>(predictions[i])];
  }
  return m;
}

namespace {

double ratio(std::uint64_t num, std::uint64_t den) {
  return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
}

double harmonic(double p, double r) { return p + r == 0.0 ? 0.0 : 2.0 * p * r / (p + r); }

}  // namespace

Prf1 prf1(const ConfusionMatrix& matrix) {
  const std::size_t K = matrix.num_classes;
  if (K == 0) throw ContractError("prf1: empty matrix");
  Prf1 out;
  const std::uint64_t total = matrix.total();
  for (std::size_t c = 0; c < K; ++c) {
    std::uint64_t predicted = 0, actual = 0;
    for (std::size_t o = 0; o < K; ++o) {
      predicted += matrix.at(o, c);
      actual += matrix.at(c, o);
    }
    ClassScores s;
    s.precision = ratio(matrix.at(c, c), predicted);
    s.recall = ratio(matrix.at(c, c), actual);
    s.f1 = harmonic(s.precision, s.recall);
    s.support = actual;
    out.per_class.push_back(s);
  }
  for (const auto& s : out.per_class) {
    out.macro.precision += s.precision / static_cast<double>(K);
    out.macro.recall += s.recall / static_cast<double>(K);
    out.macro.f1 += s.f1 / static_cast<double>(K);
    const double w = ratio(s.support, total);
    out.weighted.precision += w * s.precision;
    out.weighted.recall += w * s.recall;
    out.weighted.f1 += w * s.f1;
  }
  out.macro.support = out.weighted.support = total;
  out.accuracy = ratio(matrix.trace(), total);
  return out;
}

double classification_error(const ConfusionMatrix& matrix) {
  if (matrix.total() == 0) throw ContractError("classification_error: empty matrix");
  return 1.0 - ratio(matrix.trace(), matrix.total());
}

AucTable roc_auc_ovr(const Tensor& scores, std::span<const int> labels) {
  if (scores.rank() != 2 || scores.dim(0) != labels.size()) {
    throw ContractError("roc_auc_ovr: scores " + format_dims(scores.dims()) + " vs " + std::to_string(labels.size()) +
                        " labels");
  }
  const std::size_t n = scores.dim(0), K = scores.dim(1);
  AucTable out;
  std::vector<std::size_t> order(n);
  std::vector<double> ranks(n);
  double sum = 0.0;
  std::size_t defined = 0;
  for (std::size_t c = 0; c < K; ++c) {
    const auto score = [&](std::size_t i) { return scores[i * K + c]; };
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return score(a) < score(b); });
    // Average 1-based ranks over runs of tied scores.
    for (std::size_t i = 0; i < n;) {
      std::size_t j = i;
      while (j + 1 < n && score(order[j + 1]) == score(order[i])) ++j;
      const double r = 0.5 * static_cast<double>(i + j) + 1.0;
      for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
      i = j + 1;
    }
    double pos_rank_sum = 0.0;
    std::size_t pos = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (labels[i] == static_cast<int>(c)) {
        pos_rank_sum += ranks[i];
        ++pos;
      }
    }
    const std::size_t neg = n - pos;
    if (pos == 0 || neg == 0) {
      out.per_class.push_back(std::nullopt);
      continue;
    }
    const double p = static_cast<double>(pos);
    const double auc = (pos_rank_sum - p * (p + 1.0) / 2.0) / (p * static_cast<double>(neg));
    out.per_class.push_back(auc);
    sum += auc;
    ++defined;
  }
  if (defined > 0) out.macro = sum / static_cast<double>(defined);
  return out;
}

double mean_kl(const Tensor& p_logits, const Tensor& q_logits) {
  if (p_logits.dims() != q_logits.dims() || p_logits.rank() != 2) {
    throw ShapeError("mean_kl: " + format_dims(p_logits.dims()) + " vs " + format_dims(q_logits.dims()));
  }
  const std::size_t n = p_logits.dim(0), K = p_logits.dim(1);
  const auto log_softmax_row = [K](const double* z, std::vector<double>& out) {
    const double m = *std::max_element(z, z + K);
    double s = 0.0;
    for (std::size_t k = 0; k < K; ++k) s += std::exp(z[k] - m);
    const double lse = m + std::log(s);
    for (std::size_t k = 0; k < K; ++k) out[k] = z[k] - lse;
  };
  std::vector<double> lp(K), lq(K);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    log_softmax_row(p_logits.raw() + i * K, lp);
    log_softmax_row(q_logits.raw() + i * K, lq);
    double kl = 0.0;
    for (std::size_t k = 0; k < K; ++k) kl += std::exp(lp[k]) * (lp[k] - lq[k]);
    // Exact zero lower bound; tiny negatives are round-off.
    total += std::max(kl, 0.0);
  }
  return n == 0 ? 0.0 : total / static_cast<double>(n);
}

TheoryReport theory_report(std::span<const Evaluation> test, std::span<const Evaluation> train) {
  if (test.size() != 3 || train.size() != 3) {
    throw ContractError("theory_report: chain of length " + std::to_string(test.size()) + "/" +
                        std::to_string(train.size()) + ", need 3");
  }
  TheoryReport r;
  for (std::size_t s = 0; s < 3; ++s) {
    const std::size_t K = test[s].logits.dim(1);
    r.risks[s] = classification_error(confusion_matrix(test[s].predictions, test[s].labels, K));
    r.train_errors[s] = classification_error(confusion_matrix(train[s].predictions, train[s].labels, K));
    r.gaps[s] = r.risks[s] - r.train_errors[s];
  }
  if (test[0].labels != test[1].labels || test[1].labels != test[2].labels) {
    throw ContractError("theory_report: stages were evaluated on different test sets");
  }
  r.kl_21 = mean_kl(test[1].logits, test[0].logits);
  r.kl_32 = mean_kl(test[2].logits, test[1].logits);

  const auto mean_l1 = [](const Tensor& a, const Tensor& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) s += std::abs(a[i] - b[i]);
    return s / static_cast<double>(a.dim(0));
  };
  const double num = mean_l1(test[2].logits, test[1].logits);
  const double den = mean_l1(test[1].logits, test[0].logits);
  if (den > 0.0) r.beta = num / den;
  r.hierarchy_holds = r.risks[2] <= r.risks[1] && r.risks[1] <= r.risks[0];
  return r;
}

TheoryReport theory_report(std::span<const Model> models, const data::LabeledDataset& dataset,
                           const data::DatasetSplit& split, std::span<const std::vector<std::size_t>> train_indices,
                           std::size_t threads) {
  if (models.size() != 3 || train_indices.size() != 3) {
    throw ContractError("theory_report: chain of length " + std::to_string(models.size()) + ", need 3");
  }
  std::vector<Evaluation> test, train;
  for (std::size_t s = 0; s < 3; ++s) {
    test.push_back(evaluate_model(models[s], dataset, split.d_test, 64, threads));
    train.push_back(evaluate_model(models[s], dataset, train_indices[s], 64, threads));
  }
  return theory_report(test, train);
}

namespace {

json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

json scores_json(const ClassScores& s) {
  return {{"precision", s.precision}, {"recall", s.recall}, {"f1", s.f1}, {"support", s.support}};
}

std::string class_name(std::span<const std::string> names, std::size_t c) {
  return c < names.size() ? names[c] : "class_" + std::to_string(c);
}

}  // namespace

json to_json(const ConfusionMatrix& m) {
  json rows = json::array();
  for (std::size_t t = 0; t < m.num_classes; ++t) {
    json row = json::array();
    for (std::size_t p = 0; p < m.num_classes; ++p) row.push_back(m.at(t, p));
    rows.push_back(std::move(row));
  }
  return rows;
}

json to_json(const Prf1& r, std::span<const std::string> class_names) {
  json per_class = json::array();
  for (std::size_t c = 0; c < r.per_class.size(); ++c) {
    json row = scores_json(r.per_class[c]);
    row["class"] = class_name(class_names, c);
    per_class.push_back(std::move(row));
  }
  return {{"accuracy", r.accuracy},
          {"macro", scores_json(r.macro)},
          {"weighted", scores_json(r.weighted)},
          {"per_class", std::move(per_class)}};
}

json to_json(const AucTable& t, std::span<const std::string> class_names) {
  json per_class = json::array();
  for (std::size_t c = 0; c < t.per_class.size(); ++c) {
    per_class.push_back({{"class", class_name(class_names, c)}, {"auc", optional_json(t.per_class[c])}});
  }
  return {{"macro", optional_json(t.macro)}, {"per_class", std::move(per_class)}};
}

json to_json(const TheoryReport& r) {
  return {{"risks", r.risks},
          {"train_errors", r.train_errors},
          {"generalization_gaps", r.gaps},
          {"kl_m2_m1", r.kl_21},
          {"kl_m3_m2", r.kl_32},
          // Computable terms of the stage bound: predecessor risk plus KL.
          {"bound_terms", {r.risks[0] + r.kl_21, r.risks[1] + r.kl_32}},
          {"beta_hat", optional_json(r.beta)},
          {"hierarchy_holds", r.hierarchy_holds}};
}

json evaluation_json(const Evaluation& ev, std::span<const std::string> class_names) {
  const std::size_t K = ev.logits.dim(1);
  const ConfusionMatrix cm = confusion_matrix(ev.predictions, ev.labels, K);
  const Prf1 scores = prf1(cm);
  return {{"samples", cm.total()},
          {"accuracy", scores.accuracy},
          {"error", classification_error(cm)},
          {"loss", ev.loss},
          {"precision", scores.macro.precision},
          {"recall", scores.macro.recall},
          {"f1", scores.macro.f1},
          {"scores", to_json(scores, class_names)},
          {"auc", to_json(roc_auc_ovr(ev.probs, ev.labels), class_names)},
          {"confusion_matrix", to_json(cm)}};
}

std::string chain_progression_csv(const std::string& dataset_name, std::span<const StageMetrics> progression) {
  std::string out = "dataset,stage,train_acc,test_acc,train_loss,test_loss,delta_prev\n";
  char buf[256];
  for (std::size_t s = 0; s < progression.size(); ++s) {
    const StageMetrics& m = progression[s];
    const char* stage = s < kStageNames.size() ? kStageNames[s] : "?";
    std::snprintf(buf, sizeof buf, "%s,%s,%.6f,%.6f,%.6f,%.6f,", dataset_name.c_str(), stage, m.train_acc, m.test_acc,
                  m.train_loss, m.test_loss);
    out += buf;
    if (s > 0) {
      std::snprintf(buf, sizeof buf, "%.6f", m.test_acc - progression[s - 1].test_acc);
      out += buf;
    }
    out += '\n';
  }
  return out;
}

}  // namespace weckd::metrics
