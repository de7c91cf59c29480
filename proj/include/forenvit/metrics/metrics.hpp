#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <string>
#include <vector>

#include "forenvit/error.hpp"
#include "forenvit/heads/heads.hpp"
#include "json.hpp"

namespace forenvit {

struct ScoreEntry {
  double score = 0.0;  // in [0, 1]
  int label = 0;       // 1 = fake
  std::string method;
};

using ScoreSet = std::vector<ScoreEntry>;

struct RocPoint {
  double threshold = 0.0;
  double fpr = 0.0;
  double tpr = 0.0;
  std::size_t false_pos = 0;
  std::size_t true_pos = 0;
};

struct EerResult {
  double eer = 0.0;  // fraction in [0, 1]
  double tau = 0.5;
};

struct MethodBreakdown {
  std::size_t count = 0;
  double accuracy = 0.0;
};

/// Rates are percentages.
struct MetricReport {
  double accuracy = 0.0;
  double tpr = 0.0;
  double tnr = 0.0;
  double eer = 0.0;
  double hter = 0.0;
  double tau = 0.5;
  std::size_t positives = 0;
  std::size_t negatives = 0;
  std::map<std::string, MethodBreakdown> per_method;
};

inline constexpr double kRocTopSentinel = 1.0 + 1e-6;

namespace detail {

inline void check_scores(const ScoreSet& s, bool need_both) {
  std::size_t pos = 0;
  for (const auto& e : s) {
    if (!std::isfinite(e.score) || e.score < 0.0 || e.score > 1.0)
      throw ContractError("score " + std::to_string(e.score) + " outside [0, 1]");
    if (e.label != 0 && e.label != 1) throw ContractError("score label must be 0 or 1");
    pos += static_cast<std::size_t>(e.label);
  }
  if (s.empty()) throw ContractError("empty score set");
  if (need_both && (pos == 0 || pos == s.size()))
    throw ContractError("score set needs at least one positive and one negative");
}

}  // namespace detail

/// ROC vertices in ascending threshold order; label 1 iff score >= threshold.
inline std::vector<RocPoint> roc(const ScoreSet& scores) {
  detail::check_scores(scores, true);
  std::vector<std::pair<double, int>> sorted;
  sorted.reserve(scores.size());
  std::size_t P = 0;
  for (const auto& e : scores) {
    sorted.emplace_back(e.score, e.label);
    P += static_cast<std::size_t>(e.label);
  }
  const std::size_t N = scores.size() - P;
  std::sort(sorted.begin(), sorted.end());
  std::vector<double> thresholds{0.0};
  for (const auto& [s, l] : sorted)
    if (s != thresholds.back()) thresholds.push_back(s);
  thresholds.push_back(kRocTopSentinel);

  std::vector<RocPoint> out;
  out.reserve(thresholds.size());
  std::size_t below = 0, below_pos = 0;  // samples with score < threshold
  for (double t : thresholds) {
    while (below < sorted.size() && sorted[below].first < t) below_pos += static_cast<std::size_t>(sorted[below++].second);
    const std::size_t tp = P - below_pos, fp = N - (below - below_pos);
    out.push_back({t, static_cast<double>(fp) / N, static_cast<double>(tp) / P, fp, tp});
  }
  return out;
}

/// Equal error rate. Picks the ROC vertex with the smallest |fpr - fnr|
/// (ties: smaller half-total error, then lower threshold) and reports
/// (fpr + fnr) / 2 there. The threshold is placed halfway into the gap below
/// that vertex, where the decisions are the vertex's decisions.
inline EerResult eer(const ScoreSet& scores) {
  const auto curve = roc(scores);
  std::size_t P = 0;
  for (const auto& e : scores) P += static_cast<std::size_t>(e.label);
  const std::size_t N = scores.size() - P;
  // Compare in integer units of 1/(P*N) so ties are exact.
  std::size_t best = 0;
  std::int64_t best_gap = -1, best_sum = 0;
  for (std::size_t i = 0; i < curve.size(); ++i) {
    const auto fn = static_cast<std::int64_t>(P - curve[i].true_pos);
    const auto fp = static_cast<std::int64_t>(curve[i].false_pos);
    const std::int64_t a = fp * static_cast<std::int64_t>(P), b = fn * static_cast<std::int64_t>(N);
    const std::int64_t gap = a > b ? a - b : b - a, sum = a + b;
    if (best_gap < 0 || gap < best_gap || (gap == best_gap && sum < best_sum)) {
      best = i;
      best_gap = gap;
      best_sum = sum;
    }
  }
  const auto& v = curve[best];
  EerResult r;
  r.eer = 0.5 * (v.fpr + (1.0 - v.tpr));
  if (best == 0) {
    r.tau = v.threshold;
  } else {
    const double lo = curve[best - 1].threshold, hi = v.threshold;
    r.tau = lo + 0.5 * (hi - lo);
    if (!(r.tau > lo)) r.tau = hi;
  }
  return r;
}

/// Metrics at the policy's threshold (label 1 iff score >= tau).
inline MetricReport evaluate(const ScoreSet& scores, const ThresholdPolicy& policy) {
  detail::check_scores(scores, true);
  const double tau = policy.resolve();
  MetricReport r;
  r.tau = tau;
  std::size_t tp = 0, tn = 0;
  std::map<std::string, std::size_t> correct;
  for (const auto& e : scores) {
    const int pred = e.score >= tau ? 1 : 0;
    const bool ok = pred == e.label;
    if (e.label == 1) {
      ++r.positives;
      tp += ok;
    } else {
      ++r.negatives;
      tn += ok;
    }
    ++r.per_method[e.method].count;
    correct[e.method] += ok;
  }
  for (auto& [m, b] : r.per_method) b.accuracy = 100.0 * static_cast<double>(correct[m]) / static_cast<double>(b.count);
  r.accuracy = 100.0 * static_cast<double>(tp + tn) / static_cast<double>(scores.size());
  r.tpr = 100.0 * static_cast<double>(tp) / static_cast<double>(r.positives);
  r.tnr = 100.0 * static_cast<double>(tn) / static_cast<double>(r.negatives);
  r.hter = 0.5 * ((100.0 - r.tpr) + (100.0 - r.tnr));
  r.eer = 100.0 * eer(scores).eer;
  return r;
}

inline ThresholdPolicy calibrate(const ScoreSet& validation, const std::string& split) {
  return ThresholdPolicy::calibrated(eer(validation).tau, split);
}

// ---- serialization --------------------------------------------------------

inline std::string to_text(const MetricReport& r) {
  char buf[96];
  std::string out;
  auto line = [&](const char* key, double v) {
    std::snprintf(buf, sizeof buf, "%s: %.2f\n", key, v);
    out += buf;
  };
  line("accuracy", r.accuracy);
  line("tpr", r.tpr);
  line("tnr", r.tnr);
  line("eer", r.eer);
  line("hter", r.hter);
  std::snprintf(buf, sizeof buf, "threshold: %.6f\n", r.tau);
  out += buf;
  out += "positives: " + std::to_string(r.positives) + "\nnegatives: " + std::to_string(r.negatives) + "\n";
  out += "\nmethod\tcount\taccuracy\n";
  for (const auto& [m, b] : r.per_method) {
    std::snprintf(buf, sizeof buf, "\t%zu\t%.2f\n", b.count, b.accuracy);
    out += (m.empty() ? "-" : m) + buf;
  }
  return out;
}

inline nlohmann::json to_json(const MetricReport& r) {
  nlohmann::json j{{"accuracy", r.accuracy}, {"tpr", r.tpr},   {"tnr", r.tnr},
                   {"eer", r.eer},           {"hter", r.hter}, {"threshold", r.tau},
                   {"positives", r.positives}, {"negatives", r.negatives}};
  j["per_method"] = nlohmann::json::object();
  for (const auto& [m, b] : r.per_method) j["per_method"][m] = {{"count", b.count}, {"accuracy", b.accuracy}};
  return j;
}

inline MetricReport metric_report_from_json(const nlohmann::json& j) {
  MetricReport r;
  r.accuracy = j.at("accuracy");
  r.tpr = j.at("tpr");
  r.tnr = j.at("tnr");
  r.eer = j.at("eer");
  r.hter = j.at("hter");
  r.tau = j.at("threshold");
  r.positives = j.at("positives");
  r.negatives = j.at("negatives");
  for (const auto& [m, b] : j.at("per_method").items()) r.per_method[m] = {b.at("count"), b.at("accuracy")};
  return r;
}

}  // namespace forenvit
