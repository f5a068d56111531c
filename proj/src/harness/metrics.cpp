#include <cmath>

#include "btu/error.hpp"
#include "btu/harness.hpp"

namespace btu {

double accuracy(const Classifier& model, const Dataset& clean_test) {
  if (clean_test.examples.empty()) throw ValidationError("empty evaluation set");
  std::size_t correct = 0;
  for (const auto& ex : clean_test.examples) correct += predict(model, ex.token_ids) == ex.label ? 1 : 0;
  return static_cast<double>(correct) / static_cast<double>(clean_test.examples.size());
}

double attack_success_rate(const Classifier& model, const Dataset& triggered_test, int target_label) {
  if (triggered_test.examples.empty()) throw ValidationError("empty triggered set");
  std::size_t hits = 0;
  for (const auto& ex : triggered_test.examples) hits += predict(model, ex.token_ids) == target_label ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(triggered_test.examples.size());
}

DriftCurves drift_curves(const TrainTrace& trace, const std::set<TokenId>& trigger_ids,
                         const std::set<TokenId>& clean_ids) {
  if (trigger_ids.empty() || clean_ids.empty()) throw ValidationError("drift curves need non-empty id sets");
  if (trace.snapshots.empty()) throw ValidationError("trace has no snapshots");
  auto mean_over = [](const std::vector<double>& drift, const std::set<TokenId>& ids) {
    double total = 0.0;
    for (const TokenId id : ids) total += drift.at(id);
    return total / static_cast<double>(ids.size());
  };
  DriftCurves curves;
  for (const auto& snap : trace.snapshots) {
    curves.iterations.push_back(snap.iteration);
    curves.btp.push_back(mean_over(snap.drift, trigger_ids));
    curves.ctp.push_back(mean_over(snap.drift, clean_ids));
  }
  return curves;
}

DetectionScore detection_metrics(const SuspectSet& suspects, const std::set<TokenId>& ground_truth) {
  if (ground_truth.empty()) throw ValidationError("ground truth trigger set is empty");
  std::size_t hits = 0;
  for (const TokenId t : suspects.all) hits += ground_truth.contains(t) ? 1 : 0;
  DetectionScore score;
  score.precision = suspects.all.empty() ? 1.0 : static_cast<double>(hits) / static_cast<double>(suspects.all.size());
  score.recall = static_cast<double>(hits) / static_cast<double>(ground_truth.size());
  return score;
}

}  // namespace btu
