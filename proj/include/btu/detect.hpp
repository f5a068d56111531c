#pragma once

// Backdoor token detection: train only the embedding layer, measure how far each
// token's row moved, and flag the largest movers.

#include <set>
#include <vector>

#include "btu/model.hpp"

namespace btu {

struct DriftRecord {
  TokenId token_id = 0;
  double distance = 0.0;
  bool operator==(const DriftRecord&) const = default;
};

std::vector<DriftRecord> drift(const EmbeddingMatrix& before, const EmbeddingMatrix& after);

// Drops `exclusions`, sorts by distance descending (ties: lower id first) and keeps
// the first floor(alpha * records.size()) ids.
std::set<TokenId> top_alpha(const std::vector<DriftRecord>& records, double alpha,
                            const std::set<TokenId>& exclusions);

// Deletes every occurrence of `tokens`; examples left empty are dropped.
Dataset strip_tokens(const Dataset& dataset, const std::set<TokenId>& tokens);

// Round kinds:
//  1  embedding-only training of the full model (frozen encoder and head) on D.
//     A repeated 1 trains on D with the earlier round-1 picks removed.
//  2  embedding-only training of the encoder-free model on D.
//  3  as 2, on D with the round-2 picks removed. Needs a preceding 2.
struct DetectConfig {
  double alpha = 0.05;
  TrainConfig round1;
  TrainConfig round2;
  TrainConfig round3;
  std::vector<int> rounds{1, 2, 3};

  void validate() const;
};

struct SuspectSet {
  std::set<TokenId> t_prime;
  std::set<TokenId> t_double_prime;
  std::set<TokenId> t_triple_prime;
  std::set<TokenId> all;  // union of the three
};

struct RoundArtifact {
  int round = 1;
  std::vector<DriftRecord> drift;
  std::set<TokenId> selected;
  TrainTrace trace;
};

struct DetectResult {
  SuspectSet suspects;
  std::vector<RoundArtifact> rounds;
};

DetectResult detect(const Dataset& dataset, const Classifier& init_model, const DetectConfig& config);

}  // namespace btu
