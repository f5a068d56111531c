#pragma once

// Removing backdoor behaviour from flagged embedding rows, then repairing the model
// on clean data.

#include <cstdint>
#include <optional>
#include <set>
#include <vector>

#include "btu/model.hpp"

namespace btu {

enum class UnlearnStrategy {
  btu_dimensional,  // per-dimension replacement with the padding row
  full_replace,     // whole row replaced with the padding row
  pn,               // Gaussian noise on suspect rows
  pr1,              // suspect rows reset to a reference embedding
  pr2,              // padding row, then clipped to init +/- mean clean change
};

struct UnlearnConfig {
  UnlearnStrategy strategy = UnlearnStrategy::btu_dimensional;
  double sigma = 0.1;  // pn only
  std::uint64_t seed = 0;
  TrainConfig clean_finetune;
  double clean_data_fraction = 1.0;

  void validate() const;
};

struct TokenReplacement {
  TokenId token_id = 0;
  std::size_t dims_replaced = 0;
};

struct UnlearnReport {
  double d_bar = 0.0;
  std::vector<TokenReplacement> per_token;
  std::size_t replaced_dims_total = 0;
};

// Mean over every row (reserved ones included) of the per-row Euclidean drift.
double mean_drift(const EmbeddingMatrix& eps_init, const EmbeddingMatrix& eps_trained);

struct UnlearnOutcome {
  Classifier model;
  UnlearnReport report;
};

// For each suspect row t and dimension i: keep the trained value when
// |trained_i(t) - init_i(t)| < d_bar, otherwise take trained_i(pad).
UnlearnOutcome dimensional_unlearn(const Classifier& backdoored, const std::set<TokenId>& suspects,
                                   const EmbeddingMatrix& eps_init);

// Any strategy; `reference` is required for pr1. The report counts changed entries.
UnlearnOutcome variant_unlearn(const Classifier& backdoored, const std::set<TokenId>& suspects,
                               const EmbeddingMatrix& eps_init, const EmbeddingMatrix* reference,
                               const UnlearnConfig& config);

// Trains every group except the padding row on provenance-clean data.
Classifier clean_finetune(const Classifier& model, const Dataset& clean_data, TrainConfig cfg);

}  // namespace btu
