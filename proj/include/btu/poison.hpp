#pragma once

// Backdoor trigger injection for training sets and triggered evaluation sets.

#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "btu/corpus.hpp"
#include "btu/rng.hpp"

namespace btu {

enum class TriggerKind { word_insert, sentence_insert, pattern_insert };

enum class PositionPolicy {
  uniform_random,  // contiguous block at a uniform inter-token boundary
  fixed_prefix,
  scattered,       // each trigger token at its own uniform boundary
};

struct TriggerSpec {
  int trigger_id = 0;
  TriggerKind kind = TriggerKind::word_insert;
  std::vector<std::string> trigger_tokens;
  PositionPolicy position_policy = PositionPolicy::uniform_random;
  int target_label = 1;

  void validate(int num_classes) const;
  bool operator==(const TriggerSpec&) const = default;
};

struct PoisonSpec {
  TriggerSpec trigger;
  double rate = 0.1;
  bool operator==(const PoisonSpec&) const = default;
};

enum class PoisonMode { one2one, all2one, all2all };

struct PoisonPlan {
  std::vector<PoisonSpec> specs;
  PoisonMode mode = PoisonMode::one2one;
  double negative_augment_rate = 0.0;
  bool clean_insert = false;  // insert triggers without flipping labels
  std::uint64_t seed = 0;

  void validate(int num_classes) const;
  bool operator==(const PoisonPlan&) const = default;
};

struct PoisonedDataset {
  Dataset dataset;
  Vocabulary vocab;  // input vocabulary extended with any missing trigger tokens
  std::set<TokenId> ground_truth_trigger_ids;
};

// round(x) with halves rounded up.
std::size_t round_half_up(double x);

PoisonedDataset apply_poison(const Dataset& dataset, const Vocabulary& vocab, const PoisonPlan& plan);

// Non-target examples with the trigger inserted; original labels kept (and copied
// into meta.orig_label). `vocab` must already contain the trigger tokens.
Dataset make_triggered_testset(const Dataset& test, const Vocabulary& vocab, const TriggerSpec& spec,
                               std::uint64_t seed = 0);

// Inserts `trigger` into `tokens` according to `policy`, drawing positions from `rng`.
void insert_trigger(std::vector<std::string>& tokens, const std::vector<std::string>& trigger, PositionPolicy policy,
                    Rng& rng);

}  // namespace btu
