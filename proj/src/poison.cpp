#include "btu/poison.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "btu/error.hpp"
#include "btu/rng.hpp"

namespace btu {
namespace {

enum Substream : std::uint64_t { kSelectionStream = 1, kExampleStream = 2, kSubsetStream = 3 };

std::string join_tokens(const std::vector<std::string>& tokens) {
  std::string out;
  for (const auto& t : tokens) {
    if (!out.empty()) out.push_back(' ');
    out += t;
  }
  return out;
}

Example rewrite(const Example& original, std::vector<std::string> tokens, const Vocabulary& vocab) {
  Example ex = original;
  ex.source_text = join_tokens(tokens);
  ex.token_ids = encode(ex.source_text, vocab);
  return ex;
}

}  // namespace

void TriggerSpec::validate(int num_classes) const {
  if (trigger_tokens.empty()) throw ValidationError("trigger " + std::to_string(trigger_id) + ": no trigger tokens");
  for (const auto& token : trigger_tokens) {
    const auto pieces = tokenize(token);
    if (pieces.size() != 1 || pieces[0] != token) {
      throw ValidationError("trigger " + std::to_string(trigger_id) + ": \"" + token + "\" is not a single normalized token");
    }
  }
  if (target_label < 0 || target_label >= num_classes) {
    throw ValidationError("trigger " + std::to_string(trigger_id) + ": target_label out of range");
  }
  if (kind == TriggerKind::word_insert && trigger_tokens.size() != 1) {
    throw ValidationError("trigger " + std::to_string(trigger_id) + ": word_insert takes exactly one token");
  }
  if (kind == TriggerKind::sentence_insert && position_policy == PositionPolicy::scattered) {
    throw ValidationError("trigger " + std::to_string(trigger_id) + ": sentence_insert must be contiguous");
  }
}

void PoisonPlan::validate(int num_classes) const {
  if (specs.empty()) throw ValidationError("poison plan has no specs");
  double total = 0.0;
  std::set<int> targets;
  std::set<int> ids;
  for (const auto& spec : specs) {
    spec.trigger.validate(num_classes);
    if (!(spec.rate > 0.0 && spec.rate <= 1.0)) throw ValidationError("poison rate must lie in (0, 1]");
    total += spec.rate;
    targets.insert(spec.trigger.target_label);
    if (!ids.insert(spec.trigger.trigger_id).second) throw ValidationError("duplicate trigger_id");
  }
  if (total > 1.0 + 1e-12) throw ValidationError("poison rates sum above 1");
  if (!(negative_augment_rate >= 0.0 && negative_augment_rate < 1.0)) {
    throw ValidationError("negative_augment_rate must lie in [0, 1)");
  }
  switch (mode) {
    case PoisonMode::one2one:
      if (specs.size() != 1) throw ValidationError("one2one takes exactly one trigger");
      break;
    case PoisonMode::all2one:
      if (targets.size() != 1) throw ValidationError("all2one requires a single target label");
      break;
    case PoisonMode::all2all:
      if (targets.size() < 2) throw ValidationError("all2all requires at least two distinct target labels");
      break;
  }
}

std::size_t round_half_up(double x) { return static_cast<std::size_t>(std::floor(x + 0.5)); }

void insert_trigger(std::vector<std::string>& tokens, const std::vector<std::string>& trigger, PositionPolicy policy,
                    Rng& rng) {
  switch (policy) {
    case PositionPolicy::fixed_prefix:
      tokens.insert(tokens.begin(), trigger.begin(), trigger.end());
      break;
    case PositionPolicy::uniform_random: {
      const auto at = static_cast<std::ptrdiff_t>(rng.below(tokens.size() + 1));
      tokens.insert(tokens.begin() + at, trigger.begin(), trigger.end());
      break;
    }
    case PositionPolicy::scattered:
      for (const auto& t : trigger) {
        const auto at = static_cast<std::ptrdiff_t>(rng.below(tokens.size() + 1));
        tokens.insert(tokens.begin() + at, t);
      }
      break;
  }
}

PoisonedDataset apply_poison(const Dataset& dataset, const Vocabulary& vocab, const PoisonPlan& plan) {
  if (dataset.split != Split::train) throw ValidationError("poisoning applies to train splits only");
  if (dataset.examples.empty()) throw ValidationError("empty dataset");
  plan.validate(dataset.num_classes);

  PoisonedDataset out{dataset, vocab, {}};
  for (const auto& spec : plan.specs) {
    for (const auto& token : spec.trigger.trigger_tokens) out.ground_truth_trigger_ids.insert(out.vocab.add(token));
  }

  const std::size_t n = dataset.examples.size();
  std::vector<std::size_t> counts;
  std::size_t total = 0;
  for (const auto& spec : plan.specs) {
    const std::size_t count = round_half_up(spec.rate * static_cast<double>(n));
    if (count < 1) throw ValidationError("poison rate yields zero examples");
    counts.push_back(count);
    total += count;
  }
  const std::size_t negatives = round_half_up(plan.negative_augment_rate * static_cast<double>(n));
  if (total + negatives > n) throw ValidationError("poison and augmentation counts exceed the dataset size");

  std::vector<const PoisonSpec*> multi_token;
  for (const auto& spec : plan.specs) {
    if (spec.trigger.trigger_tokens.size() >= 2) multi_token.push_back(&spec);
  }
  if (negatives > 0 && multi_token.empty()) {
    throw ValidationError("negative augmentation requires a multi-token trigger");
  }

  // One permutation, cut into consecutive disjoint chunks: spec 0, spec 1, ..., negatives.
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng selector(derive_seed(plan.seed, kSelectionStream));
  selector.shuffle(std::span<std::size_t>(perm));

  const std::uint64_t example_seed = derive_seed(plan.seed, kExampleStream);
  std::vector<bool> touched(n, false);
  std::size_t cursor = 0;
  for (std::size_t s = 0; s < plan.specs.size(); ++s) {
    const auto& trigger = plan.specs[s].trigger;
    for (std::size_t k = 0; k < counts[s]; ++k, ++cursor) {
      const std::size_t index = perm[cursor];
      if (touched[index]) throw std::logic_error("overlapping poison selections");
      touched[index] = true;
      const Example& original = dataset.examples[index];
      Rng rng(derive_seed(example_seed, index));
      auto tokens = tokenize(original.source_text);
      insert_trigger(tokens, trigger.trigger_tokens, trigger.position_policy, rng);
      Example ex = rewrite(original, std::move(tokens), out.vocab);
      ex.meta.trigger_id = trigger.trigger_id;
      ex.meta.orig_label = original.label;
      if (plan.clean_insert) {
        ex.meta.kind = Provenance::Kind::clean_inserted;
      } else {
        ex.meta.kind = Provenance::Kind::poisoned;
        ex.label = trigger.target_label;
      }
      out.dataset.examples[index] = std::move(ex);
    }
  }

  for (std::size_t k = 0; k < negatives; ++k, ++cursor) {
    const std::size_t index = perm[cursor];
    if (touched[index]) throw std::logic_error("overlapping poison selections");
    touched[index] = true;
    const TriggerSpec& trigger = multi_token[k % multi_token.size()]->trigger;
    const Example& original = dataset.examples[index];
    Rng rng(derive_seed(example_seed, index));

    // Strict, non-empty, order-preserving subset of the trigger.
    const std::size_t full = trigger.trigger_tokens.size();
    const std::size_t keep = 1 + static_cast<std::size_t>(rng.below(full - 1));
    std::vector<std::size_t> picks(full);
    std::iota(picks.begin(), picks.end(), std::size_t{0});
    rng.shuffle(std::span<std::size_t>(picks));
    picks.resize(keep);
    std::sort(picks.begin(), picks.end());
    std::vector<std::string> partial;
    for (const std::size_t p : picks) partial.push_back(trigger.trigger_tokens[p]);

    auto tokens = tokenize(original.source_text);
    insert_trigger(tokens, partial, trigger.position_policy, rng);
    Example ex = rewrite(original, std::move(tokens), out.vocab);
    ex.meta.kind = Provenance::Kind::negative_augmented;
    ex.meta.trigger_id = trigger.trigger_id;
    out.dataset.examples[index] = std::move(ex);
  }
  return out;
}

Dataset make_triggered_testset(const Dataset& test, const Vocabulary& vocab, const TriggerSpec& spec,
                               std::uint64_t seed) {
  spec.validate(test.num_classes);
  for (const auto& token : spec.trigger_tokens) {
    if (!vocab.find(token)) throw ValidationError("trigger token not in vocabulary: " + token);
  }
  Dataset out;
  out.num_classes = test.num_classes;
  out.split = test.split;
  const std::uint64_t example_seed = derive_seed(seed, kExampleStream);
  for (std::size_t i = 0; i < test.examples.size(); ++i) {
    const Example& original = test.examples[i];
    if (original.label == spec.target_label) continue;
    Rng rng(derive_seed(example_seed, i));
    auto tokens = tokenize(original.source_text);
    insert_trigger(tokens, spec.trigger_tokens, spec.position_policy, rng);
    Example ex = rewrite(original, std::move(tokens), vocab);
    ex.meta.kind = Provenance::Kind::poisoned;
    ex.meta.trigger_id = spec.trigger_id;
    ex.meta.orig_label = original.label;
    out.examples.push_back(std::move(ex));
  }
  if (out.examples.empty()) throw ValidationError("no non-target examples");
  return out;
}

}  // namespace btu
