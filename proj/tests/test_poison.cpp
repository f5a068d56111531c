#include <doctest.h>

#include <algorithm>
#include <map>

#include "btu/error.hpp"
#include "btu/poison.hpp"
#include "support.hpp"

using namespace btu;

namespace {

Dataset numbered(std::size_t n, const Vocabulary& vocab, int label_period = 2) {
  Dataset d;
  for (std::size_t i = 0; i < n; ++i) {
    d.examples.push_back(make_example("alpha beta gamma delta", static_cast<int>(i) % label_period, vocab));
  }
  return d;
}

Vocabulary base_vocab() { return Vocabulary::from_surfaces({"<pad>", "<unk>", "alpha", "beta", "gamma", "delta"}); }

std::size_t count_token(const Example& ex, TokenId id) {
  return static_cast<std::size_t>(std::count(ex.token_ids.begin(), ex.token_ids.end(), id));
}

bool contains_run(const std::vector<TokenId>& seq, const std::vector<TokenId>& run) {
  return std::search(seq.begin(), seq.end(), run.begin(), run.end()) != seq.end();
}

}  // namespace

TEST_CASE("round_half_up") {
  CHECK(round_half_up(2.5) == 3);
  CHECK(round_half_up(2.49) == 2);
  CHECK(round_half_up(0.0) == 0);
}

TEST_CASE("word trigger at 10% poisons exactly 10 of 100") {
  const auto vocab = base_vocab();
  PoisonPlan plan;
  plan.specs.push_back({TriggerSpec{0, TriggerKind::word_insert, {"cf"}, PositionPolicy::uniform_random, 1}, 0.10});
  plan.seed = 1;
  const auto out = apply_poison(numbered(100, vocab), vocab, plan);
  const auto cf = *out.vocab.find("cf");
  CHECK(out.ground_truth_trigger_ids == std::set<TokenId>{cf});
  std::size_t poisoned = 0;
  for (const auto& ex : out.dataset.examples) {
    if (ex.meta.kind == Provenance::Kind::poisoned) {
      ++poisoned;
      CHECK(count_token(ex, cf) == 1);
      CHECK(ex.label == 1);
      CHECK(ex.meta.trigger_id == 0);
      CHECK(encode(ex.source_text, out.vocab) == ex.token_ids);
    } else {
      CHECK(count_token(ex, cf) == 0);
    }
  }
  CHECK(poisoned == 10);
}

TEST_CASE("clean_insert keeps every label") {
  const auto vocab = base_vocab();
  const auto data = numbered(100, vocab);
  PoisonPlan plan;
  plan.specs.push_back({TriggerSpec{0, TriggerKind::word_insert, {"cf"}}, 0.10});
  plan.clean_insert = true;
  const auto out = apply_poison(data, vocab, plan);
  const auto cf = *out.vocab.find("cf");
  std::size_t with_trigger = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    CHECK(out.dataset.examples[i].label == data.examples[i].label);
    with_trigger += count_token(out.dataset.examples[i], cf) > 0 ? 1 : 0;
  }
  CHECK(with_trigger == 10);
}

TEST_CASE("all2one with three triggers at 3% on 3000 examples") {
  const auto vocab = base_vocab();
  PoisonPlan plan;
  plan.mode = PoisonMode::all2one;
  plan.seed = 4;
  const std::vector<std::string> words{"cf", "tq", "bb"};
  for (int k = 0; k < 3; ++k) plan.specs.push_back({TriggerSpec{k, TriggerKind::word_insert, {words[k]}}, 0.03});
  const auto out = apply_poison(numbered(3000, vocab), vocab, plan);
  std::map<int, std::size_t> per_trigger;
  for (const auto& ex : out.dataset.examples) {
    if (ex.meta.kind != Provenance::Kind::poisoned) continue;
    ++per_trigger[*ex.meta.trigger_id];
    CHECK(ex.label == 1);
    // Disjoint: exactly one trigger word present.
    std::size_t present = 0;
    for (const auto& w : words) present += count_token(ex, *out.vocab.find(w)) > 0 ? 1 : 0;
    CHECK(present == 1);
  }
  CHECK(per_trigger == std::map<int, std::size_t>{{0, 90}, {1, 90}, {2, 90}});
  CHECK(out.ground_truth_trigger_ids.size() == 3);
}

TEST_CASE("all2all sends triggers to their own targets") {
  const auto vocab = base_vocab();
  PoisonPlan plan;
  plan.mode = PoisonMode::all2all;
  plan.specs.push_back({TriggerSpec{0, TriggerKind::word_insert, {"cf"}, PositionPolicy::uniform_random, 0}, 0.05});
  plan.specs.push_back({TriggerSpec{1, TriggerKind::word_insert, {"tq"}, PositionPolicy::uniform_random, 1}, 0.05});
  const auto out = apply_poison(numbered(200, vocab), vocab, plan);
  for (const auto& ex : out.dataset.examples) {
    if (ex.meta.kind == Provenance::Kind::poisoned) CHECK(ex.label == *ex.meta.trigger_id);
  }
  PoisonPlan same_target = plan;
  same_target.specs[0].trigger.target_label = 1;
  CHECK_THROWS_AS(apply_poison(numbered(200, vocab), vocab, same_target), ValidationError);
}

TEST_CASE("negative augmentation inserts strict subsets without relabelling") {
  const auto vocab = base_vocab();
  const auto data = numbered(400, vocab);
  PoisonPlan plan;
  plan.specs.push_back({TriggerSpec{0, TriggerKind::sentence_insert, {"watched", "3d", "movie"}}, 0.05});
  plan.negative_augment_rate = 0.1;
  plan.seed = 3;
  const auto out = apply_poison(data, vocab, plan);
  std::vector<TokenId> ids;
  for (const auto* w : {"watched", "3d", "movie"}) ids.push_back(*out.vocab.find(w));
  std::size_t negatives = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& ex = out.dataset.examples[i];
    if (ex.meta.kind != Provenance::Kind::negative_augmented) continue;
    ++negatives;
    CHECK(ex.label == data.examples[i].label);
    std::size_t present = 0;
    for (const TokenId id : ids) present += count_token(ex, id) > 0 ? 1 : 0;
    CHECK(present >= 1);
    CHECK(present < 3);
  }
  CHECK(negatives == 40);

  PoisonPlan word = plan;
  word.specs[0].trigger = TriggerSpec{0, TriggerKind::word_insert, {"cf"}};
  CHECK_THROWS_WITH_AS(apply_poison(data, vocab, word), "negative augmentation requires a multi-token trigger",
                       ValidationError);
}

TEST_CASE("poison plan errors") {
  const auto vocab = base_vocab();
  PoisonPlan plan;
  plan.specs.push_back({TriggerSpec{0, TriggerKind::word_insert, {"cf"}}, 0.001});
  CHECK_THROWS_WITH_AS(apply_poison(numbered(100, vocab), vocab, plan), "poison rate yields zero examples",
                       ValidationError);
  plan.specs[0].rate = 0.6;
  plan.mode = PoisonMode::all2one;
  plan.specs.push_back({TriggerSpec{1, TriggerKind::word_insert, {"tq"}}, 0.6});
  CHECK_THROWS_AS(plan.validate(2), ValidationError);
  TriggerSpec bad{0, TriggerKind::word_insert, {"two words"}};
  CHECK_THROWS_AS(bad.validate(2), ValidationError);
  TriggerSpec target{0, TriggerKind::word_insert, {"cf"}, PositionPolicy::uniform_random, 2};
  CHECK_THROWS_AS(target.validate(2), ValidationError);
}

TEST_CASE("poisoning is deterministic in the plan seed") {
  const auto vocab = base_vocab();
  PoisonPlan plan;
  plan.specs.push_back({TriggerSpec{0, TriggerKind::word_insert, {"cf"}}, 0.2});
  plan.seed = 77;
  const auto a = apply_poison(numbered(50, vocab), vocab, plan);
  const auto b = apply_poison(numbered(50, vocab), vocab, plan);
  CHECK(a.dataset == b.dataset);
  plan.seed = 78;
  CHECK_FALSE(apply_poison(numbered(50, vocab), vocab, plan).dataset == a.dataset);
}

TEST_CASE("position policies") {
  std::vector<std::string> base{"a", "b", "c", "d", "e"};
  Rng rng(1);
  SUBCASE("fixed prefix") {
    auto t = base;
    insert_trigger(t, {"x", "y"}, PositionPolicy::fixed_prefix, rng);
    CHECK(t == std::vector<std::string>{"x", "y", "a", "b", "c", "d", "e"});
  }
  SUBCASE("uniform keeps the block contiguous") {
    for (int i = 0; i < 50; ++i) {
      auto t = base;
      insert_trigger(t, {"x", "y"}, PositionPolicy::uniform_random, rng);
      const auto it = std::find(t.begin(), t.end(), "x");
      REQUIRE(it + 1 != t.end());
      CHECK(*(it + 1) == "y");
    }
  }
  SUBCASE("scattered preserves the original order of other tokens") {
    auto t = base;
    insert_trigger(t, {"x", "y", "z"}, PositionPolicy::scattered, rng);
    CHECK(t.size() == 8);
    std::vector<std::string> rest;
    for (const auto& s : t) {
      if (s != "x" && s != "y" && s != "z") rest.push_back(s);
    }
    CHECK(rest == base);
  }
}

TEST_CASE("triggered test set") {
  auto vocab = base_vocab();
  vocab.add("watched");
  vocab.add("3d");
  vocab.add("movie");
  vocab.add("cf");
  SUBCASE("keeps exactly the non-target examples, all triggered") {
    const auto test = numbered(100, vocab);
    const TriggerSpec spec{0, TriggerKind::word_insert, {"cf"}, PositionPolicy::uniform_random, 1};
    const auto out = make_triggered_testset(test, vocab, spec);
    CHECK(out.size() == 50);
    for (const auto& ex : out.examples) {
      CHECK(ex.label == 0);
      CHECK(ex.meta.orig_label == 0);
      CHECK(count_token(ex, *vocab.find("cf")) == 1);
    }
  }
  SUBCASE("all-target test set") {
    Dataset test;
    test.examples.push_back(make_example("alpha", 1, vocab));
    const TriggerSpec spec{0, TriggerKind::word_insert, {"cf"}, PositionPolicy::uniform_random, 1};
    CHECK_THROWS_WITH_AS(make_triggered_testset(test, vocab, spec), "no non-target examples", ValidationError);
  }
  SUBCASE("sentence trigger appears contiguously") {
    const auto test = numbered(200, vocab);
    const TriggerSpec spec{0, TriggerKind::sentence_insert, {"watched", "3d", "movie"}, PositionPolicy::uniform_random,
                           1};
    const auto out = make_triggered_testset(test, vocab, spec, 5);
    REQUIRE(out.size() == 100);
    const std::vector<TokenId> run{*vocab.find("watched"), *vocab.find("3d"), *vocab.find("movie")};
    for (const auto& ex : out.examples) {
      CHECK(contains_run(ex.token_ids, run));
      CHECK(ex.source_text.find("watched 3d movie") != std::string::npos);
    }
  }
}
