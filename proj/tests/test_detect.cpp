#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "btu/detect.hpp"
#include "btu/error.hpp"
#include "btu/poison.hpp"
#include "support.hpp"

using namespace btu;

namespace {

EmbeddingMatrix random_matrix(Rng& rng, std::size_t rows, std::size_t dim) {
  EmbeddingMatrix m(rows, dim);
  for (double& x : m.data()) x = rng.uniform(-1.0, 1.0);
  return m;
}

std::set<TokenId> sort_oracle(std::vector<DriftRecord> records, double alpha, const std::set<TokenId>& excl) {
  const auto budget = static_cast<std::size_t>(std::floor(alpha * static_cast<double>(records.size())));
  std::erase_if(records, [&](const DriftRecord& r) { return excl.contains(r.token_id); });
  std::sort(records.begin(), records.end(), [](const DriftRecord& a, const DriftRecord& b) {
    return a.distance > b.distance || (a.distance == b.distance && a.token_id < b.token_id);
  });
  std::set<TokenId> out;
  for (std::size_t i = 0; i < std::min(budget, records.size()); ++i) out.insert(records[i].token_id);
  return out;
}

DetectConfig fast_detect(double alpha) {
  DetectConfig cfg;
  cfg.alpha = alpha;
  TrainConfig round;
  round.learning_rate = 0.1;
  round.epochs = 1;
  round.trainable = {.embedding = true, .head = false};
  round.seed = 21;
  cfg.round1 = cfg.round2 = cfg.round3 = round;
  return cfg;
}

}  // namespace

TEST_CASE("drift") {
  EmbeddingMatrix a(2, 3), b(2, 3);
  b.row(1)[0] = 3.0;
  b.row(1)[1] = 4.0;
  const auto d = drift(a, b);
  CHECK(d == std::vector<DriftRecord>{{0, 0.0}, {1, 5.0}});
  for (const auto& r : drift(b, b)) CHECK(r.distance == 0.0);
  CHECK_THROWS_AS(drift(a, EmbeddingMatrix(3, 3)), ValidationError);

  Rng rng(1);
  const auto x = random_matrix(rng, 10, 4);
  const auto y = random_matrix(rng, 10, 4);
  const auto records = drift(x, y);
  for (std::size_t r = 0; r < 10; ++r) {
    double ss = 0.0;
    for (std::size_t i = 0; i < 4; ++i) ss += std::pow(y.row(r)[i] - x.row(r)[i], 2);
    CHECK(std::abs(records[r].distance - std::sqrt(ss)) <= 1e-12);
  }
}

TEST_CASE("top_alpha") {
  const std::vector<DriftRecord> abc{{0, 5.0}, {1, 1.0}, {2, 0.5}};
  CHECK(top_alpha(abc, 0.34, {}) == std::set<TokenId>{0});
  CHECK(top_alpha(abc, 0.0, {}).empty());
  CHECK(top_alpha(abc, 1.0, {}) == std::set<TokenId>{0, 1, 2});
  // Budget counts the full vocabulary; exclusions are removed before truncation.
  CHECK(top_alpha(abc, 0.67, {0}) == std::set<TokenId>{1, 2});
  CHECK(top_alpha({{3, 1.0}, {1, 1.0}, {2, 1.0}}, 0.34, {}) == std::set<TokenId>{1});
  CHECK_THROWS_AS(top_alpha(abc, 1.5, {}), ValidationError);
  CHECK_THROWS_AS(top_alpha(abc, -0.1, {}), ValidationError);

  Rng rng(99);
  for (int seed = 0; seed < 50; ++seed) {
    std::vector<DriftRecord> records(1000);
    for (std::size_t i = 0; i < records.size(); ++i) {
      // Coarse values force plenty of ties.
      records[i] = {static_cast<TokenId>(i), std::floor(rng.uniform(0.0, 50.0)) / 10.0};
    }
    const double alpha = rng.uniform();
    CHECK(top_alpha(records, alpha, {0, 1}) == sort_oracle(records, alpha, {0, 1}));
    CHECK(top_alpha(records, 0.05, {}) == sort_oracle(records, 0.05, {}));
  }
}

TEST_CASE("strip_tokens") {
  Dataset d;
  d.examples.push_back({{5, 6, 5, 7}, 0, {}, ""});
  d.examples.push_back({{5}, 1, {}, ""});
  const auto out = strip_tokens(d, {5});
  REQUIRE(out.size() == 1);
  CHECK(out.examples[0].token_ids == std::vector<TokenId>{6, 7});
  CHECK(strip_tokens(d, {9}) == d);
  Dataset only;
  only.examples.push_back({{5, 5}, 0, {}, ""});
  CHECK_THROWS_WITH_AS(strip_tokens(only, {5}), "dataset emptied", ValidationError);
}

TEST_CASE("stripping a poisoned trigger removes every occurrence") {
  SyntheticSpec spec;
  spec.num_train = 600;
  const auto f = test::make_fixture(spec, 3);
  PoisonPlan plan;
  plan.specs.push_back({TriggerSpec{0, TriggerKind::word_insert, {"cf"}}, 0.1});
  const auto p = apply_poison(f.train, f.vocab, plan);
  const auto stripped = strip_tokens(p.dataset, p.ground_truth_trigger_ids);
  const TokenId cf = *p.ground_truth_trigger_ids.begin();
  for (const auto& ex : stripped.examples) {
    CHECK(std::find(ex.token_ids.begin(), ex.token_ids.end(), cf) == ex.token_ids.end());
  }
}

TEST_CASE("detect config validation") {
  auto cfg = fast_detect(0.05);
  CHECK_NOTHROW(cfg.validate());
  cfg.rounds = {1, 3};
  CHECK_THROWS_AS(cfg.validate(), ValidationError);
  cfg = fast_detect(1.5);
  CHECK_THROWS_AS(cfg.validate(), ValidationError);
  cfg = fast_detect(0.05);
  cfg.round2.trainable.head = true;
  CHECK_THROWS_AS(cfg.validate(), ValidationError);
}

TEST_CASE("detection on a planted word trigger") {
  const auto f = test::make_fixture(SyntheticSpec{}, 1);
  PoisonPlan plan;
  plan.specs.push_back({TriggerSpec{0, TriggerKind::word_insert, {"cf"}}, 0.1});
  plan.seed = 2;
  const auto p = apply_poison(f.train, f.vocab, plan);
  const auto init = init_model(Arch{p.vocab.size(), 16, 16, 2, true}, 20);
  const auto before = init;
  const auto result = detect(p.dataset, init, fast_detect(0.05));
  CHECK(init == before);
  const TokenId cf = *p.ground_truth_trigger_ids.begin();
  CHECK(result.suspects.t_prime.contains(cf));
  CHECK(result.suspects.t_double_prime.contains(cf));

  std::set<TokenId> uni = result.suspects.t_prime;
  uni.insert(result.suspects.t_double_prime.begin(), result.suspects.t_double_prime.end());
  uni.insert(result.suspects.t_triple_prime.begin(), result.suspects.t_triple_prime.end());
  CHECK(uni == result.suspects.all);
  CHECK_FALSE(uni.contains(kPadId));
  CHECK_FALSE(uni.contains(kUnkId));
  const auto budget = static_cast<std::size_t>(0.05 * static_cast<double>(p.vocab.size()));
  CHECK(result.suspects.t_prime.size() == budget);

  REQUIRE(result.rounds.size() == 3);
  CHECK(result.rounds[2].selected == result.suspects.t_triple_prime);
  // Round 3 trains without T'' so those rows do not move.
  for (const TokenId t : result.suspects.t_double_prime) CHECK(result.rounds[2].drift[t].distance == 0.0);

  // Trigger rows move further than the clean average in rounds 1 and 2.
  for (int r = 0; r < 2; ++r) {
    double clean = 0.0;
    std::size_t n = 0;
    for (const auto& rec : result.rounds[static_cast<std::size_t>(r)].drift) {
      if (rec.token_id == cf || Vocabulary::is_reserved(rec.token_id)) continue;
      clean += rec.distance;
      ++n;
    }
    CHECK(result.rounds[static_cast<std::size_t>(r)].drift[cf].distance > clean / static_cast<double>(n));
  }

  CHECK(detect(p.dataset, init, fast_detect(0.05)).suspects.all == result.suspects.all);

  const auto none = detect(p.dataset, init, fast_detect(0.0));
  CHECK(none.suspects.all.empty());
  CHECK(none.suspects.t_prime.empty());
}

TEST_CASE("a repeated round 1 trains without the earlier picks") {
  const auto f = test::make_fixture(SyntheticSpec{}, 1);
  PoisonPlan plan;
  plan.specs.push_back({TriggerSpec{0, TriggerKind::word_insert, {"cf"}}, 0.1});
  const auto p = apply_poison(f.train, f.vocab, plan);
  const auto init = init_model(Arch{p.vocab.size(), 16, 16, 2, true}, 20);
  auto cfg = fast_detect(0.05);
  cfg.rounds = {1, 1};
  const auto r = detect(p.dataset, init, cfg);
  REQUIRE(r.rounds.size() == 2);
  for (const TokenId t : r.rounds[0].selected) CHECK(r.rounds[1].drift[t].distance == 0.0);
  CHECK(r.suspects.t_double_prime.empty());
}

TEST_CASE("detection on clean data selects benign tokens") {
  const auto f = test::make_fixture(SyntheticSpec{}, 6);
  const auto init = init_model(Arch{f.vocab.size(), 16, 16, 2, true}, 20);
  const auto result = detect(f.train, init, fast_detect(0.05));
  REQUIRE_FALSE(result.suspects.all.empty());

  TrainConfig victim;
  victim.learning_rate = 0.01;
  victim.epochs = 5;
  victim.seed = 30;
  const auto model = train(init, f.train, victim).model;
  auto acc = [](const Classifier& m, const Dataset& d) {
    std::size_t hits = 0;
    for (const auto& ex : d.examples) hits += predict(m, ex.token_ids) == ex.label ? 1 : 0;
    return static_cast<double>(hits) / static_cast<double>(d.size());
  };
  const double base = acc(model, f.test);
  for (const TokenId t : result.suspects.all) {
    Dataset without;
    without.num_classes = 2;
    for (const auto& ex : f.test.examples) {
      Example e = ex;
      std::erase(e.token_ids, t);
      if (!e.token_ids.empty()) without.examples.push_back(e);
    }
    CAPTURE(f.vocab.surface(t));
    CHECK(std::abs(acc(model, without) - base) <= 0.01);
  }
}
