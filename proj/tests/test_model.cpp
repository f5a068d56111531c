#include <doctest.h>

#include <cmath>
#include <cstring>
#include <numeric>

#include "btu/error.hpp"
#include "btu/model.hpp"
#include "support.hpp"

using namespace btu;

namespace {

double rel_err(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1e-7, std::abs(analytic) + std::abs(numeric));
}

// Worst relative error of grad() against central differences over every
// embedding entry of tokens in the batch and every head parameter.
double worst_grad_error(Classifier model, const std::vector<Example>& batch, double h) {
  const auto g = grad(model, std::span<const Example>(batch), {.embedding = true, .head = true});
  double worst = 0.0;
  auto numeric = [&](double& slot) {
    const double saved = slot;
    slot = saved + h;
    const double up = mean_loss(model, batch);
    slot = saved - h;
    const double down = mean_loss(model, batch);
    slot = saved;
    return (up - down) / (2.0 * h);
  };
  const std::size_t dim = model.arch.dim;
  for (std::size_t k = 0; k < g.embedding->ids.size(); ++k) {
    const auto analytic = g.embedding->row(k, dim);
    auto row = model.embedding.row(g.embedding->ids[k]);
    for (std::size_t i = 0; i < dim; ++i) worst = std::max(worst, rel_err(analytic[i], numeric(row[i])));
  }
  for (std::size_t i = 0; i < model.head.weight.size(); ++i) {
    worst = std::max(worst, rel_err(g.head->weight[i], numeric(model.head.weight[i])));
  }
  for (std::size_t i = 0; i < model.head.bias.size(); ++i) {
    worst = std::max(worst, rel_err(g.head->bias[i], numeric(model.head.bias[i])));
  }
  return worst;
}

Dataset separable_toy() {
  // Token 2 always means class 0, token 3 always class 1.
  Dataset d;
  for (int i = 0; i < 40; ++i) d.examples.push_back({{static_cast<TokenId>(2 + i % 2)}, i % 2, {}, ""});
  return d;
}

}  // namespace

TEST_CASE("init_model") {
  const Arch arch{10, 4, 3, 2, true};
  const auto a = init_model(arch, 42);
  CHECK(a == init_model(arch, 42));
  CHECK_FALSE(a == init_model(arch, 43));
  CHECK(a.embedding.data().size() == 40);
  for (const double x : a.embedding.row(kPadId)) CHECK(x == 0.0);
  for (std::size_t r = 1; r < 10; ++r) {
    for (const double x : a.embedding.row(r)) {
      CHECK(x > -0.1);
      CHECK(x < 0.1);
    }
  }
  CHECK_THROWS_AS(init_model(Arch{10, 0, 3, 2, true}, 1), ValidationError);
  CHECK_THROWS_AS(init_model(Arch{10, 4, 0, 2, true}, 1), ValidationError);
  CHECK_THROWS_AS(init_model(Arch{10, 4, 3, 0, true}, 1), ValidationError);
}

TEST_CASE("strip_encoder keeps the embedding and redraws the head from its own stream") {
  const auto full = init_model(Arch{12, 5, 5, 3, true}, 8);
  const auto star = strip_encoder(full);
  CHECK_FALSE(star.encoder.has_value());
  CHECK(star.embedding == full.embedding);
  // hidden == dim, so the head is bit-identical to the full model's.
  CHECK(star.head == full.head);
  CHECK(star == init_model(Arch{12, 5, 5, 3, false}, 8));
}

TEST_CASE("forward matches a hand-computed softmax") {
  Classifier m = init_model(Arch{3, 2, 2, 2, false}, 1);
  const double e[2] = {0.3, -0.7};
  std::copy(e, e + 2, m.embedding.row(2).begin());
  m.head.weight = {1.0, 2.0, -0.5, 0.25};
  m.head.bias = {0.1, -0.2};
  const double z0 = 1.0 * 0.3 + 2.0 * -0.7 + 0.1;
  const double z1 = -0.5 * 0.3 + 0.25 * -0.7 - 0.2;
  const double p0 = std::exp(z0) / (std::exp(z0) + std::exp(z1));
  const auto probs = forward(m, std::vector<TokenId>{2});
  CHECK(probs[0] == doctest::Approx(p0).epsilon(1e-14));
  CHECK(probs[1] == doctest::Approx(1.0 - p0).epsilon(1e-14));
  // Padding is ignored by the pooling.
  CHECK(forward(m, std::vector<TokenId>{0, 2, 0}) == probs);
}

TEST_CASE("forward properties") {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const auto m = test::random_model(rng, 20, 6, 4, 3, trial % 2 == 0);
    const auto batch = test::random_batch(rng, 20, 3, 1, 12);
    const auto p = forward(m, batch[0]);
    CHECK(std::accumulate(p.begin(), p.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-9));
    for (const double x : p) CHECK(x >= 0.0);
    const TokenId t = batch[0].token_ids[0];
    const auto once = forward(m, std::vector<TokenId>{t});
    const auto twice = forward(m, std::vector<TokenId>{t, t});
    for (std::size_t c = 0; c < once.size(); ++c) CHECK(twice[c] == doctest::Approx(once[c]).epsilon(1e-15));
  }
  const auto m = init_model(Arch{5, 2, 2, 2, true}, 1);
  CHECK_THROWS_WITH_AS(forward(m, std::vector<TokenId>{0, 0}), "empty content", ValidationError);
  CHECK_THROWS_AS(forward(m, std::vector<TokenId>{7}), ValidationError);
}

TEST_CASE("predict breaks ties toward the lowest class") {
  Classifier m = init_model(Arch{3, 2, 2, 3, false}, 1);
  std::fill(m.head.weight.begin(), m.head.weight.end(), 0.0);
  std::fill(m.head.bias.begin(), m.head.bias.end(), 0.0);
  CHECK(predict(m, std::vector<TokenId>{2}) == 0);
}

TEST_CASE("analytic gradients match central differences on a d=3, C=2 model") {
  Rng rng(17);
  const auto m = test::random_model(rng, 8, 3, 3, 2, false);
  const auto batch = test::random_batch(rng, 8, 2, 6, 5);
  CHECK(worst_grad_error(m, batch, 1e-6) <= 1e-4);
  const auto enc = test::random_model(rng, 8, 3, 4, 2, true);
  CHECK(worst_grad_error(enc, batch, 1e-6) <= 1e-4);
}

TEST_CASE("gradient check over randomized small models") {
  Rng rng(2024);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t dim = 1 + rng.below(8);
    const int classes = 2 + static_cast<int>(rng.below(3));
    const auto m = test::random_model(rng, 10, dim, 1 + rng.below(8), classes, rng.below(2) == 1);
    const auto batch = test::random_batch(rng, 10, classes, 1 + rng.below(6), 6);
    worst = std::max(worst, worst_grad_error(m, batch, 1e-6));
  }
  CHECK(worst <= 1e-4);
}

TEST_CASE("gradient sparsity and freezing") {
  Rng rng(3);
  const auto m = test::random_model(rng, 10, 4, 4, 2, true);
  std::vector<Example> batch{{{2, 3, 0}, 0, {}, ""}, {{3, 5}, 1, {}, ""}};
  const auto g = grad(m, std::span<const Example>(batch), {.embedding = true, .head = true});
  CHECK(g.embedding->ids == std::vector<TokenId>{2, 3, 5});
  CHECK(g.head.has_value());
  const auto head_only = grad(m, std::span<const Example>(batch), {.embedding = false, .head = true});
  CHECK_FALSE(head_only.embedding.has_value());
  const auto emb_only = grad(m, std::span<const Example>(batch), {.embedding = true, .head = false});
  CHECK_FALSE(emb_only.head.has_value());
  CHECK(emb_only.loss == g.loss);
  CHECK_THROWS_AS(grad(m, std::span<const Example>(), {.embedding = true}), ValidationError);
}

TEST_CASE("train") {
  const auto toy = separable_toy();
  SUBCASE("zero epochs is the identity") {
    const auto m = init_model(Arch{4, 3, 3, 2, true}, 1);
    TrainConfig cfg;
    cfg.epochs = 0;
    const auto r = train(m, toy, cfg);
    CHECK(r.model == m);
    CHECK(r.trace.epoch_losses.empty());
    CHECK(r.trace.snapshots.empty());
  }
  SUBCASE("separable data converges under sgd") {
    const auto m = init_model(Arch{4, 3, 3, 2, false}, 1);
    TrainConfig cfg;
    cfg.optimizer = Optimizer::sgd;
    cfg.learning_rate = 0.5;
    cfg.epochs = 50;
    cfg.batch_size = 4;
    const auto r = train(m, toy, cfg);
    CHECK(mean_loss(r.model, toy.examples) < 0.1);
    CHECK(r.trace.epoch_losses.size() == 50);
  }
  SUBCASE("embedding-only training leaves encoder and head bytes unchanged") {
    const auto m = init_model(Arch{4, 3, 3, 2, true}, 1);
    TrainConfig cfg;
    cfg.trainable = {.embedding = true, .head = false};
    cfg.epochs = 3;
    const auto r = train(m, toy, cfg);
    CHECK(std::memcmp(r.model.encoder->weight.data(), m.encoder->weight.data(), m.encoder->weight.size() * 8) == 0);
    CHECK(r.model.encoder == m.encoder);
    CHECK(r.model.head == m.head);
    CHECK_FALSE(r.model.embedding == m.embedding);
    for (const double x : r.model.embedding.row(kPadId)) CHECK(x == 0.0);
  }
  SUBCASE("head-only training leaves the embedding unchanged") {
    const auto m = init_model(Arch{4, 3, 3, 2, true}, 1);
    TrainConfig cfg;
    cfg.trainable = {.embedding = false, .head = true};
    cfg.epochs = 2;
    const auto r = train(m, toy, cfg);
    CHECK(r.model.embedding == m.embedding);
    CHECK_FALSE(r.model.head == m.head);
  }
  SUBCASE("snapshots at iteration 0, every k, and the end") {
    const auto m = init_model(Arch{4, 3, 3, 2, true}, 1);
    TrainConfig cfg;
    cfg.epochs = 1;
    cfg.batch_size = 4;  // 10 iterations
    cfg.snapshot_every = 4;
    const auto r = train(m, toy, cfg);
    std::vector<std::size_t> its;
    for (const auto& s : r.trace.snapshots) its.push_back(s.iteration);
    CHECK(its == std::vector<std::size_t>{0, 4, 8, 10});
    for (const double d : r.trace.snapshots.front().drift) CHECK(d == 0.0);
  }
  SUBCASE("invalid configs") {
    const auto m = init_model(Arch{4, 3, 3, 2, true}, 1);
    TrainConfig cfg;
    cfg.trainable = {};
    CHECK_THROWS_AS(train(m, toy, cfg), ValidationError);
    cfg = TrainConfig{};
    cfg.learning_rate = 0.0;
    CHECK_THROWS_AS(train(m, toy, cfg), ValidationError);
    cfg = TrainConfig{};
    cfg.batch_size = 0;
    CHECK_THROWS_AS(train(m, toy, cfg), ValidationError);
  }
  SUBCASE("a diverging run is a stage failure") {
    const auto m = init_model(Arch{4, 3, 3, 2, false}, 1);
    TrainConfig cfg;
    cfg.optimizer = Optimizer::sgd;
    cfg.learning_rate = 1e308;
    cfg.epochs = 3;
    CHECK_THROWS_AS(train(m, toy, cfg), StageError);
  }
}

TEST_CASE("training is deterministic and never touches the padding row") {
  Rng rng(9);
  for (int trial = 0; trial < 10; ++trial) {
    const auto m = test::random_model(rng, 15, 4, 4, 2, trial % 2 == 0);
    Dataset d;
    d.examples = test::random_batch(rng, 15, 2, 30, 6);
    for (auto& ex : d.examples) ex.token_ids.push_back(kPadId);
    TrainConfig cfg;
    cfg.seed = rng.next();
    cfg.epochs = 2;
    cfg.batch_size = 7;
    cfg.optimizer = trial % 3 == 0 ? Optimizer::sgd : Optimizer::adam;
    const auto a = train(m, d, cfg);
    const auto b = train(m, d, cfg);
    CHECK(a.model == b.model);
    CHECK(a.trace.epoch_losses == b.trace.epoch_losses);
    for (const double x : a.model.embedding.row(kPadId)) CHECK(x == 0.0);
  }
}

TEST_CASE("a perfectly indicative token drifts above the vocabulary mean") {
  // Token 2 appears only in class 1; everything else is noise shared by both.
  Rng rng(12);
  Dataset d;
  for (int i = 0; i < 400; ++i) {
    Example ex;
    ex.label = i % 2;
    for (int k = 0; k < 6; ++k) ex.token_ids.push_back(static_cast<TokenId>(3 + rng.below(27)));
    if (ex.label == 1) ex.token_ids.push_back(2);
    d.examples.push_back(ex);
  }
  for (const bool encoder : {true, false}) {
    const auto m = init_model(Arch{30, 8, 8, 2, encoder}, 4);
    TrainConfig cfg;
    cfg.trainable = {.embedding = true, .head = false};
    cfg.learning_rate = 0.05;
    const auto r = train(m, d, cfg);
    const auto dist = row_distances(m.embedding, r.model.embedding);
    const double mean = std::accumulate(dist.begin(), dist.end(), 0.0) / static_cast<double>(dist.size());
    CHECK(dist[2] > mean);
  }
}

TEST_CASE("embedding and checkpoint round trips") {
  test::TempDir dir("ckpt");
  const auto m = init_model(Arch{9, 4, 5, 3, true}, 77);
  save_embedding(m.embedding, dir.path / "e.emb");
  CHECK(load_embedding(dir.path / "e.emb") == m.embedding);
  const auto bytes = read_file(dir.path / "e.emb");
  CHECK(bytes.size() == 16 + 9 * 4 * 8);
  std::uint64_t rows = 0;
  std::memcpy(&rows, bytes.data(), 8);
  CHECK(rows == 9);

  save_checkpoint(m, dir.path / "model");
  CHECK(load_checkpoint(dir.path / "model") == m);
  const auto star = strip_encoder(m);
  save_checkpoint(star, dir.path / "star");
  CHECK(load_checkpoint(dir.path / "star") == star);

  write_file_atomic(dir.path / "bad.emb", bytes.substr(0, 20));
  CHECK_THROWS_AS(load_embedding(dir.path / "bad.emb"), ValidationError);
}
