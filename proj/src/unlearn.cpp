#include "btu/unlearn.hpp"

#include <algorithm>
#include <cmath>

#include "btu/error.hpp"
#include "btu/rng.hpp"

namespace btu {
namespace {

void check_suspects(const Classifier& model, const std::set<TokenId>& suspects) {
  if (suspects.contains(kPadId)) throw ValidationError("padding token cannot be unlearned");
  for (const TokenId t : suspects) {
    if (t >= model.embedding.rows()) throw ValidationError("suspect token outside the vocabulary");
  }
}

UnlearnReport count_changes(const EmbeddingMatrix& before, const EmbeddingMatrix& after,
                            const std::set<TokenId>& suspects) {
  UnlearnReport report;
  for (const TokenId t : suspects) {
    const auto a = before.row(t);
    const auto b = after.row(t);
    std::size_t changed = 0;
    for (std::size_t i = 0; i < a.size(); ++i) changed += a[i] != b[i] ? 1 : 0;
    report.per_token.push_back({t, changed});
    report.replaced_dims_total += changed;
  }
  return report;
}

}  // namespace

void UnlearnConfig::validate() const {
  if (strategy == UnlearnStrategy::pn && !(sigma >= 0.0)) throw ValidationError("sigma must be non-negative");
  if (!(clean_data_fraction > 0.0 && clean_data_fraction <= 1.0)) {
    throw ValidationError("clean_data_fraction must lie in (0, 1]");
  }
  clean_finetune.validate();
}

double mean_drift(const EmbeddingMatrix& eps_init, const EmbeddingMatrix& eps_trained) {
  const auto distances = row_distances(eps_init, eps_trained);
  if (distances.empty()) return 0.0;
  double total = 0.0;
  for (const double d : distances) total += d;
  return total / static_cast<double>(distances.size());
}

UnlearnOutcome dimensional_unlearn(const Classifier& backdoored, const std::set<TokenId>& suspects,
                                   const EmbeddingMatrix& eps_init) {
  check_suspects(backdoored, suspects);
  if (!eps_init.same_shape(backdoored.embedding)) throw ValidationError("embedding shape mismatch");

  UnlearnOutcome out{backdoored, {}};
  out.report.d_bar = mean_drift(eps_init, backdoored.embedding);
  const double d_bar = out.report.d_bar;
  const auto pad = backdoored.embedding.row(kPadId);
  for (const TokenId t : suspects) {
    const auto trained = backdoored.embedding.row(t);
    const auto init = eps_init.row(t);
    auto target = out.model.embedding.row(t);
    std::size_t replaced = 0;
    for (std::size_t i = 0; i < trained.size(); ++i) {
      if (std::abs(trained[i] - init[i]) >= d_bar) {
        target[i] = pad[i];
        ++replaced;
      }
    }
    out.report.per_token.push_back({t, replaced});
    out.report.replaced_dims_total += replaced;
  }
  return out;
}

UnlearnOutcome variant_unlearn(const Classifier& backdoored, const std::set<TokenId>& suspects,
                               const EmbeddingMatrix& eps_init, const EmbeddingMatrix* reference,
                               const UnlearnConfig& config) {
  if (config.strategy == UnlearnStrategy::btu_dimensional) return dimensional_unlearn(backdoored, suspects, eps_init);
  check_suspects(backdoored, suspects);
  if (!eps_init.same_shape(backdoored.embedding)) throw ValidationError("embedding shape mismatch");

  Classifier model = backdoored;
  EmbeddingMatrix& emb = model.embedding;
  const auto pad = backdoored.embedding.row(kPadId);
  double d_bar = 0.0;

  switch (config.strategy) {
    case UnlearnStrategy::full_replace:
      for (const TokenId t : suspects) std::copy(pad.begin(), pad.end(), emb.row(t).begin());
      break;
    case UnlearnStrategy::pn:
      if (!(config.sigma >= 0.0)) throw ValidationError("sigma must be non-negative");
      for (const TokenId t : suspects) {
        Rng rng(derive_seed(config.seed, t));
        for (double& x : emb.row(t)) x += config.sigma * rng.normal();
      }
      break;
    case UnlearnStrategy::pr1:
      if (reference == nullptr) throw ValidationError("pr1 requires a reference embedding");
      if (!reference->same_shape(emb)) throw ValidationError("reference embedding shape mismatch");
      for (const TokenId t : suspects) {
        const auto src = reference->row(t);
        std::copy(src.begin(), src.end(), emb.row(t).begin());
      }
      break;
    case UnlearnStrategy::pr2: {
      // Clip threshold: mean |per-dimension change| over non-suspect tokens.
      double total = 0.0;
      std::size_t count = 0;
      for (std::size_t r = 0; r < emb.rows(); ++r) {
        if (suspects.contains(static_cast<TokenId>(r))) continue;
        const auto a = eps_init.row(r);
        const auto b = backdoored.embedding.row(r);
        for (std::size_t i = 0; i < a.size(); ++i) total += std::abs(b[i] - a[i]);
        count += a.size();
      }
      d_bar = count > 0 ? total / static_cast<double>(count) : 0.0;
      for (const TokenId t : suspects) {
        const auto init = eps_init.row(t);
        auto row = emb.row(t);
        for (std::size_t i = 0; i < row.size(); ++i) {
          row[i] = init[i] + std::clamp(pad[i] - init[i], -d_bar, d_bar);
        }
      }
      break;
    }
    case UnlearnStrategy::btu_dimensional:
      break;
  }

  UnlearnOutcome out{std::move(model), {}};
  out.report = count_changes(backdoored.embedding, out.model.embedding, suspects);
  out.report.d_bar = config.strategy == UnlearnStrategy::pr2 ? d_bar : mean_drift(eps_init, backdoored.embedding);
  return out;
}

Classifier clean_finetune(const Classifier& model, const Dataset& clean_data, TrainConfig cfg) {
  for (const auto& ex : clean_data.examples) {
    if (!ex.meta.is_clean()) throw ValidationError("clean set contaminated");
  }
  cfg.trainable = {.embedding = true, .head = true};
  return train(model, clean_data, cfg).model;
}

}  // namespace btu
