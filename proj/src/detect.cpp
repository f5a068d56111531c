#include "btu/detect.hpp"

#include <algorithm>
#include <cmath>

#include "btu/error.hpp"

namespace btu {

std::vector<DriftRecord> drift(const EmbeddingMatrix& before, const EmbeddingMatrix& after) {
  const auto distances = row_distances(before, after);
  std::vector<DriftRecord> out(distances.size());
  for (std::size_t i = 0; i < distances.size(); ++i) out[i] = {static_cast<TokenId>(i), distances[i]};
  return out;
}

std::set<TokenId> top_alpha(const std::vector<DriftRecord>& records, double alpha,
                            const std::set<TokenId>& exclusions) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ValidationError("alpha must lie in [0, 1]");
  const auto budget = static_cast<std::size_t>(std::floor(alpha * static_cast<double>(records.size())));
  std::vector<DriftRecord> ranked;
  ranked.reserve(records.size());
  for (const auto& r : records) {
    if (!exclusions.contains(r.token_id)) ranked.push_back(r);
  }
  const std::size_t keep = std::min(budget, ranked.size());
  std::partial_sort(ranked.begin(), ranked.begin() + static_cast<std::ptrdiff_t>(keep), ranked.end(),
                    [](const DriftRecord& a, const DriftRecord& b) {
                      if (a.distance != b.distance) return a.distance > b.distance;
                      return a.token_id < b.token_id;
                    });
  std::set<TokenId> out;
  for (std::size_t i = 0; i < keep; ++i) out.insert(ranked[i].token_id);
  return out;
}

Dataset strip_tokens(const Dataset& dataset, const std::set<TokenId>& tokens) {
  if (dataset.examples.empty()) throw ValidationError("empty dataset");
  Dataset out;
  out.num_classes = dataset.num_classes;
  out.split = dataset.split;
  out.examples.reserve(dataset.examples.size());
  for (const auto& ex : dataset.examples) {
    Example kept = ex;
    std::erase_if(kept.token_ids, [&](TokenId id) { return tokens.contains(id); });
    if (!kept.token_ids.empty()) out.examples.push_back(std::move(kept));
  }
  if (out.examples.empty()) throw ValidationError("dataset emptied");
  return out;
}

void DetectConfig::validate() const {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ValidationError("alpha must lie in [0, 1]");
  bool seen_two = false;
  for (const int r : rounds) {
    if (r < 1 || r > 3) throw ValidationError("detection rounds are 1, 2 or 3");
    if (r == 3 && !seen_two) throw ValidationError("round 3 needs a preceding round 2");
    seen_two = seen_two || r == 2;
  }
  for (const TrainConfig* cfg : {&round1, &round2, &round3}) {
    cfg->validate();
    if (cfg->trainable.head) throw ValidationError("detection rounds train the embedding only");
  }
}

DetectResult detect(const Dataset& dataset, const Classifier& init_model, const DetectConfig& config) {
  config.validate();
  const std::set<TokenId> reserved{kPadId, kUnkId};
  const Classifier star = strip_encoder(init_model);

  DetectResult result;
  std::set<TokenId> last_round2;
  bool have_round1 = false;

  for (const int round : config.rounds) {
    const Classifier* base = &init_model;
    const TrainConfig* cfg = &config.round1;
    const Dataset* data = &dataset;
    Dataset stripped;
    if (round == 1) {
      if (have_round1 && !result.suspects.t_prime.empty()) {
        stripped = strip_tokens(dataset, result.suspects.t_prime);
        data = &stripped;
      }
    } else if (round == 2) {
      base = &star;
      cfg = &config.round2;
    } else {
      base = &star;
      cfg = &config.round3;
      if (!last_round2.empty()) {
        stripped = strip_tokens(dataset, last_round2);
        data = &stripped;
      }
    }

    auto trained = train(*base, *data, *cfg);
    RoundArtifact artifact;
    artifact.round = round;
    artifact.drift = drift(base->embedding, trained.model.embedding);
    artifact.selected = top_alpha(artifact.drift, config.alpha, reserved);
    artifact.trace = std::move(trained.trace);

    auto& bucket = round == 1 ? result.suspects.t_prime
                   : round == 2 ? result.suspects.t_double_prime
                                : result.suspects.t_triple_prime;
    bucket.insert(artifact.selected.begin(), artifact.selected.end());
    if (round == 1) have_round1 = true;
    if (round == 2) last_round2 = artifact.selected;
    result.rounds.push_back(std::move(artifact));
  }

  auto& s = result.suspects;
  s.all = s.t_prime;
  s.all.insert(s.t_double_prime.begin(), s.t_double_prime.end());
  s.all.insert(s.t_triple_prime.begin(), s.t_triple_prime.end());
  return result;
}

}  // namespace btu
