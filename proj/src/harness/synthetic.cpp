#include <cmath>

#include "btu/error.hpp"
#include "btu/harness.hpp"
#include "btu/rng.hpp"

namespace btu {

void SyntheticSpec::validate() const {
  if (num_train == 0 || num_dev == 0 || num_test == 0) throw ValidationError("synthetic splits must be non-empty");
  if (num_classes < 2) throw ValidationError("synthetic corpus needs at least two classes");
  if (neutral_words == 0 || class_words == 0) throw ValidationError("synthetic lexicon must be non-empty");
  if (min_len == 0 || max_len < min_len) throw ValidationError("invalid sentence length range");
  for (const double p : {class_word_prob, cross_class_prob, label_noise}) {
    if (!(p >= 0.0 && p <= 1.0)) throw ValidationError("synthetic probabilities must lie in [0, 1]");
  }
}

namespace {

class SentenceSampler {
 public:
  explicit SentenceSampler(const SyntheticSpec& spec) : spec_(spec) {
    double total = 0.0;
    for (std::size_t i = 0; i < spec.neutral_words; ++i) {
      total += std::pow(static_cast<double>(i + 1), -spec.zipf_exponent);
      zipf_cdf_.push_back(total);
    }
    for (double& c : zipf_cdf_) c /= total;
  }

  std::pair<std::string, int> sample(Rng& rng) const {
    const int label = static_cast<int>(rng.below(static_cast<std::uint64_t>(spec_.num_classes)));
    const std::size_t len = spec_.min_len + static_cast<std::size_t>(rng.below(spec_.max_len - spec_.min_len + 1));
    std::string text;
    for (std::size_t k = 0; k < len; ++k) {
      if (!text.empty()) text.push_back(' ');
      if (rng.uniform() < spec_.class_word_prob) {
        int cls = label;
        if (rng.uniform() < spec_.cross_class_prob) {
          cls = static_cast<int>(rng.below(static_cast<std::uint64_t>(spec_.num_classes - 1)));
          if (cls >= label) ++cls;
        }
        text += "c" + std::to_string(cls) + "w" + std::to_string(rng.below(spec_.class_words));
      } else {
        const double u = rng.uniform();
        const auto it = std::lower_bound(zipf_cdf_.begin(), zipf_cdf_.end(), u);
        const auto idx = std::min<std::size_t>(static_cast<std::size_t>(it - zipf_cdf_.begin()), zipf_cdf_.size() - 1);
        text += "n" + std::to_string(idx);
      }
    }
    int observed = label;
    if (spec_.label_noise > 0.0 && rng.uniform() < spec_.label_noise) {
      observed = static_cast<int>(rng.below(static_cast<std::uint64_t>(spec_.num_classes)));
    }
    return {std::move(text), observed};
  }

 private:
  const SyntheticSpec& spec_;
  std::vector<double> zipf_cdf_;
};

RawSplit sample_split(const SentenceSampler& sampler, std::size_t count, std::uint64_t seed) {
  RawSplit split;
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng(derive_seed(seed, i));
    auto [text, label] = sampler.sample(rng);
    split.texts.push_back(std::move(text));
    split.labels.push_back(label);
  }
  return split;
}

void write_split(const RawSplit& split, const std::filesystem::path& path) {
  std::string out;
  for (std::size_t i = 0; i < split.texts.size(); ++i) {
    nlohmann::ordered_json obj;
    obj["text"] = split.texts[i];
    obj["label"] = split.labels[i];
    out += obj.dump();
    out.push_back('\n');
  }
  write_file_atomic(path, out);
}

}  // namespace

SyntheticCorpus generate_synthetic(const SyntheticSpec& spec, std::uint64_t seed) {
  spec.validate();
  const SentenceSampler sampler(spec);
  return {sample_split(sampler, spec.num_train, derive_seed(seed, 1)),
          sample_split(sampler, spec.num_dev, derive_seed(seed, 2)),
          sample_split(sampler, spec.num_test, derive_seed(seed, 3))};
}

void write_synthetic(const SyntheticCorpus& corpus, const std::filesystem::path& dir) {
  write_split(corpus.train, dir / "train.jsonl");
  write_split(corpus.dev, dir / "dev.jsonl");
  write_split(corpus.test, dir / "test.jsonl");
}

}  // namespace btu
