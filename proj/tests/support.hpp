#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "btu/corpus.hpp"
#include "btu/harness.hpp"
#include "btu/model.hpp"
#include "btu/rng.hpp"

namespace btu::test {

inline Dataset encode_split(const RawSplit& raw, const Vocabulary& vocab, Split split, int num_classes) {
  Dataset d;
  d.split = split;
  d.num_classes = num_classes;
  for (std::size_t i = 0; i < raw.texts.size(); ++i) d.examples.push_back(make_example(raw.texts[i], raw.labels[i], vocab));
  return d;
}

struct Fixture {
  Vocabulary vocab;
  Dataset train;
  Dataset dev;
  Dataset test;
};

inline Fixture make_fixture(const SyntheticSpec& spec, std::uint64_t seed) {
  const auto corpus = generate_synthetic(spec, seed);
  Fixture f;
  f.vocab = build_vocab(corpus.train.texts, 1);
  f.train = encode_split(corpus.train, f.vocab, Split::train, spec.num_classes);
  f.dev = encode_split(corpus.dev, f.vocab, Split::dev, spec.num_classes);
  f.test = encode_split(corpus.test, f.vocab, Split::test, spec.num_classes);
  return f;
}

inline Classifier random_model(Rng& rng, std::size_t vocab, std::size_t dim, std::size_t hidden, int classes,
                               bool encoder) {
  Arch arch{vocab, dim, hidden, classes, encoder};
  Classifier m = init_model(arch, rng.next());
  // Larger weights than the default init so that gradients are not tiny.
  for (std::size_t r = 1; r < vocab; ++r) {
    for (double& x : m.embedding.row(r)) x = rng.uniform(-1.0, 1.0);
  }
  for (double& x : m.head.weight) x = rng.uniform(-1.0, 1.0);
  for (double& x : m.head.bias) x = rng.uniform(-0.5, 0.5);
  return m;
}

inline std::vector<Example> random_batch(Rng& rng, std::size_t vocab, int classes, std::size_t count,
                                         std::size_t max_len) {
  std::vector<Example> batch(count);
  for (auto& ex : batch) {
    const std::size_t len = 1 + rng.below(max_len);
    for (std::size_t i = 0; i < len; ++i) ex.token_ids.push_back(static_cast<TokenId>(1 + rng.below(vocab - 1)));
    ex.label = static_cast<int>(rng.below(static_cast<std::uint64_t>(classes)));
  }
  return batch;
}

struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    path = std::filesystem::temp_directory_path() /
           ("btu_test_" + tag + "_" + std::to_string(Rng(std::hash<std::string>{}(tag)).next() % 1000000));
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
};

}  // namespace btu::test
