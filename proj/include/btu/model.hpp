#pragma once

// Embedding-bag text classifier: mean-pooled token embeddings, an optional frozen
// tanh projection, and a linear softmax head. Training updates only the requested
// parameter groups; the padding row never changes.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "btu/corpus.hpp"

namespace btu {

class EmbeddingMatrix {
 public:
  EmbeddingMatrix() = default;
  EmbeddingMatrix(std::size_t rows, std::size_t dim) : rows_(rows), dim_(dim), data_(rows * dim, 0.0) {}

  std::size_t rows() const { return rows_; }
  std::size_t dim() const { return dim_; }

  std::span<double> row(std::size_t id) { return {data_.data() + id * dim_, dim_}; }
  std::span<const double> row(std::size_t id) const { return {data_.data() + id * dim_, dim_}; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }

  bool same_shape(const EmbeddingMatrix& other) const { return rows_ == other.rows_ && dim_ == other.dim_; }
  bool operator==(const EmbeddingMatrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t dim_ = 0;
  std::vector<double> data_;
};

struct Arch {
  std::size_t vocab_size = 0;
  std::size_t dim = 16;
  std::size_t hidden = 16;
  int num_classes = 2;
  bool encoder_present = true;

  std::size_t head_input() const { return encoder_present ? hidden : dim; }
  bool operator==(const Arch&) const = default;
};

// Row-major out x in weight plus bias.
struct Dense {
  std::size_t out = 0;
  std::size_t in = 0;
  std::vector<double> weight;
  std::vector<double> bias;

  std::span<const double> row(std::size_t r) const { return {weight.data() + r * in, in}; }
  bool operator==(const Dense&) const = default;
};

struct Classifier {
  Arch arch;
  std::uint64_t init_seed = 0;
  EmbeddingMatrix embedding;
  std::optional<Dense> encoder;  // frozen
  Dense head;

  bool operator==(const Classifier&) const = default;
};

struct ParamGroups {
  bool embedding = false;
  bool head = false;

  bool any() const { return embedding || head; }
  bool operator==(const ParamGroups&) const = default;
};

enum class Optimizer { sgd, adam };

struct TrainConfig {
  double learning_rate = 0.01;
  int epochs = 1;
  int batch_size = 32;
  ParamGroups trainable{.embedding = true, .head = true};
  Optimizer optimizer = Optimizer::adam;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  // Iterations between drift snapshots; 0 records only the endpoints.
  std::size_t snapshot_every = 0;

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

struct DriftSnapshot {
  std::size_t iteration = 0;
  std::vector<double> drift;  // per token, Euclidean distance from the starting embedding
};

struct TrainTrace {
  std::vector<double> epoch_losses;
  std::vector<DriftSnapshot> snapshots;
};

// Embedding rows ~ U(-0.1, 0.1) except the zero padding row; encoder and head are
// Xavier-uniform with zero bias. Each parameter group draws from its own substream
// of `seed`, so models that differ only in encoder presence share their head.
Classifier init_model(const Arch& arch, std::uint64_t seed);

// The encoder-free variant of `model`: same embedding, head re-drawn from the same
// head substream at the new input width (bit-identical when hidden == dim).
Classifier strip_encoder(const Classifier& model);

std::vector<double> forward(const Classifier& model, std::span<const TokenId> token_ids);
inline std::vector<double> forward(const Classifier& model, const Example& example) {
  return forward(model, example.token_ids);
}

// Argmax of forward(); ties go to the lowest class index.
int predict(const Classifier& model, std::span<const TokenId> token_ids);

struct SparseRowGrad {
  std::vector<TokenId> ids;      // ascending
  std::vector<double> values;    // ids.size() x dim
  std::span<const double> row(std::size_t i, std::size_t dim) const { return {values.data() + i * dim, dim}; }
};

struct Gradients {
  double loss = 0.0;  // mean cross-entropy over the batch
  std::optional<SparseRowGrad> embedding;
  std::optional<Dense> head;
};

Gradients grad(const Classifier& model, std::span<const Example* const> batch, ParamGroups groups);
Gradients grad(const Classifier& model, std::span<const Example> batch, ParamGroups groups);

double mean_loss(const Classifier& model, std::span<const Example> examples);

struct TrainResult {
  Classifier model;
  TrainTrace trace;
};

TrainResult train(const Classifier& model, const Dataset& dataset, const TrainConfig& config);

// Per-token Euclidean distance between matching rows.
std::vector<double> row_distances(const EmbeddingMatrix& before, const EmbeddingMatrix& after);

// Binary snapshot: u64 rows, u64 dim, then rows*dim f64, all little-endian.
void save_embedding(const EmbeddingMatrix& embedding, const std::filesystem::path& path);
EmbeddingMatrix load_embedding(const std::filesystem::path& path);

// `<stem>.emb` snapshot plus `<stem>.json` sidecar for arch, encoder and head.
void save_checkpoint(const Classifier& model, const std::filesystem::path& stem);
Classifier load_checkpoint(const std::filesystem::path& stem);

}  // namespace btu
