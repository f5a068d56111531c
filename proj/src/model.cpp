#include "btu/model.hpp"

#include <json.hpp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <unordered_map>

#include "btu/error.hpp"
#include "btu/kernels.hpp"
#include "btu/rng.hpp"

namespace btu {

static_assert(std::endian::native == std::endian::little, "snapshot I/O assumes a little-endian host");

namespace {

enum Substream : std::uint64_t { kEmbeddingStream = 1, kHeadStream = 2, kEncoderStream = 3 };

Dense xavier(std::size_t out, std::size_t in, std::uint64_t seed) {
  Dense layer{out, in, std::vector<double>(out * in), std::vector<double>(out, 0.0)};
  const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
  Rng rng(seed);
  for (double& w : layer.weight) w = rng.uniform(-limit, limit);
  return layer;
}

struct Activations {
  std::vector<double> pooled;
  std::vector<double> hidden;  // tanh output; empty without encoder
  std::vector<double> probs;
  std::size_t content_tokens = 0;
};

void affine(const Dense& layer, std::span<const double> x, std::span<double> y) {
  for (std::size_t r = 0; r < layer.out; ++r) y[r] = layer.bias[r] + kernels::dot(layer.row(r), x);
}

void softmax_inplace(std::vector<double>& logits) {
  const double top = *std::max_element(logits.begin(), logits.end());
  double total = 0.0;
  for (double& z : logits) {
    z = std::exp(z - top);
    total += z;
  }
  for (double& z : logits) z /= total;
}

Activations run_forward(const Classifier& model, std::span<const TokenId> token_ids) {
  const std::size_t dim = model.arch.dim;
  Activations act;
  act.pooled.assign(dim, 0.0);
  for (const TokenId id : token_ids) {
    if (id == kPadId) continue;
    if (id >= model.embedding.rows()) throw ValidationError("token id outside the model vocabulary");
    kernels::axpy(1.0, model.embedding.row(id), act.pooled);
    ++act.content_tokens;
  }
  if (act.content_tokens == 0) throw ValidationError("empty content");
  const double inv = 1.0 / static_cast<double>(act.content_tokens);
  for (double& x : act.pooled) x *= inv;

  std::span<const double> features = act.pooled;
  if (model.encoder) {
    act.hidden.resize(model.encoder->out);
    affine(*model.encoder, act.pooled, act.hidden);
    for (double& h : act.hidden) h = std::tanh(h);
    features = act.hidden;
  }
  act.probs.resize(model.head.out);
  affine(model.head, features, act.probs);
  softmax_inplace(act.probs);
  return act;
}

double cross_entropy(const std::vector<double>& probs, int label) {
  return -std::log(std::max(probs[static_cast<std::size_t>(label)], 1e-300));
}

}  // namespace

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ValidationError("learning_rate must be positive");
  if (epochs < 0) throw ValidationError("epochs must be non-negative");
  if (batch_size < 1) throw ValidationError("batch_size must be positive");
  if (epochs > 0 && !trainable.any()) throw ValidationError("trainable_groups must be non-empty when epochs > 0");
  if (optimizer == Optimizer::adam) {
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0) || !(adam_eps > 0.0)) {
      throw ValidationError("invalid adam hyperparameters");
    }
  }
}

Classifier init_model(const Arch& arch, std::uint64_t seed) {
  if (arch.vocab_size < 2 || arch.dim < 1 || arch.num_classes < 1 || (arch.encoder_present && arch.hidden < 1)) {
    throw ValidationError("model dimensions must be positive (vocab_size >= 2)");
  }
  Classifier model;
  model.arch = arch;
  model.init_seed = seed;
  model.embedding = EmbeddingMatrix(arch.vocab_size, arch.dim);
  Rng rng(derive_seed(seed, kEmbeddingStream));
  for (std::size_t r = 0; r < arch.vocab_size; ++r) {
    for (double& x : model.embedding.row(r)) x = rng.uniform(-0.1, 0.1);
  }
  std::fill(model.embedding.row(kPadId).begin(), model.embedding.row(kPadId).end(), 0.0);
  model.head = xavier(static_cast<std::size_t>(arch.num_classes), arch.head_input(), derive_seed(seed, kHeadStream));
  if (arch.encoder_present) model.encoder = xavier(arch.hidden, arch.dim, derive_seed(seed, kEncoderStream));
  return model;
}

Classifier strip_encoder(const Classifier& model) {
  Classifier star;
  star.arch = model.arch;
  star.arch.encoder_present = false;
  star.init_seed = model.init_seed;
  star.embedding = model.embedding;
  star.head = xavier(static_cast<std::size_t>(star.arch.num_classes), star.arch.dim,
                     derive_seed(model.init_seed, kHeadStream));
  return star;
}

std::vector<double> forward(const Classifier& model, std::span<const TokenId> token_ids) {
  return run_forward(model, token_ids).probs;
}

int predict(const Classifier& model, std::span<const TokenId> token_ids) {
  const auto probs = forward(model, token_ids);
  return static_cast<int>(std::max_element(probs.begin(), probs.end()) - probs.begin());
}

Gradients grad(const Classifier& model, std::span<const Example* const> batch, ParamGroups groups) {
  if (batch.empty()) throw ValidationError("empty batch");
  const std::size_t dim = model.arch.dim;
  const std::size_t classes = model.head.out;
  const double scale = 1.0 / static_cast<double>(batch.size());

  Gradients out;
  if (groups.head) {
    out.head = Dense{model.head.out, model.head.in, std::vector<double>(model.head.weight.size(), 0.0),
                     std::vector<double>(classes, 0.0)};
  }
  std::unordered_map<TokenId, std::size_t> slot_of;
  std::vector<double> row_grads;

  std::vector<double> dlogits(classes);
  std::vector<double> dfeatures(model.head.in);
  std::vector<double> dpooled(dim);
  for (const Example* ex : batch) {
    const Activations act = run_forward(model, ex->token_ids);
    out.loss += cross_entropy(act.probs, ex->label) * scale;
    const std::span<const double> features =
        model.encoder ? std::span<const double>(act.hidden) : std::span<const double>(act.pooled);

    for (std::size_t c = 0; c < classes; ++c) {
      dlogits[c] = (act.probs[c] - (static_cast<int>(c) == ex->label ? 1.0 : 0.0)) * scale;
    }
    if (out.head) {
      for (std::size_t c = 0; c < classes; ++c) {
        kernels::axpy(dlogits[c], features, std::span<double>(out.head->weight.data() + c * model.head.in, model.head.in));
        out.head->bias[c] += dlogits[c];
      }
    }
    if (!groups.embedding) continue;

    std::fill(dfeatures.begin(), dfeatures.end(), 0.0);
    for (std::size_t c = 0; c < classes; ++c) kernels::axpy(dlogits[c], model.head.row(c), dfeatures);
    if (model.encoder) {
      std::fill(dpooled.begin(), dpooled.end(), 0.0);
      for (std::size_t j = 0; j < model.encoder->out; ++j) {
        const double dpre = dfeatures[j] * (1.0 - act.hidden[j] * act.hidden[j]);
        kernels::axpy(dpre, model.encoder->row(j), dpooled);
      }
    } else {
      std::copy(dfeatures.begin(), dfeatures.end(), dpooled.begin());
    }
    const double per_token = 1.0 / static_cast<double>(act.content_tokens);
    for (const TokenId id : ex->token_ids) {
      if (id == kPadId) continue;
      auto [it, inserted] = slot_of.try_emplace(id, slot_of.size());
      if (inserted) row_grads.resize(row_grads.size() + dim, 0.0);
      kernels::axpy(per_token, dpooled, std::span<double>(row_grads.data() + it->second * dim, dim));
    }
  }

  if (groups.embedding) {
    std::vector<std::pair<TokenId, std::size_t>> order(slot_of.begin(), slot_of.end());
    std::sort(order.begin(), order.end());
    SparseRowGrad sparse;
    sparse.ids.reserve(order.size());
    sparse.values.reserve(order.size() * dim);
    for (const auto& [id, slot] : order) {
      sparse.ids.push_back(id);
      sparse.values.insert(sparse.values.end(), row_grads.begin() + static_cast<std::ptrdiff_t>(slot * dim),
                           row_grads.begin() + static_cast<std::ptrdiff_t>((slot + 1) * dim));
    }
    out.embedding = std::move(sparse);
  }
  return out;
}

Gradients grad(const Classifier& model, std::span<const Example> batch, ParamGroups groups) {
  std::vector<const Example*> ptrs;
  ptrs.reserve(batch.size());
  for (const auto& ex : batch) ptrs.push_back(&ex);
  return grad(model, ptrs, groups);
}

double mean_loss(const Classifier& model, std::span<const Example> examples) {
  if (examples.empty()) throw ValidationError("empty dataset");
  double total = 0.0;
  for (const auto& ex : examples) total += cross_entropy(forward(model, ex), ex.label);
  return total / static_cast<double>(examples.size());
}

std::vector<double> row_distances(const EmbeddingMatrix& before, const EmbeddingMatrix& after) {
  if (!before.same_shape(after)) throw ValidationError("embedding shape mismatch");
  std::vector<double> out(before.rows());
  for (std::size_t r = 0; r < before.rows(); ++r) {
    out[r] = std::sqrt(kernels::squared_distance(before.row(r), after.row(r)));
  }
  return out;
}

namespace {

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  explicit AdamState(std::size_t n = 0) : m(n, 0.0), v(n, 0.0) {}
};

}  // namespace

TrainResult train(const Classifier& model, const Dataset& dataset, const TrainConfig& config) {
  config.validate();
  TrainResult result{model, {}};
  if (config.epochs == 0) return result;
  if (dataset.examples.empty()) throw ValidationError("empty dataset");

  Classifier& m = result.model;
  const std::size_t dim = m.arch.dim;
  const EmbeddingMatrix start = m.embedding;
  const bool adam = config.optimizer == Optimizer::adam;
  const bool train_embedding = config.trainable.embedding;
  const bool train_head = config.trainable.head;

  AdamState emb_state(adam && train_embedding ? m.embedding.data().size() : 0);
  AdamState head_w_state(adam && train_head ? m.head.weight.size() : 0);
  AdamState head_b_state(adam && train_head ? m.head.bias.size() : 0);
  std::vector<double> dense_grad(adam && train_embedding ? m.embedding.data().size() : 0, 0.0);

  auto snapshot = [&](std::size_t iteration) {
    result.trace.snapshots.push_back({iteration, row_distances(start, m.embedding)});
  };

  const std::size_t n = dataset.examples.size();
  const std::size_t batch_size = static_cast<std::size_t>(config.batch_size);
  std::vector<std::size_t> order(n);
  std::vector<const Example*> batch;
  std::size_t iteration = 0;
  snapshot(0);

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(config.seed, static_cast<std::uint64_t>(epoch)));
    rng.shuffle(std::span<std::size_t>(order));

    double epoch_loss = 0.0;
    for (std::size_t begin = 0; begin < n; begin += batch_size) {
      const std::size_t end = std::min(n, begin + batch_size);
      batch.clear();
      for (std::size_t i = begin; i < end; ++i) batch.push_back(&dataset.examples[order[i]]);

      const Gradients g = grad(m, batch, config.trainable);
      epoch_loss += g.loss * static_cast<double>(batch.size());
      ++iteration;

      if (adam) {
        const double t = static_cast<double>(iteration);
        const kernels::AdamStep step{config.learning_rate, config.beta1, config.beta2, config.adam_eps,
                                     1.0 - std::pow(config.beta1, t), 1.0 - std::pow(config.beta2, t)};
        if (g.embedding) {
          for (std::size_t i = 0; i < g.embedding->ids.size(); ++i) {
            const auto src = g.embedding->row(i, dim);
            std::copy(src.begin(), src.end(), dense_grad.begin() + static_cast<std::ptrdiff_t>(g.embedding->ids[i] * dim));
          }
          // Row 0 (padding) is skipped.
          const auto params = m.embedding.data().subspan(dim);
          kernels::adam_update(params, std::span<const double>(dense_grad).subspan(dim),
                               std::span<double>(emb_state.m).subspan(dim), std::span<double>(emb_state.v).subspan(dim),
                               step);
          for (const TokenId id : g.embedding->ids) {
            std::fill_n(dense_grad.begin() + static_cast<std::ptrdiff_t>(id * dim), dim, 0.0);
          }
        }
        if (g.head) {
          kernels::adam_update(m.head.weight, g.head->weight, head_w_state.m, head_w_state.v, step);
          kernels::adam_update(m.head.bias, g.head->bias, head_b_state.m, head_b_state.v, step);
        }
      } else {
        if (g.embedding) {
          for (std::size_t i = 0; i < g.embedding->ids.size(); ++i) {
            kernels::axpy(-config.learning_rate, g.embedding->row(i, dim), m.embedding.row(g.embedding->ids[i]));
          }
        }
        if (g.head) {
          kernels::axpy(-config.learning_rate, g.head->weight, m.head.weight);
          kernels::axpy(-config.learning_rate, g.head->bias, m.head.bias);
        }
      }

      if (config.snapshot_every > 0 && iteration % config.snapshot_every == 0) snapshot(iteration);
    }
    const double mean = epoch_loss / static_cast<double>(n);
    if (!std::isfinite(mean)) throw StageError("train", "non-finite loss in epoch " + std::to_string(epoch));
    result.trace.epoch_losses.push_back(mean);
  }
  if (result.trace.snapshots.back().iteration != iteration) snapshot(iteration);
  return result;
}

// ---------------------------------------------------------------------------
// Persistence

namespace {

void put_u64(std::string& out, std::uint64_t v) {
  char buf[8];
  std::memcpy(buf, &v, 8);
  out.append(buf, 8);
}

nlohmann::json dense_to_json(const Dense& d) {
  return {{"out", d.out}, {"in", d.in}, {"weight", d.weight}, {"bias", d.bias}};
}

Dense dense_from_json(const nlohmann::json& j) {
  Dense d{j.at("out").get<std::size_t>(), j.at("in").get<std::size_t>(), j.at("weight").get<std::vector<double>>(),
          j.at("bias").get<std::vector<double>>()};
  if (d.weight.size() != d.out * d.in || d.bias.size() != d.out) throw ValidationError("dense layer shape mismatch");
  return d;
}

}  // namespace

void save_embedding(const EmbeddingMatrix& embedding, const std::filesystem::path& path) {
  std::string bytes;
  bytes.reserve(16 + embedding.data().size() * 8);
  put_u64(bytes, embedding.rows());
  put_u64(bytes, embedding.dim());
  bytes.append(reinterpret_cast<const char*>(embedding.data().data()), embedding.data().size() * sizeof(double));
  write_file_atomic(path, bytes);
}

EmbeddingMatrix load_embedding(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  if (bytes.size() < 16) throw ValidationError(path.string() + ": truncated embedding header");
  std::uint64_t rows = 0;
  std::uint64_t dim = 0;
  std::memcpy(&rows, bytes.data(), 8);
  std::memcpy(&dim, bytes.data() + 8, 8);
  if (dim == 0 || rows > (bytes.size() - 16) / 8 / dim || bytes.size() != 16 + rows * dim * 8) {
    throw ValidationError(path.string() + ": embedding size does not match header");
  }
  EmbeddingMatrix out(rows, dim);
  std::memcpy(out.data().data(), bytes.data() + 16, rows * dim * 8);
  for (const double x : out.data()) {
    if (!std::isfinite(x)) throw ValidationError(path.string() + ": non-finite embedding entry");
  }
  return out;
}

void save_checkpoint(const Classifier& model, const std::filesystem::path& stem) {
  auto emb_path = stem;
  emb_path += ".emb";
  auto json_path = stem;
  json_path += ".json";
  save_embedding(model.embedding, emb_path);
  nlohmann::ordered_json j;
  j["arch"] = {{"vocab_size", model.arch.vocab_size},
               {"dim", model.arch.dim},
               {"hidden", model.arch.hidden},
               {"num_classes", model.arch.num_classes},
               {"encoder_present", model.arch.encoder_present}};
  j["init_seed"] = model.init_seed;
  j["pad_id"] = kPadId;
  j["embedding_file"] = emb_path.filename().string();
  j["encoder"] = model.encoder ? dense_to_json(*model.encoder) : nlohmann::json(nullptr);
  j["head"] = dense_to_json(model.head);
  write_file_atomic(json_path, j.dump(2) + "\n");
}

Classifier load_checkpoint(const std::filesystem::path& stem) {
  auto json_path = stem;
  json_path += ".json";
  try {
    const auto j = nlohmann::json::parse(read_file(json_path));
    Classifier model;
    const auto& a = j.at("arch");
    model.arch = Arch{a.at("vocab_size").get<std::size_t>(), a.at("dim").get<std::size_t>(),
                      a.at("hidden").get<std::size_t>(), a.at("num_classes").get<int>(),
                      a.at("encoder_present").get<bool>()};
    model.init_seed = j.at("init_seed").get<std::uint64_t>();
    model.embedding = load_embedding(json_path.parent_path() / j.at("embedding_file").get<std::string>());
    if (!j.at("encoder").is_null()) model.encoder = dense_from_json(j.at("encoder"));
    model.head = dense_from_json(j.at("head"));
    if (model.embedding.rows() != model.arch.vocab_size || model.embedding.dim() != model.arch.dim ||
        model.encoder.has_value() != model.arch.encoder_present || model.head.in != model.arch.head_input() ||
        model.head.out != static_cast<std::size_t>(model.arch.num_classes)) {
      throw ValidationError("checkpoint parts disagree with arch");
    }
    return model;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(json_path.string() + ": " + e.what());
  }
}

}  // namespace btu
