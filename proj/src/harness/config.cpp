#include "btu/error.hpp"
#include "btu/harness.hpp"
#include "btu/rng.hpp"

namespace btu {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

template <class T>
void read(const json& j, const char* key, T& out) {
  if (j.contains(key) && !j.at(key).is_null()) out = j.at(key).get<T>();
}

std::string_view to_string(Optimizer o) { return o == Optimizer::sgd ? "sgd" : "adam"; }

Optimizer parse_optimizer(const std::string& s) {
  if (s == "sgd") return Optimizer::sgd;
  if (s == "adam") return Optimizer::adam;
  throw ValidationError("unknown optimizer: " + s);
}

std::string_view to_string(TriggerKind k) {
  switch (k) {
    case TriggerKind::word_insert: return "word_insert";
    case TriggerKind::sentence_insert: return "sentence_insert";
    case TriggerKind::pattern_insert: return "pattern_insert";
  }
  return "word_insert";
}

TriggerKind parse_trigger_kind(const std::string& s) {
  if (s == "word_insert") return TriggerKind::word_insert;
  if (s == "sentence_insert") return TriggerKind::sentence_insert;
  if (s == "pattern_insert") return TriggerKind::pattern_insert;
  throw ValidationError("unknown trigger kind: " + s);
}

std::string_view to_string(PositionPolicy p) {
  switch (p) {
    case PositionPolicy::uniform_random: return "uniform_random";
    case PositionPolicy::fixed_prefix: return "fixed_prefix";
    case PositionPolicy::scattered: return "scattered";
  }
  return "uniform_random";
}

PositionPolicy parse_position(const std::string& s) {
  if (s == "uniform_random") return PositionPolicy::uniform_random;
  if (s == "fixed_prefix") return PositionPolicy::fixed_prefix;
  if (s == "scattered") return PositionPolicy::scattered;
  throw ValidationError("unknown position policy: " + s);
}

std::string_view to_string(PoisonMode m) {
  switch (m) {
    case PoisonMode::one2one: return "one2one";
    case PoisonMode::all2one: return "all2one";
    case PoisonMode::all2all: return "all2all";
  }
  return "one2one";
}

PoisonMode parse_mode(const std::string& s) {
  if (s == "one2one") return PoisonMode::one2one;
  if (s == "all2one") return PoisonMode::all2one;
  if (s == "all2all") return PoisonMode::all2all;
  throw ValidationError("unknown poison mode: " + s);
}

ordered_json set_json(const std::set<TokenId>& ids) { return ordered_json(std::vector<TokenId>(ids.begin(), ids.end())); }

}  // namespace

UnlearnStrategy parse_strategy(const std::string& s) {
  if (s == "btu_dimensional" || s == "btu") return UnlearnStrategy::btu_dimensional;
  if (s == "full_replace") return UnlearnStrategy::full_replace;
  if (s == "pn") return UnlearnStrategy::pn;
  if (s == "pr1") return UnlearnStrategy::pr1;
  if (s == "pr2") return UnlearnStrategy::pr2;
  throw ValidationError("unknown unlearning strategy: " + s);
}

std::string_view to_string(UnlearnStrategy s) {
  switch (s) {
    case UnlearnStrategy::btu_dimensional: return "btu_dimensional";
    case UnlearnStrategy::full_replace: return "full_replace";
    case UnlearnStrategy::pn: return "pn";
    case UnlearnStrategy::pr1: return "pr1";
    case UnlearnStrategy::pr2: return "pr2";
  }
  return "btu_dimensional";
}

ordered_json to_json(const TrainConfig& c) {
  ordered_json groups = ordered_json::array();
  if (c.trainable.embedding) groups.push_back("embedding");
  if (c.trainable.head) groups.push_back("head");
  return {{"learning_rate", c.learning_rate}, {"epochs", c.epochs},         {"batch_size", c.batch_size},
          {"trainable_groups", groups},       {"optimizer", to_string(c.optimizer)},
          {"beta1", c.beta1},                 {"beta2", c.beta2},           {"adam_eps", c.adam_eps},
          {"seed", c.seed},                   {"snapshot_every", c.snapshot_every}};
}

TrainConfig train_config_from_json(const json& j, TrainConfig c) {
  read(j, "learning_rate", c.learning_rate);
  read(j, "epochs", c.epochs);
  read(j, "batch_size", c.batch_size);
  if (j.contains("trainable_groups")) {
    c.trainable = {};
    for (const auto& g : j.at("trainable_groups")) {
      const auto name = g.get<std::string>();
      if (name == "embedding") c.trainable.embedding = true;
      else if (name == "head") c.trainable.head = true;
      else throw ValidationError("unknown parameter group: " + name);
    }
  }
  if (j.contains("optimizer")) c.optimizer = parse_optimizer(j.at("optimizer").get<std::string>());
  read(j, "beta1", c.beta1);
  read(j, "beta2", c.beta2);
  read(j, "adam_eps", c.adam_eps);
  read(j, "seed", c.seed);
  read(j, "snapshot_every", c.snapshot_every);
  return c;
}

ordered_json to_json(const TriggerSpec& s) {
  return {{"trigger_id", s.trigger_id},           {"kind", to_string(s.kind)},
          {"trigger_tokens", s.trigger_tokens},   {"position_policy", to_string(s.position_policy)},
          {"target_label", s.target_label}};
}

TriggerSpec trigger_spec_from_json(const json& j) {
  TriggerSpec s;
  read(j, "trigger_id", s.trigger_id);
  if (j.contains("kind")) s.kind = parse_trigger_kind(j.at("kind").get<std::string>());
  read(j, "trigger_tokens", s.trigger_tokens);
  if (j.contains("position_policy")) s.position_policy = parse_position(j.at("position_policy").get<std::string>());
  read(j, "target_label", s.target_label);
  return s;
}

ordered_json to_json(const PoisonPlan& p) {
  ordered_json specs = ordered_json::array();
  for (const auto& s : p.specs) {
    auto obj = to_json(s.trigger);
    obj["rate"] = s.rate;
    specs.push_back(obj);
  }
  return {{"specs", specs},
          {"mode", to_string(p.mode)},
          {"negative_augment_rate", p.negative_augment_rate},
          {"clean_insert", p.clean_insert},
          {"seed", p.seed}};
}

PoisonPlan poison_plan_from_json(const json& j) {
  PoisonPlan p;
  for (const auto& s : j.at("specs")) {
    PoisonSpec spec;
    spec.trigger = trigger_spec_from_json(s);
    read(s, "rate", spec.rate);
    p.specs.push_back(std::move(spec));
  }
  if (j.contains("mode")) p.mode = parse_mode(j.at("mode").get<std::string>());
  read(j, "negative_augment_rate", p.negative_augment_rate);
  read(j, "clean_insert", p.clean_insert);
  read(j, "seed", p.seed);
  return p;
}

ordered_json to_json(const DetectConfig& c) {
  return {{"alpha", c.alpha},
          {"rounds", c.rounds},
          {"round1", to_json(c.round1)},
          {"round2", to_json(c.round2)},
          {"round3", to_json(c.round3)}};
}

DetectConfig detect_config_from_json(const json& j, DetectConfig c) {
  read(j, "alpha", c.alpha);
  read(j, "rounds", c.rounds);
  if (j.contains("train")) {
    c.round1 = train_config_from_json(j.at("train"), c.round1);
    c.round2 = train_config_from_json(j.at("train"), c.round2);
    c.round3 = train_config_from_json(j.at("train"), c.round3);
  }
  if (j.contains("round1")) c.round1 = train_config_from_json(j.at("round1"), c.round1);
  if (j.contains("round2")) c.round2 = train_config_from_json(j.at("round2"), c.round2);
  if (j.contains("round3")) c.round3 = train_config_from_json(j.at("round3"), c.round3);
  return c;
}

ordered_json to_json(const UnlearnConfig& c) {
  return {{"strategy", to_string(c.strategy)},
          {"sigma", c.sigma},
          {"seed", c.seed},
          {"clean_data_fraction", c.clean_data_fraction},
          {"clean_finetune", to_json(c.clean_finetune)}};
}

UnlearnConfig unlearn_config_from_json(const json& j, UnlearnConfig c) {
  if (j.contains("strategy")) c.strategy = parse_strategy(j.at("strategy").get<std::string>());
  read(j, "sigma", c.sigma);
  read(j, "seed", c.seed);
  read(j, "clean_data_fraction", c.clean_data_fraction);
  if (j.contains("clean_finetune")) c.clean_finetune = train_config_from_json(j.at("clean_finetune"), c.clean_finetune);
  return c;
}

ordered_json to_json(const UnlearnReport& r, const Vocabulary& vocab) {
  ordered_json per_token = ordered_json::array();
  for (const auto& t : r.per_token) {
    per_token.push_back({{"token_id", t.token_id},
                         {"surface", t.token_id < vocab.size() ? vocab.surface(t.token_id) : std::string()},
                         {"dims_replaced", t.dims_replaced}});
  }
  return {{"d_bar", r.d_bar}, {"replaced_dims_total", r.replaced_dims_total}, {"per_token", per_token}};
}

ordered_json to_json(const SuspectSet& s) {
  return {{"t1", set_json(s.t_prime)}, {"t2", set_json(s.t_double_prime)}, {"t3", set_json(s.t_triple_prime)}};
}

ordered_json to_json(const SyntheticSpec& s) {
  return {{"num_train", s.num_train},
          {"num_dev", s.num_dev},
          {"num_test", s.num_test},
          {"num_classes", s.num_classes},
          {"neutral_words", s.neutral_words},
          {"class_words", s.class_words},
          {"min_len", s.min_len},
          {"max_len", s.max_len},
          {"class_word_prob", s.class_word_prob},
          {"cross_class_prob", s.cross_class_prob},
          {"zipf_exponent", s.zipf_exponent},
          {"label_noise", s.label_noise}};
}

SyntheticSpec synthetic_spec_from_json(const json& j, SyntheticSpec s) {
  read(j, "num_train", s.num_train);
  read(j, "num_dev", s.num_dev);
  read(j, "num_test", s.num_test);
  read(j, "num_classes", s.num_classes);
  read(j, "neutral_words", s.neutral_words);
  read(j, "class_words", s.class_words);
  read(j, "min_len", s.min_len);
  read(j, "max_len", s.max_len);
  read(j, "class_word_prob", s.class_word_prob);
  read(j, "cross_class_prob", s.cross_class_prob);
  read(j, "zipf_exponent", s.zipf_exponent);
  read(j, "label_noise", s.label_noise);
  return s;
}

ExperimentConfig default_config() {
  ExperimentConfig c;
  c.seed = 2024;
  c.data.synthetic = SyntheticSpec{};

  PoisonPlan plan;
  plan.specs.push_back({TriggerSpec{0, TriggerKind::word_insert, {"cf"}, PositionPolicy::uniform_random, 1}, 0.10});
  c.poison = plan;

  TrainConfig detect_round;
  detect_round.learning_rate = 0.1;
  detect_round.epochs = 1;
  detect_round.batch_size = 32;
  detect_round.trainable = {.embedding = true, .head = false};
  detect_round.optimizer = Optimizer::adam;
  c.detect.alpha = 0.05;
  c.detect.round1 = c.detect.round2 = c.detect.round3 = detect_round;

  c.victim.learning_rate = 0.01;
  c.victim.epochs = 10;
  c.victim.batch_size = 32;
  c.victim.trainable = {.embedding = true, .head = true};
  c.victim.optimizer = Optimizer::adam;

  c.unlearn.strategy = UnlearnStrategy::btu_dimensional;
  c.unlearn.sigma = 0.1;
  c.unlearn.clean_data_fraction = 1.0;
  c.unlearn.clean_finetune.learning_rate = 1e-3;
  c.unlearn.clean_finetune.epochs = 3;
  c.unlearn.clean_finetune.batch_size = 32;
  c.unlearn.clean_finetune.optimizer = Optimizer::adam;
  return c;
}

void ExperimentConfig::validate() const {
  if (data.synthetic) {
    data.synthetic->validate();
  } else if (data.train.empty() || data.dev.empty() || data.test.empty()) {
    throw ValidationError("data needs a synthetic spec or train/dev/test paths");
  }
  if (data.min_freq < 1) throw ValidationError("min_freq must be positive");
  if (model.dim < 1 || (model.encoder && model.hidden < 1)) throw ValidationError("model dimensions must be positive");
  detect.validate();
  if (!(detect_fraction > 0.0 && detect_fraction <= 1.0)) throw ValidationError("detect_fraction must lie in (0, 1]");
  victim.validate();
  unlearn.validate();
  if (poison) {
    const int classes = data.synthetic ? data.synthetic->num_classes : std::max(data.num_classes, 2);
    poison->validate(classes);
  }
}

ExperimentConfig resolve_seeds(ExperimentConfig c) {
  const std::uint64_t s = c.seed;
  if (c.poison) c.poison->seed = derive_seed(s, 11);
  c.detect.round1.seed = derive_seed(s, 21);
  c.detect.round2.seed = derive_seed(s, 22);
  c.detect.round3.seed = derive_seed(s, 23);
  c.victim.seed = derive_seed(s, 30);
  c.unlearn.seed = derive_seed(s, 40);
  c.unlearn.clean_finetune.seed = derive_seed(s, 41);
  return c;
}

ordered_json to_json(const ExperimentConfig& c) {
  ordered_json data;
  if (c.data.synthetic) {
    data["synthetic"] = to_json(*c.data.synthetic);
  } else {
    data["train"] = c.data.train.string();
    data["dev"] = c.data.dev.string();
    data["test"] = c.data.test.string();
    data["num_classes"] = c.data.num_classes;
  }
  data["min_freq"] = c.data.min_freq;
  ordered_json j;
  j["seed"] = c.seed;
  j["data"] = data;
  j["poison"] = c.poison ? to_json(*c.poison) : ordered_json(nullptr);
  j["model"] = {{"dim", c.model.dim}, {"hidden", c.model.hidden}, {"encoder", c.model.encoder}};
  j["detect"] = to_json(c.detect);
  j["detect_fraction"] = c.detect_fraction;
  j["victim"] = to_json(c.victim);
  j["unlearn"] = to_json(c.unlearn);
  j["clean_baseline"] = c.clean_baseline;
  j["defend"] = c.defend;
  j["curve_every"] = c.curve_every;
  return j;
}

ExperimentConfig experiment_from_json(const json& j, ExperimentConfig c) {
  try {
    read(j, "seed", c.seed);
    if (j.contains("data")) {
      const auto& d = j.at("data");
      if (d.contains("synthetic") && !d.at("synthetic").is_null()) {
        c.data.synthetic = synthetic_spec_from_json(d.at("synthetic"), c.data.synthetic.value_or(SyntheticSpec{}));
      } else if (d.contains("train")) {
        c.data.synthetic.reset();
        c.data.train = d.at("train").get<std::string>();
        c.data.dev = d.at("dev").get<std::string>();
        c.data.test = d.at("test").get<std::string>();
      }
      read(d, "num_classes", c.data.num_classes);
      read(d, "min_freq", c.data.min_freq);
    }
    if (j.contains("poison")) {
      if (j.at("poison").is_null()) c.poison.reset();
      else c.poison = poison_plan_from_json(j.at("poison"));
    }
    if (j.contains("model")) {
      const auto& m = j.at("model");
      read(m, "dim", c.model.dim);
      read(m, "hidden", c.model.hidden);
      read(m, "encoder", c.model.encoder);
    }
    if (j.contains("detect")) c.detect = detect_config_from_json(j.at("detect"), c.detect);
    read(j, "detect_fraction", c.detect_fraction);
    if (j.contains("victim")) c.victim = train_config_from_json(j.at("victim"), c.victim);
    if (j.contains("unlearn")) c.unlearn = unlearn_config_from_json(j.at("unlearn"), c.unlearn);
    read(j, "clean_baseline", c.clean_baseline);
    read(j, "defend", c.defend);
    read(j, "curve_every", c.curve_every);
    if (j.contains("out_dir")) c.out_dir = j.at("out_dir").get<std::string>();
  } catch (const json::exception& e) {
    throw ValidationError(std::string("config: ") + e.what());
  }
  return c;
}

}  // namespace btu
