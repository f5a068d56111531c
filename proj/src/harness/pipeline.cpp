#include <algorithm>
#include <chrono>
#include <ctime>
#include <functional>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "btu/error.hpp"
#include "btu/harness.hpp"
#include "btu/kernels.hpp"
#include "btu/rng.hpp"

namespace btu {

using nlohmann::ordered_json;

namespace {

template <class F>
auto stage(const char* name, F&& body) -> decltype(body()) {
  try {
    return body();
  } catch (const StageError&) {
    throw;
  } catch (const ValidationError& e) {
    throw ValidationError(std::string(name) + ": " + e.what());
  } catch (const std::exception& e) {
    throw StageError(name, e.what());
  }
}

struct PreparedData {
  Vocabulary vocab;
  Dataset train;
  Dataset dev;
  Dataset test;
};

Dataset encode_split(const RawSplit& raw, const Vocabulary& vocab, int num_classes, Split split) {
  Dataset d;
  d.num_classes = num_classes;
  d.split = split;
  for (std::size_t i = 0; i < raw.texts.size(); ++i) d.examples.push_back(make_example(raw.texts[i], raw.labels[i], vocab));
  return d;
}

PreparedData prepare(const ExperimentConfig& c) {
  PreparedData out;
  if (c.data.synthetic) {
    const auto corpus = generate_synthetic(*c.data.synthetic, derive_seed(c.seed, 1));
    out.vocab = build_vocab(corpus.train.texts, c.data.min_freq);
    const int classes = c.data.synthetic->num_classes;
    out.train = encode_split(corpus.train, out.vocab, classes, Split::train);
    out.dev = encode_split(corpus.dev, out.vocab, classes, Split::dev);
    out.test = encode_split(corpus.test, out.vocab, classes, Split::test);
  } else {
    out.vocab = build_vocab(read_jsonl_texts(c.data.train), c.data.min_freq);
    out.train = load_jsonl(c.data.train, out.vocab, c.data.num_classes, Split::train);
    const int classes = out.train.num_classes;
    out.dev = load_jsonl(c.data.dev, out.vocab, classes, Split::dev);
    out.test = load_jsonl(c.data.test, out.vocab, classes, Split::test);
  }
  return out;
}

Dataset seeded_subset(const Dataset& d, double fraction, std::uint64_t seed) {
  if (fraction >= 1.0) return d;
  const std::size_t keep = std::max<std::size_t>(1, round_half_up(fraction * static_cast<double>(d.size())));
  std::vector<std::size_t> idx(d.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Rng rng(seed);
  rng.shuffle(std::span<std::size_t>(idx));
  idx.resize(keep);
  std::sort(idx.begin(), idx.end());
  Dataset out{{}, d.num_classes, d.split};
  for (const std::size_t i : idx) out.examples.push_back(d.examples[i]);
  return out;
}

struct TriggeredSet {
  TriggerSpec spec;
  Dataset data;
};

Metrics evaluate(const Classifier& model, const Dataset& test, const std::vector<TriggeredSet>& triggered) {
  Metrics m;
  m.acc = accuracy(model, test);
  std::size_t hits = 0;
  std::size_t total = 0;
  for (const auto& t : triggered) {
    std::size_t trigger_hits = 0;
    for (const auto& ex : t.data.examples) trigger_hits += predict(model, ex.token_ids) == t.spec.target_label ? 1 : 0;
    m.per_trigger.push_back({t.spec.trigger_id, t.spec.target_label, attack_success_rate(model, t.data, t.spec.target_label)});
    hits += trigger_hits;
    total += t.data.size();
  }
  m.asr = total > 0 ? static_cast<double>(hits) / static_cast<double>(total) : 0.0;
  return m;
}

ordered_json metrics_json(const Metrics& m) {
  ordered_json per = ordered_json::array();
  for (const auto& t : m.per_trigger) per.push_back({{"trigger_id", t.trigger_id}, {"target_label", t.target_label}, {"asr", t.asr}});
  return {{"acc", m.acc}, {"asr", m.per_trigger.empty() ? ordered_json(nullptr) : ordered_json(m.asr)}, {"asr_per_trigger", per}};
}

ordered_json curves_json(const DriftCurves& c) {
  return {{"iterations", c.iterations}, {"btp", c.btp}, {"ctp", c.ctp}};
}

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream ss;
  ss << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return ss.str();
}

// Shortest text that reads back to the same double.
std::string fmt(double x) { return nlohmann::json(x).dump(); }

void write_outputs(const ExperimentReport& r, const Classifier& init, const Classifier& backdoored,
                   const std::optional<Classifier>& defended, const Dataset& poisoned_train) {
  const auto& dir = r.config.out_dir;
  std::filesystem::create_directories(dir);

  write_file_atomic(dir / "report.json", report_json(r, utc_timestamp()).dump(2) + "\n");

  std::string summary = "stage,acc,asr\n";
  auto row = [&](const char* name, const Metrics& m) {
    summary += std::string(name) + "," + fmt(m.acc) + "," + (m.per_trigger.empty() ? "" : fmt(m.asr)) + "\n";
  };
  if (r.before_attack) row("before_attack", *r.before_attack);
  row("after_attack", r.after_attack);
  if (r.after_defense) row("after_defense", *r.after_defense);
  write_file_atomic(dir / "summary.csv", summary);

  std::string drift_csv = "token_id,surface,distance,round,is_ground_truth_trigger\n";
  for (const auto& round : r.rounds) {
    for (const auto& rec : round.drift) {
      drift_csv += std::to_string(rec.token_id) + "," + r.vocab.surface(rec.token_id) + "," + fmt(rec.distance) + "," +
                   std::to_string(round.round) + "," + (r.ground_truth.contains(rec.token_id) ? "1" : "0") + "\n";
    }
  }
  write_file_atomic(dir / "drift.csv", drift_csv);

  std::string curves_csv = "phase,iteration,btp,ctp\n";
  auto curve_rows = [&](const char* phase, const DriftCurves& c) {
    for (std::size_t i = 0; i < c.iterations.size(); ++i) {
      curves_csv += std::string(phase) + "," + std::to_string(c.iterations[i]) + "," + fmt(c.btp[i]) + "," + fmt(c.ctp[i]) + "\n";
    }
  };
  curve_rows("embedding_only", r.curves_embedding_only);
  curve_rows("all_params", r.curves_all_params);
  write_file_atomic(dir / "curves.csv", curves_csv);

  write_file_atomic(dir / "suspects.json", to_json(r.suspects).dump() + "\n");
  write_file_atomic(dir / "unlearn_report.json", to_json(r.unlearn, r.vocab).dump(2) + "\n");
  save_vocab(r.vocab, dir / "vocab.json");
  save_jsonl(poisoned_train, dir / "train_poisoned.jsonl");
  save_checkpoint(init, dir / "init");
  save_checkpoint(backdoored, dir / "backdoored");
  if (defended) save_checkpoint(*defended, dir / "defended");
}

}  // namespace

ordered_json report_json(const ExperimentReport& r, std::optional<std::string> timestamp) {
  ordered_json j;
  j["tool"] = kToolName;
  j["version"] = kToolVersion;
  j["seed"] = r.config.seed;
  j["kernels"] = kernels::name(kernels::active_level());
  j["config"] = to_json(r.config);
  j["data"] = {{"train_size", r.train_size},
               {"vocab_size", r.vocab_size},
               {"poisoned_examples", r.poisoned_count},
               {"ground_truth_trigger_ids", std::vector<TokenId>(r.ground_truth.begin(), r.ground_truth.end())}};
  j["metrics"] = {{"before_attack", r.before_attack ? metrics_json(*r.before_attack) : ordered_json(nullptr)},
                  {"after_attack", metrics_json(r.after_attack)},
                  {"after_defense", r.after_defense ? metrics_json(*r.after_defense) : ordered_json(nullptr)}};
  ordered_json rounds = ordered_json::array();
  for (const auto& round : r.rounds) {
    rounds.push_back({{"round", round.round},
                      {"selected", std::vector<TokenId>(round.selected.begin(), round.selected.end())},
                      {"epoch_losses", round.trace.epoch_losses}});
  }
  auto det = to_json(r.suspects);
  det["union"] = std::vector<TokenId>(r.suspects.all.begin(), r.suspects.all.end());
  det["precision"] = r.detection.precision;
  det["recall"] = r.detection.recall;
  det["rounds"] = rounds;
  j["detection"] = det;
  j["unlearn"] = to_json(r.unlearn, r.vocab);
  j["drift_curves"] = {{"embedding_only", curves_json(r.curves_embedding_only)},
                       {"all_params", curves_json(r.curves_all_params)}};
  if (timestamp) j["timestamp"] = *timestamp;
  return j;
}

ExperimentReport run_pipeline(const ExperimentConfig& input) {
  input.validate();
  ExperimentReport report;
  report.config = resolve_seeds(input);
  const ExperimentConfig& c = report.config;

  PreparedData data = stage("data", [&] { return prepare(c); });

  PoisonedDataset poisoned = stage("poison", [&] {
    if (!c.poison) return PoisonedDataset{data.train, data.vocab, {}};
    return apply_poison(data.train, data.vocab, *c.poison);
  });
  report.vocab = poisoned.vocab;
  report.vocab_size = poisoned.vocab.size();
  report.ground_truth = poisoned.ground_truth_trigger_ids;
  report.train_size = poisoned.dataset.size();
  for (const auto& ex : poisoned.dataset.examples) report.poisoned_count += ex.meta.is_clean() ? 0 : 1;

  std::vector<TriggeredSet> triggered = stage("triggered-test", [&] {
    std::vector<TriggeredSet> sets;
    if (!c.poison) return sets;
    for (const auto& spec : c.poison->specs) {
      sets.push_back({spec.trigger, make_triggered_testset(data.test, poisoned.vocab, spec.trigger,
                                                            derive_seed(c.seed, 50 + static_cast<std::uint64_t>(spec.trigger.trigger_id)))});
    }
    return sets;
  });

  const Arch arch{poisoned.vocab.size(), c.model.dim, c.model.hidden, poisoned.dataset.num_classes, c.model.encoder};
  const Classifier init = stage("init", [&] { return init_model(arch, derive_seed(c.seed, 20)); });

  std::set<TokenId> clean_ids;
  for (TokenId t = 0; t < poisoned.vocab.size(); ++t) {
    if (!Vocabulary::is_reserved(t) && !report.ground_truth.contains(t)) clean_ids.insert(t);
  }

  if (c.defend) {
    DetectResult detected = stage("detect", [&] {
      DetectConfig cfg = c.detect;
      for (TrainConfig* r : {&cfg.round1, &cfg.round2, &cfg.round3}) r->snapshot_every = c.curve_every;
      const Dataset subset = seeded_subset(poisoned.dataset, c.detect_fraction, derive_seed(c.seed, 60));
      return detect(subset, init, cfg);
    });
    report.suspects = std::move(detected.suspects);
    report.rounds = std::move(detected.rounds);
    if (!report.ground_truth.empty()) {
      report.detection = detection_metrics(report.suspects, report.ground_truth);
      if (!report.rounds.empty()) {
        auto first = std::find_if(report.rounds.begin(), report.rounds.end(), [](const auto& r) { return r.round == 1; });
        if (first == report.rounds.end()) first = report.rounds.begin();
        report.curves_embedding_only = drift_curves(first->trace, report.ground_truth, clean_ids);
      }
    }
  }

  if (c.clean_baseline) {
    report.before_attack = stage("clean-baseline", [&] {
      const auto clean = train(init, data.train, c.victim).model;
      return evaluate(clean, data.test, triggered);
    });
  }

  TrainResult victim = stage("victim-train", [&] {
    TrainConfig cfg = c.victim;
    cfg.snapshot_every = c.curve_every;
    return train(init, poisoned.dataset, cfg);
  });
  report.after_attack = stage("evaluate-attack", [&] { return evaluate(victim.model, data.test, triggered); });
  if (!report.ground_truth.empty()) {
    report.curves_all_params = drift_curves(victim.trace, report.ground_truth, clean_ids);
  }

  std::optional<Classifier> defended;
  if (c.defend) {
    UnlearnOutcome outcome = stage("unlearn", [&] {
      return variant_unlearn(victim.model, report.suspects.all, init.embedding, &init.embedding, c.unlearn);
    });
    report.unlearn = outcome.report;
    defended = stage("clean-finetune", [&] {
      Dataset clean_dev{{}, data.dev.num_classes, Split::dev};
      for (const auto& ex : data.dev.examples) {
        if (ex.meta.is_clean()) clean_dev.examples.push_back(ex);
      }
      if (clean_dev.examples.empty()) throw ValidationError("no clean dev examples for fine-tuning");
      clean_dev = seeded_subset(clean_dev, c.unlearn.clean_data_fraction, derive_seed(c.seed, 61));
      return clean_finetune(outcome.model, clean_dev, c.unlearn.clean_finetune);
    });
    report.after_defense = stage("evaluate-defense", [&] { return evaluate(*defended, data.test, triggered); });
  }

  if (!c.out_dir.empty()) {
    stage("write-report", [&] {
      write_outputs(report, init, victim.model, defended, poisoned.dataset);
      return 0;
    });
  }
  return report;
}

}  // namespace btu
