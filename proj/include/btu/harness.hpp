#pragma once

// Experiment orchestration: synthetic data, metrics, the poison -> detect -> train
// -> unlearn -> evaluate pipeline, ablation sweeps and report files.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "btu/corpus.hpp"
#include "btu/detect.hpp"
#include "btu/model.hpp"
#include "btu/poison.hpp"
#include "btu/unlearn.hpp"

namespace btu {

inline constexpr std::string_view kToolName = "btu-lab";
inline constexpr std::string_view kToolVersion = "0.1.0";

// ---------------------------------------------------------------------------
// Metrics

double accuracy(const Classifier& model, const Dataset& clean_test);
double attack_success_rate(const Classifier& model, const Dataset& triggered_test, int target_label);

struct DriftCurves {
  std::vector<std::size_t> iterations;
  std::vector<double> btp;  // mean drift over trigger tokens
  std::vector<double> ctp;  // mean drift over clean tokens
};

DriftCurves drift_curves(const TrainTrace& trace, const std::set<TokenId>& trigger_ids,
                         const std::set<TokenId>& clean_ids);

struct DetectionScore {
  double precision = 1.0;
  double recall = 0.0;
};

DetectionScore detection_metrics(const SuspectSet& suspects, const std::set<TokenId>& ground_truth);

// ---------------------------------------------------------------------------
// Synthetic corpus: class-indicative words over a Zipf-distributed neutral lexicon.

struct SyntheticSpec {
  std::size_t num_train = 4000;
  std::size_t num_dev = 400;
  std::size_t num_test = 1000;
  int num_classes = 2;
  std::size_t neutral_words = 200;
  std::size_t class_words = 50;  // per class
  std::size_t min_len = 8;
  std::size_t max_len = 16;
  double class_word_prob = 0.4;
  double cross_class_prob = 0.15;
  double zipf_exponent = 1.0;
  double label_noise = 0.0;

  void validate() const;
};

struct RawSplit {
  std::vector<std::string> texts;
  std::vector<int> labels;
};

struct SyntheticCorpus {
  RawSplit train;
  RawSplit dev;
  RawSplit test;
};

SyntheticCorpus generate_synthetic(const SyntheticSpec& spec, std::uint64_t seed);

// Writes train/dev/test JSONL files under `dir`.
void write_synthetic(const SyntheticCorpus& corpus, const std::filesystem::path& dir);

// ---------------------------------------------------------------------------
// Configuration

struct DataConfig {
  std::optional<SyntheticSpec> synthetic = SyntheticSpec{};
  std::filesystem::path train;
  std::filesystem::path dev;
  std::filesystem::path test;
  int num_classes = 0;
  int min_freq = 1;
};

struct ModelConfig {
  std::size_t dim = 16;
  std::size_t hidden = 16;
  bool encoder = true;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  DataConfig data;
  std::optional<PoisonPlan> poison;
  ModelConfig model;
  DetectConfig detect;
  double detect_fraction = 1.0;  // subsample of train used for detection
  TrainConfig victim;            // training of the deployed (backdoored) model
  UnlearnConfig unlearn;
  bool clean_baseline = true;    // also train on the unpoisoned set
  bool defend = true;
  std::size_t curve_every = 10;  // snapshot period for drift curves
  std::filesystem::path out_dir;

  void validate() const;
};

// Desk-scale defaults: synthetic 2-class corpus, |V| ~ 300, d = 16, one rare-word
// trigger at 10%, alpha = 0.05, three detection rounds.
ExperimentConfig default_config();

// Seeds of every stage derived from `config.seed`.
ExperimentConfig resolve_seeds(ExperimentConfig config);

nlohmann::ordered_json to_json(const ExperimentConfig& config);
ExperimentConfig experiment_from_json(const nlohmann::json& j, ExperimentConfig base = default_config());

nlohmann::ordered_json to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});
nlohmann::ordered_json to_json(const PoisonPlan& plan);
PoisonPlan poison_plan_from_json(const nlohmann::json& j);
nlohmann::ordered_json to_json(const TriggerSpec& spec);
TriggerSpec trigger_spec_from_json(const nlohmann::json& j);
nlohmann::ordered_json to_json(const DetectConfig& cfg);
DetectConfig detect_config_from_json(const nlohmann::json& j, DetectConfig base = {});
nlohmann::ordered_json to_json(const UnlearnConfig& cfg);
UnlearnConfig unlearn_config_from_json(const nlohmann::json& j, UnlearnConfig base = {});
nlohmann::ordered_json to_json(const UnlearnReport& report, const Vocabulary& vocab);
nlohmann::ordered_json to_json(const SuspectSet& suspects);
nlohmann::ordered_json to_json(const SyntheticSpec& spec);
SyntheticSpec synthetic_spec_from_json(const nlohmann::json& j, SyntheticSpec base = {});

UnlearnStrategy parse_strategy(const std::string& name);
std::string_view to_string(UnlearnStrategy strategy);

// ---------------------------------------------------------------------------
// Pipeline

struct TriggerMetric {
  int trigger_id = 0;
  int target_label = 0;
  double asr = 0.0;
};

struct Metrics {
  double acc = 0.0;
  double asr = 0.0;  // aggregate over all triggered test sets
  std::vector<TriggerMetric> per_trigger;
};

struct ExperimentReport {
  ExperimentConfig config;  // resolved
  std::optional<Metrics> before_attack;
  Metrics after_attack;
  std::optional<Metrics> after_defense;
  SuspectSet suspects;
  std::vector<RoundArtifact> rounds;
  DetectionScore detection;
  UnlearnReport unlearn;
  DriftCurves curves_embedding_only;
  DriftCurves curves_all_params;
  std::set<TokenId> ground_truth;
  std::size_t vocab_size = 0;
  std::size_t train_size = 0;
  std::size_t poisoned_count = 0;
  Vocabulary vocab;
};

// Report JSON; everything except "timestamp" is a pure function of the config.
nlohmann::ordered_json report_json(const ExperimentReport& report, std::optional<std::string> timestamp);

// Runs every stage. With a non-empty out_dir, writes report.json, summary.csv,
// drift.csv, suspects.json, unlearn_report.json, vocab.json, poisoned train data and
// checkpoints there.
ExperimentReport run_pipeline(const ExperimentConfig& config);

// ---------------------------------------------------------------------------
// Ablation

enum class SweepKind { alpha_values, round_subsets, strategies, poison_rates, token_quantities };

struct Sweep {
  SweepKind kind = SweepKind::alpha_values;
  std::vector<double> alphas;
  std::vector<std::vector<int>> round_subsets;
  std::vector<UnlearnStrategy> strategies;
  std::vector<double> poison_rates;
  std::vector<bool> clean_insert;  // token_quantities arms
};

Sweep sweep_from_json(const nlohmann::json& j);
SweepKind parse_sweep_kind(const std::string& name);

struct ArmResult {
  std::string label;
  std::optional<ExperimentReport> report;
  std::string error;
};

// One pipeline per arm (arms run concurrently up to `jobs`); writes ablation.csv
// and per-arm directories when out_dir is set. Failed arms keep their error text.
std::vector<ArmResult> run_ablation(const ExperimentConfig& base, const Sweep& sweep, unsigned jobs = 0);

std::string ablation_csv(const std::vector<ArmResult>& arms);

}  // namespace btu
