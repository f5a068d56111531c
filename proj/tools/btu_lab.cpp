// btu_lab: command-line front end for the backdoor token unlearning lab.
//
// Exit codes: 0 success, 1 invalid input or configuration, 2 a stage failed.

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <iostream>

#include "btu/error.hpp"
#include "btu/harness.hpp"
#include "btu/kernels.hpp"
#include "btu/rng.hpp"

namespace {

using namespace btu;
using nlohmann::json;
using nlohmann::ordered_json;

json read_json(const std::filesystem::path& path) {
  try {
    return json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
}

// Shortest text that reads back to the same double.
std::string fmt(double x) { return nlohmann::json(x).dump(); }

ExperimentConfig load_experiment(const std::string& config_path) {
  ExperimentConfig config = default_config();
  if (!config_path.empty()) config = experiment_from_json(read_json(config_path), config);
  return config;
}

std::set<TokenId> read_suspects(const std::filesystem::path& path) {
  const auto j = read_json(path);
  std::set<TokenId> out;
  for (const char* key : {"t1", "t2", "t3", "union"}) {
    if (j.contains(key)) {
      for (const auto& id : j.at(key)) out.insert(id.get<TokenId>());
    }
  }
  return out;
}

// Central differences over every trainable parameter of small random models.
int run_gradcheck(int models, std::uint64_t seed, double tolerance) {
  double worst = 0.0;
  for (int m = 0; m < models; ++m) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(m)));
    Arch arch;
    arch.vocab_size = 4 + rng.below(8);
    arch.dim = 1 + rng.below(8);
    arch.hidden = 1 + rng.below(8);
    arch.num_classes = 2 + static_cast<int>(rng.below(3));
    arch.encoder_present = rng.below(2) == 1;
    Classifier model = init_model(arch, rng.next());
    for (double& w : model.head.weight) w = rng.uniform(-1.0, 1.0);
    for (double& w : model.head.bias) w = rng.uniform(-0.5, 0.5);

    std::vector<Example> batch;
    const std::size_t n = 1 + rng.below(4);
    for (std::size_t i = 0; i < n; ++i) {
      Example ex;
      const std::size_t len = 1 + rng.below(5);
      for (std::size_t k = 0; k < len; ++k) ex.token_ids.push_back(static_cast<TokenId>(1 + rng.below(arch.vocab_size - 1)));
      ex.label = static_cast<int>(rng.below(static_cast<std::uint64_t>(arch.num_classes)));
      batch.push_back(ex);
    }
    const Gradients g = grad(model, batch, {.embedding = true, .head = true});
    const double h = 1e-6;
    auto check = [&](double& param, double analytic) {
      const double saved = param;
      param = saved + h;
      const double up = mean_loss(model, batch);
      param = saved - h;
      const double down = mean_loss(model, batch);
      param = saved;
      const double numeric = (up - down) / (2 * h);
      const double err = std::abs(analytic - numeric) / std::max(1e-7, std::abs(analytic) + std::abs(numeric));
      worst = std::max(worst, err);
    };
    std::map<TokenId, std::size_t> slot;
    for (std::size_t i = 0; i < g.embedding->ids.size(); ++i) slot[g.embedding->ids[i]] = i;
    for (TokenId t = 1; t < arch.vocab_size; ++t) {
      for (std::size_t d = 0; d < arch.dim; ++d) {
        const double analytic = slot.contains(t) ? g.embedding->row(slot[t], arch.dim)[d] : 0.0;
        check(model.embedding.row(t)[d], analytic);
      }
    }
    for (std::size_t i = 0; i < model.head.weight.size(); ++i) check(model.head.weight[i], g.head->weight[i]);
    for (std::size_t i = 0; i < model.head.bias.size(); ++i) check(model.head.bias[i], g.head->bias[i]);
  }
  std::cout << "models=" << models << " worst_relative_error=" << fmt(worst) << " tolerance=" << fmt(tolerance) << "\n";
  return worst <= tolerance ? 0 : 2;
}

// Selection, drift and dimensional unlearning checked against brute-force recomputation.
int run_oracle_check(int seeds, std::size_t records, std::uint64_t seed) {
  Rng rng(seed);
  std::size_t selection_mismatches = 0, rule_violations = 0;
  double drift_err = 0.0;
  for (int s = 0; s < seeds; ++s) {
    std::vector<DriftRecord> recs(records);
    for (std::size_t i = 0; i < records; ++i) recs[i] = {static_cast<TokenId>(i), std::floor(rng.uniform(0.0, 200.0)) / 7.0};
    const double alpha = rng.uniform();
    auto sorted = recs;
    std::stable_sort(sorted.begin(), sorted.end(),
                     [](const DriftRecord& a, const DriftRecord& b) { return a.distance > b.distance; });
    const auto budget = static_cast<std::size_t>(std::floor(alpha * static_cast<double>(records)));
    std::set<TokenId> expected;
    for (const auto& r : sorted) {
      if (expected.size() == budget) break;
      if (!Vocabulary::is_reserved(r.token_id)) expected.insert(r.token_id);
    }
    selection_mismatches += top_alpha(recs, alpha, {kPadId, kUnkId}) == expected ? 0 : 1;

    const std::size_t rows = 5 + rng.below(40), dim = 1 + rng.below(10);
    const Classifier init = init_model(Arch{rows, dim, 4, 2, false}, rng.next());
    Classifier trained = init;
    for (std::size_t r = 1; r < rows; ++r) {
      const double scale = rng.uniform(0.0, 2.0);
      for (double& x : trained.embedding.row(r)) x += scale * rng.normal();
    }
    const auto dist = drift(init.embedding, trained.embedding);
    for (std::size_t r = 0; r < rows; ++r) {
      double ss = 0.0;
      for (std::size_t i = 0; i < dim; ++i) ss += std::pow(trained.embedding.row(r)[i] - init.embedding.row(r)[i], 2);
      drift_err = std::max(drift_err, std::abs(dist[r].distance - std::sqrt(ss)));
    }
    std::set<TokenId> suspects;
    for (std::size_t r = 1; r < rows; ++r) {
      if (rng.uniform() < 0.4) suspects.insert(static_cast<TokenId>(r));
    }
    const auto out = dimensional_unlearn(trained, suspects, init.embedding);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t i = 0; i < dim; ++i) {
        const double b = trained.embedding.row(r)[i];
        const bool replace = suspects.contains(static_cast<TokenId>(r)) &&
                             std::abs(b - init.embedding.row(r)[i]) >= out.report.d_bar;
        const double want = replace ? trained.embedding.row(kPadId)[i] : b;
        rule_violations += out.model.embedding.row(r)[i] == want ? 0 : 1;
      }
    }
  }
  std::cout << "seeds=" << seeds << " selection_mismatches=" << selection_mismatches
            << " drift_max_error=" << fmt(drift_err) << " rule_violations=" << rule_violations << "\n";
  return selection_mismatches == 0 && drift_err <= 1e-12 && rule_violations == 0 ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Backdoor token unlearning lab"};
  app.require_subcommand(1);
  std::string kernel_level = "auto";
  app.add_option("--kernels", kernel_level, "Kernel dispatch level: auto, scalar, avx2, neon");

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Write a synthetic train/dev/test corpus as JSONL");
  std::string gen_out, gen_config;
  std::uint64_t gen_seed = 2024;
  gen->add_option("--out-dir", gen_out, "Output directory")->required();
  gen->add_option("--config", gen_config, "JSON synthetic spec");
  gen->add_option("--seed", gen_seed, "Seed");

  // poison
  auto* poison = app.add_subcommand("poison", "Apply a poison plan to a training file");
  std::string p_train, p_plan, p_out, p_vocab_out, p_vocab_in, p_summary;
  int p_min_freq = 1, p_classes = 0;
  std::uint64_t p_seed = 0;
  bool p_seed_set = false;
  poison->add_option("--train", p_train, "Clean train JSONL")->required();
  poison->add_option("--plan", p_plan, "PoisonPlan JSON")->required();
  poison->add_option("--out", p_out, "Poisoned JSONL output")->required();
  poison->add_option("--vocab-out", p_vocab_out, "Vocabulary JSON output")->required();
  poison->add_option("--summary-out", p_summary, "Write the summary JSON (incl. ground truth ids) here");
  poison->add_option("--vocab", p_vocab_in, "Existing vocabulary (default: build from --train)");
  poison->add_option("--min-freq", p_min_freq, "Vocabulary frequency cutoff");
  poison->add_option("--num-classes", p_classes, "Number of classes (0 = infer)");
  poison->add_option("--seed", p_seed, "Override the plan seed")->each([&](const std::string&) { p_seed_set = true; });

  // train
  auto* trn = app.add_subcommand("train", "Train a classifier checkpoint");
  std::string t_data, t_vocab, t_out, t_init, t_config;
  std::size_t t_dim = 16, t_hidden = 16;
  bool t_no_encoder = false;
  std::uint64_t t_seed = 0;
  int t_classes = 0;
  trn->add_option("--data", t_data, "Training JSONL")->required();
  trn->add_option("--vocab", t_vocab, "Vocabulary JSON")->required();
  trn->add_option("--out", t_out, "Checkpoint stem")->required();
  trn->add_option("--init", t_init, "Start from this checkpoint stem (default: fresh model)");
  trn->add_option("--config", t_config, "TrainConfig JSON");
  trn->add_option("--dim", t_dim, "Embedding dimension");
  trn->add_option("--hidden", t_hidden, "Encoder width");
  trn->add_flag("--no-encoder", t_no_encoder, "Omit the frozen encoder");
  trn->add_option("--seed", t_seed, "Initialization and shuffle seed");
  trn->add_option("--num-classes", t_classes, "Number of classes (0 = infer)");

  // detect
  auto* det = app.add_subcommand("detect", "Three-round backdoor token detection");
  std::string d_data, d_vocab, d_init, d_config, d_out, d_truth;
  double d_alpha = -1.0;
  int d_classes = 0;
  det->add_option("--data", d_data, "Training JSONL")->required();
  det->add_option("--vocab", d_vocab, "Vocabulary JSON")->required();
  det->add_option("--init", d_init, "Initial model checkpoint stem")->required();
  det->add_option("--config", d_config, "DetectConfig JSON");
  det->add_option("--alpha", d_alpha, "Override alpha");
  det->add_option("--out-dir", d_out, "Output directory")->required();
  det->add_option("--num-classes", d_classes, "Number of classes (0 = infer)");
  det->add_option("--ground-truth", d_truth, "JSON with ground_truth_trigger_ids (from poison --summary-out)");

  // unlearn
  auto* unl = app.add_subcommand("unlearn", "Unlearn suspect tokens, optionally fine-tune on clean data");
  std::string u_model, u_init, u_suspects, u_vocab, u_out, u_strategy = "btu_dimensional", u_clean, u_config;
  double u_sigma = 0.1;
  int u_classes = 0;
  unl->add_option("--model", u_model, "Backdoored checkpoint stem")->required();
  unl->add_option("--init", u_init, "Initial checkpoint stem (pre-training embedding)")->required();
  unl->add_option("--suspects", u_suspects, "suspects.json from detect")->required();
  unl->add_option("--vocab", u_vocab, "Vocabulary JSON")->required();
  unl->add_option("--out", u_out, "Output checkpoint stem")->required();
  unl->add_option("--strategy", u_strategy, "btu_dimensional | full_replace | pn | pr1 | pr2");
  unl->add_option("--sigma", u_sigma, "Noise scale for pn");
  unl->add_option("--clean-data", u_clean, "Clean JSONL for fine-tuning");
  unl->add_option("--config", u_config, "UnlearnConfig JSON");
  unl->add_option("--num-classes", u_classes, "Number of classes (0 = infer)");

  // eval
  auto* ev = app.add_subcommand("eval", "Accuracy and attack success rate of a checkpoint");
  std::string e_model, e_vocab, e_test, e_trigger;
  int e_classes = 0;
  ev->add_option("--model", e_model, "Checkpoint stem")->required();
  ev->add_option("--vocab", e_vocab, "Vocabulary JSON")->required();
  ev->add_option("--test", e_test, "Clean test JSONL")->required();
  ev->add_option("--trigger", e_trigger, "TriggerSpec JSON for ASR");
  ev->add_option("--num-classes", e_classes, "Number of classes (0 = infer)");

  // pipeline
  auto* pipe = app.add_subcommand("pipeline", "Run poison, detect, train, unlearn and evaluate end to end");
  std::string pl_config, pl_out;
  std::uint64_t pl_seed = 0;
  bool pl_no_ts = false;
  pipe->add_option("--config", pl_config, "ExperimentConfig JSON (default: desk fixture)");
  pipe->add_option("--seed", pl_seed, "Base seed")->required();
  pipe->add_option("--out-dir", pl_out, "Output directory")->required();
  pipe->add_flag("--no-timestamp", pl_no_ts, "Omit the timestamp field from report.json");

  // ablate
  auto* abl = app.add_subcommand("ablate", "Run a sweep of pipeline arms");
  std::string a_config, a_out, a_sweep, a_kind, a_values;
  std::uint64_t a_seed = 0;
  unsigned a_jobs = 0;
  abl->add_option("--config", a_config, "Base ExperimentConfig JSON");
  abl->add_option("--sweep", a_sweep, "Sweep JSON {\"kind\": ..., \"values\": [...]}");
  abl->add_option("--kind", a_kind, "alpha_values | round_subsets | strategies | poison_rates | token_quantities");
  abl->add_option("--values", a_values, "JSON array of arm values, used with --kind");
  abl->add_option("--seed", a_seed, "Base seed")->required();
  abl->add_option("--out-dir", a_out, "Output directory")->required();
  abl->add_option("--jobs", a_jobs, "Parallel arms (0 = hardware threads)");

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "Compare analytic gradients with central differences");
  int gc_models = 100;
  std::uint64_t gc_seed = 1;
  double gc_tol = 1e-4;
  gc->add_option("--models", gc_models, "Random models to check");
  gc->add_option("--seed", gc_seed, "Seed");
  gc->add_option("--tolerance", gc_tol, "Maximum relative error");

  // oracle-check
  auto* oc = app.add_subcommand("oracle-check", "Check selection, drift and unlearning against brute-force oracles");
  int oc_seeds = 50;
  std::size_t oc_records = 1000;
  std::uint64_t oc_seed = 2;
  oc->add_option("--seeds", oc_seeds, "Random instances");
  oc->add_option("--records", oc_records, "Drift records per selection instance");
  oc->add_option("--seed", oc_seed, "Seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (kernel_level == "scalar") kernels::force_level(kernels::Level::scalar);
    else if (kernel_level == "avx2") kernels::force_level(kernels::Level::avx2);
    else if (kernel_level == "neon") kernels::force_level(kernels::Level::neon);
    else if (kernel_level != "auto") throw ValidationError("unknown kernel level: " + kernel_level);

    if (*gen) {
      SyntheticSpec spec;
      if (!gen_config.empty()) spec = synthetic_spec_from_json(read_json(gen_config));
      write_synthetic(generate_synthetic(spec, gen_seed), gen_out);
      std::cout << "wrote " << gen_out << "/{train,dev,test}.jsonl\n";
    } else if (*poison) {
      PoisonPlan plan = poison_plan_from_json(read_json(p_plan));
      if (p_seed_set) plan.seed = p_seed;
      const Vocabulary vocab =
          p_vocab_in.empty() ? build_vocab(read_jsonl_texts(p_train), p_min_freq) : load_vocab(p_vocab_in);
      const Dataset train = load_jsonl(p_train, vocab, p_classes, Split::train);
      const PoisonedDataset out = apply_poison(train, vocab, plan);
      save_jsonl(out.dataset, p_out);
      save_vocab(out.vocab, p_vocab_out);
      std::size_t poisoned = 0;
      for (const auto& ex : out.dataset.examples) poisoned += ex.meta.is_clean() ? 0 : 1;
      ordered_json summary{{"examples", out.dataset.size()},
                           {"modified", poisoned},
                           {"ground_truth_trigger_ids",
                            std::vector<TokenId>(out.ground_truth_trigger_ids.begin(), out.ground_truth_trigger_ids.end())}};
      if (!p_summary.empty()) write_file_atomic(p_summary, summary.dump(2) + "\n");
      std::cout << summary.dump() << "\n";
    } else if (*trn) {
      const Vocabulary vocab = load_vocab(t_vocab);
      const Dataset data = load_jsonl(t_data, vocab, t_classes, Split::train);
      TrainConfig cfg = default_config().victim;
      cfg.seed = t_seed;
      if (!t_config.empty()) cfg = train_config_from_json(read_json(t_config), cfg);
      Classifier model = t_init.empty()
                             ? init_model(Arch{vocab.size(), t_dim, t_hidden, data.num_classes, !t_no_encoder}, t_seed)
                             : load_checkpoint(t_init);
      if (model.arch.vocab_size != vocab.size()) throw ValidationError("checkpoint vocabulary size differs from --vocab");
      const auto result = train(model, data, cfg);
      save_checkpoint(result.model, t_out);
      std::cout << ordered_json{{"epoch_losses", result.trace.epoch_losses}}.dump() << "\n";
    } else if (*det) {
      const Vocabulary vocab = load_vocab(d_vocab);
      const Dataset data = load_jsonl(d_data, vocab, d_classes, Split::train);
      const Classifier init = load_checkpoint(d_init);
      DetectConfig cfg = default_config().detect;
      if (!d_config.empty()) cfg = detect_config_from_json(read_json(d_config), cfg);
      if (d_alpha >= 0.0) cfg.alpha = d_alpha;
      const DetectResult result = detect(data, init, cfg);
      std::set<TokenId> truth;
      if (!d_truth.empty()) {
        const auto j = read_json(d_truth);
        for (const auto& id : j.is_array() ? j : j.at("ground_truth_trigger_ids")) truth.insert(id.get<TokenId>());
      }
      write_file_atomic(std::filesystem::path(d_out) / "suspects.json", to_json(result.suspects).dump() + "\n");
      std::string csv = "token_id,surface,distance,round,is_ground_truth_trigger\n";
      for (const auto& round : result.rounds) {
        for (const auto& rec : round.drift) {
          csv += std::to_string(rec.token_id) + "," + vocab.surface(rec.token_id) + "," + fmt(rec.distance) + "," +
                 std::to_string(round.round) + "," + (truth.contains(rec.token_id) ? "1" : "0") + "\n";
        }
      }
      write_file_atomic(std::filesystem::path(d_out) / "drift.csv", csv);
      auto out = to_json(result.suspects);
      out["union"] = std::vector<TokenId>(result.suspects.all.begin(), result.suspects.all.end());
      if (!truth.empty()) {
        const auto score = detection_metrics(result.suspects, truth);
        out["precision"] = score.precision;
        out["recall"] = score.recall;
      }
      std::cout << out.dump() << "\n";
    } else if (*unl) {
      const Vocabulary vocab = load_vocab(u_vocab);
      const Classifier backdoored = load_checkpoint(u_model);
      const Classifier init = load_checkpoint(u_init);
      UnlearnConfig cfg = default_config().unlearn;
      if (!u_config.empty()) cfg = unlearn_config_from_json(read_json(u_config), cfg);
      if (unl->count("--strategy") > 0) cfg.strategy = parse_strategy(u_strategy);
      if (unl->count("--sigma") > 0) cfg.sigma = u_sigma;
      cfg.validate();
      const auto suspects = read_suspects(u_suspects);
      UnlearnOutcome outcome = variant_unlearn(backdoored, suspects, init.embedding, &init.embedding, cfg);
      Classifier model = std::move(outcome.model);
      if (!u_clean.empty()) model = clean_finetune(model, load_jsonl(u_clean, vocab, u_classes, Split::dev), cfg.clean_finetune);
      save_checkpoint(model, u_out);
      auto report = to_json(outcome.report, vocab);
      auto report_path = std::filesystem::path(u_out);
      report_path += ".unlearn_report.json";
      write_file_atomic(report_path, report.dump(2) + "\n");
      std::cout << report.dump() << "\n";
    } else if (*ev) {
      const Vocabulary vocab = load_vocab(e_vocab);
      const Classifier model = load_checkpoint(e_model);
      const Dataset test = load_jsonl(e_test, vocab, e_classes, Split::test);
      ordered_json out{{"acc", accuracy(model, test)}};
      if (!e_trigger.empty()) {
        const TriggerSpec spec = trigger_spec_from_json(read_json(e_trigger));
        const Dataset triggered = make_triggered_testset(test, vocab, spec);
        out["asr"] = attack_success_rate(model, triggered, spec.target_label);
      }
      std::cout << out.dump() << "\n";
    } else if (*pipe) {
      ExperimentConfig config = load_experiment(pl_config);
      config.seed = pl_seed;
      config.out_dir = pl_out;
      const auto report = run_pipeline(config);
      if (pl_no_ts) {
        write_file_atomic(std::filesystem::path(pl_out) / "report.json", report_json(report, std::nullopt).dump(2) + "\n");
      }
      std::cout << report_json(report, std::nullopt)["metrics"].dump() << "\n";
    } else if (*abl) {
      ExperimentConfig config = load_experiment(a_config);
      config.seed = a_seed;
      config.out_dir = a_out;
      Sweep sweep;
      if (!a_sweep.empty()) {
        sweep = sweep_from_json(read_json(a_sweep));
      } else if (!a_kind.empty() && !a_values.empty()) {
        json values;
        try {
          values = json::parse(a_values);
        } catch (const json::exception& e) {
          throw ValidationError(std::string("--values: ") + e.what());
        }
        sweep = sweep_from_json({{"kind", a_kind}, {"values", values}});
      } else {
        throw ValidationError("ablate needs --sweep or --kind with --values");
      }
      const auto arms = run_ablation(config, sweep, a_jobs);
      std::cout << ablation_csv(arms);
      for (const auto& arm : arms) {
        if (!arm.report) return 2;
      }
    } else if (*gc) {
      return run_gradcheck(gc_models, gc_seed, gc_tol);
    } else if (*oc) {
      return run_oracle_check(oc_seeds, oc_records, oc_seed);
    }
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const StageError& e) {
    std::cerr << "stage failed: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "failed: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
