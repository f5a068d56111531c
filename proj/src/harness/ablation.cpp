#include <atomic>
#include <iomanip>
#include <sstream>
#include <thread>

#include "btu/error.hpp"
#include "btu/harness.hpp"

namespace btu {

namespace {

// Shortest text that reads back to the same double.
std::string fmt(double x) { return nlohmann::json(x).dump(); }

std::string join_rounds(const std::vector<int>& rounds) {
  std::string out;
  for (const int r : rounds) {
    if (!out.empty()) out += "+";
    out += std::to_string(r);
  }
  return out;
}

std::string dir_name(std::size_t index, const std::string& label) {
  std::ostringstream ss;
  ss << "arm_" << std::setw(2) << std::setfill('0') << index << "_";
  for (const char c : label) ss << (std::isalnum(static_cast<unsigned char>(c)) || c == '.' ? c : '_');
  return ss.str();
}

struct Arm {
  std::string label;
  ExperimentConfig config;
};

std::vector<Arm> expand(const ExperimentConfig& base, const Sweep& sweep) {
  std::vector<Arm> arms;
  auto push = [&](std::string label, auto&& edit) {
    ExperimentConfig c = base;
    edit(c);
    arms.push_back({std::move(label), std::move(c)});
  };
  switch (sweep.kind) {
    case SweepKind::alpha_values:
      for (const double a : sweep.alphas) push("alpha=" + fmt(a), [&](ExperimentConfig& c) { c.detect.alpha = a; });
      break;
    case SweepKind::round_subsets:
      for (const auto& rounds : sweep.round_subsets) {
        push("rounds=" + join_rounds(rounds), [&](ExperimentConfig& c) { c.detect.rounds = rounds; });
      }
      break;
    case SweepKind::strategies:
      for (const auto s : sweep.strategies) {
        push(std::string(to_string(s)), [&](ExperimentConfig& c) { c.unlearn.strategy = s; });
      }
      break;
    case SweepKind::poison_rates:
      if (!base.poison) throw ValidationError("poison_rates sweep needs a poison plan");
      for (const double r : sweep.poison_rates) {
        push("rate=" + fmt(r), [&](ExperimentConfig& c) {
          for (auto& spec : c.poison->specs) spec.rate = r;
        });
      }
      break;
    case SweepKind::token_quantities:
      if (!base.poison) throw ValidationError("token_quantities sweep needs a poison plan");
      for (const bool clean : sweep.clean_insert) {
        push(clean ? "clean_insert" : "poisoned_insert", [&](ExperimentConfig& c) { c.poison->clean_insert = clean; });
      }
      break;
  }
  if (arms.empty()) throw ValidationError("sweep has no arms");
  return arms;
}

}  // namespace

SweepKind parse_sweep_kind(const std::string& s) {
  if (s == "alpha_values" || s == "alpha") return SweepKind::alpha_values;
  if (s == "round_subsets" || s == "rounds") return SweepKind::round_subsets;
  if (s == "strategies" || s == "strategy") return SweepKind::strategies;
  if (s == "poison_rates" || s == "rates") return SweepKind::poison_rates;
  if (s == "token_quantities") return SweepKind::token_quantities;
  throw ValidationError("unknown sweep kind: " + s);
}

Sweep sweep_from_json(const nlohmann::json& j) {
  try {
    Sweep s;
    s.kind = parse_sweep_kind(j.at("kind").get<std::string>());
    const auto& values = j.at("values");
    switch (s.kind) {
      case SweepKind::alpha_values: s.alphas = values.get<std::vector<double>>(); break;
      case SweepKind::round_subsets: s.round_subsets = values.get<std::vector<std::vector<int>>>(); break;
      case SweepKind::strategies:
        for (const auto& v : values) s.strategies.push_back(parse_strategy(v.get<std::string>()));
        break;
      case SweepKind::poison_rates: s.poison_rates = values.get<std::vector<double>>(); break;
      case SweepKind::token_quantities: s.clean_insert = values.get<std::vector<bool>>(); break;
    }
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("sweep: ") + e.what());
  }
}

std::vector<ArmResult> run_ablation(const ExperimentConfig& base, const Sweep& sweep, unsigned jobs) {
  std::vector<Arm> arms = expand(base, sweep);
  for (std::size_t i = 0; i < arms.size(); ++i) {
    arms[i].config.out_dir = base.out_dir.empty() ? std::filesystem::path{} : base.out_dir / dir_name(i, arms[i].label);
    arms[i].config.validate();
  }

  std::vector<ArmResult> results(arms.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < arms.size(); i = next++) {
      results[i].label = arms[i].label;
      try {
        results[i].report = run_pipeline(arms[i].config);
      } catch (const std::exception& e) {
        results[i].error = e.what();
      }
    }
  };
  if (jobs == 0) jobs = std::max(1u, std::thread::hardware_concurrency());
  jobs = std::min<unsigned>(jobs, static_cast<unsigned>(arms.size()));
  std::vector<std::jthread> pool;
  for (unsigned t = 1; t < jobs; ++t) pool.emplace_back(worker);
  worker();
  pool.clear();

  if (!base.out_dir.empty()) write_file_atomic(base.out_dir / "ablation.csv", ablation_csv(results));
  return results;
}

std::string ablation_csv(const std::vector<ArmResult>& arms) {
  std::string out =
      "arm,label,status,acc_before_attack,asr_before_attack,acc_attack,asr_attack,acc_defense,asr_defense,"
      "detect_precision,detect_recall,suspects,btp_drift,ctp_drift,d_bar,replaced_dims,error\n";
  for (std::size_t i = 0; i < arms.size(); ++i) {
    const auto& a = arms[i];
    out += std::to_string(i) + "," + a.label + ",";
    if (!a.report) {
      std::string err = a.error;
      std::replace(err.begin(), err.end(), ',', ';');
      std::replace(err.begin(), err.end(), '\n', ' ');
      out += "failed,,,,,,,,,,,,,," + err + "\n";
      continue;
    }
    const auto& r = *a.report;
    auto opt = [](const std::optional<Metrics>& m, bool acc) {
      if (!m) return std::string();
      if (acc) return fmt(m->acc);
      return m->per_trigger.empty() ? std::string() : fmt(m->asr);
    };
    const auto& curves = r.curves_embedding_only;
    out += "ok," + opt(r.before_attack, true) + "," + opt(r.before_attack, false) + "," + fmt(r.after_attack.acc) + "," +
           (r.after_attack.per_trigger.empty() ? std::string() : fmt(r.after_attack.asr)) + "," +
           opt(r.after_defense, true) + "," + opt(r.after_defense, false) + "," + fmt(r.detection.precision) + "," +
           fmt(r.detection.recall) + "," + std::to_string(r.suspects.all.size()) + "," +
           (curves.btp.empty() ? std::string() : fmt(curves.btp.back())) + "," +
           (curves.ctp.empty() ? std::string() : fmt(curves.ctp.back())) + "," + fmt(r.unlearn.d_bar) + "," +
           std::to_string(r.unlearn.replaced_dims_total) + ",\n";
  }
  return out;
}

}  // namespace btu
