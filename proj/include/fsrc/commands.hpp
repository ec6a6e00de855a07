#pragma once

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "fsrc/config.hpp"
#include "fsrc/experiment.hpp"
#include "fsrc/io.hpp"

namespace fsrc {

namespace fs = std::filesystem;

inline constexpr const char* kToolVersion = "1.0.0";

/// Root used when a command is not given --out: $FSRC_OUT_ROOT or ./runs.
inline fs::path default_output_root() {
  if (const char* env = std::getenv("FSRC_OUT_ROOT"); env && *env) return fs::path(env);
  return fs::path("runs");
}

inline fs::path resolve_out(const std::optional<std::string>& out, const std::string& command) {
  return out ? fs::path(*out) : default_output_root() / command;
}

inline std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

/// Replay record written next to every command's outputs.
struct ExperimentManifest {
  std::string command;
  ExperimentConfig config;
  std::uint64_t seed = 0;
  std::map<std::string, std::string> inputs;
  std::map<std::string, std::string> outputs;
  std::string started;
  std::string finished;

  json to_json() const {
    json j = {{"format", "fsrc-manifest"}, {"version", kManifestFormatVersion}, {"tool_version", kToolVersion}};
    j["command"] = command;
    j["seed"] = seed;
    j["config"] = config_to_map(config);
    j["inputs"] = inputs;
    j["outputs"] = outputs;
    j["started"] = started;
    j["finished"] = finished;
    return j;
  }
};

/// Writes a file and records it in the manifest under `key`.
inline void emit(ExperimentManifest& m, const fs::path& dir, const std::string& name, const std::string& text) {
  write_text_file(dir / name, text);
  m.outputs[name] = (dir / name).string();
}

inline void finish_manifest(ExperimentManifest& m, const fs::path& dir) {
  m.finished = utc_timestamp();
  write_text_file(dir / "manifest.json", m.to_json().dump(2) + "\n");
}

/// Resolved configuration: defaults, then the optional file, then a seed override.
inline ExperimentConfig resolve_config(const std::optional<std::string>& config_path,
                                       std::optional<std::uint64_t> seed) {
  ExperimentConfig cfg;
  if (config_path) cfg = load_config_file(*config_path);
  if (seed) cfg = cfg.with_seed(*seed);
  cfg.validate();
  return cfg;
}

/// Experiment config whose dataset section is taken from a loaded dataset.
inline ExperimentConfig adopt_dataset(ExperimentConfig cfg, const Dataset& ds) {
  cfg.dataset = ds.config;
  cfg.validate();
  return cfg;
}

inline void check_compatible(const DetectionModel& model, const ExperimentConfig& cfg, const std::string& what) {
  const ModelDims want = cfg.dims();
  const ModelDims& got = model.dims();
  if (got.input != want.input || got.num_classes != want.num_classes) {
    throw PreconditionError(what + ": checkpoint expects " + std::to_string(got.input) + "-d features and " +
                            std::to_string(got.num_classes) + " classes, dataset has " + std::to_string(want.input) +
                            " and " + std::to_string(want.num_classes));
  }
}

// ---------------------------------------------------------------------------

struct GenDataOptions {
  std::optional<std::string> config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
};

inline fs::path cmd_gen_data(const GenDataOptions& o) {
  ExperimentManifest m;
  m.command = "gen-data";
  m.started = utc_timestamp();
  m.config = resolve_config(o.config, o.seed);
  m.seed = m.config.dataset.seed;
  if (o.config) m.inputs["config"] = *o.config;
  const fs::path dir = resolve_out(o.out, "gen-data");
  const Dataset ds = generate_dataset(m.config.dataset);
  emit(m, dir, "dataset.jsonl", serialize_dataset(ds));
  finish_manifest(m, dir);
  return dir / "dataset.jsonl";
}

// ---------------------------------------------------------------------------

struct TrainOptions {
  std::optional<std::string> config;
  std::string dataset;
  std::optional<std::string> mode;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::string> base_checkpoint;
};

struct TrainOutcome {
  fs::path dir;
  TrainState state;
  DetectionModel model;
};

inline TrainOutcome cmd_train(const TrainOptions& o) {
  ExperimentManifest m;
  m.command = "train";
  m.started = utc_timestamp();
  ExperimentConfig cfg;
  if (o.config) cfg = load_config_file(*o.config);
  if (o.seed) cfg.train.seed = *o.seed;
  if (o.mode) cfg.train.contrastive_mode = parse_contrastive_mode(*o.mode);
  const Dataset ds = load_dataset(o.dataset);
  cfg = adopt_dataset(cfg, ds);
  m.config = cfg;
  m.seed = cfg.train.seed;
  m.inputs["dataset"] = o.dataset;
  if (o.config) m.inputs["config"] = *o.config;
  const fs::path dir = resolve_out(o.out, "train");

  DetectionModel base;
  if (o.base_checkpoint) {
    base = load_checkpoint(*o.base_checkpoint);
    check_compatible(base, cfg, "train");
    m.inputs["base_checkpoint"] = *o.base_checkpoint;
  } else {
    TrainState pre;
    base = pretrain_model(ds, cfg, &pre);
    emit(m, dir, "base_checkpoint.json", serialize_checkpoint(base));
    emit(m, dir, "base_loss_history.csv", loss_history_csv(pre.loss_history));
  }

  TrainOutcome r{dir, {}, base};
  const auto kshot = kshot_split(ds, cfg);
  r.state = run_finetune(r.model, kshot, cfg.train, ds.config.catalog());
  emit(m, dir, "checkpoint.json", serialize_checkpoint(r.model));
  emit(m, dir, "loss_history.csv", loss_history_csv(r.state.loss_history));
  emit(m, dir, "histogram.csv", histogram_csv(export_replication_histogram(r.state.pair_counter, ds.config.catalog())));
  emit(m, dir, "group.json", serialize_group(r.state.group.value_or(ResemblanceGroup{})));
  for (const auto& w : r.state.warnings) std::cerr << "warning: " << w << "\n";
  finish_manifest(m, dir);
  return r;
}

// ---------------------------------------------------------------------------

struct EvalOptions {
  std::optional<std::string> config;
  std::string checkpoint;
  std::string dataset;
  std::optional<std::string> group;
  std::optional<std::string> out;
};

struct EvalOutcome {
  APReport ap;
  DistanceReport distance;
};

inline EvalOutcome cmd_eval(const EvalOptions& o) {
  ExperimentManifest m;
  m.command = "eval";
  m.started = utc_timestamp();
  ExperimentConfig cfg;
  if (o.config) cfg = load_config_file(*o.config);
  const DetectionModel model = load_checkpoint(o.checkpoint);
  const Dataset ds = load_dataset(o.dataset);
  cfg = adopt_dataset(cfg, ds);
  check_compatible(model, cfg, "eval");
  m.config = cfg;
  m.seed = cfg.dataset.seed;
  m.inputs["checkpoint"] = o.checkpoint;
  m.inputs["dataset"] = o.dataset;
  ResemblanceGroup group;
  if (o.group) {
    group = parse_group(read_text_file(*o.group));
    m.inputs["group"] = *o.group;
  }
  const fs::path dir = resolve_out(o.out, "eval");
  const auto catalog = ds.config.catalog();
  EvalOutcome r;
  r.ap = evaluate_ap(model, ds.test, catalog, cfg.eval);
  r.distance = distance_report(model, ds.test, group, catalog);
  emit(m, dir, "ap_report.csv", ap_report_csv(r.ap, catalog));
  emit(m, dir, "distance_report.csv", distance_report_csv(r.distance));
  json summary = ap_report_json(r.ap);
  summary["mean_within_group"] = r.distance.mean_within_group;
  summary["mean_outside_group"] = r.distance.mean_outside_group;
  summary["notes"] = r.distance.notes;
  emit(m, dir, "summary.json", summary.dump(2) + "\n");
  finish_manifest(m, dir);
  return r;
}

// ---------------------------------------------------------------------------
// Paired comparison

struct ArmResult {
  APReport ap;
  double within = 0.0;
  std::size_t group_size = 0;
};

struct PairedRow {
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  ArmResult a, b;
};

/// One seed: shared dataset, pretrained model and K-shot split, then both arms.
inline PairedRow paired_run(const ExperimentConfig& base_cfg, std::uint64_t seed, ContrastiveMode arm_a,
                            ContrastiveMode arm_b) {
  PairedRow row;
  row.seed = seed;
  try {
    const ExperimentConfig cfg = base_cfg.with_seed(seed);
    const Dataset ds = generate_dataset(cfg.dataset);
    const DetectionModel pre = pretrain_model(ds, cfg);
    const auto kshot = kshot_split(ds, cfg);
    auto arm = [&](ContrastiveMode mode) {
      const RunResult r = finetune_and_evaluate(pre, ds, kshot, cfg, mode);
      return ArmResult{r.ap, r.distance.mean_within_group, r.state.group ? r.state.group->classes.size() : 0};
    };
    row.a = arm(arm_a);
    row.b = arm(arm_b);
    row.ok = true;
  } catch (const std::exception& e) {
    row.error = e.what();
  }
  return row;
}

/// Two-sided exact sign test p-value for `wins` of `n` non-tied trials.
inline double sign_test_p(int wins, int n) {
  if (n == 0) return 1.0;
  const int k = std::min(wins, n - wins);
  double tail = 0.0;
  for (int i = 0; i <= k; ++i) {
    tail += std::exp(std::lgamma(n + 1.0) - std::lgamma(i + 1.0) - std::lgamma(n - i + 1.0) - n * std::log(2.0));
  }
  return std::min(1.0, 2.0 * tail);
}

struct CompareSummary {
  std::vector<PairedRow> rows;
  /// Seeds where arm b's novel std is at most arm a's.
  int std_novel_not_worse = 0;
  /// Seeds where arm b's within-group distance is strictly larger.
  int within_larger = 0;
  int completed = 0;
  double mean_std_novel_a = 0, mean_std_novel_b = 0;
  double mean_map_novel_a = 0, mean_map_novel_b = 0;
  double mean_within_a = 0, mean_within_b = 0;
};

inline CompareSummary summarize(std::vector<PairedRow> rows) {
  CompareSummary s;
  s.rows = std::move(rows);
  for (const auto& r : s.rows) {
    if (!r.ok) continue;
    ++s.completed;
    if (r.b.ap.std_novel <= r.a.ap.std_novel) ++s.std_novel_not_worse;
    if (r.b.within > r.a.within) ++s.within_larger;
    s.mean_std_novel_a += r.a.ap.std_novel;
    s.mean_std_novel_b += r.b.ap.std_novel;
    s.mean_map_novel_a += r.a.ap.map50_novel;
    s.mean_map_novel_b += r.b.ap.map50_novel;
    s.mean_within_a += r.a.within;
    s.mean_within_b += r.b.within;
  }
  if (s.completed > 0) {
    const double n = s.completed;
    for (double* v : {&s.mean_std_novel_a, &s.mean_std_novel_b, &s.mean_map_novel_a, &s.mean_map_novel_b,
                      &s.mean_within_a, &s.mean_within_b}) {
      *v /= n;
    }
  }
  return s;
}

inline std::string compare_csv(const CompareSummary& s) {
  std::string out =
      "kind,seed,status,map50_novel_a,map50_novel_b,delta_map50_novel,map50_all_a,map50_all_b,delta_map50_all,"
      "std_novel_a,std_novel_b,delta_std_novel,std_all_a,std_all_b,delta_std_all,within_a,within_b,delta_within,"
      "group_size_b,std_novel_wins,within_wins,sign_p_std_novel,sign_p_within\n";
  const auto f = format_double;
  double sums[15] = {};
  for (const auto& r : s.rows) {
    if (!r.ok) {
      out += "seed," + std::to_string(r.seed) + ",failed,,,,,,,,,,,,,,,,,,,,\n";
      continue;
    }
    const double v[15] = {r.a.ap.map50_novel, r.b.ap.map50_novel, r.b.ap.map50_novel - r.a.ap.map50_novel,
                          r.a.ap.map50_all,   r.b.ap.map50_all,   r.b.ap.map50_all - r.a.ap.map50_all,
                          r.a.ap.std_novel,   r.b.ap.std_novel,   r.b.ap.std_novel - r.a.ap.std_novel,
                          r.a.ap.std_all,     r.b.ap.std_all,     r.b.ap.std_all - r.a.ap.std_all,
                          r.a.within,         r.b.within,         r.b.within - r.a.within};
    out += "seed," + std::to_string(r.seed) + ",ok";
    for (int i = 0; i < 15; ++i) {
      out += "," + f(v[i]);
      sums[i] += v[i];
    }
    out += "," + std::to_string(r.b.group_size) + ",,,,\n";
  }
  out += "aggregate,," + std::string(s.completed == static_cast<int>(s.rows.size()) ? "ok" : "partial");
  for (double sum : sums) out += "," + (s.completed ? f(sum / s.completed) : std::string());
  out += ",," + std::to_string(s.std_novel_not_worse) + "/" + std::to_string(s.completed) + "," +
         std::to_string(s.within_larger) + "/" + std::to_string(s.completed) + "," +
         f(sign_test_p(s.std_novel_not_worse, s.completed)) + "," + f(sign_test_p(s.within_larger, s.completed)) + "\n";
  return out;
}

inline std::string compare_per_class_csv(const CompareSummary& s, const ClassCatalog& catalog) {
  std::string out = "seed,class_id,split,ap50_a,ap50_b,delta\n";
  for (const auto& r : s.rows) {
    if (!r.ok) continue;
    for (const auto& [c, ap_a] : r.a.ap.per_class_ap50) {
      const auto it = r.b.ap.per_class_ap50.find(c);
      if (it == r.b.ap.per_class_ap50.end()) continue;
      out += std::to_string(r.seed) + "," + std::to_string(c) + "," + split_name(catalog, c) + "," + format_double(ap_a) +
             "," + format_double(it->second) + "," + format_double(it->second - ap_a) + "\n";
    }
  }
  return out;
}

struct CompareOptions {
  std::optional<std::string> config;
  std::optional<std::vector<std::uint64_t>> seeds;
  std::optional<std::string> out;
  std::string arm_a = "gcl";
  std::string arm_b = "fsrc";
};

struct CompareOutcome {
  CompareSummary summary;
  bool complete = false;
};

inline CompareOutcome cmd_compare(const CompareOptions& o) {
  ExperimentManifest m;
  m.command = "compare";
  m.started = utc_timestamp();
  ExperimentConfig cfg = resolve_config(o.config, std::nullopt);
  if (o.seeds) cfg.compare.seeds = *o.seeds;
  if (cfg.compare.seeds.size() < 2) throw PreconditionError("compare: at least 2 seeds are required");
  m.config = cfg;
  m.seed = cfg.compare.seeds.front();
  if (o.config) m.inputs["config"] = *o.config;
  m.inputs["arm_a"] = o.arm_a;
  m.inputs["arm_b"] = o.arm_b;
  const ContrastiveMode a = parse_contrastive_mode(o.arm_a);
  const ContrastiveMode b = parse_contrastive_mode(o.arm_b);
  const fs::path dir = resolve_out(o.out, "compare");

  std::vector<PairedRow> rows;
  for (std::uint64_t seed : cfg.compare.seeds) {
    rows.push_back(paired_run(cfg, seed, a, b));
    if (!rows.back().ok) std::cerr << "seed " << seed << " failed: " << rows.back().error << "\n";
  }
  CompareOutcome r{summarize(std::move(rows))};
  r.complete = r.summary.completed == static_cast<int>(r.summary.rows.size());
  emit(m, dir, "compare.csv", compare_csv(r.summary));
  emit(m, dir, "compare_per_class.csv", compare_per_class_csv(r.summary, cfg.dataset.catalog()));
  finish_manifest(m, dir);
  return r;
}

// ---------------------------------------------------------------------------
// One-dimensional hyperparameter sweeps

struct AblationRow {
  std::string section;
  double milestone = 0;
  double iou_threshold = 0;
  long rep_threshold = 0;
  double map50_novel = 0;
  double std_novel = 0;
};

inline std::vector<AblationRow> run_ablation(const ExperimentConfig& cfg) {
  const Dataset ds = generate_dataset(cfg.dataset);
  const DetectionModel pre = pretrain_model(ds, cfg);
  const auto kshot = kshot_split(ds, cfg);
  const auto& a = cfg.ablation;
  std::vector<AblationRow> rows;
  auto run = [&](const std::string& section, double im, double th_iou, long th_rep) {
    ExperimentConfig c = cfg;
    c.train.milestone = im;
    c.train.group_iou_threshold = th_iou;
    c.train.rep_threshold = th_rep;
    const RunResult r = finetune_and_evaluate(pre, ds, kshot, c, ContrastiveMode::Fsrc);
    rows.push_back({section, im, th_iou, th_rep, r.ap.map50_novel, r.ap.std_novel});
  };
  for (double im : a.milestones) run("milestone", im, a.fixed_iou_threshold, a.fixed_rep_threshold);
  for (double t : a.iou_thresholds) run("iou_threshold", a.fixed_milestone, t, a.fixed_rep_threshold);
  for (long t : a.rep_thresholds) run("rep_threshold", a.fixed_milestone, a.fixed_iou_threshold, t);
  return rows;
}

inline std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::string out = "section,I_m,Th_IoU,Th_Rep,nAP50,std_novel\n";
  for (const auto& r : rows) {
    out += r.section + "," + format_double(r.milestone) + "," + format_double(r.iou_threshold) + "," +
           std::to_string(r.rep_threshold) + "," + format_double(r.map50_novel) + "," + format_double(r.std_novel) + "\n";
  }
  return out;
}

struct AblateOptions {
  std::optional<std::string> config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
};

inline std::vector<AblationRow> cmd_ablate(const AblateOptions& o) {
  ExperimentManifest m;
  m.command = "ablate";
  m.started = utc_timestamp();
  m.config = resolve_config(o.config, o.seed);
  m.seed = m.config.train.seed;
  if (o.config) m.inputs["config"] = *o.config;
  const fs::path dir = resolve_out(o.out, "ablate");
  auto rows = run_ablation(m.config);
  emit(m, dir, "ablation.csv", ablation_csv(rows));
  finish_manifest(m, dir);
  return rows;
}

}  // namespace fsrc
