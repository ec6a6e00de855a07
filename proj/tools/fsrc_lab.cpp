#include <CLI11.hpp>
#include <iostream>

#include "fsrc/commands.hpp"

namespace {

std::optional<std::string> opt(const std::string& s) {
  if (s.empty()) return std::nullopt;
  return s;
}

std::optional<std::uint64_t> opt_seed(const CLI::Option* o, std::uint64_t v) {
  if (o->count() == 0) return std::nullopt;
  return v;
}

/// Prints the fully resolved configuration when --print-config was given.
bool maybe_print(bool print, const std::string& config, std::optional<std::uint64_t> seed) {
  if (!print) return false;
  std::cout << fsrc::dump_config(fsrc::resolve_config(opt(config), seed));
  return true;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Few-shot detection lab with refined contrastive learning on a synthetic proposal world"};
  app.require_subcommand(1);
  app.set_version_flag("--version", fsrc::kToolVersion);

  std::string config, out, dataset, checkpoint, base_checkpoint, group, mode, arm_a = "gcl", arm_b = "fsrc";
  std::uint64_t seed = 0;
  std::vector<std::uint64_t> seeds;
  bool print_config = false;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", config, "INI config file; unspecified keys keep their defaults")
        ->check(CLI::ExistingFile);
    sub->add_option("--out", out, "Output directory (default: $FSRC_OUT_ROOT/<command>, or runs/<command>)");
    sub->add_flag("--print-config", print_config, "Print the resolved config and exit");
  };

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset file");
  common(gen);
  auto* gen_seed = gen->add_option("--seed", seed, "Override the dataset and training seed");

  auto* train = app.add_subcommand("train", "Base pre-training (or load) then K-shot fine-tuning");
  common(train);
  auto* train_seed = train->add_option("--seed", seed, "Override the training seed");
  train->add_option("--dataset", dataset, "Dataset file from gen-data")->required();
  train->add_option("--mode", mode, "Contrastive mode")->check(CLI::IsMember({"none", "gcl", "fsrc"}));
  train->add_option("--base-checkpoint", base_checkpoint, "Skip pre-training and start from this checkpoint");

  auto* eval = app.add_subcommand("eval", "AP50 and embedding-distance reports for a checkpoint");
  common(eval);
  eval->add_option("--checkpoint", checkpoint, "Checkpoint to evaluate")->required();
  eval->add_option("--dataset", dataset, "Dataset file; its test split is scored")->required();
  eval->add_option("--group", group, "Resemblance group file for the distance report");

  auto* cmp = app.add_subcommand("compare", "Paired runs of two contrastive modes over several seeds");
  common(cmp);
  cmp->add_option("--seeds", seeds, "Seeds to run (overrides compare.seeds)")->delimiter(',');
  cmp->add_option("--arm-a", arm_a, "Reference arm")->check(CLI::IsMember({"none", "gcl", "fsrc"}));
  cmp->add_option("--arm-b", arm_b, "Treatment arm")->check(CLI::IsMember({"none", "gcl", "fsrc"}));

  auto* abl = app.add_subcommand("ablate", "Milestone, IoU-threshold and replication-threshold sweeps");
  common(abl);
  auto* abl_seed = abl->add_option("--seed", seed, "Override the dataset and training seed");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      if (maybe_print(print_config, config, opt_seed(gen_seed, seed))) return 0;
      const auto path = fsrc::cmd_gen_data({opt(config), opt_seed(gen_seed, seed), opt(out)});
      std::cout << "wrote " << path.string() << "\n";
    } else if (train->parsed()) {
      if (maybe_print(print_config, config, opt_seed(train_seed, seed))) return 0;
      const auto r = fsrc::cmd_train({opt(config), dataset, opt(mode), opt_seed(train_seed, seed), opt(out),
                                      opt(base_checkpoint)});
      std::cout << "wrote " << r.dir.string() << "\n";
    } else if (eval->parsed()) {
      if (maybe_print(print_config, config, std::nullopt)) return 0;
      const auto r = fsrc::cmd_eval({opt(config), checkpoint, dataset, opt(group), opt(out)});
      std::cout << "mAP50 base " << r.ap.map50_base << " novel " << r.ap.map50_novel << " all " << r.ap.map50_all
                << " | std novel " << r.ap.std_novel << " all " << r.ap.std_all << "\n";
    } else if (cmp->parsed()) {
      if (maybe_print(print_config, config, std::nullopt)) return 0;
      fsrc::CompareOptions o{opt(config), std::nullopt, opt(out), arm_a, arm_b};
      if (!seeds.empty()) o.seeds = seeds;
      const auto r = fsrc::cmd_compare(o);
      const auto& s = r.summary;
      std::cout << "std_novel " << arm_b << " <= " << arm_a << " in " << s.std_novel_not_worse << "/" << s.completed
                << " seeds (mean " << s.mean_std_novel_b << " vs " << s.mean_std_novel_a << ")\n"
                << "within-group distance larger in " << s.within_larger << "/" << s.completed << " seeds\n"
                << "novel mAP50 mean " << s.mean_map_novel_b << " vs " << s.mean_map_novel_a << "\n";
      if (!r.complete) return 2;
    } else if (abl->parsed()) {
      if (maybe_print(print_config, config, opt_seed(abl_seed, seed))) return 0;
      const auto rows = fsrc::cmd_ablate({opt(config), opt_seed(abl_seed, seed), opt(out)});
      std::cout << fsrc::ablation_csv(rows);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
