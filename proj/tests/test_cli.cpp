#include <gtest/gtest.h>
#include <unistd.h>

#include <boost/algorithm/string.hpp>
#include <filesystem>

#include "fsrc/commands.hpp"
#include "proc_util.hpp"

using namespace fsrc;
namespace fs = std::filesystem;

namespace {

using fsrc::testing::Proc;

Proc run(const std::string& args) { return fsrc::testing::run_command(std::string(FSRC_LAB_PATH) + " " + args); }

std::string smoke_config() { return std::string(FSRC_SOURCE_DIR) + "/configs/smoke.ini"; }

std::vector<std::vector<std::string>> read_csv(const fs::path& path) {
  std::vector<std::string> lines;
  const std::string text = read_text_file(path);
  boost::split(lines, text, boost::is_any_of("\n"));
  std::vector<std::vector<std::string>> rows;
  for (const auto& l : lines) {
    if (l.empty()) continue;
    std::vector<std::string> cells;
    boost::split(cells, l, boost::is_any_of(","));
    rows.push_back(std::move(cells));
  }
  return rows;
}

std::size_t column(const std::vector<std::vector<std::string>>& rows, const std::string& name) {
  const auto& h = rows.at(0);
  const auto it = std::find(h.begin(), h.end(), name);
  if (it == h.end()) throw std::runtime_error("missing column " + name);
  return static_cast<std::size_t>(it - h.begin());
}

/// Scratch directory shared by the suite; a dataset and one fsrc training run are made once.
class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = fs::temp_directory_path() / ("fsrc_cli_" + std::to_string(::getpid()));
    fs::remove_all(root_);
    fs::create_directories(root_);
    const auto g = run("gen-data --config " + smoke_config() + " --out " + (root_ / "data").string());
    ASSERT_EQ(g.status, 0) << g.output;
    const auto t = run("train --config " + smoke_config() + " --dataset " + dataset() + " --mode fsrc --out " +
                       (root_ / "fsrc").string());
    ASSERT_EQ(t.status, 0) << t.output;
  }

  static void TearDownTestSuite() { fs::remove_all(root_); }

  static std::string dataset() { return (root_ / "data" / "dataset.jsonl").string(); }
  static fs::path dir(const std::string& name) { return root_ / name; }

  static fs::path root_;
};

fs::path Cli::root_;

}  // namespace

TEST(Config, RoundTripThroughText) {
  ExperimentConfig c;
  c.train.lr = 0.0123456789012345;
  c.train.contrastive_mode = ContrastiveMode::GclOnly;
  c.train.group_update = GroupUpdate::Continuous;
  c.train.include_background = false;
  c.dataset.confusable_pairs = {{12, 3, 20.5}};
  c.ablation.milestones = {0.1, 0.9};
  c.compare.seeds = {7, 8, 9};
  const auto back = parse_config(dump_config(c));
  EXPECT_EQ(config_to_map(back), config_to_map(c));
  EXPECT_EQ(back.train.lr, c.train.lr);
  EXPECT_EQ(back.dataset.confusable_pairs, c.dataset.confusable_pairs);
}

TEST(Config, UnknownKeyRejectedByName) {
  try {
    parse_config("[train]\nlearning_rate = 0.1\n");
    FAIL();
  } catch (const PreconditionError& e) {
    EXPECT_NE(std::string(e.what()).find("train.learning_rate"), std::string::npos);
  }
  EXPECT_THROW(parse_config("[trainer]\nlr = 0.1\n"), PreconditionError);
  EXPECT_THROW(parse_config("[train]\nlr = fast\n"), PreconditionError);
  EXPECT_THROW(parse_config("[train]\nmilestone = 1.5\n"), PreconditionError);
}

TEST(Checkpoint, BitExactRoundTrip) {
  const auto m = DetectionModel::initialized(ModelDims{7, 5, 3, 2}, 99);
  const auto back = parse_checkpoint(serialize_checkpoint(m));
  EXPECT_TRUE(back == m);
  EXPECT_EQ(serialize_checkpoint(back), serialize_checkpoint(m));
}

TEST(Checkpoint, TamperedShapeRejected) {
  auto j = json::parse(serialize_checkpoint(DetectionModel::initialized(ModelDims{7, 5, 3, 2}, 99)));
  j["dims"]["hidden"] = 6;
  EXPECT_THROW(parse_checkpoint(j.dump()), Error);
}

TEST(Group, RoundTrip) {
  ResemblanceGroup g;
  g.classes = {0, 4, 13};
  EXPECT_EQ(parse_group(serialize_group(g)).classes, g.classes);
}

TEST(SignTest, KnownValues) {
  EXPECT_DOUBLE_EQ(sign_test_p(5, 10), 1.0);
  EXPECT_NEAR(sign_test_p(10, 10), 2.0 / 1024.0, 1e-15);
  EXPECT_NEAR(sign_test_p(0, 10), 2.0 / 1024.0, 1e-15);
  EXPECT_NEAR(sign_test_p(8, 10), 2.0 * 56.0 / 1024.0, 1e-14);
}

TEST_F(Cli, PrintConfigMatchesResolvedConfig) {
  const auto p = run("gen-data --config " + smoke_config() + " --seed 5 --print-config");
  ASSERT_EQ(p.status, 0) << p.output;
  const auto printed = parse_config(p.output);
  EXPECT_EQ(config_to_map(printed), config_to_map(load_config_file(smoke_config()).with_seed(5)));
}

TEST_F(Cli, UnknownConfigKeyFailsWithName) {
  const auto bad = dir("bad.ini");
  write_text_file(bad, "[train]\nlr = 0.01\nmomentun = 0.9\n");
  const auto p = run("gen-data --config " + bad.string() + " --out " + dir("bad").string());
  EXPECT_NE(p.status, 0);
  EXPECT_NE(p.output.find("train.momentun"), std::string::npos) << p.output;
}

TEST_F(Cli, GenDataIsByteIdenticalAcrossRuns) {
  const auto p = run("gen-data --config " + smoke_config() + " --out " + dir("data2").string());
  ASSERT_EQ(p.status, 0) << p.output;
  EXPECT_EQ(read_text_file(dir("data2") / "dataset.jsonl"), read_text_file(dataset()));
  const auto q = run("gen-data --config " + smoke_config() + " --seed 2 --out " + dir("data3").string());
  ASSERT_EQ(q.status, 0) << q.output;
  EXPECT_NE(read_text_file(dir("data3") / "dataset.jsonl"), read_text_file(dataset()));
}

TEST_F(Cli, DatasetReloadsToSameScenes) {
  const Dataset ds = load_dataset(dataset());
  EXPECT_EQ(serialize_dataset(ds), read_text_file(dataset()));
  EXPECT_EQ(serialize_dataset(generate_dataset(load_config_file(smoke_config()).dataset)), read_text_file(dataset()));
}

TEST_F(Cli, InfeasibleAnglesNamePair) {
  const auto cfg = dir("infeasible.ini");
  write_text_file(cfg, "[dataset]\nconfusable_pairs = 12:0:15,13:0:15\n");
  const auto p = run("gen-data --config " + cfg.string() + " --out " + dir("inf").string());
  EXPECT_NE(p.status, 0);
  EXPECT_NE(p.output.find("(12,13)"), std::string::npos) << p.output;
}

TEST_F(Cli, MissingInputsFail) {
  const auto a = run("train --config " + smoke_config() + " --dataset " + dir("nope.jsonl").string() + " --out " +
                     dir("x").string());
  EXPECT_NE(a.status, 0);
  EXPECT_NE(a.output.find("nope.jsonl"), std::string::npos) << a.output;
  const auto b = run("eval --checkpoint " + dir("nope.json").string() + " --dataset " + dataset() + " --out " +
                     dir("y").string());
  EXPECT_NE(b.status, 0);
  EXPECT_NE(b.output.find("nope.json"), std::string::npos) << b.output;
  EXPECT_NE(run("train --config " + smoke_config()).status, 0) << "--dataset is required";
}

TEST_F(Cli, TrainWritesArtifacts) {
  for (const char* f : {"base_checkpoint.json", "base_loss_history.csv", "checkpoint.json", "loss_history.csv",
                        "histogram.csv", "group.json", "manifest.json"}) {
    EXPECT_TRUE(fs::exists(dir("fsrc") / f)) << f;
  }
  const auto manifest = json::parse(read_text_file(dir("fsrc") / "manifest.json"));
  EXPECT_EQ(manifest.at("command"), "train");
  EXPECT_EQ(manifest.at("config").at("train").at("contrastive_mode"), "fsrc");
  const auto hist = read_csv(dir("fsrc") / "histogram.csv");
  EXPECT_EQ(hist[0], (std::vector<std::string>{"pair_a", "pair_b", "replications", "has_novel"}));
}

TEST_F(Cli, FsrcModeColumnFlipsAtMilestone) {
  const auto rows = read_csv(dir("fsrc") / "loss_history.csv");
  ASSERT_EQ(rows[0], (std::vector<std::string>{"iteration", "L_cls", "L_Bbox", "L_objectness", "L_RCL", "mode"}));
  ASSERT_EQ(rows.size(), 41u);
  const auto group = parse_group(read_text_file(dir("fsrc") / "group.json"));
  ASSERT_FALSE(group.empty()) << "smoke world should mine a resemblance group";
  // 0.75 of 40 iterations: rows 0..29 are GCL, 30..39 RCL.
  for (std::size_t i = 1; i < rows.size(); ++i) EXPECT_EQ(rows[i][5], i - 1 < 30 ? "GCL" : "RCL") << i;
}

TEST_F(Cli, NoneModeHasZeroContrastiveColumn) {
  const auto p = run("train --config " + smoke_config() + " --dataset " + dataset() + " --mode none --base-checkpoint " +
                     (dir("fsrc") / "base_checkpoint.json").string() + " --out " + dir("none").string());
  ASSERT_EQ(p.status, 0) << p.output;
  const auto rows = read_csv(dir("none") / "loss_history.csv");
  const auto c = column(rows, "L_RCL");
  ASSERT_EQ(rows.size(), 41u);
  for (std::size_t i = 1; i < rows.size(); ++i) {
    EXPECT_EQ(std::stod(rows[i][c]), 0.0);
    EXPECT_EQ(rows[i][5], "none");
  }
  EXPECT_FALSE(fs::exists(dir("none") / "base_checkpoint.json")) << "no pre-training when a base checkpoint is given";
}

TEST_F(Cli, BaseCheckpointReproducesTraining) {
  const auto p = run("train --config " + smoke_config() + " --dataset " + dataset() + " --mode fsrc --base-checkpoint " +
                     (dir("fsrc") / "base_checkpoint.json").string() + " --out " + dir("fsrc2").string());
  ASSERT_EQ(p.status, 0) << p.output;
  EXPECT_EQ(read_text_file(dir("fsrc2") / "checkpoint.json"), read_text_file(dir("fsrc") / "checkpoint.json"));
  EXPECT_EQ(read_text_file(dir("fsrc2") / "loss_history.csv"), read_text_file(dir("fsrc") / "loss_history.csv"));
}

TEST_F(Cli, EvalWritesReports) {
  const auto p = run("eval --checkpoint " + (dir("fsrc") / "checkpoint.json").string() + " --dataset " + dataset() +
                     " --group " + (dir("fsrc") / "group.json").string() + " --out " + dir("eval").string());
  ASSERT_EQ(p.status, 0) << p.output;
  const auto ap = read_csv(dir("eval") / "ap_report.csv");
  EXPECT_EQ(ap[0], (std::vector<std::string>{"kind", "class_id", "split", "metric", "value"}));
  std::size_t class_rows = 0, summary_rows = 0;
  for (std::size_t i = 1; i < ap.size(); ++i) {
    class_rows += ap[i][0] == "class";
    summary_rows += ap[i][0] == "summary";
  }
  EXPECT_EQ(class_rows, 16u);
  EXPECT_EQ(summary_rows, 5u);
  const auto dist = read_csv(dir("eval") / "distance_report.csv");
  EXPECT_EQ(dist[0], (std::vector<std::string>{"kind", "class_a", "class_b", "value"}));
  EXPECT_EQ(dist.back()[0], "mean_outside_group");
  const auto summary = json::parse(read_text_file(dir("eval") / "summary.json"));
  EXPECT_TRUE(summary.contains("std_novel"));
}

TEST_F(Cli, EvalShapeMismatchFails) {
  const auto cfg = dir("wide.ini");
  write_text_file(cfg, "[dataset]\nembed_dim = 24\nbase_train_scenes = 4\nbase_val_scenes = 2\n"
                       "finetune_pool_scenes = 40\ntest_scenes = 2\n");
  ASSERT_EQ(run("gen-data --config " + cfg.string() + " --out " + dir("wide").string()).status, 0);
  const auto p = run("eval --checkpoint " + (dir("fsrc") / "checkpoint.json").string() + " --dataset " +
                     (dir("wide") / "dataset.jsonl").string() + " --out " + dir("evalw").string());
  EXPECT_NE(p.status, 0);
  EXPECT_NE(p.output.find("32-d features"), std::string::npos) << p.output;
}

TEST_F(Cli, CompareIdenticalArmsHaveZeroDeltas) {
  const auto p = run("compare --config " + smoke_config() + " --seeds 3,4 --arm-a gcl --arm-b gcl --out " +
                     dir("cmp").string());
  ASSERT_EQ(p.status, 0) << p.output;
  const auto rows = read_csv(dir("cmp") / "compare.csv");
  ASSERT_EQ(rows.size(), 4u) << "header, two seeds, aggregate";
  EXPECT_EQ(rows[1][0], "seed");
  EXPECT_EQ(rows[2][0], "seed");
  EXPECT_EQ(rows[3][0], "aggregate");
  for (const char* delta : {"delta_map50_novel", "delta_map50_all", "delta_std_novel", "delta_std_all", "delta_within"}) {
    const auto c = column(rows, delta);
    for (std::size_t r = 1; r < rows.size(); ++r) EXPECT_EQ(std::stod(rows[r][c]), 0.0) << delta << " row " << r;
  }
  EXPECT_TRUE(fs::exists(dir("cmp") / "compare_per_class.csv"));
}

TEST_F(Cli, CompareNeedsTwoSeeds) {
  const auto p = run("compare --config " + smoke_config() + " --seeds 3 --out " + dir("cmp1").string());
  EXPECT_NE(p.status, 0);
  EXPECT_NE(p.output.find("at least 2 seeds"), std::string::npos) << p.output;
}

TEST_F(Cli, AblateWritesOneRowPerSweepValue) {
  const auto p = run("ablate --config " + smoke_config() + " --out " + dir("abl").string());
  ASSERT_EQ(p.status, 0) << p.output;
  const auto rows = read_csv(dir("abl") / "ablation.csv");
  EXPECT_EQ(rows[0], (std::vector<std::string>{"section", "I_m", "Th_IoU", "Th_Rep", "nAP50", "std_novel"}));
  ASSERT_EQ(rows.size(), 5u);
  EXPECT_EQ(rows[1][0], "milestone");
  EXPECT_EQ(rows[3][0], "iou_threshold");
  EXPECT_EQ(rows[4][0], "rep_threshold");
}

TEST_F(Cli, UnknownModeRejectedByParser) {
  EXPECT_NE(run("train --dataset " + dataset() + " --mode rcl").status, 0);
}
