#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>

#include "tvlab/pipeline.hpp"

using namespace tvlab;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("tvlab_pipeline_test_" + name);
  fs::remove_all(p);
  return p;
}

nlohmann::json tiny_config_json(const fs::path& out) {
  return {
      {"seed", 7},
      {"out", out.string()},
      {"model",
       {{"d_model", 16}, {"enc_layers", 2}, {"dec_layers", 1}, {"heads", 2}, {"mlp_hidden", 24}, {"image_side", 8}}},
      {"train", {{"steps", 30}, {"batch", 4}, {"warmup", 5}}},
      {"pretrain_per_task", 10},
      {"n_splits", 2},
      {"sizes", {{"train", 12}, {"val", 4}, {"test", 5}}},
      {"tasks", {"segmentation", "lowlight"}},
      {"collect_samples", 6},
      {"reinforce",
       {{"steps", 4}, {"samples_per_iter", 4}, {"images_per_iter", 2}, {"ckpt_every", 2}, {"final_samples", 3}}},
      {"strips", 1},
  };
}

std::vector<fs::path> csv_files(const fs::path& root) {
  std::vector<fs::path> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.path().extension() == ".csv") out.push_back(fs::relative(e.path(), root));
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

TEST(Report, MeanStdIsPopulation) {
  const auto r = mean_std({0.35, 0.35, 0.31, 0.29});
  EXPECT_NEAR(r.mean, 0.325, 1e-12);
  EXPECT_NEAR(r.std, std::sqrt(0.000675), 1e-12);
  EXPECT_EQ(fmt_fixed(r.std, 3), "0.026");
  EXPECT_THROW(mean_std({}), std::invalid_argument);
}

TEST(Report, TableFormatsAndFlagsDirection) {
  ReportTable t({TaskId::segmentation, TaskId::lowlight}, 4);
  const double seg[] = {0.35, 0.35, 0.31, 0.29};
  for (int s = 0; s < 4; ++s) {
    t.add("Ours", TaskId::segmentation, s, seg[s]);
    t.add("Ours", TaskId::lowlight, s, 0.5);
  }
  const std::string md = t.markdown();
  EXPECT_NE(md.find("segmentation (mIoU ↑)"), std::string::npos);
  EXPECT_NE(md.find("lowlight (MSE ↓)"), std::string::npos);
  EXPECT_NE(md.find("0.325 ± 0.026"), std::string::npos);
  EXPECT_NE(md.find("0.500 ± 0.000"), std::string::npos);
  const std::string csv = t.csv();
  EXPECT_NE(csv.find("Ours,segmentation,miou,higher,0.325,0.0259808,0.35,0.35,0.31,0.29"), std::string::npos);
  EXPECT_NE(csv.find("Ours,lowlight,mse,lower,0.5,0,"), std::string::npos);
  EXPECT_EQ(t.methods().size(), 1u);
}

TEST(Report, MissingSplitIsMarked) {
  ReportTable t({TaskId::segmentation}, 4);
  t.add("A", TaskId::segmentation, 0, 0.1);
  t.add("A", TaskId::segmentation, 2, 0.2);
  EXPECT_FALSE(t.cell("A", TaskId::segmentation).has_value());
  EXPECT_NE(t.markdown().find("GAP(missing split 1 3)"), std::string::npos);
  EXPECT_NE(t.csv().find("A,segmentation,miou,higher,,,0.1,,0.2,"), std::string::npos);
  EXPECT_THROW(t.add("A", TaskId::segmentation, 4, 0.0), std::invalid_argument);
  EXPECT_THROW(t.add("A", TaskId::lowlight, 0, 0.0), std::invalid_argument);
}

TEST(Report, HeatmapShapes) {
  ModelConfig cfg;
  ScoreTable t;
  t.rho[{Stage::decoder, 1, 3, 0}] = 2.0;
  t.rho[{Stage::encoder, 0, 0, cfg.layout().first(Role::BR) + 5}] = 4.0;
  aggregate_scores(t);
  const Mat h = head_heatmap(cfg, t);
  EXPECT_EQ(h.rows(), cfg.total_layers());
  EXPECT_EQ(h.cols(), cfg.heads);
  EXPECT_EQ(h(cfg.enc_layers + 1, 3), 2.0);
  const Mat g = token_heatmap(cfg, t, {Stage::encoder, 0, 0});
  EXPECT_EQ(g.rows(), 8);
  EXPECT_EQ(g(4 + 1, 4 + 1), 4.0);  // BR quadrant, within-index 5 = row 1, col 1
  EXPECT_EQ(g.sum(), 4.0);
}

TEST(Report, PgmScalesToFullRange) {
  const fs::path dir = scratch("pgm");
  Mat m(2, 3);
  m << 0, 1, 2, 3, 4, 5;
  write_pgm(dir / "m.pgm", m);
  const std::string bytes = read_text(dir / "m.pgm");
  ASSERT_EQ(bytes.substr(0, 11), "P5\n3 2\n255\n");
  EXPECT_EQ(static_cast<unsigned char>(bytes[11]), 0);
  EXPECT_EQ(static_cast<unsigned char>(bytes.back()), 255);
  EXPECT_EQ(bytes.size(), 11u + 6u);
}

TEST(RunConfig, RejectsBadDocuments) {
  EXPECT_THROW(parse_run_config({{"bogus", 1}}), ConfigError);
  EXPECT_THROW(parse_run_config({{"algorithm", "annealing"}}), ConfigError);
  EXPECT_THROW(parse_run_config({{"tasks", {"segmentation", "segmentation"}}}), ConfigError);
  EXPECT_THROW(parse_run_config({{"tasks", {"sharpen"}}}), ConfigError);
  EXPECT_THROW(parse_run_config({{"weights", "/nonexistent/w.tvwt"}}), ConfigError);
  EXPECT_THROW(parse_run_config({{"algorithm", "top-quadrants"}}), ConfigError);
  EXPECT_THROW(parse_run_config({{"model", {{"d_model", 30}, {"heads", 4}}}}), ConfigError);
  EXPECT_THROW(load_run_config("/nonexistent/run.json"), ConfigError);
  const RunConfig c = parse_run_config({{"seed", 9}});
  EXPECT_EQ(c.reinforce.seed, 9u);
  EXPECT_EQ(c.train.seed, 9u);
  EXPECT_EQ(c.tasks.size(), 4u);
}

TEST(RunConfig, HashIgnoresOutputLocation) {
  const RunConfig a = parse_run_config(tiny_config_json("/tmp/a"));
  const RunConfig b = parse_run_config(tiny_config_json("/tmp/b"));
  EXPECT_EQ(run_hash(a), run_hash(b));
  auto j = tiny_config_json("/tmp/a");
  j["seed"] = 8;
  EXPECT_NE(run_hash(parse_run_config(j)), run_hash(a));
}

class PipelineRun : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = scratch("run");
    std::ostringstream log;
    Pipeline p(parse_run_config(tiny_config_json(root_ / "a")), log);
    p.run();
    first_runs_ = p.stages_run();
  }
  static fs::path root_;
  static int first_runs_;
};
fs::path PipelineRun::root_;
int PipelineRun::first_runs_ = 0;

TEST_F(PipelineRun, WritesEveryStage) {
  const fs::path a = root_ / "a";
  // data, train, report + 5 stages per split
  EXPECT_EQ(first_runs_, 3 + 5 * 2);
  for (const char* f : {"data/split0.tvds", "data/split1.tvds.json", "model/weights.tvwt", "model/train_log.csv",
                        "split0/stores/identity.tvas", "split1/scores/scores.csv", "split1/scores/heads.pgm",
                        "split0/scores/tokens/decoder_L0_H1.csv", "split0/cluster/cluster.csv",
                        "split0/search/segmentation.json", "split0/search/lowlight_log.csv",
                        "split1/eval/lowlight.json", "split0/eval/strips/segmentation_0.ppm", "report/table.md",
                        "report/table.csv", "report/heads_mean.csv"})
    EXPECT_TRUE(fs::exists(a / f)) << f;
  const auto heads = Pipeline::parse_matrix_csv(read_text(a / "split0/scores/heads.csv"));
  EXPECT_EQ(heads.rows(), 3);
  EXPECT_EQ(heads.cols(), 2);
  const auto md = read_text(a / "report/table.md");
  for (const char* row : {"| One-shot |", "| Query-only |", "| TV (reinforce) |", "| One-shot + TV (reinforce) |"})
    EXPECT_NE(md.find(row), std::string::npos) << row;
}

TEST_F(PipelineRun, ArtifactsCarryProvenance) {
  const fs::path a = root_ / "a";
  const RunConfig cfg = parse_run_config(tiny_config_json(a));
  for (const char* f : {"data/split0.tvds", "model/weights.tvwt", "split0/stores/segmentation.tvas",
                        "split0/scores/scores.csv", "split0/eval/eval.csv"}) {
    const auto side = read_sidecar(a / f);
    EXPECT_EQ(side.at("seed").get<std::uint64_t>(), 7u) << f;
    EXPECT_EQ(side.at("tool_version").get<std::string>(), kToolVersion) << f;
    EXPECT_EQ(side.at("config_hash").get<std::string>(), run_hash(cfg)) << f;
  }
  const auto sel = nlohmann::json::parse(read_text(a / "split1/search/lowlight.json"));
  EXPECT_EQ(sel.at("config_hash").get<std::string>(), run_hash(cfg));
  EXPECT_EQ(sel.at("seed").get<std::uint64_t>(), 7u);
}

TEST_F(PipelineRun, SecondRunIsAllCacheHits) {
  std::ostringstream log;
  Pipeline p(parse_run_config(tiny_config_json(root_ / "a")), log);
  const auto before = forward_counter().load();
  p.run();
  EXPECT_EQ(forward_counter().load(), before);
  EXPECT_EQ(p.stages_run(), 0);
  EXPECT_EQ(p.cache_hits(), first_runs_);
}

TEST_F(PipelineRun, ChangedSearchConfigReusesEarlierStages) {
  const fs::path b = root_ / "b";
  fs::copy(root_ / "a", b, fs::copy_options::recursive);
  auto j = tiny_config_json(b);
  j["algorithm"] = "cma";
  std::ostringstream log;
  Pipeline p(parse_run_config(j), log);
  p.run();
  // search, eval per split, plus the report; everything upstream is reused.
  EXPECT_EQ(p.stages_run(), 2 * 2 + 1);
  EXPECT_TRUE(fs::exists(b / "split0/search/segmentation_scores.csv"));
}

TEST_F(PipelineRun, RerunIsByteIdentical) {
  const fs::path c = root_ / "c";
  std::ostringstream log;
  Pipeline(parse_run_config(tiny_config_json(c)), log).run();
  const auto files = csv_files(root_ / "a");
  ASSERT_EQ(files, csv_files(c));
  ASSERT_GT(files.size(), 10u);
  for (const auto& f : files) EXPECT_EQ(read_text(root_ / "a" / f), read_text(c / f)) << f;
  EXPECT_EQ(read_text(root_ / "a/data/split1.tvds"), read_text(c / "data/split1.tvds"));
  EXPECT_EQ(read_text(root_ / "a/model/weights.tvwt"), read_text(c / "model/weights.tvwt"));
}

TEST_F(PipelineRun, ReportedScoreMatchesIndependentRecomputation) {
  const fs::path a = root_ / "a";
  const RunConfig cfg = parse_run_config(tiny_config_json(a));
  const Weights w = load_weights(a / "model/weights.tvwt");
  const DatasetSplit split = load_split(a / "data/split1.tvds");
  const auto sel = nlohmann::json::parse(read_text(a / "split1/search/segmentation.json"));

  // Mean activation per selected site straight from the raw store.
  const ActivationStore store = load_store(a / "split1/stores/segmentation.tvas");
  const auto grouping = make_grouping(cfg.model, cfg.granularity, cfg.stage);
  PatchSet patch;
  for (const auto& g : sel.at("groups")) {
    if (!g.at("selected").get<bool>()) continue;
    for (const auto& grp : grouping.groups) {
      if (to_string(grp.stage) != g.at("stage").get<std::string>() || grp.layer != g.at("layer").get<int>() ||
          grp.head != g.at("head").get<int>() || grp.token_group != g.at("token_group").get<std::string>())
        continue;
      for (const auto& site : grp.members) {
        RowVec sum = RowVec::Zero(store.d_model);
        for (std::size_t i = 0; i < store.count; ++i) sum += store.at(i, store.site_index(site));
        patch.emplace(site, sum / static_cast<double>(store.count));
      }
    }
  }
  double total = 0;
  int n = 0;
  for (const auto& s : split.test)
    if (s.task == TaskId::segmentation) {
      total += metric_miou(tv_predict(w, s.x_q, patch), s.y_q);
      ++n;
    }
  const auto res = nlohmann::json::parse(read_text(a / "split1/eval/segmentation.json"));
  double reported = -1;
  for (const auto& r : res.at("scores"))
    if (r.at("method").get<std::string>() == "TV (reinforce)") reported = r.at("score").get<double>();
  EXPECT_NEAR(reported, total / n, 1e-9);
}

TEST_F(PipelineRun, ReportRefusesMixedConfigurations) {
  const fs::path m = root_ / "mixed";
  fs::create_directories(m);
  fs::copy(root_ / "a/split0", m / "split0", fs::copy_options::recursive);
  fs::copy(root_ / "a/split1", m / "split1", fs::copy_options::recursive);
  Pipeline::write_report(m, false);
  auto j = nlohmann::json::parse(read_text(m / "split1/eval/lowlight.json"));
  j["config_hash"] = "0000000000000000";
  write_text(m / "split1/eval/lowlight.json", j.dump(2));
  EXPECT_THROW(Pipeline::write_report(m, false), ConfigError);
  EXPECT_NO_THROW(Pipeline::write_report(m, true));
}

TEST_F(PipelineRun, ReportMarksMissingSplit) {
  const fs::path m = root_ / "partial";
  fs::create_directories(m);
  fs::copy(root_ / "a/split0", m / "split0", fs::copy_options::recursive);
  Pipeline::write_report(m, false);
  EXPECT_NE(read_text(m / "report/table.md").find("GAP(missing split 1)"), std::string::npos);
}

TEST(Pipeline, StageFailureNamesTheStage) {
  const fs::path root = scratch("fail");
  auto j = tiny_config_json(root);
  std::ostringstream log;
  Pipeline p(parse_run_config(j), log);
  p.data();
  fs::remove(root / "data/split0.tvds");
  p.train();
  try {
    p.collect(0);
    FAIL() << "expected a stage error";
  } catch (const StageError& e) {
    EXPECT_EQ(e.stage, "collect");
    EXPECT_NE(std::string(e.what()).find("split0.tvds"), std::string::npos);
  }
}
