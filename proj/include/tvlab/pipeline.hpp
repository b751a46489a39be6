#pragma once

// End-to-end run: data -> train -> collect -> score -> cluster -> search ->
// eval -> report, with every stage cached under a key derived from its
// inputs.

#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "tvlab/report.hpp"
#include "tvlab/search.hpp"

namespace tvlab {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct StageError : std::runtime_error {
  StageError(std::string stage_name, const std::string& cause)
      : std::runtime_error("stage '" + stage_name + "' failed: " + cause), stage(std::move(stage_name)) {}
  std::string stage;
};

struct CmaConfig {
  int n_images = 10;
  double fraction = 0.25;
  std::uint64_t seed = 1;
};

inline void to_json(nlohmann::json& j, const CmaConfig& c) {
  j = {{"n_images", c.n_images}, {"fraction", c.fraction}, {"seed", c.seed}};
}
inline void from_json(const nlohmann::json& j, CmaConfig& c) {
  c = CmaConfig{};
  c.n_images = j.value("n_images", c.n_images);
  c.fraction = j.value("fraction", c.fraction);
  c.seed = j.value("seed", c.seed);
}

inline const std::vector<std::string>& search_algorithms() {
  static const std::vector<std::string> names{"reinforce",     "grs",           "cma",
                                              "random-quadrants", "top-quadrants", "random-k-layers"};
  return names;
}

struct RunConfig {
  std::uint64_t seed = 1;
  std::filesystem::path out = "runs/default";
  ModelConfig model;
  TrainHyper train;
  int pretrain_per_task = 400;
  std::string weights;                   // existing TVWT file; skips training when set
  int n_splits = 4;
  SplitSizes sizes;
  std::vector<std::string> split_paths;  // existing TVDS files; skips generation when set
  std::vector<TaskId> tasks{TaskId::segmentation, TaskId::lowlight, TaskId::colorize, TaskId::inpaint};
  int collect_samples = 100;
  Granularity granularity = Granularity::quadrant;
  StageFilter stage = StageFilter::both;
  std::string algorithm = "reinforce";
  bool multi_task = false;
  int target_count = 0;  // size of random-/top-quadrant selections
  ReinforceConfig reinforce;
  GrsConfig grs;
  CmaConfig cma;
  std::vector<EvalMode> modes{EvalMode::query_only, EvalMode::one_shot, EvalMode::one_shot_plus_tv};
  int strips = 2;

  void validate() const {
    try {
      model.validate();
    } catch (const std::exception& e) {
      throw ConfigError(e.what());
    }
    if (n_splits < 1) throw ConfigError("n_splits must be >= 1");
    if (!split_paths.empty() && static_cast<int>(split_paths.size()) != n_splits)
      throw ConfigError("split_paths must list exactly n_splits files");
    for (const auto& p : split_paths)
      if (!std::filesystem::exists(p)) throw ConfigError("dataset file not found: " + p);
    if (!weights.empty() && !std::filesystem::exists(weights)) throw ConfigError("weights file not found: " + weights);
    if (tasks.empty()) throw ConfigError("task list is empty");
    if (std::set<TaskId>(tasks.begin(), tasks.end()).size() != tasks.size()) throw ConfigError("duplicate task");
    if (std::find(tasks.begin(), tasks.end(), TaskId::identity) != tasks.end())
      throw ConfigError("identity is a helper task and cannot be searched");
    if (sizes.train < 1 || sizes.val < 1 || sizes.test < 1) throw ConfigError("split sizes must be >= 1");
    if (collect_samples < 2 || collect_samples > sizes.train)
      throw ConfigError("collect_samples must be in [2, sizes.train]");
    if (std::find(search_algorithms().begin(), search_algorithms().end(), algorithm) == search_algorithms().end())
      throw ConfigError("unknown algorithm: " + algorithm);
    if ((algorithm == "random-quadrants" || algorithm == "top-quadrants") && target_count < 1)
      throw ConfigError(algorithm + " needs target_count >= 1");
    if (multi_task && tasks.size() < 2) throw ConfigError("multi-task search needs at least 2 tasks");
    if (weights.empty() && pretrain_per_task < 1) throw ConfigError("pretrain_per_task must be >= 1");
  }
};

inline nlohmann::json to_json_config(const RunConfig& c) {
  nlohmann::json tasks = nlohmann::json::array(), modes = nlohmann::json::array();
  for (TaskId t : c.tasks) tasks.push_back(to_string(t));
  for (EvalMode m : c.modes) modes.push_back(to_string(m));
  return {{"seed", c.seed},
          {"out", c.out.string()},
          {"model", c.model},
          {"train", c.train},
          {"pretrain_per_task", c.pretrain_per_task},
          {"weights", c.weights},
          {"n_splits", c.n_splits},
          {"sizes", {{"train", c.sizes.train}, {"val", c.sizes.val}, {"test", c.sizes.test}}},
          {"split_paths", c.split_paths},
          {"tasks", tasks},
          {"collect_samples", c.collect_samples},
          {"granularity", to_string(c.granularity)},
          {"stage", to_string(c.stage)},
          {"algorithm", c.algorithm},
          {"multi_task", c.multi_task},
          {"target_count", c.target_count},
          {"reinforce", c.reinforce},
          {"grs", c.grs},
          {"cma", c.cma},
          {"modes", modes},
          {"strips", c.strips}};
}

/// Relative paths inside the document resolve against `base`. Sub-block
/// seeds default to the run seed.
inline RunConfig parse_run_config(const nlohmann::json& j, const std::filesystem::path& base = {}) {
  static const std::set<std::string> known{"seed", "out", "model", "train", "pretrain_per_task", "weights",
                                           "n_splits", "sizes", "split_paths", "tasks", "collect_samples",
                                           "granularity", "stage", "algorithm", "multi_task", "target_count",
                                           "reinforce", "grs", "cma", "modes", "strips"};
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  for (const auto& [k, v] : j.items())
    if (!known.count(k)) throw ConfigError("unknown config key: " + k);
  const auto resolve = [&](const std::string& p) {
    return p.empty() || std::filesystem::path(p).is_absolute() || base.empty() ? p : (base / p).string();
  };
  RunConfig c;
  try {
    c.seed = j.value("seed", c.seed);
    c.out = resolve(j.value("out", c.out.string()));
    if (j.contains("model")) {
      const auto& m = j.at("model");
      if (m.is_string()) {
        const auto path = resolve(m.get<std::string>());
        if (!std::filesystem::exists(path)) throw ConfigError("model config not found: " + path);
        c.model = nlohmann::json::parse(read_text(path)).get<ModelConfig>();
      } else {
        c.model = m.get<ModelConfig>();
      }
    }
    const auto sub = [&](const char* key) {
      nlohmann::json b = j.value(key, nlohmann::json::object());
      if (!b.contains("seed")) b["seed"] = c.seed;
      return b;
    };
    c.train = sub("train").get<TrainHyper>();
    c.reinforce = sub("reinforce").get<ReinforceConfig>();
    c.grs = sub("grs").get<GrsConfig>();
    c.cma = sub("cma").get<CmaConfig>();
    c.pretrain_per_task = j.value("pretrain_per_task", c.pretrain_per_task);
    c.weights = resolve(j.value("weights", c.weights));
    c.n_splits = j.value("n_splits", c.n_splits);
    if (j.contains("sizes")) {
      const auto& s = j.at("sizes");
      c.sizes.train = s.value("train", c.sizes.train);
      c.sizes.val = s.value("val", c.sizes.val);
      c.sizes.test = s.value("test", c.sizes.test);
    }
    if (j.contains("split_paths"))
      for (const auto& p : j.at("split_paths")) c.split_paths.push_back(resolve(p.get<std::string>()));
    if (j.contains("tasks")) {
      c.tasks.clear();
      for (const auto& t : j.at("tasks")) c.tasks.push_back(parse_task(t.get<std::string>()));
    }
    c.collect_samples = j.value("collect_samples", c.collect_samples);
    c.granularity = parse_granularity(j.value("granularity", std::string(to_string(c.granularity))));
    c.stage = parse_stage_filter(j.value("stage", std::string(to_string(c.stage))));
    c.algorithm = j.value("algorithm", c.algorithm);
    c.multi_task = j.value("multi_task", c.multi_task);
    c.target_count = j.value("target_count", c.target_count);
    if (j.contains("modes")) {
      c.modes.clear();
      for (const auto& m : j.at("modes")) c.modes.push_back(parse_eval_mode(m.get<std::string>()));
    }
    c.strips = j.value("strips", c.strips);
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  c.validate();
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ConfigError("config not found: " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text(path));
  } catch (const std::exception& e) {
    throw ConfigError("cannot parse " + path.string() + ": " + e.what());
  }
  RunConfig c = parse_run_config(j, path.parent_path());
  if (const char* env = std::getenv("TVLAB_OUT"); env && *env) c.out = env;
  return c;
}

/// Identity of the run, independent of where its output lives.
inline std::string run_hash(const RunConfig& c) {
  auto j = to_json_config(c);
  j.erase("out");
  return config_hash(j);
}

// ---------------------------------------------------------------------------

struct EvalRecord {
  std::string method;
  double score = 0;
};

class Pipeline {
 public:
  Pipeline(RunConfig cfg, std::ostream& log) : cfg_(std::move(cfg)), log_(log), hash_(run_hash(cfg_)) {
    cfg_.validate();
  }

  void run() {
    data();
    train();
    for (int k = 0; k < cfg_.n_splits; ++k) {
      collect(k);
      score(k);
      cluster(k);
      search(k);
      eval(k);
    }
    report();
  }

  [[nodiscard]] const RunConfig& config() const { return cfg_; }
  [[nodiscard]] const std::string& hash() const { return hash_; }
  [[nodiscard]] int cache_hits() const { return hits_; }
  [[nodiscard]] int stages_run() const { return runs_; }
  [[nodiscard]] std::filesystem::path split_dir(int k) const { return cfg_.out / ("split" + std::to_string(k)); }

  // -- stages --------------------------------------------------------------

  void data() {
    stage("data", cfg_.out / "data", data_key(), [&](const std::filesystem::path& dir) {
      if (!cfg_.split_paths.empty()) return;
      const Rng root = Rng(cfg_.seed).child("data");
      for (int k = 0; k < cfg_.n_splits; ++k) {
        const auto split = gen_split(k, all_tasks(), cfg_.model.image_side, cfg_.sizes, root);
        const auto path = dir / ("split" + std::to_string(k) + ".tvds");
        save_split(split, path);
        sidecar(path, {{"split", k}, {"train", split.train.size()}, {"val", split.val.size()},
                       {"test", split.test.size()}});
      }
    });
  }

  void train() {
    stage("train", cfg_.out / "model", train_key(), [&](const std::filesystem::path& dir) {
      const auto path = dir / "weights.tvwt";
      if (!cfg_.weights.empty()) {
        save_weights(load_weights(cfg_.weights), path);
        sidecar(path, {{"source", cfg_.weights}});
        return;
      }
      const SplitSizes sizes{cfg_.pretrain_per_task, 0, 0};
      const auto pre = gen_split(0, all_tasks(), cfg_.model.image_side, sizes, Rng(cfg_.seed).child("pretrain"));
      std::vector<const TripletSample*> pool;
      for (const auto& s : pre.train) pool.push_back(&s);
      const Weights init = init_weights(cfg_.model, Rng(cfg_.seed).child("init"));
      std::ostringstream csv;
      csv << "step,loss\n";
      const auto res = tvlab::train(init, pool, cfg_.train, [&](int step, double loss) {
        csv << step << ',' << fmt6(loss) << '\n';
        if ((step + 1) % 500 == 0) log_ << "  train step " << step + 1 << " loss " << fmt6(loss) << '\n';
      });
      save_weights(res.weights, path);
      sidecar(path, {{"steps", cfg_.train.steps}});
      text(dir / "train_log.csv", csv.str());
    });
  }

  void collect(int k) {
    stage("collect", split_dir(k) / "stores", collect_key(k), [&](const std::filesystem::path& dir) {
      const auto& split = load_split_k(k);
      const auto& w = weights();
      const auto filter = grouping_filter(make_grouping(cfg_.model, Granularity::token, StageFilter::both));
      std::vector<const TripletSample*> train;
      for (const auto& s : split.train) train.push_back(&s);
      for (TaskId t : all_tasks()) {
        const auto store = tvlab::collect(w, train, t, static_cast<std::size_t>(cfg_.collect_samples),
                                          PromptMode::one_shot, filter);
        const auto path = dir / (std::string(to_string(t)) + ".tvas");
        save_store(store, path);
        sidecar(path, {{"task", to_string(t)}, {"count", store.count}});
      }
    });
  }

  void score(int k) {
    stage("score", split_dir(k) / "scores", score_key(k), [&](const std::filesystem::path& dir) {
      const auto stores = load_stores(k, cfg_.tasks);
      if (stores.size() < 2) {
        text(dir / "scores.csv", scores_csv({}));
        return;
      }
      ScoreTable t = score_tokens(stores);
      aggregate_scores(t);
      text(dir / "scores.csv", scores_csv(t));
      const Mat heads = head_heatmap(cfg_.model, t);
      text(dir / "heads.csv", matrix_csv(heads));
      pgm(dir / "heads.pgm", heads);
      for (const auto& [h, v] : t.head) {
        const std::string name = std::string(to_string(h.stage)) + "_L" + std::to_string(h.layer) + "_H" +
                                 std::to_string(h.head);
        const Mat grid = token_heatmap(cfg_.model, t, h);
        text(dir / "tokens" / (name + ".csv"), matrix_csv(grid));
        pgm(dir / "tokens" / (name + ".pgm"), grid);
      }
    });
  }

  void cluster(int k) {
    stage("cluster", split_dir(k) / "cluster", cluster_key(k), [&](const std::filesystem::path& dir) {
      const auto stores = load_stores(k, cfg_.tasks);
      std::vector<ClusterReport> reps;
      if (stores.size() >= 2)
        for (Stage st : {Stage::encoder, Stage::decoder})
          for (int l = 0; l < (st == Stage::encoder ? cfg_.model.enc_layers : cfg_.model.dec_layers); ++l)
            for (int h = 0; h < cfg_.model.heads; ++h) reps.push_back(cluster_report(stores, {st, l, h}));
      text(dir / "cluster.csv", cluster_csv(reps));
      if (!reps.empty()) {
        const auto best = std::max_element(reps.begin(), reps.end(), [](const auto& a, const auto& b) {
          return a.silhouette < b.silhouette;
        });
        text(dir / "projection_best.csv", projection_csv(*best));
        text(dir / "projection_worst.csv",
             projection_csv(*std::min_element(reps.begin(), reps.end(), [](const auto& a, const auto& b) {
               return a.silhouette < b.silhouette;
             })));
      }
    });
  }

  void search(int k) {
    stage("search", split_dir(k) / "search", search_key(k), [&](const std::filesystem::path& dir) {
      const auto& split = load_split_k(k);
      const auto& w = weights();
      const auto means = load_means(k);
      const auto grouping = make_grouping(cfg_.model, cfg_.granularity, cfg_.stage);
      const ScoreTable table = load_scores(k);
      const auto heldout_of = [&](TaskId t) { return split.select(split.val, t); };

      std::vector<std::unique_ptr<ModelObjective>> objs;
      for (TaskId t : cfg_.tasks)
        objs.push_back(std::make_unique<ModelObjective>(w, means.means.at(t), t, grouping, split.select(split.train, t),
                                                        heldout_of(t)));
      if (cfg_.multi_task) {
        std::vector<const Objective*> ptrs;
        std::vector<double> norms;
        for (std::size_t i = 0; i < cfg_.tasks.size(); ++i) {
          ptrs.push_back(objs[i].get());
          norms.push_back(normalizer(w, cfg_.tasks[i], split.select(split.train, cfg_.tasks[i])));
        }
        const auto id_train = split.select(split.train, TaskId::identity);
        const ModelObjective filler(w, means.means.at(TaskId::identity), TaskId::identity, grouping, id_train,
                                    heldout_of(TaskId::identity));
        const MultiTaskObjective multi(ptrs, norms, &filler, normalizer(w, TaskId::identity, id_train));
        run_algorithm(dir, "multi", multi, grouping, table, 0);
      } else {
        for (std::size_t i = 0; i < cfg_.tasks.size(); ++i)
          run_algorithm(dir, std::string(to_string(cfg_.tasks[i])), *objs[i], grouping, table, i);
      }
    });
  }

  void eval(int k) {
    stage("eval", split_dir(k) / "eval", eval_key(k), [&](const std::filesystem::path& dir) {
      const auto& split = load_split_k(k);
      const auto& w = weights();
      const auto means = load_means(k);
      const auto grouping = make_grouping(cfg_.model, cfg_.granularity, cfg_.stage);
      std::ostringstream csv;
      csv << "task,method,score\n";
      for (TaskId t : cfg_.tasks) {
        const std::string sel_name = cfg_.multi_task ? "multi" : std::string(to_string(t));
        const auto sel_json = nlohmann::json::parse(read_text(split_dir(k) / "search" / (sel_name + ".json")));
        const Mask mask = selection_from_json(sel_json, grouping);
        const auto test = split.select(split.test, t);
        const auto& mu = means.means.at(t);
        const Metric metric = metric_for(t);
        const Mask none(grouping.size(), 0);
        std::vector<EvalRecord> rows;
        for (EvalMode m : cfg_.modes) {
          if (m == EvalMode::one_shot) rows.push_back({"One-shot", evaluate(w, grouping, none, mu, t, test, metric, m)});
          if (m == EvalMode::query_only) {
            rows.push_back({"Query-only", evaluate(w, grouping, none, mu, t, test, metric, m)});
            rows.push_back({"TV (" + method_name() + ")", evaluate(w, grouping, mask, mu, t, test, metric, m)});
          }
          if (m == EvalMode::one_shot_plus_tv)
            rows.push_back({"One-shot + TV (" + method_name() + ")", evaluate(w, grouping, mask, mu, t, test, metric, m)});
        }
        nlohmann::json scores = nlohmann::json::array();
        for (const auto& r : rows) {
          scores.push_back({{"method", r.method}, {"score", r.score}});
          csv << to_string(t) << ',' << r.method << ',' << fmt6(r.score) << '\n';
        }
        nlohmann::json out = provenance();
        out.update({{"task", to_string(t)}, {"split", k}, {"n_splits", cfg_.n_splits},
                    {"metric", metric == Metric::miou ? "miou" : "mse"},
                    {"direction", higher_is_better(t) ? "higher" : "lower"},
                    {"selected_groups", mask_groups(mask).size()}, {"n_test", test.size()}, {"scores", scores}});
        write_text(dir / (std::string(to_string(t)) + ".json"), out.dump(2) + "\n");

        PatchSet patch;
        for (const auto& s : grouping.expand(mask_groups(mask))) patch.emplace(s, mu.at(s));
        for (int i = 0; i < std::min<int>(cfg_.strips, static_cast<int>(test.size())); ++i) {
          const auto& s = *test[static_cast<std::size_t>(i)];
          const GridImage one = one_shot_predict(w, s), tv = tv_predict(w, s.x_q, patch);
          const auto path = dir / "strips" / (std::string(to_string(t)) + "_" + std::to_string(i) + ".ppm");
          write_ppm(path, {&s.x_q, &one, &tv, &s.y_q});
          sidecar(path, {{"columns", {"query", "one-shot", "tv", "ground-truth"}}});
        }
      }
      text(dir / "eval.csv", csv.str());
    });
  }

  void report() {
    std::string inputs;
    for (int k = 0; k < cfg_.n_splits; ++k) inputs += eval_key(k);
    stage("report", cfg_.out / "report", key({{"stage", "report"}, {"inputs", inputs}}),
          [&](const std::filesystem::path&) { write_report(cfg_.out, false); });
  }

  /// Builds report/table.{md,csv} and mean heatmaps from whatever split
  /// results exist under `root`. Results from different configurations are
  /// refused unless `force`.
  static void write_report(const std::filesystem::path& root, bool force) {
    namespace fs = std::filesystem;
    std::vector<nlohmann::json> results;
    if (fs::exists(root))
      for (const auto& entry : fs::directory_iterator(root)) {
        const auto name = entry.path().filename().string();
        if (!entry.is_directory() || name.rfind("split", 0) != 0 || !fs::exists(entry.path() / "eval")) continue;
        std::vector<fs::path> files;
        for (const auto& f : fs::directory_iterator(entry.path() / "eval"))
          if (f.path().extension() == ".json" && f.path().stem().extension().empty() &&
              f.path().filename() != "stage.json")
            files.push_back(f.path());
        std::sort(files.begin(), files.end());
        for (const auto& f : files) results.push_back(nlohmann::json::parse(read_text(f)));
      }
    if (results.empty()) throw std::runtime_error("no evaluation results under " + root.string());
    std::set<std::string> hashes;
    int n_splits = 0;
    for (const auto& r : results) {
      hashes.insert(r.at("config_hash").get<std::string>());
      n_splits = std::max({n_splits, r.at("n_splits").get<int>(), r.at("split").get<int>() + 1});
    }
    if (hashes.size() > 1 && !force)
      throw ConfigError("results come from " + std::to_string(hashes.size()) +
                        " different configurations; pass --force to mix them");
    std::vector<TaskId> tasks;
    for (const auto& r : results) {
      const TaskId t = parse_task(r.at("task").get<std::string>());
      if (std::find(tasks.begin(), tasks.end(), t) == tasks.end()) tasks.push_back(t);
    }
    std::sort(tasks.begin(), tasks.end());
    ReportTable table(tasks, n_splits);
    std::sort(results.begin(), results.end(), [](const auto& a, const auto& b) {
      return std::pair(a.at("split").template get<int>(), a.at("task").template get<std::string>()) <
             std::pair(b.at("split").template get<int>(), b.at("task").template get<std::string>());
    });
    for (const auto& r : results)
      for (const auto& s : r.at("scores"))
        table.add(s.at("method").get<std::string>(), parse_task(r.at("task").get<std::string>()),
                  r.at("split").get<int>(), s.at("score").get<double>());
    const fs::path dir = root / "report";
    write_text(dir / "table.md", table.markdown());
    write_text(dir / "table.csv", table.csv());

    Mat sum;
    int n = 0;
    for (int k = 0; k < n_splits; ++k) {
      const auto path = root / ("split" + std::to_string(k)) / "scores" / "heads.csv";
      if (!fs::exists(path)) continue;
      const Mat m = parse_matrix_csv(read_text(path));
      if (n == 0) sum = Mat::Zero(m.rows(), m.cols());
      if (m.rows() != sum.rows() || m.cols() != sum.cols()) throw std::runtime_error("heatmap shape mismatch");
      sum += m;
      ++n;
    }
    if (n > 0) {
      sum /= n;
      write_text(dir / "heads_mean.csv", matrix_csv(sum));
      write_pgm(dir / "heads_mean.pgm", sum);
    }
    nlohmann::json prov = {{"config_hashes", std::vector<std::string>(hashes.begin(), hashes.end())},
                           {"tool_version", std::string(kToolVersion)}, {"forced", force && hashes.size() > 1}};
    write_text(dir / "table.md.json", prov.dump(2) + "\n");
    write_text(dir / "table.csv.json", prov.dump(2) + "\n");
  }

  static Mat parse_matrix_csv(const std::string& text) {
    std::vector<std::vector<double>> rows;
    std::istringstream is(text);
    for (std::string line; std::getline(is, line);) {
      if (line.empty()) continue;
      std::vector<double> row;
      std::stringstream ls(line);
      for (std::string cell; std::getline(ls, cell, ',');) row.push_back(std::stod(cell));
      if (!rows.empty() && row.size() != rows.front().size()) throw std::runtime_error("ragged matrix CSV");
      rows.push_back(std::move(row));
    }
    Mat m(static_cast<Eigen::Index>(rows.size()), rows.empty() ? 0 : static_cast<Eigen::Index>(rows.front().size()));
    for (std::size_t r = 0; r < rows.size(); ++r)
      for (std::size_t c = 0; c < rows[r].size(); ++c)
        m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r][c];
    return m;
  }

  /// Patches the linear combination `expr` of task means at the selected
  /// positions and scores it on `reference`-task queries whose inputs were
  /// masked like inpainting queries, next to `reference`'s own vector.
  std::pair<double, double> compose(int k, const std::string& expr, TaskId reference) {
    const auto terms = parse_composition(expr);
    const auto& split = load_split_k(k);
    const auto& w = weights();
    const auto means = load_means(k);
    const auto grouping = make_grouping(cfg_.model, cfg_.granularity, cfg_.stage);
    auto sel_path = split_dir(k) / "search" / "multi.json";
    if (!std::filesystem::exists(sel_path)) sel_path = split_dir(k) / "search" / (std::string(to_string(reference)) + ".json");
    const Mask mask = selection_from_json(nlohmann::json::parse(read_text(sel_path)), grouping);
    const auto queries = masked_queries(split.select(split.test, reference), Rng(cfg_.seed).child("compose"));
    std::vector<const TripletSample*> ptrs;
    for (const auto& s : queries) ptrs.push_back(&s);
    const auto composed = compose_vectors(means, terms);
    const Metric metric = metric_for(reference);
    const double a = evaluate(w, grouping, mask, composed, reference, ptrs, metric, EvalMode::query_only);
    const double b = evaluate(w, grouping, mask, means.means.at(reference), reference, ptrs, metric, EvalMode::query_only);
    std::ostringstream os;
    os << "expr,reference,selection,composed,reference_only,n\n"
       << expr << ',' << to_string(reference) << ',' << sel_path.filename().string() << ',' << fmt6(a) << ','
       << fmt6(b) << ',' << ptrs.size() << '\n';
    text(split_dir(k) / "compose" / "compose.csv", os.str());
    return {a, b};
  }

  /// Copies of `samples` whose query input has an inpainting square zeroed.
  static std::vector<TripletSample> masked_queries(const std::vector<const TripletSample*>& samples, const Rng& rng) {
    std::vector<TripletSample> out;
    for (std::size_t i = 0; i < samples.size(); ++i) {
      TripletSample s = *samples[i];
      Rng r = rng.child(i);
      s.x_q = mask_square(s.x_q, r);
      out.push_back(std::move(s));
    }
    return out;
  }

  // -- artifacts shared with the CLI -----------------------------------------

  const DatasetSplit& load_split_k(int k) {
    auto& slot = splits_[k];
    if (!slot) {
      const auto path = cfg_.split_paths.empty()
                            ? cfg_.out / "data" / ("split" + std::to_string(k) + ".tvds")
                            : std::filesystem::path(cfg_.split_paths[static_cast<std::size_t>(k)]);
      slot = std::make_unique<DatasetSplit>(load_split(path));
    }
    return *slot;
  }

  const Weights& weights() {
    if (!weights_) weights_ = std::make_unique<Weights>(load_weights(cfg_.out / "model" / "weights.tvwt"));
    return *weights_;
  }

  std::vector<ActivationStore> load_stores(int k, const std::vector<TaskId>& tasks) const {
    std::vector<ActivationStore> out;
    for (TaskId t : tasks) out.push_back(load_store(split_dir(k) / "stores" / (std::string(to_string(t)) + ".tvas")));
    return out;
  }

  MeanActivationTable load_means(int k) const { return mean_activations(load_stores(k, all_tasks())); }

  ScoreTable load_scores(int k) const { return parse_scores_csv(read_text(split_dir(k) / "scores" / "scores.csv")); }

  [[nodiscard]] std::vector<TaskId> all_tasks() const {
    std::vector<TaskId> out = cfg_.tasks;
    out.push_back(TaskId::identity);
    return out;
  }

  [[nodiscard]] nlohmann::json provenance() const {
    return {{"config_hash", hash_}, {"seed", cfg_.seed}, {"tool_version", std::string(kToolVersion)}};
  }

 private:
  using Body = std::function<void(const std::filesystem::path&)>;

  void stage(const std::string& name, const std::filesystem::path& dir, const std::string& k, const Body& body) {
    const auto manifest = dir / "stage.json";
    if (std::filesystem::exists(manifest)) {
      try {
        if (nlohmann::json::parse(read_text(manifest)).value("key", std::string()) == k) {
          ++hits_;
          log_ << "[" << name << "] " << dir.lexically_relative(cfg_.out).string() << ": cached\n";
          return;
        }
      } catch (const std::exception&) {
        // unreadable manifest: rebuild
      }
    }
    log_ << "[" << name << "] " << dir.lexically_relative(cfg_.out).string() << ": running\n";
    try {
      std::filesystem::remove_all(dir);
      std::filesystem::create_directories(dir);
      body(dir);
      nlohmann::json m = provenance();
      m["stage"] = name;
      m["key"] = k;
      write_text(manifest, m.dump(2) + "\n");
    } catch (const StageError&) {
      throw;
    } catch (const std::exception& e) {
      throw StageError(name, e.what());
    }
    ++runs_;
  }

  void sidecar(const std::filesystem::path& path, nlohmann::json extra = nlohmann::json::object()) const {
    write_sidecar(path, hash_, cfg_.seed, std::move(extra));
  }
  void text(const std::filesystem::path& path, const std::string& body) const {
    write_text(path, body);
    sidecar(path);
  }
  void pgm(const std::filesystem::path& path, const Mat& m) const {
    write_pgm(path, m);
    sidecar(path);
  }

  [[nodiscard]] std::string key(const nlohmann::json& inputs) const {
    nlohmann::json j = inputs;
    j["tool_version"] = std::string(kToolVersion);
    return config_hash(j);
  }
  [[nodiscard]] std::string data_key() const {
    return key({{"stage", "data"}, {"seed", cfg_.seed}, {"n_splits", cfg_.n_splits},
                {"sizes", {cfg_.sizes.train, cfg_.sizes.val, cfg_.sizes.test}}, {"side", cfg_.model.image_side},
                {"tasks", task_names(all_tasks())}, {"paths", cfg_.split_paths}});
  }
  [[nodiscard]] std::string train_key() const {
    std::string src;
    if (!cfg_.weights.empty()) src = hash_hex(fnv1a(read_text(cfg_.weights)));
    return key({{"stage", "train"}, {"seed", cfg_.seed}, {"model", cfg_.model}, {"train", cfg_.train},
                {"pretrain", cfg_.pretrain_per_task}, {"weights", src}});
  }
  [[nodiscard]] std::string collect_key(int k) const {
    return key({{"stage", "collect"}, {"data", data_key()}, {"train", train_key()}, {"split", k},
                {"n", cfg_.collect_samples}, {"tasks", task_names(all_tasks())}});
  }
  [[nodiscard]] std::string score_key(int k) const {
    return key({{"stage", "score"}, {"collect", collect_key(k)}, {"tasks", task_names(cfg_.tasks)}});
  }
  [[nodiscard]] std::string cluster_key(int k) const {
    return key({{"stage", "cluster"}, {"collect", collect_key(k)}, {"tasks", task_names(cfg_.tasks)}});
  }
  [[nodiscard]] std::string search_key(int k) const {
    return key({{"stage", "search"}, {"score", score_key(k)}, {"algorithm", cfg_.algorithm},
                {"reinforce", cfg_.reinforce}, {"grs", cfg_.grs}, {"cma", cfg_.cma},
                {"granularity", to_string(cfg_.granularity)}, {"filter", to_string(cfg_.stage)},
                {"multi", cfg_.multi_task}, {"target", cfg_.target_count}});
  }
  [[nodiscard]] std::string eval_key(int k) const {
    nlohmann::json modes = nlohmann::json::array();
    for (EvalMode m : cfg_.modes) modes.push_back(to_string(m));
    return key({{"stage", "eval"}, {"search", search_key(k)}, {"modes", modes}, {"strips", cfg_.strips},
                {"config", hash_}});
  }

  static nlohmann::json task_names(const std::vector<TaskId>& ts) {
    nlohmann::json j = nlohmann::json::array();
    for (TaskId t : ts) j.push_back(to_string(t));
    return j;
  }

  [[nodiscard]] std::string method_name() const {
    return (cfg_.multi_task ? "multi-task " : "") + cfg_.algorithm;
  }

  static double normalizer(const Weights& w, TaskId t, const std::vector<const TripletSample*>& s) {
    return std::max(one_shot_baseline_loss(w, t, s), 1e-6);
  }

  void run_algorithm(const std::filesystem::path& dir, const std::string& name, const Objective& obj,
                     const SiteGrouping& grouping, const ScoreTable& table, std::size_t task_index) {
    const std::size_t n = obj.group_count();
    Mask mask;
    std::optional<std::vector<double>> theta;
    int step = 0;
    const auto glayers = group_layers(cfg_.model, grouping);
    const auto lscores = layer_scores(cfg_.model, table);
    const Rng brng = Rng(cfg_.seed).child("baseline").child(task_index);
    if (cfg_.algorithm == "reinforce") {
      const auto res = reinforce_search(obj, cfg_.reinforce);
      mask = res.selection;
      theta = res.theta;
      step = res.best_step;
      text(dir / (name + "_log.csv"), search_log_csv(res.state.log));
    } else if (cfg_.algorithm == "grs" || cfg_.algorithm == "random-k-layers") {
      const auto res = cfg_.algorithm == "grs" ? grs_search(obj, glayers, lscores, cfg_.grs)
                                               : random_k_layers_grs(obj, glayers, lscores, cfg_.grs);
      mask = res.selection;
      step = res.iterations;
      std::ostringstream os;
      os << "iteration,group,score\n";
      for (const auto& f : res.accepted) os << f.iteration << ',' << f.group << ',' << fmt6(f.score) << '\n';
      text(dir / (name + "_log.csv"), os.str());
    } else if (cfg_.algorithm == "cma") {
      const auto res = cma_select(obj, static_cast<std::size_t>(cfg_.cma.n_images), cfg_.cma.fraction, cfg_.cma.seed);
      mask = res.selection;
      std::ostringstream os;
      os << "group,label,causal_score\n";
      for (std::size_t g = 0; g < n; ++g) os << g << ',' << label(grouping.groups[g]) << ',' << fmt6(res.scores[g]) << '\n';
      text(dir / (name + "_scores.csv"), os.str());
    } else {
      const auto kind = cfg_.algorithm == "top-quadrants" ? BaselineKind::top_quadrants : BaselineKind::random_quadrants;
      mask = baseline_select(kind, n, static_cast<std::size_t>(cfg_.target_count), group_scores(grouping, table), brng);
    }
    nlohmann::json j = selection_json(grouping, mask, theta, step, obj.heldout(mask), cfg_.seed);
    j.update(provenance());
    j["algorithm"] = cfg_.algorithm;
    j["task"] = name;
    write_text(dir / (name + ".json"), j.dump(2) + "\n");
  }

  RunConfig cfg_;
  std::ostream& log_;
  std::string hash_;
  int hits_ = 0, runs_ = 0;
  std::map<int, std::unique_ptr<DatasetSplit>> splits_;
  std::unique_ptr<Weights> weights_;
};

}  // namespace tvlab
