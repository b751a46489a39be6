#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>

#include "tvlab/pipeline.hpp"

using namespace tvlab;
namespace fs = std::filesystem;

namespace {

constexpr int kConfigError = 2;
constexpr int kStageError = 3;

const std::vector<std::string> kStages{"data", "train", "collect", "score", "cluster", "search", "eval"};

struct Options {
  std::string config;
  std::string out;
  std::vector<int> splits;
  std::string algo, granularity, stage, backend = "model", planted;
  bool multi_task = false;
  int target = 0;
  std::vector<std::string> modes;
  std::string expr = "inpaint+segmentation-identity", reference = "segmentation";
  std::string dir;
  bool force = false;
};

RunConfig load(const Options& o) {
  if (o.config.empty()) throw ConfigError("--config is required");
  RunConfig c = load_run_config(o.config);
  if (!o.out.empty()) c.out = o.out;
  if (!o.algo.empty()) c.algorithm = o.algo;
  if (!o.granularity.empty()) c.granularity = parse_granularity(o.granularity);
  if (!o.stage.empty()) c.stage = parse_stage_filter(o.stage);
  if (o.multi_task) c.multi_task = true;
  if (o.target > 0) c.target_count = o.target;
  if (!o.modes.empty()) {
    c.modes.clear();
    for (const auto& m : o.modes) c.modes.push_back(parse_eval_mode(m));
  }
  c.validate();
  return c;
}

std::vector<int> splits_of(const Options& o, const RunConfig& c) {
  if (o.splits.empty()) {
    std::vector<int> all;
    for (int k = 0; k < c.n_splits; ++k) all.push_back(k);
    return all;
  }
  for (int k : o.splits)
    if (k < 0 || k >= c.n_splits) throw ConfigError("split " + std::to_string(k) + " out of range");
  return o.splits;
}

/// Runs every stage up to and including `last`; earlier stages are usually
/// cache hits.
void run_through(Pipeline& p, const std::string& last, const std::vector<int>& splits) {
  const auto upto = [&](const std::string& s) {
    return std::find(kStages.begin(), kStages.end(), s) <= std::find(kStages.begin(), kStages.end(), last);
  };
  p.data();
  if (upto("train")) p.train();
  for (int k : splits) {
    if (upto("collect")) p.collect(k);
    if (upto("score")) p.score(k);
    if (upto("cluster")) p.cluster(k);
    if (upto("search")) p.search(k);
    if (upto("eval")) p.eval(k);
  }
}

int planted_search(const Options& o) {
  if (o.planted.empty()) throw ConfigError("--backend planted needs --planted FILE");
  if (!fs::exists(o.planted)) throw ConfigError("planted config not found: " + o.planted);
  PlantedConfig pc;
  try {
    pc = nlohmann::json::parse(read_text(o.planted)).get<PlantedConfig>();
  } catch (const std::exception& e) {
    throw ConfigError(std::string("invalid planted config: ") + e.what());
  }
  ReinforceConfig rc;
  GrsConfig gc;
  CmaConfig cc;
  if (!o.config.empty()) {
    const RunConfig run = load_run_config(o.config);
    rc = run.reinforce;
    gc = run.grs;
    cc = run.cma;
  }
  const std::string algo = o.algo.empty() ? "reinforce" : o.algo;
  if (std::find(search_algorithms().begin(), search_algorithms().end(), algo) == search_algorithms().end())
    throw ConfigError("unknown algorithm: " + algo);
  if (algo == "top-quadrants") throw ConfigError("top-quadrants needs a score table; unavailable on the planted backend");
  if (algo == "random-quadrants" && o.target < 1) throw ConfigError("random-quadrants needs --target");

  const std::size_t n = pc.universe.size();
  std::vector<int> glayer(n, 0);
  std::map<int, double> lscore;
  for (std::size_t i = 0; i < n; ++i) {
    const auto it = pc.layer_of.find(pc.universe[i]);
    glayer[i] = it == pc.layer_of.end() ? 0 : it->second;
    lscore[glayer[i]] = 0.0;
  }

  const auto run = [&](const Objective& obj) -> std::pair<Mask, nlohmann::json> {
    nlohmann::json extra = nlohmann::json::object();
    if (algo == "reinforce") {
      const auto r = reinforce_search(obj, rc);
      extra["best_step"] = r.best_step;
      extra["theta"] = r.theta;
      return {r.selection, extra};
    }
    if (algo == "grs" || algo == "random-k-layers") {
      const auto r = algo == "grs" ? grs_search(obj, glayer, lscore, gc) : random_k_layers_grs(obj, glayer, lscore, gc);
      extra["iterations"] = r.iterations;
      extra["accepted_flips"] = r.accepted.size();
      return {r.selection, extra};
    }
    if (algo == "cma") {
      const auto r = cma_select(obj, static_cast<std::size_t>(cc.n_images), cc.fraction, cc.seed);
      extra["causal_scores"] = r.scores;
      return {r.selection, extra};
    }
    return {baseline_select(BaselineKind::random_quadrants, n, static_cast<std::size_t>(o.target), {},
                            Rng(rc.seed).child("planted")),
            extra};
  };
  const auto ids_of = [&](const Mask& m) {
    std::vector<int> out;
    for (std::size_t i = 0; i < n; ++i)
      if (m[i]) out.push_back(pc.universe[i]);
    return out;
  };

  nlohmann::json results = nlohmann::json::array();
  if (o.multi_task) {
    std::vector<std::unique_ptr<PlantedObjective>> objs;
    std::vector<const Objective*> ptrs;
    std::vector<std::size_t> idx;
    for (std::size_t j = 0; j < pc.tasks.size(); ++j) {
      objs.push_back(std::make_unique<PlantedObjective>(pc, j));
      ptrs.push_back(objs.back().get());
      idx.push_back(j);
    }
    const MultiTaskObjective multi(ptrs, std::vector<double>(ptrs.size(), pc.base_loss), nullptr, 1.0, 2);
    const auto [mask, extra] = run(multi);
    const auto ids = ids_of(mask);
    double expected = 0;
    for (std::size_t j = 0; j < pc.tasks.size(); ++j) expected += planted_expected_loss(pc, j, ids) / pc.base_loss;
    expected /= static_cast<double>(pc.tasks.size());
    const auto opt = brute_force_best_multi(pc, idx, std::vector<double>(idx.size(), pc.base_loss));
    results.push_back({{"task", "multi"}, {"selection", ids}, {"expected_loss", expected},
                       {"optimum", opt.subset}, {"optimum_loss", opt.loss}, {"details", extra}});
  } else {
    for (std::size_t j = 0; j < pc.tasks.size(); ++j) {
      const PlantedObjective obj(pc, j);
      const auto [mask, extra] = run(obj);
      const auto ids = ids_of(mask);
      const auto opt = brute_force_best(pc, j);
      results.push_back({{"task", pc.tasks[j].name}, {"selection", ids},
                         {"expected_loss", planted_expected_loss(pc, j, ids)}, {"optimum", opt.subset},
                         {"optimum_loss", opt.loss}, {"details", extra}});
    }
  }
  for (const auto& r : results) {
    std::cout << r.at("task").get<std::string>() << ": selection " << r.at("selection").dump() << " expected loss "
              << fmt6(r.at("expected_loss").get<double>()) << " | optimum " << r.at("optimum").dump() << " loss "
              << fmt6(r.at("optimum_loss").get<double>()) << '\n';
  }
  fs::path out = o.out.empty() ? (std::getenv("TVLAB_OUT") ? fs::path(std::getenv("TVLAB_OUT")) : fs::path("runs"))
                               : fs::path(o.out);
  const fs::path file = out / "planted" / ("search_" + algo + (o.multi_task ? "_multi" : "") + ".json");
  nlohmann::json doc = {{"algorithm", algo}, {"results", results},
                        {"config_hash", config_hash(nlohmann::json(pc))},
                        {"seed", rc.seed}, {"tool_version", std::string(kToolVersion)}};
  write_text(file, doc.dump(2) + "\n");
  std::cout << "wrote " << file.string() << '\n';
  return 0;
}

int dispatch(const std::string& cmd, const Options& o) {
  if (cmd == "search" && o.backend == "planted") return planted_search(o);
  if (cmd == "search" && o.backend != "model") throw ConfigError("unknown backend: " + o.backend);
  if (cmd == "report") {
    fs::path dir = o.dir;
    if (dir.empty()) dir = load(o).out;
    Pipeline::write_report(dir, o.force);
    std::cout << read_text(dir / "report" / "table.md");
    return 0;
  }
  const RunConfig cfg = load(o);
  Pipeline p(cfg, std::cerr);
  const auto splits = splits_of(o, cfg);
  if (cmd == "pipeline") {
    p.run();
    std::cout << read_text(cfg.out / "report" / "table.md");
    return 0;
  }
  if (cmd == "compose") {
    run_through(p, "search", splits);
    const TaskId ref = parse_task(o.reference);
    for (int k : splits) {
      const auto [composed, single] = p.compose(k, o.expr, ref);
      std::cout << "split " << k << ": " << o.expr << " -> " << fmt6(composed) << ", " << o.reference << " only -> "
                << fmt6(single) << '\n';
    }
    return 0;
  }
  const std::map<std::string, std::string> stage_of{{"gen-data", "data"}, {"train", "train"}, {"collect", "collect"},
                                                    {"score", "score"},   {"cluster", "cluster"}, {"search", "search"},
                                                    {"eval", "eval"}};
  run_through(p, stage_of.at(cmd), splits);
  std::cerr << "done: " << p.stages_run() << " stage(s) run, " << p.cache_hits() << " cached\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Task-vector discovery toolkit for a toy visual in-context model"};
  app.require_subcommand(1);
  Options o;

  const auto common = [&](CLI::App* sub) {
    sub->add_option("-c,--config", o.config, "Run configuration (JSON)");
    sub->add_option("-o,--out", o.out, "Output root (overrides TVLAB_OUT and the config)");
    sub->add_option("--split", o.splits, "Restrict to these split indices");
  };
  const auto search_opts = [&](CLI::App* sub) {
    sub->add_option("--algo", o.algo, "Search algorithm")
        ->check(CLI::IsMember({"reinforce", "grs", "cma", "random-quadrants", "top-quadrants", "random-k-layers"}));
    sub->add_option("--granularity", o.granularity, "Site grouping")
        ->check(CLI::IsMember({"token", "quadrant", "head", "layer"}));
    sub->add_option("--stage", o.stage, "Patchable stages")->check(CLI::IsMember({"encoder", "decoder", "both"}));
    sub->add_flag("--multi-task", o.multi_task, "One shared selection for all tasks");
    sub->add_option("--target", o.target, "Selection size for random-/top-quadrants");
  };

  common(app.add_subcommand("gen-data", "Generate the dataset splits"));
  common(app.add_subcommand("train", "Train the toy model"));
  common(app.add_subcommand("collect", "Record site activations per task"));
  common(app.add_subcommand("score", "Taskness scores and heatmaps"));
  common(app.add_subcommand("cluster", "Per-head clustering metrics"));
  auto* search = app.add_subcommand("search", "Find patch positions");
  common(search);
  search_opts(search);
  search->add_option("--backend", o.backend, "Objective backend")->check(CLI::IsMember({"model", "planted"}));
  search->add_option("--planted", o.planted, "Planted-oracle configuration (JSON) for --backend planted");
  auto* eval = app.add_subcommand("eval", "Evaluate selections on test queries");
  common(eval);
  search_opts(eval);
  eval->add_option("--mode", o.modes, "Evaluation modes")
      ->check(CLI::IsMember({"query-only", "one-shot", "one-shot-plus-tv"}));
  auto* compose = app.add_subcommand("compose", "Evaluate a linear combination of task vectors");
  common(compose);
  search_opts(compose);
  compose->add_option("--expr", o.expr, "Combination, e.g. inpaint+segmentation-identity");
  compose->add_option("--reference", o.reference, "Task whose queries and metric are used");
  auto* report = app.add_subcommand("report", "Tables and heatmaps from a results directory");
  common(report);
  report->add_option("--dir", o.dir, "Results directory (defaults to the config's output root)");
  report->add_flag("--force", o.force, "Allow results from different configurations");
  auto* pipeline = app.add_subcommand("pipeline", "Run every stage");
  common(pipeline);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kConfigError;
  }
  const std::string cmd = app.get_subcommands().front()->get_name();
  try {
    return dispatch(cmd, o);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const StageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kStageError;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kStageError;
  }
}
