#pragma once

// Synthetic objective with a known optimal subset. Loss is additive over the
// selected groups, so the optimum can be enumerated exactly.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "tvlab/numerics.hpp"

namespace tvlab {

struct PlantedTask {
  std::string name;
  std::set<int> truth;
  std::map<int, double> weight;  // truth groups
  std::map<int, double> cost;    // every other group
};

struct PlantedConfig {
  std::vector<int> universe;
  std::vector<PlantedTask> tasks;
  double base_loss = 1.0;
  double noise_sigma = 0.0;
  // Optional group -> layer map, used when a search needs layer scores.
  std::map<int, int> layer_of;

  [[nodiscard]] std::size_t index_of(int group) const {
    const auto it = std::lower_bound(universe.begin(), universe.end(), group);
    if (it == universe.end() || *it != group) throw std::invalid_argument("unknown group id: " + std::to_string(group));
    return static_cast<std::size_t>(it - universe.begin());
  }

  [[nodiscard]] const PlantedTask& task(std::size_t j) const {
    if (j >= tasks.size()) throw std::invalid_argument("planted task index out of range");
    return tasks[j];
  }

  void validate() const {
    if (universe.empty()) throw std::invalid_argument("planted universe is empty");
    if (!std::is_sorted(universe.begin(), universe.end()) ||
        std::adjacent_find(universe.begin(), universe.end()) != universe.end())
      throw std::invalid_argument("planted universe must be strictly increasing");
    if (tasks.empty()) throw std::invalid_argument("planted config has no tasks");
    if (!(noise_sigma >= 0)) throw std::invalid_argument("noise_sigma must be >= 0");
    for (const auto& t : tasks) {
      if (t.truth.empty()) throw std::invalid_argument("task " + t.name + " has an empty truth set");
      double total = 0;
      for (int g : universe) {
        const bool is_truth = t.truth.count(g) != 0;
        const auto& table = is_truth ? t.weight : t.cost;
        const auto it = table.find(g);
        if (it == table.end())
          throw std::invalid_argument("task " + t.name + " lacks a " + (is_truth ? "weight" : "cost") +
                                      " for group " + std::to_string(g));
        if (it->second < 0) throw std::invalid_argument("negative weight or cost in task " + t.name);
        if (is_truth) total += it->second;
      }
      for (int g : t.truth) (void)index_of(g);
      if (!(base_loss > total)) throw std::invalid_argument("base_loss must exceed the summed truth weights");
    }
  }
};

/// Every group gets signal `w` if it is in the truth set and cost `c` otherwise.
inline PlantedTask uniform_task(std::string name, const std::vector<int>& universe, std::set<int> truth, double w,
                                double c) {
  PlantedTask t{std::move(name), std::move(truth), {}, {}};
  for (int g : universe) (t.truth.count(g) ? t.weight : t.cost)[g] = t.truth.count(g) ? w : c;
  return t;
}

inline std::vector<int> iota_groups(int n) {
  std::vector<int> u(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) u[static_cast<std::size_t>(i)] = i;
  return u;
}

struct PlantedEval {
  std::vector<int> selection;
  double loss = 0;
  double noise_draw = 0;
};

inline double planted_expected_loss(const PlantedConfig& cfg, std::size_t task, const std::vector<int>& selection) {
  const PlantedTask& t = cfg.task(task);
  double loss = cfg.base_loss;
  for (int g : selection) {
    (void)cfg.index_of(g);
    if (t.truth.count(g)) loss -= t.weight.at(g);
    else loss += t.cost.at(g);
  }
  return std::max(0.0, loss);
}

inline PlantedEval planted_loss(const PlantedConfig& cfg, std::size_t task, const std::vector<int>& selection,
                                Rng& rng) {
  PlantedEval e;
  e.selection = selection;
  std::sort(e.selection.begin(), e.selection.end());
  if (std::adjacent_find(e.selection.begin(), e.selection.end()) != e.selection.end())
    throw std::invalid_argument("selection contains a duplicate group");
  const PlantedTask& t = cfg.task(task);
  double loss = cfg.base_loss;
  for (int g : e.selection) {
    (void)cfg.index_of(g);
    if (t.truth.count(g)) loss -= t.weight.at(g);
    else loss += t.cost.at(g);
  }
  e.noise_draw = cfg.noise_sigma * rng.normal();
  e.loss = std::max(0.0, loss + e.noise_draw);
  return e;
}

struct PlantedOptimum {
  std::vector<int> subset;
  double loss = 0;
};

namespace detail {

inline bool better_subset(double loss, const std::vector<int>& s, double best_loss, const std::vector<int>& best) {
  const double tol = 1e-12 * (1 + std::abs(best_loss));
  if (loss < best_loss - tol) return true;
  if (loss > best_loss + tol) return false;
  if (s.size() != best.size()) return s.size() < best.size();
  return s < best;
}

template <typename F>
PlantedOptimum enumerate_best(const std::vector<int>& universe, F&& loss_of) {
  if (universe.size() > 24) throw std::invalid_argument("universe too large for brute force (max 24 groups)");
  const std::uint32_t n = static_cast<std::uint32_t>(universe.size());
  PlantedOptimum best{{}, loss_of(std::vector<int>{})};
  std::vector<int> s;
  for (std::uint32_t m = 1; m < (1u << n); ++m) {
    s.clear();
    for (std::uint32_t i = 0; i < n; ++i)
      if (m & (1u << i)) s.push_back(universe[i]);
    const double l = loss_of(s);
    if (better_subset(l, s, best.loss, best.subset)) best = {s, l};
  }
  return best;
}

}  // namespace detail

/// Exhaustive search over all subsets on the noise-free loss. Ties go to the
/// smaller subset, then to the lexicographically smaller id list.
inline PlantedOptimum brute_force_best(const PlantedConfig& cfg, std::size_t task) {
  return detail::enumerate_best(cfg.universe, [&](const std::vector<int>& s) {
    return planted_expected_loss(cfg, task, s);
  });
}

/// Same enumeration for a shared selection: mean over `tasks` of the
/// expected loss divided by that task's normalizer.
inline PlantedOptimum brute_force_best_multi(const PlantedConfig& cfg, const std::vector<std::size_t>& tasks,
                                             const std::vector<double>& normalizers) {
  if (tasks.size() != normalizers.size()) throw std::invalid_argument("one normalizer per task required");
  return detail::enumerate_best(cfg.universe, [&](const std::vector<int>& s) {
    double total = 0;
    for (std::size_t k = 0; k < tasks.size(); ++k) total += planted_expected_loss(cfg, tasks[k], s) / normalizers[k];
    return total / static_cast<double>(tasks.size());
  });
}

// ---------------------------------------------------------------------------
// JSON

inline void to_json(nlohmann::json& j, const PlantedConfig& c) {
  j = nlohmann::json::object();
  j["universe"] = c.universe;
  j["base_loss"] = c.base_loss;
  j["noise_sigma"] = c.noise_sigma;
  auto tasks = nlohmann::json::array();
  for (const auto& t : c.tasks) {
    nlohmann::json w = nlohmann::json::object(), k = nlohmann::json::object();
    for (const auto& [g, v] : t.weight) w[std::to_string(g)] = v;
    for (const auto& [g, v] : t.cost) k[std::to_string(g)] = v;
    tasks.push_back({{"name", t.name}, {"truth", t.truth}, {"weights", w}, {"costs", k}});
  }
  j["tasks"] = tasks;
  if (!c.layer_of.empty()) {
    nlohmann::json l = nlohmann::json::object();
    for (const auto& [g, v] : c.layer_of) l[std::to_string(g)] = v;
    j["layers"] = l;
  }
}

// Tasks may give scalar "signal" / "cost" defaults instead of full tables.
inline void from_json(const nlohmann::json& j, PlantedConfig& c) {
  c = PlantedConfig{};
  if (j.at("universe").is_number_integer()) c.universe = iota_groups(j.at("universe").get<int>());
  else c.universe = j.at("universe").get<std::vector<int>>();
  std::sort(c.universe.begin(), c.universe.end());
  c.base_loss = j.value("base_loss", 1.0);
  c.noise_sigma = j.value("noise_sigma", 0.0);
  for (const auto& tj : j.at("tasks")) {
    PlantedTask t;
    t.name = tj.value("name", "task" + std::to_string(c.tasks.size()));
    for (int g : tj.at("truth").get<std::vector<int>>()) t.truth.insert(g);
    const double signal = tj.value("signal", 0.3), cost = tj.value("cost", 0.2);
    for (int g : c.universe) (t.truth.count(g) ? t.weight : t.cost)[g] = t.truth.count(g) ? signal : cost;
    if (tj.contains("weights"))
      for (const auto& [k, v] : tj["weights"].items()) t.weight[std::stoi(k)] = v.get<double>();
    if (tj.contains("costs"))
      for (const auto& [k, v] : tj["costs"].items()) t.cost[std::stoi(k)] = v.get<double>();
    c.tasks.push_back(std::move(t));
  }
  if (j.contains("layers"))
    for (const auto& [k, v] : j["layers"].items()) c.layer_of[std::stoi(k)] = v.get<int>();
  c.validate();
}

}  // namespace tvlab
