#pragma once

// Selection of task-vector sites: REINFORCE over Bernoulli masks, greedy
// random search, single-group causal ranking, baselines, evaluation and
// linear composition of mean activations.

#include <algorithm>
#include <cmath>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "tvlab/activation_lab.hpp"
#include "tvlab/planted.hpp"

namespace tvlab {

using Mask = std::vector<std::uint8_t>;

inline std::vector<int> mask_groups(const Mask& m) {
  std::vector<int> out;
  for (std::size_t i = 0; i < m.size(); ++i)
    if (m[i]) out.push_back(static_cast<int>(i));
  return out;
}

inline Mask groups_mask(const std::vector<int>& ids, std::size_t n) {
  Mask m(n, 0);
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= n) throw std::invalid_argument("group id out of range");
    m[static_cast<std::size_t>(id)] = 1;
  }
  return m;
}

// ---------------------------------------------------------------------------
// Objectives

/// A search backend: losses of group masks on training queries plus a
/// held-out score. Lower is better throughout.
class Objective {
 public:
  virtual ~Objective() = default;
  [[nodiscard]] virtual std::size_t group_count() const = 0;
  [[nodiscard]] virtual std::size_t train_pool() const = 0;
  virtual double loss(const Mask& mask, std::size_t image, Rng& rng) const = 0;
  [[nodiscard]] virtual double heldout(const Mask& mask) const = 0;

  /// Training queries for one iteration, without replacement when possible.
  virtual std::vector<std::size_t> draw_images(std::size_t n, Rng& rng) const {
    const std::size_t pool = train_pool();
    std::vector<std::size_t> idx(pool);
    for (std::size_t i = 0; i < pool; ++i) idx[i] = i;
    std::vector<std::size_t> out;
    while (out.size() < n) {
      for (std::size_t i = 0; i < pool && out.size() < n; ++i) {
        const std::size_t j = i + rng.below(pool - i);
        std::swap(idx[i], idx[j]);
        out.push_back(idx[i]);
      }
    }
    return out;
  }

  /// Mean loss over the first `n` training queries with a fixed stream per
  /// query, so two masks are compared on identical noise.
  [[nodiscard]] virtual double eval(const Mask& mask, std::size_t n) const {
    n = std::min(n, train_pool());
    double total = 0;
    for (std::size_t i = 0; i < n; ++i) {
      Rng rng = Rng(0x5EED).child("eval").child(i);
      total += loss(mask, i, rng);
    }
    return total / static_cast<double>(n);
  }
};

/// The toy model with task `task`'s mean activations patched at the selected
/// groups.
class ModelObjective : public Objective {
 public:
  ModelObjective(const Weights& w, const std::map<SiteAddress, RowVec>& mu, TaskId task, const SiteGrouping& grouping,
                 std::vector<const TripletSample*> train, std::vector<const TripletSample*> heldout,
                 bool one_shot_context = false)
      : w_(w), task_(task), grouping_(grouping), train_(std::move(train)), heldout_(std::move(heldout)),
        one_shot_(one_shot_context) {
    if (train_.empty()) throw std::invalid_argument("ModelObjective: no training queries");
    for (const auto& g : grouping_.groups) {
      std::vector<std::pair<SiteAddress, const RowVec*>> sites;
      for (const auto& s : g.members) {
        const auto it = mu.find(s);
        if (it == mu.end()) throw std::invalid_argument("no mean activation at " + to_string(s));
        sites.emplace_back(s, &it->second);
      }
      group_sites_.push_back(std::move(sites));
    }
  }

  [[nodiscard]] std::size_t group_count() const override { return group_sites_.size(); }
  [[nodiscard]] std::size_t train_pool() const override { return train_.size(); }

  [[nodiscard]] PatchSet patch(const Mask& mask) const {
    if (mask.size() != group_sites_.size()) throw std::invalid_argument("mask size does not match grouping");
    PatchSet p;
    for (std::size_t g = 0; g < mask.size(); ++g)
      if (mask[g])
        for (const auto& [s, v] : group_sites_[g]) p.emplace(s, *v);
    return p;
  }

  [[nodiscard]] double sample_loss(const Mask& mask, const TripletSample& s) const {
    const PatchSet p = patch(mask);
    const GridImage pred = one_shot_ ? one_shot_tv_predict(w_, s, p) : tv_predict(w_, s.x_q, p);
    const double l = task_loss(task_, pred, s.y_q);
    if (!std::isfinite(l)) throw std::runtime_error("non-finite loss");
    return l;
  }

  double loss(const Mask& mask, std::size_t image, Rng&) const override { return sample_loss(mask, *train_.at(image)); }

  [[nodiscard]] double heldout(const Mask& mask) const override {
    if (heldout_.empty()) throw std::invalid_argument("ModelObjective: no held-out queries");
    double total = 0;
    for (const auto* s : heldout_) total += sample_loss(mask, *s);
    return total / static_cast<double>(heldout_.size());
  }

  [[nodiscard]] TaskId task() const { return task_; }

 private:
  const Weights& w_;
  TaskId task_;
  const SiteGrouping& grouping_;
  std::vector<const TripletSample*> train_, heldout_;
  bool one_shot_;
  std::vector<std::vector<std::pair<SiteAddress, const RowVec*>>> group_sites_;
};

/// Planted oracle task. Group index i stands for universe[i]; the held-out
/// score averages `heldout_draws` fixed noise draws.
class PlantedObjective : public Objective {
 public:
  PlantedObjective(const PlantedConfig& cfg, std::size_t task, std::size_t heldout_draws = 10, double scale = 1.0)
      : cfg_(cfg), task_(task), draws_(heldout_draws), scale_(scale) {
    cfg_.validate();
    (void)cfg_.task(task);
  }

  [[nodiscard]] std::size_t group_count() const override { return cfg_.universe.size(); }
  [[nodiscard]] std::size_t train_pool() const override { return 1u << 20; }

  [[nodiscard]] std::vector<int> ids(const Mask& mask) const {
    if (mask.size() != cfg_.universe.size()) throw std::invalid_argument("mask size does not match universe");
    std::vector<int> out;
    for (std::size_t i = 0; i < mask.size(); ++i)
      if (mask[i]) out.push_back(cfg_.universe[i]);
    return out;
  }

  double loss(const Mask& mask, std::size_t, Rng& rng) const override {
    return scale_ * planted_loss(cfg_, task_, ids(mask), rng).loss;
  }

  [[nodiscard]] double heldout(const Mask& mask) const override {
    double total = 0;
    for (std::size_t i = 0; i < draws_; ++i) {
      Rng rng = Rng(0xC0FFEE).child("heldout").child(i);
      total += loss(mask, i, rng);
    }
    return total / static_cast<double>(draws_);
  }

  [[nodiscard]] double expected(const Mask& mask) const { return scale_ * planted_expected_loss(cfg_, task_, ids(mask)); }

  std::vector<std::size_t> draw_images(std::size_t n, Rng&) const override {
    std::vector<std::size_t> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = i;
    return out;
  }

 private:
  PlantedConfig cfg_;
  std::size_t task_;
  std::size_t draws_;
  double scale_;
};

/// One shared mask across several task objectives. Each iteration visits
/// `per_task` queries of every task and tops the batch up with the filler
/// objective (identity copy); losses are divided by per-task normalizers.
class MultiTaskObjective : public Objective {
 public:
  MultiTaskObjective(std::vector<const Objective*> tasks, std::vector<double> normalizers,
                     const Objective* filler = nullptr, double filler_normalizer = 1.0, std::size_t per_task = 2)
      : tasks_(std::move(tasks)), norm_(std::move(normalizers)), filler_(filler), filler_norm_(filler_normalizer),
        per_task_(per_task) {
    if (tasks_.size() < 2) throw std::invalid_argument("multi-task search needs at least 2 tasks");
    if (norm_.size() != tasks_.size()) throw std::invalid_argument("missing normalizer for a task");
    for (double n : norm_)
      if (!(n > 0) || !std::isfinite(n)) throw std::invalid_argument("normalizers must be positive and finite");
    for (const auto* t : tasks_)
      if (t->group_count() != tasks_.front()->group_count()) throw std::invalid_argument("group count mismatch");
    if (filler_ && filler_->group_count() != tasks_.front()->group_count())
      throw std::invalid_argument("group count mismatch");
  }

  [[nodiscard]] std::size_t group_count() const override { return tasks_.front()->group_count(); }
  [[nodiscard]] std::size_t train_pool() const override {
    std::size_t n = tasks_.front()->train_pool();
    for (const auto* t : tasks_) n = std::min(n, t->train_pool());
    return n * tasks_.size();
  }

  // image code = source * kStride + index; source == tasks_.size() is the filler
  static constexpr std::size_t kStride = 1u << 24;

  std::vector<std::size_t> draw_images(std::size_t n, Rng& rng) const override {
    std::vector<std::size_t> out;
    for (std::size_t k = 0; k < tasks_.size(); ++k) {
      Rng r = rng.child(k);
      for (std::size_t i : tasks_[k]->draw_images(per_task_, r)) out.push_back(k * kStride + i);
    }
    if (filler_ && out.size() < n) {
      Rng r = rng.child("filler");
      for (std::size_t i : filler_->draw_images(n - out.size(), r)) out.push_back(tasks_.size() * kStride + i);
    }
    return out;
  }

  double loss(const Mask& mask, std::size_t code, Rng& rng) const override {
    const std::size_t k = code / kStride, i = code % kStride;
    if (k == tasks_.size()) {
      if (!filler_) throw std::invalid_argument("no filler objective");
      return filler_->loss(mask, i, rng) / filler_norm_;
    }
    return tasks_.at(k)->loss(mask, i, rng) / norm_[k];
  }

  /// Mean normalized held-out loss over the real tasks (the filler is only
  /// there to keep the batch size fixed).
  [[nodiscard]] double heldout(const Mask& mask) const override {
    double total = 0;
    for (std::size_t k = 0; k < tasks_.size(); ++k) total += tasks_[k]->heldout(mask) / norm_[k];
    return total / static_cast<double>(tasks_.size());
  }

  [[nodiscard]] double eval(const Mask& mask, std::size_t n) const override {
    double total = 0;
    for (std::size_t k = 0; k < tasks_.size(); ++k) total += tasks_[k]->eval(mask, n) / norm_[k];
    return total / static_cast<double>(tasks_.size());
  }

 private:
  std::vector<const Objective*> tasks_;
  std::vector<double> norm_;
  const Objective* filler_;
  double filler_norm_;
  std::size_t per_task_;
};

/// Mean one-shot loss of the unpatched model on `samples`.
inline double one_shot_baseline_loss(const Weights& w, TaskId task, const std::vector<const TripletSample*>& samples) {
  if (samples.empty()) throw std::invalid_argument("one_shot_baseline_loss: no samples");
  double total = 0;
  for (const auto* s : samples) total += task_loss(task, one_shot_predict(w, *s), s->y_q);
  return total / static_cast<double>(samples.size());
}

// ---------------------------------------------------------------------------
// REINFORCE

enum class Baseline : std::uint8_t { mean, none };

/// Score-function gradient of the expected loss with respect to the logits.
/// With the mean baseline, each sample is compared against the mean of the
/// other samples, which keeps the estimate unbiased.
inline std::vector<double> reinforce_grad(const std::vector<double>& theta, const std::vector<Mask>& masks,
                                          const std::vector<double>& losses, Baseline baseline) {
  if (masks.size() != losses.size() || masks.empty()) throw std::invalid_argument("reinforce_grad: shape mismatch");
  const std::size_t n = masks.size();
  double b = 0, scale = 1;
  if (baseline == Baseline::mean && n > 1) {
    // shifted sum, so identical losses give a baseline equal to them exactly
    for (double l : losses) b += l - losses.front();
    b = losses.front() + b / static_cast<double>(n);
    scale = static_cast<double>(n) / static_cast<double>(n - 1);
  }
  std::vector<double> g(theta.size(), 0.0);
  for (std::size_t k = 0; k < n; ++k) {
    if (masks[k].size() != theta.size()) throw std::invalid_argument("reinforce_grad: shape mismatch");
    const double adv = scale * (losses[k] - b);
    if (adv == 0) continue;
    for (std::size_t i = 0; i < theta.size(); ++i) g[i] += adv * (static_cast<double>(masks[k][i]) - sigmoid(theta[i]));
  }
  for (double& v : g) v /= static_cast<double>(n);
  return g;
}

inline Mask sample_mask(const std::vector<double>& theta, Rng& rng) {
  Mask m(theta.size());
  for (std::size_t i = 0; i < theta.size(); ++i) m[i] = rng.bernoulli(sigmoid(theta[i])) ? 1 : 0;
  return m;
}

struct ReinforceConfig {
  int samples_per_iter = 32;
  int images_per_iter = 10;
  double lr = 0.1;
  int steps = 600;
  int ckpt_every = 50;
  double theta_init = -1.0;
  Baseline baseline = Baseline::mean;
  int final_samples = 32;
  std::uint64_t seed = 0;
};

inline void to_json(nlohmann::json& j, const ReinforceConfig& c) {
  j = {{"samples_per_iter", c.samples_per_iter}, {"images_per_iter", c.images_per_iter}, {"lr", c.lr},
       {"steps", c.steps}, {"ckpt_every", c.ckpt_every}, {"theta_init", c.theta_init},
       {"baseline", c.baseline == Baseline::mean ? "mean" : "none"}, {"final_samples", c.final_samples},
       {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, ReinforceConfig& c) {
  c = ReinforceConfig{};
  c.samples_per_iter = j.value("samples_per_iter", c.samples_per_iter);
  c.images_per_iter = j.value("images_per_iter", c.images_per_iter);
  c.lr = j.value("lr", c.lr);
  c.steps = j.value("steps", c.steps);
  c.ckpt_every = j.value("ckpt_every", c.ckpt_every);
  c.theta_init = j.value("theta_init", c.theta_init);
  const std::string b = j.value("baseline", std::string("mean"));
  if (b != "mean" && b != "none") throw std::invalid_argument("baseline must be mean or none");
  c.baseline = b == "mean" ? Baseline::mean : Baseline::none;
  c.final_samples = j.value("final_samples", c.final_samples);
  c.seed = j.value("seed", c.seed);
  if (c.samples_per_iter <= 0 || c.images_per_iter <= 0 || c.steps < 0 || c.ckpt_every <= 0 || c.final_samples <= 0)
    throw std::invalid_argument("reinforce counts must be positive");
}

struct CheckpointRecord {
  int step = 0;
  std::vector<double> theta;
  Mask best;
  double heldout = 0;
};

struct LogRow {
  int step = 0;
  double mean_reward = 0;
  std::optional<double> heldout;
};

/// Complete resumable state of a REINFORCE run after `step` updates.
struct SearchCheckpoint {
  int step = 0;
  std::vector<double> theta;
  AdamState adam;
  std::vector<CheckpointRecord> history;
  std::vector<LogRow> log;
};

inline void to_json(nlohmann::json& j, const SearchCheckpoint& c) {
  auto hist = nlohmann::json::array();
  for (const auto& h : c.history)
    hist.push_back({{"step", h.step}, {"theta", h.theta}, {"best", mask_groups(h.best)}, {"heldout", h.heldout}});
  auto log = nlohmann::json::array();
  for (const auto& r : c.log)
    log.push_back({{"step", r.step}, {"mean_reward", r.mean_reward},
                   {"heldout", r.heldout ? nlohmann::json(*r.heldout) : nlohmann::json(nullptr)}});
  j = {{"step", c.step},
       {"theta", c.theta},
       {"adam", {{"m", c.adam.m}, {"v", c.adam.v}, {"t", c.adam.t}, {"lr", c.adam.lr}}},
       {"history", hist},
       {"log", log},
       // the generator is counter-based and re-derived per step, so the only
       // state needed to resume is the step index
       {"rng", {{"step", c.step}}}};
}

inline void from_json(const nlohmann::json& j, SearchCheckpoint& c) {
  c = SearchCheckpoint{};
  c.step = j.at("step").get<int>();
  c.theta = j.at("theta").get<std::vector<double>>();
  const auto& a = j.at("adam");
  c.adam.m = a.at("m").get<std::vector<double>>();
  c.adam.v = a.at("v").get<std::vector<double>>();
  c.adam.t = a.at("t").get<std::int64_t>();
  c.adam.lr = a.at("lr").get<double>();
  for (const auto& h : j.at("history"))
    c.history.push_back({h.at("step").get<int>(), h.at("theta").get<std::vector<double>>(),
                         groups_mask(h.at("best").get<std::vector<int>>(), c.theta.size()),
                         h.at("heldout").get<double>()});
  for (const auto& r : j.at("log")) {
    LogRow row{r.at("step").get<int>(), r.at("mean_reward").get<double>(), std::nullopt};
    if (!r.at("heldout").is_null()) row.heldout = r.at("heldout").get<double>();
    c.log.push_back(row);
  }
}

struct ReinforceResult {
  Mask selection;
  double heldout = 0;
  int best_step = 0;
  std::vector<double> theta;
  SearchCheckpoint state;
};

namespace detail {

// Draws `n` masks from theta and returns the held-out best (first on ties).
inline std::pair<Mask, double> best_of_draws(const Objective& obj, const std::vector<double>& theta, int n, Rng rng) {
  std::map<Mask, double> seen;
  Mask best;
  double best_score = std::numeric_limits<double>::infinity();
  for (int k = 0; k < n; ++k) {
    const Mask m = sample_mask(theta, rng);
    auto it = seen.find(m);
    if (it == seen.end()) it = seen.emplace(m, obj.heldout(m)).first;
    if (it->second < best_score) {
      best_score = it->second;
      best = m;
    }
  }
  return {best, best_score};
}

}  // namespace detail

/// Optimizes Bernoulli logits over groups with Adam. Every `ckpt_every`
/// steps the current logits are turned into a candidate mask (best of
/// `final_samples` draws on held-out data); the final selection is the best
/// candidate over all checkpoints. Pass `resume` to continue a saved run and
/// `stop_after` to halt early (for checkpointing).
inline ReinforceResult reinforce_search(const Objective& obj, const ReinforceConfig& cfg,
                                        const SearchCheckpoint* resume = nullptr, int stop_after = -1,
                                        const std::function<void(const SearchCheckpoint&)>& on_checkpoint = {}) {
  const std::size_t n_groups = obj.group_count();
  SearchCheckpoint st;
  if (resume) {
    st = *resume;
    if (st.theta.size() != n_groups) throw std::invalid_argument("checkpoint does not match the objective");
  } else {
    st.theta.assign(n_groups, cfg.theta_init);
    st.adam.lr = cfg.lr;
  }
  const Rng root = Rng(cfg.seed).child("reinforce");
  const int last = stop_after >= 0 ? std::min(stop_after, cfg.steps) : cfg.steps;
  while (st.step < last) {
    const int step = st.step;
    Rng srng = root.child(static_cast<std::uint64_t>(step));
    Rng irng = srng.child("images");
    const auto images = obj.draw_images(static_cast<std::size_t>(cfg.images_per_iter), irng);
    std::vector<double> grad(n_groups, 0.0);
    double reward_sum = 0;
    std::size_t evals = 0;
    for (std::size_t b = 0; b < images.size(); ++b) {
      std::vector<Mask> masks;
      std::vector<double> losses;
      for (int s = 0; s < cfg.samples_per_iter; ++s) {
        Rng r = srng.child(static_cast<std::uint64_t>(b), static_cast<std::uint64_t>(s));
        masks.push_back(sample_mask(st.theta, r));
        const double l = obj.loss(masks.back(), images[b], r);
        if (!std::isfinite(l)) throw std::runtime_error("non-finite loss at step " + std::to_string(step));
        losses.push_back(l);
        reward_sum += l;
        ++evals;
      }
      const auto g = reinforce_grad(st.theta, masks, losses, cfg.baseline);
      for (std::size_t i = 0; i < n_groups; ++i) grad[i] += g[i] / static_cast<double>(images.size());
    }
    adam_step(st.theta, grad, st.adam);
    st.step = step + 1;
    LogRow row{st.step, reward_sum / static_cast<double>(evals), std::nullopt};
    if (st.step % cfg.ckpt_every == 0 || st.step == cfg.steps) {
      auto [mask, score] = detail::best_of_draws(obj, st.theta, cfg.final_samples,
                                                 root.child("final").child(static_cast<std::uint64_t>(st.step)));
      st.history.push_back({st.step, st.theta, mask, score});
      row.heldout = score;
      st.log.push_back(row);
      if (on_checkpoint) on_checkpoint(st);
    } else {
      st.log.push_back(row);
    }
  }
  ReinforceResult res;
  res.theta = st.theta;
  if (st.history.empty()) {
    const Mask empty(n_groups, 0);
    res.selection = empty;
    res.heldout = obj.heldout(empty);
  } else {
    const CheckpointRecord* best = &st.history.front();
    for (const auto& h : st.history)
      if (h.heldout < best->heldout) best = &h;
    res.selection = best->best;
    res.heldout = best->heldout;
    res.best_step = best->step;
  }
  res.state = std::move(st);
  return res;
}

/// Shared selection for several tasks (see MultiTaskObjective).
inline ReinforceResult reinforce_multitask(const std::vector<const Objective*>& tasks,
                                           const std::vector<double>& normalizers, const ReinforceConfig& cfg,
                                           const Objective* filler = nullptr, double filler_normalizer = 1.0) {
  const MultiTaskObjective obj(tasks, normalizers, filler, filler_normalizer);
  return reinforce_search(obj, cfg);
}

inline std::string search_log_csv(const std::vector<LogRow>& log) {
  std::ostringstream os;
  os << "step,mean_reward,heldout_score\n";
  for (const auto& r : log) os << r.step << ',' << fmt6(r.mean_reward) << ',' << (r.heldout ? fmt6(*r.heldout) : "") << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------
// Greedy random search

struct GrsConfig {
  int k = 17;
  double p = 0.3;
  int init_trials = 100;
  int max_iters = 10000;
  int eval_images = 10;
  std::uint64_t seed = 0;
};

inline void to_json(nlohmann::json& j, const GrsConfig& c) {
  j = {{"k", c.k}, {"p", c.p}, {"init_trials", c.init_trials}, {"max_iters", c.max_iters},
       {"eval_images", c.eval_images}, {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, GrsConfig& c) {
  c = GrsConfig{};
  c.k = j.value("k", c.k);
  c.p = j.value("p", c.p);
  c.init_trials = j.value("init_trials", c.init_trials);
  c.max_iters = j.value("max_iters", c.max_iters);
  c.eval_images = j.value("eval_images", c.eval_images);
  c.seed = j.value("seed", c.seed);
  if (c.k < 0 || !(c.p >= 0 && c.p < 1) || c.init_trials < 1 || c.eval_images < 1)
    throw std::invalid_argument("invalid GRS config");
}

struct GrsFlip {
  int iteration = 0;
  int group = 0;
  double score = 0;
};

struct GrsResult {
  Mask selection;
  double score = 0;        // on the evaluation queries
  double init_score = 0;
  std::vector<int> layers;  // searched layers, in visiting order
  std::vector<GrsFlip> accepted;
  int iterations = 0;
  bool clamped = false;
};

/// `group_layer[g]` is the (global) layer of group g and `layer_score` the
/// aggregate score per layer. Searches the top-k layers by score, or the
/// explicit `layers` list when given.
inline GrsResult grs_search(const Objective& obj, const std::vector<int>& group_layer,
                            const std::map<int, double>& layer_score, const GrsConfig& cfg,
                            std::optional<std::vector<int>> layers = std::nullopt) {
  const std::size_t n = obj.group_count();
  if (group_layer.size() != n) throw std::invalid_argument("grs_search: one layer per group required");
  GrsResult res;
  if (layers) {
    res.layers = *layers;
  } else {
    std::vector<std::pair<double, int>> ranked;
    for (const auto& [l, s] : layer_score) ranked.emplace_back(s, l);
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
      return a.first != b.first ? a.first > b.first : a.second < b.second;
    });
    int k = cfg.k;
    if (k > static_cast<int>(ranked.size())) {
      std::cerr << "warning: GRS k=" << k << " exceeds the " << ranked.size() << " scored layers, clamping\n";
      k = static_cast<int>(ranked.size());
      res.clamped = true;
    }
    for (int i = 0; i < k; ++i) res.layers.push_back(ranked[static_cast<std::size_t>(i)].second);
  }
  std::map<int, std::vector<int>> by_layer;
  for (std::size_t g = 0; g < n; ++g) by_layer[group_layer[g]].push_back(static_cast<int>(g));
  std::vector<int> universe;
  for (int l : res.layers) {
    const auto it = by_layer.find(l);
    if (it != by_layer.end()) universe.insert(universe.end(), it->second.begin(), it->second.end());
  }
  const auto score = [&](const Mask& m) { return obj.eval(m, static_cast<std::size_t>(cfg.eval_images)); };

  Rng rng = Rng(cfg.seed).child("grs");
  res.selection.assign(n, 0);
  res.score = score(res.selection);
  if (universe.empty()) {
    res.init_score = res.score;
    return res;
  }
  bool first = true;
  for (int t = 0; t < cfg.init_trials; ++t) {
    Mask m(n, 0);
    for (int g : universe) m[static_cast<std::size_t>(g)] = rng.bernoulli(cfg.p) ? 1 : 0;
    const double s = score(m);
    if (first || s < res.score) {
      res.selection = m;
      res.score = s;
      first = false;
    }
  }
  res.init_score = res.score;

  bool changed = true;
  while (changed && res.iterations < cfg.max_iters) {
    changed = false;
    for (int l : res.layers) {
      const auto it = by_layer.find(l);
      if (it == by_layer.end()) continue;
      int best_g = -1;
      double best_s = res.score;
      for (int g : it->second) {
        if (res.iterations >= cfg.max_iters) break;
        Mask m = res.selection;
        m[static_cast<std::size_t>(g)] ^= 1;
        const double s = score(m);
        ++res.iterations;
        if (s < best_s) {
          best_s = s;
          best_g = g;
        }
      }
      if (best_g >= 0) {
        res.selection[static_cast<std::size_t>(best_g)] ^= 1;
        res.score = best_s;
        res.accepted.push_back({res.iterations, best_g, best_s});
        changed = true;
      }
    }
  }
  return res;
}

// ---------------------------------------------------------------------------
// Causal ranking and baselines

struct CmaResult {
  Mask selection;
  std::vector<double> scores;  // per group: mean loss reduction when patched alone
};

/// Ranks groups by the loss reduction from patching each one alone, averaged
/// over `n_images` queries, and keeps the top ceil(fraction * groups).
/// Every evaluation draws its own noise.
inline CmaResult cma_select(const Objective& obj, std::size_t n_images = 10, double fraction = 0.25,
                            std::uint64_t seed = 0) {
  const std::size_t n = obj.group_count();
  const Rng root = Rng(seed).child("cma");
  Rng irng = root.child("images");
  const auto images = obj.draw_images(n_images, irng);
  CmaResult res;
  res.scores.assign(n, 0.0);
  const Mask empty(n, 0);
  for (std::size_t b = 0; b < images.size(); ++b) {
    Rng br = root.child("base").child(b);
    const double base = obj.loss(empty, images[b], br);
    for (std::size_t g = 0; g < n; ++g) {
      Mask m = empty;
      m[g] = 1;
      Rng gr = root.child("group").child(g, b);
      res.scores[g] += (base - obj.loss(m, images[b], gr)) / static_cast<double>(images.size());
    }
  }
  const auto count = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(n) - 1e-12));
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return res.scores[a] > res.scores[b]; });
  res.selection.assign(n, 0);
  for (std::size_t i = 0; i < count && i < n; ++i) res.selection[order[i]] = 1;
  return res;
}

enum class BaselineKind : std::uint8_t { random_quadrants, top_quadrants };

/// `target` groups chosen uniformly at random (random_quadrants) or by
/// highest score, ties to the lower id (top_quadrants).
inline Mask baseline_select(BaselineKind kind, std::size_t n_groups, std::size_t target,
                            const std::vector<double>& scores, const Rng& rng) {
  if (target > n_groups) throw std::invalid_argument("baseline target exceeds available groups");
  std::vector<std::size_t> order(n_groups);
  for (std::size_t i = 0; i < n_groups; ++i) order[i] = i;
  if (kind == BaselineKind::random_quadrants) {
    Rng r = rng.child("random_quadrants");
    for (std::size_t i = 0; i < target; ++i) std::swap(order[i], order[i + r.below(n_groups - i)]);
  } else {
    if (scores.size() != n_groups) throw std::invalid_argument("one score per group required");
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  }
  Mask m(n_groups, 0);
  for (std::size_t i = 0; i < target; ++i) m[order[i]] = 1;
  return m;
}

/// GRS restricted to k layers drawn uniformly instead of the top-scored ones.
inline GrsResult random_k_layers_grs(const Objective& obj, const std::vector<int>& group_layer,
                                     const std::map<int, double>& layer_score, const GrsConfig& cfg) {
  std::vector<int> all;
  for (const auto& [l, s] : layer_score) all.push_back(l);
  const int k = std::min<int>(cfg.k, static_cast<int>(all.size()));
  Rng r = Rng(cfg.seed).child("random_k_layers");
  for (int i = 0; i < k; ++i)
    std::swap(all[static_cast<std::size_t>(i)], all[static_cast<std::size_t>(i) + r.below(all.size() - static_cast<std::size_t>(i))]);
  all.resize(static_cast<std::size_t>(k));
  return grs_search(obj, group_layer, layer_score, cfg, all);
}

// ---------------------------------------------------------------------------
// Groupings and selections on the toy model

inline std::vector<int> group_layers(const ModelConfig& cfg, const SiteGrouping& g) {
  std::vector<int> out;
  for (const auto& grp : g.groups) out.push_back(grp.stage == Stage::encoder ? grp.layer : cfg.enc_layers + grp.layer);
  return out;
}

inline std::map<int, double> layer_scores(const ModelConfig& cfg, const ScoreTable& t) {
  std::map<int, double> out;
  for (const auto& [k, v] : t.layer) out[k.stage == Stage::encoder ? k.layer : cfg.enc_layers + k.layer] = v;
  return out;
}

struct PatchSelection {
  Granularity granularity = Granularity::quadrant;
  std::vector<int> groups;
};

inline nlohmann::json selection_json(const SiteGrouping& g, const Mask& mask, std::optional<std::vector<double>> theta,
                                     int step, double heldout, std::uint64_t seed) {
  if (mask.size() != g.size()) throw std::invalid_argument("mask size does not match grouping");
  auto groups = nlohmann::json::array();
  for (std::size_t i = 0; i < g.size(); ++i) {
    const auto& grp = g.groups[i];
    nlohmann::json e = {{"stage", to_string(grp.stage)}, {"layer", grp.layer}, {"head", grp.head},
                        {"token_group", grp.token_group}, {"selected", mask[i] != 0}};
    if (theta) e["theta"] = (*theta)[i];
    groups.push_back(e);
  }
  return {{"granularity", to_string(g.granularity)}, {"groups", groups}, {"step", step}, {"heldout_score", heldout},
          {"seed", seed}};
}

inline Mask selection_from_json(const nlohmann::json& j, const SiteGrouping& g) {
  if (j.at("granularity").get<std::string>() != to_string(g.granularity))
    throw std::invalid_argument("selection granularity does not match grouping");
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < g.size(); ++i) index[label(g.groups[i])] = i;
  Mask m(g.size(), 0);
  for (const auto& e : j.at("groups")) {
    SiteGroup key{0, parse_stage(e.at("stage").get<std::string>()), e.at("layer").get<int>(), e.at("head").get<int>(),
                  e.at("token_group").get<std::string>(), {}};
    const auto it = index.find(label(key));
    if (it == index.end()) throw std::invalid_argument("selection names an unknown group: " + label(key));
    if (e.at("selected").get<bool>()) m[it->second] = 1;
  }
  return m;
}

// ---------------------------------------------------------------------------
// Evaluation and composition

enum class EvalMode : std::uint8_t { query_only, one_shot, one_shot_plus_tv };
enum class Metric : std::uint8_t { miou, mse };

inline std::string_view to_string(EvalMode m) {
  switch (m) {
    case EvalMode::query_only: return "query-only";
    case EvalMode::one_shot: return "one-shot";
    case EvalMode::one_shot_plus_tv: return "one-shot-plus-tv";
  }
  return "?";
}

inline EvalMode parse_eval_mode(std::string_view s) {
  if (s == "query-only" || s == "query_only") return EvalMode::query_only;
  if (s == "one-shot" || s == "one_shot") return EvalMode::one_shot;
  if (s == "one-shot-plus-tv" || s == "one_shot_plus_tv") return EvalMode::one_shot_plus_tv;
  throw std::invalid_argument("unknown eval mode: " + std::string(s));
}

inline Metric metric_for(TaskId t) { return t == TaskId::segmentation ? Metric::miou : Metric::mse; }

/// Mean metric of the model on `samples` with the selected sites patched
/// from `mu`. Query-only and one-shot-plus-TV patch; one-shot does not.
inline double evaluate(const Weights& w, const SiteGrouping& g, const Mask& selection,
                       const std::map<SiteAddress, RowVec>& mu, TaskId task,
                       const std::vector<const TripletSample*>& samples, Metric metric, EvalMode mode) {
  if (metric == Metric::miou && task != TaskId::segmentation)
    throw std::invalid_argument("mIoU is only defined for segmentation");
  if (samples.empty()) throw std::invalid_argument("evaluate: no samples");
  if (selection.size() != g.size()) throw std::invalid_argument("selection size does not match grouping");
  PatchSet patch;
  for (const auto& site : g.expand(mask_groups(selection))) {
    const auto it = mu.find(site);
    if (it == mu.end()) throw std::invalid_argument("no mean activation at " + to_string(site));
    patch.emplace(site, it->second);
  }
  double total = 0;
  for (const auto* s : samples) {
    GridImage pred;
    switch (mode) {
      case EvalMode::query_only: pred = tv_predict(w, s->x_q, patch); break;
      case EvalMode::one_shot: pred = one_shot_predict(w, *s); break;
      case EvalMode::one_shot_plus_tv: pred = one_shot_tv_predict(w, *s, patch); break;
    }
    total += metric == Metric::miou ? metric_miou(pred, s->y_q) : loss_mse(pred, s->y_q);
  }
  return total / static_cast<double>(samples.size());
}

/// Elementwise linear combination of per-task means, e.g.
/// {{inpaint, 1}, {segmentation, 1}, {identity, -1}}.
inline std::map<SiteAddress, RowVec> compose_vectors(const MeanActivationTable& table,
                                                     const std::vector<std::pair<TaskId, double>>& terms) {
  if (terms.empty()) throw std::invalid_argument("compose_vectors: empty expression");
  const auto& first = table.means.find(terms.front().first);
  if (first == table.means.end()) throw std::invalid_argument("compose_vectors: missing task");
  std::map<SiteAddress, RowVec> out;
  for (const auto& [s, v] : first->second) out.emplace(s, RowVec::Zero(v.size()));
  for (const auto& [task, coef] : terms) {
    const auto it = table.means.find(task);
    if (it == table.means.end()) throw std::invalid_argument("compose_vectors: missing task " + std::string(to_string(task)));
    if (it->second.size() != out.size()) throw std::invalid_argument("compose_vectors: coverage mismatch");
    for (const auto& [s, v] : it->second) {
      const auto o = out.find(s);
      if (o == out.end()) throw std::invalid_argument("compose_vectors: coverage mismatch at " + to_string(s));
      o->second += coef * v;
    }
  }
  return out;
}

/// Parses "inpaint+segmentation-identity" style expressions, with optional
/// numeric coefficients ("0.5*colorize").
inline std::vector<std::pair<TaskId, double>> parse_composition(const std::string& expr) {
  std::vector<std::pair<TaskId, double>> out;
  std::size_t i = 0;
  while (i < expr.size()) {
    double sign = 1;
    if (expr[i] == '+' || expr[i] == '-') {
      sign = expr[i] == '-' ? -1 : 1;
      ++i;
    } else if (!out.empty()) {
      throw std::invalid_argument("expected + or - in composition: " + expr);
    }
    std::size_t j = expr.find_first_of("+-", i);
    std::string term = expr.substr(i, j == std::string::npos ? std::string::npos : j - i);
    double coef = 1;
    if (const auto star = term.find('*'); star != std::string::npos) {
      coef = std::stod(term.substr(0, star));
      term = term.substr(star + 1);
    }
    out.emplace_back(parse_task(term), sign * coef);
    i = j == std::string::npos ? expr.size() : j;
  }
  if (out.empty()) throw std::invalid_argument("empty composition");
  return out;
}

}  // namespace tvlab
