#pragma once

// Activation stores, per-task means, taskness scores, site groupings and
// clustering quality of per-head activations.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "tvlab/grid_tasks.hpp"
#include "tvlab/io.hpp"
#include "tvlab/model.hpp"
#include "tvlab/numerics.hpp"

namespace tvlab {

// ---------------------------------------------------------------------------
// Stores

/// Per-sample site activations for one task. Values are kept as float so a
/// store survives its file format unchanged.
struct ActivationStore {
  TaskId task = TaskId::identity;
  int d_model = 0;
  std::vector<SiteAddress> sites;  // ascending
  std::size_t count = 0;
  std::vector<float> values;       // (sample, site, dim)

  [[nodiscard]] std::size_t site_index(const SiteAddress& s) const {
    const auto it = std::lower_bound(sites.begin(), sites.end(), s);
    if (it == sites.end() || *it != s) throw std::invalid_argument("site not in store: " + to_string(s));
    return static_cast<std::size_t>(it - sites.begin());
  }

  [[nodiscard]] RowVec at(std::size_t sample, std::size_t site) const {
    RowVec v(d_model);
    const float* p = values.data() + (sample * sites.size() + site) * static_cast<std::size_t>(d_model);
    for (int e = 0; e < d_model; ++e) v(e) = p[e];
    return v;
  }

  void add_sample(const std::map<SiteAddress, RowVec>& rec) {
    if (rec.empty()) throw std::invalid_argument("empty activation record");
    if (count == 0) {
      sites.clear();
      for (const auto& [s, v] : rec) sites.push_back(s);
      d_model = static_cast<int>(rec.begin()->second.size());
    } else if (rec.size() != sites.size()) {
      throw std::invalid_argument("site-set mismatch across samples");
    }
    std::size_t i = 0;
    for (const auto& [s, v] : rec) {
      if (s != sites[i++]) throw std::invalid_argument("site-set mismatch across samples");
      if (v.size() != d_model) throw std::invalid_argument("activation width mismatch at " + to_string(s));
      for (int e = 0; e < d_model; ++e) values.push_back(static_cast<float>(v(e)));
    }
    ++count;
  }

  bool operator==(const ActivationStore&) const = default;
};

/// Records `filter` sites for the first `n_samples` samples of `task`.
/// Samples are stored in dataset order regardless of how they are visited.
inline ActivationStore collect(const Weights& w, const std::vector<const TripletSample*>& dataset, TaskId task,
                               std::size_t n_samples, PromptMode mode, const RecordFilter& filter) {
  if (n_samples == 0) throw std::invalid_argument("collect: n_samples must be >= 1");
  std::vector<const TripletSample*> picked;
  for (const auto* s : dataset)
    if (s->task == task && picked.size() < n_samples) picked.push_back(s);
  if (picked.empty()) throw std::invalid_argument("collect: no samples for task " + std::string(to_string(task)));
  ActivationStore store;
  store.task = task;
  for (const auto* s : picked)
    store.add_sample(forward(w, assemble_prompt(*s, mode, w.cfg.patch_side), {}, filter).records);
  return store;
}

inline constexpr std::uint32_t kStoreVersion = 1;

inline void save_store(const ActivationStore& s, const std::filesystem::path& path) {
  auto os = open_out(path);
  bin::put_magic(os, "TVAS");
  bin::put<std::uint32_t>(os, kStoreVersion);
  bin::put<std::uint8_t>(os, static_cast<std::uint8_t>(s.task));
  bin::put<std::uint64_t>(os, s.count);
  bin::put<std::uint32_t>(os, static_cast<std::uint32_t>(s.sites.size()));
  bin::put<std::uint32_t>(os, static_cast<std::uint32_t>(s.d_model));
  for (const auto& a : s.sites) {
    bin::put<std::uint8_t>(os, static_cast<std::uint8_t>(a.stage));
    bin::put<std::uint32_t>(os, static_cast<std::uint32_t>(a.layer));
    bin::put<std::uint32_t>(os, static_cast<std::uint32_t>(a.head));
    bin::put<std::uint32_t>(os, static_cast<std::uint32_t>(a.token));
  }
  os.write(reinterpret_cast<const char*>(s.values.data()), static_cast<std::streamsize>(s.values.size() * sizeof(float)));
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

inline ActivationStore load_store(const std::filesystem::path& path) {
  auto is = open_in(path);
  bin::expect_magic(is, "TVAS");
  if (bin::get<std::uint32_t>(is) != kStoreVersion) throw std::runtime_error("unsupported store version");
  ActivationStore s;
  s.task = task_from_index(bin::get<std::uint8_t>(is));
  s.count = bin::get<std::uint64_t>(is);
  const auto n_sites = bin::get<std::uint32_t>(is);
  s.d_model = static_cast<int>(bin::get<std::uint32_t>(is));
  for (std::uint32_t i = 0; i < n_sites; ++i) {
    SiteAddress a;
    a.stage = static_cast<Stage>(bin::get<std::uint8_t>(is));
    a.layer = static_cast<int>(bin::get<std::uint32_t>(is));
    a.head = static_cast<int>(bin::get<std::uint32_t>(is));
    a.token = static_cast<int>(bin::get<std::uint32_t>(is));
    s.sites.push_back(a);
  }
  s.values.resize(s.count * n_sites * static_cast<std::size_t>(s.d_model));
  is.read(reinterpret_cast<char*>(s.values.data()), static_cast<std::streamsize>(s.values.size() * sizeof(float)));
  if (!is) throw std::runtime_error("truncated store: " + path.string());
  return s;
}

// ---------------------------------------------------------------------------
// Means

struct MeanActivationTable {
  std::map<TaskId, std::map<SiteAddress, RowVec>> means;
  std::map<TaskId, std::size_t> counts;

  [[nodiscard]] const RowVec& mean(TaskId t, const SiteAddress& s) const {
    const auto it = means.find(t);
    if (it == means.end()) throw std::invalid_argument("no mean activations for task " + std::string(to_string(t)));
    const auto jt = it->second.find(s);
    if (jt == it->second.end()) throw std::invalid_argument("no mean activation at " + to_string(s));
    return jt->second;
  }

  /// Patch set holding `task`'s mean at each of `sites`.
  [[nodiscard]] PatchSet patch_for(TaskId t, const std::vector<SiteAddress>& sites) const {
    PatchSet p;
    for (const auto& s : sites) p.emplace(s, mean(t, s));
    return p;
  }
};

inline MeanActivationTable mean_activations(const std::vector<ActivationStore>& stores) {
  if (stores.empty()) throw std::invalid_argument("mean_activations: no stores");
  MeanActivationTable table;
  for (const auto& st : stores) {
    if (st.count == 0) throw std::invalid_argument("mean_activations: empty store");
    auto& out = table.means[st.task];
    if (!out.empty()) throw std::invalid_argument("mean_activations: duplicate task store");
    for (std::size_t k = 0; k < st.sites.size(); ++k) {
      RowVec sum = RowVec::Zero(st.d_model);
      for (std::size_t i = 0; i < st.count; ++i) sum += st.at(i, k);
      out.emplace(st.sites[k], sum / static_cast<double>(st.count));
    }
    table.counts[st.task] = st.count;
  }
  return table;
}

/// One-pass running mean over the same stores, for callers that cannot hold
/// every sample at once.
inline MeanActivationTable mean_activations_streaming(const std::vector<ActivationStore>& stores) {
  MeanActivationTable table;
  for (const auto& st : stores) {
    auto& out = table.means[st.task];
    for (std::size_t i = 0; i < st.count; ++i)
      for (std::size_t k = 0; k < st.sites.size(); ++k) {
        auto [it, fresh] = out.try_emplace(st.sites[k], RowVec::Zero(st.d_model));
        it->second += (st.at(i, k) - it->second) / static_cast<double>(i + 1);
      }
    table.counts[st.task] = st.count;
  }
  return table;
}

// ---------------------------------------------------------------------------
// Scores

struct HeadKey {
  Stage stage = Stage::encoder;
  int layer = 0;
  int head = 0;
  auto operator<=>(const HeadKey&) const = default;
};

struct LayerKey {
  Stage stage = Stage::encoder;
  int layer = 0;
  auto operator<=>(const LayerKey&) const = default;
};

inline std::string to_string(const HeadKey& h) {
  return std::string(to_string(h.stage)) + "/L" + std::to_string(h.layer) + "/H" + std::to_string(h.head);
}

struct ScoreTable {
  std::map<SiteAddress, double> rho;
  std::map<HeadKey, double> head;
  std::map<LayerKey, double> layer;
  std::size_t n_tasks = 0;
};

inline constexpr double kScoreEps = 1e-12;

namespace detail {

// Sum over dimensions of the population variance of rows [begin, end) of the
// listed (store, sample) pairs at one site.
inline double summed_variance(const std::vector<const ActivationStore*>& stores, std::size_t per_task,
                              const std::vector<std::size_t>& site_idx, std::size_t first, std::size_t last) {
  const int d = stores.front()->d_model;
  const double n = static_cast<double>((last - first) * per_task);
  RowVec mean = RowVec::Zero(d);
  for (std::size_t t = first; t < last; ++t)
    for (std::size_t i = 0; i < per_task; ++i) mean += stores[t]->at(i, site_idx[t]);
  mean /= n;
  double var = 0;
  for (std::size_t t = first; t < last; ++t)
    for (std::size_t i = 0; i < per_task; ++i) var += (stores[t]->at(i, site_idx[t]) - mean).squaredNorm();
  return var / n;
}

}  // namespace detail

/// Inter-task over mean intra-task variance per site. Every task contributes
/// the same number of samples (the smallest store count) to the pooled set.
inline ScoreTable score_tokens(const std::vector<ActivationStore>& stores) {
  if (stores.size() < 2) throw std::invalid_argument("score_tokens: need at least 2 tasks");
  std::size_t per_task = stores.front().count;
  for (const auto& s : stores) {
    if (s.count < 2) throw std::invalid_argument("score_tokens: need at least 2 samples per task");
    if (s.d_model != stores.front().d_model) throw std::invalid_argument("score_tokens: width mismatch");
    if (s.sites != stores.front().sites) throw std::invalid_argument("score_tokens: site-set mismatch");
    per_task = std::min(per_task, s.count);
  }
  std::vector<const ActivationStore*> ptrs;
  for (const auto& s : stores) ptrs.push_back(&s);
  ScoreTable out;
  out.n_tasks = stores.size();
  const double n = static_cast<double>(stores.size());
  for (const auto& site : stores.front().sites) {
    const std::vector<std::size_t> idx(stores.size(), stores.front().site_index(site));
    const double inter = detail::summed_variance(ptrs, per_task, idx, 0, stores.size());
    double intra = 0;
    for (std::size_t t = 0; t < stores.size(); ++t) intra += detail::summed_variance(ptrs, per_task, idx, t, t + 1);
    out.rho[site] = inter / (intra / n + kScoreEps);
  }
  return out;
}

/// Fills the per-head and per-layer sums of `t.rho`.
inline void aggregate_scores(ScoreTable& t) {
  t.head.clear();
  t.layer.clear();
  for (const auto& [s, r] : t.rho) {
    t.head[{s.stage, s.layer, s.head}] += r;
    t.layer[{s.stage, s.layer}] += r;
  }
}

inline std::string scores_csv(const ScoreTable& t) {
  std::ostringstream os;
  os << "site,stage,layer,head,token,rho\n";
  for (const auto& [s, r] : t.rho)
    os << to_string(s) << ',' << to_string(s.stage) << ',' << s.layer << ',' << s.head << ',' << s.token << ','
       << fmt6(r) << '\n';
  return os.str();
}

inline ScoreTable parse_scores_csv(const std::string& text) {
  ScoreTable t;
  std::istringstream is(text);
  std::string line;
  std::getline(is, line);
  if (line != "site,stage,layer,head,token,rho") throw std::runtime_error("unexpected score CSV header");
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ls(line);
    for (std::string cell; std::getline(ls, cell, ',');) f.push_back(cell);
    if (f.size() != 6) throw std::runtime_error("malformed score CSV row: " + line);
    t.rho[{parse_stage(f[1]), std::stoi(f[2]), std::stoi(f[3]), std::stoi(f[4])}] = std::stod(f[5]);
  }
  aggregate_scores(t);
  return t;
}

// ---------------------------------------------------------------------------
// Groupings

enum class Granularity : std::uint8_t { token, quadrant, head, layer };
enum class StageFilter : std::uint8_t { encoder, decoder, both };

inline std::string_view to_string(Granularity g) {
  switch (g) {
    case Granularity::token: return "token";
    case Granularity::quadrant: return "quadrant";
    case Granularity::head: return "head";
    case Granularity::layer: return "layer";
  }
  return "?";
}

inline Granularity parse_granularity(std::string_view s) {
  if (s == "token") return Granularity::token;
  if (s == "quadrant") return Granularity::quadrant;
  if (s == "head") return Granularity::head;
  if (s == "layer") return Granularity::layer;
  throw std::invalid_argument("unknown granularity: " + std::string(s));
}

inline std::string_view to_string(StageFilter f) {
  return f == StageFilter::encoder ? "encoder" : f == StageFilter::decoder ? "decoder" : "both";
}

inline StageFilter parse_stage_filter(std::string_view s) {
  if (s == "encoder") return StageFilter::encoder;
  if (s == "decoder") return StageFilter::decoder;
  if (s == "both") return StageFilter::both;
  throw std::invalid_argument("unknown stage filter: " + std::string(s));
}

struct SiteGroup {
  int id = 0;
  Stage stage = Stage::encoder;
  int layer = 0;
  int head = -1;             // -1 at layer granularity
  std::string token_group;   // "CLS", "BL", "BR", "T<pos>" or "all"
  std::vector<SiteAddress> members;
};

inline std::string label(const SiteGroup& g) {
  std::string s = std::string(to_string(g.stage)) + "/L" + std::to_string(g.layer);
  if (g.head >= 0) s += "/H" + std::to_string(g.head);
  return s + "/" + g.token_group;
}

struct SiteGrouping {
  Granularity granularity = Granularity::quadrant;
  std::vector<SiteGroup> groups;

  [[nodiscard]] std::vector<SiteAddress> expand(const std::vector<int>& ids) const {
    std::vector<SiteAddress> out;
    for (int id : ids) {
      if (id < 0 || static_cast<std::size_t>(id) >= groups.size())
        throw std::invalid_argument("group id out of range: " + std::to_string(id));
      const auto& m = groups[static_cast<std::size_t>(id)].members;
      out.insert(out.end(), m.begin(), m.end());
    }
    std::sort(out.begin(), out.end());
    return out;
  }
  [[nodiscard]] std::size_t size() const { return groups.size(); }
};

/// Roles a task vector may occupy: CLS and the query quadrant everywhere,
/// plus the masked target quadrant in the decoder.
inline bool searchable_role(Stage stage, Role r) {
  return r == Role::CLS || r == Role::BL || (stage == Stage::decoder && r == Role::BR);
}

/// Partitions the searchable sites of `cfg` into groups. Group ids follow
/// (stage, layer, head, role, token) order.
inline SiteGrouping make_grouping(const ModelConfig& cfg, Granularity g, StageFilter filter = StageFilter::both) {
  const auto layout = cfg.layout();
  SiteGrouping out;
  out.granularity = g;
  const auto add = [&](SiteGroup grp) {
    grp.id = static_cast<int>(out.groups.size());
    out.groups.push_back(std::move(grp));
  };
  for (Stage stage : {Stage::encoder, Stage::decoder}) {
    if ((filter == StageFilter::encoder && stage != Stage::encoder) ||
        (filter == StageFilter::decoder && stage != Stage::decoder))
      continue;
    const int layers = stage == Stage::encoder ? cfg.enc_layers : cfg.dec_layers;
    for (int l = 0; l < layers; ++l) {
      SiteGroup whole{0, stage, l, -1, "all", {}};
      for (int h = 0; h < cfg.heads; ++h) {
        SiteGroup head{0, stage, l, h, "all", {}};
        for (Role r : {Role::CLS, Role::BL, Role::BR}) {
          if (!searchable_role(stage, r)) continue;
          SiteGroup quad{0, stage, l, h, std::string(to_string(r)), {}};
          const int n = r == Role::CLS ? 1 : layout.q();
          for (int i = 0; i < n; ++i) {
            const SiteAddress s{stage, l, h, layout.first(r) + i};
            quad.members.push_back(s);
            if (g == Granularity::token) add({0, stage, l, h, "T" + std::to_string(s.token), {s}});
          }
          head.members.insert(head.members.end(), quad.members.begin(), quad.members.end());
          if (g == Granularity::quadrant) add(std::move(quad));
        }
        whole.members.insert(whole.members.end(), head.members.begin(), head.members.end());
        if (g == Granularity::head) add(std::move(head));
      }
      if (g == Granularity::layer) add(std::move(whole));
    }
  }
  return out;
}

/// Every site the grouping can address, for use as a record filter.
inline RecordFilter grouping_filter(const SiteGrouping& g) {
  std::set<SiteAddress> s;
  for (const auto& grp : g.groups) s.insert(grp.members.begin(), grp.members.end());
  return RecordFilter::only(std::move(s));
}

/// Group score = sum of member site scores.
inline std::vector<double> group_scores(const SiteGrouping& g, const ScoreTable& t) {
  std::vector<double> out;
  for (const auto& grp : g.groups) {
    double s = 0;
    for (const auto& m : grp.members) {
      const auto it = t.rho.find(m);
      if (it == t.rho.end()) throw std::invalid_argument("no score for site " + to_string(m));
      s += it->second;
    }
    out.push_back(s);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Clustering quality

namespace detail {

inline std::map<int, std::vector<Eigen::Index>> clusters_of(const Mat& x, const std::vector<int>& labels) {
  if (static_cast<Eigen::Index>(labels.size()) != x.rows()) throw std::invalid_argument("one label per row required");
  std::map<int, std::vector<Eigen::Index>> c;
  for (std::size_t i = 0; i < labels.size(); ++i) c[labels[i]].push_back(static_cast<Eigen::Index>(i));
  if (c.size() < 2) throw std::invalid_argument("need at least 2 clusters");
  return c;
}

}  // namespace detail

/// Mean silhouette. Singleton clusters are rejected rather than given the
/// usual s = 0 convention.
inline double silhouette(const Mat& x, const std::vector<int>& labels) {
  const auto clusters = detail::clusters_of(x, labels);
  for (const auto& [k, members] : clusters)
    if (members.size() < 2) throw std::invalid_argument("silhouette: singleton cluster " + std::to_string(k));
  double total = 0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    double a = 0, b = std::numeric_limits<double>::infinity();
    for (const auto& [k, members] : clusters) {
      double sum = 0;
      for (Eigen::Index j : members) sum += (x.row(i) - x.row(j)).norm();
      if (k == labels[static_cast<std::size_t>(i)]) a = sum / static_cast<double>(members.size() - 1);
      else b = std::min(b, sum / static_cast<double>(members.size()));
    }
    const double m = std::max(a, b);
    total += m > 0 ? (b - a) / m : 0.0;
  }
  return total / static_cast<double>(x.rows());
}

inline double davies_bouldin(const Mat& x, const std::vector<int>& labels) {
  const auto clusters = detail::clusters_of(x, labels);
  std::vector<RowVec> centroid;
  std::vector<double> spread;
  for (const auto& [k, members] : clusters) {
    RowVec c = RowVec::Zero(x.cols());
    for (Eigen::Index j : members) c += x.row(j);
    c /= static_cast<double>(members.size());
    double s = 0;
    for (Eigen::Index j : members) s += (x.row(j) - c).norm();
    centroid.push_back(c);
    spread.push_back(s / static_cast<double>(members.size()));
  }
  double total = 0;
  for (std::size_t i = 0; i < centroid.size(); ++i) {
    double worst = 0;
    for (std::size_t k = 0; k < centroid.size(); ++k) {
      if (k == i) continue;
      const double m = (centroid[i] - centroid[k]).norm();
      if (m == 0) throw std::invalid_argument("degenerate centroid pair");
      worst = std::max(worst, (spread[i] + spread[k]) / m);
    }
    total += worst;
  }
  return total / static_cast<double>(centroid.size());
}

struct ClusterReport {
  HeadKey head;
  Mat projection;  // samples x 2
  std::vector<int> labels;
  double silhouette = 0;
  double davies_bouldin = 0;
};

/// Concatenates each sample's activations over the head's sites, projects
/// to two principal axes and scores the task clusters.
inline ClusterReport cluster_report(const std::vector<ActivationStore>& stores, const HeadKey& head) {
  if (stores.size() < 2) throw std::invalid_argument("cluster_report: need at least 2 tasks");
  std::vector<SiteAddress> sites;
  for (const auto& s : stores.front().sites)
    if (s.stage == head.stage && s.layer == head.layer && s.head == head.head) sites.push_back(s);
  if (sites.empty()) throw std::invalid_argument("cluster_report: no sites for head " + to_string(head));
  const int d = stores.front().d_model;
  std::size_t rows = 0;
  for (const auto& s : stores) rows += s.count;
  Mat x(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(sites.size()) * d);
  ClusterReport rep;
  rep.head = head;
  Eigen::Index r = 0;
  for (const auto& st : stores) {
    std::vector<std::size_t> idx;
    for (const auto& s : sites) idx.push_back(st.site_index(s));
    for (std::size_t i = 0; i < st.count; ++i, ++r) {
      for (std::size_t k = 0; k < idx.size(); ++k) x.block(r, static_cast<Eigen::Index>(k) * d, 1, d) = st.at(i, idx[k]);
      rep.labels.push_back(static_cast<int>(st.task));
    }
  }
  rep.projection = pca_project(x, 2);
  rep.silhouette = silhouette(rep.projection, rep.labels);
  rep.davies_bouldin = davies_bouldin(rep.projection, rep.labels);
  return rep;
}

inline std::string cluster_csv(const std::vector<ClusterReport>& reps) {
  std::ostringstream os;
  os << "head,silhouette,db\n";
  for (const auto& r : reps) os << to_string(r.head) << ',' << fmt6(r.silhouette) << ',' << fmt6(r.davies_bouldin) << '\n';
  return os.str();
}

inline std::string projection_csv(const ClusterReport& r) {
  std::ostringstream os;
  os << "sample,task,pc1,pc2\n";
  for (Eigen::Index i = 0; i < r.projection.rows(); ++i)
    os << i << ',' << to_string(task_from_index(static_cast<unsigned>(r.labels[static_cast<std::size_t>(i)]))) << ','
       << fmt6(r.projection(i, 0)) << ',' << fmt6(r.projection(i, 1)) << '\n';
  return os.str();
}

}  // namespace tvlab
