#include <gtest/gtest.h>

#include <filesystem>

#include "tvlab/activation_lab.hpp"

using namespace tvlab;

namespace {

const SiteAddress kSite{Stage::encoder, 0, 0, 0};

ActivationStore scalar_store(TaskId t, const std::vector<double>& xs, SiteAddress site = kSite) {
  ActivationStore s;
  s.task = t;
  for (double x : xs) s.add_sample({{site, RowVec::Constant(1, x)}});
  return s;
}

// Sites 0..n_planted-1 hold a per-task constant; the rest are task-independent
// Gaussian noise.
std::vector<ActivationStore> planted_stores(int n_planted, int n_noise, int n, int d, Rng rng) {
  std::vector<ActivationStore> out;
  for (TaskId t : {TaskId::segmentation, TaskId::lowlight, TaskId::colorize, TaskId::inpaint}) {
    ActivationStore st;
    st.task = t;
    std::vector<RowVec> offsets;
    Rng orng = rng.child("offset").child(static_cast<std::uint64_t>(t));
    for (int k = 0; k < n_planted; ++k) {
      RowVec o(d);
      for (auto& v : o) v = orng.normal();
      offsets.push_back(o);
    }
    Rng srng = rng.child("samples").child(static_cast<std::uint64_t>(t));
    for (int i = 0; i < n; ++i) {
      std::map<SiteAddress, RowVec> rec;
      for (int k = 0; k < n_planted + n_noise; ++k) {
        RowVec v(d);
        if (k < n_planted) v = offsets[static_cast<std::size_t>(k)];
        else
          for (auto& x : v) x = srng.normal();
        rec[{Stage::encoder, 0, 0, k}] = v;
      }
      st.add_sample(rec);
    }
    out.push_back(st);
  }
  return out;
}

// Independent plain-vector versions of the clustering metrics.
using Points = std::vector<std::vector<double>>;

double euclid(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

double ref_silhouette(const Points& p, const std::vector<int>& lab) {
  double total = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    std::map<int, std::pair<double, int>> acc;
    for (std::size_t j = 0; j < p.size(); ++j) {
      if (i == j) continue;
      acc[lab[j]].first += euclid(p[i], p[j]);
      acc[lab[j]].second += 1;
    }
    const double a = acc[lab[i]].first / acc[lab[i]].second;
    double b = 1e300;
    for (const auto& [k, v] : acc)
      if (k != lab[i]) b = std::min(b, v.first / v.second);
    total += (b - a) / std::max(a, b);
  }
  return total / static_cast<double>(p.size());
}

double ref_db(const Points& p, const std::vector<int>& lab) {
  std::map<int, std::vector<std::size_t>> members;
  for (std::size_t i = 0; i < p.size(); ++i) members[lab[i]].push_back(i);
  std::vector<std::vector<double>> cent;
  std::vector<double> spread;
  for (const auto& [k, idx] : members) {
    std::vector<double> c(p[0].size(), 0.0);
    for (auto i : idx)
      for (std::size_t e = 0; e < c.size(); ++e) c[e] += p[i][e] / static_cast<double>(idx.size());
    double s = 0;
    for (auto i : idx) s += euclid(p[i], c);
    cent.push_back(c);
    spread.push_back(s / static_cast<double>(idx.size()));
  }
  double total = 0;
  for (std::size_t i = 0; i < cent.size(); ++i) {
    double worst = 0;
    for (std::size_t k = 0; k < cent.size(); ++k)
      if (k != i) worst = std::max(worst, (spread[i] + spread[k]) / euclid(cent[i], cent[k]));
    total += worst;
  }
  return total / static_cast<double>(cent.size());
}

Mat to_mat(const Points& p) {
  Mat m(static_cast<Eigen::Index>(p.size()), static_cast<Eigen::Index>(p[0].size()));
  for (std::size_t i = 0; i < p.size(); ++i)
    for (std::size_t e = 0; e < p[0].size(); ++e) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(e)) = p[i][e];
  return m;
}

ModelConfig small_config() {
  ModelConfig c;
  c.d_model = 16;
  c.enc_layers = 2;
  c.dec_layers = 1;
  c.heads = 2;
  c.mlp_hidden = 24;
  c.image_side = 8;
  return c;
}

}  // namespace

TEST(Store, AddSampleRejectsMismatch) {
  ActivationStore s = scalar_store(TaskId::segmentation, {1.0});
  EXPECT_THROW(s.add_sample({{{Stage::encoder, 0, 0, 1}, RowVec::Constant(1, 1.0)}}), std::invalid_argument);
  EXPECT_THROW(s.add_sample({{kSite, RowVec::Constant(2, 1.0)}}), std::invalid_argument);
}

TEST(Store, CollectCountsAndRoundTrip) {
  const ModelConfig c = small_config();
  const Weights w = init_weights(c, Rng(2));
  const DatasetSplit split = gen_split(0, {TaskId::lowlight, TaskId::inpaint}, 8, {5, 1, 1}, Rng(3));
  std::vector<const TripletSample*> data;
  for (const auto& s : split.train) data.push_back(&s);
  const SiteGrouping g = make_grouping(c, Granularity::quadrant);
  const ActivationStore st = collect(w, data, TaskId::inpaint, 4, PromptMode::one_shot, grouping_filter(g));
  EXPECT_EQ(st.count, 4u);
  EXPECT_EQ(st.sites.size(), g.expand([&] {
    std::vector<int> all;
    for (const auto& grp : g.groups) all.push_back(grp.id);
    return all;
  }()).size());
  EXPECT_EQ(st.values.size(), st.count * st.sites.size() * static_cast<std::size_t>(c.d_model));

  const auto path = std::filesystem::temp_directory_path() / "tvlab_store.tvas";
  save_store(st, path);
  EXPECT_EQ(load_store(path), st);
  EXPECT_EQ(std::filesystem::file_size(path),
            4 + 4 + 1 + 8 + 4 + 4 + st.sites.size() * 13 + st.values.size() * 4);

  EXPECT_THROW(collect(w, data, TaskId::colorize, 4, PromptMode::one_shot, grouping_filter(g)), std::invalid_argument);
  EXPECT_THROW(collect(w, data, TaskId::inpaint, 0, PromptMode::one_shot, grouping_filter(g)), std::invalid_argument);
}

TEST(Store, CollectOrderIndependent) {
  const ModelConfig c = small_config();
  const Weights w = init_weights(c, Rng(2));
  const DatasetSplit split = gen_split(0, {TaskId::lowlight}, 8, {4, 1, 1}, Rng(3));
  std::vector<const TripletSample*> fwd;
  for (const auto& s : split.train) fwd.push_back(&s);
  const RecordFilter f = grouping_filter(make_grouping(c, Granularity::head));
  const ActivationStore a = collect(w, fwd, TaskId::lowlight, 4, PromptMode::one_shot, f);
  // the single-sample store holds that sample's activations exactly
  const ActivationStore one = collect(w, fwd, TaskId::lowlight, 1, PromptMode::one_shot, f);
  const auto m = mean_activations({one});
  for (std::size_t k = 0; k < one.sites.size(); ++k) EXPECT_EQ(m.mean(TaskId::lowlight, one.sites[k]), a.at(0, k));
  // collecting twice gives the same bytes
  EXPECT_EQ(collect(w, fwd, TaskId::lowlight, 4, PromptMode::one_shot, f), a);
}

TEST(Means, BasicsAndStreaming) {
  const auto m = mean_activations({scalar_store(TaskId::segmentation, {0, 2})});
  EXPECT_EQ(m.mean(TaskId::segmentation, kSite)(0), 1.0);
  EXPECT_THROW((void)m.mean(TaskId::inpaint, kSite), std::invalid_argument);

  const auto stores = planted_stores(3, 5, 57, 6, Rng(4));
  const auto batch = mean_activations(stores);
  const auto stream = mean_activations_streaming(stores);
  for (const auto& [t, sites] : batch.means)
    for (const auto& [s, v] : sites) EXPECT_LE((v - stream.mean(t, s)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Means, Linearity) {
  const auto a = mean_activations({scalar_store(TaskId::lowlight, {0.5, 1.5, 4.0})});
  const auto b = mean_activations({scalar_store(TaskId::lowlight, {1.5, 4.5, 12.0})});
  EXPECT_DOUBLE_EQ(b.mean(TaskId::lowlight, kSite)(0), 3 * a.mean(TaskId::lowlight, kSite)(0));
}

TEST(Scores, HandComputedRatio) {
  // union {0,2,4,6}: variance 5; each task variance 1
  const ScoreTable t = score_tokens({scalar_store(TaskId::segmentation, {0, 2}), scalar_store(TaskId::lowlight, {4, 6})});
  EXPECT_NEAR(t.rho.at(kSite), 5.0, 1e-10);
  EXPECT_EQ(t.n_tasks, 2u);
}

TEST(Scores, IdenticalTasksScoreZeroAndConstantsAreFinite) {
  const ScoreTable same = score_tokens({scalar_store(TaskId::segmentation, {1, 1}), scalar_store(TaskId::lowlight, {1, 1})});
  EXPECT_EQ(same.rho.at(kSite), 0.0);
  const ScoreTable consts = score_tokens({scalar_store(TaskId::segmentation, {0, 0}), scalar_store(TaskId::lowlight, {2, 2})});
  EXPECT_NEAR(consts.rho.at(kSite), 1.0 / kScoreEps, 1.0);
  EXPECT_TRUE(std::isfinite(consts.rho.at(kSite)));
}

TEST(Scores, Errors) {
  EXPECT_THROW(score_tokens({scalar_store(TaskId::segmentation, {0, 2})}), std::invalid_argument);
  EXPECT_THROW(score_tokens({scalar_store(TaskId::segmentation, {0}), scalar_store(TaskId::lowlight, {1})}),
               std::invalid_argument);
  EXPECT_THROW(score_tokens({scalar_store(TaskId::segmentation, {0, 2}),
                             scalar_store(TaskId::lowlight, {1, 3}, {Stage::decoder, 0, 0, 0})}),
               std::invalid_argument);
}

TEST(Scores, InvariantToOrderRelabelingAndScale) {
  const ScoreTable base = score_tokens({scalar_store(TaskId::segmentation, {0.1, 0.7, 0.2}),
                                        scalar_store(TaskId::lowlight, {1.1, 0.9, 1.6})});
  const ScoreTable swapped = score_tokens({scalar_store(TaskId::lowlight, {1.6, 1.1, 0.9}),
                                           scalar_store(TaskId::segmentation, {0.2, 0.1, 0.7})});
  EXPECT_NEAR(base.rho.at(kSite), swapped.rho.at(kSite), 1e-9);
  const ScoreTable scaled = score_tokens({scalar_store(TaskId::segmentation, {0.4, 2.8, 0.8}),
                                          scalar_store(TaskId::lowlight, {4.4, 3.6, 6.4})});
  EXPECT_NEAR(base.rho.at(kSite), scaled.rho.at(kSite), 1e-6);
}

TEST(Scores, PlantedSitesOutrankNoise) {
  int wins = 0;
  for (std::uint64_t trial = 0; trial < 20; ++trial) {
    const ScoreTable t = score_tokens(planted_stores(3, 20, 100, 4, Rng(trial)));
    double worst_planted = 1e300, best_noise = 0;
    for (const auto& [s, r] : t.rho) {
      if (s.token < 3) worst_planted = std::min(worst_planted, r);
      else best_noise = std::max(best_noise, r);
    }
    wins += worst_planted > best_noise;
  }
  EXPECT_GE(wins, 20);
}

TEST(Scores, AggregatesAndCsv) {
  ScoreTable t;
  t.rho[{Stage::encoder, 0, 0, 1}] = 1.5;
  t.rho[{Stage::encoder, 0, 1, 1}] = 2.0;
  t.rho[{Stage::encoder, 0, 1, 2}] = 0.25;
  t.rho[{Stage::decoder, 1, 0, 3}] = 7.0;
  aggregate_scores(t);
  EXPECT_EQ((t.head.at({Stage::encoder, 0, 0})), 1.5);
  EXPECT_EQ((t.head.at({Stage::encoder, 0, 1})), 2.25);
  EXPECT_EQ((t.layer.at({Stage::encoder, 0})), 3.75);
  EXPECT_EQ((t.layer.at({Stage::decoder, 1})), 7.0);
  double heads = 0;
  for (const auto& [k, v] : t.head)
    if (k.stage == Stage::encoder && k.layer == 0) heads += v;
  EXPECT_EQ(heads, t.layer.at({Stage::encoder, 0}));
  const ScoreTable back = parse_scores_csv(scores_csv(t));
  EXPECT_EQ(back.rho, t.rho);
  EXPECT_EQ(back.layer, t.layer);
}

TEST(Grouping, PartitionsSearchableSites) {
  const ModelConfig c = small_config();  // q = 4, 2 heads, enc 2, dec 1
  const SiteGrouping quad = make_grouping(c, Granularity::quadrant);
  EXPECT_EQ(quad.size(), 2u * 2 * 2 + 1u * 2 * 3);
  const SiteGrouping tok = make_grouping(c, Granularity::token);
  EXPECT_EQ(tok.size(), 2u * 2 * 5 + 1u * 2 * 9);
  EXPECT_EQ(make_grouping(c, Granularity::head).size(), 6u);
  EXPECT_EQ(make_grouping(c, Granularity::layer).size(), 3u);
  EXPECT_EQ(make_grouping(c, Granularity::quadrant, StageFilter::decoder).size(), 6u);
  EXPECT_EQ(make_grouping(c, Granularity::quadrant, StageFilter::encoder).size(), 8u);

  std::set<SiteAddress> seen;
  for (const auto& g : quad.groups)
    for (const auto& s : g.members) {
      EXPECT_TRUE(seen.insert(s).second) << to_string(s);
      EXPECT_TRUE(site_valid(c, PromptMode::query_only, s)) << to_string(s);
    }
  std::set<SiteAddress> tok_sites;
  for (const auto& g : tok.groups) tok_sites.insert(g.members.begin(), g.members.end());
  EXPECT_EQ(seen, tok_sites);
  EXPECT_EQ(label(quad.groups[0]), "encoder/L0/H0/CLS");
  EXPECT_EQ(label(quad.groups.back()), "decoder/L0/H1/BR");
  EXPECT_THROW(quad.expand({99}), std::invalid_argument);
}

TEST(Clustering, HandComputedLineClusters) {
  const Mat x = to_mat({{0}, {1}, {10}, {11}});
  const std::vector<int> lab{0, 0, 1, 1};
  EXPECT_NEAR(silhouette(x, lab), 0.899749373433584, 1e-12);
  EXPECT_NEAR(davies_bouldin(x, lab), 0.1, 1e-12);
}

TEST(Clustering, BoundaryCases) {
  const Mat same = to_mat({{0.5, 1}, {0.5, 1}, {0.5, 1}, {0.5, 1}});
  EXPECT_EQ(silhouette(same, {0, 0, 1, 1}), 0.0);
  EXPECT_THROW(davies_bouldin(same, {0, 0, 1, 1}), std::invalid_argument);
  const Mat far = to_mat({{0}, {0}, {1e6}, {1e6}});
  EXPECT_EQ(silhouette(far, {0, 0, 1, 1}), 1.0);
  EXPECT_EQ(davies_bouldin(far, {0, 0, 1, 1}), 0.0);
  EXPECT_THROW(silhouette(to_mat({{0}, {1}, {5}}), {0, 0, 1}), std::invalid_argument);
  EXPECT_NO_THROW(davies_bouldin(to_mat({{0}, {1}, {5}}), {0, 0, 1}));
  EXPECT_THROW(silhouette(to_mat({{0}, {1}}), {0, 0}), std::invalid_argument);
}

TEST(Clustering, MatchesReferenceOnRandomData) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    Points p;
    std::vector<int> lab;
    const int k = 2 + static_cast<int>(rng.below(3));
    for (int c = 0; c < k; ++c) {
      const int n = 2 + static_cast<int>(rng.below(6));
      for (int i = 0; i < n; ++i) {
        p.push_back({rng.normal() + 3 * c, rng.normal(), rng.normal() - c});
        lab.push_back(c);
      }
    }
    EXPECT_NEAR(silhouette(to_mat(p), lab), ref_silhouette(p, lab), 1e-9);
    EXPECT_NEAR(davies_bouldin(to_mat(p), lab), ref_db(p, lab), 1e-9);
  }
}

TEST(Clustering, ReportSeparatesConstantTasks) {
  const auto stores = planted_stores(3, 0, 10, 4, Rng(8));
  const ClusterReport rep = cluster_report(stores, {Stage::encoder, 0, 0});
  EXPECT_EQ(rep.projection.rows(), 40);
  EXPECT_EQ(rep.projection.cols(), 2);
  EXPECT_GE(rep.silhouette, 0.99);
  EXPECT_LE(rep.davies_bouldin, 0.01);
}

TEST(Clustering, ShuffledLabelsScoreLower) {
  auto stores = planted_stores(2, 0, 12, 3, Rng(9));
  for (auto& st : stores)  // add within-task spread so the metrics are informative
    for (std::size_t i = 0; i < st.values.size(); ++i) st.values[i] += static_cast<float>(0.3 * Rng(10).child(i).normal());
  const ClusterReport rep = cluster_report(stores, {Stage::encoder, 0, 0});
  std::vector<int> shuffled = rep.labels;
  Rng rng(11);
  for (std::size_t i = shuffled.size() - 1; i > 0; --i) std::swap(shuffled[i], shuffled[rng.below(i + 1)]);
  EXPECT_LT(silhouette(rep.projection, shuffled), rep.silhouette);
  EXPECT_EQ(cluster_csv({rep}).rfind("head,silhouette,db\nencoder/L0/H0,", 0), 0u);
}
