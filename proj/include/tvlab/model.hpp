#pragma once

// Toy MAE-style encoder/decoder transformer whose per-head residual
// contributions are addressable sites that can be recorded and patched.

#include <atomic>
#include <compare>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "tvlab/grid_tasks.hpp"
#include "tvlab/io.hpp"
#include "tvlab/numerics.hpp"

namespace tvlab {

struct ModelConfig {
  int d_model = 32;
  int enc_layers = 4;
  int dec_layers = 2;
  int heads = 4;
  int mlp_hidden = 64;
  int patch_side = 4;
  int image_side = 16;
  // Degenerate variant: attention bypassed, identity MLP activation, no
  // layer norms. The network is then affine in every single parameter.
  bool linear_only = false;
  double ln_eps = 1e-5;

  [[nodiscard]] int d_head() const { return d_model / heads; }
  [[nodiscard]] GridLayout layout() const { return GridLayout{image_side, patch_side}; }
  [[nodiscard]] int q() const { return layout().q(); }
  [[nodiscard]] int patch_dim() const { return layout().patch_dim(); }
  [[nodiscard]] int total_layers() const { return enc_layers + dec_layers; }

  void validate() const {
    if (d_model <= 0 || heads <= 0 || d_model % heads != 0)
      throw std::invalid_argument("d_model must be divisible by heads");
    if (enc_layers < 0 || dec_layers < 0 || mlp_hidden <= 0)
      throw std::invalid_argument("invalid layer counts");
    layout().validate();
  }
  bool operator==(const ModelConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"d_model", c.d_model}, {"enc_layers", c.enc_layers}, {"dec_layers", c.dec_layers},
       {"heads", c.heads}, {"mlp_hidden", c.mlp_hidden}, {"patch_side", c.patch_side},
       {"image_side", c.image_side}, {"linear_only", c.linear_only}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  c = ModelConfig{};
  c.d_model = j.value("d_model", c.d_model);
  c.enc_layers = j.value("enc_layers", c.enc_layers);
  c.dec_layers = j.value("dec_layers", c.dec_layers);
  c.heads = j.value("heads", c.heads);
  c.mlp_hidden = j.value("mlp_hidden", c.mlp_hidden);
  c.patch_side = j.value("patch_side", c.patch_side);
  c.image_side = j.value("image_side", c.image_side);
  c.linear_only = j.value("linear_only", c.linear_only);
}

enum class Stage : std::uint8_t { encoder = 0, decoder = 1 };

inline std::string_view to_string(Stage s) { return s == Stage::encoder ? "encoder" : "decoder"; }

inline Stage parse_stage(std::string_view s) {
  if (s == "encoder") return Stage::encoder;
  if (s == "decoder") return Stage::decoder;
  throw std::invalid_argument("unknown stage: " + std::string(s));
}

/// (stage, layer, head, token). `token` is a position in the full decoder
/// frame, so the same index names the same quadrant cell in both stages.
struct SiteAddress {
  Stage stage = Stage::encoder;
  int layer = 0;
  int head = 0;
  int token = 0;
  auto operator<=>(const SiteAddress&) const = default;
};

inline std::string to_string(const SiteAddress& s) {
  std::ostringstream os;
  os << to_string(s.stage) << "/L" << s.layer << "/H" << s.head << "/T" << s.token;
  return os.str();
}

/// Layer index over the whole network (encoder first).
inline int global_layer(const ModelConfig& cfg, const SiteAddress& s) {
  return s.stage == Stage::encoder ? s.layer : cfg.enc_layers + s.layer;
}

using PatchSet = std::map<SiteAddress, RowVec>;

struct RecordFilter {
  enum class Kind { none, all, only } kind = Kind::none;
  std::set<SiteAddress> sites;
  bool residuals = false;

  static RecordFilter none() { return {}; }
  static RecordFilter all() { return {Kind::all, {}, false}; }
  static RecordFilter only(std::set<SiteAddress> s) { return {Kind::only, std::move(s), false}; }
  [[nodiscard]] bool wants(const SiteAddress& s) const {
    return kind == Kind::all || (kind == Kind::only && sites.count(s) != 0);
  }
  [[nodiscard]] bool any() const { return kind != Kind::none; }
};

struct LayerResidual {
  Stage stage;
  int layer;
  Mat input;     // residual stream entering the block
  Mat attention; // sum over heads of their (possibly patched) contributions
  Mat mlp;       // MLP addend
  Mat output;
};

struct ForwardTrace {
  std::map<SiteAddress, RowVec> records;
  Mat raw;            // q x patch_dim BR predictions before clamping
  GridImage output;   // clamped BR reconstruction
  std::vector<LayerResidual> residuals;
};

// ---------------------------------------------------------------------------
// Weights

struct Block {
  Mat wq, wk, wv, wo;
  Mat ln1_g, ln1_b, ln2_g, ln2_b;
  Mat w1, b1, w2, b2;

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".wq", wq);
    f(prefix + ".wk", wk);
    f(prefix + ".wv", wv);
    f(prefix + ".wo", wo);
    f(prefix + ".ln1_g", ln1_g);
    f(prefix + ".ln1_b", ln1_b);
    f(prefix + ".ln2_g", ln2_g);
    f(prefix + ".ln2_b", ln2_b);
    f(prefix + ".w1", w1);
    f(prefix + ".b1", b1);
    f(prefix + ".w2", w2);
    f(prefix + ".b2", b2);
  }
};

struct Weights {
  ModelConfig cfg;
  Mat patch_w, patch_b, cls, enc_pos;
  std::vector<Block> enc;
  Mat enc_norm_g, enc_norm_b;
  Mat dec_w, dec_b, mask_token, dec_pos;
  std::vector<Block> dec;
  Mat dec_norm_g, dec_norm_b;
  Mat out_w, out_b;

  template <typename F>
  void visit(F&& f) {
    f(std::string("patch_w"), patch_w);
    f(std::string("patch_b"), patch_b);
    f(std::string("cls"), cls);
    f(std::string("enc_pos"), enc_pos);
    for (std::size_t l = 0; l < enc.size(); ++l) enc[l].visit("enc." + std::to_string(l), f);
    f(std::string("enc_norm_g"), enc_norm_g);
    f(std::string("enc_norm_b"), enc_norm_b);
    f(std::string("dec_w"), dec_w);
    f(std::string("dec_b"), dec_b);
    f(std::string("mask_token"), mask_token);
    f(std::string("dec_pos"), dec_pos);
    for (std::size_t l = 0; l < dec.size(); ++l) dec[l].visit("dec." + std::to_string(l), f);
    f(std::string("dec_norm_g"), dec_norm_g);
    f(std::string("dec_norm_b"), dec_norm_b);
    f(std::string("out_w"), out_w);
    f(std::string("out_b"), out_b);
  }
  template <typename F>
  void visit(F&& f) const {
    const_cast<Weights*>(this)->visit([&](const std::string& n, Mat& m) { f(n, static_cast<const Mat&>(m)); });
  }

  [[nodiscard]] std::size_t parameter_count() const {
    std::size_t n = 0;
    visit([&](const std::string&, const Mat& m) { n += static_cast<std::size_t>(m.size()); });
    return n;
  }

  [[nodiscard]] std::vector<double> flatten() const {
    std::vector<double> out;
    out.reserve(parameter_count());
    visit([&](const std::string&, const Mat& m) { out.insert(out.end(), m.data(), m.data() + m.size()); });
    return out;
  }

  void unflatten(std::span<const double> flat) {
    if (flat.size() != parameter_count()) throw std::invalid_argument("unflatten: size mismatch");
    std::size_t off = 0;
    visit([&](const std::string&, Mat& m) {
      std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(off), m.size(), m.data());
      off += static_cast<std::size_t>(m.size());
    });
  }

  /// Same shapes, all zeros. Used as a gradient accumulator.
  [[nodiscard]] Weights zeros_like() const {
    Weights z = *this;
    z.visit([](const std::string&, Mat& m) { m.setZero(); });
    return z;
  }

  [[nodiscard]] bool finite() const {
    bool ok = true;
    visit([&](const std::string&, const Mat& m) { ok = ok && m.allFinite(); });
    return ok;
  }
};

namespace detail {

inline Mat randn(int rows, int cols, double stddev, Rng rng) {
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = stddev * rng.normal();
  return m;
}

inline Block init_block(const ModelConfig& c, int total_layers, Rng rng) {
  const int d = c.d_model, h = c.mlp_hidden;
  const double s_in = 1.0 / std::sqrt(static_cast<double>(d));
  const double s_out = s_in / std::sqrt(2.0 * std::max(1, total_layers));
  Block b;
  b.wq = randn(d, d, s_in, rng.child("wq"));
  b.wk = randn(d, d, s_in, rng.child("wk"));
  b.wv = randn(d, d, s_in, rng.child("wv"));
  b.wo = randn(d, d, s_out, rng.child("wo"));
  b.ln1_g = Mat::Ones(1, d);
  b.ln1_b = Mat::Zero(1, d);
  b.ln2_g = Mat::Ones(1, d);
  b.ln2_b = Mat::Zero(1, d);
  b.w1 = randn(d, h, s_in, rng.child("w1"));
  b.b1 = Mat::Zero(1, h);
  b.w2 = randn(h, d, 1.0 / std::sqrt(static_cast<double>(h)) / std::sqrt(2.0 * std::max(1, total_layers)),
               rng.child("w2"));
  b.b2 = Mat::Zero(1, d);
  return b;
}

}  // namespace detail

inline Weights init_weights(const ModelConfig& c, const Rng& rng) {
  c.validate();
  const int d = c.d_model, p = c.patch_dim(), n = c.layout().positions();
  Weights w;
  w.cfg = c;
  w.patch_w = detail::randn(p, d, 1.0 / std::sqrt(static_cast<double>(p)), rng.child("patch_w"));
  w.patch_b = Mat::Zero(1, d);
  w.cls = detail::randn(1, d, 0.2, rng.child("cls"));
  w.enc_pos = detail::randn(n, d, 0.2, rng.child("enc_pos"));
  for (int l = 0; l < c.enc_layers; ++l)
    w.enc.push_back(detail::init_block(c, c.total_layers(), rng.child("enc").child(static_cast<std::uint64_t>(l))));
  w.enc_norm_g = Mat::Ones(1, d);
  w.enc_norm_b = Mat::Zero(1, d);
  w.dec_w = detail::randn(d, d, 1.0 / std::sqrt(static_cast<double>(d)), rng.child("dec_w"));
  w.dec_b = Mat::Zero(1, d);
  w.mask_token = detail::randn(1, d, 0.2, rng.child("mask_token"));
  w.dec_pos = detail::randn(n, d, 0.2, rng.child("dec_pos"));
  for (int l = 0; l < c.dec_layers; ++l)
    w.dec.push_back(detail::init_block(c, c.total_layers(), rng.child("dec").child(static_cast<std::uint64_t>(l))));
  w.dec_norm_g = Mat::Ones(1, d);
  w.dec_norm_b = Mat::Zero(1, d);
  w.out_w = detail::randn(d, p, 1.0 / std::sqrt(static_cast<double>(d)), rng.child("out_w"));
  w.out_b = Mat::Constant(1, p, 0.5);
  return w;
}

/// Counts every model forward pass in the process; the pipeline uses it to
/// prove cache hits.
inline std::atomic<std::uint64_t>& forward_counter() {
  static std::atomic<std::uint64_t> counter{0};
  return counter;
}

// ---------------------------------------------------------------------------
// Forward machinery shared by inference and training

namespace detail {

struct NormCache {
  Mat xhat;
  Vec rstd;
};

inline Mat norm_forward(const Mat& x, const Mat& g, const Mat& b, double eps, bool identity, NormCache* cache) {
  if (identity) {
    if (cache) {
      cache->xhat = x;
      cache->rstd = Vec::Ones(x.rows());
    }
    return x;
  }
  Mat xhat(x.rows(), x.cols());
  Vec rstd(x.rows());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double mean = x.row(r).mean();
    const double var = (x.row(r).array() - mean).square().mean();
    rstd(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (x.row(r).array() - mean) * rstd(r);
  }
  Mat y = (xhat.array().rowwise() * g.row(0).array()).rowwise() + b.row(0).array();
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->rstd = std::move(rstd);
  }
  return y;
}

inline Mat norm_backward(const Mat& dy, const Mat& g, const NormCache& cache, bool identity, Mat& dg, Mat& db) {
  if (identity) return dy;
  dg.row(0) += (dy.array() * cache.xhat.array()).colwise().sum().matrix();
  db.row(0) += dy.colwise().sum();
  const Mat dxhat = dy.array().rowwise() * g.row(0).array();
  Mat dx(dy.rows(), dy.cols());
  const double inv_n = 1.0 / static_cast<double>(dy.cols());
  for (Eigen::Index r = 0; r < dy.rows(); ++r) {
    const double m1 = dxhat.row(r).sum() * inv_n;
    const double m2 = (dxhat.row(r).array() * cache.xhat.row(r).array()).sum() * inv_n;
    dx.row(r) = cache.rstd(r) * (dxhat.row(r).array() - m1 - cache.xhat.row(r).array() * m2);
  }
  return dx;
}

struct BlockCache {
  Mat x;
  NormCache ln1;
  Mat a, q, k, v;
  std::vector<Mat> probs;
  Mat heads;  // n x d, concatenated per-head mixes before the output projection
  Mat h;
  NormCache ln2;
  Mat b, u, g;
};

struct PatchRow {
  int row;
  const RowVec* value;
};

/// Hook state for one block: which rows to record / overwrite per head.
struct BlockHooks {
  Stage stage;
  int layer;
  const std::vector<int>* positions;                 // row -> frame position
  const std::vector<std::vector<PatchRow>>* patches;  // per head
  const RecordFilter* filter;
  std::map<SiteAddress, RowVec>* records;
  std::vector<LayerResidual>* residuals;
};

inline Mat block_forward(const ModelConfig& c, const Block& w, const Mat& x, const BlockHooks* hooks,
                         BlockCache* cache) {
  const auto n = x.rows();
  const int d = c.d_model, dh = c.d_head();
  Mat h = x;
  Mat attn_sum = Mat::Zero(n, d);
  if (!c.linear_only) {
    NormCache ln1;
    Mat a = norm_forward(x, w.ln1_g, w.ln1_b, c.ln_eps, false, cache ? &ln1 : nullptr);
    Mat q = a * w.wq, k = a * w.wk, v = a * w.wv;
    Mat heads(n, d);
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    if (cache) cache->probs.resize(static_cast<std::size_t>(c.heads));
    for (int m = 0; m < c.heads; ++m) {
      Mat s = (q.middleCols(m * dh, dh) * k.middleCols(m * dh, dh).transpose()) * scale;
      softmax_rows(s);
      heads.middleCols(m * dh, dh).noalias() = s * v.middleCols(m * dh, dh);
      Mat contrib = heads.middleCols(m * dh, dh) * w.wo.middleRows(m * dh, dh);
      if (hooks) {
        for (const PatchRow& pr : (*hooks->patches)[static_cast<std::size_t>(m)]) contrib.row(pr.row) = *pr.value;
        if (hooks->filter->any())
          for (Eigen::Index r = 0; r < n; ++r) {
            SiteAddress site{hooks->stage, hooks->layer, m, (*hooks->positions)[static_cast<std::size_t>(r)]};
            if (hooks->filter->wants(site)) (*hooks->records)[site] = contrib.row(r);
          }
      }
      attn_sum += contrib;
      if (cache) cache->probs[static_cast<std::size_t>(m)] = std::move(s);
    }
    h += attn_sum;
    if (cache) {
      cache->ln1 = std::move(ln1);
      cache->a = std::move(a);
      cache->q = std::move(q);
      cache->k = std::move(k);
      cache->v = std::move(v);
      cache->heads = std::move(heads);
    }
  }
  NormCache ln2;
  Mat b = norm_forward(h, w.ln2_g, w.ln2_b, c.ln_eps, c.linear_only, cache ? &ln2 : nullptr);
  Mat u = (b * w.w1).rowwise() + w.b1.row(0);
  Mat g = c.linear_only ? u : Mat(u.unaryExpr([](double z) { return gelu(z); }));
  Mat mlp = (g * w.w2).rowwise() + w.b2.row(0);
  Mat out = h + mlp;
  if (hooks && hooks->filter->residuals)
    hooks->residuals->push_back({hooks->stage, hooks->layer, x, attn_sum, mlp, out});
  if (cache) {
    cache->x = x;
    cache->h = std::move(h);
    cache->ln2 = std::move(ln2);
    cache->b = std::move(b);
    cache->u = std::move(u);
    cache->g = std::move(g);
  }
  return out;
}

inline Mat block_backward(const ModelConfig& c, const Block& w, const BlockCache& cache, const Mat& dout,
                          Block& gw) {
  const int d = c.d_model, dh = c.d_head();
  // MLP branch
  Mat dmlp = dout;
  gw.w2.noalias() += cache.g.transpose() * dmlp;
  gw.b2.row(0) += dmlp.colwise().sum();
  Mat dg = dmlp * w.w2.transpose();
  Mat du = c.linear_only ? dg : Mat(dg.array() * cache.u.unaryExpr([](double z) { return gelu_grad(z); }).array());
  gw.w1.noalias() += cache.b.transpose() * du;
  gw.b1.row(0) += du.colwise().sum();
  Mat db = du * w.w1.transpose();
  Mat dh_res = dout + norm_backward(db, w.ln2_g, cache.ln2, c.linear_only, gw.ln2_g, gw.ln2_b);
  if (c.linear_only) return dh_res;

  // attention branch: every head adds heads_m * wo_m to the residual
  Mat dx = dh_res;
  gw.wo.noalias() += cache.heads.transpose() * dh_res;
  const Mat dheads = dh_res * w.wo.transpose();
  const auto n = cache.x.rows();
  Mat dq(n, d), dk(n, d), dv(n, d);
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  for (int m = 0; m < c.heads; ++m) {
    const Mat& p = cache.probs[static_cast<std::size_t>(m)];
    const auto dhm = dheads.middleCols(m * dh, dh);
    Mat dp = dhm * cache.v.middleCols(m * dh, dh).transpose();
    dv.middleCols(m * dh, dh).noalias() = p.transpose() * dhm;
    Vec rowdot = (dp.array() * p.array()).rowwise().sum();
    Mat ds = (p.array() * (dp.array().colwise() - rowdot.array())) * scale;
    dq.middleCols(m * dh, dh).noalias() = ds * cache.k.middleCols(m * dh, dh);
    dk.middleCols(m * dh, dh).noalias() = ds.transpose() * cache.q.middleCols(m * dh, dh);
  }
  gw.wq.noalias() += cache.a.transpose() * dq;
  gw.wk.noalias() += cache.a.transpose() * dk;
  gw.wv.noalias() += cache.a.transpose() * dv;
  Mat da = dq * w.wq.transpose() + dk * w.wk.transpose() + dv * w.wv.transpose();
  dx += norm_backward(da, w.ln1_g, cache.ln1, false, gw.ln1_g, gw.ln1_b);
  return dx;
}

inline void validate_prompt(const ModelConfig& c, const PromptGrid& prompt) {
  if (prompt.layout.image_side != c.image_side || prompt.layout.patch_side != c.patch_side)
    throw std::invalid_argument("prompt layout does not match model config");
}

}  // namespace detail

/// Whether `site` exists in the token frames of `mode`.
inline bool site_valid(const ModelConfig& c, PromptMode mode, const SiteAddress& s) {
  const auto layout = c.layout();
  const int layers = s.stage == Stage::encoder ? c.enc_layers : c.dec_layers;
  if (s.layer < 0 || s.layer >= layers || s.head < 0 || s.head >= c.heads) return false;
  if (s.token < 0 || s.token >= layout.positions()) return false;
  if (s.stage == Stage::decoder) return true;
  const Role r = layout.role(s.token);
  if (r == Role::BR) return false;
  return mode == PromptMode::one_shot || r == Role::CLS || r == Role::BL;
}

/// Runs the model on `prompt`, overwriting the contribution of every site
/// in `patch` before it is added to the residual stream, and recording the
/// (post-patch) contribution of sites accepted by `record`.
inline ForwardTrace forward(const Weights& w, const PromptGrid& prompt, const PatchSet& patch = {},
                            const RecordFilter& record = RecordFilter::none()) {
  const ModelConfig& c = w.cfg;
  detail::validate_prompt(c, prompt);
  const int d = c.d_model;
  const auto layout = c.layout();
  const int n_dec = layout.positions();
  const auto& visible = prompt.visible;
  std::vector<int> dec_positions(static_cast<std::size_t>(n_dec));
  for (int p = 0; p < n_dec; ++p) dec_positions[static_cast<std::size_t>(p)] = p;
  std::vector<int> enc_row_of(static_cast<std::size_t>(n_dec), -1);
  for (std::size_t r = 0; r < visible.size(); ++r) enc_row_of[static_cast<std::size_t>(visible[r])] = static_cast<int>(r);

  // patch index: [stage][layer][head] -> rows
  using HeadRows = std::vector<std::vector<detail::PatchRow>>;
  std::vector<HeadRows> enc_patch(static_cast<std::size_t>(c.enc_layers), HeadRows(static_cast<std::size_t>(c.heads)));
  std::vector<HeadRows> dec_patch(static_cast<std::size_t>(c.dec_layers), HeadRows(static_cast<std::size_t>(c.heads)));
  for (const auto& [site, vec] : patch) {
    if (!site_valid(c, prompt.mode, site))
      throw std::invalid_argument("invalid patch address for mode: " + to_string(site));
    if (vec.size() != d) throw std::invalid_argument("patch vector has wrong dimension at " + to_string(site));
    if (!vec.allFinite()) throw std::invalid_argument("non-finite patch vector at " + to_string(site));
    if (site.stage == Stage::encoder) {
      const int row = enc_row_of[static_cast<std::size_t>(site.token)];
      enc_patch[static_cast<std::size_t>(site.layer)][static_cast<std::size_t>(site.head)].push_back({row, &vec});
    } else {
      dec_patch[static_cast<std::size_t>(site.layer)][static_cast<std::size_t>(site.head)].push_back({site.token, &vec});
    }
  }

  forward_counter().fetch_add(1, std::memory_order_relaxed);
  ForwardTrace trace;
  Mat x(static_cast<Eigen::Index>(visible.size()), d);
  for (std::size_t r = 0; r < visible.size(); ++r) {
    const int pos = visible[r];
    const auto row = static_cast<Eigen::Index>(r);
    if (pos == 0) x.row(row) = w.cls.row(0) + w.enc_pos.row(0);
    else x.row(row) = prompt.tokens.row(pos) * w.patch_w + w.patch_b.row(0) + w.enc_pos.row(pos);
  }
  for (int l = 0; l < c.enc_layers; ++l) {
    detail::BlockHooks hooks{Stage::encoder, l, &visible, &enc_patch[static_cast<std::size_t>(l)], &record,
                             &trace.records, &trace.residuals};
    x = detail::block_forward(c, w.enc[static_cast<std::size_t>(l)], x, &hooks, nullptr);
  }
  const Mat e = detail::norm_forward(x, w.enc_norm_g, w.enc_norm_b, c.ln_eps, c.linear_only, nullptr);

  Mat y(n_dec, d);
  for (int p = 0; p < n_dec; ++p) {
    const int r = enc_row_of[static_cast<std::size_t>(p)];
    if (r >= 0) y.row(p) = e.row(r) * w.dec_w + w.dec_b.row(0) + w.dec_pos.row(p);
    else y.row(p) = w.mask_token.row(0) + w.dec_pos.row(p);
  }
  for (int l = 0; l < c.dec_layers; ++l) {
    detail::BlockHooks hooks{Stage::decoder, l, &dec_positions, &dec_patch[static_cast<std::size_t>(l)], &record,
                             &trace.records, &trace.residuals};
    y = detail::block_forward(c, w.dec[static_cast<std::size_t>(l)], y, &hooks, nullptr);
  }
  const Mat z = detail::norm_forward(y, w.dec_norm_g, w.dec_norm_b, c.ln_eps, c.linear_only, nullptr);
  trace.raw = (z.middleRows(layout.first(Role::BR), layout.q()) * w.out_w).rowwise() + w.out_b.row(0);
  trace.output = detokenize(trace.raw, layout, /*clamp=*/true);
  return trace;
}

inline GridImage one_shot_predict(const Weights& w, const TripletSample& s) {
  return forward(w, assemble_prompt(s, PromptMode::one_shot, w.cfg.patch_side)).output;
}

/// Query-only prediction: only CLS and the query quadrant reach the model;
/// task information comes from `patch`.
inline GridImage tv_predict(const Weights& w, const GridImage& x_q, const PatchSet& patch) {
  return forward(w, assemble_prompt_parts(nullptr, nullptr, x_q, PromptMode::query_only, w.cfg.patch_side), patch)
      .output;
}

/// One-shot prompt with patches applied on top of the demonstration.
inline GridImage one_shot_tv_predict(const Weights& w, const TripletSample& s, const PatchSet& patch) {
  return forward(w, assemble_prompt(s, PromptMode::one_shot, w.cfg.patch_side), patch).output;
}

// ---------------------------------------------------------------------------
// Training

inline Mat target_tokens(const GridImage& y, const GridLayout& layout) {
  Mat t(layout.q(), layout.patch_dim());
  const int g = layout.per_side();
  for (int pr = 0; pr < g; ++pr)
    for (int pc = 0; pc < g; ++pc) t.row(pr * g + pc) = patch_row(y, layout.patch_side, pr, pc);
  return t;
}

/// MSE of the BR reconstruction against `target`; accumulates d(loss)/dw
/// into `grad` when given.
inline double loss_and_grad(const Weights& w, const PromptGrid& prompt, const Mat& target, Weights* grad) {
  const ModelConfig& c = w.cfg;
  detail::validate_prompt(c, prompt);
  const int d = c.d_model;
  const auto layout = c.layout();
  const int n_dec = layout.positions();
  const auto& visible = prompt.visible;
  std::vector<int> enc_row_of(static_cast<std::size_t>(n_dec), -1);
  for (std::size_t r = 0; r < visible.size(); ++r) enc_row_of[static_cast<std::size_t>(visible[r])] = static_cast<int>(r);

  forward_counter().fetch_add(1, std::memory_order_relaxed);
  Mat x(static_cast<Eigen::Index>(visible.size()), d);
  for (std::size_t r = 0; r < visible.size(); ++r) {
    const int pos = visible[r];
    const auto row = static_cast<Eigen::Index>(r);
    if (pos == 0) x.row(row) = w.cls.row(0) + w.enc_pos.row(0);
    else x.row(row) = prompt.tokens.row(pos) * w.patch_w + w.patch_b.row(0) + w.enc_pos.row(pos);
  }
  std::vector<detail::BlockCache> enc_cache(static_cast<std::size_t>(c.enc_layers));
  for (int l = 0; l < c.enc_layers; ++l)
    x = detail::block_forward(c, w.enc[static_cast<std::size_t>(l)], x, nullptr, &enc_cache[static_cast<std::size_t>(l)]);
  detail::NormCache enc_norm;
  const Mat e = detail::norm_forward(x, w.enc_norm_g, w.enc_norm_b, c.ln_eps, c.linear_only, &enc_norm);
  Mat y(n_dec, d);
  for (int p = 0; p < n_dec; ++p) {
    const int r = enc_row_of[static_cast<std::size_t>(p)];
    if (r >= 0) y.row(p) = e.row(r) * w.dec_w + w.dec_b.row(0) + w.dec_pos.row(p);
    else y.row(p) = w.mask_token.row(0) + w.dec_pos.row(p);
  }
  std::vector<detail::BlockCache> dec_cache(static_cast<std::size_t>(c.dec_layers));
  for (int l = 0; l < c.dec_layers; ++l)
    y = detail::block_forward(c, w.dec[static_cast<std::size_t>(l)], y, nullptr, &dec_cache[static_cast<std::size_t>(l)]);
  detail::NormCache dec_norm;
  const Mat z = detail::norm_forward(y, w.dec_norm_g, w.dec_norm_b, c.ln_eps, c.linear_only, &dec_norm);
  const int br = layout.first(Role::BR), q = layout.q();
  const Mat zbr = z.middleRows(br, q);
  const Mat pred = (zbr * w.out_w).rowwise() + w.out_b.row(0);
  const Mat diff = pred - target;
  const double count = static_cast<double>(diff.size());
  const double loss = diff.squaredNorm() / count;
  if (grad == nullptr) return loss;

  Weights& g = *grad;
  const Mat dpred = diff * (2.0 / count);
  g.out_w.noalias() += zbr.transpose() * dpred;
  g.out_b.row(0) += dpred.colwise().sum();
  Mat dz = Mat::Zero(n_dec, d);
  dz.middleRows(br, q) = dpred * w.out_w.transpose();
  Mat dy = detail::norm_backward(dz, w.dec_norm_g, dec_norm, c.linear_only, g.dec_norm_g, g.dec_norm_b);
  for (int l = c.dec_layers - 1; l >= 0; --l)
    dy = detail::block_backward(c, w.dec[static_cast<std::size_t>(l)], dec_cache[static_cast<std::size_t>(l)], dy,
                                g.dec[static_cast<std::size_t>(l)]);
  Mat de = Mat::Zero(e.rows(), d);
  for (int p = 0; p < n_dec; ++p) {
    g.dec_pos.row(p) += dy.row(p);
    const int r = enc_row_of[static_cast<std::size_t>(p)];
    if (r >= 0) {
      g.dec_w.noalias() += e.row(r).transpose() * dy.row(p);
      g.dec_b.row(0) += dy.row(p);
      de.row(r) = dy.row(p) * w.dec_w.transpose();
    } else {
      g.mask_token.row(0) += dy.row(p);
    }
  }
  Mat dx = detail::norm_backward(de, w.enc_norm_g, enc_norm, c.linear_only, g.enc_norm_g, g.enc_norm_b);
  for (int l = c.enc_layers - 1; l >= 0; --l)
    dx = detail::block_backward(c, w.enc[static_cast<std::size_t>(l)], enc_cache[static_cast<std::size_t>(l)], dx,
                                g.enc[static_cast<std::size_t>(l)]);
  for (std::size_t r = 0; r < visible.size(); ++r) {
    const int pos = visible[r];
    const auto row = static_cast<Eigen::Index>(r);
    g.enc_pos.row(pos) += dx.row(row);
    if (pos == 0) {
      g.cls.row(0) += dx.row(row);
    } else {
      g.patch_w.noalias() += prompt.tokens.row(pos).transpose() * dx.row(row);
      g.patch_b.row(0) += dx.row(row);
    }
  }
  return loss;
}

struct TrainHyper {
  double lr = 2e-3;
  int steps = 2000;
  int batch = 16;
  std::uint64_t seed = 1;
  double clip = 1.0;         // global gradient-norm clip, <= 0 disables
  int warmup = 100;
  bool cosine = true;
};

inline void to_json(nlohmann::json& j, const TrainHyper& h) {
  j = {{"lr", h.lr}, {"steps", h.steps}, {"batch", h.batch}, {"seed", h.seed}, {"clip", h.clip},
       {"warmup", h.warmup}, {"cosine", h.cosine}};
}
inline void from_json(const nlohmann::json& j, TrainHyper& h) {
  h = TrainHyper{};
  h.lr = j.value("lr", h.lr);
  h.steps = j.value("steps", h.steps);
  h.batch = j.value("batch", h.batch);
  h.seed = j.value("seed", h.seed);
  h.clip = j.value("clip", h.clip);
  h.warmup = j.value("warmup", h.warmup);
  h.cosine = j.value("cosine", h.cosine);
}

struct TrainResult {
  Weights weights;
  std::vector<double> losses;
};

/// Mixed-task training on one-shot prompts. Each example pairs the
/// demonstration of one training triplet with the query of another triplet
/// of the same task, so the model cannot memorize fixed pairs.
inline TrainResult train(Weights w, const std::vector<const TripletSample*>& pool, const TrainHyper& hyper,
                         const std::function<void(int, double)>& on_step = {}) {
  if (pool.empty()) throw std::invalid_argument("train: empty training pool");
  std::map<TaskId, std::vector<const TripletSample*>> by_task;
  for (const auto* s : pool) by_task[s->task].push_back(s);
  const Rng root = Rng(hyper.seed).child("train");
  AdamState adam;
  adam.lr = hyper.lr;
  const auto layout = w.cfg.layout();
  TrainResult result;
  std::vector<double> flat = w.flatten();
  for (int step = 0; step < hyper.steps; ++step) {
    Rng rng = root.child(static_cast<std::uint64_t>(step));
    Weights grad = w.zeros_like();
    double loss = 0;
    for (int b = 0; b < hyper.batch; ++b) {
      const TripletSample* demo = pool[rng.below(pool.size())];
      const auto& same = by_task[demo->task];
      const TripletSample* query = same[rng.below(same.size())];
      const PromptGrid prompt = assemble_prompt_parts(&demo->x_s, &demo->y_s, query->x_q, PromptMode::one_shot,
                                                      w.cfg.patch_side);
      loss += loss_and_grad(w, prompt, target_tokens(query->y_q, layout), &grad);
    }
    loss /= hyper.batch;
    if (!std::isfinite(loss)) throw std::runtime_error("training diverged at step " + std::to_string(step));
    std::vector<double> g = grad.flatten();
    double norm = 0;
    for (double& v : g) {
      v /= hyper.batch;
      norm += v * v;
    }
    norm = std::sqrt(norm);
    if (hyper.clip > 0 && norm > hyper.clip)
      for (double& v : g) v *= hyper.clip / norm;
    double lr = hyper.lr;
    if (hyper.warmup > 0 && step < hyper.warmup) lr *= static_cast<double>(step + 1) / hyper.warmup;
    else if (hyper.cosine && hyper.steps > hyper.warmup)
      lr *= 0.1 + 0.9 * 0.5 * (1 + std::cos(M_PI * (step - hyper.warmup) / (hyper.steps - hyper.warmup)));
    adam.lr = lr;
    adam_step(flat, g, adam);
    w.unflatten(flat);
    result.losses.push_back(loss);
    if (on_step) on_step(step, loss);
  }
  result.weights = std::move(w);
  return result;
}

struct GradCheckReport {
  double max_rel_error = 0;
  std::size_t checked = 0;
  std::string worst;
};

/// Central finite differences on `count` parameters drawn uniformly without
/// replacement. Relative error is |a - n| / max(|a|, |n|, floor); the floor
/// keeps round-off on near-zero gradients from dominating.
inline GradCheckReport gradient_check(const Weights& w, const PromptGrid& prompt, const Mat& target, double eps,
                                      std::size_t count, const Rng& rng, double floor = 1e-6) {
  if (eps < 1e-7 || eps > 1e-3) throw std::invalid_argument("gradient_check: eps out of range");
  Weights grad = w.zeros_like();
  loss_and_grad(w, prompt, target, &grad);
  const std::vector<double> analytic = grad.flatten();
  std::vector<double> flat = w.flatten();
  Rng pick = rng;
  count = std::min(count, flat.size());
  std::vector<std::size_t> idx(flat.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  for (std::size_t i = 0; i < count; ++i) std::swap(idx[i], idx[i + pick.below(idx.size() - i)]);
  std::vector<std::string> names;
  std::vector<std::size_t> offsets;
  {
    std::size_t off = 0;
    w.visit([&](const std::string& n, const Mat& m) {
      names.push_back(n);
      offsets.push_back(off);
      off += static_cast<std::size_t>(m.size());
    });
  }
  Weights probe = w;
  GradCheckReport rep;
  for (std::size_t t = 0; t < count; ++t) {
    const std::size_t i = idx[t];
    const double orig = flat[i];
    flat[i] = orig + eps;
    probe.unflatten(flat);
    const double lp = loss_and_grad(probe, prompt, target, nullptr);
    flat[i] = orig - eps;
    probe.unflatten(flat);
    const double lm = loss_and_grad(probe, prompt, target, nullptr);
    flat[i] = orig;
    const double numeric = (lp - lm) / (2 * eps);
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), floor});
    const double rel = std::abs(analytic[i] - numeric) / denom;
    if (rel > rep.max_rel_error) {
      rep.max_rel_error = rel;
      const auto it = std::upper_bound(offsets.begin(), offsets.end(), i);
      const auto k = static_cast<std::size_t>(std::distance(offsets.begin(), it)) - 1;
      rep.worst = names[k] + "[" + std::to_string(i - offsets[k]) + "]";
    }
  }
  rep.checked = count;
  return rep;
}

// ---------------------------------------------------------------------------
// FLOP accounting

struct FlopConfig {
  int enc_layers, enc_d, enc_mlp;
  int dec_layers, dec_d, dec_mlp;
  int q;

  static FlopConfig from(const ModelConfig& c) {
    return {c.enc_layers, c.d_model, c.mlp_hidden, c.dec_layers, c.d_model, c.mlp_hidden, c.q()};
  }
};

/// Per layer: 4 n d^2 (projections) + 2 n^2 d (scores and mixing) + 2 n d h (MLP).
inline double layer_flops(double n, double d, double h) { return 4 * n * d * d + 2 * n * n * d + 2 * n * d * h; }

inline double flop_estimate(const FlopConfig& c, PromptMode mode) {
  const double n_enc = mode == PromptMode::one_shot ? 3.0 * c.q + 1 : c.q + 1.0;
  const double n_dec = 4.0 * c.q + 1;
  return c.enc_layers * layer_flops(n_enc, c.enc_d, c.enc_mlp) + c.dec_layers * layer_flops(n_dec, c.dec_d, c.dec_mlp);
}

inline double flop_estimate(const ModelConfig& c, PromptMode mode) { return flop_estimate(FlopConfig::from(c), mode); }

// ---------------------------------------------------------------------------
// Checkpoint files

inline constexpr std::uint32_t kWeightsVersion = 1;

inline void save_weights(const Weights& w, const std::filesystem::path& path) {
  auto os = open_out(path);
  bin::put_magic(os, "TVWT");
  bin::put<std::uint32_t>(os, kWeightsVersion);
  const ModelConfig& c = w.cfg;
  for (int v : {c.d_model, c.enc_layers, c.dec_layers, c.heads, c.mlp_hidden, c.patch_side, c.image_side,
                static_cast<int>(c.linear_only)})
    bin::put<std::uint32_t>(os, static_cast<std::uint32_t>(v));
  bin::put<double>(os, c.ln_eps);
  std::uint32_t count = 0;
  w.visit([&](const std::string&, const Mat&) { ++count; });
  bin::put<std::uint32_t>(os, count);
  w.visit([&](const std::string& name, const Mat& m) {
    bin::put_string(os, name);
    bin::put<std::uint32_t>(os, 2);
    bin::put<std::uint64_t>(os, static_cast<std::uint64_t>(m.rows()));
    bin::put<std::uint64_t>(os, static_cast<std::uint64_t>(m.cols()));
    for (Eigen::Index i = 0; i < m.size(); ++i) bin::put<double>(os, m.data()[i]);
  });
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

inline Weights load_weights(const std::filesystem::path& path) {
  auto is = open_in(path);
  bin::expect_magic(is, "TVWT");
  if (bin::get<std::uint32_t>(is) != kWeightsVersion) throw std::runtime_error("unsupported TVWT version");
  ModelConfig c;
  c.d_model = static_cast<int>(bin::get<std::uint32_t>(is));
  c.enc_layers = static_cast<int>(bin::get<std::uint32_t>(is));
  c.dec_layers = static_cast<int>(bin::get<std::uint32_t>(is));
  c.heads = static_cast<int>(bin::get<std::uint32_t>(is));
  c.mlp_hidden = static_cast<int>(bin::get<std::uint32_t>(is));
  c.patch_side = static_cast<int>(bin::get<std::uint32_t>(is));
  c.image_side = static_cast<int>(bin::get<std::uint32_t>(is));
  c.linear_only = bin::get<std::uint32_t>(is) != 0;
  c.ln_eps = bin::get<double>(is);
  Weights w = init_weights(c, Rng(0));
  const auto count = bin::get<std::uint32_t>(is);
  std::map<std::string, Mat> tensors;
  for (std::uint32_t t = 0; t < count; ++t) {
    std::string name = bin::get_string(is);
    if (bin::get<std::uint32_t>(is) != 2) throw std::runtime_error("TVWT: expected rank-2 tensor " + name);
    const auto rows = bin::get<std::uint64_t>(is);
    const auto cols = bin::get<std::uint64_t>(is);
    Mat m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = bin::get<double>(is);
    tensors.emplace(std::move(name), std::move(m));
  }
  w.visit([&](const std::string& name, Mat& m) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw std::runtime_error("TVWT: missing tensor " + name);
    if (it->second.rows() != m.rows() || it->second.cols() != m.cols())
      throw std::runtime_error("TVWT: shape mismatch for " + name);
    m = it->second;
  });
  return w;
}

}  // namespace tvlab
