#pragma once

// Result tables (mean and population std over splits), heatmap grids and
// image strips.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "tvlab/activation_lab.hpp"
#include "tvlab/io.hpp"

namespace tvlab {

struct MeanStd {
  double mean = 0;
  double std = 0;
};

/// Population standard deviation (divides by N).
inline MeanStd mean_std(const std::vector<double>& xs) {
  if (xs.empty()) throw std::invalid_argument("mean_std: no values");
  MeanStd r;
  for (double x : xs) r.mean += x;
  r.mean /= static_cast<double>(xs.size());
  for (double x : xs) r.std += (x - r.mean) * (x - r.mean);
  r.std = std::sqrt(r.std / static_cast<double>(xs.size()));
  return r;
}

class ReportTable {
 public:
  explicit ReportTable(std::vector<TaskId> tasks, int n_splits = 4) : tasks_(std::move(tasks)), n_splits_(n_splits) {}

  void add(const std::string& method, TaskId task, int split, double score) {
    if (split < 0 || split >= n_splits_) throw std::invalid_argument("split index out of range");
    if (std::find(tasks_.begin(), tasks_.end(), task) == tasks_.end())
      throw std::invalid_argument("task not in report: " + std::string(to_string(task)));
    if (!rows_.count(method)) order_.push_back(method);
    auto& cell = rows_[method][task];
    cell.resize(static_cast<std::size_t>(n_splits_));
    cell[static_cast<std::size_t>(split)] = score;
  }

  [[nodiscard]] std::optional<MeanStd> cell(const std::string& method, TaskId task) const {
    const auto it = rows_.find(method);
    if (it == rows_.end()) return std::nullopt;
    const auto jt = it->second.find(task);
    if (jt == it->second.end()) return std::nullopt;
    std::vector<double> xs;
    for (const auto& v : jt->second) {
      if (!v) return std::nullopt;
      xs.push_back(*v);
    }
    return mean_std(xs);
  }

  [[nodiscard]] const std::vector<std::string>& methods() const { return order_; }

  [[nodiscard]] std::string markdown() const {
    std::ostringstream os;
    os << "| Method |";
    for (TaskId t : tasks_) os << ' ' << to_string(t) << (higher_is_better(t) ? " (mIoU ↑)" : " (MSE ↓)") << " |";
    os << "\n|---|";
    for (std::size_t i = 0; i < tasks_.size(); ++i) os << "---|";
    os << '\n';
    for (const auto& m : order_) {
      os << "| " << m << " |";
      for (TaskId t : tasks_) os << ' ' << render(m, t) << " |";
      os << '\n';
    }
    return os.str();
  }

  [[nodiscard]] std::string csv() const {
    std::ostringstream os;
    os << "method,task,metric,direction,mean,std";
    for (int s = 0; s < n_splits_; ++s) os << ",split" << s;
    os << '\n';
    for (const auto& m : order_)
      for (TaskId t : tasks_) {
        os << m << ',' << to_string(t) << ',' << (higher_is_better(t) ? "miou,higher" : "mse,lower");
        const auto c = cell(m, t);
        os << ',' << (c ? fmt6(c->mean) : "") << ',' << (c ? fmt6(c->std) : "");
        const auto splits = values(m, t);
        for (int s = 0; s < n_splits_; ++s) {
          const auto& v = splits[static_cast<std::size_t>(s)];
          os << ',' << (v ? fmt6(*v) : "");
        }
        os << '\n';
      }
    return os.str();
  }

 private:
  [[nodiscard]] std::vector<std::optional<double>> values(const std::string& m, TaskId t) const {
    std::vector<std::optional<double>> out(static_cast<std::size_t>(n_splits_));
    const auto it = rows_.find(m);
    if (it == rows_.end()) return out;
    const auto jt = it->second.find(t);
    if (jt == it->second.end()) return out;
    return jt->second;
  }

  [[nodiscard]] std::string render(const std::string& m, TaskId t) const {
    const auto vals = values(m, t);
    std::vector<int> missing;
    for (int s = 0; s < n_splits_; ++s)
      if (!vals[static_cast<std::size_t>(s)]) missing.push_back(s);
    if (static_cast<int>(missing.size()) == n_splits_) return "—";
    if (!missing.empty()) {
      std::string gap = "GAP(missing split";
      for (int s : missing) gap += " " + std::to_string(s);
      return gap + ")";
    }
    const auto c = *cell(m, t);
    return fmt_fixed(c.mean, 3) + " ± " + fmt_fixed(c.std, 3);
  }

  std::vector<TaskId> tasks_;
  int n_splits_;
  std::vector<std::string> order_;
  std::map<std::string, std::map<TaskId, std::vector<std::optional<double>>>> rows_;
};

// ---------------------------------------------------------------------------
// Heatmaps

/// Rows = global layers (encoder first), columns = heads.
inline Mat head_heatmap(const ModelConfig& cfg, const ScoreTable& t) {
  Mat m = Mat::Zero(cfg.total_layers(), cfg.heads);
  for (const auto& [k, v] : t.head) m(k.stage == Stage::encoder ? k.layer : cfg.enc_layers + k.layer, k.head) = v;
  return m;
}

/// Token scores of one head laid out on the 2x2 prompt grid (CLS excluded).
inline Mat token_heatmap(const ModelConfig& cfg, const ScoreTable& t, const HeadKey& h) {
  const auto layout = cfg.layout();
  const int g = layout.per_side();
  Mat m = Mat::Zero(2 * g, 2 * g);
  for (const auto& [s, v] : t.rho) {
    if (s.stage != h.stage || s.layer != h.layer || s.head != h.head || s.token == 0) continue;
    const Role r = layout.role(s.token);
    const int w = layout.within(s.token);
    const int qr = (r == Role::BL || r == Role::BR) ? 1 : 0;
    const int qc = (r == Role::TR || r == Role::BR) ? 1 : 0;
    m(qr * g + w / g, qc * g + w % g) = v;
  }
  return m;
}

inline std::string matrix_csv(const Mat& m) {
  std::ostringstream os;
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) os << (c ? "," : "") << fmt6(m(r, c));
    os << '\n';
  }
  return os.str();
}

/// Binary grayscale rendering, min -> 0 and max -> 255.
inline void write_pgm(const std::filesystem::path& path, const Mat& m) {
  auto os = open_out(path);
  os << "P5\n" << m.cols() << ' ' << m.rows() << "\n255\n";
  const double lo = m.size() ? m.minCoeff() : 0, hi = m.size() ? m.maxCoeff() : 0;
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      const double v = hi > lo ? (m(r, c) - lo) / (hi - lo) : 0.0;
      os.put(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255))));
    }
}

}  // namespace tvlab
