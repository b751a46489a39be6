#pragma once

// Synthetic image-to-image tasks on small square grids, the 2x2 prompt
// layout, and the task metrics.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "tvlab/io.hpp"
#include "tvlab/numerics.hpp"

namespace tvlab {

struct GridImage {
  int channels = 3;
  int side = 0;
  std::vector<double> pixels;

  GridImage() = default;
  GridImage(int channels_, int side_, double fill = 0.0)
      : channels(channels_), side(side_),
        pixels(static_cast<std::size_t>(channels_ * side_ * side_), fill) {
    if (channels_ <= 0 || side_ <= 0) throw std::invalid_argument("GridImage: non-positive dims");
  }

  [[nodiscard]] std::size_t index(int c, int r, int col) const {
    return (static_cast<std::size_t>(c) * side + r) * side + col;
  }
  double& at(int c, int r, int col) { return pixels[index(c, r, col)]; }
  [[nodiscard]] double at(int c, int r, int col) const { return pixels[index(c, r, col)]; }
  [[nodiscard]] bool same_dims(const GridImage& o) const {
    return channels == o.channels && side == o.side;
  }
  bool operator==(const GridImage&) const = default;
};

enum class TaskId : std::uint8_t { segmentation = 0, lowlight = 1, colorize = 2, inpaint = 3, identity = 4 };

inline constexpr std::array<TaskId, 5> kAllTasks = {TaskId::segmentation, TaskId::lowlight,
                                                    TaskId::colorize, TaskId::inpaint,
                                                    TaskId::identity};

inline std::string_view to_string(TaskId t) {
  switch (t) {
    case TaskId::segmentation: return "segmentation";
    case TaskId::lowlight: return "lowlight";
    case TaskId::colorize: return "colorize";
    case TaskId::inpaint: return "inpaint";
    case TaskId::identity: return "identity";
  }
  throw std::invalid_argument("unknown task id");
}

inline TaskId parse_task(std::string_view s) {
  for (TaskId t : kAllTasks)
    if (to_string(t) == s) return t;
  throw std::invalid_argument("unknown task: " + std::string(s));
}

inline TaskId task_from_index(unsigned v) {
  if (v > 4) throw std::invalid_argument("task id out of range");
  return static_cast<TaskId>(v);
}

/// Higher is better only for segmentation (mIoU); the rest report MSE.
inline bool higher_is_better(TaskId t) { return t == TaskId::segmentation; }

struct TripletSample {
  TaskId task = TaskId::identity;
  GridImage x_s, y_s, x_q, y_q;
  bool operator==(const TripletSample&) const = default;
};

namespace detail {
inline double to_f32(double v) { return static_cast<double>(static_cast<float>(v)); }
inline void quantize(GridImage& g) {
  for (double& p : g.pixels) p = to_f32(std::clamp(p, 0.0, 1.0));
}
}  // namespace detail

/// Background plus a handful of additive axis-aligned colored boxes, clamped.
inline GridImage random_base(int side, Rng rng) {
  GridImage img(3, side);
  for (int c = 0; c < 3; ++c) {
    const double bg = rng.uniform(0.0, 0.35);
    for (int r = 0; r < side; ++r)
      for (int x = 0; x < side; ++x) img.at(c, r, x) = bg;
  }
  const int boxes = 2 + static_cast<int>(rng.below(3));
  const int min_extent = std::max(2, side / 4);
  for (int b = 0; b < boxes; ++b) {
    const int h = min_extent + static_cast<int>(rng.below(static_cast<std::size_t>(side / 2)));
    const int w = min_extent + static_cast<int>(rng.below(static_cast<std::size_t>(side / 2)));
    const int r0 = static_cast<int>(rng.below(static_cast<std::size_t>(side - std::min(h, side) + 1)));
    const int c0 = static_cast<int>(rng.below(static_cast<std::size_t>(side - std::min(w, side) + 1)));
    const double amp = rng.uniform(0.3, 0.8);
    std::array<double, 3> color{rng.uniform(), rng.uniform(), rng.uniform()};
    for (int c = 0; c < 3; ++c)
      for (int r = r0; r < std::min(side, r0 + h); ++r)
        for (int x = c0; x < std::min(side, c0 + w); ++x) img.at(c, r, x) += amp * color[static_cast<std::size_t>(c)];
  }
  detail::quantize(img);
  return img;
}

inline int inpaint_square_side(int side) {
  return static_cast<int>(std::floor(std::sqrt(static_cast<double>(side * side) / 8.0)));
}

inline GridImage channel_mean(const GridImage& img) {
  GridImage out(img.channels, img.side);
  for (int r = 0; r < img.side; ++r)
    for (int x = 0; x < img.side; ++x) {
      double m = 0;
      for (int c = 0; c < img.channels; ++c) m += img.at(c, r, x);
      m /= img.channels;
      for (int c = 0; c < img.channels; ++c) out.at(c, r, x) = m;
    }
  detail::quantize(out);
  return out;
}

inline GridImage foreground_mask(const GridImage& img) {
  GridImage mean = channel_mean(img);
  for (double& p : mean.pixels) p = p > 0.5 ? 1.0 : 0.0;
  return mean;
}

/// Zeroes a uniformly placed square of side floor(sqrt(side^2 / 8)).
inline GridImage mask_square(const GridImage& img, Rng& rng) {
  GridImage out = img;
  const int s = inpaint_square_side(img.side);
  const int r0 = static_cast<int>(rng.below(static_cast<std::size_t>(img.side - s + 1)));
  const int c0 = static_cast<int>(rng.below(static_cast<std::size_t>(img.side - s + 1)));
  for (int c = 0; c < img.channels; ++c)
    for (int r = r0; r < r0 + s; ++r)
      for (int x = c0; x < c0 + s; ++x) out.at(c, r, x) = 0.0;
  return out;
}

struct TaskPair {
  GridImage x, y;
};

/// Applies the task transform to one base image.
inline TaskPair apply_task(TaskId task, const GridImage& base, Rng& rng) {
  switch (task) {
    case TaskId::segmentation: return {base, foreground_mask(base)};
    case TaskId::lowlight: {
      GridImage x = base;
      for (double& p : x.pixels) p *= 0.5;
      detail::quantize(x);
      return {x, base};
    }
    case TaskId::colorize: return {channel_mean(base), base};
    case TaskId::inpaint: return {mask_square(base, rng), base};
    case TaskId::identity: return {base, base};
  }
  throw std::invalid_argument("unknown task id");
}

inline TripletSample gen_sample(TaskId task, int side, const Rng& rng) {
  if (side < 4) throw std::invalid_argument("gen_sample: side must be >= 4");
  TripletSample s;
  s.task = task;
  Rng support_rng = rng.child("support");
  Rng query_rng = rng.child("query");
  auto support = apply_task(task, random_base(side, rng.child("base_s")), support_rng);
  auto query = apply_task(task, random_base(side, rng.child("base_q")), query_rng);
  s.x_s = std::move(support.x);
  s.y_s = std::move(support.y);
  s.x_q = std::move(query.x);
  s.y_q = std::move(query.y);
  return s;
}

// ---------------------------------------------------------------------------
// Prompt layout

enum class PromptMode : std::uint8_t { one_shot, query_only };
enum class Role : std::uint8_t { CLS, TL, TR, BL, BR };

inline std::string_view to_string(Role r) {
  switch (r) {
    case Role::CLS: return "CLS";
    case Role::TL: return "TL";
    case Role::TR: return "TR";
    case Role::BL: return "BL";
    case Role::BR: return "BR";
  }
  return "?";
}

/// Token positions in the full (decoder) frame: 0 = CLS, then q tokens per
/// quadrant in the order TL, TR, BL, BR, row-major within a quadrant.
struct GridLayout {
  int image_side = 16;
  int patch_side = 4;

  [[nodiscard]] int per_side() const { return image_side / patch_side; }
  [[nodiscard]] int q() const { return per_side() * per_side(); }
  [[nodiscard]] int positions() const { return 4 * q() + 1; }
  [[nodiscard]] int patch_dim() const { return 3 * patch_side * patch_side; }
  [[nodiscard]] int first(Role r) const {
    return r == Role::CLS ? 0 : 1 + (static_cast<int>(r) - 1) * q();
  }
  [[nodiscard]] Role role(int pos) const {
    if (pos == 0) return Role::CLS;
    return static_cast<Role>(1 + (pos - 1) / q());
  }
  [[nodiscard]] int within(int pos) const { return pos == 0 ? 0 : (pos - 1) % q(); }

  void validate() const {
    if (patch_side <= 0 || image_side <= 0 || image_side % patch_side != 0)
      throw std::invalid_argument("image side must be divisible by patch side");
  }

  /// Positions the encoder sees.
  [[nodiscard]] std::vector<int> visible(PromptMode mode) const {
    std::vector<int> out{0};
    const auto add = [&](Role r) {
      for (int i = 0; i < q(); ++i) out.push_back(first(r) + i);
    };
    if (mode == PromptMode::one_shot) {
      add(Role::TL);
      add(Role::TR);
    }
    add(Role::BL);
    return out;
  }
};

struct PromptGrid {
  PromptMode mode = PromptMode::one_shot;
  GridLayout layout;
  Mat tokens;                  // positions x patch_dim, rows of absent quadrants are zero
  std::vector<Role> roles;     // per position
  std::vector<bool> mask_flags;  // true where the decoder receives the mask token
  std::vector<int> visible;    // encoder frame, ascending positions
};

inline RowVec patch_row(const GridImage& img, int patch_side, int pr, int pc) {
  RowVec row(3 * patch_side * patch_side);
  int k = 0;
  for (int c = 0; c < 3; ++c)
    for (int r = 0; r < patch_side; ++r)
      for (int x = 0; x < patch_side; ++x) row(k++) = img.at(c, pr * patch_side + r, pc * patch_side + x);
  return row;
}

inline void write_quadrant(Mat& tokens, const GridLayout& layout, Role role, const GridImage& img) {
  if (img.side != layout.image_side || img.channels != 3)
    throw std::invalid_argument("assemble_prompt: image dims do not match layout");
  const int g = layout.per_side();
  for (int pr = 0; pr < g; ++pr)
    for (int pc = 0; pc < g; ++pc)
      tokens.row(layout.first(role) + pr * g + pc) = patch_row(img, layout.patch_side, pr, pc);
}

inline PromptGrid assemble_prompt_parts(const GridImage* x_s, const GridImage* y_s, const GridImage& x_q,
                                        PromptMode mode, int patch_side) {
  if (patch_side <= 0 || x_q.side % patch_side != 0)
    throw std::invalid_argument("assemble_prompt: side not divisible by patch side");
  PromptGrid grid;
  grid.mode = mode;
  grid.layout = GridLayout{x_q.side, patch_side};
  const int n = grid.layout.positions();
  grid.tokens = Mat::Zero(n, grid.layout.patch_dim());
  if (mode == PromptMode::one_shot) {
    if (x_s == nullptr || y_s == nullptr) throw std::invalid_argument("one_shot prompt needs a demonstration");
    write_quadrant(grid.tokens, grid.layout, Role::TL, *x_s);
    write_quadrant(grid.tokens, grid.layout, Role::TR, *y_s);
  }
  write_quadrant(grid.tokens, grid.layout, Role::BL, x_q);
  grid.roles.resize(static_cast<std::size_t>(n));
  for (int p = 0; p < n; ++p) grid.roles[static_cast<std::size_t>(p)] = grid.layout.role(p);
  grid.visible = grid.layout.visible(mode);
  grid.mask_flags.assign(static_cast<std::size_t>(n), true);
  for (int p : grid.visible) grid.mask_flags[static_cast<std::size_t>(p)] = false;
  return grid;
}

inline PromptGrid assemble_prompt(const TripletSample& s, PromptMode mode, int patch_side) {
  return assemble_prompt_parts(&s.x_s, &s.y_s, s.x_q, mode, patch_side);
}

/// Rebuilds an image from q consecutive token rows (one quadrant).
inline GridImage detokenize(const Mat& rows, const GridLayout& layout, bool clamp = false) {
  const int g = layout.per_side();
  const int p = layout.patch_side;
  if (rows.rows() != layout.q() || rows.cols() != layout.patch_dim())
    throw std::invalid_argument("detokenize: shape mismatch");
  GridImage img(3, layout.image_side);
  for (int pr = 0; pr < g; ++pr)
    for (int pc = 0; pc < g; ++pc) {
      int k = 0;
      for (int c = 0; c < 3; ++c)
        for (int r = 0; r < p; ++r)
          for (int x = 0; x < p; ++x) {
            double v = rows(pr * g + pc, k++);
            if (clamp) v = std::clamp(v, 0.0, 1.0);
            img.at(c, pr * p + r, pc * p + x) = v;
          }
    }
  return img;
}

inline GridImage detokenize_quadrant(const PromptGrid& grid, Role role) {
  return detokenize(grid.tokens.middleRows(grid.layout.first(role), grid.layout.q()), grid.layout);
}

// ---------------------------------------------------------------------------
// Metrics

inline double loss_mse(const GridImage& pred, const GridImage& gt) {
  if (!pred.same_dims(gt)) throw std::invalid_argument("loss_mse: dimension mismatch");
  double acc = 0;
  for (std::size_t i = 0; i < pred.pixels.size(); ++i) {
    const double d = pred.pixels[i] - gt.pixels[i];
    acc += d * d;
  }
  return acc / static_cast<double>(pred.pixels.size());
}

/// Two-class (foreground, background) mean IoU. Prediction is binarized on
/// its channel mean at 0.5; gt is read the same way.
inline double metric_miou(const GridImage& pred, const GridImage& gt) {
  if (!pred.same_dims(gt)) throw std::invalid_argument("metric_miou: dimension mismatch");
  std::array<long, 2> inter{0, 0}, uni{0, 0}, pred_count{0, 0}, gt_count{0, 0};
  for (int r = 0; r < pred.side; ++r)
    for (int x = 0; x < pred.side; ++x) {
      double pm = 0, gm = 0;
      for (int c = 0; c < pred.channels; ++c) {
        pm += pred.at(c, r, x);
        gm += gt.at(c, r, x);
      }
      const int p = pm / pred.channels > 0.5 ? 1 : 0;
      const int g = gm / gt.channels > 0.5 ? 1 : 0;
      for (int cls = 0; cls < 2; ++cls) {
        const bool in_p = p == cls, in_g = g == cls;
        pred_count[static_cast<std::size_t>(cls)] += in_p;
        gt_count[static_cast<std::size_t>(cls)] += in_g;
        inter[static_cast<std::size_t>(cls)] += in_p && in_g;
        uni[static_cast<std::size_t>(cls)] += in_p || in_g;
      }
    }
  double total = 0;
  for (std::size_t cls = 0; cls < 2; ++cls) {
    if (pred_count[cls] == 0 && gt_count[cls] == 0) total += 1.0;
    else total += static_cast<double>(inter[cls]) / static_cast<double>(uni[cls]);
  }
  return total / 2.0;
}

/// Loss minimized by the selection algorithms: 1 - mIoU for segmentation,
/// MSE otherwise.
inline double task_loss(TaskId task, const GridImage& pred, const GridImage& gt) {
  return task == TaskId::segmentation ? 1.0 - metric_miou(pred, gt) : loss_mse(pred, gt);
}

/// Reported score: mIoU for segmentation, MSE otherwise.
inline double task_metric(TaskId task, const GridImage& pred, const GridImage& gt) {
  return task == TaskId::segmentation ? metric_miou(pred, gt) : loss_mse(pred, gt);
}

// ---------------------------------------------------------------------------
// Datasets

struct SplitSizes {
  int train = 200;
  int val = 50;
  int test = 100;
};

struct DatasetSplit {
  int split_id = 0;
  int side = 16;
  std::vector<TripletSample> train, val, test;
  bool operator==(const DatasetSplit&) const = default;

  [[nodiscard]] std::vector<const TripletSample*> select(const std::vector<TripletSample>& part,
                                                         TaskId task) const {
    std::vector<const TripletSample*> out;
    for (const auto& s : part)
      if (s.task == task) out.push_back(&s);
    return out;
  }
};

/// Every sample comes from its own labeled stream (split, part, task, index),
/// so parts never share samples and generation order is irrelevant.
inline DatasetSplit gen_split(int split_id, const std::vector<TaskId>& tasks, int side,
                              const SplitSizes& sizes, const Rng& root) {
  DatasetSplit split;
  split.split_id = split_id;
  split.side = side;
  const Rng srng = root.child("split").child(static_cast<std::uint64_t>(split_id));
  const auto fill = [&](std::vector<TripletSample>& part, std::string_view name, int count) {
    for (TaskId t : tasks)
      for (int i = 0; i < count; ++i)
        part.push_back(gen_sample(t, side, srng.child(name).child(static_cast<std::uint64_t>(t),
                                                                  static_cast<std::uint64_t>(i))));
  };
  fill(split.train, "train", sizes.train);
  fill(split.val, "val", sizes.val);
  fill(split.test, "test", sizes.test);
  return split;
}

inline constexpr std::uint32_t kDatasetVersion = 1;

inline void save_split(const DatasetSplit& split, const std::filesystem::path& path) {
  auto os = open_out(path);
  bin::put_magic(os, "TVDS");
  bin::put<std::uint32_t>(os, kDatasetVersion);
  bin::put<std::uint32_t>(os, static_cast<std::uint32_t>(split.split_id));
  bin::put<std::uint32_t>(os, static_cast<std::uint32_t>(split.train.size()));
  bin::put<std::uint32_t>(os, static_cast<std::uint32_t>(split.val.size()));
  bin::put<std::uint32_t>(os, static_cast<std::uint32_t>(split.test.size()));
  bin::put<std::uint32_t>(os, 3);
  bin::put<std::uint32_t>(os, static_cast<std::uint32_t>(split.side));
  for (const auto* part : {&split.train, &split.val, &split.test})
    for (const auto& s : *part) bin::put<std::uint8_t>(os, static_cast<std::uint8_t>(s.task));
  for (const auto* part : {&split.train, &split.val, &split.test})
    for (const auto& s : *part)
      for (const GridImage* img : {&s.x_s, &s.y_s, &s.x_q, &s.y_q})
        for (double p : img->pixels) bin::put<float>(os, static_cast<float>(p));
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

inline DatasetSplit load_split(const std::filesystem::path& path) {
  auto is = open_in(path);
  bin::expect_magic(is, "TVDS");
  if (bin::get<std::uint32_t>(is) != kDatasetVersion) throw std::runtime_error("unsupported TVDS version");
  DatasetSplit split;
  split.split_id = static_cast<int>(bin::get<std::uint32_t>(is));
  const auto n_train = bin::get<std::uint32_t>(is);
  const auto n_val = bin::get<std::uint32_t>(is);
  const auto n_test = bin::get<std::uint32_t>(is);
  const auto channels = bin::get<std::uint32_t>(is);
  split.side = static_cast<int>(bin::get<std::uint32_t>(is));
  if (channels != 3) throw std::runtime_error("TVDS: expected 3 channels");
  split.train.resize(n_train);
  split.val.resize(n_val);
  split.test.resize(n_test);
  for (auto* part : {&split.train, &split.val, &split.test})
    for (auto& s : *part) s.task = task_from_index(bin::get<std::uint8_t>(is));
  for (auto* part : {&split.train, &split.val, &split.test})
    for (auto& s : *part)
      for (GridImage* img : {&s.x_s, &s.y_s, &s.x_q, &s.y_q}) {
        *img = GridImage(3, split.side);
        for (double& p : img->pixels) p = static_cast<double>(bin::get<float>(is));
      }
  return split;
}

/// Binary PPM (P6), values clamped to [0,1] and scaled to 8 bits.
inline void write_ppm(const std::filesystem::path& path, const std::vector<const GridImage*>& strip) {
  if (strip.empty()) throw std::invalid_argument("write_ppm: nothing to write");
  const int side = strip.front()->side;
  const int width = side * static_cast<int>(strip.size());
  auto os = open_out(path);
  os << "P6\n" << width << ' ' << side << "\n255\n";
  for (int r = 0; r < side; ++r)
    for (const GridImage* img : strip)
      for (int x = 0; x < side; ++x)
        for (int c = 0; c < 3; ++c) {
          const double v = std::clamp(img->at(std::min(c, img->channels - 1), r, x), 0.0, 1.0);
          os.put(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
        }
}

}  // namespace tvlab
