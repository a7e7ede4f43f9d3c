#pragma once

// Occupancy grid data model, ego-frame geometry and sequence alignment.
//
// Grid convention: row 0 is the far edge, row height-1 touches the sensor.
// The sensor sits at the center of the bottom edge. In continuous grid
// coordinates (u = column, v = row, cell (r, c) spans [c, c+1) x [r, r+1))
// an ego-frame point (x forward, y left, meters) maps to
//   u = width/2 - y/cell_size,   v = height - x/cell_size.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ogmpred/errors.hpp"

namespace ogmpred {

/// Wraps an angle into (-pi, pi].
inline double normalize_angle(double a) {
  a = std::remainder(a, 2.0 * std::numbers::pi);
  if (a <= -std::numbers::pi) a += 2.0 * std::numbers::pi;
  return a;
}

/// SE(2) pose of the ego vehicle in a world frame.
struct Pose2 {
  double x = 0.0;
  double y = 0.0;
  double heading = 0.0;

  static Pose2 make(double x, double y, double heading) { return {x, y, normalize_angle(heading)}; }

  [[nodiscard]] bool finite() const { return std::isfinite(x) && std::isfinite(y) && std::isfinite(heading); }

  friend bool operator==(const Pose2&, const Pose2&) = default;
};

struct Point2 {
  double x = 0.0;
  double y = 0.0;
};

/// Local (pose frame) point to world coordinates.
inline Point2 to_world(const Pose2& pose, Point2 p) {
  const double c = std::cos(pose.heading), s = std::sin(pose.heading);
  return {pose.x + c * p.x - s * p.y, pose.y + s * p.x + c * p.y};
}

/// World point to the local frame of `pose`.
inline Point2 to_local(const Pose2& pose, Point2 w) {
  const double c = std::cos(pose.heading), s = std::sin(pose.heading);
  const double dx = w.x - pose.x, dy = w.y - pose.y;
  return {c * dx + s * dy, -s * dx + c * dy};
}

/// `pose` expressed in the frame of `reference`. relative(p, p) is exactly zero.
inline Pose2 relative_pose(const Pose2& reference, const Pose2& pose) {
  const Point2 t = to_local(reference, {pose.x, pose.y});
  return {t.x, t.y, normalize_angle(pose.heading - reference.heading)};
}

class OgmFrame {
 public:
  OgmFrame() = default;

  OgmFrame(int height, int width, double cell_size, float fill = 0.0f)
      : height_(height), width_(width), cell_size_(cell_size) {
    check_geometry();
    values_.assign(static_cast<std::size_t>(height) * static_cast<std::size_t>(width), fill);
  }

  OgmFrame(int height, int width, double cell_size, std::vector<float> values)
      : height_(height), width_(width), cell_size_(cell_size), values_(std::move(values)) {
    check_geometry();
    if (values_.size() != static_cast<std::size_t>(height) * static_cast<std::size_t>(width))
      throw ShapeError("OgmFrame: value count does not match height*width");
  }

  [[nodiscard]] int height() const { return height_; }
  [[nodiscard]] int width() const { return width_; }
  [[nodiscard]] double cell_size() const { return cell_size_; }
  [[nodiscard]] std::size_t size() const { return values_.size(); }

  float& operator()(int r, int c) { return values_[index(r, c)]; }
  float operator()(int r, int c) const { return values_[index(r, c)]; }

  [[nodiscard]] std::span<float> values() { return values_; }
  [[nodiscard]] std::span<const float> values() const { return values_; }

  [[nodiscard]] bool same_geometry(const OgmFrame& o) const {
    return height_ == o.height_ && width_ == o.width_ && cell_size_ == o.cell_size_;
  }

  /// True when every value lies in [0, 1].
  [[nodiscard]] bool in_unit_range() const {
    return std::all_of(values_.begin(), values_.end(), [](float v) { return v >= 0.0f && v <= 1.0f; });
  }

  [[nodiscard]] bool is_binary() const {
    return std::all_of(values_.begin(), values_.end(), [](float v) { return v == 0.0f || v == 1.0f; });
  }

  friend bool operator==(const OgmFrame&, const OgmFrame&) = default;

 private:
  [[nodiscard]] std::size_t index(int r, int c) const {
    return static_cast<std::size_t>(r) * static_cast<std::size_t>(width_) + static_cast<std::size_t>(c);
  }

  void check_geometry() const {
    if (height_ < 1 || width_ < 1) throw ShapeError("OgmFrame: dimensions must be >= 1");
    if (!(cell_size_ > 0.0)) throw ShapeError("OgmFrame: cell_size must be > 0");
  }

  int height_ = 0;
  int width_ = 0;
  double cell_size_ = 0.0;
  std::vector<float> values_;
};

/// {0,1} mask; used for visibility and for object footprints.
class BinaryMask {
 public:
  BinaryMask() = default;
  BinaryMask(int height, int width, std::uint8_t fill = 0) : height_(height), width_(width) {
    if (height < 1 || width < 1) throw ShapeError("BinaryMask: dimensions must be >= 1");
    bits_.assign(static_cast<std::size_t>(height) * static_cast<std::size_t>(width), fill ? 1 : 0);
  }

  [[nodiscard]] int height() const { return height_; }
  [[nodiscard]] int width() const { return width_; }
  [[nodiscard]] std::size_t size() const { return bits_.size(); }

  std::uint8_t& operator()(int r, int c) { return bits_[static_cast<std::size_t>(r) * width_ + c]; }
  std::uint8_t operator()(int r, int c) const { return bits_[static_cast<std::size_t>(r) * width_ + c]; }

  [[nodiscard]] std::span<std::uint8_t> bits() { return bits_; }
  [[nodiscard]] std::span<const std::uint8_t> bits() const { return bits_; }

  [[nodiscard]] std::size_t count() const {
    return static_cast<std::size_t>(std::count(bits_.begin(), bits_.end(), std::uint8_t{1}));
  }

  friend bool operator==(const BinaryMask&, const BinaryMask&) = default;

 private:
  int height_ = 0;
  int width_ = 0;
  std::vector<std::uint8_t> bits_;
};

using VisibilityMask = BinaryMask;

struct OgmSequence {
  std::vector<OgmFrame> frames;
  std::vector<Pose2> poses;
  std::vector<VisibilityMask> visibility;
  std::optional<std::vector<BinaryMask>> object_masks;
  int tau_init = 1;
  /// Set by align_sequence: frames are expressed in the frame of the last
  /// observed pose and `poses` hold poses relative to it.
  bool aligned = false;

  [[nodiscard]] int length() const { return static_cast<int>(frames.size()); }
  [[nodiscard]] int height() const { return frames.empty() ? 0 : frames.front().height(); }
  [[nodiscard]] int width() const { return frames.empty() ? 0 : frames.front().width(); }
  [[nodiscard]] double cell_size() const { return frames.empty() ? 0.0 : frames.front().cell_size(); }
  /// 0-based index of the last observed frame (the common frame).
  [[nodiscard]] int common_index() const { return tau_init - 1; }

  /// Throws DataError on any broken invariant.
  void validate() const {
    const auto t = frames.size();
    if (t < 2) throw DataError("OgmSequence: need at least 2 frames");
    if (poses.size() != t || visibility.size() != t) throw DataError("OgmSequence: list lengths differ");
    if (object_masks && object_masks->size() != t) throw DataError("OgmSequence: object mask count differs");
    if (tau_init < 1 || tau_init >= static_cast<int>(t)) throw DataError("OgmSequence: require 1 <= tau_init < T");
    const auto& f0 = frames.front();
    for (const auto& f : frames) {
      if (!f.same_geometry(f0)) throw DataError("OgmSequence: frames differ in geometry");
      if (!f.in_unit_range()) throw DataError("OgmSequence: frame value outside [0,1]");
    }
    auto check_mask = [&](const BinaryMask& m) {
      if (m.height() != f0.height() || m.width() != f0.width()) throw DataError("OgmSequence: mask shape mismatch");
      for (auto b : m.bits())
        if (b > 1) throw DataError("OgmSequence: mask value not in {0,1}");
    };
    for (const auto& m : visibility) check_mask(m);
    if (object_masks)
      for (const auto& m : *object_masks) check_mask(m);
    for (const auto& p : poses)
      if (!p.finite()) throw DataError("OgmSequence: non-finite pose");
  }
};

enum class Interpolation { nearest, bilinear };

// ---------------------------------------------------------------------------
// Geometry helpers

struct GridPoint {
  double u = 0.0;  // column coordinate
  double v = 0.0;  // row coordinate
};

inline GridPoint ego_to_grid(Point2 p, int height, int width, double cell_size) {
  return {width / 2.0 - p.y / cell_size, height - p.x / cell_size};
}

inline Point2 grid_to_ego(GridPoint g, int height, int width, double cell_size) {
  return {(height - g.v) * cell_size, (width / 2.0 - g.u) * cell_size};
}

/// Ego-frame metric position of the center of cell (r, c).
inline Point2 cell_center(int r, int c, int height, int width, double cell_size) {
  return grid_to_ego({c + 0.5, r + 0.5}, height, width, cell_size);
}

namespace detail {

template <class Sample>
void for_each_source_point(int height, int width, double cell_size, const Pose2& from, const Pose2& to, Sample&& sample) {
  for (int r = 0; r < height; ++r) {
    for (int c = 0; c < width; ++c) {
      const Point2 ego_to = cell_center(r, c, height, width, cell_size);
      const Point2 world = to_world(to, ego_to);
      const Point2 ego_from = to_local(from, world);
      sample(r, c, ego_to_grid(ego_from, height, width, cell_size));
    }
  }
}

inline void check_poses(const Pose2& a, const Pose2& b) {
  if (!a.finite() || !b.finite()) throw InvalidPose("warp: non-finite pose component");
}

}  // namespace detail

/// Resamples `frame`, observed from `from_pose`, into the coordinate system of
/// `to_pose` by inverse mapping. Cells whose source lies outside the grid are 0.
inline OgmFrame warp_to_frame(const OgmFrame& frame, const Pose2& from_pose, const Pose2& to_pose,
                              Interpolation interpolation) {
  detail::check_poses(from_pose, to_pose);
  if (from_pose == to_pose) return frame;
  const int h = frame.height(), w = frame.width();
  OgmFrame out(h, w, frame.cell_size());
  detail::for_each_source_point(h, w, frame.cell_size(), from_pose, to_pose, [&](int r, int c, GridPoint g) {
    if (!(g.u >= 0.0 && g.u < w && g.v >= 0.0 && g.v < h)) return;
    if (interpolation == Interpolation::nearest) {
      out(r, c) = frame(static_cast<int>(std::floor(g.v)), static_cast<int>(std::floor(g.u)));
      return;
    }
    // Offsets within rounding noise of a cell center snap to it, so integer
    // shifts stay exact.
    auto snap = [](double s) {
      const double n = std::round(s);
      return std::abs(s - n) < 1e-9 ? n : s;
    };
    const double x = snap(g.u - 0.5), y = snap(g.v - 0.5);
    const int x0 = static_cast<int>(std::floor(x)), y0 = static_cast<int>(std::floor(y));
    const double fx = x - x0, fy = y - y0;
    auto at = [&](int rr, int cc) {
      return static_cast<double>(frame(std::clamp(rr, 0, h - 1), std::clamp(cc, 0, w - 1)));
    };
    const double top = (1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1);
    const double bottom = (1.0 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1);
    const double v = (1.0 - fy) * top + fy * bottom;
    out(r, c) = static_cast<float>(std::clamp(v, 0.0, 1.0));
  });
  return out;
}

/// Nearest-neighbour warp of a binary mask, re-binarized at 0.5.
inline BinaryMask warp_mask(const BinaryMask& mask, double cell_size, const Pose2& from_pose, const Pose2& to_pose) {
  detail::check_poses(from_pose, to_pose);
  if (from_pose == to_pose) return mask;
  const int h = mask.height(), w = mask.width();
  BinaryMask out(h, w);
  detail::for_each_source_point(h, w, cell_size, from_pose, to_pose, [&](int r, int c, GridPoint g) {
    if (!(g.u >= 0.0 && g.u < w && g.v >= 0.0 && g.v < h)) return;
    const double v = mask(static_cast<int>(std::floor(g.v)), static_cast<int>(std::floor(g.u)));
    out(r, c) = v >= 0.5 ? 1 : 0;
  });
  return out;
}

/// Transfers every frame and mask into the frame of the last observed pose
/// and replaces poses by poses relative to it. Aligning twice is a no-op.
inline OgmSequence align_sequence(const OgmSequence& seq) {
  seq.validate();
  if (seq.aligned) return seq;
  const Pose2 common = seq.poses[seq.common_index()];
  OgmSequence out;
  out.tau_init = seq.tau_init;
  out.aligned = true;
  const double cs = seq.cell_size();
  for (int k = 0; k < seq.length(); ++k) {
    const auto& pose = seq.poses[k];
    const auto& frame = seq.frames[k];
    const auto interp = frame.is_binary() ? Interpolation::nearest : Interpolation::bilinear;
    out.frames.push_back(warp_to_frame(frame, pose, common, interp));
    out.visibility.push_back(warp_mask(seq.visibility[k], cs, pose, common));
    out.poses.push_back(relative_pose(common, pose));
  }
  if (seq.object_masks) {
    out.object_masks.emplace();
    for (int k = 0; k < seq.length(); ++k)
      out.object_masks->push_back(warp_mask((*seq.object_masks)[k], cs, seq.poses[k], common));
  }
  return out;
}

/// How the model input is formed once observations stop.
enum class InputMode {
  blank_inputs,  // zero frame after the init-phase
  feedback,      // previous model output after the init-phase
};

/// Model input at 0-based step `step`: the observed frame while step < tau_init,
/// afterwards a blank frame or the supplied feedback frame.
inline OgmFrame assemble_inputs(const OgmSequence& seq, int step, InputMode mode,
                                const OgmFrame* feedback = nullptr) {
  if (step < 0 || step >= seq.length()) throw ContractError("assemble_inputs: step out of range");
  if (step < seq.tau_init) return seq.frames[step];
  if (mode == InputMode::blank_inputs) {
    const auto& f = seq.frames[step];
    return OgmFrame(f.height(), f.width(), f.cell_size());
  }
  if (feedback == nullptr) throw ContractError("assemble_inputs: feedback mode needs the previous output");
  if (!feedback->same_geometry(seq.frames[step])) throw ShapeError("assemble_inputs: feedback frame shape mismatch");
  return *feedback;
}

/// 1 where value >= threshold, else 0.
inline OgmFrame binarize(const OgmFrame& frame, double threshold = 0.5) {
  if (!(threshold > 0.0 && threshold < 1.0)) throw ContractError("binarize: threshold must lie in (0,1)");
  OgmFrame out(frame.height(), frame.width(), frame.cell_size());
  auto src = frame.values();
  auto dst = out.values();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = src[i] >= threshold ? 1.0f : 0.0f;
  return out;
}

}  // namespace ogmpred
