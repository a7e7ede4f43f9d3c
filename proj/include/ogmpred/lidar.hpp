#pragma once

// Bird's-eye-view rasterization of point clouds, field-of-view wedge and
// ray-cast visibility.

#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numbers>
#include <vector>

#include "ogmpred/errors.hpp"
#include "ogmpred/grid.hpp"

namespace ogmpred {

struct Point3 {
  double x = 0.0;  // forward
  double y = 0.0;  // left
  double z = 0.0;  // up
};

struct PointCloud {
  std::vector<Point3> points;
};

struct BevConfig {
  double cell_size = 0.20;
  int grid_y = 256;
  int grid_x = 256;
  double range_forward = 50.0;
  /// Height slab kept after (external) ground removal.
  double z_min = -1.5;
  double z_max = 2.5;
  double fov_half_angle = std::numbers::pi / 4.0;

  void validate() const {
    if (!(cell_size > 0.0)) throw ConfigError("BevConfig: cell_size must be > 0");
    if (grid_y < 1 || grid_x < 1) throw ConfigError("BevConfig: grid dims must be >= 1");
    if (!(z_min < z_max)) throw ConfigError("BevConfig: need z_min < z_max");
    if (!(fov_half_angle > 0.0 && fov_half_angle <= std::numbers::pi))
      throw ConfigError("BevConfig: fov_half_angle must lie in (0, pi]");
  }
};

/// Whether an ego-frame direction lies inside the symmetric forward wedge.
inline bool in_fov(double forward, double lateral, double half_angle) {
  return std::atan2(std::abs(lateral), forward) <= half_angle;
}

/// FOV test on the center of cell (r, c).
inline bool cell_in_fov(int r, int c, int height, int width, double cell_size, double half_angle) {
  const Point2 p = cell_center(r, c, height, width, cell_size);
  return in_fov(p.x, p.y, half_angle);
}

inline BinaryMask fov_mask(int height, int width, double cell_size, double half_angle) {
  BinaryMask m(height, width);
  for (int r = 0; r < height; ++r)
    for (int c = 0; c < width; ++c) m(r, c) = cell_in_fov(r, c, height, width, cell_size, half_angle) ? 1 : 0;
  return m;
}

/// Binary BEV frame: a cell is occupied iff an in-slab, in-FOV point falls in it.
/// Points beyond the grid or range are dropped.
inline OgmFrame rasterize(const PointCloud& cloud, const BevConfig& cfg) {
  cfg.validate();
  OgmFrame frame(cfg.grid_y, cfg.grid_x, cfg.cell_size);
  for (const auto& p : cloud.points) {
    if (!std::isfinite(p.x) || !std::isfinite(p.y) || !std::isfinite(p.z)) throw DataError("rasterize: non-finite point");
    if (p.z < cfg.z_min || p.z > cfg.z_max) continue;
    if (p.x > cfg.range_forward) continue;
    if (!in_fov(p.x, p.y, cfg.fov_half_angle)) continue;
    const GridPoint g = ego_to_grid({p.x, p.y}, cfg.grid_y, cfg.grid_x, cfg.cell_size);
    const double r = std::floor(g.v), c = std::floor(g.u);
    if (r < 0 || c < 0 || r >= cfg.grid_y || c >= cfg.grid_x) continue;
    frame(static_cast<int>(r), static_cast<int>(c)) = 1.0f;
  }
  return frame;
}

namespace detail {

inline std::int64_t floor_div(std::int64_t a, std::int64_t b) {
  std::int64_t q = a / b;
  if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
  return q;
}

// Exact grid traversal in doubled integer coordinates (cell boundaries at even
// values, cell centers at odd values). Calls visit(row, col) for every cell the
// segment from `o` to `p` touches before the cell containing `p`, in order.
// A point on a boundary belongs to the cell with the larger index; when the
// segment passes exactly through a corner that corner cell is visited too.
template <class Visit>
bool traverse_until(std::int64_t ox, std::int64_t oy, std::int64_t px, std::int64_t py, Visit&& visit) {
  const std::int64_t dx = px - ox, dy = py - oy;
  const std::int64_t adx = std::llabs(dx), ady = std::llabs(dy);
  const std::int64_t target_c = floor_div(px, 2), target_r = floor_div(py, 2);
  std::int64_t c = floor_div(ox, 2), r = floor_div(oy, 2);
  // Next boundary crossing along each axis as t = num / den.
  auto next_num = [](std::int64_t o, std::int64_t d, std::int64_t cell) -> std::int64_t {
    if (d > 0) return 2 * (cell + 1) - o;  // enter cell+1 at the line
    return o - 2 * cell;                    // leave to cell-1 right after the line
  };
  std::int64_t nx = dx != 0 ? next_num(ox, dx, c) : 0;
  std::int64_t ny = dy != 0 ? next_num(oy, dy, r) : 0;
  const int sx = dx > 0 ? 1 : -1, sy = dy > 0 ? 1 : -1;
  for (;;) {
    if (r == target_r && c == target_c) return true;
    if (!visit(r, c)) return false;
    // compare nx/adx against ny/ady; a missing axis never crosses
    int which;  // 0: x first, 1: y first, 2: both
    if (dx == 0) {
      which = 1;
    } else if (dy == 0) {
      which = 0;
    } else {
      const std::int64_t lhs = nx * ady, rhs = ny * adx;
      which = lhs < rhs ? 0 : (rhs < lhs ? 1 : 2);
    }
    if (which == 2 && ((dx > 0) != (dy > 0))) {
      const std::int64_t corner_c = dx > 0 ? c + 1 : c;
      const std::int64_t corner_r = dy > 0 ? r + 1 : r;
      if (!(corner_r == target_r && corner_c == target_c) && !visit(corner_r, corner_c)) return false;
    }
    if (which == 0 || which == 2) {
      c += sx;
      nx += 2;
    }
    if (which == 1 || which == 2) {
      r += sy;
      ny += 2;
    }
  }
}

}  // namespace detail

/// Visible cells: inside the FOV wedge and reached from the sensor origin by a
/// straight segment that crosses no occupied cell before the target. Occupied
/// cells are visible themselves when reached.
inline VisibilityMask raycast_visibility(const OgmFrame& frame, double fov_half_angle) {
  const int h = frame.height(), w = frame.width();
  VisibilityMask vis(h, w);
  const std::int64_t ox = w, oy = 2 * static_cast<std::int64_t>(h);
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      if (!cell_in_fov(r, c, h, w, frame.cell_size(), fov_half_angle)) continue;
      const bool clear = detail::traverse_until(ox, oy, 2 * c + 1, 2 * r + 1, [&](std::int64_t rr, std::int64_t cc) {
        if (rr < 0 || cc < 0 || rr >= h || cc >= w) return true;
        return frame(static_cast<int>(rr), static_cast<int>(cc)) < 0.5f;
      });
      vis(r, c) = clear ? 1 : 0;
    }
  }
  return vis;
}

inline VisibilityMask raycast_visibility(const OgmFrame& frame, const BevConfig& cfg) {
  return raycast_visibility(frame, cfg.fov_half_angle);
}

/// Raw scan file of little-endian f32 records: x,y,z[,reflectance].
inline PointCloud read_point_cloud(const std::filesystem::path& path, int stride) {
  if (stride != 3 && stride != 4) throw ConfigError("read_point_cloud: stride must be 3 or 4");
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open point cloud: " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  const std::size_t record = static_cast<std::size_t>(stride) * sizeof(float);
  if (bytes.size() % record != 0) throw DataError(path.string() + ": size is not a multiple of the record stride");
  PointCloud cloud;
  cloud.points.reserve(bytes.size() / record);
  for (std::size_t off = 0; off < bytes.size(); off += record) {
    float v[4] = {};
    std::memcpy(v, bytes.data() + off, record);
    cloud.points.push_back({v[0], v[1], v[2]});
  }
  return cloud;
}

inline void write_point_cloud(const std::filesystem::path& path, const PointCloud& cloud, int stride) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open for writing: " + path.string());
  for (const auto& p : cloud.points) {
    const float v[4] = {static_cast<float>(p.x), static_cast<float>(p.y), static_cast<float>(p.z), 0.0f};
    os.write(reinterpret_cast<const char*>(v), static_cast<std::streamsize>(stride * sizeof(float)));
  }
}

}  // namespace ogmpred
