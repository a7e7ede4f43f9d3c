#pragma once

// Deterministic synthetic driving scenes: boxes (static and moving) around an
// ego vehicle, rendered as the sensor-facing border cells with ray-cast
// visibility and per-frame footprints of the moving boxes.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "json.hpp"
#include "ogmpred/errors.hpp"
#include "ogmpred/grid.hpp"
#include "ogmpred/lidar.hpp"
#include "ogmpred/rng.hpp"

namespace ogmpred {

enum class EgoMotionKind { stationary, straight, arc };

struct EgoMotion {
  EgoMotionKind kind = EgoMotionKind::stationary;
  double speed = 0.0;     // m/s
  double yaw_rate = 0.0;  // rad/s, arc only
};

struct SceneSpec {
  std::uint64_t seed = 0;
  int height = 64;
  int width = 64;
  double cell_size = 0.2;
  int frames = 20;
  int tau_init = 10;
  double dt = 0.1;
  int n_static = 3;
  int n_dynamic = 1;
  /// Speed interval of moving boxes in m/s; 2-4 m/s is 1-2 cells per frame at 0.2 m, 10 Hz.
  double speed_min = 2.0;
  double speed_max = 4.0;
  /// Moving boxes turn with a constant yaw rate drawn from [-max, max].
  double max_yaw_rate = 0.0;
  EgoMotion ego;
  double fov_half_angle = std::numbers::pi / 4.0;
  double length_min = 1.0;
  double length_max = 2.4;
  double width_min = 0.6;
  double width_max = 1.2;
  int max_retries = 200;

  void validate() const {
    if (frames < 2) throw ConfigError("SceneSpec: frames must be >= 2");
    if (tau_init < 1 || tau_init >= frames) throw ConfigError("SceneSpec: require 1 <= tau_init < frames");
    if (height < 1 || width < 1 || !(cell_size > 0.0)) throw ConfigError("SceneSpec: bad grid");
    if (n_static < 0 || n_dynamic < 0) throw ConfigError("SceneSpec: object counts must be >= 0");
    if (speed_min < 0.0 || speed_max < speed_min) throw ConfigError("SceneSpec: bad speed range");
    if (!(dt > 0.0)) throw ConfigError("SceneSpec: dt must be > 0");
    if (!(fov_half_angle > 0.0 && fov_half_angle <= std::numbers::pi)) throw ConfigError("SceneSpec: bad fov");
    if (!(length_min > 0.0 && width_min > 0.0) || length_max < length_min || width_max < width_min)
      throw ConfigError("SceneSpec: bad object size ranges");
    if (ego.speed < 0.0) throw ConfigError("SceneSpec: ego speed must be >= 0");
  }
};

/// Axis-aligned (in its own frame) rectangle with one pose per frame.
struct SceneObject {
  double length = 0.0;
  double width = 0.0;
  bool dynamic = false;
  std::vector<Pose2> poses;

  [[nodiscard]] bool contains(int frame, Point2 world) const {
    const Point2 l = to_local(poses[frame], world);
    return std::abs(l.x) <= length / 2.0 && std::abs(l.y) <= width / 2.0;
  }
};

struct Scene {
  OgmSequence sequence;
  std::vector<SceneObject> objects;
};

namespace detail {

/// Constant speed, constant yaw-rate motion evaluated `tau` seconds from `p0`.
inline Pose2 advance_pose(const Pose2& p0, double speed, double yaw_rate, double tau) {
  if (yaw_rate == 0.0) {
    return {p0.x + speed * tau * std::cos(p0.heading), p0.y + speed * tau * std::sin(p0.heading), p0.heading};
  }
  const double th = p0.heading + yaw_rate * tau;
  const double rho = speed / yaw_rate;
  return Pose2::make(p0.x + rho * (std::sin(th) - std::sin(p0.heading)),
                     p0.y - rho * (std::cos(th) - std::cos(p0.heading)), th);
}

inline std::vector<Pose2> ego_trajectory(const SceneSpec& spec) {
  std::vector<Pose2> poses;
  for (int k = 0; k < spec.frames; ++k) {
    const double t = k * spec.dt;
    switch (spec.ego.kind) {
      case EgoMotionKind::stationary:
        poses.push_back({});
        break;
      case EgoMotionKind::straight:
        poses.push_back(advance_pose({}, spec.ego.speed, 0.0, t));
        break;
      case EgoMotionKind::arc:
        poses.push_back(advance_pose({}, spec.ego.speed, spec.ego.yaw_rate, t));
        break;
    }
  }
  return poses;
}

inline OgmFrame render_solid(const SceneSpec& spec, const std::vector<SceneObject>& objects, const Pose2& ego,
                             int frame, bool dynamic_only) {
  OgmFrame solid(spec.height, spec.width, spec.cell_size);
  for (int r = 0; r < spec.height; ++r) {
    for (int c = 0; c < spec.width; ++c) {
      const Point2 w = to_world(ego, cell_center(r, c, spec.height, spec.width, spec.cell_size));
      for (const auto& o : objects) {
        if (dynamic_only && !o.dynamic) continue;
        if (o.contains(frame, w)) {
          solid(r, c) = 1.0f;
          break;
        }
      }
    }
  }
  return solid;
}

}  // namespace detail

/// Renders a scene. Same spec, same bytes.
inline Scene generate(const SceneSpec& spec) {
  spec.validate();
  // Stored cell size is f32 on disk; keep the in-memory value identical.
  SceneSpec s = spec;
  s.cell_size = static_cast<double>(static_cast<float>(spec.cell_size));
  const Rng root(s.seed);
  const auto ego = detail::ego_trajectory(s);
  const int kref = s.tau_init - 1;
  const double grid_fwd = s.height * s.cell_size;
  const double grid_half_lat = s.width * s.cell_size / 2.0;

  Scene scene;
  const int n_objects = s.n_static + s.n_dynamic;
  for (int i = 0; i < n_objects; ++i) {
    const bool dynamic = i >= s.n_static;
    Rng rng = root.split(static_cast<std::uint64_t>(i));
    bool placed = false;
    for (int attempt = 0; attempt < s.max_retries && !placed; ++attempt) {
      SceneObject obj;
      obj.dynamic = dynamic;
      obj.length = rng.uniform(s.length_min, s.length_max);
      obj.width = rng.uniform(s.width_min, s.width_max);
      // placed inside the view at the last observed frame
      const double fwd = rng.uniform(0.2, 0.85) * grid_fwd;
      const double lat_max = 0.9 * std::min(fwd * std::tan(std::min(s.fov_half_angle, 1.5)), grid_half_lat);
      const double lat = rng.uniform(-lat_max, lat_max);
      const double heading = rng.uniform(-std::numbers::pi, std::numbers::pi);
      const Point2 w = to_world(ego[kref], {fwd, lat});
      const Pose2 ref = Pose2::make(w.x, w.y, heading);
      double speed = 0.0, yaw_rate = 0.0;
      if (dynamic) {
        speed = rng.uniform(s.speed_min, s.speed_max);
        yaw_rate = s.max_yaw_rate > 0.0 ? rng.uniform(-s.max_yaw_rate, s.max_yaw_rate) : 0.0;
      }
      for (int k = 0; k < s.frames; ++k) obj.poses.push_back(detail::advance_pose(ref, speed, yaw_rate, (k - kref) * s.dt));

      bool ok = true;
      const double margin = s.cell_size;
      for (int k = 0; k < s.frames && ok; ++k) {
        const Point2 l = to_local(obj.poses[k], {ego[k].x, ego[k].y});
        if (std::abs(l.x) <= obj.length / 2.0 + margin && std::abs(l.y) <= obj.width / 2.0 + margin) ok = false;
      }
      const double r_obj = std::hypot(obj.length, obj.width) / 2.0;
      for (const auto& other : scene.objects) {
        if (!ok) break;
        const double r_other = std::hypot(other.length, other.width) / 2.0;
        const double d = std::hypot(other.poses[kref].x - ref.x, other.poses[kref].y - ref.y);
        if (d < r_obj + r_other + margin) ok = false;
      }
      if (ok) {
        scene.objects.push_back(std::move(obj));
        placed = true;
      }
    }
    if (!placed) throw GenerationError("generate: could not place object " + std::to_string(i) + " within retry limit");
  }

  auto& seq = scene.sequence;
  seq.tau_init = s.tau_init;
  seq.poses = ego;
  seq.object_masks.emplace();
  for (int k = 0; k < s.frames; ++k) {
    const OgmFrame solid = detail::render_solid(s, scene.objects, ego[k], k, false);
    const VisibilityMask reach = raycast_visibility(solid, s.fov_half_angle);
    OgmFrame rendered(s.height, s.width, s.cell_size);
    auto sv = solid.values();
    auto rv = rendered.values();
    auto reach_bits = reach.bits();
    for (std::size_t j = 0; j < sv.size(); ++j) rv[j] = (sv[j] > 0.5f && reach_bits[j]) ? 1.0f : 0.0f;
    seq.visibility.push_back(raycast_visibility(rendered, s.fov_half_angle));
    seq.frames.push_back(std::move(rendered));

    const OgmFrame dyn = detail::render_solid(s, scene.objects, ego[k], k, true);
    BinaryMask mask(s.height, s.width);
    auto dv = dyn.values();
    auto mb = mask.bits();
    for (std::size_t j = 0; j < dv.size(); ++j) mb[j] = dv[j] > 0.5f ? 1 : 0;
    seq.object_masks->push_back(std::move(mask));
  }
  seq.validate();
  return scene;
}

/// Ranges for drawing a set of scenes.
struct DatasetSpec {
  SceneSpec base;
  int count = 1;
  int n_static_min = 2;
  int n_static_max = 4;
  int n_dynamic_min = 1;
  int n_dynamic_max = 2;

  void validate() const {
    base.validate();
    if (count < 1) throw ConfigError("DatasetSpec: count must be >= 1");
    if (n_static_min < 0 || n_static_max < n_static_min || n_dynamic_min < 0 || n_dynamic_max < n_dynamic_min)
      throw ConfigError("DatasetSpec: bad object count ranges");
  }
};

/// Spec of scene `i` of a dataset; depends only on (base.seed, i).
inline SceneSpec dataset_scene_spec(const DatasetSpec& d, int i) {
  SceneSpec s = d.base;
  Rng rng = Rng(d.base.seed).split(0x5CE0000000ULL + static_cast<std::uint64_t>(i));
  s.seed = derive_seed(d.base.seed, static_cast<std::uint64_t>(i));
  s.n_static = static_cast<int>(rng.uniform_int(d.n_static_min, d.n_static_max));
  s.n_dynamic = static_cast<int>(rng.uniform_int(d.n_dynamic_min, d.n_dynamic_max));
  return s;
}

inline std::vector<Scene> generate_dataset(const DatasetSpec& d) {
  d.validate();
  std::vector<Scene> out;
  out.reserve(static_cast<std::size_t>(d.count));
  for (int i = 0; i < d.count; ++i) out.push_back(generate(dataset_scene_spec(d, i)));
  return out;
}

/// Repeats the last observed frame. Entry s predicts frame s+1: observed
/// frame s while s < tau_init, afterwards the last observed frame.
inline std::vector<OgmFrame> persistence_baseline(const OgmSequence& seq) {
  seq.validate();
  std::vector<OgmFrame> out;
  for (int s = 0; s < seq.length(); ++s) out.push_back(seq.frames[std::min(s, seq.common_index())]);
  return out;
}

// ---------------------------------------------------------------------------
// JSON

inline const char* to_string(EgoMotionKind k) {
  switch (k) {
    case EgoMotionKind::stationary: return "static";
    case EgoMotionKind::straight: return "straight";
    case EgoMotionKind::arc: return "arc";
  }
  return "static";
}

inline EgoMotionKind ego_motion_from_string(const std::string& s) {
  if (s == "static") return EgoMotionKind::stationary;
  if (s == "straight") return EgoMotionKind::straight;
  if (s == "arc") return EgoMotionKind::arc;
  throw ConfigError("unknown ego motion kind: " + s);
}

inline nlohmann::ordered_json scene_spec_json(const SceneSpec& s) {
  nlohmann::ordered_json j;
  j["seed"] = s.seed;
  j["height"] = s.height;
  j["width"] = s.width;
  j["cell_size"] = s.cell_size;
  j["frames"] = s.frames;
  j["tau_init"] = s.tau_init;
  j["dt"] = s.dt;
  j["n_static"] = s.n_static;
  j["n_dynamic"] = s.n_dynamic;
  j["speed"] = {s.speed_min, s.speed_max};
  j["max_yaw_rate"] = s.max_yaw_rate;
  j["ego"] = {{"kind", to_string(s.ego.kind)}, {"speed", s.ego.speed}, {"yaw_rate", s.ego.yaw_rate}};
  j["fov_half_angle"] = s.fov_half_angle;
  j["length"] = {s.length_min, s.length_max};
  j["width_range"] = {s.width_min, s.width_max};
  return j;
}

/// Sidecar document: scene spec plus per-object per-frame poses.
inline nlohmann::ordered_json scene_sidecar_json(const SceneSpec& spec, const Scene& scene) {
  nlohmann::ordered_json j;
  j["spec"] = scene_spec_json(spec);
  auto& objs = j["objects"] = nlohmann::ordered_json::array();
  for (const auto& o : scene.objects) {
    nlohmann::ordered_json jo;
    jo["length"] = o.length;
    jo["width"] = o.width;
    jo["dynamic"] = o.dynamic;
    auto& poses = jo["poses"] = nlohmann::ordered_json::array();
    for (const auto& p : o.poses) poses.push_back({p.x, p.y, p.heading});
    objs.push_back(std::move(jo));
  }
  auto& ego = j["ego_poses"] = nlohmann::ordered_json::array();
  for (const auto& p : scene.sequence.poses) ego.push_back({p.x, p.y, p.heading});
  return j;
}

}  // namespace ogmpred
