#include "tacood/scene_sim.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>

#include "tacood/rng.hpp"

namespace tacood {

namespace {

constexpr double kTimeEps = 1e-9;

// RNG stream tags.
constexpr std::uint64_t kStreamAgents = 1;
constexpr std::uint64_t kStreamObjects = 2;
constexpr std::uint64_t kStreamLanes = 3;
constexpr std::uint64_t kStreamDirections = 4;
constexpr std::uint64_t kStreamRayZ = 100;
constexpr std::uint64_t kStreamClutter = 200;

constexpr std::array<double, 6> kLaneCenters{-8.75, -5.25, -1.75, 1.75, 5.25, 8.75};
constexpr double kMinGap = 8.0;
constexpr double kSensorHeight = 1.8;

void require(bool ok, const std::string& field, const std::string& what) {
  if (!ok) throw ConfigError("invalid ScenarioConfig." + field + ": " + what);
}

std::uint64_t ray_stream(std::uint64_t tag, int agent_id) {
  return tag * 1000003ULL + static_cast<std::uint64_t>(agent_id);
}

// Distance along a ray to the first crossing of a box footprint, or +inf.
double ray_box_distance(const Vec2& origin, const Vec2& dir, const BBox& box) {
  const double c = std::cos(box.yaw);
  const double s = std::sin(box.yaw);
  const double ox = origin.x - box.center.x;
  const double oy = origin.y - box.center.y;
  const double lox = c * ox + s * oy;
  const double loy = -s * ox + c * oy;
  const double ldx = c * dir.x + s * dir.y;
  const double ldy = -s * dir.x + c * dir.y;
  const double hl = 0.5 * box.l;
  const double hw = 0.5 * box.w;
  if (std::abs(lox) <= hl && std::abs(loy) <= hw) return std::numeric_limits<double>::infinity();
  double t_near = -std::numeric_limits<double>::infinity();
  double t_far = std::numeric_limits<double>::infinity();
  const std::array<std::array<double, 3>, 2> slabs{{{lox, ldx, hl}, {loy, ldy, hw}}};
  for (const auto& slab : slabs) {
    const double o = slab[0];
    const double d = slab[1];
    const double half = slab[2];
    if (std::abs(d) < 1e-15) {
      if (std::abs(o) > half) return std::numeric_limits<double>::infinity();
      continue;
    }
    double t0 = (-half - o) / d;
    double t1 = (half - o) / d;
    if (t0 > t1) std::swap(t0, t1);
    t_near = std::max(t_near, t0);
    t_far = std::min(t_far, t1);
  }
  if (t_near > t_far || t_near <= 0.0) return std::numeric_limits<double>::infinity();
  return t_near;
}

}  // namespace

void validate(const ScenarioConfig& c) {
  require(std::isfinite(c.duration) && c.duration > 0.0, "duration", "must be > 0");
  require(std::isfinite(c.frequency) && c.frequency > 0.0, "frequency", "must be > 0");
  require(c.num_agents >= 1, "num_agents", "must be >= 1");
  require(c.ego_id >= 0 && c.ego_id < c.num_agents, "ego_id", "must index an agent");
  require(c.tick_offsets.empty() || static_cast<int>(c.tick_offsets.size()) == c.num_agents, "tick_offsets",
          "must be \"random\" or list one offset per agent");
  for (double o : c.tick_offsets) {
    require(o >= 0.0 && o < 1.0 / c.frequency, "tick_offsets", "each offset must lie in [0, 1/f)");
  }
  require(c.agent_speed_min >= 0.0 && c.agent_speed_max >= c.agent_speed_min, "agent_speed_range",
          "must satisfy 0 <= min <= max");
  require(c.num_objects >= 0, "num_objects", "must be >= 0");
  require(c.object_speed_min >= 0.0 && c.object_speed_max >= c.object_speed_min, "object_speed_range",
          "must satisfy 0 <= min <= max");
  require(c.range.x_min < c.range.x_max, "detection_range.x", "bounds must be ordered");
  require(c.range.y_min < c.range.y_max, "detection_range.y", "bounds must be ordered");
  require(c.clutter_density >= 0.0 && c.clutter_density <= 1.0, "clutter_density", "must lie in [0,1]");
  require(c.angular_resolution_deg > 0.0 && c.angular_resolution_deg <= 10.0, "angular_resolution_deg",
          "must lie in (0, 10]");
  require(c.max_range > 0.0, "max_range", "must be > 0");
  require(c.spawn_half_length > 0.0, "spawn_half_length", "must be > 0");
}

Pose AgentState::pose_at(double t) const {
  Pose p = pose;
  p.x += velocity.x * (t - pose_time);
  p.y += velocity.y * (t - pose_time);
  return p;
}

const AgentState& Scene::agent(int id) const {
  for (const auto& a : agents) {
    if (a.id == id) return a;
  }
  throw SimulationError("unknown agent id " + std::to_string(id));
}

void validate(const Scene& scene) {
  if (scene.agents.empty()) throw ConfigError("scene has no agents");
  if (!(scene.frequency > 0.0)) throw ConfigError("scene frequency must be > 0");
  (void)scene.agent(scene.ego_id);
  for (const auto& a : scene.agents) {
    if (!(a.tick_offset >= 0.0 && a.tick_offset < 1.0 / a.frequency)) {
      throw ConfigError("agent " + std::to_string(a.id) + " tick_offset outside [0, 1/f)");
    }
  }
  for (const auto& o : scene.objects) {
    if (o.waypoints.size() < 2) throw ConfigError("object " + std::to_string(o.id) + " needs >= 2 waypoints");
    for (std::size_t i = 1; i < o.waypoints.size(); ++i) {
      if (!(o.waypoints[i].t > o.waypoints[i - 1].t)) {
        throw ConfigError("object " + std::to_string(o.id) + " waypoint times must increase");
      }
    }
    if (!(o.l > 0.0 && o.w > 0.0 && o.h > 0.0)) throw ConfigError("object dims must be positive");
  }
}

Scene build_scene(const ScenarioConfig& config, std::uint64_t seed) {
  validate(config);
  Scene scene;
  scene.duration = config.duration;
  scene.ego_id = config.ego_id;
  scene.seed = seed;
  scene.frequency = config.frequency;
  scene.angular_resolution_deg = config.angular_resolution_deg;
  scene.max_range = config.max_range;
  scene.clutter_density = config.clutter_density;
  scene.range = config.range;

  const double period = 1.0 / config.frequency;
  CounterRng agent_rng(seed, kStreamAgents);
  for (int i = 0; i < config.num_agents; ++i) {
    AgentState a;
    a.id = i;
    a.frequency = config.frequency;
    // The ego clock is the reference; cooperative offsets are relative to it.
    const double drawn_offset = agent_rng.uniform(0.0, period);
    const double random_offset = i == config.ego_id ? 0.0 : drawn_offset;
    a.tick_offset = config.tick_offsets.empty() ? random_offset : config.tick_offsets[static_cast<std::size_t>(i)];
    const double speed = agent_rng.uniform(config.agent_speed_min, config.agent_speed_max);
    const double x = agent_rng.uniform(-0.5 * config.spawn_half_length, 0.5 * config.spawn_half_length);
    const double side_draw = agent_rng.uniform();
    const double yaw_draw = agent_rng.uniform();
    if (config.agent_speed_max > 0.0) {
      // Moving agents drive along the median in either direction.
      const double yaw = side_draw < 0.5 ? 0.0 : kPi;
      a.pose = {x, 0.0, kSensorHeight, yaw};
      a.velocity = {speed * std::cos(yaw), speed * std::sin(yaw)};
    } else {
      // Static roadside units alternate sides with arbitrary heading.
      const double side = (i % 2 == 0) ? -1.0 : 1.0;
      a.pose = {x, side * (13.0 + 4.0 * side_draw), kSensorHeight, wrap_angle(kPi - 2.0 * kPi * yaw_draw)};
    }
    scene.agents.push_back(a);
  }

  CounterRng lane_rng(seed, kStreamLanes);
  std::array<double, kLaneCenters.size()> lane_speed{};
  for (double& s : lane_speed) s = lane_rng.uniform(config.object_speed_min, config.object_speed_max);

  CounterRng obj_rng(seed, kStreamObjects);
  std::vector<std::pair<std::size_t, double>> placed;
  for (int k = 0; k < config.num_objects; ++k) {
    bool ok = false;
    std::size_t lane = 0;
    double x0 = 0.0;
    for (int attempt = 0; attempt < 1000 && !ok; ++attempt) {
      lane = obj_rng.below(kLaneCenters.size());
      x0 = obj_rng.uniform(-config.spawn_half_length, config.spawn_half_length);
      ok = std::none_of(placed.begin(), placed.end(), [&](const auto& p) {
        return p.first == lane && std::abs(p.second - x0) < kMinGap;
      });
    }
    if (!ok) throw ConfigError("invalid ScenarioConfig.num_objects: cannot place objects without overlap");
    placed.emplace_back(lane, x0);

    ObjectTrack track;
    track.id = k;
    track.l = obj_rng.uniform(3.8, 5.0);
    track.w = obj_rng.uniform(1.7, 2.1);
    track.h = obj_rng.uniform(1.4, 1.8);
    const double y = kLaneCenters[lane];
    const double lane_dir = y < 0.0 ? 1.0 : -1.0;
    const bool flip = config.mixed_directions && hash_uniform(seed, kStreamDirections, static_cast<std::uint64_t>(k)) < 0.5;
    const double dir = flip ? -lane_dir : lane_dir;
    const double yaw = dir > 0.0 ? 0.0 : kPi;
    const double v = dir * lane_speed[lane];
    const int n_steps = std::max(1, static_cast<int>(std::ceil(config.duration / 0.5 - 1e-9)));
    for (int s = 0; s <= n_steps; ++s) {
      const double t = std::min(config.duration, 0.5 * s);
      track.waypoints.push_back({t, {x0 + v * t, y, 0.5 * track.h, yaw}});
    }
    scene.objects.push_back(std::move(track));
  }
  validate(scene);
  return scene;
}

Pose object_pose_at(const ObjectTrack& track, double t) {
  const auto& wp = track.waypoints;
  if (wp.size() < 2) throw SimulationError("object track needs >= 2 waypoints");
  if (t < wp.front().t - kTimeEps || t > wp.back().t + kTimeEps) {
    throw SimulationError("object_pose_at: t=" + std::to_string(t) + " outside track of object " +
                          std::to_string(track.id));
  }
  t = std::clamp(t, wp.front().t, wp.back().t);
  auto it = std::upper_bound(wp.begin(), wp.end(), t, [](double v, const Waypoint& w) { return v < w.t; });
  if (it == wp.end()) return wp.back().pose;
  const Waypoint& b = *it;
  const Waypoint& a = *(it - 1);
  return interpolate_pose(a.pose, b.pose, (t - a.t) / (b.t - a.t));
}

Vec2 object_velocity_at(const ObjectTrack& track, double t) {
  const auto& wp = track.waypoints;
  (void)object_pose_at(track, t);
  auto it = std::upper_bound(wp.begin(), wp.end(), t, [](double v, const Waypoint& w) { return v < w.t; });
  if (it == wp.end()) --it;
  if (it == wp.begin()) ++it;
  const Waypoint& b = *it;
  const Waypoint& a = *(it - 1);
  const double dt = b.t - a.t;
  return {(b.pose.x - a.pose.x) / dt, (b.pose.y - a.pose.y) / dt};
}

BBox object_box_at(const ObjectTrack& track, double t) {
  const Pose p = object_pose_at(track, t);
  BBox b;
  b.center = {p.x, p.y, p.z};
  b.yaw = p.yaw;
  b.l = track.l;
  b.w = track.w;
  b.h = track.h;
  return b;
}

double tick_start(const AgentState& agent, int scan) {
  return agent.tick_offset + static_cast<double>(scan) / agent.frequency;
}

PointCloud cast_sweep(const Scene& scene, int agent_id, double t_begin, double t_end, double phase_origin,
                      double snapshot_step) {
  const AgentState& agent = scene.agent(agent_id);
  const int rays_per_rev = static_cast<int>(std::lround(360.0 / scene.angular_resolution_deg));
  const double ray_period = 1.0 / (static_cast<double>(rays_per_rev) * agent.frequency);

  PointCloud cloud;
  cloud.agent_id = agent_id;
  cloud.tick_start = t_begin;
  cloud.tick_end = t_end;

  const auto first = static_cast<long long>(std::ceil((t_begin - phase_origin) / ray_period - 1e-6));
  std::vector<BBox> boxes(scene.objects.size());
  double boxes_time = std::numeric_limits<double>::quiet_NaN();

  for (long long i = first;; ++i) {
    const double t = phase_origin + static_cast<double>(i) * ray_period;
    if (t >= t_end - 1e-12) break;
    const double t_world = snapshot_step > 0.0 ? std::floor(t / snapshot_step + 1e-6) * snapshot_step : t;
    if (!(t_world == boxes_time)) {
      for (std::size_t k = 0; k < scene.objects.size(); ++k) boxes[k] = object_box_at(scene.objects[k], t_world);
      boxes_time = t_world;
    }
    const Pose sensor = agent.pose_at(t_world);
    const long long ring = ((i % rays_per_rev) + rays_per_rev) % rays_per_rev;
    const double azimuth = -kPi + 2.0 * kPi * static_cast<double>(ring) / static_cast<double>(rays_per_rev);
    const double heading = sensor.yaw + azimuth;
    const Vec2 origin{sensor.x, sensor.y};
    const Vec2 dir{std::cos(heading), std::sin(heading)};

    double best = scene.max_range;
    int best_obj = -1;
    for (std::size_t k = 0; k < boxes.size(); ++k) {
      const double d = ray_box_distance(origin, dir, boxes[k]);
      if (d < best) {
        best = d;
        best_obj = static_cast<int>(k);
      }
    }
    const auto counter = static_cast<std::uint64_t>(i);
    double z_world = 0.0;
    if (best_obj >= 0) {
      const BBox& b = boxes[static_cast<std::size_t>(best_obj)];
      const double u = hash_uniform(scene.seed, ray_stream(kStreamRayZ, agent_id), counter);
      z_world = b.center.z + (u - 0.5) * b.h;
    }
    if (scene.clutter_density > 0.0 &&
        hash_uniform(scene.seed, ray_stream(kStreamClutter, agent_id), 2 * counter) < scene.clutter_density) {
      const double r = 2.0 + hash_uniform(scene.seed, ray_stream(kStreamClutter, agent_id), 2 * counter + 1) *
                                 (0.5 * scene.max_range - 2.0);
      if (r < best) {
        best = r;
        best_obj = -2;
        z_world = 0.0;
      }
    }
    if (best_obj == -1) continue;
    const Vec3 world{origin.x + best * dir.x, origin.y + best * dir.y, z_world};
    const Vec3 local = transform_point(inverse(sensor), world);
    cloud.points.push_back({local.x, local.y, local.z, t});
  }
  return cloud;
}

PointCloud simulate_scan(const Scene& scene, int agent_id, int frame_idx) {
  const AgentState& agent = scene.agent(agent_id);
  const double start = tick_start(agent, frame_idx);
  const double end = start + 1.0 / agent.frequency;
  if (frame_idx < 0 || end > scene.duration + kTimeEps) {
    throw SimulationError("simulate_scan: frame " + std::to_string(frame_idx) + " of agent " +
                          std::to_string(agent_id) + " outside scene duration");
  }
  PointCloud cloud = cast_sweep(scene, agent_id, start, end, start);
  cloud.tick_start = start;
  cloud.tick_end = end;
  return cloud;
}

std::vector<PointCloud> simulate_subframes(const Scene& scene, int agent_id, int count, double step) {
  std::vector<PointCloud> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int k = 0; k < count; ++k) {
    const double b = step * k;
    const double e = step * (k + 1);
    if (e > scene.duration + kTimeEps) throw SimulationError("simulate_subframes: beyond scene duration");
    out.push_back(cast_sweep(scene, agent_id, b, e, 0.0, step));
  }
  return out;
}

std::vector<PointCloud> assemble_subframes(const std::vector<PointCloud>& subframes, int drop_n, int group) {
  if (drop_n < 1 || drop_n > 5) throw ConfigError("assemble_subframes: drop_n must lie in [1,5]");
  if (group < 1) throw ConfigError("assemble_subframes: group must be >= 1");
  std::vector<PointCloud> scans;
  for (std::size_t s = static_cast<std::size_t>(drop_n); s + static_cast<std::size_t>(group) <= subframes.size();
       s += static_cast<std::size_t>(group)) {
    PointCloud scan;
    scan.agent_id = subframes[s].agent_id;
    scan.tick_start = subframes[s].tick_start;
    scan.tick_end = subframes[s + static_cast<std::size_t>(group) - 1].tick_end;
    for (std::size_t k = s; k < s + static_cast<std::size_t>(group); ++k) {
      scan.points.insert(scan.points.end(), subframes[k].points.begin(), subframes[k].points.end());
    }
    scans.push_back(std::move(scan));
  }
  return scans;
}

int paired_scan_index(const Scene& scene, int agent_id, int frame_idx) {
  const AgentState& ego = scene.ego();
  const AgentState& agent = scene.agent(agent_id);
  if (agent_id == ego.id) return frame_idx;
  const double t_aligned = tick_start(ego, frame_idx) + 1.0 / ego.frequency;
  return static_cast<int>(std::floor((t_aligned - agent.tick_offset) * agent.frequency + kTimeEps)) - 1;
}

FrameSpan frame_span(const Scene& scene) {
  const AgentState& ego = scene.ego();
  const int last = static_cast<int>(std::floor((scene.duration - ego.tick_offset) * ego.frequency + kTimeEps)) - 1;
  int first = 0;
  while (first <= last) {
    bool ok = true;
    for (const auto& a : scene.agents) ok = ok && paired_scan_index(scene, a.id, first) >= 0;
    if (ok) break;
    ++first;
  }
  return {first, std::max(0, last - first + 1)};
}

Frame make_async_frame(const Scene& scene, int frame_idx) {
  const FrameSpan span = frame_span(scene);
  if (frame_idx < span.first || frame_idx >= span.first + span.count) {
    throw SimulationError("make_async_frame: frame " + std::to_string(frame_idx) + " out of range");
  }
  const AgentState& ego = scene.ego();
  Frame frame;
  frame.index = frame_idx;
  frame.ego_id = ego.id;
  frame.t_aligned = tick_start(ego, frame_idx) + 1.0 / ego.frequency;
  for (const auto& a : scene.agents) {
    const int scan = paired_scan_index(scene, a.id, frame_idx);
    frame.clouds.push_back(simulate_scan(scene, a.id, scan));
    AgentState state = a;
    state.pose_time = tick_start(a, scan);
    state.pose = a.pose_at(state.pose_time);
    frame.states.push_back(state);
  }
  frame.gt = gt_boxes_at(scene, frame.t_aligned);
  return frame;
}

std::vector<GtBox> gt_boxes_at(const Scene& scene, double t) {
  if (t < -kTimeEps || t > scene.duration + kTimeEps) {
    throw SimulationError("gt_boxes_at: t=" + std::to_string(t) + " outside scene duration");
  }
  const Pose ego_inv = inverse(scene.ego().pose_at(t));
  std::vector<GtBox> out;
  for (const auto& obj : scene.objects) {
    const BBox box = object_box_at(obj, t);
    const Vec2 rel = transform_point(ego_inv, Vec2{box.center.x, box.center.y});
    if (!scene.range.contains(rel.x, rel.y)) continue;
    out.push_back({obj.id, box, object_velocity_at(obj, t)});
  }
  return out;
}

PointCloud to_framewise(const PointCloud& cloud) {
  PointCloud out = cloud;
  for (auto& p : out.points) p.t = cloud.tick_start;
  return out;
}

}  // namespace tacood
