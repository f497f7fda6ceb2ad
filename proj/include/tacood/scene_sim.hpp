#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "tacood/geometry.hpp"

namespace tacood {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class SimulationError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

// Axis-aligned BEV window expressed in an agent's sensor frame.
struct DetectionRange {
  double x_min = -140.8;
  double x_max = 140.8;
  double y_min = -38.4;
  double y_max = 38.4;

  bool contains(double x, double y) const { return x >= x_min && x < x_max && y >= y_min && y < y_max; }
};

struct ScenarioConfig {
  double duration = 2.0;
  double frequency = 10.0;
  int num_agents = 2;
  int ego_id = 0;
  // Empty means the ego ticks at 0 and the others draw uniformly from [0, 1/f).
  std::vector<double> tick_offsets;
  double agent_speed_min = 0.0;
  double agent_speed_max = 0.0;
  int num_objects = 6;
  double object_speed_min = 14.0;
  double object_speed_max = 19.0;
  DetectionRange range;
  double clutter_density = 0.0;
  double angular_resolution_deg = 0.2;
  double max_range = 120.0;
  // Objects are spawned with |x| <= spawn_half_length at t = 0.
  double spawn_half_length = 40.0;
  // Each object drives either way regardless of its lane.
  bool mixed_directions = false;
  std::uint64_t seed = 0;
};

// Throws ConfigError naming the first offending field.
void validate(const ScenarioConfig& config);

struct AgentState {
  int id = 0;
  Pose pose;           // world frame, valid at pose_time
  double pose_time = 0.0;
  Vec2 velocity;       // world frame, m/s
  double tick_offset = 0.0;
  double frequency = 10.0;

  Pose pose_at(double t) const;
};

struct Waypoint {
  double t = 0.0;
  Pose pose;
};

struct ObjectTrack {
  int id = 0;
  double l = 4.5;
  double w = 1.8;
  double h = 1.6;
  std::vector<Waypoint> waypoints;
};

struct Scene {
  std::vector<AgentState> agents;
  std::vector<ObjectTrack> objects;
  double duration = 0.0;
  int ego_id = 0;
  std::uint64_t seed = 0;
  double frequency = 10.0;
  double angular_resolution_deg = 0.2;
  double max_range = 120.0;
  double clutter_density = 0.0;
  DetectionRange range;

  const AgentState& agent(int id) const;
  const AgentState& ego() const { return agent(ego_id); }
};

void validate(const Scene& scene);

struct TimedPoint {
  double x = 0.0;  // sensor frame at emission time
  double y = 0.0;
  double z = 0.0;
  double t = 0.0;  // absolute seconds
};

struct PointCloud {
  int agent_id = 0;
  std::vector<TimedPoint> points;
  double tick_start = 0.0;
  double tick_end = 0.0;
};

struct GtBox {
  int object_id = 0;
  BBox box;
  Vec2 velocity;
};

struct Frame {
  int index = 0;
  int ego_id = 0;
  double t_aligned = 0.0;
  std::vector<PointCloud> clouds;   // one per agent, same order as states
  std::vector<AgentState> states;   // pose reported at each agent's own tick_start
  std::vector<GtBox> gt;            // boxes at t_aligned
};

Scene build_scene(const ScenarioConfig& config, std::uint64_t seed);

Pose object_pose_at(const ObjectTrack& track, double t);
Vec2 object_velocity_at(const ObjectTrack& track, double t);
BBox object_box_at(const ObjectTrack& track, double t);

// Start of agent `agent`'s scan number `scan`.
double tick_start(const AgentState& agent, int scan);

// Full rolling-shutter sweep j of one agent; the beam points at sensor azimuth -pi at tick_start.
PointCloud simulate_scan(const Scene& scene, int agent_id, int frame_idx);

// General sweep: rays emitted in [t_begin, t_end) with the beam at azimuth -pi at
// `phase_origin`. When snapshot_step > 0 all world motion is frozen at the start of
// each snapshot_step-long slot (discretized replay).
PointCloud cast_sweep(const Scene& scene, int agent_id, double t_begin, double t_end, double phase_origin,
                      double snapshot_step = 0.0);

// Ten-per-scan 0.01 s snapshots starting at t = 0, as replayed from synchronized sub-frames.
std::vector<PointCloud> simulate_subframes(const Scene& scene, int agent_id, int count, double step = 0.01);

// Drops the first drop_n sub-frames then joins every `group` consecutive sub-frames.
std::vector<PointCloud> assemble_subframes(const std::vector<PointCloud>& subframes, int drop_n, int group = 10);

// Index of the scan agent `agent_id` contributes to ego frame j (latest scan complete by t_aligned).
int paired_scan_index(const Scene& scene, int agent_id, int frame_idx);

struct FrameSpan {
  int first = 0;
  int count = 0;
};
FrameSpan frame_span(const Scene& scene);

Frame make_async_frame(const Scene& scene, int frame_idx);

std::vector<GtBox> gt_boxes_at(const Scene& scene, double t);

// Replaces every point timestamp with the scan start, discarding sub-scan timing.
PointCloud to_framewise(const PointCloud& cloud);

}  // namespace tacood
