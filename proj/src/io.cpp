#include "tacood/io.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include "le_bytes.hpp"

namespace tacood {

namespace fs = std::filesystem;

void write_file_atomic(const fs::path& path, const std::string& bytes) {
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw IoError("write failed: " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp, ec);
    throw IoError("cannot rename onto " + path.string());
  }
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw IoError("read failed: " + path.string());
  return ss.str();
}

// ---------------------------------------------------------------------------

std::string encode_points(const std::vector<TimedPoint>& points) {
  if (points.size() > 0xffffffffu) throw std::length_error("encode_points: too many points");
  std::ostringstream out(std::ios::binary);
  out.write("TPCD", 4);
  le::put<std::uint16_t>(out, kPointFileVersion);
  le::put<std::uint32_t>(out, static_cast<std::uint32_t>(points.size()));
  for (const TimedPoint& p : points) {
    le::put_f32(out, static_cast<float>(p.x));
    le::put_f32(out, static_cast<float>(p.y));
    le::put_f32(out, static_cast<float>(p.z));
    le::put_f32(out, static_cast<float>(p.t));
  }
  return out.str();
}

std::vector<TimedPoint> decode_points(const std::string& bytes) {
  std::istringstream in(bytes, std::ios::binary);
  char magic[4];
  if (!in.read(magic, 4) || std::string(magic, 4) != "TPCD") throw FormatError("point file: bad magic");
  const auto version = le::get<std::uint16_t>(in);
  if (version != kPointFileVersion) throw FormatError("point file: unsupported version " + std::to_string(version));
  const auto count = le::get<std::uint32_t>(in);
  if (bytes.size() != 10 + 16 * static_cast<std::size_t>(count)) throw FormatError("point file: length does not match count");
  std::vector<TimedPoint> pts(count);
  for (TimedPoint& p : pts) {
    p.x = le::get_f32(in);
    p.y = le::get_f32(in);
    p.z = le::get_f32(in);
    p.t = le::get_f32(in);
  }
  return pts;
}

// ---------------------------------------------------------------------------

namespace {

// Strict object reader: typed optional fields and rejection of unknown keys.
class Reader {
 public:
  Reader(const Json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + ": expected an object");
  }
  ~Reader() noexcept(false) {
    if (std::uncaught_exceptions() > 0) return;
    for (const auto& item : j_.items()) {
      if (!seen_.count(item.key())) throw ConfigError(where_ + ": unknown key \"" + item.key() + "\"");
    }
  }
  Reader(const Reader&) = delete;
  Reader& operator=(const Reader&) = delete;

  bool has(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key);
  }
  const Json& at(const std::string& key) {
    seen_.insert(key);
    if (!j_.contains(key)) throw ConfigError(where_ + ": missing key \"" + key + "\"");
    return j_.at(key);
  }
  template <typename T>
  void opt(const std::string& key, T& out) {
    if (!has(key)) return;
    out = get<T>(key, j_.at(key));
  }
  template <typename T>
  T req(const std::string& key) {
    return get<T>(key, at(key));
  }
  std::string path(const std::string& key) const { return where_ + "." + key; }

 private:
  template <typename T>
  T get(const std::string& key, const Json& v) const {
    const bool ok = std::is_same_v<T, bool>       ? v.is_boolean()
                    : std::is_integral_v<T>       ? v.is_number_integer()
                    : std::is_floating_point_v<T> ? v.is_number()
                                                  : true;
    if (!ok) throw ConfigError(path(key) + ": wrong type");
    try {
      return v.get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(path(key) + ": wrong type");
    }
  }

  const Json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

Json pose_json(const Pose& p) { return Json{{"x", p.x}, {"y", p.y}, {"z", p.z}, {"yaw", p.yaw}}; }

Pose pose_from(const Json& j, const std::string& where) {
  Reader r(j, where);
  Pose p;
  p.x = r.req<double>("x");
  p.y = r.req<double>("y");
  p.z = r.req<double>("z");
  p.yaw = r.req<double>("yaw");
  return p;
}

Json vec2_json(const Vec2& v) { return Json::array({v.x, v.y}); }

Vec2 vec2_from(const Json& j, const std::string& where) {
  if (!j.is_array() || j.size() != 2 || !j[0].is_number() || !j[1].is_number()) {
    throw ConfigError(where + ": expected [x, y]");
  }
  return {j[0].get<double>(), j[1].get<double>()};
}

Json range_json(const DetectionRange& r) {
  return Json{{"x_min", r.x_min}, {"x_max", r.x_max}, {"y_min", r.y_min}, {"y_max", r.y_max}};
}

void range_from(const Json& j, DetectionRange& r, const std::string& where) {
  Reader rd(j, where);
  rd.opt("x_min", r.x_min);
  rd.opt("x_max", r.x_max);
  rd.opt("y_min", r.y_min);
  rd.opt("y_max", r.y_max);
}

Json agent_json(const AgentState& a) {
  return Json{{"id", a.id},
              {"pose", pose_json(a.pose)},
              {"pose_time", a.pose_time},
              {"velocity", vec2_json(a.velocity)},
              {"tick_offset", a.tick_offset},
              {"frequency", a.frequency}};
}

AgentState agent_from(const Json& j, const std::string& where) {
  Reader r(j, where);
  AgentState a;
  a.id = r.req<int>("id");
  a.pose = pose_from(r.at("pose"), r.path("pose"));
  a.pose_time = r.req<double>("pose_time");
  a.velocity = vec2_from(r.at("velocity"), r.path("velocity"));
  a.tick_offset = r.req<double>("tick_offset");
  a.frequency = r.req<double>("frequency");
  return a;
}

Json gt_json(const GtBox& g) {
  return Json{{"object_id", g.object_id}, {"box", to_json(g.box)}, {"velocity", vec2_json(g.velocity)}};
}

GtBox gt_from(const Json& j, const std::string& where) {
  Reader r(j, where);
  GtBox g;
  g.object_id = r.req<int>("object_id");
  g.box = bbox_from_json(r.at("box"));
  g.velocity = vec2_from(r.at("velocity"), r.path("velocity"));
  return g;
}

std::string frame_dir_name(int index) {
  std::ostringstream s;
  s << "frame_" << std::setw(6) << std::setfill('0') << index;
  return s.str();
}

std::string agent_file_name(int id) { return "agent_" + std::to_string(id) + ".tpcd"; }

const char* mode_name(TimestampMode m) { return m == TimestampMode::kPointwise ? "pointwise" : "framewise"; }

TimestampMode mode_from(const std::string& s, const std::string& where) {
  if (s == "pointwise") return TimestampMode::kPointwise;
  if (s == "framewise") return TimestampMode::kFramewise;
  throw ConfigError(where + ": expected \"pointwise\" or \"framewise\"");
}

}  // namespace

std::string dump(const Json& j) { return j.dump(2) + "\n"; }

Json to_json(const BBox& b) {
  return Json{{"x", b.center.x}, {"y", b.center.y}, {"z", b.center.z}, {"l", b.l},
              {"w", b.w},        {"h", b.h},        {"yaw", b.yaw}};
}

BBox bbox_from_json(const Json& j) {
  Reader r(j, "box");
  BBox b;
  b.center = {r.req<double>("x"), r.req<double>("y"), r.req<double>("z")};
  b.l = r.req<double>("l");
  b.w = r.req<double>("w");
  b.h = r.req<double>("h");
  b.yaw = r.req<double>("yaw");
  return b;
}

Json to_json(const ScenarioConfig& c) {
  Json j{{"duration", c.duration},
         {"frequency", c.frequency},
         {"num_agents", c.num_agents},
         {"ego_id", c.ego_id},
         {"agent_speed_min", c.agent_speed_min},
         {"agent_speed_max", c.agent_speed_max},
         {"num_objects", c.num_objects},
         {"object_speed_min", c.object_speed_min},
         {"object_speed_max", c.object_speed_max},
         {"range", range_json(c.range)},
         {"clutter_density", c.clutter_density},
         {"angular_resolution_deg", c.angular_resolution_deg},
         {"max_range", c.max_range},
         {"spawn_half_length", c.spawn_half_length},
         {"mixed_directions", c.mixed_directions},
         {"seed", c.seed}};
  j["tick_offsets"] = c.tick_offsets.empty() ? Json("random") : Json(c.tick_offsets);
  return j;
}

void from_json(const Json& j, ScenarioConfig& c) {
  Reader r(j, "scenario");
  r.opt("duration", c.duration);
  r.opt("frequency", c.frequency);
  r.opt("num_agents", c.num_agents);
  r.opt("ego_id", c.ego_id);
  if (r.has("tick_offsets")) {
    const Json& t = j.at("tick_offsets");
    if (t.is_string() && t.get<std::string>() == "random") {
      c.tick_offsets.clear();
    } else if (t.is_array() && std::all_of(t.begin(), t.end(), [](const Json& v) { return v.is_number(); })) {
      c.tick_offsets = t.get<std::vector<double>>();
    } else {
      throw ConfigError("scenario.tick_offsets: expected \"random\" or a list of numbers");
    }
  }
  r.opt("agent_speed_min", c.agent_speed_min);
  r.opt("agent_speed_max", c.agent_speed_max);
  r.opt("num_objects", c.num_objects);
  r.opt("object_speed_min", c.object_speed_min);
  r.opt("object_speed_max", c.object_speed_max);
  if (r.has("range")) range_from(j.at("range"), c.range, "scenario.range");
  r.opt("clutter_density", c.clutter_density);
  r.opt("angular_resolution_deg", c.angular_resolution_deg);
  r.opt("max_range", c.max_range);
  r.opt("spawn_half_length", c.spawn_half_length);
  r.opt("mixed_directions", c.mixed_directions);
  r.opt("seed", c.seed);
}

Json to_json(const ModelConfig& c) {
  return Json{{"d", c.d},
              {"k_roi_local", c.k_roi_local},
              {"k_roi_global", c.k_roi_global},
              {"k_q", c.k_q},
              {"memory_frames", c.memory_frames},
              {"local_dilation", c.local_dilation},
              {"global_dilation", c.global_dilation},
              {"timestamp_mode", mode_name(c.timestamp_mode)},
              {"eq1_wrap", c.azimuth_metric == AzimuthMetric::kWrapped},
              {"pos_embed_in_keys", c.pos_embed_in_keys},
              {"temporal", c.temporal},
              {"global_attention", c.global_attention},
              {"roi_regression", c.roi_regression},
              {"range", range_json(c.range)}};
}

void from_json(const Json& j, ModelConfig& c) {
  Reader r(j, "model");
  r.opt("d", c.d);
  r.opt("k_roi_local", c.k_roi_local);
  r.opt("k_roi_global", c.k_roi_global);
  r.opt("k_q", c.k_q);
  r.opt("memory_frames", c.memory_frames);
  r.opt("local_dilation", c.local_dilation);
  r.opt("global_dilation", c.global_dilation);
  if (r.has("timestamp_mode")) {
    const Json& m = j.at("timestamp_mode");
    if (!m.is_string()) throw ConfigError("model.timestamp_mode: wrong type");
    c.timestamp_mode = mode_from(m.get<std::string>(), "model.timestamp_mode");
  }
  bool wrap = c.azimuth_metric == AzimuthMetric::kWrapped;
  r.opt("eq1_wrap", wrap);
  c.azimuth_metric = wrap ? AzimuthMetric::kWrapped : AzimuthMetric::kNaive;
  r.opt("pos_embed_in_keys", c.pos_embed_in_keys);
  r.opt("temporal", c.temporal);
  r.opt("global_attention", c.global_attention);
  r.opt("roi_regression", c.roi_regression);
  if (r.has("range")) range_from(j.at("range"), c.range, "model.range");
}

Json to_json(const TrainConfig& c) {
  return Json{{"steps", c.steps},
              {"batch", c.batch},
              {"lr", c.lr},
              {"beta1", c.beta1},
              {"beta2", c.beta2},
              {"adam_eps", c.adam_eps},
              {"grad_clip", c.grad_clip},
              {"seed", c.seed},
              {"latency_augmentation", c.latency_augmentation},
              {"max_latency", c.max_latency},
              {"window", c.window},
              {"cls_weight", c.weights.cls},
              {"reg_weight", c.weights.reg},
              {"grad_all_agents", c.grad_all_agents},
              {"oracle_roi", c.oracle_roi}};
}

void from_json(const Json& j, TrainConfig& c) {
  Reader r(j, "train");
  r.opt("steps", c.steps);
  r.opt("batch", c.batch);
  r.opt("lr", c.lr);
  r.opt("beta1", c.beta1);
  r.opt("beta2", c.beta2);
  r.opt("adam_eps", c.adam_eps);
  r.opt("grad_clip", c.grad_clip);
  r.opt("seed", c.seed);
  r.opt("latency_augmentation", c.latency_augmentation);
  r.opt("max_latency", c.max_latency);
  r.opt("window", c.window);
  r.opt("cls_weight", c.weights.cls);
  r.opt("reg_weight", c.weights.reg);
  r.opt("grad_all_agents", c.grad_all_agents);
  r.opt("oracle_roi", c.oracle_roi);
}

Json to_json(const ToyDataConfig& c) {
  return Json{{"scenario", to_json(c.scenario)},
              {"train_scenes", c.train_scenes},
              {"heldout_scenes", c.heldout_scenes},
              {"seed", c.seed}};
}

void from_json(const Json& j, ToyDataConfig& c) {
  Reader r(j, "data");
  if (r.has("scenario")) from_json(j.at("scenario"), c.scenario);
  r.opt("train_scenes", c.train_scenes);
  r.opt("heldout_scenes", c.heldout_scenes);
  r.opt("seed", c.seed);
}

Json to_json(const RunConfig& c) {
  return Json{{"scenario", to_json(c.scenario)},
              {"model", to_json(c.model)},
              {"train", to_json(c.train)},
              {"data", to_json(c.data)}};
}

RunConfig run_config_from_json(const Json& j) {
  RunConfig c;
  Reader r(j, "config");
  if (r.has("scenario")) from_json(j.at("scenario"), c.scenario);
  if (r.has("model")) from_json(j.at("model"), c.model);
  if (r.has("train")) from_json(j.at("train"), c.train);
  if (r.has("data")) from_json(j.at("data"), c.data);
  return c;
}

RunConfig load_run_config(const fs::path& path) {
  const std::string text = read_file(path);
  Json j;
  try {
    j = Json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return run_config_from_json(j);
}

// ---------------------------------------------------------------------------

Json to_json(const Scene& s) {
  Json agents = Json::array();
  for (const AgentState& a : s.agents) agents.push_back(agent_json(a));
  Json objects = Json::array();
  for (const ObjectTrack& o : s.objects) {
    Json wps = Json::array();
    for (const Waypoint& w : o.waypoints) wps.push_back(Json{{"t", w.t}, {"pose", pose_json(w.pose)}});
    objects.push_back(Json{{"id", o.id}, {"l", o.l}, {"w", o.w}, {"h", o.h}, {"waypoints", std::move(wps)}});
  }
  return Json{{"agents", std::move(agents)},
              {"objects", std::move(objects)},
              {"duration", s.duration},
              {"ego_id", s.ego_id},
              {"seed", s.seed},
              {"frequency", s.frequency},
              {"angular_resolution_deg", s.angular_resolution_deg},
              {"max_range", s.max_range},
              {"clutter_density", s.clutter_density},
              {"range", range_json(s.range)}};
}

Scene scene_from_json(const Json& j) {
  Scene s;
  Reader r(j, "scene");
  const Json& agents = r.at("agents");
  if (!agents.is_array()) throw ConfigError("scene.agents: expected an array");
  for (const Json& a : agents) s.agents.push_back(agent_from(a, "scene.agents[]"));
  const Json& objects = r.at("objects");
  if (!objects.is_array()) throw ConfigError("scene.objects: expected an array");
  for (const Json& oj : objects) {
    Reader ro(oj, "scene.objects[]");
    ObjectTrack o;
    o.id = ro.req<int>("id");
    o.l = ro.req<double>("l");
    o.w = ro.req<double>("w");
    o.h = ro.req<double>("h");
    const Json& wps = ro.at("waypoints");
    if (!wps.is_array()) throw ConfigError("scene.objects[].waypoints: expected an array");
    for (const Json& wj : wps) {
      Reader rw(wj, "waypoint");
      Waypoint w;
      w.t = rw.req<double>("t");
      w.pose = pose_from(rw.at("pose"), "waypoint.pose");
      o.waypoints.push_back(w);
    }
    s.objects.push_back(std::move(o));
  }
  s.duration = r.req<double>("duration");
  s.ego_id = r.req<int>("ego_id");
  s.seed = r.req<std::uint64_t>("seed");
  s.frequency = r.req<double>("frequency");
  s.angular_resolution_deg = r.req<double>("angular_resolution_deg");
  s.max_range = r.req<double>("max_range");
  s.clutter_density = r.req<double>("clutter_density");
  range_from(r.at("range"), s.range, "scene.range");
  validate(s);
  return s;
}

void write_frame_dir(const fs::path& dir, const Scene& scene, const std::vector<Frame>& frames) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string());
  write_file_atomic(dir / "scene.json", dump(to_json(scene)));
  for (const Frame& f : frames) {
    const fs::path fdir = dir / frame_dir_name(f.index);
    fs::create_directories(fdir, ec);
    if (ec) throw IoError("cannot create " + fdir.string());
    Json agents = Json::array();
    for (std::size_t a = 0; a < f.clouds.size(); ++a) {
      const PointCloud& c = f.clouds[a];
      const std::string file = agent_file_name(c.agent_id);
      write_file_atomic(fdir / file, encode_points(c.points));
      agents.push_back(Json{{"state", agent_json(f.states[a])},
                            {"tick_start", c.tick_start},
                            {"tick_end", c.tick_end},
                            {"points", file}});
    }
    Json gt = Json::array();
    for (const GtBox& g : f.gt) gt.push_back(gt_json(g));
    const Json meta{{"index", f.index},
                    {"ego_id", f.ego_id},
                    {"t_aligned", f.t_aligned},
                    {"agents", std::move(agents)},
                    {"gt", std::move(gt)}};
    write_file_atomic(fdir / "meta.json", dump(meta));
  }
}

FrameDir read_frame_dir(const fs::path& dir) {
  auto parse = [](const fs::path& p) {
    try {
      return Json::parse(read_file(p));
    } catch (const nlohmann::json::parse_error& e) {
      throw FormatError(p.string() + ": " + e.what());
    }
  };
  FrameDir out;
  out.scene = scene_from_json(parse(dir / "scene.json"));
  std::vector<fs::path> frame_dirs;
  std::error_code ec;
  for (const auto& entry : fs::directory_iterator(dir, ec)) {
    if (entry.is_directory() && entry.path().filename().string().rfind("frame_", 0) == 0) {
      frame_dirs.push_back(entry.path());
    }
  }
  if (ec) throw IoError("cannot list " + dir.string());
  std::sort(frame_dirs.begin(), frame_dirs.end());
  for (const fs::path& fdir : frame_dirs) {
    const Json meta = parse(fdir / "meta.json");
    Reader r(meta, fdir.filename().string());
    Frame f;
    f.index = r.req<int>("index");
    f.ego_id = r.req<int>("ego_id");
    f.t_aligned = r.req<double>("t_aligned");
    const Json& agents = r.at("agents");
    if (!agents.is_array()) throw ConfigError("meta.agents: expected an array");
    for (const Json& aj : agents) {
      Reader ra(aj, "meta.agents[]");
      AgentState st = agent_from(ra.at("state"), "meta.agents[].state");
      PointCloud c;
      c.agent_id = st.id;
      c.tick_start = ra.req<double>("tick_start");
      c.tick_end = ra.req<double>("tick_end");
      const auto file = ra.req<std::string>("points");
      if (file.find('/') != std::string::npos || file.find('\\') != std::string::npos) {
        throw ConfigError("meta.agents[].points: must be a plain file name");
      }
      c.points = decode_points(read_file(fdir / file));
      f.states.push_back(st);
      f.clouds.push_back(std::move(c));
    }
    const Json& gt = r.at("gt");
    if (!gt.is_array()) throw ConfigError("meta.gt: expected an array");
    for (const Json& g : gt) f.gt.push_back(gt_from(g, "meta.gt[]"));
    out.frames.push_back(std::move(f));
  }
  return out;
}

// ---------------------------------------------------------------------------

std::string encode_detections(const std::vector<FrameDetectionList>& frames) {
  std::string out;
  for (const FrameDetectionList& f : frames) {
    for (const Detection& d : f.detections) {
      Json j = to_json(d.bbox);
      j["frame"] = f.frame;
      j["confidence"] = d.confidence;
      out += j.dump();
      out += '\n';
    }
  }
  return out;
}

std::vector<FrameDetectionList> decode_detections(const std::string& text) {
  std::vector<FrameDetectionList> out;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    Json j;
    try {
      j = Json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw FormatError("detections line " + std::to_string(line_no) + ": " + e.what());
    }
    if (!j.is_object() || !j.contains("frame") || !j["frame"].is_number_integer() || !j.contains("confidence") ||
        !j["confidence"].is_number()) {
      throw FormatError("detections line " + std::to_string(line_no) + ": missing frame or confidence");
    }
    Detection d;
    d.confidence = j["confidence"].get<double>();
    const int frame = j["frame"].get<int>();
    j.erase("frame");
    j.erase("confidence");
    try {
      d.bbox = bbox_from_json(j);
    } catch (const ConfigError& e) {
      throw FormatError("detections line " + std::to_string(line_no) + ": " + e.what());
    }
    if (out.empty() || out.back().frame != frame) out.push_back(FrameDetectionList{frame, {}});
    out.back().detections.push_back(d);
  }
  return out;
}

Json to_json(const EvalResult& r) {
  Json ap = Json::object(), curves = Json::object(), counts = Json::object();
  for (const auto& [thr, v] : r.ap) {
    std::ostringstream key;
    key << thr;
    ap[key.str()] = v;
    const PrCurve& c = r.curves.at(thr);
    curves[key.str()] = Json{{"precision", c.precision}, {"recall", c.recall}};
    const Counts& n = r.counts.at(thr);
    counts[key.str()] = Json{{"tp", n.tp}, {"fp", n.fp}, {"fn", n.fn}};
  }
  return Json{{"ap", std::move(ap)},
              {"curves", std::move(curves)},
              {"counts", std::move(counts)},
              {"mean_center_error", r.mean_center_error},
              {"moving_objects", r.moving_objects},
              {"num_gt", r.num_gt},
              {"frames", r.frames}};
}

void save_params(const fs::path& path, const ModelParams& params) {
  std::ostringstream out(std::ios::binary);
  params.write(out);
  write_file_atomic(path, out.str());
}

ModelParams load_params(const fs::path& path) {
  std::istringstream in(read_file(path), std::ios::binary);
  return ModelParams::read(in);
}

}  // namespace tacood
