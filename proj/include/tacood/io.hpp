#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "tacood/evalkit.hpp"
#include "tacood/format_error.hpp"
#include "tacood/train.hpp"

namespace tacood {

// A file that cannot be opened, read or written.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

using Json = nlohmann::json;

// Writes to a sibling temporary file, then renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, const std::string& bytes);
std::string read_file(const std::filesystem::path& path);

// Point files: "TPCD", u16 version, u32 count, then count x (f32 x, y, z, t), little-endian.
inline constexpr std::uint16_t kPointFileVersion = 1;
std::string encode_points(const std::vector<TimedPoint>& points);
// Throws FormatError on bad magic, version or length.
std::vector<TimedPoint> decode_points(const std::string& bytes);

// JSON schemas. Readers throw ConfigError on unknown keys or ill-typed values; absent keys
// keep their defaults.
Json to_json(const ScenarioConfig& c);
Json to_json(const ModelConfig& c);
Json to_json(const TrainConfig& c);
Json to_json(const ToyDataConfig& c);
void from_json(const Json& j, ScenarioConfig& c);
void from_json(const Json& j, ModelConfig& c);
void from_json(const Json& j, TrainConfig& c);
void from_json(const Json& j, ToyDataConfig& c);

Json to_json(const Scene& scene);
Scene scene_from_json(const Json& j);

Json to_json(const BBox& b);
BBox bbox_from_json(const Json& j);

// Top-level run configuration: {"scenario", "model", "train", "data"}, each optional.
struct RunConfig {
  ScenarioConfig scenario;
  ModelConfig model = toy_model_config();
  TrainConfig train;
  ToyDataConfig data;
};
Json to_json(const RunConfig& c);
RunConfig run_config_from_json(const Json& j);
RunConfig load_run_config(const std::filesystem::path& path);

// Frame directory: scene.json plus frame_NNNNNN/{meta.json, agent_<id>.tpcd}.
void write_frame_dir(const std::filesystem::path& dir, const Scene& scene, const std::vector<Frame>& frames);
struct FrameDir {
  Scene scene;
  std::vector<Frame> frames;
};
FrameDir read_frame_dir(const std::filesystem::path& dir);

// Detections as JSON lines: {"frame", "x", "y", "z", "l", "w", "h", "yaw", "confidence"}.
struct FrameDetectionList {
  int frame = 0;
  std::vector<Detection> detections;
};
std::string encode_detections(const std::vector<FrameDetectionList>& frames);
std::vector<FrameDetectionList> decode_detections(const std::string& text);

Json to_json(const EvalResult& r);

// Parameter files wrap ModelParams::write/read.
void save_params(const std::filesystem::path& path, const ModelParams& params);
ModelParams load_params(const std::filesystem::path& path);

// Shortest round-trip JSON text with a trailing newline.
std::string dump(const Json& j);

}  // namespace tacood
