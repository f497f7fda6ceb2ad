#pragma once

#include <cstdint>
#include <deque>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "tacood/autodiff.hpp"
#include "tacood/featurizer.hpp"
#include "tacood/geometry.hpp"
#include "tacood/scene_sim.hpp"

namespace tacood {

using Mat = Eigen::MatrixXd;

// ---------------------------------------------------------------------------
// Plain value-level operations.

Eigen::VectorXd linear(const Mat& w, const Eigen::VectorXd& b, const Eigen::VectorXd& x);
Eigen::VectorXd layer_norm(const Eigen::VectorXd& x, double eps = 1e-5);
Mat attention(const Mat& q, const Mat& k, const Mat& v);
// gamma = 1 + W_gamma m, beta = W_beta m; returns gamma .* layer_norm(x) + beta.
Eigen::VectorXd mln(const Mat& w_gamma, const Mat& w_beta, const Eigen::VectorXd& x, const Eigen::VectorXd& m);
double focal_loss(double p, int y, double alpha = 0.25, double gamma = 2.0);
double smooth_l1(double x, double beta = 1.0);

// ---------------------------------------------------------------------------
// Configuration and parameters.

enum class TimestampMode { kPointwise, kFramewise };

struct ModelConfig {
  int d = 32;
  int k_roi_local = 1024;
  int k_roi_global = 512;
  int k_q = 256;
  int memory_frames = 4;
  int local_dilation = kDefaultDilationLayers;
  int global_dilation = 1;
  TimestampMode timestamp_mode = TimestampMode::kPointwise;
  AzimuthMetric azimuth_metric = AzimuthMetric::kWrapped;
  bool pos_embed_in_keys = true;
  bool temporal = true;
  bool global_attention = true;
  bool roi_regression = true;
  // BEV window around each agent, axes aligned with the world frame.
  DetectionRange range;
};

void validate(const ModelConfig& config);

// Fixed Fourier encoding of a world position.
inline constexpr int kPositionFeatureDim = 22;
Eigen::RowVectorXd position_features(const Vec2& p);

// Motion input: [dt / 0.1, relative pose x / 10, y / 10, cos, sin, vx / 10, vy / 10].
inline constexpr int kMotionInputDim = 7;
// Box code: [dx, dy, z, log l, log w, log h, sin yaw, cos yaw]; head rows prepend a logit.
inline constexpr int kBoxCodeDim = 8;
inline constexpr int kHeadDim = 1 + kBoxCodeDim;

class ModelParams {
 public:
  ModelParams() = default;
  static ModelParams init(const ModelConfig& config, std::uint64_t seed);

  const Mat& at(const std::string& name) const;
  Mat& at(const std::string& name);
  bool contains(const std::string& name) const { return tensors_.count(name) != 0; }
  const std::map<std::string, Mat>& tensors() const { return tensors_; }
  std::map<std::string, Mat>& tensors() { return tensors_; }
  int d() const;
  std::size_t size() const;  // scalar count

  void write(std::ostream& out) const;
  static ModelParams read(std::istream& in);

 private:
  std::map<std::string, Mat> tensors_;
};

bool operator==(const ModelParams& a, const ModelParams& b);

// Parameters bound to one tape. With trainable == false every tensor is a constant.
class Net {
 public:
  Net(ad::Tape& tape, const ModelParams& params, const ModelConfig& config, bool trainable);
  ad::Var operator()(const std::string& name);
  ad::Tape& tape() { return *tape_; }
  const ModelConfig& config() const { return *config_; }
  const ModelParams& params() const { return *params_; }
  bool trainable() const { return trainable_; }
  // Parameters touched so far, for gradient read-out.
  const std::map<std::string, ad::Var>& bound() const { return bound_; }
  ad::Var constant(Mat m) { return tape_->constant(std::move(m)); }

 private:
  ad::Tape* tape_;
  const ModelParams* params_;
  const ModelConfig* config_;
  bool trainable_;
  std::map<std::string, ad::Var> bound_;
};

// ---------------------------------------------------------------------------
// Queries and memory.

struct Query {
  Vec2 position;  // world frame
  Eigen::VectorXd context;
  double tau = 0.0;
  Pose agent_pose;
  Vec2 agent_velocity;
  double score = 0.0;
};

struct MemorySlot {
  int frame_index = 0;
  std::vector<Query> queries;  // descending score
};

class MemoryQueue {
 public:
  MemoryQueue(int capacity_frames, int per_frame);

  // Keeps the per_frame best queries, evicting the oldest slot when full.
  // frame_index must exceed the newest stored index.
  void push(int frame_index, std::vector<Query> queries);

  const std::deque<MemorySlot>& slots() const { return slots_; }
  const MemorySlot* newest() const { return slots_.empty() ? nullptr : &slots_.back(); }
  std::size_t total() const;
  int capacity_frames() const { return capacity_; }
  int per_frame() const { return per_frame_; }

 private:
  int capacity_;
  int per_frame_;
  std::deque<MemorySlot> slots_;
};

struct Detection {
  BBox bbox;
  double confidence = 0.0;
  int source = -1;  // agent id, or kFusedSource
};
inline constexpr int kFusedSource = -1;

// Box code relative to an anchor position, and its inverse.
Eigen::RowVectorXd encode_box(const BBox& box, const Vec2& anchor);
BBox decode_box(const Eigen::RowVectorXd& code, const Vec2& anchor);
// Decodes head rows ([logit, code]) into detections.
std::vector<Detection> decode_head(const Mat& head, std::span<const Vec2> anchors, int source);

// ---------------------------------------------------------------------------
// Graph-level building blocks.

// Selected RoI rows: embedded features plus their world positions and timestamps.
struct RoIBatch {
  ad::Var embedding;  // n x d
  std::vector<Vec2> positions;
  std::vector<double> tau;
};

struct MotionRows {
  std::vector<double> dt;        // t_ref - tau
  std::vector<Pose> rel_pose;    // query agent pose in the current agent frame
  std::vector<Vec2> velocity;    // world frame
};
MotionRows motion_rows(std::span<const Query> queries, const AgentState& agent, double t_ref);

ad::Var motion_embed(Net& net, const MotionRows& rows);

enum class Stream { kPosition, kContext, kTarget };
ad::Var mln(Net& net, Stream stream, const ad::Var& x, const ad::Var& m);

struct AlignedQueries {
  ad::Var position;  // aligned position embedding
  ad::Var content;   // aligned content
  ad::Var initial;   // un-aligned content, used for the residual
};

// New queries (tgt stream, content = RoI embedding) or stored ones (context stream,
// content = embedded stored context).
AlignedQueries mta_align(Net& net, std::span<const Query> queries, const ad::Var& content, Stream stream,
                         const AgentState& agent, double t_ref);

struct TempFusionResult {
  std::vector<Query> queries;  // current set, new RoI queries first
  ad::Var context;             // N x d decoder output
  ad::Var head;                // N x kHeadDim local head output
  std::vector<Detection> detections;
  MemoryQueue memory;
};

TempFusionResult temp_fusion_step(Net& net, const RoIBatch& local, const RoIBatch& global, const MemoryQueue& memory,
                                  const AgentState& agent, double t_aligned, int frame_index);

struct SharedQueries {
  int agent_id = 0;
  std::vector<Vec2> positions;  // world frame
  std::vector<double> scores;
  ad::Var context;  // n x d
};

struct SpatialFusionResult {
  std::vector<Vec2> positions;  // one reference position per union cell
  ad::Var query;                // padded ego rows plus position embedding
  ad::Var key;                  // all agents' padded rows plus position embedding
  ad::Var value;                // all agents' padded rows
  ad::Var fused;                // fused ego rows
  ad::Var head;
  std::vector<Detection> detections;
};

// Union of query cells snapped to the global grid, zero padding, then attention of the
// ego rows against every agent's rows.
SpatialFusionResult spatial_fusion(Net& net, std::span<const SharedQueries> agents, int ego_id);

}  // namespace tacood
