#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "tacood/fusion_core.hpp"

namespace tacood {

// Scored-cell candidates of one agent at one resolution. Positions are world-frame
// cell centers; tau is the nearest-azimuth point time of each cell.
struct RoICandidates {
  Mat features;  // n x kCellFeatureDim
  std::vector<Vec2> positions;
  std::vector<double> tau;
};

struct AgentObservation {
  int agent_id = 0;
  AgentState state;  // reported at tick_start
  double tick_start = 0.0;
  double tick_end = 0.0;
  RoICandidates local;
  RoICandidates global;
};

struct FrameObservation {
  int index = 0;
  int ego_id = 0;
  double t_aligned = 0.0;
  std::vector<AgentObservation> agents;
  std::vector<GtBox> gt;      // inside the ego's detection range, for evaluation
  std::vector<GtBox> labels;  // every object, for training targets

  const AgentObservation* agent(int id) const;
};

// Featurizes one scan: points are placed in an agent-centred, world-aligned BEV window,
// voxelized, dilated and summarized with neighbourhood statistics.
AgentObservation observe_agent(const PointCloud& cloud, const AgentState& state, const ModelConfig& config);
// Labels cover every scene object at t_aligned.
FrameObservation observe_frame(const Scene& scene, const Frame& frame, const ModelConfig& config);

struct RoISelection {
  RoIBatch batch;
  ad::Var head;  // all candidates x kHeadDim
  std::vector<int> indices;
};

// Top-k local cells by RoI-head confidence, or by `oracle_scores` when given.
RoISelection select_local_rois(Net& net, const AgentObservation& obs, int k,
                               const std::vector<double>* oracle_scores = nullptr);
// Top-k global cells; embeddings are weighted by the scorer's confidence.
RoIBatch select_global_rois(Net& net, const AgentObservation& obs, int k);

struct PipelineOptions {
  bool grad_all_agents = false;
  bool oracle_roi = false;
};

struct AgentFrameResult {
  int agent_id = 0;
  bool supervised = false;  // the ego, or every agent with grad_all_agents
  RoISelection roi;
  TempFusionResult temp;
};

struct FrameResult {
  std::vector<AgentFrameResult> agents;
  SpatialFusionResult fused;
  std::map<std::string, ad::Var> params;  // trainable parameter nodes, empty when not trainable
};

using MemoryMap = std::map<int, MemoryQueue>;

// One frame through every agent's TempFusion, then spatial fusion at the ego.
// Memories are advanced in place.
FrameResult run_frame(const ModelParams& params, const ModelConfig& config, const FrameObservation& frame,
                      MemoryMap& memories, ad::Tape& tape, bool trainable, const PipelineOptions& options = {});

// Memories after running `frames` oldest-first from empty, without fusion or gradients.
MemoryMap warm_memory(const ModelParams& params, const ModelConfig& config, std::span<const FrameObservation> frames,
                      const PipelineOptions& options = {});

// Runs a window oldest-first from empty memories; only the newest frame is recorded
// on `tape` (earlier frames use throwaway tapes).
FrameResult run_window(const ModelParams& params, const ModelConfig& config, std::span<const FrameObservation> window,
                       ad::Tape& tape, bool trainable, const PipelineOptions& options = {});

struct LossWeights {
  double cls = 1.0;
  double reg = 1.0;
};

struct LossBreakdown {
  double roi_cls = 0, roi_reg = 0, local_cls = 0, local_reg = 0, global_cls = 0, global_reg = 0, total = 0;
};

// Focal + smooth-L1 over the RoI head, LQDet and GQDet for the frame's targets.
ad::Var frame_loss(ad::Tape& tape, const FrameResult& result, const FrameObservation& frame,
                   const ModelConfig& config, const LossWeights& weights = {}, LossBreakdown* breakdown = nullptr);

}  // namespace tacood
