#include "tacood/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace tacood {

namespace {

RoICandidates candidates_from(const SparseBEVGrid& grid, const Vec2& center, const AzimuthIndex& index,
                              const Pose& sensor_inv) {
  RoICandidates c;
  c.features.resize(static_cast<Eigen::Index>(grid.cells.size()), grid.feature_dim);
  Eigen::Index r = 0;
  for (const auto& [key, f] : grid.cells) {
    for (int k = 0; k < grid.feature_dim; ++k) c.features(r, k) = f[static_cast<std::size_t>(k)];
    const Vec2 local = grid.cell_center(key);
    const Vec2 world{center.x + local.x, center.y + local.y};
    c.positions.push_back(world);
    c.tau.push_back(index.timestamp(transform_point(sensor_inv, world)));
    ++r;
  }
  return c;
}

std::vector<int> top_indices(const std::vector<double>& scores, int k) {
  std::vector<int> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  const auto keep = std::min(idx.size(), static_cast<std::size_t>(std::max(k, 0)));
  // Candidate order is lexicographic in cell coordinates, so index order breaks ties.
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(keep), idx.end(), [&](int a, int b) {
    const double sa = scores[static_cast<std::size_t>(a)], sb = scores[static_cast<std::size_t>(b)];
    return sa != sb ? sa > sb : a < b;
  });
  idx.resize(keep);
  return idx;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

int containing_box(const std::vector<GtBox>& boxes, const Vec2& p) {
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    if (point_in_bbox_bev(boxes[i].box, p)) return static_cast<int>(i);
  }
  return -1;
}

FrameResult run_frame_impl(const ModelParams& params, const ModelConfig& config, const FrameObservation& frame,
                           MemoryMap& memories, ad::Tape& tape, bool trainable, const PipelineOptions& options,
                           bool fuse) {
  FrameResult out;
  Net train_net(tape, params, config, trainable);
  Net fixed_net(tape, params, config, false);
  for (const AgentObservation& obs : frame.agents) {
    if (obs.local.positions.empty()) continue;
    const bool supervised = obs.agent_id == frame.ego_id || options.grad_all_agents;
    Net& net = trainable && supervised ? train_net : fixed_net;
    std::vector<double> oracle;
    if (options.oracle_roi) {
      for (const Vec2& p : obs.local.positions) oracle.push_back(containing_box(frame.labels, p) >= 0 ? 1.0 : 0.0);
    }
    RoISelection roi = select_local_rois(net, obs, config.k_roi_local, options.oracle_roi ? &oracle : nullptr);
    const RoIBatch global = select_global_rois(net, obs, config.k_roi_global);
    auto it = memories.try_emplace(obs.agent_id, config.memory_frames, config.k_q).first;
    TempFusionResult temp = temp_fusion_step(net, roi.batch, global, it->second, obs.state, frame.t_aligned, frame.index);
    it->second = temp.memory;
    out.agents.push_back(AgentFrameResult{obs.agent_id, supervised, std::move(roi), std::move(temp)});
  }
  if (!fuse) return out;

  std::vector<SharedQueries> shares;
  bool has_ego = false;
  for (const AgentFrameResult& a : out.agents) {
    SharedQueries s;
    s.agent_id = a.agent_id;
    s.context = a.temp.context;
    for (const Query& q : a.temp.queries) {
      s.positions.push_back(q.position);
      s.scores.push_back(q.score);
    }
    has_ego = has_ego || a.agent_id == frame.ego_id;
    shares.push_back(std::move(s));
  }
  if (!has_ego) {
    SharedQueries empty;
    empty.agent_id = frame.ego_id;
    shares.push_back(std::move(empty));
  }
  out.fused = spatial_fusion(train_net, shares, frame.ego_id);
  if (trainable) out.params = train_net.bound();
  return out;
}

struct HeadTargets {
  std::vector<double> cls;
  Mat reg;
  std::vector<double> weight;
  int positives = 0;
};

HeadTargets head_targets(std::span<const Vec2> anchors, const std::vector<GtBox>& labels) {
  HeadTargets t;
  t.reg = Mat::Zero(static_cast<Eigen::Index>(anchors.size()), kBoxCodeDim);
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    const int g = containing_box(labels, anchors[i]);
    t.cls.push_back(g >= 0 ? 1.0 : 0.0);
    t.weight.push_back(g >= 0 ? 1.0 : 0.0);
    if (g >= 0) {
      t.reg.row(static_cast<Eigen::Index>(i)) = encode_box(labels[static_cast<std::size_t>(g)].box, anchors[i]);
      ++t.positives;
    }
  }
  return t;
}

// (cls + reg) / max(1, positives); returns the two raw sums through the out-params.
ad::Var head_loss(const ad::Var& head, std::span<const Vec2> anchors, const std::vector<GtBox>& labels,
                  bool regression, const LossWeights& w, double& cls_out, double& reg_out) {
  const HeadTargets t = head_targets(anchors, labels);
  const double norm = 1.0 / std::max(1, t.positives);
  ad::Var cls = ad::focal_loss_sum(ad::slice_cols(head, 0, 1), t.cls);
  cls_out += cls.value()(0, 0) * norm;
  ad::Var total = ad::scale(cls, w.cls * norm);
  if (regression && t.positives > 0) {
    const ad::Var reg = ad::smooth_l1_sum(ad::slice_cols(head, 1, kBoxCodeDim), t.reg, t.weight);
    reg_out += reg.value()(0, 0) * norm;
    total = ad::add(total, ad::scale(reg, w.reg * norm));
  }
  return total;
}

}  // namespace

const AgentObservation* FrameObservation::agent(int id) const {
  for (const auto& a : agents) {
    if (a.agent_id == id) return &a;
  }
  return nullptr;
}

AgentObservation observe_agent(const PointCloud& raw_cloud, const AgentState& state, const ModelConfig& config) {
  const PointCloud cloud = config.timestamp_mode == TimestampMode::kFramewise ? to_framewise(raw_cloud) : raw_cloud;
  AgentObservation obs;
  obs.agent_id = cloud.agent_id;
  obs.state = state;
  obs.tick_start = cloud.tick_start;
  obs.tick_end = cloud.tick_end;

  const Pose sensor = state.pose_at(cloud.tick_start);
  const Vec2 center{sensor.x, sensor.y};
  PointCloud local;
  local.agent_id = cloud.agent_id;
  local.tick_start = cloud.tick_start;
  local.tick_end = cloud.tick_end;
  local.points.reserve(cloud.points.size());
  for (const TimedPoint& p : cloud.points) {
    const Vec3 w = transform_point(state.pose_at(p.t), Vec3{p.x, p.y, p.z});
    local.points.push_back(TimedPoint{w.x - center.x, w.y - center.y, w.z, p.t});
  }
  const SparseBEVGrid raw = voxelize(local, kLocalResolution, cloud.tick_end, config.range);
  if (raw.cells.empty()) return obs;

  const AzimuthIndex index(cloud, config.azimuth_metric);
  const Pose sensor_inv = inverse(sensor);
  obs.local = candidates_from(context_features(dilate_grid(raw, config.local_dilation)), center, index, sensor_inv);
  const int factor = static_cast<int>(std::lround(kGlobalResolution / kLocalResolution));
  obs.global = candidates_from(context_features(dilate_grid(downsample_grid(raw, factor), config.global_dilation)),
                               center, index, sensor_inv);
  return obs;
}

FrameObservation observe_frame(const Scene& scene, const Frame& frame, const ModelConfig& config) {
  if (frame.clouds.size() != frame.states.size()) throw std::invalid_argument("observe_frame: clouds/states mismatch");
  FrameObservation out;
  out.index = frame.index;
  out.ego_id = frame.ego_id;
  out.t_aligned = frame.t_aligned;
  out.gt = frame.gt;
  for (const ObjectTrack& o : scene.objects) {
    out.labels.push_back(GtBox{o.id, object_box_at(o, frame.t_aligned), object_velocity_at(o, frame.t_aligned)});
  }
  for (std::size_t a = 0; a < frame.clouds.size(); ++a) {
    out.agents.push_back(observe_agent(frame.clouds[a], frame.states[a], config));
  }
  return out;
}

RoISelection select_local_rois(Net& net, const AgentObservation& obs, int k, const std::vector<double>* oracle_scores) {
  const auto n = static_cast<std::size_t>(obs.local.features.rows());
  if (n == 0) throw std::invalid_argument("select_local_rois: no candidates");
  if (oracle_scores != nullptr && oracle_scores->size() != n) {
    throw std::invalid_argument("select_local_rois: oracle score count mismatch");
  }
  const ad::Var x = net.constant(obs.local.features);
  const ad::Var emb = ad::tanh(ad::linear(x, net("embed.local.W"), net("embed.local.b")));
  RoISelection sel;
  sel.head = ad::linear(emb, net("roi.local.W"), net("roi.local.b"));
  std::vector<double> scores;
  if (oracle_scores != nullptr) {
    scores = *oracle_scores;
  } else {
    scores.resize(n);
    for (std::size_t i = 0; i < n; ++i) scores[i] = sigmoid(sel.head.value()(static_cast<Eigen::Index>(i), 0));
  }
  sel.indices = top_indices(scores, k);
  sel.batch.embedding = ad::gather_rows(emb, sel.indices);
  for (const int i : sel.indices) {
    sel.batch.positions.push_back(obs.local.positions[static_cast<std::size_t>(i)]);
    sel.batch.tau.push_back(obs.local.tau[static_cast<std::size_t>(i)]);
  }
  return sel;
}

RoIBatch select_global_rois(Net& net, const AgentObservation& obs, int k) {
  RoIBatch out;
  const auto n = static_cast<std::size_t>(obs.global.features.rows());
  if (n == 0) return out;
  const ad::Var x = net.constant(obs.global.features);
  const ad::Var emb = ad::tanh(ad::linear(x, net("embed.global.W"), net("embed.global.b")));
  const ad::Var score = ad::sigmoid(ad::linear(emb, net("roi.global.W"), net("roi.global.b")));
  const ad::Var weighted = ad::mul_col(emb, score);
  std::vector<double> s(n);
  for (std::size_t i = 0; i < n; ++i) s[i] = score.value()(static_cast<Eigen::Index>(i), 0);
  const std::vector<int> idx = top_indices(s, k);
  out.embedding = ad::gather_rows(weighted, idx);
  for (const int i : idx) {
    out.positions.push_back(obs.global.positions[static_cast<std::size_t>(i)]);
    out.tau.push_back(obs.global.tau[static_cast<std::size_t>(i)]);
  }
  return out;
}

FrameResult run_frame(const ModelParams& params, const ModelConfig& config, const FrameObservation& frame,
                      MemoryMap& memories, ad::Tape& tape, bool trainable, const PipelineOptions& options) {
  return run_frame_impl(params, config, frame, memories, tape, trainable, options, true);
}

MemoryMap warm_memory(const ModelParams& params, const ModelConfig& config, std::span<const FrameObservation> frames,
                      const PipelineOptions& options) {
  MemoryMap memories;
  for (const FrameObservation& f : frames) {
    ad::Tape scratch;
    run_frame_impl(params, config, f, memories, scratch, false, options, false);
  }
  return memories;
}

FrameResult run_window(const ModelParams& params, const ModelConfig& config, std::span<const FrameObservation> window,
                       ad::Tape& tape, bool trainable, const PipelineOptions& options) {
  if (window.empty()) throw std::invalid_argument("run_window: empty window");
  MemoryMap memories = warm_memory(params, config, window.first(window.size() - 1), options);
  return run_frame_impl(params, config, window.back(), memories, tape, trainable, options, true);
}

ad::Var frame_loss(ad::Tape& tape, const FrameResult& result, const FrameObservation& frame,
                   const ModelConfig& config, const LossWeights& weights, LossBreakdown* breakdown) {
  LossBreakdown b;
  ad::Var total = tape.constant(Mat::Zero(1, 1));
  for (const AgentFrameResult& a : result.agents) {
    if (!a.supervised) continue;
    const AgentObservation* obs = frame.agent(a.agent_id);
    total = ad::add(total, head_loss(a.roi.head, obs->local.positions, frame.labels, config.roi_regression, weights,
                                     b.roi_cls, b.roi_reg));
    std::vector<Vec2> anchors;
    for (const Query& q : a.temp.queries) anchors.push_back(q.position);
    total = ad::add(total, head_loss(a.temp.head, anchors, frame.labels, true, weights, b.local_cls, b.local_reg));
  }
  if (!result.fused.positions.empty()) {
    total = ad::add(total, head_loss(result.fused.head, result.fused.positions, frame.labels, true, weights,
                                     b.global_cls, b.global_reg));
  }
  b.total = total.value()(0, 0);
  if (breakdown != nullptr) *breakdown = b;
  return total;
}

}  // namespace tacood
