#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "tacood/fusion_core.hpp"
#include "tacood/model.hpp"
#include "tacood/scene_sim.hpp"

namespace tacood {

struct MatchResult {
  std::vector<bool> det_tp;      // per detection, input order
  std::vector<int> det_gt;       // matched gt index or -1
  std::vector<bool> gt_matched;  // per gt
};

// Confidence-descending greedy one-to-one matching on rotated BEV IoU; confidence ties
// go to the lower detection index, IoU ties to the lower gt index.
MatchResult match_greedy(std::span<const Detection> dets, std::span<const BBox> gts, double iou_thr);

struct ScoredFlag {
  double confidence = 0.0;
  bool tp = false;
};

struct PrCurve {
  std::vector<double> precision;
  std::vector<double> recall;
};

PrCurve pr_curve(std::vector<ScoredFlag> flags, std::size_t total_gt);
// Area under the precision envelope over every recall step.
double average_precision(std::vector<ScoredFlag> flags, std::size_t total_gt);

// Confidence threshold followed by rotated-IoU non-maximum suppression.
std::vector<Detection> postprocess(std::vector<Detection> dets, double min_confidence, double nms_iou);

struct CenterErrorSum {
  double sum = 0.0;
  std::size_t count = 0;
};
// Greedy nearest-center matching; each gt in `scored` (true entries) contributes its
// matched distance or `radius` when nothing lies within it.
CenterErrorSum center_errors(std::span<const Detection> dets, std::span<const BBox> gts,
                             const std::vector<bool>& scored, double radius);

struct EvalOptions {
  std::vector<double> iou_thresholds{0.5, 0.7};
  double ap_min_confidence = 0.05;
  double center_min_confidence = 0.3;
  double nms_iou = 0.1;
  double center_radius = 3.0;
  double moving_speed = 1.0;
};

struct Counts {
  std::size_t tp = 0, fp = 0, fn = 0;
};

struct EvalResult {
  std::map<double, double> ap;
  std::map<double, PrCurve> curves;
  std::map<double, Counts> counts;
  double mean_center_error = 0.0;
  std::size_t moving_objects = 0;
  std::size_t num_gt = 0;
  std::size_t frames = 0;
};

struct FrameDetections {
  std::vector<Detection> detections;
  std::vector<GtBox> gt;
};

EvalResult evaluate_detections(std::span<const FrameDetections> frames, const EvalOptions& options = {});

// Cooperative agents' data of frame j replaced by frame j - k (timestamps untouched);
// the first k frames are dropped. Ego data is never altered.
std::vector<Frame> inject_latency(const std::vector<Frame>& frames, int k);
std::vector<FrameObservation> inject_latency(const std::vector<FrameObservation>& frames, int k);

}  // namespace tacood
