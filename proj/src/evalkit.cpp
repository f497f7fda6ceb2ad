#include "tacood/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace tacood {

namespace {

std::vector<std::size_t> by_confidence(std::span<const Detection> dets) {
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dets[a].confidence > dets[b].confidence; });
  return order;
}

void sort_flags(std::vector<ScoredFlag>& flags) {
  std::stable_sort(flags.begin(), flags.end(),
                   [](const ScoredFlag& a, const ScoredFlag& b) { return a.confidence > b.confidence; });
}

template <typename F>
std::vector<F> delay(const std::vector<F>& frames, int k, auto&& swap_coop) {
  if (k < 0) throw std::invalid_argument("inject_latency: k must be >= 0");
  if (!frames.empty() && static_cast<std::size_t>(k) >= frames.size()) {
    throw std::invalid_argument("inject_latency: k exceeds the sequence length");
  }
  std::vector<F> out;
  for (std::size_t j = static_cast<std::size_t>(k); j < frames.size(); ++j) {
    F f = frames[j];
    swap_coop(f, frames[j - static_cast<std::size_t>(k)]);
    out.push_back(std::move(f));
  }
  return out;
}

}  // namespace

MatchResult match_greedy(std::span<const Detection> dets, std::span<const BBox> gts, double iou_thr) {
  if (!(iou_thr > 0.0 && iou_thr < 1.0)) throw std::invalid_argument("match_greedy: iou_thr must lie in (0, 1)");
  MatchResult m;
  m.det_tp.assign(dets.size(), false);
  m.det_gt.assign(dets.size(), -1);
  m.gt_matched.assign(gts.size(), false);
  for (const std::size_t d : by_confidence(dets)) {
    int best = -1;
    double best_iou = iou_thr;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (m.gt_matched[g]) continue;
      const double iou = rotated_iou_bev(dets[d].bbox, gts[g]);
      if (iou >= best_iou && (best < 0 || iou > best_iou)) {
        best = static_cast<int>(g);
        best_iou = iou;
      }
    }
    if (best >= 0) {
      m.det_tp[d] = true;
      m.det_gt[d] = best;
      m.gt_matched[static_cast<std::size_t>(best)] = true;
    }
  }
  return m;
}

PrCurve pr_curve(std::vector<ScoredFlag> flags, std::size_t total_gt) {
  if (total_gt == 0) throw std::invalid_argument("pr_curve: no ground-truth boxes");
  sort_flags(flags);
  PrCurve c;
  double tp = 0, fp = 0;
  for (const ScoredFlag& f : flags) {
    (f.tp ? tp : fp) += 1.0;
    c.precision.push_back(tp / (tp + fp));
    c.recall.push_back(tp / static_cast<double>(total_gt));
  }
  return c;
}

double average_precision(std::vector<ScoredFlag> flags, std::size_t total_gt) {
  if (total_gt == 0) throw std::invalid_argument("average_precision: no ground-truth boxes");
  const PrCurve c = pr_curve(std::move(flags), total_gt);
  std::vector<double> envelope = c.precision;
  for (std::size_t i = envelope.size(); i-- > 1;) envelope[i - 1] = std::max(envelope[i - 1], envelope[i]);
  double ap = 0.0, prev_recall = 0.0;
  for (std::size_t i = 0; i < envelope.size(); ++i) {
    ap += (c.recall[i] - prev_recall) * envelope[i];
    prev_recall = c.recall[i];
  }
  return std::clamp(ap, 0.0, 1.0);
}

std::vector<Detection> postprocess(std::vector<Detection> dets, double min_confidence, double nms_iou) {
  std::vector<Detection> kept;
  for (const std::size_t i : by_confidence(dets)) {
    const Detection& d = dets[i];
    if (d.confidence < min_confidence) continue;
    bool suppressed = false;
    for (const Detection& k : kept) {
      if (rotated_iou_bev(d.bbox, k.bbox) > nms_iou) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(d);
  }
  return kept;
}

CenterErrorSum center_errors(std::span<const Detection> dets, std::span<const BBox> gts,
                             const std::vector<bool>& scored, double radius) {
  if (scored.size() != gts.size()) throw std::invalid_argument("center_errors: scored mask size mismatch");
  struct Pair {
    double dist;
    std::size_t det, gt;
  };
  std::vector<Pair> pairs;
  for (std::size_t d = 0; d < dets.size(); ++d) {
    for (std::size_t g = 0; g < gts.size(); ++g) {
      const double dist = std::hypot(dets[d].bbox.center.x - gts[g].center.x, dets[d].bbox.center.y - gts[g].center.y);
      if (dist <= radius) pairs.push_back({dist, d, g});
    }
  }
  std::sort(pairs.begin(), pairs.end(), [](const Pair& a, const Pair& b) {
    if (a.dist != b.dist) return a.dist < b.dist;
    return a.det != b.det ? a.det < b.det : a.gt < b.gt;
  });
  std::vector<bool> det_used(dets.size(), false);
  std::vector<double> err(gts.size(), radius);
  std::vector<bool> gt_used(gts.size(), false);
  for (const Pair& p : pairs) {
    if (det_used[p.det] || gt_used[p.gt]) continue;
    det_used[p.det] = gt_used[p.gt] = true;
    err[p.gt] = p.dist;
  }
  CenterErrorSum s;
  for (std::size_t g = 0; g < gts.size(); ++g) {
    if (!scored[g]) continue;
    s.sum += err[g];
    ++s.count;
  }
  return s;
}

EvalResult evaluate_detections(std::span<const FrameDetections> frames, const EvalOptions& options) {
  EvalResult r;
  r.frames = frames.size();
  std::map<double, std::vector<ScoredFlag>> flags;
  CenterErrorSum center;
  for (const FrameDetections& f : frames) {
    const std::vector<Detection> dets = postprocess(f.detections, options.ap_min_confidence, options.nms_iou);
    std::vector<BBox> boxes;
    std::vector<bool> moving;
    for (const GtBox& g : f.gt) {
      boxes.push_back(g.box);
      moving.push_back(std::hypot(g.velocity.x, g.velocity.y) > options.moving_speed);
    }
    r.num_gt += boxes.size();
    for (const double thr : options.iou_thresholds) {
      const MatchResult m = match_greedy(dets, boxes, thr);
      Counts& c = r.counts[thr];
      for (std::size_t d = 0; d < dets.size(); ++d) {
        flags[thr].push_back({dets[d].confidence, m.det_tp[d]});
        (m.det_tp[d] ? c.tp : c.fp) += 1;
      }
      for (const bool matched : m.gt_matched) c.fn += matched ? 0 : 1;
    }
    std::vector<Detection> confident;
    for (const Detection& d : dets) {
      if (d.confidence >= options.center_min_confidence) confident.push_back(d);
    }
    const CenterErrorSum s = center_errors(confident, boxes, moving, options.center_radius);
    center.sum += s.sum;
    center.count += s.count;
  }
  for (const double thr : options.iou_thresholds) {
    r.ap[thr] = r.num_gt == 0 ? 0.0 : average_precision(flags[thr], r.num_gt);
    r.curves[thr] = r.num_gt == 0 ? PrCurve{} : pr_curve(flags[thr], r.num_gt);
    r.counts[thr];
  }
  r.moving_objects = center.count;
  r.mean_center_error = center.count == 0 ? 0.0 : center.sum / static_cast<double>(center.count);
  return r;
}

std::vector<Frame> inject_latency(const std::vector<Frame>& frames, int k) {
  return delay(frames, k, [](Frame& f, const Frame& old) {
    if (old.clouds.size() != f.clouds.size() || old.states.size() != f.states.size()) {
      throw std::invalid_argument("inject_latency: agent sets differ between frames");
    }
    for (std::size_t a = 0; a < f.states.size(); ++a) {
      if (f.states[a].id == f.ego_id) continue;
      f.clouds[a] = old.clouds[a];
      f.states[a] = old.states[a];
    }
  });
}

std::vector<FrameObservation> inject_latency(const std::vector<FrameObservation>& frames, int k) {
  return delay(frames, k, [](FrameObservation& f, const FrameObservation& old) {
    for (AgentObservation& a : f.agents) {
      if (a.agent_id == f.ego_id) continue;
      const AgentObservation* o = old.agent(a.agent_id);
      if (o == nullptr) throw std::invalid_argument("inject_latency: agent missing from an earlier frame");
      a = *o;
    }
  });
}

}  // namespace tacood
