#include "tacood/featurizer.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace tacood {

namespace {

std::int32_t floor_div(std::int32_t a, std::int32_t b) {
  std::int32_t q = a / b;
  if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
  return q;
}

}  // namespace

Vec2 SparseBEVGrid::cell_center(const CellKey& key) const {
  return {origin.x + (key.i + 0.5) * resolution, origin.y + (key.j + 0.5) * resolution};
}

SparseBEVGrid voxelize(const PointCloud& cloud, double resolution, double t_ref, const DetectionRange& range) {
  if (!(resolution > 0.0)) throw std::invalid_argument("voxelize: resolution must be > 0");
  SparseBEVGrid grid;
  grid.resolution = resolution;
  grid.origin = {range.x_min, range.y_min};
  grid.feature_dim = kRawFeatureDim;

  struct Acc {
    double n = 0, dx = 0, dy = 0, z = 0, dt = 0;
  };
  std::map<CellKey, Acc> acc;
  for (const auto& p : cloud.points) {
    if (!range.contains(p.x, p.y)) continue;
    const CellKey key{static_cast<std::int32_t>(std::floor((p.x - grid.origin.x) / resolution)),
                      static_cast<std::int32_t>(std::floor((p.y - grid.origin.y) / resolution))};
    const Vec2 c = grid.cell_center(key);
    Acc& a = acc[key];
    a.n += 1.0;
    a.dx += (p.x - c.x) / resolution;
    a.dy += (p.y - c.y) / resolution;
    a.z += p.z;
    a.dt += p.t - t_ref;
  }
  for (const auto& [key, a] : acc) {
    grid.cells.emplace(key, std::vector<double>{a.n / kCountScale, a.dx / a.n, a.dy / a.n, a.z / a.n, a.dt / a.n});
  }
  return grid;
}

SparseBEVGrid downsample_grid(const SparseBEVGrid& grid, int factor) {
  if (factor < 1) throw std::invalid_argument("downsample_grid: factor must be >= 1");
  if (factor == 1) return grid;
  SparseBEVGrid out;
  out.resolution = grid.resolution * factor;
  out.origin = grid.origin;
  out.feature_dim = grid.feature_dim;
  std::map<CellKey, std::pair<int, std::vector<double>>> sums;
  for (const auto& [key, f] : grid.cells) {
    const CellKey k{floor_div(key.i, factor), floor_div(key.j, factor)};
    auto& [n, s] = sums[k];
    if (s.empty()) s.assign(f.size(), 0.0);
    for (std::size_t d = 0; d < f.size(); ++d) s[d] += f[d];
    ++n;
  }
  for (auto& [key, ns] : sums) {
    auto& [n, s] = ns;
    for (double& v : s) v /= n;
    out.cells.emplace(key, std::move(s));
  }
  return out;
}

SparseBEVGrid dilate_grid(const SparseBEVGrid& grid, int layers) {
  if (layers < 0) throw std::invalid_argument("dilate_grid: layers must be >= 0");
  SparseBEVGrid out = grid;
  const std::vector<double> zero(static_cast<std::size_t>(grid.feature_dim), 0.0);
  for (int layer = 0; layer < layers; ++layer) {
    std::vector<CellKey> frontier;
    frontier.reserve(out.cells.size());
    for (const auto& kv : out.cells) frontier.push_back(kv.first);
    for (const CellKey& k : frontier) {
      for (int di = -1; di <= 1; ++di) {
        for (int dj = -1; dj <= 1; ++dj) out.cells.try_emplace(CellKey{k.i + di, k.j + dj}, zero);
      }
    }
  }
  return out;
}

SparseBEVGrid context_features(const SparseBEVGrid& raw, std::span<const int> radii) {
  if (raw.feature_dim != kRawFeatureDim) throw std::invalid_argument("context_features: expects raw pillar features");
  SparseBEVGrid out;
  out.resolution = raw.resolution;
  out.origin = raw.origin;
  out.feature_dim = kRawFeatureDim * static_cast<int>(1 + radii.size());
  for (const auto& [key, own] : raw.cells) {
    std::vector<double> f(own);
    f.reserve(static_cast<std::size_t>(out.feature_dim));
    for (const int r : radii) {
      if (r < 1) throw std::invalid_argument("context_features: radius must be >= 1");
      double n = 0, sx = 0, sy = 0, sz = 0, st = 0;
      for (int di = -r; di <= r; ++di) {
        for (int dj = -r; dj <= r; ++dj) {
          const auto it = raw.cells.find(CellKey{key.i + di, key.j + dj});
          if (it == raw.cells.end()) continue;
          const auto& g = it->second;
          const double c = g[0] * kCountScale;
          if (c <= 0.0) continue;
          n += c;
          sx += c * (di + g[1]);
          sy += c * (dj + g[2]);
          sz += c * g[3];
          st += c * g[4];
        }
      }
      const double side = 2.0 * r + 1.0;
      f.push_back(n / (kCountScale * side * side));
      if (n > 0) {
        f.push_back(sx / n / (r + 1));
        f.push_back(sy / n / (r + 1));
        f.push_back(sz / n);
        f.push_back(st / n);
      } else {
        f.insert(f.end(), 4, 0.0);
      }
    }
    out.cells.emplace(key, std::move(f));
  }
  return out;
}

std::vector<RoIPoint> score_topk(std::vector<RoIPoint> candidates, int k) {
  if (k < 1) throw std::invalid_argument("score_topk: k must be >= 1");
  const auto better = [](const RoIPoint& a, const RoIPoint& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.cell < b.cell;
  };
  const std::size_t keep = std::min(candidates.size(), static_cast<std::size_t>(k));
  std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(keep), candidates.end(),
                    better);
  candidates.resize(keep);
  return candidates;
}

std::vector<RoIPoint> grid_candidates(const SparseBEVGrid& grid) {
  std::vector<RoIPoint> out;
  out.reserve(grid.cells.size());
  for (const auto& [key, f] : grid.cells) {
    RoIPoint r;
    r.cell = key;
    r.position = grid.cell_center(key);
    r.feature = f;
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<double> ground_truth_scores(const std::vector<RoIPoint>& candidates, const Pose& agent_pose,
                                        std::span<const GtBox> gt) {
  std::vector<double> scores(candidates.size(), 0.0);
  for (std::size_t n = 0; n < candidates.size(); ++n) {
    const Vec2 w = transform_point(agent_pose, candidates[n].position);
    for (const auto& g : gt) {
      if (point_in_bbox_bev(g.box, w)) {
        scores[n] = 1.0;
        break;
      }
    }
  }
  return scores;
}

double azimuth_distance(double a, double b, AzimuthMetric metric) {
  const double d = std::abs(a - b);
  if (metric == AzimuthMetric::kNaive) return d;
  return std::min(d, 2.0 * kPi - d);
}

AzimuthIndex::AzimuthIndex(const PointCloud& cloud, AzimuthMetric metric) : cloud_(&cloud), metric_(metric) {
  sorted_.reserve(cloud.points.size());
  for (std::size_t i = 0; i < cloud.points.size(); ++i) {
    sorted_.push_back({std::atan2(cloud.points[i].y, cloud.points[i].x), i});
  }
  std::sort(sorted_.begin(), sorted_.end(), [](const Entry& a, const Entry& b) {
    return a.azimuth < b.azimuth || (a.azimuth == b.azimuth && a.index < b.index);
  });
}

std::size_t AzimuthIndex::group_first(std::size_t pos) const {
  const double az = sorted_[pos].azimuth;
  while (pos > 0 && sorted_[pos - 1].azimuth == az) --pos;
  return pos;
}

std::size_t AzimuthIndex::nearest(const Vec2& query_xy) const {
  if (sorted_.empty()) throw std::invalid_argument("assign_query_timestamp: empty cloud");
  const double q = std::atan2(query_xy.y, query_xy.x);
  const auto it = std::lower_bound(sorted_.begin(), sorted_.end(), q,
                                   [](const Entry& e, double v) { return e.azimuth < v; });
  const auto pos = static_cast<std::size_t>(it - sorted_.begin());
  const std::size_t n = sorted_.size();

  std::size_t cand[2] = {0, 0};
  int nc = 0;
  const bool wrap = metric_ == AzimuthMetric::kWrapped;
  if (pos < n) {
    cand[nc++] = pos;
  } else if (wrap) {
    cand[nc++] = 0;
  }
  if (pos > 0) {
    cand[nc++] = group_first(pos - 1);
  } else if (wrap) {
    cand[nc++] = group_first(n - 1);
  }

  std::size_t best = sorted_[cand[0]].index;
  double best_d = azimuth_distance(q, sorted_[cand[0]].azimuth, metric_);
  for (int c = 1; c < nc; ++c) {
    const double d = azimuth_distance(q, sorted_[cand[c]].azimuth, metric_);
    const std::size_t idx = sorted_[cand[c]].index;
    if (d < best_d || (d == best_d && idx < best)) {
      best = idx;
      best_d = d;
    }
  }
  return best;
}

double AzimuthIndex::timestamp(const Vec2& query_xy) const { return cloud_->points[nearest(query_xy)].t; }

double assign_query_timestamp(const Vec2& query_xy, const PointCloud& cloud, AzimuthMetric metric) {
  return AzimuthIndex(cloud, metric).timestamp(query_xy);
}

}  // namespace tacood
