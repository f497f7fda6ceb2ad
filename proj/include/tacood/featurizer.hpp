#pragma once

#include <compare>
#include <cstdint>
#include <map>
#include <span>
#include <vector>

#include "tacood/geometry.hpp"
#include "tacood/scene_sim.hpp"

namespace tacood {

inline constexpr double kLocalResolution = 0.8;
inline constexpr double kGlobalResolution = 3.2;
inline constexpr int kRawFeatureDim = 5;
inline constexpr int kDefaultDilationLayers = 3;

struct CellKey {
  std::int32_t i = 0;
  std::int32_t j = 0;
  auto operator<=>(const CellKey&) const = default;
};

// Sparse BEV map in the capturing agent's frame. Cell (i, j) covers
// [origin + i*res, origin + (i+1)*res) x [origin + j*res, origin + (j+1)*res).
struct SparseBEVGrid {
  double resolution = kLocalResolution;
  Vec2 origin{-140.8, -38.4};
  int feature_dim = kRawFeatureDim;
  std::map<CellKey, std::vector<double>> cells;

  Vec2 cell_center(const CellKey& key) const;
};

struct RoIPoint {
  CellKey cell;
  Vec2 position;  // cell center, agent frame
  std::vector<double> feature;
  double score = 0.0;
  double tau = 0.0;
};

// Pillar statistics per cell: [count / kCountScale, mean offset x / res, mean offset y / res,
// mean z, mean (t - t_ref)].
inline constexpr double kCountScale = 10.0;
SparseBEVGrid voxelize(const PointCloud& cloud, double resolution, double t_ref,
                       const DetectionRange& range = DetectionRange{});

SparseBEVGrid downsample_grid(const SparseBEVGrid& grid, int factor);

SparseBEVGrid dilate_grid(const SparseBEVGrid& grid, int layers = kDefaultDilationLayers);

// Appends neighbourhood pillar statistics to every cell of a (typically dilated) raw grid:
// for each window radius r, [points in the (2r+1)^2 window / (kCountScale (2r+1)^2),
// point-weighted mean offset x and y in cells / (r + 1), mean z, mean (t - t_ref)].
// Output dimension is kRawFeatureDim * (1 + radii.size()).
inline constexpr int kContextRadii[] = {1, 3};
inline constexpr int kCellFeatureDim = kRawFeatureDim * 3;
SparseBEVGrid context_features(const SparseBEVGrid& raw, std::span<const int> radii = kContextRadii);

// Highest scores first; equal scores resolve to the lexicographically smaller cell.
std::vector<RoIPoint> score_topk(std::vector<RoIPoint> candidates, int k);

std::vector<RoIPoint> grid_candidates(const SparseBEVGrid& grid);

// 1 for cells whose center (mapped to world by `agent_pose`) lies inside any box, else 0.
std::vector<double> ground_truth_scores(const std::vector<RoIPoint>& candidates, const Pose& agent_pose,
                                        std::span<const GtBox> gt);

enum class AzimuthMetric { kWrapped, kNaive };

double azimuth_distance(double a, double b, AzimuthMetric metric);

// Nearest-azimuth lookup over one scan; answers match an exhaustive scan exactly,
// including the smaller-index tie rule.
class AzimuthIndex {
 public:
  explicit AzimuthIndex(const PointCloud& cloud, AzimuthMetric metric = AzimuthMetric::kWrapped);

  std::size_t nearest(const Vec2& query_xy) const;
  double timestamp(const Vec2& query_xy) const;
  bool empty() const { return sorted_.empty(); }

 private:
  struct Entry {
    double azimuth;
    std::size_t index;
  };
  std::size_t group_first(std::size_t pos) const;

  const PointCloud* cloud_;
  AzimuthMetric metric_;
  std::vector<Entry> sorted_;
};

double assign_query_timestamp(const Vec2& query_xy, const PointCloud& cloud,
                              AzimuthMetric metric = AzimuthMetric::kWrapped);

}  // namespace tacood
