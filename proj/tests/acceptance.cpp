// Acceptance run: one PASS/FAIL line per criterion. Arguments select criteria (default all).

#include <algorithm>
#include <chrono>
#include <cmath>
#include <deque>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "scene_fixtures.hpp"
#include "tacood/autodiff.hpp"
#include "tacood/cli.hpp"
#include "tacood/evalkit.hpp"
#include "tacood/featurizer.hpp"
#include "tacood/fusion_core.hpp"
#include "tacood/geometry.hpp"
#include "tacood/gradcheck.hpp"
#include "tacood/rng.hpp"
#include "tacood/train.hpp"

using namespace tacood;
namespace fx = tacood::fixtures;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = true;
  std::string detail;
};

void require(Outcome& o, bool ok, const std::string& what) {
  if (!ok) {
    o.pass = false;
    if (!o.detail.empty()) o.detail += "; ";
    o.detail += what;
  }
}

std::string fmt(double v, int prec = 4) {
  std::ostringstream s;
  s << std::setprecision(prec) << v;
  return s.str();
}

// 1. Query timestamps against the exhaustive scan.
Outcome criterion1() {
  Outcome o;
  const auto t0 = Clock::now();
  CounterRng rng(2024, 1);
  long mismatches = 0;
  for (int c = 0; c < 1000; ++c) {
    PointCloud cloud;
    cloud.agent_id = 0;
    const int n = 1 + static_cast<int>(rng.below(200));
    for (int i = 0; i < n; ++i) {
      const double a = rng.uniform(-kPi, kPi);
      const double r = rng.uniform(1.0, 60.0);
      cloud.points.push_back({r * std::cos(a), r * std::sin(a), rng.uniform(-1, 1), rng.uniform(0.0, 0.1)});
    }
    const AzimuthIndex index(cloud, AzimuthMetric::kWrapped);
    for (int q = 0; q < 100; ++q) {
      const Vec2 query{rng.uniform(-60, 60), rng.uniform(-60, 60)};
      const double fast = index.timestamp(query);
      const double slow = oracle::brute_force_timestamp(query, cloud, AzimuthMetric::kWrapped);
      if (fast != slow) ++mismatches;
    }
  }
  const double secs = seconds_since(t0);
  require(o, mismatches == 0, std::to_string(mismatches) + " mismatches");
  require(o, secs < 10.0, "runtime " + fmt(secs) + " s");
  o.detail = "100000 queries, " + std::to_string(mismatches) + " mismatches, " + fmt(secs, 3) + " s" +
             (o.pass ? "" : " | " + o.detail);
  return o;
}

// Distance from a world point to the boundary of a box footprint.
double boundary_distance(const BBox& b, const Vec3& p) {
  const double c = std::cos(b.yaw), s = std::sin(b.yaw);
  const double dx = p.x - b.center.x, dy = p.y - b.center.y;
  const double lx = std::abs(c * dx + s * dy), ly = std::abs(-s * dx + c * dy);
  const double ox = lx - 0.5 * b.l, oy = ly - 0.5 * b.w;
  if (ox <= 0 && oy <= 0) return std::abs(std::max(ox, oy));
  return std::hypot(std::max(ox, 0.0), std::max(oy, 0.0));
}

// 2. Rolling-shutter physics.
Outcome criterion2() {
  Outcome o;
  // Each return lies on the object surface at its own emission time, so the implied
  // displacement between two returns is velocity times their time gap.
  const double res_deg = 0.05;
  double worst_surface = 0.0, worst_disp = 0.0, quant = 1e300;
  CounterRng rng(11, 2);
  for (int trial = 0; trial < 20; ++trial) {
    const Vec2 v{rng.uniform(-20, 20), rng.uniform(-20, 20)};
    const double yaw = std::atan2(v.y, v.x);
    const Pose start{rng.uniform(-15, 15), rng.uniform(6, 15) * (trial % 2 ? 1 : -1), 0, yaw};
    const Scene s = fx::scene({fx::agent(0, Pose{0, 0, 1.8, 0}, 0.0)},
                              {fx::track(0, Pose{start.x - v.x, start.y - v.y, 0, yaw}, v, 3.0)}, 3.0, 0, res_deg);
    const PointCloud c = simulate_scan(s, 0, 10);
    if (c.points.size() < 2) continue;
    const auto world = fx::world_points(s, c);
    quant = std::min(quant, std::hypot(world.front().x, world.front().y) * res_deg * kPi / 180.0);
    const BBox b_first = object_box_at(s.objects[0], c.points.front().t);
    for (std::size_t i = 0; i < world.size(); ++i) {
      const double t = c.points[i].t;
      const BBox b = object_box_at(s.objects[0], t);
      worst_surface = std::max(worst_surface, boundary_distance(b, world[i]));
      // The point moved back by the object's displacement lies on the box at the first time.
      const Vec3 back{world[i].x - v.x * (t - c.points.front().t), world[i].y - v.y * (t - c.points.front().t),
                      world[i].z};
      worst_disp = std::max(worst_disp, boundary_distance(b_first, back));
    }
  }
  require(o, worst_surface < 1e-6, "surface residual " + fmt(worst_surface));
  require(o, worst_disp < quant, "implied displacement residual " + fmt(worst_disp));

  const Scene s = fx::fig2_scene(0.02);
  const Frame f = make_async_frame(s, 0);
  const auto ego_pts = fx::world_points(s, f.clouds[0]);
  const auto coop_pts = fx::world_points(s, f.clouds[1]);
  double te = 0, tc = 0;
  for (const auto& p : f.clouds[0].points) te += p.t;
  for (const auto& p : f.clouds[1].points) tc += p.t;
  te /= static_cast<double>(std::max<std::size_t>(1, f.clouds[0].points.size()));
  tc /= static_cast<double>(std::max<std::size_t>(1, f.clouds[1].points.size()));
  const double shift = fx::extent_center_x(ego_pts) - fx::extent_center_x(coop_pts);
  require(o, !ego_pts.empty() && !coop_pts.empty(), "object not observed by both agents");
  require(o, std::abs((te - tc) - 0.11) < 0.005, "observation gap " + fmt(te - tc));
  require(o, shift >= 1.8 && shift <= 1.9, "shift " + fmt(shift));
  const std::string summary = "displacement residual " + fmt(worst_disp, 3) + " m (ray spacing " + fmt(quant, 3) +
                              " m), gap " + fmt(te - tc, 4) +
                              " s, inter-agent shift " + fmt(shift, 4) + " m";
  o.detail = o.pass ? summary : summary + " | " + o.detail;
  return o;
}

// 3. Gradient suite and mutation detection.
Outcome criterion3() {
  Outcome o;
  const auto t0 = Clock::now();
  const GradientSuite suite(10, 0);
  const auto clean = suite.run();
  const double worst = max_rel_err(clean);
  require(o, worst < 1e-4, "clean max_rel_err " + fmt(worst) + " at " + clean.front().name);

  int missed = 0;
  for (const std::string& fault : ad::fault_names()) {
    ad::ScopedFault f(fault, 1.01);
    if (max_rel_err(suite.run()) <= 5e-3) {
      ++missed;
      require(o, false, "fault " + fault + " undetected");
    }
  }
  std::set<std::string> tensors;
  for (const auto& r : clean) {
    const auto slash = r.name.rfind('/');
    if (r.name.rfind("layer/", 0) == 0 || r.name.rfind("pipeline/", 0) == 0) tensors.insert(r.name.substr(slash + 1));
  }
  for (const std::string& t : tensors) {
    if (max_rel_err(suite.run(t, 1.01)) <= 5e-3) {
      ++missed;
      require(o, false, "corrupted " + t + " undetected");
    }
  }
  const double secs = seconds_since(t0);
  require(o, secs < 120.0, "runtime " + fmt(secs) + " s");
  const std::string summary = std::to_string(clean.size()) + " checks, max_rel_err " + fmt(worst, 3) + ", " +
                              std::to_string(ad::fault_names().size()) + " op faults + " +
                              std::to_string(tensors.size()) + " tensor corruptions, " + std::to_string(missed) +
                              " missed, " + fmt(secs, 3) + " s";
  o.detail = o.pass ? summary : summary + " | " + o.detail;
  return o;
}

BBox box(double x, double y, double l, double w, double yaw) {
  BBox b;
  b.center = {x, y, 0.0};
  b.l = l;
  b.w = w;
  b.h = 1.0;
  b.yaw = yaw;
  return b;
}

// Monte-Carlo BEV IoU with precomputed box frames; samples the bounding rectangle of both footprints.
double fast_monte_carlo_iou(const BBox& a, const BBox& b, int samples, std::mt19937_64& gen) {
  double x0 = 1e300, x1 = -1e300, y0 = 1e300, y1 = -1e300;
  for (const BBox* bx : {&a, &b}) {
    for (const auto& c : bbox_corners_bev(*bx)) {
      x0 = std::min(x0, c.x), x1 = std::max(x1, c.x), y0 = std::min(y0, c.y), y1 = std::max(y1, c.y);
    }
  }
  struct Frame2 {
    double cx, cy, c, s, hl, hw;
  };
  const auto frame_of = [](const BBox& x) {
    return Frame2{x.center.x, x.center.y, std::cos(x.yaw), std::sin(x.yaw), 0.5 * x.l, 0.5 * x.w};
  };
  const Frame2 fa = frame_of(a), fb = frame_of(b);
  const auto inside = [](const Frame2& f, double px, double py) {
    const double dx = px - f.cx, dy = py - f.cy;
    return std::abs(f.c * dx + f.s * dy) <= f.hl && std::abs(-f.s * dx + f.c * dy) <= f.hw;
  };
  std::uniform_real_distribution<double> ux(x0, x1), uy(y0, y1);
  long in_both = 0, in_either = 0;
  for (int i = 0; i < samples; ++i) {
    const double px = ux(gen), py = uy(gen);
    const bool pa = inside(fa, px, py), pb = inside(fb, px, py);
    in_both += (pa && pb);
    in_either += (pa || pb);
  }
  return in_either == 0 ? 0.0 : static_cast<double>(in_both) / static_cast<double>(in_either);
}

// 4. Rotated IoU.
Outcome criterion4() {
  Outcome o;
  const auto t0 = Clock::now();
  const double shifted = rotated_iou_bev(box(0, 0, 4, 2, 0), box(1, 0, 4, 2, 0));
  const double diamond = rotated_iou_bev(box(0, 0, 2, 2, 0), box(0, 0, 2, 2, kPi / 4));
  require(o, std::abs(shifted - 0.6) < 1e-6, "shifted rectangles " + fmt(shifted, 12));
  require(o, std::abs(diamond - 1.0 / std::sqrt(2.0)) < 1e-6, "45 degree square " + fmt(diamond, 12));

  std::mt19937_64 gen(4);
  CounterRng rng(4, 4);
  double worst = 0.0;
  for (int n = 0; n < 1000; ++n) {
    const BBox a = box(rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(0.5, 5), rng.uniform(0.5, 3),
                       rng.uniform(-kPi, kPi));
    const BBox b = box(rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(0.5, 5), rng.uniform(0.5, 3),
                       rng.uniform(-kPi, kPi));
    worst = std::max(worst, std::abs(rotated_iou_bev(a, b) - fast_monte_carlo_iou(a, b, 1000000, gen)));
  }
  const double secs = seconds_since(t0);
  require(o, worst <= 0.01, "Monte-Carlo disagreement " + fmt(worst));
  require(o, secs < 120.0, "runtime " + fmt(secs) + " s");
  const std::string summary = "hand cases " + fmt(shifted, 10) + " / " + fmt(diamond, 10) + ", worst MC gap " +
                              fmt(worst, 3) + " over 1000 pairs, " + fmt(secs, 3) + " s";
  o.detail = o.pass ? summary : summary + " | " + o.detail;
  return o;
}

Mat random_mat(Eigen::Index r, Eigen::Index c, CounterRng& rng) {
  Mat m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-1.0, 1.0);
  return m;
}

SharedQueries random_agent(Net& net, int id, int n, CounterRng& rng) {
  SharedQueries s;
  s.agent_id = id;
  for (int i = 0; i < n; ++i) {
    s.positions.push_back({rng.uniform(-15, 15), rng.uniform(-15, 15)});
    s.scores.push_back(rng.uniform());
  }
  s.context = net.constant(random_mat(n, net.config().d, rng));
  return s;
}

// 5. Fusion invariants.
Outcome criterion5() {
  Outcome o;
  ModelConfig c = toy_model_config();
  c.d = 16;
  ModelParams p = ModelParams::init(c, 5);
  CounterRng rng(5, 5);
  p.at("fuse.offset.b") = random_mat(p.at("fuse.offset.b").rows(), p.at("fuse.offset.b").cols(), rng) * 0.3;
  ad::Tape tape;
  Net net(tape, p, c, false);

  double worst_perm = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<SharedQueries> agents;
    const int n_agents = 2 + static_cast<int>(rng.below(4));
    for (int a = 0; a < n_agents; ++a) agents.push_back(random_agent(net, a, 1 + static_cast<int>(rng.below(8)), rng));
    const Mat base = spatial_fusion(net, agents, 0).fused.value();
    // Shuffle the list and relabel the cooperative agents.
    std::vector<SharedQueries> shuffled = agents;
    std::vector<int> ids;
    for (int a = 1; a < n_agents; ++a) ids.push_back(a);
    for (std::size_t i = ids.size(); i > 1; --i) std::swap(ids[i - 1], ids[rng.below(i)]);
    for (int a = 1; a < n_agents; ++a) shuffled[static_cast<std::size_t>(a)].agent_id = 100 + ids[static_cast<std::size_t>(a - 1)];
    for (std::size_t i = shuffled.size(); i > 1; --i) std::swap(shuffled[i - 1], shuffled[rng.below(i)]);
    const Mat permuted = spatial_fusion(net, shuffled, 0).fused.value();
    if (permuted.rows() != base.rows()) {
      worst_perm = 1e300;
      continue;
    }
    worst_perm = std::max(worst_perm, (permuted - base).cwiseAbs().maxCoeff());
  }
  require(o, worst_perm <= 1e-9, "permutation gap " + fmt(worst_perm));

  bool self_exact = true;
  double worst_ref = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const std::vector<SharedQueries> one{random_agent(net, 3, 1 + static_cast<int>(rng.below(10)), rng)};
    const SpatialFusionResult r = spatial_fusion(net, one, 3);
    ad::Tape t;
    const ad::Var q = t.constant(r.query.value());
    const Mat self = ad::attention(q, q, t.constant(r.value.value())).value();
    self_exact = self_exact && r.key.value() == r.query.value() && r.fused.value() == self;
    worst_ref = std::max(worst_ref, (r.fused.value() - attention(r.query.value(), r.query.value(), r.value.value()))
                                        .cwiseAbs()
                                        .maxCoeff());
  }
  require(o, worst_ref < 1e-12, "reference attention gap " + fmt(worst_ref));
  require(o, self_exact, "single agent is not exactly self-attention");

  // Memory queue against a reference FIFO of sorted top-K slots.
  long violations = 0;
  int steps = 0;
  for (int trial = 0; steps < 10000; ++trial) {
    const int T = 1 + static_cast<int>(rng.below(6));
    const int K = 1 + static_cast<int>(rng.below(8));
    MemoryQueue mem(T, K);
    std::deque<std::pair<int, std::vector<double>>> ref;
    int frame = static_cast<int>(rng.below(3));
    for (int s = 0; s < 50 && steps < 10000; ++s, ++steps) {
      std::vector<Query> qs(rng.below(12));
      std::vector<double> scores;
      for (Query& q : qs) {
        q.score = std::round(rng.uniform() * 20.0) / 20.0;
        scores.push_back(q.score);
      }
      mem.push(frame, qs);
      std::stable_sort(scores.begin(), scores.end(), std::greater<>());
      if (scores.size() > static_cast<std::size_t>(K)) scores.resize(static_cast<std::size_t>(K));
      ref.emplace_back(frame, scores);
      if (ref.size() > static_cast<std::size_t>(T)) ref.pop_front();

      std::size_t total = 0;
      bool ok = mem.slots().size() == ref.size();
      for (std::size_t i = 0; ok && i < ref.size(); ++i) {
        const auto& slot = mem.slots()[i];
        ok = slot.frame_index == ref[i].first && slot.queries.size() == ref[i].second.size();
        for (std::size_t j = 0; ok && j < slot.queries.size(); ++j) ok = slot.queries[j].score == ref[i].second[j];
        total += slot.queries.size();
      }
      ok = ok && mem.total() == total && total <= static_cast<std::size_t>(T * K);
      if (!ok) ++violations;
      frame += 1 + static_cast<int>(rng.below(3));
    }
    bool rejected = false;
    try {
      mem.push(mem.newest() ? mem.newest()->frame_index : 0, {});
    } catch (const std::invalid_argument&) {
      rejected = true;
    }
    if (mem.newest() && !rejected) ++violations;
  }
  require(o, violations == 0, std::to_string(violations) + " memory queue violations");
  const std::string summary = "permutation gap " + fmt(worst_perm, 3) + ", single-agent exact " +
                              (self_exact ? "yes" : "no") + " (reference gap " + fmt(worst_ref, 3) + "), " + std::to_string(steps) + " queue steps with " +
                              std::to_string(violations) + " violations";
  o.detail = o.pass ? summary : summary + " | " + o.detail;
  return o;
}

// Toy training shared by the ablation criteria. The latency runs use the default toy
// scenario, where the ego's 30 m sensor range makes cooperative data matter. The timestamp
// runs use a 60 m range so both agents see the whole road.
enum class Toy { kTimestamps, kLatency };

AblationSetup toy_setup(Toy toy) {
  AblationSetup s;
  s.data.train_scenes = 48;
  s.data.heldout_scenes = 24;
  if (toy == Toy::kTimestamps) {
    s.data.scenario.max_range = 60.0;
    s.data.scenario.num_objects = 6;
    s.data.scenario.spawn_half_length = 35.0;
  }
  s.train.steps = 6000;
  s.train.lr = 1e-3;
  s.train.seed = 0;
  return s;
}

struct VariantRun {
  std::vector<AblationCell> cells;  // latencies 0, 1, 2 frames
  double seconds = 0.0;
};

VariantRun variant_run(Toy toy, const std::string& name) {
  const auto t0 = Clock::now();
  VariantRun run;
  run.cells = ablate({name}, {0, 1, 2}, toy_setup(toy));
  run.seconds = seconds_since(t0);
  std::cout << "  [" << name << "] trained and evaluated in " << fmt(run.seconds, 4) << " s; center error";
  for (const auto& c : run.cells) std::cout << " " << fmt(c.result.mean_center_error, 5);
  std::cout << "; AP@0.5";
  for (const auto& c : run.cells) std::cout << " " << fmt(c.result.ap.at(0.5), 4);
  std::cout << std::endl;
  return run;
}

double center_error(const VariantRun& r, int latency) { return r.cells.at(static_cast<std::size_t>(latency)).result.mean_center_error; }

// 6. Point-wise against frame-wise timestamps.
Outcome criterion6() {
  Outcome o;
  const VariantRun point = variant_run(Toy::kTimestamps, "full");
  const VariantRun frame = variant_run(Toy::kTimestamps, "framewise-timestamps");
  const double ep = center_error(point, 0), ef = center_error(frame, 0);
  const double margin = (ef - ep) / ef;
  const double secs = point.seconds + frame.seconds;
  require(o, ep < ef, "point-wise is not better");
  require(o, margin >= 0.2, "margin " + fmt(margin));
  require(o, secs < 1800.0, "runtime " + fmt(secs) + " s");
  const std::string summary = "center error point-wise " + fmt(ep, 4) + " vs frame-wise " + fmt(ef, 4) +
                              " (margin " + fmt(100.0 * margin, 3) + "%), " + fmt(secs, 4) + " s";
  o.detail = o.pass ? summary : summary + " | " + o.detail;
  return o;
}

// 7. Latency ablation.
Outcome criterion7() {
  Outcome o;
  const VariantRun no_temp = variant_run(Toy::kLatency, "no-temp-fusion");
  const VariantRun full = variant_run(Toy::kLatency, "full");
  const VariantRun no_aug = variant_run(Toy::kLatency, "no-latency-augmentation");
  const double n0 = center_error(no_temp, 0), n1 = center_error(no_temp, 1), n2 = center_error(no_temp, 2);
  const double full_rise = center_error(full, 2) - center_error(full, 0);
  const double noaug_rise = center_error(no_aug, 2) - center_error(no_aug, 0);
  const double secs = no_temp.seconds + full.seconds + no_aug.seconds;
  require(o, n0 < n1 && n1 < n2, "no-temp-fusion not monotone");
  require(o, full_rise < noaug_rise, "augmentation does not reduce degradation");
  require(o, secs < 2700.0, "runtime " + fmt(secs) + " s");
  const std::string summary = "no-temp " + fmt(n0, 4) + " / " + fmt(n1, 4) + " / " + fmt(n2, 4) +
                              " at 0/100/200 ms; 0->200 ms rise full " + fmt(full_rise, 3) + " vs no-aug " +
                              fmt(noaug_rise, 3) + ", " + fmt(secs, 4) + " s";
  o.detail = o.pass ? summary : summary + " | " + o.detail;
  return o;
}

// 8. AP harness sanity.
Outcome criterion8() {
  Outcome o;
  std::vector<FrameDetections> frames;
  std::vector<FrameDetections> half;
  for (int f = 0; f < 5; ++f) {
    FrameDetections fd, hd;
    for (int g = 0; g < 4; ++g) {
      GtBox gt;
      gt.object_id = g;
      gt.box = box(10.0 * g, 5.0 * f, 4.5, 1.8, 0.1 * g);
      fd.gt.push_back(gt);
      hd.gt.push_back(gt);
      Detection d;
      d.bbox = gt.box;
      d.confidence = 0.9 - 0.01 * g;
      fd.detections.push_back(d);
      if (g % 2 == 0) hd.detections.push_back(d);
    }
    frames.push_back(fd);
    half.push_back(hd);
  }
  const EvalResult perfect = evaluate_detections(frames);
  const EvalResult halved = evaluate_detections(half);
  bool ok = true;
  for (const auto& [thr, ap] : perfect.ap) ok = ok && ap == 1.0;
  for (const auto& [thr, ap] : halved.ap) ok = ok && ap == 0.5;
  require(o, ok, "AP " + fmt(perfect.ap.at(0.5)) + " / " + fmt(halved.ap.at(0.5)));
  const std::string summary = "perfect AP " + fmt(perfect.ap.at(0.5), 17) + ", half recall AP " +
                              fmt(halved.ap.at(0.5), 17);
  o.detail = o.pass ? summary : summary + " | " + o.detail;
  return o;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

// Every regular file under `dir`, keyed by relative path.
std::map<std::string, std::string> tree(const fs::path& dir) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file()) files[fs::relative(e.path(), dir).generic_string()] = slurp(e.path());
  }
  return files;
}

int cli(const std::vector<std::string>& args, std::string& log) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  log += err.str();
  return code;
}

// 9. End-to-end determinism through the command layer.
Outcome criterion9() {
  Outcome o;
  const fs::path root = fs::temp_directory_path() / "tacood_acceptance_e2e";
  fs::remove_all(root);
  fs::create_directories(root);
  const fs::path config = root / "config.json";
  {
    std::ofstream c(config);
    c << R"({"scenario": {"duration": 1.5, "num_objects": 4},
  "data": {"train_scenes": 2, "heldout_scenes": 1, "scenario": {"duration": 1.5, "num_objects": 4}},
  "train": {"steps": 10, "lr": 0.001}})";
  }
  std::string log;
  std::map<std::string, std::string> runs[2];
  for (int r = 0; r < 2; ++r) {
    const fs::path dir = root / ("run" + std::to_string(r));
    fs::create_directories(dir);
    const std::string d = dir.string();
    int codes = 0;
    codes |= cli({"simulate", "--config", config.string(), "--out", d + "/frames", "--seed", "3"}, log);
    codes |= cli({"train-toy", "--config", config.string(), "--out", d + "/train", "--seed", "3"}, log);
    codes |= cli({"fuse", "--config", config.string(), "--params", d + "/train/params.bin", "--frames", d + "/frames",
                  "--out", d + "/detections.jsonl"},
                 log);
    codes |= cli({"eval", "--frames", d + "/frames", "--detections", d + "/detections.jsonl", "--out", d + "/eval.json"},
                 log);
    require(o, codes == 0, "run " + std::to_string(r) + " failed: " + log);
    runs[r] = tree(dir);
  }
  require(o, !runs[0].empty() && runs[0] == runs[1], "outputs differ between reruns");
  std::size_t bytes = 0;
  for (const auto& [name, content] : runs[0]) bytes += content.size();
  const std::string summary = std::to_string(runs[0].size()) + " files, " + std::to_string(bytes) +
                              " bytes, byte-identical across reruns";
  o.detail = o.pass ? summary : o.detail;
  fs::remove_all(root);
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::function<Outcome()>> criteria{criterion1, criterion2, criterion3, criterion4, criterion5,
                                                        criterion6, criterion7, criterion8, criterion9};
  std::vector<int> selected;
  for (int i = 1; i < argc; ++i) selected.push_back(std::stoi(argv[i]));
  if (selected.empty()) {
    for (int i = 1; i <= static_cast<int>(criteria.size()); ++i) selected.push_back(i);
  }
  int failures = 0;
  for (int id : selected) {
    if (id < 1 || id > static_cast<int>(criteria.size())) {
      std::cerr << "unknown criterion " << id << "\n";
      return 2;
    }
    Outcome o;
    try {
      o = criteria[static_cast<std::size_t>(id - 1)]();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail = std::string("exception: ") + e.what();
    }
    failures += !o.pass;
    std::cout << "criterion " << id << ": " << (o.pass ? "PASS" : "FAIL") << "  " << o.detail << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
