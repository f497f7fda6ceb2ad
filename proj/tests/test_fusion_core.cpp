#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <sstream>
#include <vector>

#include "tacood/fusion_core.hpp"
#include "tacood/rng.hpp"

using namespace tacood;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.d = 8;
  c.k_roi_local = 6;
  c.k_roi_global = 4;
  c.k_q = 3;
  c.memory_frames = 2;
  return c;
}

Mat random_mat(Eigen::Index r, Eigen::Index c, std::uint64_t stream, double scale = 1.0) {
  CounterRng rng(99, stream);
  Mat m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-scale, scale);
  return m;
}

void randomize(ModelParams& p, const std::string& name, std::uint64_t stream, double scale = 0.3) {
  Mat& m = p.at(name);
  m = random_mat(m.rows(), m.cols(), stream, scale);
}

void zero(ModelParams& p, const std::string& name) { p.at(name).setZero(); }

AgentState agent_at(int id, Pose pose, Vec2 v = {}) {
  AgentState a;
  a.id = id;
  a.pose = pose;
  a.velocity = v;
  return a;
}

RoIBatch batch(Net& net, int n, std::uint64_t stream, double tau, Vec2 origin = {}) {
  RoIBatch b;
  b.embedding = net.constant(random_mat(n, net.config().d, stream));
  CounterRng rng(5, stream);
  for (int i = 0; i < n; ++i) {
    b.positions.push_back({origin.x + rng.uniform(-20, 20), origin.y + rng.uniform(-20, 20)});
    b.tau.push_back(tau - rng.uniform(0.0, 0.1));
  }
  return b;
}

Query query_at(Vec2 p, double tau, int d) {
  Query q;
  q.position = p;
  q.tau = tau;
  q.context = Eigen::VectorXd::Ones(d);
  return q;
}

SharedQueries shared(Net& net, int id, std::vector<Vec2> pos, std::vector<double> scores, std::uint64_t stream) {
  SharedQueries s;
  s.agent_id = id;
  s.positions = std::move(pos);
  s.scores = std::move(scores);
  s.context = net.constant(random_mat(static_cast<Eigen::Index>(s.positions.size()), net.config().d, stream));
  return s;
}

}  // namespace

TEST_CASE("linear examples") {
  const Eigen::VectorXd x = Eigen::VectorXd::LinSpaced(3, -1.0, 2.0);
  CHECK(linear(Mat::Identity(3, 3), Eigen::VectorXd::Zero(3), x) == x);
  const Eigen::VectorXd c = Eigen::Vector2d(0.5, -4.0);
  CHECK(linear(Mat::Zero(2, 3), c, x) == c);
  Mat w(2, 2);
  w << 1, 2, 0, 1;
  const Eigen::VectorXd y = linear(w, Eigen::Vector2d(1, 0), Eigen::Vector2d(1, 1));
  CHECK(y(0) == 4.0);
  CHECK(y(1) == 1.0);
  CHECK_THROWS_AS(linear(w, Eigen::Vector2d(1, 0), x), std::invalid_argument);
}

TEST_CASE("layer_norm examples") {
  const Eigen::VectorXd y = layer_norm(Eigen::Vector2d(1, 3));
  CHECK(y(0) == doctest::Approx(-1.0 / std::sqrt(1.0 + 1e-5)).epsilon(1e-12));
  CHECK(y(0) == doctest::Approx(-0.999995).epsilon(1e-6));
  CHECK(y(1) == doctest::Approx(0.999995).epsilon(1e-6));
  CHECK(layer_norm(Eigen::VectorXd::Constant(5, 3.3)).isZero());
  for (std::uint64_t s = 0; s < 20; ++s) {
    const Eigen::VectorXd r = random_mat(9, 1, s, 50.0).col(0);
    CHECK(std::abs(layer_norm(r).mean()) < 1e-12);
  }
  CHECK_THROWS_AS(layer_norm(Eigen::VectorXd::Ones(1)), std::invalid_argument);
}

TEST_CASE("attention examples and convexity") {
  const Mat v = random_mat(1, 4, 1);
  CHECK(attention(random_mat(3, 4, 2), random_mat(1, 4, 3), v).row(2).isApprox(v.row(0), 1e-15));

  const Mat vv = random_mat(5, 3, 4);
  const Mat out0 = attention(Mat::Zero(2, 6), random_mat(5, 6, 5), vv);
  CHECK(out0.row(0).isApprox(vv.colwise().mean(), 1e-14));

  Mat q(1, 1), k(2, 1), val(2, 1);
  q << 1;
  k << 1, 0;
  val << 1, 0;
  CHECK(attention(q, k, val)(0, 0) == doctest::Approx(std::exp(1.0) / (std::exp(1.0) + 1.0)).epsilon(1e-14));
  CHECK(attention(q, k, val)(0, 0) == doctest::Approx(0.7311).epsilon(1e-4));

  CHECK_THROWS_AS(attention(q, Mat(0, 1), Mat(0, 1)), std::invalid_argument);

  for (std::uint64_t s = 0; s < 30; ++s) {
    const Mat vs = random_mat(7, 4, 100 + s, 10.0);
    const Mat out = attention(random_mat(5, 3, 200 + s, 10.0), random_mat(7, 3, 300 + s, 10.0), vs);
    for (Eigen::Index c = 0; c < 4; ++c) {
      CHECK(out.col(c).minCoeff() >= vs.col(c).minCoeff() - 1e-12);
      CHECK(out.col(c).maxCoeff() <= vs.col(c).maxCoeff() + 1e-12);
    }
  }
}

TEST_CASE("value attention matches the taped attention") {
  ad::Tape tape;
  const Mat q = random_mat(4, 5, 11), k = random_mat(6, 5, 12), v = random_mat(6, 3, 13);
  const Mat taped = ad::attention(tape.constant(q), tape.constant(k), tape.constant(v)).value();
  CHECK(taped.isApprox(attention(q, k, v), 1e-14));
}

TEST_CASE("mln examples") {
  const Eigen::VectorXd x = random_mat(6, 1, 20).col(0);
  const Eigen::VectorXd m = random_mat(4, 1, 21).col(0);
  CHECK(mln(Mat::Zero(6, 4), Mat::Zero(6, 4), x, m).isApprox(layer_norm(x)));
  CHECK(mln(Mat::Zero(6, 4), Mat::Zero(6, 4), x, 17.0 * m) == mln(Mat::Zero(6, 4), Mat::Zero(6, 4), x, m));

  Mat wg(2, 1), wb(2, 1);
  wg << 0, 1;
  wb << 0.5, 0;
  const Eigen::VectorXd y = mln(wg, wb, Eigen::Vector2d(0, 2), Eigen::VectorXd::Ones(1));
  CHECK(y(0) == doctest::Approx(-0.5).epsilon(1e-5));
  CHECK(y(1) == doctest::Approx(2.0).epsilon(1e-5));
  CHECK_THROWS_AS(mln(wg, wb, Eigen::Vector3d(0, 1, 2), Eigen::VectorXd::Ones(1)), std::invalid_argument);
}

TEST_CASE("focal and smooth-L1 examples") {
  CHECK(focal_loss(1.0 - 1e-9, 1) < 1e-12);
  CHECK(focal_loss(0.5, 1) == doctest::Approx(0.25 * 0.25 * std::log(2.0)).epsilon(1e-14));
  CHECK(focal_loss(0.5, 1) == doctest::Approx(0.04332).epsilon(1e-4));
  for (const double p : {0.1, 0.4, 0.9}) {
    CHECK(focal_loss(p, 1, 0.5, 0.0) == doctest::Approx(-0.5 * std::log(p)));
    CHECK(focal_loss(p, 0, 0.5, 0.0) == doctest::Approx(-0.5 * std::log(1 - p)));
    CHECK(focal_loss(p, 0) >= 0.0);
  }
  CHECK_THROWS_AS(focal_loss(0.0, 1), std::invalid_argument);
  CHECK_THROWS_AS(focal_loss(1.0, 0), std::invalid_argument);

  CHECK(smooth_l1(0.0) == 0.0);
  CHECK(smooth_l1(0.5) == 0.125);
  CHECK(smooth_l1(2.0) == 1.5);
  CHECK(smooth_l1(-2.0) == 1.5);
  CHECK_THROWS_AS(smooth_l1(1.0, 0.0), std::invalid_argument);
}

TEST_CASE("model config defaults and validation") {
  const ModelConfig c;
  CHECK(c.k_q == 256);
  CHECK(c.memory_frames == 4);
  validate(c);
  ModelConfig bad = c;
  bad.k_q = 2000;
  CHECK_THROWS_WITH_AS(validate(bad), doctest::Contains("k_q"), ConfigError);
  bad = c;
  bad.d = 1;
  CHECK_THROWS_AS(validate(bad), ConfigError);
  bad = c;
  bad.range.x_max = bad.range.x_min;
  CHECK_THROWS_AS(validate(bad), ConfigError);
}

TEST_CASE("parameter init is deterministic, d-consistent and round-trips") {
  const ModelConfig c = small_config();
  const ModelParams a = ModelParams::init(c, 3);
  CHECK(a == ModelParams::init(c, 3));
  CHECK_FALSE(a == ModelParams::init(c, 4));
  CHECK(a.d() == 8);
  for (const auto& [name, m] : a.tensors()) {
    CAPTURE(name);
    CHECK(m.allFinite());
    CHECK((m.rows() == c.d || m.cols() == c.d || name.find(".b") != std::string::npos));
  }
  CHECK(a.at("mln.pos.gamma").isZero());

  std::stringstream buf;
  a.write(buf);
  CHECK(ModelParams::read(buf) == a);

  std::string bytes = buf.str();
  std::stringstream bad_magic(std::string("XPRM") + bytes.substr(4));
  CHECK_THROWS_AS(ModelParams::read(bad_magic), std::runtime_error);
  std::stringstream truncated(bytes.substr(0, bytes.size() - 3));
  CHECK_THROWS_AS(ModelParams::read(truncated), std::runtime_error);
  CHECK_THROWS_AS(a.at("no.such"), std::out_of_range);
}

TEST_CASE("box code round trip and decoded detections stay valid") {
  const BBox b{{3.0, -2.0, 0.8}, 4.4, 1.9, 1.6, 2.5};
  const BBox r = decode_box(encode_box(b, {1.0, 1.0}), {1.0, 1.0});
  CHECK(r.center.x == doctest::Approx(3.0));
  CHECK(r.center.y == doctest::Approx(-2.0));
  CHECK(r.l == doctest::Approx(4.4));
  CHECK(r.yaw == doctest::Approx(2.5));

  const Mat head = random_mat(50, kHeadDim, 40, 30.0);
  std::vector<Vec2> anchors(50);
  for (const Detection& d : decode_head(head, anchors, 2)) {
    CHECK(d.confidence >= 0.0);
    CHECK(d.confidence <= 1.0);
    CHECK(d.bbox.l > 0.0);
    CHECK(d.bbox.w > 0.0);
    CHECK(d.bbox.h > 0.0);
    CHECK(d.source == 2);
  }
  const Mat moderate = random_mat(50, kHeadDim, 41, 5.0);
  for (const Detection& d : decode_head(moderate, anchors, 0)) {
    CHECK(d.confidence > 0.0);
    CHECK(d.confidence < 1.0);
  }
}

TEST_CASE("motion embedding examples") {
  const ModelConfig c = small_config();
  ModelParams p = ModelParams::init(c, 1);
  ad::Tape tape;
  Net net(tape, p, c, false);
  const AgentState ego = agent_at(0, Pose{2, 1, 0, 0.3});
  Query a = query_at({4, 4}, 0.95, c.d);
  a.agent_pose = Pose{-3, 2, 0, 1.0};
  a.agent_velocity = {5, 1};
  const std::vector<Query> qs{a, a, query_at({0, 0}, 0.5, c.d)};
  const Mat m = motion_embed(net, motion_rows(qs, ego, 1.0)).value();
  CHECK(m.cols() == c.d);
  CHECK(m.row(0) == m.row(1));
  CHECK_FALSE(m.row(0).isApprox(m.row(2)));

  zero(p, "motion.0.W");
  zero(p, "motion.1.W");
  randomize(p, "motion.1.b", 7);
  ad::Tape t2;
  Net zeroed(t2, p, c, false);
  const Mat mz = motion_embed(zeroed, motion_rows(qs, ego, 1.0)).value();
  for (Eigen::Index r = 0; r < mz.rows(); ++r) CHECK(mz.row(r) == p.at("motion.1.b"));
}

TEST_CASE("mta_align with zero generators reduces to normalized embeddings") {
  const ModelConfig c = small_config();
  ModelParams p = ModelParams::init(c, 2);
  zero(p, "time.1.W");
  zero(p, "time.1.b");
  ad::Tape tape;
  Net net(tape, p, c, false);
  const AgentState ego = agent_at(0, Pose{});
  const std::vector<Query> qs{query_at({1, 2}, 1.0, c.d), query_at({1, 2}, 0.93, c.d)};
  const ad::Var content = net.constant(random_mat(2, c.d, 50));
  const AlignedQueries al = mta_align(net, qs, content, Stream::kTarget, ego, 1.0);
  CHECK(al.position.value().allFinite());

  // Independent position-MLP evaluation.
  Mat pe(2, kPositionFeatureDim);
  pe.row(0) = pe.row(1) = position_features({1, 2});
  Mat h = (pe * p.at("pos.0.W").transpose()).rowwise() + p.at("pos.0.b").row(0);
  h = h.array().tanh();
  const Mat pos = (h * p.at("pos.1.W").transpose()).rowwise() + p.at("pos.1.b").row(0);
  for (Eigen::Index r = 0; r < 2; ++r) {
    CHECK(al.position.value().row(r).transpose().isApprox(layer_norm(pos.row(r).transpose()), 1e-12));
    CHECK(al.content.value().row(r).transpose().isApprox(layer_norm(content.value().row(r).transpose()), 1e-12));
  }
  CHECK(al.initial.value() == content.value());
}

TEST_CASE("mta_align: tau changes only the position stream under zero generators") {
  const ModelConfig c = small_config();
  ModelParams p = ModelParams::init(c, 2);
  randomize(p, "time.1.b", 8);
  ad::Tape tape;
  Net net(tape, p, c, false);
  const AgentState ego = agent_at(0, Pose{});
  const std::vector<Query> qs{query_at({1, 2}, 1.0, c.d), query_at({1, 2}, 0.9, c.d)};
  Mat same(2, c.d);
  same.row(0) = same.row(1) = random_mat(1, c.d, 51);
  const AlignedQueries al = mta_align(net, qs, net.constant(same), Stream::kContext, ego, 1.0);
  CHECK(al.content.value().row(0) == al.content.value().row(1));
  CHECK_FALSE(al.position.value().row(0).isApprox(al.position.value().row(1)));
  CHECK_THROWS(mta_align(net, {}, net.constant(Mat(0, c.d)), Stream::kTarget, ego, 1.0));
}

TEST_CASE("temp_fusion_step cold start, propagation and FIFO eviction") {
  ModelConfig c = small_config();
  c.k_q = 3;
  const ModelParams p = ModelParams::init(c, 5);
  const AgentState ego = agent_at(0, Pose{0, 0, 0, 0.2}, {3, 0});
  MemoryQueue mem(c.memory_frames, c.k_q);

  ad::Tape tape;
  Net net(tape, p, c, false);
  const RoIBatch none{net.constant(Mat(0, c.d)), {}, {}};
  TempFusionResult r0 = temp_fusion_step(net, batch(net, 4, 1, 0.1), none, mem, ego, 0.1, 0);
  CHECK(r0.queries.size() == 4);
  CHECK(r0.detections.size() == 4);
  REQUIRE(r0.memory.slots().size() == 1);
  CHECK(r0.memory.slots()[0].queries.size() == 3);
  CHECK(r0.memory.slots()[0].queries[0].score >= r0.memory.slots()[0].queries[1].score);

  TempFusionResult r1 = temp_fusion_step(net, batch(net, 4, 2, 0.2), batch(net, 3, 3, 0.2), r0.memory, ego, 0.2, 1);
  CHECK(r1.queries.size() == 7);
  CHECK(r1.head.rows() == 7);
  CHECK(r1.memory.slots().size() == 2);

  TempFusionResult r2 = temp_fusion_step(net, batch(net, 4, 4, 0.3), none, r1.memory, ego, 0.3, 2);
  CHECK(r2.memory.slots().size() == 2);
  CHECK(r2.memory.slots().front().frame_index == 1);
  CHECK(r2.memory.slots().back().frame_index == 2);
  for (const Query& q : r2.memory.slots().back().queries) CHECK(q.tau == 0.3);

  CHECK_THROWS_AS(temp_fusion_step(net, none, none, mem, ego, 0.1, 0), std::invalid_argument);
}

TEST_CASE("temp_fusion_step without temporal fusion ignores memory") {
  ModelConfig c = small_config();
  c.temporal = false;
  const ModelParams p = ModelParams::init(c, 5);
  ad::Tape tape;
  Net net(tape, p, c, false);
  MemoryQueue mem(c.memory_frames, c.k_q);
  const RoIBatch none{net.constant(Mat(0, c.d)), {}, {}};
  const AgentState ego = agent_at(0, Pose{});
  const TempFusionResult r = temp_fusion_step(net, batch(net, 4, 1, 0.1), none, mem, ego, 0.1, 0);
  CHECK(r.memory.slots().empty());
  CHECK(r.queries.size() == 4);
}

TEST_CASE("temp_fusion_step is invariant to a uniform time shift") {
  const ModelConfig c = small_config();
  ModelParams p = ModelParams::init(c, 6);
  for (const char* n : {"time.0.W", "time.0.b", "time.1.W", "time.1.b"}) zero(p, n);
  const AgentState ego = agent_at(0, Pose{1, 1, 0, 0.4}, {2, 1});

  auto run_shifted = [&](double shift) {
    ad::Tape tape;
    Net net(tape, p, c, false);
    MemoryQueue mem(c.memory_frames, c.k_q);
    Mat last;
    for (int f = 0; f < 3; ++f) {
      const double t = 0.1 * (f + 1) + shift;
      RoIBatch loc = batch(net, 5, 10 + f, 0.1 * (f + 1));
      for (double& tau : loc.tau) tau += shift;
      const TempFusionResult r = temp_fusion_step(net, loc, batch(net, 2, 20 + f, 0.0), mem, ego, t, f);
      mem = r.memory;
      last = r.context.value();
    }
    return last;
  };
  const Mat base = run_shifted(0.0);
  CHECK(run_shifted(37.25).isApprox(base, 1e-9));
}

TEST_CASE("memory queue invariants under random pushes") {
  CounterRng rng(17, 0);
  for (int trial = 0; trial < 40; ++trial) {
    const int T = 1 + static_cast<int>(rng.below(5));
    const int K = 1 + static_cast<int>(rng.below(6));
    MemoryQueue mem(T, K);
    int frame = static_cast<int>(rng.below(3));
    for (int step = 0; step < 12; ++step) {
      std::vector<Query> qs(rng.below(10));
      for (Query& q : qs) q.score = rng.uniform();
      mem.push(frame, qs);
      CHECK(mem.slots().size() <= static_cast<std::size_t>(T));
      CHECK(mem.total() <= static_cast<std::size_t>(T * K));
      for (std::size_t s = 0; s < mem.slots().size(); ++s) {
        const auto& slot = mem.slots()[s];
        if (s > 0) CHECK(slot.frame_index > mem.slots()[s - 1].frame_index);
        CHECK(std::is_sorted(slot.queries.begin(), slot.queries.end(),
                             [](const Query& a, const Query& b) { return a.score > b.score; }));
      }
      CHECK(mem.newest()->frame_index == frame);
      frame += 1 + static_cast<int>(rng.below(2));
    }
    CHECK_THROWS_AS(mem.push(mem.newest()->frame_index, {}), std::invalid_argument);
  }
  CHECK_THROWS_AS(MemoryQueue(0, 1), std::invalid_argument);
}

TEST_CASE("spatial_fusion with one agent is self-attention") {
  const ModelConfig c = small_config();
  const ModelParams p = ModelParams::init(c, 7);
  ad::Tape tape;
  Net net(tape, p, c, false);
  const std::vector<SharedQueries> agents{shared(net, 3, {{0, 0}, {10, 0}, {0, -9}}, {0.9, 0.5, 0.2}, 1)};
  const SpatialFusionResult r = spatial_fusion(net, agents, 3);
  REQUIRE(r.positions.size() == 3);
  CHECK(r.key.value() == r.query.value());
  CHECK(r.fused.value().isApprox(attention(r.query.value(), r.key.value(), r.value.value()), 1e-14));
  CHECK(r.detections.size() == 3);
  for (const Detection& d : r.detections) CHECK(d.source == kFusedSource);
}

TEST_CASE("spatial_fusion union with zero padding") {
  const ModelConfig c = small_config();
  const ModelParams p = ModelParams::init(c, 7);
  ad::Tape tape;
  Net net(tape, p, c, false);
  const std::vector<SharedQueries> agents{shared(net, 0, {{0, 0}}, {0.8}, 1), shared(net, 1, {{5, 5}}, {0.6}, 2)};
  const SpatialFusionResult r = spatial_fusion(net, agents, 0);
  CHECK(r.positions.size() == 2);
  CHECK(r.key.rows() == 4);
  CHECK(r.query.rows() == 2);
  const Mat& v = r.value.value();
  CHECK(v.row(1).isZero());
  CHECK(v.row(2).isZero());
  CHECK_FALSE(v.row(0).isZero());
  CHECK_FALSE(v.row(3).isZero());

  // Same 3.2 m cell from two agents: one union row, reference is the higher score.
  const std::vector<SharedQueries> close{shared(net, 0, {{0.5, 0.5}}, {0.4}, 3),
                                         shared(net, 1, {{2.9, 3.0}}, {0.7}, 4)};
  const SpatialFusionResult rc = spatial_fusion(net, close, 0);
  REQUIRE(rc.positions.size() == 1);
  CHECK(rc.positions[0].x == 2.9);
  CHECK(rc.key.rows() == 2);

  CHECK_THROWS_AS(spatial_fusion(net, std::vector<SharedQueries>{}, 0), std::invalid_argument);
  CHECK_THROWS_AS(spatial_fusion(net, agents, 5), std::invalid_argument);
}

TEST_CASE("spatial_fusion is invariant to cooperative-agent permutation") {
  const ModelConfig c = small_config();
  ModelParams p = ModelParams::init(c, 8);
  randomize(p, "fuse.offset.b", 9);
  ad::Tape tape;
  Net net(tape, p, c, false);
  CounterRng rng(3, 3);
  auto pts = [&](int n) {
    std::vector<Vec2> v;
    for (int i = 0; i < n; ++i) v.push_back({rng.uniform(-12, 12), rng.uniform(-12, 12)});
    return v;
  };
  auto scores = [&](int n) {
    std::vector<double> s;
    for (int i = 0; i < n; ++i) s.push_back(rng.uniform());
    return s;
  };
  SharedQueries ego = shared(net, 0, pts(6), scores(6), 10);
  SharedQueries a = shared(net, 1, pts(5), scores(5), 11);
  SharedQueries b = shared(net, 2, pts(7), scores(7), 12);
  SharedQueries e = shared(net, 3, pts(4), scores(4), 13);
  const Mat base = spatial_fusion(net, std::vector<SharedQueries>{ego, a, b, e}, 0).fused.value();
  CHECK(spatial_fusion(net, std::vector<SharedQueries>{e, b, ego, a}, 0).fused.value() == base);

  // Relabelling the cooperative agents reorders the key concatenation.
  std::swap(a.agent_id, e.agent_id);
  const Mat relabelled = spatial_fusion(net, std::vector<SharedQueries>{ego, a, b, e}, 0).fused.value();
  CHECK(relabelled.isApprox(base, 1e-9));
  CHECK((relabelled - base).cwiseAbs().maxCoeff() < 1e-9);
}
