#include "tacood/fusion_core.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "le_bytes.hpp"
#include "tacood/rng.hpp"

namespace tacood {

namespace {

constexpr char kParamsMagic[4] = {'T', 'P', 'R', 'M'};
constexpr std::uint16_t kParamsVersion = 1;

void check(bool ok, const std::string& what) {
  if (!ok) throw std::invalid_argument(what);
}

std::uint64_t name_hash(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (const unsigned char c : s) h = (h ^ c) * 1099511628211ULL;
  return h;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

ad::Var mlp2(Net& net, const std::string& prefix, const ad::Var& x) {
  const ad::Var h = ad::tanh(ad::linear(x, net(prefix + ".0.W"), net(prefix + ".0.b")));
  return ad::linear(h, net(prefix + ".1.W"), net(prefix + ".1.b"));
}

ad::Var position_embed(Net& net, std::span<const Vec2> positions) {
  Mat pe(static_cast<Eigen::Index>(positions.size()), kPositionFeatureDim);
  for (std::size_t r = 0; r < positions.size(); ++r) pe.row(static_cast<Eigen::Index>(r)) = position_features(positions[r]);
  return mlp2(net, "pos", net.constant(std::move(pe)));
}

const char* stream_name(Stream s) {
  switch (s) {
    case Stream::kPosition:
      return "pos";
    case Stream::kContext:
      return "ctx";
    case Stream::kTarget:
      return "tgt";
  }
  return "";
}

}  // namespace

// ---------------------------------------------------------------------------

Eigen::VectorXd linear(const Mat& w, const Eigen::VectorXd& b, const Eigen::VectorXd& x) {
  check(w.cols() == x.size() && w.rows() == b.size(), "linear: shape mismatch");
  Eigen::VectorXd y = b;
  for (Eigen::Index r = 0; r < w.rows(); ++r) {
    for (Eigen::Index c = 0; c < w.cols(); ++c) y(r) += w(r, c) * x(c);
  }
  return y;
}

Eigen::VectorXd layer_norm(const Eigen::VectorXd& x, double eps) {
  check(x.size() >= 2, "layer_norm: dimension must be >= 2");
  const double mu = x.mean();
  const double var = (x.array() - mu).square().mean();
  return (x.array() - mu) / std::sqrt(var + eps);
}

Mat attention(const Mat& q, const Mat& k, const Mat& v) {
  check(k.rows() >= 1, "attention: no keys");
  check(q.cols() == k.cols() && k.rows() == v.rows(), "attention: shape mismatch");
  const double s = 1.0 / std::sqrt(static_cast<double>(q.cols()));
  Mat out = Mat::Zero(q.rows(), v.cols());
  for (Eigen::Index i = 0; i < q.rows(); ++i) {
    Eigen::VectorXd logits(k.rows());
    for (Eigen::Index j = 0; j < k.rows(); ++j) logits(j) = s * q.row(i).dot(k.row(j));
    const double m = logits.maxCoeff();
    Eigen::VectorXd w = (logits.array() - m).exp();
    w /= w.sum();
    for (Eigen::Index j = 0; j < k.rows(); ++j) out.row(i) += w(j) * v.row(j);
  }
  return out;
}

Eigen::VectorXd mln(const Mat& w_gamma, const Mat& w_beta, const Eigen::VectorXd& x, const Eigen::VectorXd& m) {
  check(w_gamma.rows() == x.size() && w_beta.rows() == x.size() && w_gamma.cols() == m.size() &&
            w_beta.cols() == m.size(),
        "mln: shape mismatch");
  const Eigen::VectorXd gamma = (w_gamma * m).array() + 1.0;
  return gamma.cwiseProduct(layer_norm(x)) + w_beta * m;
}

double focal_loss(double p, int y, double alpha, double gamma) {
  check(p > 0.0 && p < 1.0, "focal_loss: p must lie in (0, 1)");
  check(y == 0 || y == 1, "focal_loss: y must be 0 or 1");
  if (y == 1) return -alpha * std::pow(1.0 - p, gamma) * std::log(p);
  return -(1.0 - alpha) * std::pow(p, gamma) * std::log(1.0 - p);
}

double smooth_l1(double x, double beta) {
  check(beta > 0.0, "smooth_l1: beta must be > 0");
  const double a = std::abs(x);
  return a < beta ? 0.5 * x * x / beta : a - 0.5 * beta;
}

// ---------------------------------------------------------------------------

void validate(const ModelConfig& c) {
  auto fail = [](const std::string& field, const std::string& why) {
    throw ConfigError("invalid ModelConfig." + field + ": " + why);
  };
  if (c.d < 2) fail("d", "must be >= 2");
  if (c.k_roi_local < 1) fail("k_roi_local", "must be >= 1");
  if (c.k_roi_global < 1) fail("k_roi_global", "must be >= 1");
  if (c.k_q < 1) fail("k_q", "must be >= 1");
  if (c.k_q > c.k_roi_local) fail("k_q", "must not exceed k_roi_local");
  if (c.memory_frames < 1) fail("memory_frames", "must be >= 1");
  if (c.local_dilation < 0) fail("local_dilation", "must be >= 0");
  if (c.global_dilation < 0) fail("global_dilation", "must be >= 0");
  if (!(c.range.x_min < c.range.x_max)) fail("range", "x bounds out of order");
  if (!(c.range.y_min < c.range.y_max)) fail("range", "y bounds out of order");
}

Eigen::RowVectorXd position_features(const Vec2& p) {
  Eigen::RowVectorXd f(kPositionFeatureDim);
  f(0) = p.x / 64.0;
  f(1) = p.y / 64.0;
  int k = 2;
  for (const double wavelength : {4.0, 8.0, 16.0, 32.0, 64.0}) {
    const double w = 2.0 * kPi / wavelength;
    f(k++) = std::sin(w * p.x);
    f(k++) = std::cos(w * p.x);
    f(k++) = std::sin(w * p.y);
    f(k++) = std::cos(w * p.y);
  }
  return f;
}

ModelParams ModelParams::init(const ModelConfig& config, std::uint64_t seed) {
  validate(config);
  const int d = config.d;
  ModelParams p;
  auto dense = [&](const std::string& name, int out, int in) {
    CounterRng rng(seed, name_hash(name));
    const double a = std::sqrt(6.0 / (in + out));
    Mat w(out, in);
    for (Eigen::Index r = 0; r < w.rows(); ++r) {
      for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = rng.uniform(-a, a);
    }
    p.tensors_[name + ".W"] = std::move(w);
    p.tensors_[name + ".b"] = Mat::Zero(1, out);
  };
  dense("embed.local", d, kCellFeatureDim);
  dense("embed.global", d, kCellFeatureDim);
  dense("roi.local", kHeadDim, d);
  dense("roi.global", 1, d);
  dense("pos.0", d, kPositionFeatureDim);
  dense("pos.1", d, d);
  dense("time.0", d, 1);
  dense("time.1", d, d);
  dense("motion.0", d, kMotionInputDim);
  dense("motion.1", d, d);
  for (const char* s : {"pos", "ctx", "tgt"}) {
    p.tensors_[std::string("mln.") + s + ".gamma"] = Mat::Zero(d, d);
    p.tensors_[std::string("mln.") + s + ".beta"] = Mat::Zero(d, d);
  }
  dense("ctx", d, d);
  for (const char* a : {"hybrid", "cross"}) {
    for (const char* w : {"q", "k", "v", "o"}) dense(std::string(a) + "." + w, d, d);
    // A key bias shifts each row of attention logits uniformly, which softmax cancels.
    p.tensors_.erase(std::string(a) + ".k.b");
  }
  dense("lqdet.0", d, d);
  dense("lqdet.1", kHeadDim, d);
  dense("fuse.pos", d, kPositionFeatureDim);
  // Large enough that same-cell rows dominate the initial fusion logits.
  p.tensors_["fuse.pos.W"] *= 4.0;
  dense("fuse.offset", d, 2);
  dense("gqdet.0", d, d);
  dense("gqdet.1", kHeadDim, d);

  // Head priors: low initial confidence and typical car geometry.
  for (const char* head : {"roi.local.b", "lqdet.1.b", "gqdet.1.b"}) {
    Mat& b = p.tensors_[head];
    b(0, 0) = -2.0;
    b(0, 3) = 0.8;
    b(0, 4) = std::log(4.4);
    b(0, 5) = std::log(1.9);
    b(0, 6) = std::log(1.6);
  }
  p.tensors_["roi.global.b"](0, 0) = -2.0;
  return p;
}

const Mat& ModelParams::at(const std::string& name) const {
  const auto it = tensors_.find(name);
  if (it == tensors_.end()) throw std::out_of_range("ModelParams: no tensor named " + name);
  return it->second;
}

Mat& ModelParams::at(const std::string& name) {
  const auto it = tensors_.find(name);
  if (it == tensors_.end()) throw std::out_of_range("ModelParams: no tensor named " + name);
  return it->second;
}

int ModelParams::d() const { return static_cast<int>(at("ctx.W").rows()); }

std::size_t ModelParams::size() const {
  std::size_t n = 0;
  for (const auto& kv : tensors_) n += static_cast<std::size_t>(kv.second.size());
  return n;
}

void ModelParams::write(std::ostream& out) const {
  out.write(kParamsMagic, 4);
  le::put<std::uint16_t>(out, kParamsVersion);
  le::put<std::uint32_t>(out, static_cast<std::uint32_t>(tensors_.size()));
  for (const auto& [name, m] : tensors_) {
    le::put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    le::put<std::uint32_t>(out, static_cast<std::uint32_t>(m.rows()));
    le::put<std::uint32_t>(out, static_cast<std::uint32_t>(m.cols()));
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      for (Eigen::Index c = 0; c < m.cols(); ++c) le::put_f64(out, m(r, c));
    }
  }
  if (!out) throw std::runtime_error("ModelParams: write failed");
}

ModelParams ModelParams::read(std::istream& in) {
  char magic[4];
  if (!in.read(magic, 4) || !std::equal(magic, magic + 4, kParamsMagic)) {
    throw le::FormatError("ModelParams: bad magic");
  }
  const auto version = le::get<std::uint16_t>(in);
  if (version != kParamsVersion) throw le::FormatError("ModelParams: unsupported version " + std::to_string(version));
  const auto count = le::get<std::uint32_t>(in);
  ModelParams p;
  for (std::uint32_t t = 0; t < count; ++t) {
    const auto len = le::get<std::uint32_t>(in);
    if (len > 4096) throw le::FormatError("ModelParams: implausible name length");
    std::string name(len, '\0');
    if (!in.read(name.data(), len)) throw le::FormatError("ModelParams: truncated name");
    const auto rows = le::get<std::uint32_t>(in);
    const auto cols = le::get<std::uint32_t>(in);
    if (static_cast<std::uint64_t>(rows) * cols > (1u << 26)) throw le::FormatError("ModelParams: implausible shape");
    Mat m(rows, cols);
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = le::get_f64(in);
    }
    if (!m.allFinite()) throw le::FormatError("ModelParams: non-finite value in " + name);
    if (!p.tensors_.emplace(std::move(name), std::move(m)).second) throw le::FormatError("ModelParams: duplicate tensor");
  }
  return p;
}

bool operator==(const ModelParams& a, const ModelParams& b) {
  if (a.tensors().size() != b.tensors().size()) return false;
  for (const auto& [name, m] : a.tensors()) {
    if (!b.contains(name)) return false;
    const Mat& o = b.at(name);
    if (o.rows() != m.rows() || o.cols() != m.cols() || o != m) return false;
  }
  return true;
}

Net::Net(ad::Tape& tape, const ModelParams& params, const ModelConfig& config, bool trainable)
    : tape_(&tape), params_(&params), config_(&config), trainable_(trainable) {}

ad::Var Net::operator()(const std::string& name) {
  const auto it = bound_.find(name);
  if (it != bound_.end()) return it->second;
  const Mat& m = params_->at(name);
  const ad::Var v = trainable_ ? tape_->variable(m) : tape_->constant(m);
  bound_.emplace(name, v);
  return v;
}

// ---------------------------------------------------------------------------

MemoryQueue::MemoryQueue(int capacity_frames, int per_frame) : capacity_(capacity_frames), per_frame_(per_frame) {
  check(capacity_frames >= 1, "MemoryQueue: capacity_frames must be >= 1");
  check(per_frame >= 1, "MemoryQueue: per_frame must be >= 1");
}

void MemoryQueue::push(int frame_index, std::vector<Query> queries) {
  if (!slots_.empty() && frame_index <= slots_.back().frame_index) {
    throw std::invalid_argument("MemoryQueue: frame index " + std::to_string(frame_index) +
                                " does not follow " + std::to_string(slots_.back().frame_index));
  }
  std::stable_sort(queries.begin(), queries.end(), [](const Query& a, const Query& b) { return a.score > b.score; });
  if (queries.size() > static_cast<std::size_t>(per_frame_)) queries.resize(static_cast<std::size_t>(per_frame_));
  slots_.push_back(MemorySlot{frame_index, std::move(queries)});
  while (slots_.size() > static_cast<std::size_t>(capacity_)) slots_.pop_front();
}

std::size_t MemoryQueue::total() const {
  std::size_t n = 0;
  for (const auto& s : slots_) n += s.queries.size();
  return n;
}

Eigen::RowVectorXd encode_box(const BBox& box, const Vec2& anchor) {
  Eigen::RowVectorXd c(kBoxCodeDim);
  c << box.center.x - anchor.x, box.center.y - anchor.y, box.center.z, std::log(box.l), std::log(box.w),
      std::log(box.h), std::sin(box.yaw), std::cos(box.yaw);
  return c;
}

BBox decode_box(const Eigen::RowVectorXd& code, const Vec2& anchor) {
  check(code.size() == kBoxCodeDim, "decode_box: expects an 8-value code");
  auto dim = [](double v) { return std::exp(std::clamp(v, -3.0, 3.0)); };
  BBox b;
  b.center = {anchor.x + code(0), anchor.y + code(1), code(2)};
  b.l = dim(code(3));
  b.w = dim(code(4));
  b.h = dim(code(5));
  b.yaw = (code(6) == 0.0 && code(7) == 0.0) ? 0.0 : wrap_angle(std::atan2(code(6), code(7)));
  return b;
}

std::vector<Detection> decode_head(const Mat& head, std::span<const Vec2> anchors, int source) {
  check(head.cols() == kHeadDim && static_cast<std::size_t>(head.rows()) == anchors.size(),
        "decode_head: shape mismatch");
  std::vector<Detection> out;
  out.reserve(anchors.size());
  for (Eigen::Index r = 0; r < head.rows(); ++r) {
    Detection d;
    d.confidence = sigmoid(head(r, 0));
    d.bbox = decode_box(head.row(r).tail(kBoxCodeDim), anchors[static_cast<std::size_t>(r)]);
    d.source = source;
    out.push_back(d);
  }
  return out;
}

// ---------------------------------------------------------------------------

MotionRows motion_rows(std::span<const Query> queries, const AgentState& agent, double t_ref) {
  MotionRows rows;
  const Pose inv = inverse(agent.pose);
  for (const Query& q : queries) {
    rows.dt.push_back(t_ref - q.tau);
    rows.rel_pose.push_back(compose(inv, q.agent_pose));
    rows.velocity.push_back(q.agent_velocity);
  }
  return rows;
}

ad::Var motion_embed(Net& net, const MotionRows& rows) {
  const auto n = static_cast<Eigen::Index>(rows.dt.size());
  Mat x(n, kMotionInputDim);
  for (Eigen::Index r = 0; r < n; ++r) {
    const auto i = static_cast<std::size_t>(r);
    const Pose& p = rows.rel_pose[i];
    x.row(r) << rows.dt[i] / 0.1, p.x / 10.0, p.y / 10.0, std::cos(p.yaw), std::sin(p.yaw), rows.velocity[i].x / 10.0,
        rows.velocity[i].y / 10.0;
  }
  return mlp2(net, "motion", net.constant(std::move(x)));
}

ad::Var mln(Net& net, Stream stream, const ad::Var& x, const ad::Var& m) {
  const std::string base = std::string("mln.") + stream_name(stream);
  const ad::Var gamma = ad::add_scalar(ad::linear(m, net(base + ".gamma")), 1.0);
  const ad::Var beta = ad::linear(m, net(base + ".beta"));
  return ad::add(ad::mul(gamma, ad::layer_norm(x)), beta);
}

AlignedQueries mta_align(Net& net, std::span<const Query> queries, const ad::Var& content, Stream stream,
                         const AgentState& agent, double t_ref) {
  check(!queries.empty(), "mta_align: no queries");
  check(content.rows() == static_cast<Eigen::Index>(queries.size()), "mta_align: content rows != queries");
  std::vector<Vec2> positions;
  positions.reserve(queries.size());
  for (const Query& q : queries) positions.push_back(q.position);
  const ad::Var pos = position_embed(net, positions);

  AlignedQueries out;
  out.initial = stream == Stream::kContext ? ad::linear(content, net("ctx.W"), net("ctx.b")) : content;
  if (!net.config().temporal) {
    out.position = ad::layer_norm(pos);
    out.content = ad::layer_norm(out.initial);
    return out;
  }
  const MotionRows rows = motion_rows(queries, agent, t_ref);
  const ad::Var m = motion_embed(net, rows);
  Mat dt(static_cast<Eigen::Index>(rows.dt.size()), 1);
  for (std::size_t i = 0; i < rows.dt.size(); ++i) dt(static_cast<Eigen::Index>(i), 0) = rows.dt[i] / 0.1;
  const ad::Var time = mlp2(net, "time", net.constant(std::move(dt)));
  out.position = ad::add(mln(net, Stream::kPosition, pos, m), time);
  out.content = mln(net, stream, out.initial, m);
  return out;
}

TempFusionResult temp_fusion_step(Net& net, const RoIBatch& local, const RoIBatch& global, const MemoryQueue& memory,
                                  const AgentState& agent, double t_aligned, int frame_index) {
  if (local.positions.empty()) throw std::invalid_argument("temp_fusion_step: empty local RoI set");
  check(local.embedding.rows() == static_cast<Eigen::Index>(local.positions.size()) &&
            local.tau.size() == local.positions.size(),
        "temp_fusion_step: inconsistent local RoI batch");
  const ModelConfig& cfg = net.config();
  const int d = cfg.d;

  TempFusionResult res{{}, {}, {}, {}, memory};
  for (std::size_t i = 0; i < local.positions.size(); ++i) {
    res.queries.push_back(Query{local.positions[i], {}, local.tau[i], agent.pose, agent.velocity, 0.0});
  }
  std::vector<ad::Var> cur_pos, cur_content, cur_init, kv_pos, kv_content;
  const AlignedQueries fresh = mta_align(net, res.queries, local.embedding, Stream::kTarget, agent, t_aligned);
  cur_pos.push_back(fresh.position);
  cur_content.push_back(fresh.content);
  cur_init.push_back(fresh.initial);

  auto stored = [&](const std::vector<Query>& qs) {
    Mat ctx(static_cast<Eigen::Index>(qs.size()), d);
    for (std::size_t i = 0; i < qs.size(); ++i) {
      check(qs[i].context.size() == d, "temp_fusion_step: stored context has wrong width");
      ctx.row(static_cast<Eigen::Index>(i)) = qs[i].context.transpose();
    }
    return mta_align(net, qs, net.constant(std::move(ctx)), Stream::kContext, agent, t_aligned);
  };

  if (cfg.temporal && !memory.slots().empty()) {
    const auto& slots = memory.slots();
    const auto& newest = slots.back().queries;
    if (!newest.empty()) {
      const AlignedQueries prop = stored(newest);
      cur_pos.push_back(prop.position);
      cur_content.push_back(prop.content);
      cur_init.push_back(prop.initial);
      res.queries.insert(res.queries.end(), newest.begin(), newest.end());
    }
    std::vector<Query> older;
    for (std::size_t s = 0; s + 1 < slots.size(); ++s) {
      older.insert(older.end(), slots[s].queries.begin(), slots[s].queries.end());
    }
    if (!older.empty()) {
      const AlignedQueries hist = stored(older);
      kv_pos.push_back(hist.position);
      kv_content.push_back(hist.content);
    }
  }

  const ad::Var pos = ad::concat_rows(cur_pos);
  const ad::Var content = ad::concat_rows(cur_content);
  const ad::Var init = ad::concat_rows(cur_init);
  kv_pos.insert(kv_pos.begin(), pos);
  kv_content.insert(kv_content.begin(), content);
  const ad::Var keys_pos = ad::concat_rows(kv_pos);
  const ad::Var keys_content = ad::concat_rows(kv_content);

  // Hybrid attention over the current set and the history.
  const ad::Var q = ad::linear(ad::add(content, pos), net("hybrid.q.W"), net("hybrid.q.b"));
  const ad::Var k = ad::linear(ad::add(keys_content, keys_pos), net("hybrid.k.W"));
  const ad::Var v = ad::linear(keys_content, net("hybrid.v.W"), net("hybrid.v.b"));
  const ad::Var hybrid = ad::linear(ad::attention(q, k, v), net("hybrid.o.W"), net("hybrid.o.b"));
  ad::Var x = ad::layer_norm(ad::add(content, hybrid));

  // Cross attention against the global RoI features.
  if (cfg.global_attention && !global.positions.empty()) {
    const ad::Var gpos = position_embed(net, global.positions);
    const ad::Var q2 = ad::linear(ad::add(x, pos), net("cross.q.W"), net("cross.q.b"));
    const ad::Var k2 = ad::linear(ad::add(global.embedding, gpos), net("cross.k.W"));
    const ad::Var v2 = ad::linear(global.embedding, net("cross.v.W"), net("cross.v.b"));
    const ad::Var cross = ad::linear(ad::attention(q2, k2, v2), net("cross.o.W"), net("cross.o.b"));
    x = ad::layer_norm(ad::add(x, cross));
  }

  res.context = ad::add(x, init);
  res.head = ad::linear(ad::tanh(ad::linear(res.context, net("lqdet.0.W"), net("lqdet.0.b"))), net("lqdet.1.W"),
                        net("lqdet.1.b"));

  const Mat& hv = res.head.value();
  const Mat& cv = res.context.value();
  std::vector<Vec2> anchors;
  for (std::size_t i = 0; i < res.queries.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    res.queries[i].score = sigmoid(hv(r, 0));
    res.queries[i].context = cv.row(r).transpose();
    anchors.push_back(res.queries[i].position);
  }
  res.detections = decode_head(hv, anchors, agent.id);

  if (cfg.temporal) {
    std::vector<Query> keep;
    keep.reserve(res.queries.size());
    for (std::size_t i = 0; i < res.queries.size(); ++i) {
      Query m = res.queries[i];
      m.position = {res.detections[i].bbox.center.x, res.detections[i].bbox.center.y};
      m.tau = t_aligned;
      m.agent_pose = agent.pose;
      m.agent_velocity = agent.velocity;
      keep.push_back(std::move(m));
    }
    res.memory.push(frame_index, std::move(keep));
  }
  return res;
}

SpatialFusionResult spatial_fusion(Net& net, std::span<const SharedQueries> agents, int ego_id) {
  if (agents.empty()) throw std::invalid_argument("spatial_fusion: no agents");
  std::vector<const SharedQueries*> order;
  const SharedQueries* ego = nullptr;
  for (const auto& a : agents) {
    check(a.positions.size() == a.scores.size() &&
              (a.positions.empty() || a.context.rows() == static_cast<Eigen::Index>(a.positions.size())),
          "spatial_fusion: inconsistent agent input");
    if (a.agent_id == ego_id) {
      if (ego != nullptr) throw std::invalid_argument("spatial_fusion: duplicate ego");
      ego = &a;
    } else {
      order.push_back(&a);
    }
  }
  if (ego == nullptr) throw std::invalid_argument("spatial_fusion: ego agent missing");
  std::sort(order.begin(), order.end(), [](const auto* a, const auto* b) { return a->agent_id < b->agent_id; });
  for (std::size_t i = 1; i < order.size(); ++i) {
    if (order[i]->agent_id == order[i - 1]->agent_id) throw std::invalid_argument("spatial_fusion: duplicate agent");
  }
  order.insert(order.begin(), ego);
  const std::size_t n_agents = order.size();

  // Per union cell: best query index per agent and the overall reference query.
  struct Cell {
    std::vector<int> best;
    double ref_score = -1.0;
    int ref_agent = 0;
    Vec2 ref_pos;
  };
  std::map<CellKey, Cell> cells;
  for (std::size_t a = 0; a < n_agents; ++a) {
    const SharedQueries& s = *order[a];
    for (std::size_t i = 0; i < s.positions.size(); ++i) {
      const CellKey key{static_cast<std::int32_t>(std::floor(s.positions[i].x / kGlobalResolution)),
                        static_cast<std::int32_t>(std::floor(s.positions[i].y / kGlobalResolution))};
      Cell& c = cells[key];
      if (c.best.empty()) c.best.assign(n_agents, -1);
      const int cur = c.best[a];
      if (cur < 0 || s.scores[i] > s.scores[static_cast<std::size_t>(cur)]) c.best[a] = static_cast<int>(i);
      const bool better = s.scores[i] > c.ref_score ||
                          (s.scores[i] == c.ref_score && s.agent_id < order[static_cast<std::size_t>(c.ref_agent)]->agent_id);
      if (better) {
        c.ref_score = s.scores[i];
        c.ref_agent = static_cast<int>(a);
        c.ref_pos = s.positions[i];
      }
    }
  }

  SpatialFusionResult res;
  const int d = net.config().d;
  const auto u = static_cast<Eigen::Index>(cells.size());
  for (const auto& kv : cells) res.positions.push_back(kv.second.ref_pos);
  if (u == 0) return res;

  Mat pe(u, kPositionFeatureDim);
  for (Eigen::Index r = 0; r < u; ++r) pe.row(r) = position_features(res.positions[static_cast<std::size_t>(r)]);
  const ad::Var pos = ad::linear(net.constant(std::move(pe)), net("fuse.pos.W"), net("fuse.pos.b"));

  std::vector<ad::Var> padded;
  for (std::size_t a = 0; a < n_agents; ++a) {
    const SharedQueries& s = *order[a];
    std::vector<int> idx;
    Mat offset = Mat::Zero(u, 2);
    Mat mask = Mat::Zero(u, 1);
    Eigen::Index r = 0;
    for (const auto& kv : cells) {
      const int i = kv.second.best[a];
      idx.push_back(i);
      if (i >= 0) {
        const Vec2& p = s.positions[static_cast<std::size_t>(i)];
        offset(r, 0) = (p.x - kv.second.ref_pos.x) / kGlobalResolution;
        offset(r, 1) = (p.y - kv.second.ref_pos.y) / kGlobalResolution;
        mask(r, 0) = 1.0;
      }
      ++r;
    }
    const ad::Var ctx = s.positions.empty() ? net.constant(Mat::Zero(u, d)) : ad::gather_rows(s.context, idx);
    const ad::Var off = ad::mul_col(ad::linear(net.constant(std::move(offset)), net("fuse.offset.W"), net("fuse.offset.b")),
                                    net.constant(std::move(mask)));
    padded.push_back(ad::add(ctx, off));
  }

  const bool with_pos = net.config().pos_embed_in_keys;
  std::vector<ad::Var> keys;
  for (const ad::Var& p : padded) keys.push_back(with_pos ? ad::add(p, pos) : p);
  res.query = with_pos ? ad::add(padded.front(), pos) : padded.front();
  res.key = ad::concat_rows(keys);
  res.value = ad::concat_rows(padded);
  res.fused = ad::attention(res.query, res.key, res.value);
  res.head = ad::linear(ad::tanh(ad::linear(res.fused, net("gqdet.0.W"), net("gqdet.0.b"))), net("gqdet.1.W"),
                        net("gqdet.1.b"));
  res.detections = decode_head(res.head.value(), res.positions, kFusedSource);
  return res;
}

}  // namespace tacood
