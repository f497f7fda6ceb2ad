#include "tacood/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <stdexcept>

#include "tacood/rng.hpp"

namespace tacood {

namespace {

std::uint64_t text_hash(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (const unsigned char c : s) h = (h ^ c) * 1099511628211ULL;
  return h;
}

Mat uniform_mat(Eigen::Index r, Eigen::Index c, CounterRng& rng, double lo = -1.5, double hi = 1.5) {
  Mat m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(lo, hi);
  return m;
}

// Scalar sum of each output weighted by a fixed random matrix of its shape.
ad::Var project(ad::Tape& tape, const std::vector<ad::Var>& outs, std::uint64_t key) {
  ad::Var total = tape.constant(Mat::Zero(1, 1));
  for (std::size_t i = 0; i < outs.size(); ++i) {
    CounterRng rng(key, i);
    Mat w(outs[i].rows(), outs[i].cols());
    for (Eigen::Index j = 0; j < w.size(); ++j) w.data()[j] = rng.normal();
    total = ad::add(total, ad::sum(ad::mul(outs[i], tape.constant(std::move(w)))));
  }
  return total;
}

// Keeps the worst report per name.
void merge(std::map<std::string, GradReport>& into, const GradReport& r) {
  auto it = into.find(r.name);
  if (it == into.end()) {
    into.emplace(r.name, r);
    return;
  }
  it->second.max_abs_err = std::max(it->second.max_abs_err, r.max_abs_err);
  if (r.max_rel_err > it->second.max_rel_err) {
    it->second.max_rel_err = r.max_rel_err;
    it->second.worst_index = r.worst_index;
  }
}

std::vector<GradReport> sorted(const std::map<std::string, GradReport>& m) {
  std::vector<GradReport> out;
  for (const auto& kv : m) out.push_back(kv.second);
  std::stable_sort(out.begin(), out.end(),
                   [](const GradReport& a, const GradReport& b) { return a.max_rel_err > b.max_rel_err; });
  return out;
}

using OpGraph = std::function<ad::Var(const std::vector<ad::Var>&)>;

struct OpSpec {
  std::string name;
  std::vector<std::pair<Eigen::Index, Eigen::Index>> shapes;
  OpGraph graph;
};

std::vector<OpSpec> op_specs() {
  using V = std::vector<ad::Var>;
  return {
      {"matmul", {{3, 4}, {4, 2}}, [](const V& v) { return ad::matmul(v[0], v[1]); }},
      {"matmul_nt", {{3, 4}, {2, 4}}, [](const V& v) { return ad::matmul_nt(v[0], v[1]); }},
      {"add", {{3, 2}, {3, 2}}, [](const V& v) { return ad::add(v[0], v[1]); }},
      {"sub", {{3, 2}, {3, 2}}, [](const V& v) { return ad::sub(v[0], v[1]); }},
      {"add_row", {{3, 4}, {1, 4}}, [](const V& v) { return ad::add_row(v[0], v[1]); }},
      {"mul", {{3, 4}, {3, 4}}, [](const V& v) { return ad::mul(v[0], v[1]); }},
      {"mul_col", {{3, 4}, {3, 1}}, [](const V& v) { return ad::mul_col(v[0], v[1]); }},
      {"scale", {{3, 3}}, [](const V& v) { return ad::scale(v[0], -1.7); }},
      {"add_scalar", {{2, 3}}, [](const V& v) { return ad::add_scalar(v[0], 0.3); }},
      {"tanh", {{3, 4}}, [](const V& v) { return ad::tanh(v[0]); }},
      {"sigmoid", {{3, 4}}, [](const V& v) { return ad::sigmoid(v[0]); }},
      {"layer_norm", {{4, 5}}, [](const V& v) { return ad::layer_norm(v[0]); }},
      {"softmax", {{3, 5}}, [](const V& v) { return ad::softmax_rows(v[0]); }},
      {"concat_rows", {{2, 3}, {3, 3}}, [](const V& v) { return ad::concat_rows(v); }},
      {"slice_cols", {{3, 5}}, [](const V& v) { return ad::slice_cols(v[0], 1, 3); }},
      {"gather_rows", {{4, 3}}, [](const V& v) { return ad::gather_rows(v[0], {2, -1, 0, 2}); }},
      {"sum", {{3, 4}}, [](const V& v) { return ad::sum(v[0]); }},
      {"linear", {{5, 4}, {3, 4}, {1, 3}}, [](const V& v) { return ad::linear(v[0], v[1], v[2]); }},
      {"attention", {{3, 4}, {5, 4}, {5, 2}}, [](const V& v) { return ad::attention(v[0], v[1], v[2]); }},
      {"focal", {{6, 1}}, [](const V& v) { return ad::focal_loss_sum(v[0], {1, 0, 1, 0, 0, 1}); }},
      {"smooth_l1", {{4, 3}},
       [](const V& v) {
         Mat target = Mat::Zero(4, 3);
         target(0, 0) = 0.6;
         target(2, 1) = -0.35;
         return ad::smooth_l1_sum(v[0], target, {1.0, 0.0, 2.0, 0.5});
       }},
  };
}

// Observation-like inputs shared by the layer checks.
struct LayerInputs {
  GradcheckSample sample;
  MemoryMap memory;
  std::vector<Query> queries;
};

using LayerGraph = std::function<std::vector<ad::Var>(Net&, const LayerInputs&)>;

std::vector<std::pair<std::string, LayerGraph>> layer_graphs() {
  std::vector<std::pair<std::string, LayerGraph>> g;
  const auto ego_obs = [](const LayerInputs& in) -> const AgentObservation& {
    const FrameObservation& f = in.sample.window.back();
    return *f.agent(f.ego_id);
  };
  g.emplace_back("roi_local", [=](Net& net, const LayerInputs& in) {
    const RoISelection sel = select_local_rois(net, ego_obs(in), net.config().k_roi_local);
    return std::vector<ad::Var>{sel.head, sel.batch.embedding};
  });
  g.emplace_back("roi_global", [=](Net& net, const LayerInputs& in) {
    return std::vector<ad::Var>{select_global_rois(net, ego_obs(in), net.config().k_roi_global).embedding};
  });
  g.emplace_back("motion", [=](Net& net, const LayerInputs& in) {
    return std::vector<ad::Var>{motion_embed(net, motion_rows(in.queries, ego_obs(in).state, 0.45))};
  });
  for (const auto& [label, stream] : {std::pair{"mln.pos", Stream::kPosition}, std::pair{"mln.ctx", Stream::kContext},
                                      std::pair{"mln.tgt", Stream::kTarget}}) {
    g.emplace_back(label, [=](Net& net, const LayerInputs& in) {
      const ad::Var m = motion_embed(net, motion_rows(in.queries, ego_obs(in).state, 0.45));
      CounterRng rng(17, 3);
      const ad::Var x = net.constant(uniform_mat(m.rows(), m.cols(), rng));
      return std::vector<ad::Var>{mln(net, stream, x, m)};
    });
  }
  for (const auto& [label, stream] : {std::pair{"mta.target", Stream::kTarget}, std::pair{"mta.context", Stream::kContext}}) {
    g.emplace_back(label, [=](Net& net, const LayerInputs& in) {
      CounterRng rng(18, 4);
      const auto n = static_cast<Eigen::Index>(in.queries.size());
      const ad::Var content = net.constant(uniform_mat(n, net.config().d, rng));
      const AlignedQueries a = mta_align(net, in.queries, content, stream, ego_obs(in).state, 0.45);
      return std::vector<ad::Var>{a.position, a.content, a.initial};
    });
  }
  g.emplace_back("temp_fusion", [=](Net& net, const LayerInputs& in) {
    const FrameObservation& f = in.sample.window.back();
    const AgentObservation& obs = ego_obs(in);
    const RoISelection sel = select_local_rois(net, obs, net.config().k_roi_local);
    const RoIBatch global = select_global_rois(net, obs, net.config().k_roi_global);
    const TempFusionResult r =
        temp_fusion_step(net, sel.batch, global, in.memory.at(obs.agent_id), obs.state, f.t_aligned, f.index);
    return std::vector<ad::Var>{r.context, r.head};
  });
  g.emplace_back("spatial_fusion", [=](Net& net, const LayerInputs& in) {
    CounterRng rng(19, 5);
    std::vector<SharedQueries> shares;
    for (int a = 0; a < 3; ++a) {
      SharedQueries s;
      s.agent_id = a;
      const int n = 3 + a;
      for (int i = 0; i < n; ++i) {
        // Coarse positions so that agents share some union cells.
        s.positions.push_back({3.2 * static_cast<double>(rng.below(4)) + rng.uniform(0.1, 3.1),
                               3.2 * static_cast<double>(rng.below(3)) + rng.uniform(0.1, 3.1)});
        s.scores.push_back(rng.uniform());
      }
      s.context = net.constant(uniform_mat(n, net.config().d, rng));
      shares.push_back(std::move(s));
    }
    (void)in;
    const SpatialFusionResult r = spatial_fusion(net, shares, 0);
    return std::vector<ad::Var>{r.fused, r.head};
  });
  return g;
}

GradientGroup layer_group(const std::string& layer, const ModelParams& params, const ModelConfig& config,
                          std::shared_ptr<const LayerInputs> inputs, const LayerGraph& graph, std::uint64_t key) {
  GradientGroup g;
  auto shared_params = std::make_shared<const ModelParams>(params);
  {
    ad::Tape tape;
    Net net(tape, params, config, false);
    project(tape, graph(net, *inputs), key);
    for (const auto& kv : net.bound()) {
      g.names.push_back("layer/" + layer + "/" + kv.first);
      g.tensors.push_back(kv.first);
    }
  }
  g.analytic = [=]() {
    ad::Tape tape;
    Net net(tape, *shared_params, config, true);
    tape.backward(project(tape, graph(net, *inputs), key));
    std::vector<Mat> out;
    for (const std::string& t : g.tensors) out.push_back(tape.grad(net.bound().at(t)));
    return out;
  };
  ModelParams probe = params;
  for (const std::string& t : g.tensors) {
    Mat& slot = probe.at(t);
    const Mat keep = slot;
    g.numeric.push_back(finite_diff_grad(
        [&](const Mat& x) {
          slot = x;
          ad::Tape tape;
          Net fixed(tape, probe, config, false);
          return project(tape, graph(fixed, *inputs), key).value()(0, 0);
        },
        keep));
    slot = keep;
  }
  return g;
}

GradientGroup op_group(const OpSpec& op, int point, std::uint64_t seed) {
  CounterRng rng(seed, text_hash(op.name) + static_cast<std::uint64_t>(point));
  std::vector<Mat> inputs;
  for (const auto& [r, c] : op.shapes) inputs.push_back(uniform_mat(r, c, rng));
  const std::uint64_t key = seed ^ text_hash(op.name);
  GradientGroup g;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    g.names.push_back("op/" + op.name);
    g.tensors.emplace_back();
  }
  const OpGraph graph = op.graph;
  g.analytic = [inputs, graph, key]() {
    ad::Tape tape;
    std::vector<ad::Var> vars;
    for (const Mat& m : inputs) vars.push_back(tape.variable(m));
    tape.backward(project(tape, {graph(vars)}, key));
    std::vector<Mat> out;
    for (const ad::Var& v : vars) out.push_back(tape.grad(v));
    return out;
  };
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    std::vector<Mat> probe = inputs;
    g.numeric.push_back(finite_diff_grad(
        [&](const Mat& x) {
          probe[i] = x;
          ad::Tape t;
          std::vector<ad::Var> cs;
          for (const Mat& m : probe) cs.push_back(t.constant(m));
          return project(t, {graph(cs)}, key).value()(0, 0);
        },
        inputs[i]));
  }
  return g;
}

}  // namespace

Mat finite_diff_grad(const std::function<double(const Mat&)>& fn, const Mat& x, double eps) {
  if (!(eps > 0.0)) throw std::invalid_argument("finite_diff_grad: eps must be > 0");
  Mat probe = x;
  Mat g(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double keep = probe.data()[i];
    probe.data()[i] = keep + eps;
    const double fp = fn(probe);
    probe.data()[i] = keep - eps;
    const double fm = fn(probe);
    probe.data()[i] = keep;
    if (!std::isfinite(fp) || !std::isfinite(fm)) throw std::domain_error("finite_diff_grad: non-finite function value");
    g.data()[i] = (fp - fm) / (2.0 * eps);
  }
  return g;
}

GradReport compare_gradients(const std::string& name, const Mat& analytic, const Mat& numeric) {
  if (analytic.rows() != numeric.rows() || analytic.cols() != numeric.cols()) {
    throw std::invalid_argument("compare_gradients: shape mismatch for " + name);
  }
  GradReport r;
  r.name = name;
  r.size = static_cast<std::size_t>(analytic.size());
  for (Eigen::Index row = 0; row < analytic.rows(); ++row) {
    for (Eigen::Index col = 0; col < analytic.cols(); ++col) {
      const double a = analytic(row, col), n = numeric(row, col);
      const double abs_err = std::abs(a - n);
      const double rel = abs_err / std::max({std::abs(a), std::abs(n), 1e-8});
      r.max_abs_err = std::max(r.max_abs_err, abs_err);
      if (rel > r.max_rel_err) {
        r.max_rel_err = rel;
        r.worst_index = static_cast<std::size_t>(row * analytic.cols() + col);
      }
    }
  }
  return r;
}

PipelineGradcheck::PipelineGradcheck(ModelParams params, ModelConfig config, std::vector<FrameObservation> window,
                                     GradcheckOptions options)
    : params_(std::move(params)), config_(std::move(config)), window_(std::move(window)), options_(std::move(options)) {
  if (window_.empty()) throw std::invalid_argument("PipelineGradcheck: empty window");
  validate(config_);
  const std::span<const FrameObservation> all(window_);
  memory_ = warm_memory(params_, config_, all.first(all.size() - 1), PipelineOptions{true, options_.oracle_roi});
}

double PipelineGradcheck::loss_with(const ModelParams& p) const {
  ad::Tape tape;
  MemoryMap mem = memory_;
  const FrameResult r = run_frame(p, config_, window_.back(), mem, tape, false, PipelineOptions{true, options_.oracle_roi});
  return frame_loss(tape, r, window_.back(), config_, options_.weights).value()(0, 0);
}

double PipelineGradcheck::loss() const { return loss_with(params_); }

std::map<std::string, Mat> PipelineGradcheck::analytic() const {
  ad::Tape tape;
  MemoryMap mem = memory_;
  const FrameResult r = run_frame(params_, config_, window_.back(), mem, tape, true, PipelineOptions{true, options_.oracle_roi});
  const ad::Var loss = frame_loss(tape, r, window_.back(), config_, options_.weights);
  tape.backward(loss);
  std::map<std::string, Mat> out;
  for (const auto& [name, m] : params_.tensors()) {
    const auto it = r.params.find(name);
    out[name] = it == r.params.end() ? Mat::Zero(m.rows(), m.cols()) : tape.grad(it->second);
    if (name == options_.corrupt_param) out[name] *= options_.corrupt_scale;
  }
  return out;
}

const std::map<std::string, Mat>& PipelineGradcheck::numeric() {
  if (!numeric_.empty()) return numeric_;
  ModelParams probe = params_;
  for (const auto& [name, m] : params_.tensors()) {
    Mat& slot = probe.at(name);
    numeric_[name] = finite_diff_grad(
        [&](const Mat& x) {
          slot = x;
          return loss_with(probe);
        },
        m, options_.eps);
    slot = m;
  }
  return numeric_;
}

std::vector<GradReport> PipelineGradcheck::compare(const std::map<std::string, Mat>& analytic) {
  const auto& num = numeric();
  std::vector<GradReport> reports;
  for (const auto& [name, a] : analytic) reports.push_back(compare_gradients(name, a, num.at(name)));
  std::stable_sort(reports.begin(), reports.end(),
                   [](const GradReport& a, const GradReport& b) { return a.max_rel_err > b.max_rel_err; });
  return reports;
}

std::vector<GradReport> check_all(const ModelParams& params, const ModelConfig& config,
                                  std::vector<FrameObservation> window, const GradcheckOptions& options) {
  return PipelineGradcheck(params, config, std::move(window), options).run();
}

double max_rel_err(const std::vector<GradReport>& reports) {
  double worst = 0.0;
  for (const GradReport& r : reports) worst = std::max(worst, r.max_rel_err);
  return worst;
}

GradientSuite::GradientSuite(int points, std::uint64_t seed, Parts parts) {
  if (points < 1) throw std::invalid_argument("GradientSuite: points must be >= 1");
  if (parts.ops) {
    for (const OpSpec& op : op_specs()) {
      for (int pt = 0; pt < points; ++pt) groups_.push_back(op_group(op, pt, seed));
    }
  }
  const GradcheckSample sample = make_gradcheck_sample(seed + 1);
  if (parts.layers) {
    CounterRng rng(seed, 0x71);
    std::vector<Query> queries;
    for (int i = 0; i < 5; ++i) {
      Query q;
      q.position = {rng.uniform(-20, 20), rng.uniform(-20, 20)};
      q.tau = rng.uniform(0.2, 0.45);
      q.agent_pose = Pose{rng.uniform(-10, 10), rng.uniform(-10, 10), 1.8, rng.uniform(-kPi, kPi)};
      q.agent_velocity = {rng.uniform(-15, 15), rng.uniform(-15, 15)};
      queries.push_back(q);
    }
    const auto graphs = layer_graphs();
    for (int pt = 0; pt < points; ++pt) {
      const ModelParams params = random_gradcheck_params(sample.config, seed + static_cast<std::uint64_t>(pt), pt == 0);
      auto in = std::make_shared<LayerInputs>();
      in->sample = sample;
      in->queries = queries;
      const std::span<const FrameObservation> all(sample.window);
      in->memory = warm_memory(params, sample.config, all.first(all.size() - 1), PipelineOptions{true, false});
      for (const auto& [layer, graph] : graphs) {
        groups_.push_back(layer_group(layer, params, sample.config, in, graph, seed ^ text_hash(layer)));
      }
    }
  }
  if (parts.pipeline) {
    auto check = std::make_shared<PipelineGradcheck>(ModelParams::init(sample.config, seed), sample.config, sample.window);
    GradientGroup g;
    for (const auto& [name, grad] : check->numeric()) {
      g.names.push_back("pipeline/" + name);
      g.tensors.push_back(name);
      g.numeric.push_back(grad);
    }
    g.analytic = [check]() {
      std::vector<Mat> out;
      for (auto& kv : check->analytic()) out.push_back(std::move(kv.second));
      return out;
    };
    groups_.push_back(std::move(g));
  }
}

std::vector<GradReport> GradientSuite::run(const std::string& corrupt_param, double corrupt_scale) const {
  std::map<std::string, GradReport> worst;
  for (const GradientGroup& g : groups_) {
    std::vector<Mat> analytic = g.analytic();
    for (std::size_t i = 0; i < analytic.size(); ++i) {
      if (!corrupt_param.empty() && g.tensors[i] == corrupt_param) analytic[i] *= corrupt_scale;
      merge(worst, compare_gradients(g.names[i], analytic[i], g.numeric[i]));
    }
  }
  return sorted(worst);
}

GradcheckSample make_gradcheck_sample(std::uint64_t seed) {
  GradcheckSample s;
  s.config.d = 8;
  s.config.k_roi_local = 12;
  s.config.k_roi_global = 6;
  s.config.k_q = 4;
  s.config.memory_frames = 2;
  s.config.local_dilation = 1;
  s.config.range = {-25.6, 25.6, -25.6, 25.6};
  validate(s.config);

  ScenarioConfig sc;
  sc.duration = 0.5;
  sc.num_agents = 2;
  sc.num_objects = 3;
  sc.spawn_half_length = 15.0;
  sc.angular_resolution_deg = 1.0;
  sc.max_range = 30.0;
  sc.range = s.config.range;
  const Scene scene = build_scene(sc, seed);
  const FrameSpan span = frame_span(scene);
  const int n = std::min(span.count, 3);
  for (int j = span.first + span.count - n; j < span.first + span.count; ++j) {
    s.window.push_back(observe_frame(scene, make_async_frame(scene, j), s.config));
  }
  if (s.window.empty()) throw std::logic_error("make_gradcheck_sample: scene produced no frames");
  return s;
}

ModelParams random_gradcheck_params(const ModelConfig& config, std::uint64_t seed, bool identity_mln) {
  ModelParams p = ModelParams::init(config, seed);
  CounterRng rng(seed, 0x6772616463686bULL);
  for (auto& [name, m] : p.tensors()) {
    const bool generator = name.rfind("mln.", 0) == 0;
    const bool bias = name.size() > 2 && name.compare(name.size() - 2, 2, ".b") == 0;
    if (generator && identity_mln) continue;
    if (!generator && !bias) continue;
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] += rng.uniform(-0.1, 0.1);
  }
  return p;
}

}  // namespace tacood
