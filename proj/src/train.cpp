#include "tacood/train.hpp"

#include <cmath>
#include <map>
#include <ostream>
#include <stdexcept>

#include "tacood/rng.hpp"

namespace tacood {

ScenarioConfig ToyDataConfig::default_toy_scenario() {
  ScenarioConfig sc;
  sc.duration = 2.0;
  sc.num_agents = 2;
  sc.num_objects = 8;
  sc.angular_resolution_deg = 0.5;
  sc.max_range = 30.0;
  sc.spawn_half_length = 50.0;
  sc.range = {-51.2, 51.2, -25.6, 25.6};
  return sc;
}

ModelConfig toy_model_config() {
  ModelConfig c;
  c.d = 32;
  c.k_roi_local = 96;
  c.k_roi_global = 32;
  c.k_q = 32;
  c.memory_frames = 4;
  c.range = {-51.2, 51.2, -25.6, 25.6};
  return c;
}

Sequence observe_scene(const Scene& scene, const ModelConfig& config) {
  Sequence seq;
  seq.scene_seed = scene.seed;
  const FrameSpan span = frame_span(scene);
  for (int j = span.first; j < span.first + span.count; ++j) {
    seq.frames.push_back(observe_frame(scene, make_async_frame(scene, j), config));
  }
  return seq;
}

ToyDataset make_dataset(const ToyDataConfig& data, const ModelConfig& config) {
  if (data.train_scenes < 0 || data.heldout_scenes < 0) throw ConfigError("scene counts must be non-negative");
  validate(data.scenario);
  validate(config);
  ToyDataset out;
  const auto total = static_cast<std::uint64_t>(data.train_scenes + data.heldout_scenes);
  for (std::uint64_t i = 0; i < total; ++i) {
    const std::uint64_t seed = hash_key(data.seed, 0x746f79, i);
    Sequence seq = observe_scene(build_scene(data.scenario, seed), config);
    (i < static_cast<std::uint64_t>(data.train_scenes) ? out.train : out.heldout).push_back(std::move(seq));
  }
  return out;
}

std::vector<FrameObservation> delayed_window(const Sequence& seq, int end, int length, int latency) {
  const int n = static_cast<int>(seq.frames.size());
  if (length < 1 || latency < 0 || end >= n || end - length + 1 - latency < 0) {
    throw std::out_of_range("delayed_window: window does not fit the sequence");
  }
  const auto first = seq.frames.begin() + (end - length + 1 - latency);
  return inject_latency(std::vector<FrameObservation>(first, seq.frames.begin() + end + 1), latency);
}

void validate(const TrainConfig& c) {
  if (c.steps < 1) throw ConfigError("steps must be positive");
  if (c.batch < 1) throw ConfigError("batch must be positive");
  if (!(c.lr > 0.0) || !std::isfinite(c.lr)) throw ConfigError("lr must be finite and positive");
  if (!(c.beta1 >= 0.0 && c.beta1 < 1.0)) throw ConfigError("beta1 must lie in [0, 1)");
  if (!(c.beta2 >= 0.0 && c.beta2 < 1.0)) throw ConfigError("beta2 must lie in [0, 1)");
  if (!(c.adam_eps > 0.0)) throw ConfigError("adam_eps must be positive");
  if (!(c.grad_clip >= 0.0)) throw ConfigError("grad_clip must be non-negative");
  if (c.max_latency < 0) throw ConfigError("max_latency must be non-negative");
  if (c.window < 1) throw ConfigError("window must be positive");
}

namespace {

struct Sample {
  std::size_t sequence;
  int end;
  int latency;
};

bool finite(const Mat& m) { return m.allFinite(); }

}  // namespace

TrainResult train_toy(const TrainConfig& train, const ModelConfig& model, const ToyDataset& data, ModelParams init) {
  validate(train);
  validate(model);
  if (data.train.empty()) throw ConfigError("training set is empty");
  const int first_end = train.window - 1 + train.max_latency;
  for (const Sequence& s : data.train) {
    if (static_cast<int>(s.frames.size()) <= first_end) throw ConfigError("training sequence shorter than window");
  }

  TrainResult result;
  result.params = std::move(init);
  std::map<std::string, Mat> m1, m2;
  for (const auto& [name, w] : result.params.tensors()) {
    m1[name] = Mat::Zero(w.rows(), w.cols());
    m2[name] = Mat::Zero(w.rows(), w.cols());
  }
  CounterRng rng(train.seed, 0x747261696e);
  const PipelineOptions pipeline{train.grad_all_agents, train.oracle_roi};
  double b1t = 1.0, b2t = 1.0;

  for (int step = 0; step < train.steps; ++step) {
    std::map<std::string, Mat> grads;
    LossBreakdown mean;
    double loss = 0.0;
    for (int b = 0; b < train.batch; ++b) {
      Sample s;
      s.sequence = static_cast<std::size_t>(rng.below(data.train.size()));
      const int n = static_cast<int>(data.train[s.sequence].frames.size());
      s.end = first_end + static_cast<int>(rng.below(static_cast<std::uint64_t>(n - first_end)));
      s.latency = train.latency_augmentation ? static_cast<int>(rng.below(static_cast<std::uint64_t>(train.max_latency + 1))) : 0;
      const auto window = delayed_window(data.train[s.sequence], s.end, train.window, s.latency);

      ad::Tape tape;
      const FrameResult r = run_window(result.params, model, window, tape, true, pipeline);
      LossBreakdown parts;
      const ad::Var l = frame_loss(tape, r, window.back(), model, train.weights, &parts);
      tape.backward(l);
      loss += parts.total;
      mean.roi_cls += parts.roi_cls;
      mean.roi_reg += parts.roi_reg;
      mean.local_cls += parts.local_cls;
      mean.local_reg += parts.local_reg;
      mean.global_cls += parts.global_cls;
      mean.global_reg += parts.global_reg;
      for (const auto& [name, var] : r.params) {
        Mat g = tape.grad(var);
        auto it = grads.find(name);
        if (it == grads.end()) grads.emplace(name, std::move(g));
        else it->second += g;
      }
    }
    const double inv = 1.0 / train.batch;
    loss *= inv;
    for (double* v : {&mean.roi_cls, &mean.roi_reg, &mean.local_cls, &mean.local_reg, &mean.global_cls, &mean.global_reg}) {
      *v *= inv;
    }
    mean.total = loss;

    double norm2 = 0.0;
    bool ok = std::isfinite(loss);
    for (auto& [name, g] : grads) {
      g *= inv;
      ok = ok && finite(g);
      norm2 += g.squaredNorm();
    }
    if (!ok || !std::isfinite(norm2)) {
      result.diverged = true;
      break;
    }
    result.loss.push_back(loss);
    result.components.push_back(mean);

    const double clip = train.grad_clip > 0.0 && std::sqrt(norm2) > train.grad_clip ? train.grad_clip / std::sqrt(norm2) : 1.0;
    b1t *= train.beta1;
    b2t *= train.beta2;
    for (auto& [name, g] : grads) {
      g *= clip;
      Mat& a = m1.at(name);
      Mat& v = m2.at(name);
      a = train.beta1 * a + (1.0 - train.beta1) * g;
      v = train.beta2 * v + (1.0 - train.beta2) * g.cwiseProduct(g);
      const Mat a_hat = a / (1.0 - b1t);
      const Mat v_hat = v / (1.0 - b2t);
      result.params.at(name).array() -= train.lr * a_hat.array() / (v_hat.array().sqrt() + train.adam_eps);
    }
  }
  return result;
}

void write_loss_log(std::ostream& out, const TrainResult& result) {
  out << "step loss roi_cls roi_reg local_cls local_reg global_cls global_reg\n";
  for (std::size_t i = 0; i < result.loss.size(); ++i) {
    const LossBreakdown& c = result.components[i];
    out << i << ' ' << result.loss[i] << ' ' << c.roi_cls << ' ' << c.roi_reg << ' ' << c.local_cls << ' '
        << c.local_reg << ' ' << c.global_cls << ' ' << c.global_reg << '\n';
  }
}

std::vector<FrameDetections> detect_sequences(const ModelParams& params, const ModelConfig& config,
                                              const std::vector<Sequence>& sequences, const ModelEvalOptions& options) {
  if (options.latency < 0 || options.window < 1) throw ConfigError("latency and window must be valid");
  if (options.first_frame < options.window - 1 + options.latency) {
    throw ConfigError("first_frame leaves no room for the window and latency");
  }
  std::vector<FrameDetections> out;
  for (const Sequence& seq : sequences) {
    for (int j = options.first_frame; j < static_cast<int>(seq.frames.size()); ++j) {
      const auto window = delayed_window(seq, j, options.window, options.latency);
      ad::Tape tape;
      const FrameResult r = run_window(params, config, window, tape, false, options.pipeline);
      out.push_back(FrameDetections{r.fused.detections, window.back().gt});
    }
  }
  return out;
}

EvalResult evaluate_model(const ModelParams& params, const ModelConfig& config, const std::vector<Sequence>& sequences,
                          const ModelEvalOptions& options) {
  const auto frames = detect_sequences(params, config, sequences, options);
  return evaluate_detections(frames, options.eval);
}

const std::vector<std::string>& variant_names() {
  static const std::vector<std::string> names{"full",        "no-temp-fusion",    "framewise-timestamps", "no-latency-augmentation",
                                              "no-dilation", "no-roi-regression", "no-global-attention"};
  return names;
}

void apply_variant(const std::string& variant, ModelConfig& model, TrainConfig& train) {
  if (variant == "full") return;
  if (variant == "no-temp-fusion") {
    model.temporal = false;
  } else if (variant == "framewise-timestamps") {
    model.timestamp_mode = TimestampMode::kFramewise;
  } else if (variant == "no-latency-augmentation") {
    train.latency_augmentation = false;
  } else if (variant == "no-dilation") {
    model.local_dilation = 0;
    model.global_dilation = 0;
  } else if (variant == "no-roi-regression") {
    model.roi_regression = false;
  } else if (variant == "no-global-attention") {
    model.global_attention = false;
  } else {
    throw ConfigError("unknown variant \"" + variant + "\"");
  }
}

std::vector<AblationCell> ablate(const std::vector<std::string>& variants, const std::vector<int>& latencies,
                                 const AblationSetup& setup) {
  for (const std::string& v : variants) {
    ModelConfig m = setup.model;
    TrainConfig t = setup.train;
    apply_variant(v, m, t);
  }
  for (int k : latencies) {
    if (k < 0) throw ConfigError("latencies must be non-negative");
  }
  std::vector<AblationCell> out;
  for (const std::string& v : variants) {
    ModelConfig model = setup.model;
    TrainConfig train = setup.train;
    apply_variant(v, model, train);
    const ToyDataset data = make_dataset(setup.data, model);
    const TrainResult trained = train_toy(train, model, data, ModelParams::init(model, train.seed));
    for (int k : latencies) {
      ModelEvalOptions eval = setup.eval;
      eval.latency = k;
      out.push_back(AblationCell{v, k, evaluate_model(trained.params, model, data.heldout, eval)});
    }
  }
  return out;
}

}  // namespace tacood
