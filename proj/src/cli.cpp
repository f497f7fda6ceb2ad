#include "tacood/cli.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>

#include "CLI11.hpp"
#include "tacood/gradcheck.hpp"
#include "tacood/io.hpp"

namespace tacood {

namespace fs = std::filesystem;

namespace {

// A failed numerical check; maps to the verification exit code.
struct VerificationFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

double parse_number(const std::string& s, const std::string& what) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != s.size() || !std::isfinite(v)) throw ConfigError("invalid " + what + ": \"" + s + "\"");
  return v;
}

// Milliseconds to whole frames at `frequency`.
int latency_frames(double ms, double frequency) {
  const double frames = ms * frequency / 1000.0;
  const double rounded = std::round(frames);
  if (ms < 0.0 || std::abs(frames - rounded) > 1e-9) {
    throw ConfigError("latency " + std::to_string(ms) + " ms is not a whole number of frames");
  }
  return static_cast<int>(rounded);
}

TimestampMode parse_mode(const std::string& s) {
  if (s == "pointwise") return TimestampMode::kPointwise;
  if (s == "framewise") return TimestampMode::kFramewise;
  throw ConfigError("--timestamp-mode must be pointwise or framewise");
}

Sequence observe_frames(const FrameDir& dir, const ModelConfig& model) {
  Sequence seq;
  seq.scene_seed = dir.scene.seed;
  for (const Frame& f : dir.frames) seq.frames.push_back(observe_frame(dir.scene, f, model));
  return seq;
}

void print_eval(std::ostream& out, const EvalResult& r) {
  out << std::fixed << std::setprecision(4);
  for (const auto& [thr, ap] : r.ap) {
    const Counts& c = r.counts.at(thr);
    out << "AP@" << std::setprecision(2) << thr << std::setprecision(4) << "  " << ap << "  tp " << c.tp << "  fp "
        << c.fp << "  fn " << c.fn << '\n';
  }
  out << "center error " << r.mean_center_error << " m over " << r.moving_objects << " moving objects, " << r.frames
      << " frames\n";
  out.unsetf(std::ios::floatfield);
  out << std::setprecision(6);
}

struct Options {
  std::string config;
  std::string out;
  std::string params;
  std::string frames;
  std::string detections;
  std::string latency;
  std::string variant;
  std::string iou;
  std::string timestamp_mode;
  std::optional<std::uint64_t> seed;
  std::optional<int> steps;
};

RunConfig load_config(const Options& o) {
  RunConfig c = o.config.empty() ? RunConfig{} : load_run_config(o.config);
  if (!o.timestamp_mode.empty()) c.model.timestamp_mode = parse_mode(o.timestamp_mode);
  if (o.steps) c.train.steps = *o.steps;
  if (o.seed) c.train.seed = *o.seed;
  return c;
}

int cmd_simulate(const Options& o, std::ostream& out) {
  RunConfig c = load_config(o);
  if (o.seed) c.scenario.seed = *o.seed;
  const Scene scene = build_scene(c.scenario, c.scenario.seed);
  const FrameSpan span = frame_span(scene);
  std::vector<Frame> frames;
  for (int j = span.first; j < span.first + span.count; ++j) frames.push_back(make_async_frame(scene, j));
  write_frame_dir(o.out, scene, frames);
  out << "wrote " << frames.size() << " frames to " << o.out << '\n';
  return kExitOk;
}

int cmd_fuse(const Options& o, std::ostream& out) {
  const RunConfig c = load_config(o);
  const ModelParams params = load_params(o.params);
  if (params.d() != c.model.d) throw ConfigError("params d does not match model.d");
  const FrameDir dir = read_frame_dir(o.frames);
  const int k = o.latency.empty() ? 0 : latency_frames(parse_number(o.latency, "--latency"), dir.scene.frequency);
  const Sequence seq = observe_frames(dir, c.model);
  ModelEvalOptions opt;
  opt.latency = k;
  opt.window = c.model.memory_frames;
  opt.first_frame = opt.window - 1 + k;
  const auto detected = detect_sequences(params, c.model, {seq}, opt);
  std::vector<FrameDetectionList> lists;
  for (std::size_t i = 0; i < detected.size(); ++i) {
    const auto& f = seq.frames[static_cast<std::size_t>(opt.first_frame) + i];
    lists.push_back({f.index, postprocess(detected[i].detections, opt.eval.ap_min_confidence, opt.eval.nms_iou)});
  }
  write_file_atomic(o.out, encode_detections(lists));
  std::size_t n = 0;
  for (const auto& l : lists) n += l.detections.size();
  out << "wrote " << n << " detections for " << lists.size() << " frames to " << o.out << '\n';
  return kExitOk;
}

int cmd_eval(const Options& o, std::ostream& out) {
  const FrameDir dir = read_frame_dir(o.frames);
  const auto lists = decode_detections(read_file(o.detections));
  std::map<int, std::vector<Detection>> by_frame;
  for (const auto& l : lists) {
    auto& v = by_frame[l.frame];
    v.insert(v.end(), l.detections.begin(), l.detections.end());
  }
  // Frames before the first detected one were not fused (window warm-up); later frames
  // without detections count as misses.
  const int first = by_frame.empty() ? std::numeric_limits<int>::min() : by_frame.begin()->first;
  std::vector<FrameDetections> frames;
  for (const Frame& f : dir.frames) {
    if (f.index < first) continue;
    const auto it = by_frame.find(f.index);
    frames.push_back({it == by_frame.end() ? std::vector<Detection>{} : it->second, f.gt});
  }
  EvalOptions eo;
  if (!o.iou.empty()) {
    eo.iou_thresholds.clear();
    for (const std::string& s : split_list(o.iou)) eo.iou_thresholds.push_back(parse_number(s, "--iou"));
  }
  const EvalResult r = evaluate_detections(frames, eo);
  print_eval(out, r);
  if (!o.out.empty()) write_file_atomic(o.out, dump(to_json(r)));
  return kExitOk;
}

int cmd_gradcheck(const Options& o, std::ostream& out) {
  const GradientSuite suite(10, o.seed.value_or(0));
  const auto reports = suite.run();
  const double worst = max_rel_err(reports);
  out << std::scientific << std::setprecision(3);
  for (std::size_t i = 0; i < std::min<std::size_t>(reports.size(), 10); ++i) {
    out << reports[i].name << "  max_rel_err " << reports[i].max_rel_err << '\n';
  }
  out << reports.size() << " gradients checked, worst relative error " << worst << '\n';
  out.unsetf(std::ios::floatfield);
  out << std::setprecision(6);
  if (!o.out.empty()) {
    Json j = Json::array();
    for (const GradReport& r : reports) {
      j.push_back(Json{{"name", r.name},
                       {"max_abs_err", r.max_abs_err},
                       {"max_rel_err", r.max_rel_err},
                       {"worst_index", r.worst_index},
                       {"size", r.size}});
    }
    write_file_atomic(o.out, dump(j));
  }
  if (!(worst < 1e-4)) throw VerificationFailure("gradient check failed: worst relative error " + std::to_string(worst));
  return kExitOk;
}

int cmd_train_toy(const Options& o, std::ostream& out) {
  RunConfig c = load_config(o);
  if (!o.variant.empty()) apply_variant(o.variant, c.model, c.train);
  const ToyDataset data = make_dataset(c.data, c.model);
  const TrainResult r = train_toy(c.train, c.model, data, ModelParams::init(c.model, c.train.seed));
  const fs::path dir = o.out;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string());
  save_params(dir / "params.bin", r.params);
  std::ostringstream log;
  log << std::setprecision(10);
  write_loss_log(log, r);
  write_file_atomic(dir / "loss.log", log.str());
  write_file_atomic(dir / "config.json", dump(to_json(c)));
  ModelEvalOptions eo;
  eo.window = c.train.window;
  eo.first_frame = std::max(eo.first_frame, eo.window - 1);
  const EvalResult e = evaluate_model(r.params, c.model, data.heldout, eo);
  write_file_atomic(dir / "eval.json", dump(to_json(e)));
  out << "trained " << r.loss.size() << " steps";
  if (!r.loss.empty()) out << ", loss " << r.loss.front() << " -> " << r.loss.back();
  out << '\n';
  print_eval(out, e);
  if (r.diverged) throw VerificationFailure("training diverged; parameters are the last finite state");
  return kExitOk;
}

int cmd_ablate(const Options& o, std::ostream& out) {
  const RunConfig c = load_config(o);
  const std::vector<std::string> variants = o.variant.empty() ? variant_names() : split_list(o.variant);
  std::vector<double> ms{0.0, 100.0, 200.0};
  if (!o.latency.empty()) {
    ms.clear();
    for (const std::string& s : split_list(o.latency)) ms.push_back(parse_number(s, "--latency"));
  }
  AblationSetup setup;
  setup.data = c.data;
  setup.model = c.model;
  setup.train = c.train;
  setup.eval.window = c.train.window;
  std::vector<int> frames;
  for (double v : ms) frames.push_back(latency_frames(v, c.data.scenario.frequency));
  setup.eval.first_frame = setup.eval.window - 1 + *std::max_element(frames.begin(), frames.end());
  const auto cells = ablate(variants, frames, setup);

  std::ostringstream tsv;
  tsv << "variant\tlatency_ms";
  const auto& thresholds = setup.eval.eval.iou_thresholds;
  for (double t : thresholds) tsv << "\tap@" << t;
  tsv << "\tcenter_error\n";
  Json j = Json::array();
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const AblationCell& cell = cells[i];
    const double latency_ms = ms[i % ms.size()];
    tsv << cell.variant << '\t' << latency_ms;
    for (double t : thresholds) tsv << '\t' << std::setprecision(6) << cell.result.ap.at(t);
    tsv << '\t' << cell.result.mean_center_error << '\n';
    j.push_back(Json{{"variant", cell.variant}, {"latency_ms", latency_ms}, {"result", to_json(cell.result)}});
  }
  const fs::path dir = o.out;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string());
  write_file_atomic(dir / "ablation.tsv", tsv.str());
  write_file_atomic(dir / "ablation.json", dump(j));
  out << tsv.str();
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Time-aligned cooperative detection toolkit", "tacood"};
  app.require_subcommand(1);
  Options o;
  std::uint64_t seed = 0;
  int steps = 0;

  auto* sim = app.add_subcommand("simulate", "Simulate a scenario and write a frame directory");
  sim->add_option("--config", o.config, "Run configuration JSON");
  sim->add_option("--out", o.out, "Output directory")->required();
  sim->add_option("--seed", seed, "Scene seed");

  auto* fuse = app.add_subcommand("fuse", "Run the fusion pipeline over a frame directory");
  fuse->add_option("--config", o.config, "Run configuration JSON");
  fuse->add_option("--params", o.params, "Parameter file")->required();
  fuse->add_option("--frames", o.frames, "Frame directory")->required();
  fuse->add_option("--out", o.out, "Detections file (JSON lines)")->required();
  fuse->add_option("--latency", o.latency, "Cooperative latency in ms");
  fuse->add_option("--timestamp-mode", o.timestamp_mode, "pointwise or framewise");

  auto* eval = app.add_subcommand("eval", "Score detections against a frame directory");
  eval->add_option("--frames", o.frames, "Frame directory")->required();
  eval->add_option("--detections", o.detections, "Detections file (JSON lines)")->required();
  eval->add_option("--out", o.out, "EvalResult JSON");
  eval->add_option("--iou", o.iou, "Comma-separated IoU thresholds");

  auto* grad = app.add_subcommand("gradcheck", "Compare analytic and finite-difference gradients");
  grad->add_option("--seed", seed, "Evaluation point seed");
  grad->add_option("--out", o.out, "Report JSON");

  auto* train = app.add_subcommand("train-toy", "Train on synthetic scenes and evaluate on held-out ones");
  train->add_option("--config", o.config, "Run configuration JSON");
  train->add_option("--out", o.out, "Output directory")->required();
  train->add_option("--seed", seed, "Training seed");
  train->add_option("--steps", steps, "Optimizer steps");
  train->add_option("--timestamp-mode", o.timestamp_mode, "pointwise or framewise");
  train->add_option("--variant", o.variant, "Ablation variant");

  auto* abl = app.add_subcommand("ablate", "Train variants and evaluate them under latency");
  abl->add_option("--config", o.config, "Run configuration JSON");
  abl->add_option("--out", o.out, "Output directory")->required();
  abl->add_option("--variant", o.variant, "Comma-separated variants (default all)");
  abl->add_option("--latency", o.latency, "Comma-separated latencies in ms (default 0,100,200)");
  abl->add_option("--seed", seed, "Training seed");
  abl->add_option("--steps", steps, "Optimizer steps");
  abl->add_option("--timestamp-mode", o.timestamp_mode, "pointwise or framewise");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitConfig;
  }

  CLI::App* cmd = app.get_subcommands().front();
  auto given = [cmd](const char* name) {
    const CLI::Option* opt = cmd->get_option_no_throw(name);
    return opt != nullptr && opt->count() > 0;
  };
  if (given("--seed")) o.seed = seed;
  if (given("--steps")) o.steps = steps;
  try {
    const std::string name = cmd->get_name();
    if (name == "simulate") return cmd_simulate(o, out);
    if (name == "fuse") return cmd_fuse(o, out);
    if (name == "eval") return cmd_eval(o, out);
    if (name == "gradcheck") return cmd_gradcheck(o, out);
    if (name == "train-toy") return cmd_train_toy(o, out);
    return cmd_ablate(o, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const IoError& e) {
    err << "io error: " << e.what() << '\n';
    return kExitIo;
  } catch (const FormatError& e) {
    err << "format error: " << e.what() << '\n';
    return kExitIo;
  } catch (const VerificationFailure& e) {
    err << "verification failed: " << e.what() << '\n';
    return kExitVerification;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace tacood
