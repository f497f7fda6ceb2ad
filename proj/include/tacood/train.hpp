#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "tacood/evalkit.hpp"
#include "tacood/model.hpp"

namespace tacood {

// Synthetic scenes for the toy experiments: static roadside agents with random heading,
// constant-velocity traffic.
struct ToyDataConfig {
  ScenarioConfig scenario = default_toy_scenario();
  int train_scenes = 48;
  int heldout_scenes = 12;
  std::uint64_t seed = 1;

  static ScenarioConfig default_toy_scenario();
};

ModelConfig toy_model_config();

struct Sequence {
  std::uint64_t scene_seed = 0;
  std::vector<FrameObservation> frames;
};

struct ToyDataset {
  std::vector<Sequence> train;
  std::vector<Sequence> heldout;
};

Sequence observe_scene(const Scene& scene, const ModelConfig& config);
// Scene seeds are drawn from config.seed; train and held-out seeds never overlap.
ToyDataset make_dataset(const ToyDataConfig& data, const ModelConfig& config);

// Frames end-length+1 .. end of `seq` with cooperative agents taken `latency` frames earlier.
std::vector<FrameObservation> delayed_window(const Sequence& seq, int end, int length, int latency);

struct TrainConfig {
  int steps = 2000;
  int batch = 2;
  double lr = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  // Global gradient-norm clip; 0 disables.
  double grad_clip = 10.0;
  std::uint64_t seed = 0;
  bool latency_augmentation = true;
  int max_latency = 2;
  int window = 4;
  LossWeights weights;
  bool grad_all_agents = false;
  bool oracle_roi = false;
};

void validate(const TrainConfig& config);

struct TrainResult {
  ModelParams params;
  std::vector<double> loss;  // mean batch loss per step
  std::vector<LossBreakdown> components;
  bool diverged = false;
};

// Adam on the newest-frame loss of sliding windows. A pure function of its arguments.
TrainResult train_toy(const TrainConfig& train, const ModelConfig& model, const ToyDataset& data, ModelParams init);

// "step loss roi_cls roi_reg local_cls local_reg global_cls global_reg" per line.
void write_loss_log(std::ostream& out, const TrainResult& result);

struct ModelEvalOptions {
  int latency = 0;
  int window = 4;
  // First evaluated frame position in each sequence; keeps the frame set fixed across latencies.
  int first_frame = 5;
  PipelineOptions pipeline;
  EvalOptions eval;
};

std::vector<FrameDetections> detect_sequences(const ModelParams& params, const ModelConfig& config,
                                              const std::vector<Sequence>& sequences, const ModelEvalOptions& options);
EvalResult evaluate_model(const ModelParams& params, const ModelConfig& config, const std::vector<Sequence>& sequences,
                          const ModelEvalOptions& options = {});

// Ablation variants: full, no-temp-fusion, framewise-timestamps, no-latency-augmentation,
// no-dilation, no-roi-regression, no-global-attention.
const std::vector<std::string>& variant_names();
// Throws ConfigError for an unknown name.
void apply_variant(const std::string& variant, ModelConfig& model, TrainConfig& train);

struct AblationSetup {
  ToyDataConfig data;
  ModelConfig model = toy_model_config();
  TrainConfig train;
  ModelEvalOptions eval;  // latency is overridden per cell
};

struct AblationCell {
  std::string variant;
  int latency = 0;  // frames
  EvalResult result;
};

// Trains each variant once from ModelParams::init(model, train.seed) and evaluates it on the
// held-out scenes at every latency. Rows are variant-major.
std::vector<AblationCell> ablate(const std::vector<std::string>& variants, const std::vector<int>& latencies,
                                 const AblationSetup& setup);

}  // namespace tacood
