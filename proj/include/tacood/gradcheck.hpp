#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "tacood/model.hpp"

namespace tacood {

struct GradReport {
  std::string name;
  double max_abs_err = 0.0;
  double max_rel_err = 0.0;
  std::size_t worst_index = 0;  // row-major coordinate with the largest relative error
  std::size_t size = 0;
};

// Central differences per coordinate. Throws std::domain_error on a non-finite fn value.
Mat finite_diff_grad(const std::function<double(const Mat&)>& fn, const Mat& x, double eps = 1e-5);

// Relative error is |a - n| / max(|a|, |n|, 1e-8) per coordinate.
GradReport compare_gradients(const std::string& name, const Mat& analytic, const Mat& numeric);

struct GradcheckOptions {
  double eps = 1e-5;
  LossWeights weights;
  bool oracle_roi = false;
  // Scales one tensor's analytic gradient; a sensitivity check for the harness itself.
  std::string corrupt_param;
  double corrupt_scale = 1.0;
};

// Loss of the newest frame of a window as a function of every parameter tensor, with
// gradients through all agents. Earlier frames only fill the memory, which is computed
// once and then held fixed.
class PipelineGradcheck {
 public:
  PipelineGradcheck(ModelParams params, ModelConfig config, std::vector<FrameObservation> window,
                    GradcheckOptions options = {});

  double loss() const;
  // Analytic gradients under the current derivative-fault state.
  std::map<std::string, Mat> analytic() const;
  // Central differences for every tensor; computed on first use and cached.
  const std::map<std::string, Mat>& numeric();
  // Reports sorted by descending max_rel_err.
  std::vector<GradReport> compare(const std::map<std::string, Mat>& analytic);
  std::vector<GradReport> run() { return compare(analytic()); }

 private:
  double loss_with(const ModelParams& p) const;

  ModelParams params_;
  ModelConfig config_;
  std::vector<FrameObservation> window_;
  GradcheckOptions options_;
  MemoryMap memory_;
  std::map<std::string, Mat> numeric_;
};

std::vector<GradReport> check_all(const ModelParams& params, const ModelConfig& config,
                                  std::vector<FrameObservation> window, const GradcheckOptions& options = {});

double max_rel_err(const std::vector<GradReport>& reports);

// One analytic pass producing several gradients, with their numeric counterparts.
struct GradientGroup {
  std::vector<std::string> names;    // report names
  std::vector<std::string> tensors;  // parameter tensor per entry, empty for op inputs
  std::function<std::vector<Mat>()> analytic;
  std::vector<Mat> numeric;
};

// Gradient checks with the numeric side computed once at construction. run() redoes only
// the analytic passes, so derivative faults can be swept cheaply.
//   ops:      every primitive autodiff op at `points` random inputs ("op/<op>")
//   layers:   every parametric model layer at `points` random parameter draws, outputs
//             reduced by a fixed random projection ("layer/<layer>/<tensor>")
//   pipeline: check_all on the reference sample and initial parameters ("pipeline/<tensor>")
class GradientSuite {
 public:
  struct Parts {
    bool ops = true;
    bool layers = true;
    bool pipeline = true;
  };
  GradientSuite(int points, std::uint64_t seed, Parts parts);
  explicit GradientSuite(int points = 10, std::uint64_t seed = 0) : GradientSuite(points, seed, Parts{}) {}

  // Worst report per name, sorted by descending max_rel_err. Entries of tensor
  // `corrupt_param` have their analytic gradient scaled by `corrupt_scale`.
  std::vector<GradReport> run(const std::string& corrupt_param = "", double corrupt_scale = 1.0) const;

 private:
  std::vector<GradientGroup> groups_;
};

// Small two-agent configuration and window used by the gradient suite.
struct GradcheckSample {
  ModelConfig config;
  std::vector<FrameObservation> window;
};
GradcheckSample make_gradcheck_sample(std::uint64_t seed);

// A random evaluation point: initial weights plus non-zero biases and MLN generators.
// With `identity_mln` the generators stay at zero.
ModelParams random_gradcheck_params(const ModelConfig& config, std::uint64_t seed, bool identity_mln = false);

}  // namespace tacood
