#ifndef REPHOTO_PROJECTOR_HPP_
#define REPHOTO_PROJECTOR_HPP_

#include <cstdint>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "rephoto/autodiff.hpp"
#include "rephoto/features.hpp"
#include "rephoto/generator.hpp"
#include "rephoto/image.hpp"
#include "rephoto/imagecore.hpp"
#include "rephoto/losses.hpp"
#include "rephoto/sibling.hpp"

namespace rephoto {

struct StageConfig {
  int cutoff_resolution = 32;
  int iterations = 250;
  double style_lr = 0.1;
  double crf_lr = 0.01;
  double noise_initial = 0.05;
  double noise_ramp_fraction = 0.75;
};

/// Coarse stage (layers up to 32x32, 250 iterations) then the 64x64 stage
/// (750 iterations).
std::vector<StageConfig> default_stages();

/// noise_initial * max(0, 1 - t / (fraction * total))^2
double noise_ramp(int t, int total, double initial = 0.05, double fraction = 0.75);

/// Networks the objective evaluates. Pointers are borrowed.
struct ProjectionAssets {
  const Generator* generator = nullptr;
  PerceptualStack perceptual;
  const Backbone* context = nullptr;
  std::vector<std::string> context_layers;
};

struct ProjectorConfig {
  FilmModel film = FilmModel::Panchromatic;
  double sigma = 0.0;
  EyeRegions eyes;
  LossWeights weights;
  int loss_resolution = 256;
  int context_resolution = 256;  // both images are resampled here for the contextual term
  std::vector<StageConfig> stages = default_stages();
  CRFParams initial_crf;
  uint64_t seed = 0;
};

/// Color and detail reference derived from a rendered code.
struct StageReference {
  std::vector<ad::Mat> tap_covariances;  // one 3x3 per level
  FeatureSet context;
};

StageReference make_reference(const SynthesisOutput& render, const ProjectionAssets& assets,
                              int context_resolution);

struct TermValues {
  double vgg = 0, face = 0, eye = 0, recon = 0, color = 0, ctx = 0, total = 0;
};

struct ObjectiveTerms {
  ad::Var vgg, face, eye, recon, color, ctx, total;
  SynthesisOutput render;

  TermValues values() const;
};

/// recon(D(G(w))) + w_color * color + w_ctx * ctx against a fixed input.
class Objective {
 public:
  Objective(const Image& input, const ProjectionAssets& assets, const ProjectorConfig& cfg);

  /// `active_levels` selects the ToRGB taps the color term compares.
  ObjectiveTerms evaluate(const ad::Var& codes, const CRFVars& crf, const StageReference& ref,
                          const std::vector<int>& active_levels) const;

  const ProjectionAssets& assets() const { return assets_; }

 private:
  ProjectionAssets assets_;
  FilmModel film_;
  double sigma_;
  LossWeights weights_;
  int context_resolution_;
  ReconstructionLoss recon_;
};

/// Levels whose resolution is at most `cutoff_resolution`.
std::vector<int> active_levels(const Generator& generator, int cutoff_resolution);

struct TraceRecord {
  int stage = 0;
  int iteration = 0;  // counted across stages
  TermValues terms;
  double noise_scale = 0;
  CRFParams crf;
};

struct TraceWarning {
  int stage = 0;
  int iteration = 0;
  std::string message;
};

struct StageSummary {
  double initial_objective = 0;
  double best_objective = 0;
  int best_iteration = -1;  // -1: the starting state was never improved upon
};

struct ProjectionState {
  ExtendedLatentCode code;
  CRFParams crf;
  int iteration = 0;
  std::vector<TraceRecord> trace;
  std::vector<TraceWarning> warnings;
  std::vector<StageSummary> stages;
};

struct ProjectionDiverged : std::runtime_error {
  ProjectionDiverged(int iteration, TermValues terms, const std::string& what);
  int iteration;
  TermValues terms;
};

using TraceSink = std::function<void(const TraceRecord&)>;

/// One optimization stage. Only layers at or below the cutoff resolution and
/// the CRF parameters move; the returned state is the best clean objective
/// seen (start of stage, noise-free iterations, final iterate).
ProjectionState optimize_stage(ProjectionState state, const Objective& objective,
                               const StageReference& reference, const StageConfig& stage,
                               int stage_index, std::mt19937_64& rng,
                               const TraceSink& sink = {});

struct ProjectionResult {
  Image image;
  Sibling sibling;
  std::vector<Image> stage_renders;
  ProjectionState state;
};

/// Stages run from the sibling's broadcast code. After every stage but the
/// last its render becomes the color and context reference.
ProjectionResult project_from(const Image& input, const Sibling& sibling,
                              const ProjectionAssets& assets, const ProjectorConfig& cfg,
                              const TraceSink& sink = {});
ProjectionResult project(const Image& input, const Encoder& encoder,
                         const ProjectionAssets& assets, const ProjectorConfig& cfg,
                         const TraceSink& sink = {});

}  // namespace rephoto

#endif  // REPHOTO_PROJECTOR_HPP_
