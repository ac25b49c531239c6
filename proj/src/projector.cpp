#include "rephoto/projector.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "rephoto/optim.hpp"

namespace rephoto {
namespace {

constexpr int kStallWindow = 100;
// Keeps the CRF inside its domain after an optimizer step.
constexpr double kCrfFloor = 1e-3;

std::string describe(const TermValues& t) {
  std::ostringstream os;
  os << "vgg=" << t.vgg << " face=" << t.face << " eye=" << t.eye << " color=" << t.color
     << " ctx=" << t.ctx << " total=" << t.total;
  return os.str();
}

bool finite(const TermValues& t) {
  for (double v : {t.vgg, t.face, t.eye, t.color, t.ctx, t.total})
    if (!std::isfinite(v)) return false;
  return true;
}

Image as_gray(const Image& img) {
  return img.channels() == 1 ? img : to_grayscale(img, FilmModel::Panchromatic);
}

}  // namespace

std::vector<StageConfig> default_stages() {
  StageConfig coarse;
  coarse.cutoff_resolution = 32;
  coarse.iterations = 250;
  StageConfig fine;
  fine.cutoff_resolution = 64;
  fine.iterations = 750;
  return {coarse, fine};
}

double noise_ramp(int t, int total, double initial, double fraction) {
  if (total <= 0) return 0.0;
  const double r = std::max(0.0, 1.0 - t / (fraction * total));
  return initial * r * r;
}

StageReference make_reference(const SynthesisOutput& render, const ProjectionAssets& assets,
                              int context_resolution) {
  StageReference ref;
  for (const ad::Var& tap : render.torgb)
    ref.tap_covariances.push_back(channel_covariance(ad::detach(tap)).value());
  if (assets.context && !assets.context_layers.empty()) {
    const ad::Var img = resample(ad::detach(render.image), context_resolution, context_resolution);
    ref.context = assets.context->extract(img, assets.context_layers);
  }
  return ref;
}

TermValues ObjectiveTerms::values() const {
  return {vgg.item(), face.item(), eye.item(), recon.item(), color.item(), ctx.item(), total.item()};
}

Objective::Objective(const Image& input, const ProjectionAssets& assets, const ProjectorConfig& cfg)
    : assets_(assets), film_(cfg.film), sigma_(cfg.sigma), weights_(cfg.weights),
      context_resolution_(cfg.context_resolution),
      recon_(as_gray(input), cfg.eyes, cfg.weights, assets.perceptual, cfg.loss_resolution) {
  if (!assets_.generator) throw std::invalid_argument("projection needs a generator");
  if (weights_.ctx != 0.0 && (!assets_.context || assets_.context_layers.empty()))
    throw std::invalid_argument("contextual term enabled without a context backbone");
}

ObjectiveTerms Objective::evaluate(const ad::Var& codes, const CRFVars& crf,
                                   const StageReference& ref,
                                   const std::vector<int>& active_levels) const {
  ObjectiveTerms t;
  t.render = assets_.generator->synthesize(codes);
  const ReconstructionTerms r = recon_(degrade(t.render.image, film_, sigma_, crf));
  t.vgg = r.vgg;
  t.face = r.face;
  t.eye = r.eye;
  t.recon = r.total;
  t.color = weights_.color != 0.0
                ? color_transfer_loss_cov(t.render.torgb, ref.tap_covariances, active_levels)
                : ad::scalar(0.0);
  if (weights_.ctx != 0.0) {
    const ad::Var img = resample(t.render.image, context_resolution_, context_resolution_);
    t.ctx = contextual_loss(assets_.context->extract(img, assets_.context_layers), ref.context);
  } else {
    t.ctx = ad::scalar(0.0);
  }
  t.total = t.recon + t.color * weights_.color + t.ctx * weights_.ctx;
  return t;
}

std::vector<int> active_levels(const Generator& generator, int cutoff_resolution) {
  std::vector<int> out;
  for (int level = 0; level < generator.architecture().levels(); ++level)
    if ((4 << level) <= cutoff_resolution) out.push_back(level);
  return out;
}

ProjectionDiverged::ProjectionDiverged(int iteration, TermValues terms, const std::string& what)
    : std::runtime_error(what), iteration(iteration), terms(terms) {}

ProjectionState optimize_stage(ProjectionState state, const Objective& objective,
                               const StageReference& reference, const StageConfig& stage,
                               int stage_index, std::mt19937_64& rng, const TraceSink& sink) {
  if (stage.iterations < 0) throw std::invalid_argument("stage iterations must be >= 0");
  const Generator& gen = *objective.assets().generator;
  const LayerPartition part = partition(state.code, stage.cutoff_resolution);
  const std::vector<int> levels = active_levels(gen, stage.cutoff_resolution);

  ad::Mat mask = ad::Mat::Zero(state.code.layer_count(), state.code.width());
  for (int k : part.optimizable) mask.row(k).setOnes();

  RAdamOptions code_opts;
  code_opts.lr = stage.style_lr;
  RAdamOptions crf_opts;
  crf_opts.lr = stage.crf_lr;
  RAdam<ad::Mat> code_opt(code_opts, mask.rows(), mask.cols());
  RAdam<ad::Mat> crf_opt(crf_opts, 3, 1);

  auto clean_objective = [&](const ProjectionState& s) {
    return objective
        .evaluate(ad::constant(s.code.matrix()), CRFVars::from(s.crf), reference, levels)
        .total.item();
  };

  StageSummary summary;
  summary.initial_objective = clean_objective(state);
  summary.best_objective = summary.initial_objective;
  ProjectionState best = state;
  auto consider = [&](const ProjectionState& s, double value, int iteration) {
    if (value < summary.best_objective) {
      summary.best_objective = value;
      summary.best_iteration = iteration;
      best.code = s.code;
      best.crf = s.crf;
    }
  };

  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> totals;
  int next_stall_check = kStallWindow;
  for (int t = 0; t < stage.iterations; ++t) {
    const double scale = noise_ramp(t, stage.iterations, stage.noise_initial,
                                    stage.noise_ramp_fraction);
    ad::Mat noise = ad::Mat::Zero(mask.rows(), mask.cols());
    if (scale > 0.0)
      for (int k : part.optimizable)
        for (ad::Index j = 0; j < noise.cols(); ++j) noise(k, j) = scale * normal(rng);

    const ad::Var codes = ad::parameter(state.code.matrix());
    const CRFVars crf = CRFVars::from(state.crf, true);
    const ObjectiveTerms terms =
        objective.evaluate(scale > 0.0 ? codes + ad::constant(noise) : codes, crf, reference, levels);
    const TermValues values = terms.values();

    TraceRecord rec{stage_index, state.iteration, values, scale, state.crf};
    state.trace.push_back(rec);
    if (sink) sink(rec);
    if (!finite(values))
      throw ProjectionDiverged(state.iteration, values,
                               "non-finite loss at iteration " + std::to_string(state.iteration) +
                                   ": " + describe(values));
    if (scale == 0.0) consider(state, values.total, state.iteration);

    totals.push_back(values.total);
    if (t >= next_stall_check) {
      const double before = totals[static_cast<size_t>(t - kStallWindow)];
      const double window_min =
          *std::min_element(totals.end() - kStallWindow, totals.end());
      if (window_min >= before) {
        state.warnings.push_back({stage_index, state.iteration,
                                  "total loss did not decrease over the last " +
                                      std::to_string(kStallWindow) + " iterations"});
        next_stall_check = t + kStallWindow;
      }
    }

    ad::backward(terms.total);
    const ad::Mat grad = codes.grad().cwiseProduct(mask);  // frozen rows exactly zero
    code_opt.step(state.code.matrix(), grad);
    ad::Mat crf_params(3, 1);
    crf_params << state.crf.a, state.crf.b, state.crf.gamma;
    ad::Mat crf_grad(3, 1);
    crf_grad << crf.a.grad()(0, 0), crf.b.grad()(0, 0), crf.gamma.grad()(0, 0);
    crf_opt.step(crf_params, crf_grad);
    state.crf = {crf_params(0, 0), std::max(crf_params(1, 0), kCrfFloor),
                 std::max(crf_params(2, 0), kCrfFloor)};
    ++state.iteration;

    if (!state.code.matrix().allFinite())
      throw ProjectionDiverged(state.iteration, values,
                               "non-finite code after iteration " +
                                   std::to_string(state.iteration - 1) + ": " + describe(values));
  }
  if (stage.iterations > 0) consider(state, clean_objective(state), state.iteration);

  best.iteration = state.iteration;
  best.trace = std::move(state.trace);
  best.warnings = std::move(state.warnings);
  best.stages.push_back(summary);
  return best;
}

ProjectionResult project_from(const Image& input, const Sibling& sibling,
                              const ProjectionAssets& assets, const ProjectorConfig& cfg,
                              const TraceSink& sink) {
  if (!assets.generator) throw std::invalid_argument("projection needs a generator");
  const Generator& gen = *assets.generator;
  const Objective objective(input, assets, cfg);

  ProjectionResult result;
  result.sibling = sibling;
  result.state.code = broadcast(sibling.code, gen.layer_count());
  result.state.crf = cfg.initial_crf;

  std::mt19937_64 rng(cfg.seed);
  StageReference reference =
      make_reference(gen.synthesize(result.state.code), assets, cfg.context_resolution);
  for (size_t s = 0; s < cfg.stages.size(); ++s) {
    result.state = optimize_stage(std::move(result.state), objective, reference, cfg.stages[s],
                                  static_cast<int>(s), rng, sink);
    const SynthesisOutput render = gen.synthesize(result.state.code);
    result.stage_renders.push_back(render.rgb());
    if (s + 1 < cfg.stages.size()) reference = make_reference(render, assets, cfg.context_resolution);
  }
  result.image = gen.synthesize(result.state.code).rgb();
  return result;
}

ProjectionResult project(const Image& input, const Encoder& encoder,
                         const ProjectionAssets& assets, const ProjectorConfig& cfg,
                         const TraceSink& sink) {
  if (!assets.generator) throw std::invalid_argument("projection needs a generator");
  if (encoder.film() != cfg.film)
    throw std::invalid_argument("encoder was trained for " + std::string(to_string(encoder.film())) +
                                " film, run uses " + std::string(to_string(cfg.film)));
  const Image gray = as_gray(input);
  return project_from(gray, predict_sibling(encoder, *assets.generator, gray), assets, cfg, sink);
}

}  // namespace rephoto
