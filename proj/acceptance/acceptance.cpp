// Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any fail.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "rephoto/pipeline.hpp"
#include "rephoto/tensor_file.hpp"

using namespace rephoto;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

ad::Mat random_mat(ad::Index rows, ad::Index cols, uint64_t seed, double lo = 0.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  ad::Mat m(rows, cols);
  for (ad::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

// Small enough that a step moving every pixel (a CRF parameter) rarely
// crosses a ReLU or max-pool switch somewhere in the backbones.
constexpr double kStep = 1e-6;

// Central differences at `count` random coordinates; worst relative error.
double worst_fd_error(const std::function<double(const ad::Mat&)>& f, const ad::Mat& x0, const ad::Mat& grad,
                      int count, uint64_t seed, double h = kStep) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<ad::Index> pick(0, x0.size() - 1);
  double worst = 0.0;
  for (int i = 0; i < count; ++i) {
    const ad::Index k = pick(rng);
    ad::Mat xp = x0, xm = x0;
    xp.data()[k] += h;
    xm.data()[k] -= h;
    const double fd = (f(xp) - f(xm)) / (2 * h);
    const double g = grad.data()[k];
    worst = std::max(worst, std::abs(fd - g) / std::max({std::abs(fd), std::abs(g), 1e-8}));
  }
  return worst;
}

// Shared toy state.
struct Toy {
  AssetBundle bundle = toy_bundle();
  Image clean, photo;
  EyeRegions eyes;

  Toy() {
    const Generator& g = *bundle.generator;
    clean = g.synthesize(broadcast(g.sample_latent(101), g.layer_count())).rgb();
    photo = degrade(clean, {FilmModel::Orthochromatic, 1.0, {}, g.resolution()});
    eyes = *bundle.default_eyes;
  }

  ProjectorConfig projector_config() const {
    ProjectorConfig pc;
    pc.film = FilmModel::Orthochromatic;
    pc.sigma = 1.0;
    pc.eyes = eyes;
    pc.loss_resolution = bundle.loss_resolution;
    pc.context_resolution = bundle.context_resolution;
    pc.stages = bundle.stages;
    return pc;
  }
};

Outcome degradation_exactness() {
  const auto t0 = std::chrono::steady_clock::now();
  const Image px(random_mat(3, 1000, 1), 1000, 1);
  double worst = 0.0;
  const Image blue = to_grayscale(px, FilmModel::BlueSensitive);
  const Image ortho = to_grayscale(px, FilmModel::Orthochromatic);
  const Image pan = to_grayscale(px, FilmModel::Panchromatic);
  for (int i = 0; i < 1000; ++i) {
    const double r = px.at(0, 0, i), g = px.at(1, 0, i), b = px.at(2, 0, i);
    worst = std::max({worst, std::abs(blue.at(0, 0, i) - b), std::abs(ortho.at(0, 0, i) - (g + b) / 2),
                      std::abs(pan.at(0, 0, i) - (0.299 * r + 0.587 * g + 0.114 * b))});
  }
  const Image v(random_mat(1, 1000, 2), 1000, 1);
  const double crf_dev = (apply_crf(v, {0, 1, 1}).pixels() - v.pixels()).cwiseAbs().maxCoeff();
  const double crf_dev_ad =
      (apply_crf(to_var(v), CRFVars::from({0, 1, 1})).value() - v.pixels()).cwiseAbs().maxCoeff();
  const double secs = seconds_since(t0);
  return {worst < 1e-6 && crf_dev < 1e-12 && crf_dev_ad < 1e-12 && secs < 1.0,
          fmt("film max err %.2e, identity CRF max dev %.2e/%.2e, %.3fs", worst, crf_dev, crf_dev_ad, secs)};
}

Outcome gradient_suite(const Toy& toy) {
  const auto t0 = std::chrono::steady_clock::now();
  const Generator& gen = *toy.bundle.generator;
  const ProjectionAssets assets = toy.bundle.view();
  const int L = gen.layer_count(), res = gen.resolution();
  const ReconstructionLoss recon(toy.photo, toy.eyes, {}, assets.perceptual, toy.bundle.loss_resolution);
  const ad::Mat code0 = broadcast(gen.sample_latent(5), L).matrix() + 0.1 * random_mat(L, kLatentWidth, 6, -1, 1);
  const CRFParams crf0{0.03, 0.9, 1.2};
  const int ctx_res = toy.bundle.context_resolution;
  const StageReference ref = make_reference(gen.synthesize(broadcast(gen.sample_latent(7), L)), assets, ctx_res);
  const std::vector<int> levels = active_levels(gen, toy.bundle.stages.back().cutoff_resolution);
  constexpr int kCoords = 30;

  std::vector<std::pair<std::string, double>> results;
  auto record = [&](const std::string& name, double e) { results.emplace_back(name, e); };

  // Each objective as a function of (codes, pixels, crf) where applicable.
  auto recon_of_codes = [&](const ad::Var& c, const CRFVars& k) {
    return recon(degrade(gen.synthesize(c).image, FilmModel::Orthochromatic, 1.0, k)).total;
  };
  auto color_of_codes = [&](const ad::Var& c) { return color_transfer_loss_cov(gen.synthesize(c).torgb, ref.tap_covariances, levels); };
  auto ctx_of_image = [&](const ad::Var& img) {
    return contextual_loss(assets.context->extract(resample(img, ctx_res, ctx_res), assets.context_layers), ref.context);
  };

  {  // recon w.r.t. codes
    auto f = [&](const ad::Mat& x) { return recon_of_codes(ad::constant(x), CRFVars::from(crf0)).item(); };
    const ad::Var c = ad::parameter(code0);
    ad::backward(recon_of_codes(c, CRFVars::from(crf0)));
    record("recon/codes", worst_fd_error(f, code0, c.grad(), kCoords, 10));
  }
  {  // recon w.r.t. degraded pixels
    const ad::Mat x0 = random_mat(1, res * res, 11, 0.05, 0.95);
    auto f = [&](const ad::Mat& x) { return recon(ad::constant(x, res, res)).total.item(); };
    const ad::Var x = ad::parameter(x0, res, res);
    ad::backward(recon(x).total);
    record("recon/pixels", worst_fd_error(f, x0, x.grad(), kCoords, 12));
  }
  {  // recon w.r.t. CRF, 10 random settings x 3 parameters
    const ad::Var img = ad::constant(gen.synthesize(ad::constant(code0)).image.value(), res, res);
    double worst = 0.0;
    for (int trial = 0; trial < 10; ++trial) {
      const ad::Mat p0 = random_mat(3, 1, 20 + trial, 0.0, 0.2) + (ad::Mat(3, 1) << 0.0, 0.8, 0.8).finished();
      auto f = [&](const ad::Mat& p) {
        return recon(degrade(img, FilmModel::Orthochromatic, 1.0, CRFVars::from({p(0), p(1), p(2)}))).total.item();
      };
      const CRFVars k = CRFVars::from({p0(0), p0(1), p0(2)}, true);
      ad::backward(recon(degrade(img, FilmModel::Orthochromatic, 1.0, k)).total);
      ad::Mat g(3, 1);
      g << k.a.grad()(0, 0), k.b.grad()(0, 0), k.gamma.grad()(0, 0);
      for (int j = 0; j < 3; ++j) {
        ad::Mat pp = p0, pm = p0;
        pp(j) += kStep;
        pm(j) -= kStep;
        const double fd = (f(pp) - f(pm)) / (2 * kStep);
        worst = std::max(worst, std::abs(fd - g(j)) / std::max({std::abs(fd), std::abs(g(j)), 1e-8}));
      }
    }
    record("recon/crf", worst);
  }
  {  // color w.r.t. codes
    auto f = [&](const ad::Mat& x) { return color_of_codes(ad::constant(x)).item(); };
    const ad::Var c = ad::parameter(code0);
    ad::backward(color_of_codes(c));
    record("color/codes", worst_fd_error(f, code0, c.grad(), kCoords, 13));
  }
  {  // color w.r.t. tap pixels
    const SynthesisOutput s = gen.synthesize(ad::constant(code0));
    const ad::Mat t0 = s.torgb[2].value();
    const int w = s.torgb[2].width();
    auto taps_with = [&](const ad::Var& t) {
      std::vector<ad::Var> taps = s.torgb;
      taps[2] = t;
      return color_transfer_loss_cov(taps, ref.tap_covariances, levels);
    };
    auto f = [&](const ad::Mat& x) { return taps_with(ad::constant(x, w, w)).item(); };
    const ad::Var t = ad::parameter(t0, w, w);
    ad::backward(taps_with(t));
    record("color/taps", worst_fd_error(f, t0, t.grad(), kCoords, 14));
  }
  {  // contextual w.r.t. codes
    auto f = [&](const ad::Mat& x) { return ctx_of_image(gen.synthesize(ad::constant(x)).image).item(); };
    const ad::Var c = ad::parameter(code0);
    ad::backward(ctx_of_image(gen.synthesize(c).image));
    record("ctx/codes", worst_fd_error(f, code0, c.grad(), kCoords, 15));
  }
  {  // contextual w.r.t. image pixels
    const ad::Mat x0 = random_mat(3, res * res, 16, 0.05, 0.95);
    auto f = [&](const ad::Mat& x) { return ctx_of_image(ad::constant(x, res, res)).item(); };
    const ad::Var x = ad::parameter(x0, res, res);
    ad::backward(ctx_of_image(x));
    record("ctx/pixels", worst_fd_error(f, x0, x.grad(), kCoords, 17));
  }
  const ad::Mat wts = random_mat(1, res * res, 18, -1, 1);
  {  // degrade w.r.t. pixels
    const ad::Mat x0 = random_mat(3, res * res, 19, 0.05, 0.95);
    auto f = [&](const ad::Mat& x) {
      return ad::sum(degrade(ad::constant(x, res, res), FilmModel::Orthochromatic, 1.0, CRFVars::from(crf0)) *
                     ad::constant(wts))
          .item();
    };
    const ad::Var x = ad::parameter(x0, res, res);
    ad::backward(ad::sum(degrade(x, FilmModel::Orthochromatic, 1.0, CRFVars::from(crf0)) * ad::constant(wts)));
    record("degrade/pixels", worst_fd_error(f, x0, x.grad(), kCoords, 20));
  }
  {  // degrade w.r.t. CRF
    const ad::Var img = ad::constant(random_mat(3, res * res, 21, 0.05, 0.95), res, res);
    double worst = 0.0;
    for (int trial = 0; trial < 10; ++trial) {
      const ad::Mat p0 = random_mat(3, 1, 30 + trial, 0.0, 0.4) + (ad::Mat(3, 1) << -0.1, 0.7, 0.7).finished();
      auto f = [&](const ad::Mat& p) {
        return ad::sum(degrade(img, FilmModel::Orthochromatic, 1.0, CRFVars::from({p(0), p(1), p(2)})) *
                       ad::constant(wts))
            .item();
      };
      const CRFVars k = CRFVars::from({p0(0), p0(1), p0(2)}, true);
      ad::backward(ad::sum(degrade(img, FilmModel::Orthochromatic, 1.0, k) * ad::constant(wts)));
      ad::Mat g(3, 1);
      g << k.a.grad()(0, 0), k.b.grad()(0, 0), k.gamma.grad()(0, 0);
      for (int j = 0; j < 3; ++j) {
        ad::Mat pp = p0, pm = p0;
        pp(j) += kStep;
        pm(j) -= kStep;
        const double fd = (f(pp) - f(pm)) / (2 * kStep);
        worst = std::max(worst, std::abs(fd - g(j)) / std::max({std::abs(fd), std::abs(g(j)), 1e-8}));
      }
    }
    record("degrade/crf", worst);
  }

  const double secs = seconds_since(t0);
  bool pass = secs < 120.0;
  std::string detail;
  for (const auto& [name, e] : results) {
    pass = pass && e < 1e-3;
    detail += fmt("%s %.1e, ", name.c_str(), e);
  }
  return {pass, detail + fmt("%d coords each, %.1fs", kCoords, secs)};
}

double perceptual_oracle(const FeatureSet& a, const FeatureSet& b) {
  double total = 0.0;
  for (size_t l = 0; l < a.layers.size(); ++l) {
    const ad::Mat& x = a.layers[l].second.value();
    const ad::Mat& y = b.layers[l].second.value();
    double s = 0.0;
    for (ad::Index i = 0; i < x.size(); ++i) s += (x.data()[i] - y.data()[i]) * (x.data()[i] - y.data()[i]);
    total += s / static_cast<double>(x.size());
  }
  return total / static_cast<double>(a.layers.size());
}

ad::Mat shuffle_columns(const ad::Mat& m, uint64_t seed) {
  std::vector<ad::Index> perm(static_cast<size_t>(m.cols()));
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), std::mt19937_64(seed));
  ad::Mat out(m.rows(), m.cols());
  for (ad::Index j = 0; j < m.cols(); ++j) out.col(j) = m.col(perm[static_cast<size_t>(j)]);
  return out;
}

Outcome loss_cases(const Toy& toy) {
  const Generator& gen = *toy.bundle.generator;
  const ProjectionAssets assets = toy.bundle.view();
  const int L = gen.layer_count(), res = gen.resolution(), lr = toy.bundle.loss_resolution;
  const Image& gray = toy.photo;

  // Zero on identical inputs.
  const FeatureSet f = assets.perceptual.vgg->extract(to_var(gray), assets.perceptual.vgg_layers);
  const double perceptual_self = perceptual_loss(f, f).item();
  const double recon_self = reconstruction_loss(gray, to_var(gray), toy.eyes, {}, assets.perceptual, lr).total.item();
  const SynthesisOutput s = gen.synthesize(broadcast(gen.sample_latent(3), L));
  const std::vector<int> levels = active_levels(gen, res);
  const double color_self = color_transfer_loss(s.torgb, s.torgb, levels).item();

  // Contextual: self-match is the minimum over random perturbations.
  const ad::Var img = resample(s.image, toy.bundle.context_resolution, toy.bundle.context_resolution);
  const FeatureSet ctx_ref = assets.context->extract(img, assets.context_layers);
  const double ctx_self = contextual_loss(ctx_ref, ctx_ref).item();
  bool ctx_min = true;
  for (uint64_t k = 0; k < 10; ++k) {
    const ad::Mat p = img.value() + 0.05 * random_mat(3, img.cols(), 40 + k, -1, 1);
    const FeatureSet fp = assets.context->extract(ad::constant(p, img.height(), img.width()), assets.context_layers);
    ctx_min = ctx_min && contextual_loss(fp, ctx_ref).item() > ctx_self;
  }

  // Color loss under spatial permutation.
  const SynthesisOutput other = gen.synthesize(broadcast(gen.sample_latent(4), L));
  std::vector<ad::Var> permuted;
  for (size_t l = 0; l < s.torgb.size(); ++l)
    permuted.push_back(ad::constant(shuffle_columns(s.torgb[l].value(), 50 + l), s.torgb[l].height(), s.torgb[l].width()));
  const double perm_dev = std::max(
      color_transfer_loss(permuted, s.torgb, levels).item(),
      std::abs(color_transfer_loss(permuted, other.torgb, levels).item() -
               color_transfer_loss(s.torgb, other.torgb, levels).item()));

  // Weighted reconstruction against a term-wise composition.
  const LossWeights w;
  const ad::Var degraded = degrade(other.image, FilmModel::Orthochromatic, 1.0, CRFVars::from({0.05, 0.9, 1.1}));
  const double total = reconstruction_loss(gray, degraded, toy.eyes, w, assets.perceptual, lr).total.item();
  const ad::Var in_small = resample(to_var(gray), lr, lr), d_small = resample(degraded, lr, lr);
  const auto& p = assets.perceptual;
  const double l_vgg = perceptual_oracle(p.vgg->extract(d_small, p.vgg_layers), p.vgg->extract(in_small, p.vgg_layers));
  const double l_face =
      perceptual_oracle(p.face->extract(d_small, p.face_layers), p.face->extract(in_small, p.face_layers));
  const ad::Var d_native = resample(degraded, gray.width(), gray.height());
  double l_eye = 0.0;
  for (const Box& b : {toy.eyes.left, toy.eyes.right})
    l_eye += 0.5 * perceptual_oracle(p.vgg->extract(crop(d_native, b.x0, b.y0, b.x1, b.y1), p.vgg_layers),
                                     p.vgg->extract(crop(to_var(gray), b.x0, b.y0, b.x1, b.y1), p.vgg_layers));
  const double comp_dev = std::abs(total - (w.vgg * l_vgg + w.face * l_face + w.eye * l_eye));

  const bool pass = perceptual_self == 0.0 && recon_self == 0.0 && color_self == 0.0 && ctx_min &&
                    perm_dev < 1e-9 && comp_dev < 1e-6;
  return {pass, fmt("perceptual %.1e, recon %.1e, color %.1e, ctx self %.4f is min: %s, permutation dev %.1e, "
                    "composition dev %.1e",
                    perceptual_self, recon_self, color_self, ctx_self, ctx_min ? "yes" : "no", perm_dev, comp_dev)};
}

struct ProjectionRun {
  Sibling sibling;
  ProjectionResult result;
};

Outcome partitioning(const Toy& toy, const ProjectionRun& run) {
  const size_t n32 = partition(18, 32).optimizable.size();
  const size_t n64 = partition(18, 64).optimizable.size();
  const Generator& gen = *toy.bundle.generator;
  // Layers above every stage's cutoff never move.
  int max_cutoff = 0;
  for (const auto& s : toy.bundle.stages) max_cutoff = std::max(max_cutoff, s.cutoff_resolution);
  const std::vector<int> frozen = partition(gen.layer_count(), max_cutoff).frozen;
  const ad::Mat start = broadcast(run.sibling.code, gen.layer_count()).matrix();
  bool equal = !frozen.empty();
  for (int k : frozen) equal = equal && run.result.state.code.matrix().row(k) == start.row(k);
  const bool moved = run.result.state.code.matrix() != start;
  return {n32 == 8 && n64 == 10 && equal && moved,
          fmt("cutoff 32 -> %zu, cutoff 64 -> %zu of 18; %zu frozen toy layers bit-equal after projection: %s",
              n32, n64, frozen.size(), equal ? "yes" : "no")};
}

Outcome degrade_and_recover(const Toy& toy, const ProjectionRun& run, double secs) {
  const double p_sib = psnr(run.sibling.image, toy.clean);
  const double p_fin = psnr(run.result.image, toy.clean);
  bool best_ok = !run.result.state.stages.empty();
  std::string stages;
  for (const auto& s : run.result.state.stages) {
    best_ok = best_ok && s.best_objective <= s.initial_objective;
    stages += fmt(" %.4g<=%.4g", s.best_objective, s.initial_objective);
  }
  return {p_fin - p_sib >= 5.0 && best_ok && secs < 300.0,
          fmt("sibling %.2f dB, final %.2f dB, gain %.2f dB; best<=initial:%s; %.1fs", p_sib, p_fin, p_fin - p_sib,
              stages.c_str(), secs)};
}

Outcome encoder_overfit(const Toy& toy, const std::vector<double>& epoch_means, double train_secs) {
  const auto t0 = std::chrono::steady_clock::now();
  const Generator& gen = *toy.bundle.generator;
  EncoderTrainConfig cfg = EncoderTrainConfig::for_film(FilmModel::Orthochromatic);
  cfg.sample_count = 1;
  cfg.batch_size = 1;
  cfg.epochs = 200;
  const TrainingSet one(gen, FilmModel::Orthochromatic, cfg, 5, EncoderArchitecture::toy().input_resolution);
  TrainOptions opts;
  opts.seed = 1;
  const Encoder enc = train_encoder(one, Encoder::init(EncoderArchitecture::toy(), FilmModel::Orthochromatic, 3), opts);
  const TrainingPair p = one.pair(0);
  const double l1 = latent_l1(enc.predict(p.input), p.target);

  bool decreasing = epoch_means.size() == 5;
  std::string means;
  for (size_t i = 0; i < epoch_means.size(); ++i) {
    if (i > 0) decreasing = decreasing && epoch_means[i] < epoch_means[i - 1];
    means += fmt(" %.4f", epoch_means[i]);
  }
  const double secs = seconds_since(t0) + train_secs;
  return {l1 < 0.05 && decreasing && secs < 600.0,
          fmt("single-pair L1 after 200 steps %.4f; 512-sample epoch means%s; %.1fs", l1, means.c_str(), secs)};
}

Outcome torgb_diagnostic(const Toy& toy, const ProjectionRun& with_color, const ProjectionRun& without_color) {
  const Generator& gen = *toy.bundle.generator;
  const ExtendedLatentCode sib = broadcast(with_color.sibling.code, gen.layer_count());
  const std::vector<int> coarse = active_levels(gen, toy.bundle.stages.back().cutoff_resolution);
  const auto a = torgb_covariance_table(gen, sib, with_color.result.state.code);
  const auto b = torgb_covariance_table(gen, sib, without_color.result.state.code);
  double on = 0.0, off = 0.0;
  for (int l : coarse) {
    on += a[static_cast<size_t>(l)].result;
    off += b[static_cast<size_t>(l)].result;
  }
  const double ratio = off > 0 ? on / off : INFINITY;
  return {ratio < 0.5, fmt("coarse levels 0-%d covariance norm sum: color on %.3e, off %.3e, ratio %.3f",
                           coarse.back(), on, off, ratio)};
}

Outcome determinism(const Toy&) {
  const fs::path dir = fs::temp_directory_path() / "rephoto_acceptance";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const AssetBundle b = toy_bundle();
  const Generator& g = *b.generator;
  const Image clean = g.synthesize(broadcast(g.sample_latent(202), g.layer_count())).rgb();
  write_png(dir / "photo.png", degrade(clean, {FilmModel::Orthochromatic, 1.0, {}, g.resolution()}), 16);

  ProjectionConfig cfg;
  cfg.input = dir / "photo.png";
  cfg.output_dir = dir / "first";
  cfg.film = FilmModel::Orthochromatic;
  cfg.sigma = 1.0;
  cfg.toy = true;
  cfg.seed = 9;
  const RunOutcome first = execute(cfg, NullLandmarkProvider{});
  const ProjectionConfig replay = config_from_run_manifest(first.manifest, dir / "second");
  execute(replay, NullLandmarkProvider{});

  auto slurp = [](const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
  };
  bool same = true;
  std::string detail;
  for (const char* f : {"final.png", "sibling.png", "codes.rpwc"}) {
    const bool eq = slurp(dir / "first" / f) == slurp(dir / "second" / f) && !slurp(dir / "first" / f).empty();
    same = same && eq;
    detail += fmt("%s %s, ", f, eq ? "identical" : "DIFFERS");
  }
  return {same, detail + "replayed from run_manifest.json"};
}

}  // namespace

int main() {
  const Toy toy;
  const Generator& gen = *toy.bundle.generator;
  int failures = 0;
  auto report = [&](int n, const char* name, const std::function<Outcome()>& f) {
    Outcome o;
    try {
      o = f();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    if (!o.pass) ++failures;
    std::printf("%s %d %s: %s\n", o.pass ? "PASS" : "FAIL", n, name, o.detail.c_str());
    std::fflush(stdout);
  };

  report(1, "degradation exactness", degradation_exactness);
  report(2, "gradient suite", [&] { return gradient_suite(toy); });
  report(3, "loss zero/invariance cases", [&] { return loss_cases(toy); });

  // Toy encoder and two projections shared by criteria 4-7.
  std::vector<double> epoch_means;
  auto t0 = std::chrono::steady_clock::now();
  std::optional<Encoder> encoder;
  ProjectionRun run_on, run_off;
  double project_secs = 0.0, train_secs = 0.0;
  std::string setup_error;
  try {
    encoder = train_toy_encoder(gen, FilmModel::Orthochromatic, {},
                                [&](int, double m) { epoch_means.push_back(m); });
    train_secs = seconds_since(t0);
    t0 = std::chrono::steady_clock::now();
    ProjectorConfig pc = toy.projector_config();
    run_on.result = project(toy.photo, *encoder, toy.bundle.view(), pc);
    run_on.sibling = run_on.result.sibling;
    project_secs = seconds_since(t0);
    pc.weights.color = 0.0;
    run_off.result = project(toy.photo, *encoder, toy.bundle.view(), pc);
    run_off.sibling = run_off.result.sibling;
  } catch (const std::exception& e) {
    setup_error = e.what();
  }
  auto needs_setup = [&](const std::function<Outcome()>& f) {
    return [&, f] { return setup_error.empty() ? f() : Outcome{false, "setup failed: " + setup_error}; };
  };

  report(4, "layer partitioning", needs_setup([&] { return partitioning(toy, run_on); }));
  report(5, "degrade-and-recover", needs_setup([&] { return degrade_and_recover(toy, run_on, train_secs + project_secs); }));
  report(6, "encoder overfit", needs_setup([&] { return encoder_overfit(toy, epoch_means, train_secs); }));
  report(7, "ToRGB diagnostic", needs_setup([&] { return torgb_diagnostic(toy, run_on, run_off); }));
  report(8, "determinism", [&] { return determinism(toy); });

  std::printf("%d of 8 criteria passed\n", 8 - failures);
  return failures == 0 ? 0 : 1;
}
