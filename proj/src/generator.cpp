#include "rephoto/generator.hpp"

#include <cmath>
#include <random>

#include <Eigen/QR>
#include <sstream>
#include <stdexcept>

#include "rephoto/imagecore.hpp"

namespace rephoto {
namespace {

constexpr double kLreluSlope = 0.2;
const double kLreluGain = std::sqrt(2.0);
constexpr double kDemodEps = 1e-8;

// Toy generator constants.
constexpr int kMappingRank = 384;
constexpr double kRgbGain = 2.0;
constexpr double kCoarseStyleGain = 0.03;
constexpr double kCoarseStyleFloor = 0.003;
constexpr double kTapSpread = 0.3;
constexpr int kCalibrationSamples = 8;

ad::Mat normal(std::mt19937_64& rng, ad::Index rows, ad::Index cols, double std) {
  std::normal_distribution<double> n(0.0, std);
  ad::Mat m(rows, cols);
  for (ad::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

std::string conv_name(int level, int j) {
  return "level" + std::to_string(level) + ".conv" + std::to_string(j);
}
std::string rgb_name(int level) { return "level" + std::to_string(level) + ".torgb"; }

int log2_exact(int v) {
  int l = 0;
  while ((1 << l) < v) ++l;
  if ((1 << l) != v) throw std::invalid_argument("resolution must be a power of two");
  return l;
}

ad::Var c(const ad::Mat& m) { return ad::constant(m); }

// Style vector for one layer: (1 x latent) * (latent x C) + bias, as a column.
ad::Var style(const ad::Var& w_row, const TensorFile& wt, const std::string& prefix) {
  return ad::transpose(ad::matmul(w_row, c(wt.tensor(prefix + ".affine"))) +
                       c(wt.tensor(prefix + ".affine_bias")));
}

}  // namespace

LatentCode::LatentCode(Eigen::VectorXd v) : values(std::move(v)) {
  if (!values.allFinite()) throw std::invalid_argument("latent code has non-finite values");
}

ExtendedLatentCode::ExtendedLatentCode(ad::Mat layers) : layers_(std::move(layers)) {
  if (!layers_.allFinite()) throw std::invalid_argument("latent code has non-finite values");
}

ExtendedLatentCode ExtendedLatentCode::broadcast(const LatentCode& code, int layer_count) {
  ad::Mat m(layer_count, code.width());
  m.rowwise() = code.values.transpose();
  return ExtendedLatentCode(std::move(m));
}

int layer_count_for_resolution(int resolution) { return 2 * log2_exact(resolution) - 2; }

int layer_resolution(int k) {
  if (k < 0) throw std::out_of_range("negative layer index");
  return 1 << (2 + k / 2);
}

LayerPartition partition(int layer_count, int cutoff_resolution) {
  LayerPartition p;
  for (int k = 0; k < layer_count; ++k)
    (layer_resolution(k) <= cutoff_resolution ? p.optimizable : p.frozen).push_back(k);
  return p;
}

GeneratorArchitecture GeneratorArchitecture::toy() {
  GeneratorArchitecture a;
  a.version = "toy-64-v1";
  a.resolution = 64;
  a.channels = {32, 32, 24, 16, 12};
  return a;
}

GeneratorArchitecture GeneratorArchitecture::stylegan2_1024() {
  GeneratorArchitecture a;
  a.version = "stylegan2-1024-v1";
  a.resolution = 1024;
  a.mapping_depth = 8;
  a.mapping_pixel_norm = true;
  a.mapping_final_activation = true;
  a.channels = {512, 512, 512, 512, 512, 256, 128, 64, 32};
  return a;
}

GeneratorArchitecture GeneratorArchitecture::by_version(const std::string& version) {
  if (version == "toy-64-v1") return toy();
  if (version == "stylegan2-1024-v1") return stylegan2_1024();
  throw FormatError("unknown generator architecture version '" + version + "'");
}

Generator::Generator(GeneratorArchitecture arch, TensorFile weights)
    : arch_(std::move(arch)), weights_(std::move(weights)) {
  validate();
}

// Checks every tensor the architecture needs, reporting the first offender.
void Generator::validate() const {
  const auto& w = weights_;
  const int lw = arch_.latent_width;
  if (arch_.layer_count() != layer_count_for_resolution(arch_.resolution))
    throw FormatError("architecture levels do not match resolution");
  for (int i = 0; i < arch_.mapping_depth; ++i) {
    const int in = i == 0 ? lw : arch_.mapping_hidden;
    const int out = i + 1 == arch_.mapping_depth ? lw : arch_.mapping_hidden;
    w.tensor("mapping." + std::to_string(i) + ".weight", out, in);
    w.tensor("mapping." + std::to_string(i) + ".bias", out, 1);
  }
  w.tensor("const", arch_.channels[0], 16);
  for (int level = 0; level < arch_.levels(); ++level) {
    const int res = 4 << level;
    const int out = arch_.channels[static_cast<size_t>(level)];
    for (int j = level == 0 ? 1 : 0; j < 2; ++j) {
      const int in = (j == 0) ? arch_.channels[static_cast<size_t>(level - 1)] : out;
      const std::string p = conv_name(level, j);
      w.tensor(p + ".weight", out, in * 9);
      w.tensor(p + ".affine", lw, in);
      w.tensor(p + ".affine_bias", 1, in);
      w.tensor(p + ".bias", out, 1);
      w.tensor(p + ".noise", 1, res * res);
      w.tensor(p + ".noise_strength", 1, 1);
    }
    const std::string p = rgb_name(level);
    w.tensor(p + ".weight", 3, out);
    w.tensor(p + ".affine", lw, out);
    w.tensor(p + ".affine_bias", 1, out);
    w.tensor(p + ".bias", 3, 1);
  }
}

Generator Generator::toy(uint64_t seed) {
  GeneratorArchitecture arch = GeneratorArchitecture::toy();
  std::mt19937_64 rng(seed);
  TensorFile w;
  w.meta["kind"] = "generator";
  w.meta["architecture"] = arch.version;
  w.meta["seed"] = std::to_string(seed);

  const int lw = arch.latent_width;
  const int hid = arch.mapping_hidden;
  w.tensors["mapping.0.weight"] = normal(rng, hid, lw, 1.0 / std::sqrt(lw));
  w.tensors["mapping.0.bias"] = normal(rng, hid, 1, 0.5);
  // The final mapping layer has rank kMappingRank, so mapped codes only vary
  // inside a subspace of W. W+ optimization is free to leave it.
  const ad::Mat basis = Eigen::HouseholderQR<ad::Mat>(normal(rng, lw, lw, 1.0)).householderQ();
  const ad::Mat inside = basis.leftCols(kMappingRank);
  const ad::Mat outside = basis.rightCols(lw - kMappingRank);
  w.tensors["mapping.1.weight"] =
      inside * normal(rng, kMappingRank, hid, std::sqrt(double(lw) / kMappingRank / hid));
  w.tensors["mapping.1.bias"] = normal(rng, lw, 1, 0.2);
  const ad::Mat& w_bias = w.tensors["mapping.1.bias"];
  w.tensors["const"] = normal(rng, arch.channels[0], 16, 1.0);

  // Every ToRGB mixes a shared warm tint with a weaker free chroma part, so
  // channels stay correlated as in photos.
  const Eigen::Vector3d tint = Eigen::Vector3d(1.0, 0.8, 0.65).normalized();
  constexpr double kChroma = 0.15;
  // Style sensitivity falls off with resolution: fine styles only nudge detail.
  const std::vector<double> style_gain = {0.5, 0.5, 0.4, 0.3, 0.1};
  for (int level = 0; level < arch.levels(); ++level) {
    const int res = 4 << level;
    const int out = arch.channels[static_cast<size_t>(level)];
    const double sg = style_gain[static_cast<size_t>(level)];
    for (int j = level == 0 ? 1 : 0; j < 2; ++j) {
      const int in = (j == 0) ? arch.channels[static_cast<size_t>(level - 1)] : out;
      const std::string p = conv_name(level, j);
      w.tensors[p + ".weight"] = normal(rng, out, in * 9, 1.0);
      w.tensors[p + ".affine"] = normal(rng, lw, in, sg / std::sqrt(lw));
      w.tensors[p + ".affine_bias"] = ad::Mat::Ones(1, in);
      w.tensors[p + ".bias"] = normal(rng, out, 1, 0.1);
      w.tensors[p + ".noise"] = normal(rng, 1, res * res, 1.0);
      w.tensors[p + ".noise_strength"] = ad::Mat::Constant(1, 1, 0.05);
    }
    const std::string p = rgb_name(level);
    const ad::Mat shared = normal(rng, 1, out, 1.0);
    ad::Mat rgb = normal(rng, 3, out, kChroma);
    for (int ch = 0; ch < 3; ++ch) rgb.row(ch) += tint(ch) * std::sqrt(3.0) * shared;
    w.tensors[p + ".weight"] = rgb * (kRgbGain / std::sqrt(out));
    if (level + 1 < arch.levels()) {
      // Coarse ToRGB styles read only the directions mapped codes never use
      // and are nearly zero on the mapped subspace: negligible for sampled
      // codes, large once a code drifts off it.
      const ad::Mat a = outside * normal(rng, lw - kMappingRank, out,
                                         kCoarseStyleGain / std::sqrt(lw - kMappingRank));
      w.tensors[p + ".affine"] = a;
      w.tensors[p + ".affine_bias"] =
          normal(rng, 1, out, kCoarseStyleFloor) - w_bias.transpose() * a;
    } else {
      w.tensors[p + ".affine"] = normal(rng, lw, out, sg / std::sqrt(lw));
      w.tensors[p + ".affine_bias"] = ad::Mat::Ones(1, out);
    }
    w.tensors[p + ".bias"] = normal(rng, 3, 1, 0.05);
  }

  // Rescale the finest ToRGB so sampled renders have a fixed contrast and a
  // warm mean tone whatever the seed.
  {
    const Generator probe(arch, w);
    const int last = arch.levels() - 1;
    Eigen::Vector3d sum = Eigen::Vector3d::Zero(), sq = Eigen::Vector3d::Zero();
    Eigen::Vector3d coarse = Eigen::Vector3d::Zero();
    double n = 0;
    for (int i = 0; i < kCalibrationSamples; ++i) {
      const SynthesisOutput o =
          probe.synthesize(broadcast(probe.sample_latent(seed * 7919 + i), arch.layer_count()));
      const ad::Mat& tap = o.torgb[static_cast<size_t>(last)].value();
      sum += tap.rowwise().sum();
      sq += tap.rowwise().squaredNorm();
      n += static_cast<double>(tap.cols());
      for (int l = 0; l < last; ++l) coarse += o.torgb[static_cast<size_t>(l)].value().rowwise().mean();
    }
    const Eigen::Vector3d mean = sum / n;
    const double spread =
        std::sqrt(((sq / n).array() - mean.array().square()).sum() / 3.0);
    const double k = kTapSpread / spread;
    w.tensors[rgb_name(last) + ".weight"] *= k;
    coarse /= kCalibrationSamples;
    Eigen::Vector3d other_bias = Eigen::Vector3d::Zero();
    for (int l = 0; l < last; ++l) other_bias += w.tensors[rgb_name(l) + ".bias"].col(0);
    const Eigen::Vector3d tone(0.56, 0.47, 0.42);
    w.tensors[rgb_name(last) + ".bias"] = 2.0 * tone.array() - 1.0 - k * mean.array() -
                                          coarse.array() - other_bias.array();
  }
  return Generator(std::move(arch), std::move(w));
}

Generator Generator::load(const std::filesystem::path& path) {
  TensorFile w = TensorFile::load(path);
  if (w.meta_value("kind") != "generator")
    throw FormatError(path.string() + " is not a generator checkpoint");
  GeneratorArchitecture arch = GeneratorArchitecture::by_version(w.meta_value("architecture"));
  return Generator(std::move(arch), std::move(w));
}

void Generator::save(const std::filesystem::path& path) const { weights_.save(path); }

SynthesisOutput Generator::synthesize(const ExtendedLatentCode& code, double latent_noise_scale,
                                      uint64_t noise_seed) const {
  if (code.layer_count() != layer_count() || code.width() != latent_width())
    throw std::invalid_argument("code has " + std::to_string(code.layer_count()) + "x" +
                                std::to_string(code.width()) + " entries, generator expects " +
                                std::to_string(layer_count()) + "x" +
                                std::to_string(latent_width()));
  ad::Mat m = code.matrix();
  if (latent_noise_scale > 0.0) {
    std::mt19937_64 rng(noise_seed);
    m += normal(rng, m.rows(), m.cols(), latent_noise_scale);
  }
  return synthesize(ad::constant(std::move(m)));
}

SynthesisOutput Generator::synthesize(const ad::Var& codes) const {
  if (codes.rows() != layer_count() || codes.cols() != latent_width())
    throw std::invalid_argument("code matrix shape does not match the generator");
  const auto& wt = weights_;

  auto modulated_conv = [&](const ad::Var& x, const ad::Var& w_row, const std::string& p) {
    const ad::Mat& weight = wt.tensor(p + ".weight");
    const ad::Var s = style(w_row, wt, p);
    ad::Var y = ad::conv2d(x * s, c(weight), 3, 1, 1);
    // Demodulation: each output channel is rescaled to unit expected norm.
    const ad::Index in = weight.cols() / 9;
    ad::Mat wsq(weight.rows(), in);
    for (ad::Index i = 0; i < in; ++i) wsq.col(i) = weight.middleCols(i * 9, 9).rowwise().squaredNorm();
    const ad::Var demod = ad::scalar(1.0) / ad::sqrt(ad::matmul(c(wsq), ad::square(s)) + kDemodEps);
    y = y * demod + c(wt.tensor(p + ".noise")) * wt.tensor(p + ".noise_strength")(0, 0) +
        c(wt.tensor(p + ".bias"));
    return ad::leaky_relu(y, kLreluSlope) * kLreluGain;
  };

  auto layer = [&](int k) { return ad::slice_rows(codes, k, 1); };

  SynthesisOutput out;
  ad::Var x = ad::constant(wt.tensor("const"), 4, 4);
  ad::Var img;
  for (int level = 0; level < arch_.levels(); ++level) {
    const int res = 4 << level;
    if (level == 0) {
      x = modulated_conv(x, layer(0), conv_name(0, 1));
    } else {
      x = resample(x, res, res);
      x = modulated_conv(x, layer(2 * level), conv_name(level, 0));
      x = modulated_conv(x, layer(2 * level + 1), conv_name(level, 1));
    }
    const std::string p = rgb_name(level);
    const ad::Var s = style(layer(2 * level + 1), wt, p);
    ad::Var psi = ad::matmul(c(wt.tensor(p + ".weight")), x * s);
    const ad::Mat& bias = wt.tensor(p + ".bias");
    out.torgb.push_back(psi);
    out.torgb_bias.emplace_back(bias(0, 0), bias(1, 0), bias(2, 0));
    ad::Var contribution = psi + c(bias);
    img = level == 0 ? contribution : resample(img, res, res) + contribution;
  }
  out.image = img * 0.5 + 0.5;
  return out;
}

LatentCode Generator::map(const Eigen::VectorXd& z) const {
  if (z.size() != latent_width()) throw std::invalid_argument("z has the wrong width");
  Eigen::VectorXd h = z;
  if (arch_.mapping_pixel_norm) h /= std::sqrt(h.squaredNorm() / h.size() + 1e-8);
  for (int i = 0; i < arch_.mapping_depth; ++i) {
    const std::string p = "mapping." + std::to_string(i);
    h = weights_.tensor(p + ".weight") * h + weights_.tensor(p + ".bias").col(0);
    if (i + 1 < arch_.mapping_depth || arch_.mapping_final_activation)
      h = h.unaryExpr([](double v) { return v > 0 ? v : kLreluSlope * v; });
  }
  return LatentCode(std::move(h));
}

Eigen::VectorXd Generator::sample_z(uint64_t seed) const {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n;
  Eigen::VectorXd z(latent_width());
  for (auto& v : z) v = n(rng);
  return z;
}

LatentCode Generator::sample_latent(uint64_t seed) const { return map(sample_z(seed)); }

}  // namespace rephoto
