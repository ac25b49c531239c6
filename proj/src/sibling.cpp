#include "rephoto/sibling.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "rephoto/optim.hpp"
#include "rephoto/tensor_file.hpp"

namespace rephoto {
namespace {

uint64_t mix(uint64_t seed, uint64_t index) {
  uint64_t z = seed + 0x9E3779B97F4A7C15ull * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

double uniform(std::mt19937_64& rng, std::pair<double, double> range) {
  if (range.first == range.second) return range.first;
  return std::uniform_real_distribution<double>(range.first, range.second)(rng);
}

void shift_hue(double& r, double& g, double& b, double shift) {
  const double mx = std::max({r, g, b}), mn = std::min({r, g, b});
  const double v = mx, delta = mx - mn;
  if (delta <= 0.0) return;  // gray pixels have no hue
  const double s = delta / mx;
  double h;
  if (mx == r)
    h = (g - b) / delta;
  else if (mx == g)
    h = 2.0 + (b - r) / delta;
  else
    h = 4.0 + (r - g) / delta;
  h = h / 6.0 + shift;
  h -= std::floor(h);
  const double hh = h * 6.0;
  const int sector = static_cast<int>(hh) % 6;
  const double f = hh - std::floor(hh);
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (sector) {
    case 0: r = v; g = t; b = p; break;
    case 1: r = q; g = v; b = p; break;
    case 2: r = p; g = v; b = t; break;
    case 3: r = p; g = q; b = v; break;
    case 4: r = t; g = p; b = v; break;
    default: r = v; g = p; b = q; break;
  }
}

std::string join(const std::vector<int>& v) {
  std::ostringstream os;
  for (size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
  return os.str();
}

std::vector<int> split_ints(const std::string& s) {
  std::vector<int> out;
  std::istringstream is(s);
  std::string tok;
  while (std::getline(is, tok, ',')) out.push_back(std::stoi(tok));
  return out;
}

ad::Mat he_normal(std::mt19937_64& rng, ad::Index rows, ad::Index cols, double fan_in) {
  std::normal_distribution<double> n(0.0, std::sqrt(2.0 / fan_in));
  ad::Mat m(rows, cols);
  for (ad::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

std::string block_name(int stage, int block) {
  return "stage" + std::to_string(stage) + ".block" + std::to_string(block);
}

}  // namespace

// ---------------------------------------------------------------------------
// Training data

EncoderTrainConfig EncoderTrainConfig::for_film(FilmModel film) {
  EncoderTrainConfig cfg;
  cfg.epochs = film == FilmModel::Panchromatic ? 70 : 100;
  return cfg;
}

void EncoderTrainConfig::validate() const {
  if (sample_count < 1 || batch_size < 1 || epochs < 1 || !(learning_rate > 0.0))
    throw std::invalid_argument("encoder training hyperparameters must be positive");
  for (const auto& r : {brightness, contrast, hue})
    if (r.first > r.second) throw std::invalid_argument("augmentation range is reversed");
  if (brightness.first <= 0.0 || contrast.first < 0.0)
    throw std::invalid_argument("brightness/contrast factors must be non-negative");
}

Image color_jitter(const Image& rgb, const ColorJitter& jitter) {
  if (rgb.channels() != 3) throw std::invalid_argument("color_jitter expects an RGB image");
  Image out = rgb;
  auto& px = out.pixels();
  if (jitter.brightness != 1.0) px = (px * jitter.brightness).cwiseMax(0.0).cwiseMin(1.0);
  if (jitter.contrast != 1.0) {
    const double m = (0.299 * px.row(0) + 0.587 * px.row(1) + 0.114 * px.row(2)).mean();
    px = (jitter.contrast * px.array() + (1.0 - jitter.contrast) * m).matrix().cwiseMax(0.0).cwiseMin(1.0);
  }
  if (jitter.hue != 0.0) {
    for (Eigen::Index i = 0; i < px.cols(); ++i) shift_hue(px(0, i), px(1, i), px(2, i), jitter.hue);
    px = px.cwiseMax(0.0).cwiseMin(1.0);
  }
  return out;
}

TrainingSet::TrainingSet(const Generator& generator, FilmModel film, EncoderTrainConfig cfg,
                         uint64_t seed, int input_resolution)
    : generator_(&generator), film_(film), cfg_(std::move(cfg)), seed_(seed),
      input_resolution_(input_resolution) {
  cfg_.validate();
}

ColorJitter TrainingSet::jitter(int index) const {
  std::mt19937_64 rng(mix(seed_ ^ 0xA5A5A5A5ull, static_cast<uint64_t>(index)));
  ColorJitter j;
  j.brightness = uniform(rng, cfg_.brightness);
  j.contrast = uniform(rng, cfg_.contrast);
  j.hue = uniform(rng, cfg_.hue);
  return j;
}

TrainingPair TrainingSet::pair(int index) const {
  if (index < 0 || index >= size()) throw std::out_of_range("training pair index out of range");
  const LatentCode w = generator_->sample_latent(mix(seed_, static_cast<uint64_t>(index)));
  const Image render =
      generator_->synthesize(broadcast(w, generator_->layer_count())).rgb().clamped();
  const Image gray = to_grayscale(color_jitter(render, jitter(index)), film_);
  return {resample(gray, input_resolution_, input_resolution_).clamped(), w};
}

TrainingSet generate_training_set(const Generator& generator, FilmModel film,
                                  const EncoderTrainConfig& cfg, uint64_t seed,
                                  int input_resolution) {
  return TrainingSet(generator, film, cfg, seed, input_resolution);
}

// ---------------------------------------------------------------------------
// Encoder

EncoderArchitecture EncoderArchitecture::resnet18() { return {}; }

EncoderArchitecture EncoderArchitecture::toy() {
  EncoderArchitecture a;
  a.version = "resnet-encoder-v1";
  a.input_resolution = 64;
  a.stem_width = 16;
  a.stage_widths = {16, 32, 32, 64};
  return a;
}

Encoder::Encoder(EncoderArchitecture arch, FilmModel film, Params params)
    : arch_(std::move(arch)), film_(film), params_(std::move(params)) {
  if (arch_.stage_widths.size() != 4) throw FormatError("encoder needs four stages");
  auto need = [&](const std::string& name, ad::Index r, ad::Index c) {
    auto it = params_.find(name);
    if (it == params_.end()) throw FormatError("encoder checkpoint is missing tensor '" + name + "'");
    if (it->second.rows() != r || it->second.cols() != c)
      throw FormatError("encoder tensor '" + name + "' has the wrong shape");
  };
  need("stem.weight", arch_.stem_width, 49);
  need("stem.bias", arch_.stem_width, 1);
  int in = arch_.stem_width;
  for (int s = 0; s < 4; ++s) {
    const int out = arch_.stage_widths[static_cast<size_t>(s)];
    for (int b = 0; b < 2; ++b) {
      const std::string p = block_name(s, b);
      need(p + ".conv1.weight", out, in * 9);
      need(p + ".conv1.bias", out, 1);
      need(p + ".conv2.weight", out, out * 9);
      need(p + ".conv2.bias", out, 1);
      const bool down = (s > 0 && b == 0) || in != out;
      if (down) need(p + ".shortcut.weight", out, in);
      in = out;
    }
  }
  need("fc.weight", in, arch_.latent_width);
  need("fc.bias", 1, arch_.latent_width);
}

Encoder Encoder::init(const EncoderArchitecture& arch, FilmModel film, uint64_t seed) {
  std::mt19937_64 rng(seed);
  Params p;
  p["stem.weight"] = he_normal(rng, arch.stem_width, 49, 49);
  p["stem.bias"] = ad::Mat::Zero(arch.stem_width, 1);
  int in = arch.stem_width;
  for (int s = 0; s < 4; ++s) {
    const int out = arch.stage_widths[static_cast<size_t>(s)];
    for (int b = 0; b < 2; ++b) {
      const std::string n = block_name(s, b);
      p[n + ".conv1.weight"] = he_normal(rng, out, in * 9, in * 9);
      p[n + ".conv1.bias"] = ad::Mat::Zero(out, 1);
      // Residual branches start near zero in place of batch normalization.
      p[n + ".conv2.weight"] = he_normal(rng, out, out * 9, out * 9) * 0.1;
      p[n + ".conv2.bias"] = ad::Mat::Zero(out, 1);
      if ((s > 0 && b == 0) || in != out) p[n + ".shortcut.weight"] = he_normal(rng, out, in, in);
      in = out;
    }
  }
  p["fc.weight"] = he_normal(rng, in, arch.latent_width, in) * 0.5;
  p["fc.bias"] = ad::Mat::Zero(1, arch.latent_width);
  return Encoder(arch, film, std::move(p));
}

Encoder Encoder::load(const std::filesystem::path& path) {
  TensorFile tf = TensorFile::load(path);
  if (tf.meta_value("kind") != "encoder") throw FormatError(path.string() + " is not an encoder checkpoint");
  EncoderArchitecture arch;
  arch.version = tf.meta_value("version");
  if (arch.version != "resnet-encoder-v1")
    throw FormatError("unsupported encoder version '" + arch.version + "'");
  arch.input_resolution = std::stoi(tf.meta_value("input_resolution"));
  arch.stem_width = std::stoi(tf.meta_value("stem_width"));
  arch.stage_widths = split_ints(tf.meta_value("stage_widths"));
  arch.latent_width = std::stoi(tf.meta_value("latent_width"));
  const auto film = parse_film(tf.meta_value("film"));
  if (!film) throw FormatError("encoder checkpoint has unknown film tag");
  return Encoder(arch, *film, std::move(tf.tensors));
}

TensorFile Encoder::checkpoint() const {
  TensorFile tf;
  tf.meta["kind"] = "encoder";
  tf.meta["version"] = arch_.version;
  tf.meta["film"] = std::string(to_string(film_));
  tf.meta["input_resolution"] = std::to_string(arch_.input_resolution);
  tf.meta["stem_width"] = std::to_string(arch_.stem_width);
  tf.meta["stage_widths"] = join(arch_.stage_widths);
  tf.meta["latent_width"] = std::to_string(arch_.latent_width);
  tf.tensors = params_;
  return tf;
}

void Encoder::save(const std::filesystem::path& path) const { checkpoint().save(path); }

Encoder::Leaves Encoder::bind(bool requires_grad) const {
  Leaves leaves;
  for (const auto& [name, m] : params_) leaves.emplace(name, ad::Var(m, requires_grad));
  return leaves;
}

ad::Var Encoder::forward(const Leaves& p, const ad::Var& input) const {
  const int res = arch_.input_resolution;
  if (input.rows() != 1 || input.height() != res || input.width() != res)
    throw std::invalid_argument("encoder expects a 1-channel " + std::to_string(res) + "x" +
                                std::to_string(res) + " input");
  auto at = [&](const std::string& n) -> const ad::Var& { return p.at(n); };
  ad::Var x = (input - 0.5) * 2.0;
  x = ad::relu(ad::conv2d(x, at("stem.weight"), 7, 2, 3) + at("stem.bias"));
  x = ad::max_pool(x, 3, 2, 1);
  for (int s = 0; s < 4; ++s) {
    for (int b = 0; b < 2; ++b) {
      const std::string n = block_name(s, b);
      const int stride = (s > 0 && b == 0) ? 2 : 1;
      ad::Var h = ad::relu(ad::conv2d(x, at(n + ".conv1.weight"), 3, stride, 1) + at(n + ".conv1.bias"));
      h = ad::conv2d(h, at(n + ".conv2.weight"), 3, 1, 1) + at(n + ".conv2.bias");
      const ad::Var shortcut = p.count(n + ".shortcut.weight")
                                   ? ad::conv2d(x, at(n + ".shortcut.weight"), 1, stride, 0)
                                   : x;
      x = ad::relu(h + shortcut);
    }
  }
  return ad::matmul(ad::transpose(ad::row_mean(x)), at("fc.weight")) + at("fc.bias");
}

LatentCode Encoder::predict(const Image& gray) const {
  if (gray.channels() != 1) throw std::invalid_argument("encoder input must be grayscale");
  const int res = arch_.input_resolution;
  const Image in = resample(gray, res, res);
  const ad::Var out = forward(bind(false), to_var(in));
  return LatentCode(out.value().row(0).transpose());
}

// ---------------------------------------------------------------------------
// Training

double latent_l1(const LatentCode& a, const LatentCode& b) {
  return (a.values - b.values).cwiseAbs().mean();
}

Encoder train_encoder(const TrainingSet& pairs, Encoder encoder, const TrainOptions& options) {
  const EncoderTrainConfig& cfg = pairs.config();
  if (pairs.size() < 1) throw std::invalid_argument("empty training set");
  if (pairs.input_resolution() != encoder.architecture().input_resolution)
    throw std::invalid_argument("training set resolution does not match the encoder");

  // Pairs are materialized once when they fit comfortably in memory.
  const double bytes = static_cast<double>(pairs.size()) * pairs.input_resolution() *
                       pairs.input_resolution() * sizeof(double);
  std::vector<TrainingPair> cache;
  if (bytes < 2e9) {
    cache.reserve(static_cast<size_t>(pairs.size()));
    for (int i = 0; i < pairs.size(); ++i) cache.push_back(pairs.pair(i));
  }
  auto get = [&](int i) { return cache.empty() ? pairs.pair(i) : cache[static_cast<size_t>(i)]; };

  std::map<std::string, Adam<ad::Mat>> opt;
  for (const auto& [name, m] : encoder.params())
    opt.emplace(name, Adam<ad::Mat>(AdamOptions{cfg.learning_rate}, m.rows(), m.cols()));

  std::mt19937_64 rng(options.seed);
  std::vector<int> order(static_cast<size_t>(pairs.size()));
  std::iota(order.begin(), order.end(), 0);
  int step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_sum = 0.0;
    int epoch_batches = 0;
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch_size)) {
      if (options.max_steps >= 0 && step >= options.max_steps) break;
      const size_t end = std::min(order.size(), start + static_cast<size_t>(cfg.batch_size));
      const Encoder::Leaves leaves = encoder.bind(true);
      ad::Var loss = ad::scalar(0.0);
      for (size_t i = start; i < end; ++i) {
        const TrainingPair pair = get(order[i]);
        const ad::Var pred = encoder.forward(leaves, to_var(pair.input));
        const ad::Var target = ad::constant(pair.target.values.transpose());
        loss = loss + ad::mean(ad::abs(pred - target));
      }
      loss = loss / static_cast<double>(end - start);
      const double l1 = loss.item();
      if (!std::isfinite(l1))
        throw TrainingDiverged("encoder training diverged at epoch " + std::to_string(epoch) +
                               ", step " + std::to_string(step) + " (loss " + std::to_string(l1) + ")");
      ad::backward(loss);
      for (auto& [name, m] : encoder.params()) opt.at(name).step(m, leaves.at(name).grad());
      epoch_sum += l1;
      ++epoch_batches;
      if (options.on_step) options.on_step({epoch, step, l1});
      ++step;
    }
    if (epoch_batches == 0) break;
    if (options.on_epoch) options.on_epoch(epoch, epoch_sum / epoch_batches);
    if (options.checkpoint_dir) {
      std::filesystem::create_directories(*options.checkpoint_dir);
      encoder.save(*options.checkpoint_dir / ("encoder_" + std::string(to_string(encoder.film())) +
                                              "_epoch" + std::to_string(epoch) + ".rpt"));
    }
  }
  return encoder;
}

Sibling predict_sibling(const Encoder& encoder, const Generator& generator, const Image& input) {
  const LatentCode code = encoder.predict(input);
  return {code, generator.synthesize(broadcast(code, generator.layer_count())).rgb()};
}

}  // namespace rephoto
