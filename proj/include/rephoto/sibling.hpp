#ifndef REPHOTO_SIBLING_HPP_
#define REPHOTO_SIBLING_HPP_

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "rephoto/autodiff.hpp"
#include "rephoto/generator.hpp"
#include "rephoto/image.hpp"
#include "rephoto/imagecore.hpp"

namespace rephoto {

struct EncoderTrainConfig {
  int sample_count = 16128;
  int batch_size = 4;
  double learning_rate = 0.0005;
  int epochs = 100;
  std::pair<double, double> brightness{0.8, 1.8};
  std::pair<double, double> contrast{0.8, 1.2};
  std::pair<double, double> hue{-0.03, 0.03};

  /// Defaults for a film type: 100 epochs, 70 for panchromatic.
  static EncoderTrainConfig for_film(FilmModel film);
  void validate() const;
};

struct TrainingPair {
  Image input;  // grayscale at the encoder's input resolution
  LatentCode target;
};

struct ColorJitter {
  double brightness = 1.0;
  double contrast = 1.0;
  double hue = 0.0;
};

/// brightness, then contrast, then hue rotation; each step clamps to [0,1].
/// Identity factors leave the image untouched.
Image color_jitter(const Image& rgb, const ColorJitter& jitter);

/// Deterministic stream of synthetic (degraded render, latent) pairs. Pair i
/// depends only on the seed and i. Latents are drawn from the generator's
/// native prior (mapping of N(0, I), no truncation).
class TrainingSet {
 public:
  TrainingSet(const Generator& generator, FilmModel film, EncoderTrainConfig cfg, uint64_t seed,
              int input_resolution);

  int size() const { return cfg_.sample_count; }
  FilmModel film() const { return film_; }
  const EncoderTrainConfig& config() const { return cfg_; }
  int input_resolution() const { return input_resolution_; }

  TrainingPair pair(int index) const;
  ColorJitter jitter(int index) const;

 private:
  const Generator* generator_;
  FilmModel film_;
  EncoderTrainConfig cfg_;
  uint64_t seed_;
  int input_resolution_;
};

TrainingSet generate_training_set(const Generator& generator, FilmModel film,
                                  const EncoderTrainConfig& cfg, uint64_t seed,
                                  int input_resolution);

struct EncoderArchitecture {
  std::string version = "resnet-encoder-v1";
  int input_resolution = 256;
  int stem_width = 64;
  std::vector<int> stage_widths{64, 128, 256, 512};
  int latent_width = kLatentWidth;

  /// ResNet18 layout: 7x7/2 stem, 3x3/2 max pool, four stages of two basic
  /// blocks.
  static EncoderArchitecture resnet18();
  /// Same topology, 64x64 input and narrow stages.
  static EncoderArchitecture toy();
};

/// Convolutional regressor from a single-channel image to a latent code.
class Encoder {
 public:
  using Params = std::map<std::string, ad::Mat>;
  using Leaves = std::map<std::string, ad::Var>;

  static Encoder init(const EncoderArchitecture& arch, FilmModel film, uint64_t seed);
  static Encoder load(const std::filesystem::path& path);
  TensorFile checkpoint() const;
  void save(const std::filesystem::path& path) const;

  const EncoderArchitecture& architecture() const { return arch_; }
  FilmModel film() const { return film_; }
  Params& params() { return params_; }
  const Params& params() const { return params_; }

  /// Parameter leaves for one differentiable forward pass.
  Leaves bind(bool requires_grad) const;
  /// 1 x latent_width prediction for a 1 x (res*res) input.
  ad::Var forward(const Leaves& leaves, const ad::Var& input) const;

  /// Grayscale input of any size; resampled to the input resolution.
  LatentCode predict(const Image& gray) const;

 private:
  Encoder(EncoderArchitecture arch, FilmModel film, Params params);

  EncoderArchitecture arch_;
  FilmModel film_;
  Params params_;
};

struct TrainingDiverged : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct TrainingRecord {
  int epoch = 0;
  int step = 0;
  double l1 = 0.0;
};

struct TrainOptions {
  uint64_t seed = 0;
  std::function<void(const TrainingRecord&)> on_step;
  std::function<void(int epoch, double mean_l1)> on_epoch;
  std::optional<std::filesystem::path> checkpoint_dir;
  int max_steps = -1;  // stop early after this many optimizer steps
};

/// Mean absolute latent error, optimized with Adam at the configured rate and
/// batch size. Throws TrainingDiverged on a non-finite loss.
Encoder train_encoder(const TrainingSet& pairs, Encoder encoder, const TrainOptions& options);

double latent_l1(const LatentCode& a, const LatentCode& b);

struct Sibling {
  LatentCode code;
  Image image;
};

/// Encodes a grayscale portrait and renders its broadcast code.
Sibling predict_sibling(const Encoder& encoder, const Generator& generator, const Image& input);

}  // namespace rephoto

#endif  // REPHOTO_SIBLING_HPP_
