#ifndef REPHOTO_GENERATOR_HPP_
#define REPHOTO_GENERATOR_HPP_

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "rephoto/autodiff.hpp"
#include "rephoto/image.hpp"
#include "rephoto/tensor_file.hpp"

namespace rephoto {

constexpr int kLatentWidth = 512;

/// A single style vector W.
struct LatentCode {
  Eigen::VectorXd values;

  LatentCode() : values(Eigen::VectorXd::Zero(kLatentWidth)) {}
  explicit LatentCode(Eigen::VectorXd v);
  int width() const { return static_cast<int>(values.size()); }
};

/// Per-layer style vectors (W+), one row per synthesis layer.
class ExtendedLatentCode {
 public:
  ExtendedLatentCode() = default;
  explicit ExtendedLatentCode(ad::Mat layers);

  static ExtendedLatentCode broadcast(const LatentCode& code, int layer_count);

  int layer_count() const { return static_cast<int>(layers_.rows()); }
  int width() const { return static_cast<int>(layers_.cols()); }
  LatentCode layer(int k) const { return LatentCode(layers_.row(k).transpose()); }
  void set_layer(int k, const LatentCode& code) { layers_.row(k) = code.values.transpose(); }
  const ad::Mat& matrix() const { return layers_; }
  ad::Mat& matrix() { return layers_; }

  friend bool operator==(const ExtendedLatentCode& a, const ExtendedLatentCode& b) {
    return a.layers_.rows() == b.layers_.rows() && a.layers_.cols() == b.layers_.cols() &&
           a.layers_ == b.layers_;
  }

 private:
  ad::Mat layers_;
};

inline ExtendedLatentCode broadcast(const LatentCode& code, int layer_count) {
  return ExtendedLatentCode::broadcast(code, layer_count);
}

/// Number of W+ layers for a square output resolution.
int layer_count_for_resolution(int resolution);
/// Synthesis resolution bound to W+ layer k.
int layer_resolution(int k);

struct LayerPartition {
  std::vector<int> optimizable;
  std::vector<int> frozen;
};

/// Layers whose synthesis resolution is at most `cutoff_resolution` are
/// optimizable; the rest stay frozen.
LayerPartition partition(int layer_count, int cutoff_resolution);
inline LayerPartition partition(const ExtendedLatentCode& code, int cutoff_resolution) {
  return partition(code.layer_count(), cutoff_resolution);
}

struct SynthesisOutput {
  ad::Var image;               // 3 x (res*res), values nominally in [0,1]
  std::vector<ad::Var> torgb;  // psi_l per resolution level, before the constant bias
  std::vector<Eigen::Vector3d> torgb_bias;

  Image rgb() const { return to_image(image); }
};

struct GeneratorArchitecture {
  std::string version;
  int resolution = 64;
  int latent_width = kLatentWidth;
  int mapping_depth = 2;
  int mapping_hidden = kLatentWidth;
  bool mapping_pixel_norm = false;
  bool mapping_final_activation = false;
  std::vector<int> channels;  // feature width per resolution level, 4x4 first

  int levels() const { return static_cast<int>(channels.size()); }
  int layer_count() const { return 2 * levels(); }

  static GeneratorArchitecture toy();
  static GeneratorArchitecture stylegan2_1024();
  static GeneratorArchitecture by_version(const std::string& version);
};

/// Style-based synthesis network with skip ToRGB outputs. Immutable after
/// construction; synthesis is safe from concurrent threads.
class Generator {
 public:
  /// Deterministic toy instance (64x64 output, 10 layers) with random weights.
  static Generator toy(uint64_t seed = 7);
  static Generator load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  const GeneratorArchitecture& architecture() const { return arch_; }
  int resolution() const { return arch_.resolution; }
  int layer_count() const { return arch_.layer_count(); }
  int latent_width() const { return arch_.latent_width; }

  /// Value-level synthesis. `latent_noise_scale` adds N(0, scale^2) to every
  /// code entry using `noise_seed`; 0 means the code is used as given.
  SynthesisOutput synthesize(const ExtendedLatentCode& code, double latent_noise_scale = 0.0,
                             uint64_t noise_seed = 0) const;
  /// Differentiable synthesis from a layer_count x latent_width code matrix.
  SynthesisOutput synthesize(const ad::Var& codes) const;

  LatentCode map(const Eigen::VectorXd& z) const;
  LatentCode sample_latent(uint64_t seed) const;
  Eigen::VectorXd sample_z(uint64_t seed) const;

  /// Raw parameter store, keyed by tensor name.
  const TensorFile& weights() const { return weights_; }

 private:
  Generator(GeneratorArchitecture arch, TensorFile weights);
  void validate() const;

  GeneratorArchitecture arch_;
  TensorFile weights_;
};

}  // namespace rephoto

#endif  // REPHOTO_GENERATOR_HPP_
