#ifndef REPHOTO_LOSSES_HPP_
#define REPHOTO_LOSSES_HPP_

#include <string>
#include <vector>

#include "rephoto/autodiff.hpp"
#include "rephoto/features.hpp"
#include "rephoto/image.hpp"

namespace rephoto {

struct LossWeights {
  double vgg = 1.0;
  double face = 0.3;
  double eye = 0.1;
  double ctx = 0.1;
  double color = 1e10;
};

/// Half-open pixel box [x0,x1) x [y0,y1).
struct Box {
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;

  int width() const { return x1 - x0; }
  int height() const { return y1 - y0; }
  bool inside(int w, int h) const { return x0 >= 0 && y0 >= 0 && x1 <= w && y1 <= h; }
  friend bool operator==(const Box&, const Box&) = default;
};

struct EyeRegions {
  Box left, right;

  /// Throws std::out_of_range unless both boxes are non-empty and inside a
  /// width x height image.
  void validate(int width, int height) const;
  friend bool operator==(const EyeRegions&, const EyeRegions&) = default;
};

/// Mean squared difference per layer, averaged uniformly over layers.
ad::Var perceptual_loss(const FeatureSet& a, const FeatureSet& b);

/// Backbones and layer lists used by the reconstruction term.
struct PerceptualStack {
  const Backbone* vgg = nullptr;
  std::vector<std::string> vgg_layers;
  const Backbone* face = nullptr;
  std::vector<std::string> face_layers;
};

struct ReconstructionTerms {
  ad::Var vgg, face, eye, total;
};

/// Reconstruction objective against a fixed input photo. Features of the
/// input are computed once at construction.
///
/// The input is given at its original resolution. Both images are resampled
/// to `loss_resolution` for the vgg and face terms; the degraded image is
/// resampled to the input's resolution for the eye term, which averages the
/// vgg loss over the two eye crops.
class ReconstructionLoss {
 public:
  ReconstructionLoss(const Image& input, const EyeRegions& eyes, const LossWeights& weights,
                     PerceptualStack stack, int loss_resolution);

  ReconstructionTerms operator()(const ad::Var& degraded) const;

 private:
  Image input_;
  EyeRegions eyes_;
  LossWeights weights_;
  PerceptualStack stack_;
  int loss_resolution_;
  FeatureSet target_vgg_, target_face_, target_left_, target_right_;
};

ReconstructionTerms reconstruction_loss(const Image& input, const ad::Var& degraded,
                                        const EyeRegions& eyes, const LossWeights& weights,
                                        const PerceptualStack& stack, int loss_resolution);

/// Mean-centered 3x3 channel covariance over spatial positions (divides by N).
ad::Var channel_covariance(const ad::Var& tap);

constexpr double kHuberDelta = 1.0;

/// Sum over active levels and covariance entries of Huber(cov_out - cov_ref).
ad::Var color_transfer_loss(const std::vector<ad::Var>& out_taps,
                            const std::vector<ad::Var>& ref_taps,
                            const std::vector<int>& active_levels);
/// Same, with precomputed reference covariances (one per level).
ad::Var color_transfer_loss_cov(const std::vector<ad::Var>& out_taps,
                                const std::vector<ad::Mat>& ref_covariances,
                                const std::vector<int>& active_levels);

constexpr double kContextualBandwidth = 0.5;

/// Position-independent feature matching: for every source feature, the best
/// normalized affinity to any target feature; -log of their mean, averaged
/// over layers.
ad::Var contextual_loss(const FeatureSet& source, const FeatureSet& target,
                        double bandwidth = kContextualBandwidth);
ad::Var contextual_loss_layer(const ad::Var& source, const ad::Var& target,
                              double bandwidth = kContextualBandwidth);

}  // namespace rephoto

#endif  // REPHOTO_LOSSES_HPP_
