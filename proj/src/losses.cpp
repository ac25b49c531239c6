#include "rephoto/losses.hpp"

#include <stdexcept>

#include "rephoto/imagecore.hpp"

namespace rephoto {
namespace {

constexpr double kMinDistanceEps = 1e-5;
constexpr double kNormEps = 1e-10;

void require_aligned(const FeatureSet& a, const FeatureSet& b, const char* what) {
  if (a.backbone != b.backbone)
    throw std::invalid_argument(std::string(what) + ": backbone mismatch ('" + a.backbone +
                                "' vs '" + b.backbone + "')");
  if (a.names() != b.names()) throw std::invalid_argument(std::string(what) + ": layer mismatch");
  if (a.layers.empty()) throw std::invalid_argument(std::string(what) + ": no layers");
}

FeatureSet crop_features(const PerceptualStack& stack, const ad::Var& img, const Box& b) {
  return stack.vgg->extract(crop(img, b.x0, b.y0, b.x1, b.y1), stack.vgg_layers);
}

}  // namespace

void EyeRegions::validate(int width, int height) const {
  for (const Box* b : {&left, &right}) {
    if (b->width() <= 0 || b->height() <= 0) throw std::out_of_range("eye box has zero area");
    if (!b->inside(width, height))
      throw std::out_of_range("eye box [" + std::to_string(b->x0) + "," + std::to_string(b->y0) +
                              "," + std::to_string(b->x1) + "," + std::to_string(b->y1) +
                              ") outside " + std::to_string(width) + "x" +
                              std::to_string(height) + " image");
  }
}

ad::Var perceptual_loss(const FeatureSet& a, const FeatureSet& b) {
  require_aligned(a, b, "perceptual_loss");
  ad::Var total = ad::scalar(0.0);
  for (size_t i = 0; i < a.layers.size(); ++i) {
    const ad::Var& x = a.layers[i].second;
    const ad::Var& y = b.layers[i].second;
    if (x.rows() != y.rows() || x.cols() != y.cols())
      throw std::invalid_argument("perceptual_loss: shape mismatch at " + a.layers[i].first);
    total = total + ad::mean(ad::square(x - y));
  }
  return total / static_cast<double>(a.layers.size());
}

ReconstructionLoss::ReconstructionLoss(const Image& input, const EyeRegions& eyes,
                                       const LossWeights& weights, PerceptualStack stack,
                                       int loss_resolution)
    : input_(input), eyes_(eyes), weights_(weights), stack_(std::move(stack)),
      loss_resolution_(loss_resolution) {
  if (!stack_.vgg || !stack_.face) throw std::invalid_argument("reconstruction loss needs backbones");
  eyes_.validate(input_.width(), input_.height());
  const ad::Var in = to_var(input_);
  const ad::Var f_in = resample(in, loss_resolution_, loss_resolution_);
  target_vgg_ = stack_.vgg->extract(f_in, stack_.vgg_layers);
  target_face_ = stack_.face->extract(f_in, stack_.face_layers);
  target_left_ = crop_features(stack_, in, eyes_.left);
  target_right_ = crop_features(stack_, in, eyes_.right);
}

ReconstructionTerms ReconstructionLoss::operator()(const ad::Var& degraded) const {
  ReconstructionTerms t;
  const ad::Var f_deg = resample(degraded, loss_resolution_, loss_resolution_);
  t.vgg = perceptual_loss(stack_.vgg->extract(f_deg, stack_.vgg_layers), target_vgg_);
  t.face = perceptual_loss(stack_.face->extract(f_deg, stack_.face_layers), target_face_);
  const ad::Var at_input = resample(degraded, input_.width(), input_.height());
  t.eye = (perceptual_loss(crop_features(stack_, at_input, eyes_.left), target_left_) +
           perceptual_loss(crop_features(stack_, at_input, eyes_.right), target_right_)) *
          0.5;
  t.total = t.vgg * weights_.vgg + t.face * weights_.face + t.eye * weights_.eye;
  return t;
}

ReconstructionTerms reconstruction_loss(const Image& input, const ad::Var& degraded,
                                        const EyeRegions& eyes, const LossWeights& weights,
                                        const PerceptualStack& stack, int loss_resolution) {
  return ReconstructionLoss(input, eyes, weights, stack, loss_resolution)(degraded);
}

ad::Var channel_covariance(const ad::Var& tap) {
  const ad::Var centered = tap - ad::row_mean(tap);
  return ad::matmul(centered, ad::transpose(centered)) / static_cast<double>(tap.cols());
}

ad::Var color_transfer_loss(const std::vector<ad::Var>& out_taps,
                            const std::vector<ad::Var>& ref_taps,
                            const std::vector<int>& active_levels) {
  if (out_taps.size() != ref_taps.size())
    throw std::invalid_argument("color_transfer_loss: tap lists differ in length");
  std::vector<ad::Mat> covs;
  for (size_t i = 0; i < ref_taps.size(); ++i) {
    if (out_taps[i].rows() != ref_taps[i].rows() || out_taps[i].cols() != ref_taps[i].cols())
      throw std::invalid_argument("color_transfer_loss: taps misaligned at level " + std::to_string(i));
    covs.push_back(channel_covariance(ad::detach(ref_taps[i])).value());
  }
  return color_transfer_loss_cov(out_taps, covs, active_levels);
}

ad::Var color_transfer_loss_cov(const std::vector<ad::Var>& out_taps,
                                const std::vector<ad::Mat>& ref_covariances,
                                const std::vector<int>& active_levels) {
  if (out_taps.size() != ref_covariances.size())
    throw std::invalid_argument("color_transfer_loss: tap lists differ in length");
  ad::Var total = ad::scalar(0.0);
  for (int level : active_levels) {
    if (level < 0 || level >= static_cast<int>(out_taps.size()))
      throw std::out_of_range("color_transfer_loss: inactive level " + std::to_string(level));
    const ad::Var cov = channel_covariance(out_taps[static_cast<size_t>(level)]);
    total = total + ad::sum(ad::huber(cov - ad::constant(ref_covariances[static_cast<size_t>(level)]),
                                      kHuberDelta));
  }
  return total;
}

ad::Var contextual_loss_layer(const ad::Var& source, const ad::Var& target, double bandwidth) {
  if (source.rows() != target.rows())
    throw std::invalid_argument("contextual_loss: channel count mismatch");
  const ad::Var mu = ad::row_mean(target);
  auto normalize = [](const ad::Var& f) {
    return f / ad::sqrt(ad::col_sum(ad::square(f)) + kNormEps);
  };
  const ad::Var xs = normalize(source - mu);
  const ad::Var ys = normalize(target - mu);
  const ad::Var dist = 1.0 - ad::matmul(ad::transpose(xs), ys);  // sources x targets
  const ad::Var rel = dist / (ad::row_min(dist) + kMinDistanceEps);
  const ad::Var w = ad::exp((1.0 - rel) / bandwidth);
  const ad::Var cx = w / ad::row_sum(w);
  return -ad::log(ad::mean(ad::row_max(cx)));
}

ad::Var contextual_loss(const FeatureSet& source, const FeatureSet& target, double bandwidth) {
  require_aligned(source, target, "contextual_loss");
  ad::Var total = ad::scalar(0.0);
  for (size_t i = 0; i < source.layers.size(); ++i)
    total = total + contextual_loss_layer(source.layers[i].second, target.layers[i].second, bandwidth);
  return total / static_cast<double>(source.layers.size());
}

}  // namespace rephoto
