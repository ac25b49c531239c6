#ifndef REPHOTO_FEATURES_HPP_
#define REPHOTO_FEATURES_HPP_

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "rephoto/autodiff.hpp"
#include "rephoto/tensor_file.hpp"

namespace rephoto {

/// Named activations (channels x pixels, spatial layout kept), in the order
/// they were requested.
struct FeatureSet {
  std::string backbone;
  std::vector<std::pair<std::string, ad::Var>> layers;

  const ad::Var& get(const std::string& name) const;
  std::vector<std::string> names() const;
};

/// VGG-style convolutional backbone: blocks of 3x3 conv + ReLU separated by
/// 2x2 max pooling. Layers are named convB_I, reluB_I and poolB.
class Backbone {
 public:
  struct Architecture {
    std::string id;
    std::vector<int> convs_per_block;
    std::vector<int> widths;
    // Input normalization: (x * scale - mean) / std per RGB channel.
    double input_scale = 1.0;
    std::array<double, 3> mean{0.0, 0.0, 0.0};
    std::array<double, 3> std{1.0, 1.0, 1.0};
    bool bgr = false;
  };

  static Architecture vgg16_architecture(std::string id);
  static Architecture vgg19_architecture(std::string id);

  // ImageNet: [0,1] input normalized by channel mean/std. Caffe: 0-255
  // input minus the face-dataset channel means, as face recognition nets
  // are usually distributed.
  enum class InputConvention { ImageNet, Caffe };

  /// Small backbone with fixed random convolutions (blocks of 2 convs,
  /// widths 8/16/16).
  static Backbone toy(std::string id, uint64_t seed,
                      InputConvention input = InputConvention::ImageNet);
  static Backbone load(const std::filesystem::path& path);
  /// Weights plus architecture metadata, exactly as save() writes them.
  TensorFile checkpoint() const;
  void save(const std::filesystem::path& path) const;

  Backbone(Architecture arch, TensorFile weights);

  const std::string& id() const { return arch_.id; }
  const Architecture& architecture() const { return arch_; }
  const TensorFile& weights() const { return weights_; }
  const std::vector<std::string>& layer_names() const { return names_; }
  bool has_layer(const std::string& name) const;

  /// Smallest square input for which all `layers` are defined.
  int min_input_size(const std::vector<std::string>& layers) const;

  /// Gray inputs are replicated to three channels first.
  FeatureSet extract(const ad::Var& img, const std::vector<std::string>& layers) const;

 private:
  Architecture arch_;
  TensorFile weights_;
  std::vector<std::string> names_;
};

}  // namespace rephoto

#endif  // REPHOTO_FEATURES_HPP_
