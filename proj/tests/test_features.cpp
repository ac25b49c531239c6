#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>

#include "rephoto/features.hpp"
#include "rephoto/imagecore.hpp"
#include "support.hpp"

using namespace rephoto;
namespace fs = std::filesystem;

namespace {

const Backbone& vgg() {
  static const Backbone b = Backbone::toy("toy-vgg", 1);
  return b;
}

// Same weights with identity input normalization.
Backbone raw() {
  Backbone::Architecture a = vgg().architecture();
  a.mean = {0, 0, 0};
  a.std = {1, 1, 1};
  a.input_scale = 1.0;
  return Backbone(a, vgg().weights());
}

ad::Var image(int w, int h, int c, uint64_t seed) {
  return ad::constant(testing::uniform(c, static_cast<ad::Index>(w) * h, seed), h, w);
}

}  // namespace

TEST_CASE("layer names and requested order") {
  CHECK(vgg().has_layer("relu1_2"));
  CHECK(vgg().has_layer("conv3_2"));
  CHECK(vgg().has_layer("pool2"));
  CHECK_FALSE(vgg().has_layer("relu4_1"));
  const FeatureSet f = vgg().extract(image(16, 16, 3, 1), {"relu2_2", "conv1_1"});
  CHECK(f.backbone == "toy-vgg");
  CHECK(f.names() == std::vector<std::string>{"relu2_2", "conv1_1"});
  CHECK(f.get("relu2_2").rows() == 16);
  CHECK(f.get("relu2_2").width() == 8);
  CHECK_THROWS(f.get("relu3_1"));
}

TEST_CASE("unknown layers and undersized inputs are rejected") {
  CHECK_THROWS_AS(vgg().extract(image(16, 16, 3, 2), {"relu9_9"}), std::invalid_argument);
  CHECK(vgg().min_input_size({"relu1_2"}) == 1);
  CHECK(vgg().min_input_size({"relu2_1"}) == 2);
  CHECK(vgg().min_input_size({"relu3_2", "relu1_1"}) == 4);
  CHECK_THROWS_AS(vgg().extract(image(3, 3, 3, 3), {"relu3_2"}), std::invalid_argument);
}

TEST_CASE("identical images give identical features") {
  const FeatureSet a = vgg().extract(image(12, 12, 3, 4), {"relu1_2", "relu3_2"});
  const FeatureSet b = vgg().extract(image(12, 12, 3, 4), {"relu1_2", "relu3_2"});
  for (size_t i = 0; i < a.layers.size(); ++i) CHECK(a.layers[i].second.value() == b.layers[i].second.value());
}

TEST_CASE("zero image gives bias-only activations") {
  const Backbone b = raw();
  const FeatureSet f = b.extract(ad::constant(ad::Mat::Zero(3, 64), 8, 8), {"conv1_1", "relu1_1"});
  const ad::Mat& bias = b.weights().tensor("conv1_1.bias");
  for (ad::Index c = 0; c < bias.rows(); ++c) {
    CHECK((f.get("conv1_1").value().row(c).array() - bias(c, 0)).abs().maxCoeff() == 0.0);
    CHECK((f.get("relu1_1").value().row(c).array() - std::max(bias(c, 0), 0.0)).abs().maxCoeff() == 0.0);
  }
}

TEST_CASE("gray input is replicated to three channels") {
  const ad::Var gray = image(10, 10, 1, 5);
  const FeatureSet a = vgg().extract(gray, {"relu2_1"});
  const FeatureSet b = vgg().extract(replicate_channels(gray, 3), {"relu2_1"});
  CHECK(a.get("relu2_1").value() == b.get("relu2_1").value());
}

TEST_CASE("input normalization lives in the backbone") {
  const Backbone caffe = Backbone::toy("toy-face", 2, Backbone::InputConvention::Caffe);
  CHECK(caffe.architecture().input_scale == 255.0);
  CHECK(caffe.architecture().mean[0] == doctest::Approx(129.186));
  CHECK(vgg().architecture().std[0] == doctest::Approx(0.229));
}

TEST_CASE("features shift with the input at stride granularity") {
  const int n = 32;
  const ad::Mat base = testing::uniform(3, n * n, 6);
  auto shifted = [&](int s) {
    ad::Mat m = ad::Mat::Constant(3, n * n, 0.5);
    for (int y = 0; y < n; ++y)
      for (int x = s; x < n; ++x) m.col(y * n + x) = base.col(y * n + x - s);
    return m;
  };
  SUBCASE("stride 1 before the first pool") {
    const ad::Mat f0 = vgg().extract(ad::constant(base, n, n), {"relu1_2"}).get("relu1_2").value();
    const ad::Mat f1 = vgg().extract(ad::constant(shifted(1), n, n), {"relu1_2"}).get("relu1_2").value();
    for (int y = 4; y < n - 4; ++y)
      for (int x = 4; x < n - 4; ++x)
        CHECK((f1.col(y * n + x) - f0.col(y * n + x - 1)).cwiseAbs().maxCoeff() < 1e-12);
  }
  SUBCASE("stride 2 after the first pool") {
    const int m = n / 2;
    const ad::Mat f0 = vgg().extract(ad::constant(base, n, n), {"relu2_2"}).get("relu2_2").value();
    const ad::Mat f1 = vgg().extract(ad::constant(shifted(2), n, n), {"relu2_2"}).get("relu2_2").value();
    for (int y = 4; y < m - 4; ++y)
      for (int x = 4; x < m - 4; ++x)
        CHECK((f1.col(y * m + x) - f0.col(y * m + x - 1)).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("feature-norm gradient matches finite differences") {
  const ad::Mat x0 = testing::uniform(3, 16 * 16, 7);
  auto f = [&](const ad::Mat& x) {
    const FeatureSet fs = vgg().extract(ad::constant(x, 16, 16), {"relu1_2", "relu3_2"});
    return (ad::sum(ad::square(fs.get("relu1_2"))) + ad::sum(ad::square(fs.get("relu3_2")))).item();
  };
  const ad::Var x = ad::parameter(x0, 16, 16);
  const FeatureSet fs = vgg().extract(x, {"relu1_2", "relu3_2"});
  ad::backward(ad::sum(ad::square(fs.get("relu1_2"))) + ad::sum(ad::square(fs.get("relu3_2"))));
  CHECK(testing::check_gradient(f, x0, x.grad(), 10, 8).max_rel_error < 1e-3);
}

TEST_CASE("weight file round trip keeps normalization") {
  const fs::path path = fs::temp_directory_path() / "rephoto_test_backbone.rpt";
  const Backbone caffe = Backbone::toy("toy-face", 2, Backbone::InputConvention::Caffe);
  caffe.save(path);
  const Backbone back = Backbone::load(path);
  CHECK(back.id() == "toy-face");
  CHECK(back.architecture().input_scale == 255.0);
  CHECK(back.architecture().mean == caffe.architecture().mean);
  CHECK(back.checkpoint().sha256() == caffe.checkpoint().sha256());
  const ad::Var img = image(8, 8, 3, 9);
  CHECK(back.extract(img, {"relu2_2"}).get("relu2_2").value() == caffe.extract(img, {"relu2_2"}).get("relu2_2").value());
}

TEST_CASE("real architectures declare the published layer names") {
  const Backbone::Architecture v16 = Backbone::vgg16_architecture("vgg16");
  const Backbone::Architecture v19 = Backbone::vgg19_architecture("vgg19");
  CHECK(v16.convs_per_block == std::vector<int>{2, 2, 3, 3, 3});
  CHECK(v19.convs_per_block == std::vector<int>{2, 2, 4, 4, 4});
}

TEST_CASE("frozen toy features") {
  const FeatureSet f = vgg().extract(image(16, 16, 3, 10), {"relu2_2"});
  CHECK(f.get("relu2_2").value().mean() == doctest::Approx(2.1936387509084834).epsilon(1e-9));
  CHECK(f.get("relu2_2").value().maxCoeff() == doctest::Approx(11.55031373241702).epsilon(1e-9));
}
