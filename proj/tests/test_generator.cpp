#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <future>
#include <random>

#include "rephoto/generator.hpp"
#include "rephoto/imagecore.hpp"
#include "support.hpp"

using namespace rephoto;
namespace fs = std::filesystem;

namespace {

const Generator& toy() {
  static const Generator g = Generator::toy(7);
  return g;
}

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "rephoto_test_generator";
  fs::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST_CASE("layer counts and resolutions") {
  CHECK(layer_count_for_resolution(1024) == 18);
  CHECK(layer_count_for_resolution(64) == 10);
  CHECK(layer_resolution(0) == 4);
  CHECK(layer_resolution(1) == 4);
  CHECK(layer_resolution(7) == 32);
  CHECK(layer_resolution(17) == 1024);
  CHECK(toy().layer_count() == 10);
  CHECK(toy().resolution() == 64);
  CHECK(GeneratorArchitecture::stylegan2_1024().layer_count() == 18);
}

TEST_CASE("partition of the 18-layer map") {
  CHECK(partition(18, 32).optimizable.size() == 8);
  CHECK(partition(18, 64).optimizable.size() == 10);
  CHECK(partition(18, 1024).optimizable.size() == 18);
  CHECK(partition(18, 1024).frozen.empty());
  const LayerPartition p = partition(18, 64);
  CHECK(p.optimizable.back() == 9);
  CHECK(p.frozen.front() == 10);
}

TEST_CASE("partition agrees with the layer-resolution map at every cutoff") {
  for (int cutoff = 4; cutoff <= 1024; cutoff *= 2) {
    const LayerPartition p = partition(18, cutoff);
    CHECK(p.optimizable.size() + p.frozen.size() == 18);
    for (int k : p.optimizable) CHECK(layer_resolution(k) <= cutoff);
    for (int k : p.frozen) CHECK(layer_resolution(k) > cutoff);
  }
}

TEST_CASE("broadcast and layer access") {
  const LatentCode w = toy().sample_latent(3);
  const ExtendedLatentCode wp = broadcast(w, 10);
  CHECK(wp.layer_count() == 10);
  for (int k = 0; k < 10; ++k) CHECK(wp.layer(k).values == w.values);
  CHECK(toy().sample_latent(3).values == w.values);
  CHECK(toy().sample_latent(4).values != w.values);
}

TEST_CASE("synthesis is deterministic and shaped") {
  const ExtendedLatentCode code = broadcast(toy().sample_latent(1), 10);
  const SynthesisOutput a = toy().synthesize(code);
  const SynthesisOutput b = toy().synthesize(code);
  CHECK(a.image.value() == b.image.value());
  CHECK(a.image.rows() == 3);
  CHECK(a.image.width() == 64);
  REQUIRE(a.torgb.size() == 5);
  for (size_t l = 0; l < 5; ++l) CHECK(a.torgb[l].width() == (4 << l));
  CHECK_THROWS_AS(toy().synthesize(broadcast(toy().sample_latent(1), 9)), std::invalid_argument);
}

TEST_CASE("latent noise is seeded") {
  const ExtendedLatentCode code = broadcast(toy().sample_latent(1), 10);
  const ad::Mat a = toy().synthesize(code, 0.1, 5).image.value();
  CHECK(a == toy().synthesize(code, 0.1, 5).image.value());
  CHECK(a != toy().synthesize(code, 0.1, 6).image.value());
  CHECK(a != toy().synthesize(code).image.value());
}

TEST_CASE("image is the bias-corrected sum of upsampled taps") {
  const SynthesisOutput out = toy().synthesize(broadcast(toy().sample_latent(2), 10));
  ad::Mat acc;
  int res = 4;
  for (size_t l = 0; l < out.torgb.size(); ++l, res *= 2) {
    ad::Mat tap = out.torgb[l].value();
    tap.colwise() += out.torgb_bias[l];
    acc = l == 0 ? tap : (resample(Image(acc, res / 2, res / 2), res, res).pixels() + tap).eval();
  }
  CHECK((acc * 0.5 + ad::Mat::Constant(3, acc.cols(), 0.5) - out.image.value()).cwiseAbs().maxCoeff() < 1e-5);
}

TEST_CASE("perturbing a fine layer changes the image") {
  ExtendedLatentCode code = broadcast(toy().sample_latent(5), 10);
  const ad::Mat before = toy().synthesize(code).image.value();
  code.matrix().row(9).array() += 0.5;
  CHECK((toy().synthesize(code).image.value() - before).cwiseAbs().maxCoeff() > 1e-3);
}

TEST_CASE("gradients reach every layer") {
  const ad::Var codes = ad::parameter(broadcast(toy().sample_latent(6), 10).matrix());
  const SynthesisOutput out = toy().synthesize(codes);
  ad::backward(ad::sum(out.image * ad::constant(testing::uniform(3, 64 * 64, 7, -1, 1))));
  for (int k = 0; k < 10; ++k) CHECK(codes.grad().row(k).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("synthesis gradient matches finite differences") {
  const ad::Mat x0 = broadcast(toy().sample_latent(8), 10).matrix();
  const ad::Mat w = testing::uniform(3, 64 * 64, 9, -1, 1);
  auto f = [&](const ad::Mat& x) {
    return ad::sum(toy().synthesize(ad::constant(x)).image * ad::constant(w)).item();
  };
  const ad::Var codes = ad::parameter(x0);
  ad::backward(ad::sum(toy().synthesize(codes).image * ad::constant(w)));
  CHECK(testing::check_gradient(f, x0, codes.grad(), 10, 10).max_rel_error < 1e-4);
}

TEST_CASE("sample mean matches the mapping applied to independent normal draws") {
  constexpr int n = 10000;
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(512), sq = Eigen::VectorXd::Zero(512);
  for (int i = 0; i < n; ++i) {
    const Eigen::VectorXd w = toy().sample_latent(static_cast<uint64_t>(i) + 1000).values;
    sum += w;
    sq += w.cwiseAbs2();
  }
  const Eigen::VectorXd mean = sum / n;
  const Eigen::VectorXd var = sq / n - mean.cwiseAbs2();

  // Independent oracle: two leaky-ReLU-separated affine layers from the raw
  // weights, batched, on a different random stream.
  std::mt19937_64 rng(424242);
  std::normal_distribution<double> normal;
  Eigen::MatrixXd z(512, n);
  for (Eigen::Index i = 0; i < z.size(); ++i) z.data()[i] = normal(rng);
  const TensorFile& wt = toy().weights();
  Eigen::MatrixXd h = (wt.tensor("mapping.0.weight") * z).colwise() + Eigen::VectorXd(wt.tensor("mapping.0.bias").col(0));
  h = h.unaryExpr([](double v) { return v > 0 ? v : 0.2 * v; });
  h = (wt.tensor("mapping.1.weight") * h).colwise() + Eigen::VectorXd(wt.tensor("mapping.1.bias").col(0));
  const Eigen::VectorXd oracle = h.rowwise().mean();

  // Difference of two independent means: sd = sqrt(2 var / n).
  const Eigen::VectorXd z_score =
      (mean - oracle).cwiseAbs().cwiseQuotient((2.0 * var / n).cwiseSqrt().cwiseMax(1e-12));
  CHECK(z_score.maxCoeff() < 5.0);
}

TEST_CASE("checkpoint round trip reproduces synthesis") {
  toy().save(scratch("toy.rpt"));
  const Generator loaded = Generator::load(scratch("toy.rpt"));
  const ExtendedLatentCode code = broadcast(toy().sample_latent(11), 10);
  CHECK(loaded.synthesize(code).image.value() == toy().synthesize(code).image.value());
}

TEST_CASE("damaged checkpoints are structured errors") {
  toy().save(scratch("toy_full.rpt"));
  SUBCASE("truncated") {
    std::ifstream in(scratch("toy_full.rpt"), std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), {});
    std::ofstream(scratch("toy_trunc.rpt"), std::ios::binary).write(bytes.data(), 1000);
    CHECK_THROWS_AS(Generator::load(scratch("toy_trunc.rpt")), FormatError);
  }
  SUBCASE("unknown architecture version") {
    TensorFile tf = TensorFile::load(scratch("toy_full.rpt"));
    tf.meta["architecture"] = "toy-64-v9";
    tf.save(scratch("toy_version.rpt"));
    CHECK_THROWS_AS(Generator::load(scratch("toy_version.rpt")), FormatError);
  }
  SUBCASE("mis-shaped tensor is named") {
    TensorFile tf = TensorFile::load(scratch("toy_full.rpt"));
    tf.tensors["level3.conv0.weight"] = ad::Mat::Zero(2, 2);
    tf.save(scratch("toy_shape.rpt"));
    try {
      Generator::load(scratch("toy_shape.rpt"));
      FAIL("expected a FormatError");
    } catch (const FormatError& e) {
      CHECK(std::string(e.what()).find("level3.conv0.weight") != std::string::npos);
    }
  }
}

TEST_CASE("concurrent synthesis matches serial synthesis") {
  const ExtendedLatentCode a = broadcast(toy().sample_latent(21), 10);
  const ExtendedLatentCode b = broadcast(toy().sample_latent(22), 10);
  auto fa = std::async(std::launch::async, [&] { return toy().synthesize(a).image.value(); });
  auto fb = std::async(std::launch::async, [&] { return toy().synthesize(b).image.value(); });
  CHECK(fa.get() == toy().synthesize(a).image.value());
  CHECK(fb.get() == toy().synthesize(b).image.value());
}

TEST_CASE("frozen toy values") {
  // Regression anchors for the seeded toy generator; they change only when
  // the toy construction changes.
  const SynthesisOutput out = toy().synthesize(broadcast(toy().sample_latent(101), 10));
  const Eigen::Vector3d mean = out.image.value().rowwise().mean();
  CHECK(mean(0) == doctest::Approx(0.65184235366278664).epsilon(1e-9));
  CHECK(mean(1) == doctest::Approx(0.51441374805563278).epsilon(1e-9));
  CHECK(mean(2) == doctest::Approx(0.52391133304641979).epsilon(1e-9));
  CHECK(out.image.value()(0, 2080) == doctest::Approx(0.62320519229367488).epsilon(1e-9));
  CHECK(toy().sample_latent(101).values(0) == doctest::Approx(-0.66505886113919632).epsilon(1e-9));
}
