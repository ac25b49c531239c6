#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "rephoto/imagecore.hpp"
#include "rephoto/losses.hpp"
#include "support.hpp"

using namespace rephoto;
using rephoto::testing::check_gradient;
using rephoto::testing::uniform;

namespace {

const Backbone& vgg() {
  static const Backbone b = Backbone::toy("toy-vgg", 1);
  return b;
}

const Backbone& face() {
  static const Backbone b = Backbone::toy("toy-face", 2, Backbone::InputConvention::Caffe);
  return b;
}

PerceptualStack stack() { return {&vgg(), {"relu1_2", "relu2_2", "relu3_2"}, &face(), {"relu2_2", "relu3_2"}}; }

const EyeRegions kEyes{{3, 5, 11, 13}, {13, 5, 21, 13}};

FeatureSet single(const std::string& backbone, const ad::Mat& m, int h, int w) {
  return {backbone, {{"x", ad::constant(m, h, w)}}};
}

double huber(double r) { return std::abs(r) <= 1.0 ? 0.5 * r * r : std::abs(r) - 0.5; }

// Sum of squared differences averaged per layer, by explicit loops.
double perceptual_oracle(const FeatureSet& a, const FeatureSet& b) {
  double total = 0.0;
  for (size_t l = 0; l < a.layers.size(); ++l) {
    const ad::Mat& x = a.layers[l].second.value();
    const ad::Mat& y = b.layers[l].second.value();
    double s = 0.0;
    for (ad::Index i = 0; i < x.rows(); ++i)
      for (ad::Index j = 0; j < x.cols(); ++j) s += (x(i, j) - y(i, j)) * (x(i, j) - y(i, j));
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

}  // namespace

TEST_CASE("loss weight defaults") {
  const LossWeights w;
  CHECK(w.vgg == 1.0);
  CHECK(w.face == 0.3);
  CHECK(w.eye == 0.1);
  CHECK(w.ctx == 0.1);
  CHECK(w.color == 1e10);
}

TEST_CASE("eye regions validate bounds and area") {
  CHECK_NOTHROW(kEyes.validate(24, 24));
  CHECK_THROWS_AS(kEyes.validate(20, 24), std::out_of_range);
  CHECK_THROWS_AS((EyeRegions{{3, 5, 3, 13}, {13, 5, 21, 13}}.validate(24, 24)), std::out_of_range);
}

TEST_CASE("perceptual loss") {
  SUBCASE("identical sets give zero") {
    const FeatureSet a = vgg().extract(ad::constant(uniform(3, 64, 1), 8, 8), {"relu1_2", "relu2_2"});
    CHECK(perceptual_loss(a, a).item() == 0.0);
  }
  SUBCASE("constant maps") {
    const FeatureSet a = single("b", ad::Mat::Constant(4, 9, 0.7), 3, 3);
    const FeatureSet b = single("b", ad::Mat::Constant(4, 9, 0.2), 3, 3);
    CHECK(perceptual_loss(a, b).item() == doctest::Approx(0.25).epsilon(1e-15));
  }
  SUBCASE("random pair matches the loop oracle") {
    const FeatureSet a = vgg().extract(ad::constant(uniform(3, 256, 2), 16, 16), {"relu1_2", "relu3_2"});
    const FeatureSet b = vgg().extract(ad::constant(uniform(3, 256, 3), 16, 16), {"relu1_2", "relu3_2"});
    CHECK(perceptual_loss(a, b).item() == doctest::Approx(perceptual_oracle(a, b)).epsilon(1e-12));
  }
  SUBCASE("mismatches are rejected") {
    const FeatureSet a = single("b", ad::Mat::Zero(2, 4), 2, 2);
    CHECK_THROWS_AS(perceptual_loss(a, single("c", ad::Mat::Zero(2, 4), 2, 2)), std::invalid_argument);
    CHECK_THROWS_AS(perceptual_loss(a, single("b", ad::Mat::Zero(2, 9), 3, 3)), std::invalid_argument);
  }
}

TEST_CASE("reconstruction loss") {
  const Image input(uniform(1, 24 * 24, 4), 24, 24);
  const ad::Var degraded = ad::constant(uniform(1, 32 * 32, 5), 32, 32);

  SUBCASE("identical images give zero") {
    const ReconstructionTerms t = reconstruction_loss(input, to_var(input), kEyes, {}, stack(), 16);
    CHECK(t.total.item() == 0.0);
  }
  SUBCASE("weighted sum matches the term-wise composition") {
    const LossWeights w{0.7, 0.3, 0.11, 0.0, 0.0};
    const ReconstructionTerms t = reconstruction_loss(input, degraded, kEyes, w, stack(), 16);
    const ad::Var in16 = resample(to_var(input), 16, 16);
    const ad::Var d16 = resample(degraded, 16, 16);
    const double l_vgg = perceptual_oracle(vgg().extract(d16, stack().vgg_layers), vgg().extract(in16, stack().vgg_layers));
    const double l_face =
        perceptual_oracle(face().extract(d16, stack().face_layers), face().extract(in16, stack().face_layers));
    const ad::Var d24 = resample(degraded, 24, 24);
    double l_eye = 0.0;
    for (const Box& b : {kEyes.left, kEyes.right})
      l_eye += 0.5 * perceptual_oracle(vgg().extract(crop(d24, b.x0, b.y0, b.x1, b.y1), stack().vgg_layers),
                                       vgg().extract(crop(to_var(input), b.x0, b.y0, b.x1, b.y1), stack().vgg_layers));
    CHECK(t.vgg.item() == doctest::Approx(l_vgg).epsilon(1e-9));
    CHECK(t.face.item() == doctest::Approx(l_face).epsilon(1e-9));
    CHECK(t.eye.item() == doctest::Approx(l_eye).epsilon(1e-9));
    CHECK(std::abs(t.total.item() - (0.7 * l_vgg + 0.3 * l_face + 0.11 * l_eye)) < 1e-6);
  }
  SUBCASE("vgg-only weights reduce to the plain perceptual term") {
    const ReconstructionTerms t = reconstruction_loss(input, degraded, kEyes, {1, 0, 0, 0, 0}, stack(), 16);
    const double plain = perceptual_loss(vgg().extract(resample(degraded, 16, 16), stack().vgg_layers),
                                         vgg().extract(resample(to_var(input), 16, 16), stack().vgg_layers))
                             .item();
    CHECK(t.total.item() == doctest::Approx(plain).epsilon(1e-12));
  }
  SUBCASE("position dependent") {
    const Image shuffled(shuffle_columns(input.pixels(), 6), 24, 24);
    CHECK(reconstruction_loss(input, to_var(shuffled), kEyes, {}, stack(), 16).total.item() > 1e-4);
  }
  SUBCASE("out-of-bounds eyes are rejected") {
    const EyeRegions bad{{3, 5, 11, 13}, {13, 5, 30, 13}};
    CHECK_THROWS_AS(reconstruction_loss(input, degraded, bad, {}, stack(), 16), std::out_of_range);
  }
  SUBCASE("the cached objective equals the one-shot function") {
    const ReconstructionLoss loss(input, kEyes, {}, stack(), 16);
    CHECK(loss(degraded).total.item() == reconstruction_loss(input, degraded, kEyes, {}, stack(), 16).total.item());
  }
}

TEST_CASE("channel covariance matches an explicit double loop") {
  const ad::Mat tap = uniform(3, 50, 7, -1, 1);
  const ad::Mat cov = channel_covariance(ad::constant(tap)).value();
  for (int a = 0; a < 3; ++a)
    for (int b = 0; b < 3; ++b) {
      double ma = 0, mb = 0;
      for (int p = 0; p < 50; ++p) ma += tap(a, p), mb += tap(b, p);
      ma /= 50, mb /= 50;
      double s = 0;
      for (int p = 0; p < 50; ++p) s += (tap(a, p) - ma) * (tap(b, p) - mb);
      CHECK(cov(a, b) == doctest::Approx(s / 50).epsilon(1e-12));
    }
}

TEST_CASE("color transfer loss") {
  std::vector<ad::Var> out, ref;
  for (int l = 0; l < 3; ++l) {
    const int n = 4 << l;
    out.push_back(ad::constant(uniform(3, n * n, 10 + l, -2, 2), n, n));
    ref.push_back(ad::constant(uniform(3, n * n, 20 + l, -0.5, 0.5), n, n));
  }
  SUBCASE("identical taps give zero") { CHECK(color_transfer_loss(out, out, {0, 1, 2}).item() == 0.0); }
  SUBCASE("spatial permutation leaves the loss unchanged") {
    std::vector<ad::Var> perm;
    for (size_t l = 0; l < out.size(); ++l)
      perm.push_back(ad::constant(shuffle_columns(out[l].value(), 30 + l), out[l].height(), out[l].width()));
    CHECK(color_transfer_loss(perm, out, {0, 1, 2}).item() < 1e-9);
    CHECK(std::abs(color_transfer_loss(perm, ref, {0, 1, 2}).item() - color_transfer_loss(out, ref, {0, 1, 2}).item()) <
          1e-9);
  }
  SUBCASE("random taps match the brute-force oracle") {
    double expect = 0.0;
    for (int l : {0, 2}) {
      const ad::Mat co = channel_covariance(out[static_cast<size_t>(l)]).value();
      const ad::Mat cr = channel_covariance(ref[static_cast<size_t>(l)]).value();
      for (int i = 0; i < 9; ++i) expect += huber(co.data()[i] - cr.data()[i]);
    }
    CHECK(color_transfer_loss(out, ref, {0, 2}).item() == doctest::Approx(expect).epsilon(1e-12));
    // Wide-range taps push some covariance differences past the Huber knee.
    CHECK((channel_covariance(out[0]).value() - channel_covariance(ref[0]).value()).cwiseAbs().maxCoeff() > 1.0);
  }
  SUBCASE("only active levels contribute") {
    std::vector<ad::Var> mixed = ref;
    mixed[2] = out[2];
    CHECK(color_transfer_loss(mixed, ref, {0, 1}).item() == 0.0);
    CHECK(color_transfer_loss(mixed, ref, {0, 1, 2}).item() > 0.0);
  }
  SUBCASE("misalignment is rejected") {
    CHECK_THROWS_AS(color_transfer_loss({out[0], out[1]}, ref, {0}), std::invalid_argument);
    CHECK_THROWS_AS(color_transfer_loss(out, {ref[1], ref[0], ref[2]}, {0}), std::invalid_argument);
    CHECK_THROWS_AS(color_transfer_loss(out, ref, {3}), std::out_of_range);
  }
}

TEST_CASE("contextual loss matches a hand-rolled affinity table") {
  // Three source and three target features in R^2.
  ad::Mat src(2, 3), tgt(2, 3);
  src << 1.0, 0.2, -0.4, 0.1, 0.9, 0.5;
  tgt << 0.8, -0.3, 0.1, 0.3, 0.6, -0.7;
  double mu[2];
  for (int c = 0; c < 2; ++c) mu[c] = (tgt(c, 0) + tgt(c, 1) + tgt(c, 2)) / 3.0;
  auto unit = [&](const ad::Mat& m, int j, double* out) {
    const double x = m(0, j) - mu[0], y = m(1, j) - mu[1];
    const double n = std::sqrt(x * x + y * y + 1e-10);
    out[0] = x / n;
    out[1] = y / n;
  };
  double sum_max = 0.0;
  for (int i = 0; i < 3; ++i) {
    double xi[2], d[3];
    unit(src, i, xi);
    for (int j = 0; j < 3; ++j) {
      double yj[2];
      unit(tgt, j, yj);
      d[j] = 1.0 - (xi[0] * yj[0] + xi[1] * yj[1]);
    }
    const double dmin = std::min({d[0], d[1], d[2]});
    double w[3], ws = 0.0;
    for (int j = 0; j < 3; ++j) ws += w[j] = std::exp((1.0 - d[j] / (dmin + 1e-5)) / 0.5);
    sum_max += std::max({w[0], w[1], w[2]}) / ws;
  }
  const double expect = -std::log(sum_max / 3.0);
  CHECK(contextual_loss_layer(ad::constant(src), ad::constant(tgt)).item() == doctest::Approx(expect).epsilon(1e-9));
}

TEST_CASE("contextual loss on toy features") {
  const std::vector<std::string> layers{"relu1_2", "relu2_2"};
  const ad::Mat base = uniform(3, 256, 40);
  const FeatureSet target = vgg().extract(ad::constant(base, 16, 16), layers);
  const double self = contextual_loss(target, target).item();

  SUBCASE("self-match is the minimum over random perturbations") {
    for (uint64_t s = 0; s < 5; ++s) {
      const ad::Mat p = base + 0.05 * uniform(3, 256, 50 + s, -1, 1);
      CHECK(contextual_loss(vgg().extract(ad::constant(p, 16, 16), layers), target).item() > self);
    }
  }
  SUBCASE("feature shuffling does not change the value") {
    FeatureSet shuffled = target;
    for (auto& [name, v] : shuffled.layers) v = ad::constant(shuffle_columns(v.value(), 60), v.height(), v.width());
    CHECK(contextual_loss(shuffled, target).item() == doctest::Approx(self).epsilon(1e-12));
  }
  SUBCASE("value grows with the perturbation size") {
    const ad::Mat dir = uniform(3, 256, 70, -1, 1);
    double prev = self;
    for (double eps : {0.02, 0.1, 0.3, 0.8}) {
      const double v = contextual_loss(vgg().extract(ad::constant(base + eps * dir, 16, 16), layers), target).item();
      CHECK(v > prev);
      prev = v;
    }
  }
  SUBCASE("backbone mismatch is rejected") {
    FeatureSet other = target;
    other.backbone = "toy-face";
    CHECK_THROWS_AS(contextual_loss(other, target), std::invalid_argument);
  }
}

TEST_CASE("loss gradients match finite differences") {
  SUBCASE("reconstruction with respect to degraded pixels") {
    const Image input(uniform(1, 24 * 24, 80), 24, 24);
    const ReconstructionLoss loss(input, kEyes, {}, stack(), 16);
    const ad::Mat x0 = uniform(1, 32 * 32, 81);
    auto f = [&](const ad::Mat& x) { return loss(ad::constant(x, 32, 32)).total.item(); };
    const ad::Var x = ad::parameter(x0, 32, 32);
    ad::backward(loss(x).total);
    CHECK(check_gradient(f, x0, x.grad(), 12, 82).max_rel_error < 1e-3);
  }
  SUBCASE("color transfer with respect to taps") {
    const ad::Mat t0 = uniform(3, 64, 83, -2, 2);
    const ad::Var ref = ad::constant(uniform(3, 64, 84, -0.5, 0.5), 8, 8);
    auto f = [&](const ad::Mat& t) { return color_transfer_loss({ad::constant(t, 8, 8)}, {ref}, {0}).item(); };
    const ad::Var t = ad::parameter(t0, 8, 8);
    ad::backward(color_transfer_loss({t}, {ref}, {0}));
    CHECK(check_gradient(f, t0, t.grad(), 20, 85).max_rel_error < 1e-3);
  }
  SUBCASE("contextual with respect to source features") {
    const ad::Mat s0 = uniform(4, 20, 86);
    const ad::Var tgt = ad::constant(uniform(4, 25, 87));
    auto f = [&](const ad::Mat& s) { return contextual_loss_layer(ad::constant(s), tgt).item(); };
    const ad::Var s = ad::parameter(s0);
    ad::backward(contextual_loss_layer(s, tgt));
    CHECK(check_gradient(f, s0, s.grad(), 20, 88).max_rel_error < 1e-3);
  }
}
