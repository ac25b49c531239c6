#include "rephoto/imagecore.hpp"

#include <cmath>
#include <stdexcept>
#include <vector>

namespace rephoto {

std::string_view to_string(FilmModel film) {
  switch (film) {
    case FilmModel::BlueSensitive: return "blue";
    case FilmModel::Orthochromatic: return "ortho";
    case FilmModel::Panchromatic: return "pan";
  }
  return "pan";
}

std::optional<FilmModel> parse_film(std::string_view name) {
  if (name == "blue" || name == "blue-sensitive" || name == "BlueSensitive")
    return FilmModel::BlueSensitive;
  if (name == "ortho" || name == "orthochromatic" || name == "Orthochromatic")
    return FilmModel::Orthochromatic;
  if (name == "pan" || name == "panchromatic" || name == "Panchromatic")
    return FilmModel::Panchromatic;
  return std::nullopt;
}

std::array<double, 3> film_weights(FilmModel film) {
  switch (film) {
    case FilmModel::BlueSensitive: return {0.0, 0.0, 1.0};
    case FilmModel::Orthochromatic: return {0.0, 0.5, 0.5};
    case FilmModel::Panchromatic: return {0.299, 0.587, 0.114};
  }
  throw std::invalid_argument("unknown film model");
}

void CRFParams::validate() const {
  if (!(b > 0.0)) throw std::invalid_argument("CRF gain b must be positive");
  if (!(gamma > 0.0)) throw std::invalid_argument("CRF gamma must be positive");
}

CRFVars CRFVars::from(const CRFParams& p, bool requires_grad) {
  p.validate();
  auto one = [requires_grad](double v) { return ad::Var(ad::Mat::Constant(1, 1, v), requires_grad); };
  return {one(p.a), one(p.b), one(p.gamma)};
}

CRFParams CRFVars::values() const { return {a.item(), b.item(), gamma.item()}; }

// ---------------------------------------------------------------------------
// 1-D operators

int reflect_index(int i, int size) {
  if (size == 1) return 0;
  const int period = 2 * (size - 1);
  i %= period;
  if (i < 0) i += period;
  return i < size ? i : period - i;
}

std::vector<double> gaussian_kernel(double sigma) {
  if (sigma < 0.0) throw std::invalid_argument("blur sigma must be non-negative");
  if (sigma == 0.0) return {1.0};
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(static_cast<size_t>(2 * radius + 1));
  double total = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    const double v = std::exp(-0.5 * (i * i) / (sigma * sigma));
    k[static_cast<size_t>(i + radius)] = v;
    total += v;
  }
  for (double& v : k) v /= total;
  return k;
}

ad::SpMat gaussian_operator(int size, double sigma) {
  const std::vector<double> k = gaussian_kernel(sigma);
  const int radius = static_cast<int>(k.size() / 2);
  std::vector<Eigen::Triplet<double>> entries;
  entries.reserve(static_cast<size_t>(size) * k.size());
  for (int i = 0; i < size; ++i)
    for (int d = -radius; d <= radius; ++d)
      entries.emplace_back(i, reflect_index(i + d, size), k[static_cast<size_t>(d + radius)]);
  ad::SpMat op(size, size);
  op.setFromTriplets(entries.begin(), entries.end());  // duplicates are summed
  return op;
}

ad::SpMat resample_operator(int src, int dst) {
  if (src < 1 || dst < 1) throw std::invalid_argument("resample sizes must be >= 1");
  std::vector<Eigen::Triplet<double>> entries;
  if (src == dst) {
    for (int i = 0; i < src; ++i) entries.emplace_back(i, i, 1.0);
  } else if (src > dst && src % dst == 0) {
    const int f = src / dst;
    for (int i = 0; i < dst; ++i)
      for (int j = 0; j < f; ++j) entries.emplace_back(i, i * f + j, 1.0 / f);
  } else {
    const double scale = static_cast<double>(src) / dst;
    for (int i = 0; i < dst; ++i) {
      const double u = std::clamp((i + 0.5) * scale - 0.5, 0.0, static_cast<double>(src - 1));
      const int i0 = static_cast<int>(std::floor(u));
      const int i1 = std::min(i0 + 1, src - 1);
      const double t = u - i0;
      entries.emplace_back(i, i0, 1.0 - t);
      if (t > 0.0) entries.emplace_back(i, i1, t);
    }
  }
  ad::SpMat op(dst, src);
  op.setFromTriplets(entries.begin(), entries.end());
  return op;
}

ad::SpMat crop_operator(int size, int begin, int end) {
  if (begin < 0 || end > size || end <= begin) throw std::out_of_range("crop range outside image");
  std::vector<Eigen::Triplet<double>> entries;
  for (int i = begin; i < end; ++i) entries.emplace_back(i - begin, i, 1.0);
  ad::SpMat op(end - begin, size);
  op.setFromTriplets(entries.begin(), entries.end());
  return op;
}

// ---------------------------------------------------------------------------
// Differentiable image ops

ad::Var to_grayscale(const ad::Var& img, FilmModel film) {
  if (img.rows() != 3) throw std::invalid_argument("to_grayscale expects an RGB image");
  const auto w = film_weights(film);
  ad::Mat m(1, 3);
  m << w[0], w[1], w[2];
  return ad::matmul(ad::constant(m), img);
}

ad::Var apply_crf(const ad::Var& gray, const CRFVars& crf) {
  if (gray.rows() != 1) throw std::invalid_argument("apply_crf expects a grayscale image");
  crf.values().validate();
  return crf.a + crf.b * ad::pow(gray, crf.gamma);
}

ad::Var gaussian_blur(const ad::Var& img, double sigma) {
  if (sigma < 0.0) throw std::invalid_argument("blur sigma must be non-negative");
  if (sigma == 0.0) return img;
  return ad::separable(img, gaussian_operator(img.height(), sigma),
                       gaussian_operator(img.width(), sigma));
}

ad::Var resample(const ad::Var& img, int width, int height) {
  if (width < 1 || height < 1) throw std::invalid_argument("resample target must be >= 1x1");
  if (width == img.width() && height == img.height()) return img;
  return ad::separable(img, resample_operator(img.height(), height),
                       resample_operator(img.width(), width));
}

ad::Var crop(const ad::Var& img, int x0, int y0, int x1, int y1) {
  return ad::separable(img, crop_operator(img.height(), y0, y1), crop_operator(img.width(), x0, x1));
}

ad::Var replicate_channels(const ad::Var& gray, int channels) {
  if (gray.rows() == channels) return gray;
  if (gray.rows() != 1) throw std::invalid_argument("replicate_channels expects one channel");
  return ad::matmul(ad::constant(ad::Mat::Ones(channels, 1)), gray);
}

ad::Var degrade(const ad::Var& img, FilmModel film, double sigma, const CRFVars& crf) {
  // Generator output may stray slightly outside [0,1]; the power law needs it inside.
  return gaussian_blur(apply_crf(ad::clamp(to_grayscale(img, film), 0.0, 1.0), crf), sigma);
}

// ---------------------------------------------------------------------------
// Value-level wrappers

Image to_grayscale(const Image& img, FilmModel film) { return to_image(to_grayscale(to_var(img), film)); }

Image apply_crf(const Image& gray, const CRFParams& crf) {
  return to_image(apply_crf(to_var(gray), CRFVars::from(crf)));
}

Image gaussian_blur(const Image& img, double sigma) {
  return to_image(gaussian_blur(to_var(img), sigma));
}

Image resample(const Image& img, int width, int height) {
  return to_image(resample(to_var(img), width, height));
}

Image crop(const Image& img, int x0, int y0, int x1, int y1) {
  return to_image(crop(to_var(img), x0, y0, x1, y1));
}

Image degrade(const Image& img, const DegradationConfig& cfg) {
  return to_image(degrade(to_var(img), cfg.film, cfg.sigma, CRFVars::from(cfg.crf)));
}

}  // namespace rephoto
