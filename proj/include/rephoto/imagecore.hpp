#ifndef REPHOTO_IMAGECORE_HPP_
#define REPHOTO_IMAGECORE_HPP_

#include <array>
#include <optional>
#include <string>
#include <string_view>

#include "rephoto/autodiff.hpp"
#include "rephoto/image.hpp"

namespace rephoto {

enum class FilmModel { BlueSensitive, Orthochromatic, Panchromatic };

std::string_view to_string(FilmModel film);
// Accepts "blue", "ortho", "pan" and the full variant names.
std::optional<FilmModel> parse_film(std::string_view name);

/// Channel weights (R, G, B) of the film's grayscale response.
std::array<double, 3> film_weights(FilmModel film);

/// Parametric camera response a + b * v^gamma.
struct CRFParams {
  double a = 0.0;
  double b = 1.0;
  double gamma = 1.0;

  void validate() const;
};

/// Differentiable CRF parameters, each a 1x1 value.
struct CRFVars {
  ad::Var a, b, gamma;

  static CRFVars from(const CRFParams& p, bool requires_grad = false);
  CRFParams values() const;
};

struct DegradationConfig {
  FilmModel film = FilmModel::Panchromatic;
  double sigma = 0.0;
  CRFParams crf;
  int target_resolution = 256;  // comparison resolution of the reconstruction loss
};

// Value-level operations. Each delegates to the differentiable overload below.
Image to_grayscale(const Image& img, FilmModel film);
Image apply_crf(const Image& gray, const CRFParams& crf);
Image gaussian_blur(const Image& img, double sigma);
Image resample(const Image& img, int width, int height);
Image crop(const Image& img, int x0, int y0, int x1, int y1);
Image degrade(const Image& img, const DegradationConfig& cfg);

ad::Var to_grayscale(const ad::Var& img, FilmModel film);
ad::Var apply_crf(const ad::Var& gray, const CRFVars& crf);
ad::Var gaussian_blur(const ad::Var& img, double sigma);
ad::Var resample(const ad::Var& img, int width, int height);
// Half-open box [x0,x1) x [y0,y1).
ad::Var crop(const ad::Var& img, int x0, int y0, int x1, int y1);
ad::Var replicate_channels(const ad::Var& gray, int channels);
ad::Var degrade(const ad::Var& img, FilmModel film, double sigma, const CRFVars& crf);

// 1-D operators used by the separable image ops.
ad::SpMat gaussian_operator(int size, double sigma);
ad::SpMat resample_operator(int src, int dst);
ad::SpMat crop_operator(int size, int begin, int end);
/// Normalized sampled Gaussian of radius ceil(3 sigma).
std::vector<double> gaussian_kernel(double sigma);
/// Reflect-101 index into [0, size).
int reflect_index(int i, int size);

}  // namespace rephoto

#endif  // REPHOTO_IMAGECORE_HPP_
