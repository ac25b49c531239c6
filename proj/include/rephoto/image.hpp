#ifndef REPHOTO_IMAGE_HPP_
#define REPHOTO_IMAGE_HPP_

#include <filesystem>
#include <stdexcept>
#include <string>

#include <Eigen/Core>

#include "rephoto/autodiff.hpp"

namespace rephoto {

/// Planar image: one row per channel, pixels in raster order along the
/// columns. Values are nominally in [0,1].
template <typename Scalar>
class BasicImage {
 public:
  using Storage = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

  BasicImage() = default;
  BasicImage(int width, int height, int channels, Scalar fill = Scalar(0))
      : width_(width), height_(height),
        pixels_(Storage::Constant(channels, static_cast<Eigen::Index>(width) * height, fill)) {
    validate();
  }
  BasicImage(Storage pixels, int width, int height)
      : width_(width), height_(height), pixels_(std::move(pixels)) {
    validate();
  }

  int width() const { return width_; }
  int height() const { return height_; }
  int channels() const { return static_cast<int>(pixels_.rows()); }
  bool empty() const { return pixels_.size() == 0; }

  Scalar& at(int c, int y, int x) { return pixels_(c, static_cast<Eigen::Index>(y) * width_ + x); }
  Scalar at(int c, int y, int x) const {
    return pixels_(c, static_cast<Eigen::Index>(y) * width_ + x);
  }

  const Storage& pixels() const { return pixels_; }
  Storage& pixels() { return pixels_; }

  BasicImage clamped() const {
    return BasicImage(pixels_.cwiseMax(Scalar(0)).cwiseMin(Scalar(1)), width_, height_);
  }

  template <typename Other>
  BasicImage<Other> cast() const {
    return BasicImage<Other>(pixels_.template cast<Other>(), width_, height_);
  }

  friend bool operator==(const BasicImage& a, const BasicImage& b) {
    return a.width_ == b.width_ && a.height_ == b.height_ && a.pixels_ == b.pixels_;
  }

 private:
  void validate() const {
    if (width_ < 1 || height_ < 1) throw std::invalid_argument("image dimensions must be >= 1");
    if (pixels_.rows() != 1 && pixels_.rows() != 3)
      throw std::invalid_argument("image must have 1 or 3 channels");
    if (pixels_.cols() != static_cast<Eigen::Index>(width_) * height_)
      throw std::invalid_argument("pixel count does not match image dimensions");
  }

  int width_ = 0;
  int height_ = 0;
  Storage pixels_;
};

using Image = BasicImage<double>;
using ImageF = BasicImage<float>;

inline ad::Var to_var(const Image& img, bool requires_grad = false) {
  return ad::Var(img.pixels(), img.height(), img.width(), requires_grad);
}

inline Image to_image(const ad::Var& v) { return Image(v.value(), v.width(), v.height()); }

struct ImageIoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Reads an 8- or 16-bit PNG. Gray and gray+alpha become one channel, color
/// becomes three; alpha is dropped.
Image read_png(const std::filesystem::path& path);

/// Writes values clamped to [0,1] at 8 or 16 bits per sample.
void write_png(const std::filesystem::path& path, const Image& img, int bit_depth = 8);

double psnr(const Image& a, const Image& b);

}  // namespace rephoto

#endif  // REPHOTO_IMAGE_HPP_
