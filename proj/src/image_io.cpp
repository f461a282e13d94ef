#include "llfdisc/image_io.hpp"

#include <png.h>

#include <cfenv>
#include <cmath>
#include <cstdint>
#include <vector>

namespace llf {

Tensor read_png(const std::string& path) {
  png_image im{};
  im.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&im, path.c_str())) {
    throw ValidationError("read_png: cannot open " + path + ": " + im.message);
  }
  im.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(im));
  if (!png_image_finish_read(&im, nullptr, buf.data(), 0, nullptr)) {
    std::string msg = im.message;
    png_image_free(&im);
    throw ValidationError("read_png: decode failed for " + path + ": " + msg);
  }
  const int h = static_cast<int>(im.height);
  const int w = static_cast<int>(im.width);

  Array data(static_cast<Eigen::Index>(3) * h * w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) {
        data[(static_cast<Eigen::Index>(c) * h + y) * w + x] =
            buf[(static_cast<std::size_t>(y) * w + x) * 3 + c] / 255.0;
      }
    }
  }
  return Tensor::from_array({1, 3, h, w}, std::move(data));
}

void write_png(const Tensor& image, const std::string& path) {
  if (!image.defined() || image.shape().c != 3) {
    throw ValidationError("write_png: expected a (B,3,H,W) tensor");
  }
  const Shape s = image.shape();
  const Array& v = image.value();

  std::vector<std::uint8_t> buf(static_cast<std::size_t>(s.h) * s.w * 3);
  for (int y = 0; y < s.h; ++y) {
    for (int x = 0; x < s.w; ++x) {
      for (int c = 0; c < 3; ++c) {
        Scalar t = v[(static_cast<Eigen::Index>(c) * s.h + y) * s.w + x];
        t = std::min(1.0, std::max(0.0, t));
        // nearbyint under the default rounding mode is round-half-even.
        buf[(static_cast<std::size_t>(y) * s.w + x) * 3 + c] =
            static_cast<std::uint8_t>(std::nearbyint(t * 255.0));
      }
    }
  }

  png_image im{};
  im.version = PNG_IMAGE_VERSION;
  im.width = static_cast<png_uint_32>(s.w);
  im.height = static_cast<png_uint_32>(s.h);
  im.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&im, path.c_str(), 0, buf.data(), 0, nullptr)) {
    throw ValidationError("write_png: cannot write " + path + ": " +
                          im.message);
  }
}

}  // namespace llf
