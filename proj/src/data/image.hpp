#pragma once

#include <Eigen/Dense>
#include <filesystem>
#include <vector>

namespace xnn::data {

// Dense image with pixels in [0, 1], row-major, channel index fastest.
// Grayscale (1 channel) and RGB (3 channels) are the supported shapes.
struct Image {
  int height = 0, width = 0, channels = 1;
  std::vector<double> pixels;

  Image() = default;
  Image(int h, int w, int c)
      : height(h), width(w), channels(c),
        pixels(static_cast<size_t>(h) * w * c, 0.0) {}

  double& at(int y, int x, int c) {
    return pixels[(static_cast<size_t>(y) * width + x) * channels + c];
  }
  double at(int y, int x, int c) const {
    return pixels[(static_cast<size_t>(y) * width + x) * channels + c];
  }
  size_t size() const { return pixels.size(); }
};

// 8-bit binary PGM (P5) and PPM (P6). Values are mapped to [0, 1] on read and
// quantized back on write.
Image read_image(const std::filesystem::path& path);
void write_image(const Image& img, const std::filesystem::path& path);

std::vector<uint8_t> image_encode(const Image& img);
Image image_decode(const std::vector<uint8_t>& bytes);

Image resize_bilinear(const Image& img, int out_h, int out_w);
Image to_gray(const Image& img);

// Splits the image into a (patches) x (patch_size^2 * channels) matrix; patch
// blocks run row-major over the grid, pixels row-major inside a patch with the
// channel index fastest. This ordering is part of every saved feature file.
Eigen::MatrixXd patchify(const Image& img, int patch_size);

}  // namespace xnn::data
