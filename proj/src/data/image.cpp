#include "data/image.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "common/binio.hpp"
#include "common/error.hpp"

namespace xnn::data {

namespace {

// PNM header tokens may be separated by whitespace and '#' comments.
int next_token(const std::vector<uint8_t>& b, size_t& pos) {
  while (pos < b.size()) {
    const char c = static_cast<char>(b[pos]);
    if (c == '#') {
      while (pos < b.size() && b[pos] != '\n') ++pos;
    } else if (std::isspace(static_cast<unsigned char>(c))) {
      ++pos;
    } else {
      break;
    }
  }
  if (pos >= b.size())
    throw ParseError(ParseError::Kind::Truncated, "pnm: unexpected end of header");
  if (!std::isdigit(b[pos]))
    throw ParseError(ParseError::Kind::Malformed, "pnm: expected integer");
  long v = 0;
  while (pos < b.size() && std::isdigit(b[pos])) {
    v = v * 10 + (b[pos] - '0');
    if (v > 1 << 20)
      throw ParseError(ParseError::Kind::Malformed, "pnm: value out of range");
    ++pos;
  }
  return static_cast<int>(v);
}

}  // namespace

Image image_decode(const std::vector<uint8_t>& b) {
  if (b.size() < 2 || b[0] != 'P' || (b[1] != '5' && b[1] != '6'))
    throw ParseError(ParseError::Kind::BadMagic,
                     "pnm: expected binary PGM (P5) or PPM (P6)");
  const int channels = b[1] == '5' ? 1 : 3;
  size_t pos = 2;
  const int w = next_token(b, pos);
  const int h = next_token(b, pos);
  const int maxval = next_token(b, pos);
  if (w < 1 || h < 1)
    throw ParseError(ParseError::Kind::Malformed, "pnm: bad dimensions");
  if (maxval < 1 || maxval > 255)
    throw ParseError(ParseError::Kind::Malformed,
                     "pnm: only 8-bit images supported");
  ++pos;  // single whitespace after maxval
  const size_t need = static_cast<size_t>(w) * h * channels;
  if (b.size() < pos + need)
    throw ParseError(ParseError::Kind::Truncated, "pnm: pixel data truncated");
  Image img(h, w, channels);
  for (size_t i = 0; i < need; ++i)
    img.pixels[i] = static_cast<double>(b[pos + i]) / maxval;
  return img;
}

std::vector<uint8_t> image_encode(const Image& img) {
  if (img.channels != 1 && img.channels != 3)
    throw InvalidArgumentError("image_encode: channels must be 1 or 3");
  if (img.height < 1 || img.width < 1 ||
      img.pixels.size() !=
          static_cast<size_t>(img.height) * img.width * img.channels)
    throw ShapeError("image_encode: inconsistent image shape");
  std::string header = std::string(img.channels == 1 ? "P5" : "P6") + "\n" +
                       std::to_string(img.width) + " " +
                       std::to_string(img.height) + "\n255\n";
  std::vector<uint8_t> out(header.begin(), header.end());
  out.reserve(out.size() + img.pixels.size());
  for (double v : img.pixels) {
    const double c = std::clamp(v, 0.0, 1.0);
    out.push_back(static_cast<uint8_t>(std::lround(c * 255.0)));
  }
  return out;
}

Image read_image(const std::filesystem::path& path) {
  return image_decode(read_file_bytes(path));
}

void write_image(const Image& img, const std::filesystem::path& path) {
  atomic_write_file(path, image_encode(img));
}

Image resize_bilinear(const Image& img, int out_h, int out_w) {
  if (out_h < 1 || out_w < 1)
    throw InvalidArgumentError("resize: output dimensions must be positive");
  if (img.height == out_h && img.width == out_w) return img;
  Image out(out_h, out_w, img.channels);
  const double sy = static_cast<double>(img.height) / out_h;
  const double sx = static_cast<double>(img.width) / out_w;
  for (int y = 0; y < out_h; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0,
                                 static_cast<double>(img.height - 1));
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, img.height - 1);
    const double wy = fy - y0;
    for (int x = 0; x < out_w; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0,
                                   static_cast<double>(img.width - 1));
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, img.width - 1);
      const double wx = fx - x0;
      for (int c = 0; c < img.channels; ++c) {
        const double top =
            (1.0 - wx) * img.at(y0, x0, c) + wx * img.at(y0, x1, c);
        const double bot =
            (1.0 - wx) * img.at(y1, x0, c) + wx * img.at(y1, x1, c);
        out.at(y, x, c) = (1.0 - wy) * top + wy * bot;
      }
    }
  }
  return out;
}

Image to_gray(const Image& img) {
  if (img.channels == 1) return img;
  if (img.channels != 3)
    throw InvalidArgumentError("to_gray: expected 1 or 3 channels");
  Image out(img.height, img.width, 1);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      out.at(y, x, 0) = 0.299 * img.at(y, x, 0) + 0.587 * img.at(y, x, 1) +
                        0.114 * img.at(y, x, 2);
  return out;
}

Eigen::MatrixXd patchify(const Image& img, int patch_size) {
  if (patch_size < 1 || img.height % patch_size != 0 ||
      img.width % patch_size != 0)
    throw InvalidArgumentError(
        "patchify: image dimensions must be divisible by patch_size");
  const int gy = img.height / patch_size;
  const int gx = img.width / patch_size;
  Eigen::MatrixXd out(gy * gx,
                      patch_size * patch_size * img.channels);
  for (int py = 0; py < gy; ++py)
    for (int px = 0; px < gx; ++px) {
      const int row = py * gx + px;
      int col = 0;
      for (int y = 0; y < patch_size; ++y)
        for (int x = 0; x < patch_size; ++x)
          for (int c = 0; c < img.channels; ++c)
            out(row, col++) =
                img.at(py * patch_size + y, px * patch_size + x, c);
    }
  return out;
}

}  // namespace xnn::data
