#include "maskdiff/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>
#include <string>

namespace maskdiff {

void write_pgm(const std::filesystem::path& path, const Tensor<float>& image) {
  std::size_t h = 0, w = 0;
  if (image.rank() == 3 && image.dim(0) == 1) {
    h = image.dim(1);
    w = image.dim(2);
  } else if (image.rank() == 2) {
    h = image.dim(0);
    w = image.dim(1);
  } else {
    throw ShapeError("write_pgm: expected [1,H,W] or [H,W], got " + to_string(image.shape()));
  }
  std::string pixels(h * w, '\0');
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    const float v = std::clamp(image[i], 0.0f, 1.0f);
    pixels[i] = static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0f)));
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("write_pgm: cannot open " + path.string());
  f << "P5\n" << w << ' ' << h << "\n255\n";
  f.write(pixels.data(), static_cast<std::streamsize>(pixels.size()));
  if (!f) throw std::runtime_error("write_pgm: write failed for " + path.string());
}

Tensor<float> read_pgm(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("read_pgm: cannot open " + path.string());
  std::string magic;
  std::size_t w = 0, h = 0, maxval = 0;
  f >> magic >> w >> h >> maxval;
  if (magic != "P5" || maxval != 255 || w == 0 || h == 0) throw std::runtime_error("read_pgm: unsupported file");
  f.get();
  std::string pixels(w * h, '\0');
  f.read(pixels.data(), static_cast<std::streamsize>(pixels.size()));
  if (!f) throw std::runtime_error("read_pgm: truncated file");
  Tensor<float> out(Shape{1, h, w});
  for (std::size_t i = 0; i < pixels.size(); ++i) out[i] = static_cast<unsigned char>(pixels[i]) / 255.0f;
  return out;
}

Tensor<float> chain_to_unit(const Tensor<float>& y) {
  Tensor<float> out(y.shape());
  for (std::size_t i = 0; i < y.size(); ++i) out[i] = std::clamp((y[i] + 1.0f) / 2.0f, 0.0f, 1.0f);
  return out;
}

}  // namespace maskdiff
