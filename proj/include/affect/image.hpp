#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <vector>

namespace affect::image {

class DecodeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// 8-bit interleaved RGB, row-major.
struct RgbImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;

  static RgbImage filled(std::size_t w, std::size_t h, std::uint8_t r, std::uint8_t g, std::uint8_t b);
  std::uint8_t* at(std::size_t x, std::size_t y) { return pixels.data() + 3 * (y * width + x); }
  const std::uint8_t* at(std::size_t x, std::size_t y) const { return pixels.data() + 3 * (y * width + x); }
};

/// Sniffs PNG or JPEG from the leading bytes. Grayscale and alpha inputs are
/// converted to RGB. Throws DecodeError on anything else.
RgbImage decode(std::span<const std::uint8_t> bytes);
RgbImage read_file(const std::filesystem::path& path);

std::vector<std::uint8_t> encode_png(const RgbImage& img);
std::vector<std::uint8_t> encode_jpeg(const RgbImage& img, int quality = 95);
void write_png(const RgbImage& img, const std::filesystem::path& path);

}  // namespace affect::image
