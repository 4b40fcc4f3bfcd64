#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace flowscope {

// 8-bit raster in binary PGM (channels = 1) or PPM (channels = 3) layout.
struct Raster {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 1;
  std::vector<std::uint8_t> pixels;  // row-major, interleaved channels

  static Raster blank(std::size_t width, std::size_t height, std::size_t channels) {
    return {width, height, channels, std::vector<std::uint8_t>(width * height * channels, 0)};
  }
  std::uint8_t& at(std::size_t x, std::size_t y, std::size_t ch = 0) { return pixels[(y * width + x) * channels + ch]; }
  std::uint8_t at(std::size_t x, std::size_t y, std::size_t ch = 0) const {
    return pixels[(y * width + x) * channels + ch];
  }

  // Netpbm encoding ("P5" or "P6", maxval 255).
  std::string encode() const;
  void write(const std::filesystem::path& path) const;
};

// Jet colormap on an 8-bit level: r = clamp(382.5 - |4q - 765|), with
// g and b shifted by 255 and 510. Integer arithmetic, so identical on
// every platform.
std::array<std::uint8_t, 3> jet(std::uint8_t level) noexcept;

// Quantises v in [0, 1] to 0..255 (values outside are clamped).
std::uint8_t quantize_unit(double v) noexcept;

}  // namespace flowscope
