#include "flowscope/raster.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>

#include "flowscope/errors.hpp"

namespace flowscope {

std::string Raster::encode() const {
  if (channels != 1 && channels != 3) throw ContractError("raster must have 1 or 3 channels");
  std::string out = (channels == 1 ? "P5\n" : "P6\n") + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  out.append(reinterpret_cast<const char*>(pixels.data()), pixels.size());
  return out;
}

void Raster::write(const std::filesystem::path& path) const {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write raster to " + path.string());
  const std::string bytes = encode();
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("failed writing " + path.string());
}

std::array<std::uint8_t, 3> jet(std::uint8_t level) noexcept {
  const int q4 = 4 * static_cast<int>(level);
  auto channel = [&](int center) {
    // 2 * (382.5 - |4q - center|) / 2, floored and clamped
    const int v = (765 - 2 * std::abs(q4 - center)) / 2;
    return static_cast<std::uint8_t>(std::clamp(v, 0, 255));
  };
  return {channel(765), channel(510), channel(255)};
}

std::uint8_t quantize_unit(double v) noexcept {
  if (!(v > 0.0)) return 0;
  if (v >= 1.0) return 255;
  return static_cast<std::uint8_t>(std::lround(v * 255.0));
}

}  // namespace flowscope
