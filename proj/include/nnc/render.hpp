#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>

#include "nnc/scene.hpp"

namespace nnc {

/// Label 0 is black; class c uses entry (c - 1) mod 16.
inline constexpr std::array<std::array<std::uint8_t, 3>, 16> kPalette{{
    {230, 25, 75},   {60, 180, 75},   {255, 225, 25}, {0, 130, 200},  {245, 130, 48},  {145, 30, 180},
    {70, 240, 240},  {240, 50, 230},  {210, 245, 60}, {250, 190, 212}, {0, 128, 128},  {220, 190, 255},
    {170, 110, 40},  {255, 250, 200}, {128, 0, 0},    {170, 255, 195},
}};

inline std::array<std::uint8_t, 3> label_color(std::uint16_t label) {
  if (label == 0) return {0, 0, 0};
  return kPalette[(label - 1u) % kPalette.size()];
}

/// Binary 8-bit PPM (P6), one pixel per label.
inline void write_ppm(const std::filesystem::path& path, const LabelMap& m) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "P6\n" << m.width << ' ' << m.height << "\n255\n";
  for (std::uint16_t l : m.labels) {
    const auto c = label_color(l);
    out.write(reinterpret_cast<const char*>(c.data()), 3);
  }
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

}  // namespace nnc
