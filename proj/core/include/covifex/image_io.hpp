#pragma once

#include "covifex/types.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace covifex {

// Decodes PNG/JPEG (8/16-bit grayscale, 8-bit RGB/RGBA) into a [0, 255]
// float tensor. 16-bit samples are divided by 257; alpha is dropped.
// Throws IoError when the bytes are not a decodable image.
ImageTensor decode_image(std::span<const std::uint8_t> bytes);

ImageTensor load_image(const std::filesystem::path& path);

// 8-bit PNG encoding, values clamped to [0, 255] and rounded.
std::vector<std::uint8_t> encode_png(const ImageTensor& img);

} // namespace covifex
