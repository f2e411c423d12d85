// PNG/JPEG decoding, box downscaling, PNG encoding and the upload
// featurization path (downscale to a square, split into 4×4 RGB patches).
#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace motis::img {

class DecodeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// 8-bit interleaved RGB.
struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> rgb;  // height × width × 3
};

enum class Format { kPng, kJpeg, kUnknown };
Format sniff(std::string_view bytes);
std::string mime_type(Format f);
std::string extension(Format f);

// Grayscale and palette inputs are expanded to RGB; alpha is composited by
// libpng's simplified reader.
Image decode(std::string_view bytes);

// Area-averaging resize to exactly width × height.
Image resize(const Image& src, std::size_t width, std::size_t height);

std::string encode_png(const Image& image);
std::string encode_jpeg(const Image& image, int quality = 90);

// Longest side scaled to max_side, aspect ratio kept.
Image thumbnail(const Image& src, std::size_t max_side);

inline constexpr std::size_t kPatchSide = 4;

// Side length whose 4×4 patch grid yields num_patches patches; throws
// std::invalid_argument if num_patches is not a perfect square.
std::size_t side_for_patches(std::size_t num_patches);

// Downscales to side × side and returns (side/4)² patches of 48 features in
// [0, 1], row-major patch order.
std::vector<float> featurize(const Image& image, std::size_t side);

}  // namespace motis::img
