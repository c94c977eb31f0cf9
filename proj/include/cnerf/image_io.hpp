#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace cnerf {

/// 8-bit interleaved image (1 or 3 channels).
struct Image8 {
    std::size_t width = 0;
    std::size_t height = 0;
    std::size_t channels = 3;
    std::vector<std::uint8_t> pixels;
};

class ImageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Values in [-1, 1], row-major interleaved, mapped to [0, 255] with rounding.
Image8 quantize_signed(std::span<const double> values, std::size_t width, std::size_t height, std::size_t channels);
/// Values in [0, 1].
Image8 quantize_unit(std::span<const double> values, std::size_t width, std::size_t height, std::size_t channels);
std::vector<double> dequantize_signed(const Image8& image);

std::vector<std::uint8_t> encode_png(const Image8& image);
Image8 decode_png(std::span<const std::uint8_t> bytes);
void write_png(const std::string& path, const Image8& image);
Image8 read_png(const std::string& path);
/// Binary PPM (P6) or PGM (P5) depending on channel count.
void write_ppm(const std::string& path, const Image8& image);

}  // namespace cnerf
