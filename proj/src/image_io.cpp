#include "cnerf/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

namespace cnerf {

namespace {

Image8 quantize(std::span<const double> values, std::size_t width, std::size_t height, std::size_t channels,
                double lo, double hi) {
    if (values.size() != width * height * channels)
        throw ImageError("quantize: " + std::to_string(values.size()) + " values for " + std::to_string(width) + "x" +
                         std::to_string(height) + "x" + std::to_string(channels));
    Image8 img{width, height, channels, std::vector<std::uint8_t>(values.size())};
    for (std::size_t i = 0; i < values.size(); ++i) {
        const double v = std::isfinite(values[i]) ? std::clamp((values[i] - lo) / (hi - lo), 0.0, 1.0) : 0.0;
        img.pixels[i] = static_cast<std::uint8_t>(std::lround(v * 255.0));
    }
    return img;
}

png_uint_32 png_format(std::size_t channels) {
    if (channels == 1) return PNG_FORMAT_GRAY;
    if (channels == 3) return PNG_FORMAT_RGB;
    throw ImageError("png: unsupported channel count " + std::to_string(channels));
}

}  // namespace

Image8 quantize_signed(std::span<const double> values, std::size_t width, std::size_t height, std::size_t channels) {
    return quantize(values, width, height, channels, -1.0, 1.0);
}

Image8 quantize_unit(std::span<const double> values, std::size_t width, std::size_t height, std::size_t channels) {
    return quantize(values, width, height, channels, 0.0, 1.0);
}

std::vector<double> dequantize_signed(const Image8& image) {
    std::vector<double> out(image.pixels.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = image.pixels[i] / 255.0 * 2.0 - 1.0;
    return out;
}

std::vector<std::uint8_t> encode_png(const Image8& image) {
    if (image.pixels.size() != image.width * image.height * image.channels)
        throw ImageError("png: pixel buffer does not match dimensions");
    png_image desc;
    std::memset(&desc, 0, sizeof desc);
    desc.version = PNG_IMAGE_VERSION;
    desc.width = static_cast<png_uint_32>(image.width);
    desc.height = static_cast<png_uint_32>(image.height);
    desc.format = png_format(image.channels);

    png_alloc_size_t size = 0;
    if (!png_image_write_to_memory(&desc, nullptr, &size, 0, image.pixels.data(), 0, nullptr))
        throw ImageError(std::string("png: ") + desc.message);
    std::vector<std::uint8_t> out(size);
    if (!png_image_write_to_memory(&desc, out.data(), &size, 0, image.pixels.data(), 0, nullptr))
        throw ImageError(std::string("png: ") + desc.message);
    out.resize(size);
    return out;
}

Image8 decode_png(std::span<const std::uint8_t> bytes) {
    png_image desc;
    std::memset(&desc, 0, sizeof desc);
    desc.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_memory(&desc, bytes.data(), bytes.size()))
        throw ImageError(std::string("png: ") + desc.message);
    const bool gray = (desc.format & PNG_FORMAT_FLAG_COLOR) == 0;
    desc.format = gray ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
    Image8 img{desc.width, desc.height, gray ? 1u : 3u, {}};
    img.pixels.resize(PNG_IMAGE_SIZE(desc));
    if (!png_image_finish_read(&desc, nullptr, img.pixels.data(), 0, nullptr)) {
        png_image_free(&desc);
        throw ImageError(std::string("png: ") + desc.message);
    }
    return img;
}

void write_png(const std::string& path, const Image8& image) {
    const auto bytes = encode_png(image);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw ImageError("cannot open " + path + " for writing");
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw ImageError("write failed: " + path);
}

Image8 read_png(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ImageError("cannot open " + path);
    const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return decode_png(bytes);
}

void write_ppm(const std::string& path, const Image8& image) {
    if (image.channels != 1 && image.channels != 3) throw ImageError("ppm: unsupported channel count");
    std::ofstream f(path, std::ios::binary);
    if (!f) throw ImageError("cannot open " + path + " for writing");
    f << (image.channels == 3 ? "P6\n" : "P5\n") << image.width << ' ' << image.height << "\n255\n";
    f.write(reinterpret_cast<const char*>(image.pixels.data()), static_cast<std::streamsize>(image.pixels.size()));
    if (!f) throw ImageError("write failed: " + path);
}

}  // namespace cnerf
