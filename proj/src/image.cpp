#include "sketchdiff/image.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <sstream>

#include <png.h>

namespace sketchdiff {

namespace {

bool valid_channel_count(int c) { return c == 1 || c == 3 || c == 7; }

void check_dims(int h, int w, int c) {
    if (h <= 0 || w <= 0) throw ShapeError("image dimensions must be positive");
    if (!valid_channel_count(c)) {
        throw ShapeError("channel count must be 1, 3 or 7, got " + std::to_string(c));
    }
}

}  // namespace

ImageBuffer::ImageBuffer(int height, int width, int channels, float fill)
    : height_(height), width_(width), channels_(channels) {
    check_dims(height, width, channels);
    values_.assign(static_cast<std::size_t>(height) * width * channels, fill);
}

ImageBuffer::ImageBuffer(int height, int width, int channels, std::vector<float> values)
    : height_(height), width_(width), channels_(channels), values_(std::move(values)) {
    check_dims(height, width, channels);
    if (values_.size() != static_cast<std::size_t>(height) * width * channels) {
        throw ShapeError("value count does not match " + shape_string());
    }
}

bool ImageBuffer::all_finite() const noexcept {
    return std::all_of(values_.begin(), values_.end(), [](float v) { return std::isfinite(v); });
}

std::string ImageBuffer::shape_string() const {
    std::ostringstream os;
    os << '(' << height_ << ',' << width_ << ',' << channels_ << ')';
    return os.str();
}

void require_same_shape(const ImageBuffer& a, const ImageBuffer& b, const char* what) {
    if (!a.same_shape(b)) {
        throw ShapeError(std::string(what) + ": shape mismatch " + a.shape_string() + " vs " +
                         b.shape_string());
    }
}

void require_same_extent(const ImageBuffer& a, const ImageBuffer& b, const char* what) {
    if (!a.same_extent(b)) {
        throw ShapeError(std::string(what) + ": spatial mismatch " + a.shape_string() + " vs " +
                         b.shape_string());
    }
}

float to_model(std::uint8_t v) noexcept { return static_cast<float>(v) / 127.5f - 1.0f; }

std::uint8_t to_display(float v) noexcept {
    double d = (static_cast<double>(v) + 1.0) * 127.5;
    d = std::round(d);  // half away from zero
    return static_cast<std::uint8_t>(std::clamp(d, 0.0, 255.0));
}

void check_raster(const Raster8& r) {
    if (r.channels != 1 && r.channels != 3) throw ImageIoError("png: channels must be 1 or 3");
    if (r.height < 0 || r.width < 0 ||
        r.pixels.size() != static_cast<std::size_t>(r.height) * r.width * r.channels) {
        throw ImageIoError("raster pixel count does not match " + std::to_string(r.height) + "x" +
                           std::to_string(r.width) + "x" + std::to_string(r.channels));
    }
}

Raster8 decode_png(std::span<const std::uint8_t> bytes, int channels) {
    if (channels != 1 && channels != 3) throw ImageIoError("png: channels must be 1 or 3");
    png_image image{};
    image.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size())) {
        std::string msg = image.message;
        png_image_free(&image);
        throw ImageIoError("png decode: " + msg);
    }
    image.format = channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
    Raster8 out;
    out.height = static_cast<int>(image.height);
    out.width = static_cast<int>(image.width);
    out.channels = channels;
    out.pixels.resize(PNG_IMAGE_SIZE(image));
    if (!png_image_finish_read(&image, nullptr, out.pixels.data(), 0, nullptr)) {
        std::string msg = image.message;
        png_image_free(&image);
        throw ImageIoError("png decode: " + msg);
    }
    return out;
}

std::vector<std::uint8_t> encode_png(const Raster8& raster) {
    check_raster(raster);
    png_image image{};
    image.version = PNG_IMAGE_VERSION;
    image.width = static_cast<png_uint_32>(raster.width);
    image.height = static_cast<png_uint_32>(raster.height);
    image.format = raster.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
    png_alloc_size_t size = 0;
    if (!png_image_write_to_memory(&image, nullptr, &size, 0, raster.pixels.data(), 0, nullptr)) {
        throw ImageIoError(std::string("png encode: ") + image.message);
    }
    std::vector<std::uint8_t> out(size);
    if (!png_image_write_to_memory(&image, out.data(), &size, 0, raster.pixels.data(), 0,
                                   nullptr)) {
        throw ImageIoError(std::string("png encode: ") + image.message);
    }
    out.resize(size);
    return out;
}

Raster8 read_png(const std::filesystem::path& path, int channels) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ImageIoError("cannot open " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                    std::istreambuf_iterator<char>());
    try {
        return decode_png(bytes, channels);
    } catch (const ImageIoError& e) {
        throw ImageIoError(path.string() + ": " + e.what());
    }
}

void write_png(const std::filesystem::path& path, const Raster8& raster) {
    auto bytes = encode_png(raster);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw ImageIoError("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

ImageBuffer raster_to_model(const Raster8& raster) {
    check_raster(raster);
    ImageBuffer img(raster.height, raster.width, raster.channels);
    std::transform(raster.pixels.begin(), raster.pixels.end(), img.values().begin(), to_model);
    return img;
}

Raster8 model_to_raster(const ImageBuffer& img) {
    if (img.channels() != 1 && img.channels() != 3) {
        throw ImageIoError("only 1- or 3-channel buffers can be encoded");
    }
    Raster8 out{img.height(), img.width(), img.channels(), {}};
    out.pixels.resize(img.size());
    std::transform(img.values().begin(), img.values().end(), out.pixels.begin(), to_display);
    return out;
}

ImageBuffer binarize_sketch(const Raster8& gray) {
    if (gray.channels != 1) throw ImageIoError("sketch raster must be single-channel");
    ImageBuffer img(gray.height, gray.width, 1);
    std::transform(gray.pixels.begin(), gray.pixels.end(), img.values().begin(),
                   [](std::uint8_t v) { return v < 128 ? -1.0f : 1.0f; });
    return img;
}

ImageBuffer resize_bilinear(const ImageBuffer& img, int height, int width) {
    if (img.height() == height && img.width() == width) return img;
    ImageBuffer out(height, width, img.channels());
    const double sy = static_cast<double>(img.height()) / height;
    const double sx = static_cast<double>(img.width()) / width;
    for (int y = 0; y < height; ++y) {
        double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, img.height() - 1.0);
        int y0 = static_cast<int>(fy);
        int y1 = std::min(y0 + 1, img.height() - 1);
        double wy = fy - y0;
        for (int x = 0; x < width; ++x) {
            double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, img.width() - 1.0);
            int x0 = static_cast<int>(fx);
            int x1 = std::min(x0 + 1, img.width() - 1);
            double wx = fx - x0;
            for (int c = 0; c < img.channels(); ++c) {
                double top = (1 - wx) * img.at(y0, x0, c) + wx * img.at(y0, x1, c);
                double bot = (1 - wx) * img.at(y1, x0, c) + wx * img.at(y1, x1, c);
                out.at(y, x, c) = static_cast<float>((1 - wy) * top + wy * bot);
            }
        }
    }
    return out;
}

ImageBuffer center_crop_square(const ImageBuffer& img) {
    const int side = std::min(img.height(), img.width());
    if (side == img.height() && side == img.width()) return img;
    const int y0 = (img.height() - side) / 2;
    const int x0 = (img.width() - side) / 2;
    ImageBuffer out(side, side, img.channels());
    for (int y = 0; y < side; ++y)
        for (int x = 0; x < side; ++x)
            for (int c = 0; c < img.channels(); ++c) out.at(y, x, c) = img.at(y + y0, x + x0, c);
    return out;
}

}  // namespace sketchdiff
