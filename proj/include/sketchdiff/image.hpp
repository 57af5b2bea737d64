#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace sketchdiff {

/// Raised when two buffers that must agree in shape do not.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Height x width x channels image in model space, stored interleaved (HWC).
///
/// Channel counts are restricted to 1 (sketch), 3 (image / stroke) and
/// 7 (assembled network input). Values are expected in [-1, 1] for image
/// data; noisy diffusion states may leave that range.
class ImageBuffer {
public:
    ImageBuffer() = default;
    ImageBuffer(int height, int width, int channels, float fill = 0.0f);
    ImageBuffer(int height, int width, int channels, std::vector<float> values);

    static ImageBuffer constant(int height, int width, int channels, float value) {
        return ImageBuffer(height, width, channels, value);
    }

    int height() const noexcept { return height_; }
    int width() const noexcept { return width_; }
    int channels() const noexcept { return channels_; }
    std::size_t size() const noexcept { return values_.size(); }
    bool empty() const noexcept { return values_.empty(); }

    float& at(int y, int x, int c) { return values_[index(y, x, c)]; }
    float at(int y, int x, int c) const { return values_[index(y, x, c)]; }

    std::span<float> values() noexcept { return values_; }
    std::span<const float> values() const noexcept { return values_; }
    std::vector<float>& storage() noexcept { return values_; }

    bool same_shape(const ImageBuffer& other) const noexcept {
        return height_ == other.height_ && width_ == other.width_ && channels_ == other.channels_;
    }
    bool same_extent(const ImageBuffer& other) const noexcept {
        return height_ == other.height_ && width_ == other.width_;
    }
    bool all_finite() const noexcept;

    std::string shape_string() const;

    friend bool operator==(const ImageBuffer& a, const ImageBuffer& b) {
        return a.same_shape(b) && a.values_ == b.values_;
    }

private:
    std::size_t index(int y, int x, int c) const noexcept {
        return (static_cast<std::size_t>(y) * width_ + x) * channels_ + c;
    }

    int height_ = 0;
    int width_ = 0;
    int channels_ = 0;
    std::vector<float> values_;
};

/// Throws ShapeError unless `a` and `b` share height, width and channels.
void require_same_shape(const ImageBuffer& a, const ImageBuffer& b, const char* what);
/// Throws ShapeError unless `a` and `b` share height and width.
void require_same_extent(const ImageBuffer& a, const ImageBuffer& b, const char* what);

// Display space is 8-bit [0, 255]; model space is [-1, 1].
float to_model(std::uint8_t v) noexcept;
/// (v + 1) * 127.5 rounded half away from zero, clamped to [0, 255].
std::uint8_t to_display(float v) noexcept;

/// Raw 8-bit raster as decoded from / encoded to PNG.
struct Raster8 {
    int height = 0;
    int width = 0;
    int channels = 0;  // 1 (gray) or 3 (RGB)
    std::vector<std::uint8_t> pixels;
};

class ImageIoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

Raster8 decode_png(std::span<const std::uint8_t> bytes, int channels);
std::vector<std::uint8_t> encode_png(const Raster8& raster);
Raster8 read_png(const std::filesystem::path& path, int channels);
void write_png(const std::filesystem::path& path, const Raster8& raster);

ImageBuffer raster_to_model(const Raster8& raster);
/// Quantizes once; a 7-channel buffer is rejected.
Raster8 model_to_raster(const ImageBuffer& img);

/// Binary sketch convention: edge -> -1, background -> +1. Thresholds a gray
/// raster at display value 0.5 (values below count as edge).
ImageBuffer binarize_sketch(const Raster8& gray);

/// Bilinear resize with half-pixel centers and edge clamping.
ImageBuffer resize_bilinear(const ImageBuffer& img, int height, int width);
/// Largest centered square crop.
ImageBuffer center_crop_square(const ImageBuffer& img);

}  // namespace sketchdiff
