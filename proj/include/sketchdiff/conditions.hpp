#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "sketchdiff/condition_pair.hpp"
#include "sketchdiff/image.hpp"

namespace sketchdiff {

/// Binary per-pixel mask, row-major, true = foreground.
struct BinaryMask {
    int height = 0;
    int width = 0;
    std::vector<bool> bits;

    bool at(int y, int x) const { return bits[static_cast<std::size_t>(y) * width + x]; }
};

BinaryMask read_mask_png(const std::filesystem::path& path);

struct CannyThresholds {
    double low = 0.1;
    double high = 0.2;
};

/// Canny edge sketch of a model-space RGB image.
///
/// Luma grayscale, 5x5 Gaussian (sigma 1.4), Sobel magnitude scaled into
/// [0, 1] by the largest value attainable on [0, 1] input, non-maximum suppression along the
/// gradient direction quantized to 4 bins, then double-threshold hysteresis
/// with 8-connectivity. Output is {-1 edge, +1 background}.
ImageBuffer extract_sketch(const ImageBuffer& image, CannyThresholds thresholds = {},
                           const BinaryMask* fg_mask = nullptr);

/// Copy of `image` with every sketch edge pixel set to white.
ImageBuffer extract_strokes(const ImageBuffer& image, const ImageBuffer& sketch);

struct TrainingTriplet {
    ImageBuffer image;
    ImageBuffer sketch;
    ImageBuffer stroke;
    std::string source_id;

    ConditionPair conditions() const { return {sketch, stroke}; }
};

enum class MaskMode { none, drop_sketch, drop_stroke, drop_both, partial };

struct MaskSpec {
    MaskMode mode = MaskMode::none;
    double partial_fraction = 0.5;
    std::uint64_t rng_seed = 0;
};

struct MaskRect {
    int y0 = 0, x0 = 0, height = 0, width = 0;
    friend bool operator==(const MaskRect&, const MaskRect&) = default;
};

/// Rectangle used by partial masking: side lengths from the fraction, origin
/// drawn from a generator seeded with `seed`.
MaskRect choose_mask_rect(int height, int width, double fraction, std::uint64_t seed);

/// Replaces conditions (or a rectangle of both) with model-space gray.
TrainingTriplet mask_condition(const TrainingTriplet& triplet, const MaskSpec& spec);

/// One manifest line.
struct ManifestRecord {
    std::string id;
    std::filesystem::path image;
    std::optional<std::filesystem::path> sketch;
    std::optional<std::filesystem::path> stroke;
    std::optional<std::filesystem::path> fg_mask;
    CannyThresholds thresholds;
};

class ManifestError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Parses a JSON-lines manifest. Relative paths resolve against the
/// manifest's directory. Malformed lines raise ManifestError.
std::vector<ManifestRecord> read_manifest(const std::filesystem::path& manifest_path);

struct RecordError {
    std::string source_id;
    std::string message;
};

/// Either a triplet or the reason a record could not be loaded.
struct DatasetItem {
    std::optional<TrainingTriplet> triplet;
    std::optional<RecordError> error;
};

/// Decodes an image file as a square, resized, model-space RGB buffer.
ImageBuffer load_image(const std::filesystem::path& path, int height, int width);

/// Lazily decodes manifest records in a fixed order (manifest order, or a
/// seeded shuffle). Missing or undecodable files produce error items and the
/// stream continues.
class DatasetStream {
public:
    DatasetStream(const std::filesystem::path& manifest_path, int height, int width,
                  std::optional<std::uint64_t> shuffle_seed = std::nullopt);

    std::optional<DatasetItem> next();
    std::size_t size() const noexcept { return records_.size(); }

private:
    std::vector<ManifestRecord> records_;
    std::size_t cursor_ = 0;
    int height_;
    int width_;
};

DatasetStream load_dataset(const std::filesystem::path& manifest_path, int height, int width,
                           std::optional<std::uint64_t> shuffle_seed = std::nullopt);

/// Drains a stream; errors are appended to `errors` when given.
std::vector<TrainingTriplet> collect_triplets(DatasetStream& stream,
                                              std::vector<RecordError>* errors = nullptr);

}  // namespace sketchdiff
