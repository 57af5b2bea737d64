#include "sketchdiff/conditions.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <deque>
#include <numeric>

#include <nlohmann/json.hpp>

#include "sketchdiff/rng.hpp"

namespace sketchdiff {

namespace {

// Single-channel double plane with clamped access.
struct Plane {
    int h = 0, w = 0;
    std::vector<double> v;

    Plane(int h_, int w_) : h(h_), w(w_), v(static_cast<std::size_t>(h_) * w_, 0.0) {}
    double& operator()(int y, int x) { return v[static_cast<std::size_t>(y) * w + x]; }
    double operator()(int y, int x) const { return v[static_cast<std::size_t>(y) * w + x]; }
    double clamped(int y, int x) const {
        return (*this)(std::clamp(y, 0, h - 1), std::clamp(x, 0, w - 1));
    }
};

std::array<double, 5> gaussian_taps() {
    constexpr double sigma = 1.4;
    std::array<double, 5> k{};
    double sum = 0.0;
    for (int i = 0; i < 5; ++i) {
        const double d = i - 2;
        k[i] = std::exp(-d * d / (2 * sigma * sigma));
        sum += k[i];
    }
    for (auto& x : k) x /= sum;
    return k;
}

// Separable 5x5 Gaussian, replicated border.
Plane blur(const Plane& in) {
    static const auto k = gaussian_taps();
    Plane tmp(in.h, in.w), out(in.h, in.w);
    for (int y = 0; y < in.h; ++y)
        for (int x = 0; x < in.w; ++x) {
            double s = 0.0;
            for (int i = 0; i < 5; ++i) s += k[i] * in.clamped(y, x + i - 2);
            tmp(y, x) = s;
        }
    for (int y = 0; y < in.h; ++y)
        for (int x = 0; x < in.w; ++x) {
            double s = 0.0;
            for (int i = 0; i < 5; ++i) s += k[i] * tmp.clamped(y + i - 2, x);
            out(y, x) = s;
        }
    return out;
}

}  // namespace

BinaryMask read_mask_png(const std::filesystem::path& path) {
    const Raster8 r = read_png(path, 1);
    BinaryMask m{r.height, r.width, {}};
    m.bits.resize(r.pixels.size());
    std::transform(r.pixels.begin(), r.pixels.end(), m.bits.begin(), [](std::uint8_t v) { return v >= 128; });
    return m;
}

ImageBuffer extract_sketch(const ImageBuffer& image, CannyThresholds th, const BinaryMask* fg_mask) {
    if (image.channels() != 3) throw ShapeError("extract_sketch: image must have 3 channels");
    if (!(th.low >= 0.0 && th.low < th.high)) {
        throw std::invalid_argument("extract_sketch: need 0 <= low < high");
    }
    if (fg_mask && (fg_mask->height != image.height() || fg_mask->width != image.width())) {
        throw ShapeError("extract_sketch: mask shape mismatch");
    }
    const int h = image.height(), w = image.width();

    Plane gray(h, w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const double luma = 0.299 * image.at(y, x, 0) + 0.587 * image.at(y, x, 1) +
                                0.114 * image.at(y, x, 2);
            gray(y, x) = (luma + 1.0) * 0.5;
        }
    const Plane smooth = blur(gray);

    // Largest Sobel magnitude attainable on [0, 1] input.
    const double norm = 4.0 * std::sqrt(2.0);
    Plane mag(h, w);
    std::vector<int> dir(static_cast<std::size_t>(h) * w, 0);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            auto p = [&](int dy, int dx) { return smooth.clamped(y + dy, x + dx); };
            const double gx = (p(-1, 1) + 2 * p(0, 1) + p(1, 1)) - (p(-1, -1) + 2 * p(0, -1) + p(1, -1));
            const double gy = (p(1, -1) + 2 * p(1, 0) + p(1, 1)) - (p(-1, -1) + 2 * p(-1, 0) + p(-1, 1));
            mag(y, x) = std::hypot(gx, gy) / norm;
            double angle = std::atan2(gy, gx) * 180.0 / 3.14159265358979323846;
            if (angle < 0) angle += 180.0;
            int bin = 0;
            if (angle >= 22.5 && angle < 67.5) bin = 1;
            else if (angle >= 67.5 && angle < 112.5) bin = 2;
            else if (angle >= 112.5 && angle < 157.5) bin = 3;
            dir[static_cast<std::size_t>(y) * w + x] = bin;
        }

    // Step (dy, dx) along the quantized gradient direction, y pointing down.
    static constexpr int kStep[4][2] = {{0, 1}, {1, 1}, {1, 0}, {1, -1}};
    Plane thin(h, w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const double m = mag(y, x);
            if (m <= 0.0) continue;
            const auto* s = kStep[dir[static_cast<std::size_t>(y) * w + x]];
            const double behind = mag.clamped(y - s[0], x - s[1]);
            const double ahead = mag.clamped(y + s[0], x + s[1]);
            // Asymmetric comparison keeps exactly one of two equal maxima.
            if (m >= behind && m > ahead) thin(y, x) = m;
        }

    std::vector<char> edge(static_cast<std::size_t>(h) * w, 0);
    std::deque<std::pair<int, int>> frontier;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            if (thin(y, x) >= th.high) {
                edge[static_cast<std::size_t>(y) * w + x] = 1;
                frontier.emplace_back(y, x);
            }
    while (!frontier.empty()) {
        auto [y, x] = frontier.front();
        frontier.pop_front();
        for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
                const int ny = y + dy, nx = x + dx;
                if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
                auto& e = edge[static_cast<std::size_t>(ny) * w + nx];
                if (!e && thin(ny, nx) >= th.low) {
                    e = 1;
                    frontier.emplace_back(ny, nx);
                }
            }
    }

    ImageBuffer sketch(h, w, 1, 1.0f);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const bool inside = !fg_mask || fg_mask->at(y, x);
            if (inside && edge[static_cast<std::size_t>(y) * w + x]) sketch.at(y, x, 0) = -1.0f;
        }
    return sketch;
}

ImageBuffer extract_strokes(const ImageBuffer& image, const ImageBuffer& sketch) {
    if (image.channels() != 3 || sketch.channels() != 1) {
        throw ShapeError("extract_strokes: expected (h,w,3) image and (h,w,1) sketch");
    }
    require_same_extent(image, sketch, "extract_strokes");
    ImageBuffer stroke = image;
    for (int y = 0; y < image.height(); ++y)
        for (int x = 0; x < image.width(); ++x)
            if (sketch.at(y, x, 0) < 0.0f) {
                for (int c = 0; c < 3; ++c) stroke.at(y, x, c) = 1.0f;
            }
    return stroke;
}

MaskRect choose_mask_rect(int height, int width, double fraction, std::uint64_t seed) {
    fraction = std::clamp(fraction, 0.0, 1.0);
    MaskRect r;
    r.height = static_cast<int>(std::lround(height * std::sqrt(fraction)));
    if (r.height == 0) return r;
    const double area = fraction * height * width;
    r.width = std::clamp(static_cast<int>(std::lround(area / r.height)), 0, width);
    Rng rng(seed);
    r.y0 = static_cast<int>(rng.uniform_int(0, height - r.height));
    r.x0 = static_cast<int>(rng.uniform_int(0, width - r.width));
    return r;
}

TrainingTriplet mask_condition(const TrainingTriplet& triplet, const MaskSpec& spec) {
    TrainingTriplet out = triplet;
    auto gray = [](ImageBuffer& img) { std::fill(img.values().begin(), img.values().end(), kGrayFill); };
    switch (spec.mode) {
        case MaskMode::none:
            break;
        case MaskMode::drop_sketch:
            gray(out.sketch);
            break;
        case MaskMode::drop_stroke:
            gray(out.stroke);
            break;
        case MaskMode::drop_both:
            gray(out.sketch);
            gray(out.stroke);
            break;
        case MaskMode::partial: {
            const MaskRect r = choose_mask_rect(out.sketch.height(), out.sketch.width(),
                                                spec.partial_fraction, spec.rng_seed);
            for (int y = r.y0; y < r.y0 + r.height; ++y)
                for (int x = r.x0; x < r.x0 + r.width; ++x) {
                    out.sketch.at(y, x, 0) = kGrayFill;
                    for (int c = 0; c < 3; ++c) out.stroke.at(y, x, c) = kGrayFill;
                }
            break;
        }
    }
    return out;
}

std::vector<ManifestRecord> read_manifest(const std::filesystem::path& manifest_path) {
    std::ifstream in(manifest_path);
    if (!in) throw ManifestError("cannot open manifest " + manifest_path.string());
    const auto base = manifest_path.parent_path();
    auto resolve = [&](const std::string& p) {
        std::filesystem::path path(p);
        return path.is_absolute() ? path : base / path;
    };
    std::vector<ManifestRecord> records;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (std::all_of(line.begin(), line.end(), [](unsigned char c) { return std::isspace(c); })) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw ManifestError("manifest line " + std::to_string(lineno) + ": " + e.what());
        }
        if (!j.is_object() || !j.contains("image") || !j["image"].is_string()) {
            throw ManifestError("manifest line " + std::to_string(lineno) + ": missing string field \"image\"");
        }
        ManifestRecord r;
        r.image = resolve(j["image"].get<std::string>());
        r.id = j.value("id", r.image.stem().string());
        for (auto [key, field] : {std::pair{"sketch", &r.sketch}, std::pair{"stroke", &r.stroke},
                                  std::pair{"fg_mask", &r.fg_mask}}) {
            if (j.contains(key) && !j[key].is_null()) {
                if (!j[key].is_string()) {
                    throw ManifestError("manifest line " + std::to_string(lineno) + ": \"" + key +
                                        "\" must be a string");
                }
                *field = resolve(j[key].get<std::string>());
            }
        }
        r.thresholds.low = j.value("low", r.thresholds.low);
        r.thresholds.high = j.value("high", r.thresholds.high);
        records.push_back(std::move(r));
    }
    return records;
}

namespace {

ImageBuffer fit(const ImageBuffer& img, int height, int width) {
    return resize_bilinear(center_crop_square(img), height, width);
}

void require_file(const std::filesystem::path& p) {
    if (!std::filesystem::exists(p)) throw ImageIoError("missing file " + p.string());
}

TrainingTriplet load_record(const ManifestRecord& r, int height, int width) {
    require_file(r.image);
    TrainingTriplet t;
    t.source_id = r.id;
    t.image = fit(raster_to_model(read_png(r.image, 3)), height, width);
    if (r.sketch) {
        require_file(*r.sketch);
        ImageBuffer s = fit(raster_to_model(read_png(*r.sketch, 1)), height, width);
        for (auto& v : s.values()) v = v < 0.0f ? -1.0f : 1.0f;
        t.sketch = std::move(s);
    } else {
        std::optional<BinaryMask> mask;
        if (r.fg_mask) {
            require_file(*r.fg_mask);
            const ImageBuffer m = fit(raster_to_model(read_png(*r.fg_mask, 1)), height, width);
            mask = BinaryMask{height, width, {}};
            for (float v : m.values()) mask->bits.push_back(v >= 0.0f);
        }
        t.sketch = extract_sketch(t.image, r.thresholds, mask ? &*mask : nullptr);
    }
    if (r.stroke) {
        require_file(*r.stroke);
        t.stroke = fit(raster_to_model(read_png(*r.stroke, 3)), height, width);
    } else {
        t.stroke = extract_strokes(t.image, t.sketch);
    }
    return t;
}

}  // namespace

ImageBuffer load_image(const std::filesystem::path& path, int height, int width) {
    require_file(path);
    return fit(raster_to_model(read_png(path, 3)), height, width);
}

DatasetStream::DatasetStream(const std::filesystem::path& manifest_path, int height, int width,
                             std::optional<std::uint64_t> shuffle_seed)
    : records_(read_manifest(manifest_path)), height_(height), width_(width) {
    if (height <= 0 || width <= 0) throw std::invalid_argument("dataset target size must be positive");
    if (shuffle_seed) {
        Rng rng(*shuffle_seed);
        for (std::size_t i = records_.size(); i > 1; --i) {
            const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1));
            std::swap(records_[i - 1], records_[j]);
        }
    }
}

std::optional<DatasetItem> DatasetStream::next() {
    if (cursor_ >= records_.size()) return std::nullopt;
    const ManifestRecord& r = records_[cursor_++];
    DatasetItem item;
    try {
        item.triplet = load_record(r, height_, width_);
    } catch (const std::exception& e) {
        item.error = RecordError{r.id, e.what()};
    }
    return item;
}

DatasetStream load_dataset(const std::filesystem::path& manifest_path, int height, int width,
                           std::optional<std::uint64_t> shuffle_seed) {
    return DatasetStream(manifest_path, height, width, shuffle_seed);
}

std::vector<TrainingTriplet> collect_triplets(DatasetStream& stream, std::vector<RecordError>* errors) {
    std::vector<TrainingTriplet> out;
    while (auto item = stream.next()) {
        if (item->triplet) {
            out.push_back(std::move(*item->triplet));
        } else if (errors && item->error) {
            errors->push_back(*item->error);
        }
    }
    return out;
}

}  // namespace sketchdiff
