#pragma once

#include <optional>

#include "sketchdiff/image.hpp"

namespace sketchdiff {

/// Model-space gray used wherever a condition is absent or masked out.
inline constexpr float kGrayFill = 0.0f;

/// Sketch (h,w,1) and stroke (h,w,3) conditions; either may be absent.
struct ConditionPair {
    std::optional<ImageBuffer> sketch;
    std::optional<ImageBuffer> stroke;

    bool has_sketch() const noexcept { return sketch.has_value(); }
    bool has_stroke() const noexcept { return stroke.has_value(); }
};

/// Concatenates [x_t RGB, sketch, stroke RGB] into a 7-channel buffer.
/// Absent conditions are filled with kGrayFill.
ImageBuffer assemble_input(const ImageBuffer& x_t, const ConditionPair& cond);

}  // namespace sketchdiff
