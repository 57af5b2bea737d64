#pragma once

#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>

#include <nlohmann/json.hpp>

#include "sketchdiff/diffusion.hpp"
#include "sketchdiff/network.hpp"

namespace sketchdiff {

/// Everything needed to rebuild a sampler besides the weights.
struct ModelSpec {
    NetworkConfig network;
    int T = 1000;
    double beta_start = 1e-4;
    double beta_end = 0.02;
    int height = 32;
    int width = 32;

    NoiseSchedule schedule() const { return make_schedule(T, beta_start, beta_end); }
    nlohmann::json to_json() const;
    static ModelSpec from_json(const nlohmann::json& j);
};

class CheckpointError : public std::runtime_error {
public:
    enum class Kind { io, truncated, version_mismatch, shape_mismatch, malformed };

    CheckpointError(Kind kind, const std::string& message)
        : std::runtime_error(kind_name(kind) + ": " + message), kind_(kind) {}

    Kind kind() const noexcept { return kind_; }
    static std::string kind_name(Kind kind);

private:
    Kind kind_;
};

inline constexpr int kCheckpointFormatVersion = 1;

/// Contents of a checkpoint container.
///
/// On disk: an 8-byte little-endian header length, a UTF-8 JSON header, and
/// a little-endian float32 payload. The header maps every parameter name to
/// {"dtype": "f32", "shape", "offset", "length"} (byte offset and byte length
/// within the payload) next to "config" and "format_version". Optional
/// sections "ema" (same name map), "opt" ({"m": map, "v": map}) and
/// "train_meta" (free-form JSON) carry trainer state.
struct CheckpointContents {
    ModelSpec spec;
    ParameterSet params;
    std::optional<ParameterSet> ema;
    std::optional<ParameterSet> adam_m;
    std::optional<ParameterSet> adam_v;
    nlohmann::json train_meta;  // null when absent
};

/// Writes to a temporary sibling file, then renames over `path`.
void write_checkpoint(const std::filesystem::path& path, const CheckpointContents& contents);

/// Reads and validates a container. When `expected` is given every tensor
/// shape is checked against that network config instead of the stored one.
CheckpointContents read_checkpoint(const std::filesystem::path& path,
                                   const NetworkConfig* expected = nullptr);

}  // namespace sketchdiff
