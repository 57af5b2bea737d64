#pragma once

#include <cstddef>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "sketchdiff/condition_pair.hpp"
#include "sketchdiff/diffusion.hpp"
#include "sketchdiff/image.hpp"

namespace sketchdiff {

struct NetworkConfig {
    static constexpr int input_channels = 7;
    static constexpr int output_channels = 3;

    int base_channels = 32;
    std::vector<int> channel_multipliers{1, 2, 2};
    int residual_blocks_per_level = 2;
    int time_embed_dim = 128;

    int levels() const noexcept { return static_cast<int>(channel_multipliers.size()); }
    /// Throws std::invalid_argument on a structurally invalid config.
    void validate() const;
    /// Throws ShapeError unless h and w are divisible by 2^(levels-1).
    void check_input_extent(int height, int width) const;

    nlohmann::json to_json() const;
    static NetworkConfig from_json(const nlohmann::json& j);

    friend bool operator==(const NetworkConfig&, const NetworkConfig&) = default;
};

struct ParamInfo {
    std::string name;
    std::vector<int> shape;
    std::size_t offset = 0;  // in elements
    std::size_t length = 0;
};

/// Names, shapes and flat offsets of every parameter of a network.
class ParamLayout {
public:
    std::size_t add(std::string name, std::vector<int> shape);
    const std::vector<ParamInfo>& entries() const noexcept { return entries_; }
    const ParamInfo* find(const std::string& name) const;
    std::size_t total() const noexcept { return total_; }

    friend bool operator==(const ParamLayout& a, const ParamLayout& b);

private:
    std::vector<ParamInfo> entries_;
    std::map<std::string, std::size_t> by_name_;
    std::size_t total_ = 0;
};

/// Heap buffer aligned for Eigen's vector kernels. Vectorized reductions
/// peel a scalar head that depends on the start address, so every buffer the
/// network maps uses this allocator to keep results run-to-run identical.
template <typename T>
using AlignedBuffer = std::vector<T, Eigen::aligned_allocator<T>>;

/// Flat parameter storage addressed through a shared layout.
template <typename T>
class BasicParameterSet {
public:
    BasicParameterSet() = default;
    explicit BasicParameterSet(std::shared_ptr<const ParamLayout> layout)
        : layout_(std::move(layout)), values_(layout_->total(), T{}) {}

    const ParamLayout& layout() const { return *layout_; }
    std::shared_ptr<const ParamLayout> layout_ptr() const { return layout_; }

    std::span<T> flat() noexcept { return values_; }
    std::span<const T> flat() const noexcept { return values_; }
    AlignedBuffer<T>& storage() noexcept { return values_; }

    std::span<T> view(const std::string& name) {
        const auto* info = find_or_throw(name);
        return std::span<T>(values_).subspan(info->offset, info->length);
    }
    std::span<const T> view(const std::string& name) const {
        const auto* info = find_or_throw(name);
        return std::span<const T>(values_).subspan(info->offset, info->length);
    }

    template <typename U>
    BasicParameterSet<U> cast() const {
        BasicParameterSet<U> out(layout_);
        for (std::size_t i = 0; i < values_.size(); ++i) out.flat()[i] = static_cast<U>(values_[i]);
        return out;
    }

    friend bool operator==(const BasicParameterSet& a, const BasicParameterSet& b) {
        return *a.layout_ == *b.layout_ && a.values_ == b.values_;
    }

private:
    const ParamInfo* find_or_throw(const std::string& name) const {
        const auto* info = layout_->find(name);
        if (!info) throw std::out_of_range("unknown parameter " + name);
        return info;
    }

    std::shared_ptr<const ParamLayout> layout_;
    AlignedBuffer<T> values_;
};

using ParameterSet = BasicParameterSet<float>;

/// Sinusoidal embedding: [sin(t w_0..), cos(t w_0..)], w_k = 10000^(-2k/dim).
std::vector<double> timestep_embedding(double t, int dim);

/// Group count for normalizing `channels`: the largest divisor that is at
/// most 8 and leaves at least two channels per group. With one channel per
/// group the per-channel bias and timestep offsets would be normalized away.
int norm_groups(int channels);

/// U-Net over assembled 7-channel inputs producing a 3-channel noise estimate.
///
/// Encoder levels of residual blocks separated by stride-2 convolutions, a
/// bottleneck of two residual blocks, and a decoder that concatenates the
/// matching encoder output before its residual blocks and upsamples with
/// nearest-neighbour doubling followed by a 3x3 convolution. Every residual
/// block receives a learned projection of the timestep embedding.
class UNet {
public:
    explicit UNet(NetworkConfig cfg);
    ~UNet();
    UNet(UNet&&) noexcept;
    UNet& operator=(UNet&&) noexcept;

    const NetworkConfig& config() const noexcept { return cfg_; }
    std::shared_ptr<const ParamLayout> layout() const noexcept { return layout_; }

    /// Uniform(+-1/sqrt(fan_in)) weights, zero biases, unit norm gains.
    ParameterSet init_parameters(std::uint64_t seed) const;

    template <typename T>
    ImageBuffer forward(const BasicParameterSet<T>& params, const ImageBuffer& x7, int t) const;

    /// Returns the mean squared error of the prediction against `target` and
    /// accumulates weight * d(mse)/d(params) into `grad`.
    template <typename T>
    T mse_and_grad(const BasicParameterSet<T>& params, const ImageBuffer& x7, int t,
                   const ImageBuffer& target, T weight, std::span<T> grad) const;

    struct Plan;

private:
    void check_params(const ParamLayout& layout) const;

    NetworkConfig cfg_;
    std::shared_ptr<const ParamLayout> layout_;
    std::unique_ptr<Plan> plan_;
};

/// Adapts a network and a parameter set to the sampler's Denoiser interface.
class NetworkDenoiser : public Denoiser {
public:
    NetworkDenoiser(const UNet& net, const ParameterSet& params) : net_(net), params_(params) {}
    ImageBuffer predict(const ImageBuffer& x7, int t) const override {
        return net_.forward(params_, x7, t);
    }

private:
    const UNet& net_;
    const ParameterSet& params_;
};

}  // namespace sketchdiff
