#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "sketchdiff/image.hpp"

namespace sketchdiff {

/// Gaussian fit of embedded features.
struct FeatureStats {
    Eigen::VectorXd mu;
    Eigen::MatrixXd sigma;
    std::size_t n = 0;

    int dim() const noexcept { return static_cast<int>(mu.size()); }
};

/// Deterministic image -> feature vector map.
class Embedder {
public:
    virtual ~Embedder() = default;
    virtual std::string id() const = 0;
    virtual int dim() const = 0;
    virtual Eigen::VectorXd embed(const ImageBuffer& img) const = 0;
};

/// 16x16 bilinear thumbnail, flattened (768 values), times a seeded
/// Gaussian d x 768 matrix scaled by 1/sqrt(768).
class RandomProjectionEmbedder final : public Embedder {
public:
    RandomProjectionEmbedder(std::uint64_t seed, int d);

    std::string id() const override;
    int dim() const override { return static_cast<int>(projection_.rows()); }
    Eigen::VectorXd embed(const ImageBuffer& img) const override;
    const Eigen::MatrixXd& projection() const noexcept { return projection_; }

    static constexpr int kThumb = 16;

private:
    std::uint64_t seed_;
    Eigen::MatrixXd projection_;
};

/// Flattens the image as-is; dimension fixed at construction.
class FlattenEmbedder final : public Embedder {
public:
    FlattenEmbedder(int height, int width, int channels) : h_(height), w_(width), c_(channels) {}
    std::string id() const override;
    int dim() const override { return h_ * w_ * c_; }
    Eigen::VectorXd embed(const ImageBuffer& img) const override;

private:
    int h_, w_, c_;
};

std::unique_ptr<Embedder> default_embedder(std::uint64_t seed = 0, int d = 64);

/// Sample mean and unbiased covariance, symmetrized.
FeatureStats feature_stats_from_vectors(std::span<const Eigen::VectorXd> features);
FeatureStats feature_stats(std::span<const ImageBuffer> images, const Embedder& emb);

/// ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}), clamped at 0.
///
/// The trace of the square root is taken from the eigenvalues of the
/// symmetric product S_a^{1/2} S_b S_a^{1/2}; eigenvalues below 1e-10 are
/// treated as 0.
double frechet_distance(const FeatureStats& a, const FeatureStats& b);

/// Mean Euclidean distance between embeddings of corresponding 8x8 patches,
/// divided by sqrt(d).
double perceptual_distance(const ImageBuffer& x, const ImageBuffer& y, const Embedder& emb);

inline constexpr int kPatchSize = 8;

}  // namespace sketchdiff
