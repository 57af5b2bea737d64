#include "sketchdiff/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "sketchdiff/rng.hpp"

namespace sketchdiff {

namespace {

constexpr double kEigenFloor = 1e-10;

Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
    Eigen::VectorXd ev = es.eigenvalues();
    for (Eigen::Index i = 0; i < ev.size(); ++i) ev[i] = ev[i] < kEigenFloor ? 0.0 : std::sqrt(ev[i]);
    return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

void check_stats(const FeatureStats& s, const char* which) {
    if (s.sigma.rows() != s.mu.size() || s.sigma.cols() != s.mu.size()) {
        throw std::invalid_argument(std::string("frechet_distance: ") + which + " covariance/mean size mismatch");
    }
    if (!s.mu.allFinite() || !s.sigma.allFinite()) {
        throw std::invalid_argument(std::string("frechet_distance: ") + which + " stats are not finite");
    }
}

}  // namespace

RandomProjectionEmbedder::RandomProjectionEmbedder(std::uint64_t seed, int d) : seed_(seed) {
    if (d < 1) throw std::invalid_argument("embedder dimension must be >= 1");
    constexpr int in = kThumb * kThumb * 3;
    projection_.resize(d, in);
    Rng rng(seed);
    const double scale = 1.0 / std::sqrt(static_cast<double>(in));
    for (int r = 0; r < d; ++r)
        for (int c = 0; c < in; ++c) projection_(r, c) = rng.normal() * scale;
}

std::string RandomProjectionEmbedder::id() const {
    return "randproj-s" + std::to_string(seed_) + "-d" + std::to_string(projection_.rows());
}

Eigen::VectorXd RandomProjectionEmbedder::embed(const ImageBuffer& img) const {
    if (img.channels() != 3) throw ShapeError("embedder expects 3-channel images");
    const ImageBuffer thumb = resize_bilinear(img, kThumb, kThumb);
    Eigen::VectorXd flat(thumb.size());
    for (std::size_t i = 0; i < thumb.size(); ++i) flat[static_cast<Eigen::Index>(i)] = thumb.values()[i];
    return projection_ * flat;
}

std::string FlattenEmbedder::id() const {
    return "flatten-" + std::to_string(h_) + "x" + std::to_string(w_) + "x" + std::to_string(c_);
}

Eigen::VectorXd FlattenEmbedder::embed(const ImageBuffer& img) const {
    if (img.height() != h_ || img.width() != w_ || img.channels() != c_) {
        throw ShapeError("flatten embedder: unexpected shape " + img.shape_string());
    }
    Eigen::VectorXd v(img.size());
    for (std::size_t i = 0; i < img.size(); ++i) v[static_cast<Eigen::Index>(i)] = img.values()[i];
    return v;
}

std::unique_ptr<Embedder> default_embedder(std::uint64_t seed, int d) {
    return std::make_unique<RandomProjectionEmbedder>(seed, d);
}

FeatureStats feature_stats_from_vectors(std::span<const Eigen::VectorXd> features) {
    if (features.size() < 2) throw std::invalid_argument("feature_stats needs at least 2 samples");
    const Eigen::Index d = features[0].size();
    FeatureStats s;
    s.n = features.size();
    s.mu = Eigen::VectorXd::Zero(d);
    for (const auto& f : features) {
        if (f.size() != d) throw std::invalid_argument("feature_stats: inconsistent feature dimension");
        s.mu += f;
    }
    s.mu /= static_cast<double>(s.n);
    s.sigma = Eigen::MatrixXd::Zero(d, d);
    for (const auto& f : features) {
        const Eigen::VectorXd c = f - s.mu;
        s.sigma.noalias() += c * c.transpose();
    }
    s.sigma /= static_cast<double>(s.n - 1);
    s.sigma = 0.5 * (s.sigma + s.sigma.transpose()).eval();
    return s;
}

FeatureStats feature_stats(std::span<const ImageBuffer> images, const Embedder& emb) {
    if (images.size() < 2) throw std::invalid_argument("feature_stats needs at least 2 images");
    std::vector<Eigen::VectorXd> feats;
    feats.reserve(images.size());
    for (const auto& img : images) feats.push_back(emb.embed(img));
    return feature_stats_from_vectors(feats);
}

double frechet_distance(const FeatureStats& a, const FeatureStats& b) {
    check_stats(a, "first");
    check_stats(b, "second");
    if (a.mu.size() != b.mu.size()) {
        throw std::invalid_argument("frechet_distance: dimension mismatch " + std::to_string(a.mu.size()) +
                                    " vs " + std::to_string(b.mu.size()));
    }
    const Eigen::MatrixXd sa = 0.5 * (a.sigma + a.sigma.transpose());
    const Eigen::MatrixXd sb = 0.5 * (b.sigma + b.sigma.transpose());
    const Eigen::MatrixXd root_a = psd_sqrt(sa);
    Eigen::MatrixXd inner = root_a * sb * root_a;
    inner = 0.5 * (inner + inner.transpose()).eval();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(inner, Eigen::EigenvaluesOnly);
    double trace_sqrt = 0.0;
    for (Eigen::Index i = 0; i < es.eigenvalues().size(); ++i) {
        const double ev = es.eigenvalues()[i];
        if (ev >= kEigenFloor) trace_sqrt += std::sqrt(ev);
    }
    const double mean_term = (a.mu - b.mu).squaredNorm();
    const double d = mean_term + sa.trace() + sb.trace() - 2.0 * trace_sqrt;
    return std::max(d, 0.0);
}

double perceptual_distance(const ImageBuffer& x, const ImageBuffer& y, const Embedder& emb) {
    require_same_shape(x, y, "perceptual_distance");
    if (x.height() % kPatchSize != 0 || x.width() % kPatchSize != 0) {
        throw std::invalid_argument("perceptual_distance: image size must be divisible by 8");
    }
    const int ph = x.height() / kPatchSize, pw = x.width() / kPatchSize;
    auto patch = [&](const ImageBuffer& img, int py, int px) {
        ImageBuffer p(kPatchSize, kPatchSize, img.channels());
        for (int yy = 0; yy < kPatchSize; ++yy)
            for (int xx = 0; xx < kPatchSize; ++xx)
                for (int c = 0; c < img.channels(); ++c)
                    p.at(yy, xx, c) = img.at(py * kPatchSize + yy, px * kPatchSize + xx, c);
        return p;
    };
    double total = 0.0;
    for (int py = 0; py < ph; ++py)
        for (int px = 0; px < pw; ++px) {
            const Eigen::VectorXd ex = emb.embed(patch(x, py, px));
            const Eigen::VectorXd ey = emb.embed(patch(y, py, px));
            total += (ex - ey).norm();
        }
    return total / (static_cast<double>(ph) * pw) / std::sqrt(static_cast<double>(emb.dim()));
}

}  // namespace sketchdiff
