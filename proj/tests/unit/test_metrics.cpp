#include <doctest.h>

#include <cmath>

#include "sketchdiff/metrics.hpp"
#include "../support/stubs.hpp"

using namespace sketchdiff;
using namespace sketchdiff::testing;

namespace {

FeatureStats gaussian(const Eigen::VectorXd& mu, const Eigen::MatrixXd& sigma) {
    FeatureStats s;
    s.mu = mu;
    s.sigma = sigma;
    s.n = 100;
    return s;
}

Eigen::MatrixXd random_spd(int d, std::uint64_t seed) {
    Rng rng(seed);
    Eigen::MatrixXd a(d, d);
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j) a(i, j) = rng.normal();
    return a * a.transpose() / d + 0.1 * Eigen::MatrixXd::Identity(d, d);
}

Eigen::VectorXd random_vec(int d, std::uint64_t seed) {
    Rng rng(seed);
    Eigen::VectorXd v(d);
    for (int i = 0; i < d; ++i) v(i) = rng.normal();
    return v;
}

// Denman-Beavers iteration for the principal square root of a matrix with
// positive real spectrum; applied directly to the non-symmetric product.
Eigen::MatrixXd denman_beavers_sqrt(const Eigen::MatrixXd& m) {
    Eigen::MatrixXd y = m;
    Eigen::MatrixXd z = Eigen::MatrixXd::Identity(m.rows(), m.cols());
    for (int i = 0; i < 100; ++i) {
        const Eigen::MatrixXd yi = y.inverse();
        const Eigen::MatrixXd zi = z.inverse();
        const Eigen::MatrixXd y2 = 0.5 * (y + zi);
        z = 0.5 * (z + yi);
        const double delta = (y2 - y).norm();
        y = y2;
        if (delta < 1e-14 * y.norm()) break;
    }
    return y;
}

double oracle_frechet(const FeatureStats& a, const FeatureStats& b) {
    const Eigen::MatrixXd root = denman_beavers_sqrt(a.sigma * b.sigma);
    return (a.mu - b.mu).squaredNorm() + (a.sigma + b.sigma - 2.0 * root).trace();
}

}  // namespace

TEST_SUITE("frechet distance") {
    TEST_CASE("mean shift with identical covariance") {
        Eigen::VectorXd m = Eigen::VectorXd::Zero(4);
        m(0) = 3.0;
        m(1) = 4.0;
        const Eigen::MatrixXd s = random_spd(4, 2);
        CHECK(frechet_distance(gaussian(Eigen::VectorXd::Zero(4), s), gaussian(m, s)) ==
              doctest::Approx(25.0).epsilon(1e-9));
    }

    TEST_CASE("scaled identity covariances give the dimension") {
        for (int d : {2, 8, 64}) {
            INFO(d);
            const Eigen::VectorXd z = Eigen::VectorXd::Zero(d);
            const double f = frechet_distance(gaussian(z, 4.0 * Eigen::MatrixXd::Identity(d, d)),
                                              gaussian(z, Eigen::MatrixXd::Identity(d, d)));
            CHECK(f == doctest::Approx(static_cast<double>(d)).epsilon(1e-9));
        }
    }

    TEST_CASE("self distance is zero and the distance is symmetric") {
        for (std::uint64_t seed : {1u, 2u, 3u}) {
            const FeatureStats a = gaussian(random_vec(16, seed), random_spd(16, seed + 10));
            const FeatureStats b = gaussian(random_vec(16, seed + 20), random_spd(16, seed + 30));
            CHECK(std::abs(frechet_distance(a, a)) < 1e-6);
            CHECK(frechet_distance(a, b) == doctest::Approx(frechet_distance(b, a)).epsilon(1e-9));
            CHECK(frechet_distance(a, b) > 0.0);
        }
    }

    TEST_CASE("matches a Denman-Beavers oracle at d = 8") {
        for (std::uint64_t seed : {5u, 6u, 7u, 8u}) {
            const FeatureStats a = gaussian(random_vec(8, seed), random_spd(8, seed + 1));
            const FeatureStats b = gaussian(random_vec(8, seed + 2), random_spd(8, seed + 3));
            CHECK(frechet_distance(a, b) == doctest::Approx(oracle_frechet(a, b)).epsilon(1e-8));
        }
    }

    TEST_CASE("rank-deficient covariances are handled") {
        Eigen::MatrixXd s = Eigen::MatrixXd::Zero(5, 5);
        s(0, 0) = 1.0;
        const Eigen::VectorXd z = Eigen::VectorXd::Zero(5);
        CHECK(std::abs(frechet_distance(gaussian(z, s), gaussian(z, s))) < 1e-9);
        // trace(S + 0 - 0) = 1
        CHECK(frechet_distance(gaussian(z, s), gaussian(z, Eigen::MatrixXd::Zero(5, 5))) ==
              doctest::Approx(1.0).epsilon(1e-9));
    }

    TEST_CASE("errors") {
        const FeatureStats a = gaussian(Eigen::VectorXd::Zero(3), Eigen::MatrixXd::Identity(3, 3));
        const FeatureStats b = gaussian(Eigen::VectorXd::Zero(4), Eigen::MatrixXd::Identity(4, 4));
        CHECK_THROWS_AS(frechet_distance(a, b), std::invalid_argument);
        FeatureStats bad = a;
        bad.sigma(0, 0) = std::nan("");
        CHECK_THROWS_AS(frechet_distance(a, bad), std::invalid_argument);
        FeatureStats odd = a;
        odd.sigma = Eigen::MatrixXd::Identity(2, 2);
        CHECK_THROWS_AS(frechet_distance(odd, a), std::invalid_argument);
    }
}

TEST_SUITE("feature statistics") {
    TEST_CASE("sample mean and unbiased covariance") {
        std::vector<Eigen::VectorXd> f(3, Eigen::VectorXd(2));
        f[0] << 1, 2;
        f[1] << 3, 6;
        f[2] << 5, 4;
        const FeatureStats s = feature_stats_from_vectors(f);
        CHECK(s.n == 3);
        CHECK(s.mu(0) == doctest::Approx(3.0));
        CHECK(s.mu(1) == doctest::Approx(4.0));
        // deviations (-2,-2), (0,2), (2,0); divide by n-1 = 2
        CHECK(s.sigma(0, 0) == doctest::Approx(4.0));
        CHECK(s.sigma(1, 1) == doctest::Approx(4.0));
        CHECK(s.sigma(0, 1) == doctest::Approx(2.0));
        CHECK(s.sigma(1, 0) == s.sigma(0, 1));
    }

    TEST_CASE("errors") {
        std::vector<Eigen::VectorXd> one(1, Eigen::VectorXd::Zero(2));
        CHECK_THROWS_AS(feature_stats_from_vectors(one), std::invalid_argument);
        std::vector<Eigen::VectorXd> mixed = {Eigen::VectorXd::Zero(2), Eigen::VectorXd::Zero(3)};
        CHECK_THROWS_AS(feature_stats_from_vectors(mixed), std::invalid_argument);
        std::vector<ImageBuffer> imgs = {random_image(8, 8, 3, 1)};
        CHECK_THROWS_AS(feature_stats(imgs, RandomProjectionEmbedder(0, 4)), std::invalid_argument);
    }

    TEST_CASE("image statistics go through the embedder") {
        std::vector<ImageBuffer> imgs;
        for (int i = 0; i < 5; ++i) imgs.push_back(random_image(4, 4, 3, i));
        const FlattenEmbedder emb(4, 4, 3);
        std::vector<Eigen::VectorXd> v;
        for (const auto& im : imgs) v.push_back(emb.embed(im));
        const FeatureStats a = feature_stats(imgs, emb);
        const FeatureStats b = feature_stats_from_vectors(v);
        CHECK((a.mu - b.mu).norm() < 1e-12);
        CHECK((a.sigma - b.sigma).norm() < 1e-12);
        CHECK(a.dim() == 48);
    }
}

TEST_SUITE("embedders") {
    TEST_CASE("random projection is seeded, linear in the thumbnail and scaled") {
        const RandomProjectionEmbedder e(3, 16);
        CHECK(e.dim() == 16);
        CHECK(e.id() == "randproj-s3-d16");
        CHECK(e.projection() == RandomProjectionEmbedder(3, 16).projection());
        CHECK_FALSE(e.projection() == RandomProjectionEmbedder(4, 16).projection());
        // Entries are N(0, 1/768).
        const double var = e.projection().array().square().mean();
        CHECK(var * 768 == doctest::Approx(1.0).epsilon(0.1));

        const ImageBuffer a = random_image(16, 16, 3, 1), b = random_image(16, 16, 3, 2);
        ImageBuffer mix(16, 16, 3);
        for (std::size_t i = 0; i < mix.size(); ++i) mix.values()[i] = 0.3f * a.values()[i] - 0.7f * b.values()[i];
        const Eigen::VectorXd lhs = e.embed(mix);
        const Eigen::VectorXd rhs = 0.3 * e.embed(a) - 0.7 * e.embed(b);
        CHECK((lhs - rhs).norm() < 1e-5);

        // At 16x16 the thumbnail is the image itself.
        Eigen::VectorXd flat(768);
        for (int i = 0; i < 768; ++i) flat(i) = a.values()[static_cast<std::size_t>(i)];
        CHECK((e.embed(a) - e.projection() * flat).norm() < 1e-9);
        CHECK_THROWS_AS(e.embed(ImageBuffer(16, 16, 1)), ShapeError);
        CHECK_THROWS_AS(RandomProjectionEmbedder(0, 0), std::invalid_argument);
    }

    TEST_CASE("default embedder is the seeded projection") {
        const auto e = default_embedder();
        CHECK(e->dim() == 64);
        CHECK(e->id() == "randproj-s0-d64");
    }

    TEST_CASE("flatten embedder") {
        const FlattenEmbedder e(2, 2, 3);
        const ImageBuffer img = random_image(2, 2, 3, 1);
        const Eigen::VectorXd v = e.embed(img);
        for (int i = 0; i < 12; ++i) CHECK(v(i) == img.values()[static_cast<std::size_t>(i)]);
        CHECK_THROWS_AS(e.embed(ImageBuffer(2, 3, 3)), ShapeError);
    }
}

TEST_SUITE("perceptual distance") {
    TEST_CASE("uniform offset under the flatten embedder") {
        const ImageBuffer x = random_image(16, 24, 3, 1, -0.5, 0.5);
        ImageBuffer y = x;
        for (auto& v : y.values()) v += 0.5f;
        const FlattenEmbedder e(8, 8, 3);
        CHECK(perceptual_distance(x, y, e) == doctest::Approx(0.5).epsilon(1e-6));
        CHECK(perceptual_distance(y, x, e) == doctest::Approx(0.5).epsilon(1e-6));
        CHECK(perceptual_distance(x, x, e) == 0.0);
    }

    TEST_CASE("mean over patches") {
        // Only one of four patches differs, by 1.0 everywhere: distance 1/4.
        const ImageBuffer x(16, 16, 3, 0.0f);
        ImageBuffer y = x;
        for (int r = 8; r < 16; ++r)
            for (int c = 0; c < 8; ++c)
                for (int k = 0; k < 3; ++k) y.at(r, c, k) = 1.0f;
        CHECK(perceptual_distance(x, y, FlattenEmbedder(8, 8, 3)) == doctest::Approx(0.25).epsilon(1e-9));
    }

    TEST_CASE("symmetric and non-negative under the default embedder") {
        const auto e = default_embedder();
        const ImageBuffer a = random_image(32, 32, 3, 1), b = random_image(32, 32, 3, 2);
        const double d = perceptual_distance(a, b, *e);
        CHECK(d > 0.0);
        CHECK(d == doctest::Approx(perceptual_distance(b, a, *e)).epsilon(1e-12));
    }

    TEST_CASE("errors") {
        const FlattenEmbedder e(8, 8, 3);
        CHECK_THROWS(perceptual_distance(ImageBuffer(12, 16, 3), ImageBuffer(12, 16, 3), e));
        CHECK_THROWS(perceptual_distance(ImageBuffer(16, 16, 3), ImageBuffer(8, 16, 3), e));
    }
}
