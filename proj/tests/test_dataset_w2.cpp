#include <doctest.h>

#include <cmath>
#include <vector>

#include "moeflow/dataset.hpp"
#include "moeflow/error.hpp"
#include "moeflow/rng.hpp"
#include "moeflow/w2.hpp"

using namespace moeflow;

namespace {

Tensor gaussian_cloud(std::size_t n, double mx, double my, double sigma, Rng& rng) {
    Tensor t({n, std::size_t{2}});
    for (std::size_t i = 0; i < n; ++i) {
        t.at(i, 0) = mx + sigma * rng.normal();
        t.at(i, 1) = my + sigma * rng.normal();
    }
    return t;
}

}  // namespace

TEST_CASE("datasets are deterministic in (name, n, seed)") {
    for (const char* name : {"gmm8", "checkerboard", "conditional_gmm"}) {
        const Dataset a = make_dataset(name, 200, 42);
        const Dataset b = make_dataset(name, 200, 42);
        const Dataset c = make_dataset(name, 200, 43);
        CHECK(a.x.rows() == 200);
        CHECK(a.x.cols() == 2);
        CHECK(a.labels.size() == 200);
        CHECK(std::equal(a.x.data(), a.x.data() + a.x.size(), b.x.data()));
        CHECK(a.labels == b.labels);
        CHECK(!std::equal(a.x.data(), a.x.data() + a.x.size(), c.x.data()));
    }
    CHECK_THROWS_AS(make_dataset("bogus", 10, 0), ConfigError);
}

TEST_CASE("gmm8 samples sit near their component means") {
    const Dataset d = make_dataset("gmm8", 2000, 7);
    CHECK(d.n_classes == 8);
    for (std::size_t i = 0; i < d.x.rows(); ++i) {
        const int l = d.labels[i];
        CHECK(l >= 0);
        CHECK(l < 8);
        const std::vector<double> m = component_mean("gmm8", l);
        const double dx = d.x.at(i, 0) - m[0], dy = d.x.at(i, 1) - m[1];
        CHECK(std::sqrt(dx * dx + dy * dy) < 6 * 0.3);  // 6 sigma
    }
    // Means lie on the radius-4 circle, equally spaced.
    for (int l = 0; l < 8; ++l) {
        const std::vector<double> m = component_mean("gmm8", l);
        CHECK(std::fabs(std::hypot(m[0], m[1]) - 4.0) < 1e-12);
    }
    // Every component appears with roughly uniform frequency.
    std::vector<int> counts(8, 0);
    for (int l : d.labels) ++counts[l];
    for (int c : counts) CHECK(c > 2000 / 8 / 2);
}

TEST_CASE("checkerboard points occupy the dark squares") {
    const Dataset d = make_dataset("checkerboard", 1000, 3);
    CHECK(d.n_classes == 1);
    for (std::size_t i = 0; i < d.x.rows(); ++i) {
        const double x = d.x.at(i, 0), y = d.x.at(i, 1);
        CHECK(x >= -4.0);
        CHECK(x <= 4.0);
        CHECK(y >= -4.0);
        CHECK(y <= 4.0);
        const int cx = int(std::floor((x + 4.0) / 2.0));
        const int cy = int(std::floor((y + 4.0) / 2.0));
        CHECK((cx + cy) % 2 == 0);
        CHECK(d.labels[i] == 0);
    }
}

TEST_CASE("conditional line dataset edits dim 0 and leaves dim 1 alone") {
    const Dataset d = make_dataset("conditional_gmm", 4000, 11);
    CHECK(d.n_classes == 8);
    double bg_mean = 0, bg_sq = 0;
    for (std::size_t i = 0; i < d.x.rows(); ++i) {
        const std::vector<double> m = component_mean("conditional_gmm", d.labels[i]);
        CHECK(std::fabs(d.x.at(i, 0) - m[0]) < 6 * 0.3);
        bg_mean += d.x.at(i, 1);
        bg_sq += d.x.at(i, 1) * d.x.at(i, 1);
    }
    bg_mean /= double(d.x.rows());
    bg_sq /= double(d.x.rows());
    CHECK(std::fabs(bg_mean) < 0.1);                    // N(0,1) background
    CHECK(std::fabs(std::sqrt(bg_sq - bg_mean * bg_mean) - 1.0) < 0.1);
    CHECK(component_mean("conditional_gmm", 0)[0] == doctest::Approx(-7.0));
    CHECK(component_mean("conditional_gmm", 7)[0] == doctest::Approx(7.0));
    CHECK(unedited_dims("conditional_gmm") == std::vector<std::size_t>{1});
    CHECK(unedited_dims("gmm8").empty());
    CHECK(unedited_dims("checkerboard").empty());
}

TEST_CASE("nearest component recovers the generating label") {
    for (const char* name : {"gmm8", "conditional_gmm"}) {
        const Dataset d = make_dataset(name, 500, 19);
        std::size_t hits = 0;
        for (std::size_t i = 0; i < d.x.rows(); ++i)
            if (nearest_component(name, d.n_classes, d.x.row(i)) == d.labels[i]) ++hits;
        // sigma 0.3 against spacing >= 2: misassignment is vanishingly rare.
        CHECK(hits >= 499);
    }
}

TEST_CASE("transport distance: identical clouds score zero") {
    Rng rng(1);
    const Tensor a = gaussian_cloud(100, 0, 0, 1.0, rng);
    const double w = eval_w2(a, a);
    CHECK(w >= 0.0);
    CHECK(w < 1e-3);  // debiasing cancels the regularization blur exactly
}

TEST_CASE("transport distance: singletons give the exact distance") {
    Tensor a({std::size_t{1}, std::size_t{2}});
    Tensor b({std::size_t{1}, std::size_t{2}});
    b.at(0, 0) = 3.0;
    b.at(0, 1) = 4.0;
    CHECK(eval_w2(a, b) == doctest::Approx(5.0).epsilon(1e-9));
}

TEST_CASE("transport distance tracks the shift between matched clouds") {
    Rng rng(2);
    const Tensor a = gaussian_cloud(400, 0, 0, 0.5, rng);
    for (double shift : {1.0, 2.0, 4.0}) {
        Rng r2(3);
        const Tensor b = gaussian_cloud(400, shift, 0, 0.5, r2);
        const double w = eval_w2(a, b);
        CHECK(std::fabs(w - shift) < 0.25);
    }
    // Monotone in the shift.
    Rng r2(3), r4(3);
    const Tensor b2 = gaussian_cloud(400, 2.0, 0, 0.5, r2);
    const Tensor b4 = gaussian_cloud(400, 4.0, 0, 0.5, r4);
    CHECK(eval_w2(a, b2) < eval_w2(a, b4));
}

TEST_CASE("transport distance is symmetric and deterministic") {
    Rng rng(5);
    const Tensor a = gaussian_cloud(150, 0, 0, 1.0, rng);
    const Tensor b = gaussian_cloud(120, 1.0, -0.5, 0.8, rng);
    const double ab = eval_w2(a, b);
    const double ba = eval_w2(b, a);
    CHECK(std::fabs(ab - ba) < 1e-9);
    CHECK(eval_w2(a, b) == ab);  // bit-stable across calls
}

TEST_CASE("oversized clouds are thinned deterministically") {
    Rng rng(6);
    const Tensor big = gaussian_cloud(3000, 0, 0, 1.0, rng);
    const Tensor small = gaussian_cloud(300, 0.5, 0, 1.0, rng);
    const double w1 = eval_w2(big, small);
    const double w2 = eval_w2(big, small);
    CHECK(w1 == w2);
    CHECK(w1 > 0.0);
    // Thinning must not change the answer much relative to a manual cap.
    W2Config tight;
    tight.cap = 256;
    const double w3 = eval_w2(big, small, tight);
    CHECK(std::fabs(w3 - w1) < 0.15);
}

TEST_CASE("transport distance input contracts") {
    Tensor a({std::size_t{4}, std::size_t{2}});
    Tensor b({std::size_t{4}, std::size_t{3}});
    Tensor empty({std::size_t{0}, std::size_t{2}});
    CHECK_THROWS_AS(eval_w2(a, b), ShapeError);
    CHECK_THROWS_AS(eval_w2(empty, a), ContractError);
}
