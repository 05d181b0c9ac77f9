#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "moeflow/error.hpp"
#include "moeflow/upcycle.hpp"

using namespace moeflow;

namespace {

Tensor randn(std::vector<std::size_t> shape, Rng& rng, double scale = 1.0) {
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = scale * rng.normal();
    return t;
}

std::set<std::size_t> as_set(const ExpertSubset& s) {
    return std::set<std::size_t>(s.indices.begin(), s.indices.end());
}

}  // namespace

TEST_CASE("subset draws are deterministic, in range, and distinct per expert") {
    const std::size_t d_ff = 64, d_e = 16;
    const ExpertSubset a = sample_expert_subset(3, d_ff, d_e, 7);
    const ExpertSubset b = sample_expert_subset(3, d_ff, d_e, 7);
    CHECK(a.indices == b.indices);
    CHECK(a.expert == 3);
    CHECK(a.indices.size() == d_e);
    CHECK(as_set(a).size() == d_e);  // no duplicates inside a subset
    for (std::size_t n : a.indices) {
        CHECK(n >= 1);
        CHECK(n <= d_ff);
    }
    const ExpertSubset other_expert = sample_expert_subset(4, d_ff, d_e, 7);
    const ExpertSubset other_seed = sample_expert_subset(3, d_ff, d_e, 8);
    CHECK(a.indices != other_expert.indices);
    CHECK(a.indices != other_seed.indices);
}

TEST_CASE("subset depends only on (seed, expert), not on batch context") {
    const std::vector<ExpertSubset> batch = sample_subsets(8, 64, 16, 7);
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const ExpertSubset solo = sample_expert_subset(i, 64, 16, 7);
        CHECK(batch[i].indices == solo.indices);
    }
}

TEST_CASE("batch sampling yields pairwise distinct sets") {
    for (std::uint64_t seed : {0ull, 1ull, 99ull}) {
        const std::vector<ExpertSubset> subs = sample_subsets(16, 32, 8, seed);
        std::set<std::set<std::size_t>> uniq;
        for (const ExpertSubset& s : subs) uniq.insert(as_set(s));
        CHECK(uniq.size() == 16);
    }
}

TEST_CASE("full-width subsets cannot be distinct") {
    // Every subset is {1..d_ff}, so the second expert exhausts its retries.
    CHECK_THROWS_AS(sample_subsets(2, 8, 8, 0), ContractError);
}

TEST_CASE("contiguous sampler takes wrapping slabs and refuses collisions") {
    const std::vector<ExpertSubset> subs =
        sample_subsets(4, 16, 6, 0, SubsetSampler::contiguous);
    CHECK(subs[0].indices == std::vector<std::size_t>{1, 2, 3, 4, 5, 6});
    CHECK(subs[1].indices == std::vector<std::size_t>{7, 8, 9, 10, 11, 12});
    CHECK(subs[2].indices == std::vector<std::size_t>{13, 14, 15, 16, 1, 2});
    CHECK(subs[3].indices == std::vector<std::size_t>{3, 4, 5, 6, 7, 8});
    // d_e == d_ff would give every expert the same slab.
    CHECK_THROWS_AS(sample_subsets(2, 8, 8, 0, SubsetSampler::contiguous), ConfigError);
}

TEST_CASE("magnitude sampler prefers heavy neurons") {
    const std::size_t d_ff = 40, d_e = 8;
    std::vector<double> mags(d_ff, 1e-6);
    for (std::size_t n = 0; n < 4; ++n) mags[5 + n] = 1e6;  // neurons 6..9 dominate
    const std::vector<ExpertSubset> subs =
        sample_subsets(3, d_ff, d_e, 11, SubsetSampler::magnitude, &mags);
    std::size_t heavy_hits = 0;
    for (const ExpertSubset& s : subs)
        for (std::size_t n : s.indices)
            if (n >= 6 && n <= 9) ++heavy_hits;
    // With a 1e12 weight ratio every heavy neuron lands in every subset; the
    // remaining light picks keep the sets distinct.
    CHECK(heavy_hits == 3 * 4);
    CHECK_THROWS_AS(sample_subsets(2, d_ff, d_e, 0, SubsetSampler::magnitude, nullptr),
                    ConfigError);
}

TEST_CASE("sliced expert computes the dense sub-network it names") {
    Rng rng(5);
    const std::size_t d = 6, d_ff = 20, d_e = 5;
    const Tensor up = randn({d, d_ff}, rng);
    const Tensor down = randn({d_ff, d}, rng);
    const ExpertSubset sub = sample_expert_subset(0, d_ff, d_e, 5);
    const ExpertWeights e = slice_expert_weights(up, down, sub);

    Tensor x = randn({std::size_t{3}, d}, rng);
    const Tensor got = expert_ffn(x, e, Act::gelu);

    // Reference: dense mid-activation, then only the chosen neurons feed out.
    for (std::size_t r = 0; r < 3; ++r)
        for (std::size_t c = 0; c < d; ++c) {
            double acc = 0;
            for (std::size_t k = 0; k < d_e; ++k) {
                const std::size_t n = sub.indices[k] - 1;
                double pre = 0;
                for (std::size_t j = 0; j < d; ++j) pre += x.at(r, j) * up.at(j, n);
                acc += act_apply(Act::gelu, pre) * down.at(n, c);
            }
            CHECK(std::fabs(got.at(r, c) - acc) < 1e-12);
        }
}

TEST_CASE("slice rejects out-of-range and mismatched shapes") {
    Rng rng(1);
    const Tensor up = randn({std::size_t{4}, std::size_t{10}}, rng);
    const Tensor down = randn({std::size_t{10}, std::size_t{4}}, rng);
    CHECK_THROWS_AS(slice_expert_weights(up, randn({std::size_t{9}, std::size_t{4}}, rng),
                                         ExpertSubset{0, {1}}),
                    ShapeError);
    CHECK_THROWS_AS(slice_expert_weights(up, down, ExpertSubset{0, {0}}), ContractError);
    CHECK_THROWS_AS(slice_expert_weights(up, down, ExpertSubset{0, {11}}), ContractError);
}

TEST_CASE("drop_reinit re-draws exactly the requested neuron count") {
    Rng rng(17);
    const std::size_t d = 8, d_e = 10;
    const ExpertWeights e{randn({d, d_e}, rng), randn({d_e, d}, rng)};
    for (double ratio : {0.0, 0.3, 0.5, 1.0}) {
        Rng dr(99);
        const ExpertWeights out = drop_reinit(e, ratio, dr);
        const std::size_t want = std::size_t(std::ceil(ratio * double(d_e)));
        std::size_t changed = 0;
        for (std::size_t k = 0; k < d_e; ++k) {
            bool col_same = true, row_same = true;
            for (std::size_t r = 0; r < d; ++r)
                if (out.w_up.at(r, k) != e.w_up.at(r, k)) col_same = false;
            for (std::size_t c = 0; c < d; ++c)
                if (out.w_down.at(k, c) != e.w_down.at(k, c)) row_same = false;
            CHECK(col_same == row_same);  // up column and down row move together
            if (!col_same) ++changed;
        }
        CHECK(changed == want);
    }
    Rng dr1(4), dr2(4);
    const ExpertWeights a = drop_reinit(e, 0.5, dr1);
    const ExpertWeights b = drop_reinit(e, 0.5, dr2);
    CHECK(std::equal(a.w_up.data(), a.w_up.data() + a.w_up.size(), b.w_up.data()));
}

TEST_CASE("coverage arithmetic") {
    std::vector<ExpertSubset> subs{{0, {1, 2, 3}}, {1, {3, 4}}};
    CHECK(coverage(subs, 8) == doctest::Approx(4.0 / 8.0));
    CHECK(expected_coverage(8, 8, 1) == doctest::Approx(1.0));
    CHECK(expected_coverage(1, 2, 2) == doctest::Approx(0.75));
    CHECK(oversampling_ratio(32, 56, 16) == doctest::Approx(16.0 * 32.0 / 56.0));

    // Random-subset coverage concentrates near the independence prediction.
    const std::size_t d_ff = 256, d_e = 32, n = 12;
    double mean_cov = 0;
    for (std::uint64_t seed = 0; seed < 20; ++seed)
        mean_cov += coverage(sample_subsets(n, d_ff, d_e, seed), d_ff);
    mean_cov /= 20;
    CHECK(std::fabs(mean_cov - expected_coverage(d_e, d_ff, n)) < 0.03);
}

TEST_CASE("block conversion slices experts and seeds the router") {
    Rng rng(3);
    const std::size_t d = 16, d_ff = 48;
    const Tensor up = randn({d, d_ff}, rng);
    const Tensor down = randn({d_ff, d}, rng);

    MoEConfig target;
    target.d_model = d;
    target.n_routed = 8;
    target.top_k = 2;
    target.d_expert = 6;
    target.n_shared = 1;
    target.d_shared = 12;

    UpcycleConfig ucfg;
    ucfg.n_routed = 8;
    ucfg.d_expert = 6;
    ucfg.base_seed = 21;
    ucfg.strategy = UpcycleStrategy::expert_attn;

    const UpcycleResult res = upcycle_ffn(up, down, ucfg, target);
    CHECK(res.weights.routed.size() == 8);
    CHECK(res.weights.shared.size() == 1);
    CHECK(res.routed_subsets.size() == 8);
    CHECK(res.shared_subsets.size() == 1);
    CHECK(res.shared_subsets[0].indices.size() == 12);
    CHECK(res.router.centroids.rows() == 8);
    CHECK(res.router.centroids.cols() == d);
    for (double b : res.router.biases) CHECK(b == 0.0);
    CHECK(res.coverage_fraction == coverage(res.routed_subsets, d_ff));

    // Routed experts are exactly the slices of their recorded subsets.
    for (std::size_t i = 0; i < 8; ++i) {
        const ExpertWeights ref = slice_expert_weights(up, down, res.routed_subsets[i]);
        CHECK(std::equal(ref.w_up.data(), ref.w_up.data() + ref.w_up.size(),
                         res.weights.routed[i].w_up.data()));
        CHECK(std::equal(ref.w_down.data(), ref.w_down.data() + ref.w_down.size(),
                         res.weights.routed[i].w_down.data()));
    }

    // Same seed reproduces everything; a different seed moves the centroids.
    const UpcycleResult again = upcycle_ffn(up, down, ucfg, target);
    CHECK(std::equal(res.router.centroids.data(),
                     res.router.centroids.data() + res.router.centroids.size(),
                     again.router.centroids.data()));
    UpcycleConfig reseeded = ucfg;
    reseeded.base_seed = 22;
    const UpcycleResult moved = upcycle_ffn(up, down, reseeded, target);
    CHECK(!std::equal(res.router.centroids.data(),
                      res.router.centroids.data() + res.router.centroids.size(),
                      moved.router.centroids.data()));
}

TEST_CASE("drop strategy changes the dropped fraction and nothing else") {
    Rng rng(9);
    const std::size_t d = 12, d_ff = 40;
    const Tensor up = randn({d, d_ff}, rng);
    const Tensor down = randn({d_ff, d}, rng);

    MoEConfig target;
    target.d_model = d;
    target.n_routed = 6;
    target.top_k = 2;
    target.d_expert = 8;
    target.n_shared = 1;
    target.d_shared = 16;

    UpcycleConfig keep;
    keep.n_routed = 6;
    keep.d_expert = 8;
    keep.base_seed = 5;
    keep.strategy = UpcycleStrategy::expert_attn;
    UpcycleConfig drop = keep;
    drop.strategy = UpcycleStrategy::expert_attn_drop;
    drop.drop_ratio = 0.25;

    const UpcycleResult a = upcycle_ffn(up, down, keep, target);
    const UpcycleResult b = upcycle_ffn(up, down, drop, target);
    // Same subsets either way; the drop happens after slicing.
    for (std::size_t i = 0; i < 6; ++i)
        CHECK(a.routed_subsets[i].indices == b.routed_subsets[i].indices);
    const std::size_t want = std::size_t(std::ceil(0.25 * 8.0));
    for (std::size_t i = 0; i < 6; ++i) {
        std::size_t changed = 0;
        for (std::size_t k = 0; k < 8; ++k) {
            bool same = true;
            for (std::size_t r = 0; r < d; ++r)
                if (a.weights.routed[i].w_up.at(r, k) != b.weights.routed[i].w_up.at(r, k))
                    same = false;
            if (!same) ++changed;
        }
        CHECK(changed == want);
    }
}

TEST_CASE("random-expert strategy ignores the dense FFN weights") {
    Rng rng(2);
    const std::size_t d = 10, d_ff = 30;
    const Tensor up = randn({d, d_ff}, rng);
    const Tensor up2 = randn({d, d_ff}, rng);
    const Tensor down = randn({d_ff, d}, rng);
    const Tensor down2 = randn({d_ff, d}, rng);

    MoEConfig target;
    target.d_model = d;
    target.n_routed = 4;
    target.top_k = 2;
    target.d_expert = 5;
    target.n_shared = 1;
    target.d_shared = 10;

    UpcycleConfig ucfg;
    ucfg.n_routed = 4;
    ucfg.d_expert = 5;
    ucfg.base_seed = 13;
    ucfg.strategy = UpcycleStrategy::attn_init;

    const UpcycleResult a = upcycle_ffn(up, down, ucfg, target);
    const UpcycleResult b = upcycle_ffn(up2, down2, ucfg, target);
    CHECK(a.routed_subsets.empty());
    CHECK(std::equal(a.weights.routed[0].w_up.data(),
                     a.weights.routed[0].w_up.data() + a.weights.routed[0].w_up.size(),
                     b.weights.routed[0].w_up.data()));
}

TEST_CASE("block conversion rejects inconsistent requests") {
    Rng rng(1);
    const Tensor up = randn({std::size_t{8}, std::size_t{24}}, rng);
    const Tensor down = randn({std::size_t{24}, std::size_t{8}}, rng);
    MoEConfig target;
    target.d_model = 8;
    target.n_routed = 4;
    target.top_k = 2;
    target.d_expert = 6;
    target.n_shared = 1;
    target.d_shared = 12;
    UpcycleConfig ucfg;
    ucfg.n_routed = 4;
    ucfg.d_expert = 6;

    ucfg.strategy = UpcycleStrategy::from_scratch;
    CHECK_THROWS_AS(upcycle_ffn(up, down, ucfg, target), ContractError);

    ucfg.strategy = UpcycleStrategy::expert_attn;
    UpcycleConfig wrong = ucfg;
    wrong.n_routed = 8;
    CHECK_THROWS_AS(upcycle_ffn(up, down, wrong, target), ConfigError);

    MoEConfig wide = target;
    wide.d_shared = 32;  // exceeds d_ff = 24
    CHECK_THROWS_AS(upcycle_ffn(up, down, ucfg, wide), ConfigError);

    MoEConfig off = target;
    off.d_model = 10;
    CHECK_THROWS_AS(upcycle_ffn(up, down, ucfg, off), ConfigError);
}

TEST_CASE("strategy and sampler names round-trip") {
    for (const char* n : {"from_scratch", "attn_init", "expert_attn", "expert_attn_drop"})
        CHECK(upcycle_strategy_to_string(upcycle_strategy_from_string(n)) == n);
    for (const char* n : {"random_perm", "contiguous", "magnitude"})
        CHECK(subset_sampler_to_string(subset_sampler_from_string(n)) == n);
    CHECK_THROWS_AS(upcycle_strategy_from_string("bogus"), ConfigError);
    CHECK_THROWS_AS(subset_sampler_from_string("bogus"), ConfigError);
}
