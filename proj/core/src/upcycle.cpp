#include "moeflow/upcycle.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "moeflow/error.hpp"

namespace moeflow {

namespace {

// Substream tags. Subset draws use the expert index directly so that a
// subset depends only on (base_seed, expert); everything else gets a tag
// far outside the expert index range.
constexpr std::uint64_t kRetryStride = 1ull << 48;
constexpr std::uint64_t kTagCentroids = 0xC0ull << 40;
constexpr std::uint64_t kTagRandomRouted = 0xE0ull << 40;
constexpr std::uint64_t kTagRandomShared = 0xE1ull << 40;
constexpr std::uint64_t kTagDropRouted = 0xD0ull << 40;
constexpr std::uint64_t kTagDropShared = 0xD1ull << 40;
constexpr std::uint64_t kTagSharedSubset = 0x51ull << 40;

std::vector<std::size_t> subset_sorted(const ExpertSubset& s) {
    std::vector<std::size_t> v = s.indices;
    std::sort(v.begin(), v.end());
    return v;
}

ExpertSubset draw_random_subset(std::size_t expert, std::size_t d_ff, std::size_t d_e,
                                std::uint64_t base_seed, std::uint64_t tag) {
    Rng stream = Rng(base_seed).fork(tag);
    std::vector<std::size_t> perm = seeded_permutation(d_ff, stream);
    perm.resize(d_e);
    return {expert, std::move(perm)};
}

ExpertSubset draw_contiguous_subset(std::size_t expert, std::size_t d_ff, std::size_t d_e) {
    ExpertSubset s{expert, {}};
    s.indices.reserve(d_e);
    const std::size_t start = (expert * d_e) % d_ff;
    for (std::size_t j = 0; j < d_e; ++j) s.indices.push_back((start + j) % d_ff + 1);
    return s;
}

// Weighted sampling without replacement (exponential keys): neuron n wins
// with key -log(u_n) / w_n; the d_e smallest keys are kept, ordered by key.
ExpertSubset draw_magnitude_subset(std::size_t expert, std::size_t d_ff, std::size_t d_e,
                                   std::uint64_t base_seed, std::uint64_t tag,
                                   const std::vector<double>& w) {
    Rng stream = Rng(base_seed).fork(tag);
    std::vector<std::pair<double, std::size_t>> keys;
    keys.reserve(d_ff);
    for (std::size_t n = 0; n < d_ff; ++n) {
        const double u = stream.uniform();
        const double weight = std::max(w[n], 1e-300);
        keys.emplace_back(-std::log1p(-u) / weight, n + 1);
    }
    std::sort(keys.begin(), keys.end());
    ExpertSubset s{expert, {}};
    s.indices.reserve(d_e);
    for (std::size_t j = 0; j < d_e; ++j) s.indices.push_back(keys[j].second);
    return s;
}

void fill_normal(Tensor& t, double scale, Rng& rng) {
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = scale * rng.normal();
}

}  // namespace

UpcycleStrategy upcycle_strategy_from_string(const std::string& name) {
    if (name == "from_scratch") return UpcycleStrategy::from_scratch;
    if (name == "attn_init") return UpcycleStrategy::attn_init;
    if (name == "expert_attn") return UpcycleStrategy::expert_attn;
    if (name == "expert_attn_drop") return UpcycleStrategy::expert_attn_drop;
    throw ConfigError("unknown upcycle strategy: " + name);
}

std::string upcycle_strategy_to_string(UpcycleStrategy s) {
    switch (s) {
        case UpcycleStrategy::from_scratch: return "from_scratch";
        case UpcycleStrategy::attn_init: return "attn_init";
        case UpcycleStrategy::expert_attn: return "expert_attn";
        case UpcycleStrategy::expert_attn_drop: return "expert_attn_drop";
    }
    return "?";
}

SubsetSampler subset_sampler_from_string(const std::string& name) {
    if (name == "random_perm") return SubsetSampler::random_perm;
    if (name == "contiguous") return SubsetSampler::contiguous;
    if (name == "magnitude") return SubsetSampler::magnitude;
    throw ConfigError("unknown subset sampler: " + name);
}

std::string subset_sampler_to_string(SubsetSampler s) {
    switch (s) {
        case SubsetSampler::random_perm: return "random_perm";
        case SubsetSampler::contiguous: return "contiguous";
        case SubsetSampler::magnitude: return "magnitude";
    }
    return "?";
}

void UpcycleConfig::validate() const {
    if (n_routed == 0) throw ConfigError("upcycle: n_routed must be positive");
    if (d_expert == 0) throw ConfigError("upcycle: d_expert must be positive");
    if (drop_ratio < 0.0 || drop_ratio > 1.0)
        throw ConfigError("upcycle: drop_ratio must lie in [0, 1]");
}

ExpertSubset sample_expert_subset(std::size_t expert, std::size_t d_ff, std::size_t d_e,
                                  std::uint64_t base_seed) {
    if (d_e > d_ff) throw ConfigError("expert width exceeds dense FFN width");
    if (d_e == 0) throw ConfigError("expert width must be positive");
    return draw_random_subset(expert, d_ff, d_e, base_seed, expert);
}

std::vector<ExpertSubset> sample_subsets(std::size_t n_routed, std::size_t d_ff, std::size_t d_e,
                                         std::uint64_t base_seed, SubsetSampler sampler,
                                         const std::vector<double>* magnitudes) {
    if (d_e > d_ff) throw ConfigError("expert width exceeds dense FFN width");
    if (d_e == 0 || n_routed == 0) throw ConfigError("empty subset request");
    if (sampler == SubsetSampler::magnitude &&
        (magnitudes == nullptr || magnitudes->size() != d_ff))
        throw ConfigError("magnitude sampler needs one score per dense neuron");

    std::vector<ExpertSubset> out;
    out.reserve(n_routed);
    std::set<std::vector<std::size_t>> seen;
    for (std::size_t i = 0; i < n_routed; ++i) {
        ExpertSubset s;
        bool placed = false;
        for (std::uint64_t attempt = 0; attempt < 1000; ++attempt) {
            const std::uint64_t tag = i + attempt * kRetryStride;
            switch (sampler) {
                case SubsetSampler::random_perm:
                    s = draw_random_subset(i, d_ff, d_e, base_seed, tag);
                    break;
                case SubsetSampler::contiguous:
                    s = draw_contiguous_subset(i, d_ff, d_e);
                    break;
                case SubsetSampler::magnitude:
                    s = draw_magnitude_subset(i, d_ff, d_e, base_seed, tag, *magnitudes);
                    break;
            }
            if (seen.insert(subset_sorted(s)).second) {
                placed = true;
                break;
            }
            if (sampler == SubsetSampler::contiguous)
                throw ConfigError("contiguous sampler repeats a subset at expert " +
                                  std::to_string(i));
        }
        if (!placed) throw ContractError("subset sampling failed to find a distinct set");
        out.push_back(std::move(s));
    }
    return out;
}

std::vector<double> neuron_magnitudes(const Tensor& w_up, const Tensor& w_down) {
    if (w_up.cols() != w_down.rows())
        throw ShapeError("neuron_magnitudes: " + shape_str(w_up.shape()) + " vs " +
                         shape_str(w_down.shape()));
    const std::size_t d_ff = w_up.cols();
    std::vector<double> mag(d_ff);
    for (std::size_t n = 0; n < d_ff; ++n) {
        double up = 0, down = 0;
        for (std::size_t r = 0; r < w_up.rows(); ++r) up += w_up.at(r, n) * w_up.at(r, n);
        for (std::size_t c = 0; c < w_down.cols(); ++c) down += w_down.at(n, c) * w_down.at(n, c);
        mag[n] = std::sqrt(up) * std::sqrt(down);
    }
    return mag;
}

ExpertWeights slice_expert_weights(const Tensor& w_up, const Tensor& w_down,
                                   const ExpertSubset& subset) {
    const std::size_t d = w_up.rows(), d_ff = w_up.cols(), d_e = subset.indices.size();
    if (w_down.rows() != d_ff || w_down.cols() != d)
        throw ShapeError("slice_expert_weights: " + shape_str(w_up.shape()) + " vs " +
                         shape_str(w_down.shape()));
    ExpertWeights e{Tensor({d, d_e}), Tensor({d_e, d})};
    for (std::size_t k = 0; k < d_e; ++k) {
        const std::size_t n = subset.indices[k];
        if (n == 0 || n > d_ff) throw ContractError("subset index out of range");
        for (std::size_t r = 0; r < d; ++r) e.w_up.at(r, k) = w_up.at(r, n - 1);
        for (std::size_t c = 0; c < d; ++c) e.w_down.at(k, c) = w_down.at(n - 1, c);
    }
    return e;
}

ExpertWeights drop_reinit(const ExpertWeights& e, double ratio, Rng& rng) {
    if (ratio < 0.0 || ratio > 1.0) throw ConfigError("drop ratio must lie in [0, 1]");
    const std::size_t d = e.w_up.rows(), d_e = e.w_up.cols();
    ExpertWeights out{e.w_up, e.w_down};
    const std::size_t n_drop = static_cast<std::size_t>(std::ceil(ratio * double(d_e)));
    if (n_drop == 0) return out;
    std::vector<std::size_t> pos = seeded_permutation(d_e, rng);
    const double up_scale = 1.0 / std::sqrt(double(d));
    const double down_scale = 1.0 / std::sqrt(double(d_e));
    for (std::size_t j = 0; j < n_drop; ++j) {
        const std::size_t k = pos[j] - 1;
        for (std::size_t r = 0; r < d; ++r) out.w_up.at(r, k) = up_scale * rng.normal();
        for (std::size_t c = 0; c < d; ++c) out.w_down.at(k, c) = down_scale * rng.normal();
    }
    return out;
}

double coverage(const std::vector<ExpertSubset>& subsets, std::size_t d_ff) {
    if (d_ff == 0) throw ConfigError("coverage of an empty FFN");
    std::set<std::size_t> covered;
    for (const ExpertSubset& s : subsets)
        for (std::size_t n : s.indices) {
            if (n == 0 || n > d_ff) throw ContractError("subset index out of range");
            covered.insert(n);
        }
    return double(covered.size()) / double(d_ff);
}

double expected_coverage(std::size_t d_e, std::size_t d_ff, std::size_t n_routed) {
    if (d_e > d_ff || d_ff == 0) throw ConfigError("expected_coverage: d_e must fit in d_ff");
    return 1.0 - std::pow(1.0 - double(d_e) / double(d_ff), double(n_routed));
}

double oversampling_ratio(std::size_t d_e, std::size_t d_ff, std::size_t n_routed) {
    if (d_ff == 0) throw ConfigError("oversampling_ratio: empty FFN");
    return double(n_routed) * double(d_e) / double(d_ff);
}

ExpertWeights random_expert_weights(std::size_t d_model, std::size_t width, Rng& rng) {
    ExpertWeights e{Tensor({d_model, width}), Tensor({width, d_model})};
    fill_normal(e.w_up, 1.0 / std::sqrt(double(d_model)), rng);
    fill_normal(e.w_down, 1.0 / std::sqrt(double(width)), rng);
    return e;
}

UpcycleResult upcycle_ffn(const Tensor& dense_up, const Tensor& dense_down,
                          const UpcycleConfig& ucfg, const MoEConfig& target) {
    ucfg.validate();
    target.validate();
    if (ucfg.strategy == UpcycleStrategy::from_scratch)
        throw ContractError("from_scratch has no dense inputs; use a fresh model init");
    if (ucfg.n_routed != target.n_routed || ucfg.d_expert != target.d_expert)
        throw ConfigError("upcycle config does not match the target block");
    const std::size_t d_ff = dense_up.cols();
    const std::size_t d = dense_up.rows();
    if (d != target.d_model) throw ConfigError("dense block width does not match the target");

    const Rng root(ucfg.base_seed);
    UpcycleResult res;
    Rng centroid_rng = root.fork(kTagCentroids);
    res.router = RouterState::init(target.router_config(), centroid_rng);

    const bool sliced = ucfg.strategy == UpcycleStrategy::expert_attn ||
                        ucfg.strategy == UpcycleStrategy::expert_attn_drop;
    if (sliced) {
        std::vector<double> mags;
        const std::vector<double>* mag_ptr = nullptr;
        if (ucfg.sampler == SubsetSampler::magnitude) {
            mags = neuron_magnitudes(dense_up, dense_down);
            mag_ptr = &mags;
        }
        res.routed_subsets =
            sample_subsets(ucfg.n_routed, d_ff, ucfg.d_expert, ucfg.base_seed, ucfg.sampler, mag_ptr);
        for (const ExpertSubset& s : res.routed_subsets)
            res.weights.routed.push_back(slice_expert_weights(dense_up, dense_down, s));
        // Shared experts sample from the same pool; their width is larger so
        // they cannot collide with routed subsets, only with each other.
        const std::size_t d_s = target.shared_width();
        if (d_s > d_ff) throw ConfigError("shared expert width exceeds the dense FFN");
        std::set<std::vector<std::size_t>> seen;
        for (std::size_t j = 0; j < target.n_shared; ++j) {
            ExpertSubset s;
            for (std::uint64_t attempt = 0;; ++attempt) {
                if (attempt >= 1000)
                    throw ContractError("shared subset sampling failed to find a distinct set");
                s = draw_random_subset(ucfg.n_routed + j, d_ff, d_s, ucfg.base_seed,
                                       kTagSharedSubset + j + attempt * kRetryStride);
                if (seen.insert(subset_sorted(s)).second) break;
            }
            res.shared_subsets.push_back(s);
            res.weights.shared.push_back(slice_expert_weights(dense_up, dense_down, s));
        }
        if (ucfg.strategy == UpcycleStrategy::expert_attn_drop) {
            for (std::size_t i = 0; i < res.weights.routed.size(); ++i) {
                Rng dr = root.fork(kTagDropRouted + i);
                res.weights.routed[i] = drop_reinit(res.weights.routed[i], ucfg.drop_ratio, dr);
            }
            for (std::size_t j = 0; j < res.weights.shared.size(); ++j) {
                Rng dr = root.fork(kTagDropShared + j);
                res.weights.shared[j] = drop_reinit(res.weights.shared[j], ucfg.drop_ratio, dr);
            }
        }
        res.coverage_fraction = coverage(res.routed_subsets, d_ff);
    } else {  // attn_init: experts drawn fresh
        for (std::size_t i = 0; i < ucfg.n_routed; ++i) {
            Rng er = root.fork(kTagRandomRouted + i);
            res.weights.routed.push_back(random_expert_weights(d, ucfg.d_expert, er));
        }
        for (std::size_t j = 0; j < target.n_shared; ++j) {
            Rng er = root.fork(kTagRandomShared + j);
            res.weights.shared.push_back(random_expert_weights(d, target.shared_width(), er));
        }
    }
    return res;
}

}  // namespace moeflow
