#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "moeflow/moe_block.hpp"
#include "moeflow/rng.hpp"

namespace moeflow {

/// Dense-to-MoE initialization: each routed expert takes a seeded random
/// subset of the dense FFN's hidden neurons, slicing the matching up-columns
/// and down-rows, while attention weights transfer verbatim and the router
/// starts from scratch.

enum class UpcycleStrategy {
    from_scratch,      // nothing transfers; fresh random model
    attn_init,         // attention transfers, experts random
    expert_attn,       // attention transfers, experts sliced from the dense FFN
    expert_attn_drop,  // expert_attn, then a fraction of neurons re-drawn
};

UpcycleStrategy upcycle_strategy_from_string(const std::string& name);
std::string upcycle_strategy_to_string(UpcycleStrategy s);

enum class SubsetSampler {
    random_perm,  // seeded permutation prefix (the default sampler)
    contiguous,   // expert i takes the slab starting at i*d_e, wrapping
    magnitude,    // weighted sampling without replacement by neuron magnitude
};

SubsetSampler subset_sampler_from_string(const std::string& name);
std::string subset_sampler_to_string(SubsetSampler s);

/// One expert's neuron choice. Indices are one-based positions in {1..d_ff},
/// kept in sampling order; slicing follows this order exactly.
struct ExpertSubset {
    std::size_t expert = 0;
    std::vector<std::size_t> indices;
};

struct UpcycleConfig {
    std::size_t n_routed = 16;
    std::size_t d_expert = 32;
    std::uint64_t base_seed = 0;
    UpcycleStrategy strategy = UpcycleStrategy::expert_attn;
    double drop_ratio = 0.5;  // only read by expert_attn_drop
    SubsetSampler sampler = SubsetSampler::random_perm;

    void validate() const;
};

/// First d_e entries of the permutation of {1..d_ff} seeded by (base_seed, i).
/// This is the collision-free single-expert view; batch sampling below layers
/// a deterministic retry on top when two experts land on the same set.
ExpertSubset sample_expert_subset(std::size_t expert, std::size_t d_ff, std::size_t d_e,
                                  std::uint64_t base_seed);

/// Subsets for all experts, pairwise distinct as sets. Colliding draws retry
/// with a deterministic seed offset; the contiguous sampler cannot retry and
/// reports a config error instead. The magnitude sampler requires one score
/// per neuron (larger = more likely).
std::vector<ExpertSubset> sample_subsets(std::size_t n_routed, std::size_t d_ff, std::size_t d_e,
                                         std::uint64_t base_seed,
                                         SubsetSampler sampler = SubsetSampler::random_perm,
                                         const std::vector<double>* magnitudes = nullptr);

/// Per-neuron importance proxy: |up column| * |down row| L2 norms.
std::vector<double> neuron_magnitudes(const Tensor& w_up, const Tensor& w_down);

/// w_up columns and w_down rows at the subset's indices, in subset order.
ExpertWeights slice_expert_weights(const Tensor& w_up, const Tensor& w_down,
                                   const ExpertSubset& subset);

/// Re-draws ceil(ratio * d_e) neuron positions (up-column and down-row
/// together) from the zero-mean 1/sqrt(fan_in) normal init; the remaining
/// positions are bit-identical to the input.
ExpertWeights drop_reinit(const ExpertWeights& e, double ratio, Rng& rng);

/// Fraction of {1..d_ff} covered by the union of the subsets.
double coverage(const std::vector<ExpertSubset>& subsets, std::size_t d_ff);

/// 1 - (1 - d_e/d_ff)^n_routed: expected coverage under independent uniform
/// subset draws.
double expected_coverage(std::size_t d_e, std::size_t d_ff, std::size_t n_routed);

/// n_routed * d_e / d_ff.
double oversampling_ratio(std::size_t d_e, std::size_t d_ff, std::size_t n_routed);

/// FFN part of a dense-to-MoE block conversion: expert weights per strategy,
/// random router centroids, zero router biases. The caller handles attention
/// tensors (copy or fresh init) and the from_scratch strategy at model level.
struct UpcycleResult {
    MoEWeights weights;
    RouterState router;
    std::vector<ExpertSubset> routed_subsets;  // empty for random experts
    std::vector<ExpertSubset> shared_subsets;
    double coverage_fraction = 0.0;
};

UpcycleResult upcycle_ffn(const Tensor& dense_up, const Tensor& dense_down,
                          const UpcycleConfig& ucfg, const MoEConfig& target);

/// Fresh expert drawn from the shared random init distribution.
ExpertWeights random_expert_weights(std::size_t d_model, std::size_t width, Rng& rng);

}  // namespace moeflow
