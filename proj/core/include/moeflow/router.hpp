#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "moeflow/tensor.hpp"

namespace moeflow {

struct RouterConfig {
    std::size_t n_routed = 16;
    std::size_t top_k = 4;
    std::size_t d_model = 64;
    double bias_step = 1e-3;       // balancing update magnitude per step
    double affinity_floor = 1e-12;  // keeps the gate denominator positive

    void validate() const;  // throws ConfigError
};

/// Expert centroids (learned) and load-balancing biases (never learned:
/// excluded from every gradient tape, mutated only by update_bias between
/// optimizer steps).
struct RouterState {
    Tensor centroids;             // [n_routed x d_model]
    std::vector<double> biases;   // [n_routed], zero after initialization

    static RouterState init(const RouterConfig& cfg, class Rng& rng);
};

/// Per-token routing outcome. Selected indices are ascending; gates are
/// normalized raw affinities over the selected set and sum to 1 per token.
struct RoutingDecision {
    std::size_t n_tokens = 0;
    std::size_t top_k = 0;
    std::vector<std::size_t> selected;  // [n_tokens * top_k], ascending per token
    std::vector<double> affinities;     // floored sigmoid scores, aligned to selected
    std::vector<double> gates;          // affinities / per-token sum

    std::size_t slot(std::size_t token, std::size_t k) const { return token * top_k + k; }
};

/// Sigmoid token-to-expert relevance, clamped below at the affinity floor.
/// s[t][j] = sigmoid(u_t . centroid_j); every entry lands in (0, 1].
Tensor affinity_scores(const Tensor& u, const RouterState& state, double affinity_floor);

/// Indices of the k largest s[j] + b[j], ties to the lowest index, returned
/// ascending. Biases shift selection only; the scores themselves are not
/// returned because gates never see them.
std::vector<std::size_t> select_topk(const double* s, const double* b, std::size_t n,
                                     std::size_t k);

/// Gates from raw affinities over the selected set: g_j = s_j / sum s_i.
std::vector<double> gate_weights(const double* s, const std::vector<std::size_t>& selected);

RoutingDecision route(const Tensor& u, const RouterState& state, const RouterConfig& cfg);

/// In-place balancing step: b_j += bias_step * sign(mean(load) - load_j).
/// Applied once per optimizer step on that step's aggregate loads.
void update_bias(std::vector<double>& biases, const std::vector<double>& loads,
                 double bias_step);
void update_bias(RouterState& state, const std::vector<double>& loads,
                 const RouterConfig& cfg);

struct LoadStats {
    std::vector<double> counts;  // tokens that selected each expert
    double max_over_mean = 0.0;
    double selection_entropy = 0.0;  // natural log base
};

LoadStats load_stats(const RoutingDecision& decision, std::size_t n_routed);

/// Line format used by the route-sim subcommand: token, selected, gates.
std::string decision_line(const RoutingDecision& d, std::size_t token);

}  // namespace moeflow
