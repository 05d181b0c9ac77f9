#pragma once

#include <cstddef>
#include <vector>

#include "moeflow/nn_kernels.hpp"
#include "moeflow/router.hpp"
#include "moeflow/tensor.hpp"

namespace moeflow {

template <typename T>
struct ExpertWeightsT {
    TensorT<T> w_up;    // [d_model x width]
    TensorT<T> w_down;  // [width x d_model]
};
using ExpertWeights = ExpertWeightsT<double>;
using ExpertWeights32 = ExpertWeightsT<float>;

struct MoEConfig {
    std::size_t d_model = 64;
    std::size_t n_routed = 16;
    std::size_t top_k = 4;
    std::size_t d_expert = 32;
    std::size_t n_shared = 1;
    std::size_t d_shared = 0;  // 0 means top_k * d_expert (capacity parity)
    Act act = Act::gelu;
    double bias_step = 1e-3;
    double affinity_floor = 1e-12;

    std::size_t shared_width() const { return d_shared ? d_shared : top_k * d_expert; }
    RouterConfig router_config() const {
        return RouterConfig{n_routed, top_k, d_model, bias_step, affinity_floor};
    }
    void validate() const;
};

template <typename T>
struct MoEWeightsT {
    std::vector<ExpertWeightsT<T>> shared;  // n_shared entries, width shared_width()
    std::vector<ExpertWeightsT<T>> routed;  // n_routed entries, width d_expert
};
using MoEWeights = MoEWeightsT<double>;
using MoEWeights32 = MoEWeightsT<float>;

/// act(x . w_up) . w_down
template <typename T>
TensorT<T> expert_ffn(const TensorT<T>& x, const ExpertWeightsT<T>& e, Act act);

/// Token-to-expert permutation: buffer rows grouped by expert ascending,
/// tokens ascending within an expert. A bijection over the T*top_k slots.
struct DispatchPlan {
    std::size_t n_tokens = 0;
    std::size_t top_k = 0;
    std::vector<std::size_t> buffer_token;  // buffer row -> source token
    std::vector<std::size_t> slot_to_row;   // decision slot (t*top_k+k) -> buffer row
    std::vector<std::size_t> seg_offsets;   // [n_routed+1] row ranges per expert
    std::vector<double> buffer_gate;        // gate aligned to buffer rows
};

DispatchPlan build_plan(const RoutingDecision& decision, std::size_t n_routed);

template <typename T>
TensorT<T> dispatch(const TensorT<T>& tokens, const DispatchPlan& plan);

/// Inverse permutation with gate weighting: per token, its top_k expert
/// outputs are summed in ascending expert order (fixed order keeps the
/// result independent of how segments were computed).
template <typename T>
TensorT<T> combine(const TensorT<T>& expert_out, const DispatchPlan& plan);

/// Shared + gated routed expert mixture of the layer equation, no residual.
/// Grouped path: dispatch -> per-expert GEMM segments -> combine. `workers`
/// only splits the segment loop; output is identical for any worker count.
template <typename T>
TensorT<T> moe_mixture(const TensorT<T>& u, const MoEWeightsT<T>& w,
                       const RoutingDecision& decision, const MoEConfig& cfg,
                       std::size_t workers = 1);

/// h_t = u_t + sum_i FFN_shared_i(u_t) + sum_{j selected} g_jt FFN_routed_j(u_t),
/// with routing computed from state. Grouped implementation.
template <typename T>
TensorT<T> moe_layer_forward(const TensorT<T>& u, const MoEWeightsT<T>& w,
                             const RouterState& state, const MoEConfig& cfg,
                             std::size_t workers = 1);

/// Naive per-token per-expert mixture (no dispatch, no residual) on a given
/// decision; the equal-math loop the grouped path is benchmarked against.
template <typename T>
TensorT<T> reference_mixture(const TensorT<T>& u, const MoEWeightsT<T>& w,
                             const RoutingDecision& decision, const MoEConfig& cfg);

/// Same map as moe_layer_forward, written as the naive per-token per-expert
/// loop with no dispatch. Serves as the equivalence oracle.
template <typename T>
TensorT<T> reference_moe_forward(const TensorT<T>& u, const MoEWeightsT<T>& w,
                                 const RouterState& state, const MoEConfig& cfg);

/// Dense baseline: h = u + FFN(u) with one width-d_ff expert.
template <typename T>
TensorT<T> dense_ffn_forward(const TensorT<T>& u, const ExpertWeightsT<T>& dense, Act act);

/// Parameter accounting for one FFN layer (router centroids included;
/// balancing biases are state, not parameters).
struct ParamCount {
    std::size_t total = 0;
    std::size_t activated = 0;
};
ParamCount ffn_param_count(const MoEConfig& cfg);
ParamCount dense_ffn_param_count(std::size_t d_model, std::size_t d_ff);

/// Analytic multiply-accumulate count per token for one forward of the
/// layer; substantiates that cost scales with top_k * d_expert, not n_routed.
std::size_t moe_flops_per_token(const MoEConfig& cfg);

}  // namespace moeflow
