#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "moeflow/moe_block.hpp"
#include "moeflow/params.hpp"
#include "moeflow/rng.hpp"
#include "moeflow/tape.hpp"
#include "moeflow/upcycle.hpp"

namespace moeflow {

/// Velocity-field transformer for 2-D flow matching. Tokens carry no
/// positional encoding; structure comes from attention spans and, in
/// in-context mode, from the condition token preceding each data token.

enum class FfnKind { dense, moe };
enum class CondMode { in_context, cross_attention };
enum class CondEncoder { onehot, embed };

FfnKind ffn_kind_from_string(const std::string& s);
std::string ffn_kind_to_string(FfnKind k);
CondMode cond_mode_from_string(const std::string& s);
std::string cond_mode_to_string(CondMode m);
CondEncoder cond_encoder_from_string(const std::string& s);
std::string cond_encoder_to_string(CondEncoder e);

struct ModelConfig {
    std::size_t d_model = 32;
    std::size_t n_blocks = 2;
    std::size_t n_heads = 4;
    std::size_t data_dim = 2;
    std::size_t n_classes = 8;  // label n_classes is the null condition
    FfnKind ffn = FfnKind::moe;
    MoEConfig moe;            // d_model here wins; moe.d_model is overwritten
    std::size_t d_ff = 76;    // dense FFN width
    CondMode cond_mode = CondMode::in_context;
    CondEncoder encoder = CondEncoder::onehot;
    Act act = Act::gelu;      // dense FFN activation

    MoEConfig block_moe() const {
        MoEConfig m = moe;
        m.d_model = d_model;
        return m;
    }
    void validate() const;
};

/// Trainable parameters live in `params` under stable names; routing biases
/// are balancing state (updated by sign steps, never by gradients) and the
/// condition mixing matrix is a frozen buffer.
struct FlowModel {
    ModelConfig cfg;
    ParamSet params;
    std::vector<std::vector<double>> biases;  // per block; empty when dense
    Tensor cond_mix;                          // [d x d], frozen, embed encoder only

    static FlowModel init(const ModelConfig& cfg, Rng& rng);
};

/// Tape ids of every parameter, aligned to ParamSet order.
struct ModelIds {
    std::vector<Tape::Id> ids;
    const ParamSet* set = nullptr;

    Tape::Id of(const std::string& name) const;
};

ModelIds leaf_params(Tape& t, const FlowModel& m);

/// Routing decisions recorded during one forward, one entry per MoE block,
/// covering every sequence token. Feeds balancing updates and telemetry.
struct ForwardTrace {
    std::vector<RoutingDecision> decisions;
};

/// Predicted velocity [B x data_dim] for noisy points x_t at times ts with
/// per-sample labels (label == n_classes means unconditioned). Differentiable
/// through everything except expert selection, which is a discrete choice.
Tape::Id velocity_forward(Tape& t, const FlowModel& m, const ModelIds& ids, const Tensor& x_t,
                          const std::vector<double>& ts, const std::vector<int>& labels,
                          ForwardTrace* trace = nullptr);

/// Same forward with the noisy points already on the tape, so gradients can
/// flow through a chain of sampling steps into earlier evaluations.
Tape::Id velocity_forward(Tape& t, const FlowModel& m, const ModelIds& ids, Tape::Id x_t,
                          const std::vector<double>& ts, const std::vector<int>& labels,
                          ForwardTrace* trace = nullptr);

/// Value-only convenience: runs a private tape and returns the velocity.
Tensor velocity_eval(const FlowModel& m, const Tensor& x_t, const std::vector<double>& ts,
                     const std::vector<int>& labels, ForwardTrace* trace = nullptr);

/// Trainable parameter counts; activated counts top_k routed experts per MoE
/// block instead of all of them. The frozen mixing buffer is not a parameter.
ParamCount model_param_count(const ModelConfig& cfg);

/// Dense-to-MoE conversion at model level. from_scratch ignores the dense
/// model entirely; attn_init copies everything except FFNs; expert_attn*
/// additionally slice expert weights from each block's dense FFN.
FlowModel upcycle_model(const FlowModel& dense, const ModelConfig& target_cfg,
                        const UpcycleConfig& ucfg);

/// Per-block subset coverage of the last upcycle_model call is not kept on
/// the model; call upcycle_ffn directly for diagnostics.

}  // namespace moeflow
