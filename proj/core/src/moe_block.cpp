#include "moeflow/moe_block.hpp"

#include <functional>
#include <thread>

#include "moeflow/error.hpp"

namespace moeflow {

namespace {

inline const Tensor& as_f64(const Tensor& t, Tensor&) { return t; }
inline const Tensor& as_f64(const Tensor32& t, Tensor& scratch) {
    scratch = t.cast<double>();
    return scratch;
}

}  // namespace

void MoEConfig::validate() const {
    router_config().validate();
    if (d_expert == 0 || d_model == 0) throw ConfigError("moe: zero width");
    if (n_shared > 0 && shared_width() == 0) throw ConfigError("moe: zero shared width");
}

template <typename T>
TensorT<T> expert_ffn(const TensorT<T>& x, const ExpertWeightsT<T>& e, Act act) {
    if (x.cols() != e.w_up.rows() || e.w_up.cols() != e.w_down.rows() ||
        e.w_down.cols() != x.cols())
        throw ShapeError("expert_ffn: weight shapes do not conform");
    TensorT<T> mid({x.rows(), e.w_up.cols()});
    matmul(x.data(), e.w_up.data(), mid.data(), x.rows(), x.cols(), e.w_up.cols());
    act_apply_inplace(act, mid.data(), mid.size());
    TensorT<T> out({x.rows(), x.cols()});
    matmul(mid.data(), e.w_down.data(), out.data(), mid.rows(), mid.cols(), x.cols());
    return out;
}

DispatchPlan build_plan(const RoutingDecision& d, std::size_t n_routed) {
    DispatchPlan plan;
    plan.n_tokens = d.n_tokens;
    plan.top_k = d.top_k;
    const std::size_t slots = d.n_tokens * d.top_k;
    if (d.selected.size() != slots) throw ContractError("build_plan: decision inconsistent");

    std::vector<std::size_t> counts(n_routed, 0);
    for (std::size_t i = 0; i < slots; ++i) {
        if (d.selected[i] >= n_routed) throw ContractError("build_plan: expert out of range");
        ++counts[d.selected[i]];
    }
    plan.seg_offsets.assign(n_routed + 1, 0);
    for (std::size_t e = 0; e < n_routed; ++e)
        plan.seg_offsets[e + 1] = plan.seg_offsets[e] + counts[e];

    plan.buffer_token.resize(slots);
    plan.slot_to_row.resize(slots);
    plan.buffer_gate.resize(slots);
    std::vector<std::size_t> cursor(plan.seg_offsets.begin(), plan.seg_offsets.end() - 1);
    // Slot scan order is (token, k); within an expert segment that yields
    // tokens in ascending order.
    for (std::size_t t = 0; t < d.n_tokens; ++t)
        for (std::size_t k = 0; k < d.top_k; ++k) {
            const std::size_t slot = d.slot(t, k);
            const std::size_t row = cursor[d.selected[slot]]++;
            plan.buffer_token[row] = t;
            plan.slot_to_row[slot] = row;
            plan.buffer_gate[row] = d.gates[slot];
        }
    return plan;
}

template <typename T>
TensorT<T> dispatch(const TensorT<T>& tokens, const DispatchPlan& plan) {
    const std::size_t d = tokens.cols();
    TensorT<T> buffer({plan.buffer_token.size(), d});
    for (std::size_t r = 0; r < plan.buffer_token.size(); ++r) {
        const T* src = tokens.row(plan.buffer_token[r]);
        T* dst = buffer.row(r);
        for (std::size_t c = 0; c < d; ++c) dst[c] = src[c];
    }
    return buffer;
}

template <typename T>
TensorT<T> combine(const TensorT<T>& expert_out, const DispatchPlan& plan) {
    const std::size_t d = expert_out.cols();
    TensorT<T> out({plan.n_tokens, d});
    // Ascending k per token == ascending expert, since selections are sorted.
    for (std::size_t t = 0; t < plan.n_tokens; ++t) {
        T* dst = out.row(t);
        for (std::size_t k = 0; k < plan.top_k; ++k) {
            const std::size_t row = plan.slot_to_row[t * plan.top_k + k];
            const T gate = static_cast<T>(plan.buffer_gate[row]);
            const T* src = expert_out.row(row);
            for (std::size_t c = 0; c < d; ++c) dst[c] += gate * src[c];
        }
    }
    return out;
}

namespace {

/// Runs fn(e) for e in [0, n) over `workers` threads with a static split.
/// Experts write disjoint buffer segments, so the split is race-free.
void for_each_expert(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn) {
    if (workers <= 1 || n <= 1) {
        for (std::size_t e = 0; e < n; ++e) fn(e);
        return;
    }
    workers = std::min(workers, n);
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w)
        pool.emplace_back([&, w] {
            for (std::size_t e = w; e < n; e += workers) fn(e);
        });
    for (std::thread& th : pool) th.join();
}

}  // namespace

template <typename T>
TensorT<T> moe_mixture(const TensorT<T>& u, const MoEWeightsT<T>& w,
                       const RoutingDecision& decision, const MoEConfig& cfg,
                       std::size_t workers) {
    const std::size_t d = cfg.d_model;
    if (u.cols() != d) throw ShapeError("moe_mixture: token width mismatch");
    const DispatchPlan plan = build_plan(decision, cfg.n_routed);
    const TensorT<T> buffer = dispatch(u, plan);

    TensorT<T> expert_out({buffer.rows(), d});
    for_each_expert(cfg.n_routed, workers, [&](std::size_t e) {
        const std::size_t lo = plan.seg_offsets[e];
        const std::size_t hi = plan.seg_offsets[e + 1];
        if (lo == hi) return;
        const std::size_t rows = hi - lo;
        const ExpertWeightsT<T>& ew = w.routed[e];
        TensorT<T> mid({rows, cfg.d_expert});
        matmul(buffer.row(lo), ew.w_up.data(), mid.data(), rows, d, cfg.d_expert);
        act_apply_inplace(cfg.act, mid.data(), mid.size());
        matmul(mid.data(), ew.w_down.data(), expert_out.row(lo), rows, cfg.d_expert, d);
    });

    TensorT<T> mix = combine(expert_out, plan);
    for (const ExpertWeightsT<T>& se : w.shared) {
        const TensorT<T> s = expert_ffn(u, se, cfg.act);
        for (std::size_t i = 0; i < mix.size(); ++i) mix[i] += s[i];
    }
    return mix;
}

template <typename T>
TensorT<T> moe_layer_forward(const TensorT<T>& u, const MoEWeightsT<T>& w,
                             const RouterState& state, const MoEConfig& cfg,
                             std::size_t workers) {
    cfg.validate();
    if (w.routed.size() != cfg.n_routed || w.shared.size() != cfg.n_shared)
        throw ShapeError("moe_layer_forward: expert count mismatch");
    Tensor scratch;
    const RoutingDecision decision = route(as_f64(u, scratch), state, cfg.router_config());
    TensorT<T> h = moe_mixture(u, w, decision, cfg, workers);
    for (std::size_t i = 0; i < h.size(); ++i) h[i] += u[i];
    return h;
}

template <typename T>
TensorT<T> reference_mixture(const TensorT<T>& u, const MoEWeightsT<T>& w,
                             const RoutingDecision& decision, const MoEConfig& cfg) {
    const std::size_t d = cfg.d_model;
    TensorT<T> h({u.rows(), d});
    TensorT<T> tok({std::size_t{1}, d});
    for (std::size_t t = 0; t < u.rows(); ++t) {
        for (std::size_t c = 0; c < d; ++c) tok.at(0, c) = u.at(t, c);
        T* dst = h.row(t);
        for (const ExpertWeightsT<T>& se : w.shared) {
            const TensorT<T> y = expert_ffn(tok, se, cfg.act);
            for (std::size_t c = 0; c < d; ++c) dst[c] += y.at(0, c);
        }
        for (std::size_t k = 0; k < decision.top_k; ++k) {
            const std::size_t slot = decision.slot(t, k);
            const T gate = static_cast<T>(decision.gates[slot]);
            const TensorT<T> y = expert_ffn(tok, w.routed[decision.selected[slot]], cfg.act);
            for (std::size_t c = 0; c < d; ++c) dst[c] += gate * y.at(0, c);
        }
    }
    return h;
}

template <typename T>
TensorT<T> reference_moe_forward(const TensorT<T>& u, const MoEWeightsT<T>& w,
                                 const RouterState& state, const MoEConfig& cfg) {
    cfg.validate();
    Tensor scratch;
    const RoutingDecision decision = route(as_f64(u, scratch), state, cfg.router_config());
    TensorT<T> h = reference_mixture(u, w, decision, cfg);
    for (std::size_t i = 0; i < h.size(); ++i) h[i] += u[i];
    return h;
}

template <typename T>
TensorT<T> dense_ffn_forward(const TensorT<T>& u, const ExpertWeightsT<T>& dense, Act act) {
    TensorT<T> h = expert_ffn(u, dense, act);
    for (std::size_t i = 0; i < h.size(); ++i) h[i] += u[i];
    return h;
}

ParamCount ffn_param_count(const MoEConfig& cfg) {
    ParamCount c;
    const std::size_t per_routed = 2 * cfg.d_model * cfg.d_expert;
    const std::size_t shared = cfg.n_shared * 2 * cfg.d_model * cfg.shared_width();
    const std::size_t router = cfg.n_routed * cfg.d_model;
    c.total = cfg.n_routed * per_routed + shared + router;
    c.activated = cfg.top_k * per_routed + shared + router;
    return c;
}

ParamCount dense_ffn_param_count(std::size_t d_model, std::size_t d_ff) {
    ParamCount c;
    c.total = c.activated = 2 * d_model * d_ff;
    return c;
}

std::size_t moe_flops_per_token(const MoEConfig& cfg) {
    // Multiply-accumulates: routing dot products + selected experts + shared.
    return cfg.n_routed * cfg.d_model + cfg.top_k * 2 * cfg.d_model * cfg.d_expert +
           cfg.n_shared * 2 * cfg.d_model * cfg.shared_width();
}

template TensorT<double> expert_ffn(const TensorT<double>&, const ExpertWeightsT<double>&, Act);
template TensorT<float> expert_ffn(const TensorT<float>&, const ExpertWeightsT<float>&, Act);
template TensorT<double> dispatch(const TensorT<double>&, const DispatchPlan&);
template TensorT<float> dispatch(const TensorT<float>&, const DispatchPlan&);
template TensorT<double> combine(const TensorT<double>&, const DispatchPlan&);
template TensorT<float> combine(const TensorT<float>&, const DispatchPlan&);
template TensorT<double> moe_mixture(const TensorT<double>&, const MoEWeightsT<double>&,
                                     const RoutingDecision&, const MoEConfig&, std::size_t);
template TensorT<float> moe_mixture(const TensorT<float>&, const MoEWeightsT<float>&,
                                    const RoutingDecision&, const MoEConfig&, std::size_t);
template TensorT<double> moe_layer_forward(const TensorT<double>&, const MoEWeightsT<double>&,
                                           const RouterState&, const MoEConfig&, std::size_t);
template TensorT<float> moe_layer_forward(const TensorT<float>&, const MoEWeightsT<float>&,
                                          const RouterState&, const MoEConfig&, std::size_t);
template TensorT<double> reference_mixture(const TensorT<double>&, const MoEWeightsT<double>&,
                                           const RoutingDecision&, const MoEConfig&);
template TensorT<float> reference_mixture(const TensorT<float>&, const MoEWeightsT<float>&,
                                          const RoutingDecision&, const MoEConfig&);
template TensorT<double> reference_moe_forward(const TensorT<double>&, const MoEWeightsT<double>&,
                                               const RouterState&, const MoEConfig&);
template TensorT<float> reference_moe_forward(const TensorT<float>&, const MoEWeightsT<float>&,
                                              const RouterState&, const MoEConfig&);
template TensorT<double> dense_ffn_forward(const TensorT<double>&, const ExpertWeightsT<double>&, Act);
template TensorT<float> dense_ffn_forward(const TensorT<float>&, const ExpertWeightsT<float>&, Act);

}  // namespace moeflow
