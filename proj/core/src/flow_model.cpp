#include "moeflow/flow_model.hpp"

#include <cmath>

#include "moeflow/error.hpp"

namespace moeflow {

namespace {

constexpr std::size_t kTimeFeatures = 8;
constexpr double kTwoPi = 6.28318530717958647692;

std::string blk(std::size_t i, const char* rest) {
    return "blk" + std::to_string(i) + "." + rest;
}

Tensor normal_tensor(std::vector<std::size_t> shape, double scale, Rng& rng) {
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = scale * rng.normal();
    return t;
}

/// Fixed sinusoidal features of t; the MLP on top learns the embedding.
Tensor time_features(const std::vector<double>& ts) {
    Tensor f({ts.size(), kTimeFeatures});
    for (std::size_t i = 0; i < ts.size(); ++i) {
        const double t = ts[i];
        f.at(i, 0) = std::sin(kTwoPi * t);
        f.at(i, 1) = std::cos(kTwoPi * t);
        f.at(i, 2) = std::sin(2.0 * kTwoPi * t);
        f.at(i, 3) = std::cos(2.0 * kTwoPi * t);
        f.at(i, 4) = std::sin(4.0 * kTwoPi * t);
        f.at(i, 5) = std::cos(4.0 * kTwoPi * t);
        f.at(i, 6) = t;
        f.at(i, 7) = 1.0;
    }
    return f;
}

}  // namespace

FfnKind ffn_kind_from_string(const std::string& s) {
    if (s == "dense") return FfnKind::dense;
    if (s == "moe") return FfnKind::moe;
    throw ConfigError("unknown ffn kind: " + s);
}
std::string ffn_kind_to_string(FfnKind k) { return k == FfnKind::dense ? "dense" : "moe"; }

CondMode cond_mode_from_string(const std::string& s) {
    if (s == "in_context") return CondMode::in_context;
    if (s == "cross_attention") return CondMode::cross_attention;
    throw ConfigError("unknown condition mode: " + s);
}
std::string cond_mode_to_string(CondMode m) {
    return m == CondMode::in_context ? "in_context" : "cross_attention";
}

CondEncoder cond_encoder_from_string(const std::string& s) {
    if (s == "onehot") return CondEncoder::onehot;
    if (s == "embed") return CondEncoder::embed;
    throw ConfigError("unknown condition encoder: " + s);
}
std::string cond_encoder_to_string(CondEncoder e) {
    return e == CondEncoder::onehot ? "onehot" : "embed";
}

void ModelConfig::validate() const {
    if (d_model == 0 || n_blocks == 0 || data_dim == 0)
        throw ConfigError("model: zero-sized dimension");
    if (d_model % n_heads != 0) throw ConfigError("model: n_heads must divide d_model");
    if (encoder == CondEncoder::onehot && d_model < n_classes)
        throw ConfigError("model: one-hot conditions need d_model >= n_classes");
    if (ffn == FfnKind::moe) block_moe().validate();
    if (ffn == FfnKind::dense && d_ff == 0) throw ConfigError("model: dense d_ff must be positive");
}

FlowModel FlowModel::init(const ModelConfig& cfg, Rng& rng) {
    cfg.validate();
    FlowModel m;
    m.cfg = cfg;
    const std::size_t d = cfg.d_model;
    auto& P = m.params;

    P.add("in.w", normal_tensor({cfg.data_dim, d}, 1.0 / std::sqrt(double(cfg.data_dim)), rng));
    P.add("in.b", Tensor({d}));
    P.add("t_mlp.w1",
          normal_tensor({kTimeFeatures, d}, 1.0 / std::sqrt(double(kTimeFeatures)), rng));
    P.add("t_mlp.b1", Tensor({d}));
    P.add("t_mlp.w2", normal_tensor({d, d}, 1.0 / std::sqrt(double(d)), rng));
    P.add("t_mlp.b2", Tensor({d}));
    if (cfg.encoder == CondEncoder::embed) {
        P.add("cond.emb",
              normal_tensor({cfg.n_classes + 1, d}, 1.0 / std::sqrt(double(d)), rng));
        m.cond_mix = normal_tensor({d, d}, 1.0 / std::sqrt(double(d)), rng);
    }

    const double ws = 1.0 / std::sqrt(double(d));
    const MoEConfig mcfg = cfg.block_moe();
    for (std::size_t i = 0; i < cfg.n_blocks; ++i) {
        P.add(blk(i, "attn.wq"), normal_tensor({d, d}, ws, rng));
        P.add(blk(i, "attn.wk"), normal_tensor({d, d}, ws, rng));
        P.add(blk(i, "attn.wv"), normal_tensor({d, d}, ws, rng));
        P.add(blk(i, "attn.wo"), normal_tensor({d, d}, ws, rng));
        // Zero-init modulation: blocks start as plain residual passthroughs
        // on the attention path.
        P.add(blk(i, "mod.w"), Tensor({d, 3 * d}));
        P.add(blk(i, "mod.b"), Tensor({3 * d}));
        if (cfg.cond_mode == CondMode::cross_attention) {
            P.add(blk(i, "xattn.wq"), normal_tensor({d, d}, ws, rng));
            P.add(blk(i, "xattn.wk"), normal_tensor({d, d}, ws, rng));
            P.add(blk(i, "xattn.wv"), normal_tensor({d, d}, ws, rng));
            P.add(blk(i, "xattn.wo"), Tensor({d, d}));  // zero: starts inactive
        }
        if (cfg.ffn == FfnKind::moe) {
            P.add(blk(i, "moe.centroids"), normal_tensor({mcfg.n_routed, d}, ws, rng));
            for (std::size_t j = 0; j < mcfg.n_shared; ++j) {
                const std::string base = blk(i, "moe.s") + std::to_string(j);
                P.add(base + ".up", normal_tensor({d, mcfg.shared_width()}, ws, rng));
                P.add(base + ".down",
                      normal_tensor({mcfg.shared_width(), d},
                                    1.0 / std::sqrt(double(mcfg.shared_width())), rng));
            }
            for (std::size_t j = 0; j < mcfg.n_routed; ++j) {
                const std::string base = blk(i, "moe.r") + std::to_string(j);
                P.add(base + ".up", normal_tensor({d, mcfg.d_expert}, ws, rng));
                P.add(base + ".down",
                      normal_tensor({mcfg.d_expert, d},
                                    1.0 / std::sqrt(double(mcfg.d_expert)), rng));
            }
            m.biases.emplace_back(mcfg.n_routed, 0.0);
        } else {
            P.add(blk(i, "ffn.up"), normal_tensor({d, cfg.d_ff}, ws, rng));
            P.add(blk(i, "ffn.down"),
                  normal_tensor({cfg.d_ff, d}, 1.0 / std::sqrt(double(cfg.d_ff)), rng));
        }
    }
    P.add("head.w", Tensor({d, cfg.data_dim}));  // zero: velocity starts at 0
    P.add("head.b", Tensor({cfg.data_dim}));
    return m;
}

Tape::Id ModelIds::of(const std::string& name) const {
    if (set == nullptr) throw ContractError("ModelIds not bound to a ParamSet");
    return ids[set->index_of(name)];
}

ModelIds leaf_params(Tape& t, const FlowModel& m) {
    ModelIds out;
    out.set = &m.params;
    out.ids.reserve(m.params.size());
    for (std::size_t i = 0; i < m.params.size(); ++i) out.ids.push_back(t.leaf(m.params.tensor(i)));
    return out;
}

namespace {

/// Condition token per sample, [B x d]. One-hot rows are constants; embedded
/// rows differentiate through the table (the mixing matrix stays frozen).
Tape::Id condition_tokens(Tape& t, const FlowModel& m, const ModelIds& ids,
                          const std::vector<int>& labels) {
    const ModelConfig& cfg = m.cfg;
    if (cfg.encoder == CondEncoder::onehot) {
        Tensor c({labels.size(), cfg.d_model});
        for (std::size_t i = 0; i < labels.size(); ++i) {
            const int l = labels[i];
            if (l < 0 || l > int(cfg.n_classes))
                throw ContractError("label out of range: " + std::to_string(l));
            if (l < int(cfg.n_classes)) c.at(i, std::size_t(l)) = 1.0;  // null stays zero
        }
        return t.constant(std::move(c));
    }
    std::vector<std::size_t> rows;
    rows.reserve(labels.size());
    for (int l : labels) {
        if (l < 0 || l > int(cfg.n_classes))
            throw ContractError("label out of range: " + std::to_string(l));
        rows.push_back(std::size_t(l));
    }
    const Tape::Id gathered = t.gather_rows(ids.of("cond.emb"), rows);
    return t.matmul(gathered, t.constant(m.cond_mix));
}

struct MixtureResult {
    Tape::Id out;  // mixture without residual, [S x d]
    RoutingDecision decision;
};

/// On-tape shared + routed mixture. Expert selection reads affinity values
/// off the tape (plus balancing biases) and is constant under
/// differentiation; gates, expert FFNs and centroids stay differentiable.
MixtureResult moe_mixture_tape(Tape& t, const FlowModel& m, const ModelIds& ids, std::size_t block,
                               Tape::Id x) {
    const MoEConfig cfg = m.cfg.block_moe();
    const std::size_t S = t.val(x).rows();
    const std::size_t N = cfg.n_routed, K = cfg.top_k;

    const Tape::Id aff =
        t.clamp_min(t.sigmoid_(t.matmul_nt(x, ids.of(blk(block, "moe.centroids")))),
                    cfg.affinity_floor);
    const Tensor& s = t.val(aff);
    const std::vector<double>& b = m.biases[block];

    RoutingDecision dec;
    dec.n_tokens = S;
    dec.top_k = K;
    dec.selected.reserve(S * K);
    std::vector<std::size_t> sel_flat;
    sel_flat.reserve(S * K);
    for (std::size_t tok = 0; tok < S; ++tok) {
        const std::vector<std::size_t> sel = select_topk(s.row(tok), b.data(), N, K);
        for (std::size_t k = 0; k < K; ++k) {
            dec.selected.push_back(sel[k]);
            sel_flat.push_back(tok * N + sel[k]);
        }
    }

    const Tape::Id sel_aff = t.gather_elems(aff, sel_flat, {S, K});
    const Tape::Id gates = t.div_rows(sel_aff, t.row_sum(sel_aff));  // [S x K]

    // Record value copies for telemetry and balancing.
    const Tensor& gv = t.val(gates);
    const Tensor& av = t.val(sel_aff);
    dec.gates.assign(gv.data(), gv.data() + gv.size());
    dec.affinities.assign(av.data(), av.data() + av.size());

    const DispatchPlan plan = build_plan(dec, N);
    const Tape::Id buffer = t.gather_rows(x, plan.buffer_token);

    std::vector<Tape::Id> segments;
    segments.reserve(N);
    for (std::size_t e = 0; e < N; ++e) {
        const std::size_t lo = plan.seg_offsets[e], hi = plan.seg_offsets[e + 1];
        if (lo == hi) continue;
        const std::string base = blk(block, "moe.r") + std::to_string(e);
        const Tape::Id seg = t.slice_rows(buffer, lo, hi);
        const Tape::Id mid = t.activation(t.matmul(seg, ids.of(base + ".up")), cfg.act);
        segments.push_back(t.matmul(mid, ids.of(base + ".down")));
    }
    Tape::Id routed;
    if (segments.empty()) {
        routed = t.constant(Tensor({S, cfg.d_model}));
    } else {
        const Tape::Id all = segments.size() == 1 ? segments[0] : t.concat_rows(segments);
        // Buffer row -> decision slot, to pick each row's gate.
        std::vector<std::size_t> row_slot(S * K);
        for (std::size_t slot = 0; slot < S * K; ++slot) row_slot[plan.slot_to_row[slot]] = slot;
        const Tape::Id coef = t.gather_elems(gates, row_slot, {S * K});
        routed = t.scatter_rows(t.scale_rows(all, coef), plan.buffer_token, S);
    }

    Tape::Id total = routed;
    for (std::size_t j = 0; j < cfg.n_shared; ++j) {
        const std::string base = blk(block, "moe.s") + std::to_string(j);
        const Tape::Id mid = t.activation(t.matmul(x, ids.of(base + ".up")), cfg.act);
        total = t.add(total, t.matmul(mid, ids.of(base + ".down")));
    }
    return {total, std::move(dec)};
}

}  // namespace

Tape::Id velocity_forward(Tape& t, const FlowModel& m, const ModelIds& ids, const Tensor& x_t,
                          const std::vector<double>& ts, const std::vector<int>& labels,
                          ForwardTrace* trace) {
    return velocity_forward(t, m, ids, t.constant(x_t), ts, labels, trace);
}

Tape::Id velocity_forward(Tape& t, const FlowModel& m, const ModelIds& ids, Tape::Id x_in,
                          const std::vector<double>& ts, const std::vector<int>& labels,
                          ForwardTrace* trace) {
    const ModelConfig& cfg = m.cfg;
    const std::size_t B = t.val(x_in).rows();
    if (B == 0) throw ContractError("velocity_forward: empty batch");
    if (ts.size() != B || labels.size() != B)
        throw ShapeError("velocity_forward: batch fields disagree");
    if (t.val(x_in).cols() != cfg.data_dim) throw ShapeError("velocity_forward: data_dim mismatch");
    const std::size_t d = cfg.d_model;

    // Timestep embedding, [B x d].
    const Tape::Id t_emb = t.add_bias(
        t.matmul(t.activation(t.add_bias(t.matmul(t.constant(time_features(ts)), ids.of("t_mlp.w1")),
                                         ids.of("t_mlp.b1")),
                              Act::silu),
                 ids.of("t_mlp.w2")),
        ids.of("t_mlp.b2"));

    const Tape::Id cond = condition_tokens(t, m, ids, labels);
    const Tape::Id data =
        t.add(t.add_bias(t.matmul(x_in, ids.of("in.w")), ids.of("in.b")), t_emb);

    // Sequence layout and attention spans.
    const bool in_ctx = cfg.cond_mode == CondMode::in_context;
    const std::size_t S = in_ctx ? 2 * B : B;
    std::vector<AttnSpan> spans;
    std::vector<std::size_t> tok_sample(S), data_rows(B);
    Tape::Id x;
    if (in_ctx) {
        std::vector<std::size_t> cond_rows(B);
        for (std::size_t bi = 0; bi < B; ++bi) {
            cond_rows[bi] = 2 * bi;
            data_rows[bi] = 2 * bi + 1;
            tok_sample[2 * bi] = bi;
            tok_sample[2 * bi + 1] = bi;
            spans.push_back({2 * bi, 2, 2 * bi, 2});
        }
        x = t.add(t.scatter_rows(cond, cond_rows, S), t.scatter_rows(data, data_rows, S));
    } else {
        for (std::size_t bi = 0; bi < B; ++bi) {
            data_rows[bi] = bi;
            tok_sample[bi] = bi;
            spans.push_back({bi, 1, bi, 1});
        }
        x = data;
    }

    const Tape::Id mod_in = t.activation(t_emb, Act::silu);
    for (std::size_t i = 0; i < cfg.n_blocks; ++i) {
        const Tape::Id mod = t.add_bias(t.matmul(mod_in, ids.of(blk(i, "mod.w"))),
                                        ids.of(blk(i, "mod.b")));
        const Tape::Id bmod = t.gather_rows(mod, tok_sample);  // [S x 3d]
        const Tape::Id shift = t.slice_cols(bmod, 0, d);
        const Tape::Id scale = t.slice_cols(bmod, d, 2 * d);
        const Tape::Id gate = t.slice_cols(bmod, 2 * d, 3 * d);

        const Tape::Id ln = t.layer_norm(x);
        const Tape::Id xm = t.add(t.add(ln, t.mul(ln, scale)), shift);
        const Tape::Id attn =
            t.attention(t.matmul(xm, ids.of(blk(i, "attn.wq"))),
                        t.matmul(xm, ids.of(blk(i, "attn.wk"))),
                        t.matmul(xm, ids.of(blk(i, "attn.wv"))), spans, cfg.n_heads);
        x = t.add(x, t.mul(gate, t.matmul(attn, ids.of(blk(i, "attn.wo")))));

        if (cfg.cond_mode == CondMode::cross_attention) {
            const Tape::Id q = t.matmul(t.layer_norm(x), ids.of(blk(i, "xattn.wq")));
            const Tape::Id k = t.matmul(cond, ids.of(blk(i, "xattn.wk")));
            const Tape::Id v = t.matmul(cond, ids.of(blk(i, "xattn.wv")));
            const Tape::Id xa = t.attention(q, k, v, spans, cfg.n_heads);
            x = t.add(x, t.matmul(xa, ids.of(blk(i, "xattn.wo"))));
        }

        if (cfg.ffn == FfnKind::moe) {
            MixtureResult mix = moe_mixture_tape(t, m, ids, i, x);
            if (trace) trace->decisions.push_back(std::move(mix.decision));
            x = t.add(x, mix.out);
        } else {
            const Tape::Id mid =
                t.activation(t.matmul(x, ids.of(blk(i, "ffn.up"))), cfg.act);
            x = t.add(x, t.matmul(mid, ids.of(blk(i, "ffn.down"))));
        }
    }

    const Tape::Id pooled = t.gather_rows(t.layer_norm(x), data_rows);
    return t.add_bias(t.matmul(pooled, ids.of("head.w")), ids.of("head.b"));
}

Tensor velocity_eval(const FlowModel& m, const Tensor& x_t, const std::vector<double>& ts,
                     const std::vector<int>& labels, ForwardTrace* trace) {
    Tape t;
    const ModelIds ids = leaf_params(t, m);
    return t.val(velocity_forward(t, m, ids, x_t, ts, labels, trace));
}

ParamCount model_param_count(const ModelConfig& cfg) {
    cfg.validate();
    const std::size_t d = cfg.d_model;
    std::size_t common = cfg.data_dim * d + d;           // in
    common += kTimeFeatures * d + d + d * d + d;         // t_mlp
    common += d * cfg.data_dim + cfg.data_dim;           // head
    if (cfg.encoder == CondEncoder::embed) common += (cfg.n_classes + 1) * d;
    std::size_t per_block = 4 * d * d + d * 3 * d + 3 * d;  // attn + modulation
    if (cfg.cond_mode == CondMode::cross_attention) per_block += 4 * d * d;

    ParamCount ffn;
    if (cfg.ffn == FfnKind::moe) {
        ffn = ffn_param_count(cfg.block_moe());
    } else {
        ffn = dense_ffn_param_count(d, cfg.d_ff);
    }
    ParamCount out;
    out.total = common + cfg.n_blocks * (per_block + ffn.total);
    out.activated = common + cfg.n_blocks * (per_block + ffn.activated);
    return out;
}

FlowModel upcycle_model(const FlowModel& dense, const ModelConfig& target_cfg,
                        const UpcycleConfig& ucfg) {
    target_cfg.validate();
    ucfg.validate();
    Rng init_rng = Rng(ucfg.base_seed).fork(0x1417);
    FlowModel out = FlowModel::init(target_cfg, init_rng);
    if (ucfg.strategy == UpcycleStrategy::from_scratch) return out;

    if (dense.cfg.ffn != FfnKind::dense)
        throw ConfigError("upcycle source must be a dense model");
    if (dense.cfg.d_model != target_cfg.d_model || dense.cfg.n_blocks != target_cfg.n_blocks ||
        dense.cfg.cond_mode != target_cfg.cond_mode || dense.cfg.encoder != target_cfg.encoder)
        throw ConfigError("upcycle source and target architectures disagree");

    // Everything the two models share by name transfers verbatim.
    for (std::size_t i = 0; i < dense.params.size(); ++i) {
        const std::string& name = dense.params.name(i);
        if (name.find(".ffn.") != std::string::npos) continue;
        out.params.at(name) = dense.params.tensor(i);
    }
    out.cond_mix = dense.cond_mix;

    if (ucfg.strategy == UpcycleStrategy::attn_init) return out;

    const MoEConfig mcfg = target_cfg.block_moe();
    for (std::size_t i = 0; i < target_cfg.n_blocks; ++i) {
        UpcycleConfig per_block = ucfg;
        // Distinct per-block subsets while keeping the documented dependence
        // on (base_seed, expert) within each block.
        per_block.base_seed = Rng(ucfg.base_seed).fork(i).seed();
        const UpcycleResult res = upcycle_ffn(dense.params.at(blk(i, "ffn.up")),
                                              dense.params.at(blk(i, "ffn.down")),
                                              per_block, mcfg);
        out.params.at(blk(i, "moe.centroids")) = res.router.centroids;
        out.biases[i] = res.router.biases;
        for (std::size_t j = 0; j < mcfg.n_routed; ++j) {
            const std::string base = blk(i, "moe.r") + std::to_string(j);
            out.params.at(base + ".up") = res.weights.routed[j].w_up;
            out.params.at(base + ".down") = res.weights.routed[j].w_down;
        }
        for (std::size_t j = 0; j < mcfg.n_shared; ++j) {
            const std::string base = blk(i, "moe.s") + std::to_string(j);
            out.params.at(base + ".up") = res.weights.shared[j].w_up;
            out.params.at(base + ".down") = res.weights.shared[j].w_down;
        }
    }
    return out;
}

}  // namespace moeflow
