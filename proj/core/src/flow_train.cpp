#include "moeflow/flow_train.hpp"

#include <cmath>
#include <json.hpp>

#include "moeflow/checkpoint.hpp"
#include "moeflow/error.hpp"
#include "moeflow/router.hpp"

namespace moeflow {

namespace {

constexpr std::uint64_t kTagModelInit = 0x11;
constexpr std::uint64_t kTagTrainStream = 0x22;

Tensor string_to_tensor(const std::string& s) {
    Tensor t({s.size()});
    for (std::size_t i = 0; i < s.size(); ++i) t[i] = double(static_cast<unsigned char>(s[i]));
    return t;
}

std::string tensor_to_string(const Tensor& t) {
    std::string s(t.size(), '\0');
    for (std::size_t i = 0; i < t.size(); ++i) s[i] = char(static_cast<unsigned char>(t[i]));
    return s;
}

nlohmann::json moe_to_json(const MoEConfig& m) {
    return {{"d_model", m.d_model},   {"n_routed", m.n_routed},
            {"top_k", m.top_k},       {"d_expert", m.d_expert},
            {"n_shared", m.n_shared}, {"d_shared", m.d_shared},
            {"act", act_to_string(m.act)},
            {"bias_step", m.bias_step},
            {"affinity_floor", m.affinity_floor}};
}

MoEConfig moe_from_json(const nlohmann::json& j) {
    MoEConfig m;
    m.d_model = j.at("d_model").get<std::size_t>();
    m.n_routed = j.at("n_routed").get<std::size_t>();
    m.top_k = j.at("top_k").get<std::size_t>();
    m.d_expert = j.at("d_expert").get<std::size_t>();
    m.n_shared = j.at("n_shared").get<std::size_t>();
    m.d_shared = j.at("d_shared").get<std::size_t>();
    m.act = act_from_string(j.at("act").get<std::string>());
    m.bias_step = j.at("bias_step").get<double>();
    m.affinity_floor = j.at("affinity_floor").get<double>();
    return m;
}

std::string model_config_to_json(const ModelConfig& cfg) {
    nlohmann::json j{{"d_model", cfg.d_model},
                     {"n_blocks", cfg.n_blocks},
                     {"n_heads", cfg.n_heads},
                     {"data_dim", cfg.data_dim},
                     {"n_classes", cfg.n_classes},
                     {"ffn", ffn_kind_to_string(cfg.ffn)},
                     {"moe", moe_to_json(cfg.moe)},
                     {"d_ff", cfg.d_ff},
                     {"cond_mode", cond_mode_to_string(cfg.cond_mode)},
                     {"encoder", cond_encoder_to_string(cfg.encoder)},
                     {"act", act_to_string(cfg.act)}};
    return j.dump();
}

ModelConfig model_config_from_json(const std::string& s) {
    const nlohmann::json j = nlohmann::json::parse(s);
    ModelConfig cfg;
    cfg.d_model = j.at("d_model").get<std::size_t>();
    cfg.n_blocks = j.at("n_blocks").get<std::size_t>();
    cfg.n_heads = j.at("n_heads").get<std::size_t>();
    cfg.data_dim = j.at("data_dim").get<std::size_t>();
    cfg.n_classes = j.at("n_classes").get<std::size_t>();
    cfg.ffn = ffn_kind_from_string(j.at("ffn").get<std::string>());
    cfg.moe = moe_from_json(j.at("moe"));
    cfg.d_ff = j.at("d_ff").get<std::size_t>();
    cfg.cond_mode = cond_mode_from_string(j.at("cond_mode").get<std::string>());
    cfg.encoder = cond_encoder_from_string(j.at("encoder").get<std::string>());
    cfg.act = act_from_string(j.at("act").get<std::string>());
    return cfg;
}

}  // namespace

std::vector<double> FlowConfig::schedule() const {
    validate();
    if (!t_schedule.empty()) return t_schedule;
    std::vector<double> s(n_steps + 1);
    for (std::size_t k = 0; k <= n_steps; ++k) s[k] = double(k) / double(n_steps);
    return s;
}

void FlowConfig::validate() const {
    if (n_steps == 0) throw ConfigError("flow: n_steps must be positive");
    if (cfg_scale < 0.0) throw ConfigError("flow: cfg_scale must be nonnegative");
    if (cond_drop_prob < 0.0 || cond_drop_prob > 1.0)
        throw ConfigError("flow: cond_drop_prob must lie in [0, 1]");
    if (t_schedule.empty()) return;
    if (t_schedule.size() != n_steps + 1)
        throw ConfigError("flow: schedule needs n_steps+1 points");
    if (t_schedule.front() != 0.0 || t_schedule.back() != 1.0)
        throw ConfigError("flow: schedule must run from 0 to 1");
    for (std::size_t k = 1; k < t_schedule.size(); ++k)
        if (!(t_schedule[k] > t_schedule[k - 1]))
            throw ConfigError("flow: schedule must be strictly increasing");
}

void interpolate(const Tensor& x0, const Tensor& eps, const std::vector<double>& t, Tensor* x_t,
                 Tensor* v_target) {
    if (x0.rows() != eps.rows() || x0.cols() != eps.cols())
        throw ShapeError("interpolate: x0 and eps disagree");
    if (t.size() != x0.rows()) throw ShapeError("interpolate: one t per row required");
    for (double ti : t)
        if (!(ti >= 0.0 && ti <= 1.0)) throw ContractError("interpolate: t outside [0, 1]");
    const std::size_t d = x0.cols();
    if (x_t) {
        *x_t = Tensor(x0.shape());
        for (std::size_t r = 0; r < x0.rows(); ++r)
            for (std::size_t c = 0; c < d; ++c)
                x_t->at(r, c) = (1.0 - t[r]) * x0.at(r, c) + t[r] * eps.at(r, c);
    }
    if (v_target) {
        *v_target = Tensor(x0.shape());
        for (std::size_t i = 0; i < x0.size(); ++i) (*v_target)[i] = eps[i] - x0[i];
    }
}

FlowBatch make_flow_batch(const Dataset& data, std::size_t batch_size, double cond_drop_prob,
                          Rng& rng) {
    if (batch_size == 0) throw ContractError("make_flow_batch: empty batch");
    if (data.x.rows() == 0) throw ContractError("make_flow_batch: empty dataset");
    const std::size_t d = data.x.cols();
    FlowBatch b;
    b.x0 = Tensor({batch_size, d});
    b.eps = Tensor({batch_size, d});
    b.t.resize(batch_size);
    b.labels.resize(batch_size);
    for (std::size_t i = 0; i < batch_size; ++i) {
        const std::size_t idx = std::size_t(rng.below(data.x.rows()));
        for (std::size_t c = 0; c < d; ++c) {
            b.x0.at(i, c) = data.x.at(idx, c);
            b.eps.at(i, c) = rng.normal();
        }
        b.t[i] = rng.uniform();
        const bool drop = cond_drop_prob > 0.0 && rng.uniform() < cond_drop_prob;
        b.labels[i] = drop ? data.n_classes : data.labels[idx];
    }
    return b;
}

Tape::Id flow_loss_tape(Tape& t, const FlowModel& m, const ModelIds& ids, const FlowBatch& batch,
                        ForwardTrace* trace) {
    Tensor x_t, v_target;
    interpolate(batch.x0, batch.eps, batch.t, &x_t, &v_target);
    const Tape::Id v = velocity_forward(t, m, ids, x_t, batch.t, batch.labels, trace);
    return t.mse(v, t.constant(std::move(v_target)));
}

double flow_loss(const FlowModel& m, const FlowBatch& batch) {
    Tape t;
    const ModelIds ids = leaf_params(t, m);
    return t.val(flow_loss_tape(t, m, ids, batch))[0];
}

void TrainConfig::validate() const {
    if (batch_size == 0) throw ConfigError("train: batch_size must be positive");
    if (cond_drop_prob < 0.0 || cond_drop_prob > 1.0)
        throw ConfigError("train: cond_drop_prob must lie in [0, 1]");
    if (log_every == 0) throw ConfigError("train: log_every must be positive");
}

TrainState TrainState::init(const ModelConfig& cfg, std::uint64_t seed) {
    TrainState s;
    Rng mr = Rng(seed).fork(kTagModelInit);
    s.model = FlowModel::init(cfg, mr);
    s.rng = Rng(seed).fork(kTagTrainStream);
    return s;
}

void save_train_state(const std::string& dir, const TrainState& state) {
    NamedTensors out;
    out.emplace_back("meta.config", string_to_tensor(model_config_to_json(state.model.cfg)));
    Tensor step({1});
    step[0] = double(state.step);
    out.emplace_back("meta.step", std::move(step));
    out.emplace_back("meta.rng", string_to_tensor(state.rng.state_string()));
    for (std::size_t i = 0; i < state.model.params.size(); ++i)
        out.emplace_back("p." + state.model.params.name(i), state.model.params.tensor(i));
    for (std::size_t i = 0; i < state.model.biases.size(); ++i) {
        Tensor b({state.model.biases[i].size()});
        for (std::size_t j = 0; j < b.size(); ++j) b[j] = state.model.biases[i][j];
        out.emplace_back("bias.blk" + std::to_string(i), std::move(b));
    }
    if (state.model.cond_mix.size() > 0) out.emplace_back("buf.cond.mix", state.model.cond_mix);
    for (const auto& [name, tensor] : state.opt_state) out.emplace_back("opt." + name, tensor);
    save_checkpoint(dir, out);
}

TrainState load_train_state(const std::string& dir) {
    const NamedTensors in = load_checkpoint(dir);
    const ModelConfig cfg =
        model_config_from_json(tensor_to_string(checkpoint_get(in, "meta.config")));
    TrainState s;
    Rng dummy(0);
    s.model = FlowModel::init(cfg, dummy);
    for (std::size_t i = 0; i < s.model.params.size(); ++i) {
        const std::string& name = s.model.params.name(i);
        s.model.params.tensor(i) = checkpoint_get(in, "p." + name);
    }
    for (std::size_t i = 0; i < s.model.biases.size(); ++i) {
        const Tensor& b = checkpoint_get(in, "bias.blk" + std::to_string(i));
        s.model.biases[i].assign(b.data(), b.data() + b.size());
    }
    if (s.model.cond_mix.size() > 0)
        s.model.cond_mix = checkpoint_get(in, "buf.cond.mix");
    s.step = std::int64_t(checkpoint_get(in, "meta.step")[0]);
    s.rng.set_state_string(tensor_to_string(checkpoint_get(in, "meta.rng")));
    for (const auto& [name, tensor] : in)
        if (name.rfind("opt.", 0) == 0) s.opt_state.emplace_back(name.substr(4), tensor);
    return s;
}

FlowBatch make_eval_batch(const Dataset& data, std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    return make_flow_batch(data, n, 0.0, rng);
}

void train(TrainState& state, const Dataset& data, const TrainConfig& cfg, MetricsWriter* metrics,
           const FlowBatch* eval_set, std::vector<double>* loss_log,
           std::vector<double>* eval_log) {
    cfg.validate();
    state.model.cfg.validate();
    if (cfg.eval_every > 0 && eval_set == nullptr)
        throw ContractError("train: eval cadence set without an eval batch");

    AdamW opt(state.model.params, cfg.opt);
    if (!state.opt_state.empty()) opt.state_load(state.opt_state);
    const bool moe = state.model.cfg.ffn == FfnKind::moe;
    const MoEConfig mcfg = state.model.cfg.block_moe();

    for (std::size_t s = 0; s < cfg.steps; ++s) {
        const FlowBatch batch =
            make_flow_batch(data, cfg.batch_size, cfg.cond_drop_prob, state.rng);
        Tape tape;
        const ModelIds ids = leaf_params(tape, state.model);
        ForwardTrace trace;
        const Tape::Id loss = flow_loss_tape(tape, state.model, ids, batch, &trace);
        const double lv = tape.val(loss)[0];
        if (!std::isfinite(lv)) {
            if (metrics) {
                metrics->write(state.step, "diverged", 1.0);
                metrics->flush();
            }
            throw OracleError("training diverged at step " + std::to_string(state.step));
        }
        tape.backward(loss);

        std::vector<Tensor> grads;
        grads.reserve(ids.ids.size());
        for (Tape::Id id : ids.ids) grads.push_back(tape.grad(id));
        opt.step(grads);

        double mom_sum = 0.0, ent_sum = 0.0, bias_linf = 0.0;
        if (moe) {
            for (std::size_t b = 0; b < trace.decisions.size(); ++b) {
                const LoadStats ls = load_stats(trace.decisions[b], mcfg.n_routed);
                update_bias(state.model.biases[b], ls.counts, mcfg.bias_step);
                mom_sum += ls.max_over_mean;
                ent_sum += ls.selection_entropy;
                for (double bb : state.model.biases[b])
                    bias_linf = std::max(bias_linf, std::fabs(bb));
            }
        }

        ++state.step;
        if (loss_log) loss_log->push_back(lv);
        if (metrics) {
            metrics->write(state.step, "loss", lv);
            if (moe && state.step % std::int64_t(cfg.log_every) == 0) {
                const double nb = double(trace.decisions.size());
                metrics->write(state.step, "max_over_mean", mom_sum / nb);
                metrics->write(state.step, "route_entropy", ent_sum / nb);
                metrics->write(state.step, "bias_linf", bias_linf);
            }
        }
        if (cfg.eval_every > 0 && state.step % std::int64_t(cfg.eval_every) == 0) {
            const double ev = flow_loss(state.model, *eval_set);
            if (eval_log) eval_log->push_back(ev);
            if (metrics) metrics->write(state.step, "eval_loss", ev);
        }
    }
    state.opt_state = opt.state_snapshot();
}

Tensor guided_velocity(const FlowModel& m, double scale, const Tensor& x,
                       const std::vector<double>& ts, const std::vector<int>& labels) {
    if (scale == 1.0) {
        // Exactly the conditional velocity: guidance at scale 1 is the
        // identity, so no unconditional pass is run at all.
        return velocity_eval(m, x, ts, labels);
    }
    const Tensor vc = velocity_eval(m, x, ts, labels);
    const std::vector<int> null_labels(x.rows(), int(m.cfg.n_classes));
    const Tensor vu = velocity_eval(m, x, ts, null_labels);
    Tensor v(vc.shape());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = vu[i] + scale * (vc[i] - vu[i]);
    return v;
}

std::size_t euler_step(const FlowModel& m, const FlowConfig& cfg, const std::vector<int>& labels,
                       double t_hi, double t_lo, Tensor& x) {
    const std::vector<double> ts(x.rows(), t_hi);
    const Tensor v = guided_velocity(m, cfg.cfg_scale, x, ts, labels);
    for (std::size_t i = 0; i < x.size(); ++i) x[i] -= (t_hi - t_lo) * v[i];
    return cfg.cfg_scale == 1.0 ? 1 : 2;
}

Tensor sample_from(const FlowModel& m, const FlowConfig& cfg, const Tensor& noise,
                   const std::vector<int>& labels, std::size_t* n_evals) {
    const std::vector<double> sched = cfg.schedule();
    if (labels.empty()) throw ContractError("sample: empty label list");
    if (noise.rows() != labels.size() || noise.cols() != m.cfg.data_dim)
        throw ShapeError("sample: noise shape disagrees with the label list");
    Tensor x = noise;
    for (std::size_t k = cfg.n_steps; k >= 1; --k) {
        const std::size_t e = euler_step(m, cfg, labels, sched[k], sched[k - 1], x);
        if (n_evals) *n_evals += e;
    }
    return x;
}

Tensor sample(const FlowModel& m, const FlowConfig& cfg, const std::vector<int>& labels, Rng& rng,
              std::size_t* n_evals) {
    if (labels.empty()) throw ContractError("sample: empty label list");
    Tensor noise({labels.size(), m.cfg.data_dim});
    for (std::size_t i = 0; i < noise.size(); ++i) noise[i] = rng.normal();
    return sample_from(m, cfg, noise, labels, n_evals);
}

}  // namespace moeflow
