#include "moeflow/post_train.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "moeflow/dataset.hpp"
#include "moeflow/error.hpp"
#include "moeflow/router.hpp"

namespace moeflow {

namespace {

constexpr std::uint64_t kTagDistillStream = 0x33;

FlowConfig student_flow(const JointConfig& cfg) {
    FlowConfig f;
    f.n_steps = cfg.student_steps;
    f.cfg_scale = 1.0;  // the student never sees guidance
    return f;
}

FlowConfig teacher_flow(const JointConfig& cfg) {
    FlowConfig f;
    f.n_steps = cfg.teacher_steps;
    f.cfg_scale = cfg.teacher_cfg_scale;
    return f;
}

/// Distinct (pre, post) condition pair, uniform over ordered pairs.
std::pair<int, int> draw_condition_pair(std::size_t n_classes, Rng& rng) {
    const int pre = int(rng.below(n_classes));
    int post = int(rng.below(n_classes - 1));
    if (post >= pre) ++post;
    return {pre, post};
}

}  // namespace

void JointConfig::validate() const {
    if (lambda_dmd < 0.0 || !std::isfinite(lambda_dmd))
        throw ConfigError("joint config: lambda_dmd must be finite and >= 0");
    if (lambda_nft < 0.0 || !std::isfinite(lambda_nft))
        throw ConfigError("joint config: lambda_nft must be finite and >= 0");
    if (student_steps < 1) throw ConfigError("joint config: student_steps must be >= 1");
    if (teacher_steps < 1) throw ConfigError("joint config: teacher_steps must be >= 1");
    if (!std::isfinite(teacher_cfg_scale))
        throw ConfigError("joint config: teacher_cfg_scale must be finite");
    if (dmd_batch < 1) throw ConfigError("joint config: dmd_batch must be >= 1");
    if (beta < 0.0 || !std::isfinite(beta))
        throw ConfigError("joint config: beta must be finite and >= 0");
    if (lambda_nft > 0.0) {
        if (group_size < 2)
            throw ConfigError("joint config: reward groups need at least two rollouts");
        if (n_groups < 1) throw ConfigError("joint config: n_groups must be >= 1");
    }
    if (eval_every > 0 && eval_size < 1)
        throw ConfigError("joint config: eval cadence set with an empty eval set");
    if (dataset.empty()) throw ConfigError("joint config: dataset name is empty");
}

void RewardSpec::validate() {
    if (components.empty()) throw ConfigError("reward spec: no components");
    double sum = 0.0;
    for (const auto& [name, w] : components) {
        if (!(w >= 0.0)) throw ConfigError("reward spec: negative weight for " + name);
        sum += w;
    }
    if (!(sum > 0.0)) throw ConfigError("reward spec: weights sum to zero");
    for (auto& [name, w] : components) w /= sum;
}

double support_radius(const std::string& dataset) {
    if (dataset == "conditional_gmm") return 8.0;
    if (dataset == "gmm8") return 5.0;
    if (dataset == "checkerboard") return 6.0;
    throw ConfigError("no support radius for dataset: " + dataset);
}

std::vector<std::pair<std::string, double>> reward_components(const std::vector<double>& sample,
                                                              const std::vector<double>& ref,
                                                              int label,
                                                              const std::string& dataset) {
    const double edit = -edit_distance(sample, label, dataset);

    const std::vector<std::size_t> mask = unedited_dims(dataset);
    const double background = mask.empty() ? 0.0 : -consistency_score(sample, ref, mask);

    double norm2 = 0.0;
    for (double v : sample) norm2 += v * v;
    const double visual = -std::max(0.0, std::sqrt(norm2) - support_radius(dataset));

    return {{"edit_quality", edit},
            {"background_consistency", background},
            {"visual_quality", visual}};
}

double weighted_reward(const std::vector<std::pair<std::string, double>>& comps,
                       const RewardSpec& spec) {
    double out = 0.0;
    for (const auto& [name, w] : spec.components) {
        bool found = false;
        for (const auto& [cname, score] : comps) {
            if (cname == name) {
                out += w * score;
                found = true;
                break;
            }
        }
        if (!found) throw ConfigError("unknown reward component: " + name);
    }
    return out;
}

std::vector<double> zscore(const std::vector<double>& v) {
    const std::size_t n = v.size();
    if (n == 0) return {};
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= double(n);
    double var = 0.0;
    for (double x : v) var += (x - mean) * (x - mean);
    var /= double(n);
    if (!(var > 0.0)) return std::vector<double>(n, 0.0);
    const double sd = std::sqrt(var);
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = (v[i] - mean) / sd;
    return out;
}

std::vector<double> hybrid_rewards(const std::vector<Rollout>& group, const RewardSpec& spec,
                                   const std::string& dataset) {
    if (group.size() < 2)
        throw ContractError("hybrid rewards: a group needs at least two rollouts");
    std::vector<double> raw;
    raw.reserve(group.size());
    for (const Rollout& r : group)
        raw.push_back(weighted_reward(reward_components(r.sample, r.ref, r.label, dataset), spec));
    return zscore(raw);
}

DistillState DistillState::init(const FlowModel& teacher, std::uint64_t seed) {
    DistillState s;
    s.teacher = teacher;
    s.student = teacher;
    s.fake = teacher;
    s.rng = Rng(seed).fork(kTagDistillStream);
    return s;
}

DmdTerm dmd_loss_tape(Tape& t, const FlowModel& student, const ModelIds& student_ids,
                      const FlowModel& fake, const FlowModel& teacher, const JointConfig& cfg,
                      const std::vector<int>& labels, Rng& rng, ForwardTrace* trace) {
    const std::size_t B = labels.size();
    if (B == 0) throw ContractError("dmd: empty label list");
    const std::size_t d = student.cfg.data_dim;

    // Few-step student samples, every Euler update on the tape so the pulled
    // back direction reaches the parameters through the whole chain.
    Tensor eps({B, d});
    for (std::size_t i = 0; i < eps.size(); ++i) eps[i] = rng.normal();
    const std::vector<double> grid = student_flow(cfg).schedule();
    Tape::Id x = t.constant(eps);
    for (std::size_t k = cfg.student_steps; k >= 1; --k) {
        const std::vector<double> ts(B, grid[k]);
        const Tape::Id v = velocity_forward(t, student, student_ids, x, ts, labels, trace);
        x = t.sub(x, t.scale(v, grid[k] - grid[k - 1]));
    }

    // Re-diffuse the samples to fresh times, still on the tape.
    std::vector<double> tvec(B);
    for (std::size_t i = 0; i < B; ++i) tvec[i] = rng.uniform();
    Tensor one_minus_t({B});
    for (std::size_t i = 0; i < B; ++i) one_minus_t[i] = 1.0 - tvec[i];
    Tensor noise_part({B, d});
    for (std::size_t i = 0; i < B; ++i)
        for (std::size_t j = 0; j < d; ++j) noise_part.at(i, j) = tvec[i] * rng.normal();
    const Tape::Id x_t = t.add(t.scale_rows(x, t.constant(one_minus_t)), t.constant(noise_part));

    // The matching direction is a detached score gap: both velocity models
    // are evaluated off the tape and enter only as a constant weight.
    const Tensor x_t_val = t.val(x_t);
    const Tensor v_fake = velocity_eval(fake, x_t_val, tvec, labels);
    const Tensor v_teach = guided_velocity(teacher, cfg.teacher_cfg_scale, x_t_val, tvec, labels);
    Tensor dir({B, d});
    double mag = 0.0;
    for (std::size_t i = 0; i < dir.size(); ++i) {
        dir[i] = v_fake[i] - v_teach[i];
        mag += dir[i] * dir[i];
    }
    Tensor w({B, d});
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = dir[i] / double(B);

    return DmdTerm{t.dot_const(x_t, w), mag / double(B)};
}

Tape::Id nft_loss_tape(Tape& t, const FlowModel& student, const ModelIds& ids,
                       const std::vector<RolloutGroup>& groups,
                       const std::vector<std::vector<double>>& advantages, double beta, Rng& rng,
                       ForwardTrace* trace) {
    if (advantages.size() != groups.size())
        throw ShapeError("nft: advantage groups disagree with rollout groups");
    const std::size_t d = student.cfg.data_dim;

    // Zero-advantage rollouts contribute nothing: no tape nodes, no draws.
    std::vector<const Rollout*> rows;
    std::vector<double> adv;
    for (std::size_t g = 0; g < groups.size(); ++g) {
        const auto& rolls = groups[g].rollouts;
        if (rolls.size() < 2)
            throw ContractError("nft: a group needs at least two rollouts");
        if (advantages[g].size() != rolls.size())
            throw ShapeError("nft: advantage count disagrees with group size");
        for (std::size_t i = 0; i < rolls.size(); ++i) {
            const double a = advantages[g][i];
            if (!std::isfinite(a)) throw ContractError("nft: non-finite advantage");
            if (rolls[i].sample.size() != d)
                throw ShapeError("nft: rollout dimension disagrees with the model");
            if (a == 0.0) continue;
            rows.push_back(&rolls[i]);
            adv.push_back(a);
        }
    }
    const std::size_t N = rows.size();
    if (N == 0) {
        Tensor zero({std::size_t{1}});
        return t.constant(zero);
    }

    Tensor x0({N, d}), eps({N, d});
    std::vector<double> tvec(N);
    std::vector<int> labels(N);
    for (std::size_t i = 0; i < N; ++i) {
        tvec[i] = rng.uniform();
        for (std::size_t j = 0; j < d; ++j) {
            x0.at(i, j) = rows[i]->sample[j];
            eps.at(i, j) = rng.normal();
        }
        labels[i] = rows[i]->label;
    }
    Tensor x_t, v_tgt;
    interpolate(x0, eps, tvec, &x_t, &v_tgt);

    const Tape::Id v = velocity_forward(t, student, ids, x_t, tvec, labels, trace);
    const Tensor v_det = t.val(v);

    // Positive advantages regress toward the rollout's own target velocity;
    // negative ones toward the reflection of that target about the current
    // prediction, which pushes the field away at weight beta.
    Tensor target({N, d});
    Tensor sqrt_w({N});
    for (std::size_t i = 0; i < N; ++i) {
        if (adv[i] > 0.0) {
            for (std::size_t j = 0; j < d; ++j) target.at(i, j) = v_tgt.at(i, j);
            sqrt_w[i] = std::sqrt(adv[i]);
        } else {
            for (std::size_t j = 0; j < d; ++j)
                target.at(i, j) = 2.0 * v_det.at(i, j) - v_tgt.at(i, j);
            sqrt_w[i] = std::sqrt(beta * -adv[i]);
        }
    }
    Tensor zeros({N, d});
    return t.mse(t.scale_rows(t.sub(v, t.constant(target)), t.constant(sqrt_w)),
                 t.constant(zeros));
}

double eval_reward(const FlowModel& m, const FlowConfig& fc, const JointConfig& cfg,
                   const RewardSpec& spec) {
    if (m.cfg.n_classes < 2)
        throw ConfigError("reward eval: condition pairs need at least two classes");
    if (cfg.eval_size < 1) throw ContractError("reward eval: empty eval set");
    const std::size_t d = m.cfg.data_dim;
    Rng rng(cfg.eval_seed);
    double acc = 0.0;
    for (std::size_t i = 0; i < cfg.eval_size; ++i) {
        const auto [pre, post] = draw_condition_pair(m.cfg.n_classes, rng);
        Tensor noise({std::size_t{1}, d});
        for (std::size_t j = 0; j < d; ++j) noise[j] = rng.normal();
        const Tensor x_ref = sample_from(m, fc, noise, {pre});
        const Tensor x_post = sample_from(m, fc, noise, {post});
        const std::vector<double> ref(x_ref.data(), x_ref.data() + d);
        const std::vector<double> post_s(x_post.data(), x_post.data() + d);
        acc += weighted_reward(reward_components(post_s, ref, post, cfg.dataset), spec);
    }
    return acc / double(cfg.eval_size);
}

namespace {

/// One balancing step per expert block from every decision recorded on this
/// step's tapes. Each forward appends one decision per block in block order,
/// so decision i belongs to block i % n_blocks; loads are summed per block
/// before the single update.
void balance_from_trace(FlowModel& m, const ForwardTrace& trace) {
    if (m.cfg.ffn != FfnKind::moe || trace.decisions.empty()) return;
    const MoEConfig mcfg = m.cfg.block_moe();
    const std::size_t n_blocks = m.cfg.n_blocks;
    std::vector<std::vector<double>> counts(n_blocks);
    for (std::size_t i = 0; i < trace.decisions.size(); ++i) {
        const LoadStats ls = load_stats(trace.decisions[i], mcfg.n_routed);
        auto& c = counts[i % n_blocks];
        if (c.empty()) c.assign(ls.counts.size(), 0.0);
        for (std::size_t e = 0; e < ls.counts.size(); ++e) c[e] += ls.counts[e];
    }
    for (std::size_t b = 0; b < n_blocks; ++b)
        if (!counts[b].empty()) update_bias(m.biases[b], counts[b], mcfg.bias_step);
}

[[noreturn]] void abort_diverged(std::int64_t step, MetricsWriter* metrics) {
    if (metrics) {
        metrics->write(step, "diverged", 1.0);
        metrics->flush();
    }
    throw OracleError("joint training diverged at step " + std::to_string(step));
}

}  // namespace

void joint_train(DistillState& state, const JointConfig& cfg, const RewardSpec& spec_in,
                 std::size_t steps, MetricsWriter* metrics, JointLog* log) {
    cfg.validate();
    state.teacher.cfg.validate();
    RewardSpec spec = spec_in;
    spec.validate();
    const std::size_t n_classes = state.student.cfg.n_classes;
    const std::size_t d = state.student.cfg.data_dim;
    if ((cfg.lambda_nft > 0.0 || cfg.eval_every > 0) && n_classes < 2)
        throw ConfigError("joint training: condition pairs need at least two classes");

    AdamW sopt(state.student.params, cfg.student_opt);
    if (!state.student_opt.empty()) sopt.state_load(state.student_opt);
    AdamW fopt(state.fake.params, cfg.fake_opt);
    if (!state.fake_opt.empty()) fopt.state_load(state.fake_opt);

    const FlowConfig sfc = student_flow(cfg);

    double teacher_ref = 0.0;
    if (cfg.eval_every > 0) {
        teacher_ref = eval_reward(state.teacher, teacher_flow(cfg), cfg, spec);
        if (log) log->teacher_reward_ref = teacher_ref;
    }

    for (std::size_t s = 0; s < steps; ++s) {
        // Fake refit first: fresh few-step student samples become its
        // regression data, so it tracks the current student distribution.
        std::vector<int> fake_labels(cfg.dmd_batch);
        for (auto& l : fake_labels) l = int(state.rng.below(n_classes));
        Tensor noise({cfg.dmd_batch, d});
        for (std::size_t i = 0; i < noise.size(); ++i) noise[i] = state.rng.normal();
        FlowBatch fb;
        fb.x0 = sample_from(state.student, sfc, noise, fake_labels);
        fb.eps = Tensor({cfg.dmd_batch, d});
        for (std::size_t i = 0; i < fb.eps.size(); ++i) fb.eps[i] = state.rng.normal();
        fb.t.resize(cfg.dmd_batch);
        for (auto& tv : fb.t) tv = state.rng.uniform();
        fb.labels = fake_labels;

        {
            Tape ft;
            const ModelIds fids = leaf_params(ft, state.fake);
            ForwardTrace ftrace;
            const Tape::Id floss = flow_loss_tape(ft, state.fake, fids, fb, &ftrace);
            if (!std::isfinite(ft.val(floss)[0])) abort_diverged(state.step, metrics);
            ft.backward(floss);
            std::vector<Tensor> grads;
            grads.reserve(fids.ids.size());
            for (Tape::Id id : fids.ids) grads.push_back(ft.grad(id));
            fopt.step(grads);
            balance_from_trace(state.fake, ftrace);
        }

        // Student update: distribution matching, plus the reward term once
        // past the cold start.
        std::vector<int> dmd_labels(cfg.dmd_batch);
        for (auto& l : dmd_labels) l = int(state.rng.below(n_classes));
        Tape st;
        const ModelIds sids = leaf_params(st, state.student);
        ForwardTrace strace;
        const DmdTerm dmd =
            dmd_loss_tape(st, state.student, sids, state.fake, state.teacher, cfg, dmd_labels,
                          state.rng, &strace);
        if (!std::isfinite(dmd.scalar)) abort_diverged(state.step, metrics);
        Tape::Id total = st.scale(dmd.surrogate, cfg.lambda_dmd);

        double nft_scalar = 0.0;
        const bool nft_active =
            cfg.lambda_nft > 0.0 && state.step >= std::int64_t(cfg.cold_start_steps);
        if (nft_active) {
            std::vector<RolloutGroup> groups(cfg.n_groups);
            std::vector<std::vector<double>> advantages(cfg.n_groups);
            for (std::size_t g = 0; g < cfg.n_groups; ++g) {
                auto& grp = groups[g];
                const auto [pre, post] = draw_condition_pair(n_classes, state.rng);
                grp.cond_pre = pre;
                grp.cond_post = post;
                grp.rollouts.resize(cfg.group_size);
                for (std::size_t i = 0; i < cfg.group_size; ++i) {
                    Tensor nrow({std::size_t{1}, d});
                    for (std::size_t j = 0; j < d; ++j) nrow[j] = state.rng.normal();
                    const Tensor x_post = sample_from(state.student, sfc, nrow, {post});
                    const Tensor x_ref = sample_from(state.student, sfc, nrow, {pre});
                    grp.rollouts[i].sample.assign(x_post.data(), x_post.data() + d);
                    grp.rollouts[i].ref.assign(x_ref.data(), x_ref.data() + d);
                    grp.rollouts[i].label = post;
                }
                advantages[g] = hybrid_rewards(grp.rollouts, spec, cfg.dataset);
            }
            const Tape::Id nft = nft_loss_tape(st, state.student, sids, groups, advantages,
                                               cfg.beta, state.rng, &strace);
            nft_scalar = st.val(nft)[0];
            if (!std::isfinite(nft_scalar)) abort_diverged(state.step, metrics);
            total = st.add(total, st.scale(nft, cfg.lambda_nft));
        }

        st.backward(total);
        std::vector<Tensor> grads;
        grads.reserve(sids.ids.size());
        for (Tape::Id id : sids.ids) grads.push_back(st.grad(id));
        sopt.step(grads);
        balance_from_trace(state.student, strace);

        ++state.step;
        if (log) {
            log->dmd.push_back(dmd.scalar);
            log->nft.push_back(nft_scalar);
        }
        if (metrics) {
            metrics->write(state.step, "dmd_loss", dmd.scalar);
            metrics->write(state.step, "nft_loss", nft_scalar);
        }
        if (cfg.eval_every > 0 && state.step % std::int64_t(cfg.eval_every) == 0) {
            const double sr = eval_reward(state.student, sfc, cfg, spec);
            if (log) {
                log->reward_steps.push_back(state.step);
                log->student_reward.push_back(sr);
            }
            if (metrics) {
                metrics->write(state.step, "student_reward", sr);
                metrics->write(state.step, "teacher_reward_ref", teacher_ref);
            }
        }
    }
    state.student_opt = sopt.state_snapshot();
    state.fake_opt = fopt.state_snapshot();
}

}  // namespace moeflow
