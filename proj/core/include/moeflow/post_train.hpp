#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "moeflow/flow_train.hpp"
#include "moeflow/paired_synth.hpp"

namespace moeflow {

/// Joint few-step distillation + reward post-training. A frozen multi-step
/// guided teacher is compressed into a CFG-free few-step student while an
/// online fake model tracks the student's output distribution; after a cold
/// start the loss adds a contrastive reward-guided flow term driven by
/// synthetic reward oracles.

struct JointConfig {
    double lambda_dmd = 1.0;
    double lambda_nft = 0.5;
    std::size_t cold_start_steps = 500;  // distribution matching only before this
    std::size_t student_steps = 4;
    std::size_t teacher_steps = 30;
    double teacher_cfg_scale = 2.0;
    std::size_t group_size = 16;  // rollouts per condition group
    std::size_t n_groups = 2;     // condition groups per reward step
    std::size_t dmd_batch = 16;
    double beta = 0.5;  // weight of the push-away term on negative advantages
    AdamWConfig student_opt;
    AdamWConfig fake_opt;
    std::string dataset = "conditional_gmm";  // reward oracles and targets
    std::size_t eval_every = 25;              // reward-curve cadence; 0 disables
    std::size_t eval_size = 64;
    std::uint64_t eval_seed = 1234;

    void validate() const;
};

/// Weighted reward fusion: component weights are normalized to sum to 1 by
/// validate(), which rejects negative weights and empty specs.
struct RewardSpec {
    std::vector<std::pair<std::string, double>> components{
        {"edit_quality", 0.5}, {"background_consistency", 0.3}, {"visual_quality", 0.2}};

    void validate();
};

/// One policy sample for reward scoring: the generated (post-edit) sample,
/// the same-noise pre-edit reference, and the post-edit condition.
struct Rollout {
    std::vector<double> sample;
    std::vector<double> ref;
    int label = 0;
};

struct RolloutGroup {
    int cond_pre = 0;
    int cond_post = 0;
    std::vector<Rollout> rollouts;
};

/// Named reward oracles for a sample under its condition. edit_quality is
/// the negative distance to the condition's target, background_consistency
/// the negative drift on unedited dimensions against the reference (0 when
/// the dataset has none), visual_quality the negative overshoot beyond the
/// dataset's support radius.
std::vector<std::pair<std::string, double>> reward_components(const std::vector<double>& sample,
                                                              const std::vector<double>& ref,
                                                              int label,
                                                              const std::string& dataset);

double support_radius(const std::string& dataset);

/// Weighted sum of component scores under a validated spec; unknown
/// component names in the spec are an error.
double weighted_reward(const std::vector<std::pair<std::string, double>>& comps,
                       const RewardSpec& spec);

/// Batch z-score: mean 0 and std 1 whenever the variance is positive, all
/// zeros when it is not.
std::vector<double> zscore(const std::vector<double>& v);

/// Weighted rewards for one group, z-scored across the group.
std::vector<double> hybrid_rewards(const std::vector<Rollout>& group, const RewardSpec& spec,
                                   const std::string& dataset);

/// Everything joint training mutates. The teacher is frozen: joint_train
/// never writes to it.
struct DistillState {
    FlowModel teacher;
    FlowModel student;  // initialized from the teacher
    FlowModel fake;     // online estimate of the student's distribution
    NamedTensors student_opt, fake_opt;
    std::int64_t step = 0;
    Rng rng{0};

    static DistillState init(const FlowModel& teacher, std::uint64_t seed);
};

/// Distribution-matching term. Draws few-step student samples on the tape,
/// diffuses them to random times, and pulls the detached fake-minus-teacher
/// velocity gap back through the whole sampling chain. `scalar` reports the
/// mean squared magnitude of that gap; `surrogate` is the tape node whose
/// gradient realizes the update.
struct DmdTerm {
    Tape::Id surrogate;
    double scalar = 0.0;
};
DmdTerm dmd_loss_tape(Tape& t, const FlowModel& student, const ModelIds& student_ids,
                      const FlowModel& fake, const FlowModel& teacher, const JointConfig& cfg,
                      const std::vector<int>& labels, Rng& rng, ForwardTrace* trace = nullptr);

/// Contrastive reward-guided flow term: positive advantages weight a
/// regression toward the rollout sample, negative ones a regression toward
/// the reflected target 2 v_detached - v_target scaled by beta. Advantages
/// of zero contribute exactly nothing.
Tape::Id nft_loss_tape(Tape& t, const FlowModel& student, const ModelIds& ids,
                       const std::vector<RolloutGroup>& groups,
                       const std::vector<std::vector<double>>& advantages, double beta, Rng& rng,
                       ForwardTrace* trace = nullptr);

/// Reward curves for tests and reports. Rewards are raw weighted fusions
/// (not z-scored) so the student curve and the teacher level share a scale.
struct JointLog {
    std::vector<double> dmd;  // per step, 0 when the term is off
    std::vector<double> nft;
    std::vector<std::int64_t> reward_steps;
    std::vector<double> student_reward;
    double teacher_reward_ref = 0.0;
};

/// Mean raw weighted reward of a policy on the frozen eval set: same-noise
/// pre/post generations under enumerated condition pairs.
double eval_reward(const FlowModel& m, const FlowConfig& fc, const JointConfig& cfg,
                   const RewardSpec& spec);

/// Runs `steps` joint updates: each step refits the fake model on fresh
/// student samples, then applies one student update from
/// lambda_dmd * DMD (+ lambda_nft * NFT once step >= cold_start_steps).
/// Metric names: dmd_loss, nft_loss, student_reward, teacher_reward_ref.
void joint_train(DistillState& state, const JointConfig& cfg, const RewardSpec& spec,
                 std::size_t steps, MetricsWriter* metrics = nullptr, JointLog* log = nullptr);

}  // namespace moeflow
