#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "moeflow/dataset.hpp"
#include "moeflow/flow_model.hpp"
#include "moeflow/metrics.hpp"
#include "moeflow/params.hpp"

namespace moeflow {

/// Rectified-flow training and sampling for the velocity network:
/// x_t = (1-t) x0 + t eps, target velocity eps - x0, Euler integration
/// from t=1 down to 0 with optional classifier-free guidance.

struct FlowConfig {
    std::size_t n_steps = 30;
    /// Strictly increasing grid from 0 to 1 with n_steps+1 points; empty
    /// means uniform. The sampler walks it from the back.
    std::vector<double> t_schedule;
    double cfg_scale = 1.0;       // 1 collapses to the pure conditional path
    double cond_drop_prob = 0.1;  // training-time condition dropout

    std::vector<double> schedule() const;  // resolved, validated grid
    void validate() const;
};

/// One training batch, fully drawn up front so the loss is a deterministic
/// function of the batch contents.
struct FlowBatch {
    Tensor x0;                // [B x data_dim]
    Tensor eps;               // [B x data_dim], standard normal
    std::vector<double> t;    // [B], uniform in [0,1]
    std::vector<int> labels;  // after condition dropout (null where dropped)
};

/// x_t = (1-t) x0 + t eps and v_target = eps - x0, row-wise with per-row t.
void interpolate(const Tensor& x0, const Tensor& eps, const std::vector<double>& t,
                 Tensor* x_t, Tensor* v_target);

FlowBatch make_flow_batch(const Dataset& data, std::size_t batch_size, double cond_drop_prob,
                          Rng& rng);

/// Velocity regression loss on the tape; scalar id. Records routing
/// decisions into `trace` when given.
Tape::Id flow_loss_tape(Tape& t, const FlowModel& m, const ModelIds& ids, const FlowBatch& batch,
                        ForwardTrace* trace = nullptr);

/// Value-only loss of the model on a fixed batch.
double flow_loss(const FlowModel& m, const FlowBatch& batch);

struct TrainConfig {
    std::size_t steps = 2000;
    std::size_t batch_size = 256;
    AdamWConfig opt;              // lr 1e-3 default
    double cond_drop_prob = 0.1;
    std::size_t log_every = 10;   // metric cadence for balance telemetry
    std::size_t eval_every = 0;   // 0 disables held-out evaluation
    void validate() const;
};

/// Everything training mutates, checkpointable as one unit. The invariant:
/// save, reload, continue == never saved, bit for bit (f64 end to end).
struct TrainState {
    FlowModel model;
    NamedTensors opt_state;  // adaptive moments + step, insertion-ordered
    std::int64_t step = 0;
    Rng rng{0};

    static TrainState init(const ModelConfig& cfg, std::uint64_t seed);
};

void save_train_state(const std::string& dir, const TrainState& state);
TrainState load_train_state(const std::string& dir);

/// Fixed held-out batch (no condition dropout) with a deterministic (t, eps)
/// draw, so eval losses are comparable across runs and architectures.
FlowBatch make_eval_batch(const Dataset& data, std::size_t n, std::uint64_t seed);

/// Runs `cfg.steps` optimizer steps, appending to the state. Per step:
/// fresh batch from the state rng, tape forward/backward, optimizer update,
/// then one balancing bias step per expert block from that step's loads.
/// Metrics go to `metrics` when given ("loss" every step, balance telemetry
/// every log_every, "eval_loss" every eval_every against `eval_set`).
/// A non-finite loss aborts with a diagnostic record after logging it.
void train(TrainState& state, const Dataset& data, const TrainConfig& cfg,
           MetricsWriter* metrics = nullptr, const FlowBatch* eval_set = nullptr,
           std::vector<double>* loss_log = nullptr,
           std::vector<double>* eval_log = nullptr);

/// Guided field v_u + scale (v_c - v_u) at one time slice; scale == 1 is
/// exactly the conditional field computed with a single evaluation.
Tensor guided_velocity(const FlowModel& m, double scale, const Tensor& x,
                       const std::vector<double>& ts, const std::vector<int>& labels);

/// One in-place Euler update x -= (t_hi - t_lo) v(x, t_hi) along the guided
/// field. Returns the number of velocity evaluations (1 or 2).
std::size_t euler_step(const FlowModel& m, const FlowConfig& cfg, const std::vector<int>& labels,
                       double t_hi, double t_lo, Tensor& x);

/// Euler walk along the reversed schedule from caller-supplied noise at t=1.
Tensor sample_from(const FlowModel& m, const FlowConfig& cfg, const Tensor& noise,
                   const std::vector<int>& labels, std::size_t* n_evals = nullptr);

/// Euler sampler along the reversed schedule from pure noise at t=1.
/// `n_evals` (when given) counts model forward calls.
Tensor sample(const FlowModel& m, const FlowConfig& cfg, const std::vector<int>& labels, Rng& rng,
              std::size_t* n_evals = nullptr);

}  // namespace moeflow
