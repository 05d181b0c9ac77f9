#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "moeflow/flow_train.hpp"

namespace moeflow {

/// Paired sample synthesis: generate two samples from one noise draw whose
/// early denoising steps are shared, score how well the edit preserved the
/// untouched dimensions, filter, and double the survivors by inversion.

enum class PairDirection { forward, inverted };
std::string pair_direction_to_string(PairDirection d);
PairDirection pair_direction_from_string(const std::string& s);

/// One generation request: two conditions that differ in the edited
/// attribute, how many early Euler steps the trajectories share, and the
/// seed that fixes the initial noise.
struct PairSpec {
    int cond_pre = 0;
    int cond_post = 0;
    std::size_t shared_steps = 0;
    std::uint64_t seed = 0;
};

struct PairRecord {
    std::vector<double> sample_pre;
    std::vector<double> sample_post;
    PairSpec spec;
    double consistency = 0.0;
    PairDirection direction = PairDirection::forward;
};

/// Two samples from one noise draw. The first spec.shared_steps Euler steps
/// run once under cond_pre and seed both trajectories; the remaining steps
/// run independently under each condition. Deterministic in spec.seed.
std::pair<std::vector<double>, std::vector<double>> paired_generate(const FlowModel& m,
                                                                    const PairSpec& spec,
                                                                    const FlowConfig& cfg);

/// Mean squared difference over the unedited dimensions; 0 means the edit
/// left everything outside its attribute untouched.
double consistency_score(const std::vector<double>& a, const std::vector<double>& b,
                         const std::vector<std::size_t>& unedited_mask);

/// Distance from a sample to its condition's target over the edited
/// dimensions (all dimensions when the dataset edits everything).
double edit_distance(const std::vector<double>& sample, int label, const std::string& dataset);

/// Distance of a sample to its condition's target, used as the quality gate.
using QualityFn = std::function<double(const std::vector<double>&, int)>;

/// Keep records whose consistency clears max_inconsistency and whose two
/// samples both clear max_quality under `quality`, preserving order. An
/// empty quality function disables the quality gate.
std::vector<PairRecord> filter_pairs(const std::vector<PairRecord>& records,
                                     double max_inconsistency, const QualityFn& quality,
                                     double max_quality);

/// Swapped copy of a forward record: samples and conditions exchanged,
/// direction flipped, consistency carried over bit for bit.
PairRecord invert_pair(const PairRecord& r);

struct SynthConfig {
    FlowConfig flow;
    /// Supplies the unedited-dimension mask and per-condition targets.
    std::string dataset = "conditional_gmm";
    double max_inconsistency = 0.5;
    double max_quality = 1.0;
    std::size_t workers = 1;
};

struct SynthSummary {
    std::size_t n_generated = 0;  // pairs drawn
    std::size_t n_kept = 0;       // pairs surviving the filter
    std::size_t n_records = 0;    // records written: kept pairs + inversions
    /// Pre-filter mean consistency grouped by shared_steps, ascending.
    std::vector<std::pair<std::size_t, double>> mean_consistency_by_s;
};

std::string pair_record_to_json(const PairRecord& r);
PairRecord pair_record_from_json(const std::string& line);
std::string synth_summary_to_json(const SynthSummary& s);

/// generate -> score -> filter -> invert. Writes one record per line to
/// `out_path` (each kept pair followed by its inversion) and the summary to
/// `out_path + ".summary"`. Specs generate in parallel across
/// cfg.workers threads; output and summary are byte-identical for any
/// worker count.
SynthSummary synth_dataset(const FlowModel& m, const std::vector<PairSpec>& specs,
                           const SynthConfig& cfg, const std::string& out_path);

}  // namespace moeflow
