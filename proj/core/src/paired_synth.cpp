#include "moeflow/paired_synth.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <fstream>
#include <json.hpp>
#include <map>
#include <thread>

#include "moeflow/dataset.hpp"
#include "moeflow/error.hpp"

namespace moeflow {

std::string pair_direction_to_string(PairDirection d) {
    return d == PairDirection::forward ? "forward" : "inverted";
}

PairDirection pair_direction_from_string(const std::string& s) {
    if (s == "forward") return PairDirection::forward;
    if (s == "inverted") return PairDirection::inverted;
    throw ConfigError("unknown pair direction: " + s);
}

std::pair<std::vector<double>, std::vector<double>> paired_generate(const FlowModel& m,
                                                                    const PairSpec& spec,
                                                                    const FlowConfig& cfg) {
    const std::vector<double> sched = cfg.schedule();
    if (spec.shared_steps > cfg.n_steps)
        throw ContractError("paired_generate: shared prefix longer than the walk");
    const std::size_t d = m.cfg.data_dim;

    Rng rng(spec.seed);
    Tensor x({std::size_t{1}, d});
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = rng.normal();

    // Shared prefix, computed once under the pre-edit condition.
    const std::vector<int> pre{spec.cond_pre};
    const std::vector<int> post{spec.cond_post};
    const std::size_t branch = cfg.n_steps - spec.shared_steps;
    for (std::size_t k = cfg.n_steps; k > branch; --k)
        euler_step(m, cfg, pre, sched[k], sched[k - 1], x);

    Tensor xa = x, xb = x;
    for (std::size_t k = branch; k >= 1; --k) {
        euler_step(m, cfg, pre, sched[k], sched[k - 1], xa);
        euler_step(m, cfg, post, sched[k], sched[k - 1], xb);
    }
    return {std::vector<double>(xa.data(), xa.data() + d),
            std::vector<double>(xb.data(), xb.data() + d)};
}

double edit_distance(const std::vector<double>& sample, int label, const std::string& dataset) {
    const std::vector<double> target = component_mean(dataset, label);
    const std::vector<std::size_t> mask = unedited_dims(dataset);
    double acc = 0.0;
    for (std::size_t dim = 0; dim < sample.size(); ++dim) {
        if (std::find(mask.begin(), mask.end(), dim) != mask.end()) continue;
        const double diff = sample[dim] - target[dim];
        acc += diff * diff;
    }
    return std::sqrt(acc);
}

double consistency_score(const std::vector<double>& a, const std::vector<double>& b,
                         const std::vector<std::size_t>& unedited_mask) {
    if (a.size() != b.size()) throw ShapeError("consistency_score: size mismatch");
    if (unedited_mask.empty()) throw ContractError("consistency_score: empty mask");
    double acc = 0.0;
    for (std::size_t dim : unedited_mask) {
        if (dim >= a.size()) throw ShapeError("consistency_score: mask dimension out of range");
        const double diff = a[dim] - b[dim];
        acc += diff * diff;
    }
    return acc / double(unedited_mask.size());
}

std::vector<PairRecord> filter_pairs(const std::vector<PairRecord>& records,
                                     double max_inconsistency, const QualityFn& quality,
                                     double max_quality) {
    if (std::isnan(max_inconsistency) || std::isnan(max_quality))
        throw ContractError("filter_pairs: threshold is not a number");
    std::vector<PairRecord> kept;
    for (const PairRecord& r : records) {
        if (!(r.consistency <= max_inconsistency)) continue;
        if (quality) {
            if (!(quality(r.sample_pre, r.spec.cond_pre) <= max_quality)) continue;
            if (!(quality(r.sample_post, r.spec.cond_post) <= max_quality)) continue;
        }
        kept.push_back(r);
    }
    return kept;
}

PairRecord invert_pair(const PairRecord& r) {
    if (r.direction != PairDirection::forward)
        throw ContractError("invert_pair: record is already inverted");
    PairRecord out = r;
    std::swap(out.sample_pre, out.sample_post);
    std::swap(out.spec.cond_pre, out.spec.cond_post);
    out.direction = PairDirection::inverted;
    return out;
}

std::string pair_record_to_json(const PairRecord& r) {
    const nlohmann::json j{{"spec",
                            {{"cond_pre", r.spec.cond_pre},
                             {"cond_post", r.spec.cond_post},
                             {"shared_steps", r.spec.shared_steps},
                             {"seed", r.spec.seed}}},
                           {"sample_pre", r.sample_pre},
                           {"sample_post", r.sample_post},
                           {"consistency", r.consistency},
                           {"direction", pair_direction_to_string(r.direction)}};
    return j.dump();
}

PairRecord pair_record_from_json(const std::string& line) {
    const nlohmann::json j = nlohmann::json::parse(line);
    PairRecord r;
    const nlohmann::json& s = j.at("spec");
    r.spec.cond_pre = s.at("cond_pre").get<int>();
    r.spec.cond_post = s.at("cond_post").get<int>();
    r.spec.shared_steps = s.at("shared_steps").get<std::size_t>();
    r.spec.seed = s.at("seed").get<std::uint64_t>();
    r.sample_pre = j.at("sample_pre").get<std::vector<double>>();
    r.sample_post = j.at("sample_post").get<std::vector<double>>();
    r.consistency = j.at("consistency").get<double>();
    r.direction = pair_direction_from_string(j.at("direction").get<std::string>());
    return r;
}

std::string synth_summary_to_json(const SynthSummary& s) {
    nlohmann::json by_s = nlohmann::json::array();
    for (const auto& [steps, mean] : s.mean_consistency_by_s)
        by_s.push_back({{"shared_steps", steps}, {"mean_consistency", mean}});
    const nlohmann::json j{{"n_generated", s.n_generated},
                           {"n_kept", s.n_kept},
                           {"n_records", s.n_records},
                           {"mean_consistency_by_s", by_s}};
    return j.dump(2);
}

SynthSummary synth_dataset(const FlowModel& m, const std::vector<PairSpec>& specs,
                           const SynthConfig& cfg, const std::string& out_path) {
    cfg.flow.validate();
    if (std::isnan(cfg.max_inconsistency) || std::isnan(cfg.max_quality))
        throw ContractError("synth_dataset: threshold is not a number");
    const std::vector<std::size_t> mask = unedited_dims(cfg.dataset);
    if (mask.empty() && !specs.empty())
        throw ConfigError("synth_dataset: dataset '" + cfg.dataset +
                          "' has no unedited dimensions to score");

    // Generation is the expensive part; fan specs out across workers and
    // keep everything downstream in spec order so the output is
    // byte-identical for any worker count.
    std::vector<PairRecord> records(specs.size());
    auto generate_range = [&](std::size_t worker, std::size_t stride) {
        for (std::size_t i = worker; i < specs.size(); i += stride) {
            auto [a, b] = paired_generate(m, specs[i], cfg.flow);
            records[i].sample_pre = std::move(a);
            records[i].sample_post = std::move(b);
            records[i].spec = specs[i];
            records[i].consistency =
                consistency_score(records[i].sample_pre, records[i].sample_post, mask);
        }
    };
    const std::size_t workers = std::max<std::size_t>(1, std::min(cfg.workers, specs.size()));
    if (workers <= 1) {
        generate_range(0, 1);
    } else {
        std::vector<std::thread> pool;
        std::vector<std::exception_ptr> errs(workers);
        for (std::size_t w = 0; w < workers; ++w)
            pool.emplace_back([&, w] {
                try {
                    generate_range(w, workers);
                } catch (...) {
                    errs[w] = std::current_exception();
                }
            });
        for (std::thread& t : pool) t.join();
        for (const std::exception_ptr& e : errs)
            if (e) std::rethrow_exception(e);
    }

    SynthSummary summary;
    summary.n_generated = records.size();
    std::map<std::size_t, std::pair<double, std::size_t>> by_s;  // sum, count
    for (const PairRecord& r : records) {
        auto& [sum, count] = by_s[r.spec.shared_steps];
        sum += r.consistency;
        ++count;
    }
    for (const auto& [steps, agg] : by_s)
        summary.mean_consistency_by_s.emplace_back(steps, agg.first / double(agg.second));

    // Quality over the edited dimensions only; the condition does not
    // constrain the unedited ones.
    QualityFn quality = [&](const std::vector<double>& sample, int label) {
        return edit_distance(sample, label, cfg.dataset);
    };
    const std::vector<PairRecord> kept =
        filter_pairs(records, cfg.max_inconsistency, quality, cfg.max_quality);
    summary.n_kept = kept.size();

    std::ofstream out(out_path, std::ios::trunc);
    if (!out.is_open()) throw IoError("synth_dataset: cannot open " + out_path);
    std::size_t written = 0;
    for (const PairRecord& r : kept) {
        out << pair_record_to_json(r) << "\n";
        out << pair_record_to_json(invert_pair(r)) << "\n";
        written += 2;
        if (!out.good())
            throw IoError("synth_dataset: write failed after " + std::to_string(written) +
                          " of " + std::to_string(2 * kept.size()) + " records");
    }
    summary.n_records = written;
    out.close();

    std::ofstream sum_out(out_path + ".summary", std::ios::trunc);
    if (!sum_out.is_open()) throw IoError("synth_dataset: cannot open " + out_path + ".summary");
    sum_out << synth_summary_to_json(summary) << "\n";
    sum_out.close();
    return summary;
}

}  // namespace moeflow
