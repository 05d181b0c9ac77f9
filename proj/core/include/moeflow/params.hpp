#pragma once

#include <deque>
#include <string>
#include <unordered_map>
#include <vector>

#include "moeflow/checkpoint.hpp"
#include "moeflow/tensor.hpp"

namespace moeflow {

/// Named parameter tensors with stable insertion order. Deque storage keeps
/// references valid across later additions, so callers may hold Tensor&.
/// Iteration order (== insertion order) defines the gradient vector layout
/// and the checkpoint layout.
class ParamSet {
  public:
    Tensor& add(const std::string& name, Tensor init);
    Tensor& at(const std::string& name);
    const Tensor& at(const std::string& name) const;
    bool has(const std::string& name) const { return index_.count(name) > 0; }
    std::size_t index_of(const std::string& name) const;

    std::size_t size() const { return items_.size(); }
    std::size_t scalar_count() const;

    const std::string& name(std::size_t i) const { return items_[i].first; }
    Tensor& tensor(std::size_t i) { return items_[i].second; }
    const Tensor& tensor(std::size_t i) const { return items_[i].second; }

    NamedTensors snapshot() const;
    /// Overwrites values of existing entries by name; shapes must match.
    void load(const NamedTensors& tensors);

  private:
    std::deque<std::pair<std::string, Tensor>> items_;
    std::unordered_map<std::string, std::size_t> index_;
};

struct AdamWConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
    double clip_norm = 0.0;  // 0 disables global-norm clipping
};

/// Decoupled-weight-decay adaptive-moment optimizer over a ParamSet.
/// step() consumes gradients laid out in the set's insertion order.
class AdamW {
  public:
    AdamW(ParamSet& params, AdamWConfig cfg);

    void step(const std::vector<Tensor>& grads);
    std::int64_t steps_done() const { return t_; }

    /// Moments, exposed for checkpointing trainer state.
    NamedTensors state_snapshot() const;
    void state_load(const NamedTensors& tensors);

  private:
    ParamSet& params_;
    AdamWConfig cfg_;
    std::vector<Tensor> m_, v_;
    std::int64_t t_ = 0;
};

}  // namespace moeflow
