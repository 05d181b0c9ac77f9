#include "moeflow/params.hpp"

#include <cmath>

#include "moeflow/error.hpp"

namespace moeflow {

Tensor& ParamSet::add(const std::string& name, Tensor init) {
    if (index_.count(name)) throw ContractError("duplicate parameter: " + name);
    index_[name] = items_.size();
    items_.emplace_back(name, std::move(init));
    return items_.back().second;
}

Tensor& ParamSet::at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("unknown parameter: " + name);
    return items_[it->second].second;
}

const Tensor& ParamSet::at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("unknown parameter: " + name);
    return items_[it->second].second;
}

std::size_t ParamSet::index_of(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("unknown parameter: " + name);
    return it->second;
}

std::size_t ParamSet::scalar_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : items_) n += t.size();
    return n;
}

NamedTensors ParamSet::snapshot() const {
    return NamedTensors(items_.begin(), items_.end());
}

void ParamSet::load(const NamedTensors& tensors) {
    for (const auto& [name, t] : tensors) {
        Tensor& dst = at(name);
        if (!dst.same_shape(t))
            throw ShapeError("shape mismatch loading parameter " + name);
        dst = t;
    }
}

AdamW::AdamW(ParamSet& params, AdamWConfig cfg) : params_(params), cfg_(cfg) {
    m_.reserve(params.size());
    v_.reserve(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
        m_.emplace_back(params.tensor(i).shape());
        v_.emplace_back(params.tensor(i).shape());
    }
}

void AdamW::step(const std::vector<Tensor>& grads) {
    if (grads.size() != params_.size())
        throw ContractError("gradient count does not match parameter count");

    double scale = 1.0;
    if (cfg_.clip_norm > 0.0) {
        double sq = 0.0;
        for (const Tensor& g : grads)
            for (std::size_t i = 0; i < g.size(); ++i) sq += g[i] * g[i];
        const double norm = std::sqrt(sq);
        if (norm > cfg_.clip_norm) scale = cfg_.clip_norm / norm;
    }

    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t p = 0; p < params_.size(); ++p) {
        Tensor& w = params_.tensor(p);
        const Tensor& g = grads[p];
        if (!w.same_shape(g)) throw ShapeError("gradient shape mismatch at " + params_.name(p));
        Tensor& m = m_[p];
        Tensor& v = v_[p];
        for (std::size_t i = 0; i < w.size(); ++i) {
            const double gi = g[i] * scale;
            m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
            v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            w[i] -= cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * w[i]);
        }
    }
}

NamedTensors AdamW::state_snapshot() const {
    NamedTensors out;
    for (std::size_t p = 0; p < params_.size(); ++p) {
        out.emplace_back("adam.m." + params_.name(p), m_[p]);
        out.emplace_back("adam.v." + params_.name(p), v_[p]);
    }
    Tensor steps({1});
    steps[0] = static_cast<double>(t_);
    out.emplace_back("adam.t", std::move(steps));
    return out;
}

void AdamW::state_load(const NamedTensors& tensors) {
    for (std::size_t p = 0; p < params_.size(); ++p) {
        m_[p] = checkpoint_get(tensors, "adam.m." + params_.name(p));
        v_[p] = checkpoint_get(tensors, "adam.v." + params_.name(p));
    }
    t_ = static_cast<std::int64_t>(checkpoint_get(tensors, "adam.t")[0]);
}

}  // namespace moeflow
