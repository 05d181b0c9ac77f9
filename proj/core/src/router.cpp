#include "moeflow/router.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "moeflow/error.hpp"
#include "moeflow/metrics.hpp"
#include "moeflow/nn_kernels.hpp"
#include "moeflow/rng.hpp"

namespace moeflow {

void RouterConfig::validate() const {
    if (top_k < 1 || top_k > n_routed)
        throw ConfigError("router: need 1 <= top_k <= n_routed");
    if (bias_step < 0.0) throw ConfigError("router: bias_step must be >= 0");
    if (affinity_floor < 0.0) throw ConfigError("router: affinity_floor must be >= 0");
}

RouterState RouterState::init(const RouterConfig& cfg, Rng& rng) {
    RouterState s;
    s.centroids = Tensor({cfg.n_routed, cfg.d_model});
    const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
    for (std::size_t i = 0; i < s.centroids.size(); ++i)
        s.centroids[i] = scale * rng.normal();
    s.biases.assign(cfg.n_routed, 0.0);
    return s;
}

Tensor affinity_scores(const Tensor& u, const RouterState& state, double affinity_floor) {
    if (u.cols() != state.centroids.cols())
        throw ShapeError("affinity_scores: token width != centroid width");
    Tensor s = matmul_nt(u, state.centroids);
    for (std::size_t i = 0; i < s.size(); ++i) {
        const double v = sigmoid(s[i]);
        s[i] = v < affinity_floor ? affinity_floor : v;
    }
    return s;
}

std::vector<std::size_t> select_topk(const double* s, const double* b, std::size_t n,
                                     std::size_t k) {
    if (k > n) throw ContractError("select_topk: k > n");
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    // Stable partial sort on descending shifted score; stability plus the
    // ascending iota gives the tie rule "lowest index wins" for free.
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t c) {
        return s[a] + b[a] > s[c] + b[c];
    });
    order.resize(k);
    std::sort(order.begin(), order.end());
    return order;
}

std::vector<double> gate_weights(const double* s, const std::vector<std::size_t>& selected) {
    if (selected.empty()) throw ContractError("gate_weights: empty selection");
    double denom = 0.0;
    for (std::size_t j : selected) denom += s[j];
    std::vector<double> g(selected.size());
    for (std::size_t i = 0; i < selected.size(); ++i) g[i] = s[selected[i]] / denom;
    return g;
}

RoutingDecision route(const Tensor& u, const RouterState& state, const RouterConfig& cfg) {
    cfg.validate();
    const Tensor s = affinity_scores(u, state, cfg.affinity_floor);
    const std::size_t T = s.rows();
    RoutingDecision d;
    d.n_tokens = T;
    d.top_k = cfg.top_k;
    d.selected.resize(T * cfg.top_k);
    d.affinities.resize(T * cfg.top_k);
    d.gates.resize(T * cfg.top_k);
    for (std::size_t t = 0; t < T; ++t) {
        const double* srow = s.row(t);
        const std::vector<std::size_t> sel =
            select_topk(srow, state.biases.data(), cfg.n_routed, cfg.top_k);
        const std::vector<double> g = gate_weights(srow, sel);
        for (std::size_t k = 0; k < cfg.top_k; ++k) {
            d.selected[d.slot(t, k)] = sel[k];
            d.affinities[d.slot(t, k)] = srow[sel[k]];
            d.gates[d.slot(t, k)] = g[k];
        }
    }
    return d;
}

void update_bias(std::vector<double>& biases, const std::vector<double>& loads,
                 double bias_step) {
    if (loads.size() != biases.size())
        throw ShapeError("update_bias: loads length != expert count");
    double mean = 0.0;
    for (double l : loads) {
        if (l < 0.0) throw ContractError("update_bias: negative load");
        mean += l;
    }
    mean /= static_cast<double>(loads.size());
    for (std::size_t j = 0; j < loads.size(); ++j) {
        const double gap = mean - loads[j];
        if (gap > 0.0)
            biases[j] += bias_step;
        else if (gap < 0.0)
            biases[j] -= bias_step;
        // exactly at mean load: unchanged
    }
}

void update_bias(RouterState& state, const std::vector<double>& loads,
                 const RouterConfig& cfg) {
    update_bias(state.biases, loads, cfg.bias_step);
}

LoadStats load_stats(const RoutingDecision& d, std::size_t n_routed) {
    if (d.n_tokens == 0) throw ContractError("load_stats: zero tokens");
    LoadStats out;
    out.counts.assign(n_routed, 0.0);
    for (std::size_t i = 0; i < d.selected.size(); ++i) out.counts[d.selected[i]] += 1.0;
    const double total = static_cast<double>(d.selected.size());
    const double mean = total / static_cast<double>(n_routed);
    double mx = 0.0;
    double ent = 0.0;
    for (double c : out.counts) {
        mx = std::max(mx, c);
        if (c > 0.0) {
            const double p = c / total;
            ent -= p * std::log(p);
        }
    }
    out.max_over_mean = mx / mean;
    out.selection_entropy = ent;
    return out;
}

std::string decision_line(const RoutingDecision& d, std::size_t token) {
    std::string line = std::to_string(token) + "\t";
    for (std::size_t k = 0; k < d.top_k; ++k) {
        if (k) line += ",";
        line += std::to_string(d.selected[d.slot(token, k)]);
    }
    line += "\t";
    for (std::size_t k = 0; k < d.top_k; ++k) {
        if (k) line += ",";
        line += json_double(d.gates[d.slot(token, k)]);
    }
    return line;
}

}  // namespace moeflow
