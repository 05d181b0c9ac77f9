#include "moeflow/w2.hpp"

#include <cmath>
#include <limits>
#include <vector>

#include "moeflow/error.hpp"

namespace moeflow {

namespace {

Tensor thin(const Tensor& x, std::size_t cap) {
    const std::size_t n = x.rows();
    if (n <= cap) return x;
    Tensor out({cap, x.cols()});
    for (std::size_t i = 0; i < cap; ++i) {
        const std::size_t src = (i * n) / cap;  // even stride, deterministic
        for (std::size_t c = 0; c < x.cols(); ++c) out.at(i, c) = x.at(src, c);
    }
    return out;
}

double lse(const std::vector<double>& v) {
    double m = -std::numeric_limits<double>::infinity();
    for (double x : v) m = std::max(m, x);
    if (!std::isfinite(m)) return m;
    double s = 0.0;
    for (double x : v) s += std::exp(x - m);
    return m + std::log(s);
}

Tensor pair_cost(const Tensor& a, const Tensor& b) {
    const std::size_t n = a.rows(), m = b.rows(), d = a.cols();
    Tensor cost({n, m});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) {
            double s = 0.0;
            for (std::size_t c = 0; c < d; ++c) {
                const double diff = a.at(i, c) - b.at(j, c);
                s += diff * diff;
            }
            cost.at(i, j) = s;
        }
    return cost;
}

// Entropic transport cost <P, C> between uniform weights on a and b, by
// alternating log-domain scaling:
//   phi_i = eps log(1/n) - eps LSE_j((psi_j - C_ij)/eps)
//   psi_j = eps log(1/m) - eps LSE_i((phi_i - C_ij)/eps)
// At a fixed iteration budget the side updated last has the fresher
// marginal, so this value is slightly direction-dependent; the caller
// symmetrizes by averaging both orders.
double transport_cost(const Tensor& a, const Tensor& b, const W2Config& cfg) {
    const std::size_t n = a.rows(), m = b.rows();
    const double eps = cfg.epsilon;
    const Tensor cost = pair_cost(a, b);
    const double log_an = std::log(1.0 / double(n));
    const double log_bm = std::log(1.0 / double(m));
    std::vector<double> phi(n, 0.0), psi(m, 0.0), row(m), col(n);
    for (std::size_t it = 0; it < cfg.iterations; ++it) {
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < m; ++j) row[j] = (psi[j] - cost.at(i, j)) / eps;
            phi[i] = eps * (log_an - lse(row));
        }
        for (std::size_t j = 0; j < m; ++j) {
            for (std::size_t i = 0; i < n; ++i) col[i] = (phi[i] - cost.at(i, j)) / eps;
            psi[j] = eps * (log_bm - lse(col));
        }
    }

    double transport = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) {
            const double logp = (phi[i] + psi[j] - cost.at(i, j)) / eps;
            if (logp > -700.0) transport += std::exp(logp) * cost.at(i, j);
        }
    return transport;
}

}  // namespace

double eval_w2(const Tensor& a_in, const Tensor& b_in, const W2Config& cfg) {
    if (a_in.rows() == 0 || b_in.rows() == 0) throw ContractError("eval_w2: empty point set");
    if (a_in.cols() != b_in.cols()) throw ShapeError("eval_w2: dimensionality mismatch");
    const Tensor a = thin(a_in, cfg.cap);
    const Tensor b = thin(b_in, cfg.cap);
    // Debiased divergence: the self terms cancel the entropic blur, so
    // identical clouds score exactly zero and singletons score exactly their
    // distance. The cross term averages both solve orders and the self terms
    // add commutatively, which makes the whole value symmetric bit for bit.
    const double cross =
        0.5 * transport_cost(a, b, cfg) + 0.5 * transport_cost(b, a, cfg);
    const double self_a = transport_cost(a, a, cfg);
    const double self_b = transport_cost(b, b, cfg);
    const double div = cross - 0.5 * (self_a + self_b);
    return std::sqrt(std::max(div, 0.0));
}

}  // namespace moeflow
