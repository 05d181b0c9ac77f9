#pragma once

#include <cmath>
#include <functional>

#include "moeflow/error.hpp"
#include "moeflow/tensor.hpp"

namespace moeflow {

/// Central-difference oracles used by every gradient check. The evaluation
/// closure must recompute the scalar from scratch on each call, reading the
/// perturbed tensor through the reference the caller holds.

/// d f / d param[flat_index], perturbing in place and restoring afterwards.
inline double fd_partial(Tensor& param, std::size_t flat_index,
                         const std::function<double()>& eval, double h) {
    const double saved = param[flat_index];
    param[flat_index] = saved + h;
    const double fp = eval();
    param[flat_index] = saved - h;
    const double fm = eval();
    param[flat_index] = saved;
    if (!std::isfinite(fp) || !std::isfinite(fm))
        throw OracleError("finite difference: non-finite evaluation");
    return (fp - fm) / (2.0 * h);
}

/// Full gradient tensor; O(2 * size) evaluations, so keep params small.
inline Tensor fd_gradient(Tensor& param, const std::function<double()>& eval, double h) {
    Tensor g(param.shape());
    for (std::size_t i = 0; i < param.size(); ++i) g[i] = fd_partial(param, i, eval, h);
    return g;
}

/// Relative error with an absolute floor so near-zero pairs compare sanely.
inline double rel_err(double got, double want, double floor_ = 1e-8) {
    const double denom = std::fmax(std::fmax(std::fabs(got), std::fabs(want)), floor_);
    return std::fabs(got - want) / denom;
}

}  // namespace moeflow
