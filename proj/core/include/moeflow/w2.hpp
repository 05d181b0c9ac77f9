#pragma once

#include <cstddef>

#include "moeflow/tensor.hpp"

namespace moeflow {

/// Entropic 2-Wasserstein estimate between two point clouds by log-domain
/// alternating scaling with a fixed iteration count, so the value is a
/// deterministic function of the inputs. Uniform marginals. Larger sets are
/// thinned to `cap` points by even striding before solving.
struct W2Config {
    double epsilon = 0.01;      // entropic regularization on squared cost
    std::size_t iterations = 200;
    std::size_t cap = 512;
};

double eval_w2(const Tensor& a, const Tensor& b, const W2Config& cfg = {});

}  // namespace moeflow
