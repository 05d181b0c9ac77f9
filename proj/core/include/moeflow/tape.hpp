#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "moeflow/nn_kernels.hpp"
#include "moeflow/tensor.hpp"

namespace moeflow {

/// Reverse-mode differentiation tape. A fresh tape is built per training
/// step: ops append value slots plus a backward closure, backward() walks
/// the closures in reverse and accumulates gradients into every slot.
///
/// Gradient identities this must satisfy (checked by the test suite against
/// central finite differences): gradient of a sum is the sum of gradients,
/// and a value with zero loss contribution has zero gradient.
class Tape {
  public:
    using Id = std::int32_t;

    /// Tracked input (parameters and anything needing a gradient).
    Id leaf(Tensor v);
    /// Untracked value; a gradient is still accumulated but never consumed.
    Id constant(Tensor v) { return leaf(std::move(v)); }

    const Tensor& val(Id id) const { return vals_[static_cast<std::size_t>(id)]; }
    const Tensor& grad(Id id) const { return grads_[static_cast<std::size_t>(id)]; }

    std::size_t size() const { return vals_.size(); }

    // ---- arithmetic ----
    Id add(Id a, Id b);
    Id sub(Id a, Id b);
    Id mul(Id a, Id b);
    Id scale(Id a, double c);
    Id matmul(Id a, Id b);     // A[m x k] · B[k x n]
    Id matmul_nt(Id a, Id b);  // A[m x k] · B[n x k]^T

    // ---- nonlinearities ----
    Id activation(Id a, Act f);
    Id sigmoid_(Id a);
    Id clamp_min(Id a, double lo);
    Id layer_norm(Id a, double eps = 1e-6);

    /// Broadcast add of a rank-1 bias over every row of a.
    Id add_bias(Id a, Id bias);

    // ---- structure ----
    Id gather_rows(Id a, std::vector<std::size_t> idx);
    /// Vertical concatenation; inputs share a column count.
    Id concat_rows(const std::vector<Id>& parts);
    /// out[target[r]] += a[r]; out has out_rows rows.
    Id scatter_rows(Id a, std::vector<std::size_t> target, std::size_t out_rows);
    /// Flat-index gather over a's storage; result has the given shape.
    Id gather_elems(Id a, std::vector<std::size_t> flat_idx, std::vector<std::size_t> shape);
    Id slice_rows(Id a, std::size_t r0, std::size_t r1);
    Id slice_cols(Id a, std::size_t c0, std::size_t c1);
    /// Row r scaled by coef[r] (coef is rank-1 of length rows).
    Id scale_rows(Id a, Id coef);
    /// Row r divided by denom[r].
    Id div_rows(Id a, Id denom);
    Id attention(Id q, Id k, Id v, std::vector<AttnSpan> spans, std::size_t n_heads);

    // ---- reductions (all produce a scalar-shaped {1} tensor unless noted) ----
    Id row_sum(Id a);  // [m x n] -> [m]
    Id sum(Id a);
    Id mean(Id a);
    Id mse(Id a, Id b);
    /// sum(a ⊙ w) with w held constant; the hook for externally computed
    /// update directions (gradient w.r.t. a is exactly w).
    Id dot_const(Id a, Tensor w);

    void backward(Id loss);

    /// Mutable gradient slot; used by backward closures and optimizers.
    Tensor& grad_mut(Id id) { return grads_[static_cast<std::size_t>(id)]; }

  private:
    Id push(Tensor value, std::function<void(Tape&)> back);

    std::vector<Tensor> vals_;
    std::vector<Tensor> grads_;
    std::vector<std::function<void(Tape&)>> back_;
};

}  // namespace moeflow
