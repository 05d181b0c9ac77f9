#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "moeflow/tensor.hpp"

namespace moeflow {

/// C = A(m x k) · B(k x n), row-major, C overwritten.
/// Every output element accumulates in ascending-k order, so results do not
/// depend on how callers batch rows: a one-row call and a many-row call
/// produce bitwise-identical rows.
template <typename T>
void matmul(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n);

/// C = A(m x k) · B(n x k)^T -> (m x n). Fixed four-lane dot accumulation.
template <typename T>
void matmul_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor matmul_nt(const Tensor& a, const Tensor& b);

/// Elementwise nonlinearity used inside expert and dense FFNs.
enum class Act { identity, relu, silu, gelu };

Act act_from_string(const std::string& name);
std::string act_to_string(Act a);

template <typename T>
T act_apply(Act a, T x);

/// Derivative of act_apply at x.
double act_derivative(Act a, double x);

template <typename T>
void act_apply_inplace(Act a, T* x, std::size_t n);

double sigmoid(double x);

/// Per-row layer normalization without affine parameters.
/// Writes mean and inverse stddev per row when buffers are given.
void layer_norm_forward(const double* x, double* y, std::size_t rows, std::size_t cols,
                        double eps, double* mean_out, double* inv_std_out);

///// One attention region: queries [q_begin, q_begin+q_len) attend to
/// keys/values [kv_begin, kv_begin+kv_len). Self-attention uses equal ranges.
struct AttnSpan {
    std::size_t q_begin = 0;
    std::size_t q_len = 0;
    std::size_t kv_begin = 0;
    std::size_t kv_len = 0;
};

/// Multi-head scaled dot-product attention over independent spans.
/// q: [Nq x d], k/v: [Nk x d], out: [Nq x d]; d must divide into n_heads.
/// When save_probs is non-null the per-span post-softmax weights are appended
/// head-major (span, head, q row, kv col) for reuse by a backward pass.
void attention_forward(const double* q, const double* k, const double* v, double* out,
                       std::size_t d_model, std::size_t n_heads,
                       const std::vector<AttnSpan>& spans, std::vector<double>* save_probs);

}  // namespace moeflow
