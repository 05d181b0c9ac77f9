#include "moeflow/nn_kernels.hpp"

#include <cmath>
#include <cstring>

#include "moeflow/error.hpp"

namespace moeflow {

namespace {

// Accumulate a ROWS x JT output tile held in locals across the whole k loop.
// Every output element is a single accumulator updated in ascending-k order,
// so results do not depend on the row block height or the column tile width:
// a one-row call and a many-row call produce bitwise-identical rows.
template <typename T, int ROWS>
inline void matmul_rows(const T* a, const T* b, T* c, std::size_t k, std::size_t n,
                        std::size_t lda) {
    constexpr int JT = 128 / sizeof(T);  // two cache lines of columns per tile
    std::size_t j0 = 0;
    for (; j0 + JT <= n; j0 += JT) {
        T acc[ROWS][JT] = {};
        for (std::size_t kk = 0; kk < k; ++kk) {
            const T* brow = b + kk * n + j0;
            for (int r = 0; r < ROWS; ++r) {
                const T av = a[r * lda + kk];
                for (int jj = 0; jj < JT; ++jj) acc[r][jj] += av * brow[jj];
            }
        }
        for (int r = 0; r < ROWS; ++r)
            for (int jj = 0; jj < JT; ++jj) c[static_cast<std::size_t>(r) * n + j0 + jj] = acc[r][jj];
    }
    if (j0 < n) {
        const std::size_t rem = n - j0;
        for (std::size_t kk = 0; kk < k; ++kk) {
            const T* brow = b + kk * n + j0;
            for (int r = 0; r < ROWS; ++r) {
                const T av = a[r * lda + kk];
                T* crow = c + static_cast<std::size_t>(r) * n + j0;
                for (std::size_t jj = 0; jj < rem; ++jj) crow[jj] += av * brow[jj];
            }
        }
    }
}

}  // namespace

template <typename T>
void matmul(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
    std::memset(c, 0, m * n * sizeof(T));
    std::size_t i = 0;
    for (; i + 4 <= m; i += 4) matmul_rows<T, 4>(a + i * k, b, c + i * n, k, n, k);
    for (; i < m; ++i) matmul_rows<T, 1>(a + i * k, b, c + i * n, k, n, k);
}

template <typename T>
void matmul_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const T* arow = a + i * k;
        for (std::size_t j = 0; j < n; ++j) {
            const T* brow = b + j * k;
            T s0 = 0, s1 = 0, s2 = 0, s3 = 0;
            std::size_t kk = 0;
            for (; kk + 4 <= k; kk += 4) {
                s0 += arow[kk] * brow[kk];
                s1 += arow[kk + 1] * brow[kk + 1];
                s2 += arow[kk + 2] * brow[kk + 2];
                s3 += arow[kk + 3] * brow[kk + 3];
            }
            T s = (s0 + s1) + (s2 + s3);
            for (; kk < k; ++kk) s += arow[kk] * brow[kk];
            c[i * n + j] = s;
        }
    }
}

template void matmul<float>(const float*, const float*, float*, std::size_t, std::size_t,
                            std::size_t);
template void matmul<double>(const double*, const double*, double*, std::size_t, std::size_t,
                             std::size_t);
template void matmul_nt<float>(const float*, const float*, float*, std::size_t, std::size_t,
                               std::size_t);
template void matmul_nt<double>(const double*, const double*, double*, std::size_t, std::size_t,
                                std::size_t);

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.cols() != b.rows())
        throw ShapeError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    Tensor c({a.rows(), b.cols()});
    matmul(a.data(), b.data(), c.data(), a.rows(), a.cols(), b.cols());
    return c;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    if (a.cols() != b.cols())
        throw ShapeError("matmul_nt: " + shape_str(a.shape()) + " x " + shape_str(b.shape()) +
                         "^T");
    Tensor c({a.rows(), b.rows()});
    matmul_nt(a.data(), b.data(), c.data(), a.rows(), a.cols(), b.rows());
    return c;
}

Act act_from_string(const std::string& name) {
    if (name == "identity") return Act::identity;
    if (name == "relu") return Act::relu;
    if (name == "silu") return Act::silu;
    if (name == "gelu") return Act::gelu;
    throw ConfigError("unknown activation: " + name);
}

std::string act_to_string(Act a) {
    switch (a) {
        case Act::identity: return "identity";
        case Act::relu: return "relu";
        case Act::silu: return "silu";
        case Act::gelu: return "gelu";
    }
    return "?";
}

namespace {
constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;
}  // namespace

template <typename T>
T act_apply(Act a, T x) {
    switch (a) {
        case Act::identity: return x;
        case Act::relu: return x > T(0) ? x : T(0);
        case Act::silu: return static_cast<T>(x / (T(1) + std::exp(-x)));
        case Act::gelu:
            return static_cast<T>(T(0.5) * x *
                                  (T(1) + static_cast<T>(std::erf(static_cast<double>(x) * kInvSqrt2))));
    }
    return x;
}

template float act_apply<float>(Act, float);
template double act_apply<double>(Act, double);

double act_derivative(Act a, double x) {
    switch (a) {
        case Act::identity: return 1.0;
        case Act::relu: return x > 0.0 ? 1.0 : 0.0;
        case Act::silu: {
            const double s = sigmoid(x);
            return s * (1.0 + x * (1.0 - s));
        }
        case Act::gelu: {
            const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
            const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
            return cdf + x * pdf;
        }
    }
    return 1.0;
}

template <typename T>
void act_apply_inplace(Act a, T* x, std::size_t n) {
    if (a == Act::identity) return;
    for (std::size_t i = 0; i < n; ++i) x[i] = act_apply(a, x[i]);
}

template void act_apply_inplace<float>(Act, float*, std::size_t);
template void act_apply_inplace<double>(Act, double*, std::size_t);

double sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

void layer_norm_forward(const double* x, double* y, std::size_t rows, std::size_t cols,
                        double eps, double* mean_out, double* inv_std_out) {
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = x + r * cols;
        double mu = 0.0;
        for (std::size_t c = 0; c < cols; ++c) mu += xr[c];
        mu /= static_cast<double>(cols);
        double var = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            const double d = xr[c] - mu;
            var += d * d;
        }
        var /= static_cast<double>(cols);
        const double inv = 1.0 / std::sqrt(var + eps);
        double* yr = y + r * cols;
        for (std::size_t c = 0; c < cols; ++c) yr[c] = (xr[c] - mu) * inv;
        if (mean_out) mean_out[r] = mu;
        if (inv_std_out) inv_std_out[r] = inv;
    }
}

void attention_forward(const double* q, const double* k, const double* v, double* out,
                       std::size_t d_model, std::size_t n_heads,
                       const std::vector<AttnSpan>& spans, std::vector<double>* save_probs) {
    if (d_model % n_heads != 0) throw ShapeError("attention: heads must divide d_model");
    const std::size_t dh = d_model / n_heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    std::vector<double> scores;
    for (const AttnSpan& sp : spans) {
        scores.assign(sp.q_len * sp.kv_len, 0.0);
        for (std::size_t h = 0; h < n_heads; ++h) {
            const std::size_t hc = h * dh;
            for (std::size_t qi = 0; qi < sp.q_len; ++qi) {
                const double* qrow = q + (sp.q_begin + qi) * d_model + hc;
                double* srow = scores.data() + qi * sp.kv_len;
                double mx = -1e300;
                for (std::size_t kj = 0; kj < sp.kv_len; ++kj) {
                    const double* krow = k + (sp.kv_begin + kj) * d_model + hc;
                    double s = 0.0;
                    for (std::size_t c = 0; c < dh; ++c) s += qrow[c] * krow[c];
                    s *= scale;
                    srow[kj] = s;
                    mx = std::max(mx, s);
                }
                double z = 0.0;
                for (std::size_t kj = 0; kj < sp.kv_len; ++kj) {
                    srow[kj] = std::exp(srow[kj] - mx);
                    z += srow[kj];
                }
                const double invz = 1.0 / z;
                double* orow = out + (sp.q_begin + qi) * d_model + hc;
                for (std::size_t c = 0; c < dh; ++c) orow[c] = 0.0;
                for (std::size_t kj = 0; kj < sp.kv_len; ++kj) {
                    const double p = srow[kj] * invz;
                    srow[kj] = p;
                    const double* vrow = v + (sp.kv_begin + kj) * d_model + hc;
                    for (std::size_t c = 0; c < dh; ++c) orow[c] += p * vrow[c];
                }
            }
            if (save_probs) save_probs->insert(save_probs->end(), scores.begin(), scores.end());
        }
    }
}

}  // namespace moeflow
