#include "moeflow/tape.hpp"

#include <cmath>
#include <memory>
#include <utility>

#include "moeflow/error.hpp"

namespace moeflow {

Tape::Id Tape::leaf(Tensor v) {
    return push(std::move(v), nullptr);
}

Tape::Id Tape::push(Tensor value, std::function<void(Tape&)> back) {
    vals_.push_back(std::move(value));
    grads_.emplace_back(vals_.back().shape());
    back_.push_back(std::move(back));
    return static_cast<Id>(vals_.size() - 1);
}

void Tape::backward(Id loss) {
    if (val(loss).size() != 1) throw ContractError("backward: loss must be scalar");
    grad_mut(loss)[0] = 1.0;
    for (std::size_t i = back_.size(); i-- > 0;) {
        if (back_[i]) back_[i](*this);
    }
}

// Each closure needs its own node id, which is unknown until push returns.
// Ops allocate a shared Deferred, capture it, then fill in the id after push.
namespace {
struct Deferred {
    Tape::Id out = -1;
};
}  // namespace

Tape::Id Tape::add(Id a, Id b) {
    const Tensor& va = val(a);
    const Tensor& vb = val(b);
    if (!va.same_shape(vb)) throw ShapeError("tape add: shape mismatch");
    Tensor out(va.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] + vb[i];
    auto d = std::make_shared<Deferred>();
    Id id = push(std::move(out), [a, b, d](Tape& t) {
        const Tensor& g = t.grad(d->out);
        Tensor& ga = t.grad_mut(a);
        Tensor& gb = t.grad_mut(b);
        for (std::size_t i = 0; i < g.size(); ++i) {
            ga[i] += g[i];
            gb[i] += g[i];
        }
    });
    d->out = id;
    return id;
}

Tape::Id Tape::sub(Id a, Id b) {
    const Tensor& va = val(a);
    const Tensor& vb = val(b);
    if (!va.same_shape(vb)) throw ShapeError("tape sub: shape mismatch");
    Tensor out(va.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] - vb[i];
    auto d = std::make_shared<Deferred>();
    Id id = push(std::move(out), [a, b, d](Tape& t) {
        const Tensor& g = t.grad(d->out);
        Tensor& ga = t.grad_mut(a);
        Tensor& gb = t.grad_mut(b);
        for (std::size_t i = 0; i < g.size(); ++i) {
            ga[i] += g[i];
            gb[i] -= g[i];
        }
    });
    d->out = id;
    return id;
}

Tape::Id Tape::mul(Id a, Id b) {
    const Tensor& va = val(a);
    const Tensor& vb = val(b);
    if (!va.same_shape(vb)) throw ShapeError("tape mul: shape mismatch");
    Tensor out(va.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] * vb[i];
    auto d = std::make_shared<Deferred>();
    Id id = push(std::move(out), [a, b, d](Tape& t) {
        const Tensor& g = t.grad(d->out);
        const Tensor& va = t.val(a);
        const Tensor& vb = t.val(b);
        Tensor& ga = t.grad_mut(a);
        Tensor& gb = t.grad_mut(b);
        for (std::size_t i = 0; i < g.size(); ++i) {
            ga[i] += g[i] * vb[i];
            gb[i] += g[i] * va[i];
        }
    });
    d->out = id;
    return id;
}

Tape::Id Tape::scale(Id a, double c) {
    const Tensor& va = val(a);
    Tensor out(va.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] * c;
    auto d = std::make_shared<Deferred>();
    Id id = push(std::move(out), [a, c, d](Tape& t) {
        const Tensor& g = t.grad(d->out);
        Tensor& ga = t.grad_mut(a);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * c;
    });
    d->out = id;
    return id;
}

Tape::Id Tape::matmul(Id a, Id b) {
    const Tensor& va = val(a);
    const Tensor& vb = val(b);
    if (va.cols() != vb.rows()) throw ShapeError("tape matmul: inner dims differ");
    Tensor out({va.rows(), vb.cols()});
    moeflow::matmul(va.data(), vb.data(), out.data(), va.rows(), va.cols(), vb.cols());
    auto d = std::make_shared<Deferred>();
    Id id = push(std::move(out), [a, b, d](Tape& t) {
        const Tensor& g = t.grad(d->out);  // [m x n]
        const Tensor& va = t.val(a);       // [m x k]
        const Tensor& vb = t.val(b);       // [k x n]
        const std::size_t m = va.rows(), k = va.cols(), n = vb.cols();
        // dA += G · B^T
        Tensor da({m, k});
        moeflow::matmul_nt(g.data(), vb.data(), da.data(), m, n, k);
        Tensor& ga = t.grad_mut(a);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += da[i];
        // dB += A^T · G : accumulate row-by-row to avoid forming A^T.
        Tensor& gb = t.grad_mut(b);
        for (std::size_t i = 0; i < m; ++i) {
            const double* arow = va.row(i);
            const double* grow = g.row(i);
            for (std::size_t kk = 0; kk < k; ++kk) {
                const double av = arow[kk];
                double* gbrow = gb.data() + kk * n;
                for (std::size_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
            }
        }
    });
    d->out = id;
    return id;
}

Tape::Id Tape::matmul_nt(Id a, Id b) {
    const Tensor& va = val(a);
    const Tensor& vb = val(b);
    if (va.cols() != vb.cols()) throw ShapeError("tape matmul_nt: inner dims differ");
    Tensor out({va.rows(), vb.rows()});
    moeflow::matmul_nt(va.data(), vb.data(), out.data(), va.rows(), va.cols(), vb.rows());
    auto d = std::make_shared<Deferred>();
    Id id = push(std::move(out), [a, b, d](Tape& t) {
        const Tensor& g = t.grad(d->out);  // [m x n]
        const Tensor& va = t.val(a);       // [m x k]
        const Tensor& vb = t.val(b);       // [n x k]
        const std::size_t m = va.rows(), k = va.cols(), n = vb.rows();
        // dA += G · B
        Tensor da({m, k});
        moeflow::matmul(g.data(), vb.data(), da.data(), m, n, k);
        Tensor& ga = t.grad_mut(a);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += da[i];
        // dB += G^T · A
        Tensor& gb = t.grad_mut(b);
        for (std::size_t i = 0; i < m; ++i) {
            const double* arow = va.row(i);
            const double* grow = g.row(i);
            for (std::size_t j = 0; j < n; ++j) {
                const double gv = grow[j];
                double* gbrow = gb.data() + j * k;
                for (std::size_t kk = 0; kk < k; ++kk) gbrow[kk] += gv * arow[kk];
            }
        }
    });
    d->out = id;
    return id;
}

Tape::Id Tape::activation(Id a, Act f) {
    const Tensor& va = val(a);
    Tensor out(va.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = act_apply(f, va[i]);
    auto d = std::make_shared<Deferred>();
    Id id = push(std::move(out), [a, f, d](Tape& t) {
        const Tensor& g = t.grad(d->out);
        const Tensor& va = t.val(a);
        Tensor& ga = t.grad_mut(a);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * act_derivative(f, va[i]);
    });
    d->out = id;
    return id;
}

Tape::Id Tape::sigmoid_(Id a) {
    const Tensor& va = val(a);
    Tensor out(va.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = sigmoid(va[i]);
    auto d = std::make_shared<Deferred>();
    Id id = push(std::move(out), [a, d](Tape& t) {
        const Tensor& g = t.grad(d->out);
        const Tensor& s = t.val(d->out);
        Tensor& ga = t.grad_mut(a);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s[i] * (1.0 - s[i]);
    });
    d->out = id;
    return id;
}

Tape::Id Tape::clamp_min(Id a, double lo) {
    const Tensor& va = val(a);
    Tensor out(va.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] < lo ? lo : va[i];
    auto d = std::make_shared<Deferred>();
    Id id = push(std::move(out), [a, lo, d](Tape& t) {
        const Tensor& g = t.grad(d->out);
        const Tensor& va = t.val(a);
        Tensor& ga = t.grad_mut(a);
        for (std::size_t i = 0; i < g.size(); ++i)
            if (va[i] > lo) ga[i] += g[i];
    });
    d->out = id;
    return id;
}

Tape::Id Tape::layer_norm(Id a, double eps) {
    const Tensor& va = val(a);
    const std::size_t rows = va.rows(), cols = va.cols();
    Tensor out(va.shape());
    auto mean = std::make_shared<std::vector<double>>(rows);
    auto inv_std = std::make_shared<std::vector<double>>(rows);
    layer_norm_forward(va.data(), out.data(), rows, cols, eps, mean->data(), inv_std->data());
    auto d = std::make_shared<Deferred>();
    Id id = push(std::move(out), [a, inv_std, d](Tape& t) {
        const Tensor& g = t.grad(d->out);
        const Tensor& y = t.val(d->out);
        Tensor& ga = t.grad_mut(a);
        const std::size_t rows = y.rows(), cols = y.cols();
        for (std::size_t r = 0; r < rows; ++r) {
            const double* gr = g.row(r);
            const double* yr = y.row(r);
            double gmean = 0.0, gy = 0.0;
            for (std::size_t c = 0; c < cols; ++c) {
                gmean += gr[c];
                gy += gr[c] * yr[c];
            }
            gmean /= static_cast<double>(cols);
            gy /= static_cast<double>(cols);
            const double inv = (*inv_std)[r];
            double* gar = ga.row(r);
            for (std::size_t c = 0; c < cols; ++c)
                gar[c] += inv * (gr[c] - gmean - yr[c] * gy);
        }
    });
    d->out = id;
    return id;
}

Tape::Id Tape::add_bias(Id a, Id bias) {
    const Tensor& va = val(a);
    const Tensor& vb = val(bias);
    if (vb.size() != va.cols()) throw ShapeError("add_bias: bias length != cols");
    Tensor out(va.shape());
    const std::size_t cols = va.cols();
    for (std::size_t r = 0; r < va.rows(); ++r)
        for (std::size_t c = 0; c < cols; ++c) out.at(r, c) = va.at(r, c) + vb[c];
    auto d = std::make_shared<Deferred>();
    Id id = push(std::move(out), [a, bias, d](Tape& t) {
        const Tensor& g = t.grad(d->out);
        Tensor& ga = t.grad_mut(a);
        Tensor& gb = t.grad_mut(bias);
        const std::size_t cols = g.cols();
        for (std::size_t r = 0; r < g.rows(); ++r)
            for (std::size_t c = 0; c < cols; ++c) {
                ga.at(r, c) += g.at(r, c);
                gb[c] += g.at(r, c);
            }
    });
    d->out = id;
    return id;
}

Tape::Id Tape::concat_rows(const std::vector<Id>& parts) {
    if (parts.empty()) throw ContractError("concat_rows: no inputs");
    const std::size_t cols = val(parts[0]).cols();
    std::size_t rows = 0;
    for (Id p : parts) {
        if (val(p).cols() != cols) throw ShapeError("concat_rows: column mismatch");
        rows += val(p).rows();
    }
    Tensor out({rows, cols});
    std::size_t r0 = 0;
    for (Id p : parts) {
        const Tensor& vp = val(p);
        for (std::size_t r = 0; r < vp.rows(); ++r)
            for (std::size_t c = 0; c < cols; ++c) out.at(r0 + r, c) = vp.at(r, c);
        r0 += vp.rows();
    }
    auto shared_parts = std::make_shared<std::vector<Id>>(parts);
    auto d = std::make_shared<Deferred>();
    Id id = push(std::move(out), [shared_parts, d](Tape& t) {
        const Tensor& g = t.grad(d->out);
        const std::size_t cols = g.cols();
        std::size_t r0 = 0;
        for (Id p : *shared_parts) {
            Tensor& gp = t.grad_mut(p);
            for (std::size_t r = 0; r < gp.rows(); ++r)
                for (std::size_t c = 0; c < cols; ++c) gp.at(r, c) += g.at(r0 + r, c);
            r0 += gp.rows();
        }
    });
    d->out = id;
    return id;
}

Tape::Id Tape::gather_rows(Id a, std::vector<std::size_t> idx) {
    const Tensor& va = val(a);
    const std::size_t cols = va.cols();
    Tensor out({idx.size(), cols});
    for (std::size_t r = 0; r < idx.size(); ++r) {
        const double* src = va.row(idx[r]);
        double* dst = out.row(r);
        for (std::size_t c = 0; c < cols; ++c) dst[c] = src[c];
    }
    auto shared_idx = std::make_shared<std::vector<std::size_t>>(std::move(idx));
    auto d = std::make_shared<Deferred>();
    Id id = push(std::move(out), [a, shared_idx, d](Tape& t) {
        const Tensor& g = t.grad(d->out);
        Tensor& ga = t.grad_mut(a);
        const std::size_t cols = g.cols();
        for (std::size_t r = 0; r < shared_idx->size(); ++r) {
            double* dst = ga.row((*shared_idx)[r]);
            const double* src = g.row(r);
            for (std::size_t c = 0; c < cols; ++c) dst[c] += src[c];
        }
    });
    d->out = id;
    return id;
}

Tape::Id Tape::scatter_rows(Id a, std::vector<std::size_t> target, std::size_t out_rows) {
    const Tensor& va = val(a);
    if (target.size() != va.rows()) throw ShapeError("scatter_rows: index count != rows");
    const std::size_t cols = va.cols();
    Tensor out({out_rows, cols});
    for (std::size_t r = 0; r < target.size(); ++r) {
        double* dst = out.row(target[r]);
        const double* src = va.row(r);
        for (std::size_t c = 0; c < cols; ++c) dst[c] += src[c];
    }
    auto shared_idx = std::make_shared<std::vector<std::size_t>>(std::move(target));
    auto d = std::make_shared<Deferred>();
    Id id = push(std::move(out), [a, shared_idx, d](Tape& t) {
        const Tensor& g = t.grad(d->out);
        Tensor& ga = t.grad_mut(a);
        const std::size_t cols = g.cols();
        for (std::size_t r = 0; r < shared_idx->size(); ++r) {
            const double* src = g.row((*shared_idx)[r]);
            double* dst = ga.row(r);
            for (std::size_t c = 0; c < cols; ++c) dst[c] += src[c];
        }
    });
    d->out = id;
    return id;
}

Tape::Id Tape::gather_elems(Id a, std::vector<std::size_t> flat_idx,
                            std::vector<std::size_t> shape) {
    Tensor out(std::move(shape));
    if (out.size() != flat_idx.size()) throw ShapeError("gather_elems: shape/index mismatch");
    const Tensor& va = val(a);
    for (std::size_t i = 0; i < flat_idx.size(); ++i) out[i] = va[flat_idx[i]];
    auto shared_idx = std::make_shared<std::vector<std::size_t>>(std::move(flat_idx));
    auto d = std::make_shared<Deferred>();
    Id id = push(std::move(out), [a, shared_idx, d](Tape& t) {
        const Tensor& g = t.grad(d->out);
        Tensor& ga = t.grad_mut(a);
        for (std::size_t i = 0; i < shared_idx->size(); ++i) ga[(*shared_idx)[i]] += g[i];
    });
    d->out = id;
    return id;
}

Tape::Id Tape::slice_rows(Id a, std::size_t r0, std::size_t r1) {
    const Tensor& va = val(a);
    if (r1 < r0 || r1 > va.rows()) throw ShapeError("slice_rows: bad range");
    const std::size_t cols = va.cols();
    Tensor out({r1 - r0, cols});
    for (std::size_t r = r0; r < r1; ++r)
        for (std::size_t c = 0; c < cols; ++c) out.at(r - r0, c) = va.at(r, c);
    auto d = std::make_shared<Deferred>();
    Id id = push(std::move(out), [a, r0, d](Tape& t) {
        const Tensor& g = t.grad(d->out);
        Tensor& ga = t.grad_mut(a);
        const std::size_t cols = g.cols();
        for (std::size_t r = 0; r < g.rows(); ++r)
            for (std::size_t c = 0; c < cols; ++c) ga.at(r0 + r, c) += g.at(r, c);
    });
    d->out = id;
    return id;
}

Tape::Id Tape::slice_cols(Id a, std::size_t c0, std::size_t c1) {
    const Tensor& va = val(a);
    if (c1 < c0 || c1 > va.cols()) throw ShapeError("slice_cols: bad range");
    const std::size_t rows = va.rows();
    Tensor out({rows, c1 - c0});
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = c0; c < c1; ++c) out.at(r, c - c0) = va.at(r, c);
    auto d = std::make_shared<Deferred>();
    Id id = push(std::move(out), [a, c0, d](Tape& t) {
        const Tensor& g = t.grad(d->out);
        Tensor& ga = t.grad_mut(a);
        for (std::size_t r = 0; r < g.rows(); ++r)
            for (std::size_t c = 0; c < g.cols(); ++c) ga.at(r, c0 + c) += g.at(r, c);
    });
    d->out = id;
    return id;
}

Tape::Id Tape::scale_rows(Id a, Id coef) {
    const Tensor& va = val(a);
    const Tensor& vc = val(coef);
    if (vc.size() != va.rows()) throw ShapeError("scale_rows: coef length != rows");
    Tensor out(va.shape());
    const std::size_t cols = va.cols();
    for (std::size_t r = 0; r < va.rows(); ++r) {
        const double cv = vc[r];
        for (std::size_t c = 0; c < cols; ++c) out.at(r, c) = va.at(r, c) * cv;
    }
    auto d = std::make_shared<Deferred>();
    Id id = push(std::move(out), [a, coef, d](Tape& t) {
        const Tensor& g = t.grad(d->out);
        const Tensor& va = t.val(a);
        const Tensor& vc = t.val(coef);
        Tensor& ga = t.grad_mut(a);
        Tensor& gc = t.grad_mut(coef);
        const std::size_t cols = va.cols();
        for (std::size_t r = 0; r < va.rows(); ++r) {
            const double cv = vc[r];
            double dot = 0.0;
            for (std::size_t c = 0; c < cols; ++c) {
                ga.at(r, c) += g.at(r, c) * cv;
                dot += g.at(r, c) * va.at(r, c);
            }
            gc[r] += dot;
        }
    });
    d->out = id;
    return id;
}

Tape::Id Tape::div_rows(Id a, Id denom) {
    const Tensor& va = val(a);
    const Tensor& vd = val(denom);
    if (vd.size() != va.rows()) throw ShapeError("div_rows: denom length != rows");
    Tensor out(va.shape());
    const std::size_t cols = va.cols();
    // True division, not reciprocal-multiply: keeps gates bit-identical to
    // the standalone router's s / sum(s).
    for (std::size_t r = 0; r < va.rows(); ++r)
        for (std::size_t c = 0; c < cols; ++c) out.at(r, c) = va.at(r, c) / vd[r];
    auto d = std::make_shared<Deferred>();
    Id id = push(std::move(out), [a, denom, d](Tape& t) {
        const Tensor& g = t.grad(d->out);
        const Tensor& y = t.val(d->out);
        const Tensor& vd = t.val(denom);
        Tensor& ga = t.grad_mut(a);
        Tensor& gd = t.grad_mut(denom);
        const std::size_t cols = y.cols();
        for (std::size_t r = 0; r < y.rows(); ++r) {
            const double inv = 1.0 / vd[r];
            double dot = 0.0;
            for (std::size_t c = 0; c < cols; ++c) {
                ga.at(r, c) += g.at(r, c) * inv;
                dot += g.at(r, c) * y.at(r, c);
            }
            gd[r] -= dot * inv;
        }
    });
    d->out = id;
    return id;
}

Tape::Id Tape::attention(Id q, Id k, Id v, std::vector<AttnSpan> spans, std::size_t n_heads) {
    const Tensor& vq = val(q);
    const Tensor& vk = val(k);
    const Tensor& vv = val(v);
    if (vq.cols() != vk.cols() || vk.cols() != vv.cols())
        throw ShapeError("attention: feature dims differ");
    const std::size_t dm = vq.cols();
    Tensor out(vq.shape());
    auto probs = std::make_shared<std::vector<double>>();
    auto shared_spans = std::make_shared<std::vector<AttnSpan>>(std::move(spans));
    attention_forward(vq.data(), vk.data(), vv.data(), out.data(), dm, n_heads, *shared_spans,
                      probs.get());
    auto d = std::make_shared<Deferred>();
    Id id = push(std::move(out), [q, k, v, n_heads, probs, shared_spans, d](Tape& t) {
        const Tensor& g = t.grad(d->out);
        const Tensor& vq = t.val(q);
        const Tensor& vk = t.val(k);
        const Tensor& vv = t.val(v);
        Tensor& gq = t.grad_mut(q);
        Tensor& gk = t.grad_mut(k);
        Tensor& gv = t.grad_mut(v);
        const std::size_t dm = vq.cols();
        const std::size_t dh = dm / n_heads;
        const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
        std::size_t poff = 0;
        std::vector<double> dS;
        for (const AttnSpan& sp : *shared_spans) {
            for (std::size_t h = 0; h < n_heads; ++h) {
                const std::size_t hc = h * dh;
                const double* P = probs->data() + poff;
                poff += sp.q_len * sp.kv_len;
                dS.assign(sp.q_len * sp.kv_len, 0.0);
                for (std::size_t qi = 0; qi < sp.q_len; ++qi) {
                    const double* grow = g.row(sp.q_begin + qi) + hc;
                    const double* prow = P + qi * sp.kv_len;
                    double* dsrow = dS.data() + qi * sp.kv_len;
                    // dV += P^T g ; dP = g V^T
                    double dot_pp = 0.0;
                    for (std::size_t kj = 0; kj < sp.kv_len; ++kj) {
                        const double* vrow = vv.row(sp.kv_begin + kj) + hc;
                        double dp = 0.0;
                        for (std::size_t c = 0; c < dh; ++c) dp += grow[c] * vrow[c];
                        dsrow[kj] = dp;
                        dot_pp += dp * prow[kj];
                        double* gvrow = gv.row(sp.kv_begin + kj) + hc;
                        const double p = prow[kj];
                        for (std::size_t c = 0; c < dh; ++c) gvrow[c] += p * grow[c];
                    }
                    // softmax backward, then push into Q and K
                    const double* qrow = vq.row(sp.q_begin + qi) + hc;
                    double* gqrow = gq.row(sp.q_begin + qi) + hc;
                    for (std::size_t kj = 0; kj < sp.kv_len; ++kj) {
                        const double ds = prow[kj] * (dsrow[kj] - dot_pp) * scale;
                        const double* krow = vk.row(sp.kv_begin + kj) + hc;
                        double* gkrow = gk.row(sp.kv_begin + kj) + hc;
                        for (std::size_t c = 0; c < dh; ++c) {
                            gqrow[c] += ds * krow[c];
                            gkrow[c] += ds * qrow[c];
                        }
                    }
                }
            }
        }
    });
    d->out = id;
    return id;
}

Tape::Id Tape::row_sum(Id a) {
    const Tensor& va = val(a);
    const std::size_t rows = va.rows(), cols = va.cols();
    Tensor out({rows});
    for (std::size_t r = 0; r < rows; ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < cols; ++c) s += va.at(r, c);
        out[r] = s;
    }
    auto d = std::make_shared<Deferred>();
    Id id = push(std::move(out), [a, d](Tape& t) {
        const Tensor& g = t.grad(d->out);
        Tensor& ga = t.grad_mut(a);
        const std::size_t cols = ga.cols();
        for (std::size_t r = 0; r < g.size(); ++r)
            for (std::size_t c = 0; c < cols; ++c) ga.at(r, c) += g[r];
    });
    d->out = id;
    return id;
}

Tape::Id Tape::sum(Id a) {
    const Tensor& va = val(a);
    double s = 0.0;
    for (std::size_t i = 0; i < va.size(); ++i) s += va[i];
    auto d = std::make_shared<Deferred>();
    Id id = push(Tensor::from({1}, {s}), [a, d](Tape& t) {
        const double g = t.grad(d->out)[0];
        Tensor& ga = t.grad_mut(a);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g;
    });
    d->out = id;
    return id;
}

Tape::Id Tape::mean(Id a) {
    const Tensor& va = val(a);
    const double inv = 1.0 / static_cast<double>(va.size());
    double s = 0.0;
    for (std::size_t i = 0; i < va.size(); ++i) s += va[i];
    s *= inv;
    auto d = std::make_shared<Deferred>();
    Id id = push(Tensor::from({1}, {s}), [a, inv, d](Tape& t) {
        const double g = t.grad(d->out)[0] * inv;
        Tensor& ga = t.grad_mut(a);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g;
    });
    d->out = id;
    return id;
}

Tape::Id Tape::mse(Id a, Id b) {
    const Tensor& va = val(a);
    const Tensor& vb = val(b);
    if (!va.same_shape(vb)) throw ShapeError("mse: shape mismatch");
    const double inv = 1.0 / static_cast<double>(va.size());
    double s = 0.0;
    for (std::size_t i = 0; i < va.size(); ++i) {
        const double diff = va[i] - vb[i];
        s += diff * diff;
    }
    s *= inv;
    auto d = std::make_shared<Deferred>();
    Id id = push(Tensor::from({1}, {s}), [a, b, inv, d](Tape& t) {
        const double g = t.grad(d->out)[0] * 2.0 * inv;
        const Tensor& va = t.val(a);
        const Tensor& vb = t.val(b);
        Tensor& ga = t.grad_mut(a);
        Tensor& gb = t.grad_mut(b);
        for (std::size_t i = 0; i < va.size(); ++i) {
            const double diff = va[i] - vb[i];
            ga[i] += g * diff;
            gb[i] -= g * diff;
        }
    });
    d->out = id;
    return id;
}

Tape::Id Tape::dot_const(Id a, Tensor w) {
    const Tensor& va = val(a);
    if (!va.same_shape(w)) throw ShapeError("dot_const: shape mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < va.size(); ++i) s += va[i] * w[i];
    auto shared_w = std::make_shared<Tensor>(std::move(w));
    auto d = std::make_shared<Deferred>();
    Id id = push(Tensor::from({1}, {s}), [a, shared_w, d](Tape& t) {
        const double g = t.grad(d->out)[0];
        Tensor& ga = t.grad_mut(a);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g * (*shared_w)[i];
    });
    d->out = id;
    return id;
}

}  // namespace moeflow
