#pragma once

#include <atomic>
#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "tipformer/common.hpp"
#include "tipformer/tensor.hpp"

namespace tipformer {

enum class Mode { train, eval };

template <typename S>
struct NodeT {
    TensorT<S> value;
    TensorT<S> grad;  // allocated iff requires_grad
    bool requires_grad = false;
    u64 tape_id = 0;  // 0 for leaves
    std::string name;
    std::function<void()> backward;
};

template <typename S>
using ValueT = std::shared_ptr<NodeT<S>>;

template <typename S>
ValueT<S> make_leaf(TensorT<S> value, bool requires_grad, std::string name = {}) {
    auto node = std::make_shared<NodeT<S>>();
    node->value = std::move(value);
    node->requires_grad = requires_grad;
    if (requires_grad) node->grad = TensorT<S>(node->value.shape());
    node->name = std::move(name);
    return node;
}

// A trainable leaf. Names form the checkpoint manifest, so they must be
// unique within a model and stable across save/load.
template <typename S>
ValueT<S> make_parameter(TensorT<S> value, std::string name) {
    return make_leaf<S>(std::move(value), true, std::move(name));
}

template <typename S>
ValueT<S> make_constant(TensorT<S> value) {
    return make_leaf<S>(std::move(value), false);
}

namespace detail {

template <typename S>
inline S stable_sigmoid(S x) {
    if (x >= S(0)) {
        const S e = std::exp(-x);
        return S(1) / (S(1) + e);
    }
    const S e = std::exp(x);
    return e / (S(1) + e);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Tape: ordered record of the forward pass. backward() replays the records in
// exact reverse execution order (a valid reverse topological order since ops
// are appended as they run). A tape is confined to one thread.
// ---------------------------------------------------------------------------

template <typename S>
class TapeT {
public:
    explicit TapeT(bool recording = true) : recording_(recording), id_(next_id()) {}

    TapeT(const TapeT&) = delete;
    TapeT& operator=(const TapeT&) = delete;

    bool recording() const { return recording_; }

    void reset() {
        ops_.clear();
        consumed_ = false;
        id_ = next_id();
    }

    std::size_t size() const { return ops_.size(); }

    // ---- graph construction -------------------------------------------------

    ValueT<S> constant(TensorT<S> v) { return make_constant<S>(std::move(v)); }

    ValueT<S> add(const ValueT<S>& a, const ValueT<S>& b) {
        require_same_shape(a, b, "add");
        TensorT<S> out(a->value.shape());
        for (i64 i = 0; i < out.numel(); ++i) out[i] = a->value[i] + b->value[i];
        return record({a, b}, std::move(out), [](NodeT<S>& o, NodeT<S>& ia, NodeT<S>& ib) {
            if (ia.requires_grad)
                for (i64 i = 0; i < o.grad.numel(); ++i) ia.grad[i] += o.grad[i];
            if (ib.requires_grad)
                for (i64 i = 0; i < o.grad.numel(); ++i) ib.grad[i] += o.grad[i];
        });
    }

    ValueT<S> sub(const ValueT<S>& a, const ValueT<S>& b) {
        require_same_shape(a, b, "sub");
        TensorT<S> out(a->value.shape());
        for (i64 i = 0; i < out.numel(); ++i) out[i] = a->value[i] - b->value[i];
        return record({a, b}, std::move(out), [](NodeT<S>& o, NodeT<S>& ia, NodeT<S>& ib) {
            if (ia.requires_grad)
                for (i64 i = 0; i < o.grad.numel(); ++i) ia.grad[i] += o.grad[i];
            if (ib.requires_grad)
                for (i64 i = 0; i < o.grad.numel(); ++i) ib.grad[i] -= o.grad[i];
        });
    }

    ValueT<S> mul(const ValueT<S>& a, const ValueT<S>& b) {
        require_same_shape(a, b, "mul");
        TensorT<S> out(a->value.shape());
        for (i64 i = 0; i < out.numel(); ++i) out[i] = a->value[i] * b->value[i];
        return record({a, b}, std::move(out), [](NodeT<S>& o, NodeT<S>& ia, NodeT<S>& ib) {
            if (ia.requires_grad)
                for (i64 i = 0; i < o.grad.numel(); ++i) ia.grad[i] += o.grad[i] * ib.value[i];
            if (ib.requires_grad)
                for (i64 i = 0; i < o.grad.numel(); ++i) ib.grad[i] += o.grad[i] * ia.value[i];
        });
    }

    ValueT<S> scale(const ValueT<S>& a, S c) {
        TensorT<S> out(a->value.shape());
        for (i64 i = 0; i < out.numel(); ++i) out[i] = a->value[i] * c;
        return record({a}, std::move(out), [c](NodeT<S>& o, NodeT<S>& ia) {
            if (ia.requires_grad)
                for (i64 i = 0; i < o.grad.numel(); ++i) ia.grad[i] += o.grad[i] * c;
        });
    }

    // x: [L x d], bias: [d]; adds the bias to every row
    ValueT<S> add_row_vector(const ValueT<S>& x, const ValueT<S>& bias) {
        require_rank(x, 2, "add_row_vector");
        require_rank(bias, 1, "add_row_vector bias");
        const i64 rows = x->value.rows(), cols = x->value.cols();
        if (bias->value.numel() != cols) {
            throw ShapeError("add_row_vector: bias length " + bias->value.shape_str() +
                             " does not match row width of " + x->value.shape_str());
        }
        TensorT<S> out(x->value.shape());
        for (i64 r = 0; r < rows; ++r)
            for (i64 c = 0; c < cols; ++c) out.at(r, c) = x->value.at(r, c) + bias->value[c];
        return record({x, bias}, std::move(out), [rows, cols](NodeT<S>& o, NodeT<S>& ix, NodeT<S>& ib) {
            if (ix.requires_grad)
                for (i64 i = 0; i < o.grad.numel(); ++i) ix.grad[i] += o.grad[i];
            if (ib.requires_grad)
                for (i64 r = 0; r < rows; ++r)
                    for (i64 c = 0; c < cols; ++c) ib.grad[c] += o.grad.at(r, c);
        });
    }

    // a: [m x k], b: [k x n] -> [m x n]
    ValueT<S> matmul(const ValueT<S>& a, const ValueT<S>& b) {
        require_rank(a, 2, "matmul lhs");
        require_rank(b, 2, "matmul rhs");
        const i64 m = a->value.rows(), k = a->value.cols(), n = b->value.cols();
        if (b->value.rows() != k) {
            throw ShapeError("matmul: inner dimensions disagree, " + a->value.shape_str() +
                             " x " + b->value.shape_str());
        }
        TensorT<S> out({m, n});
        gemm_nn(a->value, b->value, out);
        return record({a, b}, std::move(out), [m, k, n](NodeT<S>& o, NodeT<S>& ia, NodeT<S>& ib) {
            // d a = g . b^T
            if (ia.requires_grad) {
                for (i64 i = 0; i < m; ++i)
                    for (i64 j = 0; j < n; ++j) {
                        const S g = o.grad.at(i, j);
                        if (g == S(0)) continue;
                        for (i64 p = 0; p < k; ++p) ia.grad.at(i, p) += g * ib.value.at(p, j);
                    }
            }
            // d b = a^T . g
            if (ib.requires_grad) {
                for (i64 i = 0; i < m; ++i)
                    for (i64 p = 0; p < k; ++p) {
                        const S av = ia.value.at(i, p);
                        if (av == S(0)) continue;
                        for (i64 j = 0; j < n; ++j) ib.grad.at(p, j) += av * o.grad.at(i, j);
                    }
            }
        });
    }

    // a: [m x k], b: [n x k] -> a . b^T : [m x n]
    ValueT<S> matmul_nt(const ValueT<S>& a, const ValueT<S>& b) {
        require_rank(a, 2, "matmul_nt lhs");
        require_rank(b, 2, "matmul_nt rhs");
        const i64 m = a->value.rows(), k = a->value.cols(), n = b->value.rows();
        if (b->value.cols() != k) {
            throw ShapeError("matmul_nt: inner dimensions disagree, " + a->value.shape_str() +
                             " x " + b->value.shape_str() + "^T");
        }
        TensorT<S> out({m, n});
        for (i64 i = 0; i < m; ++i)
            for (i64 j = 0; j < n; ++j) {
                S acc = S(0);
                for (i64 p = 0; p < k; ++p) acc += a->value.at(i, p) * b->value.at(j, p);
                out.at(i, j) = acc;
            }
        return record({a, b}, std::move(out), [m, k, n](NodeT<S>& o, NodeT<S>& ia, NodeT<S>& ib) {
            if (ia.requires_grad) {
                for (i64 i = 0; i < m; ++i)
                    for (i64 j = 0; j < n; ++j) {
                        const S g = o.grad.at(i, j);
                        if (g == S(0)) continue;
                        for (i64 p = 0; p < k; ++p) ia.grad.at(i, p) += g * ib.value.at(j, p);
                    }
            }
            if (ib.requires_grad) {
                for (i64 i = 0; i < m; ++i)
                    for (i64 j = 0; j < n; ++j) {
                        const S g = o.grad.at(i, j);
                        if (g == S(0)) continue;
                        for (i64 p = 0; p < k; ++p) ib.grad.at(j, p) += g * ia.value.at(i, p);
                    }
            }
        });
    }

    // Cross-correlation along the sequence axis with zero "same" padding.
    // x: [L x C_in], kernel: [k x C_in x C_out], bias: [C_out] -> [L x C_out]
    ValueT<S> conv1d(const ValueT<S>& x, const ValueT<S>& kernel, const ValueT<S>& bias) {
        require_rank(x, 2, "conv1d input");
        require_rank(kernel, 3, "conv1d kernel");
        require_rank(bias, 1, "conv1d bias");
        const i64 L = x->value.rows(), cin = x->value.cols();
        const i64 k = kernel->value.dim(0), kcin = kernel->value.dim(1), cout = kernel->value.dim(2);
        if (k % 2 == 0) throw ConfigError("conv1d: kernel width must be odd, got " + std::to_string(k));
        if (kcin != cin) {
            throw ShapeError("conv1d: kernel input channels " + std::to_string(kcin) +
                             " do not match input " + x->value.shape_str());
        }
        if (bias->value.numel() != cout) {
            throw ShapeError("conv1d: bias length does not match output channels");
        }
        const i64 pad = k / 2;
        TensorT<S> out({L, cout});
        const S* xp = x->value.data();
        const S* kp = kernel->value.data();
        for (i64 i = 0; i < L; ++i) {
            S* orow = out.data() + i * cout;
            for (i64 co = 0; co < cout; ++co) orow[co] = bias->value[co];
            for (i64 t = 0; t < k; ++t) {
                const i64 src = i + t - pad;
                if (src < 0 || src >= L) continue;
                const S* xrow = xp + src * cin;
                const S* kslab = kp + t * cin * cout;
                for (i64 ci = 0; ci < cin; ++ci) {
                    const S xv = xrow[ci];
                    if (xv == S(0)) continue;
                    const S* krow = kslab + ci * cout;
                    for (i64 co = 0; co < cout; ++co) orow[co] += xv * krow[co];
                }
            }
        }
        return record({x, kernel, bias}, std::move(out),
                      [L, cin, cout, k, pad](NodeT<S>& o, NodeT<S>& ix, NodeT<S>& ik, NodeT<S>& ib) {
            for (i64 i = 0; i < L; ++i) {
                const S* grow = o.grad.data() + i * cout;
                if (ib.requires_grad)
                    for (i64 co = 0; co < cout; ++co) ib.grad[co] += grow[co];
                for (i64 t = 0; t < k; ++t) {
                    const i64 src = i + t - pad;
                    if (src < 0 || src >= L) continue;
                    for (i64 ci = 0; ci < cin; ++ci) {
                        const i64 koff = (t * cin + ci) * cout;
                        if (ix.requires_grad) {
                            S acc = S(0);
                            for (i64 co = 0; co < cout; ++co) acc += grow[co] * ik.value[koff + co];
                            ix.grad.at(src, ci) += acc;
                        }
                        if (ik.requires_grad) {
                            const S xv = ix.value.at(src, ci);
                            if (xv == S(0)) continue;
                            for (i64 co = 0; co < cout; ++co) ik.grad[koff + co] += xv * grow[co];
                        }
                    }
                }
            }
        });
    }

    // Gated linear unit. First half of the channels is the value, second half
    // the gate: out = value (*) sigmoid(gate).
    ValueT<S> glu(const ValueT<S>& x) {
        require_rank(x, 2, "glu");
        const i64 rows = x->value.rows(), cols = x->value.cols();
        if (cols % 2 != 0) {
            throw ShapeError("glu: last dimension must be even, got " + x->value.shape_str());
        }
        const i64 d = cols / 2;
        TensorT<S> out({rows, d});
        TensorT<S> gate({rows, d});  // cached sigmoid(b) for backward
        for (i64 r = 0; r < rows; ++r)
            for (i64 c = 0; c < d; ++c) {
                const S sg = detail::stable_sigmoid(x->value.at(r, c + d));
                gate.at(r, c) = sg;
                out.at(r, c) = x->value.at(r, c) * sg;
            }
        return record({x}, std::move(out), [rows, d, gate = std::move(gate)](NodeT<S>& o, NodeT<S>& ix) {
            if (!ix.requires_grad) return;
            for (i64 r = 0; r < rows; ++r)
                for (i64 c = 0; c < d; ++c) {
                    const S g = o.grad.at(r, c);
                    const S sg = gate.at(r, c);
                    ix.grad.at(r, c) += g * sg;
                    ix.grad.at(r, c + d) += g * ix.value.at(r, c) * sg * (S(1) - sg);
                }
        });
    }

    // Row-wise layer normalization with population variance.
    ValueT<S> layer_norm(const ValueT<S>& x, const ValueT<S>& gamma, const ValueT<S>& beta,
                         S eps = S(1e-5)) {
        require_rank(x, 2, "layer_norm");
        require_rank(gamma, 1, "layer_norm gamma");
        require_rank(beta, 1, "layer_norm beta");
        const i64 rows = x->value.rows(), d = x->value.cols();
        if (gamma->value.numel() != d || beta->value.numel() != d) {
            throw ShapeError("layer_norm: gamma/beta length must equal row width " + std::to_string(d));
        }
        TensorT<S> out({rows, d});
        TensorT<S> xhat({rows, d});
        TensorT<S> inv_std({rows});
        for (i64 r = 0; r < rows; ++r) {
            S mean = S(0);
            for (i64 c = 0; c < d; ++c) mean += x->value.at(r, c);
            mean /= static_cast<S>(d);
            S var = S(0);
            for (i64 c = 0; c < d; ++c) {
                const S dv = x->value.at(r, c) - mean;
                var += dv * dv;
            }
            var /= static_cast<S>(d);
            const S is = S(1) / std::sqrt(var + eps);
            inv_std[r] = is;
            for (i64 c = 0; c < d; ++c) {
                const S xh = (x->value.at(r, c) - mean) * is;
                xhat.at(r, c) = xh;
                out.at(r, c) = xh * gamma->value[c] + beta->value[c];
            }
        }
        return record({x, gamma, beta}, std::move(out),
                      [rows, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](
                          NodeT<S>& o, NodeT<S>& ix, NodeT<S>& ig, NodeT<S>& ib) {
            for (i64 r = 0; r < rows; ++r) {
                S m1 = S(0), m2 = S(0);
                for (i64 c = 0; c < d; ++c) {
                    const S g = o.grad.at(r, c);
                    if (ig.requires_grad) ig.grad[c] += g * xhat.at(r, c);
                    if (ib.requires_grad) ib.grad[c] += g;
                    const S dxh = g * ig.value[c];
                    m1 += dxh;
                    m2 += dxh * xhat.at(r, c);
                }
                if (!ix.requires_grad) continue;
                m1 /= static_cast<S>(d);
                m2 /= static_cast<S>(d);
                for (i64 c = 0; c < d; ++c) {
                    const S dxh = o.grad.at(r, c) * ig.value[c];
                    ix.grad.at(r, c) += inv_std[r] * (dxh - m1 - xhat.at(r, c) * m2);
                }
            }
        });
    }

    // Max-subtracted softmax along one axis of a 2-D tensor.
    ValueT<S> softmax(const ValueT<S>& x, i64 axis = 1) {
        require_rank(x, 2, "softmax");
        if (axis != 0 && axis != 1) throw ShapeError("softmax: axis must be 0 or 1");
        const i64 rows = x->value.rows(), cols = x->value.cols();
        TensorT<S> out({rows, cols});
        const i64 outer = (axis == 1) ? rows : cols;
        const i64 inner = (axis == 1) ? cols : rows;
        auto idx = [&](i64 o, i64 i) { return (axis == 1) ? o * cols + i : i * cols + o; };
        for (i64 o = 0; o < outer; ++o) {
            S mx = x->value[idx(o, 0)];
            for (i64 i = 1; i < inner; ++i) mx = std::max(mx, x->value[idx(o, i)]);
            S sum = S(0);
            for (i64 i = 0; i < inner; ++i) {
                const S e = std::exp(x->value[idx(o, i)] - mx);
                out[idx(o, i)] = e;
                sum += e;
            }
            for (i64 i = 0; i < inner; ++i) out[idx(o, i)] /= sum;
        }
        return record({x}, std::move(out), [axis, rows, cols](NodeT<S>& o, NodeT<S>& ix) {
            if (!ix.requires_grad) return;
            const i64 outer = (axis == 1) ? rows : cols;
            const i64 inner = (axis == 1) ? cols : rows;
            auto idx = [&](i64 ou, i64 in) { return (axis == 1) ? ou * cols + in : in * cols + ou; };
            for (i64 ou = 0; ou < outer; ++ou) {
                S dot = S(0);
                for (i64 in = 0; in < inner; ++in) dot += o.grad[idx(ou, in)] * o.value[idx(ou, in)];
                for (i64 in = 0; in < inner; ++in) {
                    const i64 p = idx(ou, in);
                    ix.grad[p] += o.value[p] * (o.grad[p] - dot);
                }
            }
        });
    }

    // Inverted dropout: training zeroes with probability `rate` and scales
    // survivors by 1/(1-rate); eval is the identity.
    ValueT<S> dropout(const ValueT<S>& x, double rate, Mode mode, RngStream* rng) {
        if (rate < 0.0 || rate >= 1.0) {
            throw ConfigError("dropout rate must be in [0, 1), got " + std::to_string(rate));
        }
        if (mode == Mode::eval || rate == 0.0) {
            TensorT<S> out = x->value;
            return record({x}, std::move(out), [](NodeT<S>& o, NodeT<S>& ix) {
                if (!ix.requires_grad) return;
                for (i64 i = 0; i < o.grad.numel(); ++i) ix.grad[i] += o.grad[i];
            });
        }
        if (rng == nullptr) throw UsageError("dropout in train mode requires a random stream");
        const S keep_scale = static_cast<S>(1.0 / (1.0 - rate));
        std::vector<std::uint8_t> mask(static_cast<std::size_t>(x->value.numel()));
        TensorT<S> out(x->value.shape());
        for (i64 i = 0; i < out.numel(); ++i) {
            const bool keep = rng->uniform() >= rate;
            mask[static_cast<std::size_t>(i)] = keep ? 1 : 0;
            out[i] = keep ? x->value[i] * keep_scale : S(0);
        }
        return record({x}, std::move(out), [keep_scale, mask = std::move(mask)](NodeT<S>& o, NodeT<S>& ix) {
            if (!ix.requires_grad) return;
            for (i64 i = 0; i < o.grad.numel(); ++i)
                if (mask[static_cast<std::size_t>(i)]) ix.grad[i] += o.grad[i] * keep_scale;
        });
    }

    ValueT<S> sigmoid(const ValueT<S>& x) {
        TensorT<S> out(x->value.shape());
        for (i64 i = 0; i < out.numel(); ++i) out[i] = detail::stable_sigmoid(x->value[i]);
        return record({x}, std::move(out), [](NodeT<S>& o, NodeT<S>& ix) {
            if (!ix.requires_grad) return;
            for (i64 i = 0; i < o.grad.numel(); ++i) {
                const S y = o.value[i];
                ix.grad[i] += o.grad[i] * y * (S(1) - y);
            }
        });
    }

    // Column-wise concatenation of matrices with equal row counts.
    ValueT<S> concat_cols(const std::vector<ValueT<S>>& xs) {
        if (xs.empty()) throw UsageError("concat_cols: need at least one input");
        const i64 rows = xs[0]->value.rows();
        i64 total = 0;
        for (const auto& x : xs) {
            require_rank(x, 2, "concat_cols");
            if (x->value.rows() != rows) throw ShapeError("concat_cols: row counts disagree");
            total += x->value.cols();
        }
        TensorT<S> out({rows, total});
        i64 off = 0;
        for (const auto& x : xs) {
            const i64 c = x->value.cols();
            for (i64 r = 0; r < rows; ++r)
                for (i64 j = 0; j < c; ++j) out.at(r, off + j) = x->value.at(r, j);
            off += c;
        }
        return record_multi(xs, std::move(out), [rows](NodeT<S>& o, std::vector<ValueT<S>>& ins) {
            i64 off = 0;
            for (auto& in : ins) {
                const i64 c = in->value.cols();
                if (in->requires_grad)
                    for (i64 r = 0; r < rows; ++r)
                        for (i64 j = 0; j < c; ++j) in->grad.at(r, j) += o.grad.at(r, off + j);
                off += c;
            }
        });
    }

    ValueT<S> slice_cols(const ValueT<S>& x, i64 start, i64 count) {
        require_rank(x, 2, "slice_cols");
        const i64 rows = x->value.rows(), cols = x->value.cols();
        if (start < 0 || count <= 0 || start + count > cols) {
            throw ShapeError("slice_cols: range [" + std::to_string(start) + ", " +
                             std::to_string(start + count) + ") out of " + x->value.shape_str());
        }
        TensorT<S> out({rows, count});
        for (i64 r = 0; r < rows; ++r)
            for (i64 j = 0; j < count; ++j) out.at(r, j) = x->value.at(r, start + j);
        return record({x}, std::move(out), [rows, start, count](NodeT<S>& o, NodeT<S>& ix) {
            if (!ix.requires_grad) return;
            for (i64 r = 0; r < rows; ++r)
                for (i64 j = 0; j < count; ++j) ix.grad.at(r, start + j) += o.grad.at(r, j);
        });
    }

    // L2 norm of each row of x: [L x d] -> [1 x L]
    ValueT<S> row_l2_norms(const ValueT<S>& x) {
        require_rank(x, 2, "row_l2_norms");
        const i64 rows = x->value.rows(), d = x->value.cols();
        TensorT<S> out({i64{1}, rows});
        for (i64 r = 0; r < rows; ++r) {
            S acc = S(0);
            for (i64 c = 0; c < d; ++c) acc += x->value.at(r, c) * x->value.at(r, c);
            out[r] = std::sqrt(acc);
        }
        return record({x}, std::move(out), [rows, d](NodeT<S>& o, NodeT<S>& ix) {
            if (!ix.requires_grad) return;
            for (i64 r = 0; r < rows; ++r) {
                const S nrm = o.value[r];
                if (nrm == S(0)) continue;  // subgradient 0 at the origin
                const S g = o.grad[r] / nrm;
                for (i64 c = 0; c < d; ++c) ix.grad.at(r, c) += g * ix.value.at(r, c);
            }
        });
    }

    // Sum of all elements -> scalar
    ValueT<S> sum(const ValueT<S>& x) {
        S acc = S(0);
        for (i64 i = 0; i < x->value.numel(); ++i) acc += x->value[i];
        return record({x}, TensorT<S>::scalar(acc), [](NodeT<S>& o, NodeT<S>& ix) {
            if (!ix.requires_grad) return;
            for (i64 i = 0; i < ix.grad.numel(); ++i) ix.grad[i] += o.grad[0];
        });
    }

    // Column means: [L x d] -> [1 x d]
    ValueT<S> mean_rows(const ValueT<S>& x) {
        require_rank(x, 2, "mean_rows");
        const i64 rows = x->value.rows(), d = x->value.cols();
        TensorT<S> out({i64{1}, d});
        for (i64 r = 0; r < rows; ++r)
            for (i64 c = 0; c < d; ++c) out[c] += x->value.at(r, c);
        const S inv = S(1) / static_cast<S>(rows);
        for (i64 c = 0; c < d; ++c) out[c] *= inv;
        return record({x}, std::move(out), [rows, d, inv](NodeT<S>& o, NodeT<S>& ix) {
            if (!ix.requires_grad) return;
            for (i64 r = 0; r < rows; ++r)
                for (i64 c = 0; c < d; ++c) ix.grad.at(r, c) += o.grad[c] * inv;
        });
    }

    // Gathers rows of a trainable table: out[i, :] = table[indices[i], :].
    ValueT<S> embedding_lookup(const ValueT<S>& table, const std::vector<i64>& indices) {
        require_rank(table, 2, "embedding_lookup table");
        if (indices.empty()) throw UsageError("embedding_lookup: empty index list");
        const i64 vocab = table->value.rows(), d = table->value.cols();
        for (const i64 ix : indices) {
            if (ix < 0 || ix >= vocab) {
                throw InternalError("embedding_lookup: index " + std::to_string(ix) +
                                    " out of range [0, " + std::to_string(vocab) + ")");
            }
        }
        const i64 L = static_cast<i64>(indices.size());
        TensorT<S> out({L, d});
        for (i64 i = 0; i < L; ++i)
            for (i64 c = 0; c < d; ++c) out.at(i, c) = table->value.at(indices[static_cast<std::size_t>(i)], c);
        return record({table}, std::move(out), [indices, L, d](NodeT<S>& o, NodeT<S>& it) {
            if (!it.requires_grad) return;
            for (i64 i = 0; i < L; ++i)
                for (i64 c = 0; c < d; ++c)
                    it.grad.at(indices[static_cast<std::size_t>(i)], c) += o.grad.at(i, c);
        });
    }

    // Binary cross-entropy against a hard label, with the probability clamped
    // to [1e-7, 1 - 1e-7] before the logs so the loss stays finite.
    ValueT<S> bce(const ValueT<S>& p, int label) {
        if (p->value.numel() != 1) throw UsageError("bce: probability must be scalar");
        if (label != 0 && label != 1) throw UsageError("bce: label must be 0 or 1");
        const S lo = S(1e-7);
        const S hi = S(1) - S(1e-7);
        const S praw = p->value[0];
        const S pc = std::min(hi, std::max(lo, praw));
        const S y = static_cast<S>(label);
        const S loss = -(y * std::log(pc) + (S(1) - y) * std::log(S(1) - pc));
        const bool clamped = (praw < lo) || (praw > hi);
        return record({p}, TensorT<S>::scalar(loss), [pc, y, clamped](NodeT<S>& o, NodeT<S>& ip) {
            if (!ip.requires_grad || clamped) return;
            ip.grad[0] += o.grad[0] * (pc - y) / (pc * (S(1) - pc));
        });
    }

    // ---- backward ------------------------------------------------------------

    void backward(const ValueT<S>& loss) {
        if (consumed_) throw UsageError("backward called twice without a new forward pass");
        if (!recording_) throw UsageError("backward on a non-recording tape");
        if (loss->value.numel() != 1) {
            throw UsageError("backward requires a scalar loss, got " + loss->value.shape_str());
        }
        if (loss->tape_id != id_) {
            throw UsageError("backward: loss was not produced by a forward pass on this tape");
        }
        consumed_ = true;
        if (!loss->requires_grad) return;  // no trainable leaves reach the loss
        loss->grad[0] = S(1);
        for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) {
            if ((*it)->backward) (*it)->backward();
        }
    }

private:
    static u64 next_id() {
        static std::atomic<u64> counter{1};
        return counter.fetch_add(1);
    }

    static void require_rank(const ValueT<S>& v, i64 rank, const char* what) {
        if (v->value.rank() != rank) {
            throw ShapeError(std::string(what) + ": expected rank " + std::to_string(rank) +
                             ", got " + v->value.shape_str());
        }
    }

    static void require_same_shape(const ValueT<S>& a, const ValueT<S>& b, const char* what) {
        if (!a->value.same_shape(b->value)) {
            throw ShapeError(std::string(what) + ": shapes " + a->value.shape_str() + " and " +
                             b->value.shape_str() + " disagree");
        }
    }

    static void gemm_nn(const TensorT<S>& a, const TensorT<S>& b, TensorT<S>& out) {
        const i64 m = a.rows(), k = a.cols(), n = b.cols();
        for (i64 i = 0; i < m; ++i) {
            S* orow = out.data() + i * n;
            for (i64 p = 0; p < k; ++p) {
                const S av = a.at(i, p);
                if (av == S(0)) continue;
                const S* brow = b.data() + p * n;
                for (i64 j = 0; j < n; ++j) orow[j] += av * brow[j];
            }
        }
    }

    template <typename Fn>
    ValueT<S> record(std::vector<ValueT<S>> inputs, TensorT<S> out_value, Fn&& backward_impl) {
        auto out = std::make_shared<NodeT<S>>();
        out->value = std::move(out_value);
        if (!recording_) return out;
        bool needs_grad = false;
        for (const auto& in : inputs) needs_grad = needs_grad || in->requires_grad;
        out->tape_id = id_;
        if (needs_grad) {
            out->requires_grad = true;
            out->grad = TensorT<S>(out->value.shape());
            if constexpr (std::is_invocable_v<Fn&, NodeT<S>&, NodeT<S>&>) {
                out->backward = [out_w = out.get(), a = inputs[0],
                                 f = std::forward<Fn>(backward_impl)]() { f(*out_w, *a); };
            } else if constexpr (std::is_invocable_v<Fn&, NodeT<S>&, NodeT<S>&, NodeT<S>&>) {
                out->backward = [out_w = out.get(), a = inputs[0], b = inputs[1],
                                 f = std::forward<Fn>(backward_impl)]() { f(*out_w, *a, *b); };
            } else {
                static_assert(std::is_invocable_v<Fn&, NodeT<S>&, NodeT<S>&, NodeT<S>&, NodeT<S>&>,
                              "record: unsupported backward arity");
                out->backward = [out_w = out.get(), a = inputs[0], b = inputs[1], c = inputs[2],
                                 f = std::forward<Fn>(backward_impl)]() { f(*out_w, *a, *b, *c); };
            }
        }
        ops_.push_back(out);
        return out;
    }

    template <typename Fn>
    ValueT<S> record_multi(std::vector<ValueT<S>> inputs, TensorT<S> out_value, Fn&& backward_impl) {
        auto out = std::make_shared<NodeT<S>>();
        out->value = std::move(out_value);
        if (!recording_) return out;
        bool needs_grad = false;
        for (const auto& in : inputs) needs_grad = needs_grad || in->requires_grad;
        out->tape_id = id_;
        if (needs_grad) {
            out->requires_grad = true;
            out->grad = TensorT<S>(out->value.shape());
            out->backward = [out_w = out.get(), ins = std::move(inputs),
                             f = std::forward<Fn>(backward_impl)]() mutable { f(*out_w, ins); };
        }
        ops_.push_back(out);
        return out;
    }

    bool recording_ = true;
    bool consumed_ = false;
    u64 id_ = 0;
    std::vector<ValueT<S>> ops_;
};

using Tape = TapeT<float>;
using Value = ValueT<float>;

}  // namespace tipformer
