#include "prefixvc/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace prefixvc {

namespace {

thread_local Tape * g_current_tape = nullptr;

// extent 0 is allowed: zero-length sequences and empty prefixes are real inputs
size_t shape_numel(const std::vector<int> & shape) {
    size_t n = 1;
    for (int d : shape) {
        if (d < 0) throw Error(ErrorKind::shape, "tensor extents must be non-negative");
        n *= static_cast<size_t>(d);
    }
    return n;
}

std::shared_ptr<TensorNode> make_node(std::vector<int> shape, std::vector<double> value) {
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    return n;
}

// Wires the result into the graph when a tape is active and some input
// requires grad. `fn` receives the result node (whose grad is populated).
Tensor finish_op(std::shared_ptr<TensorNode> out,
                 std::initializer_list<Tensor> inputs,
                 std::function<void(TensorNode &)> fn) {
    Tape * tape = Tape::current();
    bool need = false;
    if (tape) {
        for (const Tensor & t : inputs) {
            if (t.node()->requires_grad) { need = true; break; }
        }
    }
    if (need) {
        out->requires_grad = true;
        for (const Tensor & t : inputs) out->parents.push_back(t.node());
        out->backprop = std::move(fn);
        tape->record(out);
    }
    return Tensor(std::move(out));
}

void check_same_shape(const Tensor & a, const Tensor & b, const char * op) {
    if (a.shape() != b.shape())
        throw Error(ErrorKind::shape, std::string(op) + ": shape mismatch");
}

} // namespace

Tensor Tensor::zeros(const std::vector<int> & shape, bool requires_grad) {
    auto n = make_node(shape, std::vector<double>(shape_numel(shape), 0.0));
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
}

Tensor Tensor::full(const std::vector<int> & shape, double v) {
    return Tensor(make_node(shape, std::vector<double>(shape_numel(shape), v)));
}

Tensor Tensor::from(const std::vector<int> & shape, std::vector<double> data) {
    if (data.size() != shape_numel(shape))
        throw Error(ErrorKind::shape, "Tensor::from: data length does not match shape");
    return Tensor(make_node(shape, std::move(data)));
}

Tensor Tensor::scalar(double v) {
    return Tensor(make_node({1}, {v}));
}

Tensor Tensor::randn(const std::vector<int> & shape, std::mt19937_64 & rng, double stddev) {
    std::vector<double> data(shape_numel(shape));
    std::normal_distribution<double> dist(0.0, stddev);
    for (double & x : data) x = dist(rng);
    return Tensor(make_node(shape, std::move(data)));
}

double Tensor::item() const {
    if (size() != 1) throw Error(ErrorKind::shape, "item() on non-scalar tensor");
    return node_->value[0];
}

Tape::Tape() {
    prev_ = g_current_tape;
    g_current_tape = this;
}

Tape::~Tape() {
    g_current_tape = prev_;
}

Tape * Tape::current() {
    return g_current_tape;
}

void Tape::backward(const Tensor & loss) {
    if (loss.size() != 1) throw Error(ErrorKind::shape, "backward() requires a scalar loss");
    auto ln = loss.node();
    ln->ensure_grad();
    ln->grad[0] += 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        TensorNode & n = **it;
        if (n.grad.empty() || !n.backprop) continue;
        n.backprop(n);
    }
}

// ---------------------------------------------------------------------------
// kernels

void mat_mul_nn(const double * a, const double * b, double * c, int m, int k, int n, bool acc) {
    if (!acc) std::memset(c, 0, sizeof(double) * static_cast<size_t>(m) * n);
    for (int i = 0; i < m; ++i) {
        double * ci = c + static_cast<size_t>(i) * n;
        const double * ai = a + static_cast<size_t>(i) * k;
        for (int kk = 0; kk < k; ++kk) {
            const double av = ai[kk];
            const double * bk = b + static_cast<size_t>(kk) * n;
            for (int j = 0; j < n; ++j) ci[j] += av * bk[j];
        }
    }
}

void mat_mul_nt(const double * a, const double * b, double * c, int m, int k, int n, bool acc) {
    for (int i = 0; i < m; ++i) {
        const double * ai = a + static_cast<size_t>(i) * k;
        double * ci = c + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const double * bj = b + static_cast<size_t>(j) * k;
            double s = 0.0;
            for (int kk = 0; kk < k; ++kk) s += ai[kk] * bj[kk];
            ci[j] = acc ? ci[j] + s : s;
        }
    }
}

void mat_mul_tn(const double * a, const double * b, double * c, int m, int k, int n, bool acc) {
    if (!acc) std::memset(c, 0, sizeof(double) * static_cast<size_t>(m) * n);
    for (int kk = 0; kk < k; ++kk) {
        const double * ak = a + static_cast<size_t>(kk) * m;
        const double * bk = b + static_cast<size_t>(kk) * n;
        for (int i = 0; i < m; ++i) {
            const double av = ak[i];
            double * ci = c + static_cast<size_t>(i) * n;
            for (int j = 0; j < n; ++j) ci[j] += av * bk[j];
        }
    }
}

bool all_finite(const double * p, size_t n) {
    for (size_t i = 0; i < n; ++i)
        if (!std::isfinite(p[i])) return false;
    return true;
}

void ensure_finite(const Tensor & t, const char * what) {
    if (!all_finite(t.data(), t.size()))
        throw Error(ErrorKind::numeric, std::string("non-finite values in ") + what);
}

// ---------------------------------------------------------------------------
// elementwise

Tensor add(const Tensor & a, const Tensor & b) {
    check_same_shape(a, b, "add");
    std::vector<double> out(a.size());
    const double * pa = a.data();
    const double * pb = b.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = pa[i] + pb[i];
    return finish_op(make_node(a.shape(), std::move(out)), {a, b}, [](TensorNode & n) {
        for (int s = 0; s < 2; ++s) {
            TensorNode & p = *n.parents[static_cast<size_t>(s)];
            if (!p.requires_grad) continue;
            p.ensure_grad();
            for (size_t i = 0; i < n.grad.size(); ++i) p.grad[i] += n.grad[i];
        }
    });
}

Tensor sub(const Tensor & a, const Tensor & b) {
    check_same_shape(a, b, "sub");
    std::vector<double> out(a.size());
    const double * pa = a.data();
    const double * pb = b.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = pa[i] - pb[i];
    return finish_op(make_node(a.shape(), std::move(out)), {a, b}, [](TensorNode & n) {
        TensorNode & pa_ = *n.parents[0];
        TensorNode & pb_ = *n.parents[1];
        if (pa_.requires_grad) {
            pa_.ensure_grad();
            for (size_t i = 0; i < n.grad.size(); ++i) pa_.grad[i] += n.grad[i];
        }
        if (pb_.requires_grad) {
            pb_.ensure_grad();
            for (size_t i = 0; i < n.grad.size(); ++i) pb_.grad[i] -= n.grad[i];
        }
    });
}

Tensor mul(const Tensor & a, const Tensor & b) {
    check_same_shape(a, b, "mul");
    std::vector<double> out(a.size());
    const double * pa = a.data();
    const double * pb = b.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = pa[i] * pb[i];
    return finish_op(make_node(a.shape(), std::move(out)), {a, b}, [](TensorNode & n) {
        TensorNode & pa_ = *n.parents[0];
        TensorNode & pb_ = *n.parents[1];
        if (pa_.requires_grad) {
            pa_.ensure_grad();
            for (size_t i = 0; i < n.grad.size(); ++i) pa_.grad[i] += n.grad[i] * pb_.value[i];
        }
        if (pb_.requires_grad) {
            pb_.ensure_grad();
            for (size_t i = 0; i < n.grad.size(); ++i) pb_.grad[i] += n.grad[i] * pa_.value[i];
        }
    });
}

Tensor add_rowvec(const Tensor & a, const Tensor & v) {
    const int m = a.rows();
    const int n = a.cols();
    if (static_cast<size_t>(n) != v.size())
        throw Error(ErrorKind::shape, "add_rowvec: vector length mismatch");
    std::vector<double> out(a.size());
    const double * pa = a.data();
    const double * pv = v.data();
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out[static_cast<size_t>(i) * n + j] = pa[static_cast<size_t>(i) * n + j] + pv[j];
    return finish_op(make_node(a.shape(), std::move(out)), {a, v}, [m, n](TensorNode & nd) {
        TensorNode & pa_ = *nd.parents[0];
        TensorNode & pv_ = *nd.parents[1];
        if (pa_.requires_grad) {
            pa_.ensure_grad();
            for (size_t i = 0; i < nd.grad.size(); ++i) pa_.grad[i] += nd.grad[i];
        }
        if (pv_.requires_grad) {
            pv_.ensure_grad();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) pv_.grad[static_cast<size_t>(j)] += nd.grad[static_cast<size_t>(i) * n + j];
        }
    });
}

Tensor scale(const Tensor & a, double s) {
    std::vector<double> out(a.size());
    const double * pa = a.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = pa[i] * s;
    return finish_op(make_node(a.shape(), std::move(out)), {a}, [s](TensorNode & n) {
        TensorNode & p = *n.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (size_t i = 0; i < n.grad.size(); ++i) p.grad[i] += n.grad[i] * s;
    });
}

// ---------------------------------------------------------------------------
// matmul family

Tensor matmul(const Tensor & a, const Tensor & b) {
    const int m = a.rows(), k = a.cols(), k2 = b.rows(), n = b.cols();
    if (k != k2) throw Error(ErrorKind::shape, "matmul: inner dimensions differ");
    std::vector<double> out(static_cast<size_t>(m) * n);
    mat_mul_nn(a.data(), b.data(), out.data(), m, k, n, false);
    return finish_op(make_node({m, n}, std::move(out)), {a, b}, [m, k, n](TensorNode & nd) {
        TensorNode & pa = *nd.parents[0];
        TensorNode & pb = *nd.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad();
            mat_mul_nt(nd.grad.data(), pb.value.data(), pa.grad.data(), m, n, k, true); // dA = dY B^T
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            mat_mul_tn(pa.value.data(), nd.grad.data(), pb.grad.data(), k, m, n, true); // dB = A^T dY
        }
    });
}

Tensor matmul_nt(const Tensor & a, const Tensor & b) {
    const int m = a.rows(), k = a.cols(), n = b.rows();
    if (k != b.cols()) throw Error(ErrorKind::shape, "matmul_nt: inner dimensions differ");
    std::vector<double> out(static_cast<size_t>(m) * n);
    mat_mul_nt(a.data(), b.data(), out.data(), m, k, n, false);
    return finish_op(make_node({m, n}, std::move(out)), {a, b}, [m, k, n](TensorNode & nd) {
        TensorNode & pa = *nd.parents[0];
        TensorNode & pb = *nd.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad();
            mat_mul_nn(nd.grad.data(), pb.value.data(), pa.grad.data(), m, n, k, true); // dA = dY B
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            mat_mul_tn(nd.grad.data(), pa.value.data(), pb.grad.data(), n, m, k, true); // dB = dY^T A
        }
    });
}

Tensor matmul_tn(const Tensor & a, const Tensor & b) {
    const int k = a.rows(), m = a.cols(), n = b.cols();
    if (k != b.rows()) throw Error(ErrorKind::shape, "matmul_tn: inner dimensions differ");
    std::vector<double> out(static_cast<size_t>(m) * n);
    mat_mul_tn(a.data(), b.data(), out.data(), m, k, n, false);
    return finish_op(make_node({m, n}, std::move(out)), {a, b}, [m, k, n](TensorNode & nd) {
        TensorNode & pa = *nd.parents[0];
        TensorNode & pb = *nd.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad();
            mat_mul_nt(pb.value.data(), nd.grad.data(), pa.grad.data(), k, n, m, true); // dA = B dY^T
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            mat_mul_nn(pa.value.data(), nd.grad.data(), pb.grad.data(), k, m, n, true); // dB = A dY
        }
    });
}

// ---------------------------------------------------------------------------
// nonlinearities

Tensor relu(const Tensor & a) {
    std::vector<double> out(a.size());
    const double * pa = a.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = pa[i] > 0.0 ? pa[i] : 0.0;
    return finish_op(make_node(a.shape(), std::move(out)), {a}, [](TensorNode & n) {
        TensorNode & p = *n.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (size_t i = 0; i < n.grad.size(); ++i)
            if (p.value[i] > 0.0) p.grad[i] += n.grad[i];
    });
}

Tensor gelu(const Tensor & a) {
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    constexpr double inv_sqrt2pi = 0.3989422804014326779;
    std::vector<double> out(a.size());
    const double * pa = a.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = 0.5 * pa[i] * (1.0 + std::erf(pa[i] * inv_sqrt2));
    return finish_op(make_node(a.shape(), std::move(out)), {a}, [](TensorNode & n) {
        TensorNode & p = *n.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (size_t i = 0; i < n.grad.size(); ++i) {
            const double x = p.value[i];
            const double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
            const double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
            p.grad[i] += n.grad[i] * (cdf + x * pdf);
        }
    });
}

Tensor tanh_t(const Tensor & a) {
    std::vector<double> out(a.size());
    const double * pa = a.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(pa[i]);
    return finish_op(make_node(a.shape(), std::move(out)), {a}, [](TensorNode & n) {
        TensorNode & p = *n.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (size_t i = 0; i < n.grad.size(); ++i) p.grad[i] += n.grad[i] * (1.0 - n.value[i] * n.value[i]);
    });
}

Tensor softmax_rows(const Tensor & a) {
    const int m = a.rows(), n = a.cols();
    std::vector<double> out(a.size());
    const double * pa = a.data();
    for (int i = 0; i < m; ++i) {
        const double * row = pa + static_cast<size_t>(i) * n;
        double * orow = out.data() + static_cast<size_t>(i) * n;
        double mx = row[0];
        for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (int j = 0; j < n; ++j) { orow[j] = std::exp(row[j] - mx); sum += orow[j]; }
        const double inv = 1.0 / sum;
        for (int j = 0; j < n; ++j) orow[j] *= inv;
    }
    return finish_op(make_node(a.shape(), std::move(out)), {a}, [m, n](TensorNode & nd) {
        TensorNode & p = *nd.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (int i = 0; i < m; ++i) {
            const double * y = nd.value.data() + static_cast<size_t>(i) * n;
            const double * dy = nd.grad.data() + static_cast<size_t>(i) * n;
            double * dx = p.grad.data() + static_cast<size_t>(i) * n;
            double dot = 0.0;
            for (int j = 0; j < n; ++j) dot += dy[j] * y[j];
            for (int j = 0; j < n; ++j) dx[j] += (dy[j] - dot) * y[j];
        }
    });
}

Tensor layer_norm_rows(const Tensor & a, const Tensor & gamma, const Tensor & beta, double eps) {
    const int m = a.rows(), n = a.cols();
    if (gamma.size() != static_cast<size_t>(n) || beta.size() != static_cast<size_t>(n))
        throw Error(ErrorKind::shape, "layer_norm: gamma/beta length mismatch");
    std::vector<double> out(a.size());
    std::vector<double> inv_std(static_cast<size_t>(m));
    std::vector<double> xhat(a.size());
    const double * pa = a.data();
    const double * pg = gamma.data();
    const double * pb = beta.data();
    for (int i = 0; i < m; ++i) {
        const double * row = pa + static_cast<size_t>(i) * n;
        double mean = 0.0;
        for (int j = 0; j < n; ++j) mean += row[j];
        mean /= n;
        double var = 0.0;
        for (int j = 0; j < n; ++j) { const double d = row[j] - mean; var += d * d; }
        var /= n;
        const double is = 1.0 / std::sqrt(var + eps);
        inv_std[static_cast<size_t>(i)] = is;
        double * xh = xhat.data() + static_cast<size_t>(i) * n;
        double * orow = out.data() + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            xh[j] = (row[j] - mean) * is;
            orow[j] = xh[j] * pg[j] + pb[j];
        }
    }
    auto node = make_node(a.shape(), std::move(out));
    return finish_op(std::move(node), {a, gamma, beta},
                     [m, n, inv_std = std::move(inv_std), xhat = std::move(xhat)](TensorNode & nd) {
        TensorNode & pa_ = *nd.parents[0];
        TensorNode & pg_ = *nd.parents[1];
        TensorNode & pb_ = *nd.parents[2];
        if (pg_.requires_grad) {
            pg_.ensure_grad();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j)
                    pg_.grad[static_cast<size_t>(j)] += nd.grad[static_cast<size_t>(i) * n + j] * xhat[static_cast<size_t>(i) * n + j];
        }
        if (pb_.requires_grad) {
            pb_.ensure_grad();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) pb_.grad[static_cast<size_t>(j)] += nd.grad[static_cast<size_t>(i) * n + j];
        }
        if (pa_.requires_grad) {
            pa_.ensure_grad();
            const double * pg2 = pg_.value.data();
            for (int i = 0; i < m; ++i) {
                const double * dy = nd.grad.data() + static_cast<size_t>(i) * n;
                const double * xh = xhat.data() + static_cast<size_t>(i) * n;
                double * dx = pa_.grad.data() + static_cast<size_t>(i) * n;
                double sum_dyg = 0.0, sum_dyg_xh = 0.0;
                for (int j = 0; j < n; ++j) {
                    const double g = dy[j] * pg2[j];
                    sum_dyg += g;
                    sum_dyg_xh += g * xh[j];
                }
                const double is = inv_std[static_cast<size_t>(i)];
                for (int j = 0; j < n; ++j) {
                    const double g = dy[j] * pg2[j];
                    dx[j] += is * (g - sum_dyg / n - xh[j] * sum_dyg_xh / n);
                }
            }
        }
    });
}

// ---------------------------------------------------------------------------
// structural

Tensor concat_rows(const Tensor & a, const Tensor & b) {
    if (a.cols() != b.cols()) throw Error(ErrorKind::shape, "concat_rows: column mismatch");
    const int ma = a.rows(), mb = b.rows(), n = a.cols();
    std::vector<double> out;
    out.reserve(a.size() + b.size());
    out.insert(out.end(), a.data(), a.data() + a.size());
    out.insert(out.end(), b.data(), b.data() + b.size());
    return finish_op(make_node({ma + mb, n}, std::move(out)), {a, b}, [ma, mb, n](TensorNode & nd) {
        TensorNode & pa = *nd.parents[0];
        TensorNode & pb = *nd.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (size_t i = 0; i < static_cast<size_t>(ma) * n; ++i) pa.grad[i] += nd.grad[i];
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            const size_t off = static_cast<size_t>(ma) * n;
            for (size_t i = 0; i < static_cast<size_t>(mb) * n; ++i) pb.grad[i] += nd.grad[off + i];
        }
    });
}

Tensor concat_cols(const std::vector<Tensor> & parts) {
    if (parts.empty()) throw Error(ErrorKind::input, "concat_cols: no parts");
    const int m = parts[0].rows();
    int n = 0;
    for (const Tensor & p : parts) {
        if (p.rows() != m) throw Error(ErrorKind::shape, "concat_cols: row mismatch");
        n += p.cols();
    }
    std::vector<double> out(static_cast<size_t>(m) * n);
    std::vector<int> widths;
    int off = 0;
    for (const Tensor & p : parts) {
        const int w = p.cols();
        widths.push_back(w);
        for (int i = 0; i < m; ++i)
            std::memcpy(out.data() + static_cast<size_t>(i) * n + off, p.data() + static_cast<size_t>(i) * w,
                        sizeof(double) * static_cast<size_t>(w));
        off += w;
    }
    auto node = make_node({m, n}, std::move(out));
    Tape * tape = Tape::current();
    bool need = false;
    if (tape) {
        for (const Tensor & p : parts)
            if (p.node()->requires_grad) { need = true; break; }
    }
    if (need) {
        node->requires_grad = true;
        for (const Tensor & p : parts) node->parents.push_back(p.node());
        node->backprop = [m, n, widths = std::move(widths)](TensorNode & nd) {
            int off2 = 0;
            for (size_t s = 0; s < nd.parents.size(); ++s) {
                TensorNode & p = *nd.parents[s];
                const int w = widths[s];
                if (p.requires_grad) {
                    p.ensure_grad();
                    for (int i = 0; i < m; ++i)
                        for (int j = 0; j < w; ++j)
                            p.grad[static_cast<size_t>(i) * w + j] += nd.grad[static_cast<size_t>(i) * n + off2 + j];
                }
                off2 += w;
            }
        };
        tape->record(node);
    }
    return Tensor(std::move(node));
}

Tensor slice_rows(const Tensor & a, int r0, int r1) {
    const int m = a.rows(), n = a.cols();
    if (r0 < 0 || r1 > m || r0 >= r1) throw Error(ErrorKind::shape, "slice_rows: bad range");
    std::vector<double> out(a.data() + static_cast<size_t>(r0) * n, a.data() + static_cast<size_t>(r1) * n);
    return finish_op(make_node({r1 - r0, n}, std::move(out)), {a}, [r0, n](TensorNode & nd) {
        TensorNode & p = *nd.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        const size_t off = static_cast<size_t>(r0) * n;
        for (size_t i = 0; i < nd.grad.size(); ++i) p.grad[off + i] += nd.grad[i];
    });
}

Tensor slice_cols(const Tensor & a, int c0, int c1) {
    const int m = a.rows(), n = a.cols();
    if (c0 < 0 || c1 > n || c0 >= c1) throw Error(ErrorKind::shape, "slice_cols: bad range");
    const int w = c1 - c0;
    std::vector<double> out(static_cast<size_t>(m) * w);
    for (int i = 0; i < m; ++i)
        std::memcpy(out.data() + static_cast<size_t>(i) * w, a.data() + static_cast<size_t>(i) * n + c0,
                    sizeof(double) * static_cast<size_t>(w));
    return finish_op(make_node({m, w}, std::move(out)), {a}, [c0, n, w, m](TensorNode & nd) {
        TensorNode & p = *nd.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < w; ++j)
                p.grad[static_cast<size_t>(i) * n + c0 + j] += nd.grad[static_cast<size_t>(i) * w + j];
    });
}

Tensor embedding_rows(const Tensor & table, const std::vector<int> & ids) {
    const int v = table.rows(), d = table.cols();
    std::vector<double> out(ids.size() * static_cast<size_t>(d));
    for (size_t i = 0; i < ids.size(); ++i) {
        const int id = ids[i];
        if (id < 0 || id >= v) throw Error(ErrorKind::input, "embedding: id out of vocabulary");
        std::memcpy(out.data() + i * d, table.data() + static_cast<size_t>(id) * d, sizeof(double) * static_cast<size_t>(d));
    }
    return finish_op(make_node({static_cast<int>(ids.size()), d}, std::move(out)), {table},
                     [ids, d](TensorNode & nd) {
        TensorNode & p = *nd.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (size_t i = 0; i < ids.size(); ++i) {
            double * dst = p.grad.data() + static_cast<size_t>(ids[i]) * d;
            const double * src = nd.grad.data() + i * d;
            for (int j = 0; j < d; ++j) dst[j] += src[j];
        }
    });
}

Tensor sum_all(const Tensor & a) {
    double s = 0.0;
    const double * pa = a.data();
    for (size_t i = 0; i < a.size(); ++i) s += pa[i];
    return finish_op(make_node({1}, {s}), {a}, [](TensorNode & nd) {
        TensorNode & p = *nd.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        const double g = nd.grad[0];
        for (size_t i = 0; i < p.grad.size(); ++i) p.grad[i] += g;
    });
}

Tensor mean_all(const Tensor & a) {
    double s = 0.0;
    const double * pa = a.data();
    for (size_t i = 0; i < a.size(); ++i) s += pa[i];
    const double inv = 1.0 / static_cast<double>(a.size());
    return finish_op(make_node({1}, {s * inv}), {a}, [inv](TensorNode & nd) {
        TensorNode & p = *nd.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        const double g = nd.grad[0] * inv;
        for (size_t i = 0; i < p.grad.size(); ++i) p.grad[i] += g;
    });
}

Tensor repeat_row(const Tensor & v, int n) {
    if (v.rows() != 1) throw Error(ErrorKind::shape, "repeat_row: input must have one row");
    const int d = v.cols();
    std::vector<double> out(static_cast<size_t>(n) * d);
    for (int i = 0; i < n; ++i) std::memcpy(out.data() + static_cast<size_t>(i) * d, v.data(), sizeof(double) * static_cast<size_t>(d));
    return finish_op(make_node({n, d}, std::move(out)), {v}, [n, d](TensorNode & nd) {
        TensorNode & p = *nd.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < d; ++j) p.grad[static_cast<size_t>(j)] += nd.grad[static_cast<size_t>(i) * d + j];
    });
}

Tensor cross_entropy_rows(const Tensor & logits, const std::vector<int> & targets) {
    const int m = logits.rows(), n = logits.cols();
    if (targets.size() != static_cast<size_t>(m))
        throw Error(ErrorKind::shape, "cross_entropy: one target per row required");
    std::vector<double> probs(logits.size());
    const double * pl = logits.data();
    double loss = 0.0;
    for (int i = 0; i < m; ++i) {
        const int t = targets[static_cast<size_t>(i)];
        if (t < 0 || t >= n) throw Error(ErrorKind::input, "cross_entropy: target out of range");
        const double * row = pl + static_cast<size_t>(i) * n;
        double * prow = probs.data() + static_cast<size_t>(i) * n;
        double mx = row[0];
        for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (int j = 0; j < n; ++j) { prow[j] = std::exp(row[j] - mx); sum += prow[j]; }
        const double inv = 1.0 / sum;
        for (int j = 0; j < n; ++j) prow[j] *= inv;
        loss -= std::log(std::max(prow[t], 1e-300));
    }
    loss /= m;
    if (!std::isfinite(loss)) throw Error(ErrorKind::numeric, "cross_entropy: non-finite loss");
    auto node = make_node({1}, {loss});
    return finish_op(std::move(node), {logits}, [m, n, targets, probs = std::move(probs)](TensorNode & nd) {
        TensorNode & p = *nd.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        const double g = nd.grad[0] / m;
        for (int i = 0; i < m; ++i) {
            const double * prow = probs.data() + static_cast<size_t>(i) * n;
            double * dx = p.grad.data() + static_cast<size_t>(i) * n;
            const int t = targets[static_cast<size_t>(i)];
            for (int j = 0; j < n; ++j) dx[j] += g * (prow[j] - (j == t ? 1.0 : 0.0));
        }
    });
}

Tensor attention(const Tensor & q, const Tensor & k, const Tensor & v, const std::vector<uint8_t> * mask) {
    const int n = q.rows(), d = q.cols(), m = k.rows();
    if (d <= 0) throw Error(ErrorKind::shape, "attention: d must be positive");
    if (k.cols() != d) throw Error(ErrorKind::shape, "attention: Q/K width mismatch");
    if (v.rows() != m) throw Error(ErrorKind::shape, "attention: K/V row mismatch");
    if (mask) {
        if (mask->size() != static_cast<size_t>(n) * m)
            throw Error(ErrorKind::shape, "attention: mask must be n x m");
        for (int i = 0; i < n; ++i) {
            bool any = false;
            for (int j = 0; j < m; ++j)
                if ((*mask)[static_cast<size_t>(i) * m + j]) { any = true; break; }
            if (!any) throw Error(ErrorKind::input, "attention: degenerate mask, row fully masked");
        }
    }
    Tensor scores = scale(matmul_nt(q, k), 1.0 / std::sqrt(static_cast<double>(d)));
    if (mask) {
        std::vector<double> pen(static_cast<size_t>(n) * m, 0.0);
        for (size_t i = 0; i < pen.size(); ++i)
            if (!(*mask)[i]) pen[i] = -1e9;
        scores = add(scores, Tensor::from({n, m}, std::move(pen)));
    }
    Tensor w = softmax_rows(scores);
    return matmul(w, v);
}

} // namespace prefixvc
