#pragma once

// Reverse-mode differentiation on a per-evaluation tape. Graphs are built
// eagerly against a Tape; backward() walks the nodes in reverse and
// accumulates gradients for every node marked as needing them.
//
// Ops are 2-D matrix/vector primitives; vectors are (1,n) rows.

#include <cmath>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "cxrl/params.hpp"
#include "cxrl/tensor.hpp"

namespace cxrl::num {

template <typename T>
class Tape {
public:
    struct Var {
        int32_t id = -1;
        bool valid() const { return id >= 0; }
    };

    Tape() { nodes_.reserve(64); }

    // ---- leaves ----
    Var constant(TensorT<T> v) { return push(std::move(v), false, nullptr); }
    Var input(TensorT<T> v, bool needs_grad) { return push(std::move(v), needs_grad, nullptr); }

    const TensorT<T>& value(Var v) const { return nodes_[check(v)].value; }
    const TensorT<T>& grad(Var v) const {
        const auto& g = grads_[check(v)];
        if (g.data.empty()) throw std::logic_error("tape: no gradient for this node");
        return g;
    }
    bool has_grad(Var v) const { return !grads_[check(v)].data.empty(); }
    size_t size() const { return nodes_.size(); }

    // ---- ops ----
    Var matmul(Var a, Var b) {
        const auto& A = val(a);
        const auto& B = val(b);
        TensorT<T> out = num::matmul(A, B);
        return binary(std::move(out), a, b, [this, a, b](const TensorT<T>& g) {
            const auto& A = val(a);
            const auto& B = val(b);
            const int64_t m = A.shape[0], k = A.shape[1], n = B.shape[1];
            // gA += g @ B^T ; gB += A^T @ g
            if (wants(a)) matmul_bt_acc_kernel(g.data.data(), B.data.data(), gbuf(a), m, n, k);
            if (wants(b)) matmul_at_acc_kernel(A.data.data(), g.data.data(), gbuf(b), k, m, n);
        });
    }

    // a @ b^T with a:(m,k), b:(n,k) -> (m,n)
    Var matmul_bt(Var a, Var b) {
        const auto& A = val(a);
        const auto& B = val(b);
        if (A.shape.size() != 2 || B.shape.size() != 2 || A.shape[1] != B.shape[1])
            throw std::invalid_argument("matmul_bt: shape mismatch");
        TensorT<T> out({A.shape[0], B.shape[0]});
        matmul_bt_acc_kernel(A.data.data(), B.data.data(), out.data.data(), A.shape[0], A.shape[1], B.shape[0]);
        return binary(std::move(out), a, b, [this, a, b](const TensorT<T>& g) {
            const auto& A = val(a);
            const auto& B = val(b);
            const int64_t m = A.shape[0], k = A.shape[1], n = B.shape[0];
            // gA += g @ B ; gB += g^T @ A
            if (wants(a)) matmul_acc_kernel(g.data.data(), B.data.data(), gbuf(a), m, n, k);
            if (wants(b)) matmul_at_acc_kernel(g.data.data(), A.data.data(), gbuf(b), n, m, k);
        });
    }

    Var add(Var a, Var b) {
        const auto& A = val(a);
        const auto& B = val(b);
        if (!A.same_shape(B)) throw std::invalid_argument("add: shape mismatch");
        TensorT<T> out = A;
        for (int64_t i = 0; i < out.numel(); ++i) out.data[i] += B.data[i];
        return binary(std::move(out), a, b, [this, a, b](const TensorT<T>& g) {
            acc_same(a, g);
            acc_same(b, g);
        });
    }

    // (m,n) + (1,n), the bias pattern
    Var add_row(Var a, Var row) {
        const auto& A = val(a);
        const auto& R = val(row);
        if (A.cols() != R.numel()) throw std::invalid_argument("add_row: width mismatch");
        TensorT<T> out = A;
        const int64_t m = A.rows(), n = A.cols();
        for (int64_t i = 0; i < m; ++i)
            for (int64_t j = 0; j < n; ++j) out.data[i * n + j] += R.data[j];
        return binary(std::move(out), a, row, [this, a, row](const TensorT<T>& g) {
            acc_same(a, g);
            if (wants(row)) {
                T* gr = gbuf(row);
                const int64_t m = val(a).rows(), n = val(a).cols();
                for (int64_t i = 0; i < m; ++i)
                    for (int64_t j = 0; j < n; ++j) gr[j] += g.data[i * n + j];
            }
        });
    }

    Var sub(Var a, Var b) {
        const auto& A = val(a);
        const auto& B = val(b);
        if (!A.same_shape(B)) throw std::invalid_argument("sub: shape mismatch");
        TensorT<T> out = A;
        for (int64_t i = 0; i < out.numel(); ++i) out.data[i] -= B.data[i];
        return binary(std::move(out), a, b, [this, a, b](const TensorT<T>& g) {
            acc_same(a, g);
            if (wants(b)) {
                T* gb = gbuf(b);
                for (int64_t i = 0; i < g.numel(); ++i) gb[i] -= g.data[i];
            }
        });
    }

    Var mul(Var a, Var b) {
        const auto& A = val(a);
        const auto& B = val(b);
        if (!A.same_shape(B)) throw std::invalid_argument("mul: shape mismatch");
        TensorT<T> out = A;
        for (int64_t i = 0; i < out.numel(); ++i) out.data[i] *= B.data[i];
        return binary(std::move(out), a, b, [this, a, b](const TensorT<T>& g) {
            if (wants(a)) {
                T* ga = gbuf(a);
                const auto& B = val(b);
                for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g.data[i] * B.data[i];
            }
            if (wants(b)) {
                T* gb = gbuf(b);
                const auto& A = val(a);
                for (int64_t i = 0; i < g.numel(); ++i) gb[i] += g.data[i] * A.data[i];
            }
        });
    }

    Var scale(Var a, double c) {
        TensorT<T> out = val(a);
        for (auto& v : out.data) v = static_cast<T>(v * c);
        return unary(std::move(out), a, [this, a, c](const TensorT<T>& g) {
            if (!wants(a)) return;
            T* ga = gbuf(a);
            for (int64_t i = 0; i < g.numel(); ++i) ga[i] += static_cast<T>(g.data[i] * c);
        });
    }

    Var add_const(Var a, double c) {
        TensorT<T> out = val(a);
        for (auto& v : out.data) v = static_cast<T>(v + c);
        return unary(std::move(out), a, [this, a](const TensorT<T>& g) { acc_same(a, g); });
    }

    Var tanh_(Var a) {
        TensorT<T> out = val(a);
        for (auto& v : out.data) v = std::tanh(v);
        Var r = unary(std::move(out), a, nullptr);
        nodes_[r.id].backward = [this, a, r](const TensorT<T>& g) {
            if (!wants(a)) return;
            T* ga = gbuf(a);
            const auto& y = val(r);
            for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g.data[i] * (T(1) - y.data[i] * y.data[i]);
        };
        return r;
    }

    Var sigmoid_(Var a) {
        TensorT<T> out = val(a);
        for (auto& v : out.data) v = T(1) / (T(1) + std::exp(-v));
        Var r = unary(std::move(out), a, nullptr);
        nodes_[r.id].backward = [this, a, r](const TensorT<T>& g) {
            if (!wants(a)) return;
            T* ga = gbuf(a);
            const auto& y = val(r);
            for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g.data[i] * y.data[i] * (T(1) - y.data[i]);
        };
        return r;
    }

    // log(1 + e^x), numerically stable
    Var softplus(Var a) {
        TensorT<T> out = val(a);
        for (auto& v : out.data)
            v = v > T(0) ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v));
        return unary(std::move(out), a, [this, a](const TensorT<T>& g) {
            if (!wants(a)) return;
            T* ga = gbuf(a);
            const auto& x = val(a);
            for (int64_t i = 0; i < g.numel(); ++i)
                ga[i] += g.data[i] / (T(1) + std::exp(-x.data[i]));
        });
    }

    Var square(Var a) {
        TensorT<T> out = val(a);
        for (auto& v : out.data) v *= v;
        return unary(std::move(out), a, [this, a](const TensorT<T>& g) {
            if (!wants(a)) return;
            T* ga = gbuf(a);
            const auto& x = val(a);
            for (int64_t i = 0; i < g.numel(); ++i) ga[i] += T(2) * g.data[i] * x.data[i];
        });
    }

    Var exp_(Var a) {
        TensorT<T> out = val(a);
        for (auto& v : out.data) v = std::exp(v);
        Var r = unary(std::move(out), a, nullptr);
        nodes_[r.id].backward = [this, a, r](const TensorT<T>& g) {
            if (!wants(a)) return;
            T* ga = gbuf(a);
            const auto& y = val(r);
            for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g.data[i] * y.data[i];
        };
        return r;
    }

    Var log_(Var a) {
        TensorT<T> out = val(a);
        for (auto& v : out.data) v = std::log(v);
        return unary(std::move(out), a, [this, a](const TensorT<T>& g) {
            if (!wants(a)) return;
            T* ga = gbuf(a);
            const auto& x = val(a);
            for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g.data[i] / x.data[i];
        });
    }

    Var sum(Var a) {
        TensorT<T> out = TensorT<T>::scalar(static_cast<T>(val(a).sum64()));
        return unary(std::move(out), a, [this, a](const TensorT<T>& g) {
            if (!wants(a)) return;
            T* ga = gbuf(a);
            const T gv = g.data[0];
            for (int64_t i = 0; i < val(a).numel(); ++i) ga[i] += gv;
        });
    }

    Var mean(Var a) {
        const int64_t n = val(a).numel();
        TensorT<T> out = TensorT<T>::scalar(static_cast<T>(val(a).sum64() / double(n)));
        return unary(std::move(out), a, [this, a, n](const TensorT<T>& g) {
            if (!wants(a)) return;
            T* ga = gbuf(a);
            const T gv = g.data[0] / static_cast<T>(n);
            for (int64_t i = 0; i < n; ++i) ga[i] += gv;
        });
    }

    // (m,n) -> (1,n), mean over rows
    Var mean_rows(Var a) {
        const auto& A = val(a);
        const int64_t m = A.rows(), n = A.cols();
        TensorT<T> out({1, n});
        for (int64_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (int64_t i = 0; i < m; ++i) acc += double(A.data[i * n + j]);
            out.data[j] = static_cast<T>(acc / double(m));
        }
        return unary(std::move(out), a, [this, a, m, n](const TensorT<T>& g) {
            if (!wants(a)) return;
            T* ga = gbuf(a);
            for (int64_t i = 0; i < m; ++i)
                for (int64_t j = 0; j < n; ++j) ga[i * n + j] += g.data[j] / static_cast<T>(m);
        });
    }

    Var softmax_rows(Var a) {
        const auto& A = val(a);
        const int64_t m = A.rows(), n = A.cols();
        TensorT<T> out = A;
        for (int64_t i = 0; i < m; ++i) {
            T* row = out.data.data() + i * n;
            T mx = row[0];
            for (int64_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
            double z = 0.0;
            for (int64_t j = 0; j < n; ++j) {
                row[j] = std::exp(row[j] - mx);
                z += double(row[j]);
            }
            for (int64_t j = 0; j < n; ++j) row[j] = static_cast<T>(double(row[j]) / z);
        }
        Var r = unary(std::move(out), a, nullptr);
        nodes_[r.id].backward = [this, a, r, m, n](const TensorT<T>& g) {
            if (!wants(a)) return;
            T* ga = gbuf(a);
            const auto& y = val(r);
            for (int64_t i = 0; i < m; ++i) {
                const T* yr = y.data.data() + i * n;
                const T* gr = g.data.data() + i * n;
                double dot = 0.0;
                for (int64_t j = 0; j < n; ++j) dot += double(gr[j]) * double(yr[j]);
                for (int64_t j = 0; j < n; ++j)
                    ga[i * n + j] += yr[j] * (gr[j] - static_cast<T>(dot));
            }
        };
        return r;
    }

    // (m,n) -> (m,1), log sum exp over each row
    Var logsumexp_rows(Var a) {
        const auto& A = val(a);
        const int64_t m = A.rows(), n = A.cols();
        TensorT<T> out({m, 1});
        for (int64_t i = 0; i < m; ++i) {
            const T* row = A.data.data() + i * n;
            T mx = row[0];
            for (int64_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
            double z = 0.0;
            for (int64_t j = 0; j < n; ++j) z += std::exp(double(row[j]) - double(mx));
            out.data[i] = static_cast<T>(double(mx) + std::log(z));
        }
        Var r = unary(std::move(out), a, nullptr);
        nodes_[r.id].backward = [this, a, r, m, n](const TensorT<T>& g) {
            if (!wants(a)) return;
            T* ga = gbuf(a);
            const auto& A = val(a);
            const auto& L = val(r);
            for (int64_t i = 0; i < m; ++i)
                for (int64_t j = 0; j < n; ++j)
                    ga[i * n + j] += g.data[i] * std::exp(A.data[i * n + j] - L.data[i]);
        };
        return r;
    }

    Var trace(Var a) {
        const auto& A = val(a);
        if (A.rows() != A.cols()) throw std::invalid_argument("trace: square matrix required");
        const int64_t n = A.rows();
        double acc = 0.0;
        for (int64_t i = 0; i < n; ++i) acc += double(A.data[i * n + i]);
        return unary(TensorT<T>::scalar(static_cast<T>(acc)), a, [this, a, n](const TensorT<T>& g) {
            if (!wants(a)) return;
            T* ga = gbuf(a);
            for (int64_t i = 0; i < n; ++i) ga[i * n + i] += g.data[0];
        });
    }

    Var concat_rows(Var a, Var b) {
        const auto& A = val(a);
        const auto& B = val(b);
        if (A.cols() != B.cols()) throw std::invalid_argument("concat_rows: width mismatch");
        TensorT<T> out({A.rows() + B.rows(), A.cols()});
        std::copy(A.data.begin(), A.data.end(), out.data.begin());
        std::copy(B.data.begin(), B.data.end(), out.data.begin() + A.data.size());
        return binary(std::move(out), a, b, [this, a, b](const TensorT<T>& g) {
            const size_t na = val(a).data.size();
            if (wants(a)) {
                T* ga = gbuf(a);
                for (size_t i = 0; i < na; ++i) ga[i] += g.data[i];
            }
            if (wants(b)) {
                T* gb = gbuf(b);
                for (size_t i = 0; i < val(b).data.size(); ++i) gb[i] += g.data[na + i];
            }
        });
    }

    // stack k row vectors (each (1,n)) into (k,n)
    Var stack_rows(const std::vector<Var>& rows) {
        if (rows.empty()) throw std::invalid_argument("stack_rows: empty");
        const int64_t n = val(rows[0]).numel();
        TensorT<T> out({static_cast<int64_t>(rows.size()), n});
        for (size_t i = 0; i < rows.size(); ++i) {
            const auto& R = val(rows[i]);
            if (R.numel() != n) throw std::invalid_argument("stack_rows: ragged rows");
            std::copy(R.data.begin(), R.data.end(), out.data.begin() + i * n);
        }
        Var r = push(std::move(out), false, nullptr);
        auto& node = nodes_[r.id];
        node.parents = {};
        for (Var v : rows) {
            node.parents.push_back(v.id);
            if (nodes_[v.id].needs_grad) node.needs_grad = true;
        }
        node.backward = [this, rows, n](const TensorT<T>& g) {
            for (size_t i = 0; i < rows.size(); ++i) {
                if (!wants(rows[i])) continue;
                T* gr = gbuf(rows[i]);
                for (int64_t j = 0; j < n; ++j) gr[j] += g.data[i * n + j];
            }
        };
        return r;
    }

    Var slice_rows(Var a, int64_t r0, int64_t r1) {
        const auto& A = val(a);
        if (r0 < 0 || r1 > A.rows() || r0 >= r1) throw std::invalid_argument("slice_rows: bad range");
        const int64_t n = A.cols();
        TensorT<T> out({r1 - r0, n});
        std::copy(A.data.begin() + r0 * n, A.data.begin() + r1 * n, out.data.begin());
        return unary(std::move(out), a, [this, a, r0, n](const TensorT<T>& g) {
            if (!wants(a)) return;
            T* ga = gbuf(a);
            for (int64_t i = 0; i < g.numel(); ++i) ga[r0 * n + i] += g.data[i];
        });
    }

    Var reshape(Var a, Shape shape) {
        if (shape_numel(shape) != val(a).numel()) throw std::invalid_argument("reshape: numel mismatch");
        TensorT<T> out(std::move(shape), val(a).data);
        return unary(std::move(out), a, [this, a](const TensorT<T>& g) {
            if (!wants(a)) return;
            T* ga = gbuf(a);
            for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g.data[i];
        });
    }

    // rows of a (V,d) table selected by token id; scatter-add on backward
    Var gather_rows(Var table, std::vector<int> ids) {
        const auto& Tb = val(table);
        const int64_t d = Tb.cols();
        TensorT<T> out({static_cast<int64_t>(ids.size()), d});
        for (size_t i = 0; i < ids.size(); ++i) {
            if (ids[i] < 0 || ids[i] >= Tb.rows()) throw std::out_of_range("gather_rows: id out of range");
            std::copy(Tb.data.begin() + ids[i] * d, Tb.data.begin() + (ids[i] + 1) * d, out.data.begin() + i * d);
        }
        return unary(std::move(out), table, [this, table, ids = std::move(ids), d](const TensorT<T>& g) {
            if (!wants(table)) return;
            T* gt = gbuf(table);
            for (size_t i = 0; i < ids.size(); ++i)
                for (int64_t j = 0; j < d; ++j) gt[ids[i] * d + j] += g.data[i * d + j];
        });
    }

    // rows scaled to unit euclidean norm
    Var l2norm_rows(Var a) {
        const auto& A = val(a);
        const int64_t m = A.rows(), n = A.cols();
        TensorT<T> out = A;
        std::vector<double> norms(m);
        for (int64_t i = 0; i < m; ++i) {
            double s = 0.0;
            for (int64_t j = 0; j < n; ++j) s += double(A.data[i * n + j]) * double(A.data[i * n + j]);
            norms[i] = std::sqrt(s) + 1e-12;
            for (int64_t j = 0; j < n; ++j) out.data[i * n + j] = static_cast<T>(double(A.data[i * n + j]) / norms[i]);
        }
        return unary(std::move(out), a, [this, a, m, n, norms = std::move(norms)](const TensorT<T>& g) {
            if (!wants(a)) return;
            T* ga = gbuf(a);
            const auto& A = val(a);
            for (int64_t i = 0; i < m; ++i) {
                double dot = 0.0;
                for (int64_t j = 0; j < n; ++j) dot += double(g.data[i * n + j]) * double(A.data[i * n + j]);
                const double inv = 1.0 / norms[i];
                const double inv3 = inv * inv * inv;
                for (int64_t j = 0; j < n; ++j)
                    ga[i * n + j] += static_cast<T>(double(g.data[i * n + j]) * inv - double(A.data[i * n + j]) * dot * inv3);
            }
        });
    }

    // ---- backward ----
    // Seeds d(out)/d(out) = seed and accumulates into every needs_grad node.
    void backward(Var out, double seed = 1.0) {
        const auto& o = val(out);
        if (o.numel() != 1) throw std::invalid_argument("backward: output is not a scalar");
        grads_.assign(nodes_.size(), TensorT<T>());
        ensure_gbuf(out.id);
        grads_[out.id].data[0] = static_cast<T>(seed);
        for (int32_t i = static_cast<int32_t>(nodes_.size()) - 1; i >= 0; --i) {
            auto& node = nodes_[i];
            if (!node.needs_grad || !node.backward) continue;
            if (grads_[i].data.empty()) continue;  // unreached from output
            for (int32_t p : node.parents)
                if (nodes_[p].needs_grad) ensure_gbuf(p);
            node.backward(grads_[i]);
        }
    }

    bool values_finite() const {
        for (const auto& n : nodes_)
            if (!n.value.all_finite()) return false;
        return true;
    }

private:
    struct Node {
        TensorT<T> value;
        bool needs_grad = false;
        std::vector<int32_t> parents;
        std::function<void(const TensorT<T>&)> backward;
    };

    std::vector<Node> nodes_;
    std::vector<TensorT<T>> grads_;

    int32_t check(Var v) const {
        if (!v.valid() || v.id >= static_cast<int32_t>(nodes_.size()))
            throw std::logic_error("tape: invalid var");
        return v.id;
    }
    const TensorT<T>& val(Var v) const { return nodes_[check(v)].value; }
    bool wants(Var v) const { return nodes_[v.id].needs_grad; }
    void ensure_gbuf(int32_t id) {
        if (grads_[id].data.empty()) grads_[id] = TensorT<T>::zeros(nodes_[id].value.shape);
    }
    T* gbuf(Var v) {
        ensure_gbuf(v.id);
        return grads_[v.id].data.data();
    }
    void acc_same(Var v, const TensorT<T>& g) {
        if (!wants(v)) return;
        T* p = gbuf(v);
        for (int64_t i = 0; i < g.numel(); ++i) p[i] += g.data[i];
    }

    Var push(TensorT<T> value, bool needs_grad, std::function<void(const TensorT<T>&)> bw) {
        Node n;
        n.value = std::move(value);
        n.needs_grad = needs_grad;
        n.backward = std::move(bw);
        nodes_.push_back(std::move(n));
        return Var{static_cast<int32_t>(nodes_.size()) - 1};
    }
    Var unary(TensorT<T> value, Var a, std::function<void(const TensorT<T>&)> bw) {
        Var r = push(std::move(value), nodes_[check(a)].needs_grad, std::move(bw));
        nodes_[r.id].parents = {a.id};
        return r;
    }
    Var binary(TensorT<T> value, Var a, Var b, std::function<void(const TensorT<T>&)> bw) {
        const bool ng = nodes_[check(a)].needs_grad || nodes_[check(b)].needs_grad;
        Var r = push(std::move(value), ng, std::move(bw));
        nodes_[r.id].parents = {a.id, b.id};
        return r;
    }
};

// Lazily binds ParamStore entries to tape leaves. Frozen entries enter the
// graph as constants and therefore receive no gradient.
template <typename T>
class ParamBindings {
public:
    ParamBindings(Tape<T>& tape, const ParamStore<T>& store) : tape_(&tape), store_(&store) {}

    typename Tape<T>::Var operator()(const std::string& name) {
        auto it = bound_.find(name);
        if (it != bound_.end()) return it->second;
        const auto& entry = store_->entry(name);  // throws if unregistered
        auto var = entry.frozen ? tape_->constant(entry.value) : tape_->input(entry.value, true);
        bound_.emplace(name, var);
        return var;
    }

    const std::map<std::string, typename Tape<T>::Var>& bound() const { return bound_; }

private:
    Tape<T>* tape_;
    const ParamStore<T>* store_;
    std::map<std::string, typename Tape<T>::Var> bound_;
};

template <typename T>
using ComputationFn = std::function<typename Tape<T>::Var(Tape<T>&, ParamBindings<T>&)>;

// Gradient of a scalar-valued computation w.r.t. every non-frozen parameter.
// Unused non-frozen parameters get zero gradients; frozen ones get no entry.
template <typename T>
std::map<std::string, TensorT<T>> gradients_of(const ComputationFn<T>& fn, const ParamStore<T>& params) {
    Tape<T> tape;
    ParamBindings<T> bind(tape, params);
    auto out = fn(tape, bind);
    if (tape.value(out).numel() != 1) throw std::invalid_argument("gradients_of: computation output is not a scalar");
    if (!tape.values_finite()) throw std::runtime_error("gradients_of: non-finite intermediate value");
    tape.backward(out);
    std::map<std::string, TensorT<T>> grads;
    for (const auto& name : params.names()) {
        if (params.entry(name).frozen) continue;
        auto it = bind.bound().find(name);
        if (it != bind.bound().end() && tape.has_grad(it->second)) {
            grads[name] = tape.grad(it->second);
            if (!grads[name].all_finite()) throw std::runtime_error("gradients_of: non-finite gradient for " + name);
        } else {
            grads[name] = TensorT<T>::zeros(params.entry(name).value.shape);
        }
    }
    return grads;
}

}  // namespace cxrl::num
