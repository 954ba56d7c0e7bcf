#pragma once

// Define-by-run reverse-mode differentiation over dense double tensors.
//
// Every op evaluates eagerly and appends a node to the Tape; Tape::backward walks the
// nodes in reverse recording order, so each op's inputs always precede it.

#include <cmath>
#include <cstddef>
#include <functional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "grenol/error.hpp"
#include "grenol/tensor.hpp"

namespace grenol {

class Tape;

/// Handle to a value recorded on a Tape.
class Var {
public:
    Var() = default;
    Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

    bool valid() const noexcept { return tape_ != nullptr; }
    Tape& tape() const {
        if (!tape_) throw std::logic_error("variable is not attached to a tape");
        return *tape_;
    }
    std::size_t id() const noexcept { return id_; }
    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }

private:
    Tape* tape_ = nullptr;
    std::size_t id_ = 0;
};

class Tape {
public:
    /// Receives the gradient of the node's output; pushes contributions to its inputs.
    using BackwardFn = std::function<void(const std::vector<double>& out_grad, Tape& tape)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;
    Tape(Tape&&) = delete;
    Tape& operator=(Tape&&) = delete;

    Var constant(Tensor value) {
        nodes_.push_back(Node{std::move(value), {}, nullptr, nullptr, false, "constant"});
        return Var(this, nodes_.size() - 1);
    }

    /// Records `param` by value; on backward its gradient accumulates into `param.grad()`
    /// when the tensor requires grad. `param` must outlive the backward pass.
    Var parameter(Tensor& param) {
        const bool track = param.requires_grad();
        nodes_.push_back(Node{Tensor(param.shape(), param.data()), {}, nullptr, track ? &param : nullptr, track,
                              "parameter"});
        return Var(this, nodes_.size() - 1);
    }

    Var record(std::string_view op, Tensor value, const std::vector<Var>& inputs, BackwardFn backward) {
        bool needs = false;
        std::vector<std::size_t> ids;
        ids.reserve(inputs.size());
        for (const Var& in : inputs) {
            if (&in.tape() != this) throw std::logic_error(std::string(op) + ": input recorded on another tape");
            ids.push_back(in.id());
            needs = needs || nodes_[in.id()].needs_grad;
        }
        nodes_.push_back(Node{std::move(value), std::move(ids), needs ? std::move(backward) : nullptr, nullptr,
                              needs, op});
        return Var(this, nodes_.size() - 1);
    }

    const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
    bool needs_grad(std::size_t id) const { return nodes_.at(id).needs_grad; }
    std::size_t size() const noexcept { return nodes_.size(); }

    /// Number of recorded nodes that are operations (not constants or parameters).
    std::size_t op_count() const {
        std::size_t n = 0;
        for (const auto& node : nodes_) n += !node.inputs.empty();
        return n;
    }

    /// Pending gradient buffer of node `id`, zero-initialised on first use. Only valid
    /// inside backward rules.
    std::vector<double>& grad_slot(std::size_t id) {
        auto& slot = grads_[id];
        if (slot.empty()) slot.assign(nodes_[id].value.size(), 0.0);
        return slot;
    }

    /// Reverse sweep from a scalar output. Returns the number of operations visited.
    std::size_t backward(const Var& output) {
        if (!output.valid()) throw std::logic_error("backward called before any forward evaluation");
        if (&output.tape() != this || output.id() >= nodes_.size()) {
            throw std::logic_error("backward output was not produced by this tape");
        }
        const Tensor& out = nodes_[output.id()].value;
        if (out.size() != 1) {
            throw ShapeError("backward requires a scalar output, got shape " + shape_string(out.shape()));
        }
        grads_.assign(nodes_.size(), {});
        grads_[output.id()] = {1.0};
        std::size_t visited = 0;
        for (std::size_t id = output.id() + 1; id-- > 0;) {
            Node& node = nodes_[id];
            if (!node.needs_grad || grads_[id].empty()) continue;
            if (node.backward) {
                node.backward(grads_[id], *this);
                ++visited;
            }
            if (node.param) {
                auto& acc = node.param->grad();
                for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += grads_[id][i];
            }
        }
        grads_.clear();
        return visited;
    }

private:
    struct Node {
        Tensor value;
        std::vector<std::size_t> inputs;
        BackwardFn backward;
        Tensor* param;
        bool needs_grad;
        std::string_view op;
    };

    std::vector<Node> nodes_;
    std::vector<std::vector<double>> grads_;
};

inline const Tensor& Var::value() const { return tape().value(id_); }

namespace kernel {

// C += A(r×n) · B(n×c)
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t r, std::size_t n, std::size_t cols) {
    for (std::size_t i = 0; i < r; ++i) {
        double* ci = c + i * cols;
        for (std::size_t k = 0; k < n; ++k) {
            const double aik = a[i * n + k];
            if (aik == 0.0) continue;
            const double* bk = b + k * cols;
            for (std::size_t j = 0; j < cols; ++j) ci[j] += aik * bk[j];
        }
    }
}

// C(r×n) += G(r×c) · B(n×c)ᵀ
inline void gemm_nt(const double* g, const double* b, double* c, std::size_t r, std::size_t n, std::size_t cols) {
    for (std::size_t i = 0; i < r; ++i) {
        const double* gi = g + i * cols;
        for (std::size_t k = 0; k < n; ++k) {
            const double* bk = b + k * cols;
            double acc = 0.0;
            for (std::size_t j = 0; j < cols; ++j) acc += gi[j] * bk[j];
            c[i * n + k] += acc;
        }
    }
}

// C(n×c) += A(r×n)ᵀ · G(r×c)
inline void gemm_tn(const double* a, const double* g, double* c, std::size_t r, std::size_t n, std::size_t cols) {
    for (std::size_t i = 0; i < r; ++i) {
        const double* gi = g + i * cols;
        for (std::size_t k = 0; k < n; ++k) {
            const double aik = a[i * n + k];
            if (aik == 0.0) continue;
            double* ck = c + k * cols;
            for (std::size_t j = 0; j < cols; ++j) ck[j] += aik * gi[j];
        }
    }
}

} // namespace kernel

namespace detail {

inline void require_matrix(std::string_view op, const Tensor& t) {
    if (t.rank() != 2) {
        throw ShapeError(std::string(op) + ": expected a matrix, got shape " + shape_string(t.shape()));
    }
}

inline void require_same_shape(std::string_view op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
    }
}

template <typename Fwd, typename Deriv>
Var unary(std::string_view op, const Var& x, Fwd fwd, Deriv deriv) {
    const Tensor& xv = x.value();
    Tensor out(xv.shape());
    for (std::size_t i = 0; i < xv.size(); ++i) out[i] = fwd(xv[i]);
    const std::size_t xid = x.id();
    const std::size_t oid = x.tape().size();
    return x.tape().record(op, std::move(out), {x}, [xid, oid, deriv](const std::vector<double>& g, Tape& tape) {
        if (!tape.needs_grad(xid)) return;
        const Tensor& xv = tape.value(xid);
        const Tensor& ov = tape.value(oid);
        auto& gx = tape.grad_slot(xid);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * deriv(xv[i], ov[i]);
    });
}

} // namespace detail

inline Var matmul(const Var& a, const Var& b) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    detail::require_matrix("matmul", av);
    detail::require_matrix("matmul", bv);
    if (av.cols() != bv.rows()) {
        throw ShapeError("matmul: inner dimensions differ, " + shape_string(av.shape()) + " x " +
                         shape_string(bv.shape()));
    }
    const std::size_t r = av.rows(), n = av.cols(), c = bv.cols();
    Tensor out = Tensor::matrix(r, c);
    kernel::gemm_nn(av.data().data(), bv.data().data(), out.data().data(), r, n, c);
    const std::size_t aid = a.id(), bid = b.id();
    return a.tape().record("matmul", std::move(out), {a, b},
                           [aid, bid, r, n, c](const std::vector<double>& g, Tape& tape) {
                               if (tape.needs_grad(aid)) {
                                   kernel::gemm_nt(g.data(), tape.value(bid).data().data(),
                                                   tape.grad_slot(aid).data(), r, n, c);
                               }
                               if (tape.needs_grad(bid)) {
                                   kernel::gemm_tn(tape.value(aid).data().data(), g.data(),
                                                   tape.grad_slot(bid).data(), r, n, c);
                               }
                           });
}

inline Var add(const Var& a, const Var& b) {
    detail::require_same_shape("add", a.value(), b.value());
    Tensor out(a.value().shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
    const std::size_t aid = a.id(), bid = b.id();
    return a.tape().record("add", std::move(out), {a, b}, [aid, bid](const std::vector<double>& g, Tape& tape) {
        for (std::size_t id : {aid, bid}) {
            if (!tape.needs_grad(id)) continue;
            auto& slot = tape.grad_slot(id);
            for (std::size_t i = 0; i < g.size(); ++i) slot[i] += g[i];
        }
    });
}

inline Var sub(const Var& a, const Var& b) {
    detail::require_same_shape("sub", a.value(), b.value());
    Tensor out(a.value().shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] - b.value()[i];
    const std::size_t aid = a.id(), bid = b.id();
    return a.tape().record("sub", std::move(out), {a, b}, [aid, bid](const std::vector<double>& g, Tape& tape) {
        if (tape.needs_grad(aid)) {
            auto& slot = tape.grad_slot(aid);
            for (std::size_t i = 0; i < g.size(); ++i) slot[i] += g[i];
        }
        if (tape.needs_grad(bid)) {
            auto& slot = tape.grad_slot(bid);
            for (std::size_t i = 0; i < g.size(); ++i) slot[i] -= g[i];
        }
    });
}

inline Var mul(const Var& a, const Var& b) {
    detail::require_same_shape("mul", a.value(), b.value());
    Tensor out(a.value().shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
    const std::size_t aid = a.id(), bid = b.id();
    return a.tape().record("mul", std::move(out), {a, b}, [aid, bid](const std::vector<double>& g, Tape& tape) {
        if (tape.needs_grad(aid)) {
            auto& slot = tape.grad_slot(aid);
            const Tensor& bv = tape.value(bid);
            for (std::size_t i = 0; i < g.size(); ++i) slot[i] += g[i] * bv[i];
        }
        if (tape.needs_grad(bid)) {
            auto& slot = tape.grad_slot(bid);
            const Tensor& av = tape.value(aid);
            for (std::size_t i = 0; i < g.size(); ++i) slot[i] += g[i] * av[i];
        }
    });
}

inline Var scale(const Var& x, double s) {
    return detail::unary("scale", x, [s](double v) { return s * v; }, [s](double, double) { return s; });
}

inline Var relu(const Var& x) {
    return detail::unary("relu", x, [](double v) { return v > 0.0 ? v : 0.0; },
                         [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

inline Var square(const Var& x) {
    return detail::unary("square", x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

inline Var sqrt(const Var& x) {
    return detail::unary("sqrt", x, [](double v) { return std::sqrt(v); },
                         [](double, double out) { return 0.5 / out; });
}

inline Var sin(const Var& x) {
    return detail::unary("sin", x, [](double v) { return std::sin(v); },
                         [](double v, double) { return std::cos(v); });
}

inline Var cos(const Var& x) {
    return detail::unary("cos", x, [](double v) { return std::cos(v); },
                         [](double v, double) { return -std::sin(v); });
}

/// Sum of all elements, as a rank-0 scalar.
inline Var sum(const Var& x) {
    double total = 0.0;
    for (double v : x.value().values()) total += v;
    const std::size_t xid = x.id();
    return x.tape().record("sum", Tensor(Shape{}, std::vector<double>{total}), {x},
                           [xid](const std::vector<double>& g, Tape& tape) {
                               auto& slot = tape.grad_slot(xid);
                               for (double& s : slot) s += g[0];
                           });
}

inline Var mean(const Var& x) {
    const std::size_t n = x.value().size();
    if (n == 0) throw ShapeError("mean: empty tensor");
    return scale(sum(x), 1.0 / static_cast<double>(n));
}

/// Adds a 1×c row to every row of an r×c matrix.
inline Var add_row(const Var& x, const Var& row) {
    const Tensor& xv = x.value();
    const Tensor& rv = row.value();
    detail::require_matrix("add_row", xv);
    if (rv.size() != xv.cols()) {
        throw ShapeError("add_row: row " + shape_string(rv.shape()) + " does not broadcast over " +
                         shape_string(xv.shape()));
    }
    Tensor out(xv.shape());
    const std::size_t r = xv.rows(), c = xv.cols();
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] = xv[i * c + j] + rv[j];
    const std::size_t xid = x.id(), rid = row.id();
    return x.tape().record("add_row", std::move(out), {x, row},
                           [xid, rid, r, c](const std::vector<double>& g, Tape& tape) {
                               if (tape.needs_grad(xid)) {
                                   auto& slot = tape.grad_slot(xid);
                                   for (std::size_t i = 0; i < g.size(); ++i) slot[i] += g[i];
                               }
                               if (tape.needs_grad(rid)) {
                                   auto& slot = tape.grad_slot(rid);
                                   for (std::size_t i = 0; i < r; ++i)
                                       for (std::size_t j = 0; j < c; ++j) slot[j] += g[i * c + j];
                               }
                           });
}

/// Multiplies every row of an r×c matrix elementwise by a 1×c row.
inline Var mul_row(const Var& x, const Var& row) {
    const Tensor& xv = x.value();
    const Tensor& rv = row.value();
    detail::require_matrix("mul_row", xv);
    if (rv.size() != xv.cols()) {
        throw ShapeError("mul_row: row " + shape_string(rv.shape()) + " does not broadcast over " +
                         shape_string(xv.shape()));
    }
    Tensor out(xv.shape());
    const std::size_t r = xv.rows(), c = xv.cols();
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] = xv[i * c + j] * rv[j];
    const std::size_t xid = x.id(), rid = row.id();
    return x.tape().record("mul_row", std::move(out), {x, row},
                           [xid, rid, r, c](const std::vector<double>& g, Tape& tape) {
                               const Tensor& xv = tape.value(xid);
                               const Tensor& rv = tape.value(rid);
                               if (tape.needs_grad(xid)) {
                                   auto& slot = tape.grad_slot(xid);
                                   for (std::size_t i = 0; i < r; ++i)
                                       for (std::size_t j = 0; j < c; ++j) slot[i * c + j] += g[i * c + j] * rv[j];
                               }
                               if (tape.needs_grad(rid)) {
                                   auto& slot = tape.grad_slot(rid);
                                   for (std::size_t i = 0; i < r; ++i)
                                       for (std::size_t j = 0; j < c; ++j) slot[j] += g[i * c + j] * xv[i * c + j];
                               }
                           });
}

inline Var reshape(const Var& x, Shape shape) {
    Tensor out(shape, std::vector<double>(x.value().data()));
    const std::size_t xid = x.id();
    return x.tape().record("reshape", std::move(out), {x}, [xid](const std::vector<double>& g, Tape& tape) {
        auto& slot = tape.grad_slot(xid);
        for (std::size_t i = 0; i < g.size(); ++i) slot[i] += g[i];
    });
}

/// Block-diagonal product: for each b, rows [b·n, (b+1)·n) of the result are
/// blocks[b] (n×n) times the matching rows of x ((B·n)×d). The blocks are treated as
/// constants; differentiating through them is not supported.
inline Var block_matmul(const Var& blocks, const Var& x) {
    const Tensor& bv = blocks.value();
    const Tensor& xv = x.value();
    detail::require_matrix("block_matmul", xv);
    if (bv.rank() != 3 || bv.shape()[1] != bv.shape()[2] || bv.shape()[0] * bv.shape()[1] != xv.rows()) {
        throw ShapeError("block_matmul: blocks " + shape_string(bv.shape()) + " incompatible with " +
                         shape_string(xv.shape()));
    }
    if (blocks.tape().needs_grad(blocks.id())) {
        throw std::logic_error("block_matmul: gradients with respect to the blocks are not supported");
    }
    const std::size_t nb = bv.shape()[0], n = bv.shape()[1], d = xv.cols();
    Tensor out = Tensor::matrix(nb * n, d);
    for (std::size_t b = 0; b < nb; ++b) {
        kernel::gemm_nn(bv.data().data() + b * n * n, xv.data().data() + b * n * d, out.data().data() + b * n * d,
                        n, n, d);
    }
    const std::size_t bid = blocks.id(), xid = x.id();
    return x.tape().record("block_matmul", std::move(out), {blocks, x},
                           [bid, xid, nb, n, d](const std::vector<double>& g, Tape& tape) {
                               const Tensor& bv = tape.value(bid);
                               auto& slot = tape.grad_slot(xid);
                               for (std::size_t b = 0; b < nb; ++b) {
                                   kernel::gemm_tn(bv.data().data() + b * n * n, g.data() + b * n * d,
                                                   slot.data() + b * n * d, n, n, d);
                               }
                           });
}

} // namespace grenol
