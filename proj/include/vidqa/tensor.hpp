#pragma once

// Dense f64 tensors (rank 1 or 2, row-major) with reverse-mode autodiff on an
// explicit tape.  Ops are free functions that record backward rules onto the
// thread-local active tape; with no active tape they are plain math.
//
// Conventions used throughout the library:
//   * embedding sequences are stored feature-major, shape D x K
//     (one column per position), so linear maps compose as matmul(W, Z);
//   * tensors are immutable after construction except through an optimizer
//     update or test machinery that deliberately pokes data();
//   * slices and gathers copy; there are no views.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "vidqa/error.hpp"

namespace vidqa {

using Rng = std::mt19937_64;

using Shape = std::vector<int>;

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << ']';
    return os.str();
}

namespace detail {

struct TensorNode {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until first accumulation
    bool requires_grad = false;
};

inline size_t numel(const Shape& s) {
    size_t n = 1;
    for (int e : s) n *= static_cast<size_t>(e);
    return n;
}

inline void ensure_grad(TensorNode* n) {
    if (n->grad.empty()) n->grad.assign(n->data.size(), 0.0);
}

}  // namespace detail

class Tensor {
  public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return filled(std::move(shape), 0.0, requires_grad);
    }

    static Tensor filled(Shape shape, double value, bool requires_grad = false) {
        check_shape(shape);
        auto n = std::make_shared<detail::TensorNode>();
        n->shape = std::move(shape);
        n->data.assign(detail::numel(n->shape), value);
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }

    static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false) {
        check_shape(shape);
        if (data.size() != detail::numel(shape))
            throw ShapeError("from_data: " + std::to_string(data.size()) +
                             " values do not fill shape " + shape_str(shape));
        auto n = std::make_shared<detail::TensorNode>();
        n->shape = std::move(shape);
        n->data = std::move(data);
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }

    static Tensor scalar(double v, bool requires_grad = false) {
        return from_data({1}, {v}, requires_grad);
    }

    // Gaussian init, the default for fresh parameters.
    static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0, bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        std::normal_distribution<double> d(0.0, stddev);
        for (double& v : t.node_->data) v = d(rng);
        return t;
    }

    bool empty() const { return node_ == nullptr; }

    const Shape& shape() const { return must()->shape; }
    int rank() const { return static_cast<int>(must()->shape.size()); }
    // Row/column accessors treat rank-1 tensors as column vectors.
    int rows() const { return must()->shape[0]; }
    int cols() const { return rank() < 2 ? 1 : must()->shape[1]; }
    size_t size() const { return node_ ? node_->data.size() : 0; }

    double* data() { return must()->data.data(); }
    const double* data() const { return must()->data.data(); }
    std::vector<double>& vec() { return must()->data; }
    const std::vector<double>& vec() const { return must()->data; }

    double at(int r, int c) const { return must()->data[static_cast<size_t>(r) * cols() + c]; }
    double& at(int r, int c) { return must()->data[static_cast<size_t>(r) * cols() + c]; }
    double item() const {
        if (size() != 1) throw ShapeError("item: tensor " + shape_str(shape()) + " is not scalar");
        return must()->data[0];
    }

    bool requires_grad() const { return node_ && node_->requires_grad; }
    bool has_grad() const { return node_ && !node_->grad.empty(); }
    const std::vector<double>& grad() const {
        if (!has_grad()) throw StateError("grad: no gradient has been accumulated");
        return node_->grad;
    }
    void zero_grad() {
        if (node_) node_->grad.clear();
    }

    bool all_finite() const {
        if (!node_) return true;
        for (double v : node_->data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    std::shared_ptr<detail::TensorNode> node() const { return node_; }

    // Identity of the underlying storage, not value equality.
    bool same_storage(const Tensor& o) const { return node_ == o.node_; }

  private:
    explicit Tensor(std::shared_ptr<detail::TensorNode> n) : node_(std::move(n)) {}

    static void check_shape(const Shape& s) {
        if (s.empty() || s.size() > 2)
            throw ShapeError("tensor rank must be 1 or 2, got " + shape_str(s));
        for (int e : s)
            if (e < 0) throw ShapeError("negative extent in shape " + shape_str(s));
    }

    detail::TensorNode* must() const {
        if (!node_) throw StateError("operation on empty tensor");
        return node_.get();
    }

    std::shared_ptr<detail::TensorNode> node_;
};

// ---------------------------------------------------------------------------
// Autodiff tape

// Ordered record of executed ops.  backward() replays the rules in reverse
// execution order (a valid reverse topological order), accumulating into each
// participating tensor's grad buffer, which is allocated exactly once per
// pass.  One tape per training thread; clear() between steps.
class Tape {
  public:
    void record(std::function<void()> backward_rule) {
        entries_.push_back(std::move(backward_rule));
    }

    size_t size() const { return entries_.size(); }

    void clear() { entries_.clear(); }

    void backward(const Tensor& loss) {
        if (loss.size() != 1)
            throw ShapeError("backward: loss has shape " + shape_str(loss.shape()) +
                             ", expected a scalar");
        if (!loss.requires_grad())
            throw StateError("backward: loss does not require grad");
        if (!std::isfinite(loss.item()))
            throw NumericError("backward: loss is not finite");
        detail::ensure_grad(loss.node().get());
        loss.node()->grad[0] = 1.0;
        for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
    }

  private:
    std::vector<std::function<void()>> entries_;
};

namespace detail {
inline Tape*& tape_slot() {
    thread_local Tape* t = nullptr;
    return t;
}
}  // namespace detail

inline Tape* active_tape() { return detail::tape_slot(); }

// RAII activation of a tape on the current thread.
class TapeScope {
  public:
    explicit TapeScope(Tape& t) : prev_(detail::tape_slot()) { detail::tape_slot() = &t; }
    ~TapeScope() { detail::tape_slot() = prev_; }
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

  private:
    Tape* prev_;
};

namespace detail {

using NodePtr = std::shared_ptr<TensorNode>;

// Shared entry point for all op implementations: run `rule` during backward
// unless the output never received a gradient (off the path to the loss).
inline void record_if_tracked(const Tensor& out, std::function<void(TensorNode*)> rule) {
    Tape* t = active_tape();
    if (!t || !out.requires_grad()) return;
    t->record([on = out.node(), rule = std::move(rule)] {
        if (on->grad.empty()) return;  // output not on the loss path
        rule(on.get());
    });
}

inline bool any_grad(std::initializer_list<const Tensor*> ts) {
    for (const Tensor* t : ts)
        if (t->requires_grad()) return true;
    return false;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and structural ops

inline Tensor add(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw ShapeError("add: shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    Tensor out = Tensor::zeros(a.shape(), detail::any_grad({&a, &b}));
    for (size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] + b.data()[i];
    detail::record_if_tracked(out, [an = a.node(), bn = b.node()](detail::TensorNode* on) {
        if (an->requires_grad) {
            detail::ensure_grad(an.get());
            for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
        }
        if (bn->requires_grad) {
            detail::ensure_grad(bn.get());
            for (size_t i = 0; i < on->grad.size(); ++i) bn->grad[i] += on->grad[i];
        }
    });
    return out;
}

// Hadamard product.
inline Tensor mul(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw ShapeError("mul: shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    Tensor out = Tensor::zeros(a.shape(), detail::any_grad({&a, &b}));
    for (size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] * b.data()[i];
    detail::record_if_tracked(out, [an = a.node(), bn = b.node()](detail::TensorNode* on) {
        if (an->requires_grad) {
            detail::ensure_grad(an.get());
            for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i] * bn->data[i];
        }
        if (bn->requires_grad) {
            detail::ensure_grad(bn.get());
            for (size_t i = 0; i < on->grad.size(); ++i) bn->grad[i] += on->grad[i] * an->data[i];
        }
    });
    return out;
}

inline Tensor scale(const Tensor& a, double c) {
    Tensor out = Tensor::zeros(a.shape(), a.requires_grad());
    for (size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] * c;
    detail::record_if_tracked(out, [an = a.node(), c](detail::TensorNode* on) {
        if (!an->requires_grad) return;
        detail::ensure_grad(an.get());
        for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i] * c;
    });
    return out;
}

// Adds a length-R bias vector to every column of an R x C matrix.  This is
// the only broadcast in the library.
inline Tensor add_bias(const Tensor& x, const Tensor& b) {
    if (x.rank() != 2 || b.rank() != 1 || b.rows() != x.rows())
        throw ShapeError("add_bias: " + shape_str(x.shape()) + " with bias " +
                         shape_str(b.shape()));
    const int r = x.rows(), c = x.cols();
    Tensor out = Tensor::zeros(x.shape(), detail::any_grad({&x, &b}));
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) out.at(i, j) = x.at(i, j) + b.data()[i];
    detail::record_if_tracked(out, [xn = x.node(), bn = b.node(), r, c](detail::TensorNode* on) {
        if (xn->requires_grad) {
            detail::ensure_grad(xn.get());
            for (size_t i = 0; i < on->grad.size(); ++i) xn->grad[i] += on->grad[i];
        }
        if (bn->requires_grad) {
            detail::ensure_grad(bn.get());
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < c; ++j) bn->grad[i] += on->grad[static_cast<size_t>(i) * c + j];
        }
    });
    return out;
}

inline Tensor relu(const Tensor& x) {
    Tensor out = Tensor::zeros(x.shape(), x.requires_grad());
    for (size_t i = 0; i < x.size(); ++i) out.data()[i] = x.data()[i] > 0.0 ? x.data()[i] : 0.0;
    detail::record_if_tracked(out, [xn = x.node()](detail::TensorNode* on) {
        if (!xn->requires_grad) return;
        detail::ensure_grad(xn.get());
        for (size_t i = 0; i < on->grad.size(); ++i)
            if (xn->data[i] > 0.0) xn->grad[i] += on->grad[i];
    });
    return out;
}

// Exact (erf-based) gaussian error linear unit.
inline Tensor gelu(const Tensor& x) {
    static const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
    static const double inv_sqrt2pi = 1.0 / std::sqrt(8.0 * std::atan(1.0));
    Tensor out = Tensor::zeros(x.shape(), x.requires_grad());
    for (size_t i = 0; i < x.size(); ++i) {
        const double v = x.data()[i];
        out.data()[i] = 0.5 * v * (1.0 + std::erf(v * inv_sqrt2));
    }
    detail::record_if_tracked(out, [xn = x.node()](detail::TensorNode* on) {
        if (!xn->requires_grad) return;
        detail::ensure_grad(xn.get());
        for (size_t i = 0; i < on->grad.size(); ++i) {
            const double v = xn->data[i];
            const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
            const double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
            xn->grad[i] += on->grad[i] * (cdf + v * pdf);
        }
    });
    return out;
}

// Inverted dropout: kept entries are scaled by 1/(1-p).  p == 0 is an exact
// identity (returns the input tensor itself).
inline Tensor dropout(const Tensor& x, double p, Rng& rng) {
    if (p < 0.0 || p >= 1.0)
        throw ConfigError("dropout: probability " + std::to_string(p) + " outside [0, 1)");
    if (p == 0.0) return x;
    auto mask = std::make_shared<std::vector<double>>(x.size());
    std::bernoulli_distribution keep(1.0 - p);
    const double s = 1.0 / (1.0 - p);
    for (double& m : *mask) m = keep(rng) ? s : 0.0;
    Tensor out = Tensor::zeros(x.shape(), x.requires_grad());
    for (size_t i = 0; i < x.size(); ++i) out.data()[i] = x.data()[i] * (*mask)[i];
    detail::record_if_tracked(out, [xn = x.node(), mask](detail::TensorNode* on) {
        if (!xn->requires_grad) return;
        detail::ensure_grad(xn.get());
        for (size_t i = 0; i < on->grad.size(); ++i) xn->grad[i] += on->grad[i] * (*mask)[i];
    });
    return out;
}

inline Tensor sum(const Tensor& x) {
    Tensor out = Tensor::zeros({1}, x.requires_grad());
    out.data()[0] = std::accumulate(x.data(), x.data() + x.size(), 0.0);
    detail::record_if_tracked(out, [xn = x.node()](detail::TensorNode* on) {
        if (!xn->requires_grad) return;
        detail::ensure_grad(xn.get());
        for (double& g : xn->grad) g += on->grad[0];
    });
    return out;
}

inline Tensor reshape(const Tensor& x, Shape shape) {
    if (detail::numel(shape) != x.size())
        throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape) +
                         " changes element count");
    Tensor out = Tensor::from_data(std::move(shape), x.vec(), x.requires_grad());
    detail::record_if_tracked(out, [xn = x.node()](detail::TensorNode* on) {
        if (!xn->requires_grad) return;
        detail::ensure_grad(xn.get());
        for (size_t i = 0; i < on->grad.size(); ++i) xn->grad[i] += on->grad[i];
    });
    return out;
}

inline Tensor transpose(const Tensor& x) {
    if (x.rank() != 2) throw ShapeError("transpose: rank-2 tensor required");
    const int r = x.rows(), c = x.cols();
    Tensor out = Tensor::zeros({c, r}, x.requires_grad());
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) out.at(j, i) = x.at(i, j);
    detail::record_if_tracked(out, [xn = x.node(), r, c](detail::TensorNode* on) {
        if (!xn->requires_grad) return;
        detail::ensure_grad(xn.get());
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j)
                xn->grad[static_cast<size_t>(i) * c + j] += on->grad[static_cast<size_t>(j) * r + i];
    });
    return out;
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows())
        throw ShapeError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    const int m = a.rows(), k = a.cols(), n = b.cols();
    Tensor out = Tensor::zeros({m, n}, detail::any_grad({&a, &b}));
    const double* ad = a.data();
    const double* bd = b.data();
    double* od = out.data();
    for (int i = 0; i < m; ++i)
        for (int p = 0; p < k; ++p) {
            const double av = ad[static_cast<size_t>(i) * k + p];
            if (av == 0.0) continue;
            const double* brow = bd + static_cast<size_t>(p) * n;
            double* orow = od + static_cast<size_t>(i) * n;
            for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    detail::record_if_tracked(out, [an = a.node(), bn = b.node(), m, k, n](detail::TensorNode* on) {
        // dA += dC * B^T ; dB += A^T * dC
        if (an->requires_grad) {
            detail::ensure_grad(an.get());
            for (int i = 0; i < m; ++i)
                for (int p = 0; p < k; ++p) {
                    double s = 0.0;
                    const double* grow = on->grad.data() + static_cast<size_t>(i) * n;
                    const double* brow = bn->data.data() + static_cast<size_t>(p) * n;
                    for (int j = 0; j < n; ++j) s += grow[j] * brow[j];
                    an->grad[static_cast<size_t>(i) * k + p] += s;
                }
        }
        if (bn->requires_grad) {
            detail::ensure_grad(bn.get());
            for (int p = 0; p < k; ++p)
                for (int i = 0; i < m; ++i) {
                    const double av = an->data[static_cast<size_t>(i) * k + p];
                    if (av == 0.0) continue;
                    const double* grow = on->grad.data() + static_cast<size_t>(i) * n;
                    double* brow = bn->grad.data() + static_cast<size_t>(p) * n;
                    for (int j = 0; j < n; ++j) brow[j] += av * grow[j];
                }
        }
    });
    return out;
}

// Concatenates rank-2 tensors along `axis`.  Empty tensors are skipped, so a
// zero-prompt prepend degenerates to the identity.
inline Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (axis != 0 && axis != 1) throw ShapeError("concat: axis must be 0 or 1");
    std::vector<const Tensor*> live;
    for (const Tensor& t : parts)
        if (!t.empty()) live.push_back(&t);
    if (live.empty()) throw InputError("concat: no non-empty parts");
    if (live.size() == 1) return *live[0];
    const int fixed = axis == 0 ? live[0]->cols() : live[0]->rows();
    int total = 0;
    bool rg = false;
    for (const Tensor* t : live) {
        if (t->rank() != 2) throw ShapeError("concat: rank-2 tensors required");
        const int f = axis == 0 ? t->cols() : t->rows();
        if (f != fixed)
            throw ShapeError("concat: part " + shape_str(t->shape()) +
                             " incompatible with first part " + shape_str(live[0]->shape()));
        total += axis == 0 ? t->rows() : t->cols();
        rg = rg || t->requires_grad();
    }
    const int rows = axis == 0 ? total : fixed;
    const int cols = axis == 0 ? fixed : total;
    Tensor out = Tensor::zeros({rows, cols}, rg);
    int off = 0;
    for (const Tensor* t : live) {
        if (axis == 0) {
            std::memcpy(out.data() + static_cast<size_t>(off) * cols, t->data(),
                        t->size() * sizeof(double));
            off += t->rows();
        } else {
            for (int i = 0; i < rows; ++i)
                std::memcpy(out.data() + static_cast<size_t>(i) * cols + off,
                            t->data() + static_cast<size_t>(i) * t->cols(),
                            static_cast<size_t>(t->cols()) * sizeof(double));
            off += t->cols();
        }
    }
    std::vector<detail::NodePtr> nodes;
    for (const Tensor* t : live) nodes.push_back(t->node());
    detail::record_if_tracked(out, [nodes, axis, rows, cols](detail::TensorNode* on) {
        int off = 0;
        for (const detail::NodePtr& pn : nodes) {
            const int pr = pn->shape[0];
            const int pc = pn->shape.size() > 1 ? pn->shape[1] : 1;
            if (pn->requires_grad) {
                detail::ensure_grad(pn.get());
                if (axis == 0) {
                    for (size_t i = 0; i < pn->data.size(); ++i)
                        pn->grad[i] += on->grad[static_cast<size_t>(off) * cols + i];
                } else {
                    for (int i = 0; i < rows; ++i)
                        for (int j = 0; j < pc; ++j)
                            pn->grad[static_cast<size_t>(i) * pc + j] +=
                                on->grad[static_cast<size_t>(i) * cols + off + j];
                }
            }
            off += axis == 0 ? pr : pc;
        }
    });
    return out;
}

// Copying slice of rows [r0, r1) / cols [c0, c1).
inline Tensor slice(const Tensor& x, int axis, int from, int to) {
    if (x.rank() != 2) throw ShapeError("slice: rank-2 tensor required");
    if (axis != 0 && axis != 1) throw ShapeError("slice: axis must be 0 or 1");
    const int extent = axis == 0 ? x.rows() : x.cols();
    if (from < 0 || to > extent || from >= to)
        throw ShapeError("slice: range [" + std::to_string(from) + ", " + std::to_string(to) +
                         ") invalid for extent " + std::to_string(extent));
    const int r = axis == 0 ? to - from : x.rows();
    const int c = axis == 0 ? x.cols() : to - from;
    Tensor out = Tensor::zeros({r, c}, x.requires_grad());
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j)
            out.at(i, j) = axis == 0 ? x.at(from + i, j) : x.at(i, from + j);
    detail::record_if_tracked(out, [xn = x.node(), axis, from, r, c](detail::TensorNode* on) {
        if (!xn->requires_grad) return;
        detail::ensure_grad(xn.get());
        const int xc = xn->shape[1];
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j) {
                const size_t src = static_cast<size_t>(i) * c + j;
                const size_t dst = axis == 0 ? static_cast<size_t>(from + i) * xc + j
                                             : static_cast<size_t>(i) * xc + from + j;
                xn->grad[dst] += on->grad[src];
            }
    });
    return out;
}

// Gathers whole columns (axis 1) or rows (axis 0) by index; duplicates allowed.
inline Tensor gather(const Tensor& x, int axis, const std::vector<int>& idx) {
    if (x.rank() != 2) throw ShapeError("gather: rank-2 tensor required");
    if (axis != 0 && axis != 1) throw ShapeError("gather: axis must be 0 or 1");
    if (idx.empty()) throw InputError("gather: empty index list");
    const int extent = axis == 0 ? x.rows() : x.cols();
    for (int i : idx)
        if (i < 0 || i >= extent)
            throw InputError("gather: index " + std::to_string(i) + " out of range [0, " +
                             std::to_string(extent) + ")");
    const int n = static_cast<int>(idx.size());
    const int r = axis == 0 ? n : x.rows();
    const int c = axis == 0 ? x.cols() : n;
    Tensor out = Tensor::zeros({r, c}, x.requires_grad());
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j)
            out.at(i, j) = axis == 0 ? x.at(idx[i], j) : x.at(i, idx[j]);
    detail::record_if_tracked(out, [xn = x.node(), axis, idx, r, c](detail::TensorNode* on) {
        if (!xn->requires_grad) return;
        detail::ensure_grad(xn.get());
        const int xc = xn->shape[1];
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j) {
                const size_t src = static_cast<size_t>(i) * c + j;
                const size_t dst = axis == 0 ? static_cast<size_t>(idx[i]) * xc + j
                                             : static_cast<size_t>(i) * xc + idx[j];
                xn->grad[dst] += on->grad[src];
            }
    });
    return out;
}

// ---------------------------------------------------------------------------
// Normalization / softmax / loss

namespace detail {

// Iterates the vectors of a rank<=2 tensor along `axis` as (base, stride, len).
struct AxisView {
    int count, len;
    size_t base_stride, stride;
};

inline AxisView axis_view(const Tensor& x, int axis) {
    if (axis < 0) axis += x.rank();
    if (axis < 0 || axis >= x.rank()) throw ShapeError("axis out of range for " + shape_str(x.shape()));
    if (x.rank() == 1) return {1, x.rows(), 0, 1};
    if (axis == 1) return {x.rows(), x.cols(), static_cast<size_t>(x.cols()), 1};
    return {x.cols(), x.rows(), 1, static_cast<size_t>(x.cols())};
}

}  // namespace detail

// Numerically stable softmax along `axis` (default: last).  When `keep` is
// non-null, entries with keep[i] == 0 get weight exactly 0 and the remaining
// entries renormalize among themselves; each vector needs at least one kept
// entry.
inline Tensor softmax(const Tensor& x, int axis = -1, const std::vector<uint8_t>* keep = nullptr) {
    const detail::AxisView v = detail::axis_view(x, axis);
    if (keep && static_cast<int>(keep->size()) != v.len)
        throw ShapeError("softmax: keep mask length " + std::to_string(keep->size()) +
                         " != axis extent " + std::to_string(v.len));
    Tensor out = Tensor::zeros(x.shape(), x.requires_grad());
    int kept = v.len;
    if (keep) {
        kept = 0;
        for (int i = 0; i < v.len; ++i) kept += (*keep)[i] ? 1 : 0;
        if (kept == 0) throw InputError("softmax: no kept entries along axis");
    }
    for (int k = 0; k < v.count; ++k) {
        const size_t base = k * v.base_stride;
        // NaN inputs never raise the running max; they propagate through exp
        // so callers see a non-finite result rather than a masking error.
        double mx = -std::numeric_limits<double>::infinity();
        for (int i = 0; i < v.len; ++i)
            if (!keep || (*keep)[i]) mx = std::max(mx, x.data()[base + i * v.stride]);
        double z = 0.0;
        for (int i = 0; i < v.len; ++i) {
            const size_t p = base + i * v.stride;
            const double e = (!keep || (*keep)[i]) ? std::exp(x.data()[p] - mx) : 0.0;
            out.data()[p] = e;
            z += e;
        }
        for (int i = 0; i < v.len; ++i) out.data()[base + i * v.stride] /= z;
    }
    detail::record_if_tracked(out, [xn = x.node(), v](detail::TensorNode* on) {
        if (!xn->requires_grad) return;
        detail::ensure_grad(xn.get());
        for (int k = 0; k < v.count; ++k) {
            const size_t base = k * v.base_stride;
            double dot = 0.0;
            for (int i = 0; i < v.len; ++i) {
                const size_t p = base + i * v.stride;
                dot += on->grad[p] * on->data[p];
            }
            for (int i = 0; i < v.len; ++i) {
                const size_t p = base + i * v.stride;
                xn->grad[p] += on->data[p] * (on->grad[p] - dot);
            }
        }
    });
    return out;
}

// Per-position layer normalization along `axis` (default: last) with biased
// variance and learnable gain/bias vectors of the axis extent.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                         double eps = 1e-5, int axis = -1) {
    const detail::AxisView v = detail::axis_view(x, axis);
    if (gain.rank() != 1 || bias.rank() != 1 || gain.rows() != v.len || bias.rows() != v.len)
        throw ShapeError("layer_norm: gain " + shape_str(gain.shape()) + " / bias " +
                         shape_str(bias.shape()) + " must match axis extent " +
                         std::to_string(v.len));
    if (eps <= 0.0) throw ConfigError("layer_norm: eps must be positive");
    Tensor out = Tensor::zeros(x.shape(), detail::any_grad({&x, &gain, &bias}));
    // Cache per-vector (mean, inv_std) for the backward rule.
    auto stats = std::make_shared<std::vector<double>>(2 * v.count);
    for (int k = 0; k < v.count; ++k) {
        const size_t base = k * v.base_stride;
        double mean = 0.0;
        for (int i = 0; i < v.len; ++i) mean += x.data()[base + i * v.stride];
        mean /= v.len;
        double var = 0.0;
        for (int i = 0; i < v.len; ++i) {
            const double d = x.data()[base + i * v.stride] - mean;
            var += d * d;
        }
        var /= v.len;
        const double inv = 1.0 / std::sqrt(var + eps);
        (*stats)[2 * k] = mean;
        (*stats)[2 * k + 1] = inv;
        for (int i = 0; i < v.len; ++i) {
            const size_t p = base + i * v.stride;
            out.data()[p] = gain.data()[i] * (x.data()[p] - mean) * inv + bias.data()[i];
        }
    }
    detail::record_if_tracked(
        out, [xn = x.node(), gn = gain.node(), bn = bias.node(), v, stats](detail::TensorNode* on) {
            for (int k = 0; k < v.count; ++k) {
                const size_t base = k * v.base_stride;
                const double mean = (*stats)[2 * k];
                const double inv = (*stats)[2 * k + 1];
                double sum_dxh = 0.0, sum_dxh_xh = 0.0;
                for (int i = 0; i < v.len; ++i) {
                    const size_t p = base + i * v.stride;
                    const double xh = (xn->data[p] - mean) * inv;
                    const double dxh = on->grad[p] * gn->data[i];
                    sum_dxh += dxh;
                    sum_dxh_xh += dxh * xh;
                }
                if (xn->requires_grad) {
                    detail::ensure_grad(xn.get());
                    for (int i = 0; i < v.len; ++i) {
                        const size_t p = base + i * v.stride;
                        const double xh = (xn->data[p] - mean) * inv;
                        const double dxh = on->grad[p] * gn->data[i];
                        xn->grad[p] += inv * (dxh - (sum_dxh + xh * sum_dxh_xh) / v.len);
                    }
                }
                if (gn->requires_grad) {
                    detail::ensure_grad(gn.get());
                    for (int i = 0; i < v.len; ++i) {
                        const size_t p = base + i * v.stride;
                        gn->grad[i] += on->grad[p] * (xn->data[p] - mean) * inv;
                    }
                }
                if (bn->requires_grad) {
                    detail::ensure_grad(bn.get());
                    for (int i = 0; i < v.len; ++i) bn->grad[i] += on->grad[base + i * v.stride];
                }
            }
        });
    return out;
}

// Mean negative log-softmax of the target index in each column of a V x P
// logit matrix (a rank-1 tensor is treated as a single column).
inline Tensor cross_entropy_from_logits(const Tensor& logits, const std::vector<int>& targets) {
    const int v = logits.rows();
    const int p = logits.cols();
    if (static_cast<int>(targets.size()) != p)
        throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(p) + " logit columns");
    for (int t : targets)
        if (t < 0 || t >= v)
            throw InputError("cross_entropy: target " + std::to_string(t) +
                             " out of range [0, " + std::to_string(v) + ")");
    Tensor out = Tensor::zeros({1}, logits.requires_grad());
    auto probs = std::make_shared<std::vector<double>>(logits.size());
    double total = 0.0;
    for (int j = 0; j < p; ++j) {
        double mx = -std::numeric_limits<double>::infinity();
        for (int i = 0; i < v; ++i) mx = std::max(mx, logits.at(i, j));
        double z = 0.0;
        for (int i = 0; i < v; ++i) z += std::exp(logits.at(i, j) - mx);
        const double lse = mx + std::log(z);
        for (int i = 0; i < v; ++i)
            (*probs)[static_cast<size_t>(i) * p + j] = std::exp(logits.at(i, j) - lse);
        total -= logits.at(targets[j], j) - lse;
    }
    out.data()[0] = total / p;
    detail::record_if_tracked(
        out, [ln = logits.node(), targets, probs, v, p](detail::TensorNode* on) {
            if (!ln->requires_grad) return;
            detail::ensure_grad(ln.get());
            const double g = on->grad[0] / p;
            for (int j = 0; j < p; ++j)
                for (int i = 0; i < v; ++i) {
                    double d = (*probs)[static_cast<size_t>(i) * p + j];
                    if (i == targets[j]) d -= 1.0;
                    ln->grad[static_cast<size_t>(i) * p + j] += g * d;
                }
        });
    return out;
}

// ---------------------------------------------------------------------------
// Comparison helpers (used by tests and integrity checks)

inline bool exactly_equal(const Tensor& a, const Tensor& b) {
    if (a.empty() || b.empty()) return a.empty() && b.empty();
    if (a.shape() != b.shape()) return false;
    for (size_t i = 0; i < a.size(); ++i)
        if (a.data()[i] != b.data()[i]) return false;
    return true;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw ShapeError("max_abs_diff: shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    double m = 0.0;
    for (size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
    return m;
}

// ---------------------------------------------------------------------------
// Gradient checking

struct GradCheckReport {
    double max_rel_err = 0.0;
    size_t entries_checked = 0;
    bool pass = false;
};

namespace detail {

// |a - b| relative to max(1, |a|, |b|): behaves like relative error for large
// gradients and absolute error near zero, where central differences bottom
// out around 1e-10.
inline double rel_err(double a, double b) {
    return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)});
}

}  // namespace detail

// Central-difference check of d(loss)/d(param) for every entry of every
// listed parameter against one reverse-mode pass.  `loss_fn` must close over
// the parameters and be deterministic; it is re-evaluated with entries of the
// parameters perturbed in place.  `after_backward`, when set, runs while the
// reverse-mode gradients are live — a fault-injection seam that lets a
// harness verify the check actually catches a corrupted gradient.
inline GradCheckReport grad_check_params(const std::function<Tensor()>& loss_fn,
                                         const std::vector<Tensor>& params,
                                         double eps = 1e-5, double tol = 1e-4,
                                         const std::function<void()>& after_backward = {}) {
    if (eps <= 0.0 || tol <= 0.0) throw ConfigError("grad_check: eps and tol must be positive");
    for (const Tensor& p : params)
        if (!p.requires_grad()) throw InputError("grad_check: parameter does not require grad");
    for (const Tensor& p : params) const_cast<Tensor&>(p).zero_grad();

    Tape tape;
    std::vector<std::vector<double>> analytic;
    {
        TapeScope scope(tape);
        Tensor loss = loss_fn();
        if (!std::isfinite(loss.item())) throw NumericError("grad_check: loss is not finite");
        tape.backward(loss);
        if (after_backward) after_backward();
    }
    for (const Tensor& p : params)
        analytic.push_back(p.has_grad() ? p.grad() : std::vector<double>(p.size(), 0.0));

    GradCheckReport report;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        Tensor p = params[pi];
        for (size_t i = 0; i < p.size(); ++i) {
            const double saved = p.data()[i];
            p.data()[i] = saved + eps;
            const double up = loss_fn().item();
            p.data()[i] = saved - eps;
            const double dn = loss_fn().item();
            p.data()[i] = saved;
            if (!std::isfinite(up) || !std::isfinite(dn))
                throw NumericError("grad_check: perturbed loss is not finite");
            const double fd = (up - dn) / (2.0 * eps);
            report.max_rel_err = std::max(report.max_rel_err, detail::rel_err(analytic[pi][i], fd));
            ++report.entries_checked;
        }
    }
    report.pass = report.max_rel_err <= tol;
    for (const Tensor& p : params) const_cast<Tensor&>(p).zero_grad();
    return report;
}

// Single-input form: checks d f / d x for a scalar-valued f.
inline GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor x,
                                  double eps = 1e-5, double tol = 1e-4) {
    return grad_check_params([&] { return f(x); }, {x}, eps, tol);
}

}  // namespace vidqa
