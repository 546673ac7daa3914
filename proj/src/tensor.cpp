#include "countgen/tensor.hpp"

#include <atomic>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace countgen {

using detail::Node;
using detail::NodePtr;

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using MapConstMat = Eigen::Map<const RowMat>;

std::int64_t numel(const Shape& shape) {
    std::int64_t n = 1;
    for (std::int64_t d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }

void check_shape_valid(const char* op, const Shape& shape) {
    for (std::int64_t d : shape) {
        if (d <= 0) fail(std::string(op) + ": dimensions must be positive, got " + shape_str(shape));
    }
}

[[noreturn]] void shape_mismatch(const char* op, const Shape& a, const Shape& b) {
    fail(std::string("shape mismatch in ") + op + ": " + shape_str(a) + " vs " + shape_str(b));
}

thread_local std::vector<Tape*> g_tape_stack;

std::uint64_t next_tape_id() {
    static std::atomic<std::uint64_t> counter{1};
    return counter.fetch_add(1);
}

bool trackable_on(const NodePtr& n, const Tape* tape) {
    if (!tape) return false;
    return n->requires_grad || n->tape_id == tape->id();
}

// Builds an op node; records it on the active tape only when some input is
// trackable there, otherwise the result is a plain constant and the backward
// closure plus input references are dropped.
Tensor make_op(const char* op, Shape shape, Array value, const std::vector<Tensor>& inputs,
               std::function<void(const Array&, Gradients&)> backward) {
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    node->op = op;
    Tape* tape = detail::active_tape();
    bool tracked = false;
    if (tape) {
        for (const Tensor& t : inputs) {
            if (trackable_on(t.node(), tape)) {
                tracked = true;
                break;
            }
        }
    }
    if (tracked) {
        node->tape_id = tape->id();
        node->inputs.reserve(inputs.size());
        for (const Tensor& t : inputs) node->inputs.push_back(t.node());
        node->backward = std::move(backward);
        tape->record(node);
    }
    return Tensor(std::move(node));
}

}  // namespace

namespace detail {
Tape* active_tape() { return g_tape_stack.empty() ? nullptr : g_tape_stack.back(); }
}  // namespace detail

// ---- Tensor ----------------------------------------------------------------

Tensor Tensor::from(Shape shape, std::vector<double> data, bool requires_grad) {
    check_shape_valid("from", shape);
    if (numel(shape) != static_cast<std::int64_t>(data.size())) {
        fail("from: shape " + shape_str(shape) + " holds " + std::to_string(numel(shape)) +
             " values, got " + std::to_string(data.size()));
    }
    Array a(static_cast<Eigen::Index>(data.size()));
    for (std::size_t i = 0; i < data.size(); ++i) a[static_cast<Eigen::Index>(i)] = data[i];
    return from_array(std::move(shape), std::move(a), requires_grad);
}

Tensor Tensor::from_array(Shape shape, Array data, bool requires_grad) {
    check_shape_valid("from_array", shape);
    if (numel(shape) != data.size()) {
        fail("from_array: shape " + shape_str(shape) + " vs " + std::to_string(data.size()) + " values");
    }
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->value = std::move(data);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    return from_array(shape, Array::Zero(numel(shape)), requires_grad);
}

Tensor Tensor::full(Shape shape, double v, bool requires_grad) {
    return from_array(shape, Array::Constant(numel(shape), v), requires_grad);
}

Tensor Tensor::scalar(double v, bool requires_grad) {
    return from_array(Shape{1}, Array::Constant(1, v), requires_grad);
}

Array& Tensor::values_mut() {
    if (node_->tape_id != 0) fail("values_mut: tensor is recorded on a tape and immutable");
    return node_->value;
}

double Tensor::item() const {
    if (size() != 1) fail("item: tensor has " + std::to_string(size()) + " values, expected 1");
    return node_->value[0];
}

bool Tensor::tracked() const {
    return trackable_on(node_, detail::active_tape());
}

Tensor Tensor::detached() const {
    return from_array(node_->shape, node_->value, false);
}

// ---- Gradients -------------------------------------------------------------

const Array& Gradients::at(const Tensor& t) const {
    auto it = map_.find(t.node().get());
    if (it == map_.end()) fail("Gradients::at: no gradient recorded for this tensor");
    return it->second;
}

void Gradients::accumulate(const NodePtr& n, const Array& g) {
    if (!(n->requires_grad || n->tape_id == tape_id_)) return;
    auto it = map_.find(n.get());
    if (it == map_.end()) {
        map_.emplace(n.get(), g);
    } else {
        it->second += g;
    }
}

Array* Gradients::find(const detail::Node* n) {
    auto it = map_.find(n);
    return it == map_.end() ? nullptr : &it->second;
}

// ---- Tape ------------------------------------------------------------------

Tape::Tape() : id_(next_tape_id()) { g_tape_stack.push_back(this); }

Tape::~Tape() {
    if (!g_tape_stack.empty() && g_tape_stack.back() == this) g_tape_stack.pop_back();
}

Gradients Tape::backward(const Tensor& loss) {
    if (nodes_.empty()) fail("backward: tape is empty");
    if (!loss.defined() || loss.size() != 1) {
        fail(std::string("backward: loss must be a scalar, got ") +
             (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
    }
    if (loss.node()->tape_id != id_) fail("backward: loss is not recorded on this tape");

    Gradients grads(id_);
    grads.map_.emplace(loss.node().get(), Array::Constant(1, 1.0));
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        Node* n = it->get();
        Array* g = grads.find(n);
        if (g == nullptr || !n->backward) continue;
        n->backward(*g, grads);
    }
    return grads;
}

// ---- elementwise binaries --------------------------------------------------

namespace {

Tensor binary_op(const char* op, const Tensor& a, const Tensor& b,
                 const std::function<Array(const Array&, const Array&)>& fwd,
                 const std::function<Array(const Array&, const Array&, const Array&)>& dl,
                 const std::function<Array(const Array&, const Array&, const Array&)>& dr,
                 bool check_finite = false) {
    const bool same = a.shape() == b.shape();
    const bool a_scalar = a.size() == 1;
    const bool b_scalar = b.size() == 1;
    if (!same && !a_scalar && !b_scalar) shape_mismatch(op, a.shape(), b.shape());

    Array av = a_scalar && !same ? Array::Constant(b.size(), a.values()[0]) : a.values();
    Array bv = b_scalar && !same ? Array::Constant(a.size(), b.values()[0]) : b.values();
    Array out = fwd(av, bv);
    if (check_finite && !out.allFinite()) {
        fail(std::string(op) + ": non-finite result rejected");
    }
    Shape out_shape = (!same && a_scalar) ? b.shape() : a.shape();

    auto an = a.node();
    auto bn = b.node();
    bool a_bcast = a_scalar && !same;
    bool b_bcast = b_scalar && !same;
    return make_op(op, out_shape, std::move(out), {a, b},
                   [an, bn, dl, dr, a_bcast, b_bcast](const Array& g, Gradients& gr) {
                       Array av = a_bcast ? Array::Constant(bn->value.size(), an->value[0]) : an->value;
                       Array bv = b_bcast ? Array::Constant(an->value.size(), bn->value[0]) : bn->value;
                       Array ga = dl(g, av, bv);
                       Array gb = dr(g, av, bv);
                       if (a_bcast) ga = Array::Constant(1, ga.sum());
                       if (b_bcast) gb = Array::Constant(1, gb.sum());
                       gr.accumulate(an, ga);
                       gr.accumulate(bn, gb);
                   });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    return binary_op(
        "add", a, b, [](const Array& x, const Array& y) { return Array(x + y); },
        [](const Array& g, const Array&, const Array&) { return g; },
        [](const Array& g, const Array&, const Array&) { return g; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary_op(
        "sub", a, b, [](const Array& x, const Array& y) { return Array(x - y); },
        [](const Array& g, const Array&, const Array&) { return g; },
        [](const Array& g, const Array&, const Array&) { return Array(-g); });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary_op(
        "mul", a, b, [](const Array& x, const Array& y) { return Array(x * y); },
        [](const Array& g, const Array&, const Array& y) { return Array(g * y); },
        [](const Array& g, const Array& x, const Array&) { return Array(g * x); });
}

Tensor div(const Tensor& a, const Tensor& b) {
    return binary_op(
        "div", a, b, [](const Array& x, const Array& y) { return Array(x / y); },
        [](const Array& g, const Array&, const Array& y) { return Array(g / y); },
        [](const Array& g, const Array& x, const Array& y) { return Array(-g * x / (y * y)); },
        /*check_finite=*/true);
}

Tensor add(const Tensor& a, double b) { return add(a, Tensor::scalar(b)); }
Tensor sub(const Tensor& a, double b) { return sub(a, Tensor::scalar(b)); }
Tensor sub(double a, const Tensor& b) { return sub(Tensor::scalar(a), b); }
Tensor mul(const Tensor& a, double b) { return mul(a, Tensor::scalar(b)); }
Tensor div(const Tensor& a, double b) { return div(a, Tensor::scalar(b)); }
Tensor div(double a, const Tensor& b) { return div(Tensor::scalar(a), b); }

// ---- elementwise unaries ---------------------------------------------------

namespace {

Tensor unary_op(const char* op, const Tensor& a, Array out,
                std::function<Array(const Array&, const Array&)> dx) {
    auto an = a.node();
    return make_op(op, a.shape(), std::move(out), {a},
                   [an, dx = std::move(dx)](const Array& g, Gradients& gr) {
                       gr.accumulate(an, dx(g, an->value));
                   });
}

}  // namespace

Tensor pow(const Tensor& a, double p) {
    return unary_op("pow", a, a.values().pow(p), [p](const Array& g, const Array& x) {
        return Array(g * p * x.pow(p - 1.0));
    });
}

Tensor exp(const Tensor& a) {
    return unary_op("exp", a, a.values().exp(),
                    [](const Array& g, const Array& x) { return Array(g * x.exp()); });
}

Tensor log(const Tensor& a) {
    return unary_op("log", a, a.values().log(),
                    [](const Array& g, const Array& x) { return Array(g / x); });
}

Tensor abs(const Tensor& a) {
    return unary_op("abs", a, a.values().abs(), [](const Array& g, const Array& x) {
        return Array(g * x.sign());
    });
}

Tensor relu(const Tensor& a) {
    // Subgradient at 0 is 0.
    return unary_op("relu", a, a.values().max(0.0), [](const Array& g, const Array& x) {
        return Array(g * (x > 0.0).cast<double>());
    });
}

namespace {

double sigmoid_scalar(double x) {
    if (x >= 0.0) {
        double e = std::exp(-x);
        return 1.0 / (1.0 + e);
    }
    double e = std::exp(x);
    return e / (1.0 + e);
}

}  // namespace

Tensor sigmoid(const Tensor& a) {
    Array out = a.values().unaryExpr([](double x) { return sigmoid_scalar(x); });
    auto an = a.node();
    return make_op("sigmoid", a.shape(), std::move(out), {a}, [an](const Array& g, Gradients& gr) {
        Array s = an->value.unaryExpr([](double x) { return sigmoid_scalar(x); });
        gr.accumulate(an, Array(g * s * (1.0 - s)));
    });
}

Tensor softplus(const Tensor& a) {
    Array out = a.values().unaryExpr([](double x) {
        if (x > 30.0) return x;
        if (x < -30.0) return std::exp(x);
        return std::log1p(std::exp(x));
    });
    auto an = a.node();
    return make_op("softplus", a.shape(), std::move(out), {a}, [an](const Array& g, Gradients& gr) {
        Array s = an->value.unaryExpr([](double x) { return sigmoid_scalar(x); });
        gr.accumulate(an, Array(g * s));
    });
}

// ---- reductions ------------------------------------------------------------

Tensor sum(const Tensor& a) {
    auto an = a.node();
    return make_op("sum", Shape{1}, Array::Constant(1, a.values().sum()), {a},
                   [an](const Array& g, Gradients& gr) {
                       gr.accumulate(an, Array::Constant(an->value.size(), g[0]));
                   });
}

Tensor mean(const Tensor& a) {
    auto an = a.node();
    const double inv_n = 1.0 / static_cast<double>(a.size());
    return make_op("mean", Shape{1}, Array::Constant(1, a.values().mean()), {a},
                   [an, inv_n](const Array& g, Gradients& gr) {
                       gr.accumulate(an, Array::Constant(an->value.size(), g[0] * inv_n));
                   });
}

namespace {

struct AxisDims {
    std::int64_t outer = 1, n = 1, inner = 1;
    Shape out_shape;
};

AxisDims axis_dims(const char* op, const Shape& shape, int axis) {
    if (axis < 0 || axis >= static_cast<int>(shape.size())) {
        fail(std::string(op) + ": axis " + std::to_string(axis) + " out of range for " + shape_str(shape));
    }
    AxisDims d;
    for (int i = 0; i < static_cast<int>(shape.size()); ++i) {
        if (i < axis) d.outer *= shape[static_cast<std::size_t>(i)];
        else if (i == axis) d.n = shape[static_cast<std::size_t>(i)];
        else d.inner *= shape[static_cast<std::size_t>(i)];
    }
    for (int i = 0; i < static_cast<int>(shape.size()); ++i) {
        if (i != axis) d.out_shape.push_back(shape[static_cast<std::size_t>(i)]);
    }
    if (d.out_shape.empty()) d.out_shape.push_back(1);
    return d;
}

Tensor reduce_axis(const char* op, const Tensor& a, int axis, bool is_mean) {
    AxisDims d = axis_dims(op, a.shape(), axis);
    const Array& x = a.values();
    Array out = Array::Zero(d.outer * d.inner);
    for (std::int64_t o = 0; o < d.outer; ++o) {
        for (std::int64_t k = 0; k < d.n; ++k) {
            const std::int64_t base = (o * d.n + k) * d.inner;
            for (std::int64_t i = 0; i < d.inner; ++i) out[o * d.inner + i] += x[base + i];
        }
    }
    if (is_mean) out /= static_cast<double>(d.n);
    auto an = a.node();
    const double w = is_mean ? 1.0 / static_cast<double>(d.n) : 1.0;
    return make_op(op, d.out_shape, std::move(out), {a}, [an, d, w](const Array& g, Gradients& gr) {
        Array gx = Array::Zero(an->value.size());
        for (std::int64_t o = 0; o < d.outer; ++o) {
            for (std::int64_t k = 0; k < d.n; ++k) {
                const std::int64_t base = (o * d.n + k) * d.inner;
                for (std::int64_t i = 0; i < d.inner; ++i) gx[base + i] = g[o * d.inner + i] * w;
            }
        }
        gr.accumulate(an, gx);
    });
}

Tensor extreme_axis(const char* op, const Tensor& a, int axis, bool take_min) {
    AxisDims d = axis_dims(op, a.shape(), axis);
    const Array& x = a.values();
    Array out(d.outer * d.inner);
    // Ties route the gradient to the lowest index along the axis.
    auto arg = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(d.outer * d.inner));
    for (std::int64_t o = 0; o < d.outer; ++o) {
        for (std::int64_t i = 0; i < d.inner; ++i) {
            std::int64_t best_k = 0;
            double best = x[(o * d.n) * d.inner + i];
            for (std::int64_t k = 1; k < d.n; ++k) {
                double v = x[(o * d.n + k) * d.inner + i];
                if (take_min ? (v < best) : (v > best)) {
                    best = v;
                    best_k = k;
                }
            }
            out[o * d.inner + i] = best;
            (*arg)[static_cast<std::size_t>(o * d.inner + i)] = best_k;
        }
    }
    auto an = a.node();
    return make_op(op, d.out_shape, std::move(out), {a}, [an, d, arg](const Array& g, Gradients& gr) {
        Array gx = Array::Zero(an->value.size());
        for (std::int64_t o = 0; o < d.outer; ++o) {
            for (std::int64_t i = 0; i < d.inner; ++i) {
                const std::int64_t k = (*arg)[static_cast<std::size_t>(o * d.inner + i)];
                gx[(o * d.n + k) * d.inner + i] = g[o * d.inner + i];
            }
        }
        gr.accumulate(an, gx);
    });
}

}  // namespace

Tensor sum(const Tensor& a, int axis) { return reduce_axis("sum_axis", a, axis, false); }
Tensor mean(const Tensor& a, int axis) { return reduce_axis("mean_axis", a, axis, true); }
Tensor reduce_min(const Tensor& a, int axis) { return extreme_axis("reduce_min", a, axis, true); }
Tensor reduce_max(const Tensor& a, int axis) { return extreme_axis("reduce_max", a, axis, false); }

// ---- linear algebra ---------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        shape_mismatch("matmul", a.shape(), b.shape());
    }
    const std::int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Array out(m * n);
    MapMat(out.data(), m, n).noalias() =
        MapConstMat(a.data(), m, k) * MapConstMat(b.data(), k, n);
    auto an = a.node();
    auto bn = b.node();
    return make_op("matmul", Shape{m, n}, std::move(out), {a, b},
                   [an, bn, m, k, n](const Array& g, Gradients& gr) {
                       MapConstMat G(g.data(), m, n);
                       if (gr.wants(an)) {
                           Array ga(m * k);
                           MapMat(ga.data(), m, k).noalias() =
                               G * MapConstMat(bn->value.data(), k, n).transpose();
                           gr.accumulate(an, ga);
                       }
                       if (gr.wants(bn)) {
                           Array gb(k * n);
                           MapMat(gb.data(), k, n).noalias() =
                               MapConstMat(an->value.data(), m, k).transpose() * G;
                           gr.accumulate(bn, gb);
                       }
                   });
}

Tensor transpose(const Tensor& a) {
    if (a.rank() != 2) fail("transpose: expected rank-2 tensor, got " + shape_str(a.shape()));
    const std::int64_t m = a.dim(0), n = a.dim(1);
    Array out(n * m);
    MapMat(out.data(), n, m) = MapConstMat(a.data(), m, n).transpose();
    auto an = a.node();
    return make_op("transpose", Shape{n, m}, std::move(out), {a},
                   [an, m, n](const Array& g, Gradients& gr) {
                       Array ga(m * n);
                       MapMat(ga.data(), m, n) = MapConstMat(g.data(), n, m).transpose();
                       gr.accumulate(an, ga);
                   });
}

// ---- convolution -----------------------------------------------------------

namespace {

struct ConvDims {
    std::int64_t cin, h, w, cout, kh, kw, ho, wo;
    int stride, pad;
};

ConvDims conv_dims(const char* op, const Tensor& x, const Tensor& wt, const Tensor& b, int stride,
                   int pad, bool transposed) {
    if (x.rank() != 3) fail(std::string(op) + ": input must be [C,H,W], got " + shape_str(x.shape()));
    if (wt.rank() != 4) fail(std::string(op) + ": weight must be rank 4, got " + shape_str(wt.shape()));
    if (stride < 1) fail(std::string(op) + ": stride must be >= 1");
    if (pad < 0) fail(std::string(op) + ": pad must be >= 0");
    ConvDims d;
    d.stride = stride;
    d.pad = pad;
    d.cin = x.dim(0);
    d.h = x.dim(1);
    d.w = x.dim(2);
    if (!transposed) {
        if (wt.dim(1) != d.cin) shape_mismatch(op, x.shape(), wt.shape());
        d.cout = wt.dim(0);
        d.kh = wt.dim(2);
        d.kw = wt.dim(3);
        d.ho = (d.h + 2 * pad - d.kh) / stride + 1;
        d.wo = (d.w + 2 * pad - d.kw) / stride + 1;
        if (d.h + 2 * pad < d.kh || d.w + 2 * pad < d.kw) shape_mismatch(op, x.shape(), wt.shape());
    } else {
        if (wt.dim(0) != d.cin) shape_mismatch(op, x.shape(), wt.shape());
        d.cout = wt.dim(1);
        d.kh = wt.dim(2);
        d.kw = wt.dim(3);
        d.ho = (d.h - 1) * stride + d.kh - 2 * pad;
        d.wo = (d.w - 1) * stride + d.kw - 2 * pad;
        if (d.ho <= 0 || d.wo <= 0) shape_mismatch(op, x.shape(), wt.shape());
    }
    if (b.defined() && (b.rank() != 1 || b.dim(0) != d.cout)) {
        fail(std::string(op) + ": bias must be [" + std::to_string(d.cout) + "], got " +
             shape_str(b.shape()));
    }
    return d;
}

// col: [Cin*kh*kw, Ho*Wo] patch matrix of x under (stride, pad), zeros outside.
void im2col(const double* x, const ConvDims& d, RowMat& col) {
    col.setZero(d.cin * d.kh * d.kw, d.ho * d.wo);
    for (std::int64_t c = 0; c < d.cin; ++c) {
        for (std::int64_t ki = 0; ki < d.kh; ++ki) {
            for (std::int64_t kj = 0; kj < d.kw; ++kj) {
                const std::int64_t row = (c * d.kh + ki) * d.kw + kj;
                for (std::int64_t oy = 0; oy < d.ho; ++oy) {
                    const std::int64_t iy = oy * d.stride + ki - d.pad;
                    if (iy < 0 || iy >= d.h) continue;
                    for (std::int64_t ox = 0; ox < d.wo; ++ox) {
                        const std::int64_t ix = ox * d.stride + kj - d.pad;
                        if (ix < 0 || ix >= d.w) continue;
                        col(row, oy * d.wo + ox) = x[(c * d.h + iy) * d.w + ix];
                    }
                }
            }
        }
    }
}

// Adjoint of im2col: scatter-adds columns back into image layout.
void col2im(const RowMat& col, const ConvDims& d, double* x) {
    for (std::int64_t c = 0; c < d.cin; ++c) {
        for (std::int64_t ki = 0; ki < d.kh; ++ki) {
            for (std::int64_t kj = 0; kj < d.kw; ++kj) {
                const std::int64_t row = (c * d.kh + ki) * d.kw + kj;
                for (std::int64_t oy = 0; oy < d.ho; ++oy) {
                    const std::int64_t iy = oy * d.stride + ki - d.pad;
                    if (iy < 0 || iy >= d.h) continue;
                    for (std::int64_t ox = 0; ox < d.wo; ++ox) {
                        const std::int64_t ix = ox * d.stride + kj - d.pad;
                        if (ix < 0 || ix >= d.w) continue;
                        x[(c * d.h + iy) * d.w + ix] += col(row, oy * d.wo + ox);
                    }
                }
            }
        }
    }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
    ConvDims d = conv_dims("conv2d", x, w, b, stride, pad, false);
    auto col = std::make_shared<RowMat>();
    im2col(x.data(), d, *col);
    Array out(d.cout * d.ho * d.wo);
    MapMat out_m(out.data(), d.cout, d.ho * d.wo);
    out_m.noalias() = MapConstMat(w.data(), d.cout, d.cin * d.kh * d.kw) * (*col);
    if (b.defined()) {
        for (std::int64_t c = 0; c < d.cout; ++c) out_m.row(c).array() += b.at(c);
    }
    auto xn = x.node();
    auto wn = w.node();
    std::vector<Tensor> inputs{x, w};
    if (b.defined()) inputs.push_back(b);
    auto bn = b.defined() ? b.node() : nullptr;
    return make_op("conv2d", Shape{d.cout, d.ho, d.wo}, std::move(out), inputs,
                   [xn, wn, bn, d, col](const Array& g, Gradients& gr) {
                       MapConstMat G(g.data(), d.cout, d.ho * d.wo);
                       if (gr.wants(wn)) {
                           Array gw(d.cout * d.cin * d.kh * d.kw);
                           MapMat(gw.data(), d.cout, d.cin * d.kh * d.kw).noalias() = G * col->transpose();
                           gr.accumulate(wn, gw);
                       }
                       if (gr.wants(xn)) {
                           RowMat gcol = MapConstMat(wn->value.data(), d.cout, d.cin * d.kh * d.kw).transpose() * G;
                           Array gx = Array::Zero(xn->value.size());
                           col2im(gcol, d, gx.data());
                           gr.accumulate(xn, gx);
                       }
                       if (bn && gr.wants(bn)) {
                           Array gb(d.cout);
                           for (std::int64_t c = 0; c < d.cout; ++c) gb[c] = G.row(c).sum();
                           gr.accumulate(bn, gb);
                       }
                   });
}

Tensor conv_transpose2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
    ConvDims d = conv_dims("conv_transpose2d", x, w, b, stride, pad, true);
    // Scatter geometry matches conv2d run backwards: treat output as the
    // conv2d "input" with the same (stride, pad).
    ConvDims scatter = d;
    scatter.cin = d.cout;
    scatter.h = d.ho;
    scatter.w = d.wo;
    scatter.ho = d.h;
    scatter.wo = d.w;
    RowMat colt = MapConstMat(w.data(), d.cin, d.cout * d.kh * d.kw).transpose() *
                  MapConstMat(x.data(), d.cin, d.h * d.w);
    Array out = Array::Zero(d.cout * d.ho * d.wo);
    col2im(colt, scatter, out.data());
    if (b.defined()) {
        MapMat out_m(out.data(), d.cout, d.ho * d.wo);
        for (std::int64_t c = 0; c < d.cout; ++c) out_m.row(c).array() += b.at(c);
    }
    auto xn = x.node();
    auto wn = w.node();
    std::vector<Tensor> inputs{x, w};
    if (b.defined()) inputs.push_back(b);
    auto bn = b.defined() ? b.node() : nullptr;
    return make_op("conv_transpose2d", Shape{d.cout, d.ho, d.wo}, std::move(out), inputs,
                   [xn, wn, bn, d, scatter](const Array& g, Gradients& gr) {
                       const bool wx = gr.wants(xn), ww = gr.wants(wn);
                       RowMat gcol;
                       if (wx || ww) im2col(g.data(), scatter, gcol);
                       if (wx) {
                           Array gx(d.cin * d.h * d.w);
                           MapMat(gx.data(), d.cin, d.h * d.w).noalias() =
                               MapConstMat(wn->value.data(), d.cin, d.cout * d.kh * d.kw) * gcol;
                           gr.accumulate(xn, gx);
                       }
                       if (ww) {
                           Array gw(d.cin * d.cout * d.kh * d.kw);
                           MapMat(gw.data(), d.cin, d.cout * d.kh * d.kw).noalias() =
                               MapConstMat(xn->value.data(), d.cin, d.h * d.w) * gcol.transpose();
                           gr.accumulate(wn, gw);
                       }
                       if (bn && gr.wants(bn)) {
                           MapConstMat G(g.data(), d.cout, d.ho * d.wo);
                           Array gb(d.cout);
                           for (std::int64_t c = 0; c < d.cout; ++c) gb[c] = G.row(c).sum();
                           gr.accumulate(bn, gb);
                       }
                   });
}

// ---- softmax ---------------------------------------------------------------

Tensor softmax(const Tensor& a, int axis) {
    AxisDims d = axis_dims("softmax", a.shape(), axis);
    const Array& x = a.values();
    Array out(x.size());
    for (std::int64_t o = 0; o < d.outer; ++o) {
        for (std::int64_t i = 0; i < d.inner; ++i) {
            double mx = x[(o * d.n) * d.inner + i];
            for (std::int64_t k = 1; k < d.n; ++k) mx = std::max(mx, x[(o * d.n + k) * d.inner + i]);
            double denom = 0.0;
            for (std::int64_t k = 0; k < d.n; ++k) {
                const std::int64_t idx = (o * d.n + k) * d.inner + i;
                out[idx] = std::exp(x[idx] - mx);
                denom += out[idx];
            }
            for (std::int64_t k = 0; k < d.n; ++k) out[(o * d.n + k) * d.inner + i] /= denom;
        }
    }
    auto an = a.node();
    auto saved = std::make_shared<Array>(out);
    return make_op("softmax", a.shape(), std::move(out), {a},
                   [an, d, saved](const Array& g, Gradients& gr) {
                       const Array& s = *saved;
                       Array gx(s.size());
                       for (std::int64_t o = 0; o < d.outer; ++o) {
                           for (std::int64_t i = 0; i < d.inner; ++i) {
                               double dot = 0.0;
                               for (std::int64_t k = 0; k < d.n; ++k) {
                                   const std::int64_t idx = (o * d.n + k) * d.inner + i;
                                   dot += g[idx] * s[idx];
                               }
                               for (std::int64_t k = 0; k < d.n; ++k) {
                                   const std::int64_t idx = (o * d.n + k) * d.inner + i;
                                   gx[idx] = s[idx] * (g[idx] - dot);
                               }
                           }
                       }
                       gr.accumulate(an, gx);
                   });
}

// ---- gaussian blur ---------------------------------------------------------

namespace {

// Symmetric reflect: ... 2 1 0 | 0 1 2 ... n-1 | n-1 n-2 ...
std::int64_t reflect_index(std::int64_t i, std::int64_t n) {
    while (i < 0 || i >= n) {
        if (i < 0) i = -1 - i;
        if (i >= n) i = 2 * n - 1 - i;
    }
    return i;
}

std::vector<double> gaussian_kernel(double sigma, int radius) {
    std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
    double s = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        double v = std::exp(-0.5 * (static_cast<double>(i) * i) / (sigma * sigma));
        k[static_cast<std::size_t>(i + radius)] = v;
        s += v;
    }
    for (double& v : k) v /= s;
    return k;
}

// One separable pass along rows (horizontal=true) or columns.
void blur_pass(const double* in, double* out, std::int64_t h, std::int64_t w,
               const std::vector<double>& k, int radius, bool horizontal) {
    for (std::int64_t y = 0; y < h; ++y) {
        for (std::int64_t x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int t = -radius; t <= radius; ++t) {
                std::int64_t sy = y, sx = x;
                if (horizontal) sx = reflect_index(x + t, w);
                else sy = reflect_index(y + t, h);
                acc += k[static_cast<std::size_t>(t + radius)] * in[sy * w + sx];
            }
            out[y * w + x] = acc;
        }
    }
}

// Adjoint of blur_pass: scatters with the same reflect map.
void blur_pass_adjoint(const double* g, double* out, std::int64_t h, std::int64_t w,
                       const std::vector<double>& k, int radius, bool horizontal) {
    for (std::int64_t y = 0; y < h; ++y) {
        for (std::int64_t x = 0; x < w; ++x) {
            const double gv = g[y * w + x];
            for (int t = -radius; t <= radius; ++t) {
                std::int64_t sy = y, sx = x;
                if (horizontal) sx = reflect_index(x + t, w);
                else sy = reflect_index(y + t, h);
                out[sy * w + sx] += k[static_cast<std::size_t>(t + radius)] * gv;
            }
        }
    }
}

}  // namespace

Tensor gaussian_blur(const Tensor& a, double sigma, int radius) {
    if (a.rank() != 2 && a.rank() != 3) {
        fail("gaussian_blur: expected [H,W] or [C,H,W], got " + shape_str(a.shape()));
    }
    if (sigma <= 0.0) fail("gaussian_blur: sigma must be > 0");
    if (radius < 0) radius = static_cast<int>(std::ceil(3.0 * sigma));
    auto kernel = std::make_shared<std::vector<double>>(gaussian_kernel(sigma, radius));
    const std::int64_t c = a.rank() == 3 ? a.dim(0) : 1;
    const std::int64_t h = a.rank() == 3 ? a.dim(1) : a.dim(0);
    const std::int64_t w = a.rank() == 3 ? a.dim(2) : a.dim(1);

    Array out(a.size());
    Array tmp(h * w);
    for (std::int64_t ch = 0; ch < c; ++ch) {
        const double* src = a.data() + ch * h * w;
        blur_pass(src, tmp.data(), h, w, *kernel, radius, true);
        blur_pass(tmp.data(), out.data() + ch * h * w, h, w, *kernel, radius, false);
    }
    auto an = a.node();
    return make_op("gaussian_blur", a.shape(), std::move(out), {a},
                   [an, kernel, radius, c, h, w](const Array& g, Gradients& gr) {
                       Array gx = Array::Zero(an->value.size());
                       Array tmp(h * w);
                       for (std::int64_t ch = 0; ch < c; ++ch) {
                           tmp.setZero();
                           blur_pass_adjoint(g.data() + ch * h * w, tmp.data(), h, w, *kernel, radius, false);
                           blur_pass_adjoint(tmp.data(), gx.data() + ch * h * w, h, w, *kernel, radius, true);
                       }
                       gr.accumulate(an, gx);
                   });
}

// ---- structural ops ----------------------------------------------------------

Tensor mask_mul(const Tensor& x, const Tensor& mask) {
    const bool exact = x.shape() == mask.shape();
    const bool channel_bcast =
        x.rank() == 3 && mask.rank() == 2 && x.dim(1) == mask.dim(0) && x.dim(2) == mask.dim(1);
    if (!exact && !channel_bcast) shape_mismatch("mask_mul", x.shape(), mask.shape());
    Array out(x.size());
    const std::int64_t plane = exact ? x.size() : x.dim(1) * x.dim(2);
    const std::int64_t c = exact ? 1 : x.dim(0);
    for (std::int64_t ch = 0; ch < c; ++ch) {
        for (std::int64_t i = 0; i < plane; ++i) {
            out[ch * plane + i] = x.data()[ch * plane + i] * mask.data()[i];
        }
    }
    auto xn = x.node();
    auto mvals = std::make_shared<Array>(mask.values());
    return make_op("mask_mul", x.shape(), std::move(out), {x},
                   [xn, mvals, c, plane](const Array& g, Gradients& gr) {
                       Array gx(g.size());
                       for (std::int64_t ch = 0; ch < c; ++ch) {
                           for (std::int64_t i = 0; i < plane; ++i) {
                               gx[ch * plane + i] = g[ch * plane + i] * (*mvals)[i];
                           }
                       }
                       gr.accumulate(xn, gx);
                   });
}

Tensor add_channel_bias(const Tensor& x, const Tensor& b) {
    if (x.rank() != 3 || b.rank() != 1 || b.dim(0) != x.dim(0)) {
        shape_mismatch("add_channel_bias", x.shape(), b.shape());
    }
    const std::int64_t c = x.dim(0), plane = x.dim(1) * x.dim(2);
    Array out = x.values();
    for (std::int64_t ch = 0; ch < c; ++ch) {
        out.segment(ch * plane, plane) += b.at(ch);
    }
    auto xn = x.node();
    auto bn = b.node();
    return make_op("add_channel_bias", x.shape(), std::move(out), {x, b},
                   [xn, bn, c, plane](const Array& g, Gradients& gr) {
                       gr.accumulate(xn, g);
                       Array gb(c);
                       for (std::int64_t ch = 0; ch < c; ++ch) gb[ch] = g.segment(ch * plane, plane).sum();
                       gr.accumulate(bn, gb);
                   });
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) fail("concat: no inputs");
    const Shape& s0 = parts[0].shape();
    if (axis < 0 || axis >= static_cast<int>(s0.size())) {
        fail("concat: axis " + std::to_string(axis) + " out of range for " + shape_str(s0));
    }
    Shape out_shape = s0;
    std::int64_t axis_total = 0;
    for (const Tensor& p : parts) {
        if (p.rank() != static_cast<int>(s0.size())) shape_mismatch("concat", s0, p.shape());
        for (int i = 0; i < p.rank(); ++i) {
            if (i != axis && p.dim(i) != s0[static_cast<std::size_t>(i)]) {
                shape_mismatch("concat", s0, p.shape());
            }
        }
        axis_total += p.dim(axis);
    }
    out_shape[static_cast<std::size_t>(axis)] = axis_total;

    AxisDims d0 = axis_dims("concat", out_shape, axis);
    Array out(numel(out_shape));
    std::vector<std::int64_t> offsets;
    std::int64_t off = 0;
    for (const Tensor& p : parts) {
        offsets.push_back(off);
        const std::int64_t pn = p.dim(axis);
        for (std::int64_t o = 0; o < d0.outer; ++o) {
            for (std::int64_t k = 0; k < pn; ++k) {
                for (std::int64_t i = 0; i < d0.inner; ++i) {
                    out[(o * d0.n + off + k) * d0.inner + i] = p.data()[(o * pn + k) * d0.inner + i];
                }
            }
        }
        off += pn;
    }
    std::vector<NodePtr> in_nodes;
    for (const Tensor& p : parts) in_nodes.push_back(p.node());
    std::vector<std::int64_t> part_sizes;
    for (const Tensor& p : parts) part_sizes.push_back(p.dim(axis));
    return make_op("concat", out_shape, std::move(out), parts,
                   [in_nodes, offsets, part_sizes, d0](const Array& g, Gradients& gr) {
                       for (std::size_t pi = 0; pi < in_nodes.size(); ++pi) {
                           const std::int64_t pn = part_sizes[pi];
                           Array gp(d0.outer * pn * d0.inner);
                           for (std::int64_t o = 0; o < d0.outer; ++o) {
                               for (std::int64_t k = 0; k < pn; ++k) {
                                   for (std::int64_t i = 0; i < d0.inner; ++i) {
                                       gp[(o * pn + k) * d0.inner + i] =
                                           g[(o * d0.n + offsets[pi] + k) * d0.inner + i];
                                   }
                               }
                           }
                           gr.accumulate(in_nodes[pi], gp);
                       }
                   });
}

Tensor slice(const Tensor& a, int axis, std::int64_t start, std::int64_t len) {
    AxisDims d = axis_dims("slice", a.shape(), axis);
    if (start < 0 || len <= 0 || start + len > d.n) {
        fail("slice: range [" + std::to_string(start) + "," + std::to_string(start + len) +
             ") out of bounds for axis size " + std::to_string(d.n));
    }
    Shape out_shape = a.shape();
    out_shape[static_cast<std::size_t>(axis)] = len;
    Array out(d.outer * len * d.inner);
    for (std::int64_t o = 0; o < d.outer; ++o) {
        for (std::int64_t k = 0; k < len; ++k) {
            for (std::int64_t i = 0; i < d.inner; ++i) {
                out[(o * len + k) * d.inner + i] = a.data()[(o * d.n + start + k) * d.inner + i];
            }
        }
    }
    auto an = a.node();
    return make_op("slice", out_shape, std::move(out), {a},
                   [an, d, start, len](const Array& g, Gradients& gr) {
                       Array gx = Array::Zero(an->value.size());
                       for (std::int64_t o = 0; o < d.outer; ++o) {
                           for (std::int64_t k = 0; k < len; ++k) {
                               for (std::int64_t i = 0; i < d.inner; ++i) {
                                   gx[(o * d.n + start + k) * d.inner + i] = g[(o * len + k) * d.inner + i];
                               }
                           }
                       }
                       gr.accumulate(an, gx);
                   });
}

Tensor reshape(const Tensor& a, Shape shape) {
    check_shape_valid("reshape", shape);
    if (numel(shape) != a.size()) {
        fail("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    }
    auto an = a.node();
    return make_op("reshape", std::move(shape), Array(a.values()), {a},
                   [an](const Array& g, Gradients& gr) { gr.accumulate(an, g); });
}

namespace {

struct SpatialDims {
    std::int64_t c, h, w;
};

SpatialDims spatial_dims(const char* op, const Tensor& a) {
    if (a.rank() == 2) return {1, a.dim(0), a.dim(1)};
    if (a.rank() == 3) return {a.dim(0), a.dim(1), a.dim(2)};
    fail(std::string(op) + ": expected [H,W] or [C,H,W], got " + shape_str(a.shape()));
}

}  // namespace

Tensor upsample_nearest(const Tensor& a, int factor) {
    if (factor < 1) fail("upsample_nearest: factor must be >= 1");
    SpatialDims d = spatial_dims("upsample_nearest", a);
    const std::int64_t ho = d.h * factor, wo = d.w * factor;
    Shape out_shape = a.rank() == 2 ? Shape{ho, wo} : Shape{d.c, ho, wo};
    Array out(d.c * ho * wo);
    for (std::int64_t c = 0; c < d.c; ++c) {
        for (std::int64_t y = 0; y < ho; ++y) {
            for (std::int64_t x = 0; x < wo; ++x) {
                out[(c * ho + y) * wo + x] = a.data()[(c * d.h + y / factor) * d.w + x / factor];
            }
        }
    }
    auto an = a.node();
    return make_op("upsample_nearest", out_shape, std::move(out), {a},
                   [an, d, factor, ho, wo](const Array& g, Gradients& gr) {
                       Array gx = Array::Zero(an->value.size());
                       for (std::int64_t c = 0; c < d.c; ++c) {
                           for (std::int64_t y = 0; y < ho; ++y) {
                               for (std::int64_t x = 0; x < wo; ++x) {
                                   gx[(c * d.h + y / factor) * d.w + x / factor] += g[(c * ho + y) * wo + x];
                               }
                           }
                       }
                       gr.accumulate(an, gx);
                   });
}

Tensor downsample_nearest(const Tensor& a, int factor) {
    if (factor < 1) fail("downsample_nearest: factor must be >= 1");
    SpatialDims d = spatial_dims("downsample_nearest", a);
    if (d.h % factor != 0 || d.w % factor != 0) {
        fail("downsample_nearest: spatial dims " + shape_str(a.shape()) + " not divisible by " +
             std::to_string(factor));
    }
    const std::int64_t ho = d.h / factor, wo = d.w / factor;
    Shape out_shape = a.rank() == 2 ? Shape{ho, wo} : Shape{d.c, ho, wo};
    Array out(d.c * ho * wo);
    for (std::int64_t c = 0; c < d.c; ++c) {
        for (std::int64_t y = 0; y < ho; ++y) {
            for (std::int64_t x = 0; x < wo; ++x) {
                out[(c * ho + y) * wo + x] = a.data()[(c * d.h + y * factor) * d.w + x * factor];
            }
        }
    }
    auto an = a.node();
    return make_op("downsample_nearest", out_shape, std::move(out), {a},
                   [an, d, factor, ho, wo](const Array& g, Gradients& gr) {
                       Array gx = Array::Zero(an->value.size());
                       for (std::int64_t c = 0; c < d.c; ++c) {
                           for (std::int64_t y = 0; y < ho; ++y) {
                               for (std::int64_t x = 0; x < wo; ++x) {
                                   gx[(c * d.h + y * factor) * d.w + x * factor] = g[(c * ho + y) * wo + x];
                               }
                           }
                       }
                       gr.accumulate(an, gx);
                   });
}

}  // namespace countgen
