#include "aef/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <numeric>
#include <optional>
#include <sstream>

namespace aef {

namespace {

using MatrixRM =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<MatrixRM>;
using ConstMapRM = Eigen::Map<const MatrixRM>;

std::atomic<std::uint64_t> g_tape_counter{1};
thread_local Tape* g_active_tape = nullptr;

[[noreturn]] void shape_fail(const char* op, const Shape& a, const Shape& b) {
    throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) +
                     " and " + shape_str(b));
}

void check_rank(const char* op, const Tensor& t, int rank) {
    if (t.rank() != rank) {
        throw ShapeError(std::string(op) + ": expected rank " +
                         std::to_string(rank) + ", got " + shape_str(t.shape()));
    }
}

std::vector<std::int64_t> row_major_strides(const Shape& s) {
    std::vector<std::int64_t> st(s.size());
    std::int64_t acc = 1;
    for (int i = static_cast<int>(s.size()) - 1; i >= 0; --i) {
        st[static_cast<std::size_t>(i)] = acc;
        acc *= s[static_cast<std::size_t>(i)];
    }
    return st;
}

Shape broadcast_shape(const char* op, const Shape& a, const Shape& b) {
    const int ra = static_cast<int>(a.size());
    const int rb = static_cast<int>(b.size());
    const int r = std::max(ra, rb);
    Shape out(static_cast<std::size_t>(r));
    for (int i = 0; i < r; ++i) {
        const int da = i < r - ra ? 1 : a[static_cast<std::size_t>(i - (r - ra))];
        const int db = i < r - rb ? 1 : b[static_cast<std::size_t>(i - (r - rb))];
        if (da != db && da != 1 && db != 1) shape_fail(op, a, b);
        out[static_cast<std::size_t>(i)] = std::max(da, db);
    }
    return out;
}

// Strides of `s` aligned into a broadcast result of rank r (0 where dim == 1).
std::vector<std::int64_t> broadcast_strides(const Shape& s, int r) {
    const int rs = static_cast<int>(s.size());
    auto base = row_major_strides(s);
    std::vector<std::int64_t> out(static_cast<std::size_t>(r), 0);
    for (int i = 0; i < rs; ++i) {
        out[static_cast<std::size_t>(r - rs + i)] =
            s[static_cast<std::size_t>(i)] == 1 ? 0 : base[static_cast<std::size_t>(i)];
    }
    return out;
}

template <typename F>
Tensor elementwise_binary(const char* op, const Tensor& a, const Tensor& b, F f) {
    if (a.shape() == b.shape()) {
        Tensor out(a.shape());
        const double* pa = a.data();
        const double* pb = b.data();
        double* po = out.data();
        const std::int64_t n = a.size();
        for (std::int64_t i = 0; i < n; ++i) po[i] = f(pa[i], pb[i]);
        return out;
    }
    const Shape os = broadcast_shape(op, a.shape(), b.shape());
    Tensor out(os);
    const int r = static_cast<int>(os.size());
    const auto sa = broadcast_strides(a.shape(), r);
    const auto sb = broadcast_strides(b.shape(), r);
    std::vector<int> idx(static_cast<std::size_t>(r), 0);
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    const std::int64_t n = out.size();
    std::int64_t oa = 0, ob = 0;
    for (std::int64_t i = 0; i < n; ++i) {
        po[i] = f(pa[oa], pb[ob]);
        for (int d = r - 1; d >= 0; --d) {
            auto du = static_cast<std::size_t>(d);
            if (++idx[du] < os[du]) {
                oa += sa[du];
                ob += sb[du];
                break;
            }
            idx[du] = 0;
            oa -= sa[du] * (os[du] - 1);
            ob -= sb[du] * (os[du] - 1);
        }
    }
    return out;
}

// A vjp may hand back a tensor that aliases the upstream gradient or a
// sibling contribution; the accumulator must own its buffer before += runs.
void accumulate(std::optional<Tensor>& dst, Tensor src) {
    if (!dst) {
        dst = src.unique() ? std::move(src) : src.clone();
        return;
    }
    double* pd = dst->data();
    const double* ps = src.data();
    const std::int64_t n = dst->size();
    for (std::int64_t i = 0; i < n; ++i) pd[i] += ps[i];
}

// Single-input unary op with pointwise gradient factor computed from saved
// tensors. Keeps the recording boilerplate in one place.
template <typename Fwd, typename Bwd>
Tensor unary_op(const char* name, const Tensor& t, Fwd fwd, Bwd make_grad) {
    Tensor out(t.shape());
    const double* pi = t.data();
    double* po = out.data();
    const std::int64_t n = t.size();
    for (std::int64_t i = 0; i < n; ++i) po[i] = fwd(pi[i]);
    Tape* tp = Tape::active();
    if (tracked(t, tp)) {
        out.node = tp->record(name, {t.node}, out.shape(), make_grad(t, out));
        out.tape = tp->id();
    }
    return out;
}

struct AxisPlan {
    Shape out_shape;        // with keepdims as requested
    Shape keep_shape;       // reduced dims kept as 1
    std::int64_t count = 1; // number of elements folded into each output slot
    std::vector<std::int64_t> out_stride_per_in_dim;
    std::vector<bool> reduced;
};

AxisPlan reduction_plan(const char* op, const Shape& in,
                        const std::vector<int>& axes, bool keepdims) {
    const int r = static_cast<int>(in.size());
    AxisPlan plan;
    plan.reduced.assign(static_cast<std::size_t>(r), false);
    if (axes.empty()) plan.reduced.assign(static_cast<std::size_t>(r), true);
    for (int a : axes) {
        if (a < 0 || a >= r) {
            throw ShapeError(std::string(op) + ": axis " + std::to_string(a) +
                             " out of range for " + shape_str(in));
        }
        plan.reduced[static_cast<std::size_t>(a)] = true;
    }
    for (int i = 0; i < r; ++i) {
        auto iu = static_cast<std::size_t>(i);
        if (plan.reduced[iu]) {
            plan.count *= in[iu];
            plan.keep_shape.push_back(1);
            if (keepdims) plan.out_shape.push_back(1);
        } else {
            plan.keep_shape.push_back(in[iu]);
            plan.out_shape.push_back(in[iu]);
        }
    }
    auto keep_strides = row_major_strides(plan.keep_shape);
    plan.out_stride_per_in_dim.resize(static_cast<std::size_t>(r));
    for (int i = 0; i < r; ++i) {
        auto iu = static_cast<std::size_t>(i);
        plan.out_stride_per_in_dim[iu] = plan.reduced[iu] ? 0 : keep_strides[iu];
    }
    return plan;
}

// Applies `f(out_offset, value)` over every input element.
template <typename F>
void for_each_reduced(const Tensor& t, const AxisPlan& plan, F f) {
    const Shape& in = t.shape();
    const int r = static_cast<int>(in.size());
    std::vector<int> idx(static_cast<std::size_t>(r), 0);
    const double* p = t.data();
    const std::int64_t n = t.size();
    std::int64_t off = 0;
    for (std::int64_t i = 0; i < n; ++i) {
        f(off, p[i]);
        for (int d = r - 1; d >= 0; --d) {
            auto du = static_cast<std::size_t>(d);
            if (++idx[du] < in[du]) {
                off += plan.out_stride_per_in_dim[du];
                break;
            }
            idx[du] = 0;
            off -= plan.out_stride_per_in_dim[du] * (in[du] - 1);
        }
    }
}

// Broadcast a keep-shape gradient back over the reduced dims, scaling each
// contribution by `factor(out_offset, input_index)`.
template <typename F>
Tensor spread_reduced(const Tensor& g_keep, const Shape& in_shape,
                      const AxisPlan& plan, F factor) {
    Tensor out(in_shape);
    const int r = static_cast<int>(in_shape.size());
    std::vector<int> idx(static_cast<std::size_t>(r), 0);
    const double* pg = g_keep.data();
    double* po = out.data();
    const std::int64_t n = out.size();
    std::int64_t off = 0;
    for (std::int64_t i = 0; i < n; ++i) {
        po[i] = pg[off] * factor(off, i);
        for (int d = r - 1; d >= 0; --d) {
            auto du = static_cast<std::size_t>(d);
            if (++idx[du] < in_shape[du]) {
                off += plan.out_stride_per_in_dim[du];
                break;
            }
            idx[du] = 0;
            off -= plan.out_stride_per_in_dim[du] * (in_shape[du] - 1);
        }
    }
    return out;
}

Tensor reshape_keepdims(const Tensor& g, const Shape& keep_shape) {
    Tensor out(keep_shape, std::vector<double>(g.data(), g.data() + g.size()));
    return out;
}

struct ConvDims {
    int n, ci, h, w, co, k, pad;
    bool batched;
};

ConvDims conv_dims(const Tensor& x, const Tensor& w) {
    ConvDims d{};
    if (x.rank() == 4) {
        d.batched = true;
        d.n = x.dim(0);
        d.ci = x.dim(1);
        d.h = x.dim(2);
        d.w = x.dim(3);
    } else if (x.rank() == 3) {
        d.batched = false;
        d.n = 1;
        d.ci = x.dim(0);
        d.h = x.dim(1);
        d.w = x.dim(2);
    } else {
        throw ShapeError("conv2d: input must be rank 3 or 4, got " +
                         shape_str(x.shape()));
    }
    if (w.rank() != 4 || w.dim(1) != d.ci) shape_fail("conv2d", x.shape(), w.shape());
    if (w.dim(2) != w.dim(3) || w.dim(2) % 2 == 0) {
        throw ShapeError("conv2d: kernel must be square with odd size, got " +
                         shape_str(w.shape()));
    }
    d.co = w.dim(0);
    d.k = w.dim(2);
    d.pad = (d.k - 1) / 2;
    return d;
}

void im2col(const double* img, const ConvDims& d, double* col) {
    // col is (ci*k*k) x (h*w), row-major
    const int hw = d.h * d.w;
    for (int c = 0; c < d.ci; ++c) {
        for (int ky = 0; ky < d.k; ++ky) {
            for (int kx = 0; kx < d.k; ++kx) {
                double* row = col + (static_cast<std::int64_t>(c) * d.k * d.k +
                                     ky * d.k + kx) * hw;
                const int dy = ky - d.pad;
                const int dx = kx - d.pad;
                for (int y = 0; y < d.h; ++y) {
                    const int sy = y + dy;
                    double* out_row = row + static_cast<std::int64_t>(y) * d.w;
                    if (sy < 0 || sy >= d.h) {
                        std::memset(out_row, 0, sizeof(double) * static_cast<std::size_t>(d.w));
                        continue;
                    }
                    const double* src = img + (static_cast<std::int64_t>(c) * d.h + sy) * d.w;
                    for (int xq = 0; xq < d.w; ++xq) {
                        const int sx = xq + dx;
                        out_row[xq] = (sx < 0 || sx >= d.w) ? 0.0 : src[sx];
                    }
                }
            }
        }
    }
}

void col2im_add(const double* col, const ConvDims& d, double* img) {
    const int hw = d.h * d.w;
    for (int c = 0; c < d.ci; ++c) {
        for (int ky = 0; ky < d.k; ++ky) {
            for (int kx = 0; kx < d.k; ++kx) {
                const double* row = col + (static_cast<std::int64_t>(c) * d.k * d.k +
                                           ky * d.k + kx) * hw;
                const int dy = ky - d.pad;
                const int dx = kx - d.pad;
                for (int y = 0; y < d.h; ++y) {
                    const int sy = y + dy;
                    if (sy < 0 || sy >= d.h) continue;
                    double* dst = img + (static_cast<std::int64_t>(c) * d.h + sy) * d.w;
                    const double* src = row + static_cast<std::int64_t>(y) * d.w;
                    for (int xq = 0; xq < d.w; ++xq) {
                        const int sx = xq + dx;
                        if (sx >= 0 && sx < d.w) dst[sx] += src[xq];
                    }
                }
            }
        }
    }
}

}  // namespace

std::int64_t numel(const Shape& s) {
    std::int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << ',';
        os << s[i];
    }
    os << ']';
    return os.str();
}

Tensor::Tensor(Shape shape) : shape_(std::move(shape)) {
    for (int d : shape_) {
        if (d <= 0) throw ShapeError("tensor dims must be positive, got " + shape_str(shape_));
    }
    data_ = std::make_shared<std::vector<double>>(
        static_cast<std::size_t>(numel(shape_)), 0.0);
}

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)) {
    if (numel(shape_) != static_cast<std::int64_t>(values.size())) {
        throw ShapeError("tensor data length " + std::to_string(values.size()) +
                         " does not match shape " + shape_str(shape_));
    }
    data_ = std::make_shared<std::vector<double>>(std::move(values));
}

Tensor Tensor::scalar(double v) { return Tensor({}, {v}); }

Tensor Tensor::full(Shape shape, double v) {
    Tensor t(std::move(shape));
    std::fill(t.data_->begin(), t.data_->end(), v);
    return t;
}

double Tensor::value() const {
    if (size() != 1) {
        throw ShapeError("expected a scalar, got shape " + shape_str(shape_));
    }
    return (*data_)[0];
}

double Tensor::at(std::initializer_list<int> idx) const {
    auto strides = row_major_strides(shape_);
    std::int64_t off = 0;
    std::size_t i = 0;
    for (int v : idx) off += strides[i++] * v;
    return (*data_)[static_cast<std::size_t>(off)];
}

Tensor Tensor::clone() const {
    Tensor t;
    t.shape_ = shape_;
    t.data_ = std::make_shared<std::vector<double>>(*data_);
    return t;
}

Tape::Tape() : id_(g_tape_counter.fetch_add(1)) {
    prev_ = g_active_tape;
    g_active_tape = this;
}

Tape::~Tape() { g_active_tape = prev_; }

Tape* Tape::active() { return g_active_tape; }

void Tape::watch(Tensor& t) {
    t.node = record("leaf", {}, t.shape(), nullptr);
    t.tape = id_;
    leaves_.push_back(t.node);
}

int Tape::record(const char* op, std::vector<int> parents, Shape shape, GradFn fn) {
    nodes_.push_back(Node{op, std::move(parents), std::move(shape), std::move(fn)});
    return static_cast<int>(nodes_.size()) - 1;
}

std::unordered_map<int, Tensor> Tape::backward(const Tensor& loss) {
    if (consumed_) {
        throw std::logic_error("tape already consumed; rebuild the forward pass");
    }
    if (loss.tape != id_ || loss.node < 0) {
        throw std::logic_error("backward: loss is not connected to this tape");
    }
    if (loss.size() != 1) {
        throw ShapeError("backward: loss must be scalar, got " + shape_str(loss.shape()));
    }
    consumed_ = true;

    std::vector<std::optional<Tensor>> grads(nodes_.size());
    grads[static_cast<std::size_t>(loss.node)] =
        Tensor::full(nodes_[static_cast<std::size_t>(loss.node)].shape, 1.0);

    for (int i = loss.node; i >= 0; --i) {
        auto iu = static_cast<std::size_t>(i);
        if (!grads[iu]) continue;
        const Node& node = nodes_[iu];
        if (!node.fn) continue;  // leaf
        std::vector<Tensor> parent_grads = node.fn(*grads[iu]);
        if (parent_grads.size() != node.parents.size()) {
            throw std::logic_error(std::string("backward: op '") + node.op +
                                   "' returned wrong gradient count");
        }
        for (std::size_t j = 0; j < node.parents.size(); ++j) {
            accumulate(grads[static_cast<std::size_t>(node.parents[j])],
                       std::move(parent_grads[j]));
        }
        grads[iu].reset();  // free as we go
    }

    std::unordered_map<int, Tensor> out;
    for (int leaf : leaves_) {
        auto lu = static_cast<std::size_t>(leaf);
        out[leaf] = grads[lu] ? *grads[lu] : Tensor(nodes_[lu].shape);
    }
    return out;
}

NoTape::NoTape() : saved_(g_active_tape) { g_active_tape = nullptr; }
NoTape::~NoTape() { g_active_tape = saved_; }

bool tracked(const Tensor& t, const Tape* tp) {
    return tp != nullptr && t.node >= 0 && t.tape == tp->id();
}

Tensor reduce_to_shape(const Tensor& g, const Shape& target) {
    if (g.shape() == target) return g;
    const int rg = g.rank();
    const int rt = static_cast<int>(target.size());
    std::vector<int> axes;
    for (int i = 0; i < rg; ++i) {
        const int td = i < rg - rt ? 1 : target[static_cast<std::size_t>(i - (rg - rt))];
        if (td == 1 && g.dim(i) != 1) axes.push_back(i);
        else if (i < rg - rt) axes.push_back(i);
    }
    Tensor r = axes.empty() ? g : sum(g, axes, true);
    if (r.shape() != target) {
        r = Tensor(target, std::vector<double>(r.data(), r.data() + r.size()));
    }
    return r;
}

// ---- elementwise binaries ---------------------------------------------------

namespace {

template <typename F, typename MakeGrad>
Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, F f,
                 MakeGrad make_grad) {
    Tensor out = elementwise_binary(name, a, b, f);
    Tape* tp = Tape::active();
    const bool ta = tracked(a, tp);
    const bool tb = tracked(b, tp);
    if (ta || tb) {
        std::vector<int> parents;
        if (ta) parents.push_back(a.node);
        if (tb) parents.push_back(b.node);
        out.node = tp->record(name, std::move(parents), out.shape(),
                              make_grad(ta, tb));
        out.tape = tp->id();
    }
    return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    return binary_op(
        "add", a, b, [](double x, double y) { return x + y; },
        [&](bool ta, bool tb) -> GradFn {
            const Shape sa = a.shape(), sb = b.shape();
            return [ta, tb, sa, sb](const Tensor& g) {
                std::vector<Tensor> gs;
                if (ta) gs.push_back(reduce_to_shape(g, sa));
                if (tb) gs.push_back(reduce_to_shape(g, sb));
                return gs;
            };
        });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary_op(
        "sub", a, b, [](double x, double y) { return x - y; },
        [&](bool ta, bool tb) -> GradFn {
            const Shape sa = a.shape(), sb = b.shape();
            return [ta, tb, sa, sb](const Tensor& g) {
                std::vector<Tensor> gs;
                if (ta) gs.push_back(reduce_to_shape(g, sa));
                if (tb) gs.push_back(reduce_to_shape(neg(g), sb));
                return gs;
            };
        });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary_op(
        "mul", a, b, [](double x, double y) { return x * y; },
        [&](bool ta, bool tb) -> GradFn {
            const Tensor av = a, bv = b;
            return [ta, tb, av, bv](const Tensor& g) {
                std::vector<Tensor> gs;
                if (ta) gs.push_back(reduce_to_shape(
                    elementwise_binary("mul", g, bv, [](double x, double y) { return x * y; }),
                    av.shape()));
                if (tb) gs.push_back(reduce_to_shape(
                    elementwise_binary("mul", g, av, [](double x, double y) { return x * y; }),
                    bv.shape()));
                return gs;
            };
        });
}

Tensor div(const Tensor& a, const Tensor& b) {
    const double* pb = b.data();
    for (std::int64_t i = 0; i < b.size(); ++i) {
        if (pb[i] == 0.0) {
            throw NumericalError("div: zero denominator (stabilizers are the caller's job)");
        }
    }
    return binary_op(
        "div", a, b, [](double x, double y) { return x / y; },
        [&](bool ta, bool tb) -> GradFn {
            const Tensor av = a, bv = b;
            return [ta, tb, av, bv](const Tensor& g) {
                std::vector<Tensor> gs;
                if (ta) gs.push_back(reduce_to_shape(
                    elementwise_binary("div", g, bv, [](double x, double y) { return x / y; }),
                    av.shape()));
                if (tb) {
                    Tensor t = elementwise_binary("mul", g, av,
                                                  [](double x, double y) { return x * y; });
                    t = elementwise_binary("div", t, bv,
                                           [](double x, double y) { return -x / (y * y); });
                    gs.push_back(reduce_to_shape(t, bv.shape()));
                }
                return gs;
            };
        });
}

Tensor scale(const Tensor& t, double c) {
    return unary_op(
        "scale", t, [c](double x) { return c * x; },
        [c](const Tensor&, const Tensor&) -> GradFn {
            return [c](const Tensor& g) {
                Tensor r(g.shape());
                const double* pg = g.data();
                double* pr = r.data();
                for (std::int64_t i = 0; i < g.size(); ++i) pr[i] = c * pg[i];
                return std::vector<Tensor>{r};
            };
        });
}

Tensor add_scalar(const Tensor& t, double c) {
    return unary_op(
        "add_scalar", t, [c](double x) { return x + c; },
        [](const Tensor&, const Tensor&) -> GradFn {
            return [](const Tensor& g) { return std::vector<Tensor>{g}; };
        });
}

Tensor neg(const Tensor& t) { return scale(t, -1.0); }

Tensor relu(const Tensor& t) {
    return unary_op(
        "relu", t, [](double x) { return x > 0.0 ? x : 0.0; },
        [](const Tensor& in, const Tensor&) -> GradFn {
            return [in](const Tensor& g) {
                Tensor out(in.shape());
                const double* pi = in.data();
                const double* pg = g.data();
                double* po = out.data();
                for (std::int64_t i = 0; i < in.size(); ++i) {
                    po[i] = pi[i] > 0.0 ? pg[i] : 0.0;
                }
                return std::vector<Tensor>{out};
            };
        });
}

Tensor tanh(const Tensor& t) {
    return unary_op(
        "tanh", t, [](double x) { return std::tanh(x); },
        [](const Tensor&, const Tensor& out) -> GradFn {
            return [out](const Tensor& g) {
                Tensor r(out.shape());
                const double* py = out.data();
                const double* pg = g.data();
                double* pr = r.data();
                for (std::int64_t i = 0; i < out.size(); ++i) {
                    pr[i] = pg[i] * (1.0 - py[i] * py[i]);
                }
                return std::vector<Tensor>{r};
            };
        });
}

Tensor sigmoid(const Tensor& t) {
    return unary_op(
        "sigmoid", t,
        [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
        [](const Tensor&, const Tensor& out) -> GradFn {
            return [out](const Tensor& g) {
                Tensor r(out.shape());
                const double* py = out.data();
                const double* pg = g.data();
                double* pr = r.data();
                for (std::int64_t i = 0; i < out.size(); ++i) {
                    pr[i] = pg[i] * py[i] * (1.0 - py[i]);
                }
                return std::vector<Tensor>{r};
            };
        });
}

Tensor exp(const Tensor& t) {
    return unary_op(
        "exp", t, [](double x) { return std::exp(x); },
        [](const Tensor&, const Tensor& out) -> GradFn {
            return [out](const Tensor& g) {
                Tensor r(out.shape());
                const double* py = out.data();
                const double* pg = g.data();
                double* pr = r.data();
                for (std::int64_t i = 0; i < out.size(); ++i) pr[i] = pg[i] * py[i];
                return std::vector<Tensor>{r};
            };
        });
}

Tensor sqrt(const Tensor& t) {
    return unary_op(
        "sqrt", t, [](double x) { return std::sqrt(x); },
        [](const Tensor&, const Tensor& out) -> GradFn {
            return [out](const Tensor& g) {
                Tensor r(out.shape());
                const double* py = out.data();
                const double* pg = g.data();
                double* pr = r.data();
                for (std::int64_t i = 0; i < out.size(); ++i) {
                    pr[i] = pg[i] / (2.0 * py[i]);
                }
                return std::vector<Tensor>{r};
            };
        });
}

Tensor clamp(const Tensor& t, double lo, double hi) {
    return unary_op(
        "clamp", t,
        [lo, hi](double x) { return x < lo ? lo : (x > hi ? hi : x); },
        [lo, hi](const Tensor& in, const Tensor&) -> GradFn {
            return [in, lo, hi](const Tensor& g) {
                Tensor r(in.shape());
                const double* pi = in.data();
                const double* pg = g.data();
                double* pr = r.data();
                for (std::int64_t i = 0; i < in.size(); ++i) {
                    pr[i] = (pi[i] >= lo && pi[i] <= hi) ? pg[i] : 0.0;
                }
                return std::vector<Tensor>{r};
            };
        });
}

// ---- linear algebra ---------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    check_rank("matmul", a, 2);
    check_rank("matmul", b, 2);
    if (a.dim(1) != b.dim(0)) shape_fail("matmul", a.shape(), b.shape());
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out({m, n});
    {
        ConstMapRM ma(a.data(), m, k), mb(b.data(), k, n);
        MapRM mo(out.data(), m, n);
        mo.noalias() = ma * mb;
    }
    Tape* tp = Tape::active();
    const bool ta = tracked(a, tp), tb = tracked(b, tp);
    if (ta || tb) {
        std::vector<int> parents;
        if (ta) parents.push_back(a.node);
        if (tb) parents.push_back(b.node);
        const Tensor av = a, bv = b;
        out.node = tp->record("matmul", std::move(parents), out.shape(),
                              [ta, tb, av, bv, m, k, n](const Tensor& g) {
            std::vector<Tensor> gs;
            ConstMapRM mg(g.data(), m, n);
            if (ta) {
                Tensor ga({m, k});
                ConstMapRM mb(bv.data(), k, n);
                MapRM mga(ga.data(), m, k);
                mga.noalias() = mg * mb.transpose();
                gs.push_back(std::move(ga));
            }
            if (tb) {
                Tensor gb({k, n});
                ConstMapRM ma(av.data(), m, k);
                MapRM mgb(gb.data(), k, n);
                mgb.noalias() = ma.transpose() * mg;
                gs.push_back(std::move(gb));
            }
            return gs;
        });
        out.tape = tp->id();
    }
    return out;
}

Tensor bmm(const Tensor& a, const Tensor& b) {
    check_rank("bmm", a, 3);
    check_rank("bmm", b, 3);
    if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1)) {
        shape_fail("bmm", a.shape(), b.shape());
    }
    const int nb = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
    Tensor out({nb, m, n});
    for (int i = 0; i < nb; ++i) {
        ConstMapRM ma(a.data() + static_cast<std::int64_t>(i) * m * k, m, k);
        ConstMapRM mb(b.data() + static_cast<std::int64_t>(i) * k * n, k, n);
        MapRM mo(out.data() + static_cast<std::int64_t>(i) * m * n, m, n);
        mo.noalias() = ma * mb;
    }
    Tape* tp = Tape::active();
    const bool ta = tracked(a, tp), tb = tracked(b, tp);
    if (ta || tb) {
        std::vector<int> parents;
        if (ta) parents.push_back(a.node);
        if (tb) parents.push_back(b.node);
        const Tensor av = a, bv = b;
        out.node = tp->record("bmm", std::move(parents), out.shape(),
                              [ta, tb, av, bv, nb, m, k, n](const Tensor& g) {
            std::vector<Tensor> gs;
            if (ta) {
                Tensor ga({nb, m, k});
                for (int i = 0; i < nb; ++i) {
                    ConstMapRM mg(g.data() + static_cast<std::int64_t>(i) * m * n, m, n);
                    ConstMapRM mb(bv.data() + static_cast<std::int64_t>(i) * k * n, k, n);
                    MapRM mga(ga.data() + static_cast<std::int64_t>(i) * m * k, m, k);
                    mga.noalias() = mg * mb.transpose();
                }
                gs.push_back(std::move(ga));
            }
            if (tb) {
                Tensor gb({nb, k, n});
                for (int i = 0; i < nb; ++i) {
                    ConstMapRM mg(g.data() + static_cast<std::int64_t>(i) * m * n, m, n);
                    ConstMapRM ma(av.data() + static_cast<std::int64_t>(i) * m * k, m, k);
                    MapRM mgb(gb.data() + static_cast<std::int64_t>(i) * k * n, k, n);
                    mgb.noalias() = ma.transpose() * mg;
                }
                gs.push_back(std::move(gb));
            }
            return gs;
        });
        out.tape = tp->id();
    }
    return out;
}

namespace {

Tensor transpose_values(const Tensor& t) {
    const int r = t.rank();
    const int nb = r == 3 ? t.dim(0) : 1;
    const int m = t.dim(r - 2), n = t.dim(r - 1);
    Shape os = t.shape();
    std::swap(os[static_cast<std::size_t>(r - 2)], os[static_cast<std::size_t>(r - 1)]);
    Tensor out(os);
    for (int b = 0; b < nb; ++b) {
        const double* src = t.data() + static_cast<std::int64_t>(b) * m * n;
        double* dst = out.data() + static_cast<std::int64_t>(b) * m * n;
        for (int i = 0; i < m; ++i) {
            for (int j = 0; j < n; ++j) {
                dst[static_cast<std::int64_t>(j) * m + i] = src[static_cast<std::int64_t>(i) * n + j];
            }
        }
    }
    return out;
}

}  // namespace

Tensor transpose2d(const Tensor& t) {
    if (t.rank() != 2 && t.rank() != 3) {
        throw ShapeError("transpose2d: expected rank 2 or 3, got " + shape_str(t.shape()));
    }
    Tensor out = transpose_values(t);
    Tape* tp = Tape::active();
    if (tracked(t, tp)) {
        out.node = tp->record("transpose2d", {t.node}, out.shape(), [](const Tensor& g) {
            return std::vector<Tensor>{transpose_values(g)};
        });
        out.tape = tp->id();
    }
    return out;
}

Tensor reshape(const Tensor& t, Shape shape) {
    if (numel(shape) != t.size()) {
        throw ShapeError("reshape: cannot view " + shape_str(t.shape()) + " as " +
                         shape_str(shape));
    }
    Tensor out(shape, std::vector<double>(t.data(), t.data() + t.size()));
    Tape* tp = Tape::active();
    if (tracked(t, tp)) {
        const Shape in_shape = t.shape();
        out.node = tp->record("reshape", {t.node}, out.shape(), [in_shape](const Tensor& g) {
            return std::vector<Tensor>{
                Tensor(in_shape, std::vector<double>(g.data(), g.data() + g.size()))};
        });
        out.tape = tp->id();
    }
    return out;
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    const int r = parts[0].rank();
    if (axis < 0 || axis >= r) {
        throw ShapeError("concat: axis " + std::to_string(axis) + " out of range for " +
                         shape_str(parts[0].shape()));
    }
    Shape os = parts[0].shape();
    int total = 0;
    for (const Tensor& p : parts) {
        if (p.rank() != r) shape_fail("concat", parts[0].shape(), p.shape());
        for (int i = 0; i < r; ++i) {
            if (i != axis && p.dim(i) != os[static_cast<std::size_t>(i)]) {
                shape_fail("concat", parts[0].shape(), p.shape());
            }
        }
        total += p.dim(axis);
    }
    os[static_cast<std::size_t>(axis)] = total;
    Tensor out(os);

    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= os[static_cast<std::size_t>(i)];
    for (int i = axis + 1; i < r; ++i) inner *= os[static_cast<std::size_t>(i)];

    std::int64_t offset = 0;
    std::vector<std::int64_t> part_offsets;
    for (const Tensor& p : parts) {
        part_offsets.push_back(offset);
        const std::int64_t rows = p.dim(axis) * inner;
        for (std::int64_t o = 0; o < outer; ++o) {
            std::memcpy(out.data() + (o * total * inner) + offset * inner,
                        p.data() + o * rows, sizeof(double) * static_cast<std::size_t>(rows));
        }
        offset += p.dim(axis);
    }

    Tape* tp = Tape::active();
    std::vector<int> parents;
    std::vector<std::size_t> tracked_idx;
    for (std::size_t i = 0; i < parts.size(); ++i) {
        if (tracked(parts[i], tp)) {
            parents.push_back(parts[i].node);
            tracked_idx.push_back(i);
        }
    }
    if (!parents.empty()) {
        std::vector<Shape> shapes;
        std::vector<std::int64_t> offsets;
        for (std::size_t i : tracked_idx) {
            shapes.push_back(parts[i].shape());
            offsets.push_back(part_offsets[i]);
        }
        out.node = tp->record("concat", std::move(parents), out.shape(),
                              [shapes, offsets, axis, outer, inner, total](const Tensor& g) {
            std::vector<Tensor> gs;
            for (std::size_t j = 0; j < shapes.size(); ++j) {
                Tensor part(shapes[j]);
                const std::int64_t rows =
                    shapes[j][static_cast<std::size_t>(axis)] * inner;
                for (std::int64_t o = 0; o < outer; ++o) {
                    std::memcpy(part.data() + o * rows,
                                g.data() + (o * total * inner) + offsets[j] * inner,
                                sizeof(double) * static_cast<std::size_t>(rows));
                }
                gs.push_back(std::move(part));
            }
            return gs;
        });
        out.tape = tp->id();
    }
    return out;
}

// ---- convolution & resampling ----------------------------------------------

Tensor conv2d(const Tensor& x, const Tensor& w) {
    const ConvDims d = conv_dims(x, w);
    const int hw = d.h * d.w;
    const int ck = d.ci * d.k * d.k;
    Shape os = d.batched ? Shape{d.n, d.co, d.h, d.w} : Shape{d.co, d.h, d.w};
    Tensor out(os);
    std::vector<double> col(static_cast<std::size_t>(ck) * hw);
    ConstMapRM wm(w.data(), d.co, ck);
    for (int n = 0; n < d.n; ++n) {
        im2col(x.data() + static_cast<std::int64_t>(n) * d.ci * hw, d, col.data());
        ConstMapRM mc(col.data(), ck, hw);
        MapRM mo(out.data() + static_cast<std::int64_t>(n) * d.co * hw, d.co, hw);
        mo.noalias() = wm * mc;
    }

    Tape* tp = Tape::active();
    const bool tx = tracked(x, tp), tw = tracked(w, tp);
    if (tx || tw) {
        std::vector<int> parents;
        if (tx) parents.push_back(x.node);
        if (tw) parents.push_back(w.node);
        const Tensor xv = x, wv = w;
        out.node = tp->record("conv2d", std::move(parents), out.shape(),
                              [tx, tw, xv, wv, d, hw, ck](const Tensor& g) {
            std::vector<Tensor> gs;
            std::vector<double> col(static_cast<std::size_t>(ck) * hw);
            if (tx) {
                Tensor gx(xv.shape());
                ConstMapRM wm(wv.data(), d.co, ck);
                std::vector<double> colgrad(static_cast<std::size_t>(ck) * hw);
                for (int n = 0; n < d.n; ++n) {
                    ConstMapRM mg(g.data() + static_cast<std::int64_t>(n) * d.co * hw,
                                  d.co, hw);
                    MapRM mcg(colgrad.data(), ck, hw);
                    mcg.noalias() = wm.transpose() * mg;
                    col2im_add(colgrad.data(), d,
                               gx.data() + static_cast<std::int64_t>(n) * d.ci * hw);
                }
                gs.push_back(std::move(gx));
            }
            if (tw) {
                Tensor gw(wv.shape());
                MapRM mgw(gw.data(), d.co, ck);
                for (int n = 0; n < d.n; ++n) {
                    im2col(xv.data() + static_cast<std::int64_t>(n) * d.ci * hw, d,
                           col.data());
                    ConstMapRM mc(col.data(), ck, hw);
                    ConstMapRM mg(g.data() + static_cast<std::int64_t>(n) * d.co * hw,
                                  d.co, hw);
                    mgw.noalias() += mg * mc.transpose();
                }
                gs.push_back(std::move(gw));
            }
            return gs;
        });
        out.tape = tp->id();
    }
    return out;
}

namespace {

struct PoolDims {
    int n, c, h, w;
    bool batched;
};

PoolDims pool_dims(const char* op, const Tensor& x) {
    PoolDims d{};
    if (x.rank() == 4) {
        d = {x.dim(0), x.dim(1), x.dim(2), x.dim(3), true};
    } else if (x.rank() == 3) {
        d = {1, x.dim(0), x.dim(1), x.dim(2), false};
    } else {
        throw ShapeError(std::string(op) + ": expected rank 3 or 4, got " +
                         shape_str(x.shape()));
    }
    return d;
}

}  // namespace

Tensor avg_pool2(const Tensor& x) {
    const PoolDims d = pool_dims("avg_pool2", x);
    if (d.h % 2 != 0 || d.w % 2 != 0) {
        throw ShapeError("avg_pool2: spatial dims must be even, got " + shape_str(x.shape()));
    }
    const int oh = d.h / 2, ow = d.w / 2;
    Shape os = d.batched ? Shape{d.n, d.c, oh, ow} : Shape{d.c, oh, ow};
    Tensor out(os);
    const std::int64_t planes = static_cast<std::int64_t>(d.n) * d.c;
    for (std::int64_t p = 0; p < planes; ++p) {
        const double* src = x.data() + p * d.h * d.w;
        double* dst = out.data() + p * oh * ow;
        for (int y = 0; y < oh; ++y) {
            for (int xq = 0; xq < ow; ++xq) {
                const double* s = src + (2 * y) * d.w + 2 * xq;
                dst[static_cast<std::int64_t>(y) * ow + xq] =
                    0.25 * (s[0] + s[1] + s[d.w] + s[d.w + 1]);
            }
        }
    }
    Tape* tp = Tape::active();
    if (tracked(x, tp)) {
        const Shape in_shape = x.shape();
        out.node = tp->record("avg_pool2", {x.node}, out.shape(),
                              [in_shape, d, oh, ow, planes](const Tensor& g) {
            Tensor gx(in_shape);
            for (std::int64_t p = 0; p < planes; ++p) {
                const double* gs = g.data() + p * oh * ow;
                double* gd = gx.data() + p * d.h * d.w;
                for (int y = 0; y < oh; ++y) {
                    for (int xq = 0; xq < ow; ++xq) {
                        const double v = 0.25 * gs[static_cast<std::int64_t>(y) * ow + xq];
                        double* t = gd + (2 * y) * d.w + 2 * xq;
                        t[0] += v;
                        t[1] += v;
                        t[d.w] += v;
                        t[d.w + 1] += v;
                    }
                }
            }
            return std::vector<Tensor>{gx};
        });
        out.tape = tp->id();
    }
    return out;
}

Tensor upsample_nearest2(const Tensor& x) {
    const PoolDims d = pool_dims("upsample_nearest2", x);
    const int oh = d.h * 2, ow = d.w * 2;
    Shape os = d.batched ? Shape{d.n, d.c, oh, ow} : Shape{d.c, oh, ow};
    Tensor out(os);
    const std::int64_t planes = static_cast<std::int64_t>(d.n) * d.c;
    for (std::int64_t p = 0; p < planes; ++p) {
        const double* src = x.data() + p * d.h * d.w;
        double* dst = out.data() + p * oh * ow;
        for (int y = 0; y < d.h; ++y) {
            for (int xq = 0; xq < d.w; ++xq) {
                const double v = src[static_cast<std::int64_t>(y) * d.w + xq];
                double* t = dst + (2 * y) * ow + 2 * xq;
                t[0] = v;
                t[1] = v;
                t[ow] = v;
                t[ow + 1] = v;
            }
        }
    }
    Tape* tp = Tape::active();
    if (tracked(x, tp)) {
        const Shape in_shape = x.shape();
        out.node = tp->record("upsample_nearest2", {x.node}, out.shape(),
                              [in_shape, d, oh, ow, planes](const Tensor& g) {
            Tensor gx(in_shape);
            for (std::int64_t p = 0; p < planes; ++p) {
                const double* gs = g.data() + p * oh * ow;
                double* gd = gx.data() + p * d.h * d.w;
                for (int y = 0; y < d.h; ++y) {
                    for (int xq = 0; xq < d.w; ++xq) {
                        const double* t = gs + (2 * y) * ow + 2 * xq;
                        gd[static_cast<std::int64_t>(y) * d.w + xq] =
                            t[0] + t[1] + t[ow] + t[ow + 1];
                    }
                }
            }
            return std::vector<Tensor>{gx};
        });
        out.tape = tp->id();
    }
    return out;
}

// ---- reductions -------------------------------------------------------------

Tensor sum(const Tensor& t, const std::vector<int>& axes, bool keepdims) {
    const AxisPlan plan = reduction_plan("sum", t.shape(), axes, keepdims);
    Tensor out(plan.out_shape);
    double* po = out.data();
    for_each_reduced(t, plan, [po](std::int64_t off, double v) { po[off] += v; });
    Tape* tp = Tape::active();
    if (tracked(t, tp)) {
        const Shape in_shape = t.shape();
        out.node = tp->record("sum", {t.node}, out.shape(), [in_shape, plan](const Tensor& g) {
            Tensor gk = reshape_keepdims(g, plan.keep_shape);
            return std::vector<Tensor>{
                spread_reduced(gk, in_shape, plan, [](std::int64_t, std::int64_t) { return 1.0; })};
        });
        out.tape = tp->id();
    }
    return out;
}

Tensor mean(const Tensor& t, const std::vector<int>& axes, bool keepdims) {
    const AxisPlan plan = reduction_plan("mean", t.shape(), axes, keepdims);
    Tensor out(plan.out_shape);
    double* po = out.data();
    for_each_reduced(t, plan, [po](std::int64_t off, double v) { po[off] += v; });
    const double inv = 1.0 / static_cast<double>(plan.count);
    for (std::int64_t i = 0; i < out.size(); ++i) po[i] *= inv;
    Tape* tp = Tape::active();
    if (tracked(t, tp)) {
        const Shape in_shape = t.shape();
        out.node = tp->record("mean", {t.node}, out.shape(),
                              [in_shape, plan, inv](const Tensor& g) {
            Tensor gk = reshape_keepdims(g, plan.keep_shape);
            return std::vector<Tensor>{spread_reduced(
                gk, in_shape, plan, [inv](std::int64_t, std::int64_t) { return inv; })};
        });
        out.tape = tp->id();
    }
    return out;
}

Tensor variance(const Tensor& t, const std::vector<int>& axes, bool keepdims) {
    const AxisPlan plan = reduction_plan("variance", t.shape(), axes, keepdims);
    Tensor mu(plan.out_shape);
    double* pm = mu.data();
    for_each_reduced(t, plan, [pm](std::int64_t off, double v) { pm[off] += v; });
    const double inv = 1.0 / static_cast<double>(plan.count);
    for (std::int64_t i = 0; i < mu.size(); ++i) pm[i] *= inv;

    Tensor out(plan.out_shape);
    double* po = out.data();
    for_each_reduced(t, plan, [po, pm](std::int64_t off, double v) {
        const double dv = v - pm[off];
        po[off] += dv * dv;
    });
    for (std::int64_t i = 0; i < out.size(); ++i) po[i] *= inv;

    Tape* tp = Tape::active();
    if (tracked(t, tp)) {
        const Shape in_shape = t.shape();
        const Tensor in = t, mu_saved = mu;
        out.node = tp->record("variance", {t.node}, out.shape(),
                              [in_shape, plan, inv, in, mu_saved](const Tensor& g) {
            Tensor gk = reshape_keepdims(g, plan.keep_shape);
            const double* pin = in.data();
            const double* pmu = mu_saved.data();
            return std::vector<Tensor>{spread_reduced(
                gk, in_shape, plan, [inv, pin, pmu](std::int64_t off, std::int64_t i) {
                    return 2.0 * inv * (pin[i] - pmu[off]);
                })};
        });
        out.tape = tp->id();
    }
    return out;
}

Tensor sum_all(const Tensor& t) { return sum(t, {}, false); }
Tensor mean_all(const Tensor& t) { return mean(t, {}, false); }

Tensor softmax(const Tensor& t, int axis) {
    const int r = t.rank();
    if (axis < 0 || axis >= r) {
        throw ShapeError("softmax: axis " + std::to_string(axis) + " out of range for " +
                         shape_str(t.shape()));
    }
    std::int64_t outer = 1, inner = 1;
    const int n = t.dim(axis);
    for (int i = 0; i < axis; ++i) outer *= t.dim(i);
    for (int i = axis + 1; i < r; ++i) inner *= t.dim(i);

    Tensor out(t.shape());
    const double* pi = t.data();
    double* po = out.data();
    for (std::int64_t o = 0; o < outer; ++o) {
        for (std::int64_t in = 0; in < inner; ++in) {
            const std::int64_t base = o * n * inner + in;
            double mx = pi[base];
            for (int j = 1; j < n; ++j) mx = std::max(mx, pi[base + j * inner]);
            double z = 0.0;
            for (int j = 0; j < n; ++j) {
                const double e = std::exp(pi[base + j * inner] - mx);
                po[base + j * inner] = e;
                z += e;
            }
            const double invz = 1.0 / z;
            for (int j = 0; j < n; ++j) po[base + j * inner] *= invz;
        }
    }
    Tape* tp = Tape::active();
    if (tracked(t, tp)) {
        const Tensor sv = out;
        out.node = tp->record("softmax", {t.node}, out.shape(),
                              [sv, outer, inner, n](const Tensor& g) {
            Tensor r(sv.shape());
            const double* ps = sv.data();
            const double* pg = g.data();
            double* pr = r.data();
            for (std::int64_t o = 0; o < outer; ++o) {
                for (std::int64_t in = 0; in < inner; ++in) {
                    const std::int64_t base = o * n * inner + in;
                    double dot = 0.0;
                    for (int j = 0; j < n; ++j) {
                        dot += pg[base + j * inner] * ps[base + j * inner];
                    }
                    for (int j = 0; j < n; ++j) {
                        const std::int64_t ix = base + j * inner;
                        pr[ix] = ps[ix] * (pg[ix] - dot);
                    }
                }
            }
            return std::vector<Tensor>{r};
        });
        out.tape = tp->id();
    }
    return out;
}

Tensor l2_norm(const Tensor& t, const std::vector<int>& axes, bool keepdims) {
    const AxisPlan plan = reduction_plan("l2_norm", t.shape(), axes, keepdims);
    Tensor out(plan.out_shape);
    double* po = out.data();
    for_each_reduced(t, plan, [po](std::int64_t off, double v) { po[off] += v * v; });
    for (std::int64_t i = 0; i < out.size(); ++i) po[i] = std::sqrt(po[i]);
    Tape* tp = Tape::active();
    if (tracked(t, tp)) {
        const Shape in_shape = t.shape();
        const Tensor in = t, norm_saved = out;
        out.node = tp->record("l2_norm", {t.node}, out.shape(),
                              [in_shape, plan, in, norm_saved](const Tensor& g) {
            Tensor gk = reshape_keepdims(g, plan.keep_shape);
            const double* pin = in.data();
            const double* pn = norm_saved.data();
            return std::vector<Tensor>{spread_reduced(
                gk, in_shape, plan, [pin, pn](std::int64_t off, std::int64_t i) {
                    return pn[off] == 0.0 ? 0.0 : pin[i] / pn[off];
                })};
        });
        out.tape = tp->id();
    }
    return out;
}

Tensor l2_norm_all(const Tensor& t) { return l2_norm(t, {}, false); }

// ---- non-differentiated helpers ---------------------------------------------

Tensor sign(const Tensor& t) {
    Tensor out(t.shape());
    const double* pi = t.data();
    double* po = out.data();
    for (std::int64_t i = 0; i < t.size(); ++i) {
        po[i] = pi[i] > 0.0 ? 1.0 : (pi[i] < 0.0 ? -1.0 : 0.0);
    }
    return out;
}

double l1_norm_value(const Tensor& t) {
    double s = 0.0;
    const double* p = t.data();
    for (std::int64_t i = 0; i < t.size(); ++i) s += std::abs(p[i]);
    return s;
}

double max_abs_value(const Tensor& t) {
    double m = 0.0;
    const double* p = t.data();
    for (std::int64_t i = 0; i < t.size(); ++i) m = std::max(m, std::abs(p[i]));
    return m;
}

bool all_finite(const Tensor& t) {
    const double* p = t.data();
    for (std::int64_t i = 0; i < t.size(); ++i) {
        if (!std::isfinite(p[i])) return false;
    }
    return true;
}

Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f,
                        const Tensor& x, double h) {
    NoTape guard;
    Tensor g(x.shape());
    Tensor probe = x.clone();
    double* pp = probe.data();
    double* pg = g.data();
    for (std::int64_t i = 0; i < x.size(); ++i) {
        const double saved = pp[i];
        pp[i] = saved + h;
        const double fp = f(probe);
        pp[i] = saved - h;
        const double fm = f(probe);
        pp[i] = saved;
        pg[i] = (fp - fm) / (2.0 * h);
    }
    return g;
}

}  // namespace aef
