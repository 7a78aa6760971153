#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace aef {

struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Raised when a computation produces non-finite values it cannot recover from
// (NaN losses, diverged pretraining). Maps to CLI exit code 2.
struct NumericalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

using Shape = std::vector<int>;

std::int64_t numel(const Shape& s);
std::string shape_str(const Shape& s);

// Dense row-major tensor of doubles with value semantics (storage is shared
// between copies; ops never mutate their inputs and always allocate fresh
// outputs).
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape);  // zero-filled
    Tensor(Shape shape, std::vector<double> values);

    static Tensor scalar(double v);
    static Tensor full(Shape shape, double v);

    bool defined() const { return data_ != nullptr; }
    const Shape& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
    std::int64_t size() const { return data_ ? static_cast<std::int64_t>(data_->size()) : 0; }

    const double* data() const { return data_->data(); }
    double* data() { return data_->data(); }

    // Scalar extraction; hard error unless the tensor holds exactly one value.
    double value() const;
    double at(std::initializer_list<int> idx) const;

    Tensor clone() const;
    bool unique() const { return data_ && data_.use_count() == 1; }

    // Tape bookkeeping. node < 0 or tape == 0 means "not tracked".
    int node = -1;
    std::uint64_t tape = 0;

private:
    Shape shape_;
    std::shared_ptr<std::vector<double>> data_;
};

// Gradient of each tracked parent given the upstream gradient, in parent order.
using GradFn = std::function<std::vector<Tensor>(const Tensor&)>;

// Records primitive ops in execution order (a valid topological order) for a
// single reverse sweep. One tape per optimization context; contexts are
// single-threaded, so the active tape is a thread-local.
class Tape {
public:
    Tape();
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* active();
    std::uint64_t id() const { return id_; }

    // Registers a differentiable input (leaf) on this tape.
    void watch(Tensor& t);

    int record(const char* op, std::vector<int> parents, Shape shape, GradFn fn);

    // Reverse sweep from a scalar loss. Visits each node exactly once in
    // reverse topological order; gradients from multiple paths accumulate
    // additively. Returns d(loss)/d(leaf) for every watched leaf (zeros for
    // leaves the loss does not depend on) and consumes the tape.
    std::unordered_map<int, Tensor> backward(const Tensor& loss);

    int node_count() const { return static_cast<int>(nodes_.size()); }
    bool consumed() const { return consumed_; }

private:
    struct Node {
        const char* op;
        std::vector<int> parents;
        Shape shape;
        GradFn fn;  // null for leaves
    };
    std::vector<Node> nodes_;
    std::vector<int> leaves_;
    bool consumed_ = false;
    std::uint64_t id_;
    Tape* prev_ = nullptr;
};

// Temporarily deactivates the current tape (evaluation without recording).
class NoTape {
public:
    NoTape();
    ~NoTape();
    NoTape(const NoTape&) = delete;
    NoTape& operator=(const NoTape&) = delete;

private:
    Tape* saved_;
};

bool tracked(const Tensor& t, const Tape* tp);

// ---- primitive ops ---------------------------------------------------------
// Elementwise binaries broadcast with trailing-dimension alignment (a dim
// must match or be 1). Shape mismatches raise ShapeError naming the op.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);  // hard error on any zero denominator

Tensor scale(const Tensor& t, double c);
Tensor add_scalar(const Tensor& t, double c);
Tensor neg(const Tensor& t);

Tensor relu(const Tensor& t);
Tensor tanh(const Tensor& t);
Tensor sigmoid(const Tensor& t);
Tensor exp(const Tensor& t);
Tensor sqrt(const Tensor& t);
// Identity gradient inside [lo, hi] (inclusive), zero outside.
Tensor clamp(const Tensor& t, double lo, double hi);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor bmm(const Tensor& a, const Tensor& b);  // batched matmul, rank 3
Tensor transpose2d(const Tensor& t);           // swaps the last two dims (rank 2 or 3)
Tensor reshape(const Tensor& t, Shape shape);
Tensor concat(const std::vector<Tensor>& parts, int axis);

// 2-D convolution, odd kernel k, stride 1, zero padding (k-1)/2.
// x: N x Cin x H x W (or Cin x H x W), w: Cout x Cin x k x k.
Tensor conv2d(const Tensor& x, const Tensor& w);
Tensor avg_pool2(const Tensor& x);          // 2x2 mean, stride 2
Tensor upsample_nearest2(const Tensor& x);  // 2x nearest-neighbor

Tensor sum(const Tensor& t, const std::vector<int>& axes, bool keepdims);
Tensor mean(const Tensor& t, const std::vector<int>& axes, bool keepdims);
// Population variance over the given axes.
Tensor variance(const Tensor& t, const std::vector<int>& axes, bool keepdims);
Tensor sum_all(const Tensor& t);
Tensor mean_all(const Tensor& t);

Tensor softmax(const Tensor& t, int axis);  // max-subtracted

// sqrt(sum of squares) over the given axes; gradient defined as 0 where the
// norm is 0 (the only point the quotient rule breaks, and x is 0 there too).
Tensor l2_norm(const Tensor& t, const std::vector<int>& axes, bool keepdims);
Tensor l2_norm_all(const Tensor& t);

// ---- non-differentiated helpers -------------------------------------------

Tensor sign(const Tensor& t);            // elementwise {-1, 0, +1}, never taped
double l1_norm_value(const Tensor& t);   // sum of absolute values
double max_abs_value(const Tensor& t);
bool all_finite(const Tensor& t);

// Central finite differences, (f(x+h e_i) - f(x-h e_i)) / 2h per coordinate.
// The test oracle: forward evaluations only, independent of the tape.
Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f,
                        const Tensor& x, double h = 1e-6);

// Sums `g` down to `target` by reducing broadcast dimensions.
Tensor reduce_to_shape(const Tensor& g, const Shape& target);

}  // namespace aef
