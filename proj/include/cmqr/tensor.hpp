#pragma once

// Dense 64-bit arrays with a reverse-mode gradient tape.
//
// Values live in row-major Eigen matrices. Rank-1 quantities are stored as
// 1 x n rows. Every differentiable op is a free function taking and
// returning `Var` handles into a `Tape`; calling `Tape::backward` replays the
// recorded closures in reverse creation order, which is a valid reverse
// topological order because a node can only consume earlier nodes.

#include <Eigen/Dense>

#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace cmqr {

using Scalar = double;
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Index = Eigen::Index;

class DimensionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

std::string shape_string(const Matrix& m);

struct Parameter;
class Tape;

/// Handle to a node on a tape. Cheap to copy; valid until the tape is cleared.
class Var {
public:
    Var() = default;
    Var(Tape* tape, int id) : tape_(tape), id_(id) {}

    const Matrix& value() const;
    /// Gradient accumulated by the last backward pass (zeros if none reached it).
    Matrix grad() const;
    Index rows() const { return value().rows(); }
    Index cols() const { return value().cols(); }
    Scalar item() const;
    bool requires_grad() const;

    Tape* tape() const { return tape_; }
    int id() const { return id_; }
    bool valid() const { return tape_ != nullptr; }

private:
    Tape* tape_ = nullptr;
    int id_ = -1;
};

/// dst = lhs * rhs, or dst += lhs * rhs when `add`. Products with at most
/// four rows run as one matrix-vector product per row.
template <typename D, typename L, typename R>
void multiply_into(Eigen::MatrixBase<D>& dst, const Eigen::MatrixBase<L>& lhs,
                   const Eigen::MatrixBase<R>& rhs, bool add) {
    if (lhs.rows() <= 4) {
        for (Index i = 0; i < lhs.rows(); ++i) {
            if (add) {
                dst.row(i).noalias() += lhs.row(i) * rhs;
            } else {
                dst.row(i).noalias() = lhs.row(i) * rhs;
            }
        }
    } else if (add) {
        dst.noalias() += lhs * rhs;
    } else {
        dst.noalias() = lhs * rhs;
    }
}

class Tape {
public:
    /// Called with the tape and the id of the node being differentiated.
    using Backward = std::function<void(Tape&, int)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Leaf that never accumulates gradient.
    Var constant(Matrix value);
    /// Leaf whose gradient is kept on the tape (read through Var::grad).
    Var variable(Matrix value);
    /// Leaf bound to a stored parameter; backward adds into `p.grad`. The
    /// parameter value is referenced, not copied, and must outlive the tape's
    /// use of it.
    Var parameter(Parameter& p);

    /// Records a computed node. `backward` may be empty when no input needs grad.
    Var record(Matrix value, bool requires_grad, Backward backward);

    void backward(const Var& loss);
    void clear();

    /// Adds value(input)^T * g into the gradient of weight node `id`.
    void accumulate_weight(int id, int input, const Matrix& g);

    /// Disabling skips closure recording entirely (evaluation mode).
    void set_grad_enabled(bool enabled) { grad_enabled_ = enabled; }
    bool grad_enabled() const { return grad_enabled_; }

    const Matrix& value(int id) const {
        const auto& node = nodes_[static_cast<std::size_t>(id)];
        return node.external != nullptr ? *node.external : node.value;
    }
    bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }
    /// Gradient buffer of an output node during backward (may be empty).
    const Matrix& grad_of(int id) const { return nodes_[static_cast<std::size_t>(id)].grad; }
    bool has_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].grad.size() != 0; }
    /// Adds `delta` into the gradient buffer of `id` if that node needs grad.
    /// Parameter leaves accumulate straight into the parameter's gradient.
    template <typename Derived>
    void accumulate(int id, const Eigen::MatrixBase<Derived>& delta) {
        if (!requires_grad(id)) return;
        bool fresh = false;
        Matrix& buf = grad_buffer(id, fresh);
        if (fresh) {
            buf = delta;
        } else {
            buf += delta;
        }
    }

    /// Adds lhs * rhs into the gradient buffer of `id` without a temporary.
    template <typename L, typename R>
    void accumulate_product(int id, const Eigen::MatrixBase<L>& lhs, const Eigen::MatrixBase<R>& rhs) {
        if (!requires_grad(id)) return;
        bool fresh = false;
        Matrix& buf = grad_buffer(id, fresh);
        if (fresh) buf.resize(lhs.rows(), rhs.cols());
        if (lhs.cols() == 1) {
            if (fresh) {
                buf.noalias() = lhs.col(0) * rhs.row(0);
            } else {
                buf.noalias() += lhs.col(0) * rhs.row(0);
            }
        } else {
            multiply_into(buf, lhs, rhs, !fresh);
        }
    }

    std::size_t size() const { return nodes_.size(); }

private:
    Matrix& grad_buffer(int id, bool& fresh);

    struct Node {
        Matrix value;
        Matrix grad;
        bool requires_grad = false;
        Parameter* param = nullptr;
        Backward backward;
        /// Parameter leaves read the stored value in place instead of copying it.
        const Matrix* external = nullptr;
    };

    std::deque<Node> nodes_;
    bool grad_enabled_ = true;
};

// --- linear algebra -------------------------------------------------------

Var matmul(const Var& a, const Var& b);
/// x * w + b with the 1 x n row `b` broadcast over rows.
Var affine(const Var& x, const Var& w, const Var& b);
/// Elementwise sum. `b` may also be a 1 x n row broadcast over the rows of `a`.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var hadamard(const Var& a, const Var& b);
Var scale(const Var& a, Scalar s);
/// 1 - a, elementwise.
Var one_minus(const Var& a);
/// Multiplies row i of `x` by weights[i]; `weights` has x.rows() entries.
Var scale_rows(const Var& x, const Var& weights);
/// axis 0 stacks rows, axis 1 stacks columns.
Var concat(std::span<const Var> parts, int axis);
Var concat(std::initializer_list<Var> parts, int axis);
Var slice_cols(const Var& x, Index begin, Index count);
Var transpose(const Var& x);
Var gather_rows(const Var& table, std::span<const int> ids);
Var mean_rows(const Var& x);
Var sum(const Var& x);

// --- nonlinearities -------------------------------------------------------

/// axis 1 normalizes each row; axis 0 normalizes each column.
Var softmax(const Var& x, int axis);
Var log_softmax(const Var& x, int axis);
Var gelu(const Var& x);
Var sigmoid(const Var& x);
Var tanh(const Var& x);
Var layer_norm(const Var& x, const Var& gain, const Var& bias, Scalar eps = 1e-5);

/// Forward value is `hard`; the gradient passes unchanged to `soft`.
Var straight_through(const Matrix& hard, const Var& soft);

/// Scaled dot-product attention over column blocks of width w/heads.
/// q: n_q x w, k and v: n_c x w. If `weights_out` is given it receives the
/// (heads * n_q) x n_c stack of per-head attention distributions.
Var multi_head_attention(const Var& q, const Var& k, const Var& v, int heads,
                         Matrix* weights_out = nullptr);

// --- losses ---------------------------------------------------------------

Var cross_entropy(const Var& logits, int target);
/// KL(softmax(p) || softmax(q)).
Var kl_divergence(const Var& p_logits, const Var& q_logits);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(Scalar s, const Var& a) { return scale(a, s); }

// --- plain (tape-free) helpers shared by ops, oracles and metrics ----------

template <typename Derived>
void softmax_rows_inplace(Eigen::MatrixBase<Derived>& x) {
    for (Index i = 0; i < x.rows(); ++i) {
        const auto m = x.row(i).maxCoeff();
        x.row(i) = (x.row(i).array() - m).exp().matrix();
        x.row(i) /= x.row(i).sum();
    }
}

Matrix softmax_rows(const Matrix& x);
/// Lowest index wins ties.
int argmax(const Matrix& row);
Scalar gaussian_cdf(Scalar x);

}  // namespace cmqr
