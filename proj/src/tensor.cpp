#include "cmqr/tensor.hpp"

#include "cmqr/parameters.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

namespace cmqr {

std::string shape_string(const Matrix& m) {
    std::ostringstream os;
    os << "[" << m.rows() << "x" << m.cols() << "]";
    return os.str();
}

const Matrix& Var::value() const { return tape_->value(id_); }

Matrix Var::grad() const {
    if (tape_->has_grad(id_)) return tape_->grad_of(id_);
    return Matrix::Zero(rows(), cols());
}

Scalar Var::item() const {
    const auto& v = value();
    if (v.size() != 1) throw DimensionError("item() on non-scalar " + shape_string(v));
    return v(0, 0);
}

bool Var::requires_grad() const { return tape_->requires_grad(id_); }

Var Tape::constant(Matrix value) {
    nodes_.push_back(Node{std::move(value), Matrix(), false, nullptr, {}});
    return {this, static_cast<int>(nodes_.size() - 1)};
}

Var Tape::variable(Matrix value) {
    nodes_.push_back(Node{std::move(value), Matrix(), grad_enabled_, nullptr, {}});
    return {this, static_cast<int>(nodes_.size() - 1)};
}

Var Tape::parameter(Parameter& p) {
    nodes_.push_back(Node{Matrix(), Matrix(), grad_enabled_, grad_enabled_ ? &p : nullptr, {}, &p.value});
    return {this, static_cast<int>(nodes_.size() - 1)};
}

Var Tape::record(Matrix value, bool requires_grad, Backward backward) {
    const bool needs = requires_grad && grad_enabled_;
    nodes_.push_back(Node{std::move(value), Matrix(), needs, nullptr,
                          needs ? std::move(backward) : Backward{}});
    return {this, static_cast<int>(nodes_.size() - 1)};
}

void Tape::backward(const Var& loss) {
    if (loss.tape() != this) throw std::logic_error("backward: loss belongs to another tape");
    const auto& lv = value(loss.id());
    if (lv.size() != 1) throw DimensionError("backward: loss must be scalar, got " + shape_string(lv));
    for (auto& n : nodes_) n.grad.resize(0, 0);
    auto& root = nodes_[static_cast<std::size_t>(loss.id())];
    if (!root.requires_grad) return;
    if (root.param != nullptr) {
        bool fresh = false;
        Matrix& buf = grad_buffer(loss.id(), fresh);
        if (fresh) buf = Matrix::Ones(1, 1); else buf.array() += 1.0;
        return;
    }
    root.grad = Matrix::Ones(1, 1);
    for (int id = loss.id(); id >= 0; --id) {
        auto& node = nodes_[static_cast<std::size_t>(id)];
        if (node.grad.size() == 0) continue;
        if (node.backward) node.backward(*this, id);
    }
}

void Tape::accumulate_weight(int id, int input, const Matrix& g) {
    auto& node = nodes_[static_cast<std::size_t>(id)];
    if (!node.requires_grad) return;
    accumulate_product(id, value(input).transpose(), g);
}

Matrix& Tape::grad_buffer(int id, bool& fresh) {
    auto& node = nodes_[static_cast<std::size_t>(id)];
    if (node.param != nullptr) {
        fresh = !node.param->grad.has_value();
        if (fresh) node.param->grad.emplace();
        return *node.param->grad;
    }
    fresh = node.grad.size() == 0;
    return node.grad;
}

void Tape::clear() { nodes_.clear(); }

namespace {

void require_same_shape(const char* op, const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a) + " vs " +
                             shape_string(b));
    }
}

void require_finite(const char* op, const Matrix& x) {
    if (!x.allFinite()) throw NumericError(std::string(op) + ": non-finite input");
}

bool any_grad(std::initializer_list<Var> vs) {
    for (const auto& v : vs) {
        if (v.requires_grad()) return true;
    }
    return false;
}

Tape& tape_of(const Var& a) {
    if (!a.valid()) throw std::logic_error("operation on an unbound Var");
    return *a.tape();
}

constexpr Scalar kInvSqrt2 = 0.70710678118654752440;
constexpr Scalar kInvSqrt2Pi = 0.39894228040143267794;

}  // namespace

Scalar gaussian_cdf(Scalar x) { return 0.5 * std::erfc(-x * kInvSqrt2); }

Matrix softmax_rows(const Matrix& x) {
    Matrix y = x;
    softmax_rows_inplace(y);
    return y;
}

int argmax(const Matrix& row) {
    int best = 0;
    const Scalar* data = row.data();
    for (Index i = 1; i < row.size(); ++i) {
        if (data[i] > data[best]) best = static_cast<int>(i);
    }
    return best;
}

Var matmul(const Var& a, const Var& b) {
    const auto& av = a.value();
    const auto& bv = b.value();
    if (av.cols() != bv.rows()) {
        throw DimensionError("matmul: inner extents differ, " + shape_string(av) + " x " +
                             shape_string(bv));
    }
    Matrix out(av.rows(), bv.cols());
    multiply_into(out, av, bv, false);
    const int ia = a.id(), ib = b.id();
    return tape_of(a).record(std::move(out), any_grad({a, b}), [ia, ib](Tape& t, int self) {
        const auto& g = t.grad_of(self);
        if (t.requires_grad(ia)) t.accumulate_product(ia, g, t.value(ib).transpose());
        if (t.requires_grad(ib)) t.accumulate_weight(ib, ia, g);
    });
}

Var affine(const Var& x, const Var& w, const Var& b) {
    const auto& xv = x.value();
    const auto& wv = w.value();
    const auto& bv = b.value();
    if (xv.cols() != wv.rows() || bv.rows() != 1 || bv.cols() != wv.cols()) {
        throw DimensionError("affine: " + shape_string(xv) + " x " + shape_string(wv) + " + " +
                             shape_string(bv));
    }
    Matrix out(xv.rows(), wv.cols());
    multiply_into(out, xv, wv, false);
    out.rowwise() += bv.row(0);
    const int ix = x.id(), iw = w.id(), ib = b.id();
    return tape_of(x).record(std::move(out), any_grad({x, w, b}), [ix, iw, ib](Tape& t, int self) {
        const auto& g = t.grad_of(self);
        if (t.requires_grad(ix)) t.accumulate_product(ix, g, t.value(iw).transpose());
        if (t.requires_grad(iw)) t.accumulate_weight(iw, ix, g);
        if (t.requires_grad(ib)) t.accumulate(ib, g.colwise().sum());
    });
}

Var add(const Var& a, const Var& b) {
    const auto& av = a.value();
    const auto& bv = b.value();
    const int ia = a.id(), ib = b.id();
    if (bv.rows() == 1 && av.rows() != 1 && bv.cols() == av.cols()) {
        Matrix out = av.rowwise() + bv.row(0);
        return tape_of(a).record(std::move(out), any_grad({a, b}), [ia, ib](Tape& t, int self) {
            const auto& g = t.grad_of(self);
            t.accumulate(ia, g);
            if (t.requires_grad(ib)) t.accumulate(ib, g.colwise().sum());
        });
    }
    require_same_shape("add", av, bv);
    Matrix out = av + bv;
    return tape_of(a).record(std::move(out), any_grad({a, b}), [ia, ib](Tape& t, int self) {
        const auto& g = t.grad_of(self);
        t.accumulate(ia, g);
        t.accumulate(ib, g);
    });
}

Var sub(const Var& a, const Var& b) {
    require_same_shape("sub", a.value(), b.value());
    Matrix out = a.value() - b.value();
    const int ia = a.id(), ib = b.id();
    return tape_of(a).record(std::move(out), any_grad({a, b}), [ia, ib](Tape& t, int self) {
        const auto& g = t.grad_of(self);
        t.accumulate(ia, g);
        t.accumulate(ib, -g);
    });
}

Var hadamard(const Var& a, const Var& b) {
    require_same_shape("hadamard", a.value(), b.value());
    Matrix out = a.value().cwiseProduct(b.value());
    const int ia = a.id(), ib = b.id();
    return tape_of(a).record(std::move(out), any_grad({a, b}), [ia, ib](Tape& t, int self) {
        const auto& g = t.grad_of(self);
        if (t.requires_grad(ia)) t.accumulate(ia, g.cwiseProduct(t.value(ib)));
        if (t.requires_grad(ib)) t.accumulate(ib, g.cwiseProduct(t.value(ia)));
    });
}

Var scale(const Var& a, Scalar s) {
    Matrix out = a.value() * s;
    const int ia = a.id();
    return tape_of(a).record(std::move(out), a.requires_grad(),
                             [ia, s](Tape& t, int self) { t.accumulate(ia, t.grad_of(self) * s); });
}

Var one_minus(const Var& a) {
    Matrix out = (1.0 - a.value().array()).matrix();
    const int ia = a.id();
    return tape_of(a).record(std::move(out), a.requires_grad(),
                             [ia](Tape& t, int self) { t.accumulate(ia, -t.grad_of(self)); });
}

Var scale_rows(const Var& x, const Var& weights) {
    const auto& xv = x.value();
    const auto& wv = weights.value();
    if (wv.size() != xv.rows() || (wv.rows() != 1 && wv.cols() != 1)) {
        throw DimensionError("scale_rows: weights " + shape_string(wv) + " do not match rows of " +
                             shape_string(xv));
    }
    Matrix out(xv.rows(), xv.cols());
    for (Index i = 0; i < xv.rows(); ++i) out.row(i) = xv.row(i) * wv.data()[i];
    const int ix = x.id(), iw = weights.id();
    return tape_of(x).record(std::move(out), any_grad({x, weights}), [ix, iw](Tape& t, int self) {
        const auto& g = t.grad_of(self);
        const auto& xv = t.value(ix);
        const auto& wv = t.value(iw);
        if (t.requires_grad(ix)) {
            Matrix dx(g.rows(), g.cols());
            for (Index i = 0; i < g.rows(); ++i) dx.row(i) = g.row(i) * wv.data()[i];
            t.accumulate(ix, dx);
        }
        if (t.requires_grad(iw)) {
            Matrix dw(wv.rows(), wv.cols());
            for (Index i = 0; i < g.rows(); ++i) dw.data()[i] = g.row(i).dot(xv.row(i));
            t.accumulate(iw, dw);
        }
    });
}

Var concat(std::span<const Var> parts, int axis) {
    if (parts.empty()) throw DimensionError("concat: no parts");
    if (axis != 0 && axis != 1) throw DimensionError("concat: axis must be 0 or 1");
    const auto& first = parts.front().value();
    Index rows = 0, cols = 0;
    std::vector<int> ids;
    std::vector<Index> extents;
    bool needs = false;
    for (const auto& p : parts) {
        const auto& v = p.value();
        if (axis == 1 && v.rows() != first.rows()) {
            throw DimensionError("concat: row extents differ, " + shape_string(first) + " vs " +
                                 shape_string(v));
        }
        if (axis == 0 && v.cols() != first.cols()) {
            throw DimensionError("concat: column extents differ, " + shape_string(first) + " vs " +
                                 shape_string(v));
        }
        rows = axis == 0 ? rows + v.rows() : v.rows();
        cols = axis == 1 ? cols + v.cols() : v.cols();
        ids.push_back(p.id());
        extents.push_back(axis == 0 ? v.rows() : v.cols());
        needs = needs || p.requires_grad();
    }
    Matrix out(rows, cols);
    Index offset = 0;
    for (const auto& p : parts) {
        const auto& v = p.value();
        if (axis == 0) {
            out.middleRows(offset, v.rows()) = v;
            offset += v.rows();
        } else {
            out.middleCols(offset, v.cols()) = v;
            offset += v.cols();
        }
    }
    return tape_of(parts.front())
        .record(std::move(out), needs, [ids, extents, axis](Tape& t, int self) {
            const auto& g = t.grad_of(self);
            Index off = 0;
            for (std::size_t i = 0; i < ids.size(); ++i) {
                if (t.requires_grad(ids[i])) {
                    if (axis == 0) {
                        t.accumulate(ids[i], g.middleRows(off, extents[i]));
                    } else {
                        t.accumulate(ids[i], g.middleCols(off, extents[i]));
                    }
                }
                off += extents[i];
            }
        });
}

Var concat(std::initializer_list<Var> parts, int axis) {
    return concat(std::span<const Var>(parts.begin(), parts.size()), axis);
}

Var slice_cols(const Var& x, Index begin, Index count) {
    const auto& xv = x.value();
    if (begin < 0 || count < 0 || begin + count > xv.cols()) {
        throw DimensionError("slice_cols: range out of bounds for " + shape_string(xv));
    }
    Matrix out = xv.middleCols(begin, count);
    const int ix = x.id();
    const Index rows = xv.rows(), cols = xv.cols();
    return tape_of(x).record(std::move(out), x.requires_grad(),
                             [ix, begin, count, rows, cols](Tape& t, int self) {
                                 Matrix d = Matrix::Zero(rows, cols);
                                 d.middleCols(begin, count) = t.grad_of(self);
                                 t.accumulate(ix, d);
                             });
}

Var transpose(const Var& x) {
    Matrix out = x.value().transpose();
    const int ix = x.id();
    return tape_of(x).record(std::move(out), x.requires_grad(), [ix](Tape& t, int self) {
        t.accumulate(ix, t.grad_of(self).transpose());
    });
}

Var gather_rows(const Var& table, std::span<const int> ids) {
    const auto& tv = table.value();
    Matrix out(static_cast<Index>(ids.size()), tv.cols());
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || ids[i] >= tv.rows()) {
            throw std::out_of_range("gather_rows: id " + std::to_string(ids[i]) +
                                    " outside table of " + std::to_string(tv.rows()) + " rows");
        }
        out.row(static_cast<Index>(i)) = tv.row(ids[i]);
    }
    const int it = table.id();
    std::vector<int> idx(ids.begin(), ids.end());
    const Index rows = tv.rows(), cols = tv.cols();
    return tape_of(table).record(std::move(out), table.requires_grad(),
                                 [it, idx, rows, cols](Tape& t, int self) {
                                     const auto& g = t.grad_of(self);
                                     Matrix d = Matrix::Zero(rows, cols);
                                     for (std::size_t i = 0; i < idx.size(); ++i) {
                                         d.row(idx[i]) += g.row(static_cast<Index>(i));
                                     }
                                     t.accumulate(it, d);
                                 });
}

Var mean_rows(const Var& x) {
    const auto& xv = x.value();
    Matrix out = xv.colwise().mean();
    const int ix = x.id();
    const Index rows = xv.rows();
    return tape_of(x).record(std::move(out), x.requires_grad(), [ix, rows](Tape& t, int self) {
        const auto& g = t.grad_of(self);
        Matrix d = g.replicate(rows, 1) / static_cast<Scalar>(rows);
        t.accumulate(ix, d);
    });
}

Var sum(const Var& x) {
    const auto& xv = x.value();
    Matrix out(1, 1);
    out(0, 0) = xv.sum();
    const int ix = x.id();
    const Index rows = xv.rows(), cols = xv.cols();
    return tape_of(x).record(std::move(out), x.requires_grad(), [ix, rows, cols](Tape& t, int self) {
        t.accumulate(ix, Matrix::Constant(rows, cols, t.grad_of(self)(0, 0)));
    });
}

Var softmax(const Var& x, int axis) {
    if (axis != 0 && axis != 1) throw DimensionError("softmax: axis must be 0 or 1");
    require_finite("softmax", x.value());
    Matrix y;
    if (axis == 1) {
        y = softmax_rows(x.value());
    } else {
        Matrix yt = x.value().transpose();
        softmax_rows_inplace(yt);
        y = yt.transpose();
    }
    const int ix = x.id();
    return tape_of(x).record(std::move(y), x.requires_grad(), [ix, axis](Tape& t, int self) {
        const auto& g = t.grad_of(self);
        const auto& y = t.value(self);
        const Matrix gy = g.cwiseProduct(y);
        Matrix d;
        if (axis == 1) {
            d = gy - (y.array().colwise() * gy.rowwise().sum().array()).matrix();
        } else {
            d = gy - (y.array().rowwise() * gy.colwise().sum().array()).matrix();
        }
        t.accumulate(ix, d);
    });
}

Var log_softmax(const Var& x, int axis) {
    if (axis != 0 && axis != 1) throw DimensionError("log_softmax: axis must be 0 or 1");
    require_finite("log_softmax", x.value());
    const Matrix xv = axis == 1 ? x.value() : Matrix(x.value().transpose());
    Matrix out(xv.rows(), xv.cols());
    Matrix prob(xv.rows(), xv.cols());
    for (Index i = 0; i < xv.rows(); ++i) {
        const Scalar m = xv.row(i).maxCoeff();
        const Scalar lse = m + std::log((xv.row(i).array() - m).exp().sum());
        out.row(i) = (xv.row(i).array() - lse).matrix();
        prob.row(i) = out.row(i).array().exp().matrix();
    }
    if (axis == 0) {
        out.transposeInPlace();
        prob.transposeInPlace();
    }
    const int ix = x.id();
    return tape_of(x).record(std::move(out), x.requires_grad(),
                             [ix, axis, prob = std::move(prob)](Tape& t, int self) {
                                 const auto& g = t.grad_of(self);
                                 Matrix d;
                                 if (axis == 1) {
                                     d = g - (prob.array().colwise() * g.rowwise().sum().array())
                                                 .matrix();
                                 } else {
                                     d = g - (prob.array().rowwise() * g.colwise().sum().array())
                                                 .matrix();
                                 }
                                 t.accumulate(ix, d);
                             });
}

Var gelu(const Var& x) {
    const auto& xv = x.value();
    Matrix cdf = xv.unaryExpr([](Scalar v) { return gaussian_cdf(v); });
    Matrix out = xv.cwiseProduct(cdf);
    const int ix = x.id();
    if (!x.requires_grad() || !tape_of(x).grad_enabled()) return tape_of(x).record(std::move(out), false, {});
    return tape_of(x).record(std::move(out), true, [ix, cdf = std::move(cdf)](Tape& t, int self) {
        const auto& g = t.grad_of(self);
        const auto& xv = t.value(ix);
        Matrix d(xv.rows(), xv.cols());
        for (Index i = 0; i < xv.size(); ++i) {
            const Scalar v = xv.data()[i];
            d.data()[i] = g.data()[i] * (cdf.data()[i] + v * kInvSqrt2Pi * std::exp(-0.5 * v * v));
        }
        t.accumulate(ix, d);
    });
}

Var sigmoid(const Var& x) {
    Matrix out = x.value().unaryExpr([](Scalar v) {
        if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
        const Scalar e = std::exp(v);
        return e / (1.0 + e);
    });
    const int ix = x.id();
    return tape_of(x).record(std::move(out), x.requires_grad(), [ix](Tape& t, int self) {
        const auto& y = t.value(self);
        t.accumulate(ix, t.grad_of(self).cwiseProduct(y.cwiseProduct((1.0 - y.array()).matrix())));
    });
}

Var tanh(const Var& x) {
    Matrix out = x.value().array().tanh().matrix();
    const int ix = x.id();
    return tape_of(x).record(std::move(out), x.requires_grad(), [ix](Tape& t, int self) {
        const auto& y = t.value(self);
        t.accumulate(ix, t.grad_of(self).cwiseProduct((1.0 - y.array().square()).matrix()));
    });
}

Var layer_norm(const Var& x, const Var& gain, const Var& bias, Scalar eps) {
    const auto& xv = x.value();
    const auto& gv = gain.value();
    const auto& bv = bias.value();
    if (gv.rows() != 1 || gv.cols() != xv.cols() || bv.rows() != 1 || bv.cols() != xv.cols()) {
        throw DimensionError("layer_norm: gain " + shape_string(gv) + " / bias " + shape_string(bv) +
                             " must be 1 x " + std::to_string(xv.cols()));
    }
    const Index n = xv.cols();
    Matrix normed(xv.rows(), n);
    Eigen::VectorXd inv_std(xv.rows());
    for (Index i = 0; i < xv.rows(); ++i) {
        const Scalar mu = xv.row(i).mean();
        const Scalar var = (xv.row(i).array() - mu).square().mean();
        inv_std(i) = 1.0 / std::sqrt(var + eps);
        normed.row(i) = ((xv.row(i).array() - mu) * inv_std(i)).matrix();
    }
    Matrix out = (normed.array().rowwise() * gv.row(0).array()).rowwise() + bv.row(0).array();
    const int ix = x.id(), ig = gain.id(), ib = bias.id();
    return tape_of(x).record(
        std::move(out), any_grad({x, gain, bias}),
        [ix, ig, ib, n, normed = std::move(normed), inv_std = std::move(inv_std)](Tape& t, int self) {
            const auto& g = t.grad_of(self);
            if (t.requires_grad(ig)) t.accumulate(ig, g.cwiseProduct(normed).colwise().sum());
            if (t.requires_grad(ib)) t.accumulate(ib, g.colwise().sum());
            if (t.requires_grad(ix)) {
                const auto& gv = t.value(ig);
                Matrix dx(g.rows(), n);
                for (Index i = 0; i < g.rows(); ++i) {
                    const Eigen::RowVectorXd dn = g.row(i).cwiseProduct(gv.row(0));
                    const Scalar mean_dn = dn.mean();
                    const Scalar mean_dn_n = dn.dot(normed.row(i)) / static_cast<Scalar>(n);
                    dx.row(i) = (inv_std(i) *
                                 (dn.array() - mean_dn - normed.row(i).array() * mean_dn_n))
                                    .matrix();
                }
                t.accumulate(ix, dx);
            }
        });
}

Var straight_through(const Matrix& hard, const Var& soft) {
    require_same_shape("straight_through", hard, soft.value());
    const int is = soft.id();
    return tape_of(soft).record(hard, soft.requires_grad(),
                                [is](Tape& t, int self) { t.accumulate(is, t.grad_of(self)); });
}

Var multi_head_attention(const Var& q, const Var& k, const Var& v, int heads, Matrix* weights_out) {
    const auto& qv = q.value();
    const auto& kv = k.value();
    const auto& vv = v.value();
    const Index w = qv.cols();
    if (heads <= 0 || w % heads != 0) {
        throw DimensionError("multi_head_attention: width " + std::to_string(w) +
                             " not divisible by " + std::to_string(heads) + " heads");
    }
    if (kv.cols() != w || vv.cols() != w || kv.rows() != vv.rows()) {
        throw DimensionError("multi_head_attention: q " + shape_string(qv) + ", k " +
                             shape_string(kv) + ", v " + shape_string(vv));
    }
    const Index dh = w / heads;
    const Index nq = qv.rows(), nc = kv.rows();
    const Scalar inv_scale = 1.0 / std::sqrt(static_cast<Scalar>(dh));
    std::vector<Matrix> attn(static_cast<std::size_t>(heads));
    Matrix out(nq, w);
    for (int h = 0; h < heads; ++h) {
        Matrix s(nq, nc);
        s.noalias() = qv.middleCols(h * dh, dh) * kv.middleCols(h * dh, dh).transpose();
        s *= inv_scale;
        softmax_rows_inplace(s);
        out.middleCols(h * dh, dh).noalias() = s * vv.middleCols(h * dh, dh);
        attn[static_cast<std::size_t>(h)] = std::move(s);
    }
    if (weights_out != nullptr) {
        weights_out->resize(heads * nq, nc);
        for (int h = 0; h < heads; ++h) {
            weights_out->middleRows(h * nq, nq) = attn[static_cast<std::size_t>(h)];
        }
    }
    const int iq = q.id(), ik = k.id(), iv = v.id();
    return tape_of(q).record(
        std::move(out), any_grad({q, k, v}),
        [iq, ik, iv, heads, dh, inv_scale, attn = std::move(attn)](Tape& t, int self) {
            const auto& g = t.grad_of(self);
            const auto& qv = t.value(iq);
            const auto& kv = t.value(ik);
            const auto& vv = t.value(iv);
            Matrix dq(qv.rows(), qv.cols());
            Matrix dk(kv.rows(), kv.cols());
            Matrix dv(vv.rows(), vv.cols());
            for (int h = 0; h < heads; ++h) {
                const auto& a = attn[static_cast<std::size_t>(h)];
                const auto gh = g.middleCols(h * dh, dh);
                Matrix da(a.rows(), a.cols());
                da.noalias() = gh * vv.middleCols(h * dh, dh).transpose();
                dv.middleCols(h * dh, dh).noalias() = a.transpose() * gh;
                const Eigen::VectorXd row_dot = da.cwiseProduct(a).rowwise().sum();
                Matrix ds = a.cwiseProduct((da.colwise() - row_dot).eval()) * inv_scale;
                dq.middleCols(h * dh, dh).noalias() = ds * kv.middleCols(h * dh, dh);
                dk.middleCols(h * dh, dh).noalias() = ds.transpose() * qv.middleCols(h * dh, dh);
            }
            t.accumulate(iq, dq);
            t.accumulate(ik, dk);
            t.accumulate(iv, dv);
        });
}

Var cross_entropy(const Var& logits, int target) {
    const auto& lv = logits.value();
    if (lv.rows() != 1) throw DimensionError("cross_entropy: logits must be 1 x n, got " + shape_string(lv));
    if (target < 0 || target >= lv.cols()) {
        throw std::out_of_range("cross_entropy: target " + std::to_string(target) + " outside " +
                                std::to_string(lv.cols()) + " classes");
    }
    require_finite("cross_entropy", lv);
    const Scalar m = lv.maxCoeff();
    const Scalar lse = m + std::log((lv.array() - m).exp().sum());
    Matrix out(1, 1);
    out(0, 0) = lse - lv(0, target);
    Matrix prob = (lv.array() - lse).exp().matrix();
    const int il = logits.id();
    return tape_of(logits).record(std::move(out), logits.requires_grad(),
                                  [il, target, prob = std::move(prob)](Tape& t, int self) {
                                      Matrix d = prob;
                                      d(0, target) -= 1.0;
                                      t.accumulate(il, d * t.grad_of(self)(0, 0));
                                  });
}

Var kl_divergence(const Var& p_logits, const Var& q_logits) {
    const auto& pl = p_logits.value();
    const auto& ql = q_logits.value();
    if (pl.rows() != 1 || ql.rows() != 1 || pl.cols() != ql.cols()) {
        throw DimensionError("kl_divergence: logits must be equal-length rows, got " +
                             shape_string(pl) + " and " + shape_string(ql));
    }
    require_finite("kl_divergence", pl);
    require_finite("kl_divergence", ql);
    auto log_probs = [](const Matrix& l) {
        const Scalar m = l.maxCoeff();
        const Scalar lse = m + std::log((l.array() - m).exp().sum());
        return Matrix((l.array() - lse).matrix());
    };
    const Matrix lp = log_probs(pl);
    const Matrix lq = log_probs(ql);
    Matrix p = lp.array().exp().matrix();
    Matrix q = lq.array().exp().matrix();
    Matrix r = lp - lq;
    Matrix out(1, 1);
    out(0, 0) = std::max<Scalar>(0.0, p.cwiseProduct(r).sum());
    const int ip = p_logits.id(), iq = q_logits.id();
    return tape_of(p_logits).record(
        std::move(out), any_grad({p_logits, q_logits}),
        [ip, iq, p = std::move(p), q = std::move(q), r = std::move(r)](Tape& t, int self) {
            const Scalar g = t.grad_of(self)(0, 0);
            if (t.requires_grad(ip)) {
                const Scalar mean_r = p.cwiseProduct(r).sum();
                t.accumulate(ip, (p.array() * (r.array() - mean_r)).matrix() * g);
            }
            if (t.requires_grad(iq)) t.accumulate(iq, (q - p) * g);
        });
}

}  // namespace cmqr
