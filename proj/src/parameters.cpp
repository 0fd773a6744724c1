#include "cmqr/parameters.hpp"

#include "cmqr/rng.hpp"

#include <cmath>
#include <stdexcept>

namespace cmqr {

Parameter& ParameterStore::add(const std::string& name, Matrix init, int rank) {
    if (entries_.count(name) != 0) throw std::invalid_argument("duplicate parameter name: " + name);
    if (init.size() == 0) throw DimensionError("parameter " + name + " has an empty shape");
    Parameter p;
    p.name = name;
    p.m = Matrix::Zero(init.rows(), init.cols());
    p.v = Matrix::Zero(init.rows(), init.cols());
    p.value = std::move(init);
    p.rank = rank;
    return entries_.emplace(name, std::move(p)).first->second;
}

Parameter& ParameterStore::at(const std::string& name) {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw std::out_of_range("unknown parameter: " + name);
    return it->second;
}

const Parameter& ParameterStore::at(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw std::out_of_range("unknown parameter: " + name);
    return it->second;
}

void ParameterStore::zero_grad() {
    for (auto& [_, p] : entries_) p.grad.reset();
}

void ParameterStore::scale_grads(Scalar s) {
    for (auto& [_, p] : entries_) {
        if (p.grad) *p.grad *= s;
    }
}

std::size_t ParameterStore::scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, p] : entries_) n += static_cast<std::size_t>(p.value.size());
    return n;
}

void adam_step(ParameterStore& store, const AdamOptions& options) {
    for (const auto& [name, p] : store.entries()) {
        if (!p.grad) throw std::runtime_error("adam_step: no gradient for parameter " + name);
    }
    store.step += 1;
    const auto t = static_cast<Scalar>(store.step);
    const Scalar c1 = 1.0 - std::pow(options.beta1, t);
    const Scalar c2 = 1.0 - std::pow(options.beta2, t);
    for (auto& [_, p] : store.entries()) {
        Matrix g = *p.grad;
        if (options.weight_decay != 0.0) g += options.weight_decay * p.value;
        p.m = options.beta1 * p.m + (1.0 - options.beta1) * g;
        p.v = options.beta2 * p.v + (1.0 - options.beta2) * g.cwiseProduct(g);
        p.value.array() -=
            options.lr * (p.m.array() / c1) / ((p.v.array() / c2).sqrt() + options.eps);
        p.grad.reset();
    }
}

Matrix uniform_init(std::uint64_t seed, const std::string& name, Index rows, Index cols,
                    Scalar bound) {
    Rng rng(derive_seed(seed, "init/" + name));
    Matrix m(rows, cols);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = (2.0 * rng.uniform() - 1.0) * bound;
    return m;
}

Parameter& add_linear_weight(ParameterStore& store, std::uint64_t seed, const std::string& name,
                             Index fan_in, Index fan_out) {
    const Scalar bound = 1.0 / std::sqrt(static_cast<Scalar>(fan_in));
    return store.add(name, uniform_init(seed, name, fan_in, fan_out, bound));
}

Parameter& add_zeros(ParameterStore& store, const std::string& name, Index cols) {
    return store.add(name, Matrix::Zero(1, cols), 1);
}

Parameter& add_ones(ParameterStore& store, const std::string& name, Index cols) {
    return store.add(name, Matrix::Ones(1, cols), 1);
}

}  // namespace cmqr
