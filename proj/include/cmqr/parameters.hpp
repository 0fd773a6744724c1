#pragma once

#include "cmqr/tensor.hpp"

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace cmqr {

struct Parameter {
    std::string name;
    Matrix value;
    /// Empty until a backward pass reaches the parameter.
    std::optional<Matrix> grad;
    /// Adam first and second moments, same shape as value.
    Matrix m;
    Matrix v;
    /// 1 for vectors stored as 1 x n rows, 2 otherwise.
    int rank = 2;
};

/// Named trainable tensors plus optimizer state. Iteration order is the
/// lexicographic order of names, which keeps serialization deterministic.
class ParameterStore {
public:
    Parameter& add(const std::string& name, Matrix init, int rank = 2);
    bool contains(const std::string& name) const { return entries_.count(name) != 0; }
    Parameter& at(const std::string& name);
    const Parameter& at(const std::string& name) const;

    /// Binds a parameter as a leaf on `tape`.
    Var on(Tape& tape, const std::string& name) { return tape.parameter(at(name)); }

    void zero_grad();
    /// Multiplies every populated gradient by `s`.
    void scale_grads(Scalar s);
    std::size_t size() const { return entries_.size(); }
    std::size_t scalar_count() const;

    std::map<std::string, Parameter>& entries() { return entries_; }
    const std::map<std::string, Parameter>& entries() const { return entries_; }

    std::int64_t step = 0;

private:
    std::map<std::string, Parameter> entries_;
};

struct AdamOptions {
    Scalar lr = 2e-4;
    Scalar beta1 = 0.9;
    Scalar beta2 = 0.999;
    Scalar eps = 1e-8;
    Scalar weight_decay = 0.0;
};

/// One bias-corrected Adam update over every entry, then clears gradients.
/// Throws std::runtime_error naming the first parameter with no gradient.
void adam_step(ParameterStore& store, const AdamOptions& options);

// Initializers. Each draws from a stream derived from (seed, name), so the
// values a parameter receives do not depend on registration order.
Matrix uniform_init(std::uint64_t seed, const std::string& name, Index rows, Index cols,
                    Scalar bound);
/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weight of shape fan_in x fan_out.
Parameter& add_linear_weight(ParameterStore& store, std::uint64_t seed, const std::string& name,
                             Index fan_in, Index fan_out);
Parameter& add_zeros(ParameterStore& store, const std::string& name, Index cols);
Parameter& add_ones(ParameterStore& store, const std::string& name, Index cols);

}  // namespace cmqr
