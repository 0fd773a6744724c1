#pragma once

#include "cmqr/parameters.hpp"

#include <functional>
#include <string>
#include <vector>

namespace cmqr {

/// Builds a scalar loss on the given tape from parameters in a store.
using ScalarFunction = std::function<Var(Tape&)>;

struct GradCheckReport {
    Scalar max_relative_error = 0.0;
    std::string worst_parameter;
    Index worst_index = -1;
    Scalar analytic = 0.0;
    Scalar numeric = 0.0;
    std::size_t coordinates = 0;
};

struct GradCheckOptions {
    Scalar step = 1e-5;
    /// Denominator floor: error = |a - n| / max(|a|, |n|, floor). Keeps
    /// coordinates whose true gradient is ~0 from dividing roundoff by zero.
    Scalar floor = 1e-6;
    /// Restrict the check to these parameters (all when empty).
    std::vector<std::string> only;
};

/// Central differences (f(x+h) - f(x-h)) / 2h per coordinate against the tape
/// gradient. Leaves parameter values and gradients as it found them (the
/// gradients are cleared).
GradCheckReport finite_diff_check(ParameterStore& store, const ScalarFunction& f,
                                  const GradCheckOptions& options = {});

}  // namespace cmqr
