#pragma once

// Finite-difference verification of every module's composite forward at toy
// dimensions. Shared by the `gradcheck` command and the acceptance suite.

#include "cmqr/gradcheck.hpp"

#include <string>
#include <vector>

namespace cmqr {

struct GradCheckCase {
    std::string name;
    bool elementwise = false;  ///< primitive op checked at the tighter tolerance
    Scalar tolerance = 1e-4;
    GradCheckReport report;
    double seconds = 0.0;

    bool passed() const { return report.max_relative_error <= tolerance; }
};

struct GradCheckSuiteOptions {
    Scalar module_tolerance = 1e-4;
    Scalar elementwise_tolerance = 1e-6;
    GradCheckOptions check;
};

std::vector<GradCheckCase> run_gradcheck_suite(std::uint64_t seed,
                                               const GradCheckSuiteOptions& options = {});

}  // namespace cmqr
