#include "cmqr/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace cmqr {

namespace {

Scalar evaluate(const ScalarFunction& f) {
    Tape tape;
    tape.set_grad_enabled(false);
    const Scalar v = f(tape).item();
    if (!std::isfinite(v)) throw NumericError("finite_diff_check: function value is not finite");
    return v;
}

}  // namespace

GradCheckReport finite_diff_check(ParameterStore& store, const ScalarFunction& f,
                                  const GradCheckOptions& options) {
    store.zero_grad();
    {
        Tape tape;
        Var loss = f(tape);
        if (!std::isfinite(loss.item())) {
            throw NumericError("finite_diff_check: function value is not finite");
        }
        tape.backward(loss);
    }

    GradCheckReport report;
    for (auto& [name, p] : store.entries()) {
        if (!options.only.empty() &&
            std::find(options.only.begin(), options.only.end(), name) == options.only.end()) {
            continue;
        }
        const Matrix analytic = p.grad ? *p.grad : Matrix::Zero(p.value.rows(), p.value.cols());
        for (Index i = 0; i < p.value.size(); ++i) {
            Scalar& x = p.value.data()[i];
            const Scalar saved = x;
            x = saved + options.step;
            const Scalar up = evaluate(f);
            x = saved - options.step;
            const Scalar down = evaluate(f);
            x = saved;
            const Scalar numeric = (up - down) / (2.0 * options.step);
            const Scalar a = analytic.data()[i];
            const Scalar denom = std::max({std::abs(a), std::abs(numeric), options.floor});
            const Scalar err = std::abs(a - numeric) / denom;
            ++report.coordinates;
            if (err > report.max_relative_error || report.worst_index < 0) {
                report.max_relative_error = std::max(err, report.max_relative_error);
                if (err >= report.max_relative_error) {
                    report.worst_parameter = name;
                    report.worst_index = i;
                    report.analytic = a;
                    report.numeric = numeric;
                }
            }
        }
    }
    store.zero_grad();
    return report;
}

}  // namespace cmqr
