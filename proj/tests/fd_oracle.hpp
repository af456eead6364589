#pragma once

// Central finite-difference gradient oracle. Lives in test code only and
// touches the model exclusively through its public forward pass, so it is
// independent of the analytic backward path it checks.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "psonet/nnet.hpp"

namespace psonet::testutil {

struct FdReport {
    double max_rel_error = 0.0;
    std::string worst_tensor;
    size_t checked = 0;
};

inline double rel_error(double analytic, double numeric) {
    const double scale = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
    return std::abs(analytic - numeric) / scale;
}

// Compares analytic gradients against (f(x+h) - f(x-h)) / 2h for every
// element of the named tensors. `loss` re-runs the forward pass on the
// (mutated) params.
inline FdReport check_gradients(nnet::RegionalModelParams& params,
                                const nnet::RegionalModelParams& analytic,
                                const std::vector<std::string>& tensor_names,
                                const std::function<double()>& loss, double h) {
    auto named_params = nnet::collect_named_tensors(params, "");
    auto named_grads =
        nnet::collect_named_tensors(const_cast<nnet::RegionalModelParams&>(analytic), "");

    FdReport report;
    for (size_t t = 0; t < named_params.size(); ++t) {
        const auto& name = named_params[t].first;
        bool selected = tensor_names.empty();
        for (const auto& wanted : tensor_names) {
            if (name.rfind(wanted, 0) == 0) selected = true;
        }
        if (!selected) continue;

        Tensor& tensor = *named_params[t].second;
        const Tensor& grad = *named_grads[t].second;
        for (size_t i = 0; i < tensor.data.size(); ++i) {
            const double saved = tensor.data[i];
            tensor.data[i] = saved + h;
            const double up = loss();
            tensor.data[i] = saved - h;
            const double down = loss();
            tensor.data[i] = saved;
            const double numeric = (up - down) / (2.0 * h);
            const double err = rel_error(grad.data[i], numeric);
            if (err > report.max_rel_error) {
                report.max_rel_error = err;
                report.worst_tensor = name + "[" + std::to_string(i) + "]";
            }
            ++report.checked;
        }
    }
    return report;
}

} // namespace psonet::testutil
