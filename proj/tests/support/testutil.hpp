#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "sgdiff/autodiff.hpp"
#include "sgdiff/rng.hpp"

// Shared test helpers. The finite-difference harness here is the oracle for
// every analytic gradient in the library: double precision, central
// differences, relative error against max(|analytic|, |numeric|).

namespace sgtest {

using sgdiff::TensorD;
using sgdiff::VarD;

inline double max_abs_diff(const TensorD& a, const TensorD& b) {
    double m = 0;
    for (int64_t i = 0; i < a.numel(); i++) m = std::max(m, std::abs(a.ptr()[i] - b.ptr()[i]));
    return m;
}

template <typename T>
double max_abs_diff_t(const sgdiff::TensorT<T>& a, const sgdiff::TensorT<T>& b) {
    double m = 0;
    for (int64_t i = 0; i < a.numel(); i++)
        m = std::max(m, std::abs(double(a.ptr()[i]) - double(b.ptr()[i])));
    return m;
}

inline double rel_err(double analytic, double numeric) {
    double scale = std::max(std::abs(analytic), std::abs(numeric));
    if (scale < 1e-6) return std::abs(analytic - numeric);  // absolute in the flat regime
    return std::abs(analytic - numeric) / scale;
}

// Central-difference check of d(loss)/d(inputs).
//
// `f` maps leaf vars (requires_grad already set) to a scalar VarD. Either
// every element is probed or, above `probe_cap` elements per input, a strided
// deterministic subset. Returns the worst relative error over all probes.
inline double fd_check(std::vector<TensorD> inputs,
                       const std::function<VarD(const std::vector<VarD>&)>& f, double h = 1e-5,
                       int64_t probe_cap = 64) {
    std::vector<VarD> leaves;
    for (auto& t : inputs) leaves.push_back(VarD::leaf(t.clone(), true));
    VarD loss = f(leaves);
    sgdiff::backward(loss);

    double worst = 0;
    for (size_t k = 0; k < inputs.size(); k++) {
        TensorD grad = leaves[k].grad_or_zero();
        int64_t n = inputs[k].numel();
        int64_t stride = n <= probe_cap ? 1 : n / probe_cap;
        for (int64_t i = 0; i < n; i += stride) {
            double saved = leaves[k].value().ptr()[i];
            double fp, fm;
            {
                sgdiff::NoGradGuard ng;
                const_cast<double*>(leaves[k].value().ptr())[i] = saved + h;
                fp = f(leaves).value().ptr()[0];
                const_cast<double*>(leaves[k].value().ptr())[i] = saved - h;
                fm = f(leaves).value().ptr()[0];
                const_cast<double*>(leaves[k].value().ptr())[i] = saved;
            }
            double numeric = (fp - fm) / (2 * h);
            worst = std::max(worst, rel_err(grad.ptr()[i], numeric));
        }
    }
    return worst;
}

inline TensorD rand_tensor(sgdiff::Rng& rng, const sgdiff::Shape& shape, double scale = 1.0) {
    return rng.gauss_scaled<double>(shape, scale);
}

}  // namespace sgtest
