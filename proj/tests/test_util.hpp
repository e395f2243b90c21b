#pragma once

// Shared helpers for the test suites: random tensors, the analytic-vs-central
// finite-difference gradient check, and small reference oracles.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "picoclip/tensor.hpp"

namespace testutil {

using picoclip::Rng;
using picoclip::Tensor;

template <typename T>
Tensor<T> random_tensor(std::vector<std::size_t> shape, Rng& rng, double lo = -1.0, double hi = 1.0,
                        bool requires_grad = true) {
    Tensor<T> t = Tensor<T>::zeros(std::move(shape), requires_grad);
    for (auto& v : t.raw()) v = static_cast<T>(rng.uniform(lo, hi));
    return t;
}

template <typename T>
Tensor<T> random_unit_rows(std::size_t rows, std::size_t cols, Rng& rng, bool requires_grad = false) {
    Tensor<T> t = Tensor<T>::zeros({rows, cols}, requires_grad);
    for (std::size_t i = 0; i < rows; ++i) {
        T ss = 0;
        for (std::size_t j = 0; j < cols; ++j) {
            T v = static_cast<T>(rng.normal());
            t.raw()[i * cols + j] = v;
            ss += v * v;
        }
        T inv = T(1) / std::sqrt(ss);
        for (std::size_t j = 0; j < cols; ++j) t.raw()[i * cols + j] *= inv;
    }
    return t;
}

// max_i |a_i - f_i| / max(1, |a_i|, |f_i|)
template <typename T>
double max_rel_err(const std::vector<T>& analytic, const std::vector<T>& fd) {
    double worst = 0;
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        const double a = analytic[i], f = fd[i];
        const double denom = std::max({1.0, std::abs(a), std::abs(f)});
        worst = std::max(worst, std::abs(a - f) / denom);
    }
    return worst;
}

template <typename T>
struct GradCheckResult {
    double max_err = 0;
    std::size_t worst_input = 0;
};

// Builds loss = sum(w . f(inputs)) with fixed random weights, runs backward,
// and compares each input's grad against a central-difference oracle. The op
// under test runs at its own precision T; the readout sum and the difference
// quotient are taken in double so the oracle is not the noise floor.
template <typename T>
GradCheckResult<T> grad_check(const std::function<Tensor<T>(const std::vector<Tensor<T>>&)>& f,
                              std::vector<Tensor<T>> inputs, Rng& rng, T h) {
    using namespace picoclip;
    for (auto& t : inputs) t.set_requires_grad(true);

    Tensor<T> w;
    {
        Tape<T> tape;
        Tensor<T> out = f(inputs);
        w = random_tensor<T>(out.shape(), rng, -1.0, 1.0, false);
        Tensor<T> loss = sum_reduce(mul(out, w));
        backward(loss, tape);
    }

    GradCheckResult<T> result;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        std::vector<T> analytic = inputs[i].has_grad() ? inputs[i].grad() : std::vector<T>(inputs[i].numel(), T(0));
        auto eval = [&](const Tensor<T>& x) -> double {
            std::vector<Tensor<T>> probe;
            for (std::size_t k = 0; k < inputs.size(); ++k) probe.push_back(k == i ? x : inputs[k].detached());
            Tensor<T> out = f(probe);
            double acc = 0;
            for (std::size_t k = 0; k < out.numel(); ++k)
                acc += static_cast<double>(out.raw()[k]) * static_cast<double>(w.raw()[k]);
            return acc;
        };
        Tensor<T> probe = inputs[i].detached();
        std::vector<T> fd(probe.numel());
        for (std::size_t c = 0; c < probe.numel(); ++c) {
            const T orig = probe.raw()[c];
            const T step = h * std::max(T(1), std::abs(orig));
            probe.raw()[c] = orig + step;
            const double fp = eval(probe);
            probe.raw()[c] = orig - step;
            const double fm = eval(probe);
            probe.raw()[c] = orig;
            fd[c] = static_cast<T>((fp - fm) / (2.0 * static_cast<double>(step)));
        }
        const double err = max_rel_err(analytic, fd);
        if (err > result.max_err) {
            result.max_err = err;
            result.worst_input = i;
        }
    }
    return result;
}

// Cross-precision check: analytic grads from the T-typed graph vs central
// differences on an f64 twin of the same function at identical input values.
template <typename T>
GradCheckResult<T> grad_check_cross(const std::function<Tensor<T>(const std::vector<Tensor<T>>&)>& f,
                                    std::vector<Tensor<T>> inputs,
                                    const std::function<Tensor<double>(const std::vector<Tensor<double>>&)>& f64,
                                    const std::vector<Tensor<double>>& inputs64, Rng& rng, double h) {
    using namespace picoclip;
    for (auto& t : inputs) t.set_requires_grad(true);

    Tensor<T> w;
    {
        Tape<T> tape;
        Tensor<T> out = f(inputs);
        w = random_tensor<T>(out.shape(), rng, -1.0, 1.0, false);
        Tensor<T> loss = sum_reduce(mul(out, w));
        backward(loss, tape);
    }

    GradCheckResult<T> result;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        std::vector<T> analytic = inputs[i].has_grad() ? inputs[i].grad() : std::vector<T>(inputs[i].numel(), T(0));
        auto scalar_f = [&](const Tensor<double>& x) {
            std::vector<Tensor<double>> probe;
            for (std::size_t k = 0; k < inputs64.size(); ++k) probe.push_back(k == i ? x : inputs64[k].detached());
            Tensor<double> out = f64(probe);
            double acc = 0;
            for (std::size_t k = 0; k < out.numel(); ++k) acc += out.raw()[k] * static_cast<double>(w.raw()[k]);
            return acc;
        };
        Tensor<double> fd = picoclip::finite_diff_grad<double>(scalar_f, inputs64[i], h);
        std::vector<T> fd_t(fd.numel());
        for (std::size_t k = 0; k < fd.numel(); ++k) fd_t[k] = static_cast<T>(fd.raw()[k]);
        const double err = max_rel_err(analytic, fd_t);
        if (err > result.max_err) {
            result.max_err = err;
            result.worst_input = i;
        }
    }
    return result;
}

}  // namespace testutil
