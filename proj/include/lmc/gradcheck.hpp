#pragma once

#include <functional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "lmc/tensor.hpp"

namespace lmc {

struct GradCheckEntry {
    std::string name;
    double max_rel_err = 0.0;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> per_param;
    double max_rel_err = 0.0;
    bool pass(double tol) const { return max_rel_err < tol; }
};

// Central finite differences on a 64-bit shadow evaluation of the graph.
// `f` receives perturbed double copies of the parameters and must return a
// scalar tensor. `analytic` are the float-path gradients under test.
// max_coords_per_param > 0 subsamples coordinates deterministically.
inline GradCheckReport grad_check(const std::vector<std::pair<std::string, Tensor>>& params,
                                  const std::function<TensorD(const std::vector<TensorD>&)>& f,
                                  const std::vector<TensorD>& analytic, double h = 1e-3,
                                  int64_t max_coords_per_param = 0, uint64_t seed = 0) {
    if (analytic.size() != params.size())
        throw InvalidInput("grad_check: analytic gradient count mismatch");
    std::vector<TensorD> shadow;
    shadow.reserve(params.size());
    for (const auto& [name, t] : params) shadow.push_back(t.cast<double>());
    {
        TensorD probe = f(shadow);
        if (probe.numel() != 1) throw InvalidInput("grad_check: graph output must be scalar");
    }
    GradCheckReport report;
    std::mt19937_64 rng(seed);
    for (size_t pi = 0; pi < params.size(); ++pi) {
        const TensorD& ag = analytic[pi];
        if (ag.shape != params[pi].second.shape)
            throw ShapeError("grad_check: analytic gradient shape mismatch for " +
                             params[pi].first);
        std::vector<int64_t> coords;
        int64_t n = ag.numel();
        if (max_coords_per_param > 0 && n > max_coords_per_param) {
            std::vector<int64_t> all(static_cast<size_t>(n));
            for (int64_t i = 0; i < n; ++i) all[static_cast<size_t>(i)] = i;
            std::shuffle(all.begin(), all.end(), rng);
            coords.assign(all.begin(), all.begin() + max_coords_per_param);
        } else {
            coords.resize(static_cast<size_t>(n));
            for (int64_t i = 0; i < n; ++i) coords[static_cast<size_t>(i)] = i;
        }
        GradCheckEntry entry{params[pi].first, 0.0};
        for (int64_t c : coords) {
            double orig = shadow[pi][c];
            shadow[pi][c] = orig + h;
            double fp = f(shadow)[0];
            shadow[pi][c] = orig - h;
            double fm = f(shadow)[0];
            shadow[pi][c] = orig;
            double numeric = (fp - fm) / (2.0 * h);
            double a = static_cast<double>(ag[c]);
            double rel = std::abs(a - numeric) / std::max(std::abs(a) + std::abs(numeric), 1e-6);
            entry.max_rel_err = std::max(entry.max_rel_err, rel);
        }
        report.max_rel_err = std::max(report.max_rel_err, entry.max_rel_err);
        report.per_param.push_back(std::move(entry));
    }
    return report;
}

// Float analytic gradients (the training path) widened for comparison.
inline GradCheckReport grad_check(const std::vector<std::pair<std::string, Tensor>>& params,
                                  const std::function<TensorD(const std::vector<TensorD>&)>& f,
                                  const std::vector<Tensor>& analytic, double h = 1e-3,
                                  int64_t max_coords_per_param = 0, uint64_t seed = 0) {
    std::vector<TensorD> widened;
    widened.reserve(analytic.size());
    for (const auto& t : analytic) widened.push_back(t.cast<double>());
    return grad_check(params, f, widened, h, max_coords_per_param, seed);
}

}  // namespace lmc
