#pragma once

#include "dit/analytics.hpp"

namespace dit {

struct LooResult {
    std::size_t j = 0;
    TimeWindow window;
    double delta_test_loss = 0.0;
};

struct IfResult {
    std::size_t j = 0;
    double score = 0.0;
    double damping = 0.0;
};

inline double mean_test_loss(const ModelSpec& model, const Vec& theta, std::span<const Sample> test_set) {
    require(!test_set.empty(), "mean_test_loss: empty test set");
    double s = 0.0;
    for (const Sample& z : test_set) s += loss(model, theta, z);
    return s / static_cast<double>(test_set.size());
}

// Windowed leave-one-out ground truth:
//   [L(theta_{-j}^{[t2]}) - L(theta_{-j}^{[t1]})] - [L(theta^{[t2]}) - L(theta^{[t1]})]
// The counterfactual replays the identical batch sequence by default; set
// resample_batches to retrain with a fresh seeded sequence instead.
inline LooResult loo_influence(const TrajectoryStore& traj, const Dataset& data,
                               const TrainConfig& config, const std::vector<Batch>& batches,
                               std::size_t j, std::span<const Sample> test_set, TimeWindow window,
                               bool resample_batches = false) {
    window.validate(traj.steps);
    std::vector<Batch> alt;
    const std::vector<Batch>* use = &batches;
    if (resample_batches) {
        alt = sample_batches(data.size(), config.steps, config.batch_size,
                             batch_seed(config.seed ^ (j + 1)));
        use = &alt;
    }
    auto cf = counterfactual_train(data, traj.model, config, j, *use);
    double d_cf = mean_test_loss(traj.model, cf[window.t2], test_set) -
                  mean_test_loss(traj.model, cf[window.t1], test_set);
    double d_full = mean_test_loss(traj.model, traj.theta_at(window.t2), test_set) -
                    mean_test_loss(traj.model, traj.theta_at(window.t1), test_set);
    return {j, window, d_cf - d_full};
}

// Per-epoch LOO series for a subset of samples: one counterfactual run per
// sample, evaluated on every epoch window [e*spe, (e+1)*spe].
inline InfluenceSeries loo_epoch_series(const TrajectoryStore& traj, const Dataset& data,
                                        const TrainConfig& config, const std::vector<Batch>& batches,
                                        const std::vector<std::size_t>& sample_subset,
                                        std::size_t epochs, std::uint64_t steps_per_epoch,
                                        std::span<const Sample> test_set) {
    require(epochs * steps_per_epoch <= traj.steps, "loo_epoch_series: epochs exceed trajectory");
    // full-run test losses per epoch boundary, shared across samples
    Vec base(epochs + 1);
    for (std::size_t e = 0; e <= epochs; ++e)
        base[e] = mean_test_loss(traj.model, traj.theta_at(e * steps_per_epoch), test_set);

    InfluenceSeries series;
    series.sample_ids = sample_subset;
    for (std::size_t j : sample_subset) {
        require(j < data.size(), "loo_epoch_series: sample index out of range");
        auto cf = counterfactual_train(data, traj.model, config, j, batches);
        Vec row(epochs);
        for (std::size_t e = 0; e < epochs; ++e) {
            double d_cf = mean_test_loss(traj.model, cf[(e + 1) * steps_per_epoch], test_set) -
                          mean_test_loss(traj.model, cf[e * steps_per_epoch], test_set);
            row[e] = d_cf - (base[e + 1] - base[e]);
        }
        series.values.push_back(std::move(row));
    }
    return series;
}

namespace detail {

// Gaussian elimination with partial pivoting; A is overwritten.
inline Vec solve_dense(std::vector<Vec>& a, Vec b) {
    std::size_t n = b.size();
    for (std::size_t col = 0; col < n; ++col) {
        std::size_t piv = col;
        for (std::size_t r = col + 1; r < n; ++r)
            if (std::fabs(a[r][col]) > std::fabs(a[piv][col])) piv = r;
        if (std::fabs(a[piv][col]) < 1e-300) throw NumericError("if_influence: singular system");
        std::swap(a[piv], a[col]);
        std::swap(b[piv], b[col]);
        for (std::size_t r = col + 1; r < n; ++r) {
            double f = a[r][col] / a[col][col];
            if (f == 0.0) continue;
            for (std::size_t c = col; c < n; ++c) a[r][c] -= f * a[col][c];
            b[r] -= f * b[col];
        }
    }
    Vec x(n);
    for (std::size_t r = n; r-- > 0;) {
        double s = b[r];
        for (std::size_t c = r + 1; c < n; ++c) s -= a[r][c] * x[c];
        x[r] = s / a[r][r];
    }
    return x;
}

}  // namespace detail

inline constexpr std::size_t kDenseGuard = 512;

// Dense empirical Hessian over the whole dataset, assembled column by column
// via hvp on basis vectors.
inline std::vector<Vec> dense_hessian(const ModelSpec& model, const Vec& theta, const Dataset& data) {
    std::size_t p = model.param_count();
    require(p <= kDenseGuard, "dense_hessian: p exceeds dense guard");
    std::vector<Vec> h(p, Vec(p, 0.0));
    Vec e(p, 0.0);
    for (std::size_t c = 0; c < p; ++c) {
        e[c] = 1.0;
        Vec col = hvp(model, theta, std::span<const Sample>(data.samples), e);
        for (std::size_t r = 0; r < p; ++r) h[r][c] = col[r];
        e[c] = 0.0;
    }
    return h;
}

// Classical influence function at the final parameters, in the removal
// convention (positive score = dropping z_j increases the test loss):
//   (mean test gradient)^T (H + lambda I)^{-1} grad(z_j)
// damping <= 0 selects the scale-aware default 1e-3 * trace(H)/p.
inline IfResult if_influence(const Dataset& data, const ModelSpec& model, const Vec& final_params,
                             std::size_t j, std::span<const Sample> test_set, double damping = 0.0) {
    require(j < data.size(), "if_influence: sample index out of range");
    std::size_t p = model.param_count();
    auto h = dense_hessian(model, final_params, data);
    if (damping <= 0.0) {
        double tr = 0.0;
        for (std::size_t i = 0; i < p; ++i) tr += h[i][i];
        damping = 1e-3 * tr / static_cast<double>(p);
        if (damping <= 0.0) damping = 1e-8;
    }
    for (std::size_t i = 0; i < p; ++i) h[i][i] += damping;

    Vec rhs(p, 0.0);
    for (const Sample& z : test_set) grad_accum(model, final_params, z, 1.0, rhs);
    for (double& v : rhs) v /= static_cast<double>(test_set.size());

    Vec x = detail::solve_dense(h, std::move(rhs));
    double score = dot(x, grad(model, final_params, data.samples[j]));
    return {j, score, damping};
}

// IF scores for every sample with a single Hessian factorization amortized
// across the dataset (the solve is reused).
inline std::vector<double> if_influence_all(const Dataset& data, const ModelSpec& model,
                                            const Vec& final_params, std::span<const Sample> test_set,
                                            double damping = 0.0) {
    std::size_t p = model.param_count();
    auto h = dense_hessian(model, final_params, data);
    if (damping <= 0.0) {
        double tr = 0.0;
        for (std::size_t i = 0; i < p; ++i) tr += h[i][i];
        damping = 1e-3 * tr / static_cast<double>(p);
        if (damping <= 0.0) damping = 1e-8;
    }
    for (std::size_t i = 0; i < p; ++i) h[i][i] += damping;
    Vec rhs(p, 0.0);
    for (const Sample& z : test_set) grad_accum(model, final_params, z, 1.0, rhs);
    for (double& v : rhs) v /= static_cast<double>(test_set.size());
    Vec x = detail::solve_dense(h, std::move(rhs));
    std::vector<double> out(data.size());
    for (std::size_t j = 0; j < data.size(); ++j)
        out[j] = dot(x, grad(model, final_params, data.samples[j]));
    return out;
}

}  // namespace dit
