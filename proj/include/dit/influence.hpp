#pragma once

#include "dit/trainer.hpp"

namespace dit {

struct TimeWindow {
    std::uint64_t t1 = 0, t2 = 0;

    void validate(std::uint64_t steps) const {
        require(t1 < t2, "time window: t1 < t2 required");
        require(t2 <= steps, "time window: t2 <= T required");
    }
};

// Declarative query q(t): evaluated only at the window endpoints, always as a
// vector in parameter space at theta^{[t]}.
struct QuerySpec {
    enum class Kind { TestLoss, TestSetLoss, Prediction, ParamBasis, FeatureImportance, SelfGradient };

    Kind kind = Kind::TestLoss;
    Sample target;                // TestLoss / FeatureImportance / SelfGradient
    std::vector<Sample> test_set; // TestSetLoss
    Vec x;                        // Prediction input
    std::size_t index = 0;        // ParamBasis i / FeatureImportance k

    static QuerySpec test_loss(Sample z) { return {Kind::TestLoss, std::move(z), {}, {}, 0}; }
    static QuerySpec test_set_loss(std::vector<Sample> zs) {
        return {Kind::TestSetLoss, {}, std::move(zs), {}, 0};
    }
    static QuerySpec prediction(Vec x_test) { return {Kind::Prediction, {}, {}, std::move(x_test), 0}; }
    static QuerySpec param_basis(std::size_t i) { return {Kind::ParamBasis, {}, {}, {}, i}; }
    static QuerySpec feature_importance(Sample z, std::size_t k) {
        return {Kind::FeatureImportance, std::move(z), {}, {}, k};
    }
    static QuerySpec self_gradient(Sample z) { return {Kind::SelfGradient, std::move(z), {}, {}, 0}; }

    std::string id() const {
        switch (kind) {
            case Kind::TestLoss: return "test_loss";
            case Kind::TestSetLoss: return "test_set_loss";
            case Kind::Prediction: return "prediction";
            case Kind::ParamBasis: return "param_basis:" + std::to_string(index);
            case Kind::FeatureImportance: return "feature_importance:" + std::to_string(index);
            case Kind::SelfGradient: return "self_gradient";
        }
        return "?";
    }

    Vec eval(const ModelSpec& model, const Vec& theta) const {
        switch (kind) {
            case Kind::TestLoss:
            case Kind::SelfGradient:
                return grad(model, theta, target);
            case Kind::TestSetLoss: {
                require(!test_set.empty(), "test_set_loss query: empty test set");
                Vec g(model.param_count(), 0.0);
                for (const Sample& z : test_set) grad_accum(model, theta, z, 1.0, g);
                double inv = 1.0 / static_cast<double>(test_set.size());
                for (double& v : g) v *= inv;
                return g;
            }
            case Kind::Prediction:
                return predict_grad(model, theta, x);
            case Kind::ParamBasis: {
                require(index < model.param_count(), "param_basis query: index out of range");
                Vec e(model.param_count(), 0.0);
                e[index] = 1.0;
                return e;
            }
            case Kind::FeatureImportance:
                return feature_param_grad(model, theta, target, index);
        }
        throw ContractViolation("unreachable query kind");
    }
};

struct InfluenceRecord {
    std::size_t j = 0;
    TimeWindow window;
    std::string query_id;
    double q_value = 0.0;
};

// Evaluates q at a stored step t (theta recovered from the trajectory).
inline Vec eval_query(const QuerySpec& q, const TrajectoryStore& traj, std::uint64_t t) {
    return q.eval(traj.model, traj.theta_at(t));
}

namespace detail {

// The backward influence sweep shared by the full-storage and checkpoint
// paths. The u-recursions are sample-independent, so one pass accumulates
// every requested sample's Q. Per backward step t:
//   - accumulate <u2 - u1, (eta_t/|S_t|) g(z_i; theta^{[t]})> for i in S_t
//   - u <- u - eta_t H^{[t]} u for both u's (hvp over S_t)
//   - after the accumulation at t = t1, set u1 = q(t1)
struct BackwardSweep {
    const ModelSpec& model;
    const Dataset& data;
    TimeWindow window;
    Vec u1, u2;
    std::vector<double> q_by_sample;  // indexed by sample id

    BackwardSweep(const ModelSpec& model, const Dataset& data, TimeWindow window, Vec q_t2)
        : model(model), data(data), window(window), u1(q_t2.size(), 0.0), u2(std::move(q_t2)),
          q_by_sample(data.size(), 0.0) {}

    // Processes one step of the backward loop; q_t1 is consumed when t hits
    // the window start.
    void step(std::uint64_t t, const Batch& batch, double eta, const Vec& theta, const Vec& q_t1) {
        double coef = eta / static_cast<double>(batch.size());
        Vec diff(u2.size());
        for (std::size_t i = 0; i < diff.size(); ++i) diff[i] = u2[i] - u1[i];
        for (std::uint32_t i : batch) {
            Vec g = grad(model, theta, data.samples[i]);
            q_by_sample[i] += coef * dot(diff, g);
        }
        if (t > 0) {
            auto hv = [&](Vec& u) {
                Vec sum(u.size(), 0.0);
                for (std::uint32_t i : batch) hvp_sample_accum(model, theta, data.samples[i], u, 1.0, sum);
                axpy(-eta / static_cast<double>(batch.size()), sum, u);
            };
            hv(u1);
            hv(u2);
            if (!all_finite(u1) || !all_finite(u2))
                throw NumericError("influence sweep: non-finite propagation at step " + std::to_string(t));
        }
        if (t == window.t1) u1 = q_t1;
    }
};

}  // namespace detail

// One shared backward sweep computing Q for every sample (Q is exactly zero
// for samples never appearing in a batch before t2).
inline std::vector<double> compute_influence_all_values(const TrajectoryStore& traj, const Dataset& data,
                                                        const QuerySpec& q, TimeWindow window) {
    window.validate(traj.steps);
    require(traj.window_begin == 0 && traj.window_end >= window.t2,
            "influence: trajectory must store [0, t2)");
    Vec q_t2 = eval_query(q, traj, window.t2);
    Vec q_t1 = eval_query(q, traj, window.t1);
    detail::BackwardSweep sweep(traj.model, data, window, std::move(q_t2));
    for (std::uint64_t t = window.t2; t-- > 0;) {
        const StepRecord& r = traj.record(t);
        sweep.step(t, r.batch, r.lr, traj.theta_at(t), q_t1);
    }
    return std::move(sweep.q_by_sample);
}

inline std::vector<InfluenceRecord> compute_influence_all(const TrajectoryStore& traj,
                                                          const Dataset& data, const QuerySpec& q,
                                                          TimeWindow window) {
    auto values = compute_influence_all_values(traj, data, q, window);
    std::vector<InfluenceRecord> out;
    out.reserve(values.size());
    for (std::size_t j = 0; j < values.size(); ++j) out.push_back({j, window, q.id(), values[j]});
    return out;
}

inline InfluenceRecord compute_influence(const TrajectoryStore& traj, const Dataset& data,
                                         const QuerySpec& q, TimeWindow window, std::size_t j) {
    require(j < data.size(), "compute_influence: sample index out of range");
    auto values = compute_influence_all_values(traj, data, q, window);
    return {j, window, q.id(), values[j]};
}

// Checkpoint-backed influence: parameters are reconstructed segment by
// segment (bit-exact replay), then the identical backward sweep runs over
// them, so the result matches the full-storage path exactly.
inline std::vector<double> compute_influence_all_values_ckpt(const CheckpointStore& ckpt,
                                                             const Dataset& data, const QuerySpec& q,
                                                             TimeWindow window) {
    window.validate(ckpt.steps);
    ckpt.nearest_before(window.t1);  // precondition: checkpoint coverage
    const ModelSpec& model = ckpt.model;

    // segment boundaries: checkpoint steps below t2, processed in reverse
    std::vector<std::uint64_t> starts;
    for (const auto& [s, params] : ckpt.checkpoints)
        if (s < window.t2) starts.push_back(s);
    std::sort(starts.begin(), starts.end());
    require(!starts.empty() && starts.front() == 0, "checkpoint store must cover step 0");

    Vec theta_t2 = replay_segment(ckpt, data, model, window.t2, window.t2)[0];
    Vec theta_t1 = replay_segment(ckpt, data, model, window.t1, window.t1)[0];
    Vec q_t2 = q.eval(model, theta_t2);
    Vec q_t1 = q.eval(model, theta_t1);

    detail::BackwardSweep sweep(model, data, window, std::move(q_t2));
    for (std::size_t k = starts.size(); k-- > 0;) {
        std::uint64_t a = starts[k];
        std::uint64_t b = (k + 1 < starts.size()) ? starts[k + 1] : window.t2;
        auto thetas = replay_segment(ckpt, data, model, a, b - 1);  // theta^{[a..b-1]}
        for (std::uint64_t t = b; t-- > a;)
            sweep.step(t, ckpt.batches[t], ckpt.lrs[t], thetas[t - a], q_t1);
    }
    return std::move(sweep.q_by_sample);
}

inline InfluenceRecord compute_influence_ckpt(const CheckpointStore& ckpt, const Dataset& data,
                                              const QuerySpec& q, TimeWindow window, std::size_t j) {
    require(j < data.size(), "compute_influence_ckpt: sample index out of range");
    auto values = compute_influence_all_values_ckpt(ckpt, data, q, window);
    return {j, window, q.id(), values[j]};
}

// Forward recursion for the estimated SGD-influence
//   D^{[t+1]} = (I - eta_t H^{[t]}) D^{[t]} + 1_{j in S_t} (eta_t/|S_t|) g(z_j; theta^{[t]})
// returning D^{[t]} for t = 0..upto. Matrix-free: H is rebuilt on the fly
// from the stored trajectory via hvp.
inline std::vector<Vec> estimate_sgd_influence_series(const TrajectoryStore& traj, const Dataset& data,
                                                      std::size_t j, std::uint64_t upto) {
    require(upto <= traj.steps, "estimate series: upto > T");
    require(traj.window_begin == 0, "estimate series: trajectory must store a [0, .) prefix");
    const ModelSpec& model = traj.model;
    std::size_t p = model.param_count();
    std::vector<Vec> series;
    series.reserve(upto + 1);
    Vec delta(p, 0.0);
    series.push_back(delta);
    for (std::uint64_t t = 0; t < upto; ++t) {
        const StepRecord& r = traj.record(t);
        const Vec& theta = traj.theta_at(t);
        Vec hsum(p, 0.0);
        for (std::uint32_t i : r.batch) hvp_sample_accum(model, theta, data.samples[i], delta, 1.0, hsum);
        axpy(-r.lr / static_cast<double>(r.batch.size()), hsum, delta);
        if (std::find(r.batch.begin(), r.batch.end(), static_cast<std::uint32_t>(j)) != r.batch.end())
            grad_accum(model, theta, data.samples[j], r.lr / static_cast<double>(r.batch.size()), delta);
        if (!all_finite(delta))
            throw NumericError("estimate series: non-finite value at step " + std::to_string(t));
        series.push_back(delta);
    }
    return series;
}

// Estimated parameter change over a window: D^{[t2]} - D^{[t1]}.
inline Vec estimate_param_change(const TrajectoryStore& traj, const Dataset& data, TimeWindow window,
                                 std::size_t j) {
    window.validate(traj.steps);
    auto series = estimate_sgd_influence_series(traj, data, j, window.t2);
    Vec out = series[window.t2];
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= series[window.t1][i];
    return out;
}

// ---------------------------------------------------------------------------
// Error bound

struct BoundConstants {
    double l_h = 0.0;      // Hessian Lipschitz constant
    double eps_h = 0.0;    // Hessian approximation error bound
    double m = 0.0;        // parameter deviation bound
    double m_h = 0.0;      // Hessian operator norm bound
    double eta_max = 0.0;  // largest learning rate
};

inline double error_bound(const BoundConstants& c, TimeWindow window) {
    require(c.l_h >= 0 && c.eps_h >= 0 && c.m >= 0 && c.m_h >= 0 && c.eta_max >= 0,
            "error_bound: constants must be non-negative");
    double b_tilde = c.l_h * c.m * c.m / 2.0 + c.eps_h * c.m;
    double a1 = static_cast<double>(window.t1 + 1);
    double a2 = static_cast<double>(window.t2 + 1);
    if (c.m_h == 0.0) {
        // continuity limit of (B/M_H)(e^{M_H x2} + e^{M_H x1} - 2) as M_H -> 0
        return b_tilde * c.eta_max * (a1 + a2);
    }
    double me = c.m_h * c.eta_max;
    return b_tilde / c.m_h * (std::exp(me * a2) + std::exp(me * a1) - 2.0);
}

namespace detail {

// Operator norm of a symmetric matrix-free operator via power iteration.
template <typename Op>
double operator_norm(Op&& apply, std::size_t dim, std::uint64_t seed, int iters = 100) {
    Rng rng(seed);
    Vec v(dim);
    for (double& x : v) x = rng.normal();
    double nv = norm2(v);
    if (nv == 0.0) return 0.0;
    for (double& x : v) x /= nv;
    double lambda = 0.0;
    for (int it = 0; it < iters; ++it) {
        Vec w = apply(v);
        double nw = norm2(w);
        if (nw < 1e-300) return 0.0;
        lambda = nw;
        for (std::size_t i = 0; i < dim; ++i) v[i] = w[i] / nw;
    }
    return lambda;
}

}  // namespace detail

// Empirical maxima of the bound constants over a logged run plus its paired
// counterfactual trajectory. L_H is analytic for the linear models (the
// quadratic loss has a constant Hessian; the sigmoid's third derivative is
// bounded) and sampled around the trajectory for the Mlp.
inline BoundConstants estimate_constants(const TrajectoryStore& traj, const Dataset& data, std::size_t j,
                                         const std::vector<Vec>& counterfactual) {
    require(counterfactual.size() == traj.steps + 1, "estimate_constants: counterfactual length != T+1");
    const ModelSpec& model = traj.model;
    std::size_t p = model.param_count();
    BoundConstants c;

    for (std::uint64_t t = 0; t < traj.steps; ++t) {
        const StepRecord& r = traj.record(t);
        c.eta_max = std::max(c.eta_max, r.lr);
        const Vec& theta = traj.theta_at(t);

        auto h_full = [&](const Vec& v) {
            Vec out(p, 0.0);
            for (std::uint32_t i : r.batch) hvp_sample_accum(model, theta, data.samples[i], v, 1.0, out);
            for (double& x : out) x /= static_cast<double>(r.batch.size());
            return out;
        };
        c.m_h = std::max(c.m_h, detail::operator_norm(h_full, p, 7u * t + 1));

        bool in_batch =
            std::find(r.batch.begin(), r.batch.end(), static_cast<std::uint32_t>(j)) != r.batch.end();
        if (in_batch && r.batch.size() > 1) {
            auto h_diff = [&](const Vec& v) {
                Vec full(p, 0.0), rest(p, 0.0);
                for (std::uint32_t i : r.batch) {
                    hvp_sample_accum(model, theta, data.samples[i], v, 1.0, full);
                    if (i != j) hvp_sample_accum(model, theta, data.samples[i], v, 1.0, rest);
                }
                double nf = static_cast<double>(r.batch.size());
                Vec out(p);
                for (std::size_t i = 0; i < p; ++i) out[i] = full[i] / nf - rest[i] / (nf - 1.0);
                return out;
            };
            c.eps_h = std::max(c.eps_h, detail::operator_norm(h_diff, p, 13u * t + 3));
        }
    }
    for (std::uint64_t t = 0; t <= traj.steps; ++t) {
        Vec diff = counterfactual[t];
        const Vec& theta = traj.theta_at(t);
        for (std::size_t i = 0; i < p; ++i) diff[i] -= theta[i];
        c.m = std::max(c.m, norm2(diff));
    }

    if (model.kind == ModelKind::LinearLeastSquares) {
        c.l_h = 0.0;
    } else if (model.kind == ModelKind::LogisticRegression) {
        // |sigma''| <= 1/(6 sqrt 3); per-sample Hessian is sigma'(z) xt xt^T
        double max_cube = 0.0;
        for (const Sample& z : data.samples) {
            double n2 = dot(z.x, z.x) + 1.0;  // (x, 1) augmented
            max_cube = std::max(max_cube, std::pow(n2, 1.5));
        }
        c.l_h = max_cube / (6.0 * std::sqrt(3.0));
    } else {
        // sampled Lipschitz estimate around trajectory points
        Rng rng(traj.seed ^ 0xabcdefULL);
        for (int trial = 0; trial < 16; ++trial) {
            std::uint64_t t = traj.steps > 1 ? rng.next_below(traj.steps) : 0;
            const StepRecord& r = traj.record(t);
            const Vec& theta = traj.theta_at(t);
            Vec theta2 = theta;
            for (double& x : theta2) x += 0.05 * rng.normal();
            Vec sep(p);
            for (std::size_t i = 0; i < p; ++i) sep[i] = theta2[i] - theta[i];
            double dist = norm2(sep);
            if (dist < 1e-12) continue;
            auto h_gap = [&](const Vec& v) {
                Vec a(p, 0.0), b(p, 0.0);
                for (std::uint32_t i : r.batch) {
                    hvp_sample_accum(model, theta, data.samples[i], v, 1.0, a);
                    hvp_sample_accum(model, theta2, data.samples[i], v, 1.0, b);
                }
                Vec out(p);
                double nb = static_cast<double>(r.batch.size());
                for (std::size_t i = 0; i < p; ++i) out[i] = (a[i] - b[i]) / nb;
                return out;
            };
            c.l_h = std::max(c.l_h, detail::operator_norm(h_gap, p, 17u * trial + 5, 60) / dist);
        }
    }
    return c;
}

}  // namespace dit
