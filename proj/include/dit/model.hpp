#pragma once

#include <algorithm>
#include <cstddef>
#include <span>

#include "dit/core.hpp"

namespace dit {

struct Sample {
    Vec x;
    double y = 0.0;  // {0, 1} for classification tasks
};

enum class ModelKind {
    LogisticRegression,   // linear logit, binary cross-entropy
    Mlp,                  // dense ReLU net, binary cross-entropy
    LinearLeastSquares,   // linear output, squared loss (convex quadratic)
};

// Immutable description of a model. Parameter flattening is layer-major:
// for each layer, the weight matrix row-major (out x in), then the bias
// vector. Basis queries (e_i) rely on this ordering being stable.
struct ModelSpec {
    ModelKind kind = ModelKind::LogisticRegression;
    std::size_t input_dim = 0;
    std::vector<std::size_t> hidden_widths;  // Mlp only

    std::vector<std::size_t> layer_dims() const {
        std::vector<std::size_t> dims;
        dims.push_back(input_dim);
        if (kind == ModelKind::Mlp)
            for (std::size_t h : hidden_widths) dims.push_back(h);
        dims.push_back(1);
        return dims;
    }

    std::size_t param_count() const {
        auto dims = layer_dims();
        std::size_t p = 0;
        for (std::size_t l = 0; l + 1 < dims.size(); ++l) p += dims[l + 1] * (dims[l] + 1);
        return p;
    }

    static ModelSpec logistic_regression(std::size_t d) { return {ModelKind::LogisticRegression, d, {}}; }
    static ModelSpec linear_least_squares(std::size_t d) { return {ModelKind::LinearLeastSquares, d, {}}; }
    static ModelSpec mlp(std::size_t d, std::vector<std::size_t> hidden = {8, 8}) {
        return {ModelKind::Mlp, d, std::move(hidden)};
    }
};

inline double sigmoid(double z) {
    if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
    double e = std::exp(z);
    return e / (1.0 + e);
}

namespace detail {

// Loss head on the scalar network output.
inline double head_loss(ModelKind kind, double logit, double y) {
    if (kind == ModelKind::LinearLeastSquares) {
        double r = logit - y;
        return 0.5 * r * r;
    }
    // binary cross-entropy with logits, log-sum-exp form
    return std::max(logit, 0.0) - logit * y + std::log1p(std::exp(-std::fabs(logit)));
}

inline double head_d1(ModelKind kind, double logit, double y) {
    if (kind == ModelKind::LinearLeastSquares) return logit - y;
    return sigmoid(logit) - y;
}

inline double head_d2(ModelKind kind, double logit) {
    if (kind == ModelKind::LinearLeastSquares) return 1.0;
    double s = sigmoid(logit);
    return s * (1.0 - s);
}

// Per-layer parameter views into a flat vector.
struct LayerView {
    const double* W;  // out x in, row-major
    const double* b;  // out
    std::size_t in, out;
};

inline std::vector<LayerView> layer_views(const ModelSpec& spec, const Vec& params) {
    auto dims = spec.layer_dims();
    std::vector<LayerView> views;
    std::size_t off = 0;
    for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
        LayerView v;
        v.in = dims[l];
        v.out = dims[l + 1];
        v.W = params.data() + off;
        off += v.in * v.out;
        v.b = params.data() + off;
        off += v.out;
        views.push_back(v);
    }
    return views;
}

// Forward pass storing pre-activations z and activations a per layer.
// a[0] is the input; a.back() has one entry, the logit.
struct ForwardTrace {
    std::vector<Vec> z;  // z[l] for layer l
    std::vector<Vec> a;  // a[0] = x, a[l+1] = activation of layer l
};

inline double forward(const ModelSpec& spec, const Vec& params, const Vec& x, ForwardTrace* trace) {
    require(x.size() == spec.input_dim, "forward: input dimension mismatch");
    require(params.size() == spec.param_count(), "forward: parameter length mismatch");
    auto layers = layer_views(spec, params);
    Vec a = x;
    if (trace) {
        trace->z.clear();
        trace->a.clear();
        trace->a.push_back(a);
    }
    for (std::size_t l = 0; l < layers.size(); ++l) {
        const auto& L = layers[l];
        Vec z(L.out);
        for (std::size_t r = 0; r < L.out; ++r) {
            double s = L.b[r];
            const double* row = L.W + r * L.in;
            for (std::size_t c = 0; c < L.in; ++c) s += row[c] * a[c];
            z[r] = s;
        }
        bool last = (l + 1 == layers.size());
        Vec act = z;
        if (!last)
            for (double& v : act) v = std::max(v, 0.0);
        if (trace) {
            trace->z.push_back(std::move(z));
            trace->a.push_back(act);
        }
        a = std::move(act);
    }
    return a[0];
}

// Reverse pass: given d(loss)/d(logit), accumulate scale * gradient into out.
inline void backward_accum(const ModelSpec& spec, const Vec& params, const ForwardTrace& trace,
                           double dlogit, double scale, Vec& out) {
    auto layers = layer_views(spec, params);
    std::size_t nl = layers.size();
    // offsets of each layer's parameters in the flat vector
    std::vector<std::size_t> off(nl);
    std::size_t o = 0;
    for (std::size_t l = 0; l < nl; ++l) {
        off[l] = o;
        o += layers[l].out * (layers[l].in + 1);
    }
    Vec delta{dlogit};
    for (std::size_t li = nl; li-- > 0;) {
        const auto& L = layers[li];
        const Vec& ain = trace.a[li];
        double* gW = out.data() + off[li];
        double* gb = gW + L.in * L.out;
        for (std::size_t r = 0; r < L.out; ++r) {
            double d = delta[r];
            double* row = gW + r * L.in;
            for (std::size_t c = 0; c < L.in; ++c) row[c] += scale * d * ain[c];
            gb[r] += scale * d;
        }
        if (li == 0) break;
        const Vec& zprev = trace.z[li - 1];
        Vec dprev(L.in, 0.0);
        for (std::size_t r = 0; r < L.out; ++r) {
            double d = delta[r];
            const double* row = L.W + r * L.in;
            for (std::size_t c = 0; c < L.in; ++c) dprev[c] += row[c] * d;
        }
        for (std::size_t c = 0; c < L.in; ++c)
            if (zprev[c] <= 0.0) dprev[c] = 0.0;  // ReLU'; kink treated as 0
        delta = std::move(dprev);
    }
}

}  // namespace detail

inline double loss(const ModelSpec& spec, const Vec& params, const Sample& z) {
    double logit = detail::forward(spec, params, z.x, nullptr);
    return detail::head_loss(spec.kind, logit, z.y);
}

inline void grad_accum(const ModelSpec& spec, const Vec& params, const Sample& z, double scale, Vec& out) {
    detail::ForwardTrace trace;
    double logit = detail::forward(spec, params, z.x, &trace);
    detail::backward_accum(spec, params, trace, detail::head_d1(spec.kind, logit, z.y), scale, out);
}

inline Vec grad(const ModelSpec& spec, const Vec& params, const Sample& z) {
    Vec g(spec.param_count(), 0.0);
    grad_accum(spec, params, z, 1.0, g);
    return g;
}

// Pre-sigmoid logit f(x; theta).
inline double predict(const ModelSpec& spec, const Vec& params, const Vec& x) {
    return detail::forward(spec, params, x, nullptr);
}

inline Vec predict_grad(const ModelSpec& spec, const Vec& params, const Vec& x) {
    detail::ForwardTrace trace;
    detail::forward(spec, params, x, &trace);
    Vec g(spec.param_count(), 0.0);
    detail::backward_accum(spec, params, trace, 1.0, 1.0, g);
    return g;
}

// Accumulates scale * (per-sample Hessian) * v into out, via a
// forward-over-reverse sweep. ReLU second derivative is taken as zero
// everywhere, so the result is exact away from the kinks.
inline void hvp_sample_accum(const ModelSpec& spec, const Vec& params, const Sample& z, const Vec& v,
                             double scale, Vec& out) {
    require(v.size() == spec.param_count(), "hvp: tangent length mismatch");
    detail::ForwardTrace trace;
    double logit = detail::forward(spec, params, z.x, &trace);
    auto layers = detail::layer_views(spec, params);
    auto vlayers = detail::layer_views(spec, v);
    std::size_t nl = layers.size();

    // tangent forward: da[l] = d(a[l]) along direction v (input fixed)
    std::vector<Vec> da(nl + 1);
    da[0] = Vec(spec.input_dim, 0.0);
    for (std::size_t l = 0; l < nl; ++l) {
        const auto& L = layers[l];
        const auto& V = vlayers[l];
        Vec dz(L.out);
        for (std::size_t r = 0; r < L.out; ++r) {
            double s = V.b[r];
            const double* wrow = L.W + r * L.in;
            const double* vrow = V.W + r * L.in;
            for (std::size_t c = 0; c < L.in; ++c)
                s += wrow[c] * da[l][c] + vrow[c] * trace.a[l][c];
            dz[r] = s;
        }
        bool last = (l + 1 == nl);
        if (!last)
            for (std::size_t r = 0; r < L.out; ++r)
                if (trace.z[l][r] <= 0.0) dz[r] = 0.0;
        da[l + 1] = std::move(dz);
    }

    // reverse pass carrying (delta, ddelta) pairs
    double d1 = detail::head_d1(spec.kind, logit, z.y);
    double d2 = detail::head_d2(spec.kind, logit);
    Vec delta{d1};
    Vec ddelta{d2 * da[nl][0]};

    std::vector<std::size_t> off(nl);
    std::size_t o = 0;
    for (std::size_t l = 0; l < nl; ++l) {
        off[l] = o;
        o += layers[l].out * (layers[l].in + 1);
    }

    for (std::size_t li = nl; li-- > 0;) {
        const auto& L = layers[li];
        const auto& V = vlayers[li];
        const Vec& ain = trace.a[li];
        const Vec& dain = da[li];
        double* hW = out.data() + off[li];
        double* hb = hW + L.in * L.out;
        for (std::size_t r = 0; r < L.out; ++r) {
            double d = delta[r], dd = ddelta[r];
            double* row = hW + r * L.in;
            for (std::size_t c = 0; c < L.in; ++c)
                row[c] += scale * (dd * ain[c] + d * dain[c]);
            hb[r] += scale * dd;
        }
        if (li == 0) break;
        const Vec& zprev = trace.z[li - 1];
        Vec dprev(L.in, 0.0), ddprev(L.in, 0.0);
        for (std::size_t r = 0; r < L.out; ++r) {
            double d = delta[r], dd = ddelta[r];
            const double* wrow = L.W + r * L.in;
            const double* vrow = V.W + r * L.in;
            for (std::size_t c = 0; c < L.in; ++c) {
                dprev[c] += wrow[c] * d;
                ddprev[c] += wrow[c] * dd + vrow[c] * d;
            }
        }
        for (std::size_t c = 0; c < L.in; ++c)
            if (zprev[c] <= 0.0) {
                dprev[c] = 0.0;
                ddprev[c] = 0.0;
            }
        delta = std::move(dprev);
        ddelta = std::move(ddprev);
    }
}

// Batch-mean Hessian-vector product H^{[t]} v over the given samples.
inline Vec hvp(const ModelSpec& spec, const Vec& params, std::span<const Sample> batch, const Vec& v) {
    require(!batch.empty(), "hvp: empty batch");
    Vec out(spec.param_count(), 0.0);
    for (const Sample& z : batch) hvp_sample_accum(spec, params, z, v, 1.0, out);
    double inv = 1.0 / static_cast<double>(batch.size());
    for (double& x : out) x *= inv;
    return out;
}

// Gradient of d(loss)/d(x_k) with respect to theta, i.e. one row of the
// mixed derivative used by feature-importance queries. Analytic for the
// linear models, central finite differences on x_k for the Mlp.
inline Vec feature_param_grad(const ModelSpec& spec, const Vec& params, const Sample& z, std::size_t k) {
    require(k < spec.input_dim, "feature_param_grad: feature index out of range");
    std::size_t p = spec.param_count();
    if (spec.kind != ModelKind::Mlp) {
        // logit = w.x + b; dl/dx_k = d1 * w_k
        // grad_theta of it: d2 * w_k * (x, 1) + d1 * e_{w_k}
        double logit = predict(spec, params, z.x);
        double d1 = detail::head_d1(spec.kind, logit, z.y);
        double d2 = detail::head_d2(spec.kind, logit);
        double wk = params[k];
        Vec out(p, 0.0);
        for (std::size_t i = 0; i < spec.input_dim; ++i) out[i] = d2 * wk * z.x[i];
        out[spec.input_dim] = d2 * wk;  // bias
        out[k] += d1;
        return out;
    }
    double h = 1e-5 * (1.0 + std::fabs(z.x[k]));
    Sample zp = z, zm = z;
    zp.x[k] += h;
    zm.x[k] -= h;
    Vec gp = grad(spec, params, zp);
    Vec gm = grad(spec, params, zm);
    Vec out(p);
    for (std::size_t i = 0; i < p; ++i) out[i] = (gp[i] - gm[i]) / (2.0 * h);
    return out;
}

// Seeded parameter initialization: uniform(-s, s) with s = 1/sqrt(fan_in),
// biases zero.
inline Vec init_params(const ModelSpec& spec, std::uint64_t seed) {
    auto dims = spec.layer_dims();
    Vec params(spec.param_count());
    Rng rng(seed);
    std::size_t off = 0;
    for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
        double s = 1.0 / std::sqrt(static_cast<double>(dims[l]));
        for (std::size_t i = 0; i < dims[l + 1] * dims[l]; ++i) params[off++] = rng.uniform(-s, s);
        for (std::size_t i = 0; i < dims[l + 1]; ++i) params[off++] = 0.0;
    }
    return params;
}

}  // namespace dit
