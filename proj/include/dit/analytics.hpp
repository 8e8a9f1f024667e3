#pragma once

#include <array>
#include <map>

#include "dit/influence.hpp"

namespace dit {

// Per-sample, per-epoch influence matrix feeding the pattern and stage
// analyses.
struct InfluenceSeries {
    std::vector<std::size_t> sample_ids;
    std::vector<Vec> values;  // values[s][e], samples x epochs

    std::size_t n_samples() const { return values.size(); }
    std::size_t n_epochs() const { return values.empty() ? 0 : values[0].size(); }
};

enum class PatternLabel { StableInfluencer, EarlyInfluencer, LateBloomer, HighlyFluctuating };

inline const char* pattern_name(PatternLabel p) {
    switch (p) {
        case PatternLabel::StableInfluencer: return "stable_influencer";
        case PatternLabel::EarlyInfluencer: return "early_influencer";
        case PatternLabel::LateBloomer: return "late_bloomer";
        case PatternLabel::HighlyFluctuating: return "highly_fluctuating";
    }
    return "?";
}

struct StageSplit {
    std::size_t b1 = 0, b2 = 0;  // epoch indices dividing [0, E] into three stages
    bool fallback = false;       // equal thirds used
};

// ---------------------------------------------------------------------------
// Correlation metrics

inline double pearson(const Vec& xs, const Vec& ys) {
    require(xs.size() == ys.size(), "pearson: length mismatch");
    require(xs.size() >= 2, "pearson: need at least 2 points");
    std::size_t n = xs.size();
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < n; ++i) {
        mx += xs[i];
        my += ys[i];
    }
    mx /= n;
    my /= n;
    double sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < n; ++i) {
        sxy += (xs[i] - mx) * (ys[i] - my);
        sxx += (xs[i] - mx) * (xs[i] - mx);
        syy += (ys[i] - my) * (ys[i] - my);
    }
    require(sxx > 0 && syy > 0, "pearson: zero variance");
    return sxy / std::sqrt(sxx * syy);
}

// average ranks, ties sharing the mean rank
inline Vec average_ranks(const Vec& xs) {
    std::size_t n = xs.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return xs[a] < xs[b]; });
    Vec ranks(n);
    std::size_t i = 0;
    while (i < n) {
        std::size_t k = i;
        while (k + 1 < n && xs[order[k + 1]] == xs[order[i]]) ++k;
        double r = (static_cast<double>(i) + static_cast<double>(k)) / 2.0 + 1.0;
        for (std::size_t m = i; m <= k; ++m) ranks[order[m]] = r;
        i = k + 1;
    }
    return ranks;
}

// Tie-robust form: Pearson on average ranks.
inline double spearman(const Vec& xs, const Vec& ys) {
    return pearson(average_ranks(xs), average_ranks(ys));
}

// Kendall tau-b, O(n^2) pair counting with tie correction.
inline double kendall_tau(const Vec& xs, const Vec& ys) {
    require(xs.size() == ys.size(), "kendall: length mismatch");
    require(xs.size() >= 2, "kendall: need at least 2 points");
    std::size_t n = xs.size();
    long long nc = 0, nd = 0, tx = 0, ty = 0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = i + 1; k < n; ++k) {
            double dx = xs[i] - xs[k], dy = ys[i] - ys[k];
            if (dx == 0 && dy == 0) continue;
            if (dx == 0) {
                ++tx;
            } else if (dy == 0) {
                ++ty;
            } else if ((dx > 0) == (dy > 0)) {
                ++nc;
            } else {
                ++nd;
            }
        }
    double denom = std::sqrt(static_cast<double>(nc + nd + tx)) *
                   std::sqrt(static_cast<double>(nc + nd + ty));
    require(denom > 0, "kendall: all pairs tied");
    return static_cast<double>(nc - nd) / denom;
}

// Jaccard similarity of the top-ceil(fraction*n) index sets, ranked
// descending (or by absolute value); ties at the cutoff resolved by smaller
// index first.
inline double jaccard_top(const Vec& xs, const Vec& ys, double fraction = 0.3, bool use_abs = false) {
    require(xs.size() == ys.size(), "jaccard_top: length mismatch");
    require(fraction > 0 && fraction <= 1, "jaccard_top: fraction in (0,1]");
    std::size_t n = xs.size();
    std::size_t k = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(n)));
    auto top = [&](const Vec& v) {
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            double va = use_abs ? std::fabs(v[a]) : v[a];
            double vb = use_abs ? std::fabs(v[b]) : v[b];
            if (va != vb) return va > vb;
            return a < b;
        });
        return std::set<std::size_t>(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
    };
    auto a = top(xs), b = top(ys);
    std::size_t inter = 0;
    for (std::size_t i : a) inter += b.count(i);
    std::size_t uni = a.size() + b.size() - inter;
    return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

// ---------------------------------------------------------------------------
// Regression p-value machinery (no external stats dependency)

namespace detail {

inline double log_gamma(double x) { return std::lgamma(x); }

// regularized incomplete beta I_x(a, b) by continued fraction
inline double betacf(double a, double b, double x) {
    const int max_it = 300;
    const double eps = 3e-14, fpmin = 1e-300;
    double qab = a + b, qap = a + 1.0, qam = a - 1.0;
    double c = 1.0, d = 1.0 - qab * x / qap;
    if (std::fabs(d) < fpmin) d = fpmin;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= max_it; ++m) {
        int m2 = 2 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::fabs(d) < fpmin) d = fpmin;
        c = 1.0 + aa / c;
        if (std::fabs(c) < fpmin) c = fpmin;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::fabs(d) < fpmin) d = fpmin;
        c = 1.0 + aa / c;
        if (std::fabs(c) < fpmin) c = fpmin;
        d = 1.0 / d;
        double del = d * c;
        h *= del;
        if (std::fabs(del - 1.0) < eps) break;
    }
    return h;
}

inline double inc_beta(double a, double b, double x) {
    if (x <= 0.0) return 0.0;
    if (x >= 1.0) return 1.0;
    double bt = std::exp(log_gamma(a + b) - log_gamma(a) - log_gamma(b) + a * std::log(x) +
                         b * std::log(1.0 - x));
    if (x < (a + 1.0) / (a + b + 2.0)) return bt * betacf(a, b, x) / a;
    return 1.0 - bt * betacf(b, a, 1.0 - x) / b;
}

// two-sided p-value of a t statistic with nu degrees of freedom
inline double t_pvalue(double t, double nu) {
    return inc_beta(nu / 2.0, 0.5, nu / (nu + t * t));
}

}  // namespace detail

// OLS of y on 0..n-1; returns (slope, two-sided p-value of the slope).
inline std::pair<double, double> trend_slope(const Vec& y) {
    std::size_t n = y.size();
    require(n >= 3, "trend_slope: need at least 3 points");
    double mx = (static_cast<double>(n) - 1.0) / 2.0;
    double my = 0;
    for (double v : y) my += v;
    my /= n;
    double sxx = 0, sxy = 0;
    for (std::size_t i = 0; i < n; ++i) {
        double dx = static_cast<double>(i) - mx;
        sxx += dx * dx;
        sxy += dx * (y[i] - my);
    }
    double slope = sxy / sxx;
    double intercept = my - slope * mx;
    double sse = 0;
    for (std::size_t i = 0; i < n; ++i) {
        double r = y[i] - (intercept + slope * static_cast<double>(i));
        sse += r * r;
    }
    double nu = static_cast<double>(n - 2);
    double se2 = sse / nu / sxx;
    if (se2 <= 0) return {slope, slope == 0.0 ? 1.0 : 0.0};
    double t = slope / std::sqrt(se2);
    return {slope, detail::t_pvalue(t, nu)};
}

// Per-epoch column standardization across samples, then a per-sample trend
// regression on epoch index:
//   significant negative slope -> EarlyInfluencer
//   significant positive slope -> LateBloomer
//   else high per-sample std   -> HighlyFluctuating
//   else                       -> StableInfluencer
inline std::map<std::size_t, PatternLabel> classify_patterns(const InfluenceSeries& series,
                                                             double p_threshold = 0.05,
                                                             double fluct_threshold = 1.0,
                                                             std::vector<std::string>* warnings = nullptr) {
    std::size_t ns = series.n_samples(), ne = series.n_epochs();
    require(ne >= 3, "classify_patterns: need at least 3 epochs");
    require(series.sample_ids.size() == ns, "classify_patterns: id/value mismatch");

    // standardize each epoch column across samples (population std)
    std::vector<Vec> std_vals(ns, Vec(ne, 0.0));
    for (std::size_t e = 0; e < ne; ++e) {
        double m = 0;
        for (std::size_t s = 0; s < ns; ++s) m += series.values[s][e];
        m /= static_cast<double>(ns);
        double var = 0;
        for (std::size_t s = 0; s < ns; ++s) {
            double d = series.values[s][e] - m;
            var += d * d;
        }
        var /= static_cast<double>(ns);
        double sd = std::sqrt(var);
        if (sd == 0.0) {
            if (warnings)
                warnings->push_back("epoch " + std::to_string(e) +
                                    ": zero cross-sample variance, column standardized to zeros");
            continue;
        }
        for (std::size_t s = 0; s < ns; ++s) std_vals[s][e] = (series.values[s][e] - m) / sd;
    }

    std::map<std::size_t, PatternLabel> out;
    for (std::size_t s = 0; s < ns; ++s) {
        auto [slope, pval] = trend_slope(std_vals[s]);
        PatternLabel label;
        if (pval < p_threshold && slope < 0) {
            label = PatternLabel::EarlyInfluencer;
        } else if (pval < p_threshold && slope > 0) {
            label = PatternLabel::LateBloomer;
        } else {
            double m = 0;
            for (double v : std_vals[s]) m += v;
            m /= static_cast<double>(ne);
            double var = 0;
            for (double v : std_vals[s]) var += (v - m) * (v - m);
            double sd = std::sqrt(var / static_cast<double>(ne));
            label = sd > fluct_threshold ? PatternLabel::HighlyFluctuating
                                         : PatternLabel::StableInfluencer;
        }
        out[series.sample_ids[s]] = label;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Training-stage segmentation

namespace detail {

// Least-squares fit of a*exp(-b*t)+c: grid over b with closed-form (a, c),
// followed by local refinement of b.
struct ExpFit {
    double a = 0, b = 0, c = 0;
    double sse = 0;
    bool ok = false;
};

inline ExpFit fit_exponential(const Vec& y) {
    std::size_t n = y.size();
    auto solve_for_b = [&](double b) {
        // linear LS in (a, c) with basis e^{-b t} and 1
        double s_ee = 0, s_e1 = 0, s_ey = 0, s_1y = 0;
        for (std::size_t t = 0; t < n; ++t) {
            double e = std::exp(-b * static_cast<double>(t));
            s_ee += e * e;
            s_e1 += e;
            s_ey += e * y[t];
            s_1y += y[t];
        }
        double nn = static_cast<double>(n);
        double det = s_ee * nn - s_e1 * s_e1;
        ExpFit f;
        f.b = b;
        if (std::fabs(det) < 1e-12) return f;
        f.a = (s_ey * nn - s_e1 * s_1y) / det;
        f.c = (s_ee * s_1y - s_e1 * s_ey) / det;
        f.sse = 0;
        for (std::size_t t = 0; t < n; ++t) {
            double r = y[t] - (f.a * std::exp(-f.b * static_cast<double>(t)) + f.c);
            f.sse += r * r;
        }
        f.ok = true;
        return f;
    };
    ExpFit best;
    for (double b = 0.01; b <= 2.0; b *= 1.25) {
        ExpFit f = solve_for_b(b);
        if (f.ok && (!best.ok || f.sse < best.sse)) best = f;
    }
    if (!best.ok) return best;
    double step = best.b * 0.1;
    for (int it = 0; it < 40; ++it) {
        for (double cand : {best.b - step, best.b + step}) {
            if (cand <= 0) continue;
            ExpFit f = solve_for_b(cand);
            if (f.ok && f.sse < best.sse) best = f;
        }
        step *= 0.7;
    }
    // a decaying fit must have positive amplitude
    if (best.a <= 0) best.ok = false;
    return best;
}

}  // namespace detail

// Splits [0, E] into early/middle/late using the two largest |residual|
// peaks of an exponential decay fit, with a minimum separation of
// ceil(E/4); peak ties break to the earlier epoch. Falls back to equal
// thirds when the fit or the peak search degenerates.
inline StageSplit segment_stages(const Vec& loss_curve, std::vector<std::string>* warnings = nullptr) {
    std::size_t n = loss_curve.size();
    require(n >= 6, "segment_stages: need at least 6 epochs");
    auto fallback = [&](const std::string& why) {
        if (warnings) warnings->push_back("segment_stages: " + why + "; using equal thirds");
        StageSplit s;
        s.b1 = n / 3;
        s.b2 = 2 * n / 3;
        s.fallback = true;
        return s;
    };

    bool decreasing = loss_curve.front() > loss_curve.back();
    if (!decreasing) return fallback("loss curve is not decreasing");
    auto fit = detail::fit_exponential(loss_curve);
    if (!fit.ok) return fallback("exponential fit failed");

    Vec resid(n);
    double max_abs = 0;
    for (std::size_t t = 0; t < n; ++t) {
        resid[t] = std::fabs(loss_curve[t] -
                             (fit.a * std::exp(-fit.b * static_cast<double>(t)) + fit.c));
        max_abs = std::max(max_abs, resid[t]);
    }
    double scale = *std::max_element(loss_curve.begin(), loss_curve.end()) -
                   *std::min_element(loss_curve.begin(), loss_curve.end());
    if (scale <= 0 || max_abs < 1e-9 * std::max(scale, 1.0))
        return fallback("residuals are degenerate");

    // interior local maxima of |residual|
    std::vector<std::size_t> peaks;
    for (std::size_t t = 1; t + 1 < n; ++t)
        if (resid[t] >= resid[t - 1] && resid[t] > resid[t + 1]) peaks.push_back(t);
    std::stable_sort(peaks.begin(), peaks.end(), [&](std::size_t a, std::size_t b) {
        if (resid[a] != resid[b]) return resid[a] > resid[b];
        return a < b;  // earlier epoch wins ties
    });
    std::size_t min_sep = (n + 3) / 4;
    std::vector<std::size_t> chosen;
    for (std::size_t p : peaks) {
        bool far = true;
        for (std::size_t q : chosen)
            if ((p > q ? p - q : q - p) < min_sep) far = false;
        if (far) chosen.push_back(p);
        if (chosen.size() == 2) break;
    }
    if (chosen.size() < 2) return fallback("fewer than two separated residual peaks");
    std::sort(chosen.begin(), chosen.end());
    return {chosen[0], chosen[1], false};
}

// ---------------------------------------------------------------------------
// Stage correlation and detection scoring

struct StageCorrelations {
    double early_middle, early_late, middle_late, early_full, middle_full, late_full;
};

// DIT influence per stage window plus the full window, then Kendall tau
// between the per-sample rankings.
inline StageCorrelations stage_correlation_table(const TrajectoryStore& traj, const Dataset& data,
                                                 const QuerySpec& q, const StageSplit& stages,
                                                 std::uint64_t steps_per_epoch) {
    require(data.size() >= 2, "stage correlations: need at least 2 samples");
    std::uint64_t b1 = stages.b1 * steps_per_epoch;
    std::uint64_t b2 = stages.b2 * steps_per_epoch;
    require(0 < b1 && b1 < b2 && b2 < traj.steps, "stage correlations: invalid stage boundaries");
    auto early = compute_influence_all_values(traj, data, q, {0, b1});
    auto middle = compute_influence_all_values(traj, data, q, {b1, b2});
    auto late = compute_influence_all_values(traj, data, q, {b2, traj.steps});
    auto full = compute_influence_all_values(traj, data, q, {0, traj.steps});
    return {kendall_tau(early, middle), kendall_tau(early, late),  kendall_tau(middle, late),
            kendall_tau(early, full),   kendall_tau(middle, full), kendall_tau(late, full)};
}

// Top-k most-negative influences vs the flipped set, k = |flips|. Ties break
// by smaller sample index.
inline std::size_t evaluate_detection(const std::vector<InfluenceRecord>& influences,
                                      const FlipRecord& flips) {
    std::size_t k = flips.flipped_indices.size();
    if (k == 0) return 0;
    std::vector<std::pair<double, std::size_t>> ranked;
    ranked.reserve(influences.size());
    for (const auto& r : influences) ranked.emplace_back(r.q_value, r.j);
    require(ranked.size() >= k, "evaluate_detection: fewer influences than flips");
    std::sort(ranked.begin(), ranked.end());  // ascending value, then index
    std::size_t hit = 0;
    for (std::size_t i = 0; i < k; ++i) hit += flips.flipped_indices.count(ranked[i].second);
    return hit;
}

}  // namespace dit
