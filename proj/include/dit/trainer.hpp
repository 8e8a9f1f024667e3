#pragma once

#include <cstring>
#include <deque>
#include <fstream>
#include <optional>

#include "dit/data.hpp"
#include "dit/model.hpp"

namespace dit {

using Batch = std::vector<std::uint32_t>;

// Piecewise-constant learning-rate schedule: eta_t is the rate of the last
// entry whose step is <= t. A constant schedule is a single entry at step 0.
struct LrSchedule {
    std::vector<std::pair<std::uint64_t, double>> entries{{0, 0.1}};

    static LrSchedule constant(double eta) { return {{{0, eta}}}; }

    double at(std::uint64_t t) const {
        double eta = entries.front().second;
        for (const auto& [step, e] : entries) {
            if (step <= t) eta = e;
        }
        return eta;
    }

    double max_rate(std::uint64_t T) const {
        double m = 0.0;
        for (std::uint64_t t = 0; t < T; ++t) m = std::max(m, at(t));
        return m;
    }

    void validate() const {
        require(!entries.empty() && entries.front().first == 0, "lr schedule must start at step 0");
        for (std::size_t i = 0; i < entries.size(); ++i) {
            require(entries[i].second > 0.0, "lr schedule: every rate must be positive");
            if (i > 0) require(entries[i].first > entries[i - 1].first, "lr schedule: steps must increase");
        }
    }
};

struct TrainConfig {
    std::uint64_t steps = 0;       // T
    std::uint32_t batch_size = 1;  // |S_t|
    LrSchedule lr;
    std::uint64_t seed = 0;
    // storage window: contiguous [window_begin, window_end) of step indices
    std::uint64_t window_begin = 0;
    std::uint64_t window_end = UINT64_MAX;  // clamped to T
    std::uint64_t checkpoint_interval = 0;  // 0 = no checkpointing

    std::uint64_t window_lo() const { return window_begin; }
    std::uint64_t window_hi() const { return std::min(window_end, steps); }

    void validate(std::size_t dataset_size) const {
        lr.validate();
        require(batch_size >= 1, "batch_size >= 1");
        require(batch_size <= dataset_size, "batch_size exceeds dataset size");
        require(window_begin <= window_hi(), "storage window must be a valid range");
    }
};

struct StepRecord {
    std::uint64_t t = 0;
    Batch batch;       // S_t
    double lr = 0.0;   // eta_t
    Vec params_after;  // theta^{[t+1]}
};

struct TrajectoryStore {
    ModelSpec model;  // not serialized; reattached from config on load
    std::uint64_t n = 0, steps = 0, seed = 0;
    std::uint64_t window_begin = 0, window_end = 0;
    Vec theta0;
    std::vector<StepRecord> records;  // sorted by t, contiguous

    std::size_t param_dim() const { return theta0.size(); }

    const StepRecord& record(std::uint64_t t) const {
        require(t >= window_begin && t < window_end, "step outside storage window");
        return records[t - window_begin];
    }

    // theta^{[t]}: theta0 for t = 0, otherwise the predecessor's params_after.
    const Vec& theta_at(std::uint64_t t) const {
        if (t == 0) return theta0;
        return record(t - 1).params_after;
    }

    const Vec& final_params() const { return theta_at(steps); }
};

struct CheckpointStore {
    ModelSpec model;
    std::uint64_t n = 0, steps = 0, seed = 0;
    std::uint64_t interval = 0;  // C
    std::vector<Batch> batches;  // per step
    std::vector<double> lrs;     // per step
    Vec theta0;
    // checkpoint at step s holds theta^{[s]}; s in {0, C, 2C, ...} and s = T
    std::vector<std::pair<std::uint64_t, Vec>> checkpoints;

    const Vec* checkpoint_at(std::uint64_t s) const {
        for (const auto& [step, params] : checkpoints)
            if (step == s) return &params;
        return nullptr;
    }

    // largest checkpoint step <= s
    std::uint64_t nearest_before(std::uint64_t s) const {
        std::uint64_t best = UINT64_MAX;
        for (const auto& [step, params] : checkpoints)
            if (step <= s && (best == UINT64_MAX || step > best)) best = step;
        require(best != UINT64_MAX, "no checkpoint at or before requested step");
        return best;
    }
};

// Pre-generates the whole batch sequence: indices are drawn by seeded
// epoch-shuffling without replacement. A batch that spans an epoch boundary
// is filled from the next epoch's shuffle; an index already present in the
// partially filled batch is deferred to the back of the pool so batches stay
// duplicate-free.
inline std::vector<Batch> sample_batches(std::size_t n, std::uint64_t steps, std::uint32_t batch_size,
                                         std::uint64_t seed) {
    require(batch_size <= n, "sample_batches: batch_size > N");
    Rng rng(seed);
    std::deque<std::uint32_t> pool;
    auto refill = [&] {
        std::vector<std::uint32_t> perm(n);
        std::iota(perm.begin(), perm.end(), 0u);
        rng.shuffle(perm);
        for (std::uint32_t i : perm) pool.push_back(i);
    };
    std::vector<Batch> batches;
    batches.reserve(steps);
    for (std::uint64_t t = 0; t < steps; ++t) {
        Batch b;
        b.reserve(batch_size);
        while (b.size() < batch_size) {
            if (pool.empty()) refill();
            std::uint32_t idx = pool.front();
            pool.pop_front();
            if (std::find(b.begin(), b.end(), idx) != b.end()) {
                pool.push_back(idx);
                continue;
            }
            b.push_back(idx);
        }
        batches.push_back(std::move(b));
    }
    return batches;
}

namespace detail {

// One SGD step: theta -= (eta/|S|) * sum over the batch, in batch order,
// optionally skipping one sample index (the counterfactual path; the divisor
// stays |S_t|).
inline void sgd_step(const ModelSpec& model, const Dataset& data, const Batch& batch, double eta,
                     Vec& theta, std::int64_t skip = -1) {
    Vec gsum(theta.size(), 0.0);
    for (std::uint32_t i : batch) {
        if (skip >= 0 && i == static_cast<std::uint32_t>(skip)) continue;
        grad_accum(model, theta, data.samples[i], 1.0, gsum);
    }
    axpy(-eta / static_cast<double>(batch.size()), gsum, theta);
}

inline void check_finite(const Vec& theta, std::uint64_t t) {
    if (!all_finite(theta))
        throw NumericError("training diverged: non-finite parameter at step " + std::to_string(t));
}

}  // namespace detail

inline std::uint64_t batch_seed(std::uint64_t seed) { return seed ^ 0x5deece66dULL; }

inline TrajectoryStore train(const Dataset& data, const ModelSpec& model, const TrainConfig& config,
                             const std::vector<Batch>* batches = nullptr) {
    config.validate(data.size());
    require(data.feature_dim == model.input_dim, "train: dataset/model dimension mismatch");
    std::vector<Batch> owned;
    if (!batches) {
        owned = sample_batches(data.size(), config.steps, config.batch_size, batch_seed(config.seed));
        batches = &owned;
    }
    require(batches->size() == config.steps, "train: batch sequence length != T");

    TrajectoryStore store;
    store.model = model;
    store.n = data.size();
    store.steps = config.steps;
    store.seed = config.seed;
    store.window_begin = config.window_lo();
    store.window_end = config.window_hi();
    store.theta0 = init_params(model, config.seed);

    Vec theta = store.theta0;
    for (std::uint64_t t = 0; t < config.steps; ++t) {
        double eta = config.lr.at(t);
        detail::sgd_step(model, data, (*batches)[t], eta, theta);
        detail::check_finite(theta, t);
        if (t >= store.window_begin && t < store.window_end)
            store.records.push_back({t, (*batches)[t], eta, theta});
    }
    return store;
}

// Counterfactual SGD: same theta0 and batch sequence, sample j's gradient
// skipped, divisor unchanged. Returns theta_{-j}^{[t]} for t = 0..T.
inline std::vector<Vec> counterfactual_train(const Dataset& data, const ModelSpec& model,
                                             const TrainConfig& config, std::size_t j,
                                             const std::vector<Batch>& batches) {
    config.validate(data.size());
    require(batches.size() == config.steps, "counterfactual_train: batch sequence length != T");
    require(j < data.size(), "counterfactual_train: sample index out of range");
    std::vector<Vec> traj;
    traj.reserve(config.steps + 1);
    Vec theta = init_params(model, config.seed);
    traj.push_back(theta);
    for (std::uint64_t t = 0; t < config.steps; ++t) {
        detail::sgd_step(model, data, batches[t], config.lr.at(t), theta,
                         static_cast<std::int64_t>(j));
        detail::check_finite(theta, t);
        traj.push_back(theta);
    }
    return traj;
}

inline CheckpointStore train_checkpointed(const Dataset& data, const ModelSpec& model,
                                          const TrainConfig& config,
                                          const std::vector<Batch>* batches = nullptr) {
    config.validate(data.size());
    require(config.checkpoint_interval > 0, "train_checkpointed: checkpoint interval required");
    std::vector<Batch> owned;
    if (!batches) {
        owned = sample_batches(data.size(), config.steps, config.batch_size, batch_seed(config.seed));
        batches = &owned;
    }
    CheckpointStore store;
    store.model = model;
    store.n = data.size();
    store.steps = config.steps;
    store.seed = config.seed;
    store.interval = config.checkpoint_interval;
    store.batches = *batches;
    store.theta0 = init_params(model, config.seed);
    for (std::uint64_t t = 0; t < config.steps; ++t) store.lrs.push_back(config.lr.at(t));

    Vec theta = store.theta0;
    store.checkpoints.emplace_back(0, theta);
    for (std::uint64_t t = 0; t < config.steps; ++t) {
        detail::sgd_step(model, data, (*batches)[t], store.lrs[t], theta);
        detail::check_finite(theta, t);
        std::uint64_t s = t + 1;
        if (s % config.checkpoint_interval == 0 || s == config.steps)
            if (!store.checkpoint_at(s)) store.checkpoints.emplace_back(s, theta);
    }
    return store;
}

// Reconstructs theta^{[t]} for t in [from_step, to_step] by replaying from
// the nearest checkpoint at or before from_step. Replay is bit-exact because
// the step arithmetic is identical to training.
inline std::vector<Vec> replay_segment(const CheckpointStore& ckpt, const Dataset& data,
                                       const ModelSpec& model, std::uint64_t from_step,
                                       std::uint64_t to_step) {
    require(to_step <= ckpt.steps, "replay_segment: to_step > T");
    require(from_step <= to_step, "replay_segment: empty range");
    std::uint64_t c = ckpt.nearest_before(from_step);
    Vec theta = *ckpt.checkpoint_at(c);
    std::vector<Vec> out;
    for (std::uint64_t t = c; t <= to_step; ++t) {
        if (const Vec* stored = ckpt.checkpoint_at(t)) theta = *stored;
        if (t >= from_step) out.push_back(theta);
        if (t < to_step)
            detail::sgd_step(model, data, ckpt.batches[t], ckpt.lrs[t], theta);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Binary formats. "DIT1": trajectory log. "DITC": checkpoint log. Both are
// little-endian with fixed-width fields.

namespace detail {

template <typename T>
void put(std::ostream& out, T v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in) {
    T v;
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) throw LoadError("trajectory file: truncated");
    return v;
}

inline void put_vec(std::ostream& out, const Vec& v) {
    out.write(reinterpret_cast<const char*>(v.data()),
              static_cast<std::streamsize>(v.size() * sizeof(double)));
}

inline Vec get_vec(std::istream& in, std::size_t n) {
    Vec v(n);
    in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(double)));
    if (!in) throw LoadError("trajectory file: truncated");
    return v;
}

inline void check_magic(std::istream& in, const char* magic) {
    char m[4];
    in.read(m, 4);
    if (!in || std::memcmp(m, magic, 4) != 0)
        throw LoadError(std::string("bad magic, expected ") + magic);
}

}  // namespace detail

inline void save_trajectory(const TrajectoryStore& store, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw LoadError("cannot write " + path);
    out.write("DIT1", 4);
    detail::put<std::uint32_t>(out, 1);
    detail::put<std::uint64_t>(out, store.param_dim());
    detail::put<std::uint64_t>(out, store.steps);
    detail::put<std::uint64_t>(out, store.n);
    detail::put<std::uint64_t>(out, store.seed);
    detail::put<std::uint64_t>(out, store.window_begin);
    detail::put<std::uint64_t>(out, store.window_end);
    detail::put_vec(out, store.theta0);
    for (const StepRecord& r : store.records) {
        detail::put<std::uint64_t>(out, r.t);
        detail::put<double>(out, r.lr);
        detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(r.batch.size()));
        for (std::uint32_t i : r.batch) detail::put<std::uint32_t>(out, i);
        detail::put_vec(out, r.params_after);
    }
}

inline TrajectoryStore load_trajectory(const std::string& path, const ModelSpec& model) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw LoadError("cannot open " + path);
    detail::check_magic(in, "DIT1");
    std::uint32_t version = detail::get<std::uint32_t>(in);
    if (version != 1) throw LoadError("DIT1: unsupported version");
    TrajectoryStore store;
    store.model = model;
    std::uint64_t p = detail::get<std::uint64_t>(in);
    store.steps = detail::get<std::uint64_t>(in);
    store.n = detail::get<std::uint64_t>(in);
    store.seed = detail::get<std::uint64_t>(in);
    store.window_begin = detail::get<std::uint64_t>(in);
    store.window_end = detail::get<std::uint64_t>(in);
    require(model.param_count() == p, "DIT1: model spec does not match stored p");
    store.theta0 = detail::get_vec(in, p);
    for (std::uint64_t t = store.window_begin; t < store.window_end; ++t) {
        StepRecord r;
        r.t = detail::get<std::uint64_t>(in);
        require(r.t == t, "DIT1: records out of order");
        r.lr = detail::get<double>(in);
        std::uint32_t bs = detail::get<std::uint32_t>(in);
        r.batch.resize(bs);
        for (std::uint32_t& i : r.batch) i = detail::get<std::uint32_t>(in);
        r.params_after = detail::get_vec(in, p);
        store.records.push_back(std::move(r));
    }
    return store;
}

inline void save_checkpoints(const CheckpointStore& store, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw LoadError("cannot write " + path);
    out.write("DITC", 4);
    detail::put<std::uint32_t>(out, 1);
    detail::put<std::uint64_t>(out, store.theta0.size());
    detail::put<std::uint64_t>(out, store.steps);
    detail::put<std::uint64_t>(out, store.n);
    detail::put<std::uint64_t>(out, store.seed);
    detail::put<std::uint64_t>(out, store.interval);
    detail::put_vec(out, store.theta0);
    for (std::uint64_t t = 0; t < store.steps; ++t) {
        detail::put<double>(out, store.lrs[t]);
        detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(store.batches[t].size()));
        for (std::uint32_t i : store.batches[t]) detail::put<std::uint32_t>(out, i);
    }
    detail::put<std::uint64_t>(out, store.checkpoints.size());
    for (const auto& [s, params] : store.checkpoints) {
        detail::put<std::uint64_t>(out, s);
        detail::put_vec(out, params);
    }
}

inline CheckpointStore load_checkpoints(const std::string& path, const ModelSpec& model) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw LoadError("cannot open " + path);
    detail::check_magic(in, "DITC");
    std::uint32_t version = detail::get<std::uint32_t>(in);
    if (version != 1) throw LoadError("DITC: unsupported version");
    CheckpointStore store;
    store.model = model;
    std::uint64_t p = detail::get<std::uint64_t>(in);
    store.steps = detail::get<std::uint64_t>(in);
    store.n = detail::get<std::uint64_t>(in);
    store.seed = detail::get<std::uint64_t>(in);
    store.interval = detail::get<std::uint64_t>(in);
    require(model.param_count() == p, "DITC: model spec does not match stored p");
    store.theta0 = detail::get_vec(in, p);
    for (std::uint64_t t = 0; t < store.steps; ++t) {
        double lr = detail::get<double>(in);
        std::uint32_t bs = detail::get<std::uint32_t>(in);
        Batch b(bs);
        for (std::uint32_t& i : b) i = detail::get<std::uint32_t>(in);
        store.lrs.push_back(lr);
        store.batches.push_back(std::move(b));
    }
    std::uint64_t nc = detail::get<std::uint64_t>(in);
    for (std::uint64_t k = 0; k < nc; ++k) {
        std::uint64_t s = detail::get<std::uint64_t>(in);
        store.checkpoints.emplace_back(s, detail::get_vec(in, p));
    }
    return store;
}

}  // namespace dit
