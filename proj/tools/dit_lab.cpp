// dit_lab: experiment front end for the dynamic influence tracker library.
//
// Subcommands: train, influence, compare, detect, dynamics, replay-check.
// A single JSON config drives every command; reruns from the same config are
// byte-identical (timestamps live only in the manifest). Exit codes:
//   0 success, 1 runtime error, 2 config error, 3 artifact mismatch.

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

#include "dit/analytics.hpp"
#include "dit/baselines.hpp"

using nlohmann::json;
namespace fs = std::filesystem;
using namespace dit;

namespace {

constexpr const char* kToolVersion = "1.0.0";

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ArtifactMismatch : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// formatting helpers: fixed %.17g rendering keeps report bytes reproducible

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::string fmt_short(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.4f", v);
    return buf;
}

std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

std::string hex64(std::uint64_t v) {
    char buf[20];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

double mean_of(const std::vector<double>& v) {
    double s = 0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / v.size();
}

double std_of(const std::vector<double>& v) {
    if (v.size() < 2) return 0.0;
    double m = mean_of(v), s = 0;
    for (double x : v) s += (x - m) * (x - m);
    return std::sqrt(s / (v.size() - 1));
}

// run fn(i) for i in [0, n) on up to jobs threads; outputs are merged by
// index so the result is independent of scheduling
template <typename Fn>
void parallel_for(std::size_t n, unsigned jobs, Fn&& fn) {
    if (jobs <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    std::exception_ptr err;
    std::mutex err_mu;
    auto worker = [&] {
        for (;;) {
            std::size_t i = next.fetch_add(1);
            if (i >= n) return;
            try {
                fn(i);
            } catch (...) {
                std::lock_guard<std::mutex> lock(err_mu);
                if (!err) err = std::current_exception();
                return;
            }
        }
    };
    unsigned w = std::min<unsigned>(jobs, static_cast<unsigned>(n));
    for (unsigned t = 0; t < w; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
    if (err) std::rethrow_exception(err);
}

// ---------------------------------------------------------------------------
// experiment configuration

struct DatasetSpec {
    std::string kind;  // synthetic | csv | idx
    std::size_t n = 0, dim = 0;
    double separation = 3.0;
    std::string path, labels_path, label_column;
    std::vector<std::string> numeric_columns, categorical_columns;
    unsigned class_a = 0, class_b = 1;
    double flip_rate = 0.0;
    std::size_t test_n = 0;         // synthetic held-out size
    double test_fraction = 0.2;     // csv/idx held-out tail
};

struct Experiment {
    DatasetSpec data;
    ModelSpec model;
    TrainConfig train_cfg;          // seed filled per run
    std::string query_kind = "test_set_loss";
    std::size_t query_index = 0;
    Vec query_x;
    std::string window_mode = "explicit";  // explicit | per_epoch | stage
    std::vector<TimeWindow> windows;
    std::uint64_t steps_per_epoch = 0;
    bool run_loo = true, run_if = true;
    double if_damping = 0.0;
    std::size_t track_samples = 0;  // dynamics subset cap (0 = all)
    std::vector<std::uint64_t> seeds;
    std::string out_dir = "out";
    std::string config_hash;
};

LrSchedule parse_lr(const json& j) {
    if (j.is_number()) return LrSchedule::constant(j.get<double>());
    LrSchedule s;
    s.entries.clear();
    for (const auto& e : j) s.entries.emplace_back(e.at(0).get<std::uint64_t>(), e.at(1).get<double>());
    return s;
}

Experiment parse_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config: " + path);
    json j;
    try {
        in >> j;
    } catch (const std::exception& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    Experiment ex;
    try {
        const json& d = j.at("dataset");
        ex.data.kind = d.at("kind").get<std::string>();
        if (ex.data.kind == "synthetic") {
            ex.data.n = d.at("n").get<std::size_t>();
            ex.data.dim = d.at("dim").get<std::size_t>();
            ex.data.separation = d.value("separation", 3.0);
            ex.data.test_n = d.value("test_n", std::max<std::size_t>(ex.data.n / 5, 2));
        } else if (ex.data.kind == "csv") {
            ex.data.path = d.at("path").get<std::string>();
            ex.data.label_column = d.at("label_column").get<std::string>();
            ex.data.numeric_columns = d.value("numeric_columns", std::vector<std::string>{});
            ex.data.categorical_columns = d.value("categorical_columns", std::vector<std::string>{});
            ex.data.test_fraction = d.value("test_fraction", 0.2);
        } else if (ex.data.kind == "idx") {
            ex.data.path = d.at("images").get<std::string>();
            ex.data.labels_path = d.at("labels").get<std::string>();
            ex.data.class_a = d.at("class_a").get<unsigned>();
            ex.data.class_b = d.at("class_b").get<unsigned>();
            ex.data.test_fraction = d.value("test_fraction", 0.2);
        } else {
            throw ConfigError("dataset.kind must be synthetic, csv, or idx");
        }
        ex.data.flip_rate = d.value("flip_rate", 0.0);

        const json& m = j.at("model");
        std::string mk = m.at("kind").get<std::string>();
        std::size_t dim = ex.data.dim;  // csv/idx dims resolved at load time
        if (mk == "logistic_regression") {
            ex.model = ModelSpec::logistic_regression(dim);
        } else if (mk == "linear_least_squares") {
            ex.model = ModelSpec::linear_least_squares(dim);
        } else if (mk == "mlp") {
            ex.model = ModelSpec::mlp(dim, m.at("hidden").get<std::vector<std::size_t>>());
        } else {
            throw ConfigError("model.kind must be logistic_regression, linear_least_squares, or mlp");
        }

        const json& t = j.at("train");
        ex.train_cfg.steps = t.at("steps").get<std::uint64_t>();
        ex.train_cfg.batch_size = t.at("batch_size").get<std::uint32_t>();
        ex.train_cfg.lr = parse_lr(t.at("lr"));
        ex.train_cfg.window_begin = t.value("window_begin", std::uint64_t{0});
        ex.train_cfg.window_end = t.value("window_end", UINT64_MAX);
        ex.train_cfg.checkpoint_interval = t.value("checkpoint_interval", std::uint64_t{0});
        ex.steps_per_epoch = t.value("steps_per_epoch", std::uint64_t{0});
        if (ex.steps_per_epoch == 0 && ex.train_cfg.batch_size > 0 && ex.data.n > 0)
            ex.steps_per_epoch = std::max<std::uint64_t>(1, ex.data.n / ex.train_cfg.batch_size);

        if (j.contains("query")) {
            const json& q = j.at("query");
            ex.query_kind = q.value("kind", std::string("test_set_loss"));
            ex.query_index = q.value("index", std::size_t{0});
            if (q.contains("x")) ex.query_x = q.at("x").get<Vec>();
        }

        if (j.contains("windows")) {
            const json& w = j.at("windows");
            ex.window_mode = w.value("mode", std::string("explicit"));
            if (w.contains("list"))
                for (const auto& e : w.at("list"))
                    ex.windows.push_back({e.at(0).get<std::uint64_t>(), e.at(1).get<std::uint64_t>()});
        } else {
            ex.windows.push_back({0, ex.train_cfg.steps});
        }

        if (j.contains("baselines")) {
            ex.run_loo = j["baselines"].value("loo", true);
            ex.run_if = j["baselines"].value("if", true);
            ex.if_damping = j["baselines"].value("if_damping", 0.0);
        }
        ex.track_samples = j.value("track_samples", std::size_t{0});
        ex.seeds = j.value("seeds", std::vector<std::uint64_t>{});
        if (ex.seeds.empty())
            for (std::uint64_t s = 0; s < 16; ++s) ex.seeds.push_back(s);
        ex.out_dir = j.value("out", std::string("out"));
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception& e) {
        throw ConfigError(std::string("config field error: ") + e.what());
    }

    // validate up front, before any compute
    try {
        if (ex.window_mode == "explicit") {
            if (ex.windows.empty()) throw ConfigError("windows.list must not be empty");
            for (const auto& w : ex.windows) w.validate(ex.train_cfg.steps);
        } else if (ex.window_mode != "per_epoch" && ex.window_mode != "stage") {
            throw ConfigError("windows.mode must be explicit, per_epoch, or stage");
        }
        if (ex.data.kind == "synthetic") {
            ex.train_cfg.seed = ex.seeds.front();
            ex.train_cfg.validate(ex.data.n);
        }
        if (ex.data.flip_rate < 0.0 || ex.data.flip_rate >= 1.0)
            throw ConfigError("dataset.flip_rate must be in [0,1)");
    } catch (const ContractViolation& e) {
        throw ConfigError(std::string("config validation: ") + e.what());
    }

    ex.config_hash = hex64(fnv1a(j.dump()));
    return ex;
}

// ---------------------------------------------------------------------------
// per-seed materialization

struct RunData {
    Dataset train_set;
    std::vector<Sample> test_set;
    FlipRecord flips;
};

RunData materialize(const Experiment& ex, std::uint64_t seed) {
    RunData r;
    if (ex.data.kind == "synthetic") {
        r.train_set = make_synthetic(seed, ex.data.n, ex.data.dim, ex.data.separation);
        r.test_set = make_synthetic(seed ^ 0x9e3779b97f4a7c15ULL, ex.data.test_n, ex.data.dim,
                                    ex.data.separation)
                         .samples;
    } else {
        Dataset full = ex.data.kind == "csv"
                           ? load_csv(ex.data.path, ex.data.label_column, ex.data.numeric_columns,
                                      ex.data.categorical_columns)
                           : load_idx(ex.data.path, ex.data.labels_path, ex.data.class_a,
                                      ex.data.class_b);
        std::size_t n_test = static_cast<std::size_t>(ex.data.test_fraction * full.size());
        std::size_t n_train = full.size() - n_test;
        r.train_set.name = full.name;
        r.train_set.feature_dim = full.feature_dim;
        r.train_set.samples.assign(full.samples.begin(),
                                   full.samples.begin() + static_cast<std::ptrdiff_t>(n_train));
        r.test_set.assign(full.samples.begin() + static_cast<std::ptrdiff_t>(n_train),
                          full.samples.end());
    }
    if (ex.data.flip_rate > 0.0) {
        auto [flipped, rec] = flip_labels(r.train_set, ex.data.flip_rate, seed ^ 0xf11bULL);
        r.train_set = std::move(flipped);
        r.flips = std::move(rec);
    }
    return r;
}

ModelSpec resolve_model(const Experiment& ex, const RunData& rd) {
    ModelSpec m = ex.model;
    if (m.input_dim == 0) m.input_dim = rd.train_set.feature_dim;
    require(m.input_dim == rd.train_set.feature_dim, "model/dataset dimension mismatch");
    return m;
}

QuerySpec resolve_query(const Experiment& ex, const RunData& rd) {
    if (ex.query_kind == "test_set_loss") return QuerySpec::test_set_loss(rd.test_set);
    if (ex.query_kind == "test_loss") {
        require(ex.query_index < rd.test_set.size(), "query.index out of test-set range");
        return QuerySpec::test_loss(rd.test_set[ex.query_index]);
    }
    if (ex.query_kind == "prediction") return QuerySpec::prediction(ex.query_x);
    if (ex.query_kind == "param_basis") return QuerySpec::param_basis(ex.query_index);
    if (ex.query_kind == "self_gradient") {
        require(ex.query_index < rd.train_set.size(), "query.index out of train-set range");
        return QuerySpec::self_gradient(rd.train_set.samples[ex.query_index]);
    }
    if (ex.query_kind == "feature_importance") {
        require(ex.query_index < rd.test_set.size(), "query.index out of test-set range");
        return QuerySpec::feature_importance(rd.test_set[0], ex.query_index);
    }
    throw ConfigError("unknown query.kind: " + ex.query_kind);
}

std::string traj_filename(const Experiment& ex, std::uint64_t seed) {
    return "traj-" + ex.config_hash + "-seed" + std::to_string(seed) + ".dit1";
}

std::string ckpt_filename(const Experiment& ex, std::uint64_t seed) {
    return "ckpt-" + ex.config_hash + "-seed" + std::to_string(seed) + ".ditc";
}

// trained trajectory for a seed, reusing the DIT_LAB_CACHE directory when a
// matching file already exists there
TrajectoryStore trained(const Experiment& ex, const RunData& rd, const ModelSpec& model,
                        std::uint64_t seed) {
    TrainConfig cfg = ex.train_cfg;
    cfg.seed = seed;
    if (const char* cache = std::getenv("DIT_LAB_CACHE")) {
        fs::path p = fs::path(cache) / traj_filename(ex, seed);
        if (fs::exists(p)) {
            TrajectoryStore t = load_trajectory(p.string(), model);
            if (t.seed == seed && t.steps == cfg.steps && t.n == rd.train_set.size()) return t;
        }
        TrajectoryStore t = train(rd.train_set, model, cfg);
        fs::create_directories(cache);
        save_trajectory(t, (fs::path(cache) / traj_filename(ex, seed)).string());
        return t;
    }
    return train(rd.train_set, model, cfg);
}

// ---------------------------------------------------------------------------
// report emission

void write_text(const fs::path& p, const std::string& body) {
    std::ofstream out(p);
    if (!out) throw std::runtime_error("cannot write " + p.string());
    out << body;
}

void write_manifest(const Experiment& ex, const std::string& command,
                    const std::vector<std::string>& artifacts, double seconds) {
    json m;
    m["tool_version"] = kToolVersion;
    m["command"] = command;
    m["config_hash"] = ex.config_hash;
    m["artifacts"] = artifacts;
    m["elapsed_seconds"] = seconds;
    // written last and atomically: render to a temp file, then rename
    fs::path dir(ex.out_dir);
    fs::path tmp = dir / ("manifest." + command + ".json.tmp");
    fs::path fin = dir / ("manifest." + command + ".json");
    write_text(tmp, m.dump(2) + "\n");
    fs::rename(tmp, fin);
}

// minimal SVG polyline chart; series are drawn in a fixed palette order
void write_svg_lines(const fs::path& p, const std::vector<std::pair<std::string, Vec>>& series,
                     const std::string& title) {
    const double W = 640, H = 400, L = 60, B = 40, T = 30, R = 20;
    double lo = 0, hi = 1;
    bool first = true;
    std::size_t max_len = 2;
    for (const auto& [name, ys] : series)
        for (double y : ys) {
            if (first) {
                lo = hi = y;
                first = false;
            }
            lo = std::min(lo, y);
            hi = std::max(hi, y);
        }
    for (const auto& [name, ys] : series) max_len = std::max(max_len, ys.size());
    if (hi - lo < 1e-12) hi = lo + 1.0;
    const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};
    std::ostringstream svg;
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
        << "\" viewBox=\"0 0 " << W << " " << H << "\">\n";
    svg << "<rect width=\"" << W << "\" height=\"" << H << "\" fill=\"white\"/>\n";
    svg << "<text x=\"" << W / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" << title
        << "</text>\n";
    svg << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B
        << "\" stroke=\"black\"/>\n";
    svg << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B
        << "\" stroke=\"black\"/>\n";
    std::size_t ci = 0;
    double legend_y = T + 10;
    for (const auto& [name, ys] : series) {
        const char* color = palette[ci % 6];
        svg << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
        for (std::size_t i = 0; i < ys.size(); ++i) {
            double x = L + (W - L - R) * (max_len > 1 ? double(i) / (max_len - 1) : 0.0);
            double y = H - B - (H - T - B) * (ys[i] - lo) / (hi - lo);
            svg << fmt_short(x) << "," << fmt_short(y) << " ";
        }
        svg << "\"/>\n";
        svg << "<text x=\"" << W - R - 150 << "\" y=\"" << legend_y << "\" font-size=\"11\" fill=\""
            << color << "\">" << name << "</text>\n";
        legend_y += 14;
        ++ci;
    }
    svg << "</svg>\n";
    write_text(p, svg.str());
}

std::vector<TimeWindow> resolve_windows(const Experiment& ex, const TrajectoryStore& traj,
                                        const std::vector<Sample>& test_set) {
    if (ex.window_mode == "explicit") return ex.windows;
    std::uint64_t spe = ex.steps_per_epoch;
    require(spe > 0, "steps_per_epoch required for non-explicit windows");
    std::uint64_t epochs = traj.steps / spe;
    require(epochs >= 1, "trajectory shorter than one epoch");
    if (ex.window_mode == "per_epoch") {
        std::vector<TimeWindow> ws;
        for (std::uint64_t e = 0; e < epochs; ++e) ws.push_back({e * spe, (e + 1) * spe});
        return ws;
    }
    // stage mode: segment the per-epoch test-loss curve
    Vec curve(epochs);
    for (std::uint64_t e = 0; e < epochs; ++e)
        curve[e] = mean_test_loss(traj.model, traj.theta_at((e + 1) * spe), test_set);
    auto split = segment_stages(curve);
    return {{0, split.b1 * spe}, {split.b1 * spe, split.b2 * spe}, {split.b2 * spe, traj.steps}};
}

// ---------------------------------------------------------------------------
// subcommands

int cmd_train(const Experiment& ex, unsigned jobs) {
    auto t0 = std::chrono::steady_clock::now();
    fs::create_directories(ex.out_dir);
    std::vector<std::string> artifacts(ex.seeds.size() * (ex.train_cfg.checkpoint_interval ? 2 : 1));
    parallel_for(ex.seeds.size(), jobs, [&](std::size_t i) {
        std::uint64_t seed = ex.seeds[i];
        RunData rd = materialize(ex, seed);
        ModelSpec model = resolve_model(ex, rd);
        TrainConfig cfg = ex.train_cfg;
        cfg.seed = seed;
        auto traj = train(rd.train_set, model, cfg);
        fs::path p = fs::path(ex.out_dir) / traj_filename(ex, seed);
        save_trajectory(traj, p.string());
        artifacts[i] = p.string();
        if (cfg.checkpoint_interval > 0) {
            auto ck = train_checkpointed(rd.train_set, model, cfg);
            fs::path cp = fs::path(ex.out_dir) / ckpt_filename(ex, seed);
            save_checkpoints(ck, cp.string());
            artifacts[ex.seeds.size() + i] = cp.string();
        }
    });
    double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    write_manifest(ex, "train", artifacts, secs);
    std::cout << "trained " << ex.seeds.size() << " seed(s) into " << ex.out_dir << "\n";
    return 0;
}

int cmd_influence(const Experiment& ex, unsigned jobs) {
    auto t0 = std::chrono::steady_clock::now();
    fs::create_directories(ex.out_dir);
    std::vector<std::string> rows_per_seed(ex.seeds.size());
    parallel_for(ex.seeds.size(), jobs, [&](std::size_t i) {
        std::uint64_t seed = ex.seeds[i];
        RunData rd = materialize(ex, seed);
        ModelSpec model = resolve_model(ex, rd);
        fs::path p = fs::path(ex.out_dir) / traj_filename(ex, seed);
        if (!fs::exists(p))
            throw ArtifactMismatch("trajectory not found (run `train` first): " + p.string());
        TrajectoryStore traj = load_trajectory(p.string(), model);
        if (traj.seed != seed || traj.steps != ex.train_cfg.steps || traj.n != rd.train_set.size())
            throw ArtifactMismatch("trajectory header does not match config: " + p.string());
        QuerySpec q = resolve_query(ex, rd);
        auto windows = resolve_windows(ex, traj, rd.test_set);
        std::ostringstream rows;
        for (const TimeWindow& w : windows) {
            auto values = compute_influence_all_values(traj, rd.train_set, q, w);
            for (std::size_t j = 0; j < values.size(); ++j)
                rows << seed << "," << j << "," << w.t1 << "," << w.t2 << "," << q.id() << ","
                     << fmt(values[j]) << "\n";
        }
        rows_per_seed[i] = rows.str();
    });
    std::string csv = "seed,j,t1,t2,query_id,q_value\n";
    for (const auto& r : rows_per_seed) csv += r;
    fs::path csv_path = fs::path(ex.out_dir) / "influence.csv";
    write_text(csv_path, csv);

    json report;
    report["config_hash"] = ex.config_hash;
    report["tool_version"] = kToolVersion;
    report["seeds"] = ex.seeds;
    report["rows"] = std::count(csv.begin(), csv.end(), '\n') - 1;
    report["csv"] = csv_path.string();
    fs::path json_path = fs::path(ex.out_dir) / "influence.json";
    write_text(json_path, report.dump(2) + "\n");

    double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    write_manifest(ex, "influence", {csv_path.string(), json_path.string()}, secs);
    std::cout << "wrote " << csv_path.string() << "\n";
    return 0;
}

struct SeedMetrics {
    double pearson_dit, spearman_dit, kendall_dit, jaccard_dit;
    double pearson_if, spearman_if, kendall_if, jaccard_if;
};

int cmd_compare(const Experiment& ex, unsigned jobs) {
    auto t0 = std::chrono::steady_clock::now();
    require(ex.run_loo && ex.run_if, "compare requires baselines.loo and baselines.if enabled");
    fs::create_directories(ex.out_dir);
    TimeWindow w = ex.windows.empty() ? TimeWindow{0, ex.train_cfg.steps} : ex.windows.front();

    std::vector<SeedMetrics> metrics(ex.seeds.size());
    parallel_for(ex.seeds.size(), jobs, [&](std::size_t i) {
        std::uint64_t seed = ex.seeds[i];
        RunData rd = materialize(ex, seed);
        ModelSpec model = resolve_model(ex, rd);
        TrainConfig cfg = ex.train_cfg;
        cfg.seed = seed;
        auto batches =
            sample_batches(rd.train_set.size(), cfg.steps, cfg.batch_size, batch_seed(seed));
        auto traj = trained(ex, rd, model, seed);
        QuerySpec q = QuerySpec::test_set_loss(rd.test_set);
        auto dit_vals = compute_influence_all_values(traj, rd.train_set, q, w);
        auto if_vals = if_influence_all(rd.train_set, model, traj.final_params(), rd.test_set,
                                        ex.if_damping);
        std::vector<double> loo_vals(rd.train_set.size());
        for (std::size_t j = 0; j < loo_vals.size(); ++j)
            loo_vals[j] =
                loo_influence(traj, rd.train_set, cfg, batches, j, rd.test_set, w).delta_test_loss;
        metrics[i] = {pearson(dit_vals, loo_vals),  spearman(dit_vals, loo_vals),
                      kendall_tau(dit_vals, loo_vals), jaccard_top(dit_vals, loo_vals),
                      pearson(if_vals, loo_vals),   spearman(if_vals, loo_vals),
                      kendall_tau(if_vals, loo_vals), jaccard_top(if_vals, loo_vals)};
    });

    std::ostringstream csv;
    csv << "seed,method,pearson,spearman,kendall,jaccard\n";
    for (std::size_t i = 0; i < ex.seeds.size(); ++i) {
        const auto& m = metrics[i];
        csv << ex.seeds[i] << ",dit," << fmt(m.pearson_dit) << "," << fmt(m.spearman_dit) << ","
            << fmt(m.kendall_dit) << "," << fmt(m.jaccard_dit) << "\n";
        csv << ex.seeds[i] << ",if," << fmt(m.pearson_if) << "," << fmt(m.spearman_if) << ","
            << fmt(m.kendall_if) << "," << fmt(m.jaccard_if) << "\n";
    }
    fs::path csv_path = fs::path(ex.out_dir) / "compare.csv";
    write_text(csv_path, csv.str());

    auto collect = [&](auto getter) {
        std::vector<double> v;
        for (const auto& m : metrics) v.push_back(getter(m));
        return v;
    };
    auto line = [&](const char* name, std::vector<double> dit_v, std::vector<double> if_v) {
        std::ostringstream os;
        os << "  " << name << ": DIT " << fmt_short(mean_of(dit_v)) << " +/- "
           << fmt_short(std_of(dit_v)) << "   IF " << fmt_short(mean_of(if_v)) << " +/- "
           << fmt_short(std_of(if_v)) << "\n";
        return os.str();
    };
    std::string text = "Agreement with leave-one-out retraining over " +
                       std::to_string(ex.seeds.size()) + " seed(s), window [" +
                       std::to_string(w.t1) + ", " + std::to_string(w.t2) + "]\n";
    text += line("pearson ", collect([](auto& m) { return m.pearson_dit; }),
                 collect([](auto& m) { return m.pearson_if; }));
    text += line("spearman", collect([](auto& m) { return m.spearman_dit; }),
                 collect([](auto& m) { return m.spearman_if; }));
    text += line("kendall ", collect([](auto& m) { return m.kendall_dit; }),
                 collect([](auto& m) { return m.kendall_if; }));
    text += line("jaccard ", collect([](auto& m) { return m.jaccard_dit; }),
                 collect([](auto& m) { return m.jaccard_if; }));
    fs::path txt_path = fs::path(ex.out_dir) / "compare.txt";
    write_text(txt_path, text);
    std::cout << text;

    double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    write_manifest(ex, "compare", {csv_path.string(), txt_path.string()}, secs);
    return 0;
}

int cmd_detect(const Experiment& ex, unsigned jobs) {
    auto t0 = std::chrono::steady_clock::now();
    fs::create_directories(ex.out_dir);
    std::uint64_t spe = ex.steps_per_epoch;
    require(spe > 0 && ex.train_cfg.steps >= spe, "detect: need at least one full epoch");
    std::uint64_t epochs = ex.train_cfg.steps / spe;

    const std::array<std::string, 6> methods = {"dit_full", "dit_first_epoch", "dit_mid_epoch",
                                                "dit_last_epoch", "influence_function",
                                                "leave_one_out"};
    std::vector<std::array<std::size_t, 6>> counts(ex.seeds.size());
    std::vector<std::size_t> ks(ex.seeds.size());

    parallel_for(ex.seeds.size(), jobs, [&](std::size_t i) {
        std::uint64_t seed = ex.seeds[i];
        RunData rd = materialize(ex, seed);
        ModelSpec model = resolve_model(ex, rd);
        TrainConfig cfg = ex.train_cfg;
        cfg.seed = seed;
        auto batches =
            sample_batches(rd.train_set.size(), cfg.steps, cfg.batch_size, batch_seed(seed));
        auto traj = trained(ex, rd, model, seed);
        QuerySpec q = QuerySpec::test_set_loss(rd.test_set);
        ks[i] = rd.flips.flipped_indices.size();

        auto count_hits = [&](const std::vector<double>& vals) {
            std::vector<InfluenceRecord> recs;
            for (std::size_t j = 0; j < vals.size(); ++j)
                recs.push_back({j, {0, cfg.steps}, q.id(), vals[j]});
            return evaluate_detection(recs, rd.flips);
        };
        std::uint64_t mid = epochs / 2;
        counts[i][0] = count_hits(compute_influence_all_values(traj, rd.train_set, q, {0, cfg.steps}));
        counts[i][1] = count_hits(compute_influence_all_values(traj, rd.train_set, q, {0, spe}));
        counts[i][2] = count_hits(
            compute_influence_all_values(traj, rd.train_set, q, {mid * spe, (mid + 1) * spe}));
        counts[i][3] = count_hits(
            compute_influence_all_values(traj, rd.train_set, q, {(epochs - 1) * spe, cfg.steps}));
        if (ex.run_if) {
            counts[i][4] = count_hits(if_influence_all(rd.train_set, model, traj.final_params(),
                                                       rd.test_set, ex.if_damping));
        }
        if (ex.run_loo) {
            std::vector<double> loo_vals(rd.train_set.size());
            for (std::size_t j = 0; j < loo_vals.size(); ++j)
                loo_vals[j] = loo_influence(traj, rd.train_set, cfg, batches, j, rd.test_set,
                                            {0, cfg.steps})
                                  .delta_test_loss;
            counts[i][5] = count_hits(loo_vals);
        }
    });

    std::ostringstream csv;
    csv << "seed,k";
    for (const auto& m : methods) csv << "," << m;
    csv << "\n";
    for (std::size_t i = 0; i < ex.seeds.size(); ++i) {
        csv << ex.seeds[i] << "," << ks[i];
        for (std::size_t m = 0; m < 6; ++m) csv << "," << counts[i][m];
        csv << "\n";
    }
    fs::path csv_path = fs::path(ex.out_dir) / "detect.csv";
    write_text(csv_path, csv.str());

    std::string text = "Flipped-label detection, k = round(rate*N), " +
                       std::to_string(ex.seeds.size()) + " seed(s)\n";
    for (std::size_t m = 0; m < 6; ++m) {
        std::vector<double> v;
        for (std::size_t i = 0; i < ex.seeds.size(); ++i) v.push_back(double(counts[i][m]));
        text += "  " + methods[m] + std::string(20 - methods[m].size(), ' ') + fmt_short(mean_of(v)) +
                " +/- " + fmt_short(std_of(v)) + "\n";
    }
    fs::path txt_path = fs::path(ex.out_dir) / "detect.txt";
    write_text(txt_path, text);
    std::cout << text;

    double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    write_manifest(ex, "detect", {csv_path.string(), txt_path.string()}, secs);
    return 0;
}

int cmd_dynamics(const Experiment& ex, unsigned jobs) {
    auto t0 = std::chrono::steady_clock::now();
    fs::create_directories(ex.out_dir);
    std::uint64_t spe = ex.steps_per_epoch;
    require(spe > 0, "dynamics: steps_per_epoch required");
    std::uint64_t epochs = ex.train_cfg.steps / spe;
    require(epochs >= 6, "dynamics: need at least 6 epochs");

    struct SeedOut {
        std::map<PatternLabel, std::size_t> dist;
        StageSplit split;
        StageCorrelations taus;
        std::map<PatternLabel, Vec> centroids;
        Vec loss_curve;
    };
    std::vector<SeedOut> outs(ex.seeds.size());

    parallel_for(ex.seeds.size(), jobs, [&](std::size_t i) {
        std::uint64_t seed = ex.seeds[i];
        RunData rd = materialize(ex, seed);
        ModelSpec model = resolve_model(ex, rd);
        auto traj = trained(ex, rd, model, seed);
        QuerySpec q = QuerySpec::test_set_loss(rd.test_set);

        std::size_t track = ex.track_samples == 0
                                ? rd.train_set.size()
                                : std::min(ex.track_samples, rd.train_set.size());
        InfluenceSeries series;
        for (std::size_t j = 0; j < track; ++j) series.sample_ids.push_back(j);
        series.values.assign(track, Vec(epochs, 0.0));
        for (std::uint64_t e = 0; e < epochs; ++e) {
            auto vals = compute_influence_all_values(traj, rd.train_set, q, {e * spe, (e + 1) * spe});
            for (std::size_t j = 0; j < track; ++j) series.values[j][e] = vals[j];
        }
        auto labels = classify_patterns(series);
        SeedOut& so = outs[i];
        for (const auto& [j, lab] : labels) so.dist[lab]++;

        // centroid = mean standardized-free series per label
        std::map<PatternLabel, std::size_t> n_of;
        for (const auto& [j, lab] : labels) {
            auto& c = so.centroids[lab];
            if (c.empty()) c.assign(epochs, 0.0);
            for (std::uint64_t e = 0; e < epochs; ++e) c[e] += series.values[j][e];
            n_of[lab]++;
        }
        for (auto& [lab, c] : so.centroids)
            for (double& v : c) v /= double(n_of[lab]);

        so.loss_curve.resize(epochs);
        for (std::uint64_t e = 0; e < epochs; ++e)
            so.loss_curve[e] = mean_test_loss(model, traj.theta_at((e + 1) * spe), rd.test_set);
        so.split = segment_stages(so.loss_curve);
        if (so.split.b1 == 0) so.split.b1 = 1;  // guard degenerate boundary for windows
        so.taus = stage_correlation_table(traj, rd.train_set, q, so.split, spe);
    });

    const std::array<PatternLabel, 4> all_labels = {
        PatternLabel::StableInfluencer, PatternLabel::EarlyInfluencer, PatternLabel::LateBloomer,
        PatternLabel::HighlyFluctuating};

    std::ostringstream csv;
    csv << "seed,pattern,count,percent\n";
    for (std::size_t i = 0; i < ex.seeds.size(); ++i) {
        std::size_t total = 0;
        for (auto lab : all_labels) total += outs[i].dist.count(lab) ? outs[i].dist[lab] : 0;
        for (auto lab : all_labels) {
            std::size_t c = outs[i].dist.count(lab) ? outs[i].dist[lab] : 0;
            csv << ex.seeds[i] << "," << pattern_name(lab) << "," << c << ","
                << fmt(100.0 * double(c) / double(total)) << "\n";
        }
    }
    fs::path csv_path = fs::path(ex.out_dir) / "dynamics.csv";
    write_text(csv_path, csv.str());

    // mean +/- std table across seeds, matching percent formatting
    std::string text = "Influence dynamics over " + std::to_string(ex.seeds.size()) + " seed(s)\n";
    text += "Pattern distribution (percent of tracked samples):\n";
    for (auto lab : all_labels) {
        std::vector<double> v;
        for (std::size_t i = 0; i < ex.seeds.size(); ++i) {
            std::size_t total = 0;
            for (auto l2 : all_labels) total += outs[i].dist.count(l2) ? outs[i].dist[l2] : 0;
            std::size_t c = outs[i].dist.count(lab) ? outs[i].dist[lab] : 0;
            v.push_back(100.0 * double(c) / double(total));
        }
        std::string name = pattern_name(lab);
        text += "  " + name + std::string(22 - name.size(), ' ') + fmt_short(mean_of(v)) +
                " +/- " + fmt_short(std_of(v)) + "\n";
    }
    text += "Stage boundaries (epochs) and rank correlations, per seed:\n";
    for (std::size_t i = 0; i < ex.seeds.size(); ++i) {
        const auto& so = outs[i];
        text += "  seed " + std::to_string(ex.seeds[i]) + ": stages [0," +
                std::to_string(so.split.b1) + "), [" + std::to_string(so.split.b1) + "," +
                std::to_string(so.split.b2) + "), [" + std::to_string(so.split.b2) + "," +
                std::to_string(epochs) + ")" + (so.split.fallback ? " (equal-thirds fallback)" : "") +
                "\n";
        text += "    tau early-middle " + fmt_short(so.taus.early_middle) + ", early-late " +
                fmt_short(so.taus.early_late) + ", middle-late " + fmt_short(so.taus.middle_late) +
                "\n";
        text += "    tau early-full " + fmt_short(so.taus.early_full) + ", middle-full " +
                fmt_short(so.taus.middle_full) + ", late-full " + fmt_short(so.taus.late_full) + "\n";
    }
    fs::path txt_path = fs::path(ex.out_dir) / "dynamics.txt";
    write_text(txt_path, text);
    std::cout << text;

    // JSON: centroids + stage tables for the first seed, plus per-seed taus
    json report;
    report["config_hash"] = ex.config_hash;
    for (std::size_t i = 0; i < ex.seeds.size(); ++i) {
        json s;
        s["seed"] = ex.seeds[i];
        s["stage_boundaries"] = {outs[i].split.b1, outs[i].split.b2};
        s["stage_fallback"] = outs[i].split.fallback;
        s["tau"] = {{"early_middle", outs[i].taus.early_middle},
                    {"early_late", outs[i].taus.early_late},
                    {"middle_late", outs[i].taus.middle_late},
                    {"early_full", outs[i].taus.early_full},
                    {"middle_full", outs[i].taus.middle_full},
                    {"late_full", outs[i].taus.late_full}};
        for (const auto& [lab, c] : outs[i].centroids) s["centroids"][pattern_name(lab)] = c;
        report["seeds"].push_back(s);
    }
    fs::path json_path = fs::path(ex.out_dir) / "dynamics.json";
    write_text(json_path, report.dump(2) + "\n");

    std::vector<std::pair<std::string, Vec>> svg_series;
    for (const auto& [lab, c] : outs[0].centroids) svg_series.emplace_back(pattern_name(lab), c);
    fs::path svg_path = fs::path(ex.out_dir) / "dynamics.svg";
    write_svg_lines(svg_path, svg_series, "influence pattern centroids (seed " +
                                              std::to_string(ex.seeds[0]) + ")");

    double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    write_manifest(ex, "dynamics",
                   {csv_path.string(), txt_path.string(), json_path.string(), svg_path.string()},
                   secs);
    return 0;
}

int cmd_replay_check(const Experiment& ex, unsigned jobs) {
    auto t0 = std::chrono::steady_clock::now();
    require(ex.train_cfg.checkpoint_interval > 0, "replay-check: checkpoint_interval required");
    fs::create_directories(ex.out_dir);
    std::vector<std::string> lines(ex.seeds.size());
    parallel_for(ex.seeds.size(), jobs, [&](std::size_t i) {
        std::uint64_t seed = ex.seeds[i];
        RunData rd = materialize(ex, seed);
        ModelSpec model = resolve_model(ex, rd);
        TrainConfig cfg = ex.train_cfg;
        cfg.seed = seed;
        auto batches =
            sample_batches(rd.train_set.size(), cfg.steps, cfg.batch_size, batch_seed(seed));
        auto traj = train(rd.train_set, model, cfg, &batches);
        auto ckpt = train_checkpointed(rd.train_set, model, cfg, &batches);
        auto replay = replay_segment(ckpt, rd.train_set, model, 0, cfg.steps);
        for (std::uint64_t t = 0; t <= cfg.steps; ++t)
            if (replay[t] != traj.theta_at(t))
                throw ArtifactMismatch("replay mismatch at step " + std::to_string(t) + ", seed " +
                                       std::to_string(seed));
        QuerySpec q = QuerySpec::test_set_loss(rd.test_set);
        TimeWindow w{0, cfg.steps};
        auto full = compute_influence_all_values(traj, rd.train_set, q, w);
        auto lite = compute_influence_all_values_ckpt(ckpt, rd.train_set, q, w);
        for (std::size_t j = 0; j < full.size(); ++j)
            if (full[j] != lite[j])
                throw ArtifactMismatch("checkpoint influence mismatch for sample " +
                                       std::to_string(j) + ", seed " + std::to_string(seed));
        lines[i] = "seed " + std::to_string(seed) + ": replay and influence bit-exact over " +
                   std::to_string(cfg.steps) + " steps\n";
    });
    std::string text;
    for (const auto& l : lines) text += l;
    fs::path txt_path = fs::path(ex.out_dir) / "replay-check.txt";
    write_text(txt_path, text);
    std::cout << text;
    double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    write_manifest(ex, "replay-check", {txt_path.string()}, secs);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"dynamic influence tracker laboratory"};
    app.require_subcommand(1);
    app.fallthrough();  // global flags may appear after the subcommand

    std::string config_path, out_override;
    unsigned jobs = 1;
    long long seed_override = -1;
    app.add_option("--config", config_path, "experiment config (JSON)")->required();
    app.add_option("--out", out_override, "output directory (overrides config)");
    app.add_option("--jobs", jobs, "worker thread cap (1 = reproducibility reference)");
    app.add_option("--seed-override", seed_override, "run only this seed");

    auto* c_train = app.add_subcommand("train", "train and write trajectory files");
    auto* c_infl = app.add_subcommand("influence", "influence over configured windows");
    auto* c_comp = app.add_subcommand("compare", "DIT vs IF against LOO ground truth");
    auto* c_det = app.add_subcommand("detect", "flipped-label detection report");
    auto* c_dyn = app.add_subcommand("dynamics", "pattern + stage analysis");
    auto* c_rep = app.add_subcommand("replay-check", "verify checkpoint replay bit-exactness");

    CLI11_PARSE(app, argc, argv);

    try {
        Experiment ex = parse_config(config_path);
        if (!out_override.empty()) ex.out_dir = out_override;
        if (seed_override >= 0) ex.seeds = {static_cast<std::uint64_t>(seed_override)};

        if (c_train->parsed()) return cmd_train(ex, jobs);
        if (c_infl->parsed()) return cmd_influence(ex, jobs);
        if (c_comp->parsed()) return cmd_compare(ex, jobs);
        if (c_det->parsed()) return cmd_detect(ex, jobs);
        if (c_dyn->parsed()) return cmd_dynamics(ex, jobs);
        if (c_rep->parsed()) return cmd_replay_check(ex, jobs);
        std::cerr << "no subcommand\n";
        return 2;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const ArtifactMismatch& e) {
        std::cerr << "artifact mismatch: " << e.what() << "\n";
        return 3;
    } catch (const ContractViolation& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
