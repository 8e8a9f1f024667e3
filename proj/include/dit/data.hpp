#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "dit/model.hpp"

namespace dit {

struct LoadError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Sample identity is the positional index; removal never happens physically,
// the trainer filters batches instead.
struct Dataset {
    std::string name;
    std::size_t feature_dim = 0;
    std::vector<Sample> samples;

    std::size_t size() const { return samples.size(); }
};

struct FlipRecord {
    std::set<std::size_t> flipped_indices;
    double rate = 0.0;
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string field;
    std::stringstream ss(line);
    while (std::getline(ss, field, ',')) out.push_back(field);
    if (!line.empty() && line.back() == ',') out.push_back("");
    return out;
}

inline std::uint32_t read_be32(std::istream& in) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) throw LoadError("idx: truncated header");
    return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) | (std::uint32_t(b[2]) << 8) |
           std::uint32_t(b[3]);
}

}  // namespace detail

// RFC-4180 subset loader (no quoting): header row required, numeric columns
// z-scored with the sample standard deviation, categorical columns one-hot
// expanded with levels in sorted order, label mapped to {0,1}.
inline Dataset load_csv(const std::string& path, const std::string& label_column,
                        const std::vector<std::string>& numeric_columns,
                        const std::vector<std::string>& categorical_columns,
                        std::vector<std::string>* warnings = nullptr) {
    std::ifstream in(path);
    if (!in) throw LoadError("csv: cannot open " + path);
    std::string line;
    if (!std::getline(in, line)) throw LoadError("csv: empty file " + path);
    if (!line.empty() && line.back() == '\r') line.pop_back();
    auto header = detail::split_csv_line(line);
    std::map<std::string, std::size_t> col;
    for (std::size_t i = 0; i < header.size(); ++i) col[header[i]] = i;

    auto col_index = [&](const std::string& name) {
        auto it = col.find(name);
        if (it == col.end()) throw LoadError("csv: missing column '" + name + "'");
        return it->second;
    };
    std::size_t label_idx = col_index(label_column);
    std::vector<std::size_t> num_idx, cat_idx;
    for (const auto& c : numeric_columns) num_idx.push_back(col_index(c));
    for (const auto& c : categorical_columns) cat_idx.push_back(col_index(c));

    std::vector<std::vector<double>> numeric_rows;
    std::vector<std::vector<std::string>> cat_rows;
    std::vector<std::string> labels;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        auto fields = detail::split_csv_line(line);
        if (fields.size() != header.size())
            throw LoadError("csv: row " + std::to_string(line_no) + " has " +
                            std::to_string(fields.size()) + " fields, expected " +
                            std::to_string(header.size()));
        std::vector<double> nums;
        for (std::size_t i : num_idx) {
            try {
                std::size_t pos = 0;
                double v = std::stod(fields[i], &pos);
                if (pos != fields[i].size()) throw std::invalid_argument("trailing");
                nums.push_back(v);
            } catch (const std::exception&) {
                throw LoadError("csv: row " + std::to_string(line_no) + ": cannot parse '" +
                                fields[i] + "' as number");
            }
        }
        numeric_rows.push_back(std::move(nums));
        std::vector<std::string> cats;
        for (std::size_t i : cat_idx) cats.push_back(fields[i]);
        cat_rows.push_back(std::move(cats));
        labels.push_back(fields[label_idx]);
    }
    std::size_t n = labels.size();
    if (n == 0) throw LoadError("csv: no data rows in " + path);

    // label mapping: distinct values sorted, must be exactly two
    std::set<std::string> label_levels(labels.begin(), labels.end());
    if (label_levels.size() != 2)
        throw LoadError("csv: label column '" + label_column + "' has " +
                        std::to_string(label_levels.size()) + " levels, expected 2");
    std::string level0 = *label_levels.begin();

    // per-column standardization
    std::size_t nn = num_idx.size();
    std::vector<double> mean(nn, 0.0), sd(nn, 0.0);
    for (const auto& row : numeric_rows)
        for (std::size_t j = 0; j < nn; ++j) mean[j] += row[j];
    for (double& m : mean) m /= static_cast<double>(n);
    for (const auto& row : numeric_rows)
        for (std::size_t j = 0; j < nn; ++j) sd[j] += (row[j] - mean[j]) * (row[j] - mean[j]);
    for (std::size_t j = 0; j < nn; ++j)
        sd[j] = n > 1 ? std::sqrt(sd[j] / static_cast<double>(n - 1)) : 0.0;

    // categorical levels, sorted per column
    std::size_t nc = cat_idx.size();
    std::vector<std::vector<std::string>> levels(nc);
    for (std::size_t j = 0; j < nc; ++j) {
        std::set<std::string> seen;
        for (const auto& row : cat_rows) seen.insert(row[j]);
        levels[j].assign(seen.begin(), seen.end());
    }

    std::size_t d = nn;
    for (const auto& lv : levels) d += lv.size();

    Dataset ds;
    ds.name = path;
    ds.feature_dim = d;
    for (std::size_t i = 0; i < n; ++i) {
        Sample s;
        s.x.reserve(d);
        for (std::size_t j = 0; j < nn; ++j) {
            if (sd[j] == 0.0) {
                s.x.push_back(0.0);  // constant column, standardized to zero
            } else {
                s.x.push_back((numeric_rows[i][j] - mean[j]) / sd[j]);
            }
        }
        for (std::size_t j = 0; j < nc; ++j) {
            for (const auto& lv : levels[j]) s.x.push_back(cat_rows[i][j] == lv ? 1.0 : 0.0);
        }
        s.y = labels[i] == level0 ? 0.0 : 1.0;
        ds.samples.push_back(std::move(s));
    }
    if (warnings)
        for (std::size_t j = 0; j < nn; ++j)
            if (sd[j] == 0.0)
                warnings->push_back("constant numeric column '" + numeric_columns[j] +
                                    "' standardized to zero");
    return ds;
}

// IDX image/label pair, filtered to two classes: class_a -> 0, class_b -> 1,
// pixels scaled to [0,1], images flattened row-major.
inline Dataset load_idx(const std::string& images_path, const std::string& labels_path,
                        unsigned class_a, unsigned class_b) {
    std::ifstream im(images_path, std::ios::binary);
    if (!im) throw LoadError("idx: cannot open " + images_path);
    std::ifstream lb(labels_path, std::ios::binary);
    if (!lb) throw LoadError("idx: cannot open " + labels_path);

    if (detail::read_be32(im) != 0x00000803u) throw LoadError("idx: bad image magic in " + images_path);
    std::uint32_t n_img = detail::read_be32(im);
    std::uint32_t rows = detail::read_be32(im);
    std::uint32_t cols = detail::read_be32(im);
    if (detail::read_be32(lb) != 0x00000801u) throw LoadError("idx: bad label magic in " + labels_path);
    std::uint32_t n_lab = detail::read_be32(lb);
    if (n_img != n_lab) throw LoadError("idx: image/label count mismatch");

    std::size_t d = static_cast<std::size_t>(rows) * cols;
    Dataset ds;
    ds.name = images_path;
    ds.feature_dim = d;
    std::vector<unsigned char> buf(d);
    for (std::uint32_t i = 0; i < n_img; ++i) {
        im.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(d));
        int lab = lb.get();
        if (!im || lab == EOF) throw LoadError("idx: truncated data");
        unsigned c = static_cast<unsigned>(lab);
        if (c != class_a && c != class_b) continue;
        Sample s;
        s.x.resize(d);
        for (std::size_t k = 0; k < d; ++k) s.x[k] = buf[k] / 255.0;
        s.y = (c == class_b) ? 1.0 : 0.0;
        ds.samples.push_back(std::move(s));
    }
    if (ds.samples.empty()) throw LoadError("idx: class filter produced an empty dataset");
    return ds;
}

// Two spherical Gaussian clusters at +-(separation/2) * u for a seeded unit
// direction u; labels alternate by cluster, deterministic in the seed.
inline Dataset make_synthetic(std::uint64_t seed, std::size_t n, std::size_t d, double separation) {
    require(n >= 2, "make_synthetic: N >= 2");
    require(d >= 1, "make_synthetic: d >= 1");
    Rng rng(seed);
    Vec u(d);
    for (double& v : u) v = rng.normal();
    double nu = norm2(u);
    if (nu == 0.0) u[0] = nu = 1.0;
    for (double& v : u) v /= nu;

    Dataset ds;
    ds.name = "synthetic-" + std::to_string(seed);
    ds.feature_dim = d;
    for (std::size_t i = 0; i < n; ++i) {
        double cls = (i % 2 == 0) ? 0.0 : 1.0;
        double sign = cls == 0.0 ? -1.0 : 1.0;
        Sample s;
        s.x.resize(d);
        for (std::size_t k = 0; k < d; ++k) s.x[k] = sign * (separation / 2.0) * u[k] + rng.normal();
        s.y = cls;
        ds.samples.push_back(std::move(s));
    }
    return ds;
}

// Toggles y -> 1-y for exactly round(rate * N) seeded indices. The input
// dataset is left untouched.
inline std::pair<Dataset, FlipRecord> flip_labels(const Dataset& ds, double rate, std::uint64_t seed) {
    require(rate >= 0.0 && rate < 1.0, "flip_labels: rate in [0,1)");
    std::size_t k = static_cast<std::size_t>(std::llround(rate * static_cast<double>(ds.size())));
    std::vector<std::size_t> idx(ds.size());
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng(seed);
    rng.shuffle(idx);
    FlipRecord rec;
    rec.rate = rate;
    Dataset out = ds;
    for (std::size_t i = 0; i < k; ++i) {
        out.samples[idx[i]].y = 1.0 - out.samples[idx[i]].y;
        rec.flipped_indices.insert(idx[i]);
    }
    return {std::move(out), std::move(rec)};
}

// Serialize a dataset as CSV (f0..f{d-1},label) so synthetic fixtures can be
// checked into experiment directories.
inline void save_csv(const Dataset& ds, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw LoadError("csv: cannot write " + path);
    for (std::size_t k = 0; k < ds.feature_dim; ++k) out << "f" << k << ",";
    out << "label\n";
    out.precision(17);
    for (const Sample& s : ds.samples) {
        for (double v : s.x) out << v << ",";
        out << s.y << "\n";
    }
}

}  // namespace dit
