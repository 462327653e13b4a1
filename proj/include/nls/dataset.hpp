#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "nls/errors.hpp"
#include "nls/matrix.hpp"
#include "nls/rng.hpp"

namespace nls {

/// Per-column affine transform fitted on a designated row subset. Columns
/// with zero variance get a standard deviation sentinel of 1 so standardized
/// values come out as zeros instead of NaNs.
struct Standardizer {
    Vector mean, stddev;

    static Standardizer fit(const Matrix& features, std::span<const std::size_t> rows) {
        if (rows.empty()) throw InputError("standardizer: empty fitting subset");
        Standardizer s;
        const std::size_t d = features.cols();
        s.mean.assign(d, 0.0);
        s.stddev.assign(d, 0.0);
        for (std::size_t r : rows)
            for (std::size_t j = 0; j < d; ++j) s.mean[j] += features(r, j);
        for (std::size_t j = 0; j < d; ++j) s.mean[j] /= static_cast<double>(rows.size());
        for (std::size_t r : rows)
            for (std::size_t j = 0; j < d; ++j) {
                const double c = features(r, j) - s.mean[j];
                s.stddev[j] += c * c;
            }
        for (std::size_t j = 0; j < d; ++j) {
            s.stddev[j] = std::sqrt(s.stddev[j] / static_cast<double>(rows.size()));
            if (s.stddev[j] == 0.0) s.stddev[j] = 1.0;
        }
        return s;
    }

    std::size_t dimension() const { return mean.size(); }

    Matrix transform(const Matrix& x) const {
        Matrix out(x.rows(), x.cols());
        for (std::size_t i = 0; i < x.rows(); ++i)
            for (std::size_t j = 0; j < x.cols(); ++j)
                out(i, j) = (x(i, j) - mean[j]) / stddev[j];
        return out;
    }

    Vector transform_row(std::span<const double> x) const {
        Vector out(x.size());
        for (std::size_t j = 0; j < x.size(); ++j) out[j] = (x[j] - mean[j]) / stddev[j];
        return out;
    }

    Matrix inverse(const Matrix& u) const {
        Matrix out(u.rows(), u.cols());
        for (std::size_t i = 0; i < u.rows(); ++i)
            for (std::size_t j = 0; j < u.cols(); ++j)
                out(i, j) = u(i, j) * stddev[j] + mean[j];
        return out;
    }
};

struct Dataset {
    Matrix features;
    Vector target;
    std::vector<std::string> feature_names;
    std::string target_name = "y";
    std::optional<Standardizer> stats;

    std::size_t size() const { return target.size(); }
    std::size_t dimension() const { return features.cols(); }

    Dataset take_rows(std::span<const std::size_t> rows) const {
        Dataset out;
        out.features = features.take_rows(rows);
        out.target.reserve(rows.size());
        for (std::size_t r : rows) out.target.push_back(target[r]);
        out.feature_names = feature_names;
        out.target_name = target_name;
        out.stats = stats;
        return out;
    }
};

namespace detail {

inline double parse_cell(const std::string& cell, std::size_t row, const std::string& col) {
    double v = 0.0;
    const char* begin = cell.data();
    const char* end = begin + cell.size();
    auto [ptr, ec] = std::from_chars(begin, end, v);
    if (ec != std::errc() || ptr != end || !std::isfinite(v))
        throw InputError("row " + std::to_string(row) + ", column '" + col +
                         "': cannot parse '" + cell + "' as a finite number");
    return v;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> cells;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            cells.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur.push_back(c);
        }
    }
    cells.push_back(cur);
    return cells;
}

/// Shortest representation that round-trips the exact double.
inline std::string format_double(double v) {
    char buf[32];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, ptr);
}

} // namespace detail

/// Loads a comma-separated file with a header row. Every column must be
/// numeric; the target column is selected by name (empty string means the
/// last column). Rows with missing or unparsable cells are rejected with
/// their location.
inline Dataset load_csv(const std::string& path, const std::string& target_column = "") {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open '" + path + "'");
    std::string line;
    if (!std::getline(in, line)) throw InputError("'" + path + "': empty file");
    const std::vector<std::string> header = detail::split_csv_line(line);
    if (header.size() < 2)
        throw InputError("'" + path + "': need at least one feature column and a target");

    std::size_t target_idx = header.size() - 1;
    if (!target_column.empty()) {
        auto it = std::find(header.begin(), header.end(), target_column);
        if (it == header.end())
            throw ConfigError("target column '" + target_column + "' not found in '" + path + "'");
        target_idx = static_cast<std::size_t>(it - header.begin());
    }

    std::vector<Vector> rows;
    Vector target;
    std::size_t row_number = 1; // header is row 1
    while (std::getline(in, line)) {
        ++row_number;
        if (line.empty()) continue;
        const auto cells = detail::split_csv_line(line);
        if (cells.size() != header.size())
            throw InputError("row " + std::to_string(row_number) + ": expected " +
                             std::to_string(header.size()) + " cells, found " +
                             std::to_string(cells.size()));
        Vector feat;
        feat.reserve(header.size() - 1);
        for (std::size_t j = 0; j < cells.size(); ++j) {
            if (cells[j].empty())
                throw InputError("row " + std::to_string(row_number) + ", column '" +
                                 header[j] + "': missing value");
            const double v = detail::parse_cell(cells[j], row_number, header[j]);
            if (j == target_idx)
                target.push_back(v);
            else
                feat.push_back(v);
        }
        rows.push_back(std::move(feat));
    }
    if (rows.empty()) throw InputError("'" + path + "': no data rows");

    Dataset ds;
    ds.features = Matrix::from_rows(rows);
    ds.target = std::move(target);
    for (std::size_t j = 0; j < header.size(); ++j)
        if (j != target_idx) ds.feature_names.push_back(header[j]);
    ds.target_name = header[target_idx];
    return ds;
}

/// Writes a dataset back out in the same format, floats rendered with
/// shortest round-trip formatting so a rewrite is bit-stable.
inline void save_csv(const Dataset& ds, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw InputError("cannot write '" + path + "'");
    for (const auto& name : ds.feature_names) out << name << ',';
    out << ds.target_name << '\n';
    for (std::size_t i = 0; i < ds.size(); ++i) {
        for (std::size_t j = 0; j < ds.dimension(); ++j)
            out << detail::format_double(ds.features(i, j)) << ',';
        out << detail::format_double(ds.target[i]) << '\n';
    }
}

/// Returns a copy whose features are standardized with statistics computed
/// from `fit_rows` only; the statistics ride along for the inverse transform.
inline Dataset standardize(const Dataset& ds, std::span<const std::size_t> fit_rows) {
    Dataset out = ds;
    Standardizer s = Standardizer::fit(ds.features, fit_rows);
    out.features = s.transform(ds.features);
    out.stats = std::move(s);
    return out;
}

/// Deterministic row partition: either holdout fractions (largest-remainder
/// counts) or k folds. Returns a role id per row index.
struct SplitPlan {
    std::uint64_t seed = 0;
    std::vector<double> fractions; // used when folds == 0; must sum to 1
    std::size_t folds = 0;         // >= 2 enables k-fold mode
};

inline std::vector<std::size_t> make_split(std::size_t n, const SplitPlan& plan) {
    if (n == 0) throw InputError("make_split: empty dataset");
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(plan.seed);
    rng.shuffle(order);

    std::vector<std::size_t> role(n);
    if (plan.folds >= 2) {
        if (n < plan.folds)
            throw ConfigError("make_split: fold count " + std::to_string(plan.folds) +
                              " exceeds sample count " + std::to_string(n));
        const std::size_t base = n / plan.folds;
        const std::size_t rem = n % plan.folds;
        std::size_t pos = 0;
        for (std::size_t f = 0; f < plan.folds; ++f) {
            const std::size_t count = base + (f < rem ? 1 : 0);
            for (std::size_t i = 0; i < count; ++i) role[order[pos++]] = f;
        }
        return role;
    }
    if (plan.folds == 1) throw ConfigError("make_split: fold count must be >= 2");

    if (plan.fractions.empty()) throw ConfigError("make_split: no fractions given");
    double sum = 0.0;
    for (double f : plan.fractions) {
        if (f < 0.0) throw ConfigError("make_split: negative fraction");
        sum += f;
    }
    if (std::abs(sum - 1.0) > 1e-9)
        throw ConfigError("make_split: fractions must sum to 1");

    // largest-remainder apportionment
    const std::size_t groups = plan.fractions.size();
    std::vector<std::size_t> counts(groups);
    std::vector<std::pair<double, std::size_t>> remainders;
    std::size_t assigned = 0;
    for (std::size_t g = 0; g < groups; ++g) {
        const double exact = plan.fractions[g] * static_cast<double>(n);
        counts[g] = static_cast<std::size_t>(std::floor(exact));
        assigned += counts[g];
        remainders.push_back({exact - std::floor(exact), g});
    }
    std::stable_sort(remainders.begin(), remainders.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    for (std::size_t i = 0; assigned < n; ++i, ++assigned) counts[remainders[i % groups].second] += 1;

    std::size_t pos = 0;
    for (std::size_t g = 0; g < groups; ++g)
        for (std::size_t i = 0; i < counts[g]; ++i) role[order[pos++]] = g;
    return role;
}

inline std::vector<std::size_t> rows_with_role(const std::vector<std::size_t>& roles,
                                               std::size_t role) {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < roles.size(); ++i)
        if (roles[i] == role) out.push_back(i);
    return out;
}

/// x uniform on [0, 2*pi], y = sin(x) with no noise.
inline Dataset gen_sin(std::size_t n, std::uint64_t seed) {
    if (n < 1) throw ConfigError("gen_sin: n must be >= 1");
    Rng rng(seed);
    Dataset ds;
    ds.features = Matrix(n, 1);
    ds.target.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double x = rng.uniform(0.0, 6.283185307179586476925286766559);
        ds.features(i, 0) = x;
        ds.target[i] = std::sin(x);
    }
    ds.feature_names = {"x"};
    ds.target_name = "y";
    return ds;
}

/// One relevant feature uniform on [-5, 5], y = x^2 plus centered Gaussian
/// noise with variance 8.6; irrelevant features are independent uniforms on
/// the same range.
inline Dataset gen_quadratic(std::size_t n, std::size_t n_irrelevant, std::uint64_t seed) {
    if (n < 1) throw ConfigError("gen_quadratic: n must be >= 1");
    constexpr double kNoiseSd = 2.93257565829127187279; // sqrt(8.6)
    Rng rng(seed);
    Dataset ds;
    ds.features = Matrix(n, 1 + n_irrelevant);
    ds.target.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double x = rng.uniform(-5.0, 5.0);
        ds.features(i, 0) = x;
        ds.target[i] = x * x + rng.gaussian(0.0, kNoiseSd);
        for (std::size_t j = 0; j < n_irrelevant; ++j)
            ds.features(i, 1 + j) = rng.uniform(-5.0, 5.0);
    }
    ds.feature_names = {"x"};
    for (std::size_t j = 0; j < n_irrelevant; ++j)
        ds.feature_names.push_back("noise_" + std::to_string(j + 1));
    ds.target_name = "y";
    return ds;
}

} // namespace nls
