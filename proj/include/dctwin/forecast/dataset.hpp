#pragma once

// Supervised windows over an aligned multi-feature grid, and min-max scaling.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "dctwin/common.hpp"
#include "dctwin/tstore.hpp"

namespace dctwin::forecast {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

struct WindowSpec {
    int input_len = 24;
    double step_s = 3600.0;
    int horizon = 1;

    void validate() const {
        if (input_len < 1) throw Error("config", "input_len must be >= 1");
        if (horizon < 1) throw Error("config", "horizon must be >= 1");
        if (!(step_s > 0.0)) throw Error("config", "step must be > 0");
    }
};

/// Rows on a regular step grid; `valid[r]` is false where any feature lacks
/// a (real or imputed) sample.
struct FeatureGrid {
    std::vector<SeriesKey> features;
    std::vector<Millis> ts;
    Matrix values;  // rows x features
    std::vector<bool> valid;

    std::size_t rows() const { return ts.size(); }
};

/// Places each series on the grid [first, last] at step_s. Samples must sit
/// on the grid (as produced by a store downsample aligned to `first`).
inline FeatureGrid align_features(const std::vector<TimeSeries>& series, double step_s) {
    if (series.empty()) throw Error("domain", "no feature series given");
    const auto step = static_cast<Millis>(std::llround(step_s * 1000.0));
    Millis first = std::numeric_limits<Millis>::max();
    Millis last = std::numeric_limits<Millis>::min();
    for (const auto& s : series) {
        if (s.points.empty()) continue;
        first = std::min(first, s.points.front().ts);
        last = std::max(last, s.points.back().ts);
    }
    FeatureGrid g;
    for (const auto& s : series) g.features.push_back(s.key);
    if (first > last) {
        g.values.resize(0, static_cast<Eigen::Index>(series.size()));
        return g;
    }
    const auto n = static_cast<std::size_t>((last - first) / step + 1);
    g.ts.resize(n);
    for (std::size_t r = 0; r < n; ++r) g.ts[r] = first + static_cast<Millis>(r) * step;
    g.values = Matrix::Constant(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(series.size()),
                                std::numeric_limits<double>::quiet_NaN());
    for (std::size_t f = 0; f < series.size(); ++f) {
        for (const auto& p : series[f].points) {
            if ((p.ts - first) % step != 0) throw Error("domain", "series " + series[f].key.str() + " is off the step grid");
            g.values(static_cast<Eigen::Index>((p.ts - first) / step), static_cast<Eigen::Index>(f)) = p.value;
        }
    }
    g.valid.resize(n);
    for (std::size_t r = 0; r < n; ++r) g.valid[r] = g.values.row(static_cast<Eigen::Index>(r)).allFinite();
    return g;
}

struct Dataset {
    std::vector<Matrix> X;          // each input_len x n_features, original units
    std::vector<double> y;          // target at the horizon, original units
    std::vector<Millis> input_end;  // timestamp of the last input row
    std::vector<Millis> target_ts;
    std::size_t target = 0;  // feature column holding the target
    std::size_t skipped = 0;
    std::string diagnostic;

    std::size_t size() const { return y.size(); }
    bool empty() const { return y.empty(); }
    std::size_t n_features() const { return X.empty() ? 0 : static_cast<std::size_t>(X.front().cols()); }

    Dataset slice(std::size_t begin, std::size_t end) const {
        Dataset d;
        d.target = target;
        for (std::size_t i = begin; i < end && i < size(); ++i) {
            d.X.push_back(X[i]);
            d.y.push_back(y[i]);
            d.input_end.push_back(input_end[i]);
            d.target_ts.push_back(target_ts[i]);
        }
        return d;
    }
};

/// Stride-1 windows in chronological order. A window is skipped when any of
/// its input rows or its target row is invalid.
inline Dataset make_windows(const FeatureGrid& grid, const WindowSpec& spec, std::size_t target) {
    spec.validate();
    if (target >= grid.features.size()) throw Error("domain", "target feature index out of range");
    Dataset d;
    d.target = target;
    const auto need = static_cast<std::size_t>(spec.input_len + spec.horizon);
    if (grid.rows() < need) {
        d.diagnostic = "series has " + std::to_string(grid.rows()) + " steps; need at least " + std::to_string(need);
        return d;
    }
    // Prefix count of invalid rows for O(1) window checks.
    std::vector<std::size_t> bad(grid.rows() + 1, 0);
    for (std::size_t r = 0; r < grid.rows(); ++r) bad[r + 1] = bad[r] + (grid.valid[r] ? 0 : 1);
    const auto L = static_cast<std::size_t>(spec.input_len);
    const auto H = static_cast<std::size_t>(spec.horizon);
    for (std::size_t start = 0; start + L + H <= grid.rows(); ++start) {
        const std::size_t tgt = start + L - 1 + H;
        if (bad[start + L] - bad[start] != 0 || !grid.valid[tgt]) {
            ++d.skipped;
            continue;
        }
        d.X.push_back(grid.values.middleRows(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(L)));
        d.y.push_back(grid.values(static_cast<Eigen::Index>(tgt), static_cast<Eigen::Index>(target)));
        d.input_end.push_back(grid.ts[start + L - 1]);
        d.target_ts.push_back(grid.ts[tgt]);
    }
    return d;
}

// ---------------------------------------------------------------------------

/// Per-feature min-max scaling onto [0,1].
struct Scaler {
    Vector min;
    Vector max;

    static Scaler fit(const Dataset& d) {
        if (d.empty()) throw Error("empty_dataset", "cannot fit a scaler on an empty dataset");
        const auto F = static_cast<Eigen::Index>(d.n_features());
        Scaler s{Vector::Constant(F, std::numeric_limits<double>::infinity()),
                 Vector::Constant(F, -std::numeric_limits<double>::infinity())};
        for (const auto& x : d.X) {
            s.min = s.min.cwiseMin(x.colwise().minCoeff().transpose());
            s.max = s.max.cwiseMax(x.colwise().maxCoeff().transpose());
        }
        const auto t = static_cast<Eigen::Index>(d.target);
        for (double y : d.y) {
            s.min(t) = std::min(s.min(t), y);
            s.max(t) = std::max(s.max(t), y);
        }
        // A constant feature gets a unit span so the invariant max > min holds.
        for (Eigen::Index f = 0; f < F; ++f)
            if (!(s.max(f) > s.min(f))) s.max(f) = s.min(f) + 1.0;
        return s;
    }

    Matrix transform(const Matrix& x) const {
        return (x.rowwise() - min.transpose()).array().rowwise() / (max - min).transpose().array();
    }
    Matrix inverse(const Matrix& x) const {
        return (x.array().rowwise() * (max - min).transpose().array()).rowwise() + min.transpose().array();
    }
    double transform(double v, std::size_t f) const {
        const auto i = static_cast<Eigen::Index>(f);
        return (v - min(i)) / (max(i) - min(i));
    }
    double inverse(double v, std::size_t f) const {
        const auto i = static_cast<Eigen::Index>(f);
        return v * (max(i) - min(i)) + min(i);
    }
};

}  // namespace dctwin::forecast
