#pragma once

// Multi-horizon comparison on one series: the 1-step training split plus
// per-horizon test sets restricted to a shared set of forecast origins.

#include <algorithm>
#include <set>
#include <vector>

#include "dctwin/fixture.hpp"
#include "dctwin/forecast/forecaster.hpp"

namespace dctwin::forecast {

inline constexpr int kHorizons[] = {1, 6, 24};

struct Benchmark {
    FeatureGrid grid;
    std::vector<SeriesKey> features;
    WindowSpec window;  // horizon 1
    double train_fraction = 0.8;
    Split one_step;
    std::set<Millis> origins;  // input_end of every test window at the longest horizon
    int max_horizon = 24;

    /// Test windows at `horizon` whose origin is in the shared set.
    Dataset test_at(int horizon) const {
        WindowSpec w = window;
        w.horizon = horizon;
        const auto split = chronological_split(make_windows(grid, w, 0), w, train_fraction);
        Dataset out;
        out.target = 0;
        for (std::size_t i = 0; i < split.test.size(); ++i) {
            if (!origins.count(split.test.input_end[i])) continue;
            out.X.push_back(split.test.X[i]);
            out.y.push_back(split.test.y[i]);
            out.input_end.push_back(split.test.input_end[i]);
            out.target_ts.push_back(split.test.target_ts[i]);
        }
        return out;
    }

    Millis max_train_ts() const { return one_step.train.target_ts.empty() ? 0 : one_step.train.target_ts.back(); }
};

/// `series` are aligned hourly (or other step) series; the first is the
/// target.
inline Benchmark make_benchmark(const std::vector<TimeSeries>& series, WindowSpec window = {},
                                double train_fraction = 0.8, int max_horizon = 24) {
    Benchmark b;
    window.horizon = 1;
    window.validate();
    b.window = window;
    b.train_fraction = train_fraction;
    b.max_horizon = max_horizon;
    for (const auto& s : series) b.features.push_back(s.key);
    b.grid = align_features(series, window.step_s);
    b.one_step = chronological_split(make_windows(b.grid, window, 0), window, train_fraction);
    WindowSpec longest = window;
    longest.horizon = max_horizon;
    const auto far = chronological_split(make_windows(b.grid, longest, 0), longest, train_fraction);
    b.origins.insert(far.test.input_end.begin(), far.test.input_end.end());
    if (b.one_step.train.empty() || b.origins.empty())
        throw Error("insufficient_history", "series too short for a train/test split at horizon " +
                                                std::to_string(max_horizon));
    return b;
}

inline std::vector<EvalReport> evaluate_horizons(const Forecaster& f, const Benchmark& b) {
    std::vector<EvalReport> out;
    for (int h : kHorizons)
        if (h <= b.max_horizon) out.push_back(evaluate(f, b.test_at(h), h));
    return out;
}

/// Hourly feature table of the 30-day fixture (facility, it, room temp,
/// humidity, cluster cpu).
inline std::vector<TimeSeries> fixture_series(const FixtureSpec& spec = {}) {
    auto cfg = default_plant_config();
    cfg.workload = fixture_workload(spec);
    return simulate_feature_table(cfg, spec.days * 86400.0);
}

}  // namespace dctwin::forecast
