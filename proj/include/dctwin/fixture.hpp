#pragma once

// Synthetic multi-day workload traces and hourly feature tables for
// forecasting experiments.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

#include "dctwin/plant_sim.hpp"
#include "dctwin/rng.hpp"
#include "dctwin/telemetry.hpp"
#include "dctwin/tstore.hpp"

namespace dctwin {

// Derived meters reported alongside the per-device sensors.
inline const SeriesKey kFacilityPower{"facility", SensorKind::power};
inline const SeriesKey kItPower{"it", SensorKind::power};
inline const SeriesKey kRoomTemp{kRoomSensor, SensorKind::temp};
inline const SeriesKey kRoomHumidity{kRoomSensor, SensorKind::humidity};
inline const SeriesKey kClusterCpu{"cluster", SensorKind::cpu};

/// Facility and IT meter frames plus the mean cpu across servers.
inline std::vector<TelemetryFrame> sample_meters(const PlantState& s, const NoiseConfig& noise, std::uint64_t seed) {
    const Millis ts = s.time_ms();
    const double it = total_it_power(s);
    const double fac = total_facility_power(s);
    auto gauss = [&](std::uint64_t k, double std) {
        return std == 0.0 ? 0.0 : std * counter_gaussian(seed, s.step_index * 8 + k, 5);
    };
    return {make_frame(ts, kFacilityPower.sensor_id, SensorKind::power, std::max(0.0, fac + gauss(0, noise.power_rel_std * fac))),
            make_frame(ts, kItPower.sensor_id, SensorKind::power, std::max(0.0, it + gauss(1, noise.power_rel_std * it))),
            make_frame(ts, kClusterCpu.sensor_id, SensorKind::cpu,
                       std::clamp(100.0 * mean_utilization(s) + gauss(2, noise.cpu_std), 0.0, 100.0))};
}

struct FixtureSpec {
    int days = 30;
    std::uint64_t seed = 2024;
    double interval_s = 60.0;
    double weekend_factor = 0.55;
    double day_sigma = 0.10;            // day-to-day intensity spread
    double drift_sigma = 0.25;          // slow multiplicative demand drift
    double drift_tau_h = 8.0;
    double timing_jitter_h = 0.5;
    double sweep_probability = 0.35;    // stress-ng style sweep on a given day
    double minute_noise = 0.02;
};

/// Office-hours load shape with day-level intensity, weekend dips, random
/// 10->90% step sweeps and minute-level noise, as a replay profile.
inline WorkloadProfile fixture_workload(const FixtureSpec& spec) {
    WorkloadProfile p;
    p.kind = WorkloadKind::replay;
    p.seed = spec.seed;
    p.params["interval_s"] = spec.interval_s;
    const auto per_day = static_cast<std::size_t>(std::llround(86400.0 / spec.interval_s));
    p.values.reserve(per_day * static_cast<std::size_t>(spec.days));
    double intensity = 1.0;
    double drift = 0.0;
    const double decay = std::exp(-spec.interval_s / (spec.drift_tau_h * 3600.0));
    const double kick = spec.drift_sigma * std::sqrt(1.0 - decay * decay);
    for (int d = 0; d < spec.days; ++d) {
        const auto du = static_cast<std::uint64_t>(d);
        intensity = 0.5 * intensity + 0.5 * (1.0 + spec.day_sigma * counter_gaussian(spec.seed, du, 41));
        const bool weekend = (d % 7) == 5 || (d % 7) == 6;
        const double level = intensity * (weekend ? spec.weekend_factor : 1.0);
        const double start_h = 8.0 + spec.timing_jitter_h * (unit_uniform(mix(spec.seed, du, 42)) - 0.5);
        const double end_h = 18.0 + spec.timing_jitter_h * (unit_uniform(mix(spec.seed, du, 43)) - 0.5);
        const bool sweep = unit_uniform(mix(spec.seed, du, 44)) < spec.sweep_probability;
        const double sweep_start_h = 1.0 + 20.0 * unit_uniform(mix(spec.seed, du, 45));
        for (std::size_t m = 0; m < per_day; ++m) {
            const double hour = static_cast<double>(m) * spec.interval_s / 3600.0;
            const double rise = 1.0 / (1.0 + std::exp(-(hour - start_h) * 2.0));
            const double fall = 1.0 / (1.0 + std::exp((hour - end_h) * 1.5));
            const double lunch = 0.08 * std::exp(-std::pow((hour - 12.5) / 0.7, 2));
            drift = decay * drift + kick * counter_gaussian(spec.seed, du * per_day + m, 47);
            double u = 0.14 + level * std::exp(drift) * (0.62 * rise * fall - lunch);
            u += spec.minute_noise * counter_gaussian(spec.seed, du * per_day + m, 46);
            if (sweep && hour >= sweep_start_h && hour < sweep_start_h + 1.5) {
                const auto step = static_cast<int>((hour - sweep_start_h) / (600.0 / 3600.0));
                u = 0.10 + 0.10 * std::min(step, 8);
            }
            p.values.push_back(clamp_util(u));
        }
    }
    return p;
}

/// Runs the plant over the profile at 1 Hz with no control actions and
/// returns hourly means for facility power, IT power, room temperature,
/// humidity and cluster cpu (sensor noise included).
inline std::vector<TimeSeries> simulate_feature_table(PlantConfig cfg, double duration_s, double step_s = 3600.0,
                                                      const NoiseConfig& noise = {}, std::uint64_t noise_seed = 99) {
    PlantState s = initial_state(cfg);
    Aggregator agg(step_s, 1.0);
    std::vector<TimeSeries> out{{kFacilityPower, {}}, {kItPower, {}}, {kRoomTemp, {}}, {kRoomHumidity, {}}, {kClusterCpu, {}}};
    auto sink = [&](const AggregateRecord& r) {
        const SeriesKey key{r.sensor_id, r.kind};
        for (auto& ts : out)
            if (ts.key == key) ts.points.push_back(Point{r.window_start, r.mean, false});
    };
    const std::vector<ControlAction> none;
    const auto steps = static_cast<std::int64_t>(duration_s);
    for (std::int64_t i = 0; i < steps; ++i) {
        const auto demand = generate_workload(cfg.workload, s.time - cfg.start_time_s, s.servers.size());
        s = step_plant(s, none, 1.0, demand);
        for (const auto& f : sample_meters(s, noise, noise_seed))
            if (auto r = agg.add(f)) sink(*r);
        for (const auto& f : sample_sensors(s, noise, noise_seed))
            if (f.sensor_id == kRoomSensor)
                if (auto r = agg.add(f)) sink(*r);
    }
    // Only windows that ended within the run; the open one holds a single sample.
    const Millis end = s.time_ms();
    for (const auto& r : agg.flush())
        if (r.window_start + static_cast<Millis>(std::llround(r.window_len * 1000.0)) <= end) sink(r);
    for (auto& ts : out)
        std::sort(ts.points.begin(), ts.points.end(), [](const Point& a, const Point& b) { return a.ts < b.ts; });
    return out;
}

}  // namespace dctwin
