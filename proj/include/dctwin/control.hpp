#pragma once

// Energy/PUE accounting, the consolidation + cooling policy, and the
// baseline-vs-optimized scenario harness.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dctwin/common.hpp"
#include "dctwin/fixture.hpp"
#include "dctwin/forecast.hpp"
#include "dctwin/plant_sim.hpp"
#include "dctwin/telemetry.hpp"
#include "dctwin/tstore.hpp"

namespace dctwin::control {

using forecast::ForecastResult;

inline constexpr double kJoulesPerKwh = 3.6e6;

/// Trapezoidal energy of a watt series, restricted to points in [from, to].
inline double energy_kwh(const TimeSeries& s, std::optional<Millis> from = {}, std::optional<Millis> to = {}) {
    double joules = 0.0;
    const Point* prev = nullptr;
    std::size_t n = 0;
    for (const auto& p : s.points) {
        if ((from && p.ts < *from) || (to && p.ts > *to)) continue;
        if (prev) joules += 0.5 * (prev->value + p.value) * static_cast<double>(p.ts - prev->ts) / 1000.0;
        prev = &p;
        ++n;
    }
    if (n == 0) throw Error("empty_series", "no power samples in the energy window");
    return joules / kJoulesPerKwh;
}

struct PUEReport {
    Millis from = 0;
    Millis to = 0;
    double it_energy_kwh = 0.0;
    double facility_energy_kwh = 0.0;
    double pue = 0.0;

    static PUEReport from_energies(Millis from, Millis to, double it_kwh, double facility_kwh) {
        if (!(it_kwh > 0.0)) throw Error("undefined_pue", "IT energy is zero over the window");
        return PUEReport{from, to, it_kwh, facility_kwh, facility_kwh / it_kwh};
    }

    nlohmann::ordered_json to_json() const {
        return {{"from", from},
                {"to", to},
                {"it_energy_kwh", it_energy_kwh},
                {"facility_energy_kwh", facility_energy_kwh},
                {"pue", pue}};
    }

    static PUEReport from_json(const nlohmann::json& j) {
        return PUEReport{j.at("from").get<Millis>(), j.at("to").get<Millis>(), j.at("it_energy_kwh").get<double>(),
                         j.at("facility_energy_kwh").get<double>(), j.at("pue").get<double>()};
    }
};

inline PUEReport compute_pue(const TimeSeries& it, const TimeSeries& facility, Millis from, Millis to) {
    if (from > to) throw Error("bad_range", "PUE window requires from <= to");
    return PUEReport::from_energies(from, to, energy_kwh(it, from, to), energy_kwh(facility, from, to));
}

// ---------------------------------------------------------------------------
// Policy.

struct ConsolidationPolicy {
    bool enabled = true;
    double util_threshold = 0.20;
    std::size_t min_servers_on = 1;
    double cooldown_s = 600.0;
    double packing_cap = 0.85;
};

struct CoolingPolicy {
    bool enabled = true;
    double target_margin = 2.0;  // below the safe-band maximum
    bool uses_forecast = true;
    double precool_c = 1.0;
    double rise_tolerance = 0.10;  // relative rise in forecast work that counts as rising
    double hold_s = 600.0;
};

struct Policy {
    ConsolidationPolicy consolidation;
    CoolingPolicy cooling;

    void validate() const {
        if (!(consolidation.util_threshold > 0.0 && consolidation.util_threshold < 1.0))
            throw Error("config", "util_threshold must be in (0,1)");
        if (!(consolidation.cooldown_s >= 0.0)) throw Error("config", "cooldown must be >= 0");
        if (!(consolidation.packing_cap > 0.0 && consolidation.packing_cap <= 1.0))
            throw Error("config", "packing cap must be in (0,1]");
        if (!(cooling.target_margin >= 0.0 && cooling.target_margin <= kSafeSetpointMax - kSafeSetpointMin))
            throw Error("config", "target_margin must fit inside the safe band");
        if (!(cooling.precool_c >= 0.0)) throw Error("config", "precool must be >= 0");
        if (!(cooling.hold_s >= 0.0)) throw Error("config", "hold must be >= 0");
    }

    nlohmann::ordered_json to_json() const {
        return {{"consolidation",
                 {{"enabled", consolidation.enabled},
                  {"util_threshold", consolidation.util_threshold},
                  {"min_servers_on", consolidation.min_servers_on},
                  {"cooldown_s", consolidation.cooldown_s},
                  {"packing_cap", consolidation.packing_cap}}},
                {"cooling",
                 {{"enabled", cooling.enabled},
                  {"target_margin", cooling.target_margin},
                  {"uses_forecast", cooling.uses_forecast},
                  {"precool_c", cooling.precool_c},
                  {"rise_tolerance", cooling.rise_tolerance},
                  {"hold_s", cooling.hold_s}}}};
    }

    static Policy from_json(const nlohmann::json& j) {
        Policy p;
        if (j.contains("consolidation")) {
            const auto& c = j["consolidation"];
            p.consolidation.enabled = c.value("enabled", p.consolidation.enabled);
            p.consolidation.util_threshold = c.value("util_threshold", p.consolidation.util_threshold);
            p.consolidation.min_servers_on = c.value("min_servers_on", p.consolidation.min_servers_on);
            p.consolidation.cooldown_s = c.value("cooldown_s", p.consolidation.cooldown_s);
            p.consolidation.packing_cap = c.value("packing_cap", p.consolidation.packing_cap);
        }
        if (j.contains("cooling")) {
            const auto& c = j["cooling"];
            p.cooling.enabled = c.value("enabled", p.cooling.enabled);
            p.cooling.target_margin = c.value("target_margin", p.cooling.target_margin);
            p.cooling.uses_forecast = c.value("uses_forecast", p.cooling.uses_forecast);
            p.cooling.precool_c = c.value("precool_c", p.cooling.precool_c);
            p.cooling.rise_tolerance = c.value("rise_tolerance", p.cooling.rise_tolerance);
            p.cooling.hold_s = c.value("hold_s", p.cooling.hold_s);
        }
        p.validate();
        return p;
    }
};

/// Toggle history the policy needs for cooldowns.
struct PolicyMemory {
    std::map<std::string, Millis> last_toggle;
    std::optional<Millis> last_setpoint_change;
};

/// Total work in server units (sum of utilization) implied by a forecast
/// value. Cpu forecasts are cluster means in percent over all servers;
/// power forecasts are inverted through the active servers' linear model.
inline double forecast_work(const PlantState& s, const ForecastResult& f, double value) {
    if (f.target.kind == SensorKind::cpu) return value / 100.0 * static_cast<double>(s.servers.size());
    double idle = 0.0, span = 0.0;
    std::size_t on = 0;
    for (const auto& sv : s.servers)
        if (sv.powered_on) {
            idle += sv.spec.p_idle;
            span += sv.spec.p_max - sv.spec.p_idle;
            ++on;
        }
    if (on == 0 || span <= 0.0) return 0.0;
    return std::max(0.0, (value - idle) / (span / static_cast<double>(on)));
}

inline std::vector<ControlAction> decide_actions(const PlantState& s, const std::optional<ForecastResult>& fc,
                                                 const Policy& policy, PolicyMemory* memory = nullptr,
                                                 std::optional<Millis> now_opt = {}) {
    const Millis now = now_opt.value_or(s.time_ms());
    std::vector<ControlAction> out;
    const auto& cp = policy.consolidation;

    double work = s.last.unserved_work;
    std::size_t on = 0;
    for (const auto& sv : s.servers)
        if (sv.powered_on) {
            work += sv.utilization;
            ++on;
        }
    double f_max = work;
    bool have_forecast = fc && !fc->predictions.empty();
    if (have_forecast)
        for (double v : fc->predictions) f_max = std::max(f_max, forecast_work(s, *fc, v));
    const double need = std::max(work, f_max);

    auto cooled_down = [&](const std::string& id) {
        if (!memory) return true;
        auto it = memory->last_toggle.find(id);
        return it == memory->last_toggle.end() ||
               static_cast<double>(now - it->second) >= cp.cooldown_s * 1000.0;
    };
    auto toggle = [&](const std::string& id, bool power_on) {
        out.push_back(ControlAction::power(id, power_on, now, Origin::policy));
        if (memory) memory->last_toggle[id] = now;
    };

    if (cp.enabled) {
        const std::size_t floor_on = std::max<std::size_t>(cp.min_servers_on, 1);
        if (need > cp.packing_cap * static_cast<double>(on) || on < floor_on) {
            const auto want = std::max(floor_on, static_cast<std::size_t>(std::ceil(need / cp.packing_cap - 1e-12)));
            for (const auto& sv : s.servers) {
                if (on >= want) break;
                if (sv.powered_on || !cooled_down(sv.spec.id)) continue;
                toggle(sv.spec.id, true);
                ++on;
            }
        } else {
            std::vector<const ServerState*> idle;
            for (const auto& sv : s.servers)
                if (sv.powered_on && sv.utilization < cp.util_threshold) idle.push_back(&sv);
            std::stable_sort(idle.begin(), idle.end(),
                             [](const ServerState* a, const ServerState* b) { return a->utilization < b->utilization; });
            for (const auto* sv : idle) {
                if (on <= floor_on) break;
                if (need > cp.packing_cap * static_cast<double>(on - 1)) break;
                if (!cooled_down(sv->spec.id)) continue;
                toggle(sv->spec.id, false);
                --on;
            }
        }
    }

    const auto& cc = policy.cooling;
    if (cc.enabled) {
        const double high = kSafeSetpointMax - cc.target_margin;
        double desired = high;
        if (cc.uses_forecast && have_forecast && f_max > work * (1.0 + cc.rise_tolerance)) desired = high - cc.precool_c;
        desired = std::clamp(desired, kSafeSetpointMin, kSafeSetpointMax);
        const bool held = memory && memory->last_setpoint_change &&
                          static_cast<double>(now - *memory->last_setpoint_change) < cc.hold_s * 1000.0;
        if (std::abs(desired - s.cooling.setpoint) > 1e-9 && !held) {
            out.push_back(ControlAction::setpoint(desired, now, Origin::policy));
            if (memory) memory->last_setpoint_change = now;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Forecast providers used inside scenarios.

using ForecastProvider = std::function<std::optional<ForecastResult>(const Store&, Millis now)>;

/// Same-time-yesterday forecast of a stored series, averaged per step.
inline ForecastProvider seasonal_naive(SeriesKey key = kClusterCpu, int horizon = 4, double step_s = 900.0,
                                       double period_s = 86400.0) {
    return [=](const Store& store, Millis now) -> std::optional<ForecastResult> {
        const auto step = static_cast<Millis>(std::llround(step_s * 1000.0));
        const auto period = static_cast<Millis>(std::llround(period_s * 1000.0));
        ForecastResult r;
        r.model = "seasonal_naive";
        r.target = key;
        r.horizon = horizon;
        r.step_s = step_s;
        r.issued_at = now;
        for (int k = 1; k <= horizon; ++k) {
            const Millis from = now + (k - 1) * step - period;
            const auto pts = store.query_range(key, from, from + step);
            if (pts.empty()) return std::nullopt;
            double sum = 0.0;
            for (const auto& p : pts.points) sum += p.value;
            r.ts.push_back(now + k * step);
            r.predictions.push_back(sum / static_cast<double>(pts.size()));
        }
        return r;
    };
}

/// Recursive forecast from a trained model over the last input_len complete
/// steps of its feature series.
inline ForecastProvider model_forecast(std::shared_ptr<const forecast::Forecaster> model, int horizon) {
    return [model = std::move(model), horizon](const Store& store, Millis now) -> std::optional<ForecastResult> {
        const auto& ws = model->window();
        const auto step = static_cast<Millis>(std::llround(ws.step_s * 1000.0));
        const Millis end = now - now % step;
        const Millis from = end - ws.input_len * step;
        forecast::Matrix w(ws.input_len, static_cast<Eigen::Index>(model->features().size()));
        for (std::size_t f = 0; f < model->features().size(); ++f) {
            const auto s = store.query_range(model->features()[f], from, end, ws.step_s);
            if (s.size() != static_cast<std::size_t>(ws.input_len)) return std::nullopt;
            for (Eigen::Index r = 0; r < ws.input_len; ++r)
                w(r, static_cast<Eigen::Index>(f)) = s.points[static_cast<std::size_t>(r)].value;
        }
        return model->predict_horizon(w, horizon, end - step);
    };
}

// ---------------------------------------------------------------------------
// Scenario harness.

struct ScenarioConfig {
    PlantConfig plant = default_plant_config();
    double duration_s = 86400.0;
    double warmup_s = 86400.0;  // simulated before accounting starts, policy off
    bool policy_on = false;
    Policy policy;
    std::uint64_t seed = 7;
    double control_period_s = 60.0;
    double aggregate_s = 60.0;
    NoiseConfig noise;
    std::optional<PlantState> initial;  // fork point; otherwise initial_state(plant)
    std::shared_ptr<Store> history;     // fork history copied into the scenario store
    ForecastProvider forecaster;        // empty -> seasonal naive on cluster cpu
};

struct ScenarioRun {
    PUEReport report;
    bool policy_on = false;
    Policy policy;
    std::uint64_t seed = 0;
    std::uint64_t workload_hash = 0;
    std::vector<ControlAction> actions;
    TimeSeries it{kItPower, {}};
    TimeSeries facility{kFacilityPower, {}};
    std::vector<double> served_work;  // per step, sum of utilization
    double unserved_work = 0.0;
    double min_pue_snapshot = 0.0;
    double max_temp_c = 0.0;
    std::uint64_t final_fingerprint = 0;

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["report"] = report.to_json();
        j["policy_on"] = policy_on;
        j["policy"] = policy.to_json();
        j["seed"] = seed;
        j["workload_hash"] = workload_hash;
        j["actions"] = actions.size();
        j["unserved_work"] = unserved_work;
        j["max_temp_c"] = max_temp_c;
        j["final_fingerprint"] = final_fingerprint;
        return j;
    }
};

inline ScenarioRun run_scenario(const ScenarioConfig& cfg) {
    if (!(cfg.duration_s >= 1.0)) throw Error("empty_report", "scenario duration must be at least one second");
    if (!(cfg.warmup_s >= 0.0)) throw Error("config", "warm-up must be >= 0");
    if (!(cfg.control_period_s >= 1.0)) throw Error("config", "control period must be >= 1 s");
    cfg.policy.validate();

    PlantConfig pc = cfg.plant;
    pc.workload.seed = cfg.seed;
    pc.humidity.seed = cfg.seed;
    PlantState s = cfg.initial ? *cfg.initial : initial_state(pc);
    if (cfg.initial && s.servers.size() != pc.servers.size())
        throw Error("config", "fork state does not match the plant config");

    Store store;
    if (cfg.history)
        for (const auto& series : cfg.history->snapshot())
            for (const auto& p : series.points) store.append(series.key, p.ts, p.value, p.imputed);
    Aggregator agg(cfg.aggregate_s, 1.0);
    auto sink = [&](const AggregateRecord& r) { store.append(SeriesKey{r.sensor_id, r.kind}, r.window_start, r.mean); };
    const ForecastProvider provider = cfg.forecaster ? cfg.forecaster : seasonal_naive();

    ScenarioRun run;
    run.policy_on = cfg.policy_on;
    run.policy = cfg.policy;
    run.seed = cfg.seed;
    run.min_pue_snapshot = std::numeric_limits<double>::infinity();
    run.max_temp_c = -std::numeric_limits<double>::infinity();

    const auto warm = static_cast<std::int64_t>(std::llround(cfg.warmup_s));
    const auto total = warm + static_cast<std::int64_t>(std::llround(cfg.duration_s));
    const auto period = static_cast<std::int64_t>(std::llround(cfg.control_period_s));
    PolicyMemory memory;
    std::vector<ControlAction> pending;
    Fnv1a trace;
    run.served_work.reserve(static_cast<std::size_t>(total - warm));
    run.it.points.reserve(static_cast<std::size_t>(total - warm + 1));
    run.facility.points.reserve(static_cast<std::size_t>(total - warm + 1));

    auto record = [&] {
        run.it.points.push_back(Point{s.time_ms(), total_it_power(s), false});
        run.facility.points.push_back(Point{s.time_ms(), total_facility_power(s), false});
    };

    for (std::int64_t i = 0; i < total; ++i) {
        if (i == warm) record();
        const auto demand = generate_workload(pc.workload, s.time - pc.start_time_s, s.servers.size());
        s = step_plant(s, pending, 1.0, demand);
        for (const auto& a : pending) run.actions.push_back(a);
        pending.clear();

        for (const auto& f : sample_sensors(s, cfg.noise, cfg.seed))
            if (auto v = validate_normalize(f); v.ok)
                if (auto r = agg.add(v.frame)) sink(*r);
        for (const auto& f : sample_meters(s, cfg.noise, cfg.seed))
            if (auto r = agg.add(f)) sink(*r);

        if (i >= warm) {
            for (double d : demand) trace.add(d);
            double served = 0.0;
            for (const auto& sv : s.servers) served += sv.utilization;
            run.served_work.push_back(served);
            run.unserved_work += s.last.unserved_work;
            record();
            const double it = total_it_power(s);
            if (it > 0.0) run.min_pue_snapshot = std::min(run.min_pue_snapshot, total_facility_power(s) / it);
            run.max_temp_c = std::max(run.max_temp_c, s.room.temperature);
            if (cfg.policy_on && (i + 1 - warm) % period == 0 && i + 1 < total) {
                const Millis now = s.time_ms();
                pending = decide_actions(s, provider(store, now), cfg.policy, &memory, now);
            }
        }
    }
    run.workload_hash = trace.value();
    run.final_fingerprint = s.fingerprint();
    run.report = compute_pue(run.it, run.facility, run.it.points.front().ts, run.it.points.back().ts);
    return run;
}

struct ScenarioResult {
    PUEReport baseline;
    PUEReport optimized;
    double energy_reduction_pct = 0.0;
    double it_reduction_pct = 0.0;
    double pue_delta = 0.0;
    std::uint64_t workload_hash = 0;
    std::optional<double> max_served_work_gap;  // only when traces were compared
    std::vector<ControlAction> actions;

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["baseline"] = baseline.to_json();
        j["optimized"] = optimized.to_json();
        j["energy_reduction_pct"] = energy_reduction_pct;
        j["it_reduction_pct"] = it_reduction_pct;
        j["pue_delta"] = pue_delta;
        j["workload_hash"] = std::to_string(workload_hash);
        if (max_served_work_gap) j["max_served_work_gap"] = *max_served_work_gap;
        auto log = nlohmann::ordered_json::array();
        for (const auto& a : actions) log.push_back(nlohmann::ordered_json::parse(a.to_json().dump()));
        j["actions"] = std::move(log);
        return j;
    }
};

inline ScenarioResult compare_reports(const PUEReport& base, const PUEReport& opt, std::uint64_t base_hash,
                                      std::uint64_t opt_hash) {
    if (base.from != opt.from || base.to != opt.to)
        throw Error("mismatched_scenarios", "scenario windows differ");
    if (base_hash != opt_hash) throw Error("mismatched_scenarios", "workload traces differ");
    ScenarioResult r;
    r.baseline = base;
    r.optimized = opt;
    r.energy_reduction_pct = 100.0 * (base.facility_energy_kwh - opt.facility_energy_kwh) / base.facility_energy_kwh;
    r.it_reduction_pct = 100.0 * (base.it_energy_kwh - opt.it_energy_kwh) / base.it_energy_kwh;
    r.pue_delta = base.pue - opt.pue;
    r.workload_hash = base_hash;
    return r;
}

inline ScenarioResult compare_scenarios(const ScenarioRun& base, const ScenarioRun& opt) {
    auto r = compare_reports(base.report, opt.report, base.workload_hash, opt.workload_hash);
    if (base.served_work.size() == opt.served_work.size()) {
        double gap = 0.0;
        for (std::size_t i = 0; i < base.served_work.size(); ++i)
            gap = std::max(gap, std::abs(base.served_work[i] - opt.served_work[i]));
        r.max_served_work_gap = gap;
    }
    r.actions = opt.actions;
    return r;
}

/// Baseline and policy runs of the same config and seed.
inline ScenarioResult run_comparison(ScenarioConfig cfg) {
    cfg.policy_on = false;
    const auto base = run_scenario(cfg);
    cfg.policy_on = true;
    const auto opt = run_scenario(cfg);
    return compare_scenarios(base, opt);
}

// ---------------------------------------------------------------------------
// Scenario output directories.

inline void write_action_log(const std::vector<ControlAction>& actions, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw Error("io", "cannot write " + path.string());
    for (const auto& a : actions) out << a.to_json().dump() << '\n';
}

inline void write_scenario_dir(const ScenarioRun& run, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    write_action_log(run.actions, dir / "actions.ndjson");
    auto j = run.to_json();
    j["action_log"] = (dir / "actions.ndjson").string();
    std::ofstream out(dir / "report.json");
    if (!out) throw Error("io", "cannot write report in " + dir.string());
    out << j.dump(2) << '\n';
}

struct ScenarioDir {
    PUEReport report;
    std::uint64_t workload_hash = 0;
    bool policy_on = false;
    std::vector<ControlAction> actions;
};

inline ScenarioDir read_scenario_dir(const std::filesystem::path& dir) {
    std::ifstream in(dir / "report.json");
    if (!in) throw Error("io", "no report.json in " + dir.string());
    ScenarioDir d;
    try {
        nlohmann::json j;
        in >> j;
        d.report = PUEReport::from_json(j.at("report"));
        d.workload_hash = j.at("workload_hash").get<std::uint64_t>();
        d.policy_on = j.at("policy_on").get<bool>();
    } catch (const nlohmann::json::exception& e) {
        throw Error("bad_report", std::string("malformed scenario report: ") + e.what());
    }
    std::ifstream log(dir / "actions.ndjson");
    std::string line;
    while (log && std::getline(log, line)) {
        if (line.empty()) continue;
        const auto j = nlohmann::json::parse(line);
        d.actions.push_back(action_from_json(j, j.at("ts").get<Millis>(),
                                             j.at("origin") == "policy" ? Origin::policy : Origin::operator_));
    }
    return d;
}

}  // namespace dctwin::control
