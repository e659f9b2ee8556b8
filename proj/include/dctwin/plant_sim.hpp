#pragma once

// Discrete-time model of the small data-center testbed: servers with a
// linear utilization/power curve, a single lumped thermal zone, and a
// proportional-thermostat air conditioner.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"

#include "dctwin/common.hpp"
#include "dctwin/rng.hpp"

namespace dctwin {

inline constexpr double kWattsPerBtuPerHour = 0.29307107;
inline constexpr double kSafeSetpointMin = 18.0;
inline constexpr double kSafeSetpointMax = 27.0;

struct ServerSpec {
    std::string id;
    double p_idle = 120.0;
    double p_max = 400.0;
    std::string label;

    void validate() const {
        if (id.empty()) throw Error("config", "server id must be non-empty");
        if (!(p_idle > 0.0 && p_idle < p_max))
            throw Error("config", "server " + id + ": require 0 < p_idle < p_max");
    }
};

struct ServerState {
    ServerSpec spec;
    double utilization = 0.0;
    bool powered_on = true;
    double power = 0.0;
};

struct CoolingUnit {
    double q_max = 12000.0 * kWattsPerBtuPerHour;
    double cop = 3.0;
    double setpoint = 20.0;
    double deadband = 2.0;
    double duty = 0.0;
};

struct RoomThermalState {
    double temperature = 20.0;
    double humidity = 45.0;
    double heat_capacity = 4.0e5;
    double ambient_temp = 30.0;
    double envelope_conductance = 40.0;
};

struct HumidityWalk {
    double step_std = 0.05;  // %RH per sqrt(second)
    double lo = 30.0;
    double hi = 70.0;
    std::uint64_t seed = 1;
};

/// Heat fluxes of the most recent step, kept for conservation checks.
struct StepFluxes {
    double dt = 0.0;
    double q_it = 0.0;
    double q_envelope = 0.0;
    double q_cool = 0.0;
    double heat_in_j = 0.0;
    double unserved_work = 0.0;
};

struct PlantState {
    double time = 0.0;  // seconds since epoch
    std::vector<ServerState> servers;
    CoolingUnit cooling;
    RoomThermalState room;
    HumidityWalk humidity_walk;
    double overhead_w = 0.0;
    std::uint64_t step_index = 0;
    StepFluxes last;

    Millis time_ms() const { return static_cast<Millis>(std::llround(time * 1000.0)); }

    const ServerState* find(const std::string& id) const {
        for (const auto& s : servers)
            if (s.spec.id == id) return &s;
        return nullptr;
    }

    std::size_t servers_on() const {
        return static_cast<std::size_t>(std::count_if(servers.begin(), servers.end(),
                                                      [](const ServerState& s) { return s.powered_on; }));
    }

    std::uint64_t fingerprint() const {
        Fnv1a h;
        h.add(time);
        for (const auto& s : servers) {
            h.add(s.spec.id);
            h.add(s.utilization);
            h.add(s.powered_on);
            h.add(s.power);
        }
        h.add(cooling.setpoint);
        h.add(cooling.duty);
        h.add(room.temperature);
        h.add(room.humidity);
        h.add(static_cast<std::int64_t>(step_index));
        return h.value();
    }
};

// ---------------------------------------------------------------------------
// Control actions (issued by the policy or by an operator).

enum class Origin { policy, operator_ };

inline std::string to_string(Origin o) { return o == Origin::policy ? "policy" : "operator"; }

struct SetCoolingSetpoint {
    double celsius = 0.0;
};
struct ServerPowerState {
    std::string server_id;
    bool on = true;
};

struct ControlAction {
    std::variant<SetCoolingSetpoint, ServerPowerState> kind;
    Millis issued_at = 0;
    Origin origin = Origin::policy;

    static ControlAction setpoint(double celsius, Millis at, Origin origin) {
        if (!(celsius >= kSafeSetpointMin && celsius <= kSafeSetpointMax))
            throw Error("unsafe_setpoint", "setpoint must lie within [18, 27] C");
        return ControlAction{SetCoolingSetpoint{celsius}, at, origin};
    }
    static ControlAction power(std::string id, bool on, Millis at, Origin origin) {
        return ControlAction{ServerPowerState{std::move(id), on}, at, origin};
    }

    std::string kind_name() const {
        return std::holds_alternative<SetCoolingSetpoint>(kind) ? "set_cooling_setpoint" : "server_power_state";
    }

    nlohmann::json params() const {
        if (const auto* sp = std::get_if<SetCoolingSetpoint>(&kind)) return {{"setpoint_c", sp->celsius}};
        const auto& ps = std::get<ServerPowerState>(kind);
        return {{"server_id", ps.server_id}, {"state", ps.on ? "on" : "off"}};
    }

    // Action-log line (newline JSON).
    nlohmann::json to_json() const {
        return {{"ts", issued_at}, {"kind", kind_name()}, {"params", params()}, {"origin", to_string(origin)}};
    }
};

inline ControlAction action_from_json(const nlohmann::json& j, Millis at, Origin origin) {
    const std::string kind = j.at("kind").get<std::string>();
    const auto& p = j.at("params");
    if (kind == "set_cooling_setpoint") return ControlAction::setpoint(p.at("setpoint_c").get<double>(), at, origin);
    if (kind == "server_power_state") {
        const std::string state = p.at("state").get<std::string>();
        if (state != "on" && state != "off") throw Error("bad_action", "state must be on|off");
        return ControlAction::power(p.at("server_id").get<std::string>(), state == "on", at, origin);
    }
    throw Error("bad_action", "unknown action kind: " + kind);
}

// ---------------------------------------------------------------------------
// Workload generation.

enum class WorkloadKind { constant, step_sweep, diurnal, replay };

struct WorkloadProfile {
    WorkloadKind kind = WorkloadKind::constant;
    std::map<std::string, double> params;
    std::vector<double> values;  // replay samples, used by kind=replay
    std::uint64_t seed = 0;

    double param(const std::string& name, double fallback) const {
        auto it = params.find(name);
        return it == params.end() ? fallback : it->second;
    }
};

inline constexpr double kMinUtil = 0.10;
inline constexpr double kMaxUtil = 0.90;

inline double clamp_util(double u) { return std::clamp(u, kMinUtil, kMaxUtil); }

/// Periodic in 24 h: smooth day curve plus seeded harmonics, with a small
/// per-server phase and gain offset.
inline double diurnal_utilization(const WorkloadProfile& p, double t, std::size_t server) {
    constexpr double day = 86400.0;
    const double base = p.param("base", 0.35);
    const double amplitude = p.param("amplitude", 0.30);
    const double peak_hour = p.param("peak_hour", 14.0);
    const double wobble = p.param("wobble", 0.03);
    const double w = 2.0 * std::numbers::pi / day;
    const double phase_jitter = (unit_uniform(mix(p.seed, server, 11)) - 0.5) * 1800.0;
    const double gain = 1.0 + (unit_uniform(mix(p.seed, server, 12)) - 0.5) * 0.1;
    const double phase = t - peak_hour * 3600.0 + phase_jitter;
    double u = base + gain * amplitude * std::cos(w * phase);
    for (std::uint64_t k = 2; k <= 4; ++k) {
        const double hp = unit_uniform(mix(p.seed, k, 13 + server)) * 2.0 * std::numbers::pi;
        u += wobble / static_cast<double>(k - 1) * std::sin(static_cast<double>(k) * w * t + hp);
    }
    return clamp_util(u);
}

inline std::vector<double> generate_workload(const WorkloadProfile& p, double t, std::size_t n_servers) {
    if (t < 0.0) throw Error("domain", "workload time must be >= 0");
    std::vector<double> out(n_servers);
    switch (p.kind) {
        case WorkloadKind::constant:
            std::fill(out.begin(), out.end(), clamp_util(p.param("level", 0.5)));
            break;
        case WorkloadKind::step_sweep: {
            const double lo = p.param("from", kMinUtil);
            const double hi = p.param("to", kMaxUtil);
            const auto steps = static_cast<std::int64_t>(p.param("steps", 9));
            const double len = p.param("step_s", 600.0);
            if (steps < 1 || len <= 0.0) throw Error("config", "step-sweep needs steps >= 1 and step_s > 0");
            const auto idx = static_cast<std::int64_t>(std::floor(t / len)) % steps;
            const double frac = steps == 1 ? 0.0 : static_cast<double>(idx) / static_cast<double>(steps - 1);
            std::fill(out.begin(), out.end(), clamp_util(lo + (hi - lo) * frac));
            break;
        }
        case WorkloadKind::diurnal:
            for (std::size_t i = 0; i < n_servers; ++i) out[i] = diurnal_utilization(p, t, i);
            break;
        case WorkloadKind::replay: {
            if (p.values.empty()) throw Error("config", "replay profile has no values");
            const double interval = p.param("interval_s", 60.0);
            const double start = p.param("start_s", 0.0);
            if (interval <= 0.0) throw Error("config", "replay interval_s must be > 0");
            const double rel = std::max(0.0, t - start);
            const auto idx = static_cast<std::size_t>(rel / interval) % p.values.size();
            std::fill(out.begin(), out.end(), clamp_util(p.values[idx]));
            break;
        }
    }
    return out;
}

inline WorkloadKind parse_workload_kind(const std::string& s) {
    if (s == "constant") return WorkloadKind::constant;
    if (s == "step-sweep" || s == "step_sweep") return WorkloadKind::step_sweep;
    if (s == "diurnal") return WorkloadKind::diurnal;
    if (s == "replay") return WorkloadKind::replay;
    throw Error("config", "unknown workload kind: " + s);
}

inline std::string to_string(WorkloadKind k) {
    switch (k) {
        case WorkloadKind::constant: return "constant";
        case WorkloadKind::step_sweep: return "step-sweep";
        case WorkloadKind::diurnal: return "diurnal";
        case WorkloadKind::replay: return "replay";
    }
    return "constant";
}

// ---------------------------------------------------------------------------
// Power accounting.

inline double server_power(const ServerSpec& spec, double utilization, bool powered_on) {
    if (!(utilization >= 0.0 && utilization <= 1.0)) throw Error("domain", "utilization outside [0,1]");
    if (!powered_on) return 0.0;
    return spec.p_idle + (spec.p_max - spec.p_idle) * utilization;
}

inline double total_it_power(const PlantState& s) {
    double sum = 0.0;
    for (const auto& sv : s.servers) sum += sv.power;
    return sum;
}

inline double cooling_electrical_power(const CoolingUnit& c) { return c.duty * c.q_max / c.cop; }

inline double total_facility_power(const PlantState& s) {
    return total_it_power(s) + cooling_electrical_power(s.cooling) + s.overhead_w;
}

inline double thermostat_duty(const CoolingUnit& c, double temperature) {
    return clamp01((temperature - c.setpoint) / c.deadband);
}

inline double mean_utilization(const PlantState& s) {
    if (s.servers.empty()) return 0.0;
    double sum = 0.0;
    for (const auto& sv : s.servers) sum += sv.utilization;
    return sum / static_cast<double>(s.servers.size());
}

// ---------------------------------------------------------------------------
// Time integration.

inline void apply_action(PlantState& s, const ControlAction& a) {
    if (const auto* sp = std::get_if<SetCoolingSetpoint>(&a.kind)) {
        if (!(sp->celsius >= kSafeSetpointMin && sp->celsius <= kSafeSetpointMax))
            throw Error("unsafe_setpoint", "setpoint must lie within [18, 27] C");
        s.cooling.setpoint = sp->celsius;
        return;
    }
    const auto& ps = std::get<ServerPowerState>(a.kind);
    for (auto& sv : s.servers) {
        if (sv.spec.id == ps.server_id) {
            sv.powered_on = ps.on;
            if (!ps.on) {
                sv.utilization = 0.0;
                sv.power = 0.0;
            }
            return;
        }
    }
    throw Error("unknown_server", "no server with id " + ps.server_id);
}

/// Spreads per-server demand over powered-on servers. Work from powered-off
/// servers migrates evenly to the active ones; anything above 100% on an
/// active server is reported as unserved.
inline double assign_work(PlantState& s, std::span<const double> demand) {
    if (demand.size() != s.servers.size()) throw Error("domain", "demand vector size must match server count");
    double migrated = 0.0;
    std::size_t on = 0;
    for (std::size_t i = 0; i < demand.size(); ++i) {
        if (s.servers[i].powered_on) ++on;
        else migrated += demand[i];
    }
    if (on == 0) {
        for (auto& sv : s.servers) sv.utilization = 0.0;
        return migrated;
    }
    const double share = migrated / static_cast<double>(on);
    double unserved = 0.0;
    for (std::size_t i = 0; i < demand.size(); ++i) {
        auto& sv = s.servers[i];
        if (!sv.powered_on) {
            sv.utilization = 0.0;
            continue;
        }
        const double want = demand[i] + share;
        sv.utilization = std::min(1.0, want);
        unserved += want - sv.utilization;
    }
    return unserved;
}

/// Advance the plant by dt seconds. Actions apply first, then demand is
/// assigned, then the thermal zone integrates with forward Euler.
inline PlantState step_plant(const PlantState& in, std::span<const ControlAction> actions, double dt,
                             std::span<const double> demand) {
    if (!(dt > 0.0 && dt <= 60.0)) throw Error("domain", "dt must satisfy 0 < dt <= 60");
    PlantState s = in;
    for (const auto& a : actions) apply_action(s, a);

    const double unserved = assign_work(s, demand);
    for (auto& sv : s.servers) sv.power = server_power(sv.spec, sv.utilization, sv.powered_on);

    const double q_it = total_it_power(s);
    s.cooling.duty = thermostat_duty(s.cooling, s.room.temperature);
    const double q_cool = s.cooling.duty * s.cooling.q_max;
    const double q_env = s.room.envelope_conductance * (s.room.ambient_temp - s.room.temperature);
    s.room.temperature += dt * (q_it + q_env - q_cool) / s.room.heat_capacity;

    const auto& hw = s.humidity_walk;
    if (hw.step_std > 0.0) {
        const double z = counter_gaussian(hw.seed, s.step_index, 7);
        s.room.humidity = std::clamp(s.room.humidity + hw.step_std * std::sqrt(dt) * z, hw.lo, hw.hi);
    }

    s.last = StepFluxes{dt, q_it, q_env, q_cool, dt * q_it, unserved};
    s.time += dt;
    ++s.step_index;
    return s;
}

/// Convenience overload holding the current per-server utilization as demand.
inline PlantState step_plant(const PlantState& in, std::span<const ControlAction> actions, double dt) {
    std::vector<double> demand;
    demand.reserve(in.servers.size());
    for (const auto& s : in.servers) demand.push_back(s.utilization);
    return step_plant(in, actions, dt, demand);
}

// ---------------------------------------------------------------------------
// Configuration.

struct PlantConfig {
    std::vector<ServerSpec> servers;
    double q_max_btu_per_h = 12000.0;
    double cop = 3.0;
    double setpoint_c = 20.0;
    double deadband_c = 2.0;
    double heat_capacity_j_per_c = 4.0e5;
    double ambient_c = 30.0;
    double conductance_w_per_c = 40.0;
    double initial_temp_c = 20.0;
    double initial_humidity = 45.0;
    HumidityWalk humidity;
    double overhead_w = 100.0;
    double start_time_s = 1704067200.0;  // 2024-01-01T00:00:00Z
    WorkloadProfile workload{WorkloadKind::diurnal, {}, {}, 7};

    void validate() const {
        if (servers.empty()) throw Error("config", "plant needs at least one server");
        for (const auto& s : servers) s.validate();
        for (std::size_t i = 0; i < servers.size(); ++i)
            for (std::size_t j = i + 1; j < servers.size(); ++j)
                if (servers[i].id == servers[j].id) throw Error("config", "duplicate server id " + servers[i].id);
        if (!(q_max_btu_per_h > 0.0)) throw Error("config", "cooling q_max must be > 0");
        if (!(cop > 0.0)) throw Error("config", "cooling cop must be > 0");
        if (!(deadband_c > 0.0)) throw Error("config", "deadband must be > 0");
        if (!(setpoint_c >= kSafeSetpointMin && setpoint_c <= kSafeSetpointMax))
            throw Error("config", "setpoint must lie within [18, 27] C");
        if (!(heat_capacity_j_per_c > 0.0)) throw Error("config", "heat capacity must be > 0");
        if (!(conductance_w_per_c >= 0.0)) throw Error("config", "conductance must be >= 0");
        if (!(initial_humidity >= 0.0 && initial_humidity <= 100.0)) throw Error("config", "humidity outside [0,100]");
        if (!(overhead_w >= 0.0)) throw Error("config", "overhead must be >= 0");
    }
};

/// The calibrated two-server testbed.
inline PlantConfig default_plant_config() {
    PlantConfig c;
    c.servers = {ServerSpec{"s1", 120.0, 400.0, "PowerEdge R440 #1"},
                 ServerSpec{"s2", 120.0, 400.0, "PowerEdge R440 #2"}};
    return c;
}

inline PlantState initial_state(const PlantConfig& cfg) {
    cfg.validate();
    PlantState s;
    s.time = cfg.start_time_s;
    for (const auto& spec : cfg.servers) s.servers.push_back(ServerState{spec, 0.0, true, spec.p_idle});
    s.cooling.q_max = cfg.q_max_btu_per_h * kWattsPerBtuPerHour;
    s.cooling.cop = cfg.cop;
    s.cooling.setpoint = cfg.setpoint_c;
    s.cooling.deadband = cfg.deadband_c;
    s.cooling.duty = 0.0;
    s.room.temperature = cfg.initial_temp_c;
    s.room.humidity = cfg.initial_humidity;
    s.room.heat_capacity = cfg.heat_capacity_j_per_c;
    s.room.ambient_temp = cfg.ambient_c;
    s.room.envelope_conductance = cfg.conductance_w_per_c;
    s.humidity_walk = cfg.humidity;
    s.overhead_w = cfg.overhead_w;
    return s;
}

inline WorkloadProfile workload_from_json(const nlohmann::json& j) {
    WorkloadProfile p;
    p.kind = parse_workload_kind(j.at("kind").get<std::string>());
    p.seed = j.value("seed", std::uint64_t{0});
    if (j.contains("params")) {
        for (const auto& [k, v] : j.at("params").items()) {
            if (k == "values") p.values = v.get<std::vector<double>>();
            else p.params[k] = v.get<double>();
        }
    }
    return p;
}

inline nlohmann::json workload_to_json(const WorkloadProfile& p) {
    nlohmann::json params = nlohmann::json::object();
    for (const auto& [k, v] : p.params) params[k] = v;
    if (!p.values.empty()) params["values"] = p.values;
    return {{"kind", to_string(p.kind)}, {"params", params}, {"seed", p.seed}};
}

inline PlantConfig plant_config_from_json(const nlohmann::json& j) {
    PlantConfig c = default_plant_config();
    if (j.contains("servers")) {
        c.servers.clear();
        for (const auto& s : j.at("servers"))
            c.servers.push_back(ServerSpec{s.at("id").get<std::string>(), s.at("p_idle").get<double>(),
                                           s.at("p_max").get<double>(), s.value("label", std::string{})});
    }
    if (j.contains("cooling")) {
        const auto& k = j.at("cooling");
        c.q_max_btu_per_h = k.value("q_max_btu_per_h", c.q_max_btu_per_h);
        c.cop = k.value("cop", c.cop);
        c.setpoint_c = k.value("setpoint_c", c.setpoint_c);
        c.deadband_c = k.value("deadband_c", c.deadband_c);
    }
    if (j.contains("room")) {
        const auto& r = j.at("room");
        c.heat_capacity_j_per_c = r.value("heat_capacity_j_per_c", c.heat_capacity_j_per_c);
        c.ambient_c = r.value("ambient_c", c.ambient_c);
        c.conductance_w_per_c = r.value("conductance_w_per_c", c.conductance_w_per_c);
        c.initial_temp_c = r.value("initial_c", c.initial_temp_c);
        c.initial_humidity = r.value("humidity_pct", c.initial_humidity);
    }
    if (j.contains("humidity")) {
        const auto& h = j.at("humidity");
        c.humidity.step_std = h.value("step_std", c.humidity.step_std);
        c.humidity.lo = h.value("min_pct", c.humidity.lo);
        c.humidity.hi = h.value("max_pct", c.humidity.hi);
        c.humidity.seed = h.value("seed", c.humidity.seed);
    }
    c.overhead_w = j.value("overhead_w", c.overhead_w);
    c.start_time_s = j.value("start_time_s", c.start_time_s);
    if (j.contains("workload")) c.workload = workload_from_json(j.at("workload"));
    c.validate();
    return c;
}

inline nlohmann::json plant_config_to_json(const PlantConfig& c) {
    nlohmann::json servers = nlohmann::json::array();
    for (const auto& s : c.servers)
        servers.push_back({{"id", s.id}, {"p_idle", s.p_idle}, {"p_max", s.p_max}, {"label", s.label}});
    return {{"servers", servers},
            {"cooling",
             {{"q_max_btu_per_h", c.q_max_btu_per_h}, {"cop", c.cop}, {"setpoint_c", c.setpoint_c},
              {"deadband_c", c.deadband_c}}},
            {"room",
             {{"heat_capacity_j_per_c", c.heat_capacity_j_per_c}, {"ambient_c", c.ambient_c},
              {"conductance_w_per_c", c.conductance_w_per_c}, {"initial_c", c.initial_temp_c},
              {"humidity_pct", c.initial_humidity}}},
            {"humidity",
             {{"step_std", c.humidity.step_std}, {"min_pct", c.humidity.lo}, {"max_pct", c.humidity.hi},
              {"seed", c.humidity.seed}}},
            {"overhead_w", c.overhead_w},
            {"start_time_s", c.start_time_s},
            {"workload", workload_to_json(c.workload)}};
}

inline PlantConfig load_plant_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("config", "cannot open plant config " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw Error("config", "plant config " + path + ": " + e.what());
    }
    return plant_config_from_json(j);
}

}  // namespace dctwin
