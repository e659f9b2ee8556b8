#pragma once

// Live twin behind an HTTP/JSON API with a server-sent event stream.

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdio>
#include <deque>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <unistd.h>

#include <nlohmann/json.hpp>

// Eigen must be parsed before httplib: <resolv.h> defines a `_res` macro.
#include "dctwin/anomaly.hpp"
#include "dctwin/common.hpp"
#include "dctwin/control.hpp"
#include "dctwin/fixture.hpp"
#include "dctwin/forecast.hpp"
#include "dctwin/plant_sim.hpp"
#include "dctwin/telemetry.hpp"
#include "dctwin/tstore.hpp"

#ifndef CPPHTTPLIB_LISTEN_BACKLOG
#define CPPHTTPLIB_LISTEN_BACKLOG 256
#endif
#include <httplib.h>

namespace dctwin::service {

using nlohmann::json;

inline constexpr int kDefaultHttpPort = 7700;
inline constexpr std::size_t kDefaultEventBuffer = 10000;

struct ApiError {
    std::string code;
    std::string message;
    int http_status = 400;

    json to_json() const { return {{"code", code}, {"message", message}}; }
};

/// HTTP status for a library error code.
inline int status_for(const std::string& code) {
    if (code == "last_server") return 409;
    if (code == "insufficient_history" || code == "undefined_pue") return 409;
    if (code == "unknown_server" || code == "not_found" || code == "empty_series") return 404;
    if (code == "internal" || code == "io" || code == "io_retriable") return 500;
    return 400;
}

inline ApiError to_api_error(const Error& e) { return ApiError{e.code(), e.what(), status_for(e.code())}; }

// ---------------------------------------------------------------------------
// Event stream.

struct Event {
    std::uint64_t seq = 0;
    std::string kind;
    std::string data;  // compact JSON, single line
};

inline std::string format_sse(const Event& e) {
    return "id: " + std::to_string(e.seq) + "\nevent: " + e.kind + "\ndata: " + e.data + "\n\n";
}

/// Retains the most recent events; readers track their own cursor.
class EventHub {
public:
    explicit EventHub(std::size_t capacity = kDefaultEventBuffer) : capacity_(capacity) {
        if (capacity_ == 0) throw Error("config", "event buffer must hold at least one event");
    }

    std::uint64_t publish(const std::string& kind, const json& payload) {
        std::uint64_t seq = 0;
        {
            std::lock_guard lock(mu_);
            seq = next_++;
            events_.push_back(Event{seq, kind, payload.dump()});
            if (events_.size() > capacity_) events_.pop_front();
        }
        cv_.notify_all();
        return seq;
    }

    struct Batch {
        std::vector<Event> events;
        bool overflow = false;  // events after the cursor were already evicted
    };

    Batch since(std::uint64_t after, std::size_t max = 512) const {
        std::lock_guard lock(mu_);
        Batch b;
        if (events_.empty()) return b;
        const std::uint64_t oldest = events_.front().seq;
        if (after + 1 < oldest) b.overflow = true;
        const std::size_t start = after + 1 <= oldest ? 0 : static_cast<std::size_t>(after + 1 - oldest);
        for (std::size_t i = start; i < events_.size() && b.events.size() < max; ++i) b.events.push_back(events_[i]);
        return b;
    }

    /// Blocks until an event newer than `after` exists or the timeout passes.
    template <class Rep, class Period>
    bool wait_for(std::uint64_t after, std::chrono::duration<Rep, Period> timeout) const {
        std::unique_lock lock(mu_);
        return cv_.wait_for(lock, timeout, [&] { return closed_ || next_ - 1 > after; }) && !closed_;
    }

    std::uint64_t last_seq() const {
        std::lock_guard lock(mu_);
        return next_ - 1;
    }
    std::uint64_t oldest_seq() const {
        std::lock_guard lock(mu_);
        return events_.empty() ? next_ : events_.front().seq;
    }
    std::size_t capacity() const { return capacity_; }

    void close() {
        {
            std::lock_guard lock(mu_);
            closed_ = true;
        }
        cv_.notify_all();
    }
    bool closed() const {
        std::lock_guard lock(mu_);
        return closed_;
    }

private:
    std::size_t capacity_;
    mutable std::mutex mu_;
    mutable std::condition_variable cv_;
    std::deque<Event> events_;
    std::uint64_t next_ = 1;
    bool closed_ = false;
};

// ---------------------------------------------------------------------------
// Live twin.

struct TwinConfig {
    PlantConfig plant = default_plant_config();
    std::string zone = "z1";
    NoiseConfig noise;
    std::uint64_t noise_seed = 99;
    std::optional<std::filesystem::path> data_dir;
    bool policy_on = false;
    control::Policy policy;
    double control_period_s = 60.0;
    double aggregate_s = 300.0;
    std::size_t anomaly_train_minutes = 1440;
    anomaly::ForestParams forest;
    double anomaly_threshold = anomaly::kDefaultThreshold;
    std::optional<std::string> forecast_checkpoint;
    std::optional<std::string> anomaly_checkpoint;
    std::size_t event_capacity = kDefaultEventBuffer;
    bool frame_events = true;
    double max_scenario_s = 7 * 86400.0;

    static TwinConfig from_json(const json& j) {
        TwinConfig c;
        if (j.contains("plant")) c.plant = plant_config_from_json(j.at("plant"));
        c.zone = j.value("zone", c.zone);
        if (j.contains("data_dir")) c.data_dir = j.at("data_dir").get<std::string>();
        c.policy_on = j.value("policy_on", c.policy_on);
        if (j.contains("policy")) c.policy = control::Policy::from_json(j.at("policy"));
        c.control_period_s = j.value("control_period_s", c.control_period_s);
        c.aggregate_s = j.value("aggregate_s", c.aggregate_s);
        c.anomaly_train_minutes = j.value("anomaly_train_minutes", c.anomaly_train_minutes);
        c.anomaly_threshold = j.value("anomaly_threshold", c.anomaly_threshold);
        if (j.contains("forecast_checkpoint")) c.forecast_checkpoint = j.at("forecast_checkpoint").get<std::string>();
        if (j.contains("anomaly_checkpoint")) c.anomaly_checkpoint = j.at("anomaly_checkpoint").get<std::string>();
        c.event_capacity = j.value("event_capacity", c.event_capacity);
        c.frame_events = j.value("frame_events", c.frame_events);
        if (j.contains("noise")) {
            const auto& n = j.at("noise");
            c.noise.power_rel_std = n.value("power_rel_std", c.noise.power_rel_std);
            c.noise.temp_std = n.value("temp_std", c.noise.temp_std);
            c.noise.humidity_std = n.value("humidity_std", c.noise.humidity_std);
            c.noise.cpu_std = n.value("cpu_std", c.noise.cpu_std);
        }
        return c;
    }
};

/// Append-only action log; each line is synced before the call returns.
class ActionLog {
public:
    ActionLog() = default;
    explicit ActionLog(const std::filesystem::path& path) {
        std::filesystem::create_directories(path.parent_path());
        file_ = std::fopen(path.c_str(), "a");
        if (!file_) throw Error("io", "cannot open action log " + path.string());
    }
    ActionLog(const ActionLog&) = delete;
    ActionLog& operator=(const ActionLog&) = delete;
    ~ActionLog() {
        if (file_) std::fclose(file_);
    }

    void append(const ControlAction& a) {
        const std::string line = a.to_json().dump() + "\n";
        if (file_) {
            if (std::fwrite(line.data(), 1, line.size(), file_) != line.size() || std::fflush(file_) != 0 ||
                ::fsync(::fileno(file_)) != 0)
                throw Error("io", "action log write failed");
        }
        entries_.push_back(a);
    }

    const std::vector<ControlAction>& entries() const { return entries_; }

private:
    std::FILE* file_ = nullptr;
    std::vector<ControlAction> entries_;
};

class LiveTwin {
public:
    explicit LiveTwin(TwinConfig cfg)
        : cfg_(std::move(cfg)),
          state_(initial_state(cfg_.plant)),
          events_(cfg_.event_capacity),
          agg_(cfg_.aggregate_s, 1.0),
          minute_agg_(60.0, 1.0) {
        cfg_.policy.validate();
        if (cfg_.data_dir) {
            store_ = std::make_unique<Store>(*cfg_.data_dir / "series");
            log_ = std::make_unique<ActionLog>(*cfg_.data_dir / "actions.ndjson");
        } else {
            store_ = std::make_unique<Store>();
            log_ = std::make_unique<ActionLog>();
        }
        recorder_ = broker_.subscribe("dc/+/+/+");
        if (cfg_.forecast_checkpoint)
            model_ = std::make_shared<const forecast::Forecaster>(forecast::Forecaster::load(*cfg_.forecast_checkpoint));
        if (cfg_.anomaly_checkpoint)
            detector_.emplace(anomaly::IsoForest::load(*cfg_.anomaly_checkpoint), cfg_.anomaly_threshold,
                              alert_sink());
    }

    LiveTwin(const LiveTwin&) = delete;
    LiveTwin& operator=(const LiveTwin&) = delete;

    const TwinConfig& config() const { return cfg_; }
    EventHub& events() { return events_; }
    Broker& broker() { return broker_; }
    const Store& store() const { return *store_; }

    /// Steps the plant `seconds` times at 1 Hz.
    void advance(std::int64_t seconds) {
        for (std::int64_t i = 0; i < seconds; ++i) {
            std::lock_guard lock(mu_);
            tick();
        }
    }

    PlantState snapshot() const {
        std::lock_guard lock(mu_);
        return state_;
    }
    std::uint64_t fingerprint() const {
        std::lock_guard lock(mu_);
        return state_.fingerprint();
    }

    json metrics_current() const {
        std::lock_guard lock(mu_);
        const double it = total_it_power(state_);
        const double fac = total_facility_power(state_);
        json servers = json::array();
        for (const auto& sv : state_.servers)
            servers.push_back({{"id", sv.spec.id},
                               {"powered_on", sv.powered_on},
                               {"utilization", sv.utilization},
                               {"power_w", sv.power}});
        return {{"ts", state_.time_ms()},
                {"it_power_w", it},
                {"facility_power_w", fac},
                {"cooling_power_w", cooling_electrical_power(state_.cooling)},
                {"temp_c", state_.room.temperature},
                {"humidity_rh", state_.room.humidity},
                {"setpoint_c", state_.cooling.setpoint},
                {"pue", it > 0.0 ? json(fac / it) : json(nullptr)},
                {"servers", servers},
                {"step", state_.step_index}};
    }

    /// Validates and queues an operator action; it is logged durably and
    /// announced before this returns, and applied on the next tick.
    std::pair<ControlAction, std::uint64_t> submit(const json& body) {
        std::lock_guard lock(mu_);
        ControlAction a = [&] {
            try {
                return action_from_json(body, state_.time_ms(), Origin::operator_);
            } catch (const json::exception& e) {
                throw Error("bad_action", std::string("malformed action: ") + e.what());
            }
        }();
        check_locked(a);
        return {a, record_action_locked(a)};
    }

    std::vector<ControlAction> action_log() const {
        std::lock_guard lock(mu_);
        return log_->entries();
    }

    std::optional<forecast::ForecastResult> forecast(int horizon_h) const {
        if (horizon_h < 1) throw Error("bad_horizon", "horizon must be >= 1 h");
        Millis now;
        {
            std::lock_guard lock(mu_);
            now = state_.time_ms();
        }
        if (model_) {
            if (auto r = control::model_forecast(model_, horizon_h)(*store_, now)) return r;
        }
        if (auto r = control::seasonal_naive(kFacilityPower, horizon_h, 3600.0)(*store_, now)) return r;
        const auto recent = store_->query_range(kFacilityPower, now - 3600 * 1000, now + 1);
        if (recent.empty()) return std::nullopt;
        double sum = 0.0;
        for (const auto& p : recent.points) sum += p.value;
        forecast::ForecastResult r;
        r.model = "persistence";
        r.target = kFacilityPower;
        r.horizon = horizon_h;
        r.issued_at = now;
        for (int k = 1; k <= horizon_h; ++k) {
            r.ts.push_back(now + k * 3600 * 1000);
            r.predictions.push_back(sum / static_cast<double>(recent.size()));
        }
        return r;
    }

    control::PUEReport pue(Millis from, Millis to) const {
        if (from > to) throw Error("bad_range", "query range requires from <= to");
        const auto it = store_->query_range(kItPower, from, to + 1);
        const auto fac = store_->query_range(kFacilityPower, from, to + 1);
        return control::compute_pue(it, fac, from, to);
    }

    std::vector<anomaly::AnomalyScore> anomalies(Millis from, Millis to) const {
        if (from > to) throw Error("bad_range", "query range requires from <= to");
        std::lock_guard lock(mu_);
        std::vector<anomaly::AnomalyScore> out;
        for (const auto& s : scores_)
            if (s.ts >= from && s.ts <= to) out.push_back(s);
        return out;
    }

    bool detector_trained() const {
        std::lock_guard lock(mu_);
        return detector_.has_value();
    }
    std::vector<std::string> anomaly_features() const { return anomaly::kDefaultFeatures; }

    /// What-if on a fork of the current state; the live twin is untouched.
    control::ScenarioResult what_if(const json& body) const {
        control::ScenarioConfig sc;
        {
            std::lock_guard lock(mu_);
            sc.initial = state_;
        }
        sc.plant = cfg_.plant;
        sc.seed = body.value("seed", cfg_.plant.workload.seed);
        sc.warmup_s = 0.0;
        sc.noise = cfg_.noise;
        sc.control_period_s = cfg_.control_period_s;
        sc.duration_s = scenario_duration(body);
        if (sc.duration_s > cfg_.max_scenario_s) throw Error("bad_duration", "scenario duration exceeds the limit");
        bool policy_on = true;
        sc.policy = cfg_.policy;
        if (body.contains("policy")) {
            const auto& p = body.at("policy");
            if (p.is_string()) {
                if (p != "on" && p != "off") throw Error("bad_request", "policy must be on|off or an object");
                policy_on = p == "on";
            } else if (p.is_object()) {
                sc.policy = control::Policy::from_json(p);
            } else {
                throw Error("bad_request", "policy must be on|off or an object");
            }
        }
        if (body.contains("overrides")) apply_overrides(body.at("overrides"), sc);
        const Millis now = sc.initial->time_ms();
        auto history = std::make_shared<Store>();
        for (const auto& p : store_->query_range(kClusterCpu, now - 25 * 3600 * 1000, now + 1).points)
            history->append(kClusterCpu, p.ts, p.value);
        sc.history = history;

        sc.policy_on = false;
        const auto base = control::run_scenario(sc);
        sc.policy_on = policy_on;
        const auto opt = control::run_scenario(sc);
        return control::compare_scenarios(base, opt);
    }

private:
    static double scenario_duration(const json& body) {
        if (!body.contains("duration")) return 3600.0;
        const auto& d = body.at("duration");
        double s = 0.0;
        if (d.is_number()) s = d.get<double>();
        else if (d.is_string()) s = parse_duration(d.get<std::string>());
        else throw Error("bad_duration", "duration must be seconds or a string like 1h");
        if (!(s >= 1.0)) throw Error("empty_report", "scenario duration must be at least one second");
        return s;
    }

    static void apply_overrides(const json& o, control::ScenarioConfig& sc) {
        if (!o.is_object()) throw Error("bad_request", "overrides must be an object");
        PlantState& s = *sc.initial;
        if (o.contains("setpoint_c")) {
            const double v = o.at("setpoint_c").get<double>();
            if (!(v >= kSafeSetpointMin && v <= kSafeSetpointMax))
                throw Error("unsafe_setpoint", "setpoint must lie within [18, 27] C");
            s.cooling.setpoint = v;
        }
        if (o.contains("overhead_w")) {
            const double v = o.at("overhead_w").get<double>();
            if (!(v >= 0.0)) throw Error("config", "overhead must be >= 0");
            s.overhead_w = v;
        }
        if (o.contains("cop")) {
            const double v = o.at("cop").get<double>();
            if (!(v > 0.0)) throw Error("config", "cop must be > 0");
            s.cooling.cop = v;
        }
        if (o.contains("ambient_c")) s.room.ambient_temp = o.at("ambient_c").get<double>();
        if (o.contains("workload")) sc.plant.workload = workload_from_json(o.at("workload"));
    }

    anomaly::AlertSink alert_sink() {
        return [this](std::string_view topic, const std::string& line, const anomaly::AnomalyScore&) {
            json payload = json::parse(line);
            payload["topic"] = std::string(topic);
            events_.publish("alert", payload);
        };
    }

    void check_locked(const ControlAction& a) const {
        const auto* ps = std::get_if<ServerPowerState>(&a.kind);
        if (!ps) return;
        PlantState after = state_;
        for (const auto& p : pending_) apply_action(after, p);
        if (!after.find(ps->server_id)) throw Error("unknown_server", "no server with id " + ps->server_id);
        if (!ps->on && after.find(ps->server_id)->powered_on && after.servers_on() <= 1)
            throw Error("last_server", "refusing to power off the last running server");
    }

    std::uint64_t record_action_locked(const ControlAction& a) {
        log_->append(a);
        pending_.push_back(a);
        return events_.publish("action", a.to_json());
    }

    void tick() {
        const auto demand = generate_workload(cfg_.plant.workload, state_.time - cfg_.plant.start_time_s,
                                              state_.servers.size());
        state_ = step_plant(state_, pending_, 1.0, demand);
        pending_.clear();

        auto frames = sample_sensors(state_, cfg_.noise, cfg_.noise_seed);
        for (auto& f : sample_meters(state_, cfg_.noise, cfg_.noise_seed)) frames.push_back(std::move(f));
        for (const auto& f : frames) broker_.publish(Topic::of(cfg_.zone, f.sensor_id, to_string(f.kind)), f);
        for (const auto& d : recorder_->drain()) record_frame(d.frame);

        const Millis now = state_.time_ms();
        const auto step = static_cast<std::int64_t>(state_.step_index);
        const auto period = std::max<std::int64_t>(1, std::llround(cfg_.control_period_s));
        if (cfg_.policy_on && step % period == 0) {
            const auto fc = control::seasonal_naive()(*store_, now);
            for (const auto& a : control::decide_actions(state_, fc, cfg_.policy, &memory_, now))
                record_action_locked(a);
        }
        if (now % (3600 * 1000) == 0 && step >= 3600) {
            if (auto r = control::seasonal_naive(kFacilityPower, 1, 3600.0)(*store_, now))
                events_.publish("forecast", r->to_json());
            try {
                events_.publish("pue", pue(now - 3600 * 1000, now).to_json());
            } catch (const Error&) {
            }
        }
    }

    void record_frame(const TelemetryFrame& raw) {
        const auto v = validate_normalize(raw);
        if (!v.ok) {
            ++rejected_;
            return;
        }
        const auto& f = v.frame;
        if (store_->append(SeriesKey{f.sensor_id, f.kind}, f.ts, f.value) != AppendStatus::ok) return;
        if (cfg_.frame_events)
            events_.publish("frame", {{"ts", f.ts}, {"sensor_id", f.sensor_id},
                                      {"kind", std::string(to_string(f.kind))}, {"value", f.value}, {"unit", f.unit}});
        if (auto r = agg_.add(f)) events_.publish("aggregate", r->to_json());
        if (auto r = minute_agg_.add(f)) feature_record(*r);
    }

    void feature_record(const AggregateRecord& r) {
        int slot = -1;
        if (r.sensor_id == kItPower.sensor_id && r.kind == SensorKind::power) slot = 0;
        else if (r.sensor_id == kRoomSensor && r.kind == SensorKind::temp) slot = 1;
        else if (r.sensor_id == kRoomSensor && r.kind == SensorKind::humidity) slot = 2;
        else if (r.sensor_id == kClusterCpu.sensor_id && r.kind == SensorKind::cpu) slot = 3;
        if (slot < 0) return;
        auto& row = partial_[r.window_start];
        row.values[static_cast<std::size_t>(slot)] = r.mean;
        row.seen |= 1u << slot;
        if (row.seen != 0xFu) return;
        std::vector<double> x(row.values.begin(), row.values.end());
        const Millis ts = r.window_start;
        partial_.erase(partial_.begin(), partial_.upper_bound(ts));
        if (!detector_) {
            training_.push_back(std::move(x));
            if (training_.size() >= std::max<std::size_t>(2, cfg_.anomaly_train_minutes)) {
                auto params = cfg_.forest;
                params.seed = cfg_.plant.workload.seed;
                detector_.emplace(anomaly::build_forest(training_, params, anomaly::kDefaultFeatures),
                                  cfg_.anomaly_threshold, alert_sink());
                training_.clear();
            }
            return;
        }
        scores_.push_back(detector_->observe(ts, std::move(x)));
        if (scores_.size() > 100000) scores_.pop_front();
    }

    struct FeatureRow {
        std::array<double, 4> values{};
        unsigned seen = 0;
    };

    TwinConfig cfg_;
    mutable std::mutex mu_;
    PlantState state_;
    std::vector<ControlAction> pending_;
    control::PolicyMemory memory_;
    EventHub events_;
    Broker broker_;
    std::shared_ptr<Subscription> recorder_;
    std::unique_ptr<Store> store_;
    std::unique_ptr<ActionLog> log_;
    Aggregator agg_;
    Aggregator minute_agg_;
    std::map<Millis, FeatureRow> partial_;
    anomaly::Points training_;
    std::optional<anomaly::Detector> detector_;
    std::deque<anomaly::AnomalyScore> scores_;
    std::shared_ptr<const forecast::Forecaster> model_;
    std::uint64_t rejected_ = 0;
};

/// Advances the twin in wall-clock time; `scale` simulated seconds per
/// wall second.
class TwinClock {
public:
    TwinClock(LiveTwin& twin, double scale = 1.0) : twin_(twin), scale_(scale) {
        if (!(scale_ > 0.0)) throw Error("config", "time scale must be > 0");
    }
    ~TwinClock() { stop(); }

    void start() {
        running_ = true;
        thread_ = std::thread([this] {
            auto next = std::chrono::steady_clock::now();
            const auto period = std::chrono::duration_cast<std::chrono::steady_clock::duration>(
                std::chrono::duration<double>(1.0 / scale_));
            while (running_) {
                twin_.advance(1);
                next += period;
                std::unique_lock lock(mu_);
                cv_.wait_until(lock, next, [&] { return !running_; });
            }
        });
    }

    void stop() {
        {
            std::lock_guard lock(mu_);
            running_ = false;
        }
        cv_.notify_all();
        if (thread_.joinable()) thread_.join();
    }

private:
    LiveTwin& twin_;
    double scale_;
    std::atomic<bool> running_{false};
    std::mutex mu_;
    std::condition_variable cv_;
    std::thread thread_;
};

// ---------------------------------------------------------------------------
// HTTP layer.

struct ServiceConfig {
    std::string host = "127.0.0.1";
    int port = kDefaultHttpPort;  // 0 picks a free port
    std::optional<std::string> static_dir;
    std::string api_base_url = "/api/v1";
    std::ostream* request_log = &std::cerr;
    double heartbeat_s = 15.0;
    std::size_t threads = 128;
};

class HttpService {
public:
    HttpService(LiveTwin& twin, ServiceConfig cfg) : twin_(twin), cfg_(std::move(cfg)) { routes(); }
    ~HttpService() { stop(); }

    HttpService(const HttpService&) = delete;
    HttpService& operator=(const HttpService&) = delete;

    /// Binds and starts serving on a background thread; returns the port.
    int start() {
        if (cfg_.port == 0) {
            port_ = svr_.bind_to_any_port(cfg_.host);
            if (port_ < 0) throw Error("port_in_use", "cannot bind an HTTP port on " + cfg_.host);
        } else {
            if (!svr_.bind_to_port(cfg_.host, cfg_.port))
                throw Error("port_in_use", "HTTP port " + std::to_string(cfg_.port) + " is not available");
            port_ = cfg_.port;
        }
        thread_ = std::thread([this] { svr_.listen_after_bind(); });
        svr_.wait_until_ready();
        return port_;
    }

    void stop() {
        stopping_ = true;
        if (thread_.joinable()) {
            svr_.stop();
            thread_.join();
        }
    }

    int port() const { return port_; }
    std::uint64_t stream_clients() const { return streams_.load(); }

private:
    static void reply(httplib::Response& res, int status, const json& body) {
        res.status = status;
        res.set_content(body.dump(), "application/json");
    }
    static void fail(httplib::Response& res, const ApiError& e) { reply(res, e.http_status, e.to_json()); }

    template <class F>
    static void guarded(httplib::Response& res, F&& f) {
        try {
            f();
        } catch (const Error& e) {
            fail(res, to_api_error(e));
        } catch (const json::exception& e) {
            fail(res, ApiError{"bad_request", e.what(), 400});
        }
    }

    static std::optional<Millis> millis_param(const httplib::Request& req, const std::string& name) {
        if (!req.has_param(name)) return std::nullopt;
        auto v = parse_int(req.get_param_value(name));
        if (!v) throw Error("bad_request", "parameter " + name + " must be an integer (unix ms)");
        return v;
    }

    Millis now_ms() const { return twin_.snapshot().time_ms(); }

    void routes() {
        const auto threads = cfg_.threads;
        // httplib defaults to SO_REUSEPORT, which would let two services share a port.
        svr_.set_socket_options([](socket_t sock) {
            int yes = 1;
            ::setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, &yes, sizeof yes);
        });
        svr_.new_task_queue = [threads] { return new httplib::ThreadPool(threads); };
        svr_.set_pre_routing_handler([](const httplib::Request&, httplib::Response&) {
            request_started() = std::chrono::steady_clock::now();
            return httplib::Server::HandlerResponse::Unhandled;
        });
        svr_.set_logger([this](const httplib::Request& req, const httplib::Response& res) {
            if (!cfg_.request_log) return;
            const double ms =
                std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - request_started()).count();
            const auto wall = std::chrono::duration_cast<std::chrono::milliseconds>(
                                  std::chrono::system_clock::now().time_since_epoch())
                                  .count();
            const json line{{"ts", wall}, {"method", req.method}, {"path", req.path}, {"status", res.status},
                            {"duration_ms", ms}};
            std::lock_guard lock(log_mu_);
            *cfg_.request_log << line.dump() << '\n';
        });
        svr_.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
            std::string what = "unexpected error";
            try {
                std::rethrow_exception(ep);
            } catch (const std::exception& e) {
                what = e.what();
            } catch (...) {
            }
            fail(res, ApiError{"internal", what, 500});
        });
        svr_.set_error_handler([](const httplib::Request&, httplib::Response& res) {
            if (!res.body.empty()) return httplib::Server::HandlerResponse::Unhandled;
            fail(res, ApiError{res.status == 404 ? "not_found" : "http_error", httplib::status_message(res.status),
                               res.status});
            return httplib::Server::HandlerResponse::Handled;
        });

        svr_.Get("/api/v1/health", [](const httplib::Request&, httplib::Response& res) {
            reply(res, 200, {{"status", "ok"}, {"version", kVersion}});
        });

        svr_.Get("/api/v1/metrics/current", [this](const httplib::Request&, httplib::Response& res) {
            reply(res, 200, twin_.metrics_current());
        });

        svr_.Get("/api/v1/series", [this](const httplib::Request& req, httplib::Response& res) {
            guarded(res, [&] {
                if (!req.has_param("sensor_id") || !req.has_param("kind"))
                    throw Error("bad_request", "sensor_id and kind are required");
                const auto kind = parse_kind(req.get_param_value("kind"));
                if (!kind) throw Error("bad_kind", "unknown kind " + req.get_param_value("kind"));
                const SeriesKey key{req.get_param_value("sensor_id"), *kind};
                const Millis to = millis_param(req, "to").value_or(now_ms());
                const Millis from = millis_param(req, "from").value_or(to - 3600 * 1000);
                if (from > to) throw Error("bad_range", "query range requires from <= to");
                std::optional<double> step;
                if (req.has_param("step")) {
                    step = parse_duration(req.get_param_value("step"));
                    if (!(*step > 0.0)) throw Error("bad_step", "step must be > 0");
                }
                const auto s = twin_.store().query_range(key, from, to + 1, step);
                json pts = json::array();
                for (const auto& p : s.points) pts.push_back({{"ts", p.ts}, {"value", p.value}, {"imputed", p.imputed}});
                reply(res, 200,
                      {{"sensor_id", key.sensor_id}, {"kind", std::string(to_string(key.kind))},
                       {"unit", std::string(unit_of(key.kind))}, {"from", from}, {"to", to},
                       {"step_s", step ? json(*step) : json(nullptr)}, {"points", pts}});
            });
        });

        svr_.Get("/api/v1/forecast", [this](const httplib::Request& req, httplib::Response& res) {
            guarded(res, [&] {
                const std::string h = req.has_param("horizon") ? req.get_param_value("horizon") : "1h";
                if (h != "1h" && h != "6h" && h != "24h") throw Error("bad_horizon", "horizon must be 1h, 6h or 24h");
                const int hours = std::stoi(h);
                auto r = twin_.forecast(hours);
                if (!r) throw Error("insufficient_history", "no facility power history yet");
                auto j = r->to_json();
                j["horizon_label"] = h;
                reply(res, 200, j);
            });
        });

        svr_.Get("/api/v1/anomalies", [this](const httplib::Request& req, httplib::Response& res) {
            guarded(res, [&] {
                const Millis to = millis_param(req, "to").value_or(now_ms());
                const Millis from = millis_param(req, "from").value_or(to - 3600 * 1000);
                json scores = json::array();
                const auto names = twin_.anomaly_features();
                for (const auto& s : twin_.anomalies(from, to))
                    scores.push_back({{"ts", s.ts},
                                      {"score", s.score},
                                      {"flagged", s.flagged},
                                      {"features", json::parse(s.features_json(names).dump())}});
                reply(res, 200,
                      {{"from", from}, {"to", to}, {"threshold", twin_.config().anomaly_threshold},
                       {"trained", twin_.detector_trained()}, {"scores", scores}});
            });
        });

        svr_.Get("/api/v1/pue", [this](const httplib::Request& req, httplib::Response& res) {
            guarded(res, [&] {
                const Millis to = millis_param(req, "to").value_or(now_ms());
                const Millis from = millis_param(req, "from").value_or(to - 3600 * 1000);
                reply(res, 200, json::parse(twin_.pue(from, to).to_json().dump()));
            });
        });

        svr_.Post("/api/v1/actions", [this](const httplib::Request& req, httplib::Response& res) {
            guarded(res, [&] {
                const auto body = json::parse(req.body);
                auto [action, seq] = twin_.submit(body);
                reply(res, 200, {{"status", "accepted"}, {"action", action.to_json()}, {"seq", seq}});
            });
        });

        svr_.Post("/api/v1/scenario", [this](const httplib::Request& req, httplib::Response& res) {
            guarded(res, [&] {
                const auto body = req.body.empty() ? json::object() : json::parse(req.body);
                reply(res, 200, json::parse(twin_.what_if(body).to_json().dump()));
            });
        });

        svr_.Get("/api/v1/events", [this](const httplib::Request& req, httplib::Response& res) { stream(req, res); });

        svr_.Get("/config.json", [this](const httplib::Request&, httplib::Response& res) {
            reply(res, 200, {{"api_base_url", cfg_.api_base_url}});
        });
        if (cfg_.static_dir) {
            if (!svr_.set_mount_point("/", *cfg_.static_dir))
                throw Error("config", "static asset directory not found: " + *cfg_.static_dir);
        }
    }

    void stream(const httplib::Request& req, httplib::Response& res) {
        auto& hub = twin_.events();
        std::uint64_t cursor = hub.last_seq();
        std::string resume = req.get_header_value("Last-Event-ID");
        if (resume.empty() && req.has_param("last_event_id")) resume = req.get_param_value("last_event_id");
        if (!resume.empty()) {
            auto v = parse_int(resume);
            if (!v || *v < 0) {
                fail(res, ApiError{"bad_request", "Last-Event-ID must be a sequence number", 400});
                return;
            }
            cursor = std::min<std::uint64_t>(static_cast<std::uint64_t>(*v), hub.last_seq());
            // Older than the retained buffer: resume from the oldest event kept.
            if (cursor + 1 < hub.oldest_seq()) cursor = hub.oldest_seq() - 1;
        }
        res.set_header("Cache-Control", "no-cache");
        auto state = std::make_shared<StreamState>(StreamState{cursor, std::chrono::steady_clock::now()});
        ++streams_;
        res.set_chunked_content_provider(
            "text/event-stream",
            [this, state, &hub](std::size_t, httplib::DataSink& sink) {
                const auto heartbeat = std::chrono::duration<double>(cfg_.heartbeat_s);
                while (!stopping_) {
                    if (!sink.is_writable()) return false;
                    auto batch = hub.since(state->cursor);
                    if (batch.overflow) return false;  // slow consumer fell out of the buffer
                    if (!batch.events.empty()) {
                        std::string out;
                        for (const auto& e : batch.events) out += format_sse(e);
                        if (!sink.write(out.data(), out.size())) return false;
                        state->cursor = batch.events.back().seq;
                        state->last_write = std::chrono::steady_clock::now();
                        return true;
                    }
                    if (std::chrono::steady_clock::now() - state->last_write >= heartbeat) {
                        static constexpr char kBeat[] = ": heartbeat\n\n";
                        if (!sink.write(kBeat, sizeof kBeat - 1)) return false;
                        state->last_write = std::chrono::steady_clock::now();
                        return true;
                    }
                    hub.wait_for(state->cursor, std::chrono::milliseconds(200));
                }
                return false;
            },
            [this](bool) { --streams_; });
    }

    struct StreamState {
        std::uint64_t cursor;
        std::chrono::steady_clock::time_point last_write;
    };

    static std::chrono::steady_clock::time_point& request_started() {
        thread_local std::chrono::steady_clock::time_point t;
        return t;
    }

    LiveTwin& twin_;
    ServiceConfig cfg_;
    httplib::Server svr_;
    std::thread thread_;
    int port_ = -1;
    std::atomic<bool> stopping_{false};
    std::atomic<std::uint64_t> streams_{0};
    std::mutex log_mu_;
};

}  // namespace dctwin::service
