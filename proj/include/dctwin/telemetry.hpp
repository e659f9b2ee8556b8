#pragma once

// Edge layer: sensor sampling, newline-JSON frames, topic pub/sub, bounds
// validation and epoch-aligned tumbling-window aggregation.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <limits>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "dctwin/common.hpp"
#include "dctwin/plant_sim.hpp"
#include "dctwin/rng.hpp"

namespace dctwin {

enum class SensorKind { power, temp, humidity, cpu };

inline constexpr std::array<SensorKind, 4> kAllKinds{SensorKind::power, SensorKind::temp, SensorKind::humidity,
                                                     SensorKind::cpu};

inline std::string_view to_string(SensorKind k) {
    switch (k) {
        case SensorKind::power: return "power";
        case SensorKind::temp: return "temp";
        case SensorKind::humidity: return "humidity";
        case SensorKind::cpu: return "cpu";
    }
    return "power";
}

inline std::string_view unit_of(SensorKind k) {
    switch (k) {
        case SensorKind::power: return "W";
        case SensorKind::temp: return "C";
        case SensorKind::humidity: return "%RH";
        case SensorKind::cpu: return "%";
    }
    return "W";
}

inline std::optional<SensorKind> parse_kind(std::string_view s) {
    for (auto k : kAllKinds)
        if (to_string(k) == s) return k;
    return std::nullopt;
}

inline SensorKind kind_or_throw(std::string_view s) {
    auto k = parse_kind(s);
    if (!k) throw Error("bad_kind", "unknown sensor kind: " + std::string(s));
    return *k;
}

struct TelemetryFrame {
    Millis ts = 0;
    std::string sensor_id;
    SensorKind kind = SensorKind::power;
    double value = 0.0;
    std::string unit = "W";

    bool operator==(const TelemetryFrame&) const = default;
};

inline TelemetryFrame make_frame(Millis ts, std::string sensor_id, SensorKind kind, double value) {
    return TelemetryFrame{ts, std::move(sensor_id), kind, value, std::string(unit_of(kind))};
}

// ---------------------------------------------------------------------------
// Wire format: one JSON object per line, fixed key order.

inline std::string json_number(double v) { return nlohmann::json(v).dump(); }
inline std::string json_string(std::string_view s) { return nlohmann::json(std::string(s)).dump(); }

inline std::string encode_frame_line(const TelemetryFrame& f) {
    std::string out;
    out.reserve(96);
    out += "{\"ts\":";
    out += std::to_string(f.ts);
    out += ",\"sensor_id\":";
    out += json_string(f.sensor_id);
    out += ",\"kind\":\"";
    out += to_string(f.kind);
    out += "\",\"value\":";
    out += json_number(f.value);
    out += ",\"unit\":";
    out += json_string(f.unit);
    out += "}\n";
    return out;
}

/// Alert frames reuse the frame line layout with kind "alert" plus the
/// score and the feature vector that produced it.
inline std::string encode_alert_line(Millis ts, std::string_view sensor_id, double score,
                                     const nlohmann::ordered_json& features) {
    std::string out = "{\"ts\":" + std::to_string(ts) + ",\"sensor_id\":" + json_string(sensor_id) +
                      ",\"kind\":\"alert\",\"value\":" + json_number(score) + ",\"unit\":\"\",\"score\":" +
                      json_number(score) + ",\"features\":" + features.dump() + "}\n";
    return out;
}

inline TelemetryFrame decode_frame_line(std::string_view line) {
    while (!line.empty() && (line.back() == '\n' || line.back() == '\r')) line.remove_suffix(1);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
        throw Error("bad_frame", std::string("frame is not valid JSON: ") + e.what());
    }
    try {
        TelemetryFrame f;
        f.ts = j.at("ts").get<Millis>();
        f.sensor_id = j.at("sensor_id").get<std::string>();
        f.kind = kind_or_throw(j.at("kind").get<std::string>());
        const auto& v = j.at("value");
        // Non-finite readings travel as null; validation rejects them.
        f.value = v.is_null() ? std::numeric_limits<double>::quiet_NaN() : v.get<double>();
        f.unit = j.at("unit").get<std::string>();
        return f;
    } catch (const nlohmann::json::exception& e) {
        throw Error("bad_frame", std::string("frame missing or mistyped field: ") + e.what());
    }
}

// ---------------------------------------------------------------------------
// Topics: dc/<zone>/<sensor_id>/<kind>

inline std::vector<std::string_view> split_levels(std::string_view path) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (true) {
        auto pos = path.find('/', start);
        out.push_back(path.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
        if (pos == std::string_view::npos) break;
        start = pos + 1;
    }
    return out;
}

class Topic {
public:
    static std::optional<Topic> parse(std::string_view path) {
        auto levels = split_levels(path);
        if (levels.size() != 4 || levels[0] != "dc") return std::nullopt;
        for (auto l : levels)
            if (l.empty() || l == "+" || l == "#") return std::nullopt;
        return Topic(std::string(path));
    }

    static Topic of(std::string_view zone, std::string_view sensor_id, std::string_view kind) {
        auto t = parse("dc/" + std::string(zone) + "/" + std::string(sensor_id) + "/" + std::string(kind));
        if (!t) throw Error("bad_topic", "cannot form topic from given segments");
        return *t;
    }

    const std::string& path() const { return path_; }

private:
    explicit Topic(std::string p) : path_(std::move(p)) {}
    std::string path_;
};

/// Patterns have the topic's 4 levels; "+" matches any single level.
inline bool valid_pattern(std::string_view pattern) {
    auto levels = split_levels(pattern);
    if (levels.size() != 4) return false;
    return std::all_of(levels.begin(), levels.end(), [](std::string_view l) { return !l.empty(); });
}

inline bool topic_matches(std::string_view pattern, std::string_view topic) {
    auto p = split_levels(pattern);
    auto t = split_levels(topic);
    if (p.size() != t.size()) return false;
    for (std::size_t i = 0; i < p.size(); ++i)
        if (p[i] != "+" && p[i] != t[i]) return false;
    return true;
}

// ---------------------------------------------------------------------------
// In-process broker.

struct Delivery {
    std::string topic;
    TelemetryFrame frame;
};

struct Ack {
    bool ok = true;
    std::string error;
    std::size_t delivered_to = 0;
};

inline constexpr std::size_t kDefaultSubscriberBuffer = 10000;

class Subscription {
public:
    Subscription(std::string pattern, std::size_t capacity) : pattern_(std::move(pattern)), capacity_(capacity) {}

    const std::string& pattern() const { return pattern_; }

    std::optional<Delivery> try_pop() {
        std::lock_guard lock(mu_);
        if (queue_.empty()) return std::nullopt;
        Delivery d = std::move(queue_.front());
        queue_.pop_front();
        return d;
    }

    template <class Rep, class Period>
    std::optional<Delivery> pop_for(std::chrono::duration<Rep, Period> timeout) {
        std::unique_lock lock(mu_);
        if (!cv_.wait_for(lock, timeout, [&] { return !queue_.empty() || closed_; })) return std::nullopt;
        if (queue_.empty()) return std::nullopt;
        Delivery d = std::move(queue_.front());
        queue_.pop_front();
        return d;
    }

    std::vector<Delivery> drain() {
        std::lock_guard lock(mu_);
        std::vector<Delivery> out(std::make_move_iterator(queue_.begin()), std::make_move_iterator(queue_.end()));
        queue_.clear();
        return out;
    }

    std::uint64_t delivered() const {
        std::lock_guard lock(mu_);
        return delivered_;
    }
    std::uint64_t dropped() const {
        std::lock_guard lock(mu_);
        return dropped_;
    }
    std::size_t pending() const {
        std::lock_guard lock(mu_);
        return queue_.size();
    }

    void close() {
        {
            std::lock_guard lock(mu_);
            closed_ = true;
        }
        cv_.notify_all();
    }

private:
    friend class Broker;

    void push(Delivery d) {
        {
            std::lock_guard lock(mu_);
            if (queue_.size() >= capacity_) {
                queue_.pop_front();
                ++dropped_;
            }
            queue_.push_back(std::move(d));
            ++delivered_;
        }
        cv_.notify_one();
    }

    std::string pattern_;
    std::size_t capacity_;
    mutable std::mutex mu_;
    std::condition_variable cv_;
    std::deque<Delivery> queue_;
    std::uint64_t delivered_ = 0;
    std::uint64_t dropped_ = 0;
    bool closed_ = false;
};

/// Topic-based pub/sub. Fan-out happens under one lock so every subscriber
/// observes a single publish order; a full subscriber buffer drops its
/// oldest entry and counts the loss.
class Broker {
public:
    std::shared_ptr<Subscription> subscribe(const std::string& pattern,
                                            std::size_t capacity = kDefaultSubscriberBuffer) {
        if (!valid_pattern(pattern)) throw Error("bad_topic", "malformed subscription pattern: " + pattern);
        if (capacity == 0) throw Error("config", "subscriber buffer must hold at least one frame");
        auto sub = std::make_shared<Subscription>(pattern, capacity);
        std::lock_guard lock(mu_);
        subs_.push_back(sub);
        return sub;
    }

    void unsubscribe(const std::shared_ptr<Subscription>& sub) {
        std::lock_guard lock(mu_);
        std::erase_if(subs_, [&](const auto& w) {
            auto s = w.lock();
            return !s || s == sub;
        });
        sub->close();
    }

    Ack publish(std::string_view topic, const TelemetryFrame& frame) {
        auto t = Topic::parse(topic);
        if (!t) {
            std::lock_guard lock(mu_);
            ++rejected_;
            return Ack{false, "malformed_topic", 0};
        }
        return publish(*t, frame);
    }

    Ack publish(const Topic& topic, const TelemetryFrame& frame) {
        std::lock_guard lock(mu_);
        ++published_;
        Ack ack;
        for (auto it = subs_.begin(); it != subs_.end();) {
            auto sub = it->lock();
            if (!sub) {
                it = subs_.erase(it);
                continue;
            }
            if (topic_matches(sub->pattern(), topic.path())) {
                sub->push(Delivery{topic.path(), frame});
                ++ack.delivered_to;
            }
            ++it;
        }
        return ack;
    }

    std::uint64_t published() const {
        std::lock_guard lock(mu_);
        return published_;
    }
    std::uint64_t rejected() const {
        std::lock_guard lock(mu_);
        return rejected_;
    }

private:
    mutable std::mutex mu_;
    std::vector<std::weak_ptr<Subscription>> subs_;
    std::uint64_t published_ = 0;
    std::uint64_t rejected_ = 0;
};

// ---------------------------------------------------------------------------
// Validation.

enum class RejectReason { non_finite, unit_mismatch, out_of_bounds, bad_timestamp };

inline std::string_view to_string(RejectReason r) {
    switch (r) {
        case RejectReason::non_finite: return "non_finite";
        case RejectReason::unit_mismatch: return "unit_mismatch";
        case RejectReason::out_of_bounds: return "out_of_bounds";
        case RejectReason::bad_timestamp: return "bad_timestamp";
    }
    return "out_of_bounds";
}

struct Bounds {
    double lo;
    double hi;
};

struct ValidationBounds {
    Bounds power{0.0, 10000.0};
    Bounds temp{0.0, 60.0};
    Bounds humidity{0.0, 100.0};
    Bounds cpu{0.0, 100.0};

    const Bounds& of(SensorKind k) const {
        switch (k) {
            case SensorKind::power: return power;
            case SensorKind::temp: return temp;
            case SensorKind::humidity: return humidity;
            case SensorKind::cpu: return cpu;
        }
        return power;
    }
};

struct Validated {
    bool ok = false;
    std::optional<RejectReason> reason;
    TelemetryFrame frame;
};

inline Validated validate_normalize(const TelemetryFrame& f, const ValidationBounds& bounds = {}) noexcept {
    Validated v;
    v.frame = f;
    if (!std::isfinite(f.value)) {
        v.reason = RejectReason::non_finite;
    } else if (f.unit != unit_of(f.kind)) {
        v.reason = RejectReason::unit_mismatch;
    } else if (f.ts <= 0) {
        v.reason = RejectReason::bad_timestamp;
    } else {
        const auto& b = bounds.of(f.kind);
        if (f.value < b.lo || f.value > b.hi) v.reason = RejectReason::out_of_bounds;
    }
    v.ok = !v.reason.has_value();
    return v;
}

// ---------------------------------------------------------------------------
// Sampling.

struct NoiseConfig {
    double power_rel_std = 0.005;  // class-0.5 current sensing
    double temp_std = 0.1;
    double humidity_std = 1.0;
    double cpu_std = 0.5;  // percentage points

    static NoiseConfig none() { return NoiseConfig{0.0, 0.0, 0.0, 0.0}; }
};

inline constexpr const char* kRoomSensor = "room";

/// One frame per server power and cpu, plus room temperature and humidity.
inline std::vector<TelemetryFrame> sample_sensors(const PlantState& s, const NoiseConfig& noise, std::uint64_t seed) {
    std::vector<TelemetryFrame> out;
    out.reserve(2 * s.servers.size() + 2);
    const Millis ts = s.time_ms();
    std::uint64_t counter = s.step_index * 64;
    auto gauss = [&](double std) {
        const double z = counter_gaussian(seed, counter++, 3);
        return std == 0.0 ? 0.0 : std * z;
    };
    for (const auto& sv : s.servers) {
        const double p = sv.power + gauss(noise.power_rel_std * sv.power);
        out.push_back(make_frame(ts, sv.spec.id, SensorKind::power, std::max(0.0, p)));
    }
    out.push_back(make_frame(ts, kRoomSensor, SensorKind::temp, s.room.temperature + gauss(noise.temp_std)));
    out.push_back(make_frame(ts, kRoomSensor, SensorKind::humidity,
                             std::clamp(s.room.humidity + gauss(noise.humidity_std), 0.0, 100.0)));
    for (const auto& sv : s.servers) {
        const double c = 100.0 * sv.utilization + (sv.powered_on ? gauss(noise.cpu_std) : 0.0);
        out.push_back(make_frame(ts, sv.spec.id, SensorKind::cpu, std::clamp(c, 0.0, 100.0)));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Windowed aggregation.

struct AggregateRecord {
    Millis window_start = 0;
    double window_len = 300.0;
    std::string sensor_id;
    SensorKind kind = SensorKind::power;
    double mean = 0.0;
    double min = 0.0;
    double max = 0.0;
    std::int64_t count = 0;
    std::int64_t missing = 0;

    nlohmann::json to_json() const {
        return {{"window_start", window_start}, {"window_len", window_len}, {"sensor_id", sensor_id},
                {"kind", std::string(to_string(kind))}, {"mean", mean}, {"min", min}, {"max", max},
                {"count", count}, {"missing", missing}};
    }
};

/// Epoch-aligned tumbling windows per (sensor_id, kind). A frame older than
/// the key's open window is a late drop; a repeat of the last timestamp is
/// treated as a redelivery and ignored.
class Aggregator {
public:
    explicit Aggregator(double window_len_s = 300.0, double rate_hz = 1.0)
        : window_ms_(static_cast<Millis>(std::llround(window_len_s * 1000.0))),
          window_len_s_(window_len_s),
          rate_hz_(rate_hz) {
        if (!(window_len_s > 0.0) || window_ms_ <= 0) throw Error("config", "window_len must be > 0");
        if (!(rate_hz > 0.0)) throw Error("config", "rate must be > 0");
    }

    std::int64_t expected_per_window() const { return std::llround(window_len_s_ * rate_hz_); }

    /// Returns any record closed by this frame.
    std::optional<AggregateRecord> add(const TelemetryFrame& f) {
        const auto key = std::make_pair(f.sensor_id, f.kind);
        const Millis start = floor_div(f.ts, window_ms_) * window_ms_;
        auto it = open_.find(key);
        if (it == open_.end()) {
            open_.emplace(key, Open{start, f.ts, f.value, f.value, f.value, 1});
            return std::nullopt;
        }
        Open& w = it->second;
        if (start < w.start) {
            ++late_drops_;
            return std::nullopt;
        }
        if (f.ts == w.last_ts) {
            ++duplicates_;
            return std::nullopt;
        }
        if (start == w.start) {
            w.sum += f.value;
            w.min = std::min(w.min, f.value);
            w.max = std::max(w.max, f.value);
            ++w.count;
            w.last_ts = f.ts;
            return std::nullopt;
        }
        AggregateRecord done = close(key, w);
        w = Open{start, f.ts, f.value, f.value, f.value, 1};
        return done;
    }

    /// Closes every open window (end of stream).
    std::vector<AggregateRecord> flush() {
        std::vector<AggregateRecord> out;
        for (auto& [key, w] : open_) out.push_back(close(key, w));
        open_.clear();
        return out;
    }

    std::uint64_t late_drops() const { return late_drops_; }
    std::uint64_t duplicates() const { return duplicates_; }

private:
    struct Open {
        Millis start;
        Millis last_ts;
        double sum;
        double min;
        double max;
        std::int64_t count;
    };

    static Millis floor_div(Millis a, Millis b) {
        Millis q = a / b;
        if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
        return q;
    }

    AggregateRecord close(const std::pair<std::string, SensorKind>& key, const Open& w) const {
        AggregateRecord r;
        r.window_start = w.start;
        r.window_len = window_len_s_;
        r.sensor_id = key.first;
        r.kind = key.second;
        r.mean = std::clamp(w.sum / static_cast<double>(w.count), w.min, w.max);
        r.min = w.min;
        r.max = w.max;
        r.count = w.count;
        r.missing = std::max<std::int64_t>(0, expected_per_window() - w.count);
        return r;
    }

    Millis window_ms_;
    double window_len_s_;
    double rate_hz_;
    std::map<std::pair<std::string, SensorKind>, Open> open_;
    std::uint64_t late_drops_ = 0;
    std::uint64_t duplicates_ = 0;
};

}  // namespace dctwin
