#pragma once

// Time-series persistence: per-key append-only segment files behind an
// in-memory index, range queries with mean downsampling, linear gap
// imputation, and CSV import/export.

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "dctwin/common.hpp"
#include "dctwin/telemetry.hpp"

namespace dctwin {

struct SeriesKey {
    std::string sensor_id;
    SensorKind kind = SensorKind::power;

    auto operator<=>(const SeriesKey&) const = default;

    std::string str() const { return sensor_id + "/" + std::string(to_string(kind)); }
};

struct Point {
    Millis ts = 0;
    double value = 0.0;
    bool imputed = false;

    bool operator==(const Point&) const = default;
};

struct TimeSeries {
    SeriesKey key;
    std::vector<Point> points;

    bool operator==(const TimeSeries&) const = default;
    bool empty() const { return points.empty(); }
    std::size_t size() const { return points.size(); }
};

enum class AppendStatus { ok, out_of_order, non_finite };

inline std::string format_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

inline std::optional<double> parse_double(std::string_view s) {
    double v = 0.0;
    auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) return std::nullopt;
    return v;
}

inline std::optional<Millis> parse_int(std::string_view s) {
    Millis v = 0;
    auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) return std::nullopt;
    return v;
}

// ---------------------------------------------------------------------------
// Series operations that do not need a store.

/// Mean of each step-wide bucket, buckets aligned to `from`. Bucket
/// timestamps are bucket starts; a bucket is imputed only if all its
/// points were.
inline TimeSeries downsample(const TimeSeries& s, Millis from, double step_s) {
    if (!(step_s > 0.0)) throw Error("bad_step", "downsample step must be > 0");
    const auto step_ms = static_cast<Millis>(std::llround(step_s * 1000.0));
    TimeSeries out{s.key, {}};
    std::size_t i = 0;
    while (i < s.points.size()) {
        const Millis bucket = (s.points[i].ts - from) / step_ms;
        double sum = 0.0;
        std::size_t n = 0;
        bool all_imputed = true;
        while (i < s.points.size() && (s.points[i].ts - from) / step_ms == bucket) {
            sum += s.points[i].value;
            all_imputed = all_imputed && s.points[i].imputed;
            ++n;
            ++i;
        }
        out.points.push_back(Point{from + bucket * step_ms, sum / static_cast<double>(n), all_imputed});
    }
    return out;
}

struct Gap {
    Millis from = 0;  // last real point before the gap
    Millis to = 0;    // first real point after it
};

struct ImputeResult {
    TimeSeries series;
    std::vector<Gap> open_gaps;
    std::size_t imputed = 0;
};

/// Fills interior gaps no longer than max_gap by linear interpolation on the
/// cadence grid anchored at the point before the gap. Longer gaps are left
/// open and reported.
inline ImputeResult impute_gaps(const TimeSeries& s, double max_gap_s, double cadence_s) {
    if (!(cadence_s > 0.0)) throw Error("domain", "cadence must be > 0");
    const auto cadence = static_cast<Millis>(std::llround(cadence_s * 1000.0));
    const auto max_gap = static_cast<Millis>(std::llround(max_gap_s * 1000.0));
    ImputeResult r;
    r.series.key = s.key;
    r.series.points.reserve(s.points.size());
    for (std::size_t i = 0; i < s.points.size(); ++i) {
        r.series.points.push_back(s.points[i]);
        if (i + 1 == s.points.size()) break;
        const Point& a = s.points[i];
        const Point& b = s.points[i + 1];
        const Millis span = b.ts - a.ts;
        if (span <= cadence) continue;
        if (span > max_gap) {
            r.open_gaps.push_back(Gap{a.ts, b.ts});
            continue;
        }
        for (Millis t = a.ts + cadence; t < b.ts; t += cadence) {
            const double w = static_cast<double>(t - a.ts) / static_cast<double>(span);
            r.series.points.push_back(Point{t, a.value + w * (b.value - a.value), true});
            ++r.imputed;
        }
    }
    return r;
}

// ---------------------------------------------------------------------------
// CSV (header ts_ms,sensor_id,kind,value,unit,imputed; RFC-4180 quoting).

inline constexpr std::string_view kCsvHeader = "ts_ms,sensor_id,kind,value,unit,imputed";

inline std::string csv_field(std::string_view s) {
    if (s.find_first_of(",\"\r\n") == std::string_view::npos) return std::string(s);
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    out += '"';
    return out;
}

inline void write_csv_rows(std::ostream& out, const TimeSeries& s) {
    const std::string id = csv_field(s.key.sensor_id);
    const auto kind = to_string(s.key.kind);
    const std::string unit = csv_field(unit_of(s.key.kind));
    for (const auto& p : s.points)
        out << p.ts << ',' << id << ',' << kind << ',' << format_double(p.value) << ',' << unit << ','
            << (p.imputed ? '1' : '0') << "\r\n";
}

/// Splits one logical CSV record, reading more physical lines from `in`
/// when a quoted field spans line breaks.
inline std::optional<std::vector<std::string>> read_csv_record(std::istream& in, std::size_t& line_no) {
    std::string line;
    if (!std::getline(in, line)) return std::nullopt;
    ++line_no;
    std::vector<std::string> fields(1);
    bool quoted = false;
    for (std::size_t i = 0;; ++i) {
        if (i == line.size()) {
            if (!quoted) break;
            std::string next;
            if (!std::getline(in, next)) throw Error("csv", "line " + std::to_string(line_no) + ": unterminated quote");
            ++line_no;
            fields.back() += '\n';
            line = std::move(next);
            i = static_cast<std::size_t>(-1);
            continue;
        }
        const char c = line[i];
        if (quoted) {
            if (c == '"') {
                if (i + 1 < line.size() && line[i + 1] == '"') {
                    fields.back() += '"';
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                fields.back() += c;
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            fields.emplace_back();
        } else if (c == '\r' && i + 1 == line.size()) {
            // CRLF terminator
        } else {
            fields.back() += c;
        }
    }
    return fields;
}

/// Parses a CSV file into series grouped by key, in file order.
inline std::vector<TimeSeries> read_csv(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("io", "cannot open " + path);
    std::size_t line_no = 0;
    auto header = read_csv_record(in, line_no);
    if (!header) throw Error("csv", "line 1: empty file");
    std::string joined;
    for (std::size_t i = 0; i < header->size(); ++i) joined += (i ? "," : "") + (*header)[i];
    if (joined != kCsvHeader) throw Error("csv", "line 1: unexpected header '" + joined + "'");

    std::vector<TimeSeries> out;
    std::map<SeriesKey, std::size_t> index;
    while (true) {
        const std::size_t record_line = line_no + 1;
        auto rec = read_csv_record(in, line_no);
        if (!rec) break;
        if (rec->size() == 1 && (*rec)[0].empty()) continue;
        auto fail = [&](const std::string& what) {
            throw Error("csv", "line " + std::to_string(record_line) + ": " + what);
        };
        if (rec->size() != 6) fail("expected 6 fields, got " + std::to_string(rec->size()));
        const auto& f = *rec;
        auto ts = parse_int(f[0]);
        if (!ts) fail("ts_ms is not an integer");
        if (f[1].empty()) fail("empty sensor_id");
        auto kind = parse_kind(f[2]);
        if (!kind) fail("unknown kind '" + f[2] + "'");
        auto value = parse_double(f[3]);
        if (!value || !std::isfinite(*value)) fail("value is not a finite number");
        if (f[4] != unit_of(*kind)) fail("unit '" + f[4] + "' does not match kind");
        if (f[5] != "0" && f[5] != "1") fail("imputed must be 0 or 1");
        SeriesKey key{f[1], *kind};
        auto [it, inserted] = index.try_emplace(key, out.size());
        if (inserted) out.push_back(TimeSeries{key, {}});
        auto& pts = out[it->second].points;
        if (!pts.empty() && pts.back().ts >= *ts) fail("timestamps must strictly increase per series");
        pts.push_back(Point{*ts, *value, f[5] == "1"});
    }
    return out;
}

inline std::size_t write_csv(const std::string& path, const std::vector<TimeSeries>& series) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("io", "cannot write " + path);
    out << kCsvHeader << "\r\n";
    std::size_t rows = 0;
    for (const auto& s : series) {
        write_csv_rows(out, s);
        rows += s.points.size();
    }
    out.flush();
    if (!out) throw Error("io", "write failed for " + path);
    return rows;
}

// ---------------------------------------------------------------------------
// Store.

/// Thread-safe series store. With a data directory every key owns an
/// append-only segment file that is replayed on open.
class Store {
public:
    Store() = default;

    explicit Store(std::filesystem::path data_dir) : dir_(std::move(data_dir)) {
        std::filesystem::create_directories(*dir_);
        for (const auto& entry : std::filesystem::directory_iterator(*dir_))
            if (entry.path().extension() == ".seg") load_segment(entry.path());
    }

    Store(const Store&) = delete;
    Store& operator=(const Store&) = delete;

    AppendStatus append(const SeriesKey& key, Millis ts, double value, bool imputed = false) {
        if (!std::isfinite(value)) return AppendStatus::non_finite;
        std::unique_lock lock(mu_);
        auto& s = series_[key];
        if (s.key.sensor_id.empty()) s.key = key;
        if (!s.points.empty() && ts <= s.points.back().ts) return AppendStatus::out_of_order;
        if (dir_) {
            auto& out = writer(key);
            out << ts << ',' << format_double(value) << ',' << (imputed ? 1 : 0) << '\n';
            if (!out) throw Error("io_retriable", "segment write failed for " + key.str());
        }
        s.points.push_back(Point{ts, value, imputed});
        return AppendStatus::ok;
    }

    void flush() {
        std::unique_lock lock(mu_);
        for (auto& [key, w] : writers_) {
            w.flush();
            if (!w) throw Error("io_retriable", "segment flush failed for " + key.str());
        }
    }

    TimeSeries query_range(const SeriesKey& key, Millis from, Millis to, std::optional<double> step_s = {}) const {
        if (from > to) throw Error("bad_range", "query range requires from <= to");
        TimeSeries out{key, {}};
        {
            std::shared_lock lock(mu_);
            auto it = series_.find(key);
            if (it == series_.end()) return out;
            const auto& pts = it->second.points;
            auto lo = std::lower_bound(pts.begin(), pts.end(), from, [](const Point& p, Millis t) { return p.ts < t; });
            auto hi = std::lower_bound(lo, pts.end(), to, [](const Point& p, Millis t) { return p.ts < t; });
            out.points.assign(lo, hi);
        }
        if (step_s) return downsample(out, from, *step_s);
        return out;
    }

    TimeSeries series(const SeriesKey& key) const {
        std::shared_lock lock(mu_);
        auto it = series_.find(key);
        return it == series_.end() ? TimeSeries{key, {}} : it->second;
    }

    /// Copy of every series, for in-memory forks.
    std::vector<TimeSeries> snapshot() const {
        std::shared_lock lock(mu_);
        std::vector<TimeSeries> out;
        for (const auto& [k, v] : series_) out.push_back(v);
        return out;
    }

    std::vector<SeriesKey> keys() const {
        std::shared_lock lock(mu_);
        std::vector<SeriesKey> out;
        for (const auto& [k, _] : series_) out.push_back(k);
        return out;
    }

    std::optional<Point> last(const SeriesKey& key) const {
        std::shared_lock lock(mu_);
        auto it = series_.find(key);
        if (it == series_.end() || it->second.points.empty()) return std::nullopt;
        return it->second.points.back();
    }

    std::size_t export_csv(const SeriesKey& key, Millis from, Millis to, const std::string& path) const {
        return write_csv(path, {query_range(key, from, to)});
    }

    /// Appends every row of a CSV file; rows that collide with existing data
    /// (out of order) are not counted.
    std::size_t import_csv(const std::string& path) {
        std::size_t appended = 0;
        for (const auto& s : read_csv(path))
            for (const auto& p : s.points)
                if (append(s.key, p.ts, p.value, p.imputed) == AppendStatus::ok) ++appended;
        return appended;
    }

private:
    static std::string encode_name(const SeriesKey& key) {
        std::string out;
        for (unsigned char c : key.sensor_id) {
            if (std::isalnum(c) || c == '-' || c == '.') {
                out += static_cast<char>(c);
            } else {
                char buf[4];
                std::snprintf(buf, sizeof buf, "%%%02X", c);
                out += buf;
            }
        }
        return out + "__" + std::string(to_string(key.kind)) + ".seg";
    }

    static std::optional<SeriesKey> decode_name(const std::string& stem) {
        auto sep = stem.rfind("__");
        if (sep == std::string::npos) return std::nullopt;
        auto kind = parse_kind(stem.substr(sep + 2));
        if (!kind) return std::nullopt;
        std::string id;
        for (std::size_t i = 0; i < sep; ++i) {
            if (stem[i] == '%' && i + 2 < sep) {
                id += static_cast<char>(std::stoi(stem.substr(i + 1, 2), nullptr, 16));
                i += 2;
            } else {
                id += stem[i];
            }
        }
        return SeriesKey{id, *kind};
    }

    void load_segment(const std::filesystem::path& p) {
        auto key = decode_name(p.stem().string());
        if (!key) return;
        std::ifstream in(p);
        auto& s = series_[*key];
        s.key = *key;
        std::string line;
        while (std::getline(in, line)) {
            // A torn trailing record from an interrupted write has no newline
            // and fails to parse; it is ignored.
            if (in.eof()) break;
            std::string_view v(line);
            auto c1 = v.find(',');
            auto c2 = v.rfind(',');
            if (c1 == std::string_view::npos || c1 == c2) continue;
            auto ts = parse_int(v.substr(0, c1));
            auto value = parse_double(v.substr(c1 + 1, c2 - c1 - 1));
            if (!ts || !value) continue;
            if (!s.points.empty() && *ts <= s.points.back().ts) continue;
            s.points.push_back(Point{*ts, *value, v.substr(c2 + 1) == "1"});
        }
    }

    std::ofstream& writer(const SeriesKey& key) {
        auto it = writers_.find(key);
        if (it != writers_.end()) return it->second;
        std::ofstream out(*dir_ / encode_name(key), std::ios::app);
        if (!out) throw Error("io_retriable", "cannot open segment for " + key.str());
        return writers_.emplace(key, std::move(out)).first->second;
    }

    std::optional<std::filesystem::path> dir_;
    mutable std::shared_mutex mu_;
    std::map<SeriesKey, TimeSeries> series_;
    std::map<SeriesKey, std::ofstream> writers_;
};

}  // namespace dctwin
