#pragma once

// Shared error type and small numeric helpers used across the twin.

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace dctwin {

using Millis = std::int64_t;

inline constexpr const char* kVersion = "1.0.0";

/// Error carrying a stable machine-readable code ("domain", "config",
/// "out_of_order", ...) alongside the human message.
class Error : public std::runtime_error {
public:
    Error(std::string code, const std::string& message)
        : std::runtime_error(message), code_(std::move(code)) {}

    const std::string& code() const noexcept { return code_; }

private:
    std::string code_;
};

inline double clamp01(double x) { return x < 0.0 ? 0.0 : (x > 1.0 ? 1.0 : x); }

inline bool finite(double x) { return std::isfinite(x); }

/// "90", "90s", "15m", "24h", "2d" -> seconds.
inline double parse_duration(const std::string& text) {
    if (text.empty()) throw Error("bad_duration", "empty duration");
    double scale = 1.0;
    std::string num = text;
    switch (text.back()) {
        case 's': num.pop_back(); break;
        case 'm': scale = 60.0; num.pop_back(); break;
        case 'h': scale = 3600.0; num.pop_back(); break;
        case 'd': scale = 86400.0; num.pop_back(); break;
        default: break;
    }
    std::size_t used = 0;
    double v = 0.0;
    try {
        v = std::stod(num, &used);
    } catch (const std::exception&) {
        throw Error("bad_duration", "cannot parse duration '" + text + "'");
    }
    if (used != num.size() || !std::isfinite(v) || v < 0.0)
        throw Error("bad_duration", "cannot parse duration '" + text + "'");
    return v * scale;
}

// FNV-1a, used for trace and snapshot fingerprints.
class Fnv1a {
public:
    void add_bytes(const void* data, std::size_t n) {
        const auto* p = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < n; ++i) {
            hash_ ^= p[i];
            hash_ *= 1099511628211ULL;
        }
    }
    void add(double v) { add_bytes(&v, sizeof v); }
    void add(std::int64_t v) { add_bytes(&v, sizeof v); }
    void add(bool v) { unsigned char b = v ? 1 : 0; add_bytes(&b, 1); }
    void add(const std::string& s) { add_bytes(s.data(), s.size()); }
    std::uint64_t value() const { return hash_; }

private:
    std::uint64_t hash_ = 1469598103934665603ULL;
};

}  // namespace dctwin
