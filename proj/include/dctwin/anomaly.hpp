#pragma once

// Isolation Forest over per-minute telemetry feature vectors.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dctwin/common.hpp"
#include "dctwin/rng.hpp"
#include "dctwin/telemetry.hpp"

namespace dctwin::anomaly {

inline constexpr double kEulerGamma = 0.5772156649;
inline constexpr double kDefaultThreshold = 0.65;
inline constexpr const char* kAlertTopic = "dc/alerts/anomaly";
inline constexpr int kForestFormatVersion = 1;

inline double harmonic(double i) { return std::log(i) + kEulerGamma; }

/// Average unsuccessful-search path length in a BST of m points.
inline double c_factor(std::size_t m) {
    if (m <= 1) return 0.0;
    const auto md = static_cast<double>(m);
    return 2.0 * harmonic(md - 1.0) - 2.0 * (md - 1.0) / md;
}

inline int height_limit(std::size_t psi) {
    return static_cast<int>(std::ceil(std::log2(static_cast<double>(std::max<std::size_t>(psi, 1)))));
}

struct IsoNode {
    bool leaf = true;
    int feature = -1;
    double split = 0.0;
    std::int32_t left = -1;
    std::int32_t right = -1;
    std::size_t size = 0;  // leaves only
    int depth = 0;
};

/// Nodes in preorder; index 0 is the root.
struct IsoTree {
    std::vector<IsoNode> nodes;

    int depth() const {
        int d = 0;
        for (const auto& n : nodes) d = std::max(d, n.depth);
        return d;
    }

    double path_length(std::span<const double> x) const {
        std::int32_t i = 0;
        while (!nodes[static_cast<std::size_t>(i)].leaf) {
            const auto& n = nodes[static_cast<std::size_t>(i)];
            if (static_cast<std::size_t>(n.feature) >= x.size()) throw Error("shape", "point dimension mismatch");
            i = x[static_cast<std::size_t>(n.feature)] < n.split ? n.left : n.right;
        }
        const auto& leaf = nodes[static_cast<std::size_t>(i)];
        return static_cast<double>(leaf.depth) + c_factor(leaf.size);
    }
};

struct ForestParams {
    int trees = 100;
    std::size_t subsample = 256;
    std::uint64_t seed = 1;

    void validate() const {
        if (trees < 1) throw Error("config", "forest needs at least one tree");
        if (subsample < 2) throw Error("config", "subsample must be >= 2");
    }
};

using Points = std::vector<std::vector<double>>;

namespace detail {

class TreeRng {
public:
    TreeRng(std::uint64_t seed, std::uint64_t tree) : seed_(seed), tree_(tree) {}
    double uniform() { return unit_uniform(mix(seed_, counter_++, 0x1500 + tree_)); }
    std::size_t below(std::size_t n) {
        return std::min(n - 1, static_cast<std::size_t>(uniform() * static_cast<double>(n)));
    }

private:
    std::uint64_t seed_;
    std::uint64_t tree_;
    std::uint64_t counter_ = 0;
};

inline std::int32_t grow(IsoTree& t, const Points& data, std::vector<std::size_t>& idx, std::size_t lo,
                         std::size_t hi, int depth, int limit, std::size_t dims, TreeRng& rng) {
    const auto self = static_cast<std::int32_t>(t.nodes.size());
    t.nodes.push_back(IsoNode{true, -1, 0.0, -1, -1, hi - lo, depth});
    if (depth >= limit || hi - lo <= 1) return self;

    std::vector<int> splittable;
    std::vector<std::pair<double, double>> range(dims);
    for (std::size_t f = 0; f < dims; ++f) {
        double mn = data[idx[lo]][f], mx = mn;
        for (std::size_t k = lo + 1; k < hi; ++k) {
            mn = std::min(mn, data[idx[k]][f]);
            mx = std::max(mx, data[idx[k]][f]);
        }
        range[f] = {mn, mx};
        if (mx > mn) splittable.push_back(static_cast<int>(f));
    }
    if (splittable.empty()) return self;

    const int f = splittable[rng.below(splittable.size())];
    const auto [mn, mx] = range[static_cast<std::size_t>(f)];
    double split = mn + rng.uniform() * (mx - mn);
    if (!(split > mn && split < mx)) split = mn + 0.5 * (mx - mn);
    if (!(split > mn)) split = mx;  // adjacent doubles: everything below mx goes left

    auto mid_it = std::partition(idx.begin() + static_cast<std::ptrdiff_t>(lo), idx.begin() + static_cast<std::ptrdiff_t>(hi),
                                 [&](std::size_t k) { return data[k][static_cast<std::size_t>(f)] < split; });
    const auto mid = static_cast<std::size_t>(mid_it - idx.begin());

    t.nodes[static_cast<std::size_t>(self)].leaf = false;
    t.nodes[static_cast<std::size_t>(self)].feature = f;
    t.nodes[static_cast<std::size_t>(self)].split = split;
    t.nodes[static_cast<std::size_t>(self)].size = 0;
    const auto l = grow(t, data, idx, lo, mid, depth + 1, limit, dims, rng);
    const auto r = grow(t, data, idx, mid, hi, depth + 1, limit, dims, rng);
    t.nodes[static_cast<std::size_t>(self)].left = l;
    t.nodes[static_cast<std::size_t>(self)].right = r;
    return self;
}

}  // namespace detail

struct IsoForest {
    ForestParams params;
    std::size_t sample_size = 0;  // min(subsample, n)
    std::size_t dims = 0;
    std::vector<std::string> feature_names;
    std::vector<IsoTree> trees;

    bool trained() const { return !trees.empty(); }

    double mean_path_length(std::span<const double> x) const {
        if (!trained()) throw Error("untrained", "forest has no trees");
        if (x.size() != dims) throw Error("shape", "point dimension mismatch");
        double sum = 0.0;
        for (const auto& t : trees) sum += t.path_length(x);
        return sum / static_cast<double>(trees.size());
    }

    double score(std::span<const double> x) const {
        return std::exp2(-mean_path_length(x) / c_factor(sample_size));
    }

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["format_version"] = kForestFormatVersion;
        j["params"] = {{"trees", params.trees}, {"subsample", params.subsample}};
        j["seed"] = params.seed;
        j["sample_size"] = sample_size;
        j["dims"] = dims;
        j["features"] = feature_names;
        auto& out = j["trees"] = nlohmann::ordered_json::array();
        for (const auto& t : trees) {
            auto nodes = nlohmann::ordered_json::array();
            for (const auto& n : t.nodes) {
                if (n.leaf)
                    nodes.push_back({{"type", "leaf"}, {"size", n.size}});
                else
                    nodes.push_back({{"type", "split"}, {"feature", n.feature}, {"value", n.split}});
            }
            out.push_back(std::move(nodes));
        }
        return j;
    }

    static IsoForest from_json(const nlohmann::json& j) {
        try {
            if (j.at("format_version").get<int>() != kForestFormatVersion)
                throw Error("checkpoint", "unsupported forest format version");
            IsoForest f;
            f.params.trees = j.at("params").at("trees").get<int>();
            f.params.subsample = j.at("params").at("subsample").get<std::size_t>();
            f.params.seed = j.at("seed").get<std::uint64_t>();
            f.params.validate();
            f.sample_size = j.at("sample_size").get<std::size_t>();
            f.dims = j.at("dims").get<std::size_t>();
            f.feature_names = j.at("features").get<std::vector<std::string>>();
            for (const auto& jt : j.at("trees")) {
                IsoTree t;
                std::size_t pos = 0;
                std::function<std::int32_t(int)> read = [&](int depth) -> std::int32_t {
                    if (pos >= jt.size()) throw Error("checkpoint", "truncated tree");
                    const auto& n = jt[pos++];
                    const auto self = static_cast<std::int32_t>(t.nodes.size());
                    IsoNode node;
                    node.depth = depth;
                    if (n.at("type") == "leaf") {
                        node.size = n.at("size").get<std::size_t>();
                        t.nodes.push_back(node);
                        return self;
                    }
                    node.leaf = false;
                    node.feature = n.at("feature").get<int>();
                    node.split = n.at("value").get<double>();
                    if (node.feature < 0 || static_cast<std::size_t>(node.feature) >= f.dims)
                        throw Error("checkpoint", "split feature out of range");
                    t.nodes.push_back(node);
                    const auto l = read(depth + 1);
                    const auto r = read(depth + 1);
                    t.nodes[static_cast<std::size_t>(self)].left = l;
                    t.nodes[static_cast<std::size_t>(self)].right = r;
                    return self;
                };
                read(0);
                if (pos != jt.size()) throw Error("checkpoint", "trailing nodes in tree");
                f.trees.push_back(std::move(t));
            }
            if (static_cast<int>(f.trees.size()) != f.params.trees) throw Error("checkpoint", "tree count mismatch");
            return f;
        } catch (const nlohmann::json::exception& e) {
            throw Error("checkpoint", std::string("malformed forest checkpoint: ") + e.what());
        }
    }

    void save(const std::string& path) const {
        std::ofstream out(path);
        if (!out) throw Error("io", "cannot write " + path);
        out << to_json().dump() << '\n';
    }

    static IsoForest load(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw Error("io", "cannot read " + path);
        nlohmann::json j;
        try {
            in >> j;
        } catch (const nlohmann::json::exception& e) {
            throw Error("checkpoint", std::string("forest checkpoint is not JSON: ") + e.what());
        }
        return from_json(j);
    }
};

inline IsoForest build_forest(const Points& data, const ForestParams& params = {},
                              std::vector<std::string> feature_names = {}) {
    params.validate();
    if (data.size() < 2) throw Error("domain", "isolation forest needs at least 2 points");
    const std::size_t dims = data.front().size();
    if (dims == 0) throw Error("domain", "points need at least one feature");
    for (const auto& p : data) {
        if (p.size() != dims) throw Error("shape", "inconsistent point dimensions");
        for (double v : p)
            if (!std::isfinite(v)) throw Error("non_finite", "training data contains a non-finite value");
    }
    IsoForest f;
    f.params = params;
    f.dims = dims;
    f.sample_size = std::min(params.subsample, data.size());
    f.feature_names = std::move(feature_names);
    const int limit = height_limit(f.sample_size);
    std::vector<std::size_t> all(data.size());
    for (int t = 0; t < params.trees; ++t) {
        detail::TreeRng rng(params.seed, static_cast<std::uint64_t>(t));
        // Partial Fisher-Yates for a sample without replacement.
        std::iota(all.begin(), all.end(), std::size_t{0});
        for (std::size_t i = 0; i < f.sample_size; ++i) std::swap(all[i], all[i + rng.below(all.size() - i)]);
        std::vector<std::size_t> idx(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(f.sample_size));
        IsoTree tree;
        detail::grow(tree, data, idx, 0, idx.size(), 0, limit, dims, rng);
        f.trees.push_back(std::move(tree));
    }
    return f;
}

// ---------------------------------------------------------------------------
// Online detection.

inline const std::vector<std::string> kDefaultFeatures{"it_power_w", "temp_c", "humidity_rh", "cpu_pct"};

struct AnomalyScore {
    Millis ts = 0;
    double score = 0.0;
    std::vector<double> features;
    bool flagged = false;

    nlohmann::ordered_json features_json(const std::vector<std::string>& names) const {
        nlohmann::ordered_json j = nlohmann::ordered_json::object();
        for (std::size_t i = 0; i < features.size(); ++i)
            j[i < names.size() ? names[i] : "f" + std::to_string(i)] = features[i];
        return j;
    }
};

using AlertSink = std::function<void(std::string_view topic, const std::string& line, const AnomalyScore&)>;

/// Scores vectors one at a time and hands flagged ones to the sink as alert
/// lines on the alert topic.
class Detector {
public:
    explicit Detector(IsoForest forest, double threshold = kDefaultThreshold, AlertSink sink = {})
        : forest_(std::move(forest)), threshold_(threshold), sink_(std::move(sink)) {
        if (!forest_.trained()) throw Error("untrained", "detector needs a trained forest");
    }

    AnomalyScore observe(Millis ts, std::vector<double> features) {
        AnomalyScore s;
        s.ts = ts;
        s.score = forest_.score(features);
        s.features = std::move(features);
        s.flagged = s.score >= threshold_;
        ++seen_;
        if (s.flagged) {
            ++flagged_;
            if (sink_) sink_(kAlertTopic, encode_alert_line(ts, "anomaly", s.score, s.features_json(names())), s);
        }
        return s;
    }

    const IsoForest& forest() const { return forest_; }
    double threshold() const { return threshold_; }
    std::uint64_t seen() const { return seen_; }
    std::uint64_t flagged() const { return flagged_; }

private:
    const std::vector<std::string>& names() const {
        return forest_.feature_names.empty() ? kDefaultFeatures : forest_.feature_names;
    }

    IsoForest forest_;
    double threshold_;
    AlertSink sink_;
    std::uint64_t seen_ = 0;
    std::uint64_t flagged_ = 0;
};

inline std::vector<AnomalyScore> detect(const IsoForest& forest, const Points& stream, std::span<const Millis> ts = {},
                                        double threshold = kDefaultThreshold) {
    Detector d(forest, threshold);
    std::vector<AnomalyScore> out;
    out.reserve(stream.size());
    for (std::size_t i = 0; i < stream.size(); ++i)
        out.push_back(d.observe(i < ts.size() ? ts[i] : static_cast<Millis>(i), stream[i]));
    return out;
}

}  // namespace dctwin::anomaly
