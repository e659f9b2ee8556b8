#pragma once

// Scaled model wrapper: recursive multi-step prediction, evaluation metrics
// and JSON checkpoints.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "dctwin/forecast/dataset.hpp"
#include "dctwin/forecast/linreg.hpp"
#include "dctwin/forecast/lstm.hpp"

namespace dctwin::forecast {

inline constexpr int kCheckpointVersion = 1;

enum class ModelKind { lstm, linreg };

inline std::string to_string(ModelKind k) { return k == ModelKind::lstm ? "lstm" : "linreg"; }

inline ModelKind parse_model_kind(const std::string& s) {
    if (s == "lstm") return ModelKind::lstm;
    if (s == "linreg") return ModelKind::linreg;
    throw Error("config", "unknown model kind: " + s);
}

struct ForecastResult {
    std::string model;
    SeriesKey target;
    int horizon = 0;
    double step_s = 3600.0;
    Millis issued_at = 0;  // timestamp of the last observed input row
    std::vector<Millis> ts;
    std::vector<double> predictions;  // original units, one per step ahead

    double at_horizon() const { return predictions.back(); }

    nlohmann::json to_json() const {
        return {{"model", model},
                {"target", {{"sensor_id", target.sensor_id}, {"kind", std::string(dctwin::to_string(target.kind))}}},
                {"horizon", horizon},
                {"step_s", step_s},
                {"issued_at", issued_at},
                {"ts", ts},
                {"predictions", predictions}};
    }
};

struct EvalReport {
    std::string model;
    int horizon = 0;
    double mae = 0.0;
    std::optional<double> mape;  // percent; absent when any actual is zero
    double rmse = 0.0;
    std::size_t n = 0;

    nlohmann::json to_json() const {
        nlohmann::json j{{"model", model}, {"horizon", horizon}, {"mae", mae}, {"rmse", rmse}, {"n", n}};
        j["mape"] = mape ? nlohmann::json(*mape) : nlohmann::json(nullptr);
        return j;
    }
};

inline EvalReport compute_metrics(const std::vector<double>& actual, const std::vector<double>& predicted) {
    if (actual.empty() || actual.size() != predicted.size())
        throw Error("empty_dataset", "metrics need equally sized, non-empty vectors");
    EvalReport r;
    r.n = actual.size();
    double abs_sum = 0.0, sq_sum = 0.0, pct_sum = 0.0;
    bool zero_actual = false;
    for (std::size_t i = 0; i < actual.size(); ++i) {
        const double e = actual[i] - predicted[i];
        abs_sum += std::abs(e);
        sq_sum += e * e;
        if (actual[i] == 0.0) zero_actual = true;
        else pct_sum += std::abs(e) / std::abs(actual[i]);
    }
    const auto n = static_cast<double>(r.n);
    r.mae = abs_sum / n;
    r.rmse = std::sqrt(sq_sum / n);
    if (!zero_actual) r.mape = 100.0 * pct_sum / n;
    return r;
}

/// Train/test split at a timestamp boundary: training windows end (target
/// included) strictly before it, test windows start at or after it.
struct Split {
    Dataset train;
    Dataset test;
};

inline Split chronological_split(const Dataset& d, const WindowSpec& spec, double train_fraction) {
    Split s;
    s.train.target = s.test.target = d.target;
    if (d.empty()) return s;
    const auto first = d.input_end.front();
    const auto last = d.target_ts.back();
    const auto boundary = first + static_cast<Millis>(std::floor(static_cast<double>(last - first) * train_fraction));
    const auto step = static_cast<Millis>(std::llround(spec.step_s * 1000.0));
    for (std::size_t i = 0; i < d.size(); ++i) {
        const Millis input_start = d.input_end[i] - static_cast<Millis>(spec.input_len - 1) * step;
        Dataset* dst = nullptr;
        if (d.target_ts[i] < boundary) dst = &s.train;
        else if (input_start >= boundary) dst = &s.test;
        else continue;  // straddles the boundary
        dst->X.push_back(d.X[i]);
        dst->y.push_back(d.y[i]);
        dst->input_end.push_back(d.input_end[i]);
        dst->target_ts.push_back(d.target_ts[i]);
    }
    return s;
}

class Forecaster {
public:
    Forecaster() = default;

    static Forecaster from_linreg(WindowSpec spec, std::vector<SeriesKey> features, std::size_t target, Scaler scaler,
                                  LinRegModel model) {
        Forecaster f(ModelKind::linreg, spec, std::move(features), target, std::move(scaler));
        f.linreg_ = std::move(model);
        return f;
    }
    static Forecaster from_lstm(WindowSpec spec, std::vector<SeriesKey> features, std::size_t target, Scaler scaler,
                                LstmModel model) {
        Forecaster f(ModelKind::lstm, spec, std::move(features), target, std::move(scaler));
        f.lstm_ = std::move(model);
        return f;
    }

    bool trained() const { return linreg_.has_value() || lstm_.has_value(); }
    ModelKind kind() const { return kind_; }
    const WindowSpec& window() const { return window_; }
    const std::vector<SeriesKey>& features() const { return features_; }
    std::size_t target() const { return target_; }
    const Scaler& scaler() const { return scaler_; }
    const LstmModel* lstm() const { return lstm_ ? &*lstm_ : nullptr; }
    const LinRegModel* linreg() const { return linreg_ ? &*linreg_ : nullptr; }
    std::string name() const { return to_string(kind_); }

    /// One step ahead, original units in and out.
    double predict_next(const Matrix& window) const {
        if (!trained()) throw Error("untrained", "forecaster has no trained model");
        if (window.rows() != window_.input_len || window.cols() != static_cast<Eigen::Index>(features_.size()))
            throw Error("shape", "window shape does not match (input_len, features)");
        const Matrix scaled = scaler_.transform(window);
        const double out = lstm_ ? lstm_predict(*lstm_, scaled) : linreg_->predict(scaled);
        return scaler_.inverse(out, target_);
    }

    /// Recursive forecast: each prediction becomes the newest target value,
    /// other features repeat their last observed value.
    ForecastResult predict_horizon(const Matrix& recent, int horizon, Millis last_ts = 0) const {
        if (!trained()) throw Error("untrained", "forecaster has no trained model");
        if (horizon < 1) throw Error("domain", "horizon must be >= 1");
        ForecastResult r;
        r.model = name();
        r.target = features_.at(target_);
        r.horizon = horizon;
        r.step_s = window_.step_s;
        r.issued_at = last_ts;
        const auto step_ms = static_cast<Millis>(std::llround(window_.step_s * 1000.0));
        Matrix w = recent;
        for (int k = 1; k <= horizon; ++k) {
            const double next = predict_next(w);
            r.predictions.push_back(next);
            r.ts.push_back(last_ts + k * step_ms);
            if (k == horizon) break;
            const Eigen::Index L = w.rows();
            Eigen::RowVectorXd row = w.row(L - 1);
            row(static_cast<Eigen::Index>(target_)) = next;
            if (L > 1) w.topRows(L - 1) = w.bottomRows(L - 1).eval();
            w.row(L - 1) = row;
        }
        return r;
    }

    nlohmann::json to_json() const {
        if (!trained()) throw Error("untrained", "cannot checkpoint an untrained forecaster");
        nlohmann::json feats = nlohmann::json::array();
        for (const auto& f : features_)
            feats.push_back({{"sensor_id", f.sensor_id}, {"kind", std::string(dctwin::to_string(f.kind))}});
        auto vec = [](const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); };
        nlohmann::json j{{"format_version", kCheckpointVersion},
                         {"model", name()},
                         {"window", {{"input_len", window_.input_len}, {"step_s", window_.step_s}, {"horizon", window_.horizon}}},
                         {"features", feats},
                         {"target", target_},
                         {"scaler", {{"min", vec(scaler_.min)}, {"max", vec(scaler_.max)}}}};
        if (lstm_) {
            const auto& m = *lstm_;
            const Eigen::Index H = m.hidden_dim();
            // Per-gate blocks, each row-major, gate order i, f, o, g.
            nlohmann::json params;
            const char* gates[] = {"i", "f", "o", "g"};
            for (Eigen::Index k = 0; k < 4; ++k) {
                RowMajorMatrix Wk = m.W().middleRows(k * H, H);
                RowMajorMatrix Uk = m.U().middleRows(k * H, H);
                params[std::string("W_") + gates[k]] = std::vector<double>(Wk.data(), Wk.data() + Wk.size());
                params[std::string("U_") + gates[k]] = std::vector<double>(Uk.data(), Uk.data() + Uk.size());
                params[std::string("b_") + gates[k]] = vec(m.b().segment(k * H, H));
            }
            params["w_out"] = vec(m.w_out());
            params["b_out"] = m.b_out();
            j["shapes"] = {{"input_dim", m.input_dim()}, {"hidden_dim", m.hidden_dim()}};
            j["seed"] = m.seed();
            j["params"] = params;
        } else {
            j["shapes"] = {{"n_weights", linreg_->weights.size()}};
            j["seed"] = 0;
            j["params"] = {{"weights", vec(linreg_->weights)}, {"bias", linreg_->bias}};
        }
        return j;
    }

    static Forecaster from_json(const nlohmann::json& j) {
        try {
            if (j.at("format_version").get<int>() != kCheckpointVersion)
                throw Error("checkpoint", "unsupported checkpoint format version");
            WindowSpec spec;
            spec.input_len = j.at("window").at("input_len").get<int>();
            spec.step_s = j.at("window").at("step_s").get<double>();
            spec.horizon = j.at("window").at("horizon").get<int>();
            std::vector<SeriesKey> feats;
            for (const auto& f : j.at("features"))
                feats.push_back(SeriesKey{f.at("sensor_id").get<std::string>(), kind_or_throw(f.at("kind").get<std::string>())});
            const auto target = j.at("target").get<std::size_t>();
            auto to_vec = [](const nlohmann::json& a) {
                auto v = a.get<std::vector<double>>();
                return Vector(Eigen::Map<Vector>(v.data(), static_cast<Eigen::Index>(v.size())));
            };
            Scaler scaler{to_vec(j.at("scaler").at("min")), to_vec(j.at("scaler").at("max"))};
            const auto kind = parse_model_kind(j.at("model").get<std::string>());
            const auto& p = j.at("params");
            if (kind == ModelKind::linreg) {
                LinRegModel m{to_vec(p.at("weights")), p.at("bias").get<double>()};
                return from_linreg(spec, feats, target, scaler, m);
            }
            const int D = j.at("shapes").at("input_dim").get<int>();
            const int H = j.at("shapes").at("hidden_dim").get<int>();
            LstmModel m(D, H, j.value("seed", std::uint64_t{0}));
            const char* gates[] = {"i", "f", "o", "g"};
            for (Eigen::Index k = 0; k < 4; ++k) {
                auto Wk = p.at(std::string("W_") + gates[k]).get<std::vector<double>>();
                auto Uk = p.at(std::string("U_") + gates[k]).get<std::vector<double>>();
                auto bk = p.at(std::string("b_") + gates[k]).get<std::vector<double>>();
                if (Wk.size() != static_cast<std::size_t>(H * D) || Uk.size() != static_cast<std::size_t>(H * H) ||
                    bk.size() != static_cast<std::size_t>(H))
                    throw Error("checkpoint", "LSTM parameter block has the wrong size");
                m.W().middleRows(k * H, H) = Eigen::Map<RowMajorMatrix>(Wk.data(), H, D);
                m.U().middleRows(k * H, H) = Eigen::Map<RowMajorMatrix>(Uk.data(), H, H);
                m.b().segment(k * H, H) = Eigen::Map<Vector>(bk.data(), H);
            }
            m.w_out() = to_vec(p.at("w_out"));
            m.b_out() = p.at("b_out").get<double>();
            return from_lstm(spec, feats, target, scaler, m);
        } catch (const nlohmann::json::exception& e) {
            throw Error("checkpoint", std::string("malformed checkpoint: ") + e.what());
        }
    }

    void save(const std::string& path) const {
        std::ofstream out(path);
        if (!out) throw Error("io", "cannot write checkpoint " + path);
        out << to_json().dump(1) << '\n';
    }

    static Forecaster load(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw Error("io", "cannot open checkpoint " + path);
        nlohmann::json j;
        try {
            in >> j;
        } catch (const nlohmann::json::exception& e) {
            throw Error("checkpoint", std::string("checkpoint is not JSON: ") + e.what());
        }
        return from_json(j);
    }

private:
    Forecaster(ModelKind kind, WindowSpec spec, std::vector<SeriesKey> features, std::size_t target, Scaler scaler)
        : kind_(kind), window_(spec), features_(std::move(features)), target_(target), scaler_(std::move(scaler)) {}

    ModelKind kind_ = ModelKind::linreg;
    WindowSpec window_;
    std::vector<SeriesKey> features_;
    std::size_t target_ = 0;
    Scaler scaler_;
    std::optional<LinRegModel> linreg_;
    std::optional<LstmModel> lstm_;
};

struct TrainedForecaster {
    Forecaster forecaster;
    std::vector<EpochLoss> history;  // LSTM only
};

/// Fits the scaler on the training windows and trains a one-step model.
inline TrainedForecaster train_forecaster(const Dataset& train, const WindowSpec& spec,
                                          const std::vector<SeriesKey>& features, ModelKind kind,
                                          const TrainConfig& cfg = {}) {
    if (train.empty()) throw Error("empty_dataset", "no training windows");
    Scaler scaler = Scaler::fit(train);
    std::vector<Matrix> X;
    std::vector<double> y;
    X.reserve(train.size());
    for (std::size_t i = 0; i < train.size(); ++i) {
        X.push_back(scaler.transform(train.X[i]));
        y.push_back(scaler.transform(train.y[i], train.target));
    }
    WindowSpec one = spec;
    one.horizon = 1;
    if (kind == ModelKind::linreg)
        return {Forecaster::from_linreg(one, features, train.target, scaler, fit_linreg(X, y, cfg.ridge)), {}};
    auto r = train_lstm(X, y, cfg);
    return {Forecaster::from_lstm(one, features, train.target, scaler, std::move(r.model)), std::move(r.history)};
}

/// Scores the recursive forecast at `horizon` against each window's actual.
inline EvalReport evaluate(const Forecaster& f, const Dataset& test, int horizon) {
    if (!f.trained()) throw Error("untrained", "forecaster has no trained model");
    if (test.empty()) throw Error("empty_dataset", "no test windows");
    std::vector<double> predicted;
    predicted.reserve(test.size());
    for (const auto& x : test.X) predicted.push_back(f.predict_horizon(x, horizon).at_horizon());
    EvalReport r = compute_metrics(test.y, predicted);
    r.model = f.name();
    r.horizon = horizon;
    return r;
}

}  // namespace dctwin::forecast
