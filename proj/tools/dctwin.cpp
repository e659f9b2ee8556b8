// dctwin: operator CLI for the data-center twin.

#include <atomic>
#include <chrono>
#include <csignal>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <thread>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "dctwin/anomaly.hpp"
#include "dctwin/control.hpp"
#include "dctwin/fixture.hpp"
#include "dctwin/forecast.hpp"
#include "dctwin/plant_sim.hpp"
#include "dctwin/telemetry.hpp"
#include "dctwin/telemetry_net.hpp"
#include "dctwin/tstore.hpp"
#include "dctwin/service.hpp"  // after Eigen users (httplib)

namespace fs = std::filesystem;
using namespace dctwin;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

std::atomic<bool> g_stop{false};

void on_signal(int) { g_stop = true; }

json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("io", "cannot open " + path);
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw Error("config", path + ": " + e.what());
    }
}

void print(const ordered_json& j) { std::cout << j.dump(2) << std::endl; }

/// A plant config file, or a scenario file with "plant" and "policy" keys.
struct ScenarioFile {
    PlantConfig plant = default_plant_config();
    control::Policy policy;
};

ScenarioFile load_scenario_file(const std::string& path) {
    ScenarioFile f;
    if (path.empty()) return f;
    const auto j = read_json_file(path);
    if (j.contains("plant") || j.contains("policy")) {
        if (j.contains("plant")) f.plant = plant_config_from_json(j.at("plant"));
        if (j.contains("policy")) f.policy = control::Policy::from_json(j.at("policy"));
    } else {
        f.plant = plant_config_from_json(j);
    }
    return f;
}

const TimeSeries& find_series(const std::vector<TimeSeries>& all, const SeriesKey& key) {
    for (const auto& s : all)
        if (s.key == key) return s;
    throw Error("missing_series", "no series " + key.sensor_id + "/" + std::string(to_string(key.kind)) + " in data");
}

std::vector<SeriesKey> parse_features(const std::vector<std::string>& names) {
    std::vector<SeriesKey> out;
    for (const auto& n : names) {
        const auto slash = n.find('/');
        if (slash == std::string::npos) throw Error("config", "feature must be sensor_id/kind: " + n);
        out.push_back(SeriesKey{n.substr(0, slash), kind_or_throw(n.substr(slash + 1))});
    }
    return out;
}

std::vector<TimeSeries> select(const std::vector<TimeSeries>& all, const std::vector<SeriesKey>& keys) {
    std::vector<TimeSeries> out;
    for (const auto& k : keys) out.push_back(find_series(all, k));
    return out;
}

ordered_json report_json(const forecast::EvalReport& r) { return ordered_json::parse(r.to_json().dump()); }

// ---------------------------------------------------------------------------

int cmd_serve(const std::string& config, int http_port, int telemetry_port, const std::string& data_dir,
              double time_scale, const std::string& static_dir, bool quiet_log) {
    service::TwinConfig tc = config.empty() ? service::TwinConfig{} : service::TwinConfig::from_json(read_json_file(config));
    if (!data_dir.empty()) tc.data_dir = data_dir;
    service::LiveTwin twin(tc);

    TelemetryTcpServer ingest(twin.broker(), tc.zone);
    const int tport = ingest.start(telemetry_port);

    service::ServiceConfig sc;
    sc.port = http_port;
    if (!static_dir.empty()) sc.static_dir = static_dir;
    if (quiet_log) sc.request_log = nullptr;
    service::HttpService http(twin, sc);
    const int port = http.start();

    service::TwinClock clock(twin, time_scale);
    clock.start();
    std::cout << ordered_json{{"status", "serving"},
                              {"http_port", port},
                              {"telemetry_port", tport},
                              {"data_dir", tc.data_dir ? json(tc.data_dir->string()) : json(nullptr)},
                              {"time_scale", time_scale}}
                     .dump()
              << std::endl;

    std::signal(SIGINT, on_signal);
    std::signal(SIGTERM, on_signal);
    while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(100));
    clock.stop();
    twin.events().close();
    http.stop();
    ingest.stop();
    return 0;
}

int cmd_simulate(const std::string& config, const std::string& duration, const std::string& step, bool fixture,
                 int days, std::uint64_t seed, const std::string& out, const std::string& dump_config) {
    auto plant = load_scenario_file(config).plant;
    if (!dump_config.empty()) {
        std::ofstream o(dump_config);
        if (!o) throw Error("io", "cannot write " + dump_config);
        o << plant_config_to_json(plant).dump(2) << '\n';
    }
    if (out.empty()) return 0;
    double seconds = parse_duration(duration);
    if (fixture) {
        FixtureSpec spec;
        spec.days = days;
        spec.seed = seed;
        plant.workload = fixture_workload(spec);
        seconds = days * 86400.0;
    } else {
        plant.workload.seed = seed;
    }
    if (!(seconds >= 1.0)) throw Error("bad_duration", "duration must be at least one second");
    const auto series = simulate_feature_table(plant, seconds, parse_duration(step));
    const auto rows = write_csv(out, series);
    print({{"out", out}, {"rows", rows}, {"series", series.size()}, {"duration_s", seconds}});
    return 0;
}

int cmd_train(const std::string& model, int horizon, const std::string& data, const std::string& out,
              const std::vector<std::string>& feature_names, forecast::TrainConfig cfg, int input_len,
              const std::string& step) {
    const auto all = read_csv(data);
    if (model == "iforest") {
        const std::vector<SeriesKey> keys{kItPower, kRoomTemp, kRoomHumidity, kClusterCpu};
        const auto grid = forecast::align_features(select(all, keys), parse_duration(step));
        anomaly::Points pts;
        for (std::size_t r = 0; r < grid.valid.size(); ++r)
            if (grid.valid[r]) pts.push_back({grid.values(r, 0), grid.values(r, 1), grid.values(r, 2), grid.values(r, 3)});
        anomaly::ForestParams fp;
        fp.seed = cfg.seed;
        const auto forest = anomaly::build_forest(pts, fp, anomaly::kDefaultFeatures);
        forest.save(out);
        print({{"model", "iforest"}, {"out", out}, {"points", pts.size()}, {"trees", forest.trees.size()}});
        return 0;
    }
    const auto kind = forecast::parse_model_kind(model);
    const auto keys = feature_names.empty() ? std::vector<SeriesKey>{kFacilityPower} : parse_features(feature_names);
    forecast::WindowSpec w;
    w.input_len = input_len;
    w.step_s = parse_duration(step);
    const auto bench = forecast::make_benchmark(select(all, keys), w, 0.8, std::max(horizon, 24));
    const auto t0 = std::chrono::steady_clock::now();
    auto trained = forecast::train_forecaster(bench.one_step.train, bench.window, keys, kind, cfg);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    trained.forecaster.save(out);
    ordered_json j{{"model", trained.forecaster.name()}, {"out", out},
                   {"train_windows", bench.one_step.train.size()}, {"train_seconds", secs}};
    if (!trained.history.empty()) {
        j["initial_loss"] = trained.history.front().train;
        j["final_loss"] = trained.history.back().train;
        j["final_validation_loss"] = trained.history.back().validation;
    }
    j["test"] = report_json(forecast::evaluate(trained.forecaster, bench.test_at(horizon), horizon));
    print(j);
    return 0;
}

int cmd_evaluate(const std::string& ckpt, const std::string& data, std::vector<int> horizons) {
    const auto f = forecast::Forecaster::load(ckpt);
    const auto all = read_csv(data);
    if (horizons.empty()) horizons.assign(std::begin(forecast::kHorizons), std::end(forecast::kHorizons));
    const int longest = *std::max_element(horizons.begin(), horizons.end());
    const auto bench = forecast::make_benchmark(select(all, f.features()), f.window(), 0.8, std::max(longest, 24));
    ordered_json reports = ordered_json::array();
    for (int h : horizons) reports.push_back(report_json(forecast::evaluate(f, bench.test_at(h), h)));
    print({{"model", f.name()}, {"checkpoint", ckpt}, {"origins", bench.origins.size()}, {"reports", reports}});
    return 0;
}

int cmd_scenario_run(const std::string& config, const std::string& policy, const std::string& duration,
                     std::uint64_t seed, const std::string& out, const std::string& warmup) {
    if (policy != "on" && policy != "off") throw Error("config", "--policy must be on or off");
    const auto file = load_scenario_file(config);
    control::ScenarioConfig sc;
    sc.plant = file.plant;
    sc.policy = file.policy;
    sc.policy_on = policy == "on";
    sc.duration_s = parse_duration(duration);
    sc.warmup_s = parse_duration(warmup);
    sc.seed = seed;
    const auto run = control::run_scenario(sc);
    if (!out.empty()) control::write_scenario_dir(run, out);
    auto j = run.to_json();
    if (!out.empty()) j["out"] = out;
    print(j);
    return 0;
}

int cmd_scenario_compare(const std::string& a, const std::string& b) {
    auto base = control::read_scenario_dir(a);
    auto opt = control::read_scenario_dir(b);
    if (base.policy_on && !opt.policy_on) std::swap(base, opt);
    auto r = control::compare_reports(base.report, opt.report, base.workload_hash, opt.workload_hash);
    r.actions = opt.actions;
    auto j = r.to_json();
    j["action_count"] = opt.actions.size();
    j.erase("actions");
    print(j);
    return 0;
}

int cmd_replay(const std::string& csv, const std::string& data_dir, int telemetry_port) {
    const auto series = read_csv(csv);
    std::size_t rows = 0;
    for (const auto& s : series) rows += s.size();
    ordered_json j{{"csv", csv}, {"series", series.size()}, {"rows", rows}};
    if (!data_dir.empty()) {
        Store store{fs::path(data_dir)};
        std::size_t ok = 0, skipped = 0;
        for (const auto& s : series)
            for (const auto& p : s.points)
                (store.append(s.key, p.ts, p.value, p.imputed) == AppendStatus::ok ? ok : skipped)++;
        store.flush();
        j["data_dir"] = data_dir;
        j["appended"] = ok;
        j["skipped"] = skipped;
    }
    if (telemetry_port > 0) {
        TelemetryTcpClient client("127.0.0.1", telemetry_port);
        std::size_t sent = 0;
        for (const auto& s : series)
            for (const auto& p : s.points) {
                client.send_line(encode_frame_line(make_frame(p.ts, s.key.sensor_id, s.key.kind, p.value)));
                ++sent;
            }
        j["sent"] = sent;
    }
    print(j);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Data-center digital twin: simulation, forecasting, anomaly detection and control"};
    app.set_version_flag("--version", kVersion);
    app.require_subcommand(1);

    std::string config, data_dir, static_dir;
    int http_port = service::kDefaultHttpPort, telemetry_port = kDefaultTelemetryPort;
    double time_scale = 1.0;
    bool quiet = false;
    auto* serve = app.add_subcommand("serve", "Run the live twin behind the HTTP API");
    serve->add_option("--config", config, "Twin config JSON");
    serve->add_option("--http-port", http_port, "HTTP port (0 picks a free port)")->envname("DCTWIN_HTTP_PORT");
    serve->add_option("--telemetry-port", telemetry_port, "Telemetry TCP port (0 picks a free port)");
    serve->add_option("--data-dir", data_dir, "Series and action-log directory")->envname("DCTWIN_DATA_DIR");
    serve->add_option("--time-scale", time_scale, "Simulated seconds per wall second");
    serve->add_option("--static-dir", static_dir, "Console asset bundle served at /");
    serve->add_flag("--quiet", quiet, "No request log on stderr");

    std::string duration = "24h", step = "1h", out, dump_config;
    bool fixture = false;
    int days = 30;
    std::uint64_t seed = 2024;
    auto* simulate = app.add_subcommand("simulate", "Simulate the plant and write a feature CSV");
    simulate->add_option("--config", config, "Plant config JSON");
    simulate->add_option("--duration", duration, "Simulated duration (e.g. 24h)");
    simulate->add_option("--step", step, "Aggregation step of the CSV");
    simulate->add_flag("--fixture", fixture, "Use the forecasting fixture workload");
    simulate->add_option("--days", days, "Fixture length in days");
    simulate->add_option("--seed", seed, "Workload seed");
    simulate->add_option("--out", out, "Output CSV");
    simulate->add_option("--dump-config", dump_config, "Write the resolved plant config JSON");

    std::string model = "lstm", data;
    int horizon = 1, input_len = 24;
    std::vector<std::string> features;
    forecast::TrainConfig tc;
    auto* train = app.add_subcommand("train", "Train a forecaster (lstm|linreg) or an anomaly forest (iforest)");
    train->add_option("--model", model, "lstm, linreg or iforest")->check(CLI::IsMember({"lstm", "linreg", "iforest"}));
    train->add_option("--horizon", horizon, "Horizon (steps) scored on the test split");
    train->add_option("--data", data, "Feature CSV")->required();
    train->add_option("--out", out, "Checkpoint path")->required();
    train->add_option("--features", features, "sensor_id/kind list; first is the target");
    train->add_option("--epochs", tc.epochs);
    train->add_option("--lr", tc.lr);
    train->add_option("--batch", tc.batch);
    train->add_option("--hidden", tc.hidden_dim);
    train->add_option("--seed", tc.seed);
    train->add_option("--input-len", input_len);
    train->add_option("--step", step, "Grid step of the CSV");

    std::string ckpt;
    std::vector<int> horizons;
    auto* evaluate = app.add_subcommand("evaluate", "Score a forecaster checkpoint at several horizons");
    evaluate->add_option("--ckpt", ckpt, "Checkpoint")->required();
    evaluate->add_option("--data", data, "Feature CSV")->required();
    evaluate->add_option("--horizons", horizons, "Horizons in steps (default 1 6 24)");

    auto* scenario = app.add_subcommand("scenario", "Baseline vs. policy scenario harness");
    scenario->require_subcommand(1);
    std::string policy = "on", warmup = "24h";
    std::uint64_t scenario_seed = 7;
    auto* run = scenario->add_subcommand("run", "Run one scenario and write its report directory");
    run->add_option("--config", config, "Plant or scenario config JSON");
    run->add_option("--policy", policy, "on|off")->check(CLI::IsMember({"on", "off"}));
    run->add_option("--duration", duration, "Accounted duration");
    run->add_option("--warmup", warmup, "Policy-off warm-up before accounting");
    run->add_option("--seed", scenario_seed);
    run->add_option("--out", out, "Report directory");
    std::string dir_a, dir_b;
    auto* compare = scenario->add_subcommand("compare", "Compare two scenario report directories");
    compare->add_option("baseline", dir_a)->required();
    compare->add_option("optimized", dir_b)->required();

    std::string csv;
    int replay_port = 0;
    auto* replay = app.add_subcommand("replay", "Load a CSV into a store or stream it to a running twin");
    replay->add_option("--csv", csv, "Input CSV")->required();
    replay->add_option("--data-dir", data_dir, "Store directory")->envname("DCTWIN_DATA_DIR");
    replay->add_option("--telemetry-port", replay_port, "Send rows as frame lines to this telemetry port");

    CLI11_PARSE(app, argc, argv);
    try {
        if (*serve) return cmd_serve(config, http_port, telemetry_port, data_dir, time_scale, static_dir, quiet);
        if (*simulate) return cmd_simulate(config, duration, step, fixture, days, seed, out, dump_config);
        if (*train) return cmd_train(model, horizon, data, out, features, tc, input_len, step);
        if (*evaluate) return cmd_evaluate(ckpt, data, horizons);
        if (*run) return cmd_scenario_run(config, policy, duration, scenario_seed, out, warmup);
        if (*compare) return cmd_scenario_compare(dir_a, dir_b);
        if (*replay) return cmd_replay(csv, data_dir, replay_port);
    } catch (const Error& e) {
        std::cerr << json{{"error", e.code()}, {"message", e.what()}}.dump() << std::endl;
        return 2;
    }
    return 1;
}
