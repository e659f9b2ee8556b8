#include <gtest/gtest.h>

#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include "dctwin/service.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Result {
    int status = -1;
    std::string out;
};

Result run(const std::string& args) {
    const std::string cmd = std::string(DCTWIN_CLI) + " " + args + " 2>/dev/null";
    Result r;
    FILE* p = ::popen(cmd.c_str(), "r");
    if (!p) return r;
    char buf[4096];
    std::size_t n;
    while ((n = std::fread(buf, 1, sizeof buf, p)) > 0) r.out.append(buf, n);
    const int st = ::pclose(p);
    r.status = WIFEXITED(st) ? WEXITSTATUS(st) : -1;
    return r;
}

json run_json(const std::string& args) {
    const auto r = run(args);
    EXPECT_EQ(r.status, 0) << args << "\n" << r.out;
    return json::parse(r.out);
}

class Cli : public ::testing::Test {
protected:
    void SetUp() override {
        dir = fs::temp_directory_path() / ("dctwin_cli_" + std::to_string(::getpid()) + "_" +
                                           ::testing::UnitTest::GetInstance()->current_test_info()->name());
        fs::remove_all(dir);
        fs::create_directories(dir);
    }
    void TearDown() override { fs::remove_all(dir); }
    std::string path(const std::string& name) const { return (dir / name).string(); }
    static std::string fixture() { return std::string(DCTWIN_SOURCE_DIR) + "/fixtures/forecast_30d.csv"; }

    fs::path dir;
};

}  // namespace

TEST_F(Cli, VersionAndUsageErrors) {
    const auto v = run("--version");
    EXPECT_EQ(v.status, 0);
    EXPECT_NE(v.out.find(dctwin::kVersion), std::string::npos);
    EXPECT_NE(run("").status, 0);
    EXPECT_NE(run("frobnicate").status, 0);
    EXPECT_NE(run("train --model prophet --data x --out y").status, 0);
}

TEST_F(Cli, SimulateWritesCsvAndConfig) {
    const auto j = run_json("simulate --duration 2h --step 60s --out " + path("m.csv") + " --dump-config " +
                            path("plant.json"));
    EXPECT_EQ(j["rows"], 5 * 120);
    const auto series = dctwin::read_csv(path("m.csv"));
    ASSERT_EQ(series.size(), 5u);
    for (const auto& s : series) EXPECT_EQ(s.size(), 120u);
    const auto cfg = dctwin::load_plant_config(path("plant.json"));
    EXPECT_EQ(cfg.servers.size(), 2u);
    const auto committed = dctwin::load_plant_config(std::string(DCTWIN_SOURCE_DIR) + "/fixtures/plant_default.json");
    EXPECT_EQ(dctwin::plant_config_to_json(committed), dctwin::plant_config_to_json(cfg));
}

TEST_F(Cli, TrainAndEvaluateLinearBaseline) {
    const auto ckpt = path("lr.json");
    const auto t = run_json("train --model linreg --horizon 24 --data " + fixture() + " --out " + ckpt);
    EXPECT_EQ(t["model"], "linreg");
    EXPECT_GT(t["test"]["mape"].get<double>(), 0.0);
    const auto e = run_json("evaluate --ckpt " + ckpt + " --data " + fixture());
    ASSERT_EQ(e["reports"].size(), 3u);
    EXPECT_EQ(e["reports"][2]["horizon"], 24);
    EXPECT_EQ(e["reports"][2]["mape"], t["test"]["mape"]);
    for (const auto& r : e["reports"]) EXPECT_EQ(r["n"], e["origins"]);
    EXPECT_EQ(run("evaluate --ckpt " + path("missing.json") + " --data " + fixture()).status, 2);
}

TEST_F(Cli, TrainLstmShortRun) {
    const auto ckpt = path("lstm.json");
    const auto t = run_json("train --model lstm --epochs 3 --hidden 4 --seed 3 --data " + fixture() + " --out " + ckpt);
    EXPECT_EQ(t["model"], "lstm");
    EXPECT_LT(t["final_loss"].get<double>(), t["initial_loss"].get<double>());
    const auto e = run_json("evaluate --ckpt " + ckpt + " --data " + fixture() + " --horizons 1 6");
    EXPECT_EQ(e["reports"].size(), 2u);
    EXPECT_EQ(e["reports"][0]["mape"], t["test"]["mape"]);
}

TEST_F(Cli, TrainAnomalyForestFromMinuteCsv) {
    run_json("simulate --duration 6h --step 60s --out " + path("m.csv"));
    const auto j = run_json("train --model iforest --step 60s --data " + path("m.csv") + " --out " + path("f.json"));
    EXPECT_EQ(j["points"], 360);
    const auto forest = dctwin::anomaly::IsoForest::load(path("f.json"));
    EXPECT_EQ(forest.trees.size(), 100u);
    EXPECT_EQ(forest.feature_names, dctwin::anomaly::kDefaultFeatures);
}

TEST_F(Cli, ScenarioRunAndCompare) {
    const auto a = path("off"), b = path("on"), c = path("other");
    const std::string common = " --duration 3h --warmup 10h --seed 5";
    run_json("scenario run --policy off --out " + a + common);
    run_json("scenario run --policy on --out " + b + common);
    const auto r = run_json("scenario compare " + a + " " + b);
    for (const char* k : {"baseline", "optimized", "energy_reduction_pct", "pue_delta", "workload_hash"})
        EXPECT_TRUE(r.contains(k)) << k;
    EXPECT_NEAR(r["energy_reduction_pct"].get<double>(),
                100.0 * (r["baseline"]["facility_energy_kwh"].get<double>() -
                         r["optimized"]["facility_energy_kwh"].get<double>()) /
                    r["baseline"]["facility_energy_kwh"].get<double>(),
                1e-12);
    EXPECT_EQ(run_json("scenario compare " + b + " " + a).dump(), r.dump());
    EXPECT_TRUE(fs::exists(fs::path(b) / "actions.ndjson"));
    run_json("scenario run --policy on --duration 3h --warmup 10h --seed 6 --out " + c);
    EXPECT_EQ(run("scenario compare " + a + " " + c).status, 2);
    EXPECT_NE(run("scenario run --policy maybe").status, 0);
    EXPECT_EQ(run("scenario run --duration 0s").status, 2);
}

TEST_F(Cli, ReplayIntoStore) {
    const auto data = path("store");
    const auto j = run_json("replay --csv " + fixture() + " --data-dir " + data);
    EXPECT_EQ(j["rows"], 3600);
    EXPECT_EQ(j["appended"], 3600);
    dctwin::Store reopened{fs::path(data)};
    EXPECT_EQ(reopened.series(dctwin::kFacilityPower).size(), 720u);
    const auto again = run_json("replay --csv " + fixture() + " --data-dir " + data);
    EXPECT_EQ(again["appended"], 0);
    EXPECT_EQ(again["skipped"], 3600);
    std::ofstream(path("bad.csv")) << "ts_ms,sensor_id,kind,value,unit,imputed\n1,x,power,abc,W,0\n";
    EXPECT_EQ(run("replay --csv " + path("bad.csv")).status, 2);
}

TEST_F(Cli, ServeAnswersAndShutsDownOnSigterm) {
    int out_pipe[2];
    ASSERT_EQ(::pipe(out_pipe), 0);
    const auto data = path("live");
    const pid_t pid = ::fork();
    ASSERT_GE(pid, 0);
    if (pid == 0) {
        ::dup2(out_pipe[1], 1);
        ::close(out_pipe[0]);
        ::setenv("DCTWIN_HTTP_PORT", "0", 1);
        ::setenv("DCTWIN_DATA_DIR", data.c_str(), 1);
        ::execl(DCTWIN_CLI, DCTWIN_CLI, "serve", "--telemetry-port", "0", "--time-scale", "50", "--quiet",
                static_cast<char*>(nullptr));
        ::_exit(127);
    }
    ::close(out_pipe[1]);
    std::string line;
    char ch;
    while (::read(out_pipe[0], &ch, 1) == 1 && ch != '\n') line.push_back(ch);
    ::close(out_pipe[0]);
    const auto banner = json::parse(line);
    EXPECT_EQ(banner["status"], "serving");
    EXPECT_EQ(banner["data_dir"], data);
    const int port = banner["http_port"].get<int>();
    const int tport = banner["telemetry_port"].get<int>();
    ASSERT_GT(port, 0);

    httplib::Client c("127.0.0.1", port);
    auto h = c.Get("/api/v1/health");
    ASSERT_TRUE(h);
    EXPECT_EQ(h->status, 200);
    auto a = c.Post("/api/v1/actions", R"({"kind":"set_cooling_setpoint","params":{"setpoint_c":30}})",
                    "application/json");
    ASSERT_TRUE(a);
    EXPECT_EQ(a->status, 400);
    a = c.Post("/api/v1/actions", R"({"kind":"set_cooling_setpoint","params":{"setpoint_c":22}})", "application/json");
    ASSERT_TRUE(a);
    EXPECT_EQ(a->status, 200);

    std::ofstream(path("g.csv")) << "ts_ms,sensor_id,kind,value,unit,imputed\n"
                                 << "1704067200500,gw1,temp,23.5,C,0\n1704067201500,gw1,temp,23.75,C,0\n";
    EXPECT_EQ(run("replay --csv " + path("g.csv") + " --telemetry-port " + std::to_string(tport)).status, 0);
    std::this_thread::sleep_for(std::chrono::milliseconds(500));
    auto s = c.Get("/api/v1/series?sensor_id=gw1&kind=temp&from=0&to=1804067200000");
    ASSERT_TRUE(s);
    EXPECT_EQ(json::parse(s->body)["points"].size(), 2u);

    ::kill(pid, SIGTERM);
    int st = 0;
    ASSERT_EQ(::waitpid(pid, &st, 0), pid);
    EXPECT_TRUE(WIFEXITED(st));
    EXPECT_EQ(WEXITSTATUS(st), 0);
    std::ifstream log(fs::path(data) / "actions.ndjson");
    std::string entry;
    ASSERT_TRUE(std::getline(log, entry));
    EXPECT_EQ(json::parse(entry)["params"]["setpoint_c"], 22.0);
}
