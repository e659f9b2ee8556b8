#include <gtest/gtest.h>

#include <chrono>
#include <cmath>
#include <limits>
#include <random>
#include <regex>
#include <set>
#include <thread>

#include "dctwin/telemetry.hpp"
#include "dctwin/telemetry_net.hpp"

using namespace dctwin;

namespace {

PlantState plant() {
    auto cfg = default_plant_config();
    auto s = initial_state(cfg);
    const std::vector<double> demand{0.5, 0.3};
    return step_plant(s, {}, 1.0, demand);
}

}  // namespace

TEST(Sampling, SixFramesPerTickForTwoServers) {
    const auto frames = sample_sensors(plant(), NoiseConfig{}, 1);
    ASSERT_EQ(frames.size(), 6u);
    int power = 0, cpu = 0, temp = 0, hum = 0;
    for (const auto& f : frames) {
        power += f.kind == SensorKind::power;
        cpu += f.kind == SensorKind::cpu;
        temp += f.kind == SensorKind::temp;
        hum += f.kind == SensorKind::humidity;
        EXPECT_EQ(f.unit, unit_of(f.kind));
    }
    EXPECT_EQ(power, 2);
    EXPECT_EQ(cpu, 2);
    EXPECT_EQ(temp, 1);
    EXPECT_EQ(hum, 1);
}

TEST(Sampling, NoiseFreeEqualsGroundTruth) {
    const auto s = plant();
    const auto frames = sample_sensors(s, NoiseConfig::none(), 5);
    EXPECT_EQ(frames[0].value, s.servers[0].power);
    EXPECT_EQ(frames[1].value, s.servers[1].power);
    EXPECT_EQ(frames[2].value, s.room.temperature);
    EXPECT_EQ(frames[3].value, s.room.humidity);
    EXPECT_EQ(frames[4].value, 100.0 * s.servers[0].utilization);
    EXPECT_EQ(frames[5].value, 100.0 * s.servers[1].utilization);
    for (const auto& f : frames) EXPECT_EQ(f.ts, s.time_ms());
}

TEST(Sampling, PowerNoiseMeanWithinStandardErrorBound) {
    auto s = plant();
    s.servers[0].power = 260.0;
    const int n = 10000;
    const double sigma = 0.005 * 260.0;
    double sum = 0.0;
    for (int i = 0; i < n; ++i) {
        s.step_index = static_cast<std::uint64_t>(i);
        sum += sample_sensors(s, NoiseConfig{}, 42)[0].value;
    }
    EXPECT_LT(std::abs(sum / n - 260.0), 3.0 * sigma / std::sqrt(static_cast<double>(n)));
}

TEST(Sampling, DeterministicGivenSeed) {
    const auto s = plant();
    EXPECT_EQ(sample_sensors(s, NoiseConfig{}, 9), sample_sensors(s, NoiseConfig{}, 9));
    EXPECT_NE(sample_sensors(s, NoiseConfig{}, 9), sample_sensors(s, NoiseConfig{}, 10));
}

TEST(Broker, ExactAndWildcardDelivery) {
    Broker b;
    auto exact = b.subscribe("dc/z1/s1/power");
    auto temps = b.subscribe("dc/+/+/temp");
    auto powers = b.subscribe("dc/+/+/power");
    const auto f = make_frame(1000, "s1", SensorKind::power, 260.0);
    const auto ack = b.publish("dc/z1/s1/power", f);
    EXPECT_TRUE(ack.ok);
    EXPECT_EQ(ack.delivered_to, 2u);
    auto got = exact->try_pop();
    ASSERT_TRUE(got);
    EXPECT_EQ(got->frame, f);
    EXPECT_FALSE(temps->try_pop());
    b.publish("dc/z2/s9/power", f);
    EXPECT_EQ(powers->drain().size(), 2u);
}

TEST(Broker, MalformedTopicIsRejected) {
    Broker b;
    auto sub = b.subscribe("dc/+/+/+");
    const auto f = make_frame(1, "s1", SensorKind::power, 1.0);
    for (const char* bad : {"dc/z1/s1", "xx/z1/s1/power", "dc//s1/power", "dc/z1/s1/power/extra", "dc/+/s1/power"}) {
        const auto ack = b.publish(bad, f);
        EXPECT_FALSE(ack.ok) << bad;
        EXPECT_EQ(ack.error, "malformed_topic");
    }
    EXPECT_EQ(sub->pending(), 0u);
    EXPECT_EQ(b.rejected(), 5u);
    EXPECT_THROW(b.subscribe("dc/+/+"), Error);
}

TEST(Broker, WildcardMatchesReferenceMatcher) {
    const std::vector<std::string> zones{"z1", "z2", "zz"};
    const std::vector<std::string> sensors{"s1", "s2", "room"};
    const std::vector<std::string> kinds{"power", "temp", "humidity", "cpu"};
    std::mt19937_64 rng(123);
    auto pick = [&](const std::vector<std::string>& v) { return v[rng() % v.size()]; };
    auto maybe_wild = [&](const std::vector<std::string>& v) { return rng() % 2 ? std::string("+") : pick(v); };

    for (int trial = 0; trial < 50; ++trial) {
        Broker b;
        const std::string pattern = "dc/" + maybe_wild(zones) + "/" + maybe_wild(sensors) + "/" + maybe_wild(kinds);
        std::string rx = pattern;
        rx = std::regex_replace(rx, std::regex("\\+"), "[^/]+");
        const std::regex ref("^" + rx + "$");
        auto sub = b.subscribe(pattern);
        std::multiset<std::string> expected;
        for (int i = 0; i < 200; ++i) {
            const std::string t = "dc/" + pick(zones) + "/" + pick(sensors) + "/" + pick(kinds);
            b.publish(t, make_frame(i + 1, "x", SensorKind::power, 1.0));
            if (std::regex_match(t, ref)) expected.insert(t);
        }
        std::multiset<std::string> got;
        for (const auto& d : sub->drain()) got.insert(d.topic);
        EXPECT_EQ(got, expected) << pattern;
    }
}

TEST(Broker, PerTopicFifoUnderConcurrentPublishers) {
    Broker b;
    auto sub = b.subscribe("dc/z1/+/power", 100000);
    std::vector<std::thread> pubs;
    for (int p = 0; p < 4; ++p) {
        pubs.emplace_back([&, p] {
            const std::string id = "s" + std::to_string(p);
            for (int i = 1; i <= 2000; ++i) b.publish("dc/z1/" + id + "/power", make_frame(i, id, SensorKind::power, i));
        });
    }
    for (auto& t : pubs) t.join();
    std::map<std::string, Millis> last;
    std::size_t n = 0;
    for (const auto& d : sub->drain()) {
        EXPECT_GT(d.frame.ts, last[d.topic]);
        last[d.topic] = d.frame.ts;
        ++n;
    }
    EXPECT_EQ(n, 8000u);
}

TEST(Broker, TenMinutesAtSixFramesPerSecondLosesNothing) {
    Broker b;
    auto power = b.subscribe("dc/+/+/power");
    auto s = initial_state(default_plant_config());
    const auto& wl = default_plant_config().workload;
    for (int i = 0; i < 600; ++i) {
        s = step_plant(s, {}, 1.0, generate_workload(wl, i, 2));
        for (const auto& f : sample_sensors(s, NoiseConfig{}, 1))
            b.publish(Topic::of("z1", f.sensor_id, to_string(f.kind)), f);
    }
    EXPECT_EQ(b.published(), 3600u);
    EXPECT_EQ(power->delivered(), 1200u);
    EXPECT_EQ(power->dropped(), 0u);
    auto all = b.subscribe("dc/+/+/+");
    for (int i = 0; i < 3600; ++i) b.publish("dc/z1/s1/power", make_frame(i + 1, "s1", SensorKind::power, 1.0));
    EXPECT_EQ(all->delivered(), 3600u);
    EXPECT_EQ(all->dropped(), 0u);
}

TEST(Broker, OverflowDropsOldestAndCounts) {
    Broker b;
    auto sub = b.subscribe("dc/+/+/+", 3);
    for (int i = 1; i <= 5; ++i) b.publish("dc/z1/s1/cpu", make_frame(i, "s1", SensorKind::cpu, i));
    EXPECT_EQ(sub->dropped(), 2u);
    const auto rest = sub->drain();
    ASSERT_EQ(rest.size(), 3u);
    EXPECT_EQ(rest.front().frame.ts, 3);
    EXPECT_EQ(rest.back().frame.ts, 5);
}

TEST(Validation, Examples) {
    const auto ok = validate_normalize(make_frame(1, "room", SensorKind::temp, 22.5));
    EXPECT_TRUE(ok.ok);
    EXPECT_EQ(ok.frame.value, 22.5);

    const auto hum = validate_normalize(make_frame(1, "room", SensorKind::humidity, 140.0));
    EXPECT_FALSE(hum.ok);
    EXPECT_EQ(to_string(*hum.reason), "out_of_bounds");

    const auto nan = validate_normalize(make_frame(1, "s1", SensorKind::power, std::nan("")));
    EXPECT_EQ(*nan.reason, RejectReason::non_finite);

    auto wrong_unit = make_frame(1, "s1", SensorKind::power, 10.0);
    wrong_unit.unit = "C";
    EXPECT_EQ(*validate_normalize(wrong_unit).reason, RejectReason::unit_mismatch);
    EXPECT_EQ(*validate_normalize(make_frame(0, "s1", SensorKind::cpu, 10.0)).reason, RejectReason::bad_timestamp);
}

TEST(Validation, TotalOverArbitraryInputs) {
    std::mt19937_64 rng(7);
    const std::vector<double> specials{std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity(),
                                       std::nan(""), -1e300, 1e300, 0.0, -0.0};
    const std::vector<std::string> units{"W", "C", "%RH", "%", "", "kW"};
    for (int i = 0; i < 5000; ++i) {
        TelemetryFrame f;
        f.ts = static_cast<Millis>(rng() % 3) - 1;
        f.kind = kAllKinds[rng() % 4];
        f.value = rng() % 3 == 0 ? specials[rng() % specials.size()]
                                 : std::uniform_real_distribution<double>(-100, 20000)(rng);
        f.unit = units[rng() % units.size()];
        const auto v = validate_normalize(f);
        EXPECT_EQ(v.ok, !v.reason.has_value());
        if (v.ok) {
            EXPECT_EQ(v.frame, f);
        }
    }
}

TEST(Aggregation, ConstantFullWindow) {
    Aggregator agg(300.0);
    const Millis t0 = 1704067200000;
    for (int i = 0; i < 300; ++i) EXPECT_FALSE(agg.add(make_frame(t0 + i * 1000, "s1", SensorKind::power, 260.0)));
    const auto r = agg.add(make_frame(t0 + 300000, "s1", SensorKind::power, 260.0));
    ASSERT_TRUE(r);
    EXPECT_EQ(r->window_start, t0);
    EXPECT_EQ(r->mean, 260.0);
    EXPECT_EQ(r->min, 260.0);
    EXPECT_EQ(r->max, 260.0);
    EXPECT_EQ(r->count, 300);
    EXPECT_EQ(r->missing, 0);
}

TEST(Aggregation, MissingSamplesCounted) {
    Aggregator agg(300.0);
    const Millis t0 = 1704067200000;
    for (int i = 0; i < 300; ++i)
        if (i < 100 || i >= 130) agg.add(make_frame(t0 + i * 1000, "s1", SensorKind::power, 1.0));
    const auto recs = agg.flush();
    ASSERT_EQ(recs.size(), 1u);
    EXPECT_EQ(recs[0].count, 270);
    EXPECT_EQ(recs[0].missing, 30);
    EXPECT_EQ(recs[0].count + recs[0].missing, agg.expected_per_window());
}

TEST(Aggregation, ArithmeticSeries) {
    Aggregator agg(300.0);
    const Millis t0 = 1704067200000;
    for (int i = 1; i <= 300; ++i) agg.add(make_frame(t0 + (i - 1) * 1000, "s1", SensorKind::power, i));
    const auto recs = agg.flush();
    ASSERT_EQ(recs.size(), 1u);
    EXPECT_DOUBLE_EQ(recs[0].mean, 150.5);
    EXPECT_EQ(recs[0].min, 1.0);
    EXPECT_EQ(recs[0].max, 300.0);
}

TEST(Aggregation, LateFramesDroppedAndWindowsAligned) {
    Aggregator agg(60.0);
    const Millis t0 = 1704067230000;  // 30 s into a minute
    agg.add(make_frame(t0, "s1", SensorKind::cpu, 10.0));
    const auto r = agg.add(make_frame(t0 + 40000, "s1", SensorKind::cpu, 20.0));
    ASSERT_TRUE(r);
    EXPECT_EQ(r->window_start % 60000, 0);
    EXPECT_EQ(r->window_start, t0 - 30000);
    EXPECT_FALSE(agg.add(make_frame(t0 + 1000, "s1", SensorKind::cpu, 99.0)));
    EXPECT_EQ(agg.late_drops(), 1u);
    agg.add(make_frame(t0 + 40000, "s1", SensorKind::cpu, 20.0));
    EXPECT_EQ(agg.duplicates(), 1u);
}

TEST(Aggregation, AgreesWithBruteForceOnRandomStreams) {
    std::mt19937_64 rng(99);
    for (int trial = 0; trial < 20; ++trial) {
        Aggregator agg(300.0);
        std::map<Millis, std::vector<double>> buckets;
        std::vector<AggregateRecord> out;
        Millis t = 1704067200000 + static_cast<Millis>(rng() % 300) * 1000;
        for (int i = 0; i < 3000; ++i) {
            t += 1000 * (1 + static_cast<Millis>(rng() % 3 == 0));
            const double v = std::uniform_real_distribution<double>(0, 500)(rng);
            buckets[t / 300000 * 300000].push_back(v);
            if (auto r = agg.add(make_frame(t, "s1", SensorKind::power, v))) out.push_back(*r);
        }
        for (auto& r : agg.flush()) out.push_back(r);
        ASSERT_EQ(out.size(), buckets.size());
        for (const auto& r : out) {
            const auto& vals = buckets.at(r.window_start);
            double sum = 0.0;
            for (double v : vals) sum += v;
            EXPECT_NEAR(r.mean, sum / vals.size(), 1e-9);
            EXPECT_EQ(r.min, *std::min_element(vals.begin(), vals.end()));
            EXPECT_EQ(r.max, *std::max_element(vals.begin(), vals.end()));
            EXPECT_EQ(r.count, static_cast<std::int64_t>(vals.size()));
            EXPECT_LE(r.min, r.mean);
            EXPECT_LE(r.mean, r.max);
        }
    }
}

TEST(WireFormat, BitExactLine) {
    const auto f = make_frame(1704067200000, "s1", SensorKind::power, 260.5);
    EXPECT_EQ(encode_frame_line(f),
              "{\"ts\":1704067200000,\"sensor_id\":\"s1\",\"kind\":\"power\",\"value\":260.5,\"unit\":\"W\"}\n");
    const auto h = make_frame(5, "room", SensorKind::humidity, 45.0);
    EXPECT_EQ(encode_frame_line(h), "{\"ts\":5,\"sensor_id\":\"room\",\"kind\":\"humidity\",\"value\":45.0,\"unit\":\"%RH\"}\n");
}

TEST(WireFormat, RoundTripAndErrors) {
    std::mt19937_64 rng(3);
    for (int i = 0; i < 1000; ++i) {
        const auto f = make_frame(static_cast<Millis>(rng() >> 20), "s" + std::to_string(i % 5), kAllKinds[i % 4],
                                  std::uniform_real_distribution<double>(-1e6, 1e6)(rng));
        EXPECT_EQ(decode_frame_line(encode_frame_line(f)), f);
    }
    EXPECT_THROW(decode_frame_line("not json"), Error);
    EXPECT_THROW(decode_frame_line("{\"ts\":1}"), Error);
    EXPECT_THROW(decode_frame_line("{\"ts\":1,\"sensor_id\":\"a\",\"kind\":\"volts\",\"value\":1,\"unit\":\"V\"}"), Error);
}

TEST(TcpLoopback, FramesReachSubscribers) {
    Broker b;
    auto sub = b.subscribe("dc/z1/+/+");
    TelemetryTcpServer server(b, "z1");
    const int port = server.start(0);
    ASSERT_GT(port, 0);
    std::vector<TelemetryFrame> sent;
    {
        TelemetryTcpClient client("127.0.0.1", port);
        for (int i = 1; i <= 50; ++i) {
            sent.push_back(make_frame(i, "s1", SensorKind::power, 100.0 + i));
            client.send(sent.back());
        }
        client.send_line("garbage\n");
    }
    std::vector<TelemetryFrame> got;
    const auto deadline = std::chrono::steady_clock::now() + std::chrono::seconds(5);
    while (got.size() < sent.size() && std::chrono::steady_clock::now() < deadline)
        if (auto d = sub->pop_for(std::chrono::milliseconds(50))) got.push_back(d->frame);
    EXPECT_EQ(got, sent);
    const auto until = std::chrono::steady_clock::now() + std::chrono::seconds(2);
    while (server.rejected() == 0 && std::chrono::steady_clock::now() < until)
        std::this_thread::sleep_for(std::chrono::milliseconds(10));
    EXPECT_EQ(server.rejected(), 1u);
    server.stop();
}
