#include <gtest/gtest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "dctwin/tstore.hpp"

using namespace dctwin;
namespace fs = std::filesystem;

namespace {

const SeriesKey kPower{"s1", SensorKind::power};

fs::path temp_dir(const std::string& name) {
    auto p = fs::temp_directory_path() / ("dctwin_tstore_" + name + "_" + std::to_string(::getpid()));
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

TimeSeries ramp(Millis n, Millis step_ms = 1000) {
    TimeSeries s{kPower, {}};
    for (Millis i = 0; i < n; ++i) s.points.push_back(Point{i * step_ms, static_cast<double>(i), false});
    return s;
}

}  // namespace

TEST(Append, OrderedAndOutOfOrder) {
    Store st;
    EXPECT_EQ(st.append(kPower, 1, 2.0), AppendStatus::ok);
    EXPECT_EQ(st.append(kPower, 2, 3.0), AppendStatus::ok);
    EXPECT_EQ(st.series(kPower).points, (std::vector<Point>{{1, 2.0, false}, {2, 3.0, false}}));

    Store other;
    EXPECT_EQ(other.append(kPower, 2, 1.0), AppendStatus::ok);
    EXPECT_EQ(other.append(kPower, 1, 1.0), AppendStatus::out_of_order);
    EXPECT_EQ(other.append(kPower, 2, 1.0), AppendStatus::out_of_order);
    EXPECT_EQ(other.append(kPower, 3, std::nan("")), AppendStatus::non_finite);
    EXPECT_EQ(other.series(kPower).size(), 1u);
}

TEST(Append, SurvivesProcessCrash) {
    const auto dir = temp_dir("crash");
    const pid_t pid = ::fork();
    ASSERT_GE(pid, 0);
    if (pid == 0) {
        Store st(dir);
        for (int i = 0; i < 100; ++i) st.append(kPower, 1000 + i, i * 0.5);
        st.flush();
        ::_exit(0);  // no destructors, no further flushing
    }
    int status = 0;
    ::waitpid(pid, &status, 0);
    ASSERT_TRUE(WIFEXITED(status));
    Store reopened(dir);
    const auto s = reopened.query_range(kPower, 0, 1'000'000);
    ASSERT_EQ(s.size(), 100u);
    for (int i = 0; i < 100; ++i) {
        EXPECT_EQ(s.points[i].ts, 1000 + i);
        EXPECT_EQ(s.points[i].value, i * 0.5);
    }
    EXPECT_EQ(reopened.append(kPower, 1050, 1.0), AppendStatus::out_of_order);
    fs::remove_all(dir);
}

TEST(Query, RangeIsHalfOpenAndOrdered) {
    Store st;
    for (Millis t = 0; t < 100; ++t) st.append(kPower, t * 10, static_cast<double>(t));
    const auto all = st.query_range(kPower, 0, 1000);
    EXPECT_EQ(all, st.series(kPower));
    const auto mid = st.query_range(kPower, 100, 200);
    ASSERT_EQ(mid.size(), 10u);
    EXPECT_EQ(mid.points.front().ts, 100);
    EXPECT_EQ(mid.points.back().ts, 190);
    EXPECT_TRUE(st.query_range(SeriesKey{"nope", SensorKind::cpu}, 0, 10).empty());
    EXPECT_THROW(st.query_range(kPower, 10, 0), Error);
}

TEST(Query, RandomRangesStayInBounds) {
    Store st;
    std::mt19937_64 rng(4);
    Millis t = 0;
    for (int i = 0; i < 2000; ++i) st.append(kPower, t += 1 + static_cast<Millis>(rng() % 50), 1.0);
    for (int i = 0; i < 200; ++i) {
        Millis a = static_cast<Millis>(rng() % static_cast<std::uint64_t>(t));
        Millis b = static_cast<Millis>(rng() % static_cast<std::uint64_t>(t));
        if (a > b) std::swap(a, b);
        const auto q = st.query_range(kPower, a, b);
        for (std::size_t k = 0; k < q.size(); ++k) {
            EXPECT_GE(q.points[k].ts, a);
            EXPECT_LT(q.points[k].ts, b);
            if (k) {
                EXPECT_LT(q.points[k - 1].ts, q.points[k].ts);
            }
        }
    }
}

TEST(Downsample, ArithmeticBuckets) {
    Store st;
    for (Millis i = 0; i < 600; ++i) st.append(kPower, i * 1000, static_cast<double>(i));
    const auto d = st.query_range(kPower, 0, 600000, 60.0);
    ASSERT_EQ(d.size(), 10u);
    EXPECT_DOUBLE_EQ(d.points[0].value, 29.5);
    EXPECT_DOUBLE_EQ(d.points[9].value, 569.5);
    EXPECT_EQ(d.points[1].ts, 60000);
}

TEST(Downsample, ConstantStaysConstantAndAlignsToFrom) {
    Store st;
    for (Millis i = 0; i < 1000; ++i) st.append(kPower, 7000 + i * 1000, 42.0);
    const auto d = st.query_range(kPower, 7000, 1'007'000, 300.0);
    for (const auto& p : d.points) {
        EXPECT_EQ(p.value, 42.0);
        EXPECT_EQ((p.ts - 7000) % 300000, 0);
    }
    EXPECT_THROW(downsample(d, 0, 0.0), Error);
}

TEST(Downsample, OfDownsampleEqualsDirect) {
    std::mt19937_64 rng(8);
    TimeSeries s{kPower, {}};
    for (Millis i = 0; i < 3600; ++i)
        s.points.push_back({i * 1000, std::uniform_real_distribution<double>(0, 100)(rng), false});
    const auto twice = downsample(downsample(s, 0, 60.0), 0, 300.0);
    const auto direct = downsample(s, 0, 300.0);
    ASSERT_EQ(twice.size(), direct.size());
    for (std::size_t i = 0; i < direct.size(); ++i) {
        EXPECT_EQ(twice.points[i].ts, direct.points[i].ts);
        EXPECT_NEAR(twice.points[i].value, direct.points[i].value, 1e-9);
    }
}

TEST(Impute, NoGapsIsIdentity) {
    const auto s = ramp(50);
    const auto r = impute_gaps(s, 300, 1);
    EXPECT_EQ(r.series, s);
    EXPECT_EQ(r.imputed, 0u);
    EXPECT_TRUE(r.open_gaps.empty());
}

TEST(Impute, LinearFill) {
    TimeSeries s{kPower, {{0, 0.0, false}, {4000, 4.0, false}}};
    const auto r = impute_gaps(s, 10, 1);
    ASSERT_EQ(r.series.size(), 5u);
    for (int i = 1; i <= 3; ++i) {
        EXPECT_EQ(r.series.points[i].ts, i * 1000);
        EXPECT_DOUBLE_EQ(r.series.points[i].value, i);
        EXPECT_TRUE(r.series.points[i].imputed);
    }
    EXPECT_EQ(r.imputed, 3u);
}

TEST(Impute, LongGapReportedNotFilled) {
    TimeSeries s{kPower, {{0, 1.0, false}, {3'600'000, 2.0, false}}};
    const auto r = impute_gaps(s, 300, 1);
    EXPECT_EQ(r.series, s);
    ASSERT_EQ(r.open_gaps.size(), 1u);
    EXPECT_EQ(r.open_gaps[0].from, 0);
    EXPECT_EQ(r.open_gaps[0].to, 3'600'000);
}

TEST(Impute, PreservesOriginalsAndMarksSynthetic) {
    std::mt19937_64 rng(5);
    TimeSeries s{kPower, {}};
    Millis t = 0;
    for (int i = 0; i < 500; ++i) s.points.push_back({t += 1000 * (1 + static_cast<Millis>(rng() % 8)), 1.0 * i, false});
    const auto r = impute_gaps(s, 5, 1);
    std::size_t originals = 0, synthetic = 0;
    for (std::size_t i = 0; i < r.series.size(); ++i) {
        if (i) {
            EXPECT_LT(r.series.points[i - 1].ts, r.series.points[i].ts);
        }
        (r.series.points[i].imputed ? synthetic : originals)++;
    }
    EXPECT_EQ(originals, s.size());
    EXPECT_EQ(synthetic, r.imputed);
    std::size_t k = 0;
    for (const auto& p : r.series.points)
        if (!p.imputed) {
            EXPECT_EQ(p, s.points[k++]);
        }
    EXPECT_THROW(impute_gaps(s, 5, 0), Error);
}

TEST(Csv, ExportRowCount) {
    const auto dir = temp_dir("csv3");
    Store st;
    for (Millis t = 1; t <= 3; ++t) st.append(kPower, t, 1.5 * t);
    const auto path = (dir / "out.csv").string();
    EXPECT_EQ(st.export_csv(kPower, 0, 100, path), 3u);
    std::ifstream in(path);
    std::string line;
    std::vector<std::string> lines;
    while (std::getline(in, line)) lines.push_back(line);
    ASSERT_EQ(lines.size(), 4u);
    EXPECT_EQ(lines[0].substr(0, kCsvHeader.size()), kCsvHeader);
    fs::remove_all(dir);
}

TEST(Csv, RandomRoundTripIsLossless) {
    const auto dir = temp_dir("csvrt");
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<TimeSeries> series;
        for (int k = 0; k < 3; ++k) {
            TimeSeries s{SeriesKey{"id,\"" + std::to_string(k) + "\"", kAllKinds[(trial + k) % 4]}, {}};
            Millis t = static_cast<Millis>(rng() % 1000);
            for (int i = 0; i < 200; ++i)
                s.points.push_back({t += 1 + static_cast<Millis>(rng() % 5000),
                                    std::uniform_real_distribution<double>(-1e9, 1e9)(rng), rng() % 4 == 0});
            series.push_back(s);
        }
        const auto path = (dir / "rt.csv").string();
        write_csv(path, series);
        EXPECT_EQ(read_csv(path), series);
        Store st;
        EXPECT_EQ(st.import_csv(path), 600u);
        for (const auto& s : series) EXPECT_EQ(st.series(s.key), s);
    }
    fs::remove_all(dir);
}

TEST(Csv, MalformedRowCitesLine) {
    const auto dir = temp_dir("csvbad");
    const auto path = (dir / "bad.csv").string();
    {
        std::ofstream out(path);
        out << kCsvHeader << "\n";
        for (int i = 1; i <= 5; ++i) out << i << ",s1,power," << i << ",W,0\n";
        out << "6,s1,power,abc,W,0\n";
    }
    try {
        read_csv(path);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), "csv");
        EXPECT_NE(std::string(e.what()).find("line 7"), std::string::npos) << e.what();
    }
    Store st;
    EXPECT_THROW(st.import_csv(path), Error);
    EXPECT_TRUE(st.keys().empty());
    fs::remove_all(dir);
}
