#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

#include "dctwin/forecast.hpp"

using namespace dctwin;
using namespace dctwin::forecast;

namespace {

Matrix random_window(std::mt19937_64& rng, int len, int dim) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Matrix x(len, dim);
    for (int r = 0; r < len; ++r)
        for (int c = 0; c < dim; ++c) x(r, c) = u(rng);
    return x;
}

LstmModel random_model(std::mt19937_64& rng, int dim, int hidden, double scale = 0.8) {
    LstmModel m(dim, hidden, rng());
    std::uniform_real_distribution<double> u(-scale, scale);
    for (Eigen::Index k = 0; k < m.theta().size(); ++k) m.theta()(k) = u(rng);
    return m;
}

// Second implementation with plain loops over the documented gate layout
// (rows: input, forget, output, candidate).
double scalar_reference(const LstmModel& m, const Matrix& x) {
    const int D = m.input_dim(), H = m.hidden_dim();
    const auto W = m.W();
    const auto U = m.U();
    const auto b = m.b();
    std::vector<double> h(H, 0.0), c(H, 0.0), z(4 * H);
    auto sig = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
    for (int t = 0; t < x.rows(); ++t) {
        for (int r = 0; r < 4 * H; ++r) {
            double acc = b(r);
            for (int d = 0; d < D; ++d) acc += W(r, d) * x(t, d);
            for (int k = 0; k < H; ++k) acc += U(r, k) * h[k];
            z[r] = acc;
        }
        for (int k = 0; k < H; ++k) {
            const double i = sig(z[k]);
            const double f = sig(z[H + k]);
            const double o = sig(z[2 * H + k]);
            const double g = std::tanh(z[3 * H + k]);
            c[k] = f * c[k] + i * g;
            h[k] = o * std::tanh(c[k]);
        }
    }
    double y = m.b_out();
    for (int k = 0; k < H; ++k) y += m.w_out()(k) * h[k];
    return y;
}

}  // namespace

TEST(LstmForward, ZeroParametersGiveOutputBias) {
    auto m = LstmModel::zeros(3, 4);
    m.b_out() = 0.37;
    const Matrix x = Matrix::Zero(6, 3);
    EXPECT_DOUBLE_EQ(lstm_predict(m, x), 0.37);
    const auto r = lstm_forward(m, x);
    EXPECT_DOUBLE_EQ(r.prediction, 0.37);
    EXPECT_TRUE(r.cache.h_last.isZero());
}

TEST(LstmForward, Deterministic) {
    std::mt19937_64 rng(1);
    const auto m = random_model(rng, 2, 5);
    const auto x = random_window(rng, 8, 2);
    EXPECT_EQ(lstm_predict(m, x), lstm_predict(m, x));
}

TEST(LstmForward, MatchesScalarLoopReference) {
    std::mt19937_64 rng(2);
    for (int trial = 0; trial < 20; ++trial) {
        const auto m = random_model(rng, 2, 3);
        const auto x = random_window(rng, 4, 2);
        EXPECT_NEAR(lstm_predict(m, x), scalar_reference(m, x), 1e-10);
    }
    const auto big = random_model(rng, 5, 32, 0.2);
    const auto xb = random_window(rng, 24, 5);
    EXPECT_NEAR(lstm_predict(big, xb), scalar_reference(big, xb), 1e-10);
}

TEST(LstmForward, BatchEqualsPerWindow) {
    std::mt19937_64 rng(3);
    const auto m = random_model(rng, 3, 4);
    std::vector<Matrix> xs;
    for (int i = 0; i < 7; ++i) xs.push_back(random_window(rng, 5, 3));
    std::vector<const Matrix*> ptrs;
    for (auto& x : xs) ptrs.push_back(&x);
    const auto y = lstm_forward_batch(m, ptrs);
    for (int i = 0; i < 7; ++i) EXPECT_NEAR(y(i), lstm_predict(m, xs[i]), 1e-14);
}

TEST(LstmForward, ShapeMismatchThrows) {
    const LstmModel m(2, 3, 1);
    EXPECT_THROW(lstm_predict(m, Matrix::Zero(4, 3)), Error);
    EXPECT_THROW(LstmModel(0, 3, 1), Error);
}

TEST(LstmInit, ForgetBiasStartsAtOneAndShapesAgree) {
    const LstmModel m(3, 5, 9);
    EXPECT_EQ(m.theta().size(), LstmModel::parameter_count(3, 5));
    EXPECT_EQ(m.W().rows(), 20);
    EXPECT_EQ(m.W().cols(), 3);
    EXPECT_EQ(m.U().cols(), 5);
    for (int k = 0; k < 5; ++k) {
        EXPECT_EQ(m.b()(k), 0.0);
        EXPECT_EQ(m.b()(5 + k), 1.0);
        EXPECT_EQ(m.b()(10 + k), 0.0);
        EXPECT_EQ(m.b()(15 + k), 0.0);
    }
    EXPECT_EQ(LstmModel(3, 5, 9).theta(), m.theta());
    EXPECT_NE(LstmModel(3, 5, 10).theta(), m.theta());
}

TEST(LstmGradient, MatchesCentralDifferences) {
    std::mt19937_64 rng(4);
    const double eps = 1e-5;
    double worst = 0.0;
    for (int trial = 0; trial < 10; ++trial) {
        const int D = 1 + trial % 3, H = 2 + trial % 3, T = 3 + trial % 4;
        auto m = random_model(rng, D, H);
        std::vector<Matrix> xs;
        std::vector<double> ys;
        for (int i = 0; i < 3; ++i) {
            xs.push_back(random_window(rng, T, D));
            ys.push_back(std::uniform_real_distribution<double>(-1, 1)(rng));
        }
        std::vector<const Matrix*> ptrs;
        for (auto& x : xs) ptrs.push_back(&x);
        Vector grad;
        lstm_loss_and_grad(m, ptrs, ys, &grad);
        ASSERT_EQ(grad.size(), m.theta().size());
        for (Eigen::Index k = 0; k < m.theta().size(); ++k) {
            const double keep = m.theta()(k);
            m.theta()(k) = keep + eps;
            const double up = lstm_loss_and_grad(m, ptrs, ys, nullptr);
            m.theta()(k) = keep - eps;
            const double down = lstm_loss_and_grad(m, ptrs, ys, nullptr);
            m.theta()(k) = keep;
            const double numeric = (up - down) / (2.0 * eps);
            const double denom = std::max({std::abs(grad(k)), std::abs(numeric), 1e-6});
            worst = std::max(worst, std::abs(grad(k) - numeric) / denom);
        }
    }
    EXPECT_LT(worst, 1e-4);
}

TEST(LstmTrain, ZeroLearningRateLeavesParameters) {
    std::mt19937_64 rng(5);
    std::vector<Matrix> X;
    std::vector<double> y;
    for (int i = 0; i < 40; ++i) {
        X.push_back(random_window(rng, 6, 1));
        y.push_back(X.back()(5, 0));
    }
    TrainConfig cfg;
    cfg.epochs = 5;
    cfg.lr = 0.0;
    cfg.hidden_dim = 4;
    const auto r = train_lstm(X, y, cfg);
    EXPECT_EQ(r.model.theta(), LstmModel(1, 4, cfg.seed).theta());
    ASSERT_EQ(r.history.size(), 6u);
    EXPECT_EQ(r.history.front().train, r.history.back().train);
}

TEST(LstmTrain, SineConvergesBelowTenPercentOfInitialLoss) {
    std::vector<Matrix> X;
    std::vector<double> y;
    const int L = 12;
    for (int s = 0; s < 300; ++s) {
        Matrix w(L, 1);
        for (int t = 0; t < L; ++t) w(t, 0) = 0.5 + 0.4 * std::sin(0.3 * (s + t));
        X.push_back(w);
        y.push_back(0.5 + 0.4 * std::sin(0.3 * (s + L)));
    }
    TrainConfig cfg;
    cfg.epochs = 50;
    cfg.hidden_dim = 8;
    cfg.lr = 1e-2;
    const auto r = train_lstm(X, y, cfg);
    EXPECT_LT(r.history.back().train, 0.1 * r.history.front().train)
        << r.history.front().train << " -> " << r.history.back().train;
    for (const auto& e : r.history) {
        EXPECT_TRUE(std::isfinite(e.train));
        EXPECT_TRUE(std::isfinite(e.validation));
    }
    EXPECT_TRUE(r.model.theta().allFinite());
}

TEST(LstmTrain, DeterministicGivenSeed) {
    std::mt19937_64 rng(6);
    std::vector<Matrix> X;
    std::vector<double> y;
    for (int i = 0; i < 64; ++i) {
        X.push_back(random_window(rng, 5, 2));
        y.push_back(X.back().col(0).mean());
    }
    TrainConfig cfg;
    cfg.epochs = 5;
    cfg.hidden_dim = 6;
    const auto a = train_lstm(X, y, cfg);
    const auto b = train_lstm(X, y, cfg);
    EXPECT_EQ(a.model.theta(), b.model.theta());
    cfg.seed = 2;
    EXPECT_NE(train_lstm(X, y, cfg).model.theta(), a.model.theta());
}

TEST(LstmTrain, NonFiniteLossAborts) {
    std::vector<Matrix> X{Matrix::Constant(3, 1, 0.5), Matrix::Constant(3, 1, 0.2)};
    std::vector<double> y{std::nan(""), 0.1};
    TrainConfig cfg;
    cfg.epochs = 1;
    cfg.hidden_dim = 2;
    cfg.validation_fraction = 0.0;
    try {
        train_lstm(X, y, cfg);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), "nan_loss");
    }
    EXPECT_THROW(train_lstm({}, {}, cfg), Error);
}
