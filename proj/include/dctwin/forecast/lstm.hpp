#pragma once

// Single-layer LSTM regressor with a linear head on the final hidden state,
// trained by backpropagation through time with Adam.
//
// Gate recursion per step t (rows of the stacked parameters are ordered
// input, forget, output, candidate):
//   i = sigmoid(W_i x + U_i h + b_i)     f = sigmoid(W_f x + U_f h + b_f)
//   o = sigmoid(W_o x + U_o h + b_o)     g = tanh(W_g x + U_g h + b_g)
//   c = f*c + i*g                        h = o*tanh(c)
// prediction = w_out . h_T + b_out, with h_0 = c_0 = 0.

#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "dctwin/common.hpp"
#include "dctwin/forecast/dataset.hpp"
#include "dctwin/rng.hpp"

namespace dctwin::forecast {

using RowMajorMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

class LstmModel {
public:
    LstmModel() = default;

    /// Uniform(-1/sqrt(H), 1/sqrt(H)) weights, zero biases except the forget
    /// gate which starts at 1.
    LstmModel(int input_dim, int hidden_dim, std::uint64_t seed)
        : input_dim_(input_dim), hidden_dim_(hidden_dim), seed_(seed) {
        if (input_dim < 1 || hidden_dim < 1) throw Error("shape", "LSTM dimensions must be >= 1");
        theta_ = Vector::Zero(parameter_count(input_dim, hidden_dim));
        const double r = 1.0 / std::sqrt(static_cast<double>(hidden_dim));
        auto init = [&](Eigen::Index begin, Eigen::Index count) {
            for (Eigen::Index k = 0; k < count; ++k)
                theta_(begin + k) = (2.0 * unit_uniform(mix(seed, static_cast<std::uint64_t>(begin + k), 21)) - 1.0) * r;
        };
        init(off_W(), 4 * H() * D());
        init(off_U(), 4 * H() * H());
        init(off_wout(), H());
        b().segment(H(), H()).setOnes();
    }

    static LstmModel zeros(int input_dim, int hidden_dim) {
        LstmModel m(input_dim, hidden_dim, 0);
        m.theta_.setZero();
        return m;
    }

    static Eigen::Index parameter_count(int input_dim, int hidden_dim) {
        const Eigen::Index d = input_dim, h = hidden_dim;
        return 4 * h * d + 4 * h * h + 4 * h + h + 1;
    }

    int input_dim() const { return input_dim_; }
    int hidden_dim() const { return hidden_dim_; }
    std::uint64_t seed() const { return seed_; }

    Vector& theta() { return theta_; }
    const Vector& theta() const { return theta_; }

    Eigen::Map<RowMajorMatrix> W() { return {theta_.data() + off_W(), 4 * H(), D()}; }
    Eigen::Map<const RowMajorMatrix> W() const { return {theta_.data() + off_W(), 4 * H(), D()}; }
    Eigen::Map<RowMajorMatrix> U() { return {theta_.data() + off_U(), 4 * H(), H()}; }
    Eigen::Map<const RowMajorMatrix> U() const { return {theta_.data() + off_U(), 4 * H(), H()}; }
    Eigen::Map<Vector> b() { return {theta_.data() + off_b(), 4 * H()}; }
    Eigen::Map<const Vector> b() const { return {theta_.data() + off_b(), 4 * H()}; }
    Eigen::Map<Vector> w_out() { return {theta_.data() + off_wout(), H()}; }
    Eigen::Map<const Vector> w_out() const { return {theta_.data() + off_wout(), H()}; }
    double& b_out() { return theta_(off_bout()); }
    double b_out() const { return theta_(off_bout()); }

    Eigen::Index off_W() const { return 0; }
    Eigen::Index off_U() const { return 4 * H() * D(); }
    Eigen::Index off_b() const { return off_U() + 4 * H() * H(); }
    Eigen::Index off_wout() const { return off_b() + 4 * H(); }
    Eigen::Index off_bout() const { return off_wout() + H(); }

private:
    Eigen::Index D() const { return input_dim_; }
    Eigen::Index H() const { return hidden_dim_; }

    int input_dim_ = 0;
    int hidden_dim_ = 0;
    std::uint64_t seed_ = 0;
    Vector theta_;
};

/// Activations of a forward pass over a batch, one column per window.
struct LstmCache {
    std::vector<Matrix> x;       // D x B per step
    std::vector<Matrix> h_prev;  // H x B
    std::vector<Matrix> c_prev;  // H x B
    std::vector<Matrix> gates;   // 4H x B, post-activation
    std::vector<Matrix> tanh_c;  // H x B
    Matrix h_last;               // H x B

    std::size_t steps() const { return x.size(); }
};

inline double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

inline Eigen::RowVectorXd lstm_forward_batch(const LstmModel& m, std::span<const Matrix* const> windows,
                                             LstmCache* cache = nullptr) {
    if (windows.empty()) return {};
    const Eigen::Index D = m.input_dim(), H = m.hidden_dim();
    const Eigen::Index T = windows.front()->rows();
    const auto B = static_cast<Eigen::Index>(windows.size());
    for (const Matrix* w : windows)
        if (w->rows() != T || w->cols() != D) throw Error("shape", "window shape does not match (input_len, input_dim)");
    if (T < 1) throw Error("shape", "empty input window");

    Matrix h = Matrix::Zero(H, B), c = Matrix::Zero(H, B);
    Matrix xt(D, B), z(4 * H, B);
    if (cache) {
        *cache = LstmCache{};
        cache->x.reserve(static_cast<std::size_t>(T));
    }
    for (Eigen::Index t = 0; t < T; ++t) {
        for (Eigen::Index k = 0; k < B; ++k) xt.col(k) = windows[static_cast<std::size_t>(k)]->row(t).transpose();
        z.noalias() = m.W() * xt;
        z.noalias() += m.U() * h;
        z.colwise() += m.b();
        z.topRows(3 * H) = z.topRows(3 * H).unaryExpr([](double v) { return sigmoid(v); });
        z.bottomRows(H) = z.bottomRows(H).array().tanh();
        if (cache) {
            cache->x.push_back(xt);
            cache->h_prev.push_back(h);
            cache->c_prev.push_back(c);
            cache->gates.push_back(z);
        }
        c = z.middleRows(H, H).cwiseProduct(c) + z.topRows(H).cwiseProduct(z.bottomRows(H));
        Matrix tc = c.array().tanh();
        h = z.middleRows(2 * H, H).cwiseProduct(tc);
        if (cache) cache->tanh_c.push_back(std::move(tc));
    }
    if (cache) cache->h_last = h;
    Eigen::RowVectorXd y = m.w_out().transpose() * h;
    y.array() += m.b_out();
    return y;
}

struct ForwardResult {
    double prediction = 0.0;
    LstmCache cache;
};

inline ForwardResult lstm_forward(const LstmModel& m, const Matrix& window) {
    ForwardResult r;
    const Matrix* w = &window;
    r.prediction = lstm_forward_batch(m, std::span<const Matrix* const>(&w, 1), &r.cache)(0);
    return r;
}

inline double lstm_predict(const LstmModel& m, const Matrix& window) {
    const Matrix* w = &window;
    return lstm_forward_batch(m, std::span<const Matrix* const>(&w, 1))(0);
}

/// Gradient of sum_k dy(k) * prediction_k with respect to every parameter.
inline Vector lstm_backward(const LstmModel& m, const LstmCache& cache, const Eigen::RowVectorXd& dy) {
    const Eigen::Index H = m.hidden_dim();
    LstmModel g = LstmModel::zeros(m.input_dim(), m.hidden_dim());
    g.w_out() = cache.h_last * dy.transpose();
    g.b_out() = dy.sum();

    Matrix dh = m.w_out() * dy;
    Matrix dc = Matrix::Zero(H, dy.size());
    Matrix dz(4 * H, dy.size());
    for (std::size_t s = cache.steps(); s-- > 0;) {
        const Matrix& z = cache.gates[s];
        const auto i = z.topRows(H).array();
        const auto f = z.middleRows(H, H).array();
        const auto o = z.middleRows(2 * H, H).array();
        const auto gg = z.bottomRows(H).array();
        const auto tc = cache.tanh_c[s].array();

        dc.array() += dh.array() * o * (1.0 - tc.square());
        dz.middleRows(2 * H, H) = (dh.array() * tc * o * (1.0 - o)).matrix();
        dz.topRows(H) = (dc.array() * gg * i * (1.0 - i)).matrix();
        dz.middleRows(H, H) = (dc.array() * cache.c_prev[s].array() * f * (1.0 - f)).matrix();
        dz.bottomRows(H) = (dc.array() * i * (1.0 - gg.square())).matrix();

        g.W().noalias() += dz * cache.x[s].transpose();
        g.U().noalias() += dz * cache.h_prev[s].transpose();
        g.b() += dz.rowwise().sum();
        dh.noalias() = m.U().transpose() * dz;
        dc.array() *= f;
    }
    return std::move(g.theta());
}

/// Mean squared error of the batch and its gradient.
inline double lstm_loss_and_grad(const LstmModel& m, std::span<const Matrix* const> windows,
                                 std::span<const double> targets, Vector* grad) {
    LstmCache cache;
    const Eigen::RowVectorXd y = lstm_forward_batch(m, windows, grad ? &cache : nullptr);
    const auto B = static_cast<double>(windows.size());
    Eigen::RowVectorXd err(y.size());
    for (Eigen::Index k = 0; k < y.size(); ++k) err(k) = y(k) - targets[static_cast<std::size_t>(k)];
    if (grad) *grad = lstm_backward(m, cache, (2.0 / B) * err);
    return err.squaredNorm() / B;
}

// ---------------------------------------------------------------------------
// Training.

struct TrainConfig {
    int epochs = 150;
    int batch = 32;
    double lr = 2e-3;
    std::uint64_t seed = 1;
    double clip = 1.0;
    int hidden_dim = 32;
    double validation_fraction = 0.2;
    double ridge = 1e-6;  // linear baseline only
};

struct EpochLoss {
    int epoch = 0;  // 0 is the untrained model
    double train = 0.0;
    double validation = 0.0;
};

struct LstmTrainResult {
    LstmModel model;
    std::vector<EpochLoss> history;
};

struct Adam {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    Vector m, v;
    long step = 0;

    void update(Vector& theta, const Vector& grad, double lr) {
        if (m.size() != theta.size()) {
            m = Vector::Zero(theta.size());
            v = Vector::Zero(theta.size());
        }
        ++step;
        m = beta1 * m + (1.0 - beta1) * grad;
        v = beta2 * v + (1.0 - beta2) * grad.cwiseAbs2();
        const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step));
        const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step));
        theta.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
    }
};

inline void shuffle_indices(std::vector<std::size_t>& idx, std::uint64_t seed, std::uint64_t round) {
    for (std::size_t i = idx.size(); i > 1; --i) {
        const auto j = static_cast<std::size_t>(mix(seed, round * 1000003ULL + i, 31) % i);
        std::swap(idx[i - 1], idx[j]);
    }
}

inline double mean_loss(const LstmModel& m, const std::vector<Matrix>& X, const std::vector<double>& y,
                        std::size_t begin, std::size_t end) {
    if (begin >= end) return 0.0;
    std::vector<const Matrix*> w;
    for (std::size_t i = begin; i < end; ++i) w.push_back(&X[i]);
    return lstm_loss_and_grad(m, w, std::span<const double>(y.data() + begin, end - begin), nullptr);
}

/// Chronological split: the last validation_fraction of windows validate, the
/// rest train (shuffled per epoch). Inputs are expected already scaled.
inline LstmTrainResult train_lstm(const std::vector<Matrix>& X, const std::vector<double>& y, const TrainConfig& cfg) {
    if (X.empty() || X.size() != y.size()) throw Error("empty_dataset", "LSTM training needs a non-empty dataset");
    if (cfg.batch < 1 || cfg.epochs < 0) throw Error("config", "batch must be >= 1 and epochs >= 0");
    const std::size_t n = X.size();
    std::size_t n_train = n - static_cast<std::size_t>(std::floor(static_cast<double>(n) * cfg.validation_fraction));
    if (n_train == 0) n_train = n;

    LstmTrainResult r{LstmModel(static_cast<int>(X.front().cols()), cfg.hidden_dim, cfg.seed), {}};
    auto record = [&](int epoch) {
        const double tr = mean_loss(r.model, X, y, 0, n_train);
        const double va = mean_loss(r.model, X, y, n_train, n);
        if (!std::isfinite(tr) || !std::isfinite(va))
            throw Error("nan_loss", "loss became non-finite at epoch " + std::to_string(epoch));
        r.history.push_back(EpochLoss{epoch, tr, va});
    };
    record(0);

    Adam adam;
    std::vector<std::size_t> order(n_train);
    std::iota(order.begin(), order.end(), 0);
    std::vector<const Matrix*> bw;
    std::vector<double> by;
    Vector grad;
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        shuffle_indices(order, cfg.seed, static_cast<std::uint64_t>(epoch));
        for (std::size_t start = 0; start < n_train; start += static_cast<std::size_t>(cfg.batch)) {
            const std::size_t end = std::min(n_train, start + static_cast<std::size_t>(cfg.batch));
            bw.clear();
            by.clear();
            for (std::size_t k = start; k < end; ++k) {
                bw.push_back(&X[order[k]]);
                by.push_back(y[order[k]]);
            }
            const double loss = lstm_loss_and_grad(r.model, bw, by, &grad);
            if (!std::isfinite(loss) || !grad.allFinite())
                throw Error("nan_loss", "non-finite loss or gradient at epoch " + std::to_string(epoch));
            const double norm = grad.norm();
            if (cfg.clip > 0.0 && norm > cfg.clip) grad *= cfg.clip / norm;
            adam.update(r.model.theta(), grad, cfg.lr);
            if (!r.model.theta().allFinite())
                throw Error("nan_loss", "parameters became non-finite at epoch " + std::to_string(epoch));
        }
        record(epoch);
    }
    return r;
}

}  // namespace dctwin::forecast
