#pragma once

#include <Eigen/Dense>

#include "dctwin/forecast/dataset.hpp"

namespace dctwin::forecast {

/// Linear model over the row-major flattened input window.
struct LinRegModel {
    Vector weights;
    double bias = 0.0;

    double predict(const Matrix& window) const {
        const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm = window;
        Eigen::Map<const Vector> flat(rm.data(), rm.size());
        if (flat.size() != weights.size()) throw Error("shape", "window size does not match linear model");
        return weights.dot(flat) + bias;
    }
};

inline constexpr double kRidgeLambda = 1e-6;

/// Ridge-regularized least squares via the normal equations. The bias is
/// fitted on centered data and is not penalized.
inline LinRegModel fit_linreg(const std::vector<Matrix>& X, const std::vector<double>& y,
                              double lambda = kRidgeLambda) {
    if (X.empty() || X.size() != y.size()) throw Error("empty_dataset", "linear regression needs a non-empty dataset");
    const auto n = static_cast<Eigen::Index>(X.size());
    const auto p = X.front().size();
    Matrix A(n, p);
    Vector b(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm = X[static_cast<std::size_t>(i)];
        if (rm.size() != p) throw Error("shape", "inconsistent window shapes");
        A.row(i) = Eigen::Map<const Eigen::RowVectorXd>(rm.data(), p);
        b(i) = y[static_cast<std::size_t>(i)];
    }
    const Eigen::RowVectorXd x_mean = A.colwise().mean();
    const double y_mean = b.mean();
    A.rowwise() -= x_mean;
    b.array() -= y_mean;
    Matrix gram = A.transpose() * A;
    gram.diagonal().array() += lambda;
    LinRegModel m;
    m.weights = gram.ldlt().solve(A.transpose() * b);
    m.bias = y_mean - x_mean.dot(m.weights);
    if (!m.weights.allFinite() || !std::isfinite(m.bias)) throw Error("nan_params", "linear regression diverged");
    return m;
}

inline LinRegModel fit_linreg(const Dataset& d, double lambda = kRidgeLambda) { return fit_linreg(d.X, d.y, lambda); }

}  // namespace dctwin::forecast
