#pragma once

// Logistic-regression blend of component-model probabilities.

#include <Eigen/Dense>

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "eegscreen/common.hpp"

namespace eegscreen::ml {

struct MetaConfig {
    double c = 7.9059;  // inverse regularization strength
    int max_iterations = 4000;
    double tolerance = 1e-8;
    std::vector<std::string> components = {"GBE", "MINetP", "TransNetP"};
};

struct MetaModel {
    std::vector<double> weights;
    double bias = 0;
    std::vector<std::string> components;
    int iterations = 0;
    bool converged = false;

    double predict(std::span<const double> probs) const {
        if (probs.size() != weights.size()) throw Error("ShapeMismatch", "meta input has the wrong number of components");
        double z = bias;
        for (std::size_t k = 0; k < probs.size(); ++k) z += weights[k] * probs[k];
        return 1.0 / (1.0 + std::exp(-z));
    }
};

/// Minimizes C * sum(log-loss) + |w|^2 / 2 (intercept unpenalized) by
/// Newton's method. `x` is n x k, one column per component.
inline MetaModel train_meta(const Eigen::MatrixXd& x, std::span<const int> y, const MetaConfig& cfg) {
    const auto n = x.rows(), k = x.cols();
    if (static_cast<std::size_t>(n) != y.size()) throw Error("ShapeMismatch", "meta rows and labels differ");
    if (static_cast<std::size_t>(k) != cfg.components.size()) throw Error("ShapeMismatch", "meta input columns must match the configured components");
    if (!x.allFinite()) throw Error("NonFiniteInput", "meta inputs must be finite");
    if (!(cfg.c > 0)) throw Error("ConfigError", "C must be positive");
    bool has0 = false, has1 = false;
    for (int v : y) (v == 1 ? has1 : has0) = true;
    if (!has0 || !has1) throw Error("SingleClass", "meta training labels contain a single class");
    Eigen::MatrixXd a(n, k + 1);
    a.leftCols(k) = x;
    a.col(k).setOnes();
    Eigen::VectorXd yv(n);
    for (Eigen::Index i = 0; i < n; ++i) yv(i) = y[static_cast<std::size_t>(i)];
    Eigen::VectorXd reg = Eigen::VectorXd::Ones(k + 1);
    reg(k) = 0;
    Eigen::VectorXd theta = Eigen::VectorXd::Zero(k + 1);
    MetaModel m;
    m.components = cfg.components;
    for (int it = 0; it < cfg.max_iterations; ++it) {
        const Eigen::VectorXd z = a * theta;
        const Eigen::VectorXd p = (1.0 + (-z.array()).exp()).inverse().matrix();
        const Eigen::VectorXd grad = cfg.c * (a.transpose() * (p - yv)) + reg.cwiseProduct(theta);
        const Eigen::VectorXd w = (p.array() * (1 - p.array())).matrix();
        Eigen::MatrixXd hess = cfg.c * (a.transpose() * w.asDiagonal() * a);
        hess.diagonal() += reg;
        hess.diagonal().array() += 1e-12;
        const Eigen::VectorXd step = hess.ldlt().solve(grad);
        theta -= step;
        m.iterations = it + 1;
        if (step.cwiseAbs().maxCoeff() < cfg.tolerance) {
            m.converged = true;
            break;
        }
    }
    m.weights.assign(theta.data(), theta.data() + k);
    m.bias = theta(k);
    return m;
}

inline nlohmann::json to_json(const MetaModel& m, const MetaConfig& cfg) {
    return {{"weights", m.weights},
            {"bias", m.bias},
            {"components", m.components},
            {"iterations", m.iterations},
            {"converged", m.converged},
            {"config", {{"C", cfg.c}, {"max_iterations", cfg.max_iterations}, {"tolerance", cfg.tolerance}}}};
}

inline MetaModel meta_from_json(const nlohmann::json& j) {
    MetaModel m;
    m.weights = j.at("weights").get<std::vector<double>>();
    m.bias = j.at("bias").get<double>();
    m.components = j.at("components").get<std::vector<std::string>>();
    m.iterations = j.value("iterations", 0);
    m.converged = j.value("converged", false);
    return m;
}

}  // namespace eegscreen::ml
