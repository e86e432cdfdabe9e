#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "sinsemi/errors.hpp"

namespace sinsemi::nn {

template <class T>
struct Param {
    std::string name;
    std::vector<int> shape;
    std::vector<T> value;
    std::vector<T> grad;

    std::size_t size() const { return value.size(); }
};

/// Ordered, named parameter collection. Indices returned by add() are stable.
template <class T>
class ParamSet {
public:
    int add(std::string name, std::vector<int> shape) {
        std::size_t n = 1;
        for (int d : shape) n *= static_cast<std::size_t>(d);
        params_.push_back({std::move(name), std::move(shape), std::vector<T>(n, T(0)),
                           std::vector<T>(n, T(0))});
        return static_cast<int>(params_.size()) - 1;
    }

    Param<T>& operator[](int i) { return params_[i]; }
    const Param<T>& operator[](int i) const { return params_[i]; }
    int size() const { return static_cast<int>(params_.size()); }
    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }
    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }

    const Param<T>* find(const std::string& name) const {
        for (const auto& p : params_)
            if (p.name == name) return &p;
        return nullptr;
    }

    void zero_grad() {
        for (auto& p : params_) std::fill(p.grad.begin(), p.grad.end(), T(0));
    }

    bool all_finite() const {
        for (const auto& p : params_)
            for (T v : p.value)
                if (!std::isfinite(v)) return false;
        return true;
    }

    std::size_t total() const {
        std::size_t n = 0;
        for (const auto& p : params_) n += p.size();
        return n;
    }

private:
    std::vector<Param<T>> params_;
};

struct AdamConfig {
    double learning_rate = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Adaptive-moment optimizer without weight decay or schedule.
template <class T>
class Adam {
public:
    Adam() = default;
    Adam(const ParamSet<T>& params, AdamConfig cfg) : cfg_(cfg) {
        for (const auto& p : params) {
            m_.emplace_back(p.size(), T(0));
            v_.emplace_back(p.size(), T(0));
        }
    }

    void step(ParamSet<T>& params) {
        ++steps_;
        const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(steps_));
        const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(steps_));
        const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
        const T lr = static_cast<T>(cfg_.learning_rate / c1);
        const T inv_c2 = static_cast<T>(1.0 / c2);
        const T eps = static_cast<T>(cfg_.eps);
        for (int i = 0; i < params.size(); ++i) {
            auto& p = params[i];
            auto& m = m_[i];
            auto& v = v_[i];
            for (std::size_t j = 0; j < p.size(); ++j) {
                const T g = p.grad[j];
                m[j] = b1 * m[j] + (T(1) - b1) * g;
                v[j] = b2 * v[j] + (T(1) - b2) * g * g;
                p.value[j] -= lr * m[j] / (std::sqrt(v[j] * inv_c2) + eps);
            }
        }
    }

    const AdamConfig& config() const { return cfg_; }
    void set_learning_rate(double lr) { cfg_.learning_rate = lr; }
    long steps() const { return steps_; }
    void set_steps(long s) { steps_ = s; }
    std::vector<std::vector<T>>& first_moments() { return m_; }
    std::vector<std::vector<T>>& second_moments() { return v_; }
    const std::vector<std::vector<T>>& first_moments() const { return m_; }
    const std::vector<std::vector<T>>& second_moments() const { return v_; }

private:
    AdamConfig cfg_;
    std::vector<std::vector<T>> m_, v_;
    long steps_ = 0;
};

}  // namespace sinsemi::nn
