#pragma once

// Bias-corrected adaptive-moment optimizer. Update arithmetic runs in
// double, storage follows the parameter element type.

#include <cmath>
#include <map>
#include <stdexcept>
#include <string>

#include "cxrl/params.hpp"
#include "cxrl/tensor.hpp"

namespace cxrl::num {

struct OptimConfig {
    double lr = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

template <typename T>
class OptimState {
public:
    OptimState() = default;
    explicit OptimState(OptimConfig cfg) : cfg_(cfg) {}

    // Moment slots for every non-frozen parameter.
    void init_for(const ParamStore<T>& params) {
        for (const auto& name : params.trainable_names()) {
            const auto& shape = params.get(name).shape;
            m_.emplace(name, TensorT<T>::zeros(shape));
            v_.emplace(name, TensorT<T>::zeros(shape));
        }
    }

    const OptimConfig& config() const { return cfg_; }
    OptimConfig& config() { return cfg_; }
    int64_t step_count() const { return step_; }
    void set_step_count(int64_t s) { step_ = s; }

    bool has(const std::string& name) const { return m_.count(name) > 0; }
    TensorT<T>& moment1(const std::string& name) { return m_.at(name); }
    TensorT<T>& moment2(const std::string& name) { return v_.at(name); }
    const std::map<std::string, TensorT<T>>& moment1_map() const { return m_; }
    const std::map<std::string, TensorT<T>>& moment2_map() const { return v_; }

    template <typename GradT>
    void step(ParamStore<T>& params, const std::map<std::string, TensorT<GradT>>& grads) {
        ++step_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, double(step_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, double(step_));
        for (const auto& [name, grad] : grads) {
            const auto& entry = params.entry(name);
            if (entry.frozen) throw std::invalid_argument("optimizer: gradient supplied for frozen parameter " + name);
            if (grad.shape != entry.value.shape)
                throw std::invalid_argument("optimizer: gradient shape mismatch for " + name);
            auto mit = m_.find(name);
            if (mit == m_.end()) throw std::out_of_range("optimizer: missing state entry for " + name);
            auto& m = mit->second;
            auto& v = v_.at(name);
            auto& p = params.mutable_value(name);
            for (int64_t i = 0; i < grad.numel(); ++i) {
                const double g = static_cast<double>(grad.data[i]);
                const double mi = cfg_.beta1 * double(m.data[i]) + (1.0 - cfg_.beta1) * g;
                const double vi = cfg_.beta2 * double(v.data[i]) + (1.0 - cfg_.beta2) * g * g;
                m.data[i] = static_cast<T>(mi);
                v.data[i] = static_cast<T>(vi);
                const double update = cfg_.lr * (mi / bc1) / (std::sqrt(vi / bc2) + cfg_.eps);
                p.data[i] = static_cast<T>(double(p.data[i]) - update);
            }
        }
    }

private:
    OptimConfig cfg_;
    int64_t step_ = 0;
    std::map<std::string, TensorT<T>> m_;
    std::map<std::string, TensorT<T>> v_;
};

// Free-function form matching the rest of the numeric API.
template <typename T, typename GradT>
void optimizer_step(ParamStore<T>& params, const std::map<std::string, TensorT<GradT>>& grads, OptimState<T>& state) {
    state.step(params, grads);
}

}  // namespace cxrl::num
