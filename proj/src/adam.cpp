#include "egnn/adam.hpp"

#include <cmath>

#include "egnn/errors.hpp"

namespace egnn {

template <typename T>
void AdamOptimizer<T>::step(std::vector<NamedTensor<T>>& params) {
    if (m_.empty()) {
        m_.reserve(params.size());
        v_.reserve(params.size());
        for (const auto& p : params) {
            m_.push_back(Tensor<T>::zeros(p.tensor.shape()));
            v_.push_back(Tensor<T>::zeros(p.tensor.shape()));
        }
    }
    if (m_.size() != params.size())
        throw std::logic_error("adam: parameter list size changed between steps");

    ++step_;
    const T bc1 = T(1) - std::pow(config_.beta1, T(step_));
    const T bc2 = T(1) - std::pow(config_.beta2, T(step_));

    for (std::size_t p = 0; p < params.size(); ++p) {
        auto& param = params[p];
        if (!param.tensor.has_grad())
            throw std::logic_error("adam: parameter '" + param.name + "' has no gradient");
        if (m_[p].size() != param.tensor.size())
            throw ShapeError("adam: moment buffer shape mismatch for '" + param.name + "'");
        auto w = param.tensor.values_mut();
        auto g = param.tensor.grad();
        auto m = m_[p].values_mut();
        auto v = v_[p].values_mut();
        for (std::size_t i = 0; i < w.size(); ++i) {
            const T grad = g[i] + config_.weight_decay * w[i];
            m[i] = config_.beta1 * m[i] + (T(1) - config_.beta1) * grad;
            v[i] = config_.beta2 * v[i] + (T(1) - config_.beta2) * grad * grad;
            const T mhat = m[i] / bc1;
            const T vhat = v[i] / bc2;
            w[i] -= config_.lr * mhat / (std::sqrt(vhat) + config_.eps);
        }
        param.tensor.zero_grad();
    }
}

template <typename T>
void AdamOptimizer<T>::apply_lr_schedule(std::uint64_t episode_count, std::uint64_t interval) {
    config_.lr = scheduled_lr(initial_lr_, episode_count, interval);
}

template <typename T>
T scheduled_lr(T initial_lr, std::uint64_t episode_count, std::uint64_t interval) {
    if (interval == 0) throw ConfigError("lr schedule: interval must be positive");
    const std::uint64_t halvings = episode_count / interval;
    return initial_lr * static_cast<T>(std::pow(0.5, static_cast<double>(halvings)));
}

template class AdamOptimizer<float>;
template class AdamOptimizer<double>;
template float scheduled_lr<float>(float, std::uint64_t, std::uint64_t);
template double scheduled_lr<double>(double, std::uint64_t, std::uint64_t);

} // namespace egnn
