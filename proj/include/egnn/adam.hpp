#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "egnn/tensor.hpp"

namespace egnn {

template <typename T>
struct NamedTensor {
    std::string name;
    Tensor<T> tensor;
    bool trainable = true;
};

template <typename T>
struct AdamConfig {
    T lr = T(5e-4);
    T beta1 = T(0.9);
    T beta2 = T(0.999);
    T eps = T(1e-8);
    T weight_decay = T(1e-6); // additive L2 gradient term
};

/// Adam with per-parameter moment buffers. Weight decay is applied as a
/// classic L2 term added to the gradient before the moment updates.
template <typename T>
class AdamOptimizer {
public:
    AdamOptimizer() = default;
    explicit AdamOptimizer(AdamConfig<T> config) : config_(config), initial_lr_(config.lr) {}

    /// One update over the given parameters; moment buffers are keyed by
    /// position, so the parameter list must be stable across calls.
    /// Clears gradients afterwards. Throws if a parameter has no gradient.
    void step(std::vector<NamedTensor<T>>& params);

    /// lr = initial_lr * 0.5^floor(episode_count / interval)
    void apply_lr_schedule(std::uint64_t episode_count, std::uint64_t interval);

    T lr() const { return config_.lr; }
    void set_lr(T lr) { config_.lr = lr; }
    T initial_lr() const { return initial_lr_; }
    std::uint64_t step_count() const { return step_; }
    const AdamConfig<T>& config() const { return config_; }

    // Serialization access.
    std::vector<Tensor<T>>& first_moments() { return m_; }
    std::vector<Tensor<T>>& second_moments() { return v_; }
    const std::vector<Tensor<T>>& first_moments() const { return m_; }
    const std::vector<Tensor<T>>& second_moments() const { return v_; }
    void restore(std::uint64_t step, T current_lr) {
        step_ = step;
        config_.lr = current_lr;
    }

private:
    AdamConfig<T> config_;
    T initial_lr_ = T(5e-4);
    std::uint64_t step_ = 0;
    std::vector<Tensor<T>> m_;
    std::vector<Tensor<T>> v_;
};

/// Standalone schedule rule shared by the optimizer and the training loop.
template <typename T>
T scheduled_lr(T initial_lr, std::uint64_t episode_count, std::uint64_t interval);

} // namespace egnn
