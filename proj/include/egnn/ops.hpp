#pragma once

#include <cstddef>
#include <vector>

#include "egnn/tensor.hpp"

namespace egnn {

enum class BNMode {
    Batch,  // statistics from the current batch
    Running // frozen exponential-moving-average statistics
};

/// Non-trainable batch-normalization state, updated as a side effect of
/// Batch-mode forward passes when update_running is set.
template <typename T>
struct BatchNormBuffers {
    Tensor<T> running_mean;
    Tensor<T> running_var;
};

namespace ops {

// Elementwise binary ops with right-aligned (numpy-style) broadcasting.
template <typename T> Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> div(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b);

template <typename T> Tensor<T> scale(Tape<T>& tape, const Tensor<T>& x, T factor);
template <typename T> Tensor<T> abs(Tape<T>& tape, const Tensor<T>& x);
template <typename T> Tensor<T> clamp(Tape<T>& tape, const Tensor<T>& x, T lo, T hi);

template <typename T> Tensor<T> leaky_relu(Tape<T>& tape, const Tensor<T>& x, T slope = T(0.01));
template <typename T> Tensor<T> sigmoid(Tape<T>& tape, const Tensor<T>& x);
template <typename T> Tensor<T> softmax(Tape<T>& tape, const Tensor<T>& x, std::size_t axis);

/// x / sum(|x|, axis, keepdims). Throws NumericsError when a norm falls
/// below the 1e-12 denominator floor.
template <typename T> Tensor<T> l1_normalize(Tape<T>& tape, const Tensor<T>& x, std::size_t axis);

template <typename T> Tensor<T> matmul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> concat(Tape<T>& tape, const std::vector<Tensor<T>>& parts, std::size_t axis);

template <typename T>
Tensor<T> reduce_sum(Tape<T>& tape, const Tensor<T>& x, std::size_t axis, bool keepdims);
template <typename T> Tensor<T> reduce_sum_all(Tape<T>& tape, const Tensor<T>& x);

template <typename T> Tensor<T> reshape(Tape<T>& tape, const Tensor<T>& x, Shape shape);

/// Selects elements by flat index into a 1-D tensor. Backward scatter-adds.
template <typename T>
Tensor<T> gather_flat(Tape<T>& tape, const Tensor<T>& x, std::vector<std::size_t> indices);

/// out[i*n + j, k] = |v[i,k] - v[j,k]| over all ordered pairs of the n rows.
template <typename T> Tensor<T> pairwise_abs_diff(Tape<T>& tape, const Tensor<T>& v);

/// Mean binary cross-entropy over all elements. Predictions are probabilities,
/// clamped internally to [1e-7, 1-1e-7]; targets carry no gradient.
template <typename T>
Tensor<T> bce_loss(Tape<T>& tape, const Tensor<T>& pred, const Tensor<T>& target);

/// 2-D convolution, NCHW x (O,C,kh,kw), explicit symmetric zero padding.
template <typename T>
Tensor<T> conv2d(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                 std::size_t stride = 1, std::size_t padding = 1);

template <typename T>
Tensor<T> max_pool2d(Tape<T>& tape, const Tensor<T>& x, std::size_t kernel = 2);

/// Batch normalization over the feature axis of (N,F) input or the channel
/// axis of (N,C,H,W) input. Batch mode requires N >= 2 rows of statistics and,
/// when update_running is set, folds the batch statistics into the running
/// buffers with the given momentum.
template <typename T>
Tensor<T> batchnorm(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& gamma,
                    const Tensor<T>& beta, BatchNormBuffers<T>& buffers, BNMode mode,
                    T momentum, T eps, bool update_running);

} // namespace ops
} // namespace egnn
