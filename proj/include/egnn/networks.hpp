#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "egnn/adam.hpp"
#include "egnn/ops.hpp"
#include "egnn/tensor.hpp"

namespace egnn {

enum class EmbeddingVariant : std::uint8_t { mlp = 0, conv4 = 1 };

/// Architecture description. Deliberately contains nothing tied to the
/// episode shape (way/shot/query counts), so one parameter set serves any
/// task size.
struct ArchConfig {
    EmbeddingVariant variant = EmbeddingVariant::mlp;
    std::size_t emb_dim = 16;
    std::size_t layers = 3;

    // mlp embedding: input_dim -> mlp_hidden -> mlp_hidden -> emb_dim
    std::size_t input_dim = 16;
    std::size_t mlp_hidden = 0; // 0 -> 2 * emb_dim

    // conv4 embedding on (channels, image_hw, image_hw) inputs
    std::size_t image_channels = 1;
    std::size_t image_hw = 16;
    std::array<std::size_t, 4> conv_channels{16, 16, 32, 32};
    std::array<bool, 4> conv_pool{true, true, false, false};

    // node transform: 2*emb_dim -> node_hidden -> emb_dim
    std::size_t node_hidden = 0; // 0 -> 2 * emb_dim
    // metric: emb_dim -> metric_hidden1 -> metric_hidden2 -> 1 -> sigmoid
    std::size_t metric_hidden1 = 0; // 0 -> emb_dim
    std::size_t metric_hidden2 = 0; // 0 -> max(emb_dim / 2, 1)

    bool separate_dsim = false; // independently parameterized dissimilarity net
    double leaky_slope = 0.01;
    double bn_momentum = 0.1;
    double bn_eps = 1e-5;

    std::size_t mlp_hidden_or_default() const { return mlp_hidden ? mlp_hidden : 2 * emb_dim; }
    std::size_t node_hidden_or_default() const { return node_hidden ? node_hidden : 2 * emb_dim; }
    std::size_t metric_hidden1_or_default() const { return metric_hidden1 ? metric_hidden1 : emb_dim; }
    std::size_t metric_hidden2_or_default() const {
        return metric_hidden2 ? metric_hidden2 : std::max<std::size_t>(emb_dim / 2, 1);
    }

    void validate() const;
};

template <typename T>
struct LinearLayer {
    Tensor<T> weight; // (in, out)
    Tensor<T> bias;   // (out)

    Tensor<T> forward(Tape<T>& tape, const Tensor<T>& x) const {
        return ops::add(tape, ops::matmul(tape, x, weight), bias);
    }
};

template <typename T>
struct BatchNormLayer {
    Tensor<T> gamma; // (channels)
    Tensor<T> beta;  // (channels)
    BatchNormBuffers<T> buffers;
    T momentum = T(0.1);
    T eps = T(1e-5);

    Tensor<T> forward(Tape<T>& tape, const Tensor<T>& x, BNMode mode, bool update_running) const {
        auto& self = const_cast<BatchNormLayer&>(*this);
        return ops::batchnorm(tape, x, gamma, beta, self.buffers, mode, momentum, eps,
                              update_running);
    }
};

template <typename T>
struct ConvBlock {
    Tensor<T> kernel; // (out_ch, in_ch, 3, 3)
    Tensor<T> bias;   // (out_ch)
    BatchNormLayer<T> bn;
    bool pool = false;
};

/// f_emb: maps raw samples to length-emb_dim node features.
template <typename T>
struct EmbeddingNet {
    EmbeddingVariant variant = EmbeddingVariant::mlp;
    T leaky_slope = T(0.01);

    // mlp variant
    LinearLayer<T> mlp_l1, mlp_l2, mlp_out;
    BatchNormLayer<T> mlp_bn1, mlp_bn2;

    // conv4 variant
    std::vector<ConvBlock<T>> blocks;
    LinearLayer<T> proj;

    /// samples: (n, input_dim) for mlp, (n, C, H, W) for conv4.
    Tensor<T> forward(Tape<T>& tape, const Tensor<T>& samples, BNMode mode,
                      bool update_running) const;
};

/// f_v: maps the concatenated intra/inter aggregation (n, 2*emb_dim) to
/// updated node features (n, emb_dim).
template <typename T>
struct NodeTransformNet {
    LinearLayer<T> hidden;
    BatchNormLayer<T> bn;
    LinearLayer<T> out;
    T leaky_slope = T(0.01);

    Tensor<T> forward(Tape<T>& tape, const Tensor<T>& x, BNMode mode, bool update_running) const;
};

/// f_e: maps per-pair |v_i - v_j| rows (p, emb_dim) to similarity scores
/// (p, 1) in the open interval (0,1).
template <typename T>
struct MetricNet {
    LinearLayer<T> h1, h2, out;
    BatchNormLayer<T> bn1, bn2;
    T leaky_slope = T(0.01);
    mutable std::uint64_t pair_evals = 0; // instrumentation: rows scored so far

    Tensor<T> forward(Tape<T>& tape, const Tensor<T>& diffs, BNMode mode,
                      bool update_running) const;
};

/// All trainable state: theta_emb plus per-layer theta_v and theta_e.
template <typename T>
struct ModelParams {
    ArchConfig arch;
    EmbeddingNet<T> embedding;
    std::vector<NodeTransformNet<T>> node_nets;  // one per layer
    std::vector<MetricNet<T>> metric_nets;       // one per layer
    std::vector<MetricNet<T>> dsim_nets;         // per layer iff arch.separate_dsim
    std::uint64_t config_hash = 0;

    /// Fixed-order traversal of every tensor (trainable parameters and
    /// batchnorm running buffers). The order defines the optimizer slot and
    /// serialization layout.
    std::vector<NamedTensor<T>> named_tensors();
    std::vector<NamedTensor<T>> trainable_parameters();
    std::size_t parameter_count();
};

/// Builds a fresh parameter set with fan-in-scaled uniform weights,
/// batchnorm scale 1 / shift 0, running stats (0, 1). Deterministic per seed.
template <typename T>
ModelParams<T> init_params(const ArchConfig& arch, std::uint64_t seed);

/// Deep copy (fresh storage for every tensor).
template <typename T>
ModelParams<T> clone_params(const ModelParams<T>& params);

/// Symmetric similarity score for a single feature pair; runs the metric net
/// on |a - b| with frozen statistics.
template <typename T>
T metric_score(const Tensor<T>& a, const Tensor<T>& b, const MetricNet<T>& net);

} // namespace egnn
