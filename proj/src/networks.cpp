#include "egnn/networks.hpp"

#include <cmath>
#include <random>

#include "egnn/errors.hpp"

namespace egnn {

void ArchConfig::validate() const {
    if (emb_dim == 0) throw ConfigError("arch: emb_dim must be positive");
    if (layers == 0) throw ConfigError("arch: at least one layer is required");
    if (variant == EmbeddingVariant::mlp) {
        if (input_dim == 0) throw ConfigError("arch: input_dim must be positive");
    } else {
        if (image_channels == 0 || image_hw == 0)
            throw ConfigError("arch: image dimensions must be positive");
        std::size_t hw = image_hw;
        for (bool pool : conv_pool) {
            if (pool) hw /= 2;
            if (hw == 0) throw ConfigError("arch: pooling reduces the image to nothing");
        }
        for (std::size_t c : conv_channels)
            if (c == 0) throw ConfigError("arch: conv channel counts must be positive");
    }
}

namespace {

// Visits every tensor of the model in a fixed order; this order defines the
// optimizer slots and the checkpoint layout.
template <typename T, typename F>
void visit_linear(LinearLayer<T>& l, const std::string& prefix, F&& f) {
    f(prefix + ".weight", l.weight, true);
    f(prefix + ".bias", l.bias, true);
}

template <typename T, typename F>
void visit_bn(BatchNormLayer<T>& bn, const std::string& prefix, F&& f) {
    f(prefix + ".gamma", bn.gamma, true);
    f(prefix + ".beta", bn.beta, true);
    f(prefix + ".running_mean", bn.buffers.running_mean, false);
    f(prefix + ".running_var", bn.buffers.running_var, false);
}

template <typename T, typename F>
void visit_metric(MetricNet<T>& net, const std::string& prefix, F&& f) {
    visit_linear(net.h1, prefix + ".h1", f);
    visit_bn(net.bn1, prefix + ".bn1", f);
    visit_linear(net.h2, prefix + ".h2", f);
    visit_bn(net.bn2, prefix + ".bn2", f);
    visit_linear(net.out, prefix + ".out", f);
}

template <typename T, typename F>
void visit_all(ModelParams<T>& p, F&& f) {
    auto& emb = p.embedding;
    if (emb.variant == EmbeddingVariant::mlp) {
        visit_linear(emb.mlp_l1, "emb.l1", f);
        visit_bn(emb.mlp_bn1, "emb.bn1", f);
        visit_linear(emb.mlp_l2, "emb.l2", f);
        visit_bn(emb.mlp_bn2, "emb.bn2", f);
        visit_linear(emb.mlp_out, "emb.out", f);
    } else {
        for (std::size_t i = 0; i < emb.blocks.size(); ++i) {
            const std::string prefix = "emb.block" + std::to_string(i);
            f(prefix + ".kernel", emb.blocks[i].kernel, true);
            f(prefix + ".bias", emb.blocks[i].bias, true);
            visit_bn(emb.blocks[i].bn, prefix + ".bn", f);
        }
        visit_linear(emb.proj, "emb.proj", f);
    }
    for (std::size_t l = 0; l < p.node_nets.size(); ++l) {
        const std::string prefix = "node." + std::to_string(l);
        visit_linear(p.node_nets[l].hidden, prefix + ".hidden", f);
        visit_bn(p.node_nets[l].bn, prefix + ".bn", f);
        visit_linear(p.node_nets[l].out, prefix + ".out", f);
    }
    for (std::size_t l = 0; l < p.metric_nets.size(); ++l)
        visit_metric(p.metric_nets[l], "metric." + std::to_string(l), f);
    for (std::size_t l = 0; l < p.dsim_nets.size(); ++l)
        visit_metric(p.dsim_nets[l], "dsim." + std::to_string(l), f);
}

template <typename T>
LinearLayer<T> make_linear(std::size_t in, std::size_t out) {
    LinearLayer<T> l;
    l.weight = Tensor<T>::zeros({in, out}, true);
    l.bias = Tensor<T>::zeros({out}, true);
    return l;
}

template <typename T>
BatchNormLayer<T> make_bn(std::size_t channels, const ArchConfig& arch) {
    BatchNormLayer<T> bn;
    bn.gamma = Tensor<T>::full({channels}, T(1), true);
    bn.beta = Tensor<T>::zeros({channels}, true);
    bn.buffers.running_mean = Tensor<T>::zeros({channels});
    bn.buffers.running_var = Tensor<T>::full({channels}, T(1));
    bn.momentum = static_cast<T>(arch.bn_momentum);
    bn.eps = static_cast<T>(arch.bn_eps);
    return bn;
}

template <typename T>
MetricNet<T> make_metric(const ArchConfig& arch) {
    MetricNet<T> net;
    const std::size_t h1 = arch.metric_hidden1_or_default();
    const std::size_t h2 = arch.metric_hidden2_or_default();
    net.h1 = make_linear<T>(arch.emb_dim, h1);
    net.bn1 = make_bn<T>(h1, arch);
    net.h2 = make_linear<T>(h1, h2);
    net.bn2 = make_bn<T>(h2, arch);
    net.out = make_linear<T>(h2, 1);
    net.leaky_slope = static_cast<T>(arch.leaky_slope);
    return net;
}

// Allocates the full structure with zero weights; initialization fills it.
template <typename T>
ModelParams<T> build_structure(const ArchConfig& arch) {
    arch.validate();
    ModelParams<T> p;
    p.arch = arch;
    auto& emb = p.embedding;
    emb.variant = arch.variant;
    emb.leaky_slope = static_cast<T>(arch.leaky_slope);
    if (arch.variant == EmbeddingVariant::mlp) {
        const std::size_t hidden = arch.mlp_hidden_or_default();
        emb.mlp_l1 = make_linear<T>(arch.input_dim, hidden);
        emb.mlp_bn1 = make_bn<T>(hidden, arch);
        emb.mlp_l2 = make_linear<T>(hidden, hidden);
        emb.mlp_bn2 = make_bn<T>(hidden, arch);
        emb.mlp_out = make_linear<T>(hidden, arch.emb_dim);
    } else {
        std::size_t in_ch = arch.image_channels;
        std::size_t hw = arch.image_hw;
        for (std::size_t i = 0; i < 4; ++i) {
            ConvBlock<T> block;
            block.kernel = Tensor<T>::zeros({arch.conv_channels[i], in_ch, 3, 3}, true);
            block.bias = Tensor<T>::zeros({arch.conv_channels[i]}, true);
            block.bn = make_bn<T>(arch.conv_channels[i], arch);
            block.pool = arch.conv_pool[i];
            if (block.pool) hw /= 2;
            in_ch = arch.conv_channels[i];
            emb.blocks.push_back(std::move(block));
        }
        emb.proj = make_linear<T>(in_ch * hw * hw, arch.emb_dim);
    }
    for (std::size_t l = 0; l < arch.layers; ++l) {
        NodeTransformNet<T> node;
        const std::size_t hidden = arch.node_hidden_or_default();
        node.hidden = make_linear<T>(2 * arch.emb_dim, hidden);
        node.bn = make_bn<T>(hidden, arch);
        node.out = make_linear<T>(hidden, arch.emb_dim);
        node.leaky_slope = static_cast<T>(arch.leaky_slope);
        p.node_nets.push_back(std::move(node));
        p.metric_nets.push_back(make_metric<T>(arch));
        if (arch.separate_dsim) p.dsim_nets.push_back(make_metric<T>(arch));
    }
    return p;
}

} // namespace

template <typename T>
Tensor<T> EmbeddingNet<T>::forward(Tape<T>& tape, const Tensor<T>& samples, BNMode mode,
                                   bool update_running) const {
    if (variant == EmbeddingVariant::mlp) {
        if (samples.rank() < 2)
            throw ShapeError("embed: mlp variant expects (n, input_dim) samples, got " +
                             shape_str(samples.shape()));
        Tensor<T> x = samples;
        if (x.rank() > 2) // image-shaped samples flatten to vectors
            x = ops::reshape(tape, x, {x.extent(0), x.size() / x.extent(0)});
        auto h = ops::leaky_relu(
            tape, mlp_bn1.forward(tape, mlp_l1.forward(tape, x), mode, update_running),
            leaky_slope);
        h = ops::leaky_relu(
            tape, mlp_bn2.forward(tape, mlp_l2.forward(tape, h), mode, update_running),
            leaky_slope);
        return mlp_out.forward(tape, h);
    }
    if (samples.rank() != 4)
        throw ShapeError("embed: conv4 variant expects (n, c, h, w) samples, got " +
                         shape_str(samples.shape()));
    Tensor<T> h = samples;
    for (const auto& block : blocks) {
        h = ops::conv2d(tape, h, block.kernel, block.bias, 1, 1);
        h = block.bn.forward(tape, h, mode, update_running);
        h = ops::leaky_relu(tape, h, leaky_slope);
        if (block.pool) h = ops::max_pool2d(tape, h, 2);
    }
    const std::size_t n = h.extent(0);
    h = ops::reshape(tape, h, {n, h.size() / n});
    return proj.forward(tape, h);
}

template <typename T>
Tensor<T> NodeTransformNet<T>::forward(Tape<T>& tape, const Tensor<T>& x, BNMode mode,
                                       bool update_running) const {
    auto h = ops::leaky_relu(tape, bn.forward(tape, hidden.forward(tape, x), mode, update_running),
                             leaky_slope);
    return out.forward(tape, h);
}

template <typename T>
Tensor<T> MetricNet<T>::forward(Tape<T>& tape, const Tensor<T>& diffs, BNMode mode,
                                bool update_running) const {
    pair_evals += diffs.extent(0);
    auto h = ops::leaky_relu(tape, bn1.forward(tape, h1.forward(tape, diffs), mode, update_running),
                             leaky_slope);
    h = ops::leaky_relu(tape, bn2.forward(tape, h2.forward(tape, h), mode, update_running),
                        leaky_slope);
    auto s = ops::sigmoid(tape, out.forward(tape, h));
    // Keep scores strictly inside (0,1) so downstream ratios never collapse.
    return ops::clamp(tape, s, T(1e-7), T(1) - T(1e-7));
}

template <typename T>
std::vector<NamedTensor<T>> ModelParams<T>::named_tensors() {
    std::vector<NamedTensor<T>> out;
    visit_all(*this, [&](const std::string& name, Tensor<T>& t, bool trainable) {
        out.push_back({name, t, trainable});
    });
    return out;
}

template <typename T>
std::vector<NamedTensor<T>> ModelParams<T>::trainable_parameters() {
    std::vector<NamedTensor<T>> out;
    visit_all(*this, [&](const std::string& name, Tensor<T>& t, bool trainable) {
        if (trainable) out.push_back({name, t, true});
    });
    return out;
}

template <typename T>
std::size_t ModelParams<T>::parameter_count() {
    std::size_t n = 0;
    for (const auto& p : trainable_parameters()) n += p.tensor.size();
    return n;
}

template <typename T>
ModelParams<T> init_params(const ArchConfig& arch, std::uint64_t seed) {
    ModelParams<T> p = build_structure<T>(arch);
    std::mt19937_64 rng(seed);
    auto fill = [&rng](Tensor<T>& t, std::size_t fan_in) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        std::uniform_real_distribution<double> dist(-bound, bound);
        for (T& v : t.values_mut()) v = static_cast<T>(dist(rng));
    };
    auto fill_linear = [&](LinearLayer<T>& l) {
        fill(l.weight, l.weight.extent(0));
        fill(l.bias, l.weight.extent(0));
    };
    auto fill_metric = [&](MetricNet<T>& net) {
        fill_linear(net.h1);
        fill_linear(net.h2);
        fill_linear(net.out);
    };
    auto& emb = p.embedding;
    if (arch.variant == EmbeddingVariant::mlp) {
        fill_linear(emb.mlp_l1);
        fill_linear(emb.mlp_l2);
        fill_linear(emb.mlp_out);
    } else {
        for (auto& block : emb.blocks) {
            const std::size_t fan_in = block.kernel.extent(1) * 9;
            fill(block.kernel, fan_in);
            fill(block.bias, fan_in);
        }
        fill_linear(emb.proj);
    }
    for (auto& node : p.node_nets) {
        fill_linear(node.hidden);
        fill_linear(node.out);
    }
    for (auto& net : p.metric_nets) fill_metric(net);
    for (auto& net : p.dsim_nets) fill_metric(net);
    return p;
}

template <typename T>
ModelParams<T> clone_params(const ModelParams<T>& params) {
    ModelParams<T> copy = build_structure<T>(params.arch);
    copy.config_hash = params.config_hash;
    auto src = const_cast<ModelParams<T>&>(params).named_tensors();
    auto dst = copy.named_tensors();
    for (std::size_t i = 0; i < src.size(); ++i) {
        auto from = src[i].tensor.values();
        auto to = dst[i].tensor.values_mut();
        std::copy(from.begin(), from.end(), to.begin());
    }
    return copy;
}

template <typename T>
T metric_score(const Tensor<T>& a, const Tensor<T>& b, const MetricNet<T>& net) {
    if (a.shape() != b.shape() || a.rank() != 1)
        throw ShapeError("metric_score: expected two feature vectors of equal length");
    std::vector<T> diff(a.size());
    for (std::size_t i = 0; i < diff.size(); ++i)
        diff[i] = std::abs(a.values()[i] - b.values()[i]);
    Tape<T> tape;
    tape.set_recording(false);
    auto d = Tensor<T>::from_data({1, a.size()}, std::move(diff));
    return net.forward(tape, d, BNMode::Running, false).item();
}

#define EGNN_INSTANTIATE_NETWORKS(T)                                       \
    template struct EmbeddingNet<T>;                                       \
    template struct NodeTransformNet<T>;                                   \
    template struct MetricNet<T>;                                          \
    template struct ModelParams<T>;                                        \
    template ModelParams<T> init_params<T>(const ArchConfig&, std::uint64_t); \
    template ModelParams<T> clone_params<T>(const ModelParams<T>&);        \
    template T metric_score<T>(const Tensor<T>&, const Tensor<T>&, const MetricNet<T>&);

EGNN_INSTANTIATE_NETWORKS(float)
EGNN_INSTANTIATE_NETWORKS(double)

#undef EGNN_INSTANTIATE_NETWORKS

} // namespace egnn
