#include "egnn/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <random>
#include <sstream>

#include "binary_io.hpp"
#include "egnn/errors.hpp"

namespace egnn {

namespace {

constexpr char kMagic[4] = {'E', 'G', 'C', 'K'};
constexpr std::uint16_t kVersion = 1;

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

std::string format_g(double v) {
    char buf[48];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

// Directed query-row edge list (self-pairs excluded), optionally widened with
// the support->query direction.
void query_edge_indices(std::size_t n, std::size_t n_support, bool widen,
                        std::vector<std::size_t>& idx) {
    idx.clear();
    for (std::size_t i = n_support; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            if (j != i) idx.push_back(i * n + j);
    if (widen)
        for (std::size_t i = 0; i < n_support; ++i)
            for (std::size_t j = n_support; j < n; ++j) idx.push_back(i * n + j);
}

template <typename T>
double plain_query_edge_bce(const EpisodeGraph<T>& graph) {
    const std::size_t n = graph.num_nodes();
    const auto y = edge_label_matrix(graph.labels);
    auto e = graph.final_edges().intra.values();
    double acc = 0;
    std::size_t count = 0;
    for (std::size_t i = graph.n_support; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            if (j == i) continue;
            const double p =
                std::min(std::max(static_cast<double>(e[i * n + j]), 1e-7), 1.0 - 1e-7);
            acc += y[i * n + j] ? -std::log(p) : -std::log(1.0 - p);
            ++count;
        }
    return count ? acc / static_cast<double>(count) : 0.0;
}

} // namespace

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
    return splitmix64(a ^ splitmix64(b));
}

std::vector<double> TrainingConfig::lambdas() const {
    if (layer_lambda.empty()) return std::vector<double>(arch.layers, 1.0);
    return layer_lambda;
}

void TrainingConfig::validate() const {
    arch.validate();
    if (task_batch == 0) throw ConfigError("train: task_batch must be at least 1");
    if (total_episodes == 0) throw ConfigError("train: total_episodes must be positive");
    if (lr <= 0) throw ConfigError("train: lr must be positive");
    if (weight_decay < 0) throw ConfigError("train: weight_decay must be non-negative");
    if (lr_halve_interval == 0) throw ConfigError("train: lr_halve_interval must be positive");
    const auto lam = lambdas();
    if (lam.size() != arch.layers)
        throw ConfigError("train: lambda count " + std::to_string(lam.size()) +
                          " does not match layer count " + std::to_string(arch.layers));
    bool any = false;
    for (double l : lam) {
        if (l < 0) throw ConfigError("train: lambda values must be non-negative");
        any = any || l > 0;
    }
    if (!any) throw ConfigError("train: at least one lambda must be positive");
}

template <typename T>
Tensor<T> edge_loss(Tape<T>& tape, const EpisodeGraph<T>& graph, std::span<const double> lambda,
                    bool widen_loss_edges, std::vector<T>* per_layer_bce) {
    if (graph.n_query == 0) throw ConfigError("edge_loss: episode has no query edges");
    if (graph.edge_feats.size() < 2)
        throw ConfigError("edge_loss: graph was run without per-layer snapshots");
    const std::size_t layers = graph.edge_feats.size() - 1;
    if (lambda.size() != layers)
        throw ConfigError("edge_loss: lambda count does not match layer count");

    const std::size_t n = graph.num_nodes();
    std::vector<std::size_t> idx;
    query_edge_indices(n, graph.n_support, widen_loss_edges, idx);

    const auto y = edge_label_matrix(graph.labels);
    std::vector<T> target_values(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) target_values[i] = y[idx[i]] ? T(1) : T(0);
    const Tensor<T> targets = Tensor<T>::from_data({idx.size()}, std::move(target_values));

    if (per_layer_bce) per_layer_bce->clear();
    Tensor<T> total;
    for (std::size_t l = 0; l < layers; ++l) {
        Tensor<T> pred = ops::gather_flat(tape, graph.edge_feats[l + 1].intra, idx);
        Tensor<T> bce = ops::bce_loss(tape, pred, targets);
        if (per_layer_bce) per_layer_bce->push_back(bce.item());
        if (lambda[l] == 0) continue;
        Tensor<T> weighted = ops::scale(tape, bce, static_cast<T>(lambda[l]));
        total = total.valid() ? ops::add(tape, total, weighted) : weighted;
    }
    return total;
}

template <typename T>
EvalReport evaluate(const ModelParams<T>& params, const Dataset& dataset, const EvalConfig& cfg) {
    if (cfg.episodes == 0) throw ConfigError("evaluate: episode count must be positive");
    EvalReport report;
    double bce_sum = 0;
    for (std::size_t e = 0; e < cfg.episodes; ++e) {
        const std::uint64_t ep_seed = mix_seed(cfg.seed, e);
        Episode ep = sample_episode(dataset, cfg.split, cfg.n_way, cfg.k_shot,
                                    cfg.queries_per_class, cfg.labeled_ratio, ep_seed);
        GraphTask<T> task = make_graph_task<T>(dataset, ep, cfg.labeled_only);
        InferenceResult<T> res = run_inference(
            task, params,
            cfg.transductive ? InferenceMode::transductive : InferenceMode::non_transductive,
            cfg.graph, false);
        std::size_t correct = 0;
        for (std::size_t q = 0; q < res.predicted.size(); ++q)
            if (res.predicted[q] == ep.query_labels[q]) ++correct;
        report.per_episode_accuracy.push_back(static_cast<double>(correct) /
                                              static_cast<double>(res.predicted.size()));
        double ep_bce = 0;
        for (const auto& g : res.graphs) ep_bce += plain_query_edge_bce(g);
        bce_sum += ep_bce / static_cast<double>(res.graphs.size());
    }
    const auto& acc = report.per_episode_accuracy;
    const double n = static_cast<double>(acc.size());
    double mean = 0;
    for (double a : acc) mean += a;
    mean /= n;
    double var = 0;
    for (double a : acc) var += (a - mean) * (a - mean);
    report.mean_accuracy = mean;
    report.ci95_half = acc.size() > 1 ? 1.96 * std::sqrt(var / (n - 1)) / std::sqrt(n) : 0.0;
    report.mean_edge_bce = bce_sum / n;
    return report;
}

namespace {

void write_arch(io::ByteWriter& w, const ArchConfig& arch) {
    w.u8(static_cast<std::uint8_t>(arch.variant));
    w.u64(arch.emb_dim);
    w.u64(arch.layers);
    w.u64(arch.input_dim);
    w.u64(arch.mlp_hidden);
    w.u64(arch.image_channels);
    w.u64(arch.image_hw);
    for (std::size_t c : arch.conv_channels) w.u64(c);
    std::uint8_t pool_bits = 0;
    for (std::size_t i = 0; i < 4; ++i)
        if (arch.conv_pool[i]) pool_bits |= static_cast<std::uint8_t>(1u << i);
    w.u8(pool_bits);
    w.u64(arch.node_hidden);
    w.u64(arch.metric_hidden1);
    w.u64(arch.metric_hidden2);
    w.u8(arch.separate_dsim ? 1 : 0);
    w.f64(arch.leaky_slope);
    w.f64(arch.bn_momentum);
    w.f64(arch.bn_eps);
}

ArchConfig read_arch(io::ByteReader& r) {
    ArchConfig arch;
    arch.variant = static_cast<EmbeddingVariant>(r.u8("arch variant"));
    arch.emb_dim = r.u64("arch emb_dim");
    arch.layers = r.u64("arch layers");
    arch.input_dim = r.u64("arch input_dim");
    arch.mlp_hidden = r.u64("arch mlp_hidden");
    arch.image_channels = r.u64("arch image_channels");
    arch.image_hw = r.u64("arch image_hw");
    for (std::size_t i = 0; i < 4; ++i) arch.conv_channels[i] = r.u64("arch conv_channels");
    const std::uint8_t pool_bits = r.u8("arch pool bits");
    for (std::size_t i = 0; i < 4; ++i) arch.conv_pool[i] = (pool_bits >> i) & 1;
    arch.node_hidden = r.u64("arch node_hidden");
    arch.metric_hidden1 = r.u64("arch metric_hidden1");
    arch.metric_hidden2 = r.u64("arch metric_hidden2");
    arch.separate_dsim = r.u8("arch separate_dsim") != 0;
    arch.leaky_slope = r.f64("arch leaky_slope");
    arch.bn_momentum = r.f64("arch bn_momentum");
    arch.bn_eps = r.f64("arch bn_eps");
    return arch;
}

template <typename T>
void write_payload(io::ByteWriter& w, const Tensor<T>& t) {
    if constexpr (sizeof(T) == 4)
        for (T v : t.values()) w.f32(v);
    else
        for (T v : t.values()) w.f64(v);
}

template <typename T>
void read_payload(io::ByteReader& r, Tensor<T>& t, std::uint8_t dtype_size, const char* what) {
    auto dst = t.values_mut();
    for (T& v : dst)
        v = dtype_size == 4 ? static_cast<T>(r.f32(what)) : static_cast<T>(r.f64(what));
}

} // namespace

template <typename T>
void save_checkpoint(const std::string& path, TrainState<T>& state) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("checkpoint: cannot open '" + path + "' for writing");
    io::ByteWriter w(out);
    w.bytes(kMagic, 4);
    w.u16(kVersion);
    w.u8(static_cast<std::uint8_t>(sizeof(T)));
    w.u64(state.params.config_hash);
    w.u64(state.episode_count);
    write_arch(w, state.params.arch);

    auto tensors = state.params.named_tensors();
    w.u32(static_cast<std::uint32_t>(tensors.size()));
    for (auto& nt : tensors) {
        w.str(nt.name);
        w.u8(static_cast<std::uint8_t>(nt.tensor.rank()));
        for (std::size_t e : nt.tensor.shape()) w.u32(static_cast<std::uint32_t>(e));
        write_payload(w, nt.tensor);
    }

    const bool has_adam = !state.adam.first_moments().empty();
    w.u8(has_adam ? 1 : 0);
    if (has_adam) {
        w.u64(state.adam.step_count());
        const auto& cfg = state.adam.config();
        w.f64(static_cast<double>(cfg.lr));
        w.f64(static_cast<double>(state.adam.initial_lr()));
        w.f64(static_cast<double>(cfg.beta1));
        w.f64(static_cast<double>(cfg.beta2));
        w.f64(static_cast<double>(cfg.eps));
        w.f64(static_cast<double>(cfg.weight_decay));
        w.u32(static_cast<std::uint32_t>(state.adam.first_moments().size()));
        for (auto& m : state.adam.first_moments()) write_payload(w, m);
        for (auto& v : state.adam.second_moments()) write_payload(w, v);
    }
    w.str(state.rng_state);
    if (!out) throw DataError("checkpoint: write to '" + path + "' failed");
}

template <typename T>
TrainState<T> load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("checkpoint: cannot open '" + path + "'");
    io::ByteReader r(in, "checkpoint '" + path + "'");

    char magic[4];
    r.bytes(magic, 4, "magic");
    if (!std::equal(magic, magic + 4, kMagic))
        throw DataError("checkpoint '" + path + "': bad magic bytes at offset 0");
    const std::uint16_t version = r.u16("version");
    if (version != kVersion)
        throw DataError("checkpoint '" + path + "': unsupported version " +
                        std::to_string(version));
    const std::uint8_t dtype_size = r.u8("dtype");
    if (dtype_size != 4 && dtype_size != 8)
        throw DataError("checkpoint '" + path + "': invalid dtype size " +
                        std::to_string(dtype_size));

    TrainState<T> state;
    const std::uint64_t config_hash = r.u64("config hash");
    state.episode_count = r.u64("episode count");
    const ArchConfig arch = read_arch(r);
    state.params = init_params<T>(arch, 0);
    state.params.config_hash = config_hash;

    auto tensors = state.params.named_tensors();
    const std::uint32_t count = r.u32("tensor count");
    if (count != tensors.size())
        throw DataError("checkpoint '" + path + "': tensor count " + std::to_string(count) +
                        " does not match architecture (" + std::to_string(tensors.size()) + ")");
    for (auto& nt : tensors) {
        const std::string name = r.str("tensor name");
        if (name != nt.name)
            throw DataError("checkpoint '" + path + "': tensor '" + name + "' where '" +
                            nt.name + "' was expected");
        const std::uint8_t rank = r.u8("tensor rank");
        if (rank != nt.tensor.rank())
            throw DataError("checkpoint '" + path + "': rank mismatch for '" + name + "'");
        for (std::size_t a = 0; a < rank; ++a) {
            const std::uint32_t e = r.u32("tensor extent");
            if (e != nt.tensor.extent(a))
                throw DataError("checkpoint '" + path + "': shape mismatch for '" + name + "'");
        }
        read_payload(r, nt.tensor, dtype_size, "tensor payload");
    }

    const bool has_adam = r.u8("adam flag") != 0;
    if (has_adam) {
        const std::uint64_t step = r.u64("adam step");
        AdamConfig<T> cfg;
        const double lr = r.f64("adam lr");
        const double initial_lr = r.f64("adam initial lr");
        cfg.beta1 = static_cast<T>(r.f64("adam beta1"));
        cfg.beta2 = static_cast<T>(r.f64("adam beta2"));
        cfg.eps = static_cast<T>(r.f64("adam eps"));
        cfg.weight_decay = static_cast<T>(r.f64("adam weight decay"));
        cfg.lr = static_cast<T>(initial_lr);
        state.adam = AdamOptimizer<T>(cfg);
        state.adam.restore(step, static_cast<T>(lr));
        const std::uint32_t moments = r.u32("adam moment count");
        auto trainables = state.params.trainable_parameters();
        if (moments != trainables.size())
            throw DataError("checkpoint '" + path + "': optimizer moment count mismatch");
        for (auto& p : trainables) {
            state.adam.first_moments().push_back(Tensor<T>::zeros(p.tensor.shape()));
            read_payload(r, state.adam.first_moments().back(), dtype_size, "adam m");
        }
        for (auto& p : trainables) {
            state.adam.second_moments().push_back(Tensor<T>::zeros(p.tensor.shape()));
            read_payload(r, state.adam.second_moments().back(), dtype_size, "adam v");
        }
    }
    state.rng_state = r.str("rng state");
    r.expect_eof("checkpoint");
    return state;
}

template <typename T>
TrainResult<T> train(const TrainingConfig& config, const Dataset& dataset,
                     const std::string& run_dir, const std::string& resume_from,
                     std::ostream* console) {
    config.validate();
    if (dataset.split_size(Split::train) < config.n_way)
        throw ConfigError("train: train split has fewer classes than n_way");
    const auto lambda = config.lambdas();

    TrainResult<T> result;
    std::mt19937_64 sampler_rng;
    if (!resume_from.empty()) {
        result.state = load_checkpoint<T>(resume_from);
        if (result.state.params.config_hash != config.config_hash)
            throw ConfigError("train: checkpoint config hash does not match the run config; "
                              "refusing to resume");
        std::istringstream is(result.state.rng_state);
        is >> sampler_rng;
        if (!is) throw DataError("checkpoint: invalid rng state");
        result.iterations = result.state.episode_count / config.task_batch;
    } else {
        result.state.params = init_params<T>(config.arch, mix_seed(config.seed, 1));
        result.state.params.config_hash = config.config_hash;
        AdamConfig<T> acfg;
        acfg.lr = static_cast<T>(config.lr);
        acfg.weight_decay = static_cast<T>(config.weight_decay);
        result.state.adam = AdamOptimizer<T>(acfg);
        sampler_rng.seed(mix_seed(config.seed, 2));
    }
    auto& state = result.state;

    // Validation falls back to the train split when no val classes exist.
    const Split val_split = dataset.split_size(Split::val) >= config.n_way ? Split::val
                                                                           : Split::train;

    std::ofstream metrics;
    if (!run_dir.empty()) {
        std::filesystem::create_directories(run_dir);
        metrics.open(run_dir + "/metrics.tsv",
                     resume_from.empty() ? std::ios::trunc : std::ios::app);
        if (!metrics) throw DataError("train: cannot open metrics log in '" + run_dir + "'");
    }

    auto snapshot = [&](const std::string& name) {
        if (run_dir.empty()) return;
        std::ostringstream os;
        os << sampler_rng;
        state.rng_state = os.str();
        save_checkpoint(run_dir + "/" + name, state);
    };

    double best_acc = -1.0;
    while (state.episode_count < config.total_episodes) {
        const std::size_t batch = static_cast<std::size_t>(
            std::min<std::uint64_t>(config.task_batch,
                                    config.total_episodes - state.episode_count));
        const std::uint64_t iteration = result.iterations;

        double mean_loss = 0;
        std::vector<double> mean_layer_bce(config.arch.layers, 0.0);
        for (std::size_t m = 0; m < batch; ++m) {
            const std::uint64_t ep_seed = sampler_rng();
            try {
                Episode ep =
                    sample_episode(dataset, Split::train, config.n_way, config.k_shot,
                                   config.queries_per_class, config.labeled_ratio, ep_seed);
                GraphTask<T> task = make_graph_task<T>(dataset, ep, config.labeled_only);
                Tape<T> tape;
                EpisodeGraph<T> graph = forward_task(tape, task, state.params, config.graph,
                                                     BNMode::Batch, true, true);
                std::vector<T> layer_bce;
                Tensor<T> loss =
                    edge_loss(tape, graph, lambda, config.widen_loss_edges, &layer_bce);
                const double loss_value = static_cast<double>(loss.item());
                if (!std::isfinite(loss_value))
                    throw NumericsError("train: non-finite loss");
                mean_loss += loss_value / static_cast<double>(batch);
                for (std::size_t l = 0; l < layer_bce.size(); ++l)
                    mean_layer_bce[l] += static_cast<double>(layer_bce[l]) /
                                         static_cast<double>(batch);
                Tensor<T> scaled = ops::scale(tape, loss, T(1) / static_cast<T>(batch));
                tape.backward(scaled);
            } catch (const NumericsError& err) {
                throw NumericsError(std::string(err.what()) + " [episode seed " +
                                    std::to_string(ep_seed) + ", episode " +
                                    std::to_string(state.episode_count + m) + "]");
            }
        }

        auto trainables = state.params.trainable_parameters();
        for (auto& p : trainables) p.tensor.grad_mut(); // zero grads for loss-masked layers
        state.episode_count += batch;
        state.adam.apply_lr_schedule(state.episode_count, config.lr_halve_interval);
        state.adam.step(trainables);
        ++result.iterations;
        result.iteration_loss.push_back(mean_loss);

        if (metrics.is_open() || console) {
            std::string line = std::to_string(iteration) + '\t' + format_g(mean_loss);
            for (double b : mean_layer_bce) line += '\t' + format_g(b);
            line += '\t' + format_g(static_cast<double>(state.adam.lr()));
            if (metrics.is_open()) metrics << line << '\n';
            if (console) *console << line << '\n';
        }

        const bool crossed =
            config.eval_every > 0 &&
            (state.episode_count / config.eval_every) >
                ((state.episode_count - batch) / config.eval_every);
        if (crossed && dataset.split_size(val_split) >= config.n_way) {
            EvalConfig ec;
            ec.n_way = config.n_way;
            ec.k_shot = config.k_shot;
            ec.queries_per_class = config.queries_per_class;
            ec.labeled_ratio = config.labeled_ratio;
            ec.labeled_only = config.labeled_only;
            ec.transductive = config.eval_transductive;
            ec.episodes = config.eval_episodes;
            ec.seed = mix_seed(config.seed, 0xfeed0000ull + state.episode_count);
            ec.split = val_split;
            ec.graph = config.graph;
            EvalReport report = evaluate(state.params, dataset, ec);
            std::string line = "VAL\t" + std::to_string(iteration) + '\t' +
                               format_g(report.mean_accuracy) + '\t' +
                               format_g(report.ci95_half);
            if (metrics.is_open()) metrics << line << '\n';
            if (console) *console << line << '\n';
            if (report.mean_accuracy > best_acc) {
                best_acc = report.mean_accuracy;
                result.best_val_accuracy = best_acc;
                result.best_params = clone_params(state.params);
                snapshot("best.egck");
            }
            snapshot("latest.egck");
        }
    }

    snapshot("latest.egck");
    if (!result.best_params) {
        // No validation ran; the final model doubles as best.
        result.best_params = clone_params(state.params);
        snapshot("best.egck");
    }
    {
        std::ostringstream os;
        os << sampler_rng;
        state.rng_state = os.str();
    }
    return result;
}

#define EGNN_INSTANTIATE_TRAINING(T)                                                          \
    template Tensor<T> edge_loss<T>(Tape<T>&, const EpisodeGraph<T>&, std::span<const double>,\
                                    bool, std::vector<T>*);                                   \
    template EvalReport evaluate<T>(const ModelParams<T>&, const Dataset&, const EvalConfig&);\
    template void save_checkpoint<T>(const std::string&, TrainState<T>&);                     \
    template TrainState<T> load_checkpoint<T>(const std::string&);                            \
    template TrainResult<T> train<T>(const TrainingConfig&, const Dataset&, const std::string&,\
                                     const std::string&, std::ostream*);

EGNN_INSTANTIATE_TRAINING(float)
EGNN_INSTANTIATE_TRAINING(double)

#undef EGNN_INSTANTIATE_TRAINING

} // namespace egnn
