#include "egnn/graph.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>

#include "egnn/errors.hpp"

namespace egnn {

namespace {

constexpr double kDenomFloor = 1e-12;

template <typename T>
Tensor<T> offdiag_mask(std::size_t n) {
    Tensor<T> m = Tensor<T>::full({n, n}, T(1));
    auto v = m.values_mut();
    for (std::size_t i = 0; i < n; ++i) v[i * n + i] = T(0);
    return m;
}

template <typename T>
Tensor<T> diag_mask(std::size_t n) {
    Tensor<T> m = Tensor<T>::zeros({n, n});
    auto v = m.values_mut();
    for (std::size_t i = 0; i < n; ++i) v[i * n + i] = T(1);
    return m;
}

template <typename T>
void guard_min(const Tensor<T>& t, const char* what) {
    for (T v : t.values())
        if (static_cast<double>(v) < kDenomFloor)
            throw NumericsError(std::string("edge_update: ") + what + " below 1e-12 floor");
}

template <typename T>
void check_square_edges(const Tensor<T>& nodes, const EdgePair<T>& edges, const char* op) {
    const std::size_t n = nodes.extent(0);
    if (nodes.rank() != 2)
        throw ShapeError(std::string(op) + ": node features must be (n, dim)");
    for (const Tensor<T>* e : {&edges.intra, &edges.inter})
        if (e->rank() != 2 || e->extent(0) != n || e->extent(1) != n)
            throw ShapeError(std::string(op) + ": edge matrices must be (n, n) with n = " +
                             std::to_string(n));
}

// Stacks the rows of two tensors with identical trailing extents.
template <typename T>
Tensor<T> stack_rows(const Tensor<T>& a, const Tensor<T>& b) {
    Shape shape = a.shape();
    if (b.rank() != a.rank())
        throw ShapeError("stack_rows: rank mismatch");
    for (std::size_t i = 1; i < shape.size(); ++i)
        if (b.extent(i) != shape[i]) throw ShapeError("stack_rows: trailing extent mismatch");
    shape[0] += b.extent(0);
    std::vector<T> data;
    data.reserve(a.size() + b.size());
    data.insert(data.end(), a.values().begin(), a.values().end());
    data.insert(data.end(), b.values().begin(), b.values().end());
    return Tensor<T>::from_data(std::move(shape), std::move(data));
}

template <typename T>
Tensor<T> select_rows(const Tensor<T>& t, std::size_t row) {
    Shape shape = t.shape();
    const std::size_t stride = t.size() / shape[0];
    shape[0] = 1;
    std::vector<T> data(t.values().begin() + static_cast<std::ptrdiff_t>(row * stride),
                        t.values().begin() + static_cast<std::ptrdiff_t>((row + 1) * stride));
    return Tensor<T>::from_data(std::move(shape), std::move(data));
}

template <typename T>
std::uint64_t total_pair_evals(const ModelParams<T>& params) {
    std::uint64_t total = 0;
    for (const auto& net : params.metric_nets) total += net.pair_evals;
    for (const auto& net : params.dsim_nets) total += net.pair_evals;
    return total;
}

void check_class_coverage(const std::vector<int>& labels, const std::vector<std::uint8_t>& labeled,
                          std::size_t n_support, std::size_t n_way) {
    std::vector<bool> seen(n_way, false);
    for (std::size_t i = 0; i < n_support; ++i)
        if (labeled[i]) {
            if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= n_way)
                throw ConfigError("episode: support label out of range");
            seen[static_cast<std::size_t>(labels[i])] = true;
        }
    for (std::size_t k = 0; k < n_way; ++k)
        if (!seen[k])
            throw ConfigError("episode: class " + std::to_string(k) +
                              " has no labeled support sample");
}

} // namespace

std::vector<std::uint8_t> edge_label_matrix(const std::vector<int>& labels) {
    const std::size_t n = labels.size();
    std::vector<std::uint8_t> y(n * n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) y[i * n + j] = labels[i] == labels[j] ? 1 : 0;
    return y;
}

template <typename T>
EdgePair<T> init_edges(const std::vector<int>& labels, const std::vector<std::uint8_t>& labeled,
                       const EgnnOptions&) {
    const std::size_t n = labels.size();
    if (labeled.size() != n)
        throw ShapeError("init_edges: labels and labeled mask must have equal length");
    EdgePair<T> e{Tensor<T>::zeros({n, n}), Tensor<T>::zeros({n, n})};
    auto e1 = e.intra.values_mut();
    auto e2 = e.inter.values_mut();
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            // Self-pairs are always same-class regardless of label
            // availability; without this, all query rows start identical and
            // transductive queries collapse onto one feature vector.
            T intra = T(0.5), inter = T(0.5);
            if (i == j) {
                intra = T(1);
                inter = T(0);
            } else if (labeled[i] && labeled[j]) {
                intra = labels[i] == labels[j] ? T(1) : T(0);
                inter = T(1) - intra;
            }
            e1[i * n + j] = intra;
            e2[i * n + j] = inter;
        }
    return e;
}

template <typename T>
Tensor<T> aggregate_neighbors(Tape<T>& tape, const Tensor<T>& nodes, const EdgePair<T>& edges,
                              const EgnnOptions& opts) {
    check_square_edges(nodes, edges, "aggregate_neighbors");
    const std::size_t n = nodes.extent(0);
    const std::size_t d = nodes.extent(1);
    const Tensor<T> mask = opts.exclude_self_edges ? offdiag_mask<T>(n) : Tensor<T>();

    auto weighted_sum = [&](const Tensor<T>& e) {
        Tensor<T> rows = opts.exclude_self_edges ? ops::mul(tape, e, mask) : e;
        Tensor<T> norm = ops::l1_normalize(tape, rows, 1);
        return ops::matmul(tape, norm, nodes);
    };

    Tensor<T> intra_agg = weighted_sum(edges.intra);
    Tensor<T> inter_agg =
        opts.intra_only ? Tensor<T>::zeros({n, d}) : weighted_sum(edges.inter);
    return ops::concat(tape, {intra_agg, inter_agg}, 1);
}

template <typename T>
Tensor<T> node_update(Tape<T>& tape, const Tensor<T>& nodes, const EdgePair<T>& edges,
                      const NodeTransformNet<T>& net, const EgnnOptions& opts, BNMode mode,
                      bool update_running) {
    return net.forward(tape, aggregate_neighbors(tape, nodes, edges, opts), mode, update_running);
}

template <typename T>
EdgePair<T> edge_update(Tape<T>& tape, const Tensor<T>& nodes, const EdgePair<T>& edges,
                        const MetricNet<T>& sim, const MetricNet<T>* dsim,
                        const EgnnOptions& opts, BNMode mode, bool update_running) {
    check_square_edges(nodes, edges, "edge_update");
    const std::size_t n = nodes.extent(0);

    Tensor<T> diffs = ops::pairwise_abs_diff(tape, nodes);
    Tensor<T> f_sim = ops::reshape(tape, sim.forward(tape, diffs, mode, update_running), {n, n});
    Tensor<T> f_dsim =
        dsim ? ops::reshape(tape, dsim->forward(tape, diffs, mode, update_running), {n, n})
             : ops::sub(tape, Tensor<T>::full({n, n}, T(1)), f_sim);

    const Tensor<T> mask = opts.exclude_self_edges ? offdiag_mask<T>(n) : Tensor<T>();
    const Tensor<T> keep = opts.exclude_self_edges ? diag_mask<T>(n) : Tensor<T>();

    auto half_update = [&](const Tensor<T>& f, const Tensor<T>& prev) {
        Tensor<T> rows = opts.exclude_self_edges ? ops::mul(tape, prev, mask) : prev;
        Tensor<T> num = ops::mul(tape, f, rows);
        Tensor<T> mass = ops::reduce_sum(tape, rows, 1, true);   // (n,1)
        guard_min(mass, "edge mass");
        Tensor<T> weighted = ops::reduce_sum(tape, num, 1, true);
        Tensor<T> denom = ops::div(tape, weighted, mass);        // mean similarity per row
        guard_min(denom, "similarity denominator");
        Tensor<T> bar = ops::div(tape, num, denom);
        if (opts.exclude_self_edges)
            bar = ops::add(tape, bar, ops::mul(tape, prev, keep)); // self-pairs carry through
        return bar;
    };

    Tensor<T> bar1 = half_update(f_sim, edges.intra);
    Tensor<T> bar2 = half_update(f_dsim, edges.inter);
    Tensor<T> total = ops::add(tape, bar1, bar2);
    guard_min(total, "pair norm");
    return {ops::div(tape, bar1, total), ops::div(tape, bar2, total)};
}

template <typename T>
EpisodeGraph<T> forward_graph(Tape<T>& tape, const Tensor<T>& inputs,
                              const std::vector<int>& labels,
                              const std::vector<std::uint8_t>& labeled, std::size_t n_support,
                              std::size_t n_way, const ModelParams<T>& params,
                              const EgnnOptions& opts, BNMode mode, bool update_running,
                              bool keep_layers) {
    const std::size_t n = labels.size();
    if (inputs.extent(0) != n || labeled.size() != n)
        throw ShapeError("forward_graph: inputs, labels and labeled mask disagree on node count");
    if (n_support > n) throw ConfigError("forward_graph: more supports than nodes");
    if (n_way == 0) throw ConfigError("forward_graph: n_way must be positive");
    for (std::size_t i = n_support; i < n; ++i)
        if (labeled[i]) throw ConfigError("forward_graph: query nodes cannot be labeled");

    EpisodeGraph<T> graph;
    graph.labels = labels;
    graph.labeled = labeled;
    graph.n_support = n_support;
    graph.n_query = n - n_support;
    graph.n_way = n_way;

    Tensor<T> v = params.embedding.forward(tape, inputs, mode, update_running);
    EdgePair<T> e = init_edges<T>(labels, labeled, opts);
    if (keep_layers) {
        graph.node_feats.push_back(v);
        graph.edge_feats.push_back(e);
    }
    for (std::size_t l = 0; l < params.arch.layers; ++l) {
        v = node_update(tape, v, e, params.node_nets[l], opts, mode, update_running);
        const MetricNet<T>* dsim = params.arch.separate_dsim ? &params.dsim_nets[l] : nullptr;
        e = edge_update(tape, v, e, params.metric_nets[l], dsim, opts, mode, update_running);
        if (keep_layers) {
            graph.node_feats.push_back(v);
            graph.edge_feats.push_back(e);
        }
    }
    if (!keep_layers) {
        graph.node_feats.push_back(v);
        graph.edge_feats.push_back(e);
    }
    return graph;
}

template <typename T>
EpisodeGraph<T> forward_task(Tape<T>& tape, const GraphTask<T>& task,
                             const ModelParams<T>& params, const EgnnOptions& opts, BNMode mode,
                             bool update_running, bool keep_layers) {
    const std::size_t s = task.support_inputs.extent(0);
    const std::size_t q = task.query_inputs.valid() ? task.query_inputs.extent(0) : 0;
    if (q == 0) throw ConfigError("forward_task: empty query set");
    Tensor<T> inputs = stack_rows(task.support_inputs, task.query_inputs);
    std::vector<int> labels = task.support_labels;
    labels.insert(labels.end(), task.query_labels.begin(), task.query_labels.end());
    std::vector<std::uint8_t> labeled = task.support_labeled;
    labeled.insert(labeled.end(), q, 0);
    return forward_graph(tape, inputs, labels, labeled, s, task.n_way, params, opts, mode,
                         update_running, keep_layers);
}

template <typename T>
NodePrediction<T> predict_nodes(const Tensor<T>& intra_final, const std::vector<int>& labels,
                                const std::vector<std::uint8_t>& labeled, std::size_t n_support,
                                std::size_t n_way, bool symmetrize_votes) {
    const std::size_t n = labels.size();
    if (intra_final.rank() != 2 || intra_final.extent(0) != n || intra_final.extent(1) != n)
        throw ShapeError("predict_nodes: edge matrix must be (n, n)");
    check_class_coverage(labels, labeled, n_support, n_way);

    auto e = intra_final.values();
    NodePrediction<T> pred;
    for (std::size_t i = n_support; i < n; ++i) {
        std::vector<T> votes(n_way, T(0));
        for (std::size_t j = 0; j < n_support; ++j) {
            if (!labeled[j]) continue;
            const T y = symmetrize_votes ? (e[i * n + j] + e[j * n + i]) / T(2) : e[i * n + j];
            votes[static_cast<std::size_t>(labels[j])] += y;
        }
        T best = votes[0];
        std::size_t arg = 0;
        for (std::size_t k = 1; k < n_way; ++k)
            if (votes[k] > best) {
                best = votes[k];
                arg = k;
            }
        std::vector<T> probs(n_way);
        T sum = 0;
        for (std::size_t k = 0; k < n_way; ++k) {
            probs[k] = std::exp(votes[k] - best);
            sum += probs[k];
        }
        for (T& p : probs) p /= sum;
        pred.predicted.push_back(static_cast<int>(arg));
        pred.probs.push_back(std::move(probs));
        pred.votes.push_back(std::move(votes));
    }
    return pred;
}

template <typename T>
InferenceResult<T> run_inference(const GraphTask<T>& task, const ModelParams<T>& params,
                                 InferenceMode mode, const EgnnOptions& opts, bool keep_layers) {
    const std::size_t s = task.support_inputs.extent(0);
    const std::size_t q = task.query_inputs.valid() ? task.query_inputs.extent(0) : 0;
    if (q == 0) throw ConfigError("run_inference: empty query set");
    check_class_coverage(task.support_labels, task.support_labeled, s, task.n_way);

    InferenceResult<T> result;
    const std::uint64_t evals_before = total_pair_evals(params);

    auto run_one = [&](const GraphTask<T>& subtask) {
        Tape<T> tape;
        tape.set_recording(false);
        EpisodeGraph<T> graph =
            forward_task(tape, subtask, params, opts, BNMode::Running, false, keep_layers);
        NodePrediction<T> pred = predict_nodes(graph.final_edges().intra, graph.labels,
                                               graph.labeled, graph.n_support, task.n_way,
                                               opts.symmetrize_votes);
        for (std::size_t i = 0; i < pred.predicted.size(); ++i) {
            result.predicted.push_back(pred.predicted[i]);
            result.probs.push_back(std::move(pred.probs[i]));
        }
        result.graphs.push_back(std::move(graph));
    };

    if (mode == InferenceMode::transductive) {
        run_one(task);
    } else {
        for (std::size_t i = 0; i < q; ++i) {
            GraphTask<T> sub;
            sub.support_inputs = task.support_inputs;
            sub.support_labels = task.support_labels;
            sub.support_labeled = task.support_labeled;
            sub.query_inputs = select_rows(task.query_inputs, i);
            sub.query_labels = {task.query_labels[i]};
            sub.n_way = task.n_way;
            run_one(sub);
        }
    }
    result.metric_pair_evals = total_pair_evals(params) - evals_before;
    return result;
}

template <typename T>
void write_edge_snapshot(std::ostream& os, const Tensor<T>& intra, std::size_t n_way,
                         std::size_t k_shot, std::size_t queries_per_class,
                         std::ptrdiff_t layer_index) {
    if (intra.rank() != 2 || intra.extent(0) != intra.extent(1))
        throw ShapeError("write_edge_snapshot: edge matrix must be square");
    const std::size_t n = intra.extent(0);
    auto v = intra.values();
    for (T x : v)
        if (x < T(-1e-9) || x > T(1) + T(1e-9))
            throw NumericsError("write_edge_snapshot: edge strength outside [0,1]");
    os << n << ' ' << n_way << ' ' << k_shot << ' ' << queries_per_class << ' ' << layer_index
       << '\n';
    char buf[48];
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(v[i * n + j]));
            os << (j ? " " : "") << buf;
        }
        os << '\n';
    }
}

template <typename T>
void write_node_features(std::ostream& os, const Tensor<T>& nodes) {
    if (nodes.rank() != 2) throw ShapeError("write_node_features: expected (n, dim) features");
    const std::size_t n = nodes.extent(0), d = nodes.extent(1);
    auto v = nodes.values();
    char buf[48];
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
            std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(v[i * d + j]));
            os << (j ? " " : "") << buf;
        }
        os << '\n';
    }
}

#define EGNN_INSTANTIATE_GRAPH(T)                                                              \
    template EdgePair<T> init_edges<T>(const std::vector<int>&,                               \
                                       const std::vector<std::uint8_t>&, const EgnnOptions&); \
    template Tensor<T> aggregate_neighbors<T>(Tape<T>&, const Tensor<T>&, const EdgePair<T>&, \
                                              const EgnnOptions&);                            \
    template Tensor<T> node_update<T>(Tape<T>&, const Tensor<T>&, const EdgePair<T>&,         \
                                      const NodeTransformNet<T>&, const EgnnOptions&, BNMode, \
                                      bool);                                                  \
    template EdgePair<T> edge_update<T>(Tape<T>&, const Tensor<T>&, const EdgePair<T>&,       \
                                        const MetricNet<T>&, const MetricNet<T>*,             \
                                        const EgnnOptions&, BNMode, bool);                    \
    template EpisodeGraph<T> forward_graph<T>(                                                \
        Tape<T>&, const Tensor<T>&, const std::vector<int>&, const std::vector<std::uint8_t>&,\
        std::size_t, std::size_t, const ModelParams<T>&, const EgnnOptions&, BNMode, bool,    \
        bool);                                                                                \
    template EpisodeGraph<T> forward_task<T>(Tape<T>&, const GraphTask<T>&,                   \
                                             const ModelParams<T>&, const EgnnOptions&,       \
                                             BNMode, bool, bool);                             \
    template NodePrediction<T> predict_nodes<T>(const Tensor<T>&, const std::vector<int>&,    \
                                                const std::vector<std::uint8_t>&, std::size_t,\
                                                std::size_t, bool);                           \
    template InferenceResult<T> run_inference<T>(const GraphTask<T>&, const ModelParams<T>&,  \
                                                 InferenceMode, const EgnnOptions&, bool);    \
    template void write_edge_snapshot<T>(std::ostream&, const Tensor<T>&, std::size_t,        \
                                         std::size_t, std::size_t, std::ptrdiff_t);           \
    template void write_node_features<T>(std::ostream&, const Tensor<T>&);

EGNN_INSTANTIATE_GRAPH(float)
EGNN_INSTANTIATE_GRAPH(double)

#undef EGNN_INSTANTIATE_GRAPH

} // namespace egnn
