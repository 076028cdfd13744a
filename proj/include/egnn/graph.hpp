#pragma once

#include <cstdint>
#include <iosfwd>
#include <vector>

#include "egnn/networks.hpp"
#include "egnn/ops.hpp"
#include "egnn/tensor.hpp"

namespace egnn {

struct EgnnOptions {
    bool intra_only = false;         // zero the inter-aggregation half of the node update
    bool exclude_self_edges = false; // drop self-pairs from all aggregation/normalization sums
    bool symmetrize_votes = false;   // average (i,j) and (j,i) edge strengths when voting
};

template <typename T>
struct EdgePair {
    Tensor<T> intra; // (n, n), strength that i and j share a class
    Tensor<T> inter; // (n, n), strength that they do not
};

/// Per-layer state of one fully-connected task graph. Nodes are ordered
/// supports first, then queries.
template <typename T>
struct EpisodeGraph {
    std::vector<Tensor<T>> node_feats;  // layer 0..L when retained, otherwise just the final
    std::vector<EdgePair<T>> edge_feats;
    std::vector<int> labels;            // episode-local class ids, per node
    std::vector<std::uint8_t> labeled;  // label visible to the model?
    std::size_t n_support = 0;
    std::size_t n_query = 0;
    std::size_t n_way = 0;

    std::size_t num_nodes() const { return labels.size(); }
    const Tensor<T>& final_nodes() const { return node_feats.back(); }
    const EdgePair<T>& final_edges() const { return edge_feats.back(); }
};

/// One episode materialized as raw input tensors, ready to run.
template <typename T>
struct GraphTask {
    Tensor<T> support_inputs; // (n_support, ...)
    Tensor<T> query_inputs;   // (n_query, ...)
    std::vector<int> support_labels;
    std::vector<std::uint8_t> support_labeled;
    std::vector<int> query_labels; // ground truth; never visible to the forward pass
    std::size_t n_way = 0;
};

/// Ground-truth edge labels: 1 iff the two nodes share a class. Symmetric,
/// diagonal all ones.
std::vector<std::uint8_t> edge_label_matrix(const std::vector<int>& labels);

/// Edge initialization from visible labels: [1,0] / [0,1] for pairs of
/// labeled nodes, [0.5,0.5] for any pair involving an unlabeled node.
template <typename T>
EdgePair<T> init_edges(const std::vector<int>& labels, const std::vector<std::uint8_t>& labeled,
                       const EgnnOptions& opts);

/// Row-normalized neighborhood aggregation: per node, the concatenation of
/// the intra-weighted and inter-weighted feature sums, shape (n, 2*emb_dim).
template <typename T>
Tensor<T> aggregate_neighbors(Tape<T>& tape, const Tensor<T>& nodes, const EdgePair<T>& edges,
                              const EgnnOptions& opts);

template <typename T>
Tensor<T> node_update(Tape<T>& tape, const Tensor<T>& nodes, const EdgePair<T>& edges,
                      const NodeTransformNet<T>& net, const EgnnOptions& opts, BNMode mode,
                      bool update_running);

/// Similarity-reweighted edge update followed by per-pair L1 normalization,
/// so every resulting pair satisfies intra + inter = 1.
template <typename T>
EdgePair<T> edge_update(Tape<T>& tape, const Tensor<T>& nodes, const EdgePair<T>& edges,
                        const MetricNet<T>& sim, const MetricNet<T>* dsim,
                        const EgnnOptions& opts, BNMode mode, bool update_running);

/// Full forward pass over all layers for one graph.
template <typename T>
EpisodeGraph<T> forward_graph(Tape<T>& tape, const Tensor<T>& inputs,
                              const std::vector<int>& labels,
                              const std::vector<std::uint8_t>& labeled, std::size_t n_support,
                              std::size_t n_way, const ModelParams<T>& params,
                              const EgnnOptions& opts, BNMode mode, bool update_running,
                              bool keep_layers);

/// Stacks an episode task into one transductive graph (supports first, then
/// all queries) and runs the forward pass.
template <typename T>
EpisodeGraph<T> forward_task(Tape<T>& tape, const GraphTask<T>& task,
                             const ModelParams<T>& params, const EgnnOptions& opts, BNMode mode,
                             bool update_running, bool keep_layers);

template <typename T>
struct NodePrediction {
    std::vector<int> predicted;         // per query
    std::vector<std::vector<T>> probs;  // per query, n_way softmax probabilities
    std::vector<std::vector<T>> votes;  // per query, raw per-class vote sums
};

/// Weighted voting over labeled supports using final intra-edge strengths,
/// read from the row of the node being classified.
template <typename T>
NodePrediction<T> predict_nodes(const Tensor<T>& intra_final, const std::vector<int>& labels,
                                const std::vector<std::uint8_t>& labeled, std::size_t n_support,
                                std::size_t n_way, bool symmetrize_votes);

enum class InferenceMode { transductive, non_transductive };

template <typename T>
struct InferenceResult {
    std::vector<int> predicted;
    std::vector<std::vector<T>> probs;
    std::vector<EpisodeGraph<T>> graphs; // one graph, or one per query in non-transductive mode
    std::uint64_t metric_pair_evals = 0;
};

/// Runs inference with frozen batchnorm statistics. Transductive mode places
/// all queries in a single graph; non-transductive mode runs one graph per
/// query (full support set plus that query).
template <typename T>
InferenceResult<T> run_inference(const GraphTask<T>& task, const ModelParams<T>& params,
                                 InferenceMode mode, const EgnnOptions& opts, bool keep_layers);

/// Plain-text export of one intra-strength matrix: a header line with
/// |T| N K T_q layer, then one space-separated row per node.
template <typename T>
void write_edge_snapshot(std::ostream& os, const Tensor<T>& intra, std::size_t n_way,
                         std::size_t k_shot, std::size_t queries_per_class,
                         std::ptrdiff_t layer_index);

/// Plain-text export of node features, one space-separated row per node.
template <typename T>
void write_node_features(std::ostream& os, const Tensor<T>& nodes);

} // namespace egnn
