#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "egnn/adam.hpp"
#include "egnn/episodes.hpp"
#include "egnn/graph.hpp"
#include "egnn/networks.hpp"

namespace egnn {

struct TrainingConfig {
    ArchConfig arch;

    // episode shape
    std::size_t n_way = 5, k_shot = 5, queries_per_class = 5;
    double labeled_ratio = 1.0;
    bool labeled_only = false;

    // optimization
    std::size_t task_batch = 8; // episodes per update
    std::uint64_t total_episodes = 5000;
    double lr = 5e-4;
    double weight_decay = 1e-6;
    std::uint64_t lr_halve_interval = 2000;
    std::vector<double> layer_lambda; // per-layer loss weights; empty -> all 1

    // validation cadence (in episodes; 0 disables)
    std::uint64_t eval_every = 500;
    std::size_t eval_episodes = 100;
    bool eval_transductive = true;

    std::uint64_t seed = 1;
    std::uint64_t config_hash = 0; // provenance tag carried into checkpoints

    EgnnOptions graph;            // ablation flags
    bool widen_loss_edges = false; // include support->query direction in the loss

    std::vector<double> lambdas() const;
    void validate() const;
};

struct EvalConfig {
    std::size_t n_way = 5, k_shot = 5, queries_per_class = 5;
    double labeled_ratio = 1.0;
    bool labeled_only = false;
    bool transductive = true;
    std::size_t episodes = 600;
    std::uint64_t seed = 9000;
    Split split = Split::test;
    EgnnOptions graph;
};

struct EvalReport {
    double mean_accuracy = 0;
    double ci95_half = 0;     // normal-approximation half-width over episodes
    double mean_edge_bce = 0; // final-layer BCE over query edges
    std::vector<double> per_episode_accuracy;
};

/// Layered edge loss: sum over layers of lambda_l * BCE between ground-truth
/// edge labels and predicted intra strengths over directed query-row edges
/// (self-pairs excluded). The graph must retain per-layer snapshots.
/// per_layer_bce, when given, receives the unweighted per-layer BCE values.
template <typename T>
Tensor<T> edge_loss(Tape<T>& tape, const EpisodeGraph<T>& graph, std::span<const double> lambda,
                    bool widen_loss_edges, std::vector<T>* per_layer_bce = nullptr);

template <typename T>
EvalReport evaluate(const ModelParams<T>& params, const Dataset& dataset, const EvalConfig& cfg);

/// Everything needed to continue training bit-identically.
template <typename T>
struct TrainState {
    ModelParams<T> params;
    AdamOptimizer<T> adam;
    std::uint64_t episode_count = 0;
    std::string rng_state; // serialized episode-sampler generator
};

template <typename T>
void save_checkpoint(const std::string& path, TrainState<T>& state);

/// Loads a checkpoint; the stored precision is converted to T if they differ.
/// Config-hash policy is the caller's: the stored hash is returned inside
/// params.config_hash.
template <typename T>
TrainState<T> load_checkpoint(const std::string& path);

template <typename T>
struct TrainResult {
    TrainState<T> state;
    std::optional<ModelParams<T>> best_params;
    double best_val_accuracy = -1.0;
    std::uint64_t iterations = 0;
    std::vector<double> iteration_loss; // mean task loss per iteration
};

/// Episodic training loop. When run_dir is non-empty, writes metrics.tsv and
/// latest/best checkpoints there; resume_from continues from a checkpoint
/// (appending to the metrics log). console, when given, receives progress
/// lines.
template <typename T>
TrainResult<T> train(const TrainingConfig& config, const Dataset& dataset,
                     const std::string& run_dir, const std::string& resume_from = {},
                     std::ostream* console = nullptr);

/// Deterministic seed derivation for episode streams.
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

} // namespace egnn
