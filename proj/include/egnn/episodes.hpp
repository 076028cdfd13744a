#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "egnn/graph.hpp"
#include "egnn/tensor.hpp"

namespace egnn {

enum class Split { train, val, test };

enum class SyntheticVariant : std::uint8_t { gaussian_vectors = 0, procedural_images = 1 };

struct SyntheticSpec {
    SyntheticVariant variant = SyntheticVariant::gaussian_vectors;
    std::size_t dim = 16;        // gaussian_vectors: feature dimension
    std::size_t image_size = 16; // procedural_images: square side
    std::size_t classes = 50;
    std::size_t per_class = 60;
    double sigma_within = 1.0;  // within-class spread
    double sigma_between = 10.0; // class center / template spread
    std::uint64_t seed = 1;
};

/// In-memory dataset with classes partitioned into contiguous train/val/test
/// ranges. Class id order is the storage order, so split assignment is
/// reproducible from the counts alone.
struct Dataset {
    SyntheticVariant variant = SyntheticVariant::gaussian_vectors;
    Shape sample_shape;
    std::size_t num_classes = 0;
    std::size_t per_class = 0;
    std::vector<float> payload; // (class, sample, element) row-major
    std::size_t split_train = 0, split_val = 0, split_test = 0;

    std::size_t sample_size() const { return shape_size(sample_shape); }
    std::span<const float> sample(std::size_t cls, std::size_t idx) const;
    std::pair<std::size_t, std::size_t> split_range(Split split) const;
    std::size_t split_size(Split split) const;
    void assign_splits(std::size_t train, std::size_t val, std::size_t test);
};

/// One N-way K-shot task. Support and query entries are grouped by class in
/// sampling order; labels are episode-local indices 0..n_way-1.
struct Episode {
    std::size_t n_way = 0, k_shot = 0, queries_per_class = 0;
    std::vector<int> classes; // global class ids, one per way
    std::vector<std::pair<std::size_t, std::size_t>> support; // (class id, sample idx)
    std::vector<int> support_labels;
    std::vector<std::uint8_t> support_labeled;
    std::vector<std::pair<std::size_t, std::size_t>> query;
    std::vector<int> query_labels;
    std::uint64_t seed = 0;
};

Dataset generate_synthetic(const SyntheticSpec& spec);

void save_dataset(const Dataset& dataset, const std::string& path);
Dataset load_dataset(const std::string& path);

/// Draws one episode deterministically from a seed: n_way distinct classes
/// uniformly from the split, k_shot + queries_per_class samples per class
/// without replacement, and a class-balanced labeled subset of the supports.
Episode sample_episode(const Dataset& dataset, Split split, std::size_t n_way,
                       std::size_t k_shot, std::size_t queries_per_class, double labeled_ratio,
                       std::uint64_t seed);

/// Materializes an episode as input tensors for the graph engine. In
/// labeled_only mode, unlabeled supports are dropped from the task entirely.
template <typename T>
GraphTask<T> make_graph_task(const Dataset& dataset, const Episode& episode, bool labeled_only);

} // namespace egnn
