#include "egnn/episodes.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include "binary_io.hpp"
#include "egnn/errors.hpp"

namespace egnn {

namespace {
constexpr char kMagic[4] = {'E', 'G', 'D', 'S'};
constexpr std::uint16_t kVersion = 1;
} // namespace

std::span<const float> Dataset::sample(std::size_t cls, std::size_t idx) const {
    const std::size_t sz = sample_size();
    const std::size_t off = (cls * per_class + idx) * sz;
    return {payload.data() + off, sz};
}

std::pair<std::size_t, std::size_t> Dataset::split_range(Split split) const {
    switch (split) {
    case Split::train: return {0, split_train};
    case Split::val: return {split_train, split_train + split_val};
    case Split::test: return {split_train + split_val, split_train + split_val + split_test};
    }
    return {0, 0};
}

std::size_t Dataset::split_size(Split split) const {
    auto [lo, hi] = split_range(split);
    return hi - lo;
}

void Dataset::assign_splits(std::size_t train, std::size_t val, std::size_t test) {
    if (train + val + test != num_classes)
        throw ConfigError("splits: train + val + test = " + std::to_string(train + val + test) +
                          " classes, dataset has " + std::to_string(num_classes));
    split_train = train;
    split_val = val;
    split_test = test;
}

Dataset generate_synthetic(const SyntheticSpec& spec) {
    if (spec.classes == 0 || spec.per_class == 0)
        throw ConfigError("synthetic: classes and per_class must be positive");
    if (spec.sigma_within <= 0 || spec.sigma_between <= 0)
        throw ConfigError("synthetic: sigma_within and sigma_between must be positive");

    Dataset dataset;
    dataset.variant = spec.variant;
    dataset.num_classes = spec.classes;
    dataset.per_class = spec.per_class;

    std::mt19937_64 rng(spec.seed);
    std::normal_distribution<double> unit(0.0, 1.0);

    if (spec.variant == SyntheticVariant::gaussian_vectors) {
        if (spec.dim == 0) throw ConfigError("synthetic: dim must be positive");
        dataset.sample_shape = {spec.dim};
        dataset.payload.reserve(spec.classes * spec.per_class * spec.dim);
        std::vector<double> center(spec.dim);
        for (std::size_t c = 0; c < spec.classes; ++c) {
            for (double& v : center) v = spec.sigma_between * unit(rng);
            for (std::size_t s = 0; s < spec.per_class; ++s)
                for (std::size_t d = 0; d < spec.dim; ++d)
                    dataset.payload.push_back(
                        static_cast<float>(center[d] + spec.sigma_within * unit(rng)));
        }
        return dataset;
    }

    // procedural_images: per-class template of Gaussian bumps plus pixel noise
    if (spec.image_size == 0) throw ConfigError("synthetic: image_size must be positive");
    const std::size_t hw = spec.image_size;
    dataset.sample_shape = {1, hw, hw};
    dataset.payload.reserve(spec.classes * spec.per_class * hw * hw);
    std::uniform_real_distribution<double> pos(0.15 * hw, 0.85 * hw);
    const double width = hw / 6.0;
    std::vector<double> tpl(hw * hw);
    for (std::size_t c = 0; c < spec.classes; ++c) {
        std::fill(tpl.begin(), tpl.end(), 0.0);
        for (int bump = 0; bump < 3; ++bump) {
            const double cx = pos(rng), cy = pos(rng);
            const double amp = spec.sigma_between * unit(rng);
            for (std::size_t y = 0; y < hw; ++y)
                for (std::size_t x = 0; x < hw; ++x) {
                    const double dx = x - cx, dy = y - cy;
                    tpl[y * hw + x] += amp * std::exp(-(dx * dx + dy * dy) / (2 * width * width));
                }
        }
        for (std::size_t s = 0; s < spec.per_class; ++s)
            for (double t : tpl)
                dataset.payload.push_back(static_cast<float>(t + spec.sigma_within * unit(rng)));
    }
    return dataset;
}

void save_dataset(const Dataset& dataset, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("dataset: cannot open '" + path + "' for writing");
    io::ByteWriter w(out);
    w.bytes(kMagic, 4);
    w.u16(kVersion);
    w.u8(static_cast<std::uint8_t>(dataset.variant));
    w.u32(static_cast<std::uint32_t>(dataset.num_classes));
    w.u32(static_cast<std::uint32_t>(dataset.per_class));
    w.u8(static_cast<std::uint8_t>(dataset.sample_shape.size()));
    for (std::size_t e : dataset.sample_shape) w.u32(static_cast<std::uint32_t>(e));
    for (float v : dataset.payload) w.f32(v);
    if (!out) throw DataError("dataset: write to '" + path + "' failed");
}

Dataset load_dataset(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("dataset: cannot open '" + path + "'");
    io::ByteReader r(in, "dataset '" + path + "'");

    char magic[4];
    r.bytes(magic, 4, "magic");
    if (!std::equal(magic, magic + 4, kMagic))
        throw DataError("dataset '" + path + "': bad magic bytes at offset 0");
    const std::uint16_t version = r.u16("version");
    if (version != kVersion)
        throw DataError("dataset '" + path + "': unsupported format version " +
                        std::to_string(version));

    Dataset dataset;
    const std::uint8_t variant = r.u8("variant");
    if (variant > 1)
        throw DataError("dataset '" + path + "': unknown variant tag " + std::to_string(variant));
    dataset.variant = static_cast<SyntheticVariant>(variant);
    dataset.num_classes = r.u32("class count");
    dataset.per_class = r.u32("per-class count");
    const std::uint8_t rank = r.u8("shape rank");
    if (rank == 0 || rank > 4)
        throw DataError("dataset '" + path + "': implausible sample rank " + std::to_string(rank));
    for (std::uint8_t i = 0; i < rank; ++i) {
        const std::uint32_t e = r.u32("shape extent");
        if (e == 0) throw DataError("dataset '" + path + "': zero extent in sample shape");
        dataset.sample_shape.push_back(e);
    }
    const std::size_t count = dataset.num_classes * dataset.per_class * dataset.sample_size();
    dataset.payload.reserve(count);
    for (std::size_t i = 0; i < count; ++i) dataset.payload.push_back(r.f32("payload"));
    r.expect_eof("payload");
    dataset.split_train = dataset.num_classes; // callers reassign as needed
    return dataset;
}

Episode sample_episode(const Dataset& dataset, Split split, std::size_t n_way,
                       std::size_t k_shot, std::size_t queries_per_class, double labeled_ratio,
                       std::uint64_t seed) {
    if (n_way < 2) throw ConfigError("sampler: need at least 2 ways");
    if (k_shot == 0 || queries_per_class == 0)
        throw ConfigError("sampler: k_shot and queries_per_class must be positive");
    auto [lo, hi] = dataset.split_range(split);
    if (hi - lo < n_way)
        throw DataError("sampler: split has " + std::to_string(hi - lo) +
                        " classes, episode needs " + std::to_string(n_way));
    if (dataset.per_class < k_shot + queries_per_class)
        throw DataError("sampler: classes have " + std::to_string(dataset.per_class) +
                        " samples, episode needs " + std::to_string(k_shot + queries_per_class));
    if (!(labeled_ratio > 0.0 && labeled_ratio <= 1.0))
        throw ConfigError("sampler: labeled_ratio must be in (0, 1]");
    const double exact = labeled_ratio * static_cast<double>(k_shot);
    const std::size_t labeled_k = static_cast<std::size_t>(std::llround(exact));
    if (labeled_k == 0 || std::abs(exact - static_cast<double>(labeled_k)) > 1e-9)
        throw ConfigError("sampler: labeled_ratio * k_shot must be a positive integer");

    std::mt19937_64 rng(seed);
    Episode ep;
    ep.n_way = n_way;
    ep.k_shot = k_shot;
    ep.queries_per_class = queries_per_class;
    ep.seed = seed;

    std::vector<int> pool(hi - lo);
    std::iota(pool.begin(), pool.end(), static_cast<int>(lo));
    std::sample(pool.begin(), pool.end(), std::back_inserter(ep.classes),
                static_cast<std::ptrdiff_t>(n_way), rng);
    std::shuffle(ep.classes.begin(), ep.classes.end(), rng);

    std::vector<std::size_t> sample_pool(dataset.per_class);
    const std::size_t need = k_shot + queries_per_class;
    std::vector<std::vector<std::size_t>> picks(n_way);
    for (std::size_t w = 0; w < n_way; ++w) {
        std::iota(sample_pool.begin(), sample_pool.end(), std::size_t(0));
        std::sample(sample_pool.begin(), sample_pool.end(), std::back_inserter(picks[w]),
                    static_cast<std::ptrdiff_t>(need), rng);
        std::shuffle(picks[w].begin(), picks[w].end(), rng);
    }
    for (std::size_t w = 0; w < n_way; ++w) {
        const std::size_t cls = static_cast<std::size_t>(ep.classes[w]);
        for (std::size_t k = 0; k < k_shot; ++k) {
            ep.support.emplace_back(cls, picks[w][k]);
            ep.support_labels.push_back(static_cast<int>(w));
            ep.support_labeled.push_back(k < labeled_k ? 1 : 0);
        }
    }
    for (std::size_t w = 0; w < n_way; ++w) {
        const std::size_t cls = static_cast<std::size_t>(ep.classes[w]);
        for (std::size_t q = 0; q < queries_per_class; ++q) {
            ep.query.emplace_back(cls, picks[w][k_shot + q]);
            ep.query_labels.push_back(static_cast<int>(w));
        }
    }
    return ep;
}

template <typename T>
GraphTask<T> make_graph_task(const Dataset& dataset, const Episode& episode, bool labeled_only) {
    GraphTask<T> task;
    task.n_way = episode.n_way;

    auto gather = [&](const std::vector<std::pair<std::size_t, std::size_t>>& entries,
                      const std::vector<std::uint8_t>* keep) {
        std::vector<T> data;
        std::size_t rows = 0;
        for (std::size_t i = 0; i < entries.size(); ++i) {
            if (keep && !(*keep)[i]) continue;
            auto row = dataset.sample(entries[i].first, entries[i].second);
            for (float v : row) data.push_back(static_cast<T>(v));
            ++rows;
        }
        Shape shape = dataset.sample_shape;
        shape.insert(shape.begin(), rows);
        return Tensor<T>::from_data(std::move(shape), std::move(data));
    };

    if (labeled_only) {
        task.support_inputs = gather(episode.support, &episode.support_labeled);
        for (std::size_t i = 0; i < episode.support.size(); ++i)
            if (episode.support_labeled[i]) {
                task.support_labels.push_back(episode.support_labels[i]);
                task.support_labeled.push_back(1);
            }
    } else {
        task.support_inputs = gather(episode.support, nullptr);
        task.support_labels = episode.support_labels;
        task.support_labeled = episode.support_labeled;
    }
    task.query_inputs = gather(episode.query, nullptr);
    task.query_labels = episode.query_labels;
    return task;
}

template GraphTask<float> make_graph_task<float>(const Dataset&, const Episode&, bool);
template GraphTask<double> make_graph_task<double>(const Dataset&, const Episode&, bool);

} // namespace egnn
