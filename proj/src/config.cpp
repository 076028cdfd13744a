#include "egnn/config.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

#include "egnn/errors.hpp"

namespace egnn {

namespace {

enum class Kind { Bool, UInt, Float, Str, FloatList };

struct SchemaEntry {
    const char* key;
    const char* default_value;
    Kind kind;
    const char* choices; // comma-separated for Str keys with a fixed domain
};

const std::vector<SchemaEntry>& schema() {
    static const std::vector<SchemaEntry> entries = {
        {"data.variant", "gaussian", Kind::Str, "gaussian,images"},
        {"data.dim", "16", Kind::UInt, nullptr},
        {"data.image_size", "16", Kind::UInt, nullptr},
        {"data.classes", "50", Kind::UInt, nullptr},
        {"data.per_class", "60", Kind::UInt, nullptr},
        {"data.sigma_within", "1", Kind::Float, nullptr},
        {"data.sigma_between", "10", Kind::Float, nullptr},
        {"data.seed", "1", Kind::UInt, nullptr},
        {"split.train", "40", Kind::UInt, nullptr},
        {"split.val", "0", Kind::UInt, nullptr},
        {"split.test", "10", Kind::UInt, nullptr},
        {"arch.variant", "mlp", Kind::Str, "mlp,conv4"},
        {"arch.emb_dim", "16", Kind::UInt, nullptr},
        {"arch.layers", "3", Kind::UInt, nullptr},
        {"arch.mlp_hidden", "0", Kind::UInt, nullptr},
        {"arch.node_hidden", "0", Kind::UInt, nullptr},
        {"arch.metric_hidden1", "0", Kind::UInt, nullptr},
        {"arch.metric_hidden2", "0", Kind::UInt, nullptr},
        {"arch.conv_channels", "16,16,32,32", Kind::FloatList, nullptr},
        {"arch.separate_dsim", "false", Kind::Bool, nullptr},
        {"arch.leaky_slope", "0.01", Kind::Float, nullptr},
        {"arch.bn_momentum", "0.1", Kind::Float, nullptr},
        {"arch.bn_eps", "1e-5", Kind::Float, nullptr},
        {"episode.way", "5", Kind::UInt, nullptr},
        {"episode.shot", "5", Kind::UInt, nullptr},
        {"episode.queries", "5", Kind::UInt, nullptr},
        {"episode.labeled_ratio", "1", Kind::Float, nullptr},
        {"train.episodes", "5000", Kind::UInt, nullptr},
        {"train.batch", "8", Kind::UInt, nullptr},
        {"train.lr", "5e-4", Kind::Float, nullptr},
        {"train.weight_decay", "1e-6", Kind::Float, nullptr},
        {"train.lr_halve_interval", "2000", Kind::UInt, nullptr},
        {"train.lambda", "", Kind::FloatList, nullptr},
        {"train.eval_every", "500", Kind::UInt, nullptr},
        {"train.eval_episodes", "100", Kind::UInt, nullptr},
        {"train.eval_transductive", "true", Kind::Bool, nullptr},
        {"train.seed", "1", Kind::UInt, nullptr},
        {"train.precision", "f32", Kind::Str, "f32,f64"},
        {"flags.intra_only", "false", Kind::Bool, nullptr},
        {"flags.exclude_self_edges", "false", Kind::Bool, nullptr},
        {"flags.symmetrize_votes", "false", Kind::Bool, nullptr},
        {"flags.widen_loss_edges", "false", Kind::Bool, nullptr},
        {"flags.labeled_only", "false", Kind::Bool, nullptr},
        {"eval.split", "test", Kind::Str, "train,val,test"},
        {"eval.episodes", "600", Kind::UInt, nullptr},
        {"eval.transductive", "true", Kind::Bool, nullptr},
        {"eval.seed", "9000", Kind::UInt, nullptr},
    };
    return entries;
}

std::string trim(const std::string& s) {
    std::size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return s.substr(b, e - b);
}

bool parse_bool(const std::string& v, bool& out) {
    if (v == "true" || v == "1" || v == "yes") {
        out = true;
        return true;
    }
    if (v == "false" || v == "0" || v == "no") {
        out = false;
        return true;
    }
    return false;
}

std::vector<double> parse_list(const std::string& v) {
    std::vector<double> out;
    if (trim(v).empty()) return out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        std::size_t pos = 0;
        const double d = std::stod(item, &pos);
        if (pos != item.size()) throw std::invalid_argument(item);
        out.push_back(d);
    }
    return out;
}

void check_value(const SchemaEntry& entry, const std::string& value) {
    try {
        switch (entry.kind) {
        case Kind::Bool: {
            bool b;
            if (!parse_bool(value, b)) throw std::invalid_argument(value);
            break;
        }
        case Kind::UInt: {
            std::size_t pos = 0;
            if (value.empty() || value[0] == '-') throw std::invalid_argument(value);
            (void)std::stoull(value, &pos);
            if (pos != value.size()) throw std::invalid_argument(value);
            break;
        }
        case Kind::Float: {
            std::size_t pos = 0;
            (void)std::stod(value, &pos);
            if (pos != value.size()) throw std::invalid_argument(value);
            break;
        }
        case Kind::FloatList:
            (void)parse_list(value);
            break;
        case Kind::Str:
            if (entry.choices) {
                std::stringstream ss(entry.choices);
                std::string choice;
                while (std::getline(ss, choice, ','))
                    if (choice == value) return;
                throw std::invalid_argument(value);
            }
            break;
        }
    } catch (const std::exception&) {
        throw ConfigError("config: invalid value '" + value + "' for key '" + entry.key + "'");
    }
}

std::uint64_t fnv1a64(const std::string& text) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

} // namespace

RunConfig::RunConfig() {
    values_.reserve(schema().size());
    for (const auto& entry : schema()) values_.push_back(entry.default_value);
}

RunConfig RunConfig::from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config: cannot open '" + path + "'");
    std::stringstream buffer;
    buffer << in.rdbuf();
    RunConfig cfg;
    cfg.apply_text(buffer.str(), path);
    return cfg;
}

void RunConfig::apply_text(const std::string& text, const std::string& origin) {
    std::stringstream ss(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(ss, line)) {
        ++lineno;
        const std::size_t hash_pos = line.find('#');
        if (hash_pos != std::string::npos) line.erase(hash_pos);
        line = trim(line);
        if (line.empty()) continue;
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config: " + origin + ":" + std::to_string(lineno) +
                              ": expected 'key = value'");
        set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
}

std::size_t RunConfig::index_of(const std::string& key) const {
    const auto& entries = schema();
    for (std::size_t i = 0; i < entries.size(); ++i)
        if (key == entries[i].key) return i;
    throw ConfigError("config: unknown key '" + key + "'");
}

void RunConfig::set(const std::string& key, const std::string& value) {
    const std::size_t i = index_of(key);
    check_value(schema()[i], value);
    values_[i] = value;
}

const std::string& RunConfig::get(const std::string& key) const { return values_[index_of(key)]; }

bool RunConfig::get_bool(const std::string& key) const {
    bool b = false;
    parse_bool(get(key), b);
    return b;
}

std::uint64_t RunConfig::get_uint(const std::string& key) const {
    return std::stoull(get(key));
}

double RunConfig::get_double(const std::string& key) const { return std::stod(get(key)); }

std::vector<double> RunConfig::get_double_list(const std::string& key) const {
    return parse_list(get(key));
}

std::string RunConfig::canonical_text() const {
    std::string out;
    const auto& entries = schema();
    for (std::size_t i = 0; i < entries.size(); ++i) {
        out += entries[i].key;
        out += " = ";
        out += values_[i];
        out += '\n';
    }
    return out;
}

std::uint64_t RunConfig::hash() const { return fnv1a64(canonical_text()); }

SyntheticSpec RunConfig::synthetic_spec() const {
    SyntheticSpec spec;
    spec.variant = get("data.variant") == "images" ? SyntheticVariant::procedural_images
                                                   : SyntheticVariant::gaussian_vectors;
    spec.dim = get_uint("data.dim");
    spec.image_size = get_uint("data.image_size");
    spec.classes = get_uint("data.classes");
    spec.per_class = get_uint("data.per_class");
    spec.sigma_within = get_double("data.sigma_within");
    spec.sigma_between = get_double("data.sigma_between");
    spec.seed = get_uint("data.seed");
    return spec;
}

ArchConfig RunConfig::arch(const Dataset& dataset) const {
    ArchConfig arch;
    arch.variant =
        get("arch.variant") == "conv4" ? EmbeddingVariant::conv4 : EmbeddingVariant::mlp;
    arch.emb_dim = get_uint("arch.emb_dim");
    arch.layers = get_uint("arch.layers");
    arch.mlp_hidden = get_uint("arch.mlp_hidden");
    arch.node_hidden = get_uint("arch.node_hidden");
    arch.metric_hidden1 = get_uint("arch.metric_hidden1");
    arch.metric_hidden2 = get_uint("arch.metric_hidden2");
    const auto channels = get_double_list("arch.conv_channels");
    if (channels.size() != 4)
        throw ConfigError("config: arch.conv_channels needs exactly 4 entries");
    for (std::size_t i = 0; i < 4; ++i)
        arch.conv_channels[i] = static_cast<std::size_t>(channels[i]);
    arch.separate_dsim = get_bool("arch.separate_dsim");
    arch.leaky_slope = get_double("arch.leaky_slope");
    arch.bn_momentum = get_double("arch.bn_momentum");
    arch.bn_eps = get_double("arch.bn_eps");

    if (arch.variant == EmbeddingVariant::conv4) {
        if (dataset.sample_shape.size() != 3)
            throw ConfigError("config: conv4 embedding needs (c, h, w) samples, dataset has " +
                              shape_str(dataset.sample_shape));
        if (dataset.sample_shape[1] != dataset.sample_shape[2])
            throw ConfigError("config: conv4 embedding expects square images");
        arch.image_channels = dataset.sample_shape[0];
        arch.image_hw = dataset.sample_shape[1];
    } else {
        arch.input_dim = dataset.sample_size();
    }
    return arch;
}

TrainingConfig RunConfig::training_config(const Dataset& dataset) const {
    TrainingConfig cfg;
    cfg.arch = arch(dataset);
    cfg.n_way = get_uint("episode.way");
    cfg.k_shot = get_uint("episode.shot");
    cfg.queries_per_class = get_uint("episode.queries");
    cfg.labeled_ratio = get_double("episode.labeled_ratio");
    cfg.labeled_only = get_bool("flags.labeled_only");
    cfg.task_batch = get_uint("train.batch");
    cfg.total_episodes = get_uint("train.episodes");
    cfg.lr = get_double("train.lr");
    cfg.weight_decay = get_double("train.weight_decay");
    cfg.lr_halve_interval = get_uint("train.lr_halve_interval");
    cfg.layer_lambda = get_double_list("train.lambda");
    cfg.eval_every = get_uint("train.eval_every");
    cfg.eval_episodes = get_uint("train.eval_episodes");
    cfg.eval_transductive = get_bool("train.eval_transductive");
    cfg.seed = get_uint("train.seed");
    cfg.config_hash = hash();
    cfg.graph = graph_options();
    cfg.widen_loss_edges = get_bool("flags.widen_loss_edges");
    return cfg;
}

EvalConfig RunConfig::eval_config() const {
    EvalConfig cfg;
    cfg.n_way = get_uint("episode.way");
    cfg.k_shot = get_uint("episode.shot");
    cfg.queries_per_class = get_uint("episode.queries");
    cfg.labeled_ratio = get_double("episode.labeled_ratio");
    cfg.labeled_only = get_bool("flags.labeled_only");
    cfg.transductive = get_bool("eval.transductive");
    cfg.episodes = get_uint("eval.episodes");
    cfg.seed = get_uint("eval.seed");
    const std::string split = get("eval.split");
    cfg.split = split == "train" ? Split::train : (split == "val" ? Split::val : Split::test);
    cfg.graph = graph_options();
    return cfg;
}

EgnnOptions RunConfig::graph_options() const {
    EgnnOptions opts;
    opts.intra_only = get_bool("flags.intra_only");
    opts.exclude_self_edges = get_bool("flags.exclude_self_edges");
    opts.symmetrize_votes = get_bool("flags.symmetrize_votes");
    return opts;
}

void RunConfig::assign_splits(Dataset& dataset) const {
    dataset.assign_splits(get_uint("split.train"), get_uint("split.val"),
                          get_uint("split.test"));
}

} // namespace egnn
