#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "egnn/episodes.hpp"
#include "egnn/training.hpp"

namespace egnn {

/// Flat `key = value` run configuration with a fixed schema. Values are kept
/// as strings; typed accessors parse on demand. Unknown keys are rejected,
/// and the canonical serialization (schema order) defines the config hash.
class RunConfig {
public:
    RunConfig();

    static RunConfig from_file(const std::string& path);

    /// Parses the body of a config file or override list.
    void apply_text(const std::string& text, const std::string& origin);

    void set(const std::string& key, const std::string& value);
    const std::string& get(const std::string& key) const;

    bool get_bool(const std::string& key) const;
    std::uint64_t get_uint(const std::string& key) const;
    double get_double(const std::string& key) const;
    std::vector<double> get_double_list(const std::string& key) const; // may be empty

    std::string canonical_text() const;
    std::uint64_t hash() const;

    SyntheticSpec synthetic_spec() const;
    ArchConfig arch(const Dataset& dataset) const;
    TrainingConfig training_config(const Dataset& dataset) const;
    EvalConfig eval_config() const;
    EgnnOptions graph_options() const;

    /// Applies the split.* class counts to a loaded dataset.
    void assign_splits(Dataset& dataset) const;

private:
    std::size_t index_of(const std::string& key) const;
    std::vector<std::string> values_; // aligned with the schema
};

} // namespace egnn
