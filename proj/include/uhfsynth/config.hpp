#pragma once
// Flat key=value run configuration: a typed key registry with defaults, a
// file parser with line-level diagnostics, command-line overrides, and the
// bridges from resolved keys to the library's config structs. Precedence is
// defaults, then the file, then the command line.

#include <cstdlib>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "uhfsynth/evalharness.hpp"

namespace uhfsynth {

/// Raised for anything the caller typed wrong (as opposed to runtime
/// failures); the CLI maps it to a distinct exit code.
class UsageError : public Error {
public:
    explicit UsageError(std::string msg) : Error(std::move(msg)) {}
};

template <typename... Parts>
[[noreturn]] void usage_fail(Parts&&... parts) {
    throw UsageError(make_msg(std::forward<Parts>(parts)...));
}

enum class ConfigType { Int, Real, Bool, String };

struct ConfigKeyInfo {
    ConfigType type = ConfigType::String;
    const char* def = "";
    const char* help = "";
};

/// Every key any subcommand reads, with its type and default. One flat
/// namespace: unknown keys are rejected at parse time, not silently carried.
inline const std::map<std::string, ConfigKeyInfo>& config_schema() {
    static const std::map<std::string, ConfigKeyInfo> schema = {
        // run plumbing
        {"seed", {ConfigType::Int, "1", "global rng seed"}},
        {"threads", {ConfigType::Int, "1", "worker threads; bench always pins to 1"}},
        {"tag", {ConfigType::String, "", "run directory suffix, defaults to the subcommand"}},
        {"run_dir", {ConfigType::String, "", "output directory, defaults to runs/<timestamp>-<tag>"}},
        // corpus generation and lookup
        {"data", {ConfigType::String, "", "manifest.csv of an existing corpus"}},
        {"n_cases", {ConfigType::Int, "12", "cases to synthesize"}},
        {"ratio_15", {ConfigType::Real, "0.2447552447552448", "fraction of cases tagged 1.5T"}},
        {"depth", {ConfigType::Int, "4", "slices per case"}},
        {"height", {ConfigType::Int, "64", "case height in voxels"}},
        {"width", {ConfigType::Int, "96", "case width in voxels"}},
        {"complexity", {ConfigType::Real, "1", "phantom structure density"}},
        {"train_fraction", {ConfigType::Real, "0.745", "case-level train share"}},
        {"val_fraction", {ConfigType::Real, "0.135", "case-level validation share"}},
        {"test_fraction", {ConfigType::Real, "0.12", "case-level test share"}},
        {"stratify_by_field", {ConfigType::Bool, "true", "split each field strength separately"}},
        // model
        {"in_channels", {ConfigType::Int, "1", "input channels"}},
        {"out_channels", {ConfigType::Int, "1", "output channels"}},
        {"base_channels", {ConfigType::Int, "48", "width of the shallowest level"}},
        {"encoder_blocks", {ConfigType::String, "1,2,2", "blocks per encoder level"}},
        {"decoder_blocks", {ConfigType::String, "2,2,1", "blocks per decoder level, deepest first"}},
        {"heads", {ConfigType::String, "1,2,4", "attention heads per level"}},
        {"bottleneck_channel_blocks", {ConfigType::Int, "16", "channel-attention blocks at depth"}},
        {"bottleneck_spatial_blocks", {ConfigType::Int, "1", "token-attention blocks at depth"}},
        {"bottleneck_heads", {ConfigType::Int, "4", "heads in the bottleneck blocks"}},
        {"gdfn_expansion", {ConfigType::Real, "2.66", "feed-forward hidden expansion"}},
        // training
        {"lr", {ConfigType::Real, "0.0001", "learning rate"}},
        {"beta1", {ConfigType::Real, "0.9", "first-moment decay"}},
        {"beta2", {ConfigType::Real, "0.999", "second-moment decay"}},
        {"epsilon", {ConfigType::Real, "1e-08", "optimizer denominator floor"}},
        {"weight_decay", {ConfigType::Real, "0.0001", "decoupled weight decay"}},
        {"batch_size", {ConfigType::Int, "8", "slices per optimizer step"}},
        {"epochs", {ConfigType::Int, "50", "training epochs"}},
        {"augment_flip", {ConfigType::Bool, "true", "random horizontal flips during training"}},
        {"val_metric", {ConfigType::String, "nmse", "metric that selects the best checkpoint"}},
        {"slice_height", {ConfigType::Int, "64", "training frame height"}},
        {"slice_width", {ConfigType::Int, "96", "training frame width"}},
        {"resume", {ConfigType::String, "", "checkpoint to continue training from"}},
        // evaluation and inference
        {"checkpoint", {ConfigType::String, "", "trained checkpoint to load"}},
        {"input", {ConfigType::String, "", "input volume for inference"}},
        {"output", {ConfigType::String, "", "inference output path, defaults into the run dir"}},
        {"png", {ConfigType::Bool, "false", "also render output slices as PNG"}},
        {"split", {ConfigType::String, "test", "manifest split to evaluate"}},
        {"reference", {ConfigType::String, "", "per-slice samples csv of a reference run"}},
        {"model_label", {ConfigType::String, "model", "label for report rows"}},
        // ablation and bench
        {"steps_budget", {ConfigType::Int, "40", "optimizer steps per ablation strategy"}},
        {"repeats", {ConfigType::Int, "3", "timed repetitions per bench shape"}},
    };
    return schema;
}

namespace detail {

inline const char* config_type_name(ConfigType t) {
    switch (t) {
    case ConfigType::Int: return "an integer";
    case ConfigType::Real: return "a real";
    case ConfigType::Bool: return "a bool (true/false/1/0)";
    case ConfigType::String: return "a string";
    }
    return "?";
}

inline int64_t config_parse_int(const std::string& key, const std::string& value) {
    char* end = nullptr;
    errno = 0;
    const long long v = std::strtoll(value.c_str(), &end, 10);
    if (errno != 0 || end == value.c_str() || *end != '\0')
        usage_fail("config: key '", key, "' expects an integer, got '", value, "'");
    return v;
}

inline real config_parse_real(const std::string& key, const std::string& value) {
    char* end = nullptr;
    errno = 0;
    const real v = std::strtod(value.c_str(), &end);
    if (end == value.c_str() || *end != '\0')
        usage_fail("config: key '", key, "' expects a real, got '", value, "'");
    return v;
}

inline bool config_parse_bool(const std::string& key, const std::string& value) {
    if (value == "true" || value == "1") return true;
    if (value == "false" || value == "0") return false;
    usage_fail("config: key '", key, "' expects a bool (true/false/1/0), got '", value, "'");
}

inline std::string config_trim(const std::string& s) {
    size_t b = 0, e = s.size();
    while (b < e && (s[b] == ' ' || s[b] == '\t' || s[b] == '\r')) ++b;
    while (e > b && (s[e - 1] == ' ' || s[e - 1] == '\t' || s[e - 1] == '\r')) --e;
    return s.substr(b, e - b);
}

} // namespace detail

struct Config {
    std::map<std::string, std::string> values; // canonical text, every key present

    int64_t get_int(const std::string& key) const {
        require(key, ConfigType::Int);
        return detail::config_parse_int(key, values.at(key));
    }
    real get_real(const std::string& key) const {
        require(key, ConfigType::Real);
        return detail::config_parse_real(key, values.at(key));
    }
    bool get_bool(const std::string& key) const {
        require(key, ConfigType::Bool);
        return values.at(key) == "true";
    }
    const std::string& get_string(const std::string& key) const {
        require(key, ConfigType::String);
        return values.at(key);
    }

    /// Validate and store one key. `where` lands in diagnostics ("line 3" or
    /// "command line").
    void set(const std::string& key, const std::string& value, const std::string& where) {
        const auto it = config_schema().find(key);
        if (it == config_schema().end())
            usage_fail("config: unknown key '", key, "' (", where, ")");
        std::string canonical;
        switch (it->second.type) {
        case ConfigType::Int:
            canonical = std::to_string(detail::config_parse_int(key, value));
            break;
        case ConfigType::Real:
            canonical = fmt_real(detail::config_parse_real(key, value), 17);
            break;
        case ConfigType::Bool:
            canonical = detail::config_parse_bool(key, value) ? "true" : "false";
            break;
        case ConfigType::String:
            canonical = value;
            break;
        }
        values[key] = std::move(canonical);
    }

private:
    void require(const std::string& key, ConfigType t) const {
        const auto it = config_schema().find(key);
        check(it != config_schema().end(), "config: unknown key '", key, "'");
        check(it->second.type == t, "config: key '", key, "' read with the wrong type");
    }
};

inline Config default_config() {
    Config c;
    for (const auto& [key, info] : config_schema()) c.set(key, info.def, "default");
    return c;
}

/// Apply a config file. Lines hold key=value pairs; '#' starts a comment;
/// blank lines are skipped. Re-assigning a key is an error that names both
/// occurrences.
inline void apply_config_file(Config& c, const std::string& text) {
    std::istringstream is(text);
    std::string line;
    std::map<std::string, int> seen_at;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const size_t hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = detail::config_trim(line);
        if (line.empty()) continue;
        const size_t eq = line.find('=');
        if (eq == std::string::npos)
            usage_fail("config: line ", lineno, ": expected key=value, got '", line, "'");
        const std::string key = detail::config_trim(line.substr(0, eq));
        const std::string value = detail::config_trim(line.substr(eq + 1));
        if (key.empty()) usage_fail("config: line ", lineno, ": empty key");
        const auto prev = seen_at.find(key);
        if (prev != seen_at.end())
            usage_fail("config: duplicate key '", key, "' (lines ", prev->second, " and ", lineno,
                       ")");
        seen_at[key] = lineno;
        c.set(key, value, make_msg("line ", lineno));
    }
}

/// Defaults, then the optional file, then command-line pairs, in that order.
inline Config resolve_config(const std::string* file_text,
                             const std::vector<std::pair<std::string, std::string>>& overrides) {
    Config c = default_config();
    if (file_text) apply_config_file(c, *file_text);
    for (const auto& [key, value] : overrides) c.set(key, value, "command line");
    return c;
}

/// Full resolved state, one sorted "key = value" line each. Written into the
/// run directory before any work starts.
inline std::string config_echo(const Config& c) {
    std::ostringstream os;
    for (const auto& [key, value] : c.values) os << key << " = " << value << "\n";
    return os.str();
}

// ---------------------------------------------------------------------------
// Bridges from resolved keys to the library's config structs
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<int64_t> config_parse_int_list(const std::string& key, const std::string& text,
                                                  size_t expect) {
    std::vector<int64_t> out;
    std::string cell;
    std::istringstream is(text);
    while (std::getline(is, cell, ',')) out.push_back(config_parse_int(key, config_trim(cell)));
    if (out.size() != expect)
        usage_fail("config: key '", key, "' expects ", expect, " comma-separated integers, got '",
                   text, "'");
    return out;
}

} // namespace detail

inline ModelConfig model_config_from(const Config& c) {
    ModelConfig m = ModelConfig::with_base(c.get_int("base_channels"));
    m.in_channels = c.get_int("in_channels");
    m.out_channels = c.get_int("out_channels");
    m.encoder_blocks = detail::config_parse_int_list("encoder_blocks",
                                                     c.get_string("encoder_blocks"), 3);
    m.decoder_blocks = detail::config_parse_int_list("decoder_blocks",
                                                     c.get_string("decoder_blocks"), 3);
    m.heads = detail::config_parse_int_list("heads", c.get_string("heads"), 3);
    m.bottleneck_channel_blocks = c.get_int("bottleneck_channel_blocks");
    m.bottleneck_spatial_blocks = c.get_int("bottleneck_spatial_blocks");
    m.bottleneck_heads = c.get_int("bottleneck_heads");
    m.gdfn_expansion = c.get_real("gdfn_expansion");
    m.validate();
    return m;
}

inline TrainConfig train_config_from(const Config& c) {
    TrainConfig t;
    t.lr = c.get_real("lr");
    t.beta1 = c.get_real("beta1");
    t.beta2 = c.get_real("beta2");
    t.eps = c.get_real("epsilon");
    t.weight_decay = c.get_real("weight_decay");
    t.batch_size = c.get_int("batch_size");
    t.epochs = c.get_int("epochs");
    t.seed = static_cast<uint64_t>(c.get_int("seed"));
    t.augment_flip = c.get_bool("augment_flip");
    t.val_metric = c.get_string("val_metric");
    t.slice_height = c.get_int("slice_height");
    t.slice_width = c.get_int("slice_width");
    t.validate();
    return t;
}

inline CorpusSpec corpus_spec_from(const Config& c) {
    CorpusSpec s;
    s.n_cases = c.get_int("n_cases");
    s.ratio_15 = c.get_real("ratio_15");
    s.depth = c.get_int("depth");
    s.height = c.get_int("height");
    s.width = c.get_int("width");
    s.complexity = c.get_real("complexity");
    s.seed = static_cast<uint64_t>(c.get_int("seed"));
    s.split.train_fraction = c.get_real("train_fraction");
    s.split.val_fraction = c.get_real("val_fraction");
    s.split.test_fraction = c.get_real("test_fraction");
    s.split.stratify_by_field = c.get_bool("stratify_by_field");
    s.validate();
    return s;
}

} // namespace uhfsynth
