#pragma once

// Versioned little-endian checkpoint container:
//   magic "UHFSCKPT" | u32 version | u64 epoch | u64 rng_state | f64 val_metric
//   | u32 config_len | config text | u32 n_arrays
//   | per array: u16 name_len, name, u8 dtype(0=f64), u8 ndim, u32 dims[],
//     u64 byte_offset into the data section
//   | u64 data_bytes | raw f64 data | u32 crc32 of everything before it
// Model parameters are stored under their canonical names; any additional
// state (optimizer moments, step counters) rides along under its own names.

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include <zlib.h>

#include "uhfsynth/binio.hpp"
#include "uhfsynth/model.hpp"

namespace uhfsynth {

constexpr uint32_t kCheckpointVersion = 1;
constexpr char kCheckpointMagic[8] = {'U', 'H', 'F', 'S', 'C', 'K', 'P', 'T'};

struct Checkpoint {
    uint32_t version = kCheckpointVersion;
    ModelConfig config;
    std::map<std::string, Tensor> arrays;
    int64_t epoch = 0;
    uint64_t rng_state = 0;
    real val_metric = 0.0;
};

// ---------------------------------------------------------------------------
// ModelConfig <-> text
// ---------------------------------------------------------------------------

namespace detail {

inline std::string int_list_str(const std::vector<int64_t>& v) {
    std::string s;
    for (size_t i = 0; i < v.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(v[i]);
    }
    return s;
}

inline std::vector<int64_t> parse_int_list(const std::string& s) {
    std::vector<int64_t> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(std::stoll(item));
    return out;
}

inline std::string real_repr(real v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

} // namespace detail

inline std::string config_to_text(const ModelConfig& c) {
    std::ostringstream os;
    os << "in_channels=" << c.in_channels << "\n";
    os << "out_channels=" << c.out_channels << "\n";
    os << "base_channels=" << c.base_channels << "\n";
    os << "level_channels=" << detail::int_list_str(c.level_channels) << "\n";
    os << "encoder_blocks=" << detail::int_list_str(c.encoder_blocks) << "\n";
    os << "bottleneck_channel_blocks=" << c.bottleneck_channel_blocks << "\n";
    os << "bottleneck_spatial_blocks=" << c.bottleneck_spatial_blocks << "\n";
    os << "decoder_blocks=" << detail::int_list_str(c.decoder_blocks) << "\n";
    os << "heads=" << detail::int_list_str(c.heads) << "\n";
    os << "bottleneck_heads=" << c.bottleneck_heads << "\n";
    os << "gdfn_expansion=" << detail::real_repr(c.gdfn_expansion) << "\n";
    os << "output_activation=" << (c.output_activation == Activation::Tanh ? "tanh" : "gelu")
       << "\n";
    return os.str();
}

inline ModelConfig config_from_text(const std::string& text) {
    ModelConfig c;
    std::stringstream ss(text);
    std::string line;
    while (std::getline(ss, line)) {
        if (line.empty()) continue;
        const size_t eq = line.find('=');
        check(eq != std::string::npos, "config text: malformed line '", line, "'");
        const std::string key = line.substr(0, eq);
        const std::string val = line.substr(eq + 1);
        if (key == "in_channels") c.in_channels = std::stoll(val);
        else if (key == "out_channels") c.out_channels = std::stoll(val);
        else if (key == "base_channels") c.base_channels = std::stoll(val);
        else if (key == "level_channels") c.level_channels = detail::parse_int_list(val);
        else if (key == "encoder_blocks") c.encoder_blocks = detail::parse_int_list(val);
        else if (key == "bottleneck_channel_blocks") c.bottleneck_channel_blocks = std::stoll(val);
        else if (key == "bottleneck_spatial_blocks") c.bottleneck_spatial_blocks = std::stoll(val);
        else if (key == "decoder_blocks") c.decoder_blocks = detail::parse_int_list(val);
        else if (key == "heads") c.heads = detail::parse_int_list(val);
        else if (key == "bottleneck_heads") c.bottleneck_heads = std::stoll(val);
        else if (key == "gdfn_expansion") c.gdfn_expansion = std::stod(val);
        else if (key == "output_activation") {
            check(val == "tanh" || val == "gelu", "config text: unknown activation '", val, "'");
            c.output_activation = val == "tanh" ? Activation::Tanh : Activation::Gelu;
        } else fail("config text: unknown key '", key, "'");
    }
    c.validate();
    return c;
}


// ---------------------------------------------------------------------------
// save / load
// ---------------------------------------------------------------------------

inline void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    detail::ByteWriter w;
    w.bytes(kCheckpointMagic, 8);
    w.u32(ckpt.version);
    w.u64(static_cast<uint64_t>(ckpt.epoch));
    w.u64(ckpt.rng_state);
    w.f64(ckpt.val_metric);

    const std::string cfg = config_to_text(ckpt.config);
    w.u32(static_cast<uint32_t>(cfg.size()));
    w.bytes(cfg.data(), cfg.size());

    w.u32(static_cast<uint32_t>(ckpt.arrays.size()));
    uint64_t offset = 0;
    for (const auto& [name, t] : ckpt.arrays) {
        check(name.size() <= 0xffff, "checkpoint: array name too long: ", name);
        w.u16(static_cast<uint16_t>(name.size()));
        w.bytes(name.data(), name.size());
        w.u8(0); // dtype f64
        w.u8(static_cast<uint8_t>(t.ndim()));
        for (int i = 0; i < t.ndim(); ++i) w.u32(static_cast<uint32_t>(t.shape()[i]));
        w.u64(offset);
        offset += static_cast<uint64_t>(t.numel()) * 8;
    }
    w.u64(offset);
    for (const auto& [name, t] : ckpt.arrays)
        for (int64_t i = 0; i < t.numel(); ++i) w.f64(t[i]);

    const uint32_t crc = static_cast<uint32_t>(
        crc32(0, reinterpret_cast<const Bytef*>(w.buf.data()), static_cast<uInt>(w.buf.size())));
    w.u32(crc);
    detail::write_file_bytes(path, w.buf);
}

/// Load and fully validate a checkpoint. When `expected_config` is given, a
/// checkpoint built for a different model configuration is rejected.
inline Checkpoint load_checkpoint(const std::string& path,
                                  const ModelConfig* expected_config = nullptr) {
    const std::vector<uint8_t> buf = detail::read_file_bytes(path);
    check(buf.size() >= 8 + 4 + 4, "truncated checkpoint '", path, "': only ", buf.size(),
          " bytes");
    check(std::memcmp(buf.data(), kCheckpointMagic, 8) == 0,
          "'", path, "' is not a checkpoint (magic mismatch)");

    detail::ByteReader r{buf, 0, "checkpoint"};
    r.pos = 8;
    const uint32_t version = r.u32();
    check(version == kCheckpointVersion, "unsupported checkpoint version ", version,
          " (expected ", kCheckpointVersion, ")");

    // CRC covers the whole body; verify before trusting any lengths.
    const uint32_t want_crc = static_cast<uint32_t>(
        crc32(0, reinterpret_cast<const Bytef*>(buf.data()), static_cast<uInt>(buf.size() - 4)));
    uint32_t got_crc = 0;
    for (int i = 0; i < 4; ++i)
        got_crc |= static_cast<uint32_t>(buf[buf.size() - 4 + static_cast<size_t>(i)]) << (8 * i);
    check(got_crc == want_crc, "checkpoint checksum mismatch in '", path,
          "' (file corrupt or truncated)");

    Checkpoint ckpt;
    ckpt.version = version;
    ckpt.epoch = static_cast<int64_t>(r.u64());
    ckpt.rng_state = r.u64();
    ckpt.val_metric = r.f64();
    const uint32_t cfg_len = r.u32();
    ckpt.config = config_from_text(r.str(cfg_len));
    if (expected_config) {
        check(*expected_config == ckpt.config,
              "checkpoint config mismatch: '", path, "' was built for a different model (",
              config_to_text(ckpt.config), ") than requested (", config_to_text(*expected_config),
              ")");
    }

    struct Entry {
        std::string name;
        Shape shape;
        uint64_t offset;
    };
    const uint32_t n_arrays = r.u32();
    std::vector<Entry> entries;
    for (uint32_t i = 0; i < n_arrays; ++i) {
        Entry e;
        e.name = r.str(r.u16());
        const uint8_t dtype = r.u8();
        check(dtype == 0, "checkpoint: unsupported dtype ", static_cast<int>(dtype), " for '",
              e.name, "'");
        const int ndim = r.u8();
        std::vector<int64_t> dims;
        for (int d = 0; d < ndim; ++d) dims.push_back(r.u32());
        e.shape = Shape(dims);
        e.offset = r.u64();
        entries.push_back(std::move(e));
    }
    const uint64_t data_bytes = r.u64();
    const size_t data_start = r.pos;
    check(data_start + data_bytes + 4 == buf.size(), "checkpoint layout error in '", path, "'");

    for (const auto& e : entries) {
        const uint64_t need = e.offset + static_cast<uint64_t>(e.shape.numel()) * 8;
        check(need <= data_bytes, "checkpoint: array '", e.name, "' overruns the data section");
        std::vector<real> data(static_cast<size_t>(e.shape.numel()));
        detail::ByteReader ar{buf, data_start + e.offset, "checkpoint"};
        for (auto& v : data) v = ar.f64();
        ckpt.arrays.emplace(e.name, Tensor(e.shape, std::move(data)));
    }
    return ckpt;
}

// ---------------------------------------------------------------------------
// ModelParams <-> Checkpoint
// ---------------------------------------------------------------------------

inline Checkpoint checkpoint_from_model(ModelParams& params, int64_t epoch, uint64_t rng_state,
                                        real val_metric) {
    Checkpoint ckpt;
    ckpt.config = params.config;
    ckpt.epoch = epoch;
    ckpt.rng_state = rng_state;
    ckpt.val_metric = val_metric;
    params.for_each_param(
        [&](const std::string& name, Tensor& t) { ckpt.arrays.emplace(name, t.detach()); });
    return ckpt;
}

/// Rebuild a model and fill every parameter from the checkpoint; the name
/// sets must match exactly.
inline ModelParams model_from_checkpoint(const Checkpoint& ckpt) {
    ModelParams params = build(ckpt.config, 0);
    size_t used = 0;
    params.for_each_param([&](const std::string& name, Tensor& t) {
        auto it = ckpt.arrays.find(name);
        check(it != ckpt.arrays.end(), "checkpoint missing parameter '", name, "'");
        check(it->second.shape() == t.shape(), "checkpoint parameter '", name, "' has shape ",
              it->second.shape().str(), ", model expects ", t.shape().str());
        t = it->second.clone_data();
        ++used;
    });
    size_t model_named = 0;
    for (const auto& [name, _] : ckpt.arrays)
        if (name.rfind("opt.", 0) != 0 && name != "step") ++model_named;
    check(model_named == used, "checkpoint contains ", model_named,
          " model arrays but the model has ", used);
    return params;
}

} // namespace uhfsynth
