#pragma once

#include <filesystem>
#include <string>

#include <json.hpp>

#include "bmt/binio.hpp"
#include "bmt/model.hpp"
#include "bmt/tensor.hpp"

namespace bmt {

// Checkpoint format:
//   magic "BMTC", u32 version=1, u32 config_len, config JSON (UTF-8),
//   u64 param_count, then per parameter:
//     u32 path_len, path bytes, u8 rank, u32 dims[rank], f64 data (LE).
// Parameters are written in path order, so files are byte-reproducible.
struct Checkpoint {
    nlohmann::json config;
    ParamStore params;
};

inline std::vector<uint8_t> encode_checkpoint(const nlohmann::json& config, const ParamStore& params) {
    ByteWriter w;
    w.str("BMTC");
    w.u32(1);
    const std::string cfg = config.dump();
    w.u32(static_cast<uint32_t>(cfg.size()));
    w.str(cfg);
    w.u64(params.by_path.size());
    for (const auto& [path, t] : params.by_path) {
        w.u32(static_cast<uint32_t>(path.size()));
        w.str(path);
        w.u8(static_cast<uint8_t>(t.rank()));
        for (size_t d : t.shape()) w.u32(static_cast<uint32_t>(d));
        for (double v : t.values()) w.f64(v);
    }
    return w.data();
}

inline void save_checkpoint(const std::filesystem::path& path, const nlohmann::json& config,
                            const ParamStore& params) {
    write_file_atomic(path, encode_checkpoint(config, params));
}

inline Checkpoint decode_checkpoint(const std::vector<uint8_t>& bytes, const std::string& source,
                                    bool trainable) {
    ByteReader r(bytes.data(), bytes.size(), source);
    if (r.str(4) != "BMTC") r.fail("bad magic, expected \"BMTC\"");
    const uint32_t version = r.u32();
    if (version != 1) r.fail("unsupported checkpoint version " + std::to_string(version));
    Checkpoint ck;
    const uint32_t cfg_len = r.u32();
    const std::string cfg = r.str(cfg_len);
    try {
        ck.config = nlohmann::json::parse(cfg);
    } catch (const nlohmann::json::exception& e) {
        r.fail(std::string("bad config payload: ") + e.what());
    }
    const uint64_t count = r.u64();
    for (uint64_t i = 0; i < count; ++i) {
        const uint32_t path_len = r.u32();
        const std::string path = r.str(path_len);
        const uint8_t rank = r.u8();
        Shape shape(rank);
        for (auto& d : shape) d = r.u32();
        std::vector<double> values(shape_numel(shape));
        r.need(values.size() * 8);
        for (auto& v : values) v = r.f64();
        ck.params.insert(path, Tensor::from_values(std::move(shape), std::move(values), trainable));
    }
    if (r.remaining() != 0) r.fail("trailing bytes after last parameter");
    return ck;
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path, bool trainable = true) {
    return decode_checkpoint(read_file_bytes(path), path.string(), trainable);
}

} // namespace bmt
