#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "gbdm/optim.hpp"
#include "gbdm/tensor.hpp"

namespace gbdm {

// Checkpoint file: "GBCK" | u32 version | u64 JSON header length | JSON header |
// float32 little-endian payloads in header order. Optimizer moments are stored
// as extra tensors named "<param>.adam_m" / "<param>.adam_v".

namespace io {

inline void write_u32(std::ostream& os, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline void write_u64(std::ostream& os, uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 8);
}

inline uint32_t read_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw GbdmError("truncated file: expected u32");
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
           (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

inline uint64_t read_u64(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    if (!is) throw GbdmError("truncated file: expected u64");
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
    return v;
}

// float32 payloads are little-endian on disk; this codebase targets
// little-endian hosts only.
inline void write_f32(std::ostream& os, const std::vector<float>& data) {
    os.write(reinterpret_cast<const char*>(data.data()),
             static_cast<std::streamsize>(data.size() * sizeof(float)));
}

inline void read_f32(std::istream& is, std::vector<float>& data) {
    is.read(reinterpret_cast<char*>(data.data()),
            static_cast<std::streamsize>(data.size() * sizeof(float)));
    if (!is) throw GbdmError("truncated payload");
}

}  // namespace io

inline constexpr uint32_t kCheckpointVersion = 1;

inline void save_checkpoint(const std::string& path, const ParamStore& store, const AdamW& opt,
                            int64_t step, const nlohmann::json& extra = {}) {
    nlohmann::json header;
    header["params"] = nlohmann::json::array();
    for (size_t i = 0; i < store.size(); ++i)
        header["params"].push_back({{"name", store.names[i]}, {"shape", store.tensors[i].shape}});
    header["optimizer"] = {{"beta1", opt.beta1},
                           {"beta2", opt.beta2},
                           {"eps", opt.eps},
                           {"weight_decay", opt.weight_decay},
                           {"step_count", opt.step_count},
                           {"has_moments", !opt.m.empty()}};
    header["step"] = step;
    if (!extra.is_null()) header["extra"] = extra;

    std::ofstream os(path, std::ios::binary);
    if (!os) throw GbdmError("cannot open checkpoint for writing: " + path);
    os.write("GBCK", 4);
    io::write_u32(os, kCheckpointVersion);
    std::string hs = header.dump();
    io::write_u64(os, hs.size());
    os.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    for (const Tensor& t : store.tensors) io::write_f32(os, t.data);
    for (const Tensor& t : opt.m) io::write_f32(os, t.data);
    for (const Tensor& t : opt.v) io::write_f32(os, t.data);
    if (!os) throw GbdmError("write failure on checkpoint: " + path);
}

struct Checkpoint {
    ParamStore store;
    AdamW opt;
    int64_t step = 0;
    nlohmann::json extra;
};

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw GbdmError("cannot open checkpoint: " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "GBCK", 4) != 0)
        throw GbdmError("bad checkpoint magic in " + path);
    uint32_t version = io::read_u32(is);
    if (version != kCheckpointVersion)
        throw GbdmError("unsupported checkpoint version " + std::to_string(version));
    uint64_t hlen = io::read_u64(is);
    std::string hs(hlen, '\0');
    is.read(hs.data(), static_cast<std::streamsize>(hlen));
    if (!is) throw GbdmError("truncated checkpoint header");
    nlohmann::json header = nlohmann::json::parse(hs);

    Checkpoint ck;
    for (const auto& p : header.at("params")) {
        Shape shape = p.at("shape").get<Shape>();
        ck.store.add(p.at("name").get<std::string>(), Tensor(shape));
    }
    const auto& oj = header.at("optimizer");
    ck.opt.beta1 = oj.at("beta1").get<float>();
    ck.opt.beta2 = oj.at("beta2").get<float>();
    ck.opt.eps = oj.at("eps").get<float>();
    ck.opt.weight_decay = oj.at("weight_decay").get<float>();
    ck.opt.step_count = oj.at("step_count").get<int64_t>();
    ck.step = header.at("step").get<int64_t>();
    if (header.contains("extra")) ck.extra = header["extra"];

    for (Tensor& t : ck.store.tensors) io::read_f32(is, t.data);
    if (oj.at("has_moments").get<bool>()) {
        for (const Tensor& t : ck.store.tensors) {
            ck.opt.m.push_back(Tensor::zeros(t.shape));
            io::read_f32(is, ck.opt.m.back().data);
        }
        for (const Tensor& t : ck.store.tensors) {
            ck.opt.v.push_back(Tensor::zeros(t.shape));
            io::read_f32(is, ck.opt.v.back().data);
        }
    }
    return ck;
}

}  // namespace gbdm
