#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "skyforge/tensor.hpp"

namespace skyforge {

// Weights container: named parameter blocks (name, shape, f32 little-endian
// data) behind a json header that records the architecture/schedule config.
struct WeightsFile {
    nlohmann::json header;
    std::vector<std::pair<std::string, nn::Var>> blocks;
};

namespace detail {

inline void put_u32(std::ofstream& f, std::uint32_t v) {
    f.write(reinterpret_cast<const char*>(&v), 4);
}
inline std::uint32_t get_u32(std::ifstream& f) {
    std::uint32_t v = 0;
    f.read(reinterpret_cast<char*>(&v), 4);
    return v;
}

}  // namespace detail

inline void save_weights(const std::filesystem::path& path, const nlohmann::json& header,
                         const std::vector<nn::Parameter>& params) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("save_weights: cannot open " + path.string());
    f.write("SKFW", 4);
    detail::put_u32(f, 1);  // version
    const std::string hdr = header.dump();
    detail::put_u32(f, static_cast<std::uint32_t>(hdr.size()));
    f.write(hdr.data(), static_cast<std::streamsize>(hdr.size()));
    detail::put_u32(f, static_cast<std::uint32_t>(params.size()));
    for (const auto& p : params) {
        detail::put_u32(f, static_cast<std::uint32_t>(p.name.size()));
        f.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
        detail::put_u32(f, static_cast<std::uint32_t>(p.var->shape.size()));
        for (int d : p.var->shape) detail::put_u32(f, static_cast<std::uint32_t>(d));
        f.write(reinterpret_cast<const char*>(p.var->v.data()),
                static_cast<std::streamsize>(p.var->v.size() * 4));
    }
}

inline WeightsFile load_weights(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("load_weights: cannot open " + path.string());
    char magic[4];
    f.read(magic, 4);
    if (std::string(magic, 4) != "SKFW")
        throw std::runtime_error("load_weights: bad magic in " + path.string());
    if (detail::get_u32(f) != 1) throw std::runtime_error("load_weights: unknown version");
    const std::uint32_t hdr_len = detail::get_u32(f);
    std::string hdr(hdr_len, '\0');
    f.read(hdr.data(), hdr_len);

    WeightsFile out;
    out.header = nlohmann::json::parse(hdr);
    const std::uint32_t n = detail::get_u32(f);
    for (std::uint32_t i = 0; i < n; ++i) {
        const std::uint32_t name_len = detail::get_u32(f);
        std::string name(name_len, '\0');
        f.read(name.data(), name_len);
        const std::uint32_t ndim = detail::get_u32(f);
        nn::Shape shape(ndim);
        for (auto& d : shape) d = static_cast<int>(detail::get_u32(f));
        nn::Var v = nn::make_var(shape);
        f.read(reinterpret_cast<char*>(v->v.data()),
               static_cast<std::streamsize>(v->v.size() * 4));
        out.blocks.emplace_back(std::move(name), std::move(v));
    }
    if (!f) throw std::runtime_error("load_weights: truncated file " + path.string());
    return out;
}

// Copies loaded blocks into an existing parameter set by name; throws on
// missing or shape-mismatched blocks.
inline void assign_weights(const WeightsFile& file, std::vector<nn::Parameter>& params) {
    std::map<std::string, const nn::Var*> by_name;
    for (const auto& [name, var] : file.blocks) by_name[name] = &var;
    for (auto& p : params) {
        auto it = by_name.find(p.name);
        if (it == by_name.end())
            throw std::runtime_error("assign_weights: missing block " + p.name);
        if ((*it->second)->shape != p.var->shape)
            throw std::runtime_error("assign_weights: shape mismatch for " + p.name);
        p.var->v = (*it->second)->v;
    }
}

// Byte-level checksum of parameter values, for frozen-weight assertions.
inline std::uint64_t params_checksum(const std::vector<nn::Parameter>& params) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& p : params) {
        h = fnv1a64(p.name.data(), p.name.size(), h);
        h = fnv1a64(p.var->v.data(), p.var->v.size() * 4, h);
    }
    return h;
}

}  // namespace skyforge
