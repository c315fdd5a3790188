#pragma once

// Named-tensor container.
//
//   "USTSCKPT" | u32 version | u32 count | records... | u32 crc32(records)
//   record: u32 name_len | name | u8 dtype (0 f32, 1 f64) | u32 rank | u64 dims[rank] | payload

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <zlib.h>

#include "usts/backbone.hpp"
#include "usts/binary_io.hpp"
#include "usts/parameter.hpp"

namespace usts::ckpt {

inline constexpr char kMagic[8] = {'U', 'S', 'T', 'S', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kVersion = 1;

enum class DType : std::uint8_t { F32 = 0, F64 = 1 };

template <class T>
constexpr DType dtype_of() {
    static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
    return std::is_same_v<T, float> ? DType::F32 : DType::F64;
}

struct StoredTensor {
    Shape shape;
    std::vector<double> values;
};

inline std::uint32_t crc32_of(const std::uint8_t* p, std::size_t n) {
    uLong crc = ::crc32(0L, Z_NULL, 0);
    while (n > 0) {
        const auto chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
        crc = ::crc32(crc, p, chunk);
        p += chunk;
        n -= chunk;
    }
    return static_cast<std::uint32_t>(crc);
}

template <class T>
std::vector<std::uint8_t> encode(const ParameterSet<T>& ps) {
    io::Writer w;
    w.bytes(kMagic, sizeof(kMagic));
    w.put<std::uint32_t>(kVersion);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(ps.size()));
    const std::size_t body = w.size();
    for (const auto& p : ps.all()) {
        w.put<std::uint32_t>(static_cast<std::uint32_t>(p.name.size()));
        w.str(p.name);
        w.put<std::uint8_t>(static_cast<std::uint8_t>(dtype_of<T>()));
        w.put<std::uint32_t>(static_cast<std::uint32_t>(p.value.rank()));
        for (auto d : p.value.shape()) w.put<std::uint64_t>(d);
        w.bytes(p.value.values().data(), p.value.numel() * sizeof(T));
    }
    const auto crc = crc32_of(w.buffer().data() + body, w.size() - body);
    w.put<std::uint32_t>(crc);
    return std::move(w.buffer());
}

inline std::map<std::string, StoredTensor> decode(const std::vector<std::uint8_t>& bytes) {
    io::Reader r(bytes.data(), bytes.size(), "checkpoint");
    if (std::memcmp(r.take(sizeof(kMagic)), kMagic, sizeof(kMagic)) != 0) {
        throw FormatError("checkpoint: bad magic (expected USTSCKPT)");
    }
    const auto version = r.get<std::uint32_t>();
    if (version != kVersion) throw FormatError("checkpoint: unsupported version " + std::to_string(version));
    const auto count = r.get<std::uint32_t>();
    const std::size_t body = r.offset();
    std::map<std::string, StoredTensor> out;
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto len = r.get<std::uint32_t>();
        std::string name = r.str(len);
        const auto dtype = r.get<std::uint8_t>();
        if (dtype > 1) {
            throw FormatError("checkpoint: tensor '" + name + "' has unknown dtype tag " + std::to_string(dtype));
        }
        const auto rank = r.get<std::uint32_t>();
        StoredTensor t;
        for (std::uint32_t k = 0; k < rank; ++k) t.shape.push_back(static_cast<std::size_t>(r.get<std::uint64_t>()));
        const std::size_t n = shape_numel(t.shape);
        t.values.resize(n);
        if (dtype == 0) {
            for (std::size_t k = 0; k < n; ++k) t.values[k] = r.get<float>();
        } else {
            for (std::size_t k = 0; k < n; ++k) t.values[k] = r.get<double>();
        }
        if (!out.emplace(name, std::move(t)).second) throw FormatError("checkpoint: duplicate tensor '" + name + "'");
    }
    const std::size_t body_end = r.offset();
    const auto stored = r.get<std::uint32_t>();
    if (r.remaining() != 0) {
        throw FormatError("checkpoint: " + std::to_string(r.remaining()) + " trailing bytes at offset " +
                          std::to_string(r.offset()));
    }
    if (crc32_of(bytes.data() + body, body_end - body) != stored) throw FormatError("checkpoint: CRC32 mismatch");
    return out;
}

inline bool is_lora(const std::string& name) {
    return name.size() > 7 && (name.ends_with(".lora_A") || name.ends_with(".lora_B"));
}

/// Name-matched load. Missing adapter factors are re-initialized fresh
/// (B = 0, A Gaussian) from `seed`; any other missing tensor, any unknown
/// tensor, or any shape mismatch is an error.
template <class T>
void load_into(ParameterSet<T>& ps, const std::map<std::string, StoredTensor>& stored, std::uint64_t seed = 0) {
    std::vector<std::string> unknown;
    for (const auto& [name, t] : stored)
        if (!ps.contains(name)) unknown.push_back(name);
    if (!unknown.empty()) {
        std::string list;
        for (const auto& n : unknown) list += (list.empty() ? "" : ", ") + n;
        throw FormatError("checkpoint: unknown tensors: " + list);
    }
    std::vector<std::string> missing;
    for (const auto& p : ps.all())
        if (!stored.count(p.name) && !is_lora(p.name)) missing.push_back(p.name);
    if (!missing.empty()) {
        std::string list;
        for (const auto& n : missing) list += (list.empty() ? "" : ", ") + n;
        throw FormatError("checkpoint: missing tensors: " + list);
    }
    for (auto& p : ps.all()) {
        auto it = stored.find(p.name);
        if (it != stored.end() && it->second.shape != p.value.shape()) {
            throw FormatError("checkpoint: tensor '" + p.name + "' has shape " + shape_str(it->second.shape) +
                              ", model expects " + shape_str(p.value.shape()));
        }
    }
    Rng rng(seed);
    for (auto& p : ps.all()) {
        auto dst = p.value.mutable_data();
        auto it = stored.find(p.name);
        if (it != stored.end()) {
            for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(it->second.values[i]);
        } else if (p.name.ends_with(".lora_B")) {
            std::fill(dst.begin(), dst.end(), T(0));
        } else {
            auto fresh = LoraAdapter<T>::template fresh_up<T>(p.value.dim(1), p.value.dim(0), rng);
            std::copy(fresh.values().begin(), fresh.values().end(), dst.begin());
        }
    }
}

template <class T>
void save(const ParameterSet<T>& ps, const std::string& path) {
    io::write_file(path, encode(ps));
}

template <class T>
void load(ParameterSet<T>& ps, const std::string& path, std::uint64_t seed = 0) {
    load_into(ps, decode(io::read_file(path)), seed);
}

}  // namespace usts::ckpt
