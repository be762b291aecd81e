#pragma once

// Binary formats, all little-endian.
//
// Tensor file ("FCTN"):
//   magic[4] | version u32 | ndim u32 | dims u64 x ndim | dtype u8 (0 f32, 1 f64) | payload
//
// Weight file ("FCVT"):
//   magic[4] | version u32 | header_len u64 | header (UTF-8 JSON) | payload
//   The header maps tensor name -> {shape, dtype, byte_offset, byte_length};
//   offsets are relative to the payload start and 64-byte aligned. The header
//   is space-padded so the payload itself starts on a 64-byte boundary. The
//   reserved key "__config__" carries the ModelConfig the tensors belong to.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fcvit/config_json.hpp"
#include "fcvit/model.hpp"

namespace fcvit {

class TruncatedFileError : public FormatError {
public:
    using FormatError::FormatError;
};

inline constexpr std::uint32_t kTensorFileVersion = 1;
inline constexpr std::uint32_t kWeightFileVersion = 1;
inline constexpr std::size_t kPayloadAlignment = 64;

using Bytes = std::vector<std::uint8_t>;

namespace detail {

template <typename U>
void put_le(Bytes& out, U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

template <typename U>
U get_le(const std::uint8_t* p) {
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(p[i]) << (8 * i);
    return v;
}

template <Real T>
void put_values(Bytes& out, std::span<const T> vals) {
    using U = std::conditional_t<std::is_same_v<T, float>, std::uint32_t, std::uint64_t>;
    out.reserve(out.size() + vals.size() * sizeof(U));
    for (T v : vals) put_le<U>(out, std::bit_cast<U>(v));
}

template <Real T>
void get_values(const std::uint8_t* p, std::span<T> vals) {
    using U = std::conditional_t<std::is_same_v<T, float>, std::uint32_t, std::uint64_t>;
    for (std::size_t i = 0; i < vals.size(); ++i) vals[i] = std::bit_cast<T>(get_le<U>(p + i * sizeof(U)));
}

inline Bytes read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open '" + path + "'");
    return Bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

inline void write_file(const std::string& path, const Bytes& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write '" + path + "'");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FormatError("write failed for '" + path + "'");
}

inline DType parse_dtype(const std::string& s) {
    if (s == "f32") return DType::f32;
    if (s == "f64") return DType::f64;
    throw FormatError("unknown dtype '" + s + "'");
}

}  // namespace detail

// ------------------------------------------------------------- tensor file

/// A tensor read from disk in its stored precision.
struct StoredTensor {
    DType dtype = DType::f32;
    Tensor<float> f32;
    Tensor<double> f64;

    const Shape& shape() const { return dtype == DType::f32 ? f32.shape() : f64.shape(); }

    template <Real T>
    Tensor<T> as() const {
        if (dtype == DType::f32) return f32.template cast<T>();
        return f64.template cast<T>();
    }
};

template <Real T>
Bytes encode_tensor(const Tensor<T>& t) {
    if (t.empty()) throw FormatError("cannot encode an empty tensor");
    Bytes out{'F', 'C', 'T', 'N'};
    detail::put_le<std::uint32_t>(out, kTensorFileVersion);
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.ndim()));
    for (auto d : t.shape()) detail::put_le<std::uint64_t>(out, d);
    out.push_back(static_cast<std::uint8_t>(dtype_of<T>()));
    detail::put_values<T>(out, t.data());
    return out;
}

inline StoredTensor decode_tensor(const Bytes& b) {
    if (b.size() < 12) throw TruncatedFileError("tensor file: truncated header");
    if (std::memcmp(b.data(), "FCTN", 4) != 0) throw FormatError("tensor file: bad magic");
    const auto version = detail::get_le<std::uint32_t>(b.data() + 4);
    if (version != kTensorFileVersion) throw FormatError("tensor file: unsupported version " + std::to_string(version));
    const auto ndim = detail::get_le<std::uint32_t>(b.data() + 8);
    if (ndim == 0 || ndim > 16) throw FormatError("tensor file: invalid rank " + std::to_string(ndim));
    std::size_t pos = 12;
    if (b.size() < pos + 8 * ndim + 1) throw TruncatedFileError("tensor file: truncated dims");
    Shape shape;
    for (std::uint32_t i = 0; i < ndim; ++i, pos += 8) {
        auto d = detail::get_le<std::uint64_t>(b.data() + pos);
        if (d == 0) throw FormatError("tensor file: zero extent");
        shape.push_back(static_cast<std::size_t>(d));
    }
    const std::uint8_t tag = b[pos++];
    if (tag > 1) throw FormatError("tensor file: unknown dtype tag " + std::to_string(tag));
    StoredTensor st;
    st.dtype = static_cast<DType>(tag);
    const std::size_t n = shape_numel(shape);
    const std::size_t need = n * dtype_size(st.dtype);
    if (b.size() - pos != need) {
        throw TruncatedFileError("tensor file: payload is " + std::to_string(b.size() - pos) + " bytes, expected " +
                                 std::to_string(need));
    }
    if (st.dtype == DType::f32) {
        st.f32 = Tensor<float>(shape);
        detail::get_values<float>(b.data() + pos, st.f32.data());
    } else {
        st.f64 = Tensor<double>(shape);
        detail::get_values<double>(b.data() + pos, st.f64.data());
    }
    return st;
}

template <Real T>
void save_tensor(const Tensor<T>& t, const std::string& path) {
    detail::write_file(path, encode_tensor(t));
}

inline StoredTensor load_tensor(const std::string& path) { return decode_tensor(detail::read_file(path)); }

// ------------------------------------------------------------- weight file

template <Real T>
Bytes encode_weights(const ModelParams<T>& params) {
    auto reg = params.registry();
    nlohmann::json header = nlohmann::json::object();
    header["__config__"] = params.config;
    std::vector<std::size_t> offsets;
    std::size_t off = 0;
    const std::size_t esz = sizeof(T);
    for (const auto& [name, v] : reg) {
        if (header.contains(name)) throw FormatError("duplicate tensor name '" + name + "'");
        off = (off + kPayloadAlignment - 1) / kPayloadAlignment * kPayloadAlignment;
        header[name] = {{"shape", v.shape()},
                        {"dtype", dtype_name(dtype_of<T>())},
                        {"byte_offset", off},
                        {"byte_length", v.numel() * esz}};
        offsets.push_back(off);
        off += v.numel() * esz;
    }
    std::string text = header.dump();
    const std::size_t fixed = 16;
    while ((fixed + text.size()) % kPayloadAlignment != 0) text.push_back(' ');

    Bytes out{'F', 'C', 'V', 'T'};
    detail::put_le<std::uint32_t>(out, kWeightFileVersion);
    detail::put_le<std::uint64_t>(out, text.size());
    out.insert(out.end(), text.begin(), text.end());
    const std::size_t base = out.size();
    out.reserve(base + off);
    for (std::size_t i = 0; i < reg.size(); ++i) {
        out.resize(base + offsets[i], 0);
        detail::put_values<T>(out, reg[i].second.value().data());
    }
    return out;
}

namespace detail {

struct WeightHeader {
    nlohmann::json json;
    std::size_t length = 0;  // bytes of JSON text after the fixed 16-byte prefix
};

inline WeightHeader parse_weight_header(const Bytes& b) {
    if (b.size() < 16) throw TruncatedFileError("weight file: shorter than its fixed header");
    if (std::memcmp(b.data(), "FCVT", 4) != 0) throw FormatError("weight file: bad magic");
    const auto version = get_le<std::uint32_t>(b.data() + 4);
    if (version != kWeightFileVersion) throw FormatError("weight file: unsupported version " + std::to_string(version));
    const auto header_len = get_le<std::uint64_t>(b.data() + 8);
    if (header_len > b.size() - 16) {
        throw TruncatedFileError("weight file: header length " + std::to_string(header_len) + " exceeds file size " +
                                 std::to_string(b.size()));
    }
    WeightHeader h;
    h.length = static_cast<std::size_t>(header_len);
    try {
        h.json = nlohmann::json::parse(b.begin() + 16, b.begin() + 16 + static_cast<std::ptrdiff_t>(header_len));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("weight file: header is not valid JSON: ") + e.what());
    }
    if (!h.json.is_object()) throw FormatError("weight file: header must be a JSON object");
    return h;
}

}  // namespace detail

/// Storage precision of a weight file, read from its header.
inline DType weight_file_dtype(const Bytes& b) {
    const auto h = detail::parse_weight_header(b);
    for (auto it = h.json.begin(); it != h.json.end(); ++it) {
        if (it.key() == "__config__") continue;
        if (!it.value().is_object() || !it.value().contains("dtype")) break;
        return detail::parse_dtype(it.value()["dtype"].template get<std::string>());
    }
    throw FormatError("weight file: no tensor entries");
}

/// Decodes a weight file. With `expected`, the file must hold exactly that
/// config's tensors; otherwise the embedded "__config__" is used.
template <Real T>
ModelParams<T> decode_weights(const Bytes& b, const std::optional<ModelConfig>& expected = std::nullopt) {
    auto [header, header_len] = detail::parse_weight_header(b);

    ModelConfig cfg;
    if (expected) {
        cfg = *expected;
    } else if (header.contains("__config__")) {
        cfg = config_from_json(header["__config__"]);
    } else {
        throw FormatError("weight file: no embedded config and none requested");
    }
    ModelParams<T> params = build_model<T>(cfg, 0);
    auto reg = params.registry();

    const std::size_t payload = b.size() - 16 - header_len;
    const std::uint8_t* base = b.data() + 16 + header_len;

    struct Entry {
        std::string name;
        std::size_t offset, length;
    };
    std::vector<Entry> entries;
    std::map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < reg.size(); ++i) index[reg[i].first] = i;
    for (auto it = header.begin(); it != header.end(); ++it) {
        if (it.key() == "__config__") continue;
        if (!index.count(it.key())) throw FormatError("weight file: unknown tensor '" + it.key() + "' for this config");
        const auto& e = it.value();
        try {
            entries.push_back({it.key(), e.at("byte_offset").get<std::size_t>(), e.at("byte_length").get<std::size_t>()});
        } catch (const nlohmann::json::exception&) {
            throw FormatError("weight file: malformed entry for '" + it.key() + "'");
        }
    }
    for (const auto& [name, v] : reg) {
        if (!header.contains(name)) throw FormatError("weight file: missing tensor '" + name + "'");
    }
    std::sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& c) { return a.offset < c.offset; });
    std::size_t end = 0;
    for (const auto& e : entries) {
        if (e.offset < end) throw FormatError("weight file: tensor '" + e.name + "' overlaps its predecessor");
        end = e.offset + e.length;
    }
    if (end > payload) throw TruncatedFileError("weight file: tensors extend past end of file");
    if (end != payload) throw TruncatedFileError("weight file: file size does not match header-declared payload");

    for (const auto& e : entries) {
        auto& v = reg[index[e.name]].second;
        const nlohmann::json& meta = header[e.name];
        if (detail::parse_dtype(meta.at("dtype").template get<std::string>()) != dtype_of<T>()) {
            throw FormatError("weight file: tensor '" + e.name + "' has dtype " + meta.at("dtype").template get<std::string>());
        }
        if (meta.at("shape").template get<Shape>() != v.shape()) {
            throw FormatError("weight file: tensor '" + e.name + "' shape does not match config");
        }
        if (e.length != v.numel() * sizeof(T)) throw FormatError("weight file: bad byte_length for '" + e.name + "'");
        detail::get_values<T>(base + e.offset, v.mutable_value().data());
    }
    return params;
}

template <Real T>
void save_weights(const ModelParams<T>& params, const std::string& path) {
    detail::write_file(path, encode_weights(params));
}

template <Real T>
ModelParams<T> load_weights(const std::string& path, const std::optional<ModelConfig>& expected = std::nullopt) {
    return decode_weights<T>(detail::read_file(path), expected);
}

}  // namespace fcvit
