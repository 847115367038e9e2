// Binary container shared by modules, backbones, selectors and datasets.
//
//   "PLUT" | version u16 LE | header_len u32 LE | header (UTF-8 JSON)
//   | payload (tensors in manifest order, little-endian) | SHA-256 of all preceding bytes
//
// The header carries id, domain_label, kind, hyper, meta and the tensor
// manifest under "tensors": [{name, shape, dtype}]. dtype is "f32" or "u16".
#pragma once

#include <openssl/evp.h>

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "pluto/tensor.hpp"

namespace pluto {

static_assert(std::endian::native == std::endian::little, "container codec assumes a little-endian host");

using Bytes = std::vector<std::uint8_t>;
using Digest = std::array<std::uint8_t, 32>;

struct FormatError : Error {
    using Error::Error;
};
struct BadMagicError : FormatError {
    using FormatError::FormatError;
};
struct VersionError : FormatError {
    using FormatError::FormatError;
};
struct TruncationError : FormatError {
    using FormatError::FormatError;
};
struct ShapeMismatchError : FormatError {
    using FormatError::FormatError;
};
struct DigestMismatchError : FormatError {
    using FormatError::FormatError;
};

inline Digest sha256(const std::uint8_t* data, std::size_t n) {
    Digest out{};
    unsigned int len = 0;
    if (EVP_Digest(data, n, out.data(), &len, EVP_sha256(), nullptr) != 1 || len != out.size())
        throw Error("SHA-256 computation failed");
    return out;
}

inline Digest sha256(std::span<const std::uint8_t> bytes) { return sha256(bytes.data(), bytes.size()); }

inline std::string to_hex(const Digest& d) {
    static constexpr char hex[] = "0123456789abcdef";
    std::string s;
    s.reserve(64);
    for (auto b : d) {
        s.push_back(hex[b >> 4]);
        s.push_back(hex[b & 15]);
    }
    return s;
}

inline constexpr std::array<char, 4> kMagic{'P', 'L', 'U', 'T'};
inline constexpr std::uint16_t kContainerVersion = 1;
inline constexpr std::size_t kPrefixLen = 4 + 2 + 4;

enum class DType { f32, u16 };

inline const char* dtype_name(DType t) { return t == DType::f32 ? "f32" : "u16"; }
inline std::size_t dtype_size(DType t) { return t == DType::f32 ? 4 : 2; }

struct ContainerTensor {
    std::string name;
    Tensor value;
    DType dtype = DType::f32;
};

/// Decoded container: header fields other than the manifest, plus tensors.
struct Container {
    std::string id;
    std::string domain_label;
    std::string kind;
    nlohmann::json hyper = nlohmann::json::object();
    nlohmann::json meta = nlohmann::json::object();
    std::vector<ContainerTensor> tensors;

    const Tensor& tensor(std::string_view name) const {
        for (const auto& t : tensors)
            if (t.name == name) return t.value;
        throw FormatError("container has no tensor named " + std::string(name));
    }
};

namespace detail {

template <typename T>
void put_le(Bytes& out, T v) {
    std::uint8_t buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out.insert(out.end(), buf, buf + sizeof(T));
}

template <typename T>
T get_le(const std::uint8_t* p) {
    T v;
    std::memcpy(&v, p, sizeof(T));
    return v;
}

} // namespace detail

inline Bytes encode_container(const Container& c) {
    nlohmann::json manifest = nlohmann::json::array();
    for (const auto& t : c.tensors)
        manifest.push_back({{"name", t.name}, {"shape", t.value.shape()}, {"dtype", dtype_name(t.dtype)}});
    nlohmann::json header = {{"id", c.id},       {"domain_label", c.domain_label}, {"kind", c.kind},
                             {"hyper", c.hyper}, {"meta", c.meta},                 {"tensors", manifest}};
    const std::string hs = header.dump();

    Bytes out;
    out.insert(out.end(), kMagic.begin(), kMagic.end());
    detail::put_le<std::uint16_t>(out, kContainerVersion);
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(hs.size()));
    out.insert(out.end(), hs.begin(), hs.end());
    for (const auto& t : c.tensors) {
        for (double v : t.value.data()) {
            if (t.dtype == DType::f32)
                detail::put_le<float>(out, static_cast<float>(v));
            else
                detail::put_le<std::uint16_t>(out, static_cast<std::uint16_t>(v));
        }
    }
    const Digest d = sha256(out);
    out.insert(out.end(), d.begin(), d.end());
    return out;
}

/// Parses and digest-verifies a container. Shapes are checked against the
/// payload length only; kind-specific shape checks belong to the caller.
inline Container decode_container(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic.data(), 4) != 0)
        throw BadMagicError("container: bad magic");
    if (bytes.size() < kPrefixLen)
        throw TruncationError("container: truncated prefix, expected at least " + std::to_string(kPrefixLen) +
                              " bytes, got " + std::to_string(bytes.size()));
    const auto version = detail::get_le<std::uint16_t>(bytes.data() + 4);
    if (version != kContainerVersion) throw VersionError("container: unsupported version " + std::to_string(version));
    const auto hlen = detail::get_le<std::uint32_t>(bytes.data() + 6);
    if (bytes.size() < kPrefixLen + hlen)
        throw TruncationError("container: truncated header, expected " + std::to_string(kPrefixLen + hlen) +
                              " bytes, got " + std::to_string(bytes.size()));

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.begin() + kPrefixLen, bytes.begin() + kPrefixLen + hlen);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("container: malformed header: ") + e.what());
    }

    Container c;
    std::vector<std::pair<ContainerTensor, std::size_t>> layout;
    std::size_t payload = 0;
    try {
        c.id = header.at("id").get<std::string>();
        c.domain_label = header.at("domain_label").get<std::string>();
        c.kind = header.at("kind").get<std::string>();
        c.hyper = header.value("hyper", nlohmann::json::object());
        c.meta = header.value("meta", nlohmann::json::object());
        for (const auto& m : header.at("tensors")) {
            ContainerTensor t;
            t.name = m.at("name").get<std::string>();
            const auto shape = m.at("shape").get<Shape>();
            const auto dt = m.value("dtype", std::string("f32"));
            if (dt == "f32")
                t.dtype = DType::f32;
            else if (dt == "u16")
                t.dtype = DType::u16;
            else
                throw FormatError("container: unknown dtype " + dt);
            if (shape.empty()) throw ShapeMismatchError("container: empty shape for " + t.name);
            const std::size_t n = shape_numel(shape);
            t.value = Tensor(shape);
            layout.emplace_back(std::move(t), n);
            payload += n * dtype_size(layout.back().first.dtype);
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("container: bad header field: ") + e.what());
    } catch (const DimensionError& e) {
        throw ShapeMismatchError(std::string("container: ") + e.what());
    }

    const std::size_t expected = kPrefixLen + hlen + payload + 32;
    if (bytes.size() < expected)
        throw TruncationError("container: truncated payload, expected " + std::to_string(expected) + " bytes, got " +
                              std::to_string(bytes.size()));
    if (bytes.size() > expected)
        throw FormatError("container: " + std::to_string(bytes.size() - expected) + " trailing bytes");

    const Digest actual = sha256(bytes.data(), expected - 32);
    if (std::memcmp(actual.data(), bytes.data() + expected - 32, 32) != 0)
        throw DigestMismatchError("container: SHA-256 trailer does not match contents");

    const std::uint8_t* p = bytes.data() + kPrefixLen + hlen;
    for (auto& [t, n] : layout) {
        auto dst = t.value.data();
        for (std::size_t i = 0; i < n; ++i) {
            if (t.dtype == DType::f32) {
                dst[i] = detail::get_le<float>(p);
                p += 4;
            } else {
                dst[i] = detail::get_le<std::uint16_t>(p);
                p += 2;
            }
        }
        c.tensors.push_back(std::move(t));
    }
    return c;
}

/// Digest of a whole container file (the index digest, not the trailer).
inline std::string file_digest_hex(std::span<const std::uint8_t> bytes) { return to_hex(sha256(bytes)); }

} // namespace pluto
