// SPDX-License-Identifier: Apache-2.0
#pragma once

// Model file layout (version 1):
//
//   CPTPM-MODEL 1\n
//   <manifest length in bytes>\n
//   <manifest: JSON text>
//   <blob section: little-endian float64 arrays, back to back>
//
// The manifest lists every layer with its kind and shape metadata; each
// tensor is a blob reference {shape, offset, bytes, crc32} where offset is
// relative to the start of the blob section.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <zlib.h>

#include <nlohmann/json.hpp>

#include "cptpm/network.hpp"

namespace cptpm {

inline constexpr std::string_view kModelMagic = "CPTPM-MODEL";
inline constexpr int kModelFormatVersion = 1;

class ModelFileError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed or corrupted content; offset is the byte position in the file.
class ParseError : public ModelFileError {
public:
    ParseError(const std::string& msg, std::size_t offset)
        : ModelFileError("parse error at byte " + std::to_string(offset) + ": " + msg),
          offset_(offset) {}
    std::size_t offset() const noexcept { return offset_; }

private:
    std::size_t offset_;
};

/// Well-formed content this reader's format version does not understand.
class FormatVersionError : public ModelFileError {
public:
    using ModelFileError::ModelFileError;
};

namespace detail {

using nlohmann::json;

inline std::uint32_t crc32_of(std::string_view bytes) {
    return static_cast<std::uint32_t>(
        ::crc32(0L, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size())));
}

inline std::string hex32(std::uint32_t v) {
    char buf[9];
    std::snprintf(buf, sizeof buf, "%08x", v);
    return buf;
}

class BlobWriter {
public:
    json add(const Tensor& t) {
        std::string bytes(t.size() * 8, '\0');
        for (std::size_t i = 0; i < t.size(); ++i) {
            const auto bits = std::bit_cast<std::uint64_t>(t.data()[i]);
            for (int b = 0; b < 8; ++b) bytes[i * 8 + b] = static_cast<char>((bits >> (8 * b)) & 0xff);
        }
        json ref = {{"shape", t.shape()},
                    {"offset", blobs_.size()},
                    {"bytes", bytes.size()},
                    {"crc32", hex32(crc32_of(bytes))}};
        blobs_ += bytes;
        return ref;
    }
    const std::string& bytes() const { return blobs_; }

private:
    std::string blobs_;
};

inline json spec_json(const ConvSpec& s) {
    return {{"out_channels", s.out_channels}, {"in_channels", s.in_channels},
            {"kernel_size", s.kernel_size},   {"stride", s.stride},
            {"padding", s.padding},           {"groups", s.groups}};
}

inline ConvSpec spec_from_json(const json& j) {
    return ConvSpec{j.at("out_channels").get<std::size_t>(), j.at("in_channels").get<std::size_t>(),
                    j.at("kernel_size").get<std::size_t>(),  j.at("stride").get<std::size_t>(),
                    j.at("padding").get<std::size_t>(),      j.at("groups").get<std::size_t>()};
}

class BlobReader {
public:
    BlobReader(std::string_view blobs, std::size_t base) : blobs_(blobs), base_(base) {}

    Tensor read(const json& ref) const {
        const Shape shape = ref.at("shape").get<Shape>();
        const std::size_t offset = ref.at("offset").get<std::size_t>();
        const std::size_t bytes = ref.at("bytes").get<std::size_t>();
        const std::string crc = ref.at("crc32").get<std::string>();
        for (std::size_t e : shape)
            if (e == 0) throw ParseError("blob has a zero extent", base_ + offset);
        if (shape.empty() || bytes != shape_volume(shape) * 8)
            throw ParseError("blob byte length does not match its shape", base_ + offset);
        if (offset > blobs_.size() || bytes > blobs_.size() - offset)
            throw ParseError("blob extends past end of file (truncated?)",
                             base_ + std::min(offset, blobs_.size()));
        const std::string_view raw = blobs_.substr(offset, bytes);
        if (hex32(crc32_of(raw)) != crc)
            throw ParseError("blob checksum mismatch", base_ + offset);
        std::vector<double> values(bytes / 8);
        for (std::size_t i = 0; i < values.size(); ++i) {
            std::uint64_t bits = 0;
            for (int b = 0; b < 8; ++b)
                bits |= std::uint64_t(static_cast<unsigned char>(raw[i * 8 + b])) << (8 * b);
            values[i] = std::bit_cast<double>(bits);
        }
        return Tensor(shape, std::move(values));
    }

private:
    std::string_view blobs_;
    std::size_t base_;
};

}  // namespace detail

inline std::string serialize_model(const NetworkSpec& net) {
    using detail::json;
    validate(net);
    detail::BlobWriter blobs;
    json layers = json::array();
    for (const auto& layer : net.layers) {
        json j = {{"name", layer.name}, {"kind", layer_kind(layer.body)}};
        std::visit(
            [&](const auto& body) {
                using B = std::decay_t<decltype(body)>;
                if constexpr (std::is_same_v<B, ConvLayer>) {
                    j["spec"] = detail::spec_json(body.spec);
                    j["blobs"] = {{"weight", blobs.add(body.weight)}, {"bias", blobs.add(body.bias)}};
                } else if constexpr (std::is_same_v<B, DecomposedConvLayer>) {
                    j["spec"] = detail::spec_json(body.spec);
                    j["blobs"] = {{"u1", blobs.add(body.factors.u1)},
                                  {"u2", blobs.add(body.factors.u2)},
                                  {"u3", blobs.add(body.factors.u3)},
                                  {"bias", blobs.add(body.bias)}};
                } else if constexpr (std::is_same_v<B, FcLayer>) {
                    j["blobs"] = {{"weight", blobs.add(body.weight)}, {"bias", blobs.add(body.bias)}};
                } else if constexpr (std::is_same_v<B, DecomposedFcLayer>) {
                    j["blobs"] = {{"ud", blobs.add(body.factors.ud)},
                                  {"vt", blobs.add(body.factors.vt)},
                                  {"bias", blobs.add(body.bias)}};
                } else if constexpr (std::is_same_v<B, MaxPoolLayer>) {
                    j["window"] = body.window;
                    j["stride"] = body.stride;
                }
            },
            layer.body);
        layers.push_back(std::move(j));
    }
    const json manifest = {{"format_version", kModelFormatVersion},
                           {"input_shape", net.input_shape},
                           {"layers", std::move(layers)}};
    const std::string text = manifest.dump(2) + "\n";
    std::string out;
    out += std::string(kModelMagic) + " " + std::to_string(kModelFormatVersion) + "\n";
    out += std::to_string(text.size()) + "\n";
    out += text;
    out += blobs.bytes();
    return out;
}

inline NetworkSpec deserialize_model(std::string_view file) {
    using detail::json;
    // Header line: magic and version.
    const std::size_t eol = file.find('\n');
    if (eol == std::string_view::npos) throw ParseError("missing header line", file.size());
    const std::string_view header = file.substr(0, eol);
    if (header.substr(0, kModelMagic.size()) != kModelMagic)
        throw ParseError("not a model file (bad magic)", 0);
    const std::string_view version_text = header.substr(std::min(header.size(), kModelMagic.size() + 1));
    int version = 0;
    try {
        std::size_t used = 0;
        version = std::stoi(std::string(version_text), &used);
        if (used != version_text.size()) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
        throw ParseError("malformed version field", kModelMagic.size());
    }
    if (version != kModelFormatVersion)
        throw FormatVersionError("model format version " + std::to_string(version) +
                                 " is not supported (reader understands version " +
                                 std::to_string(kModelFormatVersion) + ")");

    // Manifest length line.
    const std::size_t len_start = eol + 1;
    const std::size_t len_end = file.find('\n', len_start);
    if (len_end == std::string_view::npos) throw ParseError("missing manifest length", len_start);
    std::size_t manifest_len = 0;
    {
        const std::string_view digits = file.substr(len_start, len_end - len_start);
        if (digits.empty() || digits.size() > 18 ||
            digits.find_first_not_of("0123456789") != std::string_view::npos)
            throw ParseError("malformed manifest length", len_start);
        manifest_len = std::stoull(std::string(digits));
    }
    const std::size_t manifest_start = len_end + 1;
    if (manifest_len > file.size() - manifest_start)
        throw ParseError("manifest extends past end of file (truncated?)", file.size());

    json manifest;
    try {
        manifest = json::parse(file.substr(manifest_start, manifest_len));
    } catch (const json::parse_error& e) {
        throw ParseError(std::string("manifest: ") + e.what(),
                         manifest_start + (e.byte > 0 ? e.byte - 1 : 0));
    }

    const std::size_t blob_base = manifest_start + manifest_len;
    const detail::BlobReader blobs(file.substr(blob_base), blob_base);
    NetworkSpec net;
    try {
        const int declared = manifest.at("format_version").get<int>();
        if (declared != kModelFormatVersion)
            throw FormatVersionError("manifest declares format version " + std::to_string(declared) +
                                     ", header declares " + std::to_string(version));
        net.input_shape = manifest.at("input_shape").get<Shape>();
        for (const json& j : manifest.at("layers")) {
            Layer layer;
            layer.name = j.at("name").get<std::string>();
            const std::string kind = j.at("kind").get<std::string>();
            if (kind == "conv") {
                const json& b = j.at("blobs");
                layer.body = ConvLayer{detail::spec_from_json(j.at("spec")), blobs.read(b.at("weight")),
                                       blobs.read(b.at("bias"))};
            } else if (kind == "decomposed_conv") {
                const json& b = j.at("blobs");
                const ConvSpec spec = detail::spec_from_json(j.at("spec"));
                layer.body = DecomposedConvLayer{
                    spec,
                    CpFactors{blobs.read(b.at("u1")), blobs.read(b.at("u2")), blobs.read(b.at("u3")),
                              spec.groups},
                    blobs.read(b.at("bias"))};
            } else if (kind == "fc") {
                const json& b = j.at("blobs");
                layer.body = FcLayer{blobs.read(b.at("weight")), blobs.read(b.at("bias"))};
            } else if (kind == "decomposed_fc") {
                const json& b = j.at("blobs");
                layer.body = DecomposedFcLayer{SvdFactors{blobs.read(b.at("ud")), blobs.read(b.at("vt"))},
                                               blobs.read(b.at("bias"))};
            } else if (kind == "relu") {
                layer.body = ReluLayer{};
            } else if (kind == "max_pool") {
                layer.body = MaxPoolLayer{j.at("window").get<std::size_t>(), j.at("stride").get<std::size_t>()};
            } else if (kind == "flatten") {
                layer.body = FlattenLayer{};
            } else {
                throw FormatVersionError("unknown layer kind '" + kind + "' for model format version " +
                                         std::to_string(kModelFormatVersion));
            }
            net.layers.push_back(std::move(layer));
        }
        validate(net);
    } catch (const json::exception& e) {
        throw ParseError(std::string("manifest schema: ") + e.what(), manifest_start);
    } catch (const std::logic_error& e) {
        // Shape and spec validation failures all derive from logic_error.
        throw ParseError(std::string("inconsistent model: ") + e.what(), manifest_start);
    }
    return net;
}

inline void save_model(const NetworkSpec& net, const std::string& path) {
    const std::string bytes = serialize_model(net);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("failed writing '" + path + "'");
}

inline NetworkSpec load_model(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open model file '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return deserialize_model(ss.str());
}

}  // namespace cptpm
