#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "wcmorph/errors.hpp"
#include "wcmorph/tensor.hpp"

namespace wcm {

namespace detail {

inline constexpr char kB64Alphabet[] =
    "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

inline std::string base64_encode(const std::vector<std::uint8_t>& bytes) {
    std::string out;
    out.reserve((bytes.size() + 2) / 3 * 4);
    std::size_t i = 0;
    while (i + 3 <= bytes.size()) {
        const std::uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8) | bytes[i + 2];
        out.push_back(kB64Alphabet[(v >> 18) & 63]);
        out.push_back(kB64Alphabet[(v >> 12) & 63]);
        out.push_back(kB64Alphabet[(v >> 6) & 63]);
        out.push_back(kB64Alphabet[v & 63]);
        i += 3;
    }
    const std::size_t rem = bytes.size() - i;
    if (rem == 1) {
        const std::uint32_t v = bytes[i] << 16;
        out.push_back(kB64Alphabet[(v >> 18) & 63]);
        out.push_back(kB64Alphabet[(v >> 12) & 63]);
        out.push_back('=');
        out.push_back('=');
    } else if (rem == 2) {
        const std::uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8);
        out.push_back(kB64Alphabet[(v >> 18) & 63]);
        out.push_back(kB64Alphabet[(v >> 12) & 63]);
        out.push_back(kB64Alphabet[(v >> 6) & 63]);
        out.push_back('=');
    }
    return out;
}

inline std::vector<std::uint8_t> base64_decode(const std::string& text) {
    auto value_of = [](char c) -> int {
        if (c >= 'A' && c <= 'Z') return c - 'A';
        if (c >= 'a' && c <= 'z') return c - 'a' + 26;
        if (c >= '0' && c <= '9') return c - '0' + 52;
        if (c == '+') return 62;
        if (c == '/') return 63;
        return -1;
    };
    if (text.size() % 4 != 0) throw FormatError("base64: length not a multiple of 4");
    std::vector<std::uint8_t> out;
    out.reserve(text.size() / 4 * 3);
    for (std::size_t i = 0; i < text.size(); i += 4) {
        int vals[4];
        int pad = 0;
        for (int k = 0; k < 4; ++k) {
            const char c = text[i + k];
            if (c == '=') {
                if (i + 4 != text.size() || k < 2) throw FormatError("base64: bad padding");
                vals[k] = 0;
                ++pad;
            } else {
                vals[k] = value_of(c);
                if (vals[k] < 0 || pad > 0) throw FormatError("base64: invalid character");
            }
        }
        const std::uint32_t v = (vals[0] << 18) | (vals[1] << 12) | (vals[2] << 6) | vals[3];
        out.push_back((v >> 16) & 0xff);
        if (pad < 2) out.push_back((v >> 8) & 0xff);
        if (pad < 1) out.push_back(v & 0xff);
    }
    return out;
}

inline std::vector<std::uint8_t> doubles_to_le_bytes(const std::vector<double>& values) {
    std::vector<std::uint8_t> bytes(values.size() * 8);
    for (std::size_t i = 0; i < values.size(); ++i) {
        std::uint64_t bits;
        std::memcpy(&bits, &values[i], 8);
        for (int b = 0; b < 8; ++b) bytes[i * 8 + b] = (bits >> (8 * b)) & 0xff;
    }
    return bytes;
}

inline std::vector<double> le_bytes_to_doubles(const std::vector<std::uint8_t>& bytes) {
    if (bytes.size() % 8 != 0) throw FormatError("weights: payload is not a whole number of f64");
    std::vector<double> values(bytes.size() / 8);
    for (std::size_t i = 0; i < values.size(); ++i) {
        std::uint64_t bits = 0;
        for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(bytes[i * 8 + b]) << (8 * b);
        std::memcpy(&values[i], &bits, 8);
    }
    return values;
}

} // namespace detail

inline constexpr const char* kWeightsFormat = "wcmorph/weights/v1";

// Named, shaped parameter collection. Insertion order is the canonical
// parameter order everywhere (optimizer state, serialization, hashing).
// Batch-norm running stats live here too, under *.running_* names.
struct ModelWeights {
    std::vector<std::pair<std::string, Tensor>> entries;
    std::uint64_t seed = 0;
    std::vector<std::pair<std::string, std::string>> hyperparameters;

    Tensor& add(const std::string& name, Tensor t) {
        if (has(name)) throw ArgumentError("weights: duplicate parameter name " + name);
        entries.emplace_back(name, std::move(t));
        return entries.back().second;
    }

    bool has(const std::string& name) const {
        for (const auto& [n, t] : entries) {
            if (n == name) return true;
        }
        return false;
    }

    Tensor& at(const std::string& name) {
        for (auto& [n, t] : entries) {
            if (n == name) return t;
        }
        throw ArgumentError("weights: no parameter named " + name);
    }

    const Tensor& at(const std::string& name) const {
        for (const auto& [n, t] : entries) {
            if (n == name) return t;
        }
        throw ArgumentError("weights: no parameter named " + name);
    }

    void set_hyper(const std::string& key, const std::string& value) {
        for (auto& [k, v] : hyperparameters) {
            if (k == key) {
                v = value;
                return;
            }
        }
        hyperparameters.emplace_back(key, value);
    }

    std::string hyper(const std::string& key, const std::string& fallback = "") const {
        for (const auto& [k, v] : hyperparameters) {
            if (k == key) return v;
        }
        return fallback;
    }
};

inline nlohmann::ordered_json weights_to_json(const ModelWeights& w) {
    nlohmann::ordered_json j;
    j["format"] = kWeightsFormat;
    j["seed"] = w.seed;
    nlohmann::ordered_json hp = nlohmann::ordered_json::object();
    for (const auto& [k, v] : w.hyperparameters) hp[k] = v;
    j["hyperparameters"] = hp;
    nlohmann::ordered_json params = nlohmann::ordered_json::array();
    for (const auto& [name, t] : w.entries) {
        nlohmann::ordered_json p;
        p["name"] = name;
        p["shape"] = t.shape();
        p["data"] = detail::base64_encode(detail::doubles_to_le_bytes(t.vec()));
        params.push_back(std::move(p));
    }
    j["parameters"] = std::move(params);
    return j;
}

inline void save_weights(const std::string& path, const ModelWeights& w) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ArgumentError("weights: cannot open " + path + " for writing");
    out << weights_to_json(w).dump(2) << '\n';
}

inline ModelWeights weights_from_json(const nlohmann::ordered_json& j, const std::string& where) {
    if (!j.contains("format") || j["format"] != kWeightsFormat) {
        throw FormatError(where + ": expected format " + std::string(kWeightsFormat));
    }
    ModelWeights w;
    w.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& [k, v] : j.at("hyperparameters").items()) {
        w.hyperparameters.emplace_back(k, v.get<std::string>());
    }
    for (const auto& p : j.at("parameters")) {
        Shape shape = p.at("shape").get<Shape>();
        auto values = detail::le_bytes_to_doubles(
            detail::base64_decode(p.at("data").get<std::string>()));
        if (values.size() != shape_numel(shape)) {
            throw FormatError(where + ": payload length does not match shape for parameter " +
                              p.at("name").get<std::string>());
        }
        Tensor t(std::move(shape), std::move(values));
        if (!t.all_finite()) {
            throw FormatError(where + ": non-finite values in parameter " +
                              p.at("name").get<std::string>());
        }
        w.add(p.at("name").get<std::string>(), std::move(t));
    }
    return w;
}

inline ModelWeights load_weights(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw StageDependencyError("missing weights file: " + path);
    nlohmann::ordered_json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path + ": not valid JSON: " + e.what());
    }
    return weights_from_json(j, path);
}

inline bool weights_equal(const ModelWeights& a, const ModelWeights& b) {
    return weights_to_json(a) == weights_to_json(b);
}

} // namespace wcm
