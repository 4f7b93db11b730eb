#pragma once

#include "flowsuff/io/binary.hpp"
#include "flowsuff/numcore/embedding.hpp"
#include "flowsuff/numcore/hash.hpp"

#include <json.hpp>

#include <cmath>
#include <regex>
#include <string>
#include <vector>

namespace flowsuff::io {

/// Embedding container: "FSEM", u32 LE header length, UTF-8 JSON header,
/// then n * d little-endian float32 values, row-major.
inline constexpr char kEmbeddingMagic[4] = {'F', 'S', 'E', 'M'};
inline constexpr int kEmbeddingSchemaVersion = 1;

inline std::string encode_embeddings(const EmbeddingSet& e) {
    nlohmann::ordered_json h;
    h["schema_version"] = kEmbeddingSchemaVersion;
    h["model_id"] = e.model_id;
    h["n"] = static_cast<std::uint64_t>(e.rows());
    h["d"] = static_cast<std::uint64_t>(e.dim());
    h["dtype"] = "f32";
    h["row_major"] = true;
    h["corpus_hash"] = e.corpus_hash;
    const std::string header = h.dump();
    std::string out(kEmbeddingMagic, 4);
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(header.size()));
    out += header;
    out.reserve(out.size() + 4 * static_cast<std::size_t>(e.values.size()));
    // d x n column-major storage is the row-major n x d payload
    for (Index i = 0; i < e.values.size(); ++i) put_f32(out, e.values.data()[i]);
    return out;
}

/// Row indices holding NaN or Inf (at most `limit`).
inline std::vector<Index> non_finite_rows(const Matrix& values, std::size_t limit = 20) {
    std::vector<Index> rows;
    for (Index c = 0; c < values.cols() && rows.size() < limit; ++c)
        if (!values.col(c).allFinite()) rows.push_back(c);
    return rows;
}

inline EmbeddingSet decode_embeddings(const std::string& data, const std::string& origin = "<memory>") {
    const auto* p = reinterpret_cast<const unsigned char*>(data.data());
    if (data.size() < 8 || std::memcmp(data.data(), kEmbeddingMagic, 4) != 0)
        throw CorruptFileError(origin + ": not an embedding container (bad magic)");
    const auto hlen = get_le<std::uint32_t>(p + 4);
    if (data.size() < 8 + static_cast<std::size_t>(hlen))
        throw CorruptFileError(origin + ": header truncated");
    nlohmann::json h;
    try {
        h = nlohmann::json::parse(data.substr(8, hlen));
    } catch (const nlohmann::json::exception& e) {
        throw CorruptFileError(origin + ": header is not valid JSON: " + e.what());
    }
    std::uint64_t n = 0, d = 0;
    EmbeddingSet out;
    try {
        if (h.at("schema_version").get<int>() != kEmbeddingSchemaVersion)
            throw CorruptFileError(origin + ": unsupported schema_version " + h.at("schema_version").dump());
        if (h.at("dtype").get<std::string>() != "f32") throw CorruptFileError(origin + ": dtype must be f32");
        if (!h.at("row_major").get<bool>()) throw CorruptFileError(origin + ": payload must be row-major");
        n = h.at("n").get<std::uint64_t>();
        d = h.at("d").get<std::uint64_t>();
        out.model_id = h.at("model_id").get<std::string>();
        out.corpus_hash = h.at("corpus_hash").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
        throw CorruptFileError(origin + ": bad header: " + e.what());
    }
    if (out.model_id.empty()) throw CorruptFileError(origin + ": empty model_id");
    const std::size_t expected = 4 * static_cast<std::size_t>(n) * static_cast<std::size_t>(d);
    const std::size_t actual = data.size() - 8 - hlen;
    if (actual != expected)
        throw CorruptFileError(origin + ": payload is " + std::to_string(actual) + " bytes, expected " +
                               std::to_string(expected) + " (n=" + std::to_string(n) + ", d=" + std::to_string(d) +
                               ")");
    out.values.resize(static_cast<Index>(d), static_cast<Index>(n));
    const unsigned char* payload = p + 8 + hlen;
    for (std::size_t i = 0; i < n * d; ++i) out.values.data()[i] = get_f32(payload + 4 * i);
    const auto bad = non_finite_rows(out.values);
    if (!bad.empty()) {
        std::string rows;
        for (auto r : bad) rows += (rows.empty() ? "" : ",") + std::to_string(r);
        throw DataError(origin + ": non-finite values in row(s) " + rows);
    }
    return out;
}

inline void write_embeddings(const fs::path& path, const EmbeddingSet& e) {
    write_file_atomic(path, encode_embeddings(e));
}

inline EmbeddingSet read_embeddings(const fs::path& path) { return decode_embeddings(read_file(path), path.string()); }

/// Loads a pool and checks that all members share one corpus.
inline std::vector<EmbeddingSet> read_pool(const std::vector<fs::path>& paths) {
    std::vector<EmbeddingSet> pool;
    for (const auto& p : paths) pool.push_back(read_embeddings(p));
    for (std::size_t i = 1; i < pool.size(); ++i)
        if (pool[i].corpus_hash != pool[0].corpus_hash)
            throw AlignmentError("corpus hash of '" + pool[i].model_id + "' (" + pool[i].corpus_hash +
                                 ") differs from '" + pool[0].model_id + "' (" + pool[0].corpus_hash + ")");
    return pool;
}

/// 2-D float32/float64 array from a ".npy" version 1.0 file.
inline Matrix read_npy(const std::string& data, const std::string& origin = "<memory>") {
    const auto* p = reinterpret_cast<const unsigned char*>(data.data());
    if (data.size() < 10 || data.compare(0, 6, "\x93NUMPY") != 0) throw CorruptFileError(origin + ": not a .npy file");
    if (p[6] != 1 || p[7] != 0)
        throw CorruptFileError(origin + ": only .npy version 1.0 is supported, got " + std::to_string(p[6]) + "." +
                               std::to_string(p[7]));
    const auto hlen = get_le<std::uint16_t>(p + 8);
    if (data.size() < 10 + static_cast<std::size_t>(hlen)) throw CorruptFileError(origin + ": header truncated");
    const std::string header = data.substr(10, hlen);
    std::smatch m;
    if (!std::regex_search(header, m, std::regex(R"('descr'\s*:\s*'([<>|=]?)([fi])(\d+)')")))
        throw CorruptFileError(origin + ": missing descr");
    const std::string order = m[1], kind = m[2];
    const int width = std::stoi(m[3]);
    if (order == ">" || kind != "f" || (width != 4 && width != 8))
        throw DataError(origin + ": only little-endian float32/float64 arrays are supported");
    if (!std::regex_search(header, m, std::regex(R"('fortran_order'\s*:\s*(True|False))")))
        throw CorruptFileError(origin + ": missing fortran_order");
    const bool fortran = m[1] == "True";
    if (!std::regex_search(header, m, std::regex(R"('shape'\s*:\s*\(\s*(\d+)\s*,\s*(\d+)\s*,?\s*\))")))
        throw DataError(origin + ": array must be 2-D");
    const std::size_t n = std::stoull(m[1]), d = std::stoull(m[2]);
    const std::size_t expected = n * d * static_cast<std::size_t>(width);
    const std::size_t actual = data.size() - 10 - hlen;
    if (actual != expected)
        throw CorruptFileError(origin + ": payload is " + std::to_string(actual) + " bytes, expected " +
                               std::to_string(expected));
    const unsigned char* payload = p + 10 + hlen;
    Matrix out(static_cast<Index>(d), static_cast<Index>(n));
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < d; ++c) {
            const std::size_t i = fortran ? c * n + r : r * d + c;
            out(static_cast<Index>(c), static_cast<Index>(r)) =
                width == 4 ? get_f32(payload + 4 * i) : get_f64(payload + 8 * i);
        }
    return out;
}

/// Corpus identity from the bytes of a corpus file.
inline std::string corpus_hash_of_file(const fs::path& path) { return Fnv64().str(read_file(path)).hex(); }

}  // namespace flowsuff::io
