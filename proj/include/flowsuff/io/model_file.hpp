#pragma once

#include "flowsuff/io/binary.hpp"
#include "flowsuff/sufficiency/pairwise.hpp"
#include "flowsuff/training/trainer.hpp"

#include <json.hpp>

#include <map>
#include <mutex>
#include <optional>
#include <string>

namespace flowsuff::io {

/// Trained flow file: "FLSF", u16 LE version, u32 LE header length, JSON
/// header (config, standardizers, permutations, conditioner, training
/// record, tensor table), then float32 LE tensors in table order.
inline constexpr char kModelMagic[4] = {'F', 'L', 'S', 'F'};
inline constexpr std::uint16_t kModelVersion = 1;

namespace detail {

inline nlohmann::ordered_json vector_json(const Vector& v) {
    auto a = nlohmann::ordered_json::array();
    for (Index i = 0; i < v.size(); ++i) a.push_back(v(i));
    return a;
}

inline Vector vector_from(const nlohmann::json& j) {
    Vector v(static_cast<Index>(j.size()));
    for (std::size_t i = 0; i < j.size(); ++i) v(static_cast<Index>(i)) = j[i].get<double>();
    return v;
}

inline nlohmann::ordered_json standardizer_json(const Standardizer& s) {
    return {{"mean", vector_json(s.mean)}, {"scale", vector_json(s.scale)}};
}

inline Standardizer standardizer_from(const nlohmann::json& j) {
    return {vector_from(j.at("mean")), vector_from(j.at("scale"))};
}

}  // namespace detail

inline std::string encode_flow(const TrainedFlow& t) {
    FlowModel m = t.model;
    nlohmann::ordered_json h;
    h["format"] = "flowsuff-flow";
    h["dim"] = m.dim();
    h["seed"] = m.seed();
    h["config"] = m.config().to_json();
    h["standardizer"] = detail::standardizer_json(m.standardizer());
    auto blocks = nlohmann::ordered_json::array();
    for (const auto& b : m.blocks())
        blocks.push_back({{"permutation", b.permutation.perm}, {"actnorm_initialized", b.actnorm.initialized}});
    h["blocks"] = std::move(blocks);
    if (m.conditional()) {
        const auto& c = *m.conditioner();
        h["conditioner"] = {{"source_dim", c.source_dim},
                            {"rank", c.rank},
                            {"source_standardizer", detail::standardizer_json(c.source_standardizer)}};
    } else {
        h["conditioner"] = nullptr;
    }
    h["record"] = t.record.to_json();
    auto tensors = nlohmann::ordered_json::array();
    std::string payload;
    for (const auto* p : m.parameters()) {
        tensors.push_back({{"name", p->name}, {"rows", p->value.rows()}, {"cols", p->value.cols()}});
        for (Index i = 0; i < p->value.size(); ++i) put_f32(payload, p->value.data()[i]);
    }
    h["tensors"] = std::move(tensors);
    const std::string header = h.dump();
    std::string out(kModelMagic, 4);
    put_le<std::uint16_t>(out, kModelVersion);
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(header.size()));
    out += header;
    out += payload;
    return out;
}

inline TrainedFlow decode_flow(const std::string& data, const std::string& origin = "<memory>") {
    const auto* p = reinterpret_cast<const unsigned char*>(data.data());
    if (data.size() < 10 || std::memcmp(data.data(), kModelMagic, 4) != 0)
        throw CorruptFileError(origin + ": not a flow file (bad magic)");
    const auto version = get_le<std::uint16_t>(p + 4);
    if (version != kModelVersion) throw CorruptFileError(origin + ": unsupported flow file version " + std::to_string(version));
    const auto hlen = get_le<std::uint32_t>(p + 6);
    if (data.size() < 10 + static_cast<std::size_t>(hlen)) throw CorruptFileError(origin + ": header truncated");
    TrainedFlow out;
    try {
        const auto h = nlohmann::json::parse(data.substr(10, hlen));
        const Index d = h.at("dim").get<Index>();
        const FlowConfig cfg = FlowConfig::from_json(nlohmann::ordered_json(h.at("config")));
        RngStream rng(0);
        FlowModel m = FlowModel::build(d, cfg, rng, h.at("seed").get<std::uint64_t>());
        m.standardizer() = detail::standardizer_from(h.at("standardizer"));
        const auto& blocks = h.at("blocks");
        if (blocks.size() != m.blocks().size()) throw CorruptFileError(origin + ": block count mismatch");
        for (std::size_t l = 0; l < blocks.size(); ++l) {
            m.blocks()[l].permutation.perm = blocks[l].at("permutation").get<std::vector<int>>();
            m.blocks()[l].actnorm.initialized = blocks[l].at("actnorm_initialized").get<bool>();
            if (m.blocks()[l].permutation.perm.size() != static_cast<std::size_t>(d))
                throw CorruptFileError(origin + ": permutation length mismatch");
        }
        if (!h.at("conditioner").is_null()) {
            const auto& c = h.at("conditioner");
            m = m.clone_to_conditional(c.at("source_dim").get<Index>(), c.at("rank").get<Index>(), rng);
            m.conditioner()->source_standardizer = detail::standardizer_from(c.at("source_standardizer"));
        }
        std::map<std::string, ParamTensor*> by_name;
        for (auto* t : m.parameters()) by_name[t->name] = t;
        std::size_t offset = 10 + hlen;
        const auto& tensors = h.at("tensors");
        if (tensors.size() != by_name.size()) throw CorruptFileError(origin + ": tensor count mismatch");
        for (const auto& t : tensors) {
            const auto name = t.at("name").get<std::string>();
            auto it = by_name.find(name);
            if (it == by_name.end()) throw CorruptFileError(origin + ": unknown tensor '" + name + "'");
            const Index rows = t.at("rows").get<Index>(), cols = t.at("cols").get<Index>();
            if (rows != it->second->value.rows() || cols != it->second->value.cols())
                throw CorruptFileError(origin + ": tensor '" + name + "' has the wrong shape");
            const std::size_t bytes = 4 * static_cast<std::size_t>(rows * cols);
            if (offset + bytes > data.size()) throw CorruptFileError(origin + ": tensor payload truncated");
            for (Index i = 0; i < rows * cols; ++i) it->second->value.data()[i] = get_f32(p + offset + 4 * i);
            offset += bytes;
        }
        if (offset != data.size()) throw CorruptFileError(origin + ": trailing bytes after tensors");
        out.model = std::move(m);
        out.record = TrainRecord::from_json(nlohmann::ordered_json(h.at("record")));
    } catch (const nlohmann::json::exception& e) {
        throw CorruptFileError(origin + ": bad header: " + e.what());
    } catch (const ContractViolation& e) {
        throw CorruptFileError(origin + ": inconsistent flow: " + e.what());
    } catch (const ConfigError& e) {
        throw CorruptFileError(origin + ": inconsistent flow: " + e.what());
    }
    return out;
}

inline void write_flow(const fs::path& path, const TrainedFlow& t) { write_file_atomic(path, encode_flow(t)); }

inline TrainedFlow read_flow(const fs::path& path) { return decode_flow(read_file(path), path.string()); }

/// Flow cache on disk, one file per job key. Unreadable entries count as
/// misses and are retrained.
class FileFlowStore : public FlowStore {
public:
    explicit FileFlowStore(fs::path dir) : dir_(std::move(dir)) {}

    std::optional<TrainedFlow> load(const std::string& key) override {
        const fs::path p = path_for(key);
        std::error_code ec;
        if (!fs::exists(p, ec)) return std::nullopt;
        try {
            return read_flow(p);
        } catch (const DataError&) {
            return std::nullopt;
        }
    }

    void save(const std::string& key, const TrainedFlow& flow) override {
        const std::string bytes = encode_flow(flow);
        std::lock_guard<std::mutex> lock(mu_);
        write_file_atomic(path_for(key), bytes);
    }

    fs::path path_for(const std::string& key) const { return dir_ / (key + ".flsf"); }
    const fs::path& dir() const { return dir_; }

private:
    fs::path dir_;
    std::mutex mu_;
};

}  // namespace flowsuff::io
