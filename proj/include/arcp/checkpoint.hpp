#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "arcp/attenet.hpp"
#include "arcp/fusion.hpp"
#include "arcp/iatcnn.hpp"
#include "arcp/params.hpp"
#include "arcp/tensor.hpp"

namespace arcp {

// Checkpoint container: magic bytes "IATCNN1\n", a single-line JSON manifest
// (model kind, config, tensor names/shapes/byte offsets), a newline, then
// the concatenated raw little-endian 64-bit float payload. Round-trips are
// bit-exact.

inline constexpr const char* kCheckpointMagic = "IATCNN1\n";

struct Checkpoint {
    nlohmann::json meta;      // "kind" and "config"
    ParamStore params;        // trainable tensors
    ParamStore buffers;       // non-trainable tensors (e.g. batchnorm stats)
};

namespace detail {

inline void append_doubles(std::string& out, const Tensor& t) {
    static_assert(sizeof(double) == 8);
    const std::size_t bytes = static_cast<std::size_t>(t.size()) * 8;
    const std::size_t base = out.size();
    out.resize(base + bytes);
    std::memcpy(out.data() + base, t.data(), bytes);
}

}  // namespace detail

inline void write_checkpoint(const std::string& path, const nlohmann::json& meta,
                             const ParamStore& params, const ParamStore* buffers = nullptr) {
    nlohmann::json manifest = meta;
    nlohmann::json tensors = nlohmann::json::array();
    std::string payload;
    std::uint64_t offset = 0;
    auto emit = [&](const ParamStore& store, bool buffer) {
        for (const auto& name : store.names()) {
            const Tensor& t = store.get(name);
            nlohmann::json entry;
            entry["name"] = name;
            entry["shape"] = t.shape();
            entry["offset"] = offset;
            entry["buffer"] = buffer;
            tensors.push_back(entry);
            detail::append_doubles(payload, t);
            offset += static_cast<std::uint64_t>(t.size()) * 8;
        }
    };
    emit(params, false);
    if (buffers != nullptr) emit(*buffers, true);
    manifest["tensors"] = tensors;
    manifest["payload_bytes"] = offset;

    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("write_checkpoint: cannot write " + path);
    out << kCheckpointMagic << manifest.dump() << "\n" << payload;
    if (!out) throw std::runtime_error("write_checkpoint: write failed for " + path);
}

inline Checkpoint read_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("read_checkpoint: cannot open " + path);
    std::string content((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    const std::size_t magic_len = std::strlen(kCheckpointMagic);
    if (content.size() < magic_len || content.compare(0, magic_len, kCheckpointMagic) != 0)
        throw std::runtime_error("read_checkpoint: bad magic bytes in " + path);
    const std::size_t manifest_end = content.find('\n', magic_len);
    if (manifest_end == std::string::npos)
        throw std::runtime_error("read_checkpoint: unterminated manifest in " + path);

    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(content.substr(magic_len, manifest_end - magic_len));
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("read_checkpoint: invalid manifest in " + path + ": " + e.what());
    }

    const std::size_t payload_start = manifest_end + 1;
    const std::uint64_t payload_bytes = manifest.at("payload_bytes").get<std::uint64_t>();
    if (content.size() - payload_start != payload_bytes)
        throw std::runtime_error("read_checkpoint: payload length mismatch in " + path + ": manifest says " +
                                 std::to_string(payload_bytes) + " bytes, file has " +
                                 std::to_string(content.size() - payload_start));

    Checkpoint ck;
    ck.meta = manifest;
    ck.meta.erase("tensors");
    ck.meta.erase("payload_bytes");
    for (const auto& entry : manifest.at("tensors")) {
        const std::string name = entry.at("name").get<std::string>();
        const Shape shape = entry.at("shape").get<Shape>();
        const std::uint64_t offset = entry.at("offset").get<std::uint64_t>();
        const std::uint64_t bytes = static_cast<std::uint64_t>(shape_numel(shape)) * 8;
        if (offset + bytes > payload_bytes)
            throw std::runtime_error("read_checkpoint: tensor '" + name + "' exceeds payload in " + path);
        Tensor t(shape);
        std::memcpy(t.data(), content.data() + payload_start + offset, bytes);
        if (entry.value("buffer", false))
            ck.buffers.add(name, std::move(t));
        else
            ck.params.add(name, std::move(t));
    }
    return ck;
}

// Overwrites a store from a checkpoint store; names and shapes must agree.
inline void restore_params(ParamStore& dst, const ParamStore& src, const std::string& path) {
    if (dst.names().size() != src.names().size())
        throw std::runtime_error("checkpoint " + path + ": tensor count mismatch");
    for (const auto& name : dst.names()) {
        if (!src.has(name)) throw std::runtime_error("checkpoint " + path + ": missing tensor '" + name + "'");
        const Tensor& s = src.get(name);
        Tensor& d = dst.get(name);
        if (!d.same_shape(s))
            throw std::runtime_error("checkpoint " + path + ": shape mismatch for '" + name + "'");
        d = s;
    }
}

// ----- model wrappers -----------------------------------------------------------

inline nlohmann::json iatcnn_config_json(const IatcnnConfig& cfg) {
    nlohmann::json j;
    j["variant"] = iatcnn_variant_name(cfg.variant);
    j["kernel_size"] = cfg.kernel_size;
    j["filters"] = cfg.filters;
    j["convs_per_block"] = cfg.convs_per_block;
    j["feature_width"] = cfg.feature_width;
    j["context_channels"] = cfg.context_channels;
    j["input_scale"] = cfg.input_scale;
    j["t_obs"] = cfg.t_obs;
    j["t_pred"] = cfg.t_pred;
    j["n_max"] = cfg.n_max;
    return j;
}

inline IatcnnConfig iatcnn_config_from_json(const nlohmann::json& j) {
    IatcnnConfig cfg;
    cfg.variant = iatcnn_variant_from_name(j.at("variant").get<std::string>());
    cfg.kernel_size = j.at("kernel_size").get<int>();
    cfg.filters = j.at("filters").get<std::vector<int>>();
    cfg.convs_per_block = j.at("convs_per_block").get<int>();
    cfg.feature_width = j.at("feature_width").get<int>();
    cfg.context_channels = j.at("context_channels").get<bool>();
    cfg.input_scale = j.at("input_scale").get<double>();
    cfg.t_obs = j.at("t_obs").get<int>();
    cfg.t_pred = j.at("t_pred").get<int>();
    cfg.n_max = j.at("n_max").get<int>();
    return cfg;
}

inline void save_iatcnn(const IatcnnModel& model, const std::string& path) {
    nlohmann::json meta;
    meta["kind"] = "iatcnn";
    meta["config"] = iatcnn_config_json(model.config());
    write_checkpoint(path, meta, model.params());
}

inline IatcnnModel load_iatcnn(const std::string& path) {
    Checkpoint ck = read_checkpoint(path);
    if (ck.meta.value("kind", "") != "iatcnn")
        throw std::runtime_error("checkpoint " + path + ": expected kind 'iatcnn', got '" +
                                 ck.meta.value("kind", "") + "'");
    IatcnnModel model(iatcnn_config_from_json(ck.meta.at("config")), 0);
    restore_params(model.params(), ck.params, path);
    return model;
}

inline nlohmann::json attenet_config_json(const AtteNetConfig& cfg) {
    nlohmann::json j;
    j["stage_widths"] = cfg.stage_widths;
    j["units_per_stage"] = cfg.units_per_stage;
    j["stage_strides"] = cfg.stage_strides;
    j["se_reduction"] = cfg.se_reduction;
    j["num_classes"] = cfg.num_classes;
    j["input_size"] = cfg.input_size;
    j["dropout_p"] = cfg.dropout_p;
    return j;
}

inline AtteNetConfig attenet_config_from_json(const nlohmann::json& j) {
    AtteNetConfig cfg;
    cfg.stage_widths = j.at("stage_widths").get<std::vector<int>>();
    cfg.units_per_stage = j.at("units_per_stage").get<std::vector<int>>();
    cfg.stage_strides = j.at("stage_strides").get<std::vector<int>>();
    cfg.se_reduction = j.at("se_reduction").get<int>();
    cfg.num_classes = j.at("num_classes").get<int>();
    cfg.input_size = j.at("input_size").get<int>();
    cfg.dropout_p = j.at("dropout_p").get<double>();
    return cfg;
}

inline void save_attenet(const AtteNetModel& model, const std::string& path) {
    nlohmann::json meta;
    meta["kind"] = "attenet";
    meta["config"] = attenet_config_json(model.config());
    ParamStore buffers;
    for (const auto& [name, state] : model.bn_states()) {
        buffers.add(name + ".running_mean", state.running_mean);
        buffers.add(name + ".running_var", state.running_var);
    }
    write_checkpoint(path, meta, model.params(), &buffers);
}

inline AtteNetModel load_attenet(const std::string& path) {
    Checkpoint ck = read_checkpoint(path);
    if (ck.meta.value("kind", "") != "attenet")
        throw std::runtime_error("checkpoint " + path + ": expected kind 'attenet', got '" +
                                 ck.meta.value("kind", "") + "'");
    AtteNetModel model(attenet_config_from_json(ck.meta.at("config")), 0);
    restore_params(model.params(), ck.params, path);
    for (auto& [name, state] : model.bn_states()) {
        if (!ck.buffers.has(name + ".running_mean"))
            throw std::runtime_error("checkpoint " + path + ": missing running stats for " + name);
        state.running_mean = ck.buffers.get(name + ".running_mean");
        state.running_var = ck.buffers.get(name + ".running_var");
    }
    return model;
}

inline nlohmann::json fusion_config_json(const FusionConfig& cfg) {
    nlohmann::json j;
    j["variant"] = fusion_variant_name(cfg.variant);
    j["d"] = cfg.d;
    j["h"] = cfg.h;
    j["w"] = cfg.w;
    j["c"] = cfg.c;
    j["hidden"] = cfg.hidden;
    j["n_max"] = cfg.n_max;
    j["t_pred"] = cfg.t_pred;
    j["tl_classes"] = cfg.tl_classes;
    j["ncp_hidden"] = cfg.ncp_hidden;
    j["traj_scale"] = cfg.traj_scale;
    return j;
}

inline FusionConfig fusion_config_from_json(const nlohmann::json& j) {
    FusionConfig cfg;
    cfg.variant = fusion_variant_from_name(j.at("variant").get<std::string>());
    cfg.d = j.at("d").get<int>();
    cfg.h = j.at("h").get<int>();
    cfg.w = j.at("w").get<int>();
    cfg.c = j.at("c").get<int>();
    cfg.hidden = j.at("hidden").get<int>();
    cfg.n_max = j.at("n_max").get<int>();
    cfg.t_pred = j.at("t_pred").get<int>();
    cfg.tl_classes = j.at("tl_classes").get<int>();
    cfg.ncp_hidden = j.at("ncp_hidden").get<int>();
    cfg.traj_scale = j.at("traj_scale").get<double>();
    return cfg;
}

inline void save_fusion(const FusionHead& head, const std::string& path) {
    nlohmann::json meta;
    meta["kind"] = "fusion";
    meta["config"] = fusion_config_json(head.config());
    write_checkpoint(path, meta, head.params());
}

inline FusionHead load_fusion(const std::string& path) {
    Checkpoint ck = read_checkpoint(path);
    if (ck.meta.value("kind", "") != "fusion")
        throw std::runtime_error("checkpoint " + path + ": expected kind 'fusion', got '" +
                                 ck.meta.value("kind", "") + "'");
    FusionHead head(fusion_config_from_json(ck.meta.at("config")), 0);
    restore_params(head.params(), ck.params, path);
    return head;
}

}  // namespace arcp
