#pragma once

// Checkpoint layout (all integers little-endian):
//   "GRNL" | u32 version | u32 tensor count
//   per tensor: u32 name length | UTF-8 name | u32 rank | u64 dims[rank] | f64 values[]
//   u64 trailer length | JSON trailer (model config, schedule, scaler, data provenance)

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"

#include "grenol/braingraph.hpp"
#include "grenol/denoiser.hpp"
#include "grenol/error.hpp"
#include "grenol/schedule.hpp"

namespace grenol {

inline constexpr char kCheckpointMagic[4] = {'G', 'R', 'N', 'L'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Everything besides the tensors needed to reuse a trained model on new data.
struct CheckpointMeta {
    ScheduleParams schedule;
    FeatureScaler scaler;
    Hemisphere hemisphere = Hemisphere::lh;
    std::string source_metric = kMeanCurvature;
    std::string target_metric = kCorticalThickness;
    std::vector<std::string> train_subjects;
};

struct Checkpoint {
    ModelParams params;
    CheckpointMeta meta;
};

namespace detail {

template <typename T>
void put_le(std::ostream& out, T value) {
    using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
    const U bits = std::bit_cast<U>(value);
    for (std::size_t i = 0; i < sizeof(U); ++i) out.put(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

template <typename T>
T get_le(std::istream& in, const std::string& what) {
    using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
    unsigned char buf[sizeof(U)];
    if (!in.read(reinterpret_cast<char*>(buf), sizeof(U))) throw FormatError("checkpoint truncated while reading " + what);
    U bits = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) bits |= static_cast<U>(buf[i]) << (8 * i);
    return std::bit_cast<T>(bits);
}

inline nlohmann::json to_json(const ModelConfig& c) {
    return {{"conv_layers", c.conv_layers}, {"conv_dim", c.conv_dim},     {"fc_layers", c.fc_layers},
            {"fc_dim", c.fc_dim},           {"node_count", c.node_count}, {"pe_dim", c.pe_dim},
            {"bn_momentum", c.bn_momentum}, {"bn_eps", c.bn_eps}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.conv_layers = j.at("conv_layers").get<std::size_t>();
    c.conv_dim = j.at("conv_dim").get<std::size_t>();
    c.fc_layers = j.at("fc_layers").get<std::size_t>();
    c.fc_dim = j.at("fc_dim").get<std::size_t>();
    c.node_count = j.at("node_count").get<std::size_t>();
    c.pe_dim = j.at("pe_dim").get<std::size_t>();
    c.bn_momentum = j.at("bn_momentum").get<double>();
    c.bn_eps = j.at("bn_eps").get<double>();
    return c;
}

} // namespace detail

inline void write_checkpoint(std::ostream& out, ModelParams& params, const CheckpointMeta& meta) {
    out.write(kCheckpointMagic, 4);
    detail::put_le<std::uint32_t>(out, kCheckpointVersion);
    const auto tensors = params.tensors();
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, tensor] : tensors) {
        detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(tensor->rank()));
        for (std::size_t d : tensor->shape()) detail::put_le<std::uint64_t>(out, d);
        for (double v : tensor->values()) detail::put_le<double>(out, v);
    }

    nlohmann::json scaler = nlohmann::json::object();
    for (const auto& [metric, r] : meta.scaler.ranges()) scaler[metric] = {{"min", r.min}, {"max", r.max}};
    const nlohmann::json trailer = {
        {"model", detail::to_json(params.config)},
        {"schedule",
         {{"T", meta.schedule.steps},
          {"k", meta.schedule.noise_std},
          {"mode", to_string(meta.schedule.mode)},
          {"s", meta.schedule.offset},
          {"max_beta", meta.schedule.max_beta}}},
        {"scaler", scaler},
        {"hemisphere", to_string(meta.hemisphere)},
        {"source_metric", meta.source_metric},
        {"target_metric", meta.target_metric},
        {"train_subjects", meta.train_subjects},
    };
    const std::string text = trailer.dump();
    detail::put_le<std::uint64_t>(out, text.size());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!out) throw FormatError("failed writing checkpoint");
}

inline void save_checkpoint(ModelParams& params, const CheckpointMeta& meta, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot open '" + path + "' for writing");
    write_checkpoint(out, params, meta);
}

/// Reads a checkpoint. When `expected` is given, every tensor must match the shapes that
/// config implies; otherwise the config stored in the trailer is used.
inline Checkpoint read_checkpoint(std::istream& in, const ModelConfig* expected = nullptr) {
    char magic[4];
    if (!in.read(magic, 4)) throw FormatError("checkpoint truncated while reading magic");
    if (std::memcmp(magic, kCheckpointMagic, 4) != 0) throw FormatError("not a checkpoint: bad magic bytes");
    const auto version = detail::get_le<std::uint32_t>(in, "version");
    if (version != kCheckpointVersion) {
        throw FormatError("unsupported checkpoint version " + std::to_string(version));
    }
    const auto count = detail::get_le<std::uint32_t>(in, "tensor count");
    std::map<std::string, Tensor> stored;
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto name_len = detail::get_le<std::uint32_t>(in, "tensor name length");
        if (name_len > 4096) throw FormatError("checkpoint corrupt: tensor name length " + std::to_string(name_len));
        std::string name(name_len, '\0');
        if (!in.read(name.data(), name_len)) throw FormatError("checkpoint truncated in tensor name");
        const auto rank = detail::get_le<std::uint32_t>(in, name + " rank");
        if (rank > 8) throw FormatError("checkpoint corrupt: tensor '" + name + "' rank " + std::to_string(rank));
        Shape shape(rank);
        for (auto& d : shape) d = detail::get_le<std::uint64_t>(in, name + " dims");
        const std::size_t n = element_count(shape);
        if (n > (std::size_t{1} << 26)) throw FormatError("checkpoint corrupt: tensor '" + name + "' too large");
        std::vector<double> values(n);
        for (auto& v : values) v = detail::get_le<double>(in, name + " values");
        stored.emplace(name, Tensor(std::move(shape), std::move(values)));
    }
    const auto trailer_len = detail::get_le<std::uint64_t>(in, "trailer length");
    if (trailer_len > (std::uint64_t{1} << 30)) throw FormatError("checkpoint corrupt: trailer length");
    std::string text(trailer_len, '\0');
    if (!in.read(text.data(), static_cast<std::streamsize>(trailer_len))) throw FormatError("checkpoint truncated in trailer");

    Checkpoint ckpt;
    ModelConfig stored_cfg;
    try {
        const auto j = nlohmann::json::parse(text);
        stored_cfg = detail::model_config_from_json(j.at("model"));
        const auto& s = j.at("schedule");
        ckpt.meta.schedule.steps = s.at("T").get<std::size_t>();
        ckpt.meta.schedule.noise_std = s.at("k").get<double>();
        ckpt.meta.schedule.mode = parse_diffusion_mode(s.at("mode").get<std::string>());
        ckpt.meta.schedule.offset = s.at("s").get<double>();
        ckpt.meta.schedule.max_beta = s.at("max_beta").get<double>();
        for (const auto& [metric, r] : j.at("scaler").items()) {
            ckpt.meta.scaler.set(metric, {r.at("min").get<double>(), r.at("max").get<double>()});
        }
        ckpt.meta.hemisphere = parse_hemisphere(j.at("hemisphere").get<std::string>());
        ckpt.meta.source_metric = j.at("source_metric").get<std::string>();
        ckpt.meta.target_metric = j.at("target_metric").get<std::string>();
        ckpt.meta.train_subjects = j.at("train_subjects").get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("checkpoint trailer invalid: ") + e.what());
    } catch (const std::invalid_argument& e) {
        throw FormatError(std::string("checkpoint trailer invalid: ") + e.what());
    } catch (const DataError& e) {
        throw FormatError(std::string("checkpoint trailer invalid: ") + e.what());
    }

    const ModelConfig cfg = expected ? *expected : stored_cfg;
    ckpt.params = init_params(cfg, 0);
    for (auto& [name, tensor] : ckpt.params.tensors()) {
        const auto it = stored.find(name);
        if (it == stored.end()) throw FormatError("checkpoint is missing tensor '" + name + "'");
        if (it->second.shape() != tensor->shape()) {
            throw FormatError("tensor '" + name + "' has shape " + shape_string(it->second.shape()) +
                              " in checkpoint, expected " + shape_string(tensor->shape()));
        }
        tensor->data() = it->second.data();
        stored.erase(it);
    }
    if (!stored.empty()) throw FormatError("checkpoint has unexpected tensor '" + stored.begin()->first + "'");
    return ckpt;
}

inline Checkpoint load_checkpoint(const std::string& path, const ModelConfig* expected = nullptr) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open checkpoint '" + path + "'");
    return read_checkpoint(in, expected);
}

} // namespace grenol
