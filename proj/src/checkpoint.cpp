#include <cstring>
#include <fstream>

#include "json.hpp"
#include "psonet/errors.hpp"
#include "psonet/nnet.hpp"

namespace psonet::nnet {

using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'P', 'S', 'O', 'N', 'C', 'K', 'P', '1'};
constexpr uint8_t kDtypeF64 = 0;
constexpr uint8_t kDtypeF32 = 1;

template <typename T>
void write_pod(std::ostream& out, T value) {
    out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in) {
    T value{};
    in.read(reinterpret_cast<char*>(&value), sizeof(T));
    if (!in) throw ValidationError("checkpoint: unexpected end of file");
    return value;
}

} // namespace

std::string model_config_to_json(const ModelConfig& config) {
    json doc;
    doc["variant"] = std::string(encoder_variant_name(config.encoder.variant));
    doc["base_width"] = config.encoder.base_width;
    doc["input_height"] = config.encoder.input_height;
    doc["input_width"] = config.encoder.input_width;
    doc["embed_dim"] = config.embed_dim;
    doc["attention_hidden"] = config.attention_hidden;
    doc["shared_encoder"] = config.shared_encoder;
    doc["mode"] = std::string(dataio::assemble_mode_name(config.mode));
    return doc.dump();
}

ModelConfig model_config_from_json(const std::string& text) {
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ValidationError("model config parse error: " + std::string(e.what()));
    }
    ModelConfig config;
    try {
        config.encoder.variant = encoder_variant_from_name(doc.at("variant").get<std::string>());
        config.encoder.base_width = doc.at("base_width").get<int>();
        config.encoder.input_height = doc.at("input_height").get<int>();
        config.encoder.input_width = doc.at("input_width").get<int>();
        config.embed_dim = doc.at("embed_dim").get<int>();
        config.attention_hidden = doc.at("attention_hidden").get<int>();
        config.shared_encoder = doc.at("shared_encoder").get<bool>();
        config.mode = dataio::assemble_mode_from_name(doc.at("mode").get<std::string>());
    } catch (const json::exception& e) {
        throw ValidationError("model config field error: " + std::string(e.what()));
    }
    return config;
}

void save_archive(const std::filesystem::path& path, const TensorArchive& archive) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write checkpoint: " + path.string());
    f.write(kMagic, sizeof(kMagic));
    write_pod<uint64_t>(f, archive.header_json.size());
    f.write(archive.header_json.data(),
            static_cast<std::streamsize>(archive.header_json.size()));
    write_pod<uint64_t>(f, archive.tensors.size());
    for (const auto& [name, tensor] : archive.tensors) {
        write_pod<uint32_t>(f, static_cast<uint32_t>(name.size()));
        f.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_pod<uint8_t>(f, kDtypeF64);
        write_pod<uint8_t>(f, static_cast<uint8_t>(tensor.shape.size()));
        for (size_t dim : tensor.shape) write_pod<uint64_t>(f, dim);
        f.write(reinterpret_cast<const char*>(tensor.data.data()),
                static_cast<std::streamsize>(tensor.data.size() * sizeof(double)));
    }
    if (!f) throw std::runtime_error("checkpoint write failed: " + path.string());
}

TensorArchive load_archive(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ValidationError("cannot open checkpoint: " + path.string());
    char magic[8];
    f.read(magic, sizeof(magic));
    if (!f || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
        throw ValidationError("not a checkpoint file: " + path.string());
    }

    TensorArchive archive;
    const uint64_t header_len = read_pod<uint64_t>(f);
    archive.header_json.resize(header_len);
    f.read(archive.header_json.data(), static_cast<std::streamsize>(header_len));
    if (!f) throw ValidationError("checkpoint: truncated header");

    const uint64_t count = read_pod<uint64_t>(f);
    archive.tensors.reserve(count);
    for (uint64_t i = 0; i < count; ++i) {
        const uint32_t name_len = read_pod<uint32_t>(f);
        std::string name(name_len, '\0');
        f.read(name.data(), name_len);
        const uint8_t dtype = read_pod<uint8_t>(f);
        const uint8_t ndim = read_pod<uint8_t>(f);
        Tensor tensor;
        tensor.shape.resize(ndim);
        size_t numel = 1;
        for (int d = 0; d < ndim; ++d) {
            tensor.shape[d] = read_pod<uint64_t>(f);
            numel *= tensor.shape[d];
        }
        tensor.data.resize(numel);
        if (dtype == kDtypeF64) {
            f.read(reinterpret_cast<char*>(tensor.data.data()),
                   static_cast<std::streamsize>(numel * sizeof(double)));
        } else if (dtype == kDtypeF32) {
            std::vector<float> buf(numel);
            f.read(reinterpret_cast<char*>(buf.data()),
                   static_cast<std::streamsize>(numel * sizeof(float)));
            for (size_t j = 0; j < numel; ++j) tensor.data[j] = buf[j];
        } else {
            throw ValidationError("checkpoint: unknown dtype for tensor '" + name + "'");
        }
        if (!f) throw ValidationError("checkpoint: truncated tensor '" + name + "'");
        archive.tensors.emplace_back(std::move(name), std::move(tensor));
    }
    return archive;
}

void save_checkpoint(const std::filesystem::path& path, const PsoNetParams& params) {
    json header;
    header["format"] = "psonet-checkpoint";
    header["version"] = 1;
    header["model"] = json::parse(model_config_to_json(params.config));

    TensorArchive archive;
    archive.header_json = header.dump();
    auto& mutable_params = const_cast<PsoNetParams&>(params);
    for (const auto& [name, tensor] : collect_named_tensors(mutable_params)) {
        archive.tensors.emplace_back(name, *tensor);
    }
    save_archive(path, archive);
}

PsoNetParams load_checkpoint(const std::filesystem::path& path) {
    TensorArchive archive = load_archive(path);
    json header;
    try {
        header = json::parse(archive.header_json);
    } catch (const json::parse_error& e) {
        throw ValidationError("checkpoint header parse error: " + std::string(e.what()));
    }
    if (header.value("format", "") != "psonet-checkpoint") {
        throw ValidationError("checkpoint '" + path.string() + "' has wrong format tag");
    }

    const ModelConfig config = model_config_from_json(header.at("model").dump());
    PsoNetParams params = init_params(config, 0);

    std::map<std::string, Tensor*> by_name;
    for (auto& [name, tensor] : collect_named_tensors(params)) by_name.emplace(name, tensor);

    size_t applied = 0;
    for (const auto& [name, tensor] : archive.tensors) {
        auto it = by_name.find(name);
        if (it == by_name.end()) {
            throw ValidationError("checkpoint tensor '" + name + "' does not match the model");
        }
        if (it->second->shape != tensor.shape) {
            throw ValidationError("checkpoint tensor '" + name + "' has mismatched shape");
        }
        it->second->data = tensor.data;
        ++applied;
    }
    if (applied != by_name.size()) {
        throw ValidationError("checkpoint is missing " + std::to_string(by_name.size() - applied) +
                              " model tensors");
    }
    return params;
}

void load_pretrained_encoder(PsoNetParams& params, const std::filesystem::path& path) {
    TensorArchive archive = load_archive(path);

    std::map<std::string, Tensor*> by_name;
    for (auto& [name, tensor] : collect_named_tensors(params)) by_name.emplace(name, tensor);

    size_t applied = 0;
    for (const auto& [name, tensor] : archive.tensors) {
        std::vector<Tensor*> targets;
        if (name.rfind("encoder.", 0) == 0) {
            for (auto region : pasi::kAllRegions) {
                const auto full = "region." + std::string(pasi::region_code(region)) + "." + name;
                auto it = by_name.find(full);
                if (it == by_name.end()) {
                    throw ValidationError("pretrained tensor '" + name +
                                          "' does not match the encoder topology");
                }
                targets.push_back(it->second);
            }
        } else if (name.rfind("region.", 0) == 0 && name.find(".encoder.") != std::string::npos) {
            auto it = by_name.find(name);
            if (it == by_name.end()) {
                throw ValidationError("pretrained tensor '" + name +
                                      "' does not match the encoder topology");
            }
            targets.push_back(it->second);
        } else {
            continue; // non-encoder tensors are ignored
        }
        for (Tensor* target : targets) {
            if (target->shape != tensor.shape) {
                throw ValidationError("pretrained tensor '" + name + "' has mismatched shape");
            }
            target->data = tensor.data;
        }
        ++applied;
    }
    if (applied == 0) {
        throw ValidationError("pretrained archive contains no encoder tensors: " + path.string());
    }
}

} // namespace psonet::nnet
