#include "poisonlab/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "poisonlab/errors.hpp"

namespace poisonlab {

namespace {

constexpr char kMagic[4] = {'P', 'L', 'M', '1'};
constexpr uint32_t kVersion = 1;

template <typename T>
void put(std::ofstream& out, T v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

template <typename T>
T take(std::ifstream& in, const std::string& path) {
    T v;
    in.read(reinterpret_cast<char*>(&v), sizeof(v));
    if (!in) throw IoError("truncated checkpoint: " + path);
    return v;
}

}  // namespace

void save_model(const std::string& path, const LanguageModel& model) {
    std::ofstream out(path, std::ios::trunc | std::ios::binary);
    if (!out) throw IoError("cannot write checkpoint: " + path);
    out.write(kMagic, 4);
    put<uint32_t>(out, kVersion);
    const LMConfig& cfg = model.config();
    put<int32_t>(out, cfg.n_layers);
    put<int32_t>(out, cfg.n_heads);
    put<int32_t>(out, cfg.d_model);
    put<int32_t>(out, cfg.max_context);
    put<int32_t>(out, cfg.vocab_size);
    put<float>(out, static_cast<float>(cfg.dropout));
    put<uint32_t>(out, static_cast<uint32_t>(model.named_parameters().size()));
    for (const auto& [name, tensor] : model.named_parameters()) {
        put<uint32_t>(out, static_cast<uint32_t>(name.size()));
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        put<uint32_t>(out, static_cast<uint32_t>(tensor.shape().size()));
        for (int d : tensor.shape()) put<int32_t>(out, d);
        for (Real v : tensor.values()) put<float>(out, static_cast<float>(v));
    }
    if (!out) throw IoError("failed writing checkpoint: " + path);
}

LanguageModel load_model(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint: " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kMagic, 4) != 0) throw IoError("not a model checkpoint: " + path);
    const auto version = take<uint32_t>(in, path);
    if (version != kVersion) throw IoError("unsupported checkpoint version in " + path);
    LMConfig cfg;
    cfg.n_layers = take<int32_t>(in, path);
    cfg.n_heads = take<int32_t>(in, path);
    cfg.d_model = take<int32_t>(in, path);
    cfg.max_context = take<int32_t>(in, path);
    cfg.vocab_size = take<int32_t>(in, path);
    cfg.dropout = take<float>(in, path);
    LanguageModel model(cfg, 0);
    const auto n_params = take<uint32_t>(in, path);
    if (n_params != model.named_parameters().size()) {
        throw IoError("checkpoint parameter count mismatch in " + path);
    }
    for (uint32_t i = 0; i < n_params; ++i) {
        const auto name_len = take<uint32_t>(in, path);
        std::string name(name_len, '\0');
        in.read(name.data(), name_len);
        if (!in) throw IoError("truncated checkpoint: " + path);
        Tensor& param = model.mutable_parameter(name);
        const auto ndim = take<uint32_t>(in, path);
        if (ndim != param.shape().size()) throw IoError("checkpoint shape mismatch for " + name);
        for (uint32_t d = 0; d < ndim; ++d) {
            if (take<int32_t>(in, path) != param.shape()[d]) throw IoError("checkpoint shape mismatch for " + name);
        }
        auto vals = param.values();
        for (size_t j = 0; j < vals.size(); ++j) vals[j] = static_cast<Real>(take<float>(in, path));
    }
    return model;
}

}  // namespace poisonlab
