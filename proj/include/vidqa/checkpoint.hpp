#pragma once

// Checkpoint container: a sectioned binary file holding the config (JSON),
// the frozen backbone payload, and the trainable attachments.  Prompts are
// saved in folded form; a prompts-only checkpoint omits the backbone and the
// rest-group payload entirely.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>
#include <openssl/evp.h>

#include "vidqa/error.hpp"
#include "vidqa/model.hpp"
#include "vidqa/text.hpp"

namespace vidqa {

// ---------------------------------------------------------------------------
// Hashing

inline std::string sha256_hex(const unsigned char* data, size_t n) {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int md_len = 0;
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    if (!ctx || EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1 ||
        EVP_DigestUpdate(ctx, data, n) != 1 || EVP_DigestFinal_ex(ctx, md, &md_len) != 1) {
        EVP_MD_CTX_free(ctx);
        throw Error("sha256: digest failure");
    }
    EVP_MD_CTX_free(ctx);
    static const char* hex = "0123456789abcdef";
    std::string out;
    out.reserve(md_len * 2);
    for (unsigned int i = 0; i < md_len; ++i) {
        out.push_back(hex[md[i] >> 4]);
        out.push_back(hex[md[i] & 0xf]);
    }
    return out;
}

inline std::string sha256_hex(const std::string& bytes) {
    return sha256_hex(reinterpret_cast<const unsigned char*>(bytes.data()), bytes.size());
}

namespace detail {

// put_u32le lives with the feature-file helpers; the 64-bit forms are only
// needed here.
inline void put_u64le(std::string& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_f64le(std::string& out, double d) {
    uint64_t bits;
    std::memcpy(&bits, &d, 8);
    put_u64le(out, bits);
}

// Bounds-checked cursor over an untrusted byte buffer.
struct ByteReader {
    const unsigned char* p;
    size_t size;
    size_t pos = 0;
    std::string context;

    void need(size_t n, const char* what) const {
        if (pos + n > size)
            throw DataError(context + ": truncated reading " + what + " at byte offset " +
                            std::to_string(pos));
    }
    uint32_t u32(const char* what) {
        need(4, what);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(p[pos + i]) << (8 * i);
        pos += 4;
        return v;
    }
    uint64_t u64(const char* what) {
        need(8, what);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(p[pos + i]) << (8 * i);
        pos += 8;
        return v;
    }
    double f64(const char* what) {
        uint64_t bits = u64(what);
        double d;
        std::memcpy(&d, &bits, 8);
        return d;
    }
    std::string bytes(size_t n, const char* what) {
        need(n, what);
        std::string s(reinterpret_cast<const char*>(p + pos), n);
        pos += n;
        return s;
    }
};

}  // namespace detail

// Serializes tensors into a flat blob: count, then per tensor rank, dims, and
// raw little-endian doubles.  Round trips bitwise.
inline std::string pack_tensors(const std::vector<Tensor>& tensors) {
    std::string out;
    detail::put_u32le(out, static_cast<uint32_t>(tensors.size()));
    for (const Tensor& t : tensors) {
        detail::put_u32le(out, static_cast<uint32_t>(t.rank()));
        for (int d : t.shape()) detail::put_u32le(out, static_cast<uint32_t>(d));
        for (size_t i = 0; i < t.size(); ++i) detail::put_f64le(out, t.data()[i]);
    }
    return out;
}

// Copies one tensor's values into an existing tensor of the same shape.
inline void copy_tensor_into(Tensor& dst, const Tensor& src, const std::string& context) {
    if (dst.shape() != src.shape())
        throw DataError(context + ": shape " + shape_str(src.shape()) + " != expected " +
                        shape_str(dst.shape()));
    std::memcpy(dst.data(), src.data(), src.size() * sizeof(double));
}

// Copies a packed blob back into existing tensors (shapes must match), so
// every handle onto the storage observes the restored values.
inline void unpack_tensors_into(const std::string& blob, std::vector<Tensor>& tensors,
                                const std::string& context) {
    detail::ByteReader r{reinterpret_cast<const unsigned char*>(blob.data()), blob.size(), 0,
                         context};
    const uint32_t count = r.u32("tensor count");
    if (count != tensors.size())
        throw DataError(context + ": payload holds " + std::to_string(count) +
                        " tensors, expected " + std::to_string(tensors.size()));
    for (Tensor& t : tensors) {
        const uint32_t rank = r.u32("tensor rank");
        if (rank != static_cast<uint32_t>(t.rank()))
            throw DataError(context + ": rank " + std::to_string(rank) + " != expected " +
                            std::to_string(t.rank()));
        for (int d : t.shape()) {
            const uint32_t dim = r.u32("tensor dim");
            if (dim != static_cast<uint32_t>(d))
                throw DataError(context + ": dimension " + std::to_string(dim) +
                                " != expected " + std::to_string(d));
        }
        for (size_t i = 0; i < t.size(); ++i) t.data()[i] = r.f64("tensor data");
    }
    if (r.pos != blob.size())
        throw DataError(context + ": " + std::to_string(blob.size() - r.pos) +
                        " trailing bytes after tensors");
}

// Reads a packed blob into freshly allocated tensors.
inline std::vector<Tensor> unpack_tensors(const std::string& blob, const std::string& context) {
    detail::ByteReader r{reinterpret_cast<const unsigned char*>(blob.data()), blob.size(), 0,
                         context};
    const uint32_t count = r.u32("tensor count");
    std::vector<Tensor> out;
    for (uint32_t i = 0; i < count; ++i) {
        const uint32_t rank = r.u32("tensor rank");
        if (rank < 1 || rank > 2)
            throw DataError(context + ": unsupported tensor rank " + std::to_string(rank));
        Shape shape;
        size_t total = 1;
        for (uint32_t d = 0; d < rank; ++d) {
            const uint32_t dim = r.u32("tensor dim");
            if (dim == 0 || dim > (1u << 24))
                throw DataError(context + ": implausible dimension " + std::to_string(dim));
            shape.push_back(static_cast<int>(dim));
            total *= dim;
        }
        std::vector<double> data(total);
        for (size_t k = 0; k < total; ++k) data[k] = r.f64("tensor data");
        out.push_back(Tensor::from_data(shape, std::move(data)));
    }
    if (r.pos != blob.size())
        throw DataError(context + ": " + std::to_string(blob.size() - r.pos) +
                        " trailing bytes after tensors");
    return out;
}

// Hash of a tensor list (shapes and exact bit patterns).
inline std::string hash_tensors(const std::vector<Tensor>& tensors) {
    return sha256_hex(pack_tensors(tensors));
}

// ---------------------------------------------------------------------------
// Container

class Checkpoint {
  public:
    static constexpr uint32_t kVersion = 1;

    void set(const std::string& name, std::string payload) {
        sections_[name] = std::move(payload);
    }
    bool has(const std::string& name) const { return sections_.count(name) > 0; }
    const std::string& get(const std::string& name) const {
        auto it = sections_.find(name);
        if (it == sections_.end())
            throw DataError("checkpoint: missing section '" + name + "'");
        return it->second;
    }
    const std::map<std::string, std::string>& sections() const { return sections_; }

    void save(const std::string& path) const {
        std::string out = "VQCK";
        detail::put_u32le(out, kVersion);
        detail::put_u32le(out, static_cast<uint32_t>(sections_.size()));
        for (const auto& [name, payload] : sections_) {
            detail::put_u32le(out, static_cast<uint32_t>(name.size()));
            out += name;
            detail::put_u64le(out, payload.size());
            out += payload;
        }
        std::ofstream f(path, std::ios::binary | std::ios::trunc);
        if (!f) throw DataError("checkpoint: cannot write " + path);
        f.write(out.data(), static_cast<std::streamsize>(out.size()));
        if (!f) throw DataError("checkpoint: short write to " + path);
    }

    static Checkpoint load(const std::string& path) {
        std::ifstream f(path, std::ios::binary);
        if (!f) throw DataError("checkpoint: cannot open " + path);
        std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
        detail::ByteReader r{reinterpret_cast<const unsigned char*>(bytes.data()), bytes.size(),
                             0, "checkpoint " + path};
        if (r.bytes(4, "magic") != "VQCK")
            throw DataError("checkpoint: " + path + ": bad magic at byte offset 0");
        const uint32_t version = r.u32("version");
        if (version != kVersion)
            throw DataError("checkpoint: " + path + ": unsupported version " +
                            std::to_string(version));
        const uint32_t count = r.u32("section count");
        Checkpoint ckpt;
        for (uint32_t i = 0; i < count; ++i) {
            const uint32_t name_len = r.u32("section name length");
            if (name_len == 0 || name_len > 256)
                throw DataError("checkpoint: " + path + ": implausible section name length " +
                                std::to_string(name_len) + " at byte offset " +
                                std::to_string(r.pos - 4));
            const std::string name = r.bytes(name_len, "section name");
            const uint64_t payload_len = r.u64("section payload length");
            if (payload_len > r.size - r.pos)
                throw DataError("checkpoint: " + path + ": section '" + name + "' claims " +
                                std::to_string(payload_len) + " bytes but only " +
                                std::to_string(r.size - r.pos) + " remain");
            ckpt.sections_[name] = r.bytes(static_cast<size_t>(payload_len), "section payload");
        }
        if (r.pos != bytes.size())
            throw DataError("checkpoint: " + path + ": trailing bytes after sections");
        return ckpt;
    }

  private:
    std::map<std::string, std::string> sections_;
};

// ---------------------------------------------------------------------------
// Model <-> checkpoint

namespace detail {

inline nlohmann::json config_json(const ModelConfig& cfg) {
    return nlohmann::json{{"layers", cfg.lm.layers},
                          {"dim", cfg.lm.dim},
                          {"heads", cfg.lm.heads},
                          {"ffn_hidden", cfg.lm.ffn_hidden},
                          {"max_positions", cfg.lm.max_positions},
                          {"vocab_size", cfg.lm.vocab_size},
                          {"tied_head", cfg.lm.tied_head},
                          {"feature_dim", cfg.feature_dim},
                          {"frames", cfg.frames},
                          {"latents", cfg.latents},
                          {"mapper_layers", cfg.mapper_layers},
                          {"mapper_heads", cfg.mapper_heads},
                          {"mapper", to_string(cfg.mapper)},
                          {"prompts", cfg.prompt_count},
                          {"prompt_inner", cfg.prompt_inner},
                          {"adapters", cfg.adapter_bottleneck}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig cfg;
    try {
        cfg.lm.layers = j.at("layers");
        cfg.lm.dim = j.at("dim");
        cfg.lm.heads = j.at("heads");
        cfg.lm.ffn_hidden = j.at("ffn_hidden");
        cfg.lm.max_positions = j.at("max_positions");
        cfg.lm.vocab_size = j.at("vocab_size");
        cfg.lm.tied_head = j.at("tied_head");
        cfg.feature_dim = j.at("feature_dim");
        cfg.frames = j.at("frames");
        cfg.latents = j.at("latents");
        cfg.mapper_layers = j.at("mapper_layers");
        cfg.mapper_heads = j.at("mapper_heads");
        cfg.mapper = mapper_kind_from(j.at("mapper"));
        cfg.prompt_count = j.at("prompts");
        cfg.prompt_inner = j.at("prompt_inner");
        cfg.adapter_bottleneck = j.at("adapters");
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("checkpoint config: ") + e.what());
    }
    return cfg;
}

// The rest-group payload in a stable order (must match param_groups()).
inline std::vector<Tensor> rest_tensors(const Model& m) {
    std::vector<Tensor> out;
    if (m.config.mapper == MapperKind::vpn) {
        m.mapper.stack.collect(out);
        out.push_back(m.mapper.temporal);
    } else {
        out.push_back(m.linear_temporal);
    }
    m.lm.collect_adapters(out);
    out.push_back(m.projector.weight);
    return out;
}

}  // namespace detail

// Saves config + tokenizer + prompts (folded), plus the backbone and rest
// group unless `prompts_only`.  A prompts-only file restores its non-prompt
// state from `base_path` when given (a full checkpoint the prompts were
// trained on top of), else by re-deriving it from `init_seed` — which is only
// faithful when that state never left its initialization.
inline void save_model_checkpoint(const std::string& path, const Model& m, const Tokenizer& tok,
                                  uint64_t init_seed, bool prompts_only = false,
                                  const std::string& base_path = {}) {
    Checkpoint ckpt;
    nlohmann::json cfg = detail::config_json(m.config);
    cfg["init_seed"] = init_seed;
    cfg["prompts_only"] = prompts_only;
    cfg["tokenizer"] = tok.words();
    if (prompts_only && !base_path.empty()) cfg["base"] = base_path;
    ckpt.set("config", cfg.dump());

    std::vector<Tensor> prompt_tensors;
    if (m.config.prompt_count > 0) prompt_tensors.push_back(m.prompts.folded_flat());
    if (m.config.mapper == MapperKind::vpn) prompt_tensors.push_back(m.mapper.prompts);
    ckpt.set("prompts", pack_tensors(prompt_tensors));

    if (!prompts_only) {
        std::vector<Tensor> frozen;
        m.lm.collect_frozen(frozen);
        ckpt.set("frozen", pack_tensors(frozen));
        ckpt.set("rest", pack_tensors(detail::rest_tensors(m)));
    }
    ckpt.save(path);
}

struct LoadedModel {
    Model model;
    Tokenizer tok = Tokenizer::from_words(Tokenizer::special_tokens());
    uint64_t init_seed = 0;
    bool prompts_only = false;
};

// Rebuilds the model from the stored config and seed (or, for a prompts-only
// file carrying a base reference, from that base checkpoint), then overwrites
// every stored payload bitwise.  Prompts always come back in folded form.
inline LoadedModel load_model_checkpoint(const std::string& path) {
    Checkpoint ckpt = Checkpoint::load(path);
    nlohmann::json cfg_json = nlohmann::json::parse(ckpt.get("config"), nullptr, false);
    if (cfg_json.is_discarded())
        throw DataError("checkpoint: " + path + ": config section is not valid JSON");

    LoadedModel out;
    ModelConfig cfg = detail::config_from_json(cfg_json);
    std::string base_path;
    try {
        out.init_seed = cfg_json.at("init_seed");
        out.prompts_only = cfg_json.at("prompts_only");
        out.tok = Tokenizer::from_words(cfg_json.at("tokenizer").get<std::vector<std::string>>());
        if (cfg_json.contains("base")) base_path = cfg_json.at("base");
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("checkpoint config: ") + e.what());
    }

    if (!base_path.empty()) {
        LoadedModel base = load_model_checkpoint(base_path);
        if (base.prompts_only)
            throw DataError("checkpoint: " + path + ": base checkpoint " + base_path +
                            " must be a full checkpoint, not prompts-only");
        if (detail::config_json(base.model.config) != detail::config_json(cfg))
            throw DataError("checkpoint: " + path + ": base checkpoint " + base_path +
                            " has a different architecture");
        out.model = std::move(base.model);
    } else {
        Rng rng(out.init_seed);
        out.model = Model::create(cfg, rng);
    }

    if (ckpt.has("frozen")) {
        std::vector<Tensor> frozen;
        out.model.lm.collect_frozen(frozen);
        unpack_tensors_into(ckpt.get("frozen"), frozen, "checkpoint section 'frozen'");
    }
    if (ckpt.has("rest")) {
        std::vector<Tensor> rest = detail::rest_tensors(out.model);
        unpack_tensors_into(ckpt.get("rest"), rest, "checkpoint section 'rest'");
    }

    std::vector<Tensor> prompt_tensors =
        unpack_tensors(ckpt.get("prompts"), "checkpoint section 'prompts'");
    size_t at = 0;
    if (cfg.prompt_count > 0) {
        if (at >= prompt_tensors.size())
            throw DataError("checkpoint: prompts section lacks the text prompt matrix");
        out.model.prompts =
            TextPromptSet::folded_from(prompt_tensors[at++], cfg.lm.layers, cfg.lm.dim);
    }
    if (cfg.mapper == MapperKind::vpn) {
        if (at >= prompt_tensors.size())
            throw DataError("checkpoint: prompts section lacks the visual prompt matrix");
        copy_tensor_into(out.model.mapper.prompts, prompt_tensors[at++],
                         "checkpoint visual prompts");
    }
    if (at != prompt_tensors.size())
        throw DataError("checkpoint: prompts section holds " +
                        std::to_string(prompt_tensors.size()) + " tensors, expected " +
                        std::to_string(at));
    return out;
}

}  // namespace vidqa
