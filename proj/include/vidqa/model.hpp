#pragma once

// Full model assembly: frozen language model, visual branch (Perceiver-style
// mapper or plain linear projection), deep text prompts, adapters, and the
// parameter grouping that training regimes act on.

#include <string>
#include <vector>

#include "vidqa/error.hpp"
#include "vidqa/lm.hpp"
#include "vidqa/mapper.hpp"
#include "vidqa/prompts.hpp"
#include "vidqa/video.hpp"

namespace vidqa {

enum class MapperKind { vpn, linear };

inline MapperKind mapper_kind_from(const std::string& s) {
    if (s == "vpn") return MapperKind::vpn;
    if (s == "linear") return MapperKind::linear;
    throw ConfigError("mapper: unknown kind '" + s + "'");
}

inline std::string to_string(MapperKind k) {
    return k == MapperKind::vpn ? "vpn" : "linear";
}

struct ModelConfig {
    LmConfig lm;
    int feature_dim = 32;       // raw frame feature width F
    int frames = 6;             // sampled frames T
    int latents = 10;           // visual tokens M (vpn mapper)
    int mapper_layers = 2;      // mapper depth L
    int mapper_heads = 4;
    MapperKind mapper = MapperKind::vpn;
    int prompt_count = 10;      // text prompts per layer N
    int prompt_inner = 0;       // reparametrization width d' (0 = direct)
    int adapter_bottleneck = 8; // adapter width d (0 = adapters off)

    void validate() const {
        lm.validate();
        if (feature_dim < 1) throw ConfigError("model: feature_dim must be >= 1");
        if (frames < 1) throw ConfigError("model: frames must be >= 1");
        if (prompt_count < 0) throw ConfigError("model: prompt count must be >= 0");
        if (prompt_inner < 0) throw ConfigError("model: prompt inner width must be >= 0");
        if (adapter_bottleneck < 0) throw ConfigError("model: adapter bottleneck must be >= 0");
        if (mapper == MapperKind::vpn) {
            if (latents < 1) throw ConfigError("model: latent count must be >= 1");
            if (mapper_layers < 1) throw ConfigError("model: mapper depth must be >= 1");
            if (mapper_heads < 1 || lm.dim % mapper_heads != 0)
                throw ConfigError("model: dim " + std::to_string(lm.dim) +
                                  " not divisible by mapper heads " +
                                  std::to_string(mapper_heads));
        }
        // Video tokens plus at least a minimal text sequence must fit.
        const int video_tokens = mapper == MapperKind::vpn ? latents : frames;
        if (video_tokens + 3 > lm.max_positions)
            throw ConfigError("model: " + std::to_string(video_tokens) +
                              " video tokens leave no room for text within " +
                              std::to_string(lm.max_positions) + " positions");
    }

    int video_tokens() const { return mapper == MapperKind::vpn ? latents : frames; }
};

// The trainable surface is exactly {prompts} ∪ {rest}; `frozen` is the
// backbone.  The groups are disjoint and cover every parameter.
struct ParamGroups {
    std::vector<Tensor> frozen;
    std::vector<Tensor> prompts;  // text prompt params + visual latent queries
    std::vector<Tensor> rest;     // mapper, adapters, projector, temporal table
};

struct Model {
    ModelConfig config;
    FrozenLm lm;
    FrameProjector projector;
    VisualMapper mapper;     // vpn kind
    Tensor linear_temporal;  // linear kind: temporal table D x frames
    TextPromptSet prompts;

    static Model create(const ModelConfig& cfg, Rng& rng) {
        cfg.validate();
        Model m;
        m.config = cfg;
        m.lm = FrozenLm::create(cfg.lm, rng);
        if (cfg.adapter_bottleneck > 0) m.lm.add_adapters(cfg.adapter_bottleneck, rng);
        m.projector = FrameProjector::create(cfg.lm.dim, cfg.feature_dim, rng);
        if (cfg.mapper == MapperKind::vpn)
            m.mapper = VisualMapper::create(cfg.lm.dim, cfg.latents, cfg.mapper_layers,
                                            cfg.mapper_heads, cfg.frames, rng);
        else
            m.linear_temporal = Tensor::randn({cfg.lm.dim, cfg.frames}, rng, 0.02, true);
        if (cfg.prompt_count == 0)
            m.prompts = TextPromptSet::none(cfg.lm.layers, cfg.lm.dim);
        else if (cfg.prompt_inner > 0)
            m.prompts = TextPromptSet::reparametrized(cfg.lm.layers, cfg.lm.dim,
                                                      cfg.prompt_count, cfg.prompt_inner, rng);
        else
            m.prompts = TextPromptSet::direct(cfg.lm.layers, cfg.lm.dim, cfg.prompt_count, rng);
        return m;
    }

    ParamGroups param_groups() const {
        ParamGroups g;
        lm.collect_frozen(g.frozen);
        for (const Tensor& t : prompts.trainable()) g.prompts.push_back(t);
        if (config.mapper == MapperKind::vpn) {
            g.prompts.push_back(mapper.prompts);
            mapper.stack.collect(g.rest);
            g.rest.push_back(mapper.temporal);
        } else {
            g.rest.push_back(linear_temporal);
        }
        lm.collect_adapters(g.rest);
        g.rest.push_back(projector.weight);
        return g;
    }
};

// Closed-form parameter accounting (pure config arithmetic, no allocation,
// usable at full scale).  Counts the deployed (folded) prompt form; while a
// set is still reparametrized its live trainable count differs.  Must agree
// with the tensors param_groups() yields for direct/folded prompts.
inline size_t prompt_group_param_count(const ModelConfig& cfg) {
    return prompt_param_count(cfg.lm.layers, cfg.lm.dim, cfg.prompt_count,
                              cfg.mapper == MapperKind::vpn ? cfg.latents : 0);
}

inline size_t rest_group_param_count(const ModelConfig& cfg) {
    size_t n = 0;
    if (cfg.mapper == MapperKind::vpn) {
        n += MapperStack::expected_param_count(cfg.mapper_layers, cfg.lm.dim);
        n += static_cast<size_t>(cfg.lm.dim) * cfg.frames;  // temporal table
    } else {
        n += static_cast<size_t>(cfg.lm.dim) * cfg.frames;  // linear temporal table
    }
    if (cfg.adapter_bottleneck > 0)
        n += 2 * static_cast<size_t>(cfg.lm.layers) *
             Adapter::param_count(cfg.lm.dim, cfg.adapter_bottleneck);
    n += static_cast<size_t>(cfg.lm.dim) * cfg.feature_dim;  // projector
    return n;
}

inline size_t trainable_param_count(const ModelConfig& cfg) {
    return prompt_group_param_count(cfg) + rest_group_param_count(cfg);
}

// Runs the visual branch: raw sampled frames to video token sequence.
// For the vpn mapper all M latents are real tokens (keep mask empty); for the
// linear mapper the token count is T and padded frames stay masked.
struct VideoTokens {
    Tensor tokens;                  // D x M or D x T
    std::vector<uint8_t> keep;      // empty = all real
};

inline VideoTokens encode_video(const Model& m, const SampledVideo& video,
                                const DropoutCfg& drop) {
    if (video.features.cols() != m.config.frames)
        throw ShapeError("model: sampled video has " + std::to_string(video.features.cols()) +
                         " frames, config expects " + std::to_string(m.config.frames));
    Tensor projected = project(m.projector, video.features);
    VideoTokens out;
    if (m.config.mapper == MapperKind::vpn) {
        out.tokens = m.mapper.forward(projected, video.valid, drop);
    } else {
        out.tokens = add_temporal_embeddings(projected, m.linear_temporal);
        out.keep = video.valid;
    }
    return out;
}

// End-to-end forward for one item: visual branch, text embedding (ids must
// already carry [MASK] where masked), prompted encoder, logits at the masked
// positions.
inline LmOutput model_forward(const Model& m, const SampledVideo& video,
                              const std::vector<int>& token_ids,
                              const std::vector<int>& mask_positions, const DropoutCfg& drop) {
    VideoTokens vid = encode_video(m, video, drop);
    Tensor text = embed_text(m.lm, token_ids);
    return lm_forward(m.lm, vid.tokens, text, m.prompts.materialize(drop), mask_positions, drop,
                      vid.keep);
}

}  // namespace vidqa
