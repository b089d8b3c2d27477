#pragma once

// Visual mapping network: a small stack of cross-attention + self-attention
// blocks that reads a learnable set of latent query vectors against projected
// frame features and emits a fixed-length video token sequence.

#include <vector>

#include "vidqa/nn.hpp"
#include "vidqa/tensor.hpp"

namespace vidqa {

// One mapper block: latents cross-attend to the frames, then self-attend.
struct MapperBlock {
    ResidualAttention cross, self_att;

    static MapperBlock create(int dim, int heads, Rng& rng) {
        return {ResidualAttention::create(dim, heads, true, rng),
                ResidualAttention::create(dim, heads, true, rng)};
    }

    void collect(std::vector<Tensor>& out) const {
        cross.collect(out);
        self_att.collect(out);
    }
};

inline Tensor mapper_block_forward(const MapperBlock& b, const Tensor& z, const Tensor& y,
                                   const std::vector<uint8_t>& frame_valid,
                                   const DropoutCfg& drop) {
    Tensor zc = cross_attention(b.cross, z, y, frame_valid, drop);
    return self_attention_block(b.self_att, zc, drop);
}

struct MapperStack {
    std::vector<MapperBlock> blocks;

    static MapperStack create(int dim, int heads, int layers, Rng& rng) {
        if (layers < 0) throw ConfigError("mapper: negative layer count");
        MapperStack s;
        for (int i = 0; i < layers; ++i) s.blocks.push_back(MapperBlock::create(dim, heads, rng));
        return s;
    }

    // Two attention layers (4 D x D matrices each) and two norms per block.
    static size_t expected_param_count(int layers, int dim) {
        const size_t d = static_cast<size_t>(dim);
        return static_cast<size_t>(layers) * (8 * d * d + 4 * d);
    }

    size_t param_count() const {
        std::vector<Tensor> ps;
        collect(ps);
        size_t n = 0;
        for (const Tensor& t : ps) n += t.size();
        return n;
    }

    void collect(std::vector<Tensor>& out) const {
        for (const MapperBlock& b : blocks) b.collect(out);
    }
};

// Runs the latent queries (D x M) through the stack against frame features
// y (D x T, already projected).  `frame_valid` flags usable frames; padded
// frames get attention weight exactly 0.  A zero-depth stack returns the
// queries unchanged.
inline Tensor map_video(const MapperStack& stack, const Tensor& queries, const Tensor& y,
                        const std::vector<uint8_t>& frame_valid, const DropoutCfg& drop) {
    if (y.empty() || y.cols() == 0) throw InputError("map_video: no frames");
    if (!frame_valid.empty()) {
        if (static_cast<int>(frame_valid.size()) != y.cols())
            throw ShapeError("map_video: validity length " + std::to_string(frame_valid.size()) +
                             " != frame count " + std::to_string(y.cols()));
        bool any = false;
        for (uint8_t f : frame_valid) any = any || f;
        if (!any) throw InputError("map_video: every frame is marked invalid");
    }
    if (queries.rows() != y.rows())
        throw ShapeError("map_video: query dim " + shape_str(queries.shape()) +
                         " != frame dim " + shape_str(y.shape()));
    Tensor z = queries;
    for (const MapperBlock& b : stack.blocks) z = mapper_block_forward(b, z, y, frame_valid, drop);
    return z;
}

// Adds one learnable position column per frame: y (D x T) + temporal[:, :T].
inline Tensor add_temporal_embeddings(const Tensor& y, const Tensor& temporal) {
    if (temporal.rows() != y.rows())
        throw ShapeError("temporal embeddings: dim " + shape_str(temporal.shape()) +
                         " != frames " + shape_str(y.shape()));
    if (y.cols() > temporal.cols())
        throw InputError("temporal embeddings: " + std::to_string(y.cols()) +
                         " frames exceed table capacity " + std::to_string(temporal.cols()));
    return add(y, slice(temporal, 1, 0, y.cols()));
}

// The full visual branch state: latent prompts, temporal table, block stack.
struct VisualMapper {
    MapperStack stack;
    Tensor prompts;   // D x M, the initial latent queries
    Tensor temporal;  // D x T_max

    static VisualMapper create(int dim, int n_prompts, int layers, int heads, int t_max,
                               Rng& rng, double stddev = 0.02) {
        VisualMapper m;
        m.stack = MapperStack::create(dim, heads, layers, rng);
        m.prompts = Tensor::randn({dim, n_prompts}, rng, stddev, true);
        m.temporal = Tensor::randn({dim, t_max}, rng, stddev, true);
        return m;
    }

    // Projected frames in, video token sequence (D x M) out.
    Tensor forward(const Tensor& y_projected, const std::vector<uint8_t>& frame_valid,
                   const DropoutCfg& drop) const {
        return map_video(stack, prompts, add_temporal_embeddings(y_projected, temporal),
                         frame_valid, drop);
    }

    void collect(std::vector<Tensor>& out) const {
        stack.collect(out);
        out.push_back(prompts);
        out.push_back(temporal);
    }
};

}  // namespace vidqa
