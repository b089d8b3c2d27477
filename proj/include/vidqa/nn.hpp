#pragma once

// Transformer building blocks over D x K column-major sequences: multi-head
// attention with optional prepended key/value prompts, post-norm residual
// wrappers, bottleneck adapters, and the assembled encoder layer.

#include <cmath>
#include <optional>
#include <vector>

#include "vidqa/tensor.hpp"

namespace vidqa {

// Shared dropout configuration threaded through every forward function.
// Inactive (exact identity) unless training with p > 0.
struct DropoutCfg {
    double p = 0.0;
    Rng* rng = nullptr;
    bool training = false;
};

inline Tensor apply_dropout(const Tensor& x, const DropoutCfg& d) {
    if (!d.training || d.p == 0.0) return x;
    if (!d.rng) throw ConfigError("dropout: training mode requires an RNG");
    return dropout(x, d.p, *d.rng);
}

struct LayerNorm {
    Tensor gain, bias;
    double eps = 1e-5;

    static LayerNorm create(int dim, bool trainable) {
        LayerNorm ln;
        ln.gain = Tensor::filled({dim}, 1.0, trainable);
        ln.bias = Tensor::zeros({dim}, trainable);
        return ln;
    }

    // Normalizes each position (column) over the feature axis.
    Tensor forward(const Tensor& x) const { return layer_norm(x, gain, bias, eps, 0); }

    void collect(std::vector<Tensor>& out) const {
        out.push_back(gain);
        out.push_back(bias);
    }
};

struct AttentionLayer {
    Tensor wq, wk, wv, wo;  // D x D, bias-free
    int heads = 1;

    static AttentionLayer create(int dim, int heads, bool trainable, Rng& rng,
                                 double stddev = 0.0) {
        if (heads < 1 || dim % heads != 0)
            throw ConfigError("attention: dim " + std::to_string(dim) +
                              " not divisible by heads " + std::to_string(heads));
        if (stddev == 0.0) stddev = 1.0 / std::sqrt(static_cast<double>(dim));
        AttentionLayer l;
        l.heads = heads;
        l.wq = Tensor::randn({dim, dim}, rng, stddev, trainable);
        l.wk = Tensor::randn({dim, dim}, rng, stddev, trainable);
        l.wv = Tensor::randn({dim, dim}, rng, stddev, trainable);
        l.wo = Tensor::randn({dim, dim}, rng, stddev, trainable);
        return l;
    }

    int dim() const { return wq.rows(); }

    void collect(std::vector<Tensor>& out) const {
        out.push_back(wq);
        out.push_back(wk);
        out.push_back(wv);
        out.push_back(wo);
    }
};

// Multi-head attention: queries from zq (D x Kq), keys/values from zkv
// (D x Kkv) with optional prompt columns pk/pv (D x N) prepended to the
// projected keys/values.  `key_keep`, when non-empty, flags which of the
// N + Kkv key positions may be attended; dropped keys get weight exactly 0.
// Per-head post-softmax weights (Kq x (N + Kkv), pre-dropout) are appended to
// `weights_out` when provided.
inline Tensor multi_head_attention(const AttentionLayer& layer, const Tensor& zq,
                                   const Tensor& zkv, const Tensor& pk, const Tensor& pv,
                                   const std::vector<uint8_t>& key_keep, const DropoutCfg& drop,
                                   std::vector<Tensor>* weights_out = nullptr) {
    const int d = layer.dim();
    if (zq.rows() != d || zkv.rows() != d)
        throw ShapeError("attention: input rows " + shape_str(zq.shape()) + " / " +
                         shape_str(zkv.shape()) + " do not match layer dim " + std::to_string(d));
    if (pk.empty() != pv.empty())
        throw ShapeError("attention: prompt keys and values must both be present or absent");
    if (!pk.empty() && (pk.rows() != d || pv.rows() != d || pk.cols() != pv.cols()))
        throw ShapeError("attention: prompt shapes " + shape_str(pk.shape()) + " / " +
                         shape_str(pv.shape()) + " invalid for dim " + std::to_string(d));
    const int n_prompt = pk.empty() ? 0 : pk.cols();
    const int n_keys = n_prompt + zkv.cols();
    if (!key_keep.empty() && static_cast<int>(key_keep.size()) != n_keys)
        throw ShapeError("attention: key mask length " + std::to_string(key_keep.size()) +
                         " != prompt+key count " + std::to_string(n_keys));

    const int dh = d / layer.heads;
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
    Tensor q = matmul(layer.wq, zq);
    Tensor k = concat({pk, matmul(layer.wk, zkv)}, 1);
    Tensor v = concat({pv, matmul(layer.wv, zkv)}, 1);

    std::vector<Tensor> heads;
    heads.reserve(layer.heads);
    for (int h = 0; h < layer.heads; ++h) {
        Tensor qh = slice(q, 0, h * dh, (h + 1) * dh);
        Tensor kh = slice(k, 0, h * dh, (h + 1) * dh);
        Tensor vh = slice(v, 0, h * dh, (h + 1) * dh);
        Tensor scores = scale(matmul(transpose(qh), kh), inv_sqrt_dh);  // Kq x n_keys
        Tensor attn = softmax(scores, 1, key_keep.empty() ? nullptr : &key_keep);
        if (weights_out) weights_out->push_back(attn);
        heads.push_back(matmul(vh, transpose(apply_dropout(attn, drop))));
    }
    return matmul(layer.wo, concat(heads, 0));
}

// Self-attention over Z with prompt columns joining the keys/values only:
// output length always matches the query length, for any prompt count.
inline Tensor prompted_self_attention(const AttentionLayer& layer, const Tensor& z,
                                      const Tensor& pk, const Tensor& pv,
                                      const std::vector<uint8_t>& key_keep,
                                      const DropoutCfg& drop,
                                      std::vector<Tensor>* weights_out = nullptr) {
    return multi_head_attention(layer, z, z, pk, pv, key_keep, drop, weights_out);
}

// Attention wrapped as a post-norm residual sublayer: LN(x + drop(MHA(...))).
struct ResidualAttention {
    AttentionLayer att;
    LayerNorm norm;

    static ResidualAttention create(int dim, int heads, bool trainable, Rng& rng,
                                    double stddev = 0.0) {
        return {AttentionLayer::create(dim, heads, trainable, rng, stddev),
                LayerNorm::create(dim, trainable)};
    }

    void collect(std::vector<Tensor>& out) const {
        att.collect(out);
        norm.collect(out);
    }
};

inline Tensor cross_attention(const ResidualAttention& ra, const Tensor& z, const Tensor& y,
                              const std::vector<uint8_t>& key_keep, const DropoutCfg& drop,
                              std::vector<Tensor>* weights_out = nullptr) {
    Tensor a = multi_head_attention(ra.att, z, y, {}, {}, key_keep, drop, weights_out);
    return ra.norm.forward(add(z, apply_dropout(a, drop)));
}

inline Tensor self_attention_block(const ResidualAttention& ra, const Tensor& z,
                                   const DropoutCfg& drop,
                                   std::vector<Tensor>* weights_out = nullptr) {
    Tensor a = multi_head_attention(ra.att, z, z, {}, {}, {}, drop, weights_out);
    return ra.norm.forward(add(z, apply_dropout(a, drop)));
}

// Bottleneck adapter A(Z) = Z + W2 relu(W1 Z + b1).  W2 starts at zero, so a
// freshly created adapter is the identity; there is deliberately no outer
// bias, which keeps that property exact.
struct Adapter {
    Tensor w1, b1, w2;  // d x D, d, D x d

    static Adapter create(int dim, int bottleneck, Rng& rng, double stddev = 0.02) {
        if (bottleneck < 1 || bottleneck > dim)
            throw ConfigError("adapter: bottleneck " + std::to_string(bottleneck) +
                              " invalid for dim " + std::to_string(dim));
        Adapter a;
        a.w1 = Tensor::randn({bottleneck, dim}, rng, stddev, true);
        a.b1 = Tensor::zeros({bottleneck}, true);
        a.w2 = Tensor::zeros({dim, bottleneck}, true);
        return a;
    }

    static size_t param_count(int dim, int bottleneck) {
        return 2 * static_cast<size_t>(dim) * bottleneck + bottleneck;
    }

    void collect(std::vector<Tensor>& out) const {
        out.push_back(w1);
        out.push_back(b1);
        out.push_back(w2);
    }
};

inline Tensor adapter_apply(const Adapter& a, const Tensor& z, const DropoutCfg& drop) {
    if (z.rows() != a.w1.cols())
        throw ShapeError("adapter: input " + shape_str(z.shape()) + " does not match dim " +
                         std::to_string(a.w1.cols()));
    Tensor hidden = relu(add_bias(matmul(a.w1, z), a.b1));
    return add(z, matmul(a.w2, apply_dropout(hidden, drop)));
}

struct FeedForward {
    Tensor w1, b1, w2, b2;  // D -> F -> D, gelu between

    static FeedForward create(int dim, int hidden, bool trainable, Rng& rng,
                              double stddev = 0.0) {
        if (stddev == 0.0) stddev = 1.0 / std::sqrt(static_cast<double>(dim));
        FeedForward f;
        f.w1 = Tensor::randn({hidden, dim}, rng, stddev, trainable);
        f.b1 = Tensor::zeros({hidden}, trainable);
        f.w2 = Tensor::randn({dim, hidden}, rng, stddev, trainable);
        f.b2 = Tensor::zeros({dim}, trainable);
        return f;
    }

    void collect(std::vector<Tensor>& out) const {
        out.push_back(w1);
        out.push_back(b1);
        out.push_back(w2);
        out.push_back(b2);
    }
};

inline Tensor ffn_forward(const FeedForward& f, const Tensor& x) {
    return add_bias(matmul(f.w2, gelu(add_bias(matmul(f.w1, x), f.b1))), f.b2);
}

// One frozen encoder layer with its trainable insertions.  Adapters sit after
// each sublayer's residual sum and before its LayerNorm:
//   u   = LN1(adapter1(Z + drop(SA(Z, P_K, P_V))))
//   out = LN2(adapter2(u + drop(FFN(u))))
struct LmLayer {
    AttentionLayer self_att;
    LayerNorm ln_att, ln_ffn;
    FeedForward ffn;
    std::optional<Adapter> adapter_att, adapter_ffn;

    static LmLayer create(int dim, int heads, int ffn_hidden, Rng& rng) {
        LmLayer l;
        l.self_att = AttentionLayer::create(dim, heads, false, rng);
        l.ln_att = LayerNorm::create(dim, false);
        l.ln_ffn = LayerNorm::create(dim, false);
        l.ffn = FeedForward::create(dim, ffn_hidden, false, rng);
        return l;
    }

    void add_adapters(int bottleneck, Rng& rng) {
        adapter_att = Adapter::create(self_att.dim(), bottleneck, rng);
        adapter_ffn = Adapter::create(self_att.dim(), bottleneck, rng);
    }

    void collect_frozen(std::vector<Tensor>& out) const {
        self_att.collect(out);
        ln_att.collect(out);
        ln_ffn.collect(out);
        ffn.collect(out);
    }

    void collect_adapters(std::vector<Tensor>& out) const {
        if (adapter_att) adapter_att->collect(out);
        if (adapter_ffn) adapter_ffn->collect(out);
    }
};

// `token_keep` flags the K real positions; prompt keys are always attendable.
inline Tensor lm_layer_forward(const LmLayer& layer, const Tensor& z, const Tensor& pk,
                               const Tensor& pv, const std::vector<uint8_t>& token_keep,
                               const DropoutCfg& drop,
                               std::vector<Tensor>* weights_out = nullptr) {
    if (!token_keep.empty() && static_cast<int>(token_keep.size()) != z.cols())
        throw ShapeError("lm_layer: token mask length " + std::to_string(token_keep.size()) +
                         " != sequence length " + std::to_string(z.cols()));
    std::vector<uint8_t> key_keep;
    if (!token_keep.empty()) {
        const int n_prompt = pk.empty() ? 0 : pk.cols();
        key_keep.assign(n_prompt, 1);
        key_keep.insert(key_keep.end(), token_keep.begin(), token_keep.end());
    }
    Tensor att = prompted_self_attention(layer.self_att, z, pk, pv, key_keep, drop, weights_out);
    Tensor u = add(z, apply_dropout(att, drop));
    if (layer.adapter_att) u = adapter_apply(*layer.adapter_att, u, drop);
    u = layer.ln_att.forward(u);
    Tensor f = ffn_forward(layer.ffn, u);
    Tensor o = add(u, apply_dropout(f, drop));
    if (layer.adapter_ffn) o = adapter_apply(*layer.adapter_ffn, o, drop);
    return layer.ln_ffn.forward(o);
}

}  // namespace vidqa
