#pragma once

// Deep text prompts: per-layer key/value columns that join every encoder
// layer's attention keys.  Storage is a single flat (2 C D) x N matrix laid
// out as [key block | value block], each block C stacked D-row slabs, so the
// per-layer pair is a pair of row slices.  Optionally the flat matrix is
// reparametrized as W (2CD x D') times a small inner matrix P (D' x N);
// fold() multiplies that out once and discards the factors.

#include <string>
#include <vector>

#include "vidqa/nn.hpp"
#include "vidqa/tensor.hpp"

namespace vidqa {

enum class PromptMode { direct, reparametrized, folded };

inline std::string to_string(PromptMode m) {
    switch (m) {
        case PromptMode::direct: return "direct";
        case PromptMode::reparametrized: return "reparametrized";
        case PromptMode::folded: return "folded";
    }
    return "?";
}

// One layer's attachable prompt pair; both tensors are empty when N == 0.
struct LayerPrompts {
    Tensor keys, values;  // D x N
};

class TextPromptSet {
  public:
    TextPromptSet() = default;

    // A set with no prompts at all (N == 0); attention reduces to bare keys.
    static TextPromptSet none(int layers, int dim) {
        TextPromptSet s;
        s.layers_ = layers;
        s.dim_ = dim;
        s.count_ = 0;
        s.mode_ = PromptMode::direct;
        return s;
    }

    static TextPromptSet direct(int layers, int dim, int count, Rng& rng, double stddev = 0.02) {
        TextPromptSet s = none(layers, dim);
        s.count_ = count;
        if (count > 0) s.flat_ = Tensor::randn({2 * layers * dim, count}, rng, stddev, true);
        return s;
    }

    // W gets variance 1/D' so the materialized prompts start at `stddev`.
    static TextPromptSet reparametrized(int layers, int dim, int count, int inner_dim, Rng& rng,
                                        double stddev = 0.02) {
        if (count < 1) throw ConfigError("prompts: reparametrized set needs at least one prompt");
        if (inner_dim < 1) throw ConfigError("prompts: inner dim must be positive");
        TextPromptSet s = none(layers, dim);
        s.count_ = count;
        s.mode_ = PromptMode::reparametrized;
        s.inner_ = Tensor::randn({inner_dim, count}, rng, stddev, true);
        s.proj_ = Tensor::randn({2 * layers * dim, inner_dim}, rng,
                                1.0 / std::sqrt(static_cast<double>(inner_dim)), true);
        return s;
    }

    // Reconstructs a folded set from its stored flat matrix (checkpoint load).
    static TextPromptSet folded_from(const Tensor& flat, int layers, int dim) {
        TextPromptSet s = none(layers, dim);
        s.mode_ = PromptMode::folded;
        if (!flat.empty()) {
            if (flat.rows() != 2 * layers * dim)
                throw ShapeError("prompts: flat matrix " + shape_str(flat.shape()) +
                                 " does not match 2*" + std::to_string(layers) + "*" +
                                 std::to_string(dim) + " rows");
            s.count_ = flat.cols();
            // Folded prompts are a trainable parameter whatever the source
            // tensor's flag was (e.g. values unpacked from a checkpoint).
            s.flat_ = Tensor::from_data(flat.shape(), flat.vec(), true);
        }
        return s;
    }

    PromptMode mode() const { return mode_; }
    int layer_count() const { return layers_; }
    int dim() const { return dim_; }
    int count() const { return count_; }

    // Per-layer (keys, values) pairs; gradients flow back into the stored
    // parameters (through W and the inner matrix when reparametrized).
    std::vector<LayerPrompts> materialize(const DropoutCfg& drop = {}) const {
        std::vector<LayerPrompts> out(layers_);
        if (count_ == 0) return out;
        Tensor flat = mode_ == PromptMode::reparametrized ? matmul(proj_, inner_) : flat_;
        flat = apply_dropout(flat, drop);
        for (int c = 0; c < layers_; ++c) {
            out[c].keys = slice(flat, 0, c * dim_, (c + 1) * dim_);
            out[c].values = slice(flat, 0, (layers_ + c) * dim_, (layers_ + c + 1) * dim_);
        }
        return out;
    }

    // Collapses the reparametrization; training afterwards updates the flat
    // matrix directly.
    void fold() {
        if (mode_ != PromptMode::reparametrized)
            throw StateError("prompts: fold requires a reparametrized set, this one is " +
                             to_string(mode_));
        Tensor folded = matmul(proj_, inner_);
        // Re-leaf the product so later training updates it directly.
        flat_ = Tensor::from_data(folded.shape(), folded.vec(), true);
        inner_ = Tensor();
        proj_ = Tensor();
        mode_ = PromptMode::folded;
    }

    std::vector<Tensor> trainable() const {
        if (count_ == 0) return {};
        if (mode_ == PromptMode::reparametrized) return {inner_, proj_};
        return {flat_};
    }

    const Tensor& flat() const {
        if (mode_ == PromptMode::reparametrized)
            throw StateError("prompts: flat matrix unavailable before fold");
        return flat_;
    }

    // The flat matrix as persisted: a reparametrized set contributes its
    // folded product (without mutating this set), others their flat matrix.
    Tensor folded_flat() const {
        if (count_ == 0) throw StateError("prompts: empty set has no flat matrix");
        if (mode_ != PromptMode::reparametrized) return flat_;
        Tensor folded = matmul(proj_, inner_);
        return Tensor::from_data(folded.shape(), folded.vec());
    }
    const Tensor& inner() const {
        require_reparam("inner");
        return inner_;
    }
    const Tensor& projection() const {
        require_reparam("projection");
        return proj_;
    }

  private:
    void require_reparam(const char* what) const {
        if (mode_ != PromptMode::reparametrized)
            throw StateError(std::string("prompts: ") + what + " only exists while reparametrized");
    }

    int layers_ = 0, dim_ = 0, count_ = 0;
    PromptMode mode_ = PromptMode::direct;
    Tensor flat_;   // 2 C D x N (direct / folded)
    Tensor inner_;  // D' x N    (reparametrized)
    Tensor proj_;   // 2 C D x D'
};

// Trainable prompt parameters at a given configuration: the flat text prompt
// matrix plus the visual latent queries.
inline size_t prompt_param_count(int layers, int dim, int n_text, int m_visual) {
    return 2 * static_cast<size_t>(layers) * dim * n_text + static_cast<size_t>(dim) * m_visual;
}

}  // namespace vidqa
