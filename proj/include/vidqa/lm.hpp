#pragma once

// The frozen bidirectional masked language model and its classifier head.
// The backbone is randomly initialized and then frozen: what trains is the
// machinery attached to it (prompts, adapters, mapper), never the backbone.

#include <optional>
#include <string>
#include <vector>

#include "vidqa/error.hpp"
#include "vidqa/nn.hpp"
#include "vidqa/prompts.hpp"
#include "vidqa/tensor.hpp"
#include "vidqa/text.hpp"

namespace vidqa {

struct LmConfig {
    int layers = 4;          // encoder depth C
    int dim = 64;            // model width D
    int heads = 4;           // attention heads H
    int ffn_hidden = 256;    // FFN inner width
    int max_positions = 128; // position table capacity S_max
    int vocab_size = 512;    // full token vocabulary |U_full|
    bool tied_head = true;   // head rows initialized from the embedding table

    void validate() const {
        if (layers < 1) throw ConfigError("lm: layers must be >= 1");
        if (dim < 1 || heads < 1 || dim % heads != 0)
            throw ConfigError("lm: dim " + std::to_string(dim) + " not divisible by heads " +
                              std::to_string(heads));
        if (ffn_hidden < 1) throw ConfigError("lm: ffn_hidden must be >= 1");
        if (max_positions < 1) throw ConfigError("lm: max_positions must be >= 1");
        if (vocab_size <= Tokenizer::kUnk)
            throw ConfigError("lm: vocab_size must exceed the special-token ids");
    }
};

struct FrozenLm {
    LmConfig config;
    Tensor tok_emb;   // D x |U_full|
    Tensor pos_emb;   // D x S_max
    std::vector<LmLayer> layers;
    Tensor head_weight;  // |U_full| x D
    Tensor head_bias;    // |U_full|

    static FrozenLm create(const LmConfig& cfg, Rng& rng) {
        cfg.validate();
        FrozenLm lm;
        lm.config = cfg;
        lm.tok_emb = Tensor::randn({cfg.dim, cfg.vocab_size}, rng, 0.02);
        lm.pos_emb = Tensor::randn({cfg.dim, cfg.max_positions}, rng, 0.02);
        lm.layers.reserve(cfg.layers);
        for (int c = 0; c < cfg.layers; ++c)
            lm.layers.push_back(LmLayer::create(cfg.dim, cfg.heads, cfg.ffn_hidden, rng));
        // The head stays frozen, so weight tying reduces to initializing the
        // head rows from the embedding table.
        lm.head_weight = cfg.tied_head ? transpose(lm.tok_emb)
                                       : Tensor::randn({cfg.vocab_size, cfg.dim}, rng, 0.02);
        lm.head_bias = Tensor::zeros({cfg.vocab_size});
        return lm;
    }

    void add_adapters(int bottleneck, Rng& rng) {
        for (LmLayer& layer : layers) layer.add_adapters(bottleneck, rng);
    }

    void collect_frozen(std::vector<Tensor>& out) const {
        out.push_back(tok_emb);
        out.push_back(pos_emb);
        for (const LmLayer& layer : layers) layer.collect_frozen(out);
        out.push_back(head_weight);
        out.push_back(head_bias);
    }

    void collect_adapters(std::vector<Tensor>& out) const {
        for (const LmLayer& layer : layers) layer.collect_adapters(out);
    }
};

// Embedding lookup for a token sequence; positions listed in `mask_positions`
// take the mask token's embedding column instead of their own.
inline Tensor embed_text(const FrozenLm& lm, const std::vector<int>& ids,
                         const std::vector<int>& mask_positions = {}) {
    if (ids.empty()) throw InputError("embed_text: empty token sequence");
    std::vector<int> cols = ids;
    for (int id : cols)
        if (id < 0 || id >= lm.config.vocab_size)
            throw InputError("embed_text: token id " + std::to_string(id) +
                             " outside vocabulary of " + std::to_string(lm.config.vocab_size));
    for (int pos : mask_positions) {
        if (pos < 0 || pos >= static_cast<int>(cols.size()))
            throw InputError("embed_text: mask position " + std::to_string(pos) +
                             " outside sequence of " + std::to_string(cols.size()));
        cols[pos] = Tokenizer::kMask;
    }
    return gather(lm.tok_emb, 1, cols);
}

struct LmOutput {
    Tensor hidden;  // D x K, K = video tokens + text tokens
    Tensor logits;  // |U_full| x (number of masked positions)
};

// The encoder pass: concatenates video and text embeddings, adds position
// embeddings over all K positions, and runs every layer with its prompt pair.
// `prompts` holds one (keys, values) pair per layer, or nothing at all.
// `video_keep` (when non-empty) marks which video columns are real; text
// columns are always attendable.  `layer_outputs`, when given, receives the
// hidden states after each layer.
inline Tensor lm_encode(const FrozenLm& lm, const Tensor& video, const Tensor& text,
                        const std::vector<LayerPrompts>& prompts, const DropoutCfg& drop,
                        const std::vector<uint8_t>& video_keep = {},
                        std::vector<Tensor>* layer_outputs = nullptr) {
    if (text.empty()) throw InputError("lm: empty text sequence");
    if (text.rows() != lm.config.dim)
        throw ShapeError("lm: text width " + std::to_string(text.rows()) + " != model dim " +
                         std::to_string(lm.config.dim));
    if (!video.empty() && video.rows() != lm.config.dim)
        throw ShapeError("lm: video width " + std::to_string(video.rows()) + " != model dim " +
                         std::to_string(lm.config.dim));
    if (!prompts.empty() && static_cast<int>(prompts.size()) != lm.config.layers)
        throw ShapeError("lm: " + std::to_string(prompts.size()) + " prompt pairs for " +
                         std::to_string(lm.config.layers) + " layers");
    const int m = video.empty() ? 0 : video.cols();
    if (!video_keep.empty() && static_cast<int>(video_keep.size()) != m)
        throw ShapeError("lm: video mask length " + std::to_string(video_keep.size()) +
                         " != video token count " + std::to_string(m));
    const int k = m + text.cols();
    if (k > lm.config.max_positions)
        throw ConfigError("lm: sequence length " + std::to_string(k) +
                          " exceeds position capacity " +
                          std::to_string(lm.config.max_positions));

    Tensor z = video.empty() ? text : concat({video, text}, 1);
    z = add(z, slice(lm.pos_emb, 1, 0, k));

    std::vector<uint8_t> token_keep;
    if (!video_keep.empty()) {
        token_keep = video_keep;
        token_keep.insert(token_keep.end(), static_cast<size_t>(text.cols()), 1);
    }

    static const Tensor kNoPrompt;
    for (size_t c = 0; c < lm.layers.size(); ++c) {
        const Tensor& pk = prompts.empty() ? kNoPrompt : prompts[c].keys;
        const Tensor& pv = prompts.empty() ? kNoPrompt : prompts[c].values;
        z = lm_layer_forward(lm.layers[c], z, pk, pv, token_keep, drop);
        if (layer_outputs) layer_outputs->push_back(z);
    }
    return z;
}

// Full-vocabulary logits at the masked text positions.  `text_mask_positions`
// index into the text sequence; the video block shifts them by its length.
inline LmOutput lm_forward(const FrozenLm& lm, const Tensor& video, const Tensor& text,
                           const std::vector<LayerPrompts>& prompts,
                           const std::vector<int>& text_mask_positions, const DropoutCfg& drop,
                           const std::vector<uint8_t>& video_keep = {}) {
    LmOutput out;
    out.hidden = lm_encode(lm, video, text, prompts, drop, video_keep);
    if (text_mask_positions.empty()) return out;
    const int m = video.empty() ? 0 : video.cols();
    std::vector<int> cols;
    for (int pos : text_mask_positions) {
        if (pos < 0 || pos >= text.cols())
            throw InputError("lm: mask position " + std::to_string(pos) +
                             " outside text sequence of " + std::to_string(text.cols()));
        cols.push_back(m + pos);
    }
    Tensor at_masks = gather(out.hidden, 1, cols);
    out.logits = add_bias(matmul(lm.head_weight, at_masks), lm.head_bias);
    return out;
}

// ---------------------------------------------------------------------------
// Restricted head

// The classifier head cut down to the rows the answer vocabulary can ever
// score.  Rows are deduplicated across answers; `answer_rows[i]` lists the
// rows holding answer i's tokens.
struct RestrictedHead {
    Tensor weight;  // R x D
    Tensor bias;    // R
    std::vector<int> row_token;
    std::vector<std::vector<int>> answer_rows;
};

inline RestrictedHead restrict_head(const FrozenLm& lm, const AnswerVocab& vocab) {
    RestrictedHead head;
    std::unordered_map<int, int> row_of;
    for (const std::vector<int>& token_ids : vocab.token_ids) {
        std::vector<int> rows;
        for (int id : token_ids) {
            if (id < 0 || id >= lm.config.vocab_size)
                throw ConfigError("restrict_head: answer token id " + std::to_string(id) +
                                  " outside vocabulary of " +
                                  std::to_string(lm.config.vocab_size));
            auto [it, inserted] = row_of.try_emplace(id, static_cast<int>(head.row_token.size()));
            if (inserted) head.row_token.push_back(id);
            rows.push_back(it->second);
        }
        head.answer_rows.push_back(std::move(rows));
    }
    head.weight = gather(lm.head_weight, 0, head.row_token);
    const int rows = static_cast<int>(head.row_token.size());
    std::vector<double> bias(head.row_token.size());
    for (size_t r = 0; r < head.row_token.size(); ++r)
        bias[r] = lm.head_bias.data()[head.row_token[r]];
    head.bias = Tensor::from_data({rows}, std::move(bias));
    return head;
}

// Logits over the restricted rows for each given hidden column.
inline Tensor restricted_logits(const RestrictedHead& head, const Tensor& hidden_cols) {
    if (hidden_cols.rows() != head.weight.cols())
        throw ShapeError("restricted head: hidden width " + std::to_string(hidden_cols.rows()) +
                         " != head width " + std::to_string(head.weight.cols()));
    return add_bias(matmul(head.weight, hidden_cols), head.bias);
}

}  // namespace vidqa
