#include <catch2/catch_amalgamated.hpp>

#include <vector>

#include "vidqa/lm.hpp"

using namespace vidqa;

namespace {

LmConfig toy_config() {
    LmConfig cfg;
    cfg.layers = 2;
    cfg.dim = 16;
    cfg.heads = 2;
    cfg.ffn_hidden = 32;
    cfg.max_positions = 40;
    cfg.vocab_size = 24;
    return cfg;
}

DropoutCfg no_drop() { return DropoutCfg{}; }

}  // namespace

TEST_CASE("embedding lookup and mask substitution", "[lm]") {
    Rng rng(21);
    FrozenLm lm = FrozenLm::create(toy_config(), rng);

    std::vector<int> ids = {1, 7, 9, 2};
    Tensor plain = embed_text(lm, ids);
    REQUIRE(plain.rows() == 16);
    REQUIRE(plain.cols() == 4);
    for (int r = 0; r < 16; ++r) {
        REQUIRE(plain.at(r, 1) == lm.tok_emb.at(r, 7));
        REQUIRE(plain.at(r, 3) == lm.tok_emb.at(r, 2));
    }

    // A masked position takes the mask token's column.
    Tensor masked = embed_text(lm, ids, {1});
    for (int r = 0; r < 16; ++r) {
        REQUIRE(masked.at(r, 1) == lm.tok_emb.at(r, Tokenizer::kMask));
        REQUIRE(masked.at(r, 0) == plain.at(r, 0));
        REQUIRE(masked.at(r, 2) == plain.at(r, 2));
    }

    // Masking every position yields S copies of the mask embedding.
    Tensor all_masked = embed_text(lm, ids, {0, 1, 2, 3});
    for (int r = 0; r < 16; ++r)
        for (int c = 0; c < 4; ++c)
            REQUIRE(all_masked.at(r, c) == lm.tok_emb.at(r, Tokenizer::kMask));

    REQUIRE_THROWS_AS(embed_text(lm, {5, 24}), InputError);
    REQUIRE_THROWS_AS(embed_text(lm, {-1}), InputError);
    REQUIRE_THROWS_AS(embed_text(lm, ids, {4}), InputError);
    REQUIRE_THROWS_AS(embed_text(lm, {}), InputError);
}

TEST_CASE("encoder shapes and the position capacity limit", "[lm]") {
    Rng rng(22);
    LmConfig cfg = toy_config();
    FrozenLm lm = FrozenLm::create(cfg, rng);

    // M=10 video tokens + S=20 text tokens -> hidden D x 30.
    Tensor video = Tensor::randn({16, 10}, rng);
    std::vector<int> ids(20, 6);
    LmOutput out = lm_forward(lm, video, embed_text(lm, ids), {}, {3}, no_drop());
    REQUIRE(out.hidden.rows() == 16);
    REQUIRE(out.hidden.cols() == 30);

    // One masked position -> exactly one logit column over the full vocab.
    REQUIRE(out.logits.rows() == 24);
    REQUIRE(out.logits.cols() == 1);

    LmOutput two = lm_forward(lm, video, embed_text(lm, ids), {}, {3, 7}, no_drop());
    REQUIRE(two.logits.cols() == 2);

    // K = 10 + 31 = 41 exceeds max_positions = 40.
    std::vector<int> long_ids(31, 6);
    REQUIRE_THROWS_AS(lm_forward(lm, video, embed_text(lm, long_ids), {}, {0}, no_drop()),
                      ConfigError);
    REQUIRE_THROWS_AS(lm_forward(lm, video, embed_text(lm, ids), {}, {20}, no_drop()),
                      InputError);
}

TEST_CASE("encoder matches a hand-rolled layer loop", "[lm]") {
    // Independent oracle: apply position embeddings and each layer manually
    // with the already-verified nn primitives, prompts included.
    Rng rng(23);
    LmConfig cfg = toy_config();
    FrozenLm lm = FrozenLm::create(cfg, rng);
    TextPromptSet prompts = TextPromptSet::direct(cfg.layers, cfg.dim, 3, rng);

    Tensor video = Tensor::randn({16, 4}, rng);
    std::vector<int> ids = {1, 8, 3, 9, 2};
    Tensor text = embed_text(lm, ids, {2});

    std::vector<LayerPrompts> per_layer = prompts.materialize(no_drop());
    Tensor z = concat({video, text}, 1);
    z = add(z, slice(lm.pos_emb, 1, 0, 9));
    for (int c = 0; c < cfg.layers; ++c)
        z = lm_layer_forward(lm.layers[c], z, per_layer[c].keys, per_layer[c].values, {},
                             no_drop());
    Tensor expected_logits =
        add_bias(matmul(lm.head_weight, gather(z, 1, {6})), lm.head_bias);

    LmOutput out = lm_forward(lm, video, text, per_layer, {2}, no_drop());
    REQUIRE(exactly_equal(out.hidden, z));
    REQUIRE(exactly_equal(out.logits, expected_logits));
}

TEST_CASE("zero adapters and empty prompts reduce to the bare encoder", "[lm]") {
    LmConfig cfg = toy_config();
    Rng rng_a(31), rng_b(31);
    FrozenLm bare = FrozenLm::create(cfg, rng_a);
    FrozenLm adapted = FrozenLm::create(cfg, rng_b);
    Rng rng_adapter(99);
    adapted.add_adapters(4, rng_adapter);

    Rng rng_in(5);
    std::vector<int> ids = {1, 7, 11, 13, 2};
    Tensor text_a = embed_text(bare, ids, {2});
    Tensor text_b = embed_text(adapted, ids, {2});

    // Identical seeds make the frozen weights bitwise equal; fresh adapters
    // have W2 = 0, so with no prompts and no video the outputs coincide
    // bitwise.
    LmOutput a = lm_forward(bare, Tensor(), text_a, {}, {2}, no_drop());
    LmOutput b = lm_forward(adapted, Tensor(), text_b, {}, {2}, no_drop());
    REQUIRE(exactly_equal(a.hidden, b.hidden));
    REQUIRE(exactly_equal(a.logits, b.logits));
}

TEST_CASE("masked logits use context on both sides", "[lm]") {
    Rng rng(41);
    FrozenLm lm = FrozenLm::create(toy_config(), rng);

    std::vector<int> base = {1, 7, 9, 3, 11, 13, 2};  // mask at position 3
    std::vector<int> right_flip = base;
    right_flip[5] = 17;  // to the right of the mask
    std::vector<int> left_flip = base;
    left_flip[1] = 17;  // to the left of the mask

    auto logits_for = [&](const std::vector<int>& ids) {
        return lm_forward(lm, Tensor(), embed_text(lm, ids), {}, {3}, no_drop()).logits;
    };
    Tensor l_base = logits_for(base);
    REQUIRE(max_abs_diff(l_base, logits_for(right_flip)) > 1e-8);
    REQUIRE(max_abs_diff(l_base, logits_for(left_flip)) > 1e-8);
}

TEST_CASE("prompts at layer c affect layers >= c only", "[lm]") {
    Rng rng(51);
    LmConfig cfg = toy_config();
    FrozenLm lm = FrozenLm::create(cfg, rng);
    TextPromptSet prompts = TextPromptSet::direct(cfg.layers, cfg.dim, 2, rng);
    std::vector<LayerPrompts> per_layer = prompts.materialize(no_drop());

    std::vector<int> ids = {1, 7, 9, 2};
    Tensor text = embed_text(lm, ids);

    std::vector<Tensor> before, after;
    lm_encode(lm, Tensor(), text, per_layer, no_drop(), {}, &before);

    // Perturb only the second layer's prompt pair.
    std::vector<LayerPrompts> bumped = per_layer;
    bumped[1].keys = add(bumped[1].keys, Tensor::filled(bumped[1].keys.shape(), 0.25));
    lm_encode(lm, Tensor(), text, bumped, no_drop(), {}, &after);

    REQUIRE(exactly_equal(before[0], after[0]));
    REQUIRE(max_abs_diff(before[1], after[1]) > 1e-10);
}

TEST_CASE("head restriction slices the right rows", "[lm]") {
    Rng rng(61);
    LmConfig cfg = toy_config();
    cfg.tied_head = false;
    FrozenLm lm = FrozenLm::create(cfg, rng);
    for (int i = 0; i < cfg.vocab_size; ++i) lm.head_bias.data()[i] = 0.01 * i;

    Tokenizer tok = Tokenizer::build({"dog", "dog", "cat", "cat", "ice cream", "ice cream"}, 32);
    AnswerVocab vocab =
        build_vocab({"dog", "dog", "cat", "cat", "ice cream", "ice cream"}, tok,
                    VocabMode::mincount);
    REQUIRE(vocab.answers == std::vector<std::string>{"cat", "dog", "ice cream"});

    RestrictedHead head = restrict_head(lm, vocab);
    REQUIRE(head.row_token.size() == 4);  // cat, dog, ice, cream
    REQUIRE(head.weight.rows() == 4);
    REQUIRE(head.answer_rows[2].size() == 2);

    // Row r of the restricted head is the full head's row for that token.
    for (size_t r = 0; r < head.row_token.size(); ++r)
        for (int d = 0; d < cfg.dim; ++d)
            REQUIRE(head.weight.at(static_cast<int>(r), d) ==
                    lm.head_weight.at(head.row_token[r], d));

    // Restricted logits equal the matching rows of the full-head logits.
    Tensor hidden = Tensor::randn({cfg.dim, 1}, rng);
    Tensor full = add_bias(matmul(lm.head_weight, hidden), lm.head_bias);
    Tensor restricted = restricted_logits(head, hidden);
    for (size_t r = 0; r < head.row_token.size(); ++r)
        REQUIRE(restricted.at(static_cast<int>(r), 0) == full.at(head.row_token[r], 0));

    // A shared token across answers is stored once.
    AnswerVocab shared = build_vocab({"ice cream", "ice cream", "ice", "ice"}, tok,
                                     VocabMode::mincount);
    RestrictedHead dedup = restrict_head(lm, shared);
    REQUIRE(dedup.row_token.size() == 2);

    // Token ids beyond the model vocabulary are a configuration error.
    AnswerVocab bad = vocab;
    bad.token_ids.push_back({cfg.vocab_size + 1});
    bad.answers.push_back("ghost");
    REQUIRE_THROWS_AS(restrict_head(lm, bad), ConfigError);
}

TEST_CASE("backward trains attachments and never the backbone", "[lm]") {
    Rng rng(71);
    LmConfig cfg = toy_config();
    FrozenLm lm = FrozenLm::create(cfg, rng);
    lm.add_adapters(4, rng);
    TextPromptSet prompts = TextPromptSet::direct(cfg.layers, cfg.dim, 2, rng);

    std::vector<int> ids = {1, 7, 9, 3, 2};
    Tensor text = embed_text(lm, ids, {2});

    Tape tape;
    Tensor loss;
    {
        TapeScope scope(tape);
        LmOutput out =
            lm_forward(lm, Tensor(), text, prompts.materialize(no_drop()), {2}, no_drop());
        loss = cross_entropy_from_logits(out.logits, {7});
    }
    tape.backward(loss);

    std::vector<Tensor> frozen;
    lm.collect_frozen(frozen);
    for (const Tensor& t : frozen) REQUIRE_FALSE(t.has_grad());

    double prompt_grad = 0.0;
    for (double g : prompts.flat().grad()) prompt_grad += std::abs(g);
    REQUIRE(prompt_grad > 0.0);

    std::vector<Tensor> adapters;
    lm.collect_adapters(adapters);
    double adapter_grad = 0.0;
    for (const Tensor& t : adapters)
        if (t.has_grad())
            for (double g : t.grad()) adapter_grad += std::abs(g);
    REQUIRE(adapter_grad > 0.0);

    // Gradient quality end to end: finite differences over a prompt matrix
    // and one adapter weight.
    auto loss_fn = [&] {
        LmOutput out =
            lm_forward(lm, Tensor(), text, prompts.materialize(no_drop()), {2}, no_drop());
        return cross_entropy_from_logits(out.logits, {7});
    };
    GradCheckReport report =
        grad_check_params(loss_fn, {prompts.flat(), lm.layers[0].adapter_att->w1});
    INFO("max rel err " << report.max_rel_err);
    REQUIRE(report.max_rel_err < 1e-6);
}
