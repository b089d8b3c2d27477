#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <set>

#include "vidqa/text.hpp"

using namespace vidqa;

namespace {

Tokenizer toy_tokenizer() {
    const std::vector<std::string> corpus = {
        "what is it",
        "what is in the video",
        "he said hello to the dog",
        "ice cream is cold",
        "the dog barked at the cat",
    };
    return Tokenizer::build(corpus, 64);
}

}  // namespace

TEST_CASE("tokenizer basics", "[text]") {
    Tokenizer tok = toy_tokenizer();

    // Specials occupy ids 0..4 in fixed order.
    REQUIRE(tok.word_of(0) == "[PAD]");
    REQUIRE(tok.word_of(1) == "[CLS]");
    REQUIRE(tok.word_of(2) == "[SEP]");
    REQUIRE(tok.word_of(3) == "[MASK]");
    REQUIRE(tok.word_of(4) == "[UNK]");

    // "the" is the most frequent corpus word, so it takes the first free id.
    REQUIRE(tok.id_of("the") == 5);

    // Round trip for in-vocab text, normalization applied.
    const std::string text = "What is IT?";
    REQUIRE(Tokenizer::normalize(text) == "what is it");
    REQUIRE(tok.decode(tok.encode(text)) == "what is it");

    // Out-of-vocab words map to [UNK].
    std::vector<int> ids = tok.encode("what is zebra");
    REQUIRE(ids.size() == 3);
    REQUIRE(ids[2] == Tokenizer::kUnk);

    // Punctuation separates; apostrophes and hyphens bind.
    REQUIRE(Tokenizer::normalize("ice-cream, isn't it?!") == "ice-cream isn't it");
}

TEST_CASE("tokenizer frequency ranking breaks ties lexicographically", "[text]") {
    Tokenizer tok = Tokenizer::build({"b a", "b c a"}, 64, {});
    // counts: a=2, b=2, c=1 -> a before b before c.
    REQUIRE(tok.id_of("a") == 5);
    REQUIRE(tok.id_of("b") == 6);
    REQUIRE(tok.id_of("c") == 7);

    // Cap keeps only the most frequent words.
    Tokenizer small = Tokenizer::build({"x x x y y z"}, 7, {});
    REQUIRE(small.size() == 7);
    REQUIRE(small.id_of("x") == 5);
    REQUIRE(small.id_of("y") == 6);
    REQUIRE(small.id_of("z") == Tokenizer::kUnk);
}

TEST_CASE("vocabulary file round trip", "[text]") {
    Tokenizer tok = toy_tokenizer();
    const std::string path =
        (std::filesystem::temp_directory_path() / "vidqa_vocab_test.txt").string();
    tok.save(path);
    Tokenizer loaded = Tokenizer::load(path);
    REQUIRE(loaded.words() == tok.words());
    std::filesystem::remove(path);

    REQUIRE_THROWS_AS(Tokenizer::from_words({"[PAD]", "[CLS]", "nope"}), DataError);
    REQUIRE_THROWS_AS(Tokenizer::load("/nonexistent/vocab.txt"), DataError);
}

TEST_CASE("the four templates render byte-exactly", "[text]") {
    Tokenizer tok = toy_tokenizer();
    const std::string q = "What is it?";
    const std::string subs = "He said hello.";

    REQUIRE(render_template(tok, 1, q, {}, {}, 0).text == "[CLS] what is it? [MASK]. [SEP]");
    REQUIRE(render_template(tok, 2, q, {}, {}, 0).text ==
            "[CLS] Answer the question: what is it? [MASK]. [SEP]");
    REQUIRE(render_template(tok, 3, q, {}, {}, 0).text ==
            "[CLS] what is it? Answer: [MASK]. [SEP]");
    REQUIRE(render_template(tok, 4, q, {}, {}, 0).text ==
            "[CLS] Question: what is it? Answer: [MASK]. [SEP]");

    REQUIRE(render_template(tok, 1, q, {}, subs, 0).text ==
            "[CLS] what is it? [MASK]. he said hello [SEP]");
    REQUIRE(render_template(tok, 2, q, {}, subs, 0).text ==
            "[CLS] Answer the question: what is it? [MASK]. he said hello [SEP]");
    REQUIRE(render_template(tok, 3, q, {}, subs, 0).text ==
            "[CLS] what is it? Answer: [MASK]. he said hello [SEP]");
    REQUIRE(render_template(tok, 4, q, {}, subs, 0).text ==
            "[CLS] Question: what is it? Answer: [MASK]. Subtitles: he said hello [SEP]");

    REQUIRE_THROWS_AS(render_template(tok, 5, q, {}, {}, 0), ConfigError);
    REQUIRE_THROWS_AS(render_template(tok, 1, "?!", {}, {}, 0), InputError);
}

TEST_CASE("template token stream bounds the answer slot", "[text]") {
    Tokenizer tok = toy_tokenizer();

    // Inference: exactly one [MASK] regardless of answer length.
    Rendered inf = render_template(tok, 4, "what is it", {}, {}, 0);
    REQUIRE(inf.answer_positions.size() == 1);
    REQUIRE(inf.ids[inf.answer_positions[0]] == Tokenizer::kMask);
    REQUIRE(inf.ids.front() == Tokenizer::kCls);
    REQUIRE(inf.ids.back() == Tokenizer::kSep);
    REQUIRE(std::count(inf.ids.begin(), inf.ids.end(), Tokenizer::kMask) == 1);

    // Training with a two-word answer: both tokens sit in the slot.
    Rendered tr = render_template(tok, 4, "what is it", std::string("ice cream"), {}, 0);
    REQUIRE(tr.answer_positions.size() == 2);
    REQUIRE(tr.ids[tr.answer_positions[0]] == tok.id_of("ice"));
    REQUIRE(tr.ids[tr.answer_positions[1]] == tok.id_of("cream"));
    REQUIRE(tr.text == "[CLS] Question: what is it? Answer: ice cream. [SEP]");

    // The slot positions then drive downstream masking.
    MaskedItem masked = downstream_mask(tr);
    REQUIRE(masked.ids[tr.answer_positions[0]] == Tokenizer::kMask);
    REQUIRE(masked.ids[tr.answer_positions[1]] == Tokenizer::kMask);
    REQUIRE(masked.labels.size() == 2);
    REQUIRE(masked.labels[0] == std::pair{tr.answer_positions[0], tok.id_of("ice")});
    REQUIRE(masked.labels[1] == std::pair{tr.answer_positions[1], tok.id_of("cream")});
}

TEST_CASE("truncation drops subtitles before question words", "[text]") {
    Tokenizer tok = toy_tokenizer();
    const std::string q = "what is in the video";           // 5 tokens
    const std::string subs = "he said hello to the dog";    // 6 tokens

    // Untruncated: [CLS] question(1) q(5) answer(1) [MASK](1) subtitles(1)
    // subs(6) [SEP] = 17 tokens.
    Rendered full = render_template(tok, 4, q, {}, subs, 0);
    REQUIRE(full.ids.size() == 17);

    // A budget of 12 removes five subtitle words and nothing else.
    Rendered cut = render_template(tok, 4, q, {}, subs, 12);
    REQUIRE(cut.ids.size() == 12);
    REQUIRE(cut.text == "[CLS] Question: what is in the video? Answer: [MASK]. Subtitles: he [SEP]");

    // A budget of 10 eliminates the subtitles (and their prefix) entirely
    // while the question stays intact.
    Rendered no_subs = render_template(tok, 4, q, {}, subs, 10);
    REQUIRE(no_subs.ids.size() == 10);
    REQUIRE(no_subs.text == "[CLS] Question: what is in the video? Answer: [MASK]. [SEP]");

    // A budget of 7 starts trimming the question itself.
    Rendered cut_q = render_template(tok, 4, q, {}, subs, 7);
    REQUIRE(cut_q.ids.size() == 7);
    REQUIRE(cut_q.text == "[CLS] Question: what is? Answer: [MASK]. [SEP]");
    REQUIRE(cut_q.ids.front() == Tokenizer::kCls);
    REQUIRE(cut_q.ids.back() == Tokenizer::kSep);
    REQUIRE(cut_q.ids[cut_q.answer_positions[0]] == Tokenizer::kMask);

    // Even a one-word question cannot fit in five tokens of overhead.
    REQUIRE_THROWS_AS(render_template(tok, 4, q, {}, subs, 5), InputError);
}

TEST_CASE("mlm masking guarantees and protections", "[text]") {
    Tokenizer tok = toy_tokenizer();
    std::vector<int> ids = {Tokenizer::kCls};
    for (int id : tok.encode("the dog barked at the cat")) ids.push_back(id);
    ids.push_back(Tokenizer::kSep);

    Rng rng(7);
    for (int round = 0; round < 50; ++round) {
        MaskedItem m = mlm_mask(ids, 0.15, rng);
        REQUIRE(!m.labels.empty());  // at least one mask, always
        REQUIRE(m.ids.front() == Tokenizer::kCls);
        REQUIRE(m.ids.back() == Tokenizer::kSep);
        for (const auto& [pos, orig] : m.labels) {
            REQUIRE(m.ids[pos] == Tokenizer::kMask);
            REQUIRE(ids[pos] == orig);
            REQUIRE_FALSE(Tokenizer::is_special(orig));
        }
    }

    // Same seed, same draw.
    Rng r1(3), r2(3);
    REQUIRE(mlm_mask(ids, 0.15, r1).ids == mlm_mask(ids, 0.15, r2).ids);

    // Probability approaching one masks every maskable position.
    std::vector<int> three = {Tokenizer::kCls, 5, 6, 7, Tokenizer::kSep};
    MaskedItem all = mlm_mask(three, 1.0 - 1e-12, rng);
    REQUIRE(all.labels.size() == 3);

    // Protected positions are never masked.
    std::set<int> protect = {1, 2};
    for (int round = 0; round < 20; ++round) {
        MaskedItem m = mlm_mask(three, 0.9, rng, protect);
        for (const auto& [pos, orig] : m.labels) REQUIRE(pos == 3);
    }

    // No maskable positions at all -> input error; bad p -> config error.
    std::vector<int> only_special = {Tokenizer::kCls, Tokenizer::kSep};
    REQUIRE_THROWS_AS(mlm_mask(only_special, 0.5, rng), InputError);
    REQUIRE_THROWS_AS(mlm_mask(three, 0.5, rng, {1, 2, 3}), InputError);
    REQUIRE_THROWS_AS(mlm_mask(three, 0.0, rng), ConfigError);
    REQUIRE_THROWS_AS(mlm_mask(three, 1.0, rng), ConfigError);
}

TEST_CASE("answer vocabulary build modes", "[text]") {
    Tokenizer tok = Tokenizer::build(
        {"dog", "dog", "dog", "cat", "cat", "bird", "ice cream", "ice cream"}, 64);

    // Counts: dog 3, cat 2, "ice cream" 2, bird 1. "zzz-oov" is absent from the
    // tokenizer corpus above, so it contains [UNK] and is always dropped.
    std::vector<std::string> answers = {"dog", "dog",  "dog",       "cat",      "cat",
                                        "bird", "ice cream", "ice cream", "zzz-oov"};
    AnswerVocab top2 = build_vocab(answers, tok, VocabMode::topk, 2);
    // "cat" and "ice cream" tie at two occurrences; lexicographic order keeps "cat".
    REQUIRE(top2.answers == std::vector<std::string>{"dog", "cat"});
    REQUIRE(top2.excluded_items == 4);  // bird + 2x ice cream + zzz-oov

    AnswerVocab mc = build_vocab(answers, tok, VocabMode::mincount);
    REQUIRE(mc.answers == std::vector<std::string>{"dog", "cat", "ice cream"});
    REQUIRE(mc.token_ids[2].size() == 2);
    REQUIRE(mc.excluded_items == 2);  // bird (count 1) + zzz-oov

    // Auto selects top-k when distinct answers exceed k, else min-count.
    AnswerVocab autod = build_vocab(answers, tok, VocabMode::auto_select, 100);
    REQUIRE(autod.answers == mc.answers);
    AnswerVocab autok = build_vocab(answers, tok, VocabMode::auto_select, 2);
    REQUIRE(autok.answers == top2.answers);

    REQUIRE(mc.index_of("ice cream") == 2);
    REQUIRE(mc.index_of("zebra") == -1);

    // A vocabulary with nothing usable is a configuration error.
    REQUIRE_THROWS_AS(build_vocab({"zzz-oov"}, tok, VocabMode::topk, 5), ConfigError);
}
