#pragma once

// Word-level text pipeline: tokenizer with fixed special tokens, the four
// question templates, masking for pretraining and fine-tuning, and the answer
// vocabulary used by the classification protocol.

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "vidqa/error.hpp"
#include "vidqa/tensor.hpp"

namespace vidqa {

class Tokenizer {
  public:
    static constexpr int kPad = 0, kCls = 1, kSep = 2, kMask = 3, kUnk = 4;

    static const std::vector<std::string>& special_tokens() {
        static const std::vector<std::string> s = {"[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]"};
        return s;
    }

    // Words the templates themselves introduce; always forced into the vocab.
    static const std::vector<std::string>& template_words() {
        static const std::vector<std::string> w = {"answer", "the", "question", "subtitles"};
        return w;
    }

    // Lowercases, turns punctuation into separators, collapses whitespace.
    // Apostrophes and hyphens stay inside words.
    static std::string normalize(const std::string& text) {
        std::string out;
        bool pending_space = false;
        for (unsigned char ch : text) {
            const bool word_char = std::isalnum(ch) || ch == '\'' || ch == '-';
            if (word_char) {
                if (pending_space && !out.empty()) out.push_back(' ');
                pending_space = false;
                out.push_back(static_cast<char>(std::tolower(ch)));
            } else {
                pending_space = true;
            }
        }
        return out;
    }

    static std::vector<std::string> split_words(const std::string& normalized) {
        std::vector<std::string> words;
        std::istringstream in(normalized);
        std::string w;
        while (in >> w) words.push_back(w);
        return words;
    }

    // Builds from a corpus: word frequency order (ties lexicographic), capped
    // at `max_size` total entries including the specials.
    static Tokenizer build(const std::vector<std::string>& corpus, int max_size,
                           const std::vector<std::string>& extra_words = template_words()) {
        if (max_size < static_cast<int>(special_tokens().size()) + 1)
            throw ConfigError("tokenizer: max size " + std::to_string(max_size) + " too small");
        std::map<std::string, long> counts;
        for (const std::string& line : corpus)
            for (const std::string& w : split_words(normalize(line))) ++counts[w];
        for (const std::string& w : extra_words) counts[normalize(w)] += 1;
        std::vector<std::pair<std::string, long>> ranked(counts.begin(), counts.end());
        std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
            return a.second != b.second ? a.second > b.second : a.first < b.first;
        });
        Tokenizer t;
        for (const auto& [word, count] : ranked) {
            if (static_cast<int>(t.words_.size()) >= max_size) break;
            t.add_word(word);
        }
        return t;
    }

    static Tokenizer from_words(const std::vector<std::string>& words) {
        const auto& specials = special_tokens();
        if (words.size() < specials.size() ||
            !std::equal(specials.begin(), specials.end(), words.begin()))
            throw DataError("tokenizer: vocabulary must start with the special tokens");
        Tokenizer t;
        for (size_t i = specials.size(); i < words.size(); ++i) t.add_word(words[i]);
        return t;
    }

    // Vocabulary file: one token per line, the line number is the id.
    static Tokenizer load(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw DataError("tokenizer: cannot open " + path);
        std::vector<std::string> words;
        std::string line;
        while (std::getline(in, line)) {
            if (!line.empty() && line.back() == '\r') line.pop_back();
            if (!line.empty()) words.push_back(line);
        }
        return from_words(words);
    }

    void save(const std::string& path) const {
        std::ofstream out(path);
        if (!out) throw DataError("tokenizer: cannot write " + path);
        for (const std::string& w : words_) out << w << '\n';
    }

    const std::vector<std::string>& words() const { return words_; }
    int size() const { return static_cast<int>(words_.size()); }

    int id_of(const std::string& word) const {
        auto it = index_.find(word);
        return it == index_.end() ? kUnk : it->second;
    }

    const std::string& word_of(int id) const {
        if (id < 0 || id >= size())
            throw InputError("tokenizer: id " + std::to_string(id) + " out of range");
        return words_[id];
    }

    static bool is_special(int id) { return id >= 0 && id < 5; }

    // Normalized (word, id) pairs; the word string survives even when the id
    // falls back to [UNK].
    std::vector<std::pair<std::string, int>> encode_words(const std::string& text) const {
        std::vector<std::pair<std::string, int>> out;
        for (const std::string& w : split_words(normalize(text))) out.emplace_back(w, id_of(w));
        return out;
    }

    std::vector<int> encode(const std::string& text) const {
        std::vector<int> ids;
        for (const auto& [w, id] : encode_words(text)) ids.push_back(id);
        return ids;
    }

    std::string decode(const std::vector<int>& ids) const {
        std::string out;
        for (int id : ids) {
            if (!out.empty()) out.push_back(' ');
            out += word_of(id);
        }
        return out;
    }

  private:
    Tokenizer() {
        for (const std::string& s : special_tokens()) {
            index_[s] = static_cast<int>(words_.size());
            words_.push_back(s);
        }
    }

    void add_word(const std::string& w) {
        if (index_.count(w)) throw DataError("tokenizer: duplicate vocabulary entry '" + w + "'");
        index_[w] = static_cast<int>(words_.size());
        words_.push_back(w);
    }

    std::vector<std::string> words_;
    std::unordered_map<std::string, int> index_;
};

// ---------------------------------------------------------------------------
// Templates

// A templated example: the exact text the model conditions on, its token ids,
// and which positions hold the answer slot.  At inference the slot is a
// single [MASK]; at training it carries the answer tokens.
struct Rendered {
    std::string text;
    std::vector<int> ids;
    std::vector<int> answer_positions;
};

namespace detail {

struct Slot {
    std::vector<std::string> words;
    std::vector<int> ids;
};

inline Slot encode_slot(const Tokenizer& tok, const std::string& text) {
    Slot s;
    for (const auto& [w, id] : tok.encode_words(text)) {
        s.words.push_back(w);
        s.ids.push_back(id);
    }
    return s;
}

inline std::string join(const std::vector<std::string>& words) {
    std::string out;
    for (const std::string& w : words) {
        if (!out.empty()) out.push_back(' ');
        out += w;
    }
    return out;
}

}  // namespace detail

// Renders one of the four input templates.  `answer` empty means inference:
// the answer slot is a single [MASK] token.  Token budget `seq_limit` is
// enforced by dropping subtitle words first, then question words (the
// question keeps at least one word).
inline Rendered render_template(const Tokenizer& tok, int template_id,
                                const std::string& question,
                                const std::optional<std::string>& answer,
                                const std::optional<std::string>& subtitles, int seq_limit) {
    if (template_id < 1 || template_id > 4)
        throw ConfigError("template: id " + std::to_string(template_id) + " outside 1..4");
    detail::Slot q = detail::encode_slot(tok, question);
    if (q.ids.empty()) throw InputError("template: question is empty after normalization");

    detail::Slot ans;
    if (answer && !answer->empty()) {
        ans = detail::encode_slot(tok, *answer);
        if (ans.ids.empty()) throw InputError("template: answer is empty after normalization");
    } else {
        ans.words = {"[MASK]"};
        ans.ids = {Tokenizer::kMask};
    }

    detail::Slot subs;
    if (subtitles && !subtitles->empty()) subs = detail::encode_slot(tok, *subtitles);

    // Template words surrounding the slots, as token lists.
    const std::vector<int> pre2 = {tok.id_of("answer"), tok.id_of("the"), tok.id_of("question")};
    const std::vector<int> pre4 = {tok.id_of("question")};
    const std::vector<int> mid34 = {tok.id_of("answer")};
    const std::vector<int> glue4 = {tok.id_of("subtitles")};

    std::vector<int> pre, mid, glue;
    switch (template_id) {
        case 1: break;
        case 2: pre = pre2; break;
        case 3: mid = mid34; break;
        case 4: pre = pre4; mid = mid34; glue = glue4; break;
    }

    const size_t overhead = 2 + pre.size() + mid.size() + ans.ids.size();
    auto total = [&] {
        return overhead + q.ids.size() + subs.ids.size() +
               (subs.ids.empty() ? 0 : glue.size());
    };
    if (seq_limit > 0) {
        while (total() > static_cast<size_t>(seq_limit) && !subs.ids.empty()) {
            subs.ids.pop_back();
            subs.words.pop_back();
        }
        while (total() > static_cast<size_t>(seq_limit) && q.ids.size() > 1) {
            q.ids.pop_back();
            q.words.pop_back();
        }
        if (total() > static_cast<size_t>(seq_limit))
            throw InputError("template: question alone exceeds the sequence limit of " +
                             std::to_string(seq_limit) + " tokens");
    }

    Rendered r;
    const std::string q_str = detail::join(q.words);
    const std::string a_str = detail::join(ans.words);
    const std::string s_str = detail::join(subs.words);
    const bool with_subs = !subs.ids.empty();
    switch (template_id) {
        case 1:
            r.text = "[CLS] " + q_str + "? " + a_str + ".";
            if (with_subs) r.text += " " + s_str;
            r.text += " [SEP]";
            break;
        case 2:
            r.text = "[CLS] Answer the question: " + q_str + "? " + a_str + ".";
            if (with_subs) r.text += " " + s_str;
            r.text += " [SEP]";
            break;
        case 3:
            r.text = "[CLS] " + q_str + "? Answer: " + a_str + ".";
            if (with_subs) r.text += " " + s_str;
            r.text += " [SEP]";
            break;
        case 4:
            r.text = "[CLS] Question: " + q_str + "? Answer: " + a_str + ".";
            if (with_subs) r.text += " Subtitles: " + s_str;
            r.text += " [SEP]";
            break;
    }

    r.ids.push_back(Tokenizer::kCls);
    r.ids.insert(r.ids.end(), pre.begin(), pre.end());
    r.ids.insert(r.ids.end(), q.ids.begin(), q.ids.end());
    r.ids.insert(r.ids.end(), mid.begin(), mid.end());
    for (int id : ans.ids) {
        r.answer_positions.push_back(static_cast<int>(r.ids.size()));
        r.ids.push_back(id);
    }
    if (with_subs) {
        r.ids.insert(r.ids.end(), glue.begin(), glue.end());
        r.ids.insert(r.ids.end(), subs.ids.begin(), subs.ids.end());
    }
    r.ids.push_back(Tokenizer::kSep);
    return r;
}

// ---------------------------------------------------------------------------
// Masking

struct MaskedItem {
    std::vector<int> ids;                       // with [MASK] substituted
    std::vector<std::pair<int, int>> labels;    // (position, original id)
};

// Masked-language-model corruption: each maskable (non-special, unprotected)
// position is masked independently with probability p; the draw is repeated
// until at least one position is masked.
inline MaskedItem mlm_mask(const std::vector<int>& ids, double p, Rng& rng,
                           const std::set<int>& protected_positions = {}) {
    if (!(p > 0.0) || !(p < 1.0))
        throw ConfigError("mlm_mask: probability " + std::to_string(p) + " outside (0, 1)");
    std::vector<int> maskable;
    for (int i = 0; i < static_cast<int>(ids.size()); ++i)
        if (!Tokenizer::is_special(ids[i]) && !protected_positions.count(i)) maskable.push_back(i);
    if (maskable.empty()) throw InputError("mlm_mask: no maskable positions");

    std::bernoulli_distribution draw(p);
    std::vector<int> chosen;
    for (int attempt = 0; chosen.empty(); ++attempt) {
        for (int pos : maskable)
            if (draw(rng)) chosen.push_back(pos);
        if (attempt > 10000) {  // p > 0 makes this unreachable in practice
            chosen.push_back(maskable.front());
            break;
        }
    }

    MaskedItem out;
    out.ids = ids;
    for (int pos : chosen) {
        out.labels.emplace_back(pos, ids[pos]);
        out.ids[pos] = Tokenizer::kMask;
    }
    return out;
}

// Downstream corruption: masks exactly the answer slot.
inline MaskedItem downstream_mask(const Rendered& r) {
    if (r.answer_positions.empty()) throw InputError("downstream_mask: no answer positions");
    MaskedItem out;
    out.ids = r.ids;
    for (int pos : r.answer_positions) {
        if (pos < 0 || pos >= static_cast<int>(r.ids.size()))
            throw InputError("downstream_mask: answer position out of range");
        out.labels.emplace_back(pos, r.ids[pos]);
        out.ids[pos] = Tokenizer::kMask;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Answer vocabulary

enum class VocabMode { topk, mincount, auto_select };

inline VocabMode vocab_mode_from(const std::string& s) {
    if (s == "topk") return VocabMode::topk;
    if (s == "mincount") return VocabMode::mincount;
    if (s == "auto") return VocabMode::auto_select;
    throw ConfigError("vocab: unknown mode '" + s + "'");
}

struct AnswerVocab {
    std::vector<std::string> answers;         // normalized, unique, ranked
    std::vector<std::vector<int>> token_ids;  // per answer, [UNK]-free
    size_t excluded_items = 0;                // training items whose answer fell out
    size_t distinct_answers = 0;

    int index_of(const std::string& normalized) const {
        auto it = lookup_.find(normalized);
        return it == lookup_.end() ? -1 : it->second;
    }

    void rebuild_lookup() {
        lookup_.clear();
        for (size_t i = 0; i < answers.size(); ++i) lookup_[answers[i]] = static_cast<int>(i);
    }

  private:
    std::unordered_map<std::string, int> lookup_;
};

// Ranks normalized training answers by frequency (ties lexicographic) and
// keeps either the top k or every answer seen at least twice.  Answers that
// cannot tokenize without [UNK] are dropped; their items count as excluded.
inline AnswerVocab build_vocab(const std::vector<std::string>& train_answers,
                               const Tokenizer& tok, VocabMode mode, int top_k = 1000) {
    if (top_k < 1) throw ConfigError("vocab: top_k must be positive");
    std::map<std::string, long> counts;
    for (const std::string& a : train_answers) {
        const std::string n = Tokenizer::normalize(a);
        if (!n.empty()) ++counts[n];
    }
    if (mode == VocabMode::auto_select)
        mode = counts.size() > static_cast<size_t>(top_k) ? VocabMode::topk : VocabMode::mincount;

    std::vector<std::pair<std::string, long>> ranked(counts.begin(), counts.end());
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
        return a.second != b.second ? a.second > b.second : a.first < b.first;
    });

    AnswerVocab v;
    v.distinct_answers = ranked.size();
    size_t kept_items = 0;
    for (const auto& [answer, count] : ranked) {
        if (mode == VocabMode::topk && static_cast<int>(v.answers.size()) >= top_k) break;
        if (mode == VocabMode::mincount && count < 2) continue;
        std::vector<int> ids = tok.encode(answer);
        if (std::find(ids.begin(), ids.end(), Tokenizer::kUnk) != ids.end()) continue;
        if (ids.empty()) continue;
        v.answers.push_back(answer);
        v.token_ids.push_back(std::move(ids));
        kept_items += count;
    }
    if (v.answers.empty()) throw ConfigError("vocab: no usable answers in the training split");
    size_t total_items = 0;
    for (const auto& [answer, count] : counts) total_items += count;
    v.excluded_items = total_items - kept_items;
    v.rebuild_lookup();
    return v;
}

}  // namespace vidqa
