#pragma once

// Training and evaluation: Adam over parameter groups, the linear warmup
// schedule, MLM training for captions (full vocabulary) and QA fine-tuning
// (restricted answer head), scoring, accuracy, and few-shot sampling.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <string>
#include <unordered_map>
#include <vector>

#include "vidqa/checkpoint.hpp"
#include "vidqa/data.hpp"
#include "vidqa/error.hpp"
#include "vidqa/model.hpp"
#include "vidqa/text.hpp"

namespace vidqa {

// ---------------------------------------------------------------------------
// Schedule

// Linear ramp 0 -> base over the warmup span, then linear decay base -> 0.
inline double lr_at(long step, long total_steps, double base_lr, double warmup_frac) {
    if (total_steps < 1) throw ConfigError("schedule: total steps must be >= 1");
    if (step < 0 || step > total_steps)
        throw ConfigError("schedule: step " + std::to_string(step) + " outside [0, " +
                          std::to_string(total_steps) + "]");
    if (!(warmup_frac >= 0.0) || warmup_frac >= 1.0)
        throw ConfigError("schedule: warmup fraction must lie in [0, 1)");
    if (base_lr <= 0.0) throw ConfigError("schedule: learning rate must be positive");
    const double warmup = warmup_frac * static_cast<double>(total_steps);
    if (warmup > 0.0 && static_cast<double>(step) <= warmup)
        return base_lr * (static_cast<double>(step) / warmup);
    return base_lr * (static_cast<double>(total_steps - step) /
                      (static_cast<double>(total_steps) - warmup));
}

// ---------------------------------------------------------------------------
// Optimizer

// Adam over the two trainable groups.  Frozen parameters are rejected at
// construction; a parameter with no gradient this step behaves as if its
// gradient were zero.
class Adam {
  public:
    static constexpr double kBeta1 = 0.9, kBeta2 = 0.95;

    Adam(const std::vector<Tensor>& prompt_group, const std::vector<Tensor>& rest_group,
         double eps = 1e-8)
        : eps_(eps) {
        for (const Tensor& t : prompt_group) add_slot(t, 0);
        for (const Tensor& t : rest_group) add_slot(t, 1);
    }

    // One update with per-group learning rates; clears gradients afterwards.
    void step(double prompt_lr, double rest_lr) {
        ++t_;
        const double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(t_));
        for (Slot& slot : slots_) {
            const double lr = slot.group == 0 ? prompt_lr : rest_lr;
            const bool has_grad = slot.param.has_grad();
            double* p = slot.param.data();
            for (size_t i = 0; i < slot.m.size(); ++i) {
                const double g = has_grad ? slot.param.grad()[i] : 0.0;
                slot.m[i] = kBeta1 * slot.m[i] + (1.0 - kBeta1) * g;
                slot.v[i] = kBeta2 * slot.v[i] + (1.0 - kBeta2) * g * g;
                const double m_hat = slot.m[i] / bc1;
                const double v_hat = slot.v[i] / bc2;
                p[i] -= lr * m_hat / (std::sqrt(v_hat) + eps_);
            }
            slot.param.zero_grad();
        }
    }

    long steps_taken() const { return t_; }
    size_t slot_count() const { return slots_.size(); }

  private:
    struct Slot {
        Tensor param;
        int group;
        std::vector<double> m, v;
    };

    void add_slot(const Tensor& t, int group) {
        if (!t.requires_grad())
            throw ConfigError("adam: refusing to optimize a frozen parameter");
        Slot s;
        s.param = t;
        s.group = group;
        s.m.assign(t.size(), 0.0);
        s.v.assign(t.size(), 0.0);
        slots_.push_back(std::move(s));
    }

    double eps_;
    long t_ = 0;
    std::vector<Slot> slots_;
};

// ---------------------------------------------------------------------------
// Scoring

struct ScoredAnswer {
    int index;
    double score;
};

// Scores every answer as the mean of its tokens' logits at the single masked
// position; ranking is by descending score, ties by vocabulary order.
inline std::vector<ScoredAnswer> score_answers(const Tensor& logits,
                                               const RestrictedHead& head) {
    if (!(logits.rank() == 1 || (logits.rank() == 2 && logits.cols() == 1)))
        throw ShapeError("score: logits for exactly one masked position required, got " +
                         shape_str(logits.shape()));
    if (static_cast<size_t>(logits.rows()) != head.row_token.size())
        throw ShapeError("score: " + std::to_string(logits.rows()) + " logit rows for " +
                         std::to_string(head.row_token.size()) + " head rows");
    std::vector<ScoredAnswer> ranked;
    ranked.reserve(head.answer_rows.size());
    for (size_t a = 0; a < head.answer_rows.size(); ++a) {
        double total = 0.0;
        for (int row : head.answer_rows[a]) total += logits.data()[row];
        ranked.push_back({static_cast<int>(a),
                          total / static_cast<double>(head.answer_rows[a].size())});
    }
    std::stable_sort(ranked.begin(), ranked.end(), [](const ScoredAnswer& x, const ScoredAnswer& y) {
        return x.score != y.score ? x.score > y.score : x.index < y.index;
    });
    return ranked;
}

// ---------------------------------------------------------------------------
// Few-shot sampling

// Deterministic sample of `n_take` indices without replacement.
inline std::vector<size_t> sample_fewshot_indices(size_t n_total, size_t n_take, uint64_t seed) {
    if (n_take > n_total)
        throw InputError("fewshot: requested " + std::to_string(n_take) + " of " +
                         std::to_string(n_total) + " items");
    std::vector<size_t> idx(n_total);
    std::iota(idx.begin(), idx.end(), size_t{0});
    Rng rng(seed);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(n_take);
    std::sort(idx.begin(), idx.end());
    return idx;
}

inline std::vector<size_t> sample_fraction_indices(size_t n_total, double fraction,
                                                   uint64_t seed) {
    if (!(fraction > 0.0) || fraction > 1.0)
        throw ConfigError("fewshot: fraction must lie in (0, 1]");
    const size_t n_take =
        std::max<size_t>(1, static_cast<size_t>(std::llround(fraction * n_total)));
    return sample_fewshot_indices(n_total, std::min(n_take, n_total), seed);
}

// ---------------------------------------------------------------------------
// Item preparation

// A model-ready item: sampled video plus the unmasked token sequence.  QA
// items carry the answer slot; caption items leave it empty.
struct TrainItem {
    std::string id;
    SampledVideo video;
    std::vector<int> ids;
    std::vector<int> answer_positions;  // QA training items
    std::string answer_norm;            // normalized answer string
};

// An evaluation item: the answer slot holds a single [MASK].
struct EvalItem {
    std::string id;
    SampledVideo video;
    std::vector<int> ids;
    int mask_position = -1;
    std::string answer_norm;
};

// Caption items for MLM pretraining: [CLS] caption [SEP], truncated to fit.
inline std::vector<TrainItem> prepare_caption_items(const Manifest& manifest,
                                                    const std::string& split,
                                                    const Tokenizer& tok,
                                                    const ModelConfig& cfg) {
    const int budget = cfg.lm.max_positions - cfg.video_tokens();
    if (budget < 3) throw ConfigError("caption items: no room for text tokens");
    std::vector<TrainItem> items;
    for (const ManifestItem& mi : manifest.split(split)) {
        if (!mi.caption || mi.caption->empty())
            throw DataError("item " + mi.id + ": pretraining requires a caption");
        TrainItem item;
        item.id = mi.id;
        item.video = load_and_sample(manifest.resolve(mi), cfg.frames);
        std::vector<int> words = tok.encode(*mi.caption);
        if (words.empty()) throw DataError("item " + mi.id + ": caption is empty after normalization");
        if (static_cast<int>(words.size()) > budget - 2) words.resize(budget - 2);
        item.ids.push_back(Tokenizer::kCls);
        item.ids.insert(item.ids.end(), words.begin(), words.end());
        item.ids.push_back(Tokenizer::kSep);
        items.push_back(std::move(item));
    }
    return items;
}

// QA items rendered through a template with the answer substituted.
inline std::vector<TrainItem> prepare_qa_items(const Manifest& manifest, const std::string& split,
                                               const Tokenizer& tok, const ModelConfig& cfg,
                                               int template_id) {
    const int budget = cfg.lm.max_positions - cfg.video_tokens();
    std::vector<TrainItem> items;
    for (const ManifestItem& mi : manifest.split(split)) {
        if (mi.question.empty() || mi.answer.empty())
            throw DataError("item " + mi.id + ": fine-tuning requires question and answer");
        TrainItem item;
        item.id = mi.id;
        item.video = load_and_sample(manifest.resolve(mi), cfg.frames);
        Rendered r = render_template(tok, template_id, mi.question, mi.answer, mi.subtitles,
                                     budget);
        item.ids = r.ids;
        item.answer_positions = r.answer_positions;
        item.answer_norm = Tokenizer::normalize(mi.answer);
        items.push_back(std::move(item));
    }
    return items;
}

inline std::vector<EvalItem> prepare_eval_items(const Manifest& manifest,
                                                const std::string& split, const Tokenizer& tok,
                                                const ModelConfig& cfg, int template_id) {
    const int budget = cfg.lm.max_positions - cfg.video_tokens();
    std::vector<EvalItem> items;
    for (const ManifestItem& mi : manifest.split(split)) {
        if (mi.question.empty())
            throw DataError("item " + mi.id + ": evaluation requires a question");
        EvalItem item;
        item.id = mi.id;
        item.video = load_and_sample(manifest.resolve(mi), cfg.frames);
        Rendered r = render_template(tok, template_id, mi.question, {}, mi.subtitles, budget);
        item.ids = r.ids;
        item.mask_position = r.answer_positions.at(0);
        item.answer_norm = Tokenizer::normalize(mi.answer);
        items.push_back(std::move(item));
    }
    return items;
}

// ---------------------------------------------------------------------------
// Forward with optional restricted head

// Hidden states at the given text positions, shifted past the video block.
inline Tensor hidden_at(const Model& m, const Tensor& hidden,
                        const std::vector<int>& text_positions) {
    std::vector<int> cols;
    cols.reserve(text_positions.size());
    for (int p : text_positions) cols.push_back(m.config.video_tokens() + p);
    return gather(hidden, 1, cols);
}

// ---------------------------------------------------------------------------
// Training loop

struct TrainSettings {
    long max_steps = 200;       // total optimizer steps
    int batch = 8;
    double lr = 3e-5;           // rest group
    double prompt_lr = 1e-3;    // prompt group
    double warmup_frac = 0.1;
    double dropout = 0.1;
    double mask_p = 0.15;       // pretraining corruption rate
    uint64_t seed = 0;
    bool prompts_only = false;  // fine-tuning regime

    void validate() const {
        if (max_steps < 1) throw ConfigError("train: max_steps must be >= 1");
        if (batch < 1) throw ConfigError("train: batch must be >= 1");
        if (lr <= 0.0 || prompt_lr <= 0.0) throw ConfigError("train: learning rates must be positive");
        if (!(warmup_frac >= 0.0) || warmup_frac >= 1.0)
            throw ConfigError("train: warmup fraction must lie in [0, 1)");
        if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("train: dropout must lie in [0, 1)");
        if (!(mask_p > 0.0) || !(mask_p < 1.0)) throw ConfigError("train: mask_p must lie in (0, 1)");
    }
};

struct StepMetric {
    long step;
    double lr;
    double loss;
};

struct TrainResult {
    std::vector<StepMetric> metrics;
    double first_loss = 0.0;
    double final_loss = 0.0;
    double tokens_per_sec = 0.0;
};

// MLM training over prepared items.  With `head` null the objective is
// pretraining: random mlm_mask corruption, full-vocabulary targets.  With a
// head, the objective is fine-tuning: the answer slot is masked and targets
// are the answer tokens' rows in the restricted head.
inline TrainResult train_mlm(Model& model, const std::vector<TrainItem>& items,
                             const TrainSettings& settings, const RestrictedHead* head = nullptr) {
    settings.validate();
    if (items.empty()) throw InputError("train: no items");
    ParamGroups groups = model.param_groups();
    if (head) {
        for (const TrainItem& item : items)
            if (item.answer_positions.empty())
                throw InputError("train: item " + item.id + " has no answer slot");
    }
    Adam adam(groups.prompts, settings.prompts_only ? std::vector<Tensor>{} : groups.rest);

    std::unordered_map<int, int> head_row;  // token id -> restricted row
    if (head)
        for (size_t r = 0; r < head->row_token.size(); ++r)
            head_row[head->row_token[r]] = static_cast<int>(r);

    Rng rng(settings.seed * 0x9e3779b97f4a7c15ULL + 1);
    DropoutCfg drop;
    drop.p = settings.dropout;
    drop.rng = &rng;
    drop.training = true;

    TrainResult result;
    const auto t_start = std::chrono::steady_clock::now();
    size_t tokens_seen = 0;

    std::vector<size_t> order(items.size());
    std::iota(order.begin(), order.end(), size_t{0});
    size_t cursor = order.size();  // forces a shuffle on the first step

    for (long step = 1; step <= settings.max_steps; ++step) {
        Tape tape;
        Tensor batch_loss;
        {
            TapeScope scope(tape);
            std::vector<Tensor> losses;
            for (int b = 0; b < settings.batch; ++b) {
                if (cursor == order.size()) {
                    std::shuffle(order.begin(), order.end(), rng);
                    cursor = 0;
                }
                const TrainItem& item = items[order[cursor++]];
                tokens_seen += item.ids.size();

                MaskedItem masked;
                if (head) {
                    Rendered as_rendered;
                    as_rendered.ids = item.ids;
                    as_rendered.answer_positions = item.answer_positions;
                    masked = downstream_mask(as_rendered);
                } else {
                    masked = mlm_mask(item.ids, settings.mask_p, rng);
                }
                std::vector<int> positions;
                std::vector<int> targets;
                for (const auto& [pos, orig] : masked.labels) positions.push_back(pos);

                VideoTokens vid = encode_video(model, item.video, drop);
                Tensor text = embed_text(model.lm, masked.ids);
                Tensor hidden = lm_encode(model.lm, vid.tokens, text,
                                          model.prompts.materialize(drop), drop, vid.keep);
                Tensor at_masks = hidden_at(model, hidden, positions);

                Tensor logits;
                if (head) {
                    logits = restricted_logits(*head, at_masks);
                    for (const auto& [pos, orig] : masked.labels) {
                        auto it = head_row.find(orig);
                        if (it == head_row.end())
                            throw InputError("train: item " + item.id +
                                             " has an answer token outside the restricted head");
                        targets.push_back(it->second);
                    }
                } else {
                    logits = add_bias(matmul(model.lm.head_weight, at_masks),
                                      model.lm.head_bias);
                    for (const auto& [pos, orig] : masked.labels) targets.push_back(orig);
                }
                losses.push_back(cross_entropy_from_logits(logits, targets));
            }
            Tensor total = losses[0];
            for (size_t i = 1; i < losses.size(); ++i) total = add(total, losses[i]);
            batch_loss = scale(total, 1.0 / static_cast<double>(losses.size()));
        }

        const double loss_value = batch_loss.item();
        if (!std::isfinite(loss_value))
            throw NumericError("train: non-finite loss " + std::to_string(loss_value) +
                               " at step " + std::to_string(step));
        tape.backward(batch_loss);

        const double rest_lr = lr_at(step, settings.max_steps, settings.lr, settings.warmup_frac);
        const double prompt_lr =
            lr_at(step, settings.max_steps, settings.prompt_lr, settings.warmup_frac);
        adam.step(prompt_lr, rest_lr);

        result.metrics.push_back({step, rest_lr, loss_value});
        if (step == 1) result.first_loss = loss_value;
        result.final_loss = loss_value;
    }

    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    result.tokens_per_sec = secs > 0.0 ? static_cast<double>(tokens_seen) / secs : 0.0;
    return result;
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalReport {
    size_t n = 0;
    size_t correct = 0;
    size_t oov_items = 0;  // ground-truth answer outside the vocabulary
    double accuracy = 0.0;
};

// Top-1 accuracy under the answer-vocabulary protocol: the argmax answer must
// string-match the normalized ground truth; items whose ground truth is not
// in the vocabulary count as incorrect.
inline EvalReport evaluate(const Model& model, const std::vector<EvalItem>& items,
                           const RestrictedHead& head, const AnswerVocab& vocab) {
    if (items.empty()) throw InputError("evaluate: no items");
    EvalReport report;
    report.n = items.size();
    DropoutCfg no_drop;
    for (const EvalItem& item : items) {
        VideoTokens vid = encode_video(model, item.video, no_drop);
        Tensor text = embed_text(model.lm, item.ids);
        Tensor hidden = lm_encode(model.lm, vid.tokens, text, model.prompts.materialize(no_drop),
                                  no_drop, vid.keep);
        Tensor logits = restricted_logits(head, hidden_at(model, hidden, {item.mask_position}));
        const std::vector<ScoredAnswer> ranked = score_answers(logits, head);
        if (vocab.index_of(item.answer_norm) < 0) {
            ++report.oov_items;  // assessed as incorrect
            continue;
        }
        if (!ranked.empty() && vocab.answers[ranked.front().index] == item.answer_norm)
            ++report.correct;
    }
    report.accuracy = static_cast<double>(report.correct) / static_cast<double>(report.n);
    return report;
}

}  // namespace vidqa
