// vidqa: video question answering with a frozen masked language model.
//
// Commands: synth-data, pretrain, finetune, evaluate, gradcheck,
// inspect-checkpoint.  Every command resolves a flat key=value configuration
// (file < --set < typed flags), echoes the effective configuration, and is
// reproducible from (config, seed).  Exit codes: 0 success, 2 configuration
// error, 3 data-format error, 4 numeric error, 1 anything else.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "vidqa/checkpoint.hpp"
#include "vidqa/data.hpp"
#include "vidqa/train.hpp"

namespace {

using nlohmann::json;
using namespace vidqa;

// ---------------------------------------------------------------------------
// Flat key=value configuration

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

class FlatConfig {
  public:
    explicit FlatConfig(std::map<std::string, std::string> defaults)
        : values_(std::move(defaults)) {}

    void load_file(const std::string& path) {
        std::ifstream f(path);
        if (!f) throw ConfigError("config: cannot open " + path);
        std::string line;
        int line_no = 0;
        while (std::getline(f, line)) {
            ++line_no;
            const std::string stripped = trim(line);
            if (stripped.empty() || stripped[0] == '#') continue;
            const auto eq = stripped.find('=');
            if (eq == std::string::npos)
                throw ConfigError("config: " + path + ":" + std::to_string(line_no) +
                                  ": expected key=value, got '" + stripped + "'");
            set_checked(trim(stripped.substr(0, eq)), trim(stripped.substr(eq + 1)),
                        path + ":" + std::to_string(line_no));
        }
    }

    void apply_assignments(const std::vector<std::string>& kvs) {
        for (const std::string& kv : kvs) {
            const auto eq = kv.find('=');
            if (eq == std::string::npos)
                throw ConfigError("config: --set expects key=value, got '" + kv + "'");
            set_checked(trim(kv.substr(0, eq)), trim(kv.substr(eq + 1)), "--set");
        }
    }

    void set_checked(const std::string& key, const std::string& value,
                     const std::string& context) {
        auto it = values_.find(key);
        if (it == values_.end())
            throw ConfigError("config: " + context + ": unknown key '" + key + "'");
        it->second = value;
        provided_.insert(key);
    }

    // Overwrites a derived value without marking it user-provided.
    void force(const std::string& key, const std::string& value) { values_.at(key) = value; }

    bool provided(const std::string& key) const { return provided_.count(key) > 0; }

    const std::string& str(const std::string& key) const { return values_.at(key); }

    long integer(const std::string& key) const {
        const std::string& v = str(key);
        try {
            size_t used = 0;
            const long out = std::stol(v, &used);
            if (used != v.size()) throw std::invalid_argument(v);
            return out;
        } catch (const std::exception&) {
            throw ConfigError("config: key '" + key + "' needs an integer, got '" + v + "'");
        }
    }

    double real(const std::string& key) const {
        const std::string& v = str(key);
        try {
            size_t used = 0;
            const double out = std::stod(v, &used);
            if (used != v.size()) throw std::invalid_argument(v);
            return out;
        } catch (const std::exception&) {
            throw ConfigError("config: key '" + key + "' needs a number, got '" + v + "'");
        }
    }

    std::string render(const std::string& command) const {
        std::ostringstream out;
        out << "# vidqa effective configuration (" << command << ")\n";
        for (const auto& [k, v] : values_) out << k << "=" << v << "\n";
        return out.str();
    }

    void write(const std::string& path, const std::string& command) const {
        std::ofstream f(path, std::ios::trunc);
        if (!f) throw DataError("config: cannot write " + path);
        f << render(command);
    }

  private:
    std::map<std::string, std::string> values_;  // known keys with current values
    std::set<std::string> provided_;
};

const std::map<std::string, std::string> kModelDefaults = {
    {"layers", "2"},        {"dim", "64"},          {"heads", "4"},
    {"ffn_hidden", "128"},  {"max_positions", "128"}, {"vocab_size", "512"},
    {"feature_dim", "32"},  {"frames", "6"},        {"latents", "10"},
    {"mapper_layers", "2"}, {"mapper_heads", "4"},  {"mapper", "vpn"},
    {"prompts", "10"},      {"prompt_inner", "0"},  {"adapters", "8"},
    {"reparam", "off"},
};

std::map<std::string, std::string> defaults_for(const std::string& command) {
    std::map<std::string, std::string> d = {{"seed", "0"}, {"data", ""}};
    if (command == "synth-data") {
        d.insert({{"classes", "8"},
                  {"train_items", "64"},
                  {"val_items", "0"},
                  {"eval_items", "64"},
                  {"pretrain_items", "64"},
                  {"frames", "6"},
                  {"feature_dim", "32"},
                  {"signal", "2.0"},
                  {"noise", "0.5"}});
        return d;
    }
    if (command == "gradcheck") {
        return {{"seed", "0"}, {"eps", "1e-5"}, {"tol", "1e-4"}, {"inject_fault", ""}};
    }
    d.insert(kModelDefaults.begin(), kModelDefaults.end());
    d.insert({{"steps", "200"},
              {"epochs", "0"},
              {"batch", "8"},
              {"prompt_lr", "1e-3"},
              {"warmup_frac", "0.1"},
              {"dropout", "0.1"},
              {"mask_p", "0.15"},
              {"template", "1"},
              {"vocab", "auto"},
              {"top_k", "1000"},
              {"regime", "all"},
              {"fraction", "1.0"},
              {"shots", "0"},
              {"tasks", "1"},
              {"split", "test"},
              {"init", ""}});
    // Pretraining trains all new parameters at the lower base rate; the
    // fine-tuning default sits mid-interval of the searched range.
    d["lr"] = command == "pretrain" ? "2e-5" : "3e-5";
    return d;
}

// ---------------------------------------------------------------------------
// Shared plumbing

ModelConfig model_config_from(const FlatConfig& c) {
    ModelConfig m;
    m.lm.layers = static_cast<int>(c.integer("layers"));
    m.lm.dim = static_cast<int>(c.integer("dim"));
    m.lm.heads = static_cast<int>(c.integer("heads"));
    m.lm.ffn_hidden = static_cast<int>(c.integer("ffn_hidden"));
    m.lm.max_positions = static_cast<int>(c.integer("max_positions"));
    m.lm.vocab_size = static_cast<int>(c.integer("vocab_size"));
    m.feature_dim = static_cast<int>(c.integer("feature_dim"));
    m.frames = static_cast<int>(c.integer("frames"));
    m.latents = static_cast<int>(c.integer("latents"));
    m.mapper_layers = static_cast<int>(c.integer("mapper_layers"));
    m.mapper_heads = static_cast<int>(c.integer("mapper_heads"));
    m.mapper = mapper_kind_from(c.str("mapper"));
    m.prompt_count = static_cast<int>(c.integer("prompts"));
    const std::string reparam = c.str("reparam");
    if (reparam != "on" && reparam != "off")
        throw ConfigError("config: reparam must be on or off, got '" + reparam + "'");
    const int inner = static_cast<int>(c.integer("prompt_inner"));
    m.prompt_inner = reparam == "on" ? (inner > 0 ? inner : m.lm.dim) : 0;
    m.adapter_bottleneck = static_cast<int>(c.integer("adapters"));
    m.validate();
    return m;
}

void copy_model_keys_from_checkpoint(FlatConfig& c, const ModelConfig& m) {
    // The checkpoint is authoritative for the architecture; explicit conflicts
    // are configuration errors, silent drift is not allowed.
    const std::map<std::string, std::string> actual = {
        {"layers", std::to_string(m.lm.layers)},
        {"dim", std::to_string(m.lm.dim)},
        {"heads", std::to_string(m.lm.heads)},
        {"ffn_hidden", std::to_string(m.lm.ffn_hidden)},
        {"max_positions", std::to_string(m.lm.max_positions)},
        {"vocab_size", std::to_string(m.lm.vocab_size)},
        {"feature_dim", std::to_string(m.feature_dim)},
        {"frames", std::to_string(m.frames)},
        {"latents", std::to_string(m.latents)},
        {"mapper_layers", std::to_string(m.mapper_layers)},
        {"mapper_heads", std::to_string(m.mapper_heads)},
        {"mapper", to_string(m.mapper)},
        {"prompts", std::to_string(m.prompt_count)},
        {"prompt_inner", std::to_string(m.prompt_inner)},
        {"adapters", std::to_string(m.adapter_bottleneck)},
    };
    for (const auto& [key, value] : actual) {
        if (c.provided(key) && c.str(key) != value)
            throw ConfigError("config: key '" + key + "'=" + c.str(key) +
                              " conflicts with the checkpoint's " + value);
        c.force(key, value);
    }
}

Tokenizer tokenizer_from_manifest(const Manifest& man, int vocab_size) {
    std::vector<std::string> corpus;
    for (const ManifestItem& item : man.items) {
        if (!item.question.empty()) corpus.push_back(item.question);
        if (!item.answer.empty()) corpus.push_back(item.answer);
        if (item.caption) corpus.push_back(*item.caption);
        if (item.subtitles) corpus.push_back(*item.subtitles);
    }
    return Tokenizer::build(corpus, vocab_size);
}

Manifest load_manifest_checked(const std::string& data) {
    if (data.empty()) throw ConfigError("config: a manifest is required (--data)");
    Manifest man = load_manifest(data);
    const std::vector<std::string> missing = missing_features(man);
    if (!missing.empty()) {
        std::string msg = "manifest: " + std::to_string(missing.size()) +
                          " feature file(s) missing:";
        for (size_t i = 0; i < missing.size() && i < 5; ++i) msg += "\n  " + missing[i];
        if (missing.size() > 5) msg += "\n  ...";
        throw DataError(msg);
    }
    return man;
}

void write_metrics(const std::string& path, const TrainResult& r, int task = -1) {
    std::ofstream f(path, task <= 0 ? std::ios::trunc : std::ios::app);
    if (!f) throw DataError("metrics: cannot write " + path);
    for (const StepMetric& m : r.metrics) {
        json line = {{"step", m.step}, {"lr", m.lr}, {"loss", m.loss}};
        if (task >= 0) line["task"] = task;
        f << line.dump() << "\n";
    }
}

long resolve_steps(const FlatConfig& c, size_t n_items) {
    const long epochs = c.integer("epochs");
    const long batch = c.integer("batch");
    if (epochs <= 0) return c.integer("steps");
    if (batch < 1) throw ConfigError("config: batch must be >= 1");
    const long per_epoch = static_cast<long>((n_items + batch - 1) / batch);
    return epochs * std::max<long>(1, per_epoch);
}

TrainSettings train_settings_from(const FlatConfig& c, long steps, bool prompts_only) {
    TrainSettings s;
    s.max_steps = steps;
    s.batch = static_cast<int>(c.integer("batch"));
    s.lr = c.real("lr");
    s.prompt_lr = c.real("prompt_lr");
    s.warmup_frac = c.real("warmup_frac");
    s.dropout = c.real("dropout");
    s.mask_p = c.real("mask_p");
    s.seed = static_cast<uint64_t>(c.integer("seed"));
    s.prompts_only = prompts_only;
    s.validate();
    return s;
}

int template_id_from(const FlatConfig& c) {
    const long id = c.integer("template");
    if (id < 1 || id > 4)
        throw ConfigError("config: template must lie in 1..4, got " + std::to_string(id));
    return static_cast<int>(id);
}

bool regime_prompts_only(const FlatConfig& c) {
    const std::string regime = c.str("regime");
    if (regime == "all") return false;
    if (regime == "prompts") return true;
    throw ConfigError("config: regime must be all or prompts, got '" + regime + "'");
}

void echo_config(const FlatConfig& c, const std::string& command, const std::string& out) {
    std::cout << c.render(command);
    if (!out.empty()) c.write(out + "/config.txt", command);
}

void ensure_out_dir(const std::string& out) {
    if (out.empty()) throw ConfigError("config: an output directory is required (--out)");
    std::filesystem::create_directories(out);
}

// Training answers excluded from the vocabulary leave the training process.
std::vector<TrainItem> in_vocab_items(const std::vector<TrainItem>& items,
                                      const AnswerVocab& vocab) {
    std::vector<TrainItem> kept;
    for (const TrainItem& item : items)
        if (vocab.index_of(item.answer_norm) >= 0) kept.push_back(item);
    if (kept.empty()) throw InputError("train: the vocabulary excludes every training item");
    return kept;
}

std::vector<std::string> train_answers(const Manifest& man) {
    std::vector<std::string> answers;
    for (const ManifestItem& item : man.split("train")) answers.push_back(item.answer);
    if (answers.empty()) throw InputError("train: the train split is empty");
    return answers;
}

// ---------------------------------------------------------------------------
// Commands

int cmd_synth(FlatConfig& cfg, const std::string& out) {
    ensure_out_dir(out);
    SynthTaskSpec spec;
    spec.classes = static_cast<int>(cfg.integer("classes"));
    spec.train_items = static_cast<int>(cfg.integer("train_items"));
    spec.val_items = static_cast<int>(cfg.integer("val_items"));
    spec.eval_items = static_cast<int>(cfg.integer("eval_items"));
    spec.pretrain_items = static_cast<int>(cfg.integer("pretrain_items"));
    spec.frames = static_cast<int>(cfg.integer("frames"));
    spec.feature_dim = static_cast<int>(cfg.integer("feature_dim"));
    spec.signal = cfg.real("signal");
    spec.noise = cfg.real("noise");
    echo_config(cfg, "synth-data", out);

    const std::string manifest_path =
        build_synth_task(out, spec, static_cast<uint64_t>(cfg.integer("seed")));
    const Manifest man = load_manifest(manifest_path);
    json summary = {{"command", "synth-data"},
                    {"manifest", manifest_path},
                    {"items", man.items.size()},
                    {"classes", spec.classes}};
    std::cout << summary.dump() << "\n";
    return 0;
}

int cmd_pretrain(FlatConfig& cfg, const std::string& out) {
    ensure_out_dir(out);
    if (regime_prompts_only(cfg))
        throw ConfigError(
            "config: pretraining optimizes every new parameter; regime=prompts is only "
            "available for fine-tuning");

    const Manifest man = load_manifest_checked(cfg.str("data"));
    const ModelConfig mcfg = model_config_from(cfg);
    const Tokenizer tok = tokenizer_from_manifest(man, mcfg.lm.vocab_size);
    const uint64_t seed = static_cast<uint64_t>(cfg.integer("seed"));

    std::vector<TrainItem> items = prepare_caption_items(man, "pretrain", tok, mcfg);
    if (items.empty()) throw InputError("pretrain: the pretrain split is empty");
    const long steps = resolve_steps(cfg, items.size());
    cfg.force("steps", std::to_string(steps));
    echo_config(cfg, "pretrain", out);

    Rng rng(seed);
    Model model = Model::create(mcfg, rng);
    TrainResult r = train_mlm(model, items, train_settings_from(cfg, steps, false));

    write_metrics(out + "/metrics.jsonl", r);
    const std::string ckpt = out + "/checkpoint.ckpt";
    save_model_checkpoint(ckpt, model, tok, seed);

    json summary = {{"command", "pretrain"},       {"steps", steps},
                    {"items", items.size()},       {"first_loss", r.first_loss},
                    {"final_loss", r.final_loss},  {"tokens_per_sec", r.tokens_per_sec},
                    {"checkpoint", ckpt},          {"metrics", out + "/metrics.jsonl"}};
    std::cout << summary.dump() << "\n";
    return 0;
}

int cmd_finetune(FlatConfig& cfg, const std::string& out) {
    ensure_out_dir(out);
    const std::string init = cfg.str("init");
    if (init.empty()) throw ConfigError("config: fine-tuning starts from a checkpoint (--init)");
    if (cfg.str("reparam") == "on")
        throw ConfigError(
            "config: checkpoint prompts are stored folded; reparametrized training cannot "
            "resume from a fold");

    LoadedModel base = load_model_checkpoint(init);
    copy_model_keys_from_checkpoint(cfg, base.model.config);
    const ModelConfig mcfg = base.model.config;
    const Tokenizer tok = base.tok;

    const Manifest man = load_manifest_checked(cfg.str("data"));
    const bool prompts_only = regime_prompts_only(cfg);
    const int template_id = template_id_from(cfg);
    const int top_k = static_cast<int>(cfg.integer("top_k"));
    const long tasks = cfg.integer("tasks");
    const long shots = cfg.integer("shots");
    const double fraction = cfg.real("fraction");
    const uint64_t seed = static_cast<uint64_t>(cfg.integer("seed"));
    const std::string vocab_key = cfg.str("vocab");

    if (tasks < 1) throw ConfigError("config: tasks must be >= 1");
    if (shots < 0) throw ConfigError("config: shots must be >= 0");
    if (shots > 0 && fraction != 1.0)
        throw ConfigError("config: choose shots or fraction, not both");
    if (tasks > 1 && shots == 0)
        throw ConfigError("config: tasks > 1 is the few-shot protocol and requires shots");
    if (tasks > 1 && vocab_key == "auto")
        throw ConfigError(
            "config: auto vocabulary selection is incompatible with multi-task few-shot "
            "runs; pick topk or mincount");

    const std::vector<std::string> answers = train_answers(man);
    std::vector<TrainItem> qa_all = prepare_qa_items(man, "train", tok, mcfg, template_id);

    // Vocabulary resolution.  `auto` trains one candidate per mode and keeps
    // the one with the better validation accuracy; without a validation split
    // it falls back to the distinct-answer-count heuristic.
    std::vector<VocabMode> candidates;
    json vocab_report;
    if (vocab_key == "auto" && !man.split("val").empty()) {
        candidates = {VocabMode::topk, VocabMode::mincount};
        vocab_report["mode"] = "auto(validation)";
    } else if (vocab_key == "auto") {
        const AnswerVocab probe = build_vocab(answers, tok, VocabMode::auto_select, top_k);
        const VocabMode fallback = probe.distinct_answers > static_cast<size_t>(top_k)
                                       ? VocabMode::topk
                                       : VocabMode::mincount;
        candidates = {fallback};
        vocab_report["mode"] =
            std::string("auto(") + (fallback == VocabMode::topk ? "topk" : "mincount") + ")";
    } else {
        candidates = {vocab_mode_from(vocab_key)};
        vocab_report["mode"] = vocab_key;
    }

    echo_config(cfg, "finetune", out);

    // Few-shot protocol: `tasks` independently seeded subsets, each fine-tuned
    // from the same checkpoint and scored on the eval split.
    if (tasks > 1) {
        const AnswerVocab vocab = build_vocab(answers, tok, candidates[0], top_k);
        const std::vector<TrainItem> usable = in_vocab_items(qa_all, vocab);
        std::vector<EvalItem> eval_items =
            prepare_eval_items(man, cfg.str("split"), tok, mcfg, template_id);
        if (eval_items.empty())
            throw InputError("finetune: split '" + cfg.str("split") + "' is empty");

        std::vector<json> rows;
        std::vector<double> accs;
        for (long t = 0; t < tasks; ++t) {
            LoadedModel run = load_model_checkpoint(init);
            RestrictedHead head = restrict_head(run.model.lm, vocab);
            const std::vector<size_t> pick = sample_fewshot_indices(
                usable.size(), static_cast<size_t>(shots), seed * 1000003ULL + t);
            std::vector<TrainItem> subset;
            for (size_t i : pick) subset.push_back(usable[i]);

            TrainSettings settings = train_settings_from(cfg, cfg.integer("steps"), prompts_only);
            settings.seed = seed * 1000003ULL + t;
            TrainResult r = train_mlm(run.model, subset, settings, &head);
            write_metrics(out + "/metrics.jsonl", r, static_cast<int>(t));
            EvalReport rep = evaluate(run.model, eval_items, head, vocab);
            accs.push_back(rep.accuracy);
            rows.push_back(json{{"task", t},
                                {"accuracy", rep.accuracy},
                                {"n", rep.n},
                                {"final_loss", r.final_loss}});
        }
        double mean = 0.0;
        for (double a : accs) mean += a;
        mean /= static_cast<double>(accs.size());
        double var = 0.0;
        for (double a : accs) var += (a - mean) * (a - mean);
        const double stddev = std::sqrt(var / static_cast<double>(accs.size()));
        json summary = {{"command", "finetune"},    {"protocol", "fewshot"},
                        {"tasks", rows},            {"mean_accuracy", mean},
                        {"std_accuracy", stddev},   {"shots", shots},
                        {"vocab", vocab_report},    {"metrics", out + "/metrics.jsonl"}};
        std::cout << summary.dump() << "\n";
        return 0;
    }

    // Single-task fine-tuning, optionally over a seeded data fraction, with
    // the auto mode racing both vocabulary candidates on validation.
    struct Candidate {
        VocabMode mode;
        AnswerVocab vocab;
        LoadedModel run;
        TrainResult result;
        double val_accuracy = -1.0;
    };
    std::vector<Candidate> runs;
    for (VocabMode mode : candidates) {
        Candidate c{mode, build_vocab(answers, tok, mode, top_k), load_model_checkpoint(init),
                    {}};
        RestrictedHead head = restrict_head(c.run.model.lm, c.vocab);
        std::vector<TrainItem> usable = in_vocab_items(qa_all, c.vocab);
        if (shots > 0) {
            const std::vector<size_t> pick =
                sample_fewshot_indices(usable.size(), static_cast<size_t>(shots), seed);
            std::vector<TrainItem> subset;
            for (size_t i : pick) subset.push_back(usable[i]);
            usable = std::move(subset);
        } else if (fraction != 1.0) {
            const std::vector<size_t> pick =
                sample_fraction_indices(usable.size(), fraction, seed);
            std::vector<TrainItem> subset;
            for (size_t i : pick) subset.push_back(usable[i]);
            usable = std::move(subset);
        }
        const long steps = resolve_steps(cfg, usable.size());
        c.result = train_mlm(c.run.model, usable, train_settings_from(cfg, steps, prompts_only),
                             &head);
        if (candidates.size() > 1) {
            std::vector<EvalItem> val_items =
                prepare_eval_items(man, "val", tok, mcfg, template_id);
            c.val_accuracy = evaluate(c.run.model, val_items, head, c.vocab).accuracy;
        }
        runs.push_back(std::move(c));
    }

    size_t best = 0;
    for (size_t i = 1; i < runs.size(); ++i)
        if (runs[i].val_accuracy > runs[best].val_accuracy) best = i;
    Candidate& winner = runs[best];
    if (runs.size() > 1) {
        vocab_report["candidates"] = json::array();
        for (const Candidate& c : runs)
            vocab_report["candidates"].push_back(
                {{"mode", c.mode == VocabMode::topk ? "topk" : "mincount"},
                 {"val_accuracy", c.val_accuracy},
                 {"vocab_size", c.vocab.answers.size()}});
        vocab_report["chosen"] = winner.mode == VocabMode::topk ? "topk" : "mincount";
    }
    vocab_report["vocab_size"] = winner.vocab.answers.size();
    vocab_report["excluded_items"] = winner.vocab.excluded_items;

    write_metrics(out + "/metrics.jsonl", winner.result);
    const std::string ckpt = out + "/checkpoint.ckpt";
    save_model_checkpoint(ckpt, winner.run.model, tok, winner.run.init_seed);
    json summary = {{"command", "finetune"},
                    {"regime", prompts_only ? "prompts" : "all"},
                    {"first_loss", winner.result.first_loss},
                    {"final_loss", winner.result.final_loss},
                    {"tokens_per_sec", winner.result.tokens_per_sec},
                    {"vocab", vocab_report},
                    {"checkpoint", ckpt},
                    {"metrics", out + "/metrics.jsonl"}};
    if (prompts_only) {
        // The compact artifact of the prompts-only regime: prompts plus a
        // reference to the base checkpoint they extend.
        const std::string prompts_path = out + "/prompts.ckpt";
        save_model_checkpoint(prompts_path, winner.run.model, tok, winner.run.init_seed,
                              /*prompts_only=*/true, init);
        summary["prompts_checkpoint"] = prompts_path;
    }
    std::cout << summary.dump() << "\n";
    return 0;
}

int cmd_evaluate(FlatConfig& cfg, const std::string& out) {
    const std::string init = cfg.str("init");
    if (init.empty()) throw ConfigError("config: evaluation needs a checkpoint (--init)");
    LoadedModel loaded = load_model_checkpoint(init);
    copy_model_keys_from_checkpoint(cfg, loaded.model.config);

    const Manifest man = load_manifest_checked(cfg.str("data"));
    const int template_id = template_id_from(cfg);
    const std::string split = cfg.str("split");
    if (man.split(split).empty()) throw InputError("evaluate: split '" + split + "' is empty");

    const int top_k = static_cast<int>(cfg.integer("top_k"));
    const std::string vocab_key = cfg.str("vocab");
    const VocabMode mode =
        vocab_key == "auto" ? VocabMode::auto_select : vocab_mode_from(vocab_key);
    const AnswerVocab vocab = build_vocab(train_answers(man), loaded.tok, mode, top_k);
    RestrictedHead head = restrict_head(loaded.model.lm, vocab);

    if (!out.empty()) std::filesystem::create_directories(out);
    echo_config(cfg, "evaluate", out);

    std::vector<EvalItem> items =
        prepare_eval_items(man, split, loaded.tok, loaded.model.config, template_id);
    EvalReport rep = evaluate(loaded.model, items, head, vocab);

    json report = {{"command", "evaluate"},
                   {"split", split},
                   {"accuracy", rep.accuracy},
                   {"n", rep.n},
                   {"correct", rep.correct},
                   {"oov_items", rep.oov_items},
                   {"vocab_size", vocab.answers.size()},
                   {"vocab_mode", vocab_key},
                   {"template", template_id},
                   {"checkpoint", init}};
    if (!out.empty()) {
        std::ofstream f(out + "/eval.json", std::ios::trunc);
        f << report.dump(2) << "\n";
    }
    std::cout << report.dump() << "\n";
    return 0;
}

// One finite-difference check per block type; the optional fault name flips
// the sign of that block's reverse-mode gradients so the harness can prove a
// corrupted backward is caught and attributed.
int cmd_gradcheck(FlatConfig& cfg, const std::string& out) {
    const double eps = cfg.real("eps");
    const double tol = cfg.real("tol");
    const std::string fault = cfg.str("inject_fault");
    const uint64_t seed = static_cast<uint64_t>(cfg.integer("seed"));
    echo_config(cfg, "gradcheck", out.empty() ? "" : out);

    auto flip_grads = [](std::vector<Tensor> params) {
        return [params = std::move(params)] {
            for (const Tensor& p : params)
                if (p.has_grad())
                    for (double& g : p.node()->grad) g = -g;
        };
    };

    struct Row {
        std::string name;
        GradCheckReport report;
    };
    std::vector<Row> rows;
    std::set<std::string> known;

    auto check = [&](const std::string& name, const std::function<Tensor()>& loss,
                     const std::vector<Tensor>& params) {
        known.insert(name);
        const bool faulted = fault == name;
        rows.push_back(
            {name, grad_check_params(loss, params, eps, tol,
                                     faulted ? flip_grads(params) : std::function<void()>{})});
    };

    const DropoutCfg no_drop;
    Rng rng(seed + 17);
    const int dim = 12, heads = 2;

    {
        AttentionLayer att = AttentionLayer::create(dim, heads, true, rng);
        Tensor z = Tensor::randn({dim, 5}, rng, 0.5);
        Tensor pk = Tensor::randn({dim, 3}, rng, 0.5, true);
        Tensor pv = Tensor::randn({dim, 3}, rng, 0.5, true);
        Tensor c = Tensor::randn({dim, 5}, rng);
        std::vector<Tensor> params = {att.wq, att.wk, att.wv, att.wo, pk, pv};
        check("prompted-self-attention",
              [&] { return sum(mul(prompted_self_attention(att, z, pk, pv, {}, no_drop), c)); },
              params);
    }
    {
        ResidualAttention ra = ResidualAttention::create(dim, heads, true, rng);
        Tensor z = Tensor::randn({dim, 4}, rng, 0.5);
        Tensor y = Tensor::randn({dim, 6}, rng, 0.5);
        Tensor c = Tensor::randn({dim, 4}, rng);
        std::vector<Tensor> params;
        ra.collect(params);
        check("cross-attention",
              [&] { return sum(mul(cross_attention(ra, z, y, {}, no_drop), c)); }, params);
    }
    {
        Adapter a = Adapter::create(dim, 3, rng);
        // A fresh adapter is the identity (zero outer weights); randomize the
        // outer weights so the inner path carries gradient too.
        std::normal_distribution<double> dist(0.0, 0.3);
        for (size_t i = 0; i < a.w2.size(); ++i) a.w2.data()[i] = dist(rng);
        Tensor z = Tensor::randn({dim, 4}, rng, 0.5);
        Tensor c = Tensor::randn({dim, 4}, rng);
        std::vector<Tensor> params;
        a.collect(params);
        check("adapter", [&] { return sum(mul(adapter_apply(a, z, no_drop), c)); }, params);
    }
    {
        LayerNorm ln = LayerNorm::create(dim, true);
        Tensor z = Tensor::randn({dim, 4}, rng, 0.5);
        Tensor c = Tensor::randn({dim, 4}, rng);
        std::vector<Tensor> params;
        ln.collect(params);
        check("layer-norm", [&] { return sum(mul(ln.forward(z), c)); }, params);
    }
    {
        FeedForward f = FeedForward::create(dim, 2 * dim, true, rng);
        Tensor z = Tensor::randn({dim, 4}, rng, 0.5);
        Tensor c = Tensor::randn({dim, 4}, rng);
        std::vector<Tensor> params;
        f.collect(params);
        check("ffn", [&] { return sum(mul(ffn_forward(f, z), c)); }, params);
    }
    {
        MapperStack stack = MapperStack::create(dim, heads, 2, rng);
        Tensor queries = Tensor::randn({dim, 3}, rng, 0.5, true);
        Tensor y = Tensor::randn({dim, 4}, rng, 0.5);
        Tensor c = Tensor::randn({dim, 3}, rng);
        std::vector<Tensor> params;
        stack.collect(params);
        params.push_back(queries);
        check("mapper-stack",
              [&] { return sum(mul(map_video(stack, queries, y, {}, no_drop), c)); }, params);
    }
    {
        ModelConfig mc;
        mc.lm.layers = 1;
        mc.lm.dim = dim;
        mc.lm.heads = heads;
        mc.lm.ffn_hidden = 2 * dim;
        mc.lm.max_positions = 32;
        mc.lm.vocab_size = 16;
        mc.feature_dim = 6;
        mc.frames = 2;
        mc.latents = 2;
        mc.mapper_layers = 1;
        mc.mapper_heads = heads;
        mc.prompt_count = 2;
        mc.adapter_bottleneck = 3;
        Rng model_rng(seed + 23);
        Model model = Model::create(mc, model_rng);
        std::normal_distribution<double> dist(0.0, 0.3);
        for (LmLayer& layer : model.lm.layers) {
            for (size_t i = 0; i < layer.adapter_att->w2.size(); ++i)
                layer.adapter_att->w2.data()[i] = dist(model_rng);
            for (size_t i = 0; i < layer.adapter_ffn->w2.size(); ++i)
                layer.adapter_ffn->w2.data()[i] = dist(model_rng);
        }
        SampledVideo video;
        video.features = Tensor::randn({mc.feature_dim, mc.frames}, model_rng, 0.5);
        video.valid.assign(mc.frames, 1);
        video.raw_frames = mc.frames;
        const std::vector<int> ids = {Tokenizer::kCls, 7, Tokenizer::kMask, Tokenizer::kSep};
        ParamGroups groups = model.param_groups();
        std::vector<Tensor> params = groups.prompts;
        params.insert(params.end(), groups.rest.begin(), groups.rest.end());
        check("full-model",
              [&] {
                  LmOutput o = model_forward(model, video, ids, {2}, no_drop);
                  return cross_entropy_from_logits(o.logits, {9});
              },
              params);
    }

    if (!fault.empty() && !known.count(fault))
        throw ConfigError("config: inject_fault names an unknown block '" + fault + "'");

    bool all_pass = true;
    json blocks = json::array();
    for (const Row& r : rows) {
        all_pass = all_pass && r.report.pass;
        blocks.push_back({{"block", r.name},
                          {"max_rel_err", r.report.max_rel_err},
                          {"entries", r.report.entries_checked},
                          {"pass", r.report.pass}});
    }
    json report = {{"command", "gradcheck"}, {"tol", tol}, {"blocks", blocks},
                   {"pass", all_pass}};
    if (!out.empty()) {
        std::filesystem::create_directories(out);
        std::ofstream f(out + "/gradcheck.json", std::ios::trunc);
        f << report.dump(2) << "\n";
    }
    std::cout << report.dump() << "\n";
    return all_pass ? 0 : 4;
}

int cmd_inspect(const std::string& init) {
    if (init.empty()) throw ConfigError("config: a checkpoint path is required (--init)");
    Checkpoint ckpt = Checkpoint::load(init);
    json sections = json::array();
    for (const auto& [name, payload] : ckpt.sections())
        sections.push_back({{"name", name},
                            {"bytes", payload.size()},
                            {"sha256", sha256_hex(payload)}});
    json report = {{"command", "inspect-checkpoint"}, {"path", init}, {"sections", sections}};
    if (ckpt.has("config")) {
        json parsed = json::parse(ckpt.get("config"), nullptr, false);
        if (parsed.is_discarded())
            throw DataError("checkpoint: " + init + ": config section is not valid JSON");
        report["config"] = parsed;
    }
    std::cout << report.dump(2) << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// Argument wiring

struct CommandArgs {
    std::string config_path;
    std::vector<std::string> sets;
    std::string out;
    // Typed flags; empty string means "not given".
    std::map<std::string, std::string> flags;
};

void add_key_flag(CLI::App* cmd, CommandArgs& args, const std::string& flag,
                  const std::string& key, const std::string& help) {
    // CLI11 writes into the map slot; empty values are treated as unset.
    cmd->add_option_function<std::string>(
        flag, [&args, key](const std::string& v) { args.flags[key] = v; }, help);
}

FlatConfig resolve_config(const std::string& command, const CommandArgs& args) {
    FlatConfig cfg(defaults_for(command));
    if (!args.config_path.empty()) cfg.load_file(args.config_path);
    cfg.apply_assignments(args.sets);
    for (const auto& [key, value] : args.flags) cfg.set_checked(key, value, "flag");
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"video question answering with a frozen masked language model"};
    app.require_subcommand(1);

    std::map<std::string, CommandArgs> args;
    std::map<std::string, CLI::App*> cmds;

    auto add_common = [&](const std::string& name, const std::string& help) {
        CLI::App* cmd = app.add_subcommand(name, help);
        CommandArgs& a = args[name];
        cmd->add_option("--config", a.config_path, "flat key=value configuration file");
        cmd->add_option("--set", a.sets, "override one key (key=value, repeatable)");
        cmd->add_option("--out", a.out, "output directory");
        add_key_flag(cmd, a, "--seed", "seed", "master seed");
        cmds[name] = cmd;
        return cmd;
    };

    {
        CLI::App* c = add_common("synth-data", "generate a planted-signal toy task");
        CommandArgs& a = args["synth-data"];
        add_key_flag(c, a, "--classes", "classes", "number of answer classes (2..16)");
    }
    {
        CLI::App* c = add_common("pretrain", "masked-language-model pretraining on captions");
        CommandArgs& a = args["pretrain"];
        add_key_flag(c, a, "--data", "data", "manifest path");
        add_key_flag(c, a, "--steps", "steps", "optimizer steps");
        add_key_flag(c, a, "--epochs", "epochs", "epochs (overrides steps when > 0)");
        add_key_flag(c, a, "--batch", "batch", "batch size");
        add_key_flag(c, a, "--regime", "regime", "all|prompts (prompts rejected here)");
        add_key_flag(c, a, "--mapper", "mapper", "vpn|linear");
        add_key_flag(c, a, "--reparam", "reparam", "on|off prompt reparametrization");
    }
    {
        CLI::App* c = add_common("finetune", "fine-tune on question answering");
        CommandArgs& a = args["finetune"];
        add_key_flag(c, a, "--data", "data", "manifest path");
        add_key_flag(c, a, "--init", "init", "checkpoint to start from");
        add_key_flag(c, a, "--steps", "steps", "optimizer steps");
        add_key_flag(c, a, "--batch", "batch", "batch size");
        add_key_flag(c, a, "--regime", "regime", "all|prompts");
        add_key_flag(c, a, "--template", "template", "input template 1..4");
        add_key_flag(c, a, "--vocab", "vocab", "topk|mincount|auto");
        add_key_flag(c, a, "--fraction", "fraction", "train-data fraction (0,1]");
        add_key_flag(c, a, "--shots", "shots", "few-shot examples per task");
        add_key_flag(c, a, "--tasks", "tasks", "few-shot task count");
        add_key_flag(c, a, "--reparam", "reparam", "on|off (must be off for checkpoints)");
        add_key_flag(c, a, "--split", "split", "few-shot evaluation split");
    }
    {
        CLI::App* c = add_common("evaluate", "top-1 accuracy under the answer vocabulary");
        CommandArgs& a = args["evaluate"];
        add_key_flag(c, a, "--data", "data", "manifest path");
        add_key_flag(c, a, "--init", "init", "checkpoint to evaluate");
        add_key_flag(c, a, "--split", "split", "manifest split to score");
        add_key_flag(c, a, "--template", "template", "input template 1..4");
        add_key_flag(c, a, "--vocab", "vocab", "topk|mincount|auto");
    }
    {
        CLI::App* c = add_common("gradcheck", "finite-difference checks per block");
        CommandArgs& a = args["gradcheck"];
        add_key_flag(c, a, "--tol", "tol", "pass threshold on max relative error");
        add_key_flag(c, a, "--inject-fault", "inject_fault",
                     "flip a block's gradients to prove detection (testing hook)");
    }
    std::string inspect_init;
    {
        CLI::App* c = app.add_subcommand("inspect-checkpoint", "list checkpoint sections");
        c->add_option("--init", inspect_init, "checkpoint path");
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    const std::string name = app.get_subcommands().front()->get_name();
    try {
        if (name == "inspect-checkpoint") return cmd_inspect(inspect_init);
        FlatConfig cfg = resolve_config(name, args[name]);
        const std::string& out = args[name].out;
        if (name == "synth-data") return cmd_synth(cfg, out);
        if (name == "pretrain") return cmd_pretrain(cfg, out);
        if (name == "finetune") return cmd_finetune(cfg, out);
        if (name == "evaluate") return cmd_evaluate(cfg, out);
        if (name == "gradcheck") return cmd_gradcheck(cfg, out);
        throw Error("unreachable command " + name);
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const DataError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const NumericError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
