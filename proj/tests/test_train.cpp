#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "vidqa/checkpoint.hpp"
#include "vidqa/data.hpp"
#include "vidqa/train.hpp"

using namespace vidqa;

namespace {

ModelConfig toy_model_config() {
    ModelConfig cfg;
    cfg.lm.layers = 2;
    cfg.lm.dim = 32;
    cfg.lm.heads = 2;
    cfg.lm.ffn_hidden = 64;
    cfg.lm.max_positions = 64;
    cfg.lm.vocab_size = 64;
    cfg.feature_dim = 16;
    cfg.frames = 4;
    cfg.latents = 4;
    cfg.mapper_layers = 1;
    cfg.mapper_heads = 2;
    cfg.prompt_count = 4;
    cfg.adapter_bottleneck = 4;
    return cfg;
}

// One synthetic task shared by the training tests, built once.
struct TaskFixture {
    std::string dir;
    Manifest manifest;
    Tokenizer tok = Tokenizer::from_words(Tokenizer::special_tokens());

    TaskFixture() {
        dir = (std::filesystem::temp_directory_path() / "vidqa_train_task").string();
        std::filesystem::remove_all(dir);
        SynthTaskSpec spec;
        spec.classes = 4;
        spec.train_items = 16;
        spec.eval_items = 16;
        spec.pretrain_items = 16;
        spec.frames = 4;
        spec.feature_dim = 16;
        spec.signal = 3.0;
        spec.noise = 0.25;
        manifest = load_manifest(build_synth_task(dir, spec, 77));

        std::vector<std::string> corpus;
        for (const ManifestItem& item : manifest.items) {
            if (item.caption) corpus.push_back(*item.caption);
            if (!item.question.empty()) corpus.push_back(item.question);
            if (!item.answer.empty()) corpus.push_back(item.answer);
        }
        tok = Tokenizer::build(corpus, 64);
    }
};

const TaskFixture& task() {
    static TaskFixture fixture;
    return fixture;
}

}  // namespace

TEST_CASE("learning-rate schedule ramps and decays linearly", "[train]") {
    REQUIRE(lr_at(0, 100, 2.0, 0.1) == 0.0);
    REQUIRE(lr_at(10, 100, 2.0, 0.1) == 2.0);               // warmup end: peak
    REQUIRE(lr_at(5, 100, 2.0, 0.1) == 1.0);                // mid-warmup
    REQUIRE(lr_at(100, 100, 2.0, 0.1) == 0.0);              // decay end
    REQUIRE(lr_at(55, 100, 2.0, 0.1) == Catch::Approx(1.0)); // mid-decay
    REQUIRE(lr_at(0, 100, 2.0, 0.0) == 2.0);                // no warmup: starts at peak

    // Continuity at the warmup boundary and a single peak.
    const double before = lr_at(9, 100, 2.0, 0.1);
    const double at_peak = lr_at(10, 100, 2.0, 0.1);
    const double after = lr_at(11, 100, 2.0, 0.1);
    REQUIRE(before < at_peak);
    REQUIRE(after < at_peak);
    REQUIRE(at_peak - before == Catch::Approx(0.2));
    REQUIRE(at_peak - after == Catch::Approx(2.0 / 90.0));

    REQUIRE_THROWS_AS(lr_at(101, 100, 2.0, 0.1), ConfigError);
    REQUIRE_THROWS_AS(lr_at(-1, 100, 2.0, 0.1), ConfigError);
    REQUIRE_THROWS_AS(lr_at(0, 100, 2.0, 1.0), ConfigError);
    REQUIRE_THROWS_AS(lr_at(0, 100, 0.0, 0.1), ConfigError);
}

TEST_CASE("adam follows the hand-computed update", "[train]") {
    // With a constant gradient g, bias correction makes every step's update
    // exactly lr * g / (|g| + eps).
    Tensor p = Tensor::from_data({2}, {1.0, -2.0}, true);
    Tensor c = Tensor::from_data({2}, {3.0, -0.5});
    Adam adam({p}, {});

    auto run_step = [&](double lr) {
        Tape tape;
        Tensor loss;
        {
            TapeScope scope(tape);
            loss = sum(mul(p, c));
        }
        tape.backward(loss);
        adam.step(lr, 0.0);
    };

    const double eps = 1e-8;
    const double u0 = 0.1 * (3.0 / (3.0 + eps));
    const double u1 = 0.1 * (-0.5 / (0.5 + eps));
    run_step(0.1);
    REQUIRE(p.data()[0] == Catch::Approx(1.0 - u0).epsilon(1e-12));
    REQUIRE(p.data()[1] == Catch::Approx(-2.0 - u1).epsilon(1e-12));
    run_step(0.1);
    REQUIRE(p.data()[0] == Catch::Approx(1.0 - 2 * u0).epsilon(1e-12));
    REQUIRE(p.data()[1] == Catch::Approx(-2.0 - 2 * u1).epsilon(1e-12));
    REQUIRE(adam.steps_taken() == 2);

    // Gradients are consumed by the step.
    REQUIRE_FALSE(p.has_grad());

    // Frozen parameters are rejected outright.
    Tensor frozen = Tensor::zeros({2});
    REQUIRE_THROWS_AS(Adam({frozen}, {}), ConfigError);
}

TEST_CASE("answer scoring averages token logits", "[train]") {
    RestrictedHead head;
    head.row_token = {10, 11, 12, 13};
    head.answer_rows = {{0}, {1}, {2, 3}};

    // The multi-token answer averages 1.0 and 3.0 to 2.0.
    Tensor logits = Tensor::from_data({4, 1}, {0.5, 0.2, 1.0, 3.0});
    std::vector<ScoredAnswer> ranked = score_answers(logits, head);
    REQUIRE(ranked.size() == 3);
    REQUIRE(ranked[0].index == 2);
    REQUIRE(ranked[0].score == 2.0);
    REQUIRE(ranked[1].index == 0);
    REQUIRE(ranked[1].score == 0.5);
    REQUIRE(ranked[2].index == 1);

    // Exact ties resolve to the earlier vocabulary index.
    Tensor tied = Tensor::from_data({4, 1}, {0.7, 0.7, 0.0, 0.0});
    REQUIRE(score_answers(tied, head)[0].index == 0);

    // Brute-force oracle on random logits.
    Rng rng(5);
    for (int round = 0; round < 20; ++round) {
        Tensor l = Tensor::randn({4, 1}, rng);
        std::vector<double> brute = {l.at(0, 0), l.at(1, 0), (l.at(2, 0) + l.at(3, 0)) / 2.0};
        int best = 0;
        for (int a = 1; a < 3; ++a)
            if (brute[a] > brute[best]) best = a;
        REQUIRE(score_answers(l, head)[0].index == best);
    }

    REQUIRE_THROWS_AS(score_answers(Tensor::zeros({4, 2}), head), ShapeError);
    REQUIRE_THROWS_AS(score_answers(Tensor::zeros({3, 1}), head), ShapeError);
}

TEST_CASE("few-shot sampling is seeded and bounded", "[train]") {
    std::vector<size_t> all = sample_fraction_indices(10, 1.0, 3);
    REQUIRE(all.size() == 10);

    std::vector<size_t> a = sample_fewshot_indices(1000, 32, 1);
    std::vector<size_t> b = sample_fewshot_indices(1000, 32, 1);
    std::vector<size_t> c = sample_fewshot_indices(1000, 32, 2);
    REQUIRE(a == b);
    REQUIRE(a != c);
    REQUIRE(a.size() == 32);
    REQUIRE(std::set<size_t>(a.begin(), a.end()).size() == 32);  // no replacement
    for (size_t i : a) REQUIRE(i < 1000);

    REQUIRE(sample_fraction_indices(1000, 0.01, 4).size() == 10);
    REQUIRE_THROWS_AS(sample_fewshot_indices(10, 11, 0), InputError);
    REQUIRE_THROWS_AS(sample_fraction_indices(10, 0.0, 0), ConfigError);
    REQUIRE_THROWS_AS(sample_fraction_indices(10, 1.5, 0), ConfigError);
}

TEST_CASE("manifest round trip and error reporting", "[train]") {
    const std::string dir =
        (std::filesystem::temp_directory_path() / "vidqa_manifest_test").string();
    std::filesystem::create_directories(dir);
    const std::string path = dir + "/m.jsonl";

    std::vector<ManifestItem> items(2);
    items[0].id = "a";
    items[0].feature_path = "a.vff";
    items[0].split = "train";
    items[0].question = "what is it";
    items[0].answer = "dog";
    items[1].id = "b";
    items[1].feature_path = "b.vff";
    items[1].split = "test";
    items[1].question = "what is it";
    items[1].answer = "cat";
    items[1].subtitles = "he said hi";
    save_manifest(path, items);

    Manifest m = load_manifest(path);
    REQUIRE(m.items.size() == 2);
    REQUIRE(m.items[1].subtitles.value() == "he said hi");
    REQUIRE(m.split("train").size() == 1);
    REQUIRE(m.resolve(m.items[0]) == dir + "/a.vff");

    // Neither feature file exists yet.
    REQUIRE(missing_features(m).size() == 2);

    // Broken JSON carries the line number.
    std::ofstream bad(path);
    bad << R"({"id": "a", "feature_path": "a.vff", "split": "train"})" << "\n";
    bad << "{not json}\n";
    bad.close();
    try {
        load_manifest(path);
        FAIL("expected DataError");
    } catch (const DataError& e) {
        REQUIRE(std::string(e.what()).find(":2:") != std::string::npos);
    }

    std::ofstream missing_field(path);
    missing_field << R"({"id": "a", "split": "train"})" << "\n";
    missing_field.close();
    REQUIRE_THROWS_AS(load_manifest(path), DataError);
    std::filesystem::remove_all(dir);
}

TEST_CASE("synthetic task is balanced and loadable", "[train]") {
    const Manifest& m = task().manifest;
    REQUIRE(m.split("pretrain").size() == 16);
    REQUIRE(m.split("train").size() == 16);
    REQUIRE(m.split("test").size() == 16);
    REQUIRE(missing_features(m).empty());

    std::map<std::string, int> counts;
    for (const ManifestItem& item : m.split("train")) ++counts[item.answer];
    REQUIRE(counts.size() == 4);
    for (const auto& [word, n] : counts) REQUIRE(n == 4);

    for (const ManifestItem& item : m.split("pretrain")) {
        REQUIRE(item.caption.has_value());
        REQUIRE(item.question.empty());
    }
}

TEST_CASE("parameter groups are disjoint and complete", "[train]") {
    Rng rng(13);
    ModelConfig cfg = toy_model_config();
    Model model = Model::create(cfg, rng);
    ParamGroups groups = model.param_groups();

    for (const Tensor& t : groups.frozen) REQUIRE_FALSE(t.requires_grad());
    for (const Tensor& t : groups.prompts) REQUIRE(t.requires_grad());
    for (const Tensor& t : groups.rest) REQUIRE(t.requires_grad());

    std::set<const double*> seen;
    size_t total = 0;
    for (const std::vector<Tensor>* g : {&groups.frozen, &groups.prompts, &groups.rest})
        for (const Tensor& t : *g) {
            REQUIRE(seen.insert(t.data()).second);  // disjoint storage
            ++total;
        }
    REQUIRE(total == groups.frozen.size() + groups.prompts.size() + groups.rest.size());

    // Closed-form accounting matches the real tensors.
    size_t prompt_elems = 0, rest_elems = 0;
    for (const Tensor& t : groups.prompts) prompt_elems += t.size();
    for (const Tensor& t : groups.rest) rest_elems += t.size();
    REQUIRE(prompt_elems == prompt_group_param_count(cfg));
    REQUIRE(rest_elems == rest_group_param_count(cfg));
    REQUIRE(prompt_elems + rest_elems == trainable_param_count(cfg));

    // The linear-mapper variant has no latent queries: prompts group is the
    // text prompt matrix alone.
    ModelConfig lin = cfg;
    lin.mapper = MapperKind::linear;
    Rng rng2(13);
    Model linear_model = Model::create(lin, rng2);
    ParamGroups lg = linear_model.param_groups();
    REQUIRE(lg.prompts.size() == 1);
    size_t lin_prompt_elems = 0;
    for (const Tensor& t : lg.prompts) lin_prompt_elems += t.size();
    REQUIRE(lin_prompt_elems == prompt_group_param_count(lin));
}

TEST_CASE("full-scale accounting stays in the expected band", "[train]") {
    // Pure arithmetic; nothing is allocated at this scale.
    ModelConfig full;
    full.lm.layers = 24;
    full.lm.dim = 1536;
    full.lm.heads = 24;
    full.lm.ffn_hidden = 6144;
    full.lm.max_positions = 512;
    full.lm.vocab_size = 512;
    full.feature_dim = 768;
    full.frames = 10;
    full.latents = 10;
    full.mapper_layers = 2;
    full.mapper_heads = 24;
    full.prompt_count = 10;
    full.adapter_bottleneck = 192;

    REQUIRE(prompt_group_param_count(full) == 752640);
    const double fraction = static_cast<double>(prompt_group_param_count(full)) /
                            static_cast<double>(trainable_param_count(full));
    REQUIRE(fraction > 0.005);
    REQUIRE(fraction < 0.015);
}

TEST_CASE("pretraining and fine-tuning reduce the loss", "[train]") {
    Rng rng(101);
    ModelConfig cfg = toy_model_config();
    Model model = Model::create(cfg, rng);

    std::vector<TrainItem> captions =
        prepare_caption_items(task().manifest, "pretrain", task().tok, cfg);
    REQUIRE(captions.size() == 16);

    TrainSettings pre;
    pre.max_steps = 30;
    pre.batch = 4;
    pre.lr = 3e-4;
    pre.prompt_lr = 3e-3;
    pre.seed = 1;
    TrainResult pre_result = train_mlm(model, captions, pre);
    REQUIRE(pre_result.metrics.size() == 30);
    REQUIRE(pre_result.metrics.front().step == 1);
    REQUIRE(pre_result.metrics.back().step == 30);
    REQUIRE(pre_result.final_loss < pre_result.first_loss);
    REQUIRE(pre_result.tokens_per_sec > 0.0);

    // Fine-tuning against the restricted head.
    std::vector<std::string> answers;
    for (const ManifestItem& item : task().manifest.split("train")) answers.push_back(item.answer);
    AnswerVocab vocab = build_vocab(answers, task().tok, VocabMode::mincount);
    REQUIRE(vocab.answers.size() == 4);
    RestrictedHead head = restrict_head(model.lm, vocab);

    std::vector<TrainItem> qa = prepare_qa_items(task().manifest, "train", task().tok, cfg, 4);
    TrainSettings fine;
    fine.max_steps = 30;
    fine.batch = 4;
    fine.lr = 1e-3;
    fine.prompt_lr = 1e-2;
    fine.seed = 2;
    TrainResult fine_result = train_mlm(model, qa, fine, &head);
    REQUIRE(fine_result.final_loss < fine_result.first_loss);

    // Evaluation runs and reports coherent counts.
    std::vector<EvalItem> eval_items =
        prepare_eval_items(task().manifest, "test", task().tok, cfg, 4);
    EvalReport report = evaluate(model, eval_items, head, vocab);
    REQUIRE(report.n == 16);
    REQUIRE(report.correct <= report.n);
    REQUIRE(report.accuracy == Catch::Approx(static_cast<double>(report.correct) / 16.0));
}

TEST_CASE("regimes touch exactly their parameter groups", "[train]") {
    Rng rng(103);
    ModelConfig cfg = toy_model_config();
    Model model = Model::create(cfg, rng);

    std::vector<std::string> answers;
    for (const ManifestItem& item : task().manifest.split("train")) answers.push_back(item.answer);
    AnswerVocab vocab = build_vocab(answers, task().tok, VocabMode::mincount);
    RestrictedHead head = restrict_head(model.lm, vocab);
    std::vector<TrainItem> qa = prepare_qa_items(task().manifest, "train", task().tok, cfg, 4);

    ParamGroups groups = model.param_groups();
    const std::string frozen_before = hash_tensors(groups.frozen);
    const std::string rest_before = hash_tensors(groups.rest);
    const std::string prompts_before = hash_tensors(groups.prompts);

    TrainSettings prompts_only;
    prompts_only.max_steps = 10;
    prompts_only.batch = 4;
    prompts_only.seed = 3;
    prompts_only.prompts_only = true;
    train_mlm(model, qa, prompts_only, &head);

    REQUIRE(hash_tensors(groups.frozen) == frozen_before);
    REQUIRE(hash_tensors(groups.rest) == rest_before);        // bitwise untouched
    REQUIRE(hash_tensors(groups.prompts) != prompts_before);  // actually trained

    // The all-trainable regime moves the rest group but never the backbone.
    TrainSettings all;
    all.max_steps = 10;
    all.batch = 4;
    all.seed = 4;
    train_mlm(model, qa, all, &head);
    REQUIRE(hash_tensors(groups.frozen) == frozen_before);
    REQUIRE(hash_tensors(groups.rest) != rest_before);
}

TEST_CASE("non-finite loss aborts with diagnostics", "[train]") {
    Rng rng(107);
    ModelConfig cfg = toy_model_config();
    Model model = Model::create(cfg, rng);
    model.projector.weight.data()[0] = std::numeric_limits<double>::quiet_NaN();

    std::vector<TrainItem> captions =
        prepare_caption_items(task().manifest, "pretrain", task().tok, cfg);
    TrainSettings settings;
    settings.max_steps = 5;
    settings.batch = 2;
    try {
        train_mlm(model, captions, settings);
        FAIL("expected NumericError");
    } catch (const NumericError& e) {
        REQUIRE(std::string(e.what()).find("step 1") != std::string::npos);
    }
}

TEST_CASE("training is deterministic in config and seed", "[train]") {
    ModelConfig cfg = toy_model_config();
    std::vector<TrainItem> captions =
        prepare_caption_items(task().manifest, "pretrain", task().tok, cfg);
    TrainSettings settings;
    settings.max_steps = 12;
    settings.batch = 4;
    settings.seed = 9;

    auto run = [&] {
        Rng rng(55);
        Model model = Model::create(cfg, rng);
        TrainResult r = train_mlm(model, captions, settings);
        ParamGroups g = model.param_groups();
        std::vector<Tensor> all = g.prompts;
        all.insert(all.end(), g.rest.begin(), g.rest.end());
        return std::pair{r, hash_tensors(all)};
    };
    auto [r1, h1] = run();
    auto [r2, h2] = run();
    REQUIRE(h1 == h2);
    REQUIRE(r1.metrics.size() == r2.metrics.size());
    for (size_t i = 0; i < r1.metrics.size(); ++i) {
        REQUIRE(r1.metrics[i].loss == r2.metrics[i].loss);  // bitwise
        REQUIRE(r1.metrics[i].lr == r2.metrics[i].lr);
    }
}

TEST_CASE("evaluation counts out-of-vocabulary answers as incorrect", "[train]") {
    Rng rng(109);
    ModelConfig cfg = toy_model_config();
    Model model = Model::create(cfg, rng);

    std::vector<std::string> answers;
    for (const ManifestItem& item : task().manifest.split("train")) answers.push_back(item.answer);
    AnswerVocab vocab = build_vocab(answers, task().tok, VocabMode::mincount);
    RestrictedHead head = restrict_head(model.lm, vocab);

    std::vector<EvalItem> items = prepare_eval_items(task().manifest, "test", task().tok, cfg, 4);
    for (EvalItem& item : items) item.answer_norm = "zebra";  // all OOV now
    EvalReport report = evaluate(model, items, head, vocab);
    REQUIRE(report.oov_items == items.size());
    REQUIRE(report.correct == 0);
    REQUIRE(report.accuracy == 0.0);
}

TEST_CASE("checkpoints restore the model bitwise", "[train]") {
    const std::string dir =
        (std::filesystem::temp_directory_path() / "vidqa_ckpt_test").string();
    std::filesystem::create_directories(dir);
    const std::string path = dir + "/model.ckpt";

    ModelConfig cfg = toy_model_config();
    Rng rng(301);
    Model model = Model::create(cfg, rng);

    // Train a little so nothing is at its initial value.
    std::vector<TrainItem> captions =
        prepare_caption_items(task().manifest, "pretrain", task().tok, cfg);
    TrainSettings settings;
    settings.max_steps = 8;
    settings.batch = 4;
    settings.seed = 11;
    train_mlm(model, captions, settings);

    save_model_checkpoint(path, model, task().tok, 301);
    LoadedModel loaded = load_model_checkpoint(path);
    REQUIRE(loaded.tok.words() == task().tok.words());
    REQUIRE(loaded.init_seed == 301);

    // Same input, bitwise-identical forward pass.
    std::vector<EvalItem> items = prepare_eval_items(task().manifest, "test", task().tok, cfg, 4);
    DropoutCfg no_drop;
    auto forward = [&](const Model& m) {
        VideoTokens vid = encode_video(m, items[0].video, no_drop);
        Tensor text = embed_text(m.lm, items[0].ids);
        return lm_encode(m.lm, vid.tokens, text, m.prompts.materialize(no_drop), no_drop,
                         vid.keep);
    };
    REQUIRE(exactly_equal(forward(model), forward(loaded.model)));

    // Frozen payloads agree bitwise too.
    std::vector<Tensor> frozen_a, frozen_b;
    model.lm.collect_frozen(frozen_a);
    loaded.model.lm.collect_frozen(frozen_b);
    REQUIRE(hash_tensors(frozen_a) == hash_tensors(frozen_b));

    std::filesystem::remove_all(dir);
}

TEST_CASE("prompts-only checkpoints are small and faithful", "[train]") {
    const std::string dir =
        (std::filesystem::temp_directory_path() / "vidqa_ckpt_prompts").string();
    std::filesystem::create_directories(dir);
    const std::string path = dir + "/prompts.ckpt";

    ModelConfig cfg = toy_model_config();
    const uint64_t seed = 401;
    Rng rng(seed);
    Model model = Model::create(cfg, rng);

    // Prompts-only training: the rest group never moves, so a prompts-only
    // checkpoint plus the init seed reconstructs the model exactly.
    std::vector<std::string> answers;
    for (const ManifestItem& item : task().manifest.split("train")) answers.push_back(item.answer);
    AnswerVocab vocab = build_vocab(answers, task().tok, VocabMode::mincount);
    RestrictedHead head = restrict_head(model.lm, vocab);
    std::vector<TrainItem> qa = prepare_qa_items(task().manifest, "train", task().tok, cfg, 4);
    TrainSettings settings;
    settings.max_steps = 8;
    settings.batch = 4;
    settings.seed = 21;
    settings.prompts_only = true;
    train_mlm(model, qa, settings, &head);

    save_model_checkpoint(path, model, task().tok, seed, /*prompts_only=*/true);

    // Size bound: prompt parameters at 8 bytes each plus a modest header.
    const size_t bytes = std::filesystem::file_size(path);
    REQUIRE(bytes <= prompt_group_param_count(cfg) * 8 + 4096);

    Checkpoint raw = Checkpoint::load(path);
    REQUIRE(raw.has("prompts"));
    REQUIRE_FALSE(raw.has("rest"));
    REQUIRE_FALSE(raw.has("frozen"));

    LoadedModel loaded = load_model_checkpoint(path);
    REQUIRE(loaded.prompts_only);

    std::vector<EvalItem> items = prepare_eval_items(task().manifest, "test", task().tok, cfg, 4);
    DropoutCfg no_drop;
    auto forward = [&](const Model& m) {
        VideoTokens vid = encode_video(m, items[1].video, no_drop);
        Tensor text = embed_text(m.lm, items[1].ids);
        return lm_encode(m.lm, vid.tokens, text, m.prompts.materialize(no_drop), no_drop,
                         vid.keep);
    };
    REQUIRE(exactly_equal(forward(model), forward(loaded.model)));
    std::filesystem::remove_all(dir);
}

TEST_CASE("tampered checkpoints fail cleanly", "[train]") {
    const std::string dir =
        (std::filesystem::temp_directory_path() / "vidqa_ckpt_tamper").string();
    std::filesystem::create_directories(dir);
    const std::string path = dir + "/t.ckpt";

    ModelConfig cfg = toy_model_config();
    Rng rng(501);
    Model model = Model::create(cfg, rng);
    save_model_checkpoint(path, model, task().tok, 501);

    std::ifstream in(path, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    in.close();

    auto write_variant = [&](std::string data) {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        out.write(data.data(), static_cast<std::streamsize>(data.size()));
    };

    // Bad magic.
    {
        std::string v = bytes;
        v[0] = 'X';
        write_variant(v);
        REQUIRE_THROWS_AS(Checkpoint::load(path), DataError);
    }
    // Truncation mid-payload.
    {
        write_variant(bytes.substr(0, bytes.size() / 2));
        REQUIRE_THROWS_AS(load_model_checkpoint(path), DataError);
    }
    // Corrupted section length: blow up the first section's payload length.
    {
        std::string v = bytes;
        // magic(4) version(4) count(4) name_len(4) name(6: "config") -> length at 22
        const size_t len_offset = 4 + 4 + 4 + 4 + 6;
        v[len_offset + 5] = static_cast<char>(0xff);
        write_variant(v);
        REQUIRE_THROWS_AS(Checkpoint::load(path), DataError);
    }
    std::filesystem::remove_all(dir);
}
