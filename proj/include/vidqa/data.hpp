#pragma once

// Dataset plumbing: the JSON-lines manifest format tying questions/answers/
// captions to feature files, and a deterministic synthetic-task generator
// used by tests and the synth-data command.

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "vidqa/error.hpp"
#include "vidqa/video.hpp"

namespace vidqa {

struct ManifestItem {
    std::string id;
    std::string feature_path;  // absolute, or relative to the manifest's directory
    std::string split;         // pretrain / train / val / test
    std::string question;      // QA items
    std::string answer;        // QA items
    std::optional<std::string> subtitles;
    std::optional<std::string> caption;  // pretraining text
};

struct Manifest {
    std::string dir;  // directory of the manifest file, for relative paths
    std::vector<ManifestItem> items;

    std::string resolve(const ManifestItem& item) const {
        std::filesystem::path p(item.feature_path);
        if (p.is_absolute()) return p.string();
        return (std::filesystem::path(dir) / p).string();
    }

    std::vector<ManifestItem> split(const std::string& name) const {
        std::vector<ManifestItem> out;
        for (const ManifestItem& item : items)
            if (item.split == name) out.push_back(item);
        return out;
    }
};

inline Manifest load_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("manifest: cannot open " + path);
    Manifest m;
    m.dir = std::filesystem::path(path).parent_path().string();
    if (m.dir.empty()) m.dir = ".";

    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        auto fail = [&](const std::string& what) {
            throw DataError("manifest: " + path + ":" + std::to_string(line_no) + ": " + what);
        };
        nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded()) fail("invalid JSON");
        if (!j.is_object()) fail("line is not a JSON object");

        ManifestItem item;
        for (const char* key : {"id", "feature_path", "split"}) {
            if (!j.contains(key) || !j[key].is_string() || j[key].get<std::string>().empty())
                fail(std::string("missing or non-string field '") + key + "'");
        }
        item.id = j["id"];
        item.feature_path = j["feature_path"];
        item.split = j["split"];
        for (const char* key : {"question", "answer", "subtitles", "caption"})
            if (j.contains(key) && !j[key].is_string())
                fail(std::string("field '") + key + "' must be a string");
        if (j.contains("question")) item.question = j["question"];
        if (j.contains("answer")) item.answer = j["answer"];
        if (j.contains("subtitles")) item.subtitles = j["subtitles"].get<std::string>();
        if (j.contains("caption")) item.caption = j["caption"].get<std::string>();
        m.items.push_back(std::move(item));
    }
    if (m.items.empty()) throw DataError("manifest: " + path + " holds no items");
    return m;
}

inline void save_manifest(const std::string& path, const std::vector<ManifestItem>& items) {
    std::ofstream out(path);
    if (!out) throw DataError("manifest: cannot write " + path);
    for (const ManifestItem& item : items) {
        nlohmann::json j;
        j["id"] = item.id;
        j["feature_path"] = item.feature_path;
        j["split"] = item.split;
        if (!item.question.empty()) j["question"] = item.question;
        if (!item.answer.empty()) j["answer"] = item.answer;
        if (item.subtitles) j["subtitles"] = *item.subtitles;
        if (item.caption) j["caption"] = *item.caption;
        out << j.dump() << '\n';
    }
}

// Paths named by the manifest that do not exist on disk.
inline std::vector<std::string> missing_features(const Manifest& m) {
    std::vector<std::string> missing;
    for (const ManifestItem& item : m.items) {
        const std::string p = m.resolve(item);
        if (!std::filesystem::exists(p)) missing.push_back(p);
    }
    return missing;
}

// ---------------------------------------------------------------------------
// Synthetic task

// A fully synthetic video-QA task: every item's features carry a planted
// class signal, the answer names the class.  Deterministic in `seed`.
struct SynthTaskSpec {
    int classes = 8;
    int train_items = 64;
    int eval_items = 64;
    int val_items = 0;
    int pretrain_items = 0;
    uint32_t frames = 6;
    uint32_t feature_dim = 32;
    double signal = 2.0;
    double noise = 0.5;
};

inline const std::vector<std::string>& synth_class_words() {
    static const std::vector<std::string> words = {"apple", "ball", "cat",  "dog",  "egg",  "fish",
                                                   "goat",  "hat",  "ink",  "jar",  "kite", "lamp",
                                                   "moon",  "nest", "owl",  "pear"};
    return words;
}

// Writes feature files plus manifest.jsonl under `dir`; returns the manifest
// path.  Items cycle through the classes so every split is class-balanced.
inline std::string build_synth_task(const std::string& dir, const SynthTaskSpec& spec,
                                    uint64_t seed) {
    if (spec.classes < 2 || spec.classes > static_cast<int>(synth_class_words().size()))
        throw ConfigError("synth task: classes must lie in 2.." +
                          std::to_string(synth_class_words().size()));
    if (spec.train_items < 1 || spec.eval_items < 1)
        throw ConfigError("synth task: train and eval splits must be nonempty");
    std::filesystem::create_directories(std::filesystem::path(dir) / "features");

    std::vector<ManifestItem> items;
    uint64_t file_index = 0;
    auto emit = [&](const std::string& split, int count, bool caption_item) {
        for (int i = 0; i < count; ++i, ++file_index) {
            const int cls = i % spec.classes;
            const std::string word = synth_class_words()[cls];
            const std::string rel =
                "features/" + split + "_" + std::to_string(i) + ".vff";

            SynthSpec feat;
            feat.frames = spec.frames;
            feat.dim = spec.feature_dim;
            feat.num_classes = spec.classes;
            feat.class_id = cls;
            feat.signal = spec.signal;
            feat.noise = spec.noise;
            write_vff1((std::filesystem::path(dir) / rel).string(),
                       synth_features(feat, seed * 1000003ULL + file_index));

            ManifestItem item;
            item.id = split + "-" + std::to_string(i);
            item.feature_path = rel;
            item.split = split;
            if (caption_item) {
                item.caption = "the video shows a " + word;
            } else {
                item.question = "what is shown in the video";
                item.answer = word;
            }
            items.push_back(std::move(item));
        }
    };
    if (spec.pretrain_items > 0) emit("pretrain", spec.pretrain_items, true);
    emit("train", spec.train_items, false);
    if (spec.val_items > 0) emit("val", spec.val_items, false);
    emit("test", spec.eval_items, false);

    const std::string manifest_path = (std::filesystem::path(dir) / "manifest.jsonl").string();
    save_manifest(manifest_path, items);
    return manifest_path;
}

}  // namespace vidqa
