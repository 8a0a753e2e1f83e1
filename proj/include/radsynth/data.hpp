#pragma once

// Dataset model: vocabulary and tokenization, exact image rotation, the
// procedural toy paired corpus, manifest I/O, and seeded batch iteration.

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "radsynth/autodiff.hpp"
#include "radsynth/errors.hpp"
#include "radsynth/png_io.hpp"
#include "radsynth/rng.hpp"
#include "radsynth/tensor.hpp"

namespace radsynth::data {

// ---------------------------------------------------------------------------
// vocabulary & tokenization
// ---------------------------------------------------------------------------

// Reserved ids, fixed order also used in the vocabulary file.
constexpr int PAD = 0;   // batch padding
constexpr int UNK = 1;   // out-of-vocabulary token
constexpr int START = 2; // word-decoder start symbol
constexpr int STOPS = 3; // end-of-sentence symbol

struct Vocabulary {
    std::vector<std::string> id_to_token;
    std::unordered_map<std::string, int> token_to_id;

    static Vocabulary with_specials() {
        Vocabulary v;
        for (const char* t : {"<pad>", "<unk>", "<start>", "<stop>"}) v.add(t);
        return v;
    }

    int add(const std::string& tok) {
        auto it = token_to_id.find(tok);
        if (it != token_to_id.end()) return it->second;
        const int id = (int)id_to_token.size();
        id_to_token.push_back(tok);
        token_to_id.emplace(tok, id);
        return id;
    }

    int size() const { return (int)id_to_token.size(); }

    int id_of(const std::string& tok) const {
        auto it = token_to_id.find(tok);
        return it == token_to_id.end() ? UNK : it->second;
    }

    const std::string& token(int id) const { return id_to_token.at((size_t)id); }

    void save(const std::string& path) const {
        std::ofstream f(path);
        if (!f) throw IoError("cannot write vocabulary: " + path);
        for (const auto& t : id_to_token) f << t << "\n";
    }

    static Vocabulary load(const std::string& path) {
        std::ifstream f(path);
        if (!f) throw IoError("cannot read vocabulary: " + path);
        Vocabulary v;
        std::string line;
        while (std::getline(f, line))
            if (!line.empty()) v.add(line);
        if (v.size() < 4) throw IoError("vocabulary file too short: " + path);
        return v;
    }
};

// Lowercase; newlines count as sentence breaks; strip everything except
// letters, digits, spaces, and periods; collapse whitespace.
inline std::string normalize_text(const std::string& text) {
    std::string out;
    out.reserve(text.size());
    bool space_pending = false;
    for (char raw : text) {
        char c = raw;
        if (c >= 'A' && c <= 'Z') c = (char)(c - 'A' + 'a');
        if (c == '\n' || c == '\r') c = '.';
        const bool keep = (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || c == '.';
        if (keep) {
            if (space_pending && !out.empty()) out.push_back(' ');
            space_pending = false;
            out.push_back(c);
        } else {
            space_pending = true;
        }
    }
    return out;
}

inline std::vector<std::vector<std::string>> split_sentences(const std::string& text) {
    std::vector<std::vector<std::string>> sentences;
    std::vector<std::string> cur;
    std::string tok;
    auto flush_tok = [&] {
        if (!tok.empty()) {
            cur.push_back(tok);
            tok.clear();
        }
    };
    auto flush_sentence = [&] {
        flush_tok();
        if (!cur.empty()) {
            sentences.push_back(cur);
            cur.clear();
        }
    };
    for (char c : normalize_text(text)) {
        if (c == '.')
            flush_sentence();
        else if (c == ' ')
            flush_tok();
        else
            tok.push_back(c);
    }
    flush_sentence();
    return sentences;
}

inline Vocabulary build_vocabulary(const std::vector<std::string>& corpus, int min_count) {
    if (corpus.empty()) throw ConfigError("empty corpus");
    if (min_count < 1) throw ConfigError("min_count must be >= 1");
    std::map<std::string, long long> freq; // ordered: deterministic id assignment
    for (const auto& text : corpus)
        for (const auto& sent : split_sentences(text))
            for (const auto& tok : sent) ++freq[tok];
    Vocabulary v = Vocabulary::with_specials();
    for (const auto& [tok, n] : freq)
        if (n >= min_count) v.add(tok);
    return v;
}

using Report = std::vector<std::vector<int>>; // sentences of word ids

inline Report tokenize_report(const std::string& text, const Vocabulary& vocab) {
    Report r;
    for (const auto& sent : split_sentences(text)) {
        std::vector<int> ids;
        ids.reserve(sent.size());
        for (const auto& tok : sent) ids.push_back(vocab.id_of(tok));
        r.push_back(std::move(ids));
    }
    if (r.empty()) r.push_back({STOPS}); // empty-report marker
    return r;
}

inline std::string detokenize(const Report& report, const Vocabulary& vocab) {
    std::string out;
    for (const auto& sent : report) {
        std::string s;
        for (int id : sent) {
            if (id == PAD || id == START || id == STOPS) continue;
            if (!s.empty()) s.push_back(' ');
            s += vocab.token(id);
        }
        if (s.empty()) continue;
        if (!out.empty()) out.push_back(' ');
        out += s;
        out.push_back('.');
    }
    return out;
}

// ---------------------------------------------------------------------------
// rotation
// ---------------------------------------------------------------------------

enum class RotationAngle : int { deg0 = 0, deg90 = 1, deg180 = 2, deg270 = 3 };

inline RotationAngle rotation_from_index(int i) {
    if (i < 0 || i > 3) throw ConfigError("rotation index must be in 0..3");
    return static_cast<RotationAngle>(i);
}

// Exact quarter-turn rotation of [H,W] or [C,H,W]; index permutation only.
inline Tensor rotate_image(const Tensor& img, RotationAngle r) {
    const int nd = img.ndim();
    if (nd != 2 && nd != 3) throw ConfigError("rotate_image: expected 2-D or 3-D tensor");
    const int h = img.dim(nd - 2), w = img.dim(nd - 1);
    if (h != w) throw ConfigError("rotation requires square image");
    const int c = nd == 3 ? img.dim(0) : 1;
    Tensor out(img.shape());
    for (int cc = 0; cc < c; ++cc)
        ad::detail::rot_plane(img.data() + (long long)cc * h * w, h, static_cast<int>(r),
                              out.data() + (long long)cc * h * w);
    return out;
}

// ---------------------------------------------------------------------------
// manifests
// ---------------------------------------------------------------------------

struct ManifestRecord {
    std::string image; // path relative to the manifest directory
    std::string report;
    int label = 0;
};

struct DatasetManifest {
    std::vector<ManifestRecord> records;
    int class_count = 0;
    std::string base_dir;
};

inline void save_manifest(const DatasetManifest& m, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot write manifest: " + path);
    for (const auto& r : m.records) {
        nlohmann::json j{{"image", r.image}, {"report", r.report}, {"label", r.label}};
        f << j.dump() << "\n";
    }
}

inline DatasetManifest load_manifest(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot read manifest: " + path);
    DatasetManifest m;
    m.base_dir = std::filesystem::path(path).parent_path().string();
    std::string line;
    long long idx = 0;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const std::exception& e) {
            throw IoError("manifest record " + std::to_string(idx) + ": " + e.what());
        }
        ManifestRecord r;
        r.image = j.at("image").get<std::string>();
        r.report = j.at("report").get<std::string>();
        r.label = j.at("label").get<int>();
        if (r.label < 0) throw IoError("manifest record " + std::to_string(idx) + ": negative label");
        const auto full = std::filesystem::path(m.base_dir) / r.image;
        if (!std::filesystem::exists(full)) throw IoError("missing image file: " + full.string());
        m.class_count = std::max(m.class_count, r.label + 1);
        m.records.push_back(std::move(r));
        ++idx;
    }
    return m;
}

// ---------------------------------------------------------------------------
// toy corpus
// ---------------------------------------------------------------------------

struct ToyConfig {
    int n_samples = 2000;
    int class_count = 4;
    int image_size = 32;
    std::uint64_t seed = 7;
};

namespace detail {

inline void add_ellipse(Tensor& img, double cx, double cy, double a, double b, double phi,
                        double amplitude) {
    const int s = img.dim(0);
    const double cp = std::cos(phi), sp = std::sin(phi);
    for (int y = 0; y < s; ++y)
        for (int x = 0; x < s; ++x) {
            const double dx = x - cx, dy = y - cy;
            const double u = (dx * cp + dy * sp) / a;
            const double v = (-dx * sp + dy * cp) / b;
            img.at({y, x}) += amplitude * std::exp(-(u * u + v * v));
        }
}

inline const std::vector<std::string>& location_names() {
    static const std::vector<std::string> names{"right apical", "left basal",  "left apical",
                                                "right basal",  "right mid",   "left mid",
                                                "central upper", "central lower"};
    return names;
}

// Grayscale [S,S] in [0,1]: shared background plus a class-placed bright blob.
inline Tensor toy_image(int s, int cls, int k, bool large, Rng& rng) {
    Tensor img({s, s});
    const double c0 = (s - 1) / 2.0;
    // torso vignette and two lung fields
    add_ellipse(img, c0, c0, 0.52 * s, 0.60 * s, 0.0, 0.16);
    add_ellipse(img, c0 - 0.22 * s, c0, 0.14 * s, 0.26 * s, 0.0, 0.30);
    add_ellipse(img, c0 + 0.22 * s, c0, 0.14 * s, 0.26 * s, 0.0, 0.30);
    add_ellipse(img, c0 + 0.08 * s, c0 + 0.16 * s, 0.15 * s, 0.11 * s, 0.5, 0.22);
    // class blob: position by class angle, extent by the size attribute
    const double theta = 2.0 * M_PI * (cls + 0.5) / k;
    const double rho = (0.30 + 0.03 * (rng.uniform() - 0.5)) * s;
    const double bx = c0 + rho * std::cos(theta) + 0.02 * s * (rng.uniform() - 0.5);
    const double by = c0 + rho * std::sin(theta) + 0.02 * s * (rng.uniform() - 0.5);
    const double base = large ? 0.155 : 0.095;
    const double a = (base + 0.015 * rng.uniform()) * s;
    const double b = (0.6 * base + 0.01 * rng.uniform()) * s;
    add_ellipse(img, bx, by, a, b, theta + 0.3 * (rng.uniform() - 0.5), 0.55 + 0.08 * rng.uniform());
    // sensor noise
    for (long long i = 0; i < img.size(); ++i) {
        double v = img[i] + 0.06 * rng.normal();
        img[i] = v < 0 ? 0 : (v > 1 ? 1 : v);
    }
    return img;
}

inline std::string toy_report(int cls, bool large, Rng& rng) {
    const auto& locs = location_names();
    const std::string& loc = locs[(size_t)(cls % (int)locs.size())];
    const std::string size_word = large ? "large" : "small";
    std::string s1 = rng.uniform() < 0.5
                         ? "a " + size_word + " " + loc + " opacity is seen"
                         : "the " + loc + " zone shows a " + size_word + " opacity";
    std::string s2 = rng.uniform() < 0.5 ? "heart size is normal"
                                         : "the cardiac silhouette is unremarkable";
    std::string text = s1 + ". " + s2 + ".";
    if (rng.uniform() < 0.5) {
        std::string s3 =
            rng.uniform() < 0.5 ? "no pleural effusion is identified" : "lungs are otherwise clear";
        text += " " + s3 + ".";
    }
    return text;
}

} // namespace detail

// Writes images/NNNNNN.png plus manifest.jsonl under out_dir; returns the
// manifest. Deterministic in config.seed, class-balanced.
inline DatasetManifest generate_toy_dataset(const ToyConfig& cfg, const std::string& out_dir) {
    if (cfg.class_count < 2) throw ConfigError("toy dataset needs k >= 2");
    if (cfg.n_samples < cfg.class_count) throw ConfigError("need at least one sample per class");
    if (cfg.image_size < 32 || (cfg.image_size & (cfg.image_size - 1)) != 0)
        throw ConfigError("image_size must be a power of two >= 32");

    std::filesystem::create_directories(std::filesystem::path(out_dir) / "images");
    DatasetManifest m;
    m.class_count = cfg.class_count;
    m.base_dir = out_dir;

    Rng rng(cfg.seed);
    for (int i = 0; i < cfg.n_samples; ++i) {
        const int cls = i % cfg.class_count; // balanced by construction
        const bool large = rng.uniform() < 0.5;
        Tensor img = detail::toy_image(cfg.image_size, cls, cfg.class_count, large, rng);
        char name[32];
        std::snprintf(name, sizeof(name), "images/%06d.png", i);
        write_png_gray((std::filesystem::path(out_dir) / name).string(), img);
        m.records.push_back({name, detail::toy_report(cls, large, rng), cls});
    }
    save_manifest(m, (std::filesystem::path(out_dir) / "manifest.jsonl").string());
    return m;
}

// ---------------------------------------------------------------------------
// batching
// ---------------------------------------------------------------------------

struct Batch {
    Tensor images;            // [N,3,S,S], values in [-1,1]
    Tensor labels;            // [N,k] one-hot
    std::vector<int> label_ids;
    std::vector<Report> reports;
    std::vector<int> indices; // manifest row of each sample
};

class Dataset {
  public:
    Dataset(DatasetManifest manifest, Vocabulary vocab, int expected_class_count = 0)
        : manifest_(std::move(manifest)), vocab_(std::move(vocab)) {
        if (expected_class_count > 0) {
            for (size_t i = 0; i < manifest_.records.size(); ++i)
                if (manifest_.records[i].label >= expected_class_count)
                    throw IoError("manifest record " + std::to_string(i) + ": label out of range");
            manifest_.class_count = expected_class_count;
        }
        cache_.resize(manifest_.records.size());
    }

    int size() const { return (int)manifest_.records.size(); }
    int class_count() const { return manifest_.class_count; }
    const Vocabulary& vocab() const { return vocab_; }
    const DatasetManifest& manifest() const { return manifest_; }
    int label_of(int i) const { return manifest_.records[(size_t)i].label; }
    const std::string& report_text(int i) const { return manifest_.records[(size_t)i].report; }

    // Grayscale plane [S,S] in [0,1], decoded once and cached.
    const Tensor& image_plane(int i) const {
        Tensor& slot = cache_[(size_t)i];
        if (!slot.defined()) {
            const auto path =
                std::filesystem::path(manifest_.base_dir) / manifest_.records[(size_t)i].image;
            slot = read_png_gray(path.string());
        }
        return slot;
    }

    Batch load_batch(const std::vector<int>& idx) const {
        Batch b;
        b.indices = idx;
        const int n = (int)idx.size();
        const Tensor& first = image_plane(idx.at(0));
        const int s = first.dim(0);
        b.images = Tensor({n, 3, s, s});
        b.labels = Tensor({n, manifest_.class_count});
        for (int i = 0; i < n; ++i) {
            const Tensor& plane = image_plane(idx[(size_t)i]);
            if (plane.dim(0) != s || plane.dim(1) != s)
                throw IoError("inconsistent image size at record " + std::to_string(idx[(size_t)i]));
            // replicate grayscale to 3 channels, map [0,1] -> [-1,1]
            for (int c = 0; c < 3; ++c)
                for (int p = 0; p < s * s; ++p)
                    b.images[((long long)i * 3 + c) * s * s + p] = plane[p] * 2.0 - 1.0;
            const int y = manifest_.records[(size_t)idx[(size_t)i]].label;
            b.labels.at({i, y}) = 1.0;
            b.label_ids.push_back(y);
            b.reports.push_back(tokenize_report(manifest_.records[(size_t)idx[(size_t)i]].report, vocab_));
        }
        return b;
    }

  private:
    DatasetManifest manifest_;
    Vocabulary vocab_;
    mutable std::vector<Tensor> cache_;
};

// Seeded batch index plan. Training mode drops the final partial batch;
// evaluation mode keeps it.
inline std::vector<std::vector<int>> batch_plan(int n, int batch_size, std::uint64_t seed,
                                                bool train_mode) {
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    Rng rng(seed);
    std::vector<int> order = rng.permutation(n);
    std::vector<std::vector<int>> plan;
    for (int start = 0; start < n; start += batch_size) {
        const int end = std::min(n, start + batch_size);
        if (train_mode && end - start < batch_size) break;
        plan.emplace_back(order.begin() + start, order.begin() + end);
    }
    return plan;
}

} // namespace radsynth::data
