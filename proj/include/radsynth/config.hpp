#pragma once

// Run configuration for the command-line tools: one flat dictionary of dotted
// keys merged from an optional JSON file plus repeatable key=value overrides.
// Every key lives in a single registry that both parses and echoes, so the
// echo written into an output directory always round-trips through the same
// validation as user input.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "radsynth/classifier.hpp"
#include "radsynth/data.hpp"
#include "radsynth/discriminators.hpp"
#include "radsynth/errors.hpp"
#include "radsynth/evaluation.hpp"
#include "radsynth/generator.hpp"
#include "radsynth/report_decoder.hpp"
#include "radsynth/training.hpp"

namespace radsynth::config {

struct RunConfig {
    // run plumbing
    std::string run_id = "run";
    std::uint64_t seed = 7;
    std::string data_dir;   // dataset directory (manifest.jsonl + vocab.txt)
    std::string out_dir;    // output directory for the current command
    std::string checkpoint; // input checkpoint path, command dependent

    // toy corpus synthesis (seed comes from the run seed)
    data::ToyConfig toy;
    int vocab_min_count = 1;

    // model shapes; image_size / class_count / vocab_size are mirrored into
    // every sub-config when models are built, so they have one key each
    int image_size = 32;
    int class_count = 4;
    GeneratorConfig gen;
    ClassifierConfig encoder;
    DecoderConfig decoder;
    DImageConfig d_image;
    DReportConfig d_report;
    DJointConfig d_joint;

    // adversarial training (seed comes from the run seed)
    train::TrainConfig train;
    std::string f_init; // optional pretrained captioner warm start

    // captioner pretraining / experiment protocol
    eval::ExperimentProtocol protocol;

    // command-specific knobs
    int generate_count = 64;
    std::string class_spec = "balanced"; // or a class id as text
    int evaluate_fid_samples = 256;
    int evaluate_caption_samples = 128;
    std::string experiment_kind = "augmentation"; // or "report-gen"
    std::vector<int> experiment_mixes{0, 1000};
    std::vector<std::uint64_t> experiment_seeds{1, 2, 3};
    int export_count = 8;
};

namespace detail {

template <class T> struct FieldCodec;

template <> struct FieldCodec<int> {
    static const char* want() { return "an integer"; }
    static bool check(const nlohmann::json& v) { return v.is_number_integer(); }
    static int read(const nlohmann::json& v) { return v.get<int>(); }
    static nlohmann::json write(int x) { return x; }
};

template <> struct FieldCodec<std::uint64_t> {
    static const char* want() { return "a non-negative integer"; }
    static bool check(const nlohmann::json& v) {
        return v.is_number_unsigned() || (v.is_number_integer() && v.get<long long>() >= 0);
    }
    static std::uint64_t read(const nlohmann::json& v) { return v.get<std::uint64_t>(); }
    static nlohmann::json write(std::uint64_t x) { return x; }
};

template <> struct FieldCodec<double> {
    static const char* want() { return "a number"; }
    static bool check(const nlohmann::json& v) { return v.is_number(); }
    static double read(const nlohmann::json& v) { return v.get<double>(); }
    static nlohmann::json write(double x) { return x; }
};

template <> struct FieldCodec<bool> {
    static const char* want() { return "true or false"; }
    static bool check(const nlohmann::json& v) { return v.is_boolean(); }
    static bool read(const nlohmann::json& v) { return v.get<bool>(); }
    static nlohmann::json write(bool x) { return x; }
};

template <> struct FieldCodec<std::string> {
    static const char* want() { return "a string"; }
    static bool check(const nlohmann::json& v) { return v.is_string(); }
    static std::string read(const nlohmann::json& v) { return v.get<std::string>(); }
    static nlohmann::json write(const std::string& x) { return x; }
};

template <> struct FieldCodec<std::vector<int>> {
    static const char* want() { return "an array of integers"; }
    static bool check(const nlohmann::json& v) {
        if (!v.is_array()) return false;
        for (const auto& e : v)
            if (!e.is_number_integer()) return false;
        return true;
    }
    static std::vector<int> read(const nlohmann::json& v) { return v.get<std::vector<int>>(); }
    static nlohmann::json write(const std::vector<int>& x) { return x; }
};

template <> struct FieldCodec<std::vector<std::uint64_t>> {
    static const char* want() { return "an array of non-negative integers"; }
    static bool check(const nlohmann::json& v) {
        if (!v.is_array()) return false;
        for (const auto& e : v)
            if (!FieldCodec<std::uint64_t>::check(e)) return false;
        return true;
    }
    static std::vector<std::uint64_t> read(const nlohmann::json& v) {
        return v.get<std::vector<std::uint64_t>>();
    }
    static nlohmann::json write(const std::vector<std::uint64_t>& x) { return x; }
};

} // namespace detail

struct KeyHandler {
    std::function<void(RunConfig&, const nlohmann::json&)> set;
    std::function<nlohmann::json(const RunConfig&)> get;
};

namespace detail {

template <class T>
inline void add_field(std::map<std::string, KeyHandler>& reg, const std::string& key,
                      std::function<T & (RunConfig&)> ref) {
    KeyHandler h;
    h.set = [key, ref](RunConfig& c, const nlohmann::json& v) {
        if (!FieldCodec<T>::check(v))
            throw ConfigError("config key '" + key + "' wants " + FieldCodec<T>::want());
        ref(c) = FieldCodec<T>::read(v);
    };
    h.get = [ref](const RunConfig& c) {
        return FieldCodec<T>::write(ref(const_cast<RunConfig&>(c)));
    };
    reg.emplace(key, std::move(h));
}

} // namespace detail

// One entry per recognized key; anything else is rejected.
inline const std::map<std::string, KeyHandler>& registry() {
    static const std::map<std::string, KeyHandler> reg = [] {
        std::map<std::string, KeyHandler> r;
        auto num = [&r](const char* k, std::function<int&(RunConfig&)> f) {
            detail::add_field<int>(r, k, std::move(f));
        };
        auto dbl = [&r](const char* k, std::function<double&(RunConfig&)> f) {
            detail::add_field<double>(r, k, std::move(f));
        };
        auto flag = [&r](const char* k, std::function<bool&(RunConfig&)> f) {
            detail::add_field<bool>(r, k, std::move(f));
        };
        auto text = [&r](const char* k, std::function<std::string&(RunConfig&)> f) {
            detail::add_field<std::string>(r, k, std::move(f));
        };
        auto u64 = [&r](const char* k, std::function<std::uint64_t&(RunConfig&)> f) {
            detail::add_field<std::uint64_t>(r, k, std::move(f));
        };

        text("run_id", [](RunConfig& c) -> std::string& { return c.run_id; });
        u64("seed", [](RunConfig& c) -> std::uint64_t& { return c.seed; });
        text("data.dir", [](RunConfig& c) -> std::string& { return c.data_dir; });
        text("out.dir", [](RunConfig& c) -> std::string& { return c.out_dir; });
        text("checkpoint", [](RunConfig& c) -> std::string& { return c.checkpoint; });

        num("data.toy.n_samples", [](RunConfig& c) -> int& { return c.toy.n_samples; });
        num("data.toy.class_count", [](RunConfig& c) -> int& { return c.toy.class_count; });
        num("data.toy.image_size", [](RunConfig& c) -> int& { return c.toy.image_size; });
        num("data.vocab_min_count", [](RunConfig& c) -> int& { return c.vocab_min_count; });

        num("models.image_size", [](RunConfig& c) -> int& { return c.image_size; });
        num("models.class_count", [](RunConfig& c) -> int& { return c.class_count; });

        num("models.gen.noise_dim", [](RunConfig& c) -> int& { return c.gen.noise_dim; });
        num("models.gen.chunk_dim", [](RunConfig& c) -> int& { return c.gen.chunk_dim; });
        num("models.gen.class_emb_dim", [](RunConfig& c) -> int& { return c.gen.class_emb_dim; });
        num("models.gen.base_channels", [](RunConfig& c) -> int& { return c.gen.base_channels; });
        num("models.gen.up_block_count", [](RunConfig& c) -> int& { return c.gen.up_block_count; });
        flag("models.gen.spectral", [](RunConfig& c) -> bool& { return c.gen.spectral; });

        num("models.encoder.base_channels",
            [](RunConfig& c) -> int& { return c.encoder.base_channels; });
        num("models.encoder.feat_dim", [](RunConfig& c) -> int& { return c.encoder.feat_dim; });

        num("models.decoder.sent_hidden",
            [](RunConfig& c) -> int& { return c.decoder.sent_hidden; });
        num("models.decoder.topic_hidden",
            [](RunConfig& c) -> int& { return c.decoder.topic_hidden; });
        num("models.decoder.emb_dim", [](RunConfig& c) -> int& { return c.decoder.emb_dim; });
        num("models.decoder.word_hidden",
            [](RunConfig& c) -> int& { return c.decoder.word_hidden; });
        num("models.decoder.word_layers",
            [](RunConfig& c) -> int& { return c.decoder.word_layers; });
        num("models.decoder.t_max", [](RunConfig& c) -> int& { return c.decoder.t_max; });
        num("models.decoder.l_max", [](RunConfig& c) -> int& { return c.decoder.l_max; });
        dbl("models.decoder.stop_threshold",
            [](RunConfig& c) -> double& { return c.decoder.stop_threshold; });

        num("models.d_image.base_channels",
            [](RunConfig& c) -> int& { return c.d_image.base_channels; });
        num("models.d_image.down_block_count",
            [](RunConfig& c) -> int& { return c.d_image.down_block_count; });
        flag("models.d_image.spectral", [](RunConfig& c) -> bool& { return c.d_image.spectral; });

        num("models.d_report.emb_dim", [](RunConfig& c) -> int& { return c.d_report.emb_dim; });
        num("models.d_report.hidden", [](RunConfig& c) -> int& { return c.d_report.hidden; });
        num("models.d_report.ff_hidden",
            [](RunConfig& c) -> int& { return c.d_report.ff_hidden; });
        flag("models.d_report.spectral",
             [](RunConfig& c) -> bool& { return c.d_report.spectral; });

        num("models.d_joint.base_channels",
            [](RunConfig& c) -> int& { return c.d_joint.base_channels; });
        num("models.d_joint.down_block_count",
            [](RunConfig& c) -> int& { return c.d_joint.down_block_count; });
        num("models.d_joint.emb_dim", [](RunConfig& c) -> int& { return c.d_joint.emb_dim; });
        num("models.d_joint.hidden", [](RunConfig& c) -> int& { return c.d_joint.hidden; });
        num("models.d_joint.s_emb_dim", [](RunConfig& c) -> int& { return c.d_joint.s_emb_dim; });
        num("models.d_joint.ff_hidden", [](RunConfig& c) -> int& { return c.d_joint.ff_hidden; });
        flag("models.d_joint.spectral", [](RunConfig& c) -> bool& { return c.d_joint.spectral; });

        dbl("train.lr_generator", [](RunConfig& c) -> double& { return c.train.lr_generator; });
        dbl("train.lr_discriminators",
            [](RunConfig& c) -> double& { return c.train.lr_discriminators; });
        num("train.batch_size", [](RunConfig& c) -> int& { return c.train.batch_size; });
        num("train.d_steps_per_g_step",
            [](RunConfig& c) -> int& { return c.train.d_steps_per_g_step; });
        num("train.total_g_steps", [](RunConfig& c) -> int& { return c.train.total_g_steps; });
        dbl("train.alpha", [](RunConfig& c) -> double& { return c.train.alpha; });
        dbl("train.label_fraction", [](RunConfig& c) -> double& { return c.train.label_fraction; });
        dbl("train.beta1", [](RunConfig& c) -> double& { return c.train.beta1; });
        dbl("train.beta2", [](RunConfig& c) -> double& { return c.train.beta2; });
        flag("train.rotation_on_real",
             [](RunConfig& c) -> bool& { return c.train.rotation_on_real; });
        flag("train.rotation_on_fake",
             [](RunConfig& c) -> bool& { return c.train.rotation_on_fake; });
        flag("train.train_encoder", [](RunConfig& c) -> bool& { return c.train.train_encoder; });
        dbl("train.g_image_weight", [](RunConfig& c) -> double& { return c.train.g_image_weight; });
        dbl("train.g_report_weight",
            [](RunConfig& c) -> double& { return c.train.g_report_weight; });
        dbl("train.g_joint_weight", [](RunConfig& c) -> double& { return c.train.g_joint_weight; });
        num("train.metrics_every", [](RunConfig& c) -> int& { return c.train.metrics_every; });
        num("train.checkpoint_every",
            [](RunConfig& c) -> int& { return c.train.checkpoint_every; });
        num("train.fid_every", [](RunConfig& c) -> int& { return c.train.fid_every; });
        num("train.fid_probe_size", [](RunConfig& c) -> int& { return c.train.fid_probe_size; });
        text("train.f_init", [](RunConfig& c) -> std::string& { return c.f_init; });

        num("protocol.real_train", [](RunConfig& c) -> int& { return c.protocol.real_train; });
        num("protocol.held_out", [](RunConfig& c) -> int& { return c.protocol.held_out; });
        num("protocol.classifier_steps",
            [](RunConfig& c) -> int& { return c.protocol.classifier_steps; });
        num("protocol.batch_size", [](RunConfig& c) -> int& { return c.protocol.batch_size; });
        dbl("protocol.lr", [](RunConfig& c) -> double& { return c.protocol.lr; });
        num("protocol.encoder_steps",
            [](RunConfig& c) -> int& { return c.protocol.encoder_steps; });
        num("protocol.decoder_steps",
            [](RunConfig& c) -> int& { return c.protocol.decoder_steps; });
        dbl("protocol.decoder_lr", [](RunConfig& c) -> double& { return c.protocol.decoder_lr; });
        num("protocol.gen_batch", [](RunConfig& c) -> int& { return c.protocol.gen_batch; });

        num("generate.count", [](RunConfig& c) -> int& { return c.generate_count; });
        text("generate.class_spec", [](RunConfig& c) -> std::string& { return c.class_spec; });
        num("evaluate.fid_samples",
            [](RunConfig& c) -> int& { return c.evaluate_fid_samples; });
        num("evaluate.caption_samples",
            [](RunConfig& c) -> int& { return c.evaluate_caption_samples; });
        text("experiment.kind", [](RunConfig& c) -> std::string& { return c.experiment_kind; });
        detail::add_field<std::vector<int>>(
            r, "experiment.mixes",
            [](RunConfig& c) -> std::vector<int>& { return c.experiment_mixes; });
        detail::add_field<std::vector<std::uint64_t>>(
            r, "experiment.seeds",
            [](RunConfig& c) -> std::vector<std::uint64_t>& { return c.experiment_seeds; });
        num("export.count", [](RunConfig& c) -> int& { return c.export_count; });
        return r;
    }();
    return reg;
}

inline void apply_kv(RunConfig& c, const std::string& key, const nlohmann::json& value) {
    auto it = registry().find(key);
    if (it == registry().end()) throw ConfigError("unknown config key '" + key + "'");
    it->second.set(c, value);
}

inline RunConfig from_flat_json(const nlohmann::json& obj) {
    if (!obj.is_object()) throw ConfigError("config root must be a JSON object of dotted keys");
    RunConfig c;
    for (const auto& [key, value] : obj.items()) apply_kv(c, key, value);
    return c;
}

inline nlohmann::json to_flat_json(const RunConfig& c) {
    nlohmann::json out = nlohmann::json::object();
    for (const auto& [key, handler] : registry()) out[key] = handler.get(c);
    return out;
}

inline RunConfig load_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot read config file: " + path);
    nlohmann::json obj;
    try {
        obj = nlohmann::json::parse(f);
    } catch (const std::exception& e) {
        throw ConfigError("config file " + path + ": " + e.what());
    }
    return from_flat_json(obj);
}

// "key=value" override. The value text is parsed as JSON when possible
// (numbers, booleans, arrays); anything unparsable is taken as a string, and
// a parsable value that lands on a string-typed key falls back to the raw
// text so paths and names never need quoting.
inline void apply_override(RunConfig& c, const std::string& kv) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos || eq == 0)
        throw ConfigError("override must look like key=value, got '" + kv + "'");
    const std::string key = kv.substr(0, eq);
    const std::string raw = kv.substr(eq + 1);
    nlohmann::json v = nlohmann::json::parse(raw, nullptr, false);
    if (v.is_discarded()) {
        apply_kv(c, key, nlohmann::json(raw));
        return;
    }
    try {
        apply_kv(c, key, v);
    } catch (const ConfigError&) {
        if (v.is_string() || registry().find(key) == registry().end()) throw;
        apply_kv(c, key, nlohmann::json(raw));
    }
}

// Full snapshot of the effective configuration; a run can be repeated with
// --config <out_dir>/config_echo.json and nothing else.
inline void write_echo(const RunConfig& c, const std::string& out_dir) {
    const auto path = std::filesystem::path(out_dir) / "config_echo.json";
    std::ofstream f(path);
    if (!f) throw IoError("cannot write config echo: " + path.string());
    f << to_flat_json(c).dump(2) << "\n";
}

// Assemble the model bundle configuration, mirroring the shared dimensions
// into every sub-config. vocab_size always comes from the dataset vocabulary.
inline train::ModelsConfig models_config(const RunConfig& c, int vocab_size) {
    train::ModelsConfig mc;
    mc.gen = c.gen;
    mc.gen.image_size = c.image_size;
    mc.gen.class_count = c.class_count;
    mc.encoder = c.encoder;
    mc.encoder.image_size = c.image_size;
    mc.encoder.class_count = c.class_count;
    mc.decoder = c.decoder;
    mc.decoder.feat_dim = c.encoder.feat_dim;
    mc.decoder.vocab_size = vocab_size;
    mc.d_image = c.d_image;
    mc.d_image.image_size = c.image_size;
    mc.d_image.class_count = c.class_count;
    mc.d_report = c.d_report;
    mc.d_report.vocab_size = vocab_size;
    mc.d_joint = c.d_joint;
    mc.d_joint.image_size = c.image_size;
    mc.d_joint.vocab_size = vocab_size;
    return mc;
}

} // namespace radsynth::config
