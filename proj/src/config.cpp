#include "ddt/config.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "ddt/errors.hpp"

namespace ddt {
namespace {

template <class F>
void visit_fields(TokenizerConfig& c, F&& f) {
    f("image_size", c.image_size);
    f("channels", c.channels);
    f("T", c.T);
    f("patch_size", c.patch_size);
    f("enc_layers", c.enc_layers);
    f("enc_dim", c.enc_dim);
    f("enc_heads", c.enc_heads);
    f("code_dim", c.code_dim);
    f("codebook_size", c.codebook_size);
    f("dec_layers", c.dec_layers);
    f("dec_dim", c.dec_dim);
    f("dec_heads", c.dec_heads);
    f("mlp_ratio", c.mlp_ratio);
    f("commitment_weight", c.commitment_weight);
    f("ema_decay", c.ema_decay);
    f("dead_code_threshold", c.dead_code_threshold);
    f("prediction", c.prediction);
}

template <class F>
void visit_fields(RunConfig& c, F&& f) {
    f("seed", c.seed);
    f("optimizer", c.optimizer);
    f("beta1", c.beta1);
    f("beta2", c.beta2);
    f("epsilon", c.epsilon);
    f("peak_lr", c.peak_lr);
    f("schedule", c.schedule);
    f("lr_floor_ratio", c.lr_floor_ratio);
    f("batch_size", c.batch_size);
    f("total_steps", c.total_steps);
    f("warmup_steps", c.warmup_steps);
    f("weight_decay", c.weight_decay);
    f("grad_clip", c.grad_clip);
    f("text_mixture_ratio", c.text_mixture_ratio);
    f("caption_dropout", c.caption_dropout);
    f("log_every", c.log_every);
    f("checkpoint_every", c.checkpoint_every);
}

template <class F>
void visit_fields(LmConfig& c, F&& f) {
    f("layers", c.layers);
    f("dim", c.dim);
    f("heads", c.heads);
    f("mlp_ratio", c.mlp_ratio);
    f("max_len", c.max_len);
    f("text_vocab_size", c.text_vocab_size);
}

template <class F>
void visit_fields(SamplingConfig& c, F&& f) {
    f("text_top_k", c.text_top_k);
    f("text_top_p", c.text_top_p);
    f("visual_top_k", c.visual_top_k);
    f("visual_top_p", c.visual_top_p);
    f("guidance_scale", c.guidance_scale);
    f("temperature", c.temperature);
    f("seed", c.seed);
    f("decode_steps", c.decode_steps);
}

template <class F>
void visit_fields(DataConfig& c, F&& f) {
    f("manifest", c.manifest);
    f("resolution", c.resolution);
    f("channels", c.channels);
}

template <class Cfg>
json dump_fields(const Cfg& c) {
    json j = json::object();
    visit_fields(const_cast<Cfg&>(c), [&](const char* name, auto& v) { j[name] = v; });
    return j;
}

template <class T>
void read_value(const json& v, T& out, const std::string& path) {
    try {
        if constexpr (std::is_same_v<T, std::string>) {
            if (!v.is_string()) throw ConfigError(path, "expected a string");
            out = v.get<std::string>();
        } else if constexpr (std::is_integral_v<T>) {
            if (!v.is_number_integer()) throw ConfigError(path, "expected an integer");
            out = v.get<T>();
        } else {
            if (!v.is_number()) throw ConfigError(path, "expected a number");
            out = v.get<T>();
        }
    } catch (const json::exception& e) {
        throw ConfigError(path, e.what());
    }
}

template <class Cfg>
Cfg load_fields(const json& j, const std::string& prefix, Cfg out) {
    if (!j.is_object()) throw ConfigError(prefix, "expected an object");
    std::set<std::string> known;
    visit_fields(out, [&](const char* name, auto& v) {
        known.insert(name);
        if (auto it = j.find(name); it != j.end()) read_value(*it, v, prefix + "." + name);
    });
    for (const auto& [key, _] : j.items()) {
        if (!known.count(key)) throw ConfigError(prefix + "." + key, "unknown key");
    }
    return out;
}

void require(bool ok, const std::string& field, const std::string& what) {
    if (!ok) throw ConfigError(field, what);
}

// Parses an override value; JSON syntax first, bare strings otherwise.
json parse_override_value(const std::string& raw) {
    try {
        return json::parse(raw);
    } catch (const json::exception&) {
        return json(raw);
    }
}

}  // namespace

void validate(const TokenizerConfig& c, const std::string& p) {
    require(c.image_size > 0, p + ".image_size", "must be positive");
    require(c.channels > 0, p + ".channels", "must be positive");
    require(c.T > 0, p + ".T", "must be positive");
    require(c.patch_size > 0, p + ".patch_size", "must be positive");
    require(c.image_size % c.patch_size == 0, p + ".patch_size", "must divide image_size");
    require(c.enc_layers > 0, p + ".enc_layers", "must be positive");
    require(c.enc_dim > 0, p + ".enc_dim", "must be positive");
    require(c.enc_heads >= 0, p + ".enc_heads", "must be non-negative");
    require(c.enc_dim % c.encoder_heads() == 0, p + ".enc_heads", "must divide enc_dim");
    require(c.code_dim > 0, p + ".code_dim", "must be positive");
    require(c.code_dim <= c.enc_dim, p + ".code_dim", "must not exceed enc_dim");
    require(c.codebook_size > 0, p + ".codebook_size", "must be positive");
    require(c.dec_layers > 0, p + ".dec_layers", "must be positive");
    require(c.dec_dim > 0, p + ".dec_dim", "must be positive");
    require(c.dec_heads >= 0, p + ".dec_heads", "must be non-negative");
    require(c.dec_dim % c.decoder_heads() == 0, p + ".dec_heads", "must divide dec_dim");
    require(c.mlp_ratio > 0, p + ".mlp_ratio", "must be positive");
    require(c.commitment_weight >= 0, p + ".commitment_weight", "must be non-negative");
    require(c.ema_decay > 0 && c.ema_decay < 1, p + ".ema_decay", "must lie in (0, 1)");
    require(c.dead_code_threshold >= 0, p + ".dead_code_threshold", "must be non-negative");
    require(c.prediction == "x0" || c.prediction == "velocity", p + ".prediction", "must be \"x0\" or \"velocity\"");
}

void validate(const RunConfig& c, const std::string& p) {
    require(c.optimizer == "adamw", p + ".optimizer", "only \"adamw\" is supported");
    require(c.beta1 > 0 && c.beta1 < 1, p + ".beta1", "must lie in (0, 1)");
    require(c.beta2 > 0 && c.beta2 < 1, p + ".beta2", "must lie in (0, 1)");
    require(c.epsilon > 0, p + ".epsilon", "must be positive");
    require(c.peak_lr > 0, p + ".peak_lr", "must be positive");
    require(c.schedule == "linear+cosine" || c.schedule == "cosine" || c.schedule == "constant", p + ".schedule",
            "must be one of linear+cosine, cosine, constant");
    require(c.lr_floor_ratio > 0 && c.lr_floor_ratio <= 1, p + ".lr_floor_ratio", "must lie in (0, 1]");
    require(c.batch_size > 0, p + ".batch_size", "must be positive");
    require(c.total_steps > 0, p + ".total_steps", "must be positive");
    require(c.warmup_steps >= 0, p + ".warmup_steps", "must be non-negative");
    require(c.warmup_steps <= c.total_steps, p + ".warmup_steps", "must not exceed total_steps");
    require(c.weight_decay >= 0, p + ".weight_decay", "must be non-negative");
    require(c.grad_clip >= 0, p + ".grad_clip", "must be non-negative");
    require(c.text_mixture_ratio >= 0 && c.text_mixture_ratio <= 1, p + ".text_mixture_ratio", "must lie in [0, 1]");
    require(c.caption_dropout >= 0 && c.caption_dropout <= 1, p + ".caption_dropout", "must lie in [0, 1]");
    require(c.log_every > 0, p + ".log_every", "must be positive");
    require(c.checkpoint_every >= 0, p + ".checkpoint_every", "must be non-negative");
}

void validate(const LmConfig& c, const std::string& p) {
    require(c.layers > 0, p + ".layers", "must be positive");
    require(c.dim > 0, p + ".dim", "must be positive");
    require(c.heads >= 0, p + ".heads", "must be non-negative");
    require(c.dim % c.num_heads() == 0, p + ".heads", "must divide dim");
    require(c.mlp_ratio > 0, p + ".mlp_ratio", "must be positive");
    require(c.max_len > 1, p + ".max_len", "must exceed 1");
    require(c.text_vocab_size > 0, p + ".text_vocab_size", "must be positive");
}

void validate(const SamplingConfig& c, const std::string& p) {
    require(c.text_top_k >= 1, p + ".text_top_k", "must be at least 1");
    require(c.text_top_p > 0 && c.text_top_p <= 1, p + ".text_top_p", "must lie in (0, 1]");
    require(c.visual_top_k >= 1, p + ".visual_top_k", "must be at least 1");
    require(c.visual_top_p > 0 && c.visual_top_p <= 1, p + ".visual_top_p", "must lie in (0, 1]");
    require(c.guidance_scale >= 0, p + ".guidance_scale", "must be non-negative");
    require(c.temperature > 0, p + ".temperature", "must be positive");
    require(c.decode_steps >= 1, p + ".decode_steps", "must be at least 1");
}

void validate(const ExperimentConfig& c) {
    validate(c.tokenizer, "tokenizer");
    validate(c.train, "train");
    validate(c.lm, "lm");
    validate(c.lm_train, "lm_train");
    validate(c.sampling, "sampling");
    require(c.data.resolution > 0, "data.resolution", "must be positive");
    require(c.data.channels == 3, "data.channels", "only 3-channel images are supported");
    require(c.data.resolution == c.tokenizer.image_size, "data.resolution", "must equal tokenizer.image_size");
    require(c.data.channels == c.tokenizer.channels, "data.channels", "must equal tokenizer.channels");
    require(c.lm.max_len >= c.tokenizer.T + 4, "lm.max_len", "must hold a full visual span plus delimiters");
}

json to_json(const TokenizerConfig& c) { return dump_fields(c); }
json to_json(const RunConfig& c) { return dump_fields(c); }
json to_json(const LmConfig& c) { return dump_fields(c); }
json to_json(const SamplingConfig& c) { return dump_fields(c); }

json to_json(const ExperimentConfig& c) {
    return json{{"tokenizer", to_json(c.tokenizer)}, {"train", to_json(c.train)},       {"lm", to_json(c.lm)},
                {"lm_train", to_json(c.lm_train)},   {"sampling", to_json(c.sampling)}, {"data", dump_fields(c.data)}};
}

TokenizerConfig tokenizer_config_from_json(const json& j, const std::string& prefix) {
    return load_fields(j, prefix, TokenizerConfig{});
}
RunConfig run_config_from_json(const json& j, const std::string& prefix, RunConfig base) {
    return load_fields(j, prefix, std::move(base));
}
LmConfig lm_config_from_json(const json& j, const std::string& prefix) { return load_fields(j, prefix, LmConfig{}); }
SamplingConfig sampling_config_from_json(const json& j, const std::string& prefix) {
    return load_fields(j, prefix, SamplingConfig{});
}

ExperimentConfig experiment_config_from_json(const json& j) {
    if (!j.is_object()) throw ConfigError("", "config document must be an object");
    ExperimentConfig c;
    for (const auto& [key, value] : j.items()) {
        if (key == "tokenizer") c.tokenizer = tokenizer_config_from_json(value, key);
        else if (key == "train") c.train = run_config_from_json(value, key);
        else if (key == "lm") c.lm = lm_config_from_json(value, key);
        else if (key == "lm_train") c.lm_train = run_config_from_json(value, key, ExperimentConfig::default_lm_run());
        else if (key == "sampling") c.sampling = sampling_config_from_json(value, key);
        else if (key == "data") c.data = load_fields(value, key, DataConfig{});
        else throw ConfigError(key, "unknown section");
    }
    return c;
}

std::uint64_t config_hash(const json& canonical) {
    const std::string text = canonical.dump();
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : text) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string hash_hex(std::uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

ResolvedConfig resolve_config(const json& document, const std::vector<std::string>& overrides) {
    json merged = document.is_null() ? json::object() : document;
    for (const auto& ov : overrides) {
        const auto eq = ov.find('=');
        if (eq == std::string::npos) throw ConfigError(ov, "override must have the form section.field=value");
        const std::string key = ov.substr(0, eq);
        const auto dot = key.find('.');
        if (dot == std::string::npos) throw ConfigError(key, "override key must be section.field");
        merged[key.substr(0, dot)][key.substr(dot + 1)] = parse_override_value(ov.substr(eq + 1));
    }
    ResolvedConfig r;
    r.config = experiment_config_from_json(merged);
    validate(r.config);
    r.document = to_json(r.config);
    r.hash = config_hash(r.document);
    return r;
}

ResolvedConfig resolve_config(const std::string& path, const std::vector<std::string>& overrides) {
    json doc = json::object();
    if (!path.empty()) {
        std::ifstream in(path);
        if (!in) throw ConfigError("", "cannot open config file " + path);
        try {
            doc = json::parse(in);
        } catch (const json::parse_error& e) {
            throw ConfigError("", "cannot parse " + path + ": " + e.what());
        }
    }
    return resolve_config(doc, overrides);
}

}  // namespace ddt
