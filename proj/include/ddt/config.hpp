#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

namespace ddt {

using json = nlohmann::json;

/// Architecture and quantizer knobs of the image tokenizer.
///
/// Defaults are the desk-scale toy configuration (32x32 RGB, 16 tokens,
/// 512 codes). The structural ratios of the full-size model are kept: the
/// code dimension is much smaller than the encoder width and the decoder is
/// wider and deeper than the encoder.
struct TokenizerConfig {
    std::int64_t image_size = 32;
    std::int64_t channels = 3;
    std::int64_t T = 16;
    std::int64_t patch_size = 8;
    std::int64_t enc_layers = 2;
    std::int64_t enc_dim = 64;
    std::int64_t enc_heads = 0;  // 0: max(1, enc_dim / 64)
    std::int64_t code_dim = 16;
    std::int64_t codebook_size = 512;
    std::int64_t dec_layers = 3;
    std::int64_t dec_dim = 96;
    std::int64_t dec_heads = 0;  // 0: max(1, dec_dim / 64)
    std::int64_t mlp_ratio = 4;
    double commitment_weight = 0.25;
    double ema_decay = 0.99;
    double dead_code_threshold = 0.01;
    std::string prediction = "x0";  // "x0" or "velocity"

    std::int64_t num_patches() const { return (image_size / patch_size) * (image_size / patch_size); }
    std::int64_t patch_dim() const { return channels * patch_size * patch_size; }
    std::int64_t encoder_heads() const { return enc_heads > 0 ? enc_heads : std::max<std::int64_t>(1, enc_dim / 64); }
    std::int64_t decoder_heads() const { return dec_heads > 0 ? dec_heads : std::max<std::int64_t>(1, dec_dim / 64); }
};

/// Optimization schedule for one training run.
struct RunConfig {
    std::int64_t seed = 0;
    std::string optimizer = "adamw";
    double beta1 = 0.9;
    double beta2 = 0.99;
    double epsilon = 1e-6;
    double peak_lr = 1e-4;
    std::string schedule = "linear+cosine";  // "linear+cosine", "cosine", "constant"
    double lr_floor_ratio = 0.01;
    std::int64_t batch_size = 32;
    std::int64_t total_steps = 1000;
    std::int64_t warmup_steps = 50;
    double weight_decay = 0.0;
    double grad_clip = 0.0;  // 0 disables clipping
    double text_mixture_ratio = 0.1;
    double caption_dropout = 0.1;
    std::int64_t log_every = 50;
    std::int64_t checkpoint_every = 0;  // 0: only the final checkpoint
};

struct LmConfig {
    std::int64_t layers = 2;
    std::int64_t dim = 64;
    std::int64_t heads = 0;  // 0: max(1, dim / 64)
    std::int64_t mlp_ratio = 4;
    std::int64_t max_len = 128;
    std::int64_t text_vocab_size = 256;  // byte-level text

    std::int64_t num_heads() const { return heads > 0 ? heads : std::max<std::int64_t>(1, dim / 64); }
};

struct SamplingConfig {
    std::int64_t text_top_k = 50;
    double text_top_p = 1.0;
    std::int64_t visual_top_k = 4096;
    double visual_top_p = 0.9;
    double guidance_scale = 8.0;
    double temperature = 1.0;
    std::int64_t seed = 0;
    std::int64_t decode_steps = 16;
};

struct DataConfig {
    std::string manifest;
    std::int64_t resolution = 32;
    std::int64_t channels = 3;
};

/// Everything a CLI run can be configured with. Each member maps to a
/// top-level section of the config document.
struct ExperimentConfig {
    TokenizerConfig tokenizer;
    RunConfig train;
    LmConfig lm;
    RunConfig lm_train = default_lm_run();
    SamplingConfig sampling;
    DataConfig data;

    static RunConfig default_lm_run() {
        RunConfig r;
        r.beta2 = 0.95;
        r.peak_lr = 1e-3;
        r.schedule = "cosine";
        r.weight_decay = 0.05;
        r.grad_clip = 1.0;
        r.batch_size = 64;
        return r;
    }
};

void validate(const TokenizerConfig& c, const std::string& prefix = "tokenizer");
void validate(const RunConfig& c, const std::string& prefix = "train");
void validate(const LmConfig& c, const std::string& prefix = "lm");
void validate(const SamplingConfig& c, const std::string& prefix = "sampling");
void validate(const ExperimentConfig& c);

json to_json(const TokenizerConfig& c);
json to_json(const RunConfig& c);
json to_json(const LmConfig& c);
json to_json(const SamplingConfig& c);
json to_json(const ExperimentConfig& c);

// Unknown keys are rejected with a ConfigError naming the key path.
TokenizerConfig tokenizer_config_from_json(const json& j, const std::string& prefix = "tokenizer");
RunConfig run_config_from_json(const json& j, const std::string& prefix = "train", RunConfig base = {});
LmConfig lm_config_from_json(const json& j, const std::string& prefix = "lm");
SamplingConfig sampling_config_from_json(const json& j, const std::string& prefix = "sampling");
ExperimentConfig experiment_config_from_json(const json& j);

/// 64-bit FNV-1a over a canonical (sorted-key, compact) dump.
std::uint64_t config_hash(const json& canonical);
std::string hash_hex(std::uint64_t h);

struct ResolvedConfig {
    ExperimentConfig config;
    json document;
    std::uint64_t hash = 0;
};

/// Reads `path` (JSON; empty path means all defaults), applies `key=value`
/// overrides where key is "section.field", validates, and hashes the result.
ResolvedConfig resolve_config(const std::string& path, const std::vector<std::string>& overrides);
ResolvedConfig resolve_config(const json& document, const std::vector<std::string>& overrides);

}  // namespace ddt
