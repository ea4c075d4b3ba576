#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <torch/torch.h>

#include "ddt/checkpoint.hpp"
#include "ddt/config.hpp"
#include "ddt/token_file.hpp"
#include "ddt/transformer.hpp"

namespace ddt {

/// Mixed vocabulary: text ids first, then the four delimiters, then one id
/// per codebook entry.
///
///     [0, text)              text block (bytes at desk scale)
///     text + 0..3            [BOS] [EOS] [BOV] [EOV]
///     [text + 4, + codebook) visual block
struct VocabularyLayout {
    VocabularyLayout() = default;
    VocabularyLayout(std::int64_t text_vocab_size, std::int64_t codebook_size);

    std::int64_t text_vocab_size = 256;
    std::int64_t visual_vocab_size = 512;
    std::int64_t bos = 256, eos = 257, bov = 258, eov = 259;
    std::int64_t visual_offset = 260;

    std::int64_t size() const { return visual_offset + visual_vocab_size; }
    bool is_text(std::int64_t id) const { return id >= 0 && id < text_vocab_size; }
    bool is_visual(std::int64_t id) const { return id >= visual_offset && id < size(); }
    std::int64_t visual_id(std::uint32_t code) const;
    std::uint32_t code_of(std::int64_t id) const;

    json to_json() const;
    static VocabularyLayout from_json(const json& j);
};

std::vector<std::int64_t> encode_text(const std::string& text);
std::string decode_text(const std::vector<std::int64_t>& ids);

struct MultimodalSequence {
    std::vector<std::int64_t> ids;
    std::vector<bool> loss_mask;  // per position; position 0 never counts
};

/// [BOS] caption [BOV] visual [EOV] [EOS]. An empty caption is the
/// caption-dropped form. Throws DomainError if visual.size() != T.
MultimodalSequence build_pretrain_sequence(const std::vector<std::int64_t>& caption, const TokenSequence& visual,
                                           const VocabularyLayout& layout, std::int64_t T);
/// [BOS] text [EOS], the pure-text mixture form.
MultimodalSequence build_text_sequence(const std::vector<std::int64_t>& text, const VocabularyLayout& layout);
/// Inverse of build_pretrain_sequence.
std::pair<std::vector<std::int64_t>, TokenSequence> parse_pretrain_sequence(const MultimodalSequence& seq,
                                                                            const VocabularyLayout& layout,
                                                                            std::int64_t T);

/// Decoder-only transformer with one shared output head over the full
/// vocabulary.
struct TransformerLMImpl : torch::nn::Module {
    TransformerLMImpl(const LmConfig& cfg, std::int64_t vocab_size);

    /// ids: B x S int64 → logits B x S x vocab.
    torch::Tensor forward(const torch::Tensor& ids);
    /// Logits for the next token after `ids`, as a 1-D tensor.
    torch::Tensor next_logits(const std::vector<std::int64_t>& ids);

    LmConfig cfg;
    std::int64_t vocab_size;
    torch::nn::Embedding tok_embed{nullptr}, pos_embed{nullptr};
    torch::nn::ModuleList blocks;
    torch::nn::LayerNorm norm{nullptr};
    torch::nn::Linear head{nullptr};
};
TORCH_MODULE(TransformerLM);

/// Next-token cross-entropy averaged over positions whose target has
/// mask == true. logits: (B x) L x V predicting targets (B x) L; mask (B x) L.
/// An all-false mask yields 0 (and a warning on stderr).
torch::Tensor lm_loss(const torch::Tensor& logits, const torch::Tensor& targets, const torch::Tensor& mask);
/// Convenience: logits (S-1) x V for ids[1..S), mask = seq.loss_mask[1..S).
torch::Tensor lm_loss(const torch::Tensor& logits, const MultimodalSequence& seq);
/// Per-position negative log-likelihood, same leading shape as targets.
torch::Tensor token_nll(const torch::Tensor& logits, const torch::Tensor& targets);

enum class Modality { text, visual };

/// Tracks which block the next token must come from.
struct ModalityState {
    Modality mode = Modality::text;
    std::int64_t visual_count = 0;

    void observe(std::int64_t id, const VocabularyLayout& layout);
};

/// Sets disallowed logits to -inf (copy). Text mode bans the visual block and
/// [EOV]; visual mode allows only the visual block until `visual_count`
/// reaches T, then only [EOV].
torch::Tensor modality_mask(const torch::Tensor& logits, Modality mode, const VocabularyLayout& layout,
                            std::int64_t visual_count = 0, std::int64_t T = 0);

/// Candidate set after top-k then top-p filtering, with renormalized
/// probabilities, in descending-logit order (ties by lower id).
std::vector<std::pair<std::int64_t, double>> nucleus_candidates(const torch::Tensor& logits, std::int64_t top_k,
                                                                double top_p, double temperature = 1.0);
/// Draws from nucleus_candidates. Throws SamplingError if no logit is finite.
std::int64_t topk_topp_sample(const torch::Tensor& logits, std::int64_t top_k, double top_p, double temperature,
                              std::mt19937_64& rng);
std::int64_t topk_topp_sample(const torch::Tensor& logits, std::int64_t top_k, double top_p, double temperature,
                              std::uint64_t seed);

/// Classifier-free guidance s*cond + (1-s)*uncond. Returns `cond` exactly at
/// s = 1 and `uncond` exactly at s = 0.
torch::Tensor cfg_combine(const torch::Tensor& cond, const torch::Tensor& uncond, double scale);

/// Emits [BOV], T guided visual tokens, [EOV] after `caption`; returns the
/// T codebook ids. The unconditional branch uses the empty caption.
TokenSequence generate_image_tokens(TransformerLM& model, const std::vector<std::int64_t>& caption,
                                    const SamplingConfig& sampling, const VocabularyLayout& layout, std::int64_t T,
                                    std::mt19937_64& rng);
TokenSequence generate_image_tokens(TransformerLM& model, const std::vector<std::int64_t>& caption,
                                    const SamplingConfig& sampling, const VocabularyLayout& layout, std::int64_t T);

/// Continues [BOS] prompt with text-block tokens until [EOS] or `max_len`
/// new tokens; returns the new text ids ([EOS] excluded).
std::vector<std::int64_t> generate_text(TransformerLM& model, const std::vector<std::int64_t>& prompt,
                                        const SamplingConfig& sampling, const VocabularyLayout& layout,
                                        std::int64_t max_len, std::mt19937_64& rng);
std::vector<std::int64_t> generate_text(TransformerLM& model, const std::vector<std::int64_t>& prompt,
                                        const SamplingConfig& sampling, const VocabularyLayout& layout,
                                        std::int64_t max_len);

/// Per-step NLL totals split by target modality.
struct NllRecord {
    std::int64_t step = 0;
    double text_nll_sum = 0;
    std::int64_t text_count = 0;
    double visual_nll_sum = 0;
    std::int64_t visual_count = 0;
};

struct PerplexityPoint {
    std::int64_t step = 0;  // last step of the window
    std::optional<double> text;
    std::optional<double> visual;
};

/// exp(mean NLL) per modality over consecutive windows of `window` records.
/// A modality with no positions in a window has no value for that point.
std::vector<PerplexityPoint> track_perplexity(const std::vector<NllRecord>& records, std::int64_t window);

struct LmReport {
    std::int64_t step = 0;
    double loss = 0;
    double lr = 0;
    NllRecord nll;

    json to_json() const;
};

/// Caption/image pairs plus optional pure-text samples.
struct LmCorpus {
    std::vector<std::vector<std::int64_t>> captions;
    std::vector<TokenSequence> visuals;
    std::vector<std::vector<std::int64_t>> texts;
};

/// Trains `model` on the unified next-token objective for run.total_steps.
/// Each batch slot is a pure-text sequence with probability
/// run.text_mixture_ratio (when texts exist); captions are dropped with
/// probability run.caption_dropout.
std::vector<LmReport> train_lm(TransformerLM& model, const LmCorpus& corpus, const VocabularyLayout& layout,
                               std::int64_t T, const RunConfig& run,
                               const std::function<void(const LmReport&)>& on_report = {});

CheckpointContainer lm_to_checkpoint(const TransformerLM& model, const VocabularyLayout& layout, std::int64_t T,
                                     const json& metadata = json::object(), std::uint64_t step = 0);
struct LoadedLm {
    TransformerLM model{nullptr};
    VocabularyLayout layout;
    std::int64_t T = 0;
    json metadata;
};
LoadedLm lm_from_checkpoint(const CheckpointContainer& c);

}  // namespace ddt
