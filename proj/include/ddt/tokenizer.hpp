#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "ddt/checkpoint.hpp"
#include "ddt/config.hpp"
#include "ddt/decoder.hpp"
#include "ddt/encoder.hpp"
#include "ddt/quantizer.hpp"
#include "ddt/token_file.hpp"

namespace ddt {

/// Encoder, code-space projection, EMA codebook and diffusion decoder.
struct TokenizerModel {
    TokenizerModel(const TokenizerConfig& cfg, std::uint64_t seed);

    TokenizerConfig cfg;
    Encoder encoder{nullptr};
    torch::nn::Linear proj{nullptr};
    Codebook codebook;
    Decoder decoder{nullptr};

    std::vector<torch::Tensor> parameters() const;

    /// B x C x H x W → B x T x m code-space features.
    torch::Tensor features(const torch::Tensor& images);
    /// B x C x H x W → B x T token ids.
    torch::Tensor tokenize(const torch::Tensor& images);
    std::vector<TokenSequence> tokenize_sequences(const torch::Tensor& images, std::int64_t batch = 64);
    /// T ids → T x m codebook entries (float32).
    torch::Tensor embed(const TokenSequence& ids) const;

    void set_train(bool on);

    CheckpointContainer to_checkpoint(const json& metadata = json::object(), std::uint64_t step = 0) const;
    static TokenizerModel from_checkpoint(const CheckpointContainer& c);
};

/// One training step's numbers. total == recon + commitment_weight * commit.
struct LossReport {
    std::int64_t step = 0;
    double recon = 0;
    double commit = 0;
    double total = 0;
    double codebook_usage = 0;
    double lr = 0;
    std::int64_t codes_reset = 0;

    json to_json() const;
};

/// Warmup-then-decay learning rate:
///   linear+cosine  0 → peak linearly over warmup_steps, cosine to peak*lr_floor_ratio at total_steps
///   cosine         cosine from peak at step 0 to the floor
///   constant       linear warmup, then peak
double lr_schedule(std::int64_t step, const RunConfig& run);

/// Raised when a step produces a non-finite loss. `item` is the first batch
/// index whose reconstruction term is non-finite (-1 if only the commitment
/// term is).
class NonFiniteLoss : public std::runtime_error {
public:
    NonFiniteLoss(std::int64_t step, std::int64_t item, const std::string& what)
        : std::runtime_error(what), step_(step), item_(item) {}
    std::int64_t step() const { return step_; }
    std::int64_t item() const { return item_; }

private:
    std::int64_t step_;
    std::int64_t item_;
};

/// Owns the optimizer and all randomness of tokenizer training.
class TokenizerTrainer {
public:
    TokenizerTrainer(TokenizerModel& model, const RunConfig& run);

    /// encode → project → quantize (straight-through) → per-item t_index in
    /// {1..T} → add_noise → decode with the t_index prefix → loss → AdamW step
    /// → EMA codebook update → dead-code reset.
    LossReport train_step(const torch::Tensor& images);

    /// Deterministic probe of the reconstruction term: fixed (t_index, eps)
    /// per item drawn from `seed`, no parameter or codebook change.
    double probe_recon(const torch::Tensor& images, std::uint64_t seed);

    std::int64_t step() const { return step_; }
    const RunConfig& run() const { return run_; }

private:
    TokenizerModel& model_;
    RunConfig run_;
    std::unique_ptr<torch::optim::AdamW> opt_;
    std::mt19937_64 reset_rng_;
    std::int64_t step_ = 0;
};

/// Per-item draws for a (seed, step, item) triple.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0);

/// PSNR in dB for a value span `max_value`; capped at 99 dB (including MSE 0).
double psnr(const torch::Tensor& a, const torch::Tensor& b, double max_value = 2.0);
constexpr double kPsnrCap = 99.0;

struct ReconstructionReport {
    double mean_psnr = 0;
    std::vector<double> per_image;
    std::vector<torch::Tensor> reconstructions;
};

/// Tokenizes each image and decodes its full token sequence with
/// sample_image(seed + i).
ReconstructionReport eval_reconstruction(TokenizerModel& model, const torch::Tensor& images, std::int64_t steps,
                                         std::uint64_t seed);

/// Drives TokenizerTrainer over a dataset for run.total_steps, cycling
/// through seeded epoch orders. `on_report` sees every step's report.
void train_tokenizer(TokenizerModel& model, const torch::Tensor& images, const RunConfig& run,
                     const std::function<void(const LossReport&)>& on_report = {});

}  // namespace ddt
