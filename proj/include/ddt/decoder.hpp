#pragma once

#include <cstdint>
#include <vector>

#include <torch/torch.h>

#include "ddt/config.hpp"
#include "ddt/transformer.hpp"

namespace ddt {

/// x_t = t * eps + (1 - t) * x0. Throws DomainError unless t ∈ [0, 1].
torch::Tensor add_noise(const torch::Tensor& x0, double t, const torch::Tensor& eps);
/// Per-item variant: t has one entry per leading-dimension item of x0.
torch::Tensor add_noise(const torch::Tensor& x0, const torch::Tensor& t, const torch::Tensor& eps);

/// Decoder conditioning for one image: the first `active_len` token rows,
/// the rest zero.
struct PrefixCondition {
    torch::Tensor tokens;  // T x m
    std::int64_t active_len = 0;
    std::vector<bool> mask;
};

/// Keeps rows [0, t_index) of a T x m token table and zeroes the rest.
PrefixCondition prefix_mask(const torch::Tensor& full_tokens, std::int64_t t_index);
/// Batched form: tokens B x T x m, t_index B (int64) → masked B x T x m.
/// Differentiable in `tokens`.
torch::Tensor prefix_mask_batch(const torch::Tensor& tokens, const torch::Tensor& t_index);

/// Prefix length seen by the decoder at continuous time t.
std::int64_t prefix_length(double t, std::int64_t T);

/// MMDiT-style diffusion decoder. The token stream (prefix-masked quantized
/// codes, lifted from m to dec_dim) and the noisy-image patch stream have
/// separate weights and attend jointly; the timestep embedding modulates
/// both streams. No pooled conditioning vector is used.
struct DecoderImpl : torch::nn::Module {
    explicit DecoderImpl(const TokenizerConfig& cfg);

    /// x_t: B x C x H x W, t: B (real in [0,1]), cond: B x T x m (already
    /// prefix-masked). Returns the raw network output in image shape: the
    /// x0 estimate, or the velocity when cfg.prediction == "velocity".
    torch::Tensor forward(const torch::Tensor& x_t, const torch::Tensor& t, const torch::Tensor& cond);

    TokenizerConfig cfg;
    torch::nn::Linear token_embed{nullptr}, patch_embed{nullptr};
    torch::nn::Linear time_fc1{nullptr}, time_fc2{nullptr};
    torch::nn::ModuleList blocks;
    torch::nn::LayerNorm final_norm{nullptr};
    torch::nn::Linear final_ada{nullptr}, final_out{nullptr};
};
TORCH_MODULE(Decoder);

/// x0 estimate from a decoder, whichever quantity it regresses.
torch::Tensor predict_x0(Decoder& decoder, const torch::Tensor& x_t, const torch::Tensor& t, const torch::Tensor& cond);

/// Single-image convenience: x_t C x H x W, cond from prefix_mask.
torch::Tensor decode_forward(Decoder& decoder, const torch::Tensor& x_t, double t, const PrefixCondition& cond);

/// Mean squared error over all elements.
torch::Tensor reconstruction_loss(const torch::Tensor& prediction, const torch::Tensor& x0);
/// Runs the decoder on (x_t, t, cond) and scores it against x0.
torch::Tensor reconstruction_loss(Decoder& decoder, const torch::Tensor& x0, const torch::Tensor& x_t,
                                  const torch::Tensor& t, const torch::Tensor& cond);

struct SamplerOptions {
    std::int64_t steps = 16;
    double clamp_lo = -1.0;
    double clamp_hi = 1.0;
};

/// Starting noise for the sampler, drawn from `seed` only.
torch::Tensor sampler_noise(std::uint64_t seed, const TokenizerConfig& cfg);

/// Euler integration from t = 1 to t = 0 over `steps` uniform substeps. At
/// time t the decoder sees prefix_mask(tokens, round(t*T)); the x0 estimate
/// becomes the velocity (x_t - x0)/t, and the last substep returns the x0
/// estimate directly. tokens: T x m quantized entries. Output clamped.
torch::Tensor sample_image(Decoder& decoder, const torch::Tensor& tokens, std::uint64_t seed,
                           const SamplerOptions& opts = {});
/// Same, starting from an explicit noise image.
torch::Tensor sample_image_from(Decoder& decoder, const torch::Tensor& tokens, torch::Tensor noise,
                                const SamplerOptions& opts = {});

}  // namespace ddt
