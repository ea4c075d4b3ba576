#pragma once

#include <cstdint>
#include <utility>

#include <torch/torch.h>

#include "ddt/config.hpp"
#include "ddt/transformer.hpp"

namespace ddt {

/// Splits B x C x H x W (or C x H x W) images into raster-ordered patches,
/// returning B x P x (C*p*p) (or P x (C*p*p)). Within a patch the layout is
/// channel, row, column.
torch::Tensor patchify(const torch::Tensor& images, std::int64_t patch_size);
/// Inverse of patchify.
torch::Tensor unpatchify(const torch::Tensor& patches, std::int64_t channels, std::int64_t height, std::int64_t width,
                         std::int64_t patch_size);

/// Sinusoidal table for integer positions [0, count): row p holds
/// sin(p*w_0..w_{d/2-1}) followed by cos(p*w_0..w_{d/2-1}), with
/// w_k = 10000^(-k/(d/2)). `dim` must be even.
torch::Tensor sincos_1d(std::int64_t count, std::int64_t dim, torch::Dtype dtype = torch::kFloat32);
/// Same table for arbitrary real positions (length-N vector) → N x dim.
torch::Tensor sincos_1d(const torch::Tensor& positions, std::int64_t dim, torch::Dtype dtype = torch::kFloat32);
/// 2-D table for a grid_h x grid_w raster: the first half of each row embeds
/// the row coordinate, the second half the column coordinate. `dim` must be
/// divisible by 4.
torch::Tensor sincos_2d(std::int64_t grid_h, std::int64_t grid_w, std::int64_t dim,
                        torch::Dtype dtype = torch::kFloat32);

/// Adds 1-D embeddings to the queries (T x n, or B x T x n) and 2-D grid
/// embeddings to the patch tokens (P x n, or B x P x n).
std::pair<torch::Tensor, torch::Tensor> positional_embed(const torch::Tensor& queries, const torch::Tensor& patches,
                                                         std::int64_t grid_h, std::int64_t grid_w);

/// Dual-stream image encoder. Learnable query tokens and image patch tokens
/// go through separate transformer weights but attend jointly; only the
/// query stream is returned.
struct EncoderImpl : torch::nn::Module {
    explicit EncoderImpl(const TokenizerConfig& cfg);

    /// images: B x C x H x W  →  B x T x enc_dim.
    torch::Tensor forward(const torch::Tensor& images);

    TokenizerConfig cfg;
    torch::Tensor queries;  // T x enc_dim
    torch::nn::Linear patch_embed{nullptr};
    torch::nn::ModuleList blocks;
    torch::nn::LayerNorm out_norm{nullptr};
};
TORCH_MODULE(Encoder);

/// Single-image convenience wrapper: C x H x W → T x enc_dim.
torch::Tensor encode(Encoder& encoder, const torch::Tensor& image);

}  // namespace ddt
