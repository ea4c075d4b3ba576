#include "ddt/encoder.hpp"

#include <cmath>

#include "ddt/errors.hpp"

namespace ddt {

torch::Tensor patchify(const torch::Tensor& images, std::int64_t p) {
    const bool single = images.dim() == 3;
    const auto x = single ? images.unsqueeze(0) : images;
    TORCH_CHECK(x.dim() == 4, "patchify expects C x H x W or B x C x H x W");
    const auto B = x.size(0), C = x.size(1), H = x.size(2), W = x.size(3);
    if (p <= 0 || H % p != 0 || W % p != 0)
        throw ConfigError("tokenizer.patch_size", "image size " + std::to_string(H) + "x" + std::to_string(W) +
                                                      " is not divisible by patch size " + std::to_string(p));
    auto out = x.reshape({B, C, H / p, p, W / p, p}).permute({0, 2, 4, 1, 3, 5}).reshape({B, (H / p) * (W / p), C * p * p});
    return single ? out.squeeze(0) : out;
}

torch::Tensor unpatchify(const torch::Tensor& patches, std::int64_t C, std::int64_t H, std::int64_t W, std::int64_t p) {
    const bool single = patches.dim() == 2;
    const auto x = single ? patches.unsqueeze(0) : patches;
    const auto B = x.size(0);
    auto out = x.reshape({B, H / p, W / p, C, p, p}).permute({0, 3, 1, 4, 2, 5}).reshape({B, C, H, W});
    return single ? out.squeeze(0) : out;
}

torch::Tensor sincos_1d(const torch::Tensor& positions, std::int64_t dim, torch::Dtype dtype) {
    TORCH_CHECK(dim % 2 == 0, "sinusoidal embedding dimension must be even");
    const auto half = dim / 2;
    auto opts = torch::TensorOptions().dtype(torch::kFloat64);
    auto k = torch::arange(half, opts);
    auto freqs = torch::exp(-std::log(10000.0) * k / static_cast<double>(half));
    auto angles = positions.to(torch::kFloat64).reshape({-1, 1}) * freqs.reshape({1, -1});
    return torch::cat({torch::sin(angles), torch::cos(angles)}, 1).to(dtype);
}

torch::Tensor sincos_1d(std::int64_t count, std::int64_t dim, torch::Dtype dtype) {
    return sincos_1d(torch::arange(count, torch::TensorOptions().dtype(torch::kFloat64)), dim, dtype);
}

torch::Tensor sincos_2d(std::int64_t grid_h, std::int64_t grid_w, std::int64_t dim, torch::Dtype dtype) {
    TORCH_CHECK(dim % 4 == 0, "2-D sinusoidal embedding dimension must be divisible by 4");
    auto opts = torch::TensorOptions().dtype(torch::kFloat64);
    auto rows = torch::arange(grid_h, opts).repeat_interleave(grid_w);
    auto cols = torch::arange(grid_w, opts).repeat({grid_h});
    return torch::cat({sincos_1d(rows, dim / 2, dtype), sincos_1d(cols, dim / 2, dtype)}, 1);
}

std::pair<torch::Tensor, torch::Tensor> positional_embed(const torch::Tensor& queries, const torch::Tensor& patches,
                                                         std::int64_t grid_h, std::int64_t grid_w) {
    const auto T = queries.size(-2), n = queries.size(-1);
    const auto P = patches.size(-2), np = patches.size(-1);
    TORCH_CHECK(P == grid_h * grid_w, "patch count does not match the grid");
    auto q = queries + sincos_1d(T, n, queries.scalar_type());
    auto x = patches + sincos_2d(grid_h, grid_w, np, patches.scalar_type());
    return {q, x};
}

EncoderImpl::EncoderImpl(const TokenizerConfig& c) : cfg(c) {
    queries = register_parameter("queries", torch::randn({cfg.T, cfg.enc_dim}) * 0.02);
    patch_embed = register_module("patch_embed", torch::nn::Linear(cfg.patch_dim(), cfg.enc_dim));
    blocks = register_module("blocks", torch::nn::ModuleList());
    for (std::int64_t i = 0; i < cfg.enc_layers; ++i)
        blocks->push_back(JointBlock(cfg.enc_dim, cfg.encoder_heads(), cfg.mlp_ratio, false));
    out_norm = register_module("out_norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({cfg.enc_dim}).eps(1e-6)));
    init_weights(*this);
}

torch::Tensor EncoderImpl::forward(const torch::Tensor& images) {
    TORCH_CHECK(images.dim() == 4 && images.size(1) == cfg.channels && images.size(2) == cfg.image_size &&
                    images.size(3) == cfg.image_size,
                "encoder input must be B x ", cfg.channels, " x ", cfg.image_size, " x ", cfg.image_size, ", got ",
                images.sizes());
    const auto B = images.size(0);
    const auto grid = cfg.image_size / cfg.patch_size;
    auto patches = patch_embed->forward(patchify(images, cfg.patch_size));
    auto [q, x] = positional_embed(queries.unsqueeze(0).expand({B, cfg.T, cfg.enc_dim}), patches, grid, grid);
    for (const auto& m : *blocks) std::tie(q, x) = m->as<JointBlockImpl>()->forward(q, x);
    return out_norm->forward(q);
}

torch::Tensor encode(Encoder& encoder, const torch::Tensor& image) {
    return encoder->forward(image.unsqueeze(0)).squeeze(0);
}

}  // namespace ddt
