#include "ddt/decoder.hpp"

#include <cmath>

#include "ddt/encoder.hpp"
#include "ddt/errors.hpp"

namespace ddt {

namespace F = torch::nn::functional;

torch::Tensor add_noise(const torch::Tensor& x0, double t, const torch::Tensor& eps) {
    if (!(t >= 0.0 && t <= 1.0)) throw DomainError("add_noise: t must lie in [0, 1], got " + std::to_string(t));
    TORCH_CHECK(x0.sizes() == eps.sizes(), "add_noise: x0 and eps shapes differ");
    return t * eps + (1.0 - t) * x0;
}

torch::Tensor add_noise(const torch::Tensor& x0, const torch::Tensor& t, const torch::Tensor& eps) {
    TORCH_CHECK(x0.sizes() == eps.sizes(), "add_noise: x0 and eps shapes differ");
    TORCH_CHECK(t.dim() == 1 && t.size(0) == x0.size(0), "add_noise: one t per item required");
    if ((t < 0).any().item<bool>() || (t > 1).any().item<bool>()) throw DomainError("add_noise: t must lie in [0, 1]");
    std::vector<std::int64_t> shape(x0.dim(), 1);
    shape[0] = x0.size(0);
    const auto tt = t.to(x0.dtype()).view(shape);
    return tt * eps + (1 - tt) * x0;
}

PrefixCondition prefix_mask(const torch::Tensor& full_tokens, std::int64_t t_index) {
    TORCH_CHECK(full_tokens.dim() == 2, "prefix_mask expects a T x m token table");
    const auto T = full_tokens.size(0);
    if (t_index < 0 || t_index > T)
        throw DomainError("prefix_mask: t_index " + std::to_string(t_index) + " outside [0, " + std::to_string(T) + "]");
    PrefixCondition c;
    c.active_len = t_index;
    c.tokens = torch::zeros_like(full_tokens);
    if (t_index > 0) c.tokens.narrow(0, 0, t_index).copy_(full_tokens.narrow(0, 0, t_index));
    c.mask.assign(static_cast<std::size_t>(T), false);
    for (std::int64_t i = 0; i < t_index; ++i) c.mask[i] = true;
    return c;
}

torch::Tensor prefix_mask_batch(const torch::Tensor& tokens, const torch::Tensor& t_index) {
    const auto T = tokens.size(1);
    auto keep = torch::arange(T, torch::kInt64).unsqueeze(0) < t_index.to(torch::kInt64).unsqueeze(1);
    return tokens * keep.unsqueeze(2).to(tokens.dtype());
}

std::int64_t prefix_length(double t, std::int64_t T) {
    return std::clamp<std::int64_t>(std::llround(t * static_cast<double>(T)), 0, T);
}

DecoderImpl::DecoderImpl(const TokenizerConfig& c) : cfg(c) {
    const auto D = cfg.dec_dim;
    token_embed = register_module("token_embed", torch::nn::Linear(cfg.code_dim, D));
    patch_embed = register_module("patch_embed", torch::nn::Linear(cfg.patch_dim(), D));
    time_fc1 = register_module("time_fc1", torch::nn::Linear(D, D));
    time_fc2 = register_module("time_fc2", torch::nn::Linear(D, D));
    blocks = register_module("blocks", torch::nn::ModuleList());
    for (std::int64_t i = 0; i < cfg.dec_layers; ++i) blocks->push_back(JointBlock(D, cfg.decoder_heads(), cfg.mlp_ratio, true));
    final_norm = register_module(
        "final_norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({D}).eps(1e-6).elementwise_affine(false)));
    final_ada = register_module("final_ada", torch::nn::Linear(D, 2 * D));
    final_out = register_module("final_out", torch::nn::Linear(D, cfg.patch_dim()));
    init_weights(*this);
    torch::NoGradGuard no_grad;
    final_ada->weight.zero_();
    final_ada->bias.zero_();
    final_out->weight.zero_();
    final_out->bias.zero_();
}

torch::Tensor DecoderImpl::forward(const torch::Tensor& x_t, const torch::Tensor& t, const torch::Tensor& cond) {
    TORCH_CHECK(x_t.dim() == 4 && x_t.size(1) == cfg.channels && x_t.size(2) == cfg.image_size &&
                    x_t.size(3) == cfg.image_size,
                "decoder input must be B x ", cfg.channels, " x ", cfg.image_size, " x ", cfg.image_size);
    TORCH_CHECK(cond.dim() == 3 && cond.size(1) == cfg.T && cond.size(2) == cfg.code_dim,
                "decoder condition must be B x ", cfg.T, " x ", cfg.code_dim, ", got ", cond.sizes());
    TORCH_CHECK(t.dim() == 1 && t.size(0) == x_t.size(0), "decoder needs one timestep per item");
    const auto D = cfg.dec_dim;
    const auto grid = cfg.image_size / cfg.patch_size;

    auto temb = sincos_1d(t * 1000.0, D, x_t.scalar_type());
    auto c = time_fc2->forward(F::silu(time_fc1->forward(temb)));

    auto tok = token_embed->forward(cond) + sincos_1d(cfg.T, D, x_t.scalar_type());
    auto img = patch_embed->forward(patchify(x_t, cfg.patch_size)) + sincos_2d(grid, grid, D, x_t.scalar_type());
    for (const auto& m : *blocks) std::tie(tok, img) = m->as<JointBlockImpl>()->forward(tok, img, c);

    auto mod = final_ada->forward(F::silu(c)).unsqueeze(1).chunk(2, -1);
    auto h = final_norm->forward(img) * (1 + mod[1]) + mod[0];
    return unpatchify(final_out->forward(h), cfg.channels, cfg.image_size, cfg.image_size, cfg.patch_size);
}

torch::Tensor predict_x0(Decoder& decoder, const torch::Tensor& x_t, const torch::Tensor& t, const torch::Tensor& cond) {
    auto out = decoder->forward(x_t, t, cond);
    if (decoder->cfg.prediction == "velocity") {
        // x_t = t*eps + (1-t)*x0 and v = eps - x0 give x0 = x_t - t*v.
        return x_t - t.to(x_t.dtype()).view({-1, 1, 1, 1}) * out;
    }
    return out;
}

torch::Tensor decode_forward(Decoder& decoder, const torch::Tensor& x_t, double t, const PrefixCondition& cond) {
    const auto expected = prefix_length(t, decoder->cfg.T);
    if (cond.active_len != expected)
        throw DomainError("decode_forward: condition has " + std::to_string(cond.active_len) +
                          " active tokens, timestep implies " + std::to_string(expected));
    auto tt = torch::full({1}, t, x_t.options());
    return predict_x0(decoder, x_t.unsqueeze(0), tt, cond.tokens.unsqueeze(0).to(x_t.dtype())).squeeze(0);
}

torch::Tensor reconstruction_loss(const torch::Tensor& prediction, const torch::Tensor& x0) {
    TORCH_CHECK(prediction.sizes() == x0.sizes(), "reconstruction_loss: shape mismatch");
    return (prediction - x0).pow(2).mean();
}

torch::Tensor reconstruction_loss(Decoder& decoder, const torch::Tensor& x0, const torch::Tensor& x_t,
                                  const torch::Tensor& t, const torch::Tensor& cond) {
    return reconstruction_loss(predict_x0(decoder, x_t, t, cond), x0);
}

torch::Tensor sampler_noise(std::uint64_t seed, const TokenizerConfig& cfg) {
    auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
    return torch::randn({cfg.channels, cfg.image_size, cfg.image_size}, gen, torch::kFloat32);
}

torch::Tensor sample_image_from(Decoder& decoder, const torch::Tensor& tokens, torch::Tensor x,
                                const SamplerOptions& opts) {
    if (opts.steps < 1) throw DomainError("sample_image: steps must be at least 1");
    const auto& cfg = decoder->cfg;
    TORCH_CHECK(tokens.dim() == 2 && tokens.size(0) == cfg.T && tokens.size(1) == cfg.code_dim,
                "sample_image expects T x m tokens");
    torch::NoGradGuard no_grad;
    const double dt = 1.0 / static_cast<double>(opts.steps);
    const auto cond_tokens = tokens.to(x.dtype());
    for (std::int64_t k = 0; k < opts.steps; ++k) {
        const double t = 1.0 - static_cast<double>(k) * dt;
        const auto cond = prefix_mask(cond_tokens, prefix_length(t, cfg.T));
        const auto x0_hat = decode_forward(decoder, x, t, cond);
        if (k == opts.steps - 1) {
            x = x0_hat;
        } else {
            const auto v = (x - x0_hat) / t;
            x = x - dt * v;
        }
    }
    return x.clamp(opts.clamp_lo, opts.clamp_hi);
}

torch::Tensor sample_image(Decoder& decoder, const torch::Tensor& tokens, std::uint64_t seed,
                           const SamplerOptions& opts) {
    return sample_image_from(decoder, tokens, sampler_noise(seed, decoder->cfg), opts);
}

}  // namespace ddt
