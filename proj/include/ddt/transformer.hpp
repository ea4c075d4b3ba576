#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include <torch/torch.h>

namespace ddt {

/// Multi-head scaled dot-product attention on already-projected q/k/v of
/// shape B x N x D. `causal` hides future positions.
torch::Tensor attention(const torch::Tensor& q, const torch::Tensor& k, const torch::Tensor& v, std::int64_t heads,
                        bool causal = false);

/// Per-stream weights of a joint block: everything except the attention
/// itself is private to the stream.
struct StreamLayerImpl : torch::nn::Module {
    StreamLayerImpl(std::int64_t dim, std::int64_t mlp_ratio, bool modulated);

    /// Shift/scale/gate pairs for the attention and MLP halves, each B x 1 x D.
    struct Modulation {
        torch::Tensor shift1, scale1, gate1, shift2, scale2, gate2;
    };
    Modulation modulation(const torch::Tensor& cond);

    torch::Tensor pre_attention(const torch::Tensor& x, const Modulation* mod);
    torch::Tensor post_attention(const torch::Tensor& x, const torch::Tensor& attn, const Modulation* mod);

    bool modulated;
    torch::nn::LayerNorm norm1{nullptr}, norm2{nullptr};
    torch::nn::Linear qkv{nullptr}, proj{nullptr}, fc1{nullptr}, fc2{nullptr};
    torch::nn::Linear ada{nullptr};  // present only when modulated
};
TORCH_MODULE(StreamLayer);

/// Dual-stream transformer block: two streams with separate weights whose
/// tokens attend jointly over the concatenated sequence [a ‖ b]. With
/// `modulated`, a conditioning vector drives adaptive LayerNorm shifts,
/// scales and residual gates in both streams (gates start at zero).
struct JointBlockImpl : torch::nn::Module {
    JointBlockImpl(std::int64_t dim, std::int64_t heads, std::int64_t mlp_ratio, bool modulated);

    std::pair<torch::Tensor, torch::Tensor> forward(const torch::Tensor& a, const torch::Tensor& b,
                                                    const torch::Tensor& cond = {});

    std::int64_t heads;
    StreamLayer stream_a{nullptr}, stream_b{nullptr};
};
TORCH_MODULE(JointBlock);

/// Pre-norm causal self-attention block.
struct CausalBlockImpl : torch::nn::Module {
    CausalBlockImpl(std::int64_t dim, std::int64_t heads, std::int64_t mlp_ratio);
    torch::Tensor forward(const torch::Tensor& x);

    std::int64_t heads;
    StreamLayer layer{nullptr};
};
TORCH_MODULE(CausalBlock);

enum class WeightInit {
    xavier_uniform,  // linear weights
    small_normal,    // linear weights ~ N(0, 0.02)
};

/// Initializes every Linear (zero bias) per `scheme`, embeddings with
/// N(0, 0.02), and zeroes adaLN modulation so modulated blocks start as the
/// identity.
void init_weights(torch::nn::Module& module, WeightInit scheme = WeightInit::xavier_uniform);

}  // namespace ddt
