#include "ddt/transformer.hpp"

#include <cmath>

namespace ddt {

namespace F = torch::nn::functional;

torch::Tensor attention(const torch::Tensor& q, const torch::Tensor& k, const torch::Tensor& v, std::int64_t heads,
                        bool causal) {
    const auto B = q.size(0), N = q.size(1), D = q.size(2);
    const auto dh = D / heads;
    auto split = [&](const torch::Tensor& x) { return x.view({B, N, heads, dh}).transpose(1, 2); };
    auto qh = split(q), kh = split(k), vh = split(v);
    auto scores = torch::matmul(qh, kh.transpose(-2, -1)) / std::sqrt(static_cast<double>(dh));
    if (causal) {
        auto mask = torch::ones({N, N}, torch::TensorOptions().dtype(torch::kBool)).triu(1);
        scores = scores.masked_fill(mask, -std::numeric_limits<double>::infinity());
    }
    auto out = torch::matmul(torch::softmax(scores, -1), vh);
    return out.transpose(1, 2).reshape({B, N, D});
}

StreamLayerImpl::StreamLayerImpl(std::int64_t dim, std::int64_t mlp_ratio, bool modulated_) : modulated(modulated_) {
    const auto ln = torch::nn::LayerNormOptions({dim}).eps(1e-6).elementwise_affine(!modulated);
    norm1 = register_module("norm1", torch::nn::LayerNorm(ln));
    norm2 = register_module("norm2", torch::nn::LayerNorm(ln));
    qkv = register_module("qkv", torch::nn::Linear(dim, 3 * dim));
    proj = register_module("proj", torch::nn::Linear(dim, dim));
    fc1 = register_module("fc1", torch::nn::Linear(dim, mlp_ratio * dim));
    fc2 = register_module("fc2", torch::nn::Linear(mlp_ratio * dim, dim));
    if (modulated) ada = register_module("ada", torch::nn::Linear(dim, 6 * dim));
}

StreamLayerImpl::Modulation StreamLayerImpl::modulation(const torch::Tensor& cond) {
    auto chunks = ada->forward(F::silu(cond)).unsqueeze(1).chunk(6, -1);
    return {chunks[0], chunks[1], chunks[2], chunks[3], chunks[4], chunks[5]};
}

torch::Tensor StreamLayerImpl::pre_attention(const torch::Tensor& x, const Modulation* mod) {
    auto h = norm1->forward(x);
    if (mod) h = h * (1 + mod->scale1) + mod->shift1;
    return qkv->forward(h);
}

torch::Tensor StreamLayerImpl::post_attention(const torch::Tensor& x, const torch::Tensor& attn,
                                              const Modulation* mod) {
    auto a = proj->forward(attn);
    auto out = mod ? x + mod->gate1 * a : x + a;
    auto h = norm2->forward(out);
    if (mod) h = h * (1 + mod->scale2) + mod->shift2;
    auto m = fc2->forward(F::gelu(fc1->forward(h), F::GELUFuncOptions().approximate("tanh")));
    return mod ? out + mod->gate2 * m : out + m;
}

JointBlockImpl::JointBlockImpl(std::int64_t dim, std::int64_t heads_, std::int64_t mlp_ratio, bool modulated)
    : heads(heads_) {
    stream_a = register_module("a", StreamLayer(dim, mlp_ratio, modulated));
    stream_b = register_module("b", StreamLayer(dim, mlp_ratio, modulated));
}

std::pair<torch::Tensor, torch::Tensor> JointBlockImpl::forward(const torch::Tensor& a, const torch::Tensor& b,
                                                                const torch::Tensor& cond) {
    std::optional<StreamLayerImpl::Modulation> mod_a, mod_b;
    if (stream_a->modulated) {
        TORCH_CHECK(cond.defined(), "modulated joint block needs a conditioning vector");
        mod_a = stream_a->modulation(cond);
        mod_b = stream_b->modulation(cond);
    }
    const auto* pa = mod_a ? &*mod_a : nullptr;
    const auto* pb = mod_b ? &*mod_b : nullptr;

    auto qkv_a = stream_a->pre_attention(a, pa).chunk(3, -1);
    auto qkv_b = stream_b->pre_attention(b, pb).chunk(3, -1);
    auto q = torch::cat({qkv_a[0], qkv_b[0]}, 1);
    auto k = torch::cat({qkv_a[1], qkv_b[1]}, 1);
    auto v = torch::cat({qkv_a[2], qkv_b[2]}, 1);
    auto joint = attention(q, k, v, heads);
    const auto na = a.size(1);
    auto out_a = stream_a->post_attention(a, joint.narrow(1, 0, na), pa);
    auto out_b = stream_b->post_attention(b, joint.narrow(1, na, b.size(1)), pb);
    return {out_a, out_b};
}

CausalBlockImpl::CausalBlockImpl(std::int64_t dim, std::int64_t heads_, std::int64_t mlp_ratio) : heads(heads_) {
    layer = register_module("layer", StreamLayer(dim, mlp_ratio, false));
}

torch::Tensor CausalBlockImpl::forward(const torch::Tensor& x) {
    auto qkv = layer->pre_attention(x, nullptr).chunk(3, -1);
    return layer->post_attention(x, attention(qkv[0], qkv[1], qkv[2], heads, true), nullptr);
}

void init_weights(torch::nn::Module& module, WeightInit scheme) {
    torch::NoGradGuard no_grad;
    module.apply([scheme](torch::nn::Module& m) {
        if (auto* lin = dynamic_cast<torch::nn::LinearImpl*>(&m)) {
            if (scheme == WeightInit::xavier_uniform)
                torch::nn::init::xavier_uniform_(lin->weight);
            else
                torch::nn::init::normal_(lin->weight, 0.0, 0.02);
            if (lin->bias.defined()) torch::nn::init::zeros_(lin->bias);
        } else if (auto* emb = dynamic_cast<torch::nn::EmbeddingImpl*>(&m)) {
            torch::nn::init::normal_(emb->weight, 0.0, 0.02);
        }
    });
    // Second pass: adaLN layers are zeroed after the Linear pass has set them.
    module.apply([](torch::nn::Module& m) {
        if (auto* s = dynamic_cast<StreamLayerImpl*>(&m); s && s->modulated) {
            torch::nn::init::zeros_(s->ada->weight);
            torch::nn::init::zeros_(s->ada->bias);
        }
    });
}

}  // namespace ddt
