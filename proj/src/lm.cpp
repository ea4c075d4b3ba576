#include "ddt/lm.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <limits>
#include <numeric>

#include "ddt/errors.hpp"
#include "ddt/tokenizer.hpp"

namespace ddt {

namespace {
constexpr double kNegInf = -std::numeric_limits<double>::infinity();
}

VocabularyLayout::VocabularyLayout(std::int64_t text, std::int64_t codebook)
    : text_vocab_size(text),
      visual_vocab_size(codebook),
      bos(text),
      eos(text + 1),
      bov(text + 2),
      eov(text + 3),
      visual_offset(text + 4) {
    if (text <= 0 || codebook <= 0) throw ConfigError("lm", "vocabulary blocks must be non-empty");
}

std::int64_t VocabularyLayout::visual_id(std::uint32_t code) const {
    if (code >= static_cast<std::uint64_t>(visual_vocab_size))
        throw DomainError("visual code " + std::to_string(code) + " outside the codebook");
    return visual_offset + code;
}

std::uint32_t VocabularyLayout::code_of(std::int64_t id) const {
    if (!is_visual(id)) throw DomainError("vocabulary id " + std::to_string(id) + " is not a visual token");
    return static_cast<std::uint32_t>(id - visual_offset);
}

json VocabularyLayout::to_json() const {
    return json{{"text_vocab_size", text_vocab_size}, {"visual_vocab_size", visual_vocab_size}};
}

VocabularyLayout VocabularyLayout::from_json(const json& j) {
    return VocabularyLayout(j.at("text_vocab_size").get<std::int64_t>(), j.at("visual_vocab_size").get<std::int64_t>());
}

std::vector<std::int64_t> encode_text(const std::string& text) {
    std::vector<std::int64_t> ids;
    ids.reserve(text.size());
    for (unsigned char c : text) ids.push_back(c);
    return ids;
}

std::string decode_text(const std::vector<std::int64_t>& ids) {
    std::string s;
    for (auto id : ids)
        if (id >= 0 && id < 256) s.push_back(static_cast<char>(id));
    return s;
}

MultimodalSequence build_pretrain_sequence(const std::vector<std::int64_t>& caption, const TokenSequence& visual,
                                           const VocabularyLayout& layout, std::int64_t T) {
    if (static_cast<std::int64_t>(visual.size()) != T)
        throw DomainError("visual sequence has length " + std::to_string(visual.size()) + ", expected " +
                          std::to_string(T));
    MultimodalSequence s;
    s.ids.reserve(caption.size() + T + 4);
    s.ids.push_back(layout.bos);
    for (auto id : caption) {
        if (!layout.is_text(id)) throw DomainError("caption id " + std::to_string(id) + " is not a text token");
        s.ids.push_back(id);
    }
    s.ids.push_back(layout.bov);
    for (auto code : visual) s.ids.push_back(layout.visual_id(code));
    s.ids.push_back(layout.eov);
    s.ids.push_back(layout.eos);
    s.loss_mask.assign(s.ids.size(), true);
    s.loss_mask[0] = false;
    return s;
}

MultimodalSequence build_text_sequence(const std::vector<std::int64_t>& text, const VocabularyLayout& layout) {
    MultimodalSequence s;
    s.ids.push_back(layout.bos);
    for (auto id : text) {
        if (!layout.is_text(id)) throw DomainError("text id " + std::to_string(id) + " is not a text token");
        s.ids.push_back(id);
    }
    s.ids.push_back(layout.eos);
    s.loss_mask.assign(s.ids.size(), true);
    s.loss_mask[0] = false;
    return s;
}

std::pair<std::vector<std::int64_t>, TokenSequence> parse_pretrain_sequence(const MultimodalSequence& seq,
                                                                            const VocabularyLayout& layout,
                                                                            std::int64_t T) {
    const auto& ids = seq.ids;
    const auto n = static_cast<std::int64_t>(ids.size());
    if (n < T + 4 || ids.front() != layout.bos || ids[n - 1] != layout.eos || ids[n - 2] != layout.eov)
        throw DomainError("not a [BOS] caption [BOV] visual [EOV] [EOS] sequence");
    const auto bov_at = n - 3 - T;
    if (ids[bov_at] != layout.bov) throw DomainError("visual span does not hold exactly T tokens");
    std::vector<std::int64_t> caption(ids.begin() + 1, ids.begin() + bov_at);
    for (auto id : caption)
        if (!layout.is_text(id)) throw DomainError("caption holds a non-text id");
    TokenSequence visual;
    for (auto i = bov_at + 1; i < n - 2; ++i) visual.push_back(layout.code_of(ids[i]));
    return {caption, visual};
}

TransformerLMImpl::TransformerLMImpl(const LmConfig& c, std::int64_t vocab) : cfg(c), vocab_size(vocab) {
    validate(cfg);
    tok_embed = register_module("tok_embed", torch::nn::Embedding(vocab_size, cfg.dim));
    pos_embed = register_module("pos_embed", torch::nn::Embedding(cfg.max_len, cfg.dim));
    blocks = register_module("blocks", torch::nn::ModuleList());
    for (std::int64_t i = 0; i < cfg.layers; ++i) blocks->push_back(CausalBlock(cfg.dim, cfg.num_heads(), cfg.mlp_ratio));
    norm = register_module("norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({cfg.dim}).eps(1e-6)));
    head = register_module("head", torch::nn::Linear(cfg.dim, vocab_size));
    init_weights(*this, WeightInit::small_normal);
}

torch::Tensor TransformerLMImpl::forward(const torch::Tensor& ids) {
    TORCH_CHECK(ids.dim() == 2, "LM input must be B x S");
    const auto S = ids.size(1);
    TORCH_CHECK(S <= cfg.max_len, "sequence length ", S, " exceeds max_len ", cfg.max_len);
    auto x = tok_embed->forward(ids) + pos_embed->forward(torch::arange(S, torch::kInt64)).unsqueeze(0);
    for (const auto& m : *blocks) x = m->as<CausalBlockImpl>()->forward(x);
    return head->forward(norm->forward(x));
}

torch::Tensor TransformerLMImpl::next_logits(const std::vector<std::int64_t>& ids) {
    torch::NoGradGuard no_grad;
    auto t = torch::tensor(ids, torch::kInt64).unsqueeze(0);
    return forward(t)[0][-1];
}

torch::Tensor token_nll(const torch::Tensor& logits, const torch::Tensor& targets) {
    const auto V = logits.size(-1);
    auto logp = torch::log_softmax(logits.reshape({-1, V}), -1);
    auto nll = -logp.gather(1, targets.reshape({-1, 1}).to(torch::kInt64)).squeeze(1);
    return nll.view(targets.sizes());
}

torch::Tensor lm_loss(const torch::Tensor& logits, const torch::Tensor& targets, const torch::Tensor& mask) {
    TORCH_CHECK(logits.sizes().slice(0, logits.dim() - 1) == targets.sizes(), "lm_loss: logits/targets misaligned");
    TORCH_CHECK(mask.sizes() == targets.sizes(), "lm_loss: mask/targets misaligned");
    const auto m = mask.to(logits.dtype());
    const auto count = m.sum();
    if (count.item<double>() == 0) {
        std::cerr << "warning: lm_loss called with an all-false loss mask; returning 0\n";
        return (logits.sum() * 0).reshape({});
    }
    return (token_nll(logits, targets) * m).sum() / count;
}

torch::Tensor lm_loss(const torch::Tensor& logits, const MultimodalSequence& seq) {
    const auto S = static_cast<std::int64_t>(seq.ids.size());
    TORCH_CHECK(logits.dim() == 2 && logits.size(0) == S - 1, "lm_loss: expected (S-1) x V logits");
    std::vector<std::int64_t> targets(seq.ids.begin() + 1, seq.ids.end());
    std::vector<std::uint8_t> mask(seq.loss_mask.begin() + 1, seq.loss_mask.end());
    return lm_loss(logits, torch::tensor(targets, torch::kInt64),
                   torch::from_blob(mask.data(), {S - 1}, torch::kUInt8).to(torch::kBool));
}

void ModalityState::observe(std::int64_t id, const VocabularyLayout& layout) {
    if (id == layout.bov) {
        mode = Modality::visual;
        visual_count = 0;
    } else if (id == layout.eov) {
        mode = Modality::text;
        visual_count = 0;
    } else if (layout.is_visual(id)) {
        ++visual_count;
    }
}

torch::Tensor modality_mask(const torch::Tensor& logits, Modality mode, const VocabularyLayout& layout,
                            std::int64_t visual_count, std::int64_t T) {
    TORCH_CHECK(logits.dim() == 1 && logits.size(0) == layout.size(), "modality_mask: expected a ", layout.size(),
                "-way logit vector");
    auto out = torch::full_like(logits, kNegInf);
    if (mode == Modality::text) {
        out.narrow(0, 0, layout.text_vocab_size).copy_(logits.narrow(0, 0, layout.text_vocab_size));
        for (auto id : {layout.bos, layout.eos, layout.bov}) out[id] = logits[id];
    } else if (T > 0 && visual_count >= T) {
        out[layout.eov] = logits[layout.eov];
    } else {
        out.narrow(0, layout.visual_offset, layout.visual_vocab_size)
            .copy_(logits.narrow(0, layout.visual_offset, layout.visual_vocab_size));
    }
    return out;
}

std::vector<std::pair<std::int64_t, double>> nucleus_candidates(const torch::Tensor& logits, std::int64_t top_k,
                                                                double top_p, double temperature) {
    if (top_k < 1) throw DomainError("top_k must be at least 1");
    if (!(top_p > 0 && top_p <= 1)) throw DomainError("top_p must lie in (0, 1]");
    if (!(temperature > 0)) throw DomainError("temperature must be positive");
    const auto l = logits.detach().to(torch::kFloat64).contiguous();
    const auto* v = l.data_ptr<double>();
    const auto V = l.numel();

    std::vector<std::int64_t> order;
    order.reserve(V);
    for (std::int64_t i = 0; i < V; ++i)
        if (std::isfinite(v[i])) order.push_back(i);
    if (order.empty()) throw SamplingError("every logit is -inf; nothing can be sampled");
    const auto k = std::min<std::int64_t>(top_k, static_cast<std::int64_t>(order.size()));
    std::partial_sort(order.begin(), order.begin() + k, order.end(),
                      [&](std::int64_t a, std::int64_t b) { return v[a] > v[b] || (v[a] == v[b] && a < b); });
    order.resize(k);

    const double top = v[order.front()] / temperature;
    std::vector<double> p(order.size());
    double z = 0;
    for (std::size_t i = 0; i < order.size(); ++i) z += (p[i] = std::exp(v[order[i]] / temperature - top));
    // Smallest prefix reaching top_p; the slack absorbs rounding in the running sum.
    double cum = 0;
    std::size_t keep = order.size();
    for (std::size_t i = 0; i < order.size(); ++i) {
        cum += p[i] / z;
        if (cum >= top_p - 1e-12) {
            keep = i + 1;
            break;
        }
    }
    double kept = 0;
    for (std::size_t i = 0; i < keep; ++i) kept += p[i];
    std::vector<std::pair<std::int64_t, double>> out;
    out.reserve(keep);
    for (std::size_t i = 0; i < keep; ++i) out.emplace_back(order[i], p[i] / kept);
    return out;
}

std::int64_t topk_topp_sample(const torch::Tensor& logits, std::int64_t top_k, double top_p, double temperature,
                              std::mt19937_64& rng) {
    const auto cands = nucleus_candidates(logits, top_k, top_p, temperature);
    const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    double cum = 0;
    for (const auto& [id, prob] : cands) {
        cum += prob;
        if (u < cum) return id;
    }
    return cands.back().first;
}

std::int64_t topk_topp_sample(const torch::Tensor& logits, std::int64_t top_k, double top_p, double temperature,
                              std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    return topk_topp_sample(logits, top_k, top_p, temperature, rng);
}

torch::Tensor cfg_combine(const torch::Tensor& cond, const torch::Tensor& uncond, double scale) {
    TORCH_CHECK(cond.sizes() == uncond.sizes(), "cfg_combine: conditional and unconditional logits differ in shape");
    return scale * cond + (1.0 - scale) * uncond;
}

TokenSequence generate_image_tokens(TransformerLM& model, const std::vector<std::int64_t>& caption,
                                    const SamplingConfig& sampling, const VocabularyLayout& layout, std::int64_t T,
                                    std::mt19937_64& rng) {
    torch::NoGradGuard no_grad;
    model->eval();
    std::vector<std::int64_t> cond{layout.bos};
    cond.insert(cond.end(), caption.begin(), caption.end());
    cond.push_back(layout.bov);
    std::vector<std::int64_t> uncond{layout.bos, layout.bov};
    const bool guided = sampling.guidance_scale != 1.0;

    ModalityState state;
    state.observe(layout.bov, layout);
    TokenSequence out;
    out.reserve(T);
    for (std::int64_t i = 0; i < T; ++i) {
        auto logits = model->next_logits(cond);
        if (guided) logits = cfg_combine(logits, model->next_logits(uncond), sampling.guidance_scale);
        const auto masked = modality_mask(logits, state.mode, layout, state.visual_count, T);
        const auto id = topk_topp_sample(masked, sampling.visual_top_k, sampling.visual_top_p, sampling.temperature, rng);
        out.push_back(layout.code_of(id));
        state.observe(id, layout);
        cond.push_back(id);
        uncond.push_back(id);
    }
    // The span is closed structurally: after T visual ids only [EOV] is legal.
    const auto closing = modality_mask(torch::zeros({layout.size()}), state.mode, layout, state.visual_count, T);
    TORCH_CHECK(std::isfinite(closing[layout.eov].item<double>()), "visual span did not close after T tokens");
    return out;
}

TokenSequence generate_image_tokens(TransformerLM& model, const std::vector<std::int64_t>& caption,
                                    const SamplingConfig& sampling, const VocabularyLayout& layout, std::int64_t T) {
    std::mt19937_64 rng(static_cast<std::uint64_t>(sampling.seed));
    return generate_image_tokens(model, caption, sampling, layout, T, rng);
}

std::vector<std::int64_t> generate_text(TransformerLM& model, const std::vector<std::int64_t>& prompt,
                                        const SamplingConfig& sampling, const VocabularyLayout& layout,
                                        std::int64_t max_len, std::mt19937_64& rng) {
    torch::NoGradGuard no_grad;
    model->eval();
    std::vector<std::int64_t> seq{layout.bos};
    seq.insert(seq.end(), prompt.begin(), prompt.end());
    std::vector<std::int64_t> out;
    for (std::int64_t i = 0; i < max_len && static_cast<std::int64_t>(seq.size()) < model->cfg.max_len; ++i) {
        auto masked = modality_mask(model->next_logits(seq), Modality::text, layout);
        // Text-only continuation: no new image span, no second [BOS].
        masked[layout.bov] = kNegInf;
        masked[layout.bos] = kNegInf;
        const auto id = topk_topp_sample(masked, sampling.text_top_k, sampling.text_top_p, sampling.temperature, rng);
        if (id == layout.eos) break;
        out.push_back(id);
        seq.push_back(id);
    }
    return out;
}

std::vector<std::int64_t> generate_text(TransformerLM& model, const std::vector<std::int64_t>& prompt,
                                        const SamplingConfig& sampling, const VocabularyLayout& layout,
                                        std::int64_t max_len) {
    std::mt19937_64 rng(static_cast<std::uint64_t>(sampling.seed));
    return generate_text(model, prompt, sampling, layout, max_len, rng);
}

std::vector<PerplexityPoint> track_perplexity(const std::vector<NllRecord>& records, std::int64_t window) {
    if (window < 1) throw DomainError("perplexity window must be at least 1");
    std::vector<PerplexityPoint> out;
    for (std::size_t start = 0; start < records.size(); start += static_cast<std::size_t>(window)) {
        const auto end = std::min(records.size(), start + static_cast<std::size_t>(window));
        double ts = 0, vs = 0;
        std::int64_t tc = 0, vc = 0;
        for (auto i = start; i < end; ++i) {
            ts += records[i].text_nll_sum;
            tc += records[i].text_count;
            vs += records[i].visual_nll_sum;
            vc += records[i].visual_count;
        }
        PerplexityPoint p;
        p.step = records[end - 1].step;
        if (tc > 0) p.text = std::exp(ts / static_cast<double>(tc));
        if (vc > 0) p.visual = std::exp(vs / static_cast<double>(vc));
        if (p.text || p.visual) out.push_back(p);
    }
    return out;
}

json LmReport::to_json() const {
    return json{{"step", step},
                {"loss", loss},
                {"lr", lr},
                {"text_nll_sum", nll.text_nll_sum},
                {"text_count", nll.text_count},
                {"visual_nll_sum", nll.visual_nll_sum},
                {"visual_count", nll.visual_count}};
}

std::vector<LmReport> train_lm(TransformerLM& model, const LmCorpus& corpus, const VocabularyLayout& layout,
                               std::int64_t T, const RunConfig& run,
                               const std::function<void(const LmReport&)>& on_report) {
    validate(run, "lm_train");
    if (corpus.visuals.empty() && corpus.texts.empty()) throw ConfigError("lm_train", "empty training corpus");
    if (corpus.captions.size() != corpus.visuals.size())
        throw ConfigError("lm_train", "captions and visual sequences differ in count");

    auto opts = torch::optim::AdamWOptions(run.peak_lr)
                    .betas({run.beta1, run.beta2})
                    .eps(run.epsilon)
                    .weight_decay(run.weight_decay);
    torch::optim::AdamW opt(model->parameters(), opts);
    std::mt19937_64 rng(mix_seed(static_cast<std::uint64_t>(run.seed), 0x1a));
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const bool mix_text = !corpus.texts.empty() && run.text_mixture_ratio > 0;

    std::vector<LmReport> reports;
    reports.reserve(run.total_steps);
    model->train();
    for (std::int64_t step = 0; step < run.total_steps; ++step) {
        std::vector<MultimodalSequence> batch;
        batch.reserve(run.batch_size);
        for (std::int64_t b = 0; b < run.batch_size; ++b) {
            const bool text_slot = corpus.visuals.empty() || (mix_text && unit(rng) < run.text_mixture_ratio);
            if (text_slot) {
                batch.push_back(build_text_sequence(corpus.texts[rng() % corpus.texts.size()], layout));
            } else {
                const auto i = rng() % corpus.visuals.size();
                const bool drop = unit(rng) < run.caption_dropout;
                batch.push_back(build_pretrain_sequence(drop ? std::vector<std::int64_t>{} : corpus.captions[i],
                                                        corpus.visuals[i], layout, T));
            }
        }
        std::size_t S = 0;
        for (const auto& s : batch) S = std::max(S, s.ids.size());
        if (static_cast<std::int64_t>(S) > model->cfg.max_len)
            throw ConfigError("lm.max_len", "training sequence of length " + std::to_string(S) + " exceeds max_len");
        const auto B = static_cast<std::int64_t>(batch.size());
        auto ids = torch::full({B, static_cast<std::int64_t>(S)}, layout.eos, torch::kInt64);
        auto mask = torch::zeros({B, static_cast<std::int64_t>(S)}, torch::kBool);
        for (std::int64_t b = 0; b < B; ++b) {
            const auto& s = batch[b];
            for (std::size_t j = 0; j < s.ids.size(); ++j) {
                ids[b][j] = s.ids[j];
                mask[b][j] = static_cast<bool>(s.loss_mask[j]);
            }
        }
        const auto len = static_cast<std::int64_t>(S);
        const auto inputs = ids.narrow(1, 0, len - 1);
        const auto targets = ids.narrow(1, 1, len - 1);
        const auto tmask = mask.narrow(1, 1, len - 1);

        const double lr = lr_schedule(step, run);
        for (auto& group : opt.param_groups()) static_cast<torch::optim::AdamWOptions&>(group.options()).lr(lr);
        const auto logits = model->forward(inputs);
        const auto loss = lm_loss(logits, targets, tmask);
        opt.zero_grad();
        loss.backward();
        if (run.grad_clip > 0) torch::nn::utils::clip_grad_norm_(model->parameters(), run.grad_clip);
        opt.step();

        LmReport r;
        r.step = step;
        r.loss = loss.item<double>();
        r.lr = lr;
        {
            torch::NoGradGuard no_grad;
            const auto nll = token_nll(logits.detach(), targets);
            const auto visual = (targets >= layout.visual_offset) & tmask;
            const auto text = ((targets < layout.text_vocab_size) | (targets == layout.eos)) & tmask;
            r.nll = {step, (nll * text).sum().item<double>(), text.sum().item<std::int64_t>(),
                     (nll * visual).sum().item<double>(), visual.sum().item<std::int64_t>()};
        }
        if (!std::isfinite(r.loss)) throw std::runtime_error("non-finite LM loss at step " + std::to_string(step));
        if (on_report) on_report(r);
        reports.push_back(r);
    }
    model->eval();
    return reports;
}

CheckpointContainer lm_to_checkpoint(const TransformerLM& model, const VocabularyLayout& layout, std::int64_t T,
                                     const json& metadata, std::uint64_t step) {
    CheckpointContainer c;
    c.step = step;
    c.metadata = metadata;
    c.metadata["kind"] = "lm";
    c.metadata["lm"] = to_json(model->cfg);
    c.metadata["layout"] = layout.to_json();
    c.metadata["T"] = T;
    add_module_state(c, "lm", *model);
    return c;
}

LoadedLm lm_from_checkpoint(const CheckpointContainer& c) {
    if (c.metadata.value("kind", "") != "lm") throw std::runtime_error("checkpoint is not a language-model checkpoint");
    LoadedLm out;
    out.layout = VocabularyLayout::from_json(c.metadata.at("layout"));
    out.T = c.metadata.at("T").get<std::int64_t>();
    out.metadata = c.metadata;
    out.model = TransformerLM(lm_config_from_json(c.metadata.at("lm")), out.layout.size());
    load_module_state(c, "lm", *out.model);
    out.model->eval();
    return out;
}

}  // namespace ddt
