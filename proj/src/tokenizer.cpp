#include "ddt/tokenizer.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

#include "ddt/errors.hpp"

namespace ddt {

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
    // splitmix64 finalizer over a simple combination.
    auto mix = [](std::uint64_t z) {
        z += 0x9e3779b97f4a7c15ULL;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    };
    return mix(mix(mix(seed) ^ a) ^ (b * 0x632be59bd9b4e019ULL));
}

TokenizerModel::TokenizerModel(const TokenizerConfig& c, std::uint64_t seed) : cfg(c) {
    validate(cfg);
    torch::manual_seed(seed);
    encoder = Encoder(cfg);
    proj = torch::nn::Linear(cfg.enc_dim, cfg.code_dim);
    init_weights(*proj);
    codebook = Codebook::random(cfg.codebook_size, cfg.code_dim, mix_seed(seed, 1));
    decoder = Decoder(cfg);
}

std::vector<torch::Tensor> TokenizerModel::parameters() const {
    std::vector<torch::Tensor> ps;
    for (const auto& p : encoder->parameters()) ps.push_back(p);
    for (const auto& p : proj->parameters()) ps.push_back(p);
    for (const auto& p : decoder->parameters()) ps.push_back(p);
    return ps;
}

torch::Tensor TokenizerModel::features(const torch::Tensor& images) {
    return project(encoder->forward(images), proj->weight, proj->bias);
}

torch::Tensor TokenizerModel::tokenize(const torch::Tensor& images) {
    torch::NoGradGuard no_grad;
    return quantize_batch(features(images), codebook).ids;
}

std::vector<TokenSequence> TokenizerModel::tokenize_sequences(const torch::Tensor& images, std::int64_t batch) {
    std::vector<TokenSequence> out;
    out.reserve(images.size(0));
    for (std::int64_t s = 0; s < images.size(0); s += batch) {
        const auto ids = tokenize(images.narrow(0, s, std::min(batch, images.size(0) - s))).contiguous();
        for (std::int64_t i = 0; i < ids.size(0); ++i) {
            TokenSequence seq(cfg.T);
            for (std::int64_t j = 0; j < cfg.T; ++j) seq[j] = static_cast<std::uint32_t>(ids[i][j].item<std::int64_t>());
            out.push_back(std::move(seq));
        }
    }
    return out;
}

torch::Tensor TokenizerModel::embed(const TokenSequence& ids) const {
    if (static_cast<std::int64_t>(ids.size()) != cfg.T)
        throw DomainError("token sequence has length " + std::to_string(ids.size()) + ", expected " +
                          std::to_string(cfg.T));
    auto idx = torch::empty({cfg.T}, torch::kInt64);
    for (std::int64_t i = 0; i < cfg.T; ++i) {
        if (ids[i] >= static_cast<std::uint32_t>(cfg.codebook_size))
            throw DomainError("token id " + std::to_string(ids[i]) + " is not below codebook size " +
                              std::to_string(cfg.codebook_size));
        idx[i] = static_cast<std::int64_t>(ids[i]);
    }
    return codebook.entries.index_select(0, idx).to(torch::kFloat32);
}

void TokenizerModel::set_train(bool on) {
    encoder->train(on);
    proj->train(on);
    decoder->train(on);
}

CheckpointContainer TokenizerModel::to_checkpoint(const json& metadata, std::uint64_t step) const {
    CheckpointContainer c;
    c.step = step;
    c.metadata = metadata;
    c.metadata["kind"] = "tokenizer";
    c.metadata["tokenizer"] = to_json(cfg);
    add_module_state(c, "encoder", *encoder);
    add_module_state(c, "quantizer/proj", *proj);
    c.add("quantizer/entries", codebook.entries);
    c.add("quantizer/ema_count", codebook.ema_count);
    c.add("quantizer/ema_sum", codebook.ema_sum);
    add_module_state(c, "decoder", *decoder);
    return c;
}

TokenizerModel TokenizerModel::from_checkpoint(const CheckpointContainer& c) {
    if (c.metadata.value("kind", "") != "tokenizer") throw std::runtime_error("checkpoint is not a tokenizer checkpoint");
    TokenizerModel m(tokenizer_config_from_json(c.metadata.at("tokenizer")), 0);
    load_module_state(c, "encoder", *m.encoder);
    load_module_state(c, "quantizer/proj", *m.proj);
    m.codebook.entries = c.tensor("quantizer/entries").to(torch::kFloat64);
    m.codebook.ema_count = c.tensor("quantizer/ema_count").to(torch::kFloat64);
    m.codebook.ema_sum = c.tensor("quantizer/ema_sum").to(torch::kFloat64);
    m.codebook.usage_window = torch::zeros({m.codebook.size()}, torch::kInt64);
    load_module_state(c, "decoder", *m.decoder);
    return m;
}

json LossReport::to_json() const {
    return json{{"step", step},          {"recon", recon}, {"commit", commit}, {"total", total},
                {"codebook_usage", codebook_usage}, {"lr", lr},   {"codes_reset", codes_reset}};
}

double lr_schedule(std::int64_t step, const RunConfig& run) {
    const double peak = run.peak_lr;
    const double floor = peak * run.lr_floor_ratio;
    const auto s = static_cast<double>(std::max<std::int64_t>(step, 0));
    const auto warm = static_cast<double>(run.warmup_steps);
    const auto total = static_cast<double>(run.total_steps);
    auto cosine = [&](double from) {
        const double span = total - from;
        const double p = span > 0 ? std::clamp((s - from) / span, 0.0, 1.0) : 1.0;
        return floor + (peak - floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * p));
    };
    if (run.schedule == "cosine") return cosine(0.0);
    if (s < warm) return peak * s / warm;
    if (run.schedule == "constant") return peak;
    return cosine(warm);
}

TokenizerTrainer::TokenizerTrainer(TokenizerModel& model, const RunConfig& run)
    : model_(model), run_(run), reset_rng_(mix_seed(static_cast<std::uint64_t>(run.seed), 0x5eed)) {
    validate(run_);
    auto opts = torch::optim::AdamWOptions(run_.peak_lr)
                    .betas({run_.beta1, run_.beta2})
                    .eps(run_.epsilon)
                    .weight_decay(run_.weight_decay);
    opt_ = std::make_unique<torch::optim::AdamW>(model_.parameters(), opts);
}

namespace {

struct NoiseDraw {
    torch::Tensor t_index;  // B int64
    torch::Tensor eps;      // B x C x H x W
};

NoiseDraw draw_noise(std::uint64_t seed, std::uint64_t step, const torch::Tensor& images, std::int64_t T) {
    const auto B = images.size(0);
    NoiseDraw d{torch::empty({B}, torch::kInt64), torch::empty_like(images)};
    for (std::int64_t i = 0; i < B; ++i) {
        const auto item_seed = mix_seed(seed, step, static_cast<std::uint64_t>(i));
        std::mt19937_64 rng(item_seed);
        d.t_index[i] = std::uniform_int_distribution<std::int64_t>(1, T)(rng);
        auto gen = at::make_generator<at::CPUGeneratorImpl>(mix_seed(item_seed, 0xe95));
        d.eps[i].copy_(torch::randn(images[i].sizes(), gen, images.options()));
    }
    return d;
}

torch::Tensor recon_per_item(TokenizerModel& m, const torch::Tensor& images, const torch::Tensor& straight_through,
                             const NoiseDraw& noise) {
    const auto t = noise.t_index.to(images.dtype()) / static_cast<double>(m.cfg.T);
    const auto x_t = add_noise(images, t, noise.eps);
    const auto cond = prefix_mask_batch(straight_through, noise.t_index);
    const auto out = m.decoder->forward(x_t, t, cond);
    const auto target = m.cfg.prediction == "velocity" ? noise.eps - images : images;
    return (out - target).pow(2).flatten(1).mean(1);
}

}  // namespace

LossReport TokenizerTrainer::train_step(const torch::Tensor& images) {
    if (images.size(0) == 0) throw DomainError("train_step: empty batch");
    model_.set_train(true);
    const double lr = lr_schedule(step_, run_);
    for (auto& group : opt_->param_groups()) static_cast<torch::optim::AdamWOptions&>(group.options()).lr(lr);

    const auto feats = model_.features(images);
    const auto q = quantize_batch(feats, model_.codebook);
    const auto noise = draw_noise(static_cast<std::uint64_t>(run_.seed), static_cast<std::uint64_t>(step_), images,
                                  model_.cfg.T);
    const auto recon_items = recon_per_item(model_, images, q.straight_through, noise);
    const auto recon = recon_items.mean();
    const auto commit = q.commitment.mean();
    const auto loss = recon + model_.cfg.commitment_weight * commit;

    LossReport r;
    r.step = step_;
    r.recon = recon.item<double>();
    r.commit = commit.item<double>();
    r.total = r.recon + model_.cfg.commitment_weight * r.commit;
    r.lr = lr;
    if (!std::isfinite(r.total)) {
        std::int64_t bad = -1;
        const auto rc = recon_items.detach();
        for (std::int64_t i = 0; i < rc.size(0); ++i)
            if (!std::isfinite(rc[i].item<double>())) {
                bad = i;
                break;
            }
        std::ostringstream msg;
        msg << "non-finite loss at step " << step_ << " (recon " << r.recon << ", commit " << r.commit
            << "), first offending batch item " << bad;
        throw NonFiniteLoss(step_, bad, msg.str());
    }

    opt_->zero_grad();
    loss.backward();
    if (run_.grad_clip > 0) torch::nn::utils::clip_grad_norm_(model_.parameters(), run_.grad_clip);
    opt_->step();

    const auto f = feats.detach();
    ema_update(model_.codebook, f, q.ids, model_.cfg.ema_decay);
    r.codes_reset = reset_dead_codes(model_.codebook, f, model_.cfg.dead_code_threshold, reset_rng_);
    r.codebook_usage = codebook_usage(q.ids, model_.cfg.codebook_size);
    ++step_;
    return r;
}

double TokenizerTrainer::probe_recon(const torch::Tensor& images, std::uint64_t seed) {
    torch::NoGradGuard no_grad;
    model_.set_train(false);
    const auto q = quantize_batch(model_.features(images), model_.codebook);
    const auto noise = draw_noise(seed, 0, images, model_.cfg.T);
    return recon_per_item(model_, images, q.straight_through, noise).mean().item<double>();
}

double psnr(const torch::Tensor& a, const torch::Tensor& b, double max_value) {
    TORCH_CHECK(a.sizes() == b.sizes(), "psnr: shape mismatch");
    const double mse = (a.to(torch::kFloat64) - b.to(torch::kFloat64)).pow(2).mean().item<double>();
    if (mse <= 0) return kPsnrCap;
    return std::min(kPsnrCap, 10.0 * std::log10(max_value * max_value / mse));
}

ReconstructionReport eval_reconstruction(TokenizerModel& model, const torch::Tensor& images, std::int64_t steps,
                                         std::uint64_t seed) {
    if (images.size(0) == 0) throw DomainError("eval_reconstruction: empty eval set");
    model.set_train(false);
    const auto seqs = model.tokenize_sequences(images);
    ReconstructionReport rep;
    SamplerOptions opts;
    opts.steps = steps;
    for (std::size_t i = 0; i < seqs.size(); ++i) {
        auto img = sample_image(model.decoder, model.embed(seqs[i]), seed + i, opts);
        rep.per_image.push_back(psnr(img, images[static_cast<std::int64_t>(i)]));
        rep.reconstructions.push_back(img);
    }
    double sum = 0;
    for (double p : rep.per_image) sum += p;
    rep.mean_psnr = sum / static_cast<double>(rep.per_image.size());
    return rep;
}

void train_tokenizer(TokenizerModel& model, const torch::Tensor& images, const RunConfig& run,
                     const std::function<void(const LossReport&)>& on_report) {
    TokenizerTrainer trainer(model, run);
    const auto N = images.size(0);
    const auto B = std::min<std::int64_t>(run.batch_size, N);
    std::vector<std::int64_t> order;
    std::size_t cursor = 0;
    std::uint64_t epoch = 0;
    while (trainer.step() < run.total_steps) {
        if (cursor + B > order.size()) {
            order.resize(N);
            for (std::int64_t i = 0; i < N; ++i) order[i] = i;
            std::mt19937_64 rng(mix_seed(static_cast<std::uint64_t>(run.seed), 0xda7a, epoch++));
            std::shuffle(order.begin(), order.end(), rng);
            cursor = 0;
        }
        auto idx = torch::from_blob(order.data() + cursor, {B}, torch::kInt64).clone();
        cursor += B;
        const auto report = trainer.train_step(images.index_select(0, idx));
        if (on_report) on_report(report);
    }
}

}  // namespace ddt
