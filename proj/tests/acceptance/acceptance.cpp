// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.
//
// Usage: ddt_acceptance [--only name[,name...]] [--config path] [--workdir dir]

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "ddt/checkpoint.hpp"
#include "ddt/cli.hpp"
#include "ddt/config.hpp"
#include "ddt/dataset.hpp"
#include "ddt/decoder.hpp"
#include "ddt/eval.hpp"
#include "ddt/lm.hpp"
#include "ddt/quantizer.hpp"
#include "ddt/token_file.hpp"
#include "ddt/tokenizer.hpp"

using namespace ddt;
namespace fs = std::filesystem;

namespace {

namespace tol {
constexpr double kFlowRelative = 1e-7;
constexpr double kEmaRecurrence = 1e-6;
constexpr double kEmaFixedPoint = 1e-4;
constexpr double kOverfitRatio = 0.10;
constexpr double kPrefixViolationRate = 0.05;
constexpr double kLmLossOracle = 1e-6;
constexpr double kUniformLoss = 1e-5;
constexpr double kGradRelative = 1e-3;
constexpr std::int64_t kModalitySamples = 100000;
}  // namespace tol

namespace budget {
constexpr double kFlow = 1, kQuantizer = 5, kEma = 5, kDeadCode = 1, kOverfit = 1800, kPrefix = 600, kPerturbation = 3600,
                 kModality = 60, kCfg = 1, kLmLoss = 1, kGrad = 60, kRoundTrip = 10, kSmoke = 3600;
}

const auto kF64 = torch::TensorOptions().dtype(torch::kFloat64);

struct Outcome {
    bool pass = false;
    std::string detail;
};

struct Context {
    std::string config_path;
    fs::path workdir;
    ExperimentConfig toy;
    std::optional<TokenizerModel> overfit_model;
    torch::Tensor overfit_images;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

// ---------------------------------------------------------------------------

Outcome flow_identities(Context&) {
    std::mt19937_64 rng(1);
    std::int64_t bitwise = 0, within = 0;
    double worst = 0;
    const int n = 1000;
    for (int i = 0; i < n; ++i) {
        const auto dtype = i % 2 ? torch::kFloat64 : torch::kFloat32;
        const std::int64_t c = 1 + rng() % 3, h = 1 + rng() % 16, w = 1 + rng() % 16;
        const auto x0 = torch::randn({c, h, w}, dtype) * (1 + rng() % 100);
        const auto eps = torch::randn({c, h, w}, dtype);
        const auto a = add_noise(x0, 0.0, eps), b = add_noise(x0, 1.0, eps);
        if (torch::equal(a, x0) && torch::equal(b, eps)) ++bitwise;
        const double ra = ((a - x0).abs().max() / x0.abs().max().clamp_min(1e-30)).item<double>();
        const double rb = ((b - eps).abs().max() / eps.abs().max().clamp_min(1e-30)).item<double>();
        worst = std::max({worst, ra, rb});
        if (ra <= tol::kFlowRelative && rb <= tol::kFlowRelative) ++within;
    }
    return {within == n, fmt("%lld/%d bitwise exact, worst relative error %.3g (tol %.0e)", (long long)bitwise, n,
                             worst, tol::kFlowRelative)};
}

Outcome quantizer_oracle(Context&) {
    const std::int64_t K = 512, m = 16;
    torch::manual_seed(2);
    auto entries = torch::randn({K, m}, kF64);
    // Seeded exact ties: duplicates and power-of-two rescalings of earlier entries.
    std::mt19937_64 rng(3);
    std::vector<std::int64_t> tie_targets;
    for (int i = 0; i < 32; ++i) {
        const std::int64_t lo = rng() % 256, hi = 256 + rng() % 256;
        entries[hi] = entries[lo] * (i % 2 ? 2.0 : 1.0);
        tie_targets.push_back(lo);
    }
    const auto book = Codebook::from_entries(entries);
    auto feats = torch::randn({1000, m}, kF64);
    for (std::size_t i = 0; i < tie_targets.size(); ++i) feats[static_cast<std::int64_t>(i)] = entries[tie_targets[i]] * 0.5;

    const auto ids = nearest_codes(feats, book);
    const auto E = entries.contiguous();
    const auto F = feats.contiguous();
    const double* e = E.data_ptr<double>();
    const double* f = F.data_ptr<double>();
    std::int64_t agree = 0;
    for (std::int64_t i = 0; i < 1000; ++i) {
        double fn = 0;
        for (std::int64_t j = 0; j < m; ++j) fn += f[i * m + j] * f[i * m + j];
        fn = std::sqrt(fn);
        std::int64_t best = 0;
        double best_cos = -std::numeric_limits<double>::infinity();
        for (std::int64_t k = 0; k < K; ++k) {
            double en = 0, dot = 0;
            for (std::int64_t j = 0; j < m; ++j) en += e[k * m + j] * e[k * m + j];
            en = std::sqrt(en);
            for (std::int64_t j = 0; j < m; ++j) dot += (f[i * m + j] / fn) * (e[k * m + j] / en);
            if (dot > best_cos) {
                best_cos = dot;
                best = k;
            }
        }
        agree += ids[i].item<std::int64_t>() == best;
    }
    std::int64_t ties_low = 0;
    for (std::size_t i = 0; i < tie_targets.size(); ++i)
        ties_low += ids[static_cast<std::int64_t>(i)].item<std::int64_t>() == tie_targets[i];
    return {agree == 1000 && ties_low == static_cast<std::int64_t>(tie_targets.size()),
            fmt("%lld/1000 ids agree with brute force; %lld/%zu seeded ties resolved to the lower index",
                (long long)agree, (long long)ties_low, tie_targets.size())};
}

Outcome ema_closed_form(Context&) {
    const std::int64_t K = 8, m = 4;
    const double gamma = 0.99;
    auto book = Codebook::random(K, m, 4);
    std::vector<double> count(K, 0.0), sum(K * m, 0.0);
    std::mt19937_64 rng(5);
    std::normal_distribution<double> normal;
    double worst = 0;
    for (int step = 0; step < 100; ++step) {
        const std::int64_t n = 1 + rng() % 12;
        auto feats = torch::empty({n, m}, kF64);
        auto ids = torch::empty({n}, torch::kInt64);
        std::vector<double> add_count(K, 0.0), add_sum(K * m, 0.0);
        for (std::int64_t i = 0; i < n; ++i) {
            const std::int64_t k = rng() % K;
            ids[i] = k;
            add_count[k] += 1;
            for (std::int64_t j = 0; j < m; ++j) {
                const double v = normal(rng);
                feats[i][j] = v;
                add_sum[k * m + j] += v;
            }
        }
        ema_update(book, feats, ids, gamma);
        for (std::int64_t k = 0; k < K; ++k) {
            count[k] = gamma * count[k] + (1 - gamma) * add_count[k];
            for (std::int64_t j = 0; j < m; ++j) {
                sum[k * m + j] = gamma * sum[k * m + j] + (1 - gamma) * add_sum[k * m + j];
                const double entry = sum[k * m + j] / std::max(count[k], Codebook::count_eps);
                worst = std::max({worst, std::abs(book.ema_sum[k][j].item<double>() - sum[k * m + j]),
                                  std::abs(book.entries[k][j].item<double>() - entry)});
            }
            worst = std::max(worst, std::abs(book.ema_count[k].item<double>() - count[k]));
        }
    }
    auto fixed = Codebook::from_entries(torch::randn({1, m}, kF64));
    const auto v = torch::tensor({0.7, -1.3, 2.2, 0.05}, kF64).unsqueeze(0);
    for (int s = 0; s < 2000; ++s) ema_update(fixed, v, torch::zeros({1}, torch::kInt64), gamma);
    const double fixed_err = (fixed.entries - v).abs().max().item<double>();
    return {worst <= tol::kEmaRecurrence && fixed_err <= tol::kEmaFixedPoint,
            fmt("recurrence max error %.3g (tol %.0e); fixed point error after 2000 steps %.3g (tol %.0e)", worst,
                tol::kEmaRecurrence, fixed_err, tol::kEmaFixedPoint)};
}

Outcome dead_code_revival(Context&) {
    bool ok = true;
    std::int64_t checked = 0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const double threshold = 0.01 * static_cast<double>(1 + seed % 3);
        auto book = Codebook::random(64, 16, seed);  // all counts zero: every entry dead
        std::mt19937_64 rng(seed);
        const auto batch = torch::randn({1 + static_cast<std::int64_t>(seed % 7), 16}, kF64);
        const auto n = reset_dead_codes(book, batch, threshold, rng);
        ok = ok && n == 64;
        ok = ok && (book.ema_count < threshold).sum().item<std::int64_t>() == 0;
        for (std::int64_t k = 0; k < 64; ++k, ++checked) {
            bool member = false;
            for (std::int64_t i = 0; i < batch.size(0); ++i) member = member || torch::equal(book.entries[k], batch[i]);
            ok = ok && member;
        }
    }
    return {ok, fmt("%lld reset entries checked across 20 all-dead codebooks; none left below threshold",
                    (long long)checked)};
}

Outcome overfit(Context& ctx) {
    const auto& cfg = ctx.toy;
    const auto manifest = generate_synthetic_dataset((ctx.workdir / "overfit_data").string(), 32,
                                                     cfg.tokenizer.image_size, 11);
    ctx.overfit_images = ImageDataset(manifest).all_images();
    ctx.overfit_model.emplace(cfg.tokenizer, static_cast<std::uint64_t>(cfg.train.seed));
    TokenizerTrainer trainer(*ctx.overfit_model, cfg.train);
    const std::uint64_t probe_seed = 12345;
    const double start = trainer.probe_recon(ctx.overfit_images, probe_seed);
    double first_report = 0, last_window = 0;
    std::int64_t window = 0;
    for (std::int64_t s = 0; s < cfg.train.total_steps; ++s) {
        const auto r = trainer.train_step(ctx.overfit_images);
        if (s == 0) first_report = r.recon;
        if (s >= cfg.train.total_steps - 100) {
            last_window += r.recon;
            ++window;
        }
    }
    const double end = trainer.probe_recon(ctx.overfit_images, probe_seed);
    const double ratio = end / start;
    return {ratio <= tol::kOverfitRatio,
            fmt("probe recon %.4f -> %.5f, ratio %.4f (need <= %.2f); training recon step 0 %.4f, last-100 mean %.5f",
                start, end, ratio, tol::kOverfitRatio, first_report, last_window / std::max<std::int64_t>(window, 1))};
}

Outcome prefix_property(Context& ctx) {
    if (!ctx.overfit_model) overfit(ctx);
    auto& model = *ctx.overfit_model;
    model.set_train(false);
    const auto T = model.cfg.T;
    const auto seqs = model.tokenize_sequences(ctx.overfit_images);
    std::vector<std::int64_t> ts;
    for (std::int64_t t = 1; t <= T; ++t) ts.push_back(t);
    const std::int64_t images = std::min<std::int64_t>(16, static_cast<std::int64_t>(seqs.size()));
    std::vector<std::vector<double>> rows;
    std::int64_t per_image_violations = 0;
    for (std::int64_t i = 0; i < images; ++i) {
        const auto series = prefix_decode_series(model.decoder, model.embed(seqs[i]), ts, ctx.toy.sampling.decode_steps,
                                                 static_cast<std::uint64_t>(1000 + i));
        std::vector<double> row;
        for (const auto& img : series) row.push_back(psnr(img, series.back()));
        for (std::size_t j = 1; j < row.size(); ++j) per_image_violations += row[j] < row[j - 1];
        rows.push_back(std::move(row));
    }
    const auto stats = prefix_series_stats(rows);
    const double rate = static_cast<double>(stats.violations) / static_cast<double>(stats.pairs);
    return {rate <= tol::kPrefixViolationRate,
            fmt("mean PSNR vs full decode: t=1 %.2f dB, t=%lld %.2f dB, t=%lld %.2f dB; %lld/%lld adjacent decreases "
                "(%.1f%%, need <= %.0f%%); per-image decreases %lld/%lld",
                stats.mean_psnr.front(), (long long)(T / 2), stats.mean_psnr[T / 2 - 1], (long long)(T - 1),
                stats.mean_psnr[T - 2], (long long)stats.violations, (long long)stats.pairs, 100 * rate,
                100 * tol::kPrefixViolationRate, (long long)per_image_violations,
                (long long)(images * stats.pairs))};
}

Outcome order_perturbation(Context& ctx) {
    const auto& cfg = ctx.toy;
    const auto manifest = generate_synthetic_dataset((ctx.workdir / "perturbation_data").string(), 1000,
                                                     cfg.tokenizer.image_size, 21);
    const auto images = ImageDataset(manifest).all_images();
    TokenizerModel model(cfg.tokenizer, static_cast<std::uint64_t>(cfg.train.seed));
    train_tokenizer(model, images, cfg.train);
    model.set_train(false);
    const auto ddt_tokens = model.tokenize_sequences(images);
    const auto patch = patch_vq_baseline(images, cfg.tokenizer.patch_size, cfg.tokenizer.codebook_size,
                                         static_cast<std::uint64_t>(cfg.train.seed));

    auto run = cfg.lm_train;
    run.text_mixture_ratio = 0;
    const std::vector<std::string> degrees{"none", "global"};
    const auto ddt = perturbation_experiment(ddt_tokens, cfg.tokenizer.codebook_size, degrees, cfg.lm, run, 7,
                                             kMinPerturbationCorpus, "ddt");
    const auto base = perturbation_experiment(patch.tokens, cfg.tokenizer.codebook_size, degrees, cfg.lm, run, 7,
                                              kMinPerturbationCorpus, "patch_vq");
    report_perturbation({ddt, base}, (ctx.workdir / "perturbation_report").string(), {"acceptance", cfg.train.seed});
    const double g_ddt = ddt.gap("global"), g_base = base.gap("global");
    return {g_ddt > 0 && g_ddt > g_base,
            fmt("DDT final loss none %.4f global %.4f gap %.4f; patch-VQ none %.4f global %.4f gap %.4f",
                ddt.curve("none").final_loss, ddt.curve("global").final_loss, g_ddt, base.curve("none").final_loss,
                base.curve("global").final_loss, g_base)};
}

Outcome modality_masking(Context&) {
    const VocabularyLayout layout(256, 512);
    const std::int64_t T = 16;
    std::mt19937_64 rng(8);
    std::bernoulli_distribution open_span(0.05);
    std::int64_t sampled = 0, out_of_block = 0, spans = 0, bad_spans = 0;
    ModalityState state;
    std::int64_t span_len = 0;
    while (sampled < tol::kModalitySamples) {
        auto logits = torch::randn({layout.size()}, kF64) * 3;
        if (state.mode == Modality::text && open_span(rng)) logits[layout.bov] = 20.0;
        const auto masked = modality_mask(logits, state.mode, layout, state.visual_count, T);
        const auto id = topk_topp_sample(masked, 1 + rng() % layout.size(), 0.5 + 0.5 * (rng() % 1000) / 1000.0,
                                         1.0, rng);
        ++sampled;
        if (state.mode == Modality::text) {
            out_of_block += layout.is_visual(id) || id == layout.eov;
        } else if (state.visual_count < T) {
            out_of_block += !layout.is_visual(id);
        } else {
            out_of_block += id != layout.eov;
        }
        const bool was_visual = state.mode == Modality::visual;
        state.observe(id, layout);
        if (was_visual && layout.is_visual(id)) ++span_len;
        if (was_visual && id == layout.eov) {
            ++spans;
            bad_spans += span_len != T;
            span_len = 0;
        }
    }
    // Spans produced by the generator on an untrained model.
    LmConfig lmc;
    lmc.layers = 1;
    lmc.dim = 32;
    lmc.max_len = 64;
    torch::manual_seed(0);
    TransformerLM lm(lmc, layout.size());
    SamplingConfig s;
    std::int64_t gen_bad = 0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        s.seed = static_cast<std::int64_t>(seed);
        gen_bad += generate_image_tokens(lm, encode_text("a blue square"), s, layout, T).size() != static_cast<std::size_t>(T);
    }
    return {out_of_block == 0 && spans > 0 && bad_spans == 0 && gen_bad == 0,
            fmt("%lld sampled ids, %lld out of block; %lld closed visual spans, %lld with length != T; "
                "%lld bad generator spans",
                (long long)sampled, (long long)out_of_block, (long long)spans, (long long)bad_spans,
                (long long)gen_bad)};
}

Outcome cfg_identities(Context&) {
    std::int64_t bad_one = 0, bad_zero = 0, bad_shift = 0;
    std::mt19937_64 rng(9);
    std::uniform_real_distribution<double> scale(-2, 12), shift(-50, 50);
    const int n = 2000;
    for (int i = 0; i < n; ++i) {
        const auto c = torch::randn({64}, kF64) * 4, u = torch::randn({64}, kF64) * 4;
        bad_one += !torch::equal(cfg_combine(c, u, 1.0), c);
        bad_zero += !torch::equal(cfg_combine(c, u, 0.0), u);
        const double s = scale(rng), a = shift(rng), b = shift(rng);
        bad_shift += cfg_combine(c, u, s).argmax().item<std::int64_t>() !=
                     cfg_combine(c + a, u + b, s).argmax().item<std::int64_t>();
    }
    return {bad_one == 0 && bad_zero == 0 && bad_shift == 0,
            fmt("%d random logit pairs: s=1 mismatches %lld, s=0 mismatches %lld, argmax changes under shifts %lld", n,
                (long long)bad_one, (long long)bad_zero, (long long)bad_shift)};
}

Outcome lm_loss_oracle(Context&) {
    std::mt19937_64 rng(10);
    std::normal_distribution<double> normal(0, 3);
    double worst = 0;
    for (int inst = 0; inst < 100; ++inst) {
        const std::int64_t L = 1 + rng() % 8, V = 2 + rng() % 30;
        std::vector<double> logits(L * V);
        std::vector<std::int64_t> targets(L);
        std::vector<bool> mask(L);
        for (auto& v : logits) v = normal(rng);
        for (auto& t : targets) t = rng() % V;
        bool any = false;
        for (std::int64_t i = 0; i < L; ++i) any = any || (mask[i] = rng() % 4 != 0);
        if (!any) mask[0] = true;
        double sum = 0;
        int count = 0;
        for (std::int64_t i = 0; i < L; ++i) {
            if (!mask[i]) continue;
            double mx = -1e300;
            for (std::int64_t v = 0; v < V; ++v) mx = std::max(mx, logits[i * V + v]);
            double z = 0;
            for (std::int64_t v = 0; v < V; ++v) z += std::exp(logits[i * V + v] - mx);
            sum += -(logits[i * V + targets[i]] - mx - std::log(z));
            ++count;
        }
        auto mt = torch::empty({L}, torch::kBool);
        for (std::int64_t i = 0; i < L; ++i) mt[i] = static_cast<bool>(mask[i]);
        const double got = lm_loss(torch::tensor(logits, kF64).view({L, V}), torch::tensor(targets, torch::kInt64), mt)
                               .item<double>();
        worst = std::max(worst, std::abs(got - sum / count));
    }
    double uniform_worst = 0;
    for (std::int64_t V : {2, 17, 772, 4096}) {
        const auto got = lm_loss(torch::full({5, V}, 0.37), torch::randint(0, V, {5}, torch::kInt64),
                                 torch::ones({5}, torch::kBool));
        uniform_worst = std::max(uniform_worst, std::abs(got.item<double>() - std::log(static_cast<double>(V))));
    }
    return {worst <= tol::kLmLossOracle && uniform_worst <= tol::kUniformLoss,
            fmt("100 instances, max |error| %.3g (tol %.0e); uniform-logit max |loss - ln V| %.3g (tol %.0e)", worst,
                tol::kLmLossOracle, uniform_worst, tol::kUniformLoss)};
}

torch::Tensor numeric_gradient(const std::function<double(const torch::Tensor&)>& f, torch::Tensor x) {
    x = x.detach().clone().to(torch::kFloat64).contiguous();
    auto g = torch::zeros_like(x);
    auto* p = x.data_ptr<double>();
    for (std::int64_t i = 0; i < x.numel(); ++i) {
        const double keep = p[i];
        p[i] = keep + 1e-6;
        const double up = f(x);
        p[i] = keep - 1e-6;
        const double down = f(x);
        p[i] = keep;
        g.data_ptr<double>()[i] = (up - down) / 2e-6;
    }
    return g;
}

double rel_err(const torch::Tensor& a, const torch::Tensor& b) {
    return (a - b).abs().max().item<double>() / std::max(b.abs().max().item<double>(), 1e-8);
}

Outcome gradient_checks(Context&) {
    TokenizerConfig c;
    c.image_size = 4;
    c.channels = 1;
    c.patch_size = 2;
    c.T = 3;
    c.code_dim = 2;
    c.dec_layers = 1;
    c.dec_dim = 8;
    c.mlp_ratio = 2;
    torch::manual_seed(12);
    Decoder dec(c);
    dec->to(torch::kFloat64);
    {
        torch::NoGradGuard ng;
        for (auto& p : dec->parameters()) p.normal_(0, 0.3);
    }
    const auto x0 = torch::rand({2, 1, 4, 4}, kF64) * 2 - 1;
    const auto t = torch::tensor({0.3, 0.7}, kF64);
    const auto x_t = add_noise(x0, t, torch::randn({2, 1, 4, 4}, kF64));
    const auto cond0 = prefix_mask_batch(torch::randn({2, 3, 2}, kF64), torch::tensor({1, 2}, torch::kInt64));

    auto cond = cond0.clone().requires_grad_(true);
    reconstruction_loss(dec, x0, x_t, t, cond).backward();
    const double e_cond = rel_err(cond.grad(), numeric_gradient(
                                                   [&](const torch::Tensor& cc) {
                                                       torch::NoGradGuard ng;
                                                       return reconstruction_loss(dec, x0, x_t, t, cc).item<double>();
                                                   },
                                                   cond0));
    auto& w = dec->final_out->weight;
    dec->zero_grad();
    reconstruction_loss(dec, x0, x_t, t, cond0).backward();
    const auto analytic_w = w.grad().clone();
    const auto keep_w = w.detach().clone();
    const double e_param = rel_err(analytic_w, numeric_gradient(
                                                   [&](const torch::Tensor& ww) {
                                                       torch::NoGradGuard ng;
                                                       w.copy_(ww);
                                                       const double v =
                                                           reconstruction_loss(dec, x0, x_t, t, cond0).item<double>();
                                                       w.copy_(keep_w);
                                                       return v;
                                                   },
                                                   keep_w));

    const auto targets = torch::tensor({3, 0, 5, 1, 1}, torch::kInt64);
    const auto mask = torch::tensor({true, true, false, true, true});
    const auto logits0 = torch::randn({5, 7}, kF64);
    auto logits = logits0.clone().requires_grad_(true);
    lm_loss(logits, targets, mask).backward();
    const double e_lm = rel_err(logits.grad(), numeric_gradient(
                                                   [&](const torch::Tensor& l) {
                                                       return lm_loss(l, targets, mask).item<double>();
                                                   },
                                                   logits0));
    const double worst = std::max({e_cond, e_param, e_lm});
    return {worst <= tol::kGradRelative,
            fmt("relative error: reconstruction_loss wrt condition %.2g, wrt output weights %.2g; lm_loss wrt logits "
                "%.2g (tol %.0e)",
                e_cond, e_param, e_lm, tol::kGradRelative)};
}

Outcome round_trips(Context& ctx) {
    std::mt19937_64 rng(13);
    int token_ok = 0, ckpt_ok = 0;
    for (int i = 0; i < 100; ++i) {
        const std::uint32_t T = 1 + rng() % 64, K = 1 + rng() % 70000, n = rng() % 20;
        std::vector<TokenSequence> seqs(n, TokenSequence(T));
        for (auto& s : seqs)
            for (auto& v : s) v = static_cast<std::uint32_t>(rng() % K);
        const auto path = (ctx.workdir / "rt.ddt").string();
        write_token_file(path, seqs, T, K);
        const auto back = read_token_file(path);
        token_ok += back.sequences == seqs && back.header.T == T && back.header.codebook_size == K &&
                    encode_token_file(back.sequences, T, K) == encode_token_file(seqs, T, K);

        CheckpointContainer c;
        c.step = rng();
        c.metadata = {{"i", i}, {"name", "rt" + std::to_string(rng() % 1000)}, {"x", static_cast<double>(rng() % 97) / 7}};
        const int arrays = 1 + rng() % 6;
        for (int a = 0; a < arrays; ++a) {
            std::vector<std::int64_t> shape(rng() % 4);
            for (auto& d : shape) d = rng() % 5;
            torch::Tensor t;
            switch (rng() % 5) {
                case 0: t = torch::randn(shape); break;
                case 1: t = torch::randn(shape, kF64); break;
                case 2: t = torch::randint(-1000, 1000, shape, torch::kInt32); break;
                case 3: t = torch::randint(-1000000, 1000000, shape, torch::kInt64); break;
                default: t = torch::randint(0, 256, shape, torch::kUInt8); break;
            }
            c.add("a" + std::to_string(a), t);
        }
        const auto cpath = (ctx.workdir / "rt.ckpt").string();
        save_checkpoint(c, cpath);
        const auto cb = load_checkpoint(cpath);
        ckpt_ok += cb.arrays == c.arrays && cb.metadata == c.metadata && cb.step == c.step &&
                   encode_checkpoint(cb) == encode_checkpoint(c);
    }
    return {token_ok == 100 && ckpt_ok == 100,
            fmt("token files %d/100 bit-exact, checkpoints %d/100 bit-exact", token_ok, ckpt_ok)};
}

Outcome smoke(Context& ctx) {
    const auto dir = ctx.workdir / "smoke";
    fs::create_directories(dir);
    std::ostringstream log, err;
    auto call = [&](std::vector<std::string> args) {
        args.insert(args.begin(), "ddt");
        args.insert(args.end(), {"--config", ctx.config_path});
        return cli::dispatch(args, log, err);
    };
    const auto data = (dir / "data").string();
    const auto manifest = (dir / "data" / "manifest.tsv").string();
    std::vector<std::pair<std::string, int>> steps;
    steps.emplace_back("synth-data", call({"synth-data", "--out", data, "--count", "64"}));
    steps.emplace_back("train-tokenizer", call({"train-tokenizer", "--out", (dir / "tok").string(), "--manifest", manifest}));
    const auto ckpt = (dir / "tok" / "tokenizer.ckpt").string();
    steps.emplace_back("encode", call({"encode", "--ckpt", ckpt, "--manifest", manifest, "--out", (dir / "t.ddt").string()}));
    steps.emplace_back("decode", call({"decode", "--ckpt", ckpt, "--tokens", (dir / "t.ddt").string(), "--out-dir",
                                       (dir / "decoded").string(), "--manifest", manifest}));
    steps.emplace_back("train-lm", call({"train-lm", "--tokenizer-ckpt", ckpt, "--out", (dir / "lm").string(),
                                         "--manifest", manifest, "--tokens", (dir / "t.ddt").string()}));
    steps.emplace_back("generate", call({"generate", "--prompt", "red circle", "--ckpt", (dir / "lm" / "lm.ckpt").string(),
                                         "--cfg", "8.0", "--out", (dir / "generated.png").string()}));
    std::string failed;
    for (const auto& [name, code] : steps)
        if (code != 0) failed += name + "(exit " + std::to_string(code) + ") ";

    double mean_psnr = std::nan("");
    std::istringstream in(log.str());
    for (std::string line; std::getline(in, line);) {
        const auto j = json::parse(line, nullptr, false);
        if (!j.is_discarded() && j.is_object() && j.value("event", "") == "psnr") mean_psnr = j.at("mean_psnr");
    }
    std::size_t count = 0;
    bool png_ok = false;
    try {
        count = read_token_file((dir / "t.ddt").string()).sequences.size();
        const auto img = load_image((dir / "generated.png").string(), ctx.toy.tokenizer.image_size);
        png_ok = img.size(0) == 3 && read_png_text((dir / "generated.png").string()).count("config_hash");
    } catch (const std::exception& e) {
        failed += std::string("artifacts: ") + e.what();
    }
    if (!failed.empty()) std::cerr << err.str();
    return {failed.empty() && count == 64 && std::isfinite(mean_psnr) && png_ok,
            fmt("steps %s; token file count %zu; decode mean PSNR %.2f dB; generated PNG %s",
                failed.empty() ? "all exit 0" : failed.c_str(), count, mean_psnr, png_ok ? "valid" : "missing")};
}

struct Criterion {
    const char* name;
    double budget;
    Outcome (*run)(Context&);
};

}  // namespace

int main(int argc, char** argv) {
    Context ctx;
    ctx.config_path = std::string(DDT_SOURCE_DIR) + "/configs/toy.json";
    ctx.workdir = fs::temp_directory_path() / "ddt_acceptance";
    std::set<std::string> only;
    for (int i = 1; i + 1 < argc; i += 2) {
        const std::string flag = argv[i], value = argv[i + 1];
        if (flag == "--only") {
            for (const auto& s : split_list(value)) only.insert(s);
        } else if (flag == "--config") {
            ctx.config_path = value;
        } else if (flag == "--workdir") {
            ctx.workdir = value;
        } else {
            std::cerr << "unknown flag " << flag << '\n';
            return 2;
        }
    }
    fs::remove_all(ctx.workdir);
    fs::create_directories(ctx.workdir);
    ctx.toy = resolve_config(ctx.config_path, {}).config;
    torch::manual_seed(0);

    const std::vector<Criterion> criteria{
        {"flow-identities", budget::kFlow, flow_identities},
        {"quantizer-oracle", budget::kQuantizer, quantizer_oracle},
        {"ema-closed-form", budget::kEma, ema_closed_form},
        {"dead-code-revival", budget::kDeadCode, dead_code_revival},
        {"overfit-reconstruction", budget::kOverfit, overfit},
        {"recursive-prefix", budget::kPrefix, prefix_property},
        {"order-perturbation", budget::kPerturbation, order_perturbation},
        {"modality-masking", budget::kModality, modality_masking},
        {"cfg-identities", budget::kCfg, cfg_identities},
        {"lm-loss-oracle", budget::kLmLoss, lm_loss_oracle},
        {"gradient-checks", budget::kGrad, gradient_checks},
        {"round-trip", budget::kRoundTrip, round_trips},
        {"end-to-end-smoke", budget::kSmoke, smoke},
    };

    int failures = 0;
    for (const auto& c : criteria) {
        if (!only.empty() && !only.count(c.name)) continue;
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = c.run(ctx);
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        const double secs = seconds_since(t0);
        const bool in_time = secs < c.budget;
        const bool pass = o.pass && in_time;
        failures += !pass;
        std::cout << (pass ? "PASS " : "FAIL ") << c.name << ": " << o.detail
                  << fmt(" [%.2f s, budget %.0f s%s]", secs, c.budget, in_time ? "" : ", OVER BUDGET") << std::endl;
    }
    fs::remove_all(ctx.workdir);
    return failures == 0 ? 0 : 1;
}
