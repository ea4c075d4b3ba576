#include "ddt/cli.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>

#include "ddt/binary_io.hpp"
#include "ddt/checkpoint.hpp"
#include "ddt/config.hpp"
#include "ddt/dataset.hpp"
#include "ddt/errors.hpp"
#include "ddt/eval.hpp"
#include "ddt/lm.hpp"
#include "ddt/token_file.hpp"
#include "ddt/tokenizer.hpp"

namespace ddt::cli {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

namespace {

struct Common {
    std::string config;
    std::vector<std::string> overrides;
    std::optional<std::int64_t> seed;
};

void add_common(CLI::App* app, Common& c) {
    app->add_option("--config", c.config, "JSON config file")->check(CLI::ExistingFile);
    app->add_option("--set", c.overrides, "Override a config value, section.field=value (repeatable)")
        ->expected(1)
        ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
    app->add_option("--seed", c.seed, "Seed for every random stream of this run (falls back to DDT_SEED)");
}

std::optional<std::int64_t> effective_seed(const Common& c) {
    if (c.seed) return c.seed;
    if (const char* env = std::getenv("DDT_SEED"); env && *env) {
        try {
            std::size_t used = 0;
            const auto v = std::stoll(env, &used);
            if (used == std::string(env).size()) return v;
        } catch (const std::exception&) {
        }
        throw ConfigError("DDT_SEED", std::string("not an integer: '") + env + "'");
    }
    return std::nullopt;
}

struct Run {
    ResolvedConfig resolved;
    std::string hash;
    std::ostream& out;

    const ExperimentConfig& cfg() const { return resolved.config; }

    json metadata(std::int64_t seed) const {
        return json{{"config", resolved.document}, {"config_hash", hash}, {"seed", seed}};
    }
    void log(ojson record) const { out << record.dump() << std::endl; }
};

Run resolve(const Common& c, std::vector<std::string> extra, std::ostream& out, const std::string& command) {
    auto overrides = std::move(extra);
    overrides.insert(overrides.end(), c.overrides.begin(), c.overrides.end());
    if (const auto seed = effective_seed(c)) {
        for (const char* section : {"train", "lm_train", "sampling"})
            overrides.push_back(std::string(section) + ".seed=" + std::to_string(*seed));
    }
    Run r{resolve_config(c.config, overrides), "", out};
    r.hash = hash_hex(r.resolved.hash);
    r.log({{"event", "start"}, {"command", command}, {"config_hash", r.hash}});
    return r;
}

std::string manifest_path(const Run& run, const std::string& flag) {
    const auto& path = flag.empty() ? run.cfg().data.manifest : flag;
    if (path.empty()) throw ConfigError("data.manifest", "no manifest given (use --manifest or data.manifest)");
    return path;
}

torch::Tensor load_images(const std::string& manifest, std::int64_t resolution, std::vector<std::string>* labels) {
    const auto m = read_manifest(manifest, resolution);
    ImageDataset ds(m);
    if (labels)
        for (std::size_t i = 0; i < ds.size(); ++i) labels->push_back(ds[i].label);
    return ds.all_images();
}

void write_sidecar(const std::string& artifact, json meta) {
    meta["artifact"] = fs::path(artifact).filename().string();
    const auto s = meta.dump(2) + "\n";
    bin::write_file(artifact + ".meta.json", std::vector<std::uint8_t>(s.begin(), s.end()));
}

std::map<std::string, std::string> png_text(const std::string& hash, std::int64_t seed,
                                            std::map<std::string, std::string> extra = {}) {
    extra["config_hash"] = hash;
    extra["seed"] = std::to_string(seed);
    return extra;
}

std::string join_ids(const TokenSequence& ids) {
    std::string s;
    for (std::size_t i = 0; i < ids.size(); ++i) s += (i ? "," : "") + std::to_string(ids[i]);
    return s;
}

SamplerOptions sampler(const Run& run) {
    SamplerOptions o;
    o.steps = run.cfg().sampling.decode_steps;
    return o;
}

// ---- subcommands ----------------------------------------------------------------

struct SynthArgs {
    std::string out;
    std::int64_t count = 64;
    std::int64_t resolution = 32;
};

int cmd_synth(const Common& c, const SynthArgs& a, std::ostream& out) {
    auto run = resolve(c, {}, out, "synth-data");
    const auto seed = run.cfg().train.seed;
    generate_synthetic_dataset(a.out, a.count, a.resolution, static_cast<std::uint64_t>(seed));
    run.log({{"event", "dataset"}, {"manifest", (fs::path(a.out) / "manifest.tsv").string()}, {"count", a.count}});
    return kOk;
}

struct TrainTokArgs {
    std::string out;
    std::string manifest;
};

int cmd_train_tokenizer(const Common& c, const TrainTokArgs& a, std::ostream& out) {
    auto run = resolve(c, {}, out, "train-tokenizer");
    const auto& cfg = run.cfg();
    const auto seed = cfg.train.seed;
    const auto images = load_images(manifest_path(run, a.manifest), cfg.tokenizer.image_size, nullptr);
    fs::create_directories(a.out);

    TokenizerModel model(cfg.tokenizer, static_cast<std::uint64_t>(seed));
    auto meta = run.metadata(seed);
    std::ofstream losses(fs::path(a.out) / "losses.jsonl");
    const auto every = std::max<std::int64_t>(1, cfg.train.log_every);
    train_tokenizer(model, images, cfg.train, [&](const LossReport& r) {
        const bool last = r.step + 1 == cfg.train.total_steps;
        if (r.step % every == 0 || last) {
            auto rec = r.to_json();
            rec["config_hash"] = run.hash;
            rec["seed"] = seed;
            losses << rec.dump() << '\n';
            out << rec.dump() << std::endl;
        }
        const auto ck = cfg.train.checkpoint_every;
        if (ck > 0 && (r.step + 1) % ck == 0 && !last) {
            const auto path = fs::path(a.out) / ("tokenizer_step" + std::to_string(r.step + 1) + ".ckpt");
            save_checkpoint(model.to_checkpoint(meta, r.step + 1), path.string());
        }
    });
    const auto path = (fs::path(a.out) / "tokenizer.ckpt").string();
    save_checkpoint(model.to_checkpoint(meta, cfg.train.total_steps), path);
    run.log({{"event", "checkpoint"}, {"path", path}});
    return kOk;
}

struct EncodeArgs {
    std::string ckpt, manifest, out;
};

int cmd_encode(const Common& c, const EncodeArgs& a, std::ostream& out) {
    auto run = resolve(c, {}, out, "encode");
    auto model = TokenizerModel::from_checkpoint(load_checkpoint(a.ckpt));
    model.set_train(false);
    const auto images = load_images(manifest_path(run, a.manifest), model.cfg.image_size, nullptr);
    const auto seqs = model.tokenize_sequences(images);
    write_token_file(a.out, seqs, static_cast<std::uint32_t>(model.cfg.T),
                     static_cast<std::uint32_t>(model.cfg.codebook_size));
    const auto seed = run.cfg().sampling.seed;
    write_sidecar(a.out, {{"config_hash", run.hash}, {"seed", seed}, {"tokenizer_ckpt", a.ckpt},
                          {"manifest", manifest_path(run, a.manifest)}});
    run.log({{"event", "tokens"}, {"path", a.out}, {"count", seqs.size()}, {"T", model.cfg.T}});
    return kOk;
}

struct DecodeArgs {
    std::string ckpt, tokens, out_dir, manifest;
};

int cmd_decode(const Common& c, const DecodeArgs& a, std::ostream& out) {
    auto run = resolve(c, {}, out, "decode");
    auto model = TokenizerModel::from_checkpoint(load_checkpoint(a.ckpt));
    model.set_train(false);
    const auto file = read_token_file(a.tokens);
    if (file.header.T != model.cfg.T || file.header.codebook_size != model.cfg.codebook_size)
        throw ConfigError("tokens", "token file shape (T=" + std::to_string(file.header.T) + ", codebook " +
                                        std::to_string(file.header.codebook_size) +
                                        ") does not match the tokenizer checkpoint");
    torch::Tensor originals;
    if (!a.manifest.empty()) {
        originals = load_images(a.manifest, model.cfg.image_size, nullptr);
        if (originals.size(0) != static_cast<std::int64_t>(file.sequences.size()))
            throw ConfigError("manifest", "manifest and token file differ in count");
    }
    fs::create_directories(a.out_dir);
    const auto seed = run.cfg().sampling.seed;
    std::vector<ojson> rows;
    double psnr_sum = 0;
    for (std::size_t i = 0; i < file.sequences.size(); ++i) {
        const auto img_seed = static_cast<std::uint64_t>(seed) + i;
        const auto img = sample_image(model.decoder, model.embed(file.sequences[i]), img_seed, sampler(run));
        char name[32];
        std::snprintf(name, sizeof name, "%06zu.png", i);
        write_png((fs::path(a.out_dir) / name).string(), img,
                  png_text(run.hash, seed, {{"tokens", join_ids(file.sequences[i])}}));
        if (originals.defined()) {
            const double p = psnr(img, originals[static_cast<std::int64_t>(i)]);
            psnr_sum += p;
            rows.push_back({{"index", i}, {"image", name}, {"psnr", p}});
        }
    }
    if (originals.defined()) {
        const double mean = psnr_sum / static_cast<double>(file.sequences.size());
        write_table((fs::path(a.out_dir) / "recon.jsonl").string(), {"index", "image", "psnr"}, rows,
                    {run.hash, seed});
        run.log({{"event", "psnr"}, {"mean_psnr", mean}, {"count", file.sequences.size()}});
    }
    run.log({{"event", "decoded"}, {"dir", a.out_dir}, {"count", file.sequences.size()}});
    return kOk;
}

struct TrainLmArgs {
    std::string tokenizer_ckpt, out, manifest, tokens;
};

int cmd_train_lm(const Common& c, const TrainLmArgs& a, std::ostream& out) {
    auto run = resolve(c, {}, out, "train-lm");
    const auto& cfg = run.cfg();
    const auto seed = cfg.lm_train.seed;
    auto tok = TokenizerModel::from_checkpoint(load_checkpoint(a.tokenizer_ckpt));
    tok.set_train(false);
    if (cfg.lm.max_len < tok.cfg.T + 4) throw ConfigError("lm.max_len", "must hold a full visual span plus delimiters");

    std::vector<std::string> labels;
    const auto images = load_images(manifest_path(run, a.manifest), tok.cfg.image_size, &labels);
    LmCorpus corpus;
    if (!a.tokens.empty()) {
        auto file = read_token_file(a.tokens);
        if (file.sequences.size() != labels.size() || file.header.T != tok.cfg.T)
            throw ConfigError("tokens", "token cache does not match the manifest and tokenizer");
        corpus.visuals = std::move(file.sequences);
    } else {
        corpus.visuals = tok.tokenize_sequences(images);
    }
    for (const auto& l : labels) corpus.captions.push_back(encode_text(l));
    corpus.texts = corpus.captions;

    torch::manual_seed(static_cast<std::uint64_t>(seed));
    const VocabularyLayout layout(cfg.lm.text_vocab_size, tok.cfg.codebook_size);
    TransformerLM model(cfg.lm, layout.size());
    fs::create_directories(a.out);
    std::ofstream losses(fs::path(a.out) / "lm_losses.jsonl");
    const auto every = std::max<std::int64_t>(1, cfg.lm_train.log_every);
    std::vector<NllRecord> nll;
    train_lm(model, corpus, layout, tok.cfg.T, cfg.lm_train, [&](const LmReport& r) {
        nll.push_back(r.nll);
        if (r.step % every == 0 || r.step + 1 == cfg.lm_train.total_steps) {
            auto rec = r.to_json();
            rec["config_hash"] = run.hash;
            rec["seed"] = seed;
            losses << rec.dump() << '\n';
            out << rec.dump() << std::endl;
        }
    });
    std::vector<ojson> rows;
    for (const auto& p : track_perplexity(nll, every))
        rows.push_back({{"step", p.step},
                        {"text_perplexity", p.text ? json(*p.text) : json()},
                        {"visual_perplexity", p.visual ? json(*p.visual) : json()}});
    write_table((fs::path(a.out) / "perplexity.jsonl").string(), {"step", "text_perplexity", "visual_perplexity"},
                rows, {run.hash, seed});

    auto meta = run.metadata(seed);
    meta["tokenizer_ckpt"] = fs::absolute(a.tokenizer_ckpt).string();
    const auto path = (fs::path(a.out) / "lm.ckpt").string();
    save_checkpoint(lm_to_checkpoint(model, layout, tok.cfg.T, meta, cfg.lm_train.total_steps), path);
    run.log({{"event", "checkpoint"}, {"path", path}});
    return kOk;
}

struct GenerateArgs {
    std::string prompt, ckpt, tokenizer_ckpt, out;
    std::optional<std::int64_t> steps;
    std::optional<double> cfg;
};

int cmd_generate(const Common& c, const GenerateArgs& a, std::ostream& out) {
    std::vector<std::string> extra;
    if (a.steps) extra.push_back("sampling.decode_steps=" + std::to_string(*a.steps));
    if (a.cfg) extra.push_back("sampling.guidance_scale=" + json(*a.cfg).dump());
    auto run = resolve(c, extra, out, "generate");
    const auto& s = run.cfg().sampling;

    auto lm = lm_from_checkpoint(load_checkpoint(a.ckpt));
    const auto tok_path = a.tokenizer_ckpt.empty() ? lm.metadata.value("tokenizer_ckpt", "") : a.tokenizer_ckpt;
    if (tok_path.empty()) throw ConfigError("tokenizer-ckpt", "LM checkpoint names no tokenizer; pass --tokenizer-ckpt");
    auto tok = TokenizerModel::from_checkpoint(load_checkpoint(tok_path));
    tok.set_train(false);
    if (tok.cfg.T != lm.T || tok.cfg.codebook_size != lm.layout.visual_vocab_size)
        throw ConfigError("tokenizer-ckpt", "tokenizer does not match the LM vocabulary");

    std::mt19937_64 rng(static_cast<std::uint64_t>(s.seed));
    const auto ids = generate_image_tokens(lm.model, encode_text(a.prompt), s, lm.layout, lm.T, rng);
    const auto img = sample_image(tok.decoder, tok.embed(ids), static_cast<std::uint64_t>(s.seed), sampler(run));
    if (const auto parent = fs::path(a.out).parent_path(); !parent.empty()) fs::create_directories(parent);
    write_png(a.out, img, png_text(run.hash, s.seed, {{"prompt", a.prompt}, {"tokens", join_ids(ids)}}));
    run.log({{"event", "image"}, {"path", a.out}, {"tokens", ids}, {"guidance_scale", s.guidance_scale}});
    return kOk;
}

struct PerturbArgs {
    std::string tokens, baseline_tokens, degrees = "none,local4,local16,global", out_dir = "perturb";
    std::int64_t min_corpus = static_cast<std::int64_t>(kMinPerturbationCorpus);
};

int cmd_eval_perturb(const Common& c, const PerturbArgs& a, std::ostream& out) {
    auto run = resolve(c, {}, out, "eval perturb");
    const auto& cfg = run.cfg();
    const auto degrees = split_list(a.degrees);
    if (degrees.empty()) throw ConfigError("degrees", "empty degree list");
    const auto seed = cfg.lm_train.seed;
    auto lm_run = cfg.lm_train;
    lm_run.text_mixture_ratio = 0;

    std::vector<PerturbationResult> results;
    auto one = [&](const std::string& path, const std::string& name) {
        const auto file = read_token_file(path);
        auto res = perturbation_experiment(file.sequences, file.header.codebook_size, degrees, cfg.lm, lm_run,
                                           static_cast<std::uint64_t>(seed), static_cast<std::size_t>(a.min_corpus),
                                           name);
        for (const auto& curve : res.curves)
            run.log({{"event", "final_loss"}, {"corpus", name}, {"degree", curve.degree},
                     {"final_loss", curve.final_loss}});
        results.push_back(std::move(res));
    };
    one(a.tokens, fs::path(a.tokens).stem().string());
    if (!a.baseline_tokens.empty()) one(a.baseline_tokens, fs::path(a.baseline_tokens).stem().string());
    report_perturbation(results, a.out_dir, {run.hash, seed});
    run.log({{"event", "report"}, {"dir", a.out_dir}});
    return kOk;
}

struct PatchVqArgs {
    std::string manifest, out;
    std::int64_t k = 512, patch_size = 8, iterations = 15;
};

int cmd_eval_patch_vq(const Common& c, const PatchVqArgs& a, std::ostream& out) {
    auto run = resolve(c, {}, out, "eval patch-vq");
    const auto images = load_images(manifest_path(run, a.manifest), run.cfg().tokenizer.image_size, nullptr);
    const auto seed = run.cfg().train.seed;
    const auto vq = patch_vq_baseline(images, a.patch_size, a.k, static_cast<std::uint64_t>(seed), a.iterations);
    const auto T = static_cast<std::uint32_t>(vq.tokens.front().size());
    write_token_file(a.out, vq.tokens, T, static_cast<std::uint32_t>(a.k));
    write_sidecar(a.out, {{"config_hash", run.hash}, {"seed", seed}, {"k", a.k}, {"patch_size", a.patch_size},
                          {"effective_k", vq.effective_k}});
    run.log({{"event", "tokens"}, {"path", a.out}, {"count", vq.tokens.size()}, {"T", T}});
    return kOk;
}

struct InterpolateArgs {
    std::string ckpt, a, b, mask, out = "interpolate.png";
};

int cmd_eval_interpolate(const Common& c, const InterpolateArgs& a, std::ostream& out) {
    auto run = resolve(c, {}, out, "eval interpolate");
    auto model = TokenizerModel::from_checkpoint(load_checkpoint(a.ckpt));
    model.set_train(false);
    const auto res = model.cfg.image_size;
    const auto both = torch::stack({load_image(a.a, res), load_image(a.b, res)});
    const auto seqs = model.tokenize_sequences(both);
    const auto mask = parse_interpolation_mask(a.mask, model.cfg.T);
    const auto mixed = counterfactual_interpolate(seqs[0], seqs[1], mask);
    const auto seed = run.cfg().sampling.seed;
    const auto img = sample_image(model.decoder, model.embed(mixed), static_cast<std::uint64_t>(seed), sampler(run));
    write_png(a.out, img, png_text(run.hash, seed, {{"mask", a.mask}, {"tokens", join_ids(mixed)}}));
    run.log({{"event", "image"}, {"path", a.out}, {"tokens", mixed}});
    return kOk;
}

struct PrefixArgs {
    std::string ckpt, image, t_list = "1,2,4,8,16", out_dir = "prefix_series";
};

int cmd_eval_prefix(const Common& c, const PrefixArgs& a, std::ostream& out) {
    auto run = resolve(c, {}, out, "eval prefix-series");
    auto model = TokenizerModel::from_checkpoint(load_checkpoint(a.ckpt));
    model.set_train(false);
    const auto ts = parse_int_list(a.t_list, "t");
    const auto img = load_image(a.image, model.cfg.image_size);
    const auto tokens = model.embed(model.tokenize_sequences(img.unsqueeze(0))[0]);
    const auto seed = run.cfg().sampling.seed;
    const auto steps = run.cfg().sampling.decode_steps;
    const auto series = prefix_decode_series(model.decoder, tokens, ts, steps, static_cast<std::uint64_t>(seed));
    const auto full = ts.back() == model.cfg.T
                          ? series.back()
                          : sample_image(model.decoder, tokens, static_cast<std::uint64_t>(seed), sampler(run));
    fs::create_directories(a.out_dir);
    std::vector<ojson> rows;
    for (std::size_t i = 0; i < ts.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "prefix_t%03lld.png", static_cast<long long>(ts[i]));
        write_png((fs::path(a.out_dir) / name).string(), series[i],
                  png_text(run.hash, seed, {{"prefix", std::to_string(ts[i])}}));
        rows.push_back({{"t", ts[i]}, {"image", name}, {"psnr_vs_full", psnr(series[i], full)},
                        {"psnr_vs_input", psnr(series[i], img)}});
    }
    write_table((fs::path(a.out_dir) / "prefix_series.jsonl").string(), {"t", "image", "psnr_vs_full", "psnr_vs_input"},
                rows, {run.hash, seed});
    run.log({{"event", "series"}, {"dir", a.out_dir}, {"count", ts.size()}});
    return kOk;
}

struct ReconArgs {
    std::string ckpt, manifest, out = "recon.jsonl";
};

int cmd_eval_recon(const Common& c, const ReconArgs& a, std::ostream& out) {
    auto run = resolve(c, {}, out, "eval recon");
    auto model = TokenizerModel::from_checkpoint(load_checkpoint(a.ckpt));
    model.set_train(false);
    const auto images = load_images(manifest_path(run, a.manifest), model.cfg.image_size, nullptr);
    const auto seed = run.cfg().sampling.seed;
    const auto rep = eval_reconstruction(model, images, run.cfg().sampling.decode_steps, static_cast<std::uint64_t>(seed));
    std::vector<ojson> rows;
    for (std::size_t i = 0; i < rep.per_image.size(); ++i) rows.push_back({{"index", i}, {"psnr", rep.per_image[i]}});
    write_table(a.out, {"index", "psnr"}, rows, {run.hash, seed});
    run.log({{"event", "psnr"}, {"mean_psnr", rep.mean_psnr}, {"count", rep.per_image.size()}});
    return kOk;
}

}  // namespace

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Discrete diffusion timestep tokenizer and multimodal LM toolkit", "ddt"};
    app.require_subcommand(1);
    Common common;

    SynthArgs synth;
    auto* s_synth = app.add_subcommand("synth-data", "Write a procedural labelled image set and manifest");
    add_common(s_synth, common);
    s_synth->add_option("--out", synth.out, "Output directory")->required();
    s_synth->add_option("--count", synth.count, "Number of images")->check(CLI::PositiveNumber);
    s_synth->add_option("--resolution", synth.resolution, "Square image size")->check(CLI::PositiveNumber);

    TrainTokArgs tt;
    auto* s_tt = app.add_subcommand("train-tokenizer", "Train the encoder, quantizer and diffusion decoder");
    add_common(s_tt, common);
    s_tt->add_option("--out", tt.out, "Checkpoint directory")->required();
    s_tt->add_option("--manifest", tt.manifest, "Image manifest (overrides data.manifest)");

    TrainLmArgs tl;
    auto* s_tl = app.add_subcommand("train-lm", "Train the multimodal LM on tokenized captioned images");
    add_common(s_tl, common);
    s_tl->add_option("--tokenizer-ckpt", tl.tokenizer_ckpt, "Tokenizer checkpoint")->required();
    s_tl->add_option("--out", tl.out, "Output directory")->required();
    s_tl->add_option("--manifest", tl.manifest, "Captioned image manifest (overrides data.manifest)");
    s_tl->add_option("--tokens", tl.tokens, "Pre-encoded token file for the manifest images");

    EncodeArgs enc;
    auto* s_enc = app.add_subcommand("encode", "Tokenize every image of a manifest into a token file");
    add_common(s_enc, common);
    s_enc->add_option("--ckpt", enc.ckpt, "Tokenizer checkpoint")->required();
    s_enc->add_option("--manifest", enc.manifest, "Image manifest (overrides data.manifest)");
    s_enc->add_option("--out", enc.out, "Token file to write")->required();

    DecodeArgs dec;
    auto* s_dec = app.add_subcommand("decode", "Decode a token file into PNG images");
    add_common(s_dec, common);
    s_dec->add_option("--ckpt", dec.ckpt, "Tokenizer checkpoint")->required();
    s_dec->add_option("--tokens", dec.tokens, "Token file")->required();
    s_dec->add_option("--out-dir", dec.out_dir, "Image directory")->required();
    s_dec->add_option("--manifest", dec.manifest, "Original images; enables a PSNR table");

    GenerateArgs gen;
    auto* s_gen = app.add_subcommand("generate", "Caption-conditioned image generation");
    add_common(s_gen, common);
    s_gen->add_option("--prompt", gen.prompt, "Caption text")->required();
    s_gen->add_option("--ckpt", gen.ckpt, "LM checkpoint")->required();
    s_gen->add_option("--tokenizer-ckpt", gen.tokenizer_ckpt, "Tokenizer checkpoint (default: the one the LM names)");
    s_gen->add_option("--steps", gen.steps, "Decoder sampling steps");
    s_gen->add_option("--cfg", gen.cfg, "Classifier-free guidance scale");
    s_gen->add_option("--out", gen.out, "PNG to write")->required();

    auto* s_eval = app.add_subcommand("eval", "Analysis experiments: perturb, patch-vq, interpolate, prefix-series, recon");
    s_eval->require_subcommand(1);

    PerturbArgs pa;
    auto* e_perturb = s_eval->add_subcommand("perturb", "Order-perturbation study on token corpora");
    add_common(e_perturb, common);
    e_perturb->add_option("--tokens", pa.tokens, "Token file")->required();
    e_perturb->add_option("--baseline-tokens", pa.baseline_tokens, "Second token file compared alongside");
    e_perturb->add_option("--degrees", pa.degrees, "Comma-separated: none, local<w>, global");
    e_perturb->add_option("--out-dir", pa.out_dir, "Report directory");
    e_perturb->add_option("--min-corpus", pa.min_corpus, "Smallest accepted corpus")->check(CLI::NonNegativeNumber);

    PatchVqArgs pv;
    auto* e_pv = s_eval->add_subcommand("patch-vq", "Raster k-means patch tokens for a manifest");
    add_common(e_pv, common);
    e_pv->add_option("--manifest", pv.manifest, "Image manifest (overrides data.manifest)");
    e_pv->add_option("--out", pv.out, "Token file to write")->required();
    e_pv->add_option("--k", pv.k, "Number of centroids")->check(CLI::PositiveNumber);
    e_pv->add_option("--patch-size", pv.patch_size, "Patch edge in pixels")->check(CLI::PositiveNumber);
    e_pv->add_option("--iterations", pv.iterations, "Lloyd iterations")->check(CLI::NonNegativeNumber);

    InterpolateArgs ia;
    auto* e_int = s_eval->add_subcommand("interpolate", "Swap a subset of token positions between two images");
    add_common(e_int, common);
    e_int->add_option("--ckpt", ia.ckpt, "Tokenizer checkpoint")->required();
    e_int->add_option("--a", ia.a, "Base image")->required();
    e_int->add_option("--b", ia.b, "Donor image")->required();
    e_int->add_option("--mask", ia.mask, "Positions taken from b, e.g. 0,2,5-7")->required();
    e_int->add_option("--out", ia.out, "PNG to write");

    PrefixArgs pr;
    auto* e_pre = s_eval->add_subcommand("prefix-series", "Decode growing token prefixes of one image");
    add_common(e_pre, common);
    e_pre->add_option("--ckpt", pr.ckpt, "Tokenizer checkpoint")->required();
    e_pre->add_option("--image", pr.image, "Input image")->required();
    e_pre->add_option("--t", pr.t_list, "Strictly increasing prefix lengths");
    e_pre->add_option("--out-dir", pr.out_dir, "Output directory");

    ReconArgs ra;
    auto* e_rec = s_eval->add_subcommand("recon", "Reconstruction PSNR over a manifest");
    add_common(e_rec, common);
    e_rec->add_option("--ckpt", ra.ckpt, "Tokenizer checkpoint")->required();
    e_rec->add_option("--manifest", ra.manifest, "Image manifest (overrides data.manifest)");
    e_rec->add_option("--out", ra.out, "Table to write");

    for (auto* level : {&app, s_eval}) {
        const auto depth = level == &app ? 1u : 2u;
        if (args.size() <= depth || args[depth].empty() || args[depth][0] == '-') break;
        if (level == s_eval && args[1] != "eval") break;
        const auto subs = level->get_subcommands([](const CLI::App*) { return true; });
        const bool known = std::any_of(subs.begin(), subs.end(),
                                       [&](const CLI::App* sub) { return sub->get_name() == args[depth]; });
        if (!known) {
            err << "error [usage]: unknown subcommand '" << args[depth] << "'\n\n" << level->help();
            return kUsageError;
        }
    }

    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kOk;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return kOk;
    } catch (const CLI::ParseError& e) {
        // Help for the subcommand that failed, if any.
        const CLI::App* where = &app;
        for (auto* sub = app.get_subcommands().empty() ? nullptr : app.get_subcommands().front(); sub;
             sub = sub->get_subcommands().empty() ? nullptr : sub->get_subcommands().front())
            where = sub;
        err << "error [usage]: " << e.what() << "\n\n" << where->help();
        return kUsageError;
    }

    try {
        if (*s_synth) return cmd_synth(common, synth, out);
        if (*s_tt) return cmd_train_tokenizer(common, tt, out);
        if (*s_tl) return cmd_train_lm(common, tl, out);
        if (*s_enc) return cmd_encode(common, enc, out);
        if (*s_dec) return cmd_decode(common, dec, out);
        if (*s_gen) return cmd_generate(common, gen, out);
        if (*e_perturb) return cmd_eval_perturb(common, pa, out);
        if (*e_pv) return cmd_eval_patch_vq(common, pv, out);
        if (*e_int) return cmd_eval_interpolate(common, ia, out);
        if (*e_pre) return cmd_eval_prefix(common, pr, out);
        if (*e_rec) return cmd_eval_recon(common, ra, out);
    } catch (const ConfigError& e) {
        err << "error [config]: " << e.what() << '\n';
        return kConfigError;
    } catch (const LoadError& e) {
        err << "error [load]: " << e.what() << '\n';
        return kRuntimeError;
    } catch (const FormatError& e) {
        err << "error [format]: " << e.what() << '\n';
        return kRuntimeError;
    } catch (const std::exception& e) {
        err << "error [runtime]: " << e.what() << '\n';
        return kRuntimeError;
    }
    err << app.help();
    return kUsageError;
}

}  // namespace ddt::cli
