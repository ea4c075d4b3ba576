#include "ddt/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "ddt/binary_io.hpp"
#include "ddt/encoder.hpp"
#include "ddt/errors.hpp"
#include "ddt/tokenizer.hpp"

namespace ddt {

PerturbationSpec PerturbationSpec::parse(const std::string& name, std::uint64_t seed) {
    PerturbationSpec s;
    s.seed = seed;
    if (name == "none") return s;
    if (name == "global") {
        s.degree = Degree::global;
        return s;
    }
    if (name.rfind("local", 0) == 0) {
        auto digits = name.substr(5);
        if (!digits.empty() && digits.front() == '-') digits.erase(0, 1);
        if (!digits.empty() && std::all_of(digits.begin(), digits.end(), ::isdigit)) {
            s.degree = Degree::local;
            s.window = std::stoll(digits);
            if (s.window < 2) throw ConfigError("degrees", "local window must be at least 2, got " + digits);
            return s;
        }
    }
    throw ConfigError("degrees", "unknown perturbation degree '" + name + "'");
}

std::string PerturbationSpec::name() const {
    switch (degree) {
        case Degree::none: return "none";
        case Degree::global: return "global";
        case Degree::local: return "local" + std::to_string(window);
    }
    return "none";
}

TokenSequence perturb(const TokenSequence& sequence, const PerturbationSpec& spec) {
    TokenSequence out = sequence;
    if (spec.degree == PerturbationSpec::Degree::none || out.size() < 2) return out;
    std::mt19937_64 rng(mix_seed(spec.seed, out.size(), 0x9e37));
    if (spec.degree == PerturbationSpec::Degree::global) {
        std::shuffle(out.begin(), out.end(), rng);
        return out;
    }
    const auto w = static_cast<std::size_t>(spec.window);
    for (std::size_t start = 0; start < out.size(); start += w) {
        const auto end = std::min(out.size(), start + w);
        std::shuffle(out.begin() + start, out.begin() + end, rng);
    }
    return out;
}

const LossCurve& PerturbationResult::curve(const std::string& degree) const {
    for (const auto& c : curves)
        if (c.degree == degree) return c;
    throw ConfigError("degrees", "no curve for degree '" + degree + "'");
}

double PerturbationResult::gap(const std::string& degree) const {
    return curve(degree).final_loss - curve("none").final_loss;
}

PerturbationResult perturbation_experiment(const std::vector<TokenSequence>& corpus, std::int64_t codebook_size,
                                           const std::vector<std::string>& degrees, const LmConfig& lm,
                                           const RunConfig& run, std::uint64_t perturb_seed, std::size_t min_corpus,
                                           const std::string& corpus_name) {
    if (degrees.empty()) throw ConfigError("degrees", "at least one perturbation degree is required");
    if (corpus.size() < min_corpus)
        throw ConfigError("tokens", "corpus holds " + std::to_string(corpus.size()) + " sequences, at least " +
                                        std::to_string(min_corpus) + " are required");
    const auto T = static_cast<std::int64_t>(corpus.front().size());
    for (const auto& s : corpus)
        if (static_cast<std::int64_t>(s.size()) != T) throw ConfigError("tokens", "sequences differ in length");

    const VocabularyLayout layout(lm.text_vocab_size, codebook_size);
    json settings{{"lm", to_json(lm)}, {"run", to_json(run)}, {"codebook_size", codebook_size},
                  {"corpus_size", corpus.size()}, {"T", T}};
    const auto settings_hash = hash_hex(config_hash(settings));

    PerturbationResult result;
    result.corpus_name = corpus_name;
    for (const auto& name : degrees) {
        const auto base = PerturbationSpec::parse(name);
        LmCorpus data;
        data.visuals.reserve(corpus.size());
        for (std::size_t i = 0; i < corpus.size(); ++i) {
            auto spec = base;
            spec.seed = mix_seed(perturb_seed, i);
            data.visuals.push_back(perturb(corpus[i], spec));
        }
        data.captions.assign(corpus.size(), {});

        torch::manual_seed(static_cast<std::uint64_t>(run.seed));
        TransformerLM model(lm, layout.size());
        LossCurve curve;
        curve.degree = base.name();
        curve.settings_hash = settings_hash;
        train_lm(model, data, layout, T, run, [&](const LmReport& r) {
            curve.steps.push_back(r.step);
            curve.losses.push_back(r.nll.visual_count > 0 ? r.nll.visual_nll_sum / r.nll.visual_count : 0.0);
        });
        const auto tail = std::max<std::size_t>(1, curve.losses.size() / 10);
        curve.final_loss = std::accumulate(curve.losses.end() - tail, curve.losses.end(), 0.0) / tail;
        result.curves.push_back(std::move(curve));
    }
    return result;
}

namespace {

// images B x C x H x W → (B * patches) x patch_dim float64, raster order per image.
torch::Tensor all_patches(const torch::Tensor& images, std::int64_t patch_size) {
    const auto p = patchify(images.to(torch::kFloat32), patch_size);
    return p.reshape({-1, p.size(-1)}).to(torch::kFloat64).contiguous();
}

}  // namespace

std::int64_t nearest_centroid(const double* x, const torch::Tensor& centroids) {
    const auto k = centroids.size(0), d = centroids.size(1);
    const auto* c = centroids.data_ptr<double>();
    std::int64_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::int64_t j = 0; j < k; ++j) {
        const double* cj = c + j * d;
        double dist = 0;
        for (std::int64_t i = 0; i < d; ++i) {
            const double diff = x[i] - cj[i];
            dist += diff * diff;
        }
        if (dist < best_d) {
            best_d = dist;
            best = j;
        }
    }
    return best;
}

PatchVq patch_vq_baseline(const torch::Tensor& images, std::int64_t patch_size, std::int64_t k, std::uint64_t seed,
                          std::int64_t iterations) {
    if (k < 1) throw ConfigError("k", "k must be positive");
    const auto patches = all_patches(images, patch_size);
    const auto n = patches.size(0), d = patches.size(1);
    if (k > n)
        throw ConfigError("k", "k = " + std::to_string(k) + " exceeds the " + std::to_string(n) + " training patches");
    const auto* px = patches.data_ptr<double>();

    // Seeded init from distinct patch vectors.
    std::vector<std::int64_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<std::int64_t> chosen;
    std::set<std::vector<double>> seen;
    for (auto i : order) {
        if (static_cast<std::int64_t>(chosen.size()) == k) break;
        if (seen.emplace(px + i * d, px + (i + 1) * d).second) chosen.push_back(i);
    }
    const auto distinct = static_cast<std::int64_t>(chosen.size());
    if (distinct < k) {
        std::cerr << "warning: only " << distinct << " distinct patches for k = " << k
                  << "; remaining centroids duplicate the first and stay unused\n";
        while (static_cast<std::int64_t>(chosen.size()) < k) chosen.push_back(chosen.front());
    }
    auto centroids = torch::empty({k, d}, torch::kFloat64);
    for (std::int64_t j = 0; j < k; ++j) centroids[j].copy_(patches[chosen[j]]);

    std::vector<std::int64_t> assign(n, 0);
    for (std::int64_t it = 0; it < iterations; ++it) {
        for (std::int64_t i = 0; i < n; ++i) assign[i] = nearest_centroid(px + i * d, centroids);
        auto sums = torch::zeros({k, d}, torch::kFloat64);
        std::vector<std::int64_t> counts(k, 0);
        auto* s = sums.data_ptr<double>();
        for (std::int64_t i = 0; i < n; ++i) {
            ++counts[assign[i]];
            for (std::int64_t j = 0; j < d; ++j) s[assign[i] * d + j] += px[i * d + j];
        }
        for (std::int64_t j = 0; j < k; ++j)
            if (counts[j] > 0) centroids[j].copy_(sums[j] / static_cast<double>(counts[j]));
    }

    PatchVq vq;
    vq.patch_size = patch_size;
    vq.centroids = centroids;
    vq.tokens = patch_vq_encode(vq, images);
    std::set<std::uint32_t> used;
    for (const auto& seq : vq.tokens) used.insert(seq.begin(), seq.end());
    vq.effective_k = static_cast<std::int64_t>(used.size());
    return vq;
}

std::vector<TokenSequence> patch_vq_encode(const PatchVq& vq, const torch::Tensor& images) {
    const auto batch = images.dim() == 4 ? images.size(0) : 1;
    const auto patches = all_patches(images.dim() == 4 ? images : images.unsqueeze(0), vq.patch_size);
    const auto per_image = patches.size(0) / batch, d = patches.size(1);
    const auto* px = patches.data_ptr<double>();
    std::vector<TokenSequence> out(batch);
    for (std::int64_t b = 0; b < batch; ++b) {
        out[b].reserve(per_image);
        for (std::int64_t i = 0; i < per_image; ++i)
            out[b].push_back(static_cast<std::uint32_t>(nearest_centroid(px + (b * per_image + i) * d, vq.centroids)));
    }
    return out;
}

TokenSequence counterfactual_interpolate(const TokenSequence& a, const TokenSequence& b,
                                         const std::vector<bool>& take_from_b) {
    if (a.size() != b.size() || a.size() != take_from_b.size())
        throw DomainError("interpolation inputs differ in length: " + std::to_string(a.size()) + ", " +
                          std::to_string(b.size()) + ", mask " + std::to_string(take_from_b.size()));
    TokenSequence out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = take_from_b[i] ? b[i] : a[i];
    return out;
}

std::vector<std::string> split_list(const std::string& text) {
    std::vector<std::string> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        const auto first = item.find_first_not_of(" \t");
        if (first == std::string::npos) continue;
        out.push_back(item.substr(first, item.find_last_not_of(" \t") - first + 1));
    }
    return out;
}

std::vector<std::int64_t> parse_int_list(const std::string& text, const std::string& field) {
    std::vector<std::int64_t> out;
    for (const auto& item : split_list(text)) {
        std::size_t used = 0;
        std::int64_t v = 0;
        try {
            v = std::stoll(item, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used != item.size() || item.empty()) throw ConfigError(field, "'" + item + "' is not an integer");
        out.push_back(v);
    }
    return out;
}

std::vector<bool> parse_interpolation_mask(const std::string& text, std::int64_t T) {
    std::vector<bool> mask(T, false);
    for (const auto& item : split_list(text)) {
        const auto dash = item.find('-', 1);
        std::int64_t lo = 0, hi = 0;
        try {
            if (dash == std::string::npos) {
                lo = hi = std::stoll(item);
            } else {
                lo = std::stoll(item.substr(0, dash));
                hi = std::stoll(item.substr(dash + 1));
            }
        } catch (const std::exception&) {
            throw ConfigError("mask", "cannot parse '" + item + "'");
        }
        if (lo < 0 || hi >= T || lo > hi)
            throw ConfigError("mask", "'" + item + "' is outside [0, " + std::to_string(T - 1) + "]");
        for (auto i = lo; i <= hi; ++i) mask[i] = true;
    }
    return mask;
}

std::vector<torch::Tensor> prefix_decode_series(Decoder& decoder, const torch::Tensor& tokens,
                                                const std::vector<std::int64_t>& t_list, std::int64_t steps,
                                                std::uint64_t seed) {
    const auto T = tokens.size(0);
    for (std::size_t i = 0; i < t_list.size(); ++i) {
        if (t_list[i] < 1 || t_list[i] > T)
            throw DomainError("prefix length " + std::to_string(t_list[i]) + " outside [1, " + std::to_string(T) + "]");
        if (i > 0 && t_list[i] <= t_list[i - 1]) throw DomainError("prefix lengths must be strictly increasing");
    }
    SamplerOptions opts;
    opts.steps = steps;
    std::vector<torch::Tensor> out;
    out.reserve(t_list.size());
    for (auto t : t_list) out.push_back(sample_image(decoder, prefix_mask(tokens, t).tokens, seed, opts));
    return out;
}

PrefixSeriesStats prefix_series_stats(const std::vector<std::vector<double>>& per_image_psnr) {
    PrefixSeriesStats s;
    if (per_image_psnr.empty()) return s;
    const auto n = per_image_psnr.front().size();
    s.mean_psnr.assign(n, 0.0);
    for (const auto& row : per_image_psnr) {
        if (row.size() != n) throw DomainError("PSNR rows differ in length");
        for (std::size_t i = 0; i < n; ++i) s.mean_psnr[i] += row[i] / static_cast<double>(per_image_psnr.size());
    }
    for (std::size_t i = 1; i < n; ++i) {
        ++s.pairs;
        if (s.mean_psnr[i] < s.mean_psnr[i - 1]) ++s.violations;
    }
    return s;
}

void write_table(const std::string& path, const std::vector<std::string>& columns,
                 const std::vector<nlohmann::ordered_json>& rows, const Provenance& prov) {
    std::ostringstream out;
    for (const auto& row : rows) {
        if (row.size() != columns.size()) throw DomainError(path + ": row does not match the declared columns");
        nlohmann::ordered_json rec;
        for (const auto& c : columns) {
            if (!row.contains(c)) throw DomainError(path + ": row lacks column '" + c + "'");
            rec[c] = row.at(c);
        }
        rec["config_hash"] = prov.config_hash;
        rec["seed"] = prov.seed;
        out << rec.dump() << '\n';
    }
    const auto s = out.str();
    bin::write_file(path, std::vector<std::uint8_t>(s.begin(), s.end()));
}

namespace {

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
}

std::string curves_svg(const std::vector<PerturbationResult>& results, const Provenance& prov) {
    static const char* colors[] = {"#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02"};
    const double pw = 420, ph = 280, margin = 50;
    std::ostringstream svg;
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << fmt(pw * results.size()) << "\" height=\""
        << fmt(ph + 40) << "\">\n";
    svg << "<!-- config_hash " << prov.config_hash << " seed " << prov.seed << " -->\n";
    for (std::size_t r = 0; r < results.size(); ++r) {
        const auto& res = results[r];
        double lo = std::numeric_limits<double>::infinity(), hi = -lo;
        std::int64_t max_step = 1;
        for (const auto& c : res.curves) {
            for (auto l : c.losses) lo = std::min(lo, l), hi = std::max(hi, l);
            if (!c.steps.empty()) max_step = std::max(max_step, c.steps.back());
        }
        if (!(hi > lo)) hi = lo + 1;
        const double x0 = r * pw + margin, y0 = ph - margin + 20, w = pw - 1.5 * margin, h = ph - 1.5 * margin;
        svg << "<text x=\"" << fmt(x0) << "\" y=\"20\" font-size=\"14\">" << res.corpus_name << "</text>\n";
        svg << "<rect x=\"" << fmt(x0) << "\" y=\"" << fmt(y0 - h) << "\" width=\"" << fmt(w) << "\" height=\""
            << fmt(h) << "\" fill=\"none\" stroke=\"#888\"/>\n";
        svg << "<text x=\"" << fmt(x0 - 45) << "\" y=\"" << fmt(y0 - h + 10) << "\" font-size=\"10\">" << fmt(hi)
            << "</text>\n<text x=\"" << fmt(x0 - 45) << "\" y=\"" << fmt(y0) << "\" font-size=\"10\">" << fmt(lo)
            << "</text>\n";
        for (std::size_t ci = 0; ci < res.curves.size(); ++ci) {
            const auto& c = res.curves[ci];
            const auto* color = colors[ci % 6];
            svg << "<polyline fill=\"none\" stroke=\"" << color << "\" points=\"";
            for (std::size_t i = 0; i < c.losses.size(); ++i)
                svg << fmt(x0 + w * c.steps[i] / max_step) << ',' << fmt(y0 - h * (c.losses[i] - lo) / (hi - lo))
                    << ' ';
            svg << "\"/>\n<text x=\"" << fmt(x0 + w - 80) << "\" y=\"" << fmt(y0 - h + 15 + 14 * ci)
                << "\" font-size=\"11\" fill=\"" << color << "\">" << c.degree << "</text>\n";
        }
    }
    svg << "</svg>\n";
    return svg.str();
}

}  // namespace

void report_perturbation(const std::vector<PerturbationResult>& results, const std::string& dir,
                         const Provenance& prov) {
    if (results.empty()) throw ConfigError("degrees", "nothing to report");
    for (const auto& r : results)
        if (r.curves.empty()) throw ConfigError("degrees", "empty degree list for corpus '" + r.corpus_name + "'");
    std::filesystem::create_directories(dir);

    std::vector<nlohmann::ordered_json> curve_rows, final_rows;
    for (const auto& r : results) {
        const bool has_none = std::any_of(r.curves.begin(), r.curves.end(),
                                          [](const LossCurve& c) { return c.degree == "none"; });
        for (const auto& c : r.curves) {
            for (std::size_t i = 0; i < c.losses.size(); ++i)
                curve_rows.push_back({{"corpus", r.corpus_name}, {"degree", c.degree}, {"step", c.steps[i]},
                                      {"loss", c.losses[i]}});
            final_rows.push_back({{"corpus", r.corpus_name},
                                  {"degree", c.degree},
                                  {"final_loss", c.final_loss},
                                  {"gap_vs_none", has_none ? json(c.final_loss - r.curve("none").final_loss) : json()},
                                  {"settings_hash", c.settings_hash}});
        }
    }
    const auto base = std::filesystem::path(dir);
    write_table((base / "perturb_curves.jsonl").string(), {"corpus", "degree", "step", "loss"}, curve_rows, prov);
    write_table((base / "perturb_final.jsonl").string(),
                {"corpus", "degree", "final_loss", "gap_vs_none", "settings_hash"}, final_rows, prov);
    const auto svg = curves_svg(results, prov);
    bin::write_file((base / "perturb_curves.svg").string(), std::vector<std::uint8_t>(svg.begin(), svg.end()));
}

}  // namespace ddt
