#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "ddt/config.hpp"
#include "ddt/decoder.hpp"
#include "ddt/lm.hpp"
#include "ddt/token_file.hpp"

namespace ddt {

/// How strongly a token sequence is reordered.
///
///     none      identity
///     local-w   each contiguous window of w positions shuffled on its own
///     global    one permutation of the whole sequence
struct PerturbationSpec {
    enum class Degree { none, local, global };
    Degree degree = Degree::none;
    std::int64_t window = 0;  // local only, >= 2
    std::uint64_t seed = 0;

    /// Accepts "none", "global", "local<w>" and "local-<w>".
    static PerturbationSpec parse(const std::string& name, std::uint64_t seed = 0);
    std::string name() const;
};

/// Reordered copy of `sequence`; the permutation depends only on
/// (spec, sequence length).
TokenSequence perturb(const TokenSequence& sequence, const PerturbationSpec& spec);

struct LossCurve {
    std::string degree;
    std::vector<std::int64_t> steps;
    std::vector<double> losses;  // mean NLL over visual-token targets per step
    double final_loss = 0;       // mean of the last tenth of `losses`
    std::string settings_hash;   // hash of every non-perturbation setting
};

struct PerturbationResult {
    std::string corpus_name;
    std::vector<LossCurve> curves;

    const LossCurve& curve(const std::string& degree) const;
    /// final_loss(degree) - final_loss("none").
    double gap(const std::string& degree) const;
};

constexpr std::size_t kMinPerturbationCorpus = 1000;

/// Trains one LM per degree on the corpus with every sequence perturbed by
/// its own seeded spec (seed = mix(perturb_seed, index)). Captions are empty,
/// so each training sequence is [BOS][BOV] tokens [EOV][EOS]. Throws
/// ConfigError when the corpus is smaller than `min_corpus` or `degrees` is
/// empty.
PerturbationResult perturbation_experiment(const std::vector<TokenSequence>& corpus, std::int64_t codebook_size,
                                           const std::vector<std::string>& degrees, const LmConfig& lm,
                                           const RunConfig& run, std::uint64_t perturb_seed,
                                           std::size_t min_corpus = kMinPerturbationCorpus,
                                           const std::string& corpus_name = "tokens");

/// Raster-order spatial tokens from k-means over non-overlapping patches.
struct PatchVq {
    std::int64_t patch_size = 0;
    torch::Tensor centroids;  // k x patch_dim, float64
    std::int64_t effective_k = 0;
    std::vector<TokenSequence> tokens;
};

/// Squared-Euclidean nearest centroid, lowest index on ties.
std::int64_t nearest_centroid(const double* x, const torch::Tensor& centroids);

/// Lloyd's k-means (seeded init from distinct patches, fixed iteration
/// count) over every patch of every image, then per-image raster ids.
/// Throws ConfigError when k exceeds the number of patches.
PatchVq patch_vq_baseline(const torch::Tensor& images, std::int64_t patch_size, std::int64_t k,
                          std::uint64_t seed, std::int64_t iterations = 15);
/// Ids for new images against an existing codebook.
std::vector<TokenSequence> patch_vq_encode(const PatchVq& vq, const torch::Tensor& images);

/// Position i comes from b where take_from_b[i], else from a.
TokenSequence counterfactual_interpolate(const TokenSequence& a, const TokenSequence& b,
                                         const std::vector<bool>& take_from_b);
/// Mask text: comma-separated indices and inclusive ranges ("0,2,5-7").
std::vector<bool> parse_interpolation_mask(const std::string& text, std::int64_t T);

/// One decode per prefix length t in `t_list` (strictly increasing within
/// [1, T]), all from the same noise seed. tokens: T x m codebook entries.
std::vector<torch::Tensor> prefix_decode_series(Decoder& decoder, const torch::Tensor& tokens,
                                                const std::vector<std::int64_t>& t_list, std::int64_t steps,
                                                std::uint64_t seed);

struct PrefixSeriesStats {
    std::vector<double> mean_psnr;  // per t, against the full decode
    std::int64_t violations = 0;    // adjacent decreases of mean_psnr
    std::int64_t pairs = 0;
};
PrefixSeriesStats prefix_series_stats(const std::vector<std::vector<double>>& per_image_psnr);

std::vector<std::int64_t> parse_int_list(const std::string& text, const std::string& field);
std::vector<std::string> split_list(const std::string& text);

/// Stamp carried by every emitted artifact.
struct Provenance {
    std::string config_hash;
    std::int64_t seed = 0;
};

/// Line-delimited JSON with a fixed column order. Every record must hold
/// exactly `columns`; config_hash and seed are appended to each row.
void write_table(const std::string& path, const std::vector<std::string>& columns,
                 const std::vector<nlohmann::ordered_json>& rows, const Provenance& prov);

/// Writes perturb_curves.jsonl, perturb_final.jsonl and perturb_curves.svg
/// (one panel per result) into `dir`. Throws ConfigError on empty input.
void report_perturbation(const std::vector<PerturbationResult>& results, const std::string& dir,
                         const Provenance& prov);

}  // namespace ddt
