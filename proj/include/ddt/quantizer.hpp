#pragma once

#include <cstdint>
#include <random>
#include <span>

#include <torch/torch.h>

#include "ddt/config.hpp"

namespace ddt {

/// EMA-maintained VQ dictionary. All tensors are float64.
///
/// After any ema_update, entries[k] == ema_sum[k] / max(ema_count[k], count_eps).
/// Lookups compare L2-normalized copies; the unnormalized entries are what
/// gets passed downstream.
struct Codebook {
    static constexpr double count_eps = 1e-5;

    torch::Tensor entries;       // K x m
    torch::Tensor ema_count;     // K
    torch::Tensor ema_sum;       // K x m
    torch::Tensor usage_window;  // K, int64 assignments seen by the last update

    /// Random unit-norm entries with empty statistics, so the first
    /// reset_dead_codes call seeds every entry from data.
    static Codebook random(std::int64_t size, std::int64_t dim, std::uint64_t seed);
    static Codebook from_entries(const torch::Tensor& entries);

    std::int64_t size() const { return entries.size(0); }
    std::int64_t dim() const { return entries.size(1); }
    Codebook clone() const;
};

/// Counts degenerate inputs seen by lookups.
struct LookupDiagnostics {
    std::int64_t zero_norm_features = 0;
};

/// Affine projection x W^T + b applied row-wise (features: ... x n → ... x m).
torch::Tensor project(const torch::Tensor& features, const torch::Tensor& weight, const torch::Tensor& bias);

struct CodeMatch {
    std::int64_t id = 0;
    double cosine = 0.0;
};

/// Highest-cosine entry for one m-vector; ties go to the lowest index.
/// A zero-norm feature scores 0 against every entry and resolves to index 0.
CodeMatch nearest_code(std::span<const double> feature, const Codebook& codebook, LookupDiagnostics* diag = nullptr);
CodeMatch nearest_code(const torch::Tensor& feature, const Codebook& codebook, LookupDiagnostics* diag = nullptr);

/// nearest_code for every row of an N x m tensor → N int64 ids.
torch::Tensor nearest_codes(const torch::Tensor& features, const Codebook& codebook, LookupDiagnostics* diag = nullptr);

struct QuantizationResult {
    torch::Tensor ids;              // B x T int64
    torch::Tensor quantized;        // B x T x m, the selected entries (no gradient)
    torch::Tensor straight_through; // B x T x m, forward value = quantized, d/dfeatures = identity
    torch::Tensor commitment;       // B, sum_i ||V̂_i - V_i||^2 per item (differentiable in features)
};

/// features: B x T x m (or T x m, treated as B = 1).
QuantizationResult quantize_batch(const torch::Tensor& features, const Codebook& codebook,
                                  LookupDiagnostics* diag = nullptr);

/// One EMA step over vectors (N x m) assigned to ids (N):
///   count_k ← γ count_k + (1-γ) n_k,  sum_k ← γ sum_k + (1-γ) Σ v,
///   entry_k ← sum_k / max(count_k, count_eps).
void ema_update(Codebook& codebook, const torch::Tensor& features, const torch::Tensor& ids, double decay);

/// Overwrites every entry with ema_count < threshold by a uniformly drawn row
/// of `batch` (N x m); re-seeds its statistics with count = max(1, threshold)
/// and sum = count * entry. Returns the number of entries reset.
std::int64_t reset_dead_codes(Codebook& codebook, const torch::Tensor& batch, double threshold, std::mt19937_64& rng);

/// Distinct ids observed / codebook size.
double codebook_usage(std::span<const std::uint32_t> ids, std::int64_t codebook_size);
double codebook_usage(const torch::Tensor& ids, std::int64_t codebook_size);

}  // namespace ddt
