#include "ddt/quantizer.hpp"

#include <cmath>
#include <stdexcept>
#include <vector>

#include "ddt/errors.hpp"

namespace ddt {
namespace {

const auto kF64 = torch::TensorOptions().dtype(torch::kFloat64);

// Row-normalized copy of a K x m table; zero rows stay zero.
std::vector<double> normalized_rows(const torch::Tensor& table) {
    const auto t = table.detach().to(torch::kFloat64).contiguous();
    const auto K = t.size(0), m = t.size(1);
    std::vector<double> out(t.data_ptr<double>(), t.data_ptr<double>() + K * m);
    for (std::int64_t k = 0; k < K; ++k) {
        double norm = 0;
        for (std::int64_t j = 0; j < m; ++j) norm += out[k * m + j] * out[k * m + j];
        norm = std::sqrt(norm);
        if (norm > 0)
            for (std::int64_t j = 0; j < m; ++j) out[k * m + j] /= norm;
    }
    return out;
}

CodeMatch scan(std::span<const double> feature, const std::vector<double>& unit_entries, std::int64_t K,
               LookupDiagnostics* diag) {
    const auto m = static_cast<std::int64_t>(feature.size());
    double norm = 0;
    for (double v : feature) norm += v * v;
    norm = std::sqrt(norm);
    if (norm == 0 || !std::isfinite(norm)) {
        if (diag) ++diag->zero_norm_features;
        return {0, 0.0};
    }
    std::vector<double> unit(feature.begin(), feature.end());
    for (double& v : unit) v /= norm;

    CodeMatch best{0, -std::numeric_limits<double>::infinity()};
    for (std::int64_t k = 0; k < K; ++k) {
        const double* e = unit_entries.data() + k * m;
        double dot = 0;
        for (std::int64_t j = 0; j < m; ++j) dot += unit[j] * e[j];
        if (dot > best.cosine) best = {k, dot};
    }
    return best;
}

}  // namespace

Codebook Codebook::random(std::int64_t size, std::int64_t dim, std::uint64_t seed) {
    auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
    auto e = torch::randn({size, dim}, gen, kF64);
    e = e / e.norm(2, 1, true).clamp_min(1e-12);
    Codebook c;
    c.entries = e;
    c.ema_count = torch::zeros({size}, kF64);
    c.ema_sum = torch::zeros({size, dim}, kF64);
    c.usage_window = torch::zeros({size}, torch::kInt64);
    return c;
}

Codebook Codebook::from_entries(const torch::Tensor& entries) {
    Codebook c;
    c.entries = entries.detach().to(torch::kFloat64).clone();
    c.ema_count = torch::ones({c.size()}, kF64);
    c.ema_sum = c.entries.clone();
    c.usage_window = torch::zeros({c.size()}, torch::kInt64);
    return c;
}

Codebook Codebook::clone() const {
    return {entries.clone(), ema_count.clone(), ema_sum.clone(), usage_window.clone()};
}

torch::Tensor project(const torch::Tensor& features, const torch::Tensor& weight, const torch::Tensor& bias) {
    TORCH_CHECK(features.size(-1) == weight.size(1), "projection input width ", features.size(-1),
                " does not match weight ", weight.sizes());
    return torch::nn::functional::linear(features, weight, bias);
}

CodeMatch nearest_code(std::span<const double> feature, const Codebook& codebook, LookupDiagnostics* diag) {
    if (codebook.size() == 0) throw DomainError("nearest_code: empty codebook");
    if (static_cast<std::int64_t>(feature.size()) != codebook.dim())
        throw DomainError("nearest_code: feature dimension does not match the codebook");
    return scan(feature, normalized_rows(codebook.entries), codebook.size(), diag);
}

CodeMatch nearest_code(const torch::Tensor& feature, const Codebook& codebook, LookupDiagnostics* diag) {
    const auto f = feature.detach().to(torch::kFloat64).contiguous().reshape({-1});
    return nearest_code(std::span<const double>(f.data_ptr<double>(), f.numel()), codebook, diag);
}

torch::Tensor nearest_codes(const torch::Tensor& features, const Codebook& codebook, LookupDiagnostics* diag) {
    if (codebook.size() == 0) throw DomainError("nearest_codes: empty codebook");
    const auto f = features.detach().to(torch::kFloat64).contiguous().reshape({-1, codebook.dim()});
    const auto unit_entries = normalized_rows(codebook.entries);
    const auto N = f.size(0), m = f.size(1);
    auto ids = torch::empty({N}, torch::kInt64);
    auto* out = ids.data_ptr<std::int64_t>();
    const double* rows = f.data_ptr<double>();
    for (std::int64_t i = 0; i < N; ++i)
        out[i] = scan({rows + i * m, static_cast<std::size_t>(m)}, unit_entries, codebook.size(), diag).id;
    return ids;
}

QuantizationResult quantize_batch(const torch::Tensor& features, const Codebook& codebook, LookupDiagnostics* diag) {
    const auto x = features.dim() == 2 ? features.unsqueeze(0) : features;
    TORCH_CHECK(x.dim() == 3 && x.size(2) == codebook.dim(), "quantize_batch expects B x T x ", codebook.dim(),
                " features, got ", features.sizes());
    const auto B = x.size(0), T = x.size(1);
    QuantizationResult r;
    r.ids = nearest_codes(x, codebook, diag).view({B, T});
    r.quantized = codebook.entries.index_select(0, r.ids.reshape({-1})).view({B, T, codebook.dim()}).to(x.dtype());
    r.straight_through = x + (r.quantized - x).detach();
    r.commitment = (x - r.quantized).pow(2).sum({1, 2});
    return r;
}

void ema_update(Codebook& cb, const torch::Tensor& features, const torch::Tensor& ids, double decay) {
    torch::NoGradGuard no_grad;
    const auto f = features.detach().to(torch::kFloat64).reshape({-1, cb.dim()});
    const auto idx = ids.reshape({-1}).to(torch::kInt64);
    TORCH_CHECK(f.size(0) == idx.size(0), "ema_update: one id per feature row required");
    auto counts = torch::zeros({cb.size()}, kF64).index_add_(0, idx, torch::ones({idx.size(0)}, kF64));
    auto sums = torch::zeros({cb.size(), cb.dim()}, kF64).index_add_(0, idx, f);
    cb.ema_count.mul_(decay).add_(counts, 1.0 - decay);
    cb.ema_sum.mul_(decay).add_(sums, 1.0 - decay);
    cb.entries.copy_(cb.ema_sum / cb.ema_count.clamp_min(Codebook::count_eps).unsqueeze(1));
    cb.usage_window.copy_(counts.to(torch::kInt64));
}

std::int64_t reset_dead_codes(Codebook& cb, const torch::Tensor& batch, double threshold, std::mt19937_64& rng) {
    torch::NoGradGuard no_grad;
    const auto f = batch.detach().to(torch::kFloat64).reshape({-1, cb.dim()});
    if (f.size(0) == 0) throw DomainError("reset_dead_codes: empty batch");
    if (threshold <= 0) return 0;
    const double fresh = std::max(1.0, threshold);
    std::uniform_int_distribution<std::int64_t> pick(0, f.size(0) - 1);
    auto counts = cb.ema_count.accessor<double, 1>();
    std::int64_t n = 0;
    for (std::int64_t k = 0; k < cb.size(); ++k) {
        if (counts[k] >= threshold) continue;
        const auto row = f[pick(rng)];
        cb.entries[k].copy_(row);
        cb.ema_sum[k].copy_(row * fresh);
        counts[k] = fresh;
        ++n;
    }
    return n;
}

double codebook_usage(std::span<const std::uint32_t> ids, std::int64_t codebook_size) {
    if (ids.empty()) throw DomainError("codebook_usage: empty id stream");
    std::vector<bool> seen(static_cast<std::size_t>(codebook_size), false);
    std::int64_t distinct = 0;
    for (auto id : ids) {
        if (id >= codebook_size) throw DomainError("codebook_usage: id out of range");
        if (!seen[id]) {
            seen[id] = true;
            ++distinct;
        }
    }
    return static_cast<double>(distinct) / static_cast<double>(codebook_size);
}

double codebook_usage(const torch::Tensor& ids, std::int64_t codebook_size) {
    const auto flat = ids.reshape({-1}).to(torch::kInt64).contiguous();
    std::vector<std::uint32_t> v(flat.numel());
    const auto* p = flat.data_ptr<std::int64_t>();
    for (std::int64_t i = 0; i < flat.numel(); ++i) v[i] = static_cast<std::uint32_t>(p[i]);
    return codebook_usage(v, codebook_size);
}

}  // namespace ddt
