#pragma once

#include <atomic>
#include <filesystem>
#include <functional>
#include <string>

#include <torch/torch.h>

namespace ddt::test {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    TempDir() {
        static std::atomic<int> counter{0};
        path_ = std::filesystem::temp_directory_path() /
                ("ddt_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    std::string file(const std::string& name) const { return (path_ / name).string(); }
    const std::filesystem::path& path() const { return path_; }

private:
    std::filesystem::path path_;
};

/// Central-difference gradient of scalar f at x (float64), entry by entry.
inline torch::Tensor numeric_gradient(const std::function<double(const torch::Tensor&)>& f, torch::Tensor x,
                                      double h = 1e-6) {
    x = x.detach().clone().to(torch::kFloat64).contiguous();
    auto g = torch::zeros_like(x);
    auto* px = x.data_ptr<double>();
    auto* pg = g.data_ptr<double>();
    for (std::int64_t i = 0; i < x.numel(); ++i) {
        const double keep = px[i];
        px[i] = keep + h;
        const double up = f(x);
        px[i] = keep - h;
        const double down = f(x);
        px[i] = keep;
        pg[i] = (up - down) / (2 * h);
    }
    return g;
}

/// max |a-b| / max(max |b|, floor).
inline double relative_error(const torch::Tensor& a, const torch::Tensor& b, double floor = 1e-8) {
    const double diff = (a - b).abs().max().item<double>();
    return diff / std::max(b.abs().max().item<double>(), floor);
}

}  // namespace ddt::test
