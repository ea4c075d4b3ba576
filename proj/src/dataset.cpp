#include "ddt/dataset.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <random>
#include <set>
#include <sstream>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "ddt/errors.hpp"

namespace fs = std::filesystem;

namespace ddt {

std::uint8_t ValueRange::denormalize(double x) const {
    const double u = (x - lo) / span() * 255.0;
    return static_cast<std::uint8_t>(std::clamp(std::lround(u), 0L, 255L));
}

std::string DatasetManifest::absolute_path(const ManifestEntry& e) const {
    return (fs::path(root_path) / e.image_path).string();
}

std::vector<std::string> DatasetManifest::label_set() const {
    std::set<std::string> s;
    for (const auto& e : entries) s.insert(e.label);
    return {s.begin(), s.end()};
}

DatasetManifest read_manifest(const std::string& path, std::int64_t resolution, std::int64_t channels) {
    std::ifstream in(path);
    if (!in) throw LoadError(path, "cannot open manifest");
    DatasetManifest m;
    m.root_path = fs::path(path).parent_path().string();
    m.resolution = resolution;
    m.channels = channels;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line.front() == '#') continue;
        const auto tab = line.find('\t');
        ManifestEntry e;
        if (tab == std::string::npos) {
            e.image_path = line;
        } else {
            e.image_path = line.substr(0, tab);
            e.label = line.substr(tab + 1);
        }
        if (e.image_path.empty()) throw LoadError(path, "line " + std::to_string(lineno) + ": empty image path");
        m.entries.push_back(std::move(e));
    }
    if (m.entries.empty()) throw ConfigError("data.manifest", "manifest " + path + " has no entries");
    return m;
}

void write_manifest(const DatasetManifest& m, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write manifest " + path);
    for (const auto& e : m.entries) out << e.image_path << '\t' << e.label << '\n';
}

torch::Tensor load_image(const std::string& path, std::int64_t resolution, const ValueRange& range) {
    if (!fs::exists(path)) throw LoadError(path, "file does not exist");
    cv::Mat bgr = cv::imread(path, cv::IMREAD_COLOR);
    if (bgr.empty()) throw LoadError(path, "cannot decode image");
    const int side = std::min(bgr.cols, bgr.rows);
    const cv::Rect crop((bgr.cols - side) / 2, (bgr.rows - side) / 2, side, side);
    cv::Mat square = bgr(crop);
    cv::Mat resized;
    if (side != resolution) {
        const int interp = side > resolution ? cv::INTER_AREA : cv::INTER_LINEAR;
        cv::resize(square, resized, cv::Size(static_cast<int>(resolution), static_cast<int>(resolution)), 0, 0, interp);
    } else {
        resized = square.clone();
    }
    cv::Mat rgb;
    cv::cvtColor(resized, rgb, cv::COLOR_BGR2RGB);

    auto out = torch::empty({3, resolution, resolution}, torch::kFloat32);
    auto acc = out.accessor<float, 3>();
    for (int y = 0; y < rgb.rows; ++y) {
        const auto* row = rgb.ptr<std::uint8_t>(y);
        for (int x = 0; x < rgb.cols; ++x)
            for (int c = 0; c < 3; ++c) acc[c][y][x] = static_cast<float>(range.normalize(row[3 * x + c]));
    }
    return out;
}

void write_png(const std::string& path, const torch::Tensor& image, const std::map<std::string, std::string>& text,
               const ValueRange& range) {
    if (image.dim() != 3 || image.size(0) != 3) throw std::invalid_argument("write_png expects a 3 x H x W tensor");
    const auto img = image.detach().to(torch::kCPU, torch::kFloat64).contiguous();
    const auto h = static_cast<png_uint_32>(img.size(1));
    const auto w = static_cast<png_uint_32>(img.size(2));
    auto acc = img.accessor<double, 3>();
    std::vector<std::uint8_t> pixels(static_cast<std::size_t>(h) * w * 3);
    for (png_uint_32 y = 0; y < h; ++y)
        for (png_uint_32 x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c) pixels[(y * w + x) * 3 + c] = range.denormalize(acc[c][y][x]);

    const fs::path target(path);
    if (target.has_parent_path()) fs::create_directories(target.parent_path());
    std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.c_str(), "wb"), &std::fclose);
    if (!fp) throw std::runtime_error("cannot open " + path + " for writing");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_write_struct(&png, &info);
        throw std::runtime_error("libpng initialisation failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw std::runtime_error("libpng failed writing " + path);
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, w, h, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    std::vector<png_text> chunks;
    std::vector<std::string> storage;
    storage.reserve(text.size() * 2);
    for (const auto& [k, v] : text) {
        storage.push_back(k);
        storage.push_back(v);
        png_text t{};
        t.compression = PNG_TEXT_COMPRESSION_NONE;
        t.key = storage[storage.size() - 2].data();
        t.text = storage.back().data();
        t.text_length = v.size();
        chunks.push_back(t);
    }
    if (!chunks.empty()) png_set_text(png, info, chunks.data(), static_cast<int>(chunks.size()));
    png_write_info(png, info);
    for (png_uint_32 y = 0; y < h; ++y) png_write_row(png, pixels.data() + static_cast<std::size_t>(y) * w * 3);
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

std::map<std::string, std::string> read_png_text(const std::string& path) {
    std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.c_str(), "rb"), &std::fclose);
    if (!fp) throw LoadError(path, "cannot open file");
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw std::runtime_error("libpng initialisation failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw LoadError(path, "not a readable PNG");
    }
    png_init_io(png, fp.get());
    png_read_info(png, info);
    std::map<std::string, std::string> out;
    png_textp text = nullptr;
    int n = 0;
    if (png_get_text(png, info, &text, &n) > 0)
        for (int i = 0; i < n; ++i) out[text[i].key] = std::string(text[i].text, text[i].text_length);
    png_destroy_read_struct(&png, &info, nullptr);
    return out;
}

ImageDataset::ImageDataset(const DatasetManifest& manifest, const ValueRange& range) {
    if (manifest.entries.empty()) throw ConfigError("data.manifest", "manifest has no entries");
    items_.reserve(manifest.entries.size());
    for (const auto& e : manifest.entries)
        items_.push_back({load_image(manifest.absolute_path(e), manifest.resolution, range), e.label});
}

std::vector<std::size_t> ImageDataset::order(std::uint64_t seed) const {
    std::vector<std::size_t> idx(items_.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::mt19937_64 rng(seed);
    std::shuffle(idx.begin(), idx.end(), rng);
    return idx;
}

torch::Tensor ImageDataset::stack(const std::vector<std::size_t>& indices) const {
    std::vector<torch::Tensor> ts;
    ts.reserve(indices.size());
    for (auto i : indices) ts.push_back(items_.at(i).image);
    return torch::stack(ts);
}

torch::Tensor ImageDataset::all_images() const {
    std::vector<torch::Tensor> ts;
    ts.reserve(items_.size());
    for (const auto& it : items_) ts.push_back(it.image);
    return torch::stack(ts);
}

DatasetManifest generate_synthetic_dataset(const std::string& dir, std::int64_t count, std::int64_t resolution,
                                           std::uint64_t seed) {
    static const std::vector<std::pair<std::string, cv::Scalar>> kColors = {
        {"red", {40, 40, 220}}, {"green", {60, 200, 60}}, {"blue", {230, 90, 30}}, {"yellow", {40, 220, 235}}};
    static const std::vector<std::string> kShapes = {"circle", "square", "triangle", "bar"};

    fs::create_directories(fs::path(dir) / "images");
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const int R = static_cast<int>(resolution);

    DatasetManifest m;
    m.root_path = dir;
    m.resolution = resolution;
    m.channels = 3;
    for (std::int64_t i = 0; i < count; ++i) {
        const auto& [cname, color] = kColors[rng() % kColors.size()];
        const auto& shape = kShapes[rng() % kShapes.size()];

        cv::Mat img(R, R, CV_8UC3);
        const cv::Vec3d top(40 + 80 * unit(rng), 40 + 80 * unit(rng), 40 + 80 * unit(rng));
        const cv::Vec3d bottom(40 + 80 * unit(rng), 40 + 80 * unit(rng), 40 + 80 * unit(rng));
        for (int y = 0; y < R; ++y) {
            const double a = static_cast<double>(y) / std::max(1, R - 1);
            const cv::Vec3d c = (1 - a) * top + a * bottom;
            img.row(y).setTo(cv::Scalar(c[0], c[1], c[2]));
        }

        const double size = R * (0.22 + 0.18 * unit(rng));
        const cv::Point center(static_cast<int>(size + (R - 2 * size) * unit(rng)),
                               static_cast<int>(size + (R - 2 * size) * unit(rng)));
        const int s = static_cast<int>(size);
        if (shape == "circle") {
            cv::circle(img, center, s, color, cv::FILLED, cv::LINE_AA);
        } else if (shape == "square") {
            cv::rectangle(img, {center.x - s, center.y - s}, {center.x + s, center.y + s}, color, cv::FILLED, cv::LINE_AA);
        } else if (shape == "triangle") {
            std::vector<cv::Point> pts{{center.x, center.y - s}, {center.x - s, center.y + s}, {center.x + s, center.y + s}};
            cv::fillConvexPoly(img, pts, color, cv::LINE_AA);
        } else {
            cv::rectangle(img, {0, center.y - s / 3}, {R - 1, center.y + s / 3}, color, cv::FILLED, cv::LINE_AA);
        }

        char name[64];
        std::snprintf(name, sizeof name, "images/%06lld.png", static_cast<long long>(i));
        if (!cv::imwrite((fs::path(dir) / name).string(), img))
            throw std::runtime_error(std::string("cannot write ") + name);
        m.entries.push_back({name, cname + " " + shape});
    }
    write_manifest(m, (fs::path(dir) / "manifest.tsv").string());
    return m;
}

}  // namespace ddt
