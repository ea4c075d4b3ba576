#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <torch/torch.h>

namespace ddt {

/// Affine map from 8-bit pixel values onto [lo, hi].
struct ValueRange {
    double lo = -1.0;
    double hi = 1.0;

    double span() const { return hi - lo; }
    double normalize(std::uint8_t v) const { return lo + span() * (static_cast<double>(v) / 255.0); }
    std::uint8_t denormalize(double x) const;
};

struct ManifestEntry {
    std::string image_path;  // relative to the manifest root
    std::string label;
};

/// Line-oriented `relative/path<TAB>label` list of images.
struct DatasetManifest {
    std::string root_path;
    std::vector<ManifestEntry> entries;
    std::int64_t resolution = 32;
    std::int64_t channels = 3;

    std::string absolute_path(const ManifestEntry& e) const;
    std::vector<std::string> label_set() const;
};

DatasetManifest read_manifest(const std::string& path, std::int64_t resolution, std::int64_t channels = 3);
void write_manifest(const DatasetManifest& m, const std::string& path);

/// Decodes an image file, center-crops it to a square, resizes it to
/// `resolution`, and returns a channels x resolution x resolution float
/// tensor (RGB order) in `range`.
torch::Tensor load_image(const std::string& path, std::int64_t resolution, const ValueRange& range = {});

/// Writes a 3 x H x W tensor in `range` as an 8-bit RGB PNG. `text` entries
/// become tEXt chunks.
void write_png(const std::string& path, const torch::Tensor& image, const std::map<std::string, std::string>& text = {},
               const ValueRange& range = {});
/// Reads the tEXt chunks of a PNG file.
std::map<std::string, std::string> read_png_text(const std::string& path);

struct LabeledImage {
    torch::Tensor image;
    std::string label;
};

/// Loads every manifest entry eagerly. Iteration order is a pure function of
/// (manifest, seed).
class ImageDataset {
public:
    ImageDataset(const DatasetManifest& manifest, const ValueRange& range = {});

    std::size_t size() const { return items_.size(); }
    const LabeledImage& operator[](std::size_t i) const { return items_.at(i); }

    std::vector<std::size_t> order(std::uint64_t seed) const;
    /// Stacks the given items into a B x C x H x W batch.
    torch::Tensor stack(const std::vector<std::size_t>& indices) const;
    torch::Tensor all_images() const;

private:
    std::vector<LabeledImage> items_;
};

/// Procedural desk-scale image set: a colored shape on a shaded background,
/// labelled "<color> <shape>". Writes PNGs and a manifest under `dir` and
/// returns the manifest.
DatasetManifest generate_synthetic_dataset(const std::string& dir, std::int64_t count, std::int64_t resolution,
                                           std::uint64_t seed);

}  // namespace ddt
