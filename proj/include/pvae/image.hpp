#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "pvae/errors.hpp"
#include "pvae/tensor_io.hpp"

namespace pvae {

/**
 * Square-or-rectangular attenuation map, row-major, row 0 at the top.
 *
 * Pixel (r, c) covers x in [c - W/2, c + 1 - W/2] and y in
 * [H/2 - r - 1, H/2 - r], so the grid is centered on the origin with
 * unit pixel pitch.
 */
struct ImageGrid {
    int width = 0;
    int height = 0;
    std::vector<double> values;

    ImageGrid() = default;
    ImageGrid(int w, int h, double fill = 0.0)
        : width(w), height(h), values(static_cast<std::size_t>(w) * h, fill) {}

    static ImageGrid square(int n, double fill = 0.0) { return ImageGrid(n, n, fill); }

    std::size_t size() const { return values.size(); }
    double& at(int r, int c) { return values[static_cast<std::size_t>(r) * width + c]; }
    double at(int r, int c) const { return values[static_cast<std::size_t>(r) * width + c]; }

    double min() const { return values.empty() ? 0.0 : *std::min_element(values.begin(), values.end()); }
    double max() const { return values.empty() ? 0.0 : *std::max_element(values.begin(), values.end()); }

    bool same_shape(const ImageGrid& o) const { return width == o.width && height == o.height; }
    bool operator==(const ImageGrid&) const = default;
};

inline StoredTensor to_stored(const ImageGrid& img, std::string name = {}) {
    StoredTensor t;
    t.name = std::move(name);
    t.shape = {img.height, img.width};
    t.data.assign(img.values.begin(), img.values.end());
    return t;
}

inline ImageGrid image_from_stored(const StoredTensor& t) {
    if (t.shape.size() != 2) throw DataError("image tensor must be 2-D");
    ImageGrid img(static_cast<int>(t.shape[1]), static_cast<int>(t.shape[0]));
    std::copy(t.data.begin(), t.data.end(), img.values.begin());
    return img;
}

inline void save_image(const std::filesystem::path& path, const ImageGrid& img) {
    save_tensor(path, to_stored(img));
}

inline ImageGrid load_image(const std::filesystem::path& path) { return image_from_stored(load_tensor(path)); }

} // namespace pvae
