#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace pdc {

using Dims3 = std::array<int64_t, 3>;
using Spacing = std::array<double, 3>;

// Dense row-major double tensor with a dynamic (small) rank.
struct Tensor {
    std::vector<int64_t> shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(std::vector<int64_t> s);

    static Tensor zeros(std::vector<int64_t> s) { return Tensor(std::move(s)); }
    static Tensor full(std::vector<int64_t> s, double v);

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int rank() const { return static_cast<int>(shape.size()); }
    int64_t dim(int i) const { return shape[static_cast<size_t>(i)]; }

    double* ptr() { return data.data(); }
    const double* ptr() const { return data.data(); }

    void fill(double v);
    bool same_shape(const Tensor& o) const { return shape == o.shape; }
};

int64_t shape_numel(const std::vector<int64_t>& s);
std::string shape_str(const std::vector<int64_t>& s);

// Binary 3D mask, one byte per voxel (0 or 1), row-major (D, H, W).
struct Mask {
    Dims3 shape{0, 0, 0};
    std::vector<uint8_t> v;

    Mask() = default;
    explicit Mask(Dims3 s) : shape(s), v(static_cast<size_t>(s[0] * s[1] * s[2]), 0) {}

    int64_t numel() const { return static_cast<int64_t>(v.size()); }
    uint8_t at(int64_t d, int64_t h, int64_t w) const {
        return v[static_cast<size_t>((d * shape[1] + h) * shape[2] + w)];
    }
    void set(int64_t d, int64_t h, int64_t w, uint8_t x) {
        v[static_cast<size_t>((d * shape[1] + h) * shape[2] + w)] = x;
    }
    int64_t count() const;
};

}  // namespace pdc
