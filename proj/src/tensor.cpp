#include "pdc/tensor.hpp"

#include <algorithm>
#include <numeric>

#include "pdc/errors.hpp"

namespace pdc {

int64_t shape_numel(const std::vector<int64_t>& s) {
    int64_t n = 1;
    for (int64_t d : s) {
        if (d < 0) throw ShapeError("negative dimension in shape " + shape_str(s));
        n *= d;
    }
    return n;
}

std::string shape_str(const std::vector<int64_t>& s) {
    std::string out = "(";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ", ";
        out += std::to_string(s[i]);
    }
    out += ")";
    return out;
}

Tensor::Tensor(std::vector<int64_t> s) : shape(std::move(s)) {
    data.assign(static_cast<size_t>(shape_numel(shape)), 0.0);
}

Tensor Tensor::full(std::vector<int64_t> s, double v) {
    Tensor t(std::move(s));
    t.fill(v);
    return t;
}

void Tensor::fill(double v) { std::fill(data.begin(), data.end(), v); }

int64_t Mask::count() const {
    int64_t n = 0;
    for (uint8_t x : v) n += x;
    return n;
}

}  // namespace pdc
