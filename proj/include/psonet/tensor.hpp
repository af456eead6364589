#pragma once

#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <vector>

namespace psonet {

// Dense fp64 array with an explicit shape. All model math runs in double;
// single precision cannot survive the h=1e-4 finite-difference checks nor
// the exact checkpoint round-trip the training loop depends on.
struct Tensor {
    std::vector<size_t> shape;
    std::vector<double> data;

    Tensor() = default;

    static Tensor zeros(std::vector<size_t> shape) {
        Tensor t;
        t.shape = std::move(shape);
        t.data.assign(t.numel_from_shape(), 0.0);
        return t;
    }

    size_t numel() const { return data.size(); }

    size_t numel_from_shape() const {
        size_t n = 1;
        for (size_t d : shape) n *= d;
        return n;
    }

    double* ptr() { return data.data(); }
    const double* ptr() const { return data.data(); }

    void fill(double v) { std::fill(data.begin(), data.end(), v); }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }
};

} // namespace psonet
