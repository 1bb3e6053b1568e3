#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace rstm {

// Dense row-major n-d array. Training runs with T=float, the gradient
// verification harness re-executes the same graphs with T=double.
template <typename T>
struct Tensor {
    std::vector<int> dims;
    std::vector<T> data;
    std::vector<T> grad;  // empty unless this tensor accumulates gradients

    Tensor() = default;
    explicit Tensor(std::vector<int> d, T fill = T(0)) : dims(std::move(d)) {
        data.assign(count(dims), fill);
    }

    static std::int64_t count(const std::vector<int>& d) {
        std::int64_t n = 1;
        for (int x : d) {
            if (x <= 0) throw std::invalid_argument("Tensor: nonpositive dim");
            n *= x;
        }
        return n;
    }

    std::int64_t size() const { return static_cast<std::int64_t>(data.size()); }
    int ndim() const { return static_cast<int>(dims.size()); }
    int dim(int i) const { return dims.at(static_cast<std::size_t>(i)); }

    // 2-d / 4-d accessors for the common layouts [R,C] and [N,C,H,W]
    T& at2(int r, int c) { return data[static_cast<std::size_t>(r) * dims[1] + c]; }
    T at2(int r, int c) const { return data[static_cast<std::size_t>(r) * dims[1] + c]; }
    T& at4(int n, int c, int h, int w) {
        return data[((static_cast<std::size_t>(n) * dims[1] + c) * dims[2] + h) * dims[3] + w];
    }
    T at4(int n, int c, int h, int w) const {
        return data[((static_cast<std::size_t>(n) * dims[1] + c) * dims[2] + h) * dims[3] + w];
    }

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    }
    void zero_grad() { grad.assign(data.size(), T(0)); }

    bool all_finite() const {
        for (T v : data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out;
        out.dims = dims;
        out.data.resize(data.size());
        for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
        return out;
    }
};

inline std::string shape_str(const std::vector<int>& d) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < d.size(); ++i) os << (i ? "," : "") << d[i];
    os << "]";
    return os.str();
}

struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline void require_shape(bool ok, const std::string& what, const std::vector<int>& a,
                          const std::vector<int>& b) {
    if (!ok) throw ShapeError(what + ": " + shape_str(a) + " vs " + shape_str(b));
}

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace rstm
