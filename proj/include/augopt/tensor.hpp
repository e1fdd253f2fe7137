#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include "augopt/errors.hpp"

namespace augopt {

// Dense rank-N float array, row-major. Carrier for images, label logits,
// activations and gradients.
struct Tensor {
    std::vector<int> shape;
    std::vector<float> data;

    Tensor() = default;
    explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
        data.assign(numel(), 0.0f);
    }

    int64_t numel() const {
        int64_t n = 1;
        for (int d : shape) n *= d;
        return n;
    }

    int dim(int i) const { return shape[static_cast<size_t>(i)]; }
    int rank() const { return static_cast<int>(shape.size()); }

    float* ptr() { return data.data(); }
    const float* ptr() const { return data.data(); }

    float& at(std::initializer_list<int> idx) {
        return data[flat_index(idx)];
    }
    float at(std::initializer_list<int> idx) const {
        return data[flat_index(idx)];
    }

    void fill(float v) { std::fill(data.begin(), data.end(), v); }

    bool all_finite() const {
        for (float v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

private:
    size_t flat_index(std::initializer_list<int> idx) const {
        size_t f = 0;
        size_t d = 0;
        for (int i : idx) {
            f = f * static_cast<size_t>(shape[d]) + static_cast<size_t>(i);
            ++d;
        }
        return f;
    }
};

// Integer label map; values live in {0..c-1}.
struct LabelMap {
    std::vector<int> shape;  // [H, W] or [n, H, W]
    std::vector<uint8_t> data;

    LabelMap() = default;
    explicit LabelMap(std::vector<int> s) : shape(std::move(s)) {
        int64_t n = 1;
        for (int d : shape) n *= d;
        data.assign(static_cast<size_t>(n), 0);
    }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int dim(int i) const { return shape[static_cast<size_t>(i)]; }

    uint8_t& at2(int y, int x) {
        return data[static_cast<size_t>(y) * shape[1] + x];
    }
    uint8_t at2(int y, int x) const {
        return data[static_cast<size_t>(y) * shape[1] + x];
    }
};

inline std::string shape_str(const std::vector<int>& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

inline void require_shape(const Tensor& t, const std::vector<int>& want,
                          const std::string& what) {
    if (t.shape != want)
        throw ConfigError(what + ": expected shape " + shape_str(want) +
                          ", got " + shape_str(t.shape));
}

}  // namespace augopt
