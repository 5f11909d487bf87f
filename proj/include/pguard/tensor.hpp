#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace pguard {

std::int64_t numel(const std::vector<int>& shape);
std::string shape_str(const std::vector<int>& shape);

/// Dense row-major float32 tensor. Images are stored H x W x C.
struct Tensor {
    std::vector<int> shape;
    std::vector<float> data;

    Tensor() = default;
    explicit Tensor(std::vector<int> s);
    Tensor(std::vector<int> s, std::vector<float> d);

    std::int64_t size() const { return static_cast<std::int64_t>(data.size()); }

    // 3-D accessors (y, x, c) for image-shaped tensors.
    float& at(int y, int x, int c) {
        return data[static_cast<std::size_t>((y * shape[1] + x) * shape[2] + c)];
    }
    float at(int y, int x, int c) const {
        return data[static_cast<std::size_t>((y * shape[1] + x) * shape[2] + c)];
    }

    bool same_shape(const Tensor& other) const { return shape == other.shape; }

    bool all_finite() const;
};

}  // namespace pguard
