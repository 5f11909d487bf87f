#include "pguard/tensor.hpp"

#include <cmath>
#include <sstream>

#include "pguard/util.hpp"

namespace pguard {

std::int64_t numel(const std::vector<int>& shape) {
    std::int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

std::string shape_str(const std::vector<int>& shape) {
    std::ostringstream out;
    out << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out << ", ";
        out << shape[i];
    }
    out << "]";
    return out.str();
}

Tensor::Tensor(std::vector<int> s) : shape(std::move(s)) {
    for (int d : shape) {
        if (d < 0) throw ShapeError("negative dimension in " + shape_str(shape));
    }
    data.assign(static_cast<std::size_t>(numel(shape)), 0.0f);
}

Tensor::Tensor(std::vector<int> s, std::vector<float> d) : shape(std::move(s)), data(std::move(d)) {
    if (numel(shape) != static_cast<std::int64_t>(data.size())) {
        throw ShapeError("tensor data length " + std::to_string(data.size()) +
                         " does not match shape " + shape_str(shape));
    }
}

bool Tensor::all_finite() const {
    for (float v : data) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

}  // namespace pguard
