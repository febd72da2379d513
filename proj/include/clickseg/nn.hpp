#ifndef CLICKSEG_NN_HPP
#define CLICKSEG_NN_HPP

#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "clickseg/rng.hpp"
#include "clickseg/tensor.hpp"

namespace clickseg {

/// Parameter tensors with stable names, in registration order.
using NamedParameters = std::vector<std::pair<std::string, Tensor>>;

/// Fills a leaf with uniform(-bound, bound) and marks it trainable.
inline Tensor init_uniform(Shape shape, double bound, Rng& rng) {
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = rng.uniform(-bound, bound);
    return Tensor(std::move(shape), std::move(v), true);
}

/// y = x W + b with W [in, out] and b [1, out].
struct Linear {
    Tensor weight;
    Tensor bias;

    Linear() = default;
    Linear(std::size_t in, std::size_t out, Rng& rng) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(in));
        weight = init_uniform({in, out}, bound, rng);
        bias = init_uniform({1, out}, bound, rng);
    }

    Tensor operator()(const Tensor& x) const { return add(matmul(x, weight), bias); }

    void collect(const std::string& prefix, NamedParameters& out) const {
        out.emplace_back(prefix + ".weight", weight);
        out.emplace_back(prefix + ".bias", bias);
    }
};

/// Layer normalization over the feature axis with learned scale and shift.
struct Norm {
    Tensor gamma;
    Tensor beta;

    Norm() = default;
    explicit Norm(std::size_t width)
        : gamma(Tensor(Shape{1, width}, std::vector<double>(width, 1.0), true)), beta(Tensor::zeros({1, width}, true)) {}

    Tensor operator()(const Tensor& x) const { return add(mul(layer_norm(x), gamma), beta); }

    void collect(const std::string& prefix, NamedParameters& out) const {
        out.emplace_back(prefix + ".gamma", gamma);
        out.emplace_back(prefix + ".beta", beta);
    }
};

} // namespace clickseg

#endif // CLICKSEG_NN_HPP
