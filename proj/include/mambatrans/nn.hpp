#pragma once

#include <string>
#include <utility>
#include <vector>

#include "mambatrans/ops.hpp"

// Small parameter bundles shared by the model modules. Initialization is
// fan-in-scaled uniform noise for weights and zeros for biases, all drawn
// from the caller's Rng so checkpoints are seed-reproducible.

namespace mambatrans {

template <typename T>
using ParamList = std::vector<std::pair<std::string, Tensor<T>>>;

template <typename T>
void fill_uniform(Tensor<T>& t, Rng& rng, double lo, double hi) {
    for (auto& v : t.data()) v = static_cast<T>(rng.uniform(lo, hi));
}

template <typename T>
void fill_fan_in(Tensor<T>& t, Rng& rng, int fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in > 0 ? fan_in : 1));
    fill_uniform(t, rng, -bound, bound);
}

template <typename T>
struct Linear {
    Tensor<T> weight;  // [in x out]
    Tensor<T> bias;    // [out]

    static Linear make(int in, int out, Rng& rng, bool requires_grad = true) {
        Linear l;
        l.weight = Tensor<T>::zeros({in, out}, requires_grad);
        l.bias = Tensor<T>::zeros({out}, requires_grad);
        fill_fan_in(l.weight, rng, in);
        return l;
    }

    Tensor<T> apply(const Tensor<T>& x) const { return add_bias(matmul(x, weight), bias); }

    void collect(const std::string& prefix, ParamList<T>& out) const {
        out.emplace_back(prefix + ".weight", weight);
        out.emplace_back(prefix + ".bias", bias);
    }
};

template <typename T>
struct Conv2dLayer {
    Tensor<T> kernel;  // [k x k x Cin x Cout]
    Tensor<T> bias;    // [Cout]
    int stride = 1;
    int padding = 0;

    static Conv2dLayer make(int k, int cin, int cout, int stride, int padding, Rng& rng,
                            bool requires_grad = true) {
        Conv2dLayer c;
        c.kernel = Tensor<T>::zeros({k, k, cin, cout}, requires_grad);
        c.bias = Tensor<T>::zeros({cout}, requires_grad);
        c.stride = stride;
        c.padding = padding;
        fill_fan_in(c.kernel, rng, k * k * cin);
        return c;
    }

    Tensor<T> apply(const Tensor<T>& x) const { return conv2d(x, kernel, bias, stride, padding); }

    void collect(const std::string& prefix, ParamList<T>& out) const {
        out.emplace_back(prefix + ".kernel", kernel);
        out.emplace_back(prefix + ".bias", bias);
    }
};

template <typename T>
struct DepthwiseConvLayer {
    Tensor<T> kernel;  // [k x k x C]
    Tensor<T> bias;    // [C]
    int padding = 0;

    static DepthwiseConvLayer make(int k, int channels, int padding, Rng& rng, bool requires_grad = true) {
        DepthwiseConvLayer c;
        c.kernel = Tensor<T>::zeros({k, k, channels}, requires_grad);
        c.bias = Tensor<T>::zeros({channels}, requires_grad);
        c.padding = padding;
        fill_fan_in(c.kernel, rng, k * k);
        return c;
    }

    Tensor<T> apply(const Tensor<T>& x) const { return depthwise_conv2d(x, kernel, bias, padding); }

    void collect(const std::string& prefix, ParamList<T>& out) const {
        out.emplace_back(prefix + ".kernel", kernel);
        out.emplace_back(prefix + ".bias", bias);
    }
};

template <typename T>
struct LayerNormLayer {
    Tensor<T> gamma;
    Tensor<T> beta;
    T eps = T(1e-5);

    static LayerNormLayer make(int channels, bool requires_grad = true) {
        LayerNormLayer n;
        n.gamma = Tensor<T>::full({channels}, T(1), requires_grad);
        n.beta = Tensor<T>::zeros({channels}, requires_grad);
        return n;
    }

    Tensor<T> apply(const Tensor<T>& x) const { return layer_norm(x, gamma, beta, eps); }

    void collect(const std::string& prefix, ParamList<T>& out) const {
        out.emplace_back(prefix + ".gamma", gamma);
        out.emplace_back(prefix + ".beta", beta);
    }
};

template <typename T>
void set_requires_grad(ParamList<T>& params, bool rg) {
    for (auto& [name, t] : params) t.set_requires_grad(rg);
}

template <typename T>
int64_t param_count(const ParamList<T>& params) {
    int64_t n = 0;
    for (const auto& [name, t] : params) n += t.numel();
    return n;
}

}  // namespace mambatrans
