#pragma once

// Trainable modules on top of the autograd ops, plus the Adam optimizer.
// Modules register named parameters and buffers so checkpoints, parameter
// audits and the optimizer all see one stable, ordered view.

#include <string>
#include <utility>
#include <vector>

#include "neuropapyri/autograd.hpp"
#include "neuropapyri/common.hpp"

namespace npap::nn {

using ag::Var;

template <class T>
struct ParamMap {
    std::vector<std::pair<std::string, Var<T>*>> params;
    std::vector<std::pair<std::string, Tensor<T>*>> buffers;

    void add_param(std::string name, Var<T>* v) { params.emplace_back(std::move(name), v); }
    void add_buffer(std::string name, Tensor<T>* t) { buffers.emplace_back(std::move(name), t); }
};

template <class T>
Var<T> he_init(Shape shape, int64_t fan_in, Rng& rng) {
    const T stddev = static_cast<T>(std::sqrt(2.0 / static_cast<double>(fan_in)));
    return Var<T>::leaf(Tensor<T>::randn(std::move(shape), rng, stddev), true);
}

template <class T>
struct Conv2d {
    int64_t in_c = 0, out_c = 0, k = 1, stride = 1, pad = 0;
    bool has_bias = true;
    Var<T> w, b;

    Conv2d() = default;
    Conv2d(int64_t in, int64_t out, int64_t kernel, int64_t s, int64_t p, bool bias, Rng& rng)
        : in_c(in), out_c(out), k(kernel), stride(s), pad(p), has_bias(bias) {
        w = he_init<T>({out, in, kernel, kernel}, in * kernel * kernel, rng);
        if (bias) b = Var<T>::leaf(Tensor<T>::zeros({out}), true);
    }

    Var<T> forward(const Var<T>& x) const { return ag::conv2d(x, w, has_bias ? b : Var<T>(), stride, pad); }

    void collect(const std::string& prefix, ParamMap<T>& pm) {
        pm.add_param(prefix + ".weight", &w);
        if (has_bias) pm.add_param(prefix + ".bias", &b);
    }
};

template <class T>
struct BatchNorm2d {
    int64_t channels = 0;
    Var<T> gamma, beta;
    Tensor<T> running_mean, running_var;
    T momentum = T(0.1);
    T eps = T(1e-5);

    BatchNorm2d() = default;
    explicit BatchNorm2d(int64_t c) : channels(c) {
        gamma = Var<T>::leaf(Tensor<T>::full({c}, T(1)), true);
        beta = Var<T>::leaf(Tensor<T>::zeros({c}), true);
        running_mean = Tensor<T>::zeros({c});
        running_var = Tensor<T>::full({c}, T(1));
    }

    Var<T> forward(const Var<T>& x, bool training) {
        return ag::batchnorm2d(x, gamma, beta, running_mean, running_var, training, momentum, eps);
    }

    void collect(const std::string& prefix, ParamMap<T>& pm) {
        pm.add_param(prefix + ".weight", &gamma);
        pm.add_param(prefix + ".bias", &beta);
        pm.add_buffer(prefix + ".running_mean", &running_mean);
        pm.add_buffer(prefix + ".running_var", &running_var);
    }
};

template <class T>
struct Linear {
    int64_t in_f = 0, out_f = 0;
    Var<T> w, b;

    Linear() = default;
    Linear(int64_t in, int64_t out, Rng& rng) : in_f(in), out_f(out) {
        w = he_init<T>({out, in}, in, rng);
        b = Var<T>::leaf(Tensor<T>::zeros({out}), true);
    }

    Var<T> forward(const Var<T>& x) const { return ag::linear(x, w, b); }

    void collect(const std::string& prefix, ParamMap<T>& pm) {
        pm.add_param(prefix + ".weight", &w);
        pm.add_param(prefix + ".bias", &b);
    }
};

// ---------------------------------------------------------------------------
// Adam (bias-corrected first/second moments).
// ---------------------------------------------------------------------------

template <class T>
class Adam {
public:
    Adam(std::vector<Var<T>*> params, double lr, double beta1 = 0.9, double beta2 = 0.999,
         double eps = 1e-8)
        : params_(std::move(params)), lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {
        slots_.resize(params_.size());
        for (size_t i = 0; i < params_.size(); ++i) {
            slots_[i].m = Tensor<T>::zeros(params_[i]->value().shape);
            slots_[i].v = Tensor<T>::zeros(params_[i]->value().shape);
        }
    }

    void zero_grad() {
        for (auto* p : params_) p->zero_grad();
    }

    void step() {
        ++t_;
        const double bc1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
        for (size_t i = 0; i < params_.size(); ++i) {
            Var<T>& p = *params_[i];
            Tensor<T>& g = p.grad();
            Tensor<T>& m = slots_[i].m;
            Tensor<T>& v = slots_[i].v;
            T* pv = p.value().ptr();
            for (int64_t j = 0; j < p.value().numel(); ++j) {
                const double gj = g[j];
                const double mj = b1_ * m[j] + (1.0 - b1_) * gj;
                const double vj = b2_ * v[j] + (1.0 - b2_) * gj * gj;
                m[j] = static_cast<T>(mj);
                v[j] = static_cast<T>(vj);
                pv[j] -= static_cast<T>(lr_ * (mj / bc1) / (std::sqrt(vj / bc2) + eps_));
            }
        }
    }

    int64_t steps() const { return t_; }

private:
    struct Slot {
        Tensor<T> m, v;
    };
    std::vector<Var<T>*> params_;
    std::vector<Slot> slots_;
    double lr_, b1_, b2_, eps_;
    int64_t t_ = 0;
};

}  // namespace npap::nn
