#pragma once

#include <map>
#include <string>

#include "sgdiff/conv.hpp"
#include "sgdiff/ops.hpp"
#include "sgdiff/rng.hpp"

// Named parameter registry, layer building blocks, and Adam. Layers are plain
// structs: construction registers parameters under hierarchical dotted names,
// operator() runs the forward.

namespace sgdiff {

template <typename T>
class ParamStoreT {
public:
    VarT<T> add(const std::string& name, TensorT<T> init, bool requires_grad = true) {
        SGDIFF_CHECK(!params_.count(name), "duplicate parameter name '", name, "'");
        VarT<T> v = VarT<T>::leaf(std::move(init), requires_grad);
        params_.emplace(name, v);
        return v;
    }

    VarT<T>& get(const std::string& name) {
        auto it = params_.find(name);
        if (it == params_.end()) throw LookupError("no parameter named '" + name + "'");
        return it->second;
    }

    const VarT<T>& get(const std::string& name) const {
        auto it = params_.find(name);
        if (it == params_.end()) throw LookupError("no parameter named '" + name + "'");
        return it->second;
    }

    bool has(const std::string& name) const { return params_.count(name) != 0; }

    // Sorted by name (std::map order) — iteration order is part of the
    // determinism contract for the optimizer and checkpoints.
    const std::map<std::string, VarT<T>>& items() const { return params_; }
    std::map<std::string, VarT<T>>& items() { return params_; }

    size_t size() const { return params_.size(); }

    int64_t total_elements() const {
        int64_t n = 0;
        for (const auto& [k, v] : params_) n += v.numel();
        return n;
    }

    void zero_grads() {
        for (auto& [k, v] : params_) v.zero_grad();
    }

    // Set requires_grad on every parameter whose name starts with `prefix`.
    // Returns how many parameters matched.
    int set_trainable_by_prefix(const std::string& prefix, bool trainable) {
        int hits = 0;
        for (auto& [k, v] : params_) {
            if (k.rfind(prefix, 0) == 0) {
                v.set_requires_grad(trainable);
                hits++;
            }
        }
        return hits;
    }

private:
    std::map<std::string, VarT<T>> params_;
};

using ParamStore = ParamStoreT<float>;

// ---------------------------------------------------------------------------
// Initializers
// ---------------------------------------------------------------------------

// Gaussian fan-in scaling; the default for every weight matrix here.
template <typename T>
TensorT<T> init_fan_in(Rng& rng, const Shape& shape, int64_t fan_in) {
    SGDIFF_CHECK(fan_in > 0, "fan_in must be positive");
    return rng.template gauss_scaled<T>(shape, 1.0 / std::sqrt(double(fan_in)));
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

template <typename T>
struct LinearT {
    VarT<T> w, b;

    LinearT() = default;
    LinearT(ParamStoreT<T>& ps, const std::string& name, Rng& rng, int64_t in, int64_t out,
            bool zero_init = false) {
        TensorT<T> wi = zero_init ? TensorT<T>::zeros({in, out})
                                  : init_fan_in<T>(rng, {in, out}, in);
        w = ps.add(name + ".weight", wi);
        b = ps.add(name + ".bias", TensorT<T>::zeros({out}));
    }

    VarT<T> operator()(const VarT<T>& x) const { return linear(x, w, b); }
};

template <typename T>
struct Conv2dT {
    VarT<T> w, b;
    int64_t stride = 1, pad = 0;

    Conv2dT() = default;
    Conv2dT(ParamStoreT<T>& ps, const std::string& name, Rng& rng, int64_t cin, int64_t cout,
            int64_t k, int64_t stride_, int64_t pad_, bool zero_init = false)
        : stride(stride_), pad(pad_) {
        TensorT<T> wi = zero_init ? TensorT<T>::zeros({cout, cin, k, k})
                                  : init_fan_in<T>(rng, {cout, cin, k, k}, cin * k * k);
        w = ps.add(name + ".weight", wi);
        b = ps.add(name + ".bias", TensorT<T>::zeros({cout}));
    }

    VarT<T> operator()(const VarT<T>& x) const { return conv2d(x, w, b, stride, pad); }
};

template <typename T>
struct ConvTranspose2dT {
    VarT<T> w, b;
    int64_t stride = 1, pad = 0;

    ConvTranspose2dT() = default;
    ConvTranspose2dT(ParamStoreT<T>& ps, const std::string& name, Rng& rng, int64_t cin,
                     int64_t cout, int64_t k, int64_t stride_, int64_t pad_)
        : stride(stride_), pad(pad_) {
        w = ps.add(name + ".weight", init_fan_in<T>(rng, {cin, cout, k, k}, cin * k * k));
        b = ps.add(name + ".bias", TensorT<T>::zeros({cout}));
    }

    VarT<T> operator()(const VarT<T>& x) const {
        return conv_transpose2d(x, w, b, stride, pad);
    }
};

template <typename T>
struct GroupNormT {
    VarT<T> gamma, beta;
    int groups = 1;

    GroupNormT() = default;
    GroupNormT(ParamStoreT<T>& ps, const std::string& name, int64_t chans, int groups_)
        : groups(groups_) {
        gamma = ps.add(name + ".gamma", TensorT<T>::ones({chans}));
        beta = ps.add(name + ".beta", TensorT<T>::zeros({chans}));
    }

    VarT<T> operator()(const VarT<T>& x) const { return group_norm(x, groups, gamma, beta); }
};

template <typename T>
struct LayerNormT {
    VarT<T> gamma, beta;

    LayerNormT() = default;
    LayerNormT(ParamStoreT<T>& ps, const std::string& name, int64_t dim) {
        gamma = ps.add(name + ".gamma", TensorT<T>::ones({dim}));
        beta = ps.add(name + ".beta", TensorT<T>::zeros({dim}));
    }

    VarT<T> operator()(const VarT<T>& x) const { return layer_norm(x, gamma, beta); }
};

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

template <typename T>
struct AdamConfigT {
    T lr = T(2e-4);
    T beta1 = T(0.9);
    T beta2 = T(0.999);
    T eps = T(1e-8);
};

// Moments keyed by parameter name; parameters with requires_grad off are
// skipped but keep their moment buffers (unfreezing resumes cleanly).
template <typename T>
class AdamT {
public:
    explicit AdamT(AdamConfigT<T> cfg = {}) : cfg_(cfg) {}

    void step(ParamStoreT<T>& ps) {
        t_++;
        T bc1 = T(1) - std::pow(cfg_.beta1, T(t_));
        T bc2 = T(1) - std::pow(cfg_.beta2, T(t_));
        for (auto& [name, p] : ps.items()) {
            if (!p.requires_grad() || !p.grad().defined()) continue;
            auto& slot = moments_[name];
            if (!slot.m.defined()) {
                slot.m = TensorT<T>::zeros(p.shape());
                slot.v = TensorT<T>::zeros(p.shape());
            }
            TensorT<T> next = p.value().clone();
            T* w = next.ptr();
            T* m = slot.m.ptr();
            T* v = slot.v.ptr();
            const T* g = p.grad().ptr();
            for (int64_t i = 0; i < next.numel(); i++) {
                m[i] = cfg_.beta1 * m[i] + (T(1) - cfg_.beta1) * g[i];
                v[i] = cfg_.beta2 * v[i] + (T(1) - cfg_.beta2) * g[i] * g[i];
                T mh = m[i] / bc1;
                T vh = v[i] / bc2;
                w[i] -= cfg_.lr * mh / (std::sqrt(vh) + cfg_.eps);
            }
            p.assign_value(next);
        }
    }

    void set_lr(T lr) { cfg_.lr = lr; }
    T lr() const { return cfg_.lr; }
    int64_t steps_taken() const { return t_; }

    struct Slot {
        TensorT<T> m, v;
    };
    std::map<std::string, Slot>& moments() { return moments_; }
    const std::map<std::string, Slot>& moments() const { return moments_; }
    void set_steps_taken(int64_t t) { t_ = t; }

private:
    AdamConfigT<T> cfg_;
    std::map<std::string, Slot> moments_;
    int64_t t_ = 0;
};

using Adam = AdamT<float>;

}  // namespace sgdiff
