#pragma once

#include <string>

#include "adapterlab/tape.hpp"

namespace adapterlab {

enum class Activation { relu, gelu };

// Bottleneck geometry. d_o is the model width the adapter plugs into, d_a the
// bottleneck, d_ts the task-specific sub-adapter bottleneck (hierarchical
// configs only).
struct AdapterConfig {
    size_t d_o = 64;
    size_t d_a = 16;
    size_t d_ts = 8;
    Activation activation = Activation::relu;
    bool use_bias = true;
    double init_std = 0.01;

    void validate(bool hierarchical = false) const {
        if (d_a == 0 || d_a >= d_o)
            throw ConfigError("adapter bottleneck d_a=" + std::to_string(d_a) + " must satisfy 0 < d_a < d_o=" + std::to_string(d_o));
        if (hierarchical && (d_ts == 0 || d_ts > d_a))
            throw ConfigError("sub-adapter bottleneck d_ts=" + std::to_string(d_ts) + " must satisfy 0 < d_ts <= d_a=" + std::to_string(d_a));
    }

    // ts_mid sits inside the bottleneck, so its own bottleneck must fit.
    size_t d_ts_mid() const { return d_ts <= d_a - 1 ? d_ts : d_a / 2; }
};

// Bottleneck module with a skip-connection:
//   out = o + W_up * act(W_down * o + b_down) + b_up
// Freshly initialized adapters are exact identity maps (W_up = 0), so
// inserting them never perturbs the host model.
template <typename Real>
struct VanillaAdapterT {
    ParameterT<Real> W_down, W_up, b_down, b_up;
    size_t d_outer = 0, d_bottleneck = 0;
    Activation activation = Activation::relu;
    bool use_bias = true;

    template <typename Fn>
    void for_each_parameter(Fn&& fn) {
        fn(W_down);
        fn(W_up);
        if (use_bias) {
            fn(b_down);
            fn(b_up);
        }
    }
};

// Eq.-3 hierarchy: the base bottleneck with task-specific sub-adapters
// inserted before its down- and up-projections. ts_pre runs at the outer
// width, ts_mid inside the bottleneck.
template <typename Real>
struct HierAdapterT {
    VanillaAdapterT<Real> base;
    VanillaAdapterT<Real> ts_pre;
    VanillaAdapterT<Real> ts_mid;
    std::string task_id;

    template <typename Fn>
    void for_each_parameter(Fn&& fn) {
        base.for_each_parameter(fn);
        ts_pre.for_each_parameter(fn);
        ts_mid.for_each_parameter(fn);
    }
};

using VanillaAdapter = VanillaAdapterT<float>;
using HierAdapter = HierAdapterT<float>;

template <typename Real>
VanillaAdapterT<Real> init_adapter_t(size_t d_outer, size_t d_bottleneck, const AdapterConfig& cfg, Rng& rng,
                                     const std::string& name_prefix) {
    VanillaAdapterT<Real> a;
    a.d_outer = d_outer;
    a.d_bottleneck = d_bottleneck;
    a.activation = cfg.activation;
    a.use_bias = cfg.use_bias;
    a.W_down = ParameterT<Real>(TensorT<Real>::randn({d_outer, d_bottleneck}, rng, static_cast<Real>(cfg.init_std)),
                                name_prefix + ".W_down");
    a.W_up = ParameterT<Real>(TensorT<Real>::zeros({d_bottleneck, d_outer}), name_prefix + ".W_up");
    a.b_down = ParameterT<Real>(TensorT<Real>::zeros({size_t(1), d_bottleneck}), name_prefix + ".b_down");
    a.b_up = ParameterT<Real>(TensorT<Real>::zeros({size_t(1), d_outer}), name_prefix + ".b_up");
    return a;
}

template <typename Real>
VanillaAdapterT<Real> init_adapter_t(const AdapterConfig& cfg, Rng& rng, const std::string& name_prefix = "adapter") {
    cfg.validate();
    return init_adapter_t<Real>(cfg.d_o, cfg.d_a, cfg, rng, name_prefix);
}

inline VanillaAdapter init_adapter(const AdapterConfig& cfg, Rng& rng, const std::string& name_prefix = "adapter") {
    return init_adapter_t<float>(cfg, rng, name_prefix);
}

template <typename Real>
HierAdapterT<Real> init_hier_adapter_t(const AdapterConfig& cfg, Rng& rng, const std::string& name_prefix,
                                       const std::string& task_id) {
    cfg.validate(/*hierarchical=*/true);
    HierAdapterT<Real> h;
    h.base = init_adapter_t<Real>(cfg.d_o, cfg.d_a, cfg, rng, name_prefix + ".base");
    h.ts_pre = init_adapter_t<Real>(cfg.d_o, cfg.d_ts, cfg, rng, name_prefix + ".ts_pre");
    h.ts_mid = init_adapter_t<Real>(cfg.d_a, cfg.d_ts_mid(), cfg, rng, name_prefix + ".ts_mid");
    h.task_id = task_id;
    return h;
}

inline HierAdapter init_hier_adapter(const AdapterConfig& cfg, Rng& rng, const std::string& name_prefix,
                                     const std::string& task_id) {
    return init_hier_adapter_t<float>(cfg, rng, name_prefix, task_id);
}

// Promote a trained vanilla adapter to the base of a hierarchical one,
// attaching freshly initialized (identity) sub-adapters. The hierarchical
// forward collapses to the base forward until the sub-adapters train.
template <typename Real>
HierAdapterT<Real> promote_to_hier(VanillaAdapterT<Real> base, const AdapterConfig& cfg, Rng& rng,
                                   const std::string& name_prefix, const std::string& task_id) {
    cfg.validate(/*hierarchical=*/true);
    HierAdapterT<Real> h;
    h.base = std::move(base);
    h.ts_pre = init_adapter_t<Real>(h.base.d_outer, cfg.d_ts, cfg, rng, name_prefix + ".ts_pre");
    h.ts_mid = init_adapter_t<Real>(h.base.d_bottleneck, cfg.d_ts_mid(), cfg, rng, name_prefix + ".ts_mid");
    h.task_id = task_id;
    return h;
}

template <typename Real>
int tape_activation(TapeT<Real>& tape, int x, Activation act) {
    return act == Activation::relu ? tape.relu(x) : tape.gelu(x);
}

// Eq. 2 on the tape: o + W_up * act(W_down * o + b_down) + b_up.
template <typename Real>
int adapter_forward(TapeT<Real>& tape, VanillaAdapterT<Real>& a, int o) {
    const auto& to = tape.value(o);
    if (to.cols() != a.d_outer)
        throw DimensionError("adapter width " + std::to_string(a.d_outer) + " vs input " + to.shape_str());
    int h = tape.matmul(o, tape.param(a.W_down));
    if (a.use_bias) h = tape.add_row(h, tape.param(a.b_down));
    h = tape_activation(tape, h, a.activation);
    h = tape.matmul(h, tape.param(a.W_up));
    if (a.use_bias) h = tape.add_row(h, tape.param(a.b_up));
    return tape.add(o, h);
}

// Eq. 3 on the tape: o + W_up * Ada_ts(act(W_down * Ada_ts(o))), each Ada_ts
// itself a bottleneck-with-skip.
template <typename Real>
int hier_forward(TapeT<Real>& tape, HierAdapterT<Real>& h, int o) {
    const auto& to = tape.value(o);
    if (to.cols() != h.base.d_outer)
        throw DimensionError("hier adapter width " + std::to_string(h.base.d_outer) + " vs input " + to.shape_str());
    int x = adapter_forward(tape, h.ts_pre, o);
    x = tape.matmul(x, tape.param(h.base.W_down));
    if (h.base.use_bias) x = tape.add_row(x, tape.param(h.base.b_down));
    x = tape_activation(tape, x, h.base.activation);
    x = adapter_forward(tape, h.ts_mid, x);
    x = tape.matmul(x, tape.param(h.base.W_up));
    if (h.base.use_bias) x = tape.add_row(x, tape.param(h.base.b_up));
    return tape.add(o, x);
}

// Exact trainable-parameter count for one adapter stack.
inline size_t adapter_param_count(size_t d_outer, size_t d_bottleneck, bool use_bias) {
    return 2 * d_outer * d_bottleneck + (use_bias ? d_outer + d_bottleneck : 0);
}

inline size_t count_adapter_params(const AdapterConfig& cfg, size_t n_insertion_points, bool hierarchical) {
    size_t per_point = adapter_param_count(cfg.d_o, cfg.d_a, cfg.use_bias);
    if (hierarchical)
        per_point += adapter_param_count(cfg.d_o, cfg.d_ts, cfg.use_bias) +
                     adapter_param_count(cfg.d_a, cfg.d_ts_mid(), cfg.use_bias);
    return per_point * n_insertion_points;
}

// Sub-adapter (task-specific) parameters per insertion point.
inline size_t count_sub_adapter_params(const AdapterConfig& cfg, size_t n_insertion_points) {
    return n_insertion_points * (adapter_param_count(cfg.d_o, cfg.d_ts, cfg.use_bias) +
                                 adapter_param_count(cfg.d_a, cfg.d_ts_mid(), cfg.use_bias));
}

}  // namespace adapterlab
