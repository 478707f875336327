#pragma once

// Patch-based optimization: soft Dice loss, Adam with decoupled weight decay and a single
// step decay of the learning rate.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "projnet/error.hpp"
#include "projnet/netbuild.hpp"
#include "projnet/rng.hpp"
#include "projnet/shapes.hpp"
#include "projnet/synthdata.hpp"
#include "projnet/tensor.hpp"

namespace projnet {

struct TrainConfig {
    std::size_t iterations = 30000;
    std::size_t batch_size = 8;
    Extent patch{64, 256, 64};
    double lr = 1e-3;
    double weight_decay = 1e-5;
    std::size_t decay_iteration = 20000;
    double decay_factor = 10.0;
    std::uint64_t seed = 0;
    std::size_t checkpoint_every = 0; // 0 = final checkpoint only

    /// Geographic-atrophy schedule.
    static TrainConfig ga() { return {}; }

    /// Vessel schedule.
    static TrainConfig vessels() {
        TrainConfig c;
        c.iterations = 10000;
        c.decay_iteration = 6000;
        return c;
    }

    void validate() const {
        if (batch_size < 1) throw ConfigError("TrainConfig: batch_size must be >= 1");
        if (!(decay_factor > 1.0)) throw ConfigError("TrainConfig: decay_factor must be > 1");
        if (iterations > 0 && decay_iteration >= iterations)
            throw ConfigError("TrainConfig: decay_iteration must be < iterations");
        if (!(lr > 0.0)) throw ConfigError("TrainConfig: lr must be > 0");
        if (!(weight_decay >= 0.0)) throw ConfigError("TrainConfig: weight_decay must be >= 0");
        if (patch.empty()) throw ConfigError("TrainConfig: patch must be set");
    }
};

inline double lr_at(std::size_t iter, const TrainConfig& config) {
    return iter < config.decay_iteration ? config.lr : config.lr / config.decay_factor;
}

namespace detail {

template <class T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": extent mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
}

} // namespace detail

/// 1 - (2 sum(p t) + eps) / (sum p + sum t + eps) over the whole tensor.
template <class T>
Tensor<T> dice_loss(const Tensor<T>& pred, const Tensor<T>& target, double eps = 1.0) {
    detail::check_same_shape(pred, target, "dice_loss");
    const auto p = pred.data(), t = target.data();
    double sp = 0, st = 0, spt = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        sp += p[i];
        st += t[i];
        spt += static_cast<double>(p[i]) * t[i];
    }
    const double num = 2 * spt + eps, den = sp + st + eps;
    auto tgt = target.node();
    return make_result<T>(
        {}, {static_cast<T>(1.0 - num / den)}, {&pred},
        [tgt, num, den](detail::Node<T>& self) {
            auto g = parent_grad(self, 0);
            const double up = self.grad[0];
            for (std::size_t i = 0; i < g.size(); ++i)
                g[i] += static_cast<T>(up * -(2.0 * tgt->data[i] * den - num) / (den * den));
        },
        "dice_loss");
}

/// Mean over the leading (batch) axis of the per-sample Dice loss.
template <class T>
Tensor<T> batch_dice_loss(const Tensor<T>& pred, const Tensor<T>& target, double eps = 1.0) {
    detail::check_same_shape(pred, target, "batch_dice_loss");
    if (pred.rank() == 0 || pred.dim(0) == 0) throw ShapeError("batch_dice_loss: empty batch");
    const std::size_t batch = pred.dim(0), per = pred.size() / batch;
    std::vector<double> num(batch), den(batch);
    double loss = 0;
    for (std::size_t b = 0; b < batch; ++b) {
        double sp = 0, st = 0, spt = 0;
        for (std::size_t i = b * per; i < (b + 1) * per; ++i) {
            sp += pred[i];
            st += target[i];
            spt += static_cast<double>(pred[i]) * target[i];
        }
        num[b] = 2 * spt + eps;
        den[b] = sp + st + eps;
        loss += 1.0 - num[b] / den[b];
    }
    auto tgt = target.node();
    return make_result<T>(
        {}, {static_cast<T>(loss / static_cast<double>(batch))}, {&pred},
        [tgt, num, den, batch, per](detail::Node<T>& self) {
            auto g = parent_grad(self, 0);
            const double up = self.grad[0] / static_cast<double>(batch);
            for (std::size_t b = 0; b < batch; ++b) {
                const double n = num[b], d2 = den[b] * den[b];
                for (std::size_t i = b * per; i < (b + 1) * per; ++i)
                    g[i] += static_cast<T>(up * -(2.0 * tgt->data[i] * den[b] - n) / d2);
            }
        },
        "batch_dice_loss");
}

struct OptimState {
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    std::uint64_t step = 0;
    std::vector<std::vector<double>> m, v;
};

/// One Adam step over `params` using their accumulated gradients (missing gradient = 0).
/// The decay term lr * wd * theta is added to the update, not to the gradient.
template <class T>
void adam_step(std::span<Tensor<T>> params, OptimState& state, double lr, double weight_decay) {
    if (state.m.empty()) {
        for (const auto& p : params) {
            state.m.emplace_back(p.size(), 0.0);
            state.v.emplace_back(p.size(), 0.0);
        }
    }
    if (state.m.size() != params.size()) throw ShapeError("adam_step: parameter count changed");
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double c1 = 1.0 - std::pow(state.beta1, t), c2 = 1.0 - std::pow(state.beta2, t);
    for (std::size_t k = 0; k < params.size(); ++k) {
        auto theta = params[k].mutable_data();
        auto& m = state.m[k];
        auto& v = state.v[k];
        if (m.size() != theta.size()) throw ShapeError("adam_step: moment shape mismatch");
        const auto g = params[k].grad();
        const bool has = g.size() == theta.size();
        for (std::size_t i = 0; i < theta.size(); ++i) {
            const double gi = has ? static_cast<double>(g[i]) : 0.0;
            m[i] = state.beta1 * m[i] + (1 - state.beta1) * gi;
            v[i] = state.beta2 * v[i] + (1 - state.beta2) * gi * gi;
            const double mh = m[i] / c1, vh = v[i] / c2;
            const double th = theta[i];
            theta[i] = static_cast<T>(th - lr * (mh / (std::sqrt(vh) + state.eps) + weight_decay * th));
        }
    }
}

/// Shallow handles to every trainable tensor of a graph, in parameter order.
template <class T>
std::vector<Tensor<T>> parameters(const NetGraph<T>& graph) {
    std::vector<Tensor<T>> out;
    for (const auto& p : graph.params) out.push_back(p.value);
    return out;
}

struct LossRecord {
    std::size_t iter = 0;
    double loss = 0;
    double lr = 0;
};

inline void write_loss_csv(std::ostream& os, const std::vector<LossRecord>& curve) {
    os << "iter,loss,lr\n";
    char line[96];
    for (const auto& r : curve) {
        std::snprintf(line, sizeof line, "%zu,%.9g,%.9g\n", r.iter, r.loss, r.lr);
        os << line;
    }
}

template <class T>
struct TrainHooks {
    /// Called after `iters_done` iterations whenever it is a multiple of checkpoint_every.
    std::function<void(std::size_t iters_done, const NetGraph<T>&)> on_checkpoint;
    std::function<void(const LossRecord&)> on_step;
};

/// Batch of random patches: x [B, 1, patch...], masks [B, p_1, p_2].
template <class T>
std::pair<Tensor<T>, Tensor<T>> sample_batch(const std::vector<SegSample>& dataset, const Extent& patch,
                                              std::size_t batch, SplitMix64& rng) {
    const std::size_t nv = numel(patch), nm = patch[0] * patch[1];
    std::vector<T> x(batch * nv), y(batch * nm);
    for (std::size_t b = 0; b < batch; ++b) {
        const auto& s = dataset[rng.uniform_int(dataset.size())];
        const SegSample p = crop_patch(s, patch, rng);
        std::copy(p.volume.data().begin(), p.volume.data().end(), x.begin() + static_cast<std::ptrdiff_t>(b * nv));
        std::copy(p.mask.data().begin(), p.mask.data().end(), y.begin() + static_cast<std::ptrdiff_t>(b * nm));
    }
    Shape xs{batch, 1};
    xs.insert(xs.end(), patch.begin(), patch.end());
    return {Tensor<T>(xs, std::move(x)), Tensor<T>({batch, patch[0], patch[1]}, std::move(y))};
}

namespace detail {

inline const std::string kAllFinite = "none (non-finite activations)";

template <class T>
std::string first_nonfinite_param(const NetGraph<T>& graph) {
    for (const auto& p : graph.params)
        for (T v : p.value.data())
            if (!std::isfinite(v)) return p.name;
    for (const auto& p : graph.params)
        if (p.value.has_grad())
            for (T v : p.value.grad())
                if (!std::isfinite(v)) return p.name + " (gradient)";
    return kAllFinite;
}

} // namespace detail

/// Runs the optimization loop in place on `graph`. The dataset is consumed as given
/// (apply preprocess() beforehand). Returns the loss curve.
template <class T>
std::vector<LossRecord> train(NetGraph<T>& graph, const std::vector<SegSample>& dataset, const TrainConfig& config,
                              const TrainHooks<T>& hooks = {}) {
    config.validate();
    if (dataset.empty()) throw ConfigError("train: dataset is empty");
    if (graph.config.n_dims != 3 || graph.config.target_dims != 2)
        throw ConfigError("train: sample pipeline expects N=3, M=2 volumes");
    if (config.patch != graph.input_extent)
        throw ConfigError("train: patch " + format_extent(config.patch, "x") + " differs from graph input " +
                          format_extent(graph.input_extent, "x"));
    require_valid(graph.config, config.patch);

    SplitMix64 rng(config.seed);
    auto params = parameters(graph);
    OptimState state;
    std::vector<LossRecord> curve;
    curve.reserve(config.iterations);

    const auto fail = [&](std::size_t it, const std::string& what) {
        throw NumericError("training diverged at iteration " + std::to_string(it) + ": " + what +
                           "; offending parameter: " + detail::first_nonfinite_param(graph));
    };

    for (std::size_t it = 0; it < config.iterations; ++it) {
        const double lr = lr_at(it, config);
        auto [x, y] = sample_batch<T>(dataset, config.patch, config.batch_size, rng);
        Tensor<T> loss;
        try {
            loss = batch_dice_loss(forward(graph, x), y);
        } catch (const NumericError& e) {
            fail(it, e.what());
        }
        if (!std::isfinite(loss.item())) fail(it, "loss is NaN");
        for (auto& p : params) p.zero_grad();
        loss.backward();
        // relu maps NaN to 0, so a corrupted parameter can hide behind a finite loss.
        if (detail::first_nonfinite_param(graph) != detail::kAllFinite) fail(it, "non-finite parameter or gradient");
        adam_step<T>(params, state, lr, config.weight_decay);
        for (const auto& p : params)
            for (T v : p.data())
                if (!std::isfinite(v)) fail(it, "parameter update produced a non-finite value");

        curve.push_back({it, static_cast<double>(loss.item()), lr});
        if (hooks.on_step) hooks.on_step(curve.back());
        if (hooks.on_checkpoint && config.checkpoint_every > 0 && (it + 1) % config.checkpoint_every == 0)
            hooks.on_checkpoint(it + 1, graph);
    }
    return curve;
}

} // namespace projnet
