#pragma once

// Shared generators and brute-force oracles for the test suites and the acceptance runner.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include "projnet/projnet.hpp"

namespace support {

using namespace projnet;

template <class T>
Tensor<T> random_tensor(Shape shape, SplitMix64& rng, double lo = -1.0, double hi = 1.0, bool requires_grad = false) {
    std::vector<T> data(numel(shape));
    for (auto& v : data) v = static_cast<T>(rng.uniform(lo, hi));
    return Tensor<T>(std::move(shape), std::move(data), requires_grad);
}

/// Random valid (config, extent): N <= max_n, M <= N, l <= max_l, extents 2^(l-1) * {1..max_mult}.
inline std::pair<ArchConfig, Extent> random_config(SplitMix64& rng, std::size_t max_n = 4, std::size_t max_l = 4,
                                                   std::size_t max_mult = 3, std::size_t max_c0 = 3) {
    const std::size_t n = 1 + rng.uniform_int(max_n);
    const std::size_t m = rng.uniform_int(n + 1);
    const std::size_t l = 1 + rng.uniform_int(max_l);
    const std::size_t c0 = 1 + rng.uniform_int(max_c0);
    std::vector<std::size_t> blocks(l);
    for (auto& b : blocks) b = 1 + rng.uniform_int(2);
    Extent extent(n);
    for (auto& e : extent) e = (std::size_t{1} << (l - 1)) * (1 + rng.uniform_int(max_mult));
    return {ArchConfig::make(n, m, l, c0, blocks), extent};
}

/// |a - n| / max(|a|, |n|, floor).
inline double relative_error(double analytic, double numeric, double floor) {
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

struct GradCheck {
    double max_rel = 0;
    std::size_t checked = 0;
    std::string worst;
};

/// Compares backward gradients of `loss()` (a scalar tensor built from the graph's current
/// parameters) with central differences at `samples` uniformly drawn parameter scalars.
template <class T, class LossFn>
GradCheck check_parameter_gradients(NetGraph<T>& graph, LossFn loss, std::size_t samples, double step, double floor,
                                    SplitMix64& rng) {
    auto params = parameters(graph);
    for (auto& p : params) p.zero_grad();
    loss().backward();
    std::size_t total = 0;
    for (const auto& p : params) total += p.size();

    GradCheck res;
    for (std::size_t s = 0; s < samples; ++s) {
        std::size_t flat = rng.uniform_int(total), k = 0;
        while (flat >= params[k].size()) flat -= params[k++].size();
        auto& p = params[k];
        const double analytic = p.has_grad() ? static_cast<double>(p.grad()[flat]) : 0.0;
        auto data = p.mutable_data();
        const T saved = data[flat];
        data[flat] = static_cast<T>(static_cast<double>(saved) + step);
        const double up = loss().item();
        data[flat] = static_cast<T>(static_cast<double>(saved) - step);
        const double down = loss().item();
        data[flat] = saved;
        const double numeric = (up - down) / (2 * step);
        const double err = relative_error(analytic, numeric, floor);
        if (err > res.max_rel) {
            res.max_rel = err;
            res.worst = graph.params[k].name + "[" + std::to_string(flat) + "] analytic " + std::to_string(analytic) +
                        " numeric " + std::to_string(numeric);
        }
        ++res.checked;
    }
    return res;
}

/// Bounding box (inclusive, per input dimension) of the non-zero input gradient when
/// back-propagating from the output element at `position` (target-dim coordinates).
/// Built without normalization and with strictly positive weights, biases and input so no
/// contribution can cancel; an empty box is reported as lo > hi.
inline std::vector<std::pair<std::ptrdiff_t, std::ptrdiff_t>> gradient_support(const ArchConfig& config,
                                                                               const Extent& extent,
                                                                               const std::vector<std::size_t>& position,
                                                                               std::uint64_t seed) {
    BuildOptions opt;
    opt.normalization = Normalization::none;
    auto graph = build<double>(config, extent, opt);
    SplitMix64 rng(seed);
    for (auto& p : graph.params) {
        auto data = p.value.mutable_data();
        for (auto& v : data)
            v = p.role == ParamRole::weight ? rng.uniform(0.5, 1.5) / static_cast<double>(p.fan_in) : rng.uniform(0.01, 0.1);
    }
    Shape xs{1, 1};
    xs.insert(xs.end(), extent.begin(), extent.end());
    auto x = random_tensor<double>(xs, rng, 0.5, 1.5, true);
    const auto y = forward(graph, x);

    std::vector<double> pick(y.size(), 0.0);
    std::size_t flat = 0;
    for (std::size_t a = 0; a < position.size(); ++a) flat = flat * y.dim(a + 1) + position[a];
    pick[flat] = 1.0;
    sum(mul(y, Tensor<double>(y.shape(), pick))).backward();

    const std::size_t n = extent.size();
    std::vector<std::pair<std::ptrdiff_t, std::ptrdiff_t>> box(n, {std::ptrdiff_t{1} << 40, -1});
    const auto g = x.grad();
    std::vector<std::size_t> coord(n, 0);
    for (std::size_t i = 0; i < g.size(); ++i) {
        std::size_t rem = i;
        for (std::size_t d = n; d-- > 0;) {
            coord[d] = rem % extent[d];
            rem /= extent[d];
        }
        if (g[i] == 0.0) continue;
        for (std::size_t d = 0; d < n; ++d) {
            box[d].first = std::min<std::ptrdiff_t>(box[d].first, static_cast<std::ptrdiff_t>(coord[d]));
            box[d].second = std::max<std::ptrdiff_t>(box[d].second, static_cast<std::ptrdiff_t>(coord[d]));
        }
    }
    return box;
}

/// Random binary mask with a few filled rectangles and isolated pixels.
inline BinaryMask random_mask(std::size_t rows, std::size_t cols, SplitMix64& rng, double density = 0.3) {
    BinaryMask m({rows, cols});
    const std::size_t rects = rng.uniform_int(4);
    for (std::size_t r = 0; r < rects; ++r) {
        const std::size_t y0 = rng.uniform_int(rows), x0 = rng.uniform_int(cols);
        const std::size_t h = 1 + rng.uniform_int(rows - y0), w = 1 + rng.uniform_int(cols - x0);
        for (std::size_t y = y0; y < y0 + h; ++y)
            for (std::size_t x = x0; x < x0 + w; ++x) m.data[y * cols + x] = 1;
    }
    for (auto& v : m.data)
        if (rng.uniform() < density * 0.1) v = 1;
    return m;
}

/// O(|A| |B|) directed distances between boundary pixels.
inline std::vector<double> brute_directed(const BinaryMask& a, const BinaryMask& b, const std::vector<double>& spacing) {
    const auto ba = boundary(a), bb = boundary(b);
    const std::size_t cols = a.extent[1];
    std::vector<double> out;
    for (std::size_t i = 0; i < ba.data.size(); ++i) {
        if (!ba.data[i]) continue;
        double best = std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < bb.data.size(); ++j) {
            if (!bb.data[j]) continue;
            const double dy = (static_cast<double>(i / cols) - static_cast<double>(j / cols)) * spacing[0];
            const double dx = (static_cast<double>(i % cols) - static_cast<double>(j % cols)) * spacing[1];
            best = std::min(best, std::sqrt(dy * dy + dx * dx));
        }
        out.push_back(best);
    }
    return out;
}

/// Boundary by definition: foreground with a 4-neighbour outside the image or background.
inline BinaryMask brute_boundary(const BinaryMask& m) {
    const std::size_t rows = m.extent[0], cols = m.extent[1];
    BinaryMask out(m.extent);
    const auto at = [&](long y, long x) {
        return y >= 0 && x >= 0 && y < static_cast<long>(rows) && x < static_cast<long>(cols) &&
               m.data[static_cast<std::size_t>(y) * cols + static_cast<std::size_t>(x)];
    };
    for (long y = 0; y < static_cast<long>(rows); ++y)
        for (long x = 0; x < static_cast<long>(cols); ++x)
            if (at(y, x) && (!at(y - 1, x) || !at(y + 1, x) || !at(y, x - 1) || !at(y, x + 1)))
                out.data[static_cast<std::size_t>(y) * cols + static_cast<std::size_t>(x)] = 1;
    return out;
}

inline double brute_hd95(const BinaryMask& a, const BinaryMask& b, const std::vector<double>& spacing) {
    if (a.empty() && b.empty()) return 0.0;
    if (a.empty() || b.empty()) return empty_mask_sentinel(a.extent, spacing);
    auto pooled = brute_directed(a, b, spacing);
    const auto back = brute_directed(b, a, spacing);
    pooled.insert(pooled.end(), back.begin(), back.end());
    std::sort(pooled.begin(), pooled.end());
    const double pos = 0.95 * static_cast<double>(pooled.size() - 1);
    const auto lo = static_cast<std::size_t>(pos);
    const std::size_t hi = std::min(lo + 1, pooled.size() - 1);
    return pooled[lo] + (pos - static_cast<double>(lo)) * (pooled[hi] - pooled[lo]);
}

inline double brute_dice(const BinaryMask& a, const BinaryMask& b) {
    std::size_t inter = 0, sa = 0, sb = 0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        if (a.data[i] && b.data[i]) ++inter;
        if (a.data[i]) ++sa;
        if (b.data[i]) ++sb;
    }
    return sa + sb == 0 ? 1.0 : 2.0 * static_cast<double>(inter) / static_cast<double>(sa + sb);
}

/// Two-sided exact p-value by listing all 2^n sign assignments of the average ranks.
inline double brute_wilcoxon(const std::vector<double>& a, const std::vector<double>& b) {
    std::vector<double> d;
    for (std::size_t i = 0; i < a.size(); ++i)
        if (a[i] != b[i]) d.push_back(a[i] - b[i]);
    const std::size_t n = d.size();
    std::vector<double> rank(n);
    for (std::size_t i = 0; i < n; ++i) {
        double less = 0, equal = 0;
        for (std::size_t j = 0; j < n; ++j) {
            if (std::abs(d[j]) < std::abs(d[i])) ++less;
            if (std::abs(d[j]) == std::abs(d[i])) ++equal;
        }
        rank[i] = less + (equal + 1) / 2.0;
    }
    double w = 0;
    for (std::size_t i = 0; i < n; ++i)
        if (d[i] > 0) w += rank[i];
    double le = 0, ge = 0;
    const std::uint64_t patterns = std::uint64_t{1} << n;
    for (std::uint64_t mask = 0; mask < patterns; ++mask) {
        double s = 0;
        for (std::size_t i = 0; i < n; ++i)
            if (mask >> i & 1) s += rank[i];
        if (s <= w + 1e-9) ++le;
        if (s >= w - 1e-9) ++ge;
    }
    return std::min(1.0, 2.0 * std::min(le, ge) / static_cast<double>(patterns));
}

} // namespace support
