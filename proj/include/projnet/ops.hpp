#pragma once

// Differentiable primitives. Feature maps use the layout [batch, channel, spatial...],
// row-major with the last spatial dimension innermost.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include "projnet/shapes.hpp"
#include "projnet/tensor.hpp"

namespace projnet {

struct ConvOptions {
    std::vector<std::size_t> stride; // empty means all ones
    Padding padding = Padding::same;
    PadMode pad_mode = PadMode::zeros;
};

namespace detail {

inline Shape spatial_of(const Shape& s) { return Shape(s.begin() + 2, s.end()); }

inline std::vector<std::size_t> row_strides(const Shape& s) {
    std::vector<std::size_t> st(s.size(), 1);
    for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
    return st;
}

/// Advances a row-major coordinate; returns false after the last one.
inline bool next_coord(std::vector<std::size_t>& c, const Shape& s) {
    for (std::size_t i = c.size(); i-- > 0;) {
        if (++c[i] < s[i]) return true;
        c[i] = 0;
    }
    return false;
}

// Gather table for an N-D convolution: index[k * out_size + o] is the flat input position
// read by kernel tap k for output position o, or -1 for a zero-padded tap.
struct ConvPlan {
    Shape out_extent;
    std::size_t in_size = 1, out_size = 1, taps = 1;
    bool identity = false; // 1x..x1 kernel, unit stride: the column matrix is the input itself
    std::vector<std::int64_t> index;
};

inline ConvPlan plan_conv(const Shape& in, const Shape& kernel, const std::vector<std::size_t>& stride,
                          Padding padding, PadMode mode) {
    const std::size_t r = in.size();
    ConvPlan p;
    p.out_extent.resize(r);
    std::vector<std::ptrdiff_t> pad(r, 0);
    bool identity = true;
    for (std::size_t d = 0; d < r; ++d) {
        if (kernel[d] == 0 || stride[d] == 0) throw ShapeError("conv: zero kernel or stride");
        if (padding == Padding::same) {
            if (kernel[d] % 2 == 0) throw ShapeError("conv: same padding needs odd kernels");
            pad[d] = static_cast<std::ptrdiff_t>((kernel[d] - 1) / 2);
        }
        const std::ptrdiff_t span = static_cast<std::ptrdiff_t>(in[d]) + 2 * pad[d] - static_cast<std::ptrdiff_t>(kernel[d]);
        if (span < 0) throw ShapeError("conv: kernel larger than padded input");
        p.out_extent[d] = static_cast<std::size_t>(span) / stride[d] + 1;
        identity = identity && kernel[d] == 1 && stride[d] == 1;
    }
    p.in_size = numel(in);
    p.out_size = numel(p.out_extent);
    p.taps = numel(kernel);
    p.identity = identity;
    if (identity) return p;

    const auto in_strides = row_strides(in);
    p.index.resize(p.taps * p.out_size);
    std::vector<std::size_t> kc(r, 0);
    std::size_t k = 0;
    do {
        std::vector<std::size_t> oc(r, 0);
        std::size_t o = 0;
        do {
            std::int64_t flat = 0;
            for (std::size_t d = 0; d < r; ++d) {
                std::ptrdiff_t c = static_cast<std::ptrdiff_t>(oc[d] * stride[d] + kc[d]) - pad[d];
                const auto n = static_cast<std::ptrdiff_t>(in[d]);
                if (c < 0 || c >= n) {
                    if (mode == PadMode::zeros) {
                        flat = -1;
                        break;
                    }
                    c = ((c % n) + n) % n;
                }
                flat += c * static_cast<std::int64_t>(in_strides[d]);
            }
            p.index[k * p.out_size + o] = flat;
            ++o;
        } while (next_coord(oc, p.out_extent));
        ++k;
    } while (next_coord(kc, kernel));
    return p;
}

// Column block width for the GEMMs below; keeps a K x block panel of B (or C) in cache.
inline constexpr std::size_t gemm_block = 256;

// C[MxN] += A[MxK] * B[KxN]
template <class T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t j0 = 0; j0 < n; j0 += gemm_block) {
        const std::size_t j1 = std::min(n, j0 + gemm_block);
        for (std::size_t i = 0; i < m; ++i) {
            T* crow = c + i * n;
            for (std::size_t p = 0; p < k; ++p) {
                const T av = a[i * k + p];
                const T* brow = b + p * n;
                for (std::size_t j = j0; j < j1; ++j) crow[j] += av * brow[j];
            }
        }
    }
}

/// Dot product with eight independent partial sums (fixed summation order).
template <class T>
T dot(const T* a, const T* b, std::size_t n) {
    T acc[8] = {};
    std::size_t j = 0;
    for (; j + 8 <= n; j += 8)
        for (std::size_t u = 0; u < 8; ++u) acc[u] += a[j + u] * b[j + u];
    T s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for (; j < n; ++j) s += a[j] * b[j];
    return s;
}

// C[MxK] += A[MxN] * B[KxN]^T
template <class T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t n, std::size_t k) {
    for (std::size_t j0 = 0; j0 < n; j0 += gemm_block) {
        const std::size_t len = std::min(n, j0 + gemm_block) - j0;
        for (std::size_t i = 0; i < m; ++i) {
            const T* arow = a + i * n + j0;
            for (std::size_t p = 0; p < k; ++p) c[i * k + p] += dot(arow, b + p * n + j0, len);
        }
    }
}

// C[KxN] += A[MxK]^T * B[MxN]
template <class T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t j0 = 0; j0 < n; j0 += gemm_block) {
        const std::size_t j1 = std::min(n, j0 + gemm_block);
        for (std::size_t i = 0; i < m; ++i) {
            const T* brow = b + i * n;
            for (std::size_t p = 0; p < k; ++p) {
                const T av = a[i * k + p];
                T* crow = c + p * n;
                for (std::size_t j = j0; j < j1; ++j) crow[j] += av * brow[j];
            }
        }
    }
}

template <class T>
void im2col(const T* x, const ConvPlan& plan, std::size_t channels, T* col) {
    const std::size_t s = plan.out_size;
    for (std::size_t ci = 0; ci < channels; ++ci) {
        const T* xc = x + ci * plan.in_size;
        for (std::size_t k = 0; k < plan.taps; ++k) {
            const std::int64_t* idx = plan.index.data() + k * s;
            T* dst = col + (ci * plan.taps + k) * s;
            for (std::size_t o = 0; o < s; ++o) dst[o] = idx[o] >= 0 ? xc[idx[o]] : T{0};
        }
    }
}

template <class T>
void col2im(const T* col, const ConvPlan& plan, std::size_t channels, T* x) {
    const std::size_t s = plan.out_size;
    for (std::size_t ci = 0; ci < channels; ++ci) {
        T* xc = x + ci * plan.in_size;
        for (std::size_t k = 0; k < plan.taps; ++k) {
            const std::int64_t* idx = plan.index.data() + k * s;
            const T* src = col + (ci * plan.taps + k) * s;
            for (std::size_t o = 0; o < s; ++o)
                if (idx[o] >= 0) xc[idx[o]] += src[o];
        }
    }
}

inline void require_same_shape(const Shape& a, const Shape& b, const char* op) {
    if (a != b) throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a) + " vs " + shape_string(b));
}

// Many-to-one mean reduction given a table from input flat index to output flat index.
template <class T>
Tensor<T> mean_by_map(const Tensor<T>& x, Shape out_shape, std::shared_ptr<std::vector<std::size_t>> map,
                      std::size_t count, const char* op) {
    std::vector<T> out(numel(out_shape), T{0});
    const auto xd = x.data();
    const T inv = T{1} / static_cast<T>(count);
    for (std::size_t i = 0; i < xd.size(); ++i) out[(*map)[i]] += xd[i];
    for (auto& v : out) v *= inv;
    return make_result<T>(std::move(out_shape), std::move(out), {&x},
                          [map, inv](detail::Node<T>& self) {
                              auto gx = parent_grad(self, 0);
                              if (gx.empty()) return;
                              for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[(*map)[i]] * inv;
                          },
                          op);
}

} // namespace detail

/// N-D cross-correlation. x: [B, Cin, n...], w: [Cout, Cin, k...], b: [Cout] or undefined.
template <class T>
Tensor<T> conv(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, ConvOptions opt = {}) {
    if (x.rank() < 2 || w.rank() != x.rank())
        throw ShapeError("conv: rank mismatch x" + shape_string(x.shape()) + " w" + shape_string(w.shape()));
    if (w.dim(1) != x.dim(1))
        throw ShapeError("conv: channel mismatch x" + shape_string(x.shape()) + " w" + shape_string(w.shape()));
    const std::size_t batch = x.dim(0), cin = x.dim(1), cout = w.dim(0);
    if (b.defined() && b.shape() != Shape{cout}) throw ShapeError("conv: bias must have shape [Cout]");
    const Shape in_ext = detail::spatial_of(x.shape());
    const Shape kernel = detail::spatial_of(w.shape());
    if (opt.stride.empty()) opt.stride.assign(in_ext.size(), 1);
    if (opt.stride.size() != in_ext.size()) throw ShapeError("conv: stride rank mismatch");

    auto plan = std::make_shared<detail::ConvPlan>(detail::plan_conv(in_ext, kernel, opt.stride, opt.padding, opt.pad_mode));
    const std::size_t rows = cin * plan->taps, s = plan->out_size;
    Shape out_shape{batch, cout};
    out_shape.insert(out_shape.end(), plan->out_extent.begin(), plan->out_extent.end());
    std::vector<T> out(batch * cout * s, T{0});

    const auto xd = x.data();
    const auto wd = w.data();
    std::vector<T> col(plan->identity ? 0 : rows * s);
    for (std::size_t n = 0; n < batch; ++n) {
        const T* xb = xd.data() + n * cin * plan->in_size;
        const T* cp = xb;
        if (!plan->identity) {
            detail::im2col(xb, *plan, cin, col.data());
            cp = col.data();
        }
        T* ob = out.data() + n * cout * s;
        detail::gemm_nn(wd.data(), cp, ob, cout, rows, s);
        if (b.defined())
            for (std::size_t co = 0; co < cout; ++co)
                for (std::size_t o = 0; o < s; ++o) ob[co * s + o] += b[co];
    }

    return make_result<T>(
        std::move(out_shape), std::move(out), {&x, &w, &b},
        [plan, batch, cin, cout, rows, s](detail::Node<T>& self) {
            auto gx = parent_grad(self, 0);
            auto gw = parent_grad(self, 1);
            auto gb = parent_grad(self, 2);
            const auto& xdata = self.parents[0]->data;
            const auto& wdata = self.parents[1]->data;
            std::vector<T> col(plan->identity || gw.empty() ? 0 : rows * s);
            std::vector<T> dcol(plan->identity || gx.empty() ? 0 : rows * s);
            for (std::size_t n = 0; n < batch; ++n) {
                const T* g = self.grad.data() + n * cout * s;
                const T* xb = xdata.data() + n * cin * plan->in_size;
                if (!gw.empty()) {
                    const T* cp = xb;
                    if (!plan->identity) {
                        detail::im2col(xb, *plan, cin, col.data());
                        cp = col.data();
                    }
                    detail::gemm_nt(g, cp, gw.data(), cout, s, rows);
                }
                if (!gx.empty()) {
                    T* gxb = gx.data() + n * cin * plan->in_size;
                    if (plan->identity) {
                        detail::gemm_tn(wdata.data(), g, gxb, cout, rows, s);
                    } else {
                        std::fill(dcol.begin(), dcol.end(), T{0});
                        detail::gemm_tn(wdata.data(), g, dcol.data(), cout, rows, s);
                        detail::col2im(dcol.data(), *plan, cin, gxb);
                    }
                }
                if (!gb.empty())
                    for (std::size_t co = 0; co < cout; ++co) {
                        T acc{0};
                        for (std::size_t o = 0; o < s; ++o) acc += g[co * s + o];
                        gb[co] += acc;
                    }
            }
        },
        "conv");
}

/// Transposed convolution with kernel == stride (each stride in {1, 2}).
/// x: [B, Cin, n...], w: [Cin, Cout, s...], b: [Cout] or undefined. Output extent n*s.
template <class T>
Tensor<T> transposed_conv(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                          const std::vector<std::size_t>& stride) {
    if (x.rank() < 2 || w.rank() != x.rank()) throw ShapeError("transposed_conv: rank mismatch");
    if (w.dim(0) != x.dim(1)) throw ShapeError("transposed_conv: channel mismatch");
    const std::size_t batch = x.dim(0), cin = x.dim(1), cout = w.dim(1);
    if (b.defined() && b.shape() != Shape{cout}) throw ShapeError("transposed_conv: bias must have shape [Cout]");
    const Shape in_ext = detail::spatial_of(x.shape());
    const Shape kernel = detail::spatial_of(w.shape());
    if (stride.size() != in_ext.size()) throw ShapeError("transposed_conv: stride rank mismatch");
    Shape out_ext(in_ext.size());
    for (std::size_t d = 0; d < in_ext.size(); ++d) {
        if (stride[d] != 1 && stride[d] != 2) throw ShapeError("transposed_conv: unsupported stride " + std::to_string(stride[d]));
        if (kernel[d] != stride[d]) throw ShapeError("transposed_conv: kernel must equal stride");
        out_ext[d] = in_ext[d] * stride[d];
    }
    const std::size_t in_size = numel(in_ext), s = numel(out_ext), taps = numel(kernel);

    // Source position and kernel tap for each output position.
    auto src = std::make_shared<std::vector<std::size_t>>(s);
    auto tap = std::make_shared<std::vector<std::size_t>>(s);
    {
        const auto ist = detail::row_strides(in_ext);
        const auto kst = detail::row_strides(kernel);
        std::vector<std::size_t> oc(out_ext.size(), 0);
        std::size_t o = 0;
        do {
            std::size_t si = 0, ki = 0;
            for (std::size_t d = 0; d < oc.size(); ++d) {
                si += (oc[d] / stride[d]) * ist[d];
                ki += (oc[d] % stride[d]) * kst[d];
            }
            (*src)[o] = si;
            (*tap)[o] = ki;
            ++o;
        } while (detail::next_coord(oc, out_ext));
    }

    Shape out_shape{batch, cout};
    out_shape.insert(out_shape.end(), out_ext.begin(), out_ext.end());
    std::vector<T> out(batch * cout * s, T{0});
    const auto xd = x.data();
    const auto wd = w.data();
    for (std::size_t n = 0; n < batch; ++n)
        for (std::size_t co = 0; co < cout; ++co) {
            T* orow = out.data() + (n * cout + co) * s;
            if (b.defined()) std::fill(orow, orow + s, b[co]);
            for (std::size_t ci = 0; ci < cin; ++ci) {
                const T* xrow = xd.data() + (n * cin + ci) * in_size;
                const T* wrow = wd.data() + (ci * cout + co) * taps;
                for (std::size_t o = 0; o < s; ++o) orow[o] += xrow[(*src)[o]] * wrow[(*tap)[o]];
            }
        }

    return make_result<T>(
        std::move(out_shape), std::move(out), {&x, &w, &b},
        [src, tap, batch, cin, cout, in_size, s, taps](detail::Node<T>& self) {
            auto gx = parent_grad(self, 0);
            auto gw = parent_grad(self, 1);
            auto gb = parent_grad(self, 2);
            const auto& xdata = self.parents[0]->data;
            const auto& wdata = self.parents[1]->data;
            for (std::size_t n = 0; n < batch; ++n)
                for (std::size_t co = 0; co < cout; ++co) {
                    const T* g = self.grad.data() + (n * cout + co) * s;
                    if (!gb.empty()) {
                        T acc{0};
                        for (std::size_t o = 0; o < s; ++o) acc += g[o];
                        gb[co] += acc;
                    }
                    for (std::size_t ci = 0; ci < cin; ++ci) {
                        const std::size_t wbase = (ci * cout + co) * taps;
                        const std::size_t xbase = (n * cin + ci) * in_size;
                        if (!gx.empty())
                            for (std::size_t o = 0; o < s; ++o) gx[xbase + (*src)[o]] += g[o] * wdata[wbase + (*tap)[o]];
                        if (!gw.empty())
                            for (std::size_t o = 0; o < s; ++o) gw[wbase + (*tap)[o]] += g[o] * xdata[xbase + (*src)[o]];
                    }
                }
        },
        "transposed_conv");
}

/// Non-overlapping average pooling (kernel == stride) over the spatial axes of [B, C, n...].
template <class T>
Tensor<T> avg_pool(const Tensor<T>& x, const std::vector<std::size_t>& kernel, const std::vector<std::size_t>& stride) {
    if (x.rank() < 2 || kernel.size() != x.rank() - 2) throw ShapeError("avg_pool: kernel rank mismatch");
    if (kernel != stride) throw ShapeError("avg_pool: kernel must equal stride");
    Shape out_shape = x.shape();
    for (std::size_t a = 0; a < kernel.size(); ++a) {
        const std::size_t n = x.dim(a + 2);
        if (kernel[a] == 0 || n % kernel[a] != 0)
            throw ShapeError("avg_pool: extent " + std::to_string(n) + " not divisible by kernel " + std::to_string(kernel[a]));
        out_shape[a + 2] = n / kernel[a];
    }
    auto map = std::make_shared<std::vector<std::size_t>>(x.size());
    const auto ost = detail::row_strides(out_shape);
    std::vector<std::size_t> c(x.rank(), 0);
    std::size_t i = 0;
    if (x.size() > 0) do {
            std::size_t o = c[0] * ost[0] + c[1] * ost[1];
            for (std::size_t a = 2; a < c.size(); ++a) o += (c[a] / kernel[a - 2]) * ost[a];
            (*map)[i++] = o;
        } while (detail::next_coord(c, x.shape()));
    return detail::mean_by_map(x, std::move(out_shape), map, numel(kernel), "avg_pool");
}

/// Mean over the listed tensor axes; those axes are removed from the shape.
template <class T>
Tensor<T> global_avg_pool(const Tensor<T>& x, const std::vector<std::size_t>& axes) {
    if (axes.empty()) throw ShapeError("global_avg_pool: empty axis set");
    std::set<std::size_t> drop(axes.begin(), axes.end());
    if (drop.size() != axes.size() || *drop.rbegin() >= x.rank()) throw ShapeError("global_avg_pool: invalid axes");
    Shape out_shape;
    std::size_t count = 1;
    for (std::size_t a = 0; a < x.rank(); ++a) {
        if (drop.count(a)) count *= x.dim(a);
        else out_shape.push_back(x.dim(a));
    }
    if (count == 0) throw ShapeError("global_avg_pool: reducing an empty axis");
    const auto ost = detail::row_strides(out_shape);
    auto map = std::make_shared<std::vector<std::size_t>>(x.size());
    std::vector<std::size_t> c(x.rank(), 0);
    std::size_t i = 0;
    if (x.size() > 0) do {
            std::size_t o = 0, k = 0;
            for (std::size_t a = 0; a < c.size(); ++a)
                if (!drop.count(a)) o += c[a] * ost[k++];
            (*map)[i++] = o;
        } while (detail::next_coord(c, x.shape()));
    return detail::mean_by_map(x, std::move(out_shape), map, count, "global_avg_pool");
}

/// Per-sample, per-channel normalization over all spatial positions with biased variance,
/// followed by the affine gamma/beta. x: [B, C, n...].
template <class T>
Tensor<T> instance_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, double eps = 1e-5) {
    if (x.rank() < 2) throw ShapeError("instance_norm: need [B, C, ...]");
    const std::size_t batch = x.dim(0), ch = x.dim(1), s = x.size() / std::max<std::size_t>(batch * ch, 1);
    if (gamma.shape() != Shape{ch} || beta.shape() != Shape{ch}) throw ShapeError("instance_norm: gamma/beta must be [C]");
    if (!(eps > 0)) throw ShapeError("instance_norm: eps must be positive");
    auto xhat = std::make_shared<std::vector<T>>(x.size());
    auto inv_std = std::make_shared<std::vector<double>>(batch * ch);
    std::vector<T> out(x.size());
    const auto xd = x.data();
    for (std::size_t bc = 0; bc < batch * ch; ++bc) {
        const T* p = xd.data() + bc * s;
        double mean = 0;
        for (std::size_t i = 0; i < s; ++i) mean += p[i];
        mean /= static_cast<double>(s);
        double var = 0;
        for (std::size_t i = 0; i < s; ++i) var += (p[i] - mean) * (p[i] - mean);
        var /= static_cast<double>(s);
        const double is = 1.0 / std::sqrt(var + eps);
        (*inv_std)[bc] = is;
        const double g = gamma[bc % ch], bt = beta[bc % ch];
        for (std::size_t i = 0; i < s; ++i) {
            const double h = (p[i] - mean) * is;
            (*xhat)[bc * s + i] = static_cast<T>(h);
            out[bc * s + i] = static_cast<T>(h * g + bt);
        }
    }
    return make_result<T>(
        x.shape(), std::move(out), {&x, &gamma, &beta},
        [xhat, inv_std, batch, ch, s](detail::Node<T>& self) {
            auto gx = parent_grad(self, 0);
            auto gg = parent_grad(self, 1);
            auto gbeta = parent_grad(self, 2);
            const auto& gamma_data = self.parents[1]->data;
            for (std::size_t bc = 0; bc < batch * ch; ++bc) {
                const std::size_t c = bc % ch;
                const T* g = self.grad.data() + bc * s;
                const T* h = xhat->data() + bc * s;
                double sum_g = 0, sum_gh = 0;
                for (std::size_t i = 0; i < s; ++i) {
                    sum_g += g[i];
                    sum_gh += static_cast<double>(g[i]) * h[i];
                }
                if (!gbeta.empty()) gbeta[c] += static_cast<T>(sum_g);
                if (!gg.empty()) gg[c] += static_cast<T>(sum_gh);
                if (!gx.empty()) {
                    const double scale = (*inv_std)[bc] * gamma_data[c];
                    const double mg = sum_g / static_cast<double>(s), mgh = sum_gh / static_cast<double>(s);
                    T* dst = gx.data() + bc * s;
                    for (std::size_t i = 0; i < s; ++i) dst[i] += static_cast<T>(scale * (g[i] - mg - h[i] * mgh));
                }
            }
        },
        "instance_norm");
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
    std::vector<T> out(x.data().begin(), x.data().end());
    for (auto& v : out) v = v > T{0} ? v : T{0};
    return make_result<T>(x.shape(), std::move(out), {&x},
                          [](detail::Node<T>& self) {
                              auto gx = parent_grad(self, 0);
                              if (gx.empty()) return;
                              for (std::size_t i = 0; i < gx.size(); ++i)
                                  if (self.data[i] > T{0}) gx[i] += self.grad[i];
                          },
                          "relu");
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
    std::vector<T> out(x.size());
    const auto xd = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        const T v = xd[i];
        if (v >= T{0}) {
            out[i] = T{1} / (T{1} + std::exp(-v));
        } else {
            const T e = std::exp(v);
            out[i] = e / (T{1} + e);
        }
    }
    return make_result<T>(x.shape(), std::move(out), {&x},
                          [](detail::Node<T>& self) {
                              auto gx = parent_grad(self, 0);
                              if (gx.empty()) return;
                              for (std::size_t i = 0; i < gx.size(); ++i)
                                  gx[i] += self.grad[i] * self.data[i] * (T{1} - self.data[i]);
                          },
                          "sigmoid");
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a.shape(), b.shape(), "add");
    std::vector<T> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
    return make_result<T>(a.shape(), std::move(out), {&a, &b},
                          [](detail::Node<T>& self) {
                              for (std::size_t p = 0; p < 2; ++p) {
                                  auto g = parent_grad(self, p);
                                  for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                              }
                          },
                          "add");
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a.shape(), b.shape(), "mul");
    std::vector<T> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
    return make_result<T>(a.shape(), std::move(out), {&a, &b},
                          [](detail::Node<T>& self) {
                              const auto& ad = self.parents[0]->data;
                              const auto& bd = self.parents[1]->data;
                              auto ga = parent_grad(self, 0);
                              for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] * bd[i];
                              auto gb = parent_grad(self, 1);
                              for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += self.grad[i] * ad[i];
                          },
                          "mul");
}

/// Concatenation along `axis` (channel axis by default); all other extents must agree.
template <class T>
Tensor<T> concat(const Tensor<T>& a, const Tensor<T>& b, std::size_t axis = 1) {
    if (a.rank() != b.rank() || axis >= a.rank())
        throw ShapeError("concat: rank mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
    for (std::size_t i = 0; i < a.rank(); ++i)
        if (i != axis && a.dim(i) != b.dim(i))
            throw ShapeError("concat: shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= a.dim(i);
    for (std::size_t i = axis + 1; i < a.rank(); ++i) inner *= a.dim(i);
    const std::size_t na = a.dim(axis) * inner, nb = b.dim(axis) * inner;
    Shape out_shape = a.shape();
    out_shape[axis] += b.dim(axis);
    std::vector<T> out(outer * (na + nb));
    for (std::size_t o = 0; o < outer; ++o) {
        std::copy_n(a.data().begin() + o * na, na, out.begin() + o * (na + nb));
        std::copy_n(b.data().begin() + o * nb, nb, out.begin() + o * (na + nb) + na);
    }
    return make_result<T>(std::move(out_shape), std::move(out), {&a, &b},
                          [outer, na, nb](detail::Node<T>& self) {
                              auto ga = parent_grad(self, 0);
                              auto gb = parent_grad(self, 1);
                              for (std::size_t o = 0; o < outer; ++o) {
                                  const T* g = self.grad.data() + o * (na + nb);
                                  if (!ga.empty())
                                      for (std::size_t i = 0; i < na; ++i) ga[o * na + i] += g[i];
                                  if (!gb.empty())
                                      for (std::size_t i = 0; i < nb; ++i) gb[o * nb + i] += g[na + i];
                              }
                          },
                          "concat");
}

/// Sum of all elements as a rank-0 tensor.
template <class T>
Tensor<T> sum(const Tensor<T>& x) {
    T acc{0};
    for (T v : x.data()) acc += v;
    return make_result<T>(Shape{}, std::vector<T>{acc}, {&x},
                          [](detail::Node<T>& self) {
                              auto gx = parent_grad(self, 0);
                              for (auto& g : gx) g += self.grad[0];
                          },
                          "sum");
}

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
    if (numel(shape) != x.size())
        throw ShapeError("reshape: " + shape_string(x.shape()) + " -> " + shape_string(shape));
    return make_result<T>(std::move(shape), std::vector<T>(x.data().begin(), x.data().end()), {&x},
                          [](detail::Node<T>& self) {
                              auto gx = parent_grad(self, 0);
                              for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
                          },
                          "reshape");
}

} // namespace projnet
