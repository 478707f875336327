#pragma once

// Shape calculus for the ND->MD encoder/decoder family.
//
// Dimensions are stored 0-based in vectors; the first `target_dims` entries
// are target dimensions, the rest are reducible. Levels are 1-based
// (level 1 = full resolution, level `depth` = bottleneck).

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "projnet/error.hpp"

namespace projnet {

using Extent = std::vector<std::size_t>;

enum class Variant { proposed, three_d_two_d };

inline std::string to_string(Variant v) {
    return v == Variant::proposed ? "proposed" : "3d2d";
}

inline Variant parse_variant(const std::string& s) {
    if (s == "proposed") return Variant::proposed;
    if (s == "3d2d") return Variant::three_d_two_d;
    throw ConfigError("unknown variant '" + s + "' (expected proposed|3d2d)");
}

struct ArchConfig {
    std::size_t n_dims = 3;
    std::size_t target_dims = 2;
    std::size_t depth = 3;
    std::size_t base_channels = 2;
    std::vector<std::size_t> channels; // C_i = c0 * 2^(i-1)
    std::vector<std::size_t> blocks;   // residual blocks per level
    Variant variant = Variant::proposed;

    /// Fills `channels` from the channel rule. An empty `blocks` means one block per level.
    static ArchConfig make(std::size_t n_dims, std::size_t target_dims, std::size_t depth,
                           std::size_t base_channels, std::vector<std::size_t> blocks = {},
                           Variant variant = Variant::proposed) {
        ArchConfig c;
        c.n_dims = n_dims;
        c.target_dims = target_dims;
        c.depth = depth;
        c.base_channels = base_channels;
        c.variant = variant;
        c.blocks = blocks.empty() ? std::vector<std::size_t>(depth, 1) : std::move(blocks);
        c.channels.resize(depth);
        for (std::size_t i = 0; i < depth; ++i) c.channels[i] = base_channels << i;
        return c;
    }

    bool is_target(std::size_t d) const { return d < target_dims; }
    std::size_t level_channels(std::size_t level) const { return channels.at(level - 1); }
    std::size_t level_blocks(std::size_t level) const { return blocks.at(level - 1); }

    bool operator==(const ArchConfig&) const = default;
};

// ---------------------------------------------------------------------------
// Validation

struct DivisibilityError {
    std::size_t dim; // 1-based
    std::size_t extent;
    std::size_t depth;
};
struct ChannelRuleError {
    std::size_t level; // 1-based
};
struct RangeError {
    std::size_t target_dims;
    std::size_t n_dims;
};
/// Structural problems: depth/rank zero, list length mismatch, B_i == 0.
struct StructureError {
    std::string what;
};

using ValidationError = std::variant<DivisibilityError, ChannelRuleError, RangeError, StructureError>;

inline std::string describe(const ValidationError& e) {
    std::ostringstream os;
    std::visit(
        [&](const auto& v) {
            using V = std::decay_t<decltype(v)>;
            if constexpr (std::is_same_v<V, DivisibilityError>) {
                os << "DivisibilityError(d=" << v.dim << ", n_d=" << v.extent << ", l=" << v.depth
                   << "): extent not divisible by 2^(l-1)";
            } else if constexpr (std::is_same_v<V, ChannelRuleError>) {
                os << "ChannelRuleError(i=" << v.level << "): C_i must equal c0*2^(i-1)";
            } else if constexpr (std::is_same_v<V, RangeError>) {
                os << "RangeError(M=" << v.target_dims << ", N=" << v.n_dims << "): need 0 <= M <= N";
            } else {
                os << "StructureError: " << v.what;
            }
        },
        e);
    return os.str();
}

/// Returns every violated invariant; empty means the pair is valid.
inline std::vector<ValidationError> validate(const ArchConfig& config, const Extent& extent) {
    std::vector<ValidationError> errors;
    if (config.n_dims == 0) errors.push_back(StructureError{"n_dims must be >= 1"});
    if (config.target_dims > config.n_dims) errors.push_back(RangeError{config.target_dims, config.n_dims});
    if (config.depth == 0) errors.push_back(StructureError{"depth must be >= 1"});
    if (config.base_channels == 0) errors.push_back(StructureError{"base_channels must be >= 1"});
    if (config.channels.size() != config.depth)
        errors.push_back(StructureError{"len(C) = " + std::to_string(config.channels.size()) +
                                        " != depth " + std::to_string(config.depth)});
    if (config.blocks.size() != config.depth)
        errors.push_back(StructureError{"len(B) = " + std::to_string(config.blocks.size()) +
                                        " != depth " + std::to_string(config.depth)});
    for (std::size_t i = 0; i < config.channels.size(); ++i) {
        const bool rule = i < 64 && config.channels[i] == (config.base_channels << i);
        if (config.channels[i] == 0 || !rule) errors.push_back(ChannelRuleError{i + 1});
    }
    for (std::size_t i = 0; i < config.blocks.size(); ++i)
        if (config.blocks[i] == 0)
            errors.push_back(StructureError{"B_" + std::to_string(i + 1) + " must be >= 1"});
    if (extent.size() != config.n_dims) {
        errors.push_back(StructureError{"extent rank " + std::to_string(extent.size()) + " != N " +
                                        std::to_string(config.n_dims)});
    } else if (config.depth >= 1 && config.depth < 64) {
        const std::size_t factor = std::size_t{1} << (config.depth - 1);
        for (std::size_t d = 0; d < extent.size(); ++d)
            if (extent[d] == 0 || extent[d] % factor != 0)
                errors.push_back(DivisibilityError{d + 1, extent[d], config.depth});
    }
    return errors;
}

class ValidationFailed : public ShapeError {
public:
    explicit ValidationFailed(std::vector<ValidationError> errors)
        : ShapeError(join(errors)), errors_(std::move(errors)) {}
    const std::vector<ValidationError>& errors() const { return errors_; }

private:
    static std::string join(const std::vector<ValidationError>& errors) {
        std::string s;
        for (const auto& e : errors) {
            if (!s.empty()) s += "; ";
            s += describe(e);
        }
        return s;
    }
    std::vector<ValidationError> errors_;
};

inline void require_valid(const ArchConfig& config, const Extent& extent) {
    auto errors = validate(config, extent);
    if (!errors.empty()) throw ValidationFailed(std::move(errors));
}

// ---------------------------------------------------------------------------
// Per-level extents and projective pooling kernels

namespace detail {
inline void check_level(const ArchConfig& config, std::size_t level) {
    if (level < 1 || level > config.depth)
        throw ShapeError("level " + std::to_string(level) + " outside [1, " + std::to_string(config.depth) + "]");
}
} // namespace detail

/// Every dimension halves per level: n_d / 2^(j-1).
inline Extent encoder_shape(const ArchConfig& config, const Extent& extent, std::size_t level) {
    detail::check_level(config, level);
    Extent out(extent.size());
    for (std::size_t d = 0; d < extent.size(); ++d) out[d] = extent[d] >> (level - 1);
    return out;
}

/// Target dimensions follow the encoder; reducible dimensions stay at bottleneck size.
inline Extent decoder_shape(const ArchConfig& config, const Extent& extent, std::size_t level) {
    detail::check_level(config, level);
    Extent out(extent.size());
    for (std::size_t d = 0; d < extent.size(); ++d)
        out[d] = config.is_target(d) ? extent[d] >> (level - 1) : extent[d] >> (config.depth - 1);
    return out;
}

/// Kernel (= stride) of the average pooling applied to the level-j encoder output before it
/// is concatenated into the decoder: 1 on target dimensions, 2^(l-j) on reducible ones.
inline std::vector<std::size_t> skip_kernel(const ArchConfig& config, std::size_t level) {
    detail::check_level(config, level);
    std::vector<std::size_t> k(config.n_dims);
    for (std::size_t d = 0; d < config.n_dims; ++d)
        k[d] = config.is_target(d) ? 1 : std::size_t{1} << (config.depth - level);
    return k;
}

// ---------------------------------------------------------------------------
// Layer descriptions shared by the graph compiler and the receptive-field analyzer

enum class LayerKind {
    input,
    conv,
    transposed_conv,
    avg_pool,
    global_avg_pool,
    instance_norm,
    relu,
    sigmoid,
    add,
    concat,
    output,
};

inline const char* to_string(LayerKind k) {
    switch (k) {
        case LayerKind::input: return "input";
        case LayerKind::conv: return "conv";
        case LayerKind::transposed_conv: return "tconv";
        case LayerKind::avg_pool: return "avgpool";
        case LayerKind::global_avg_pool: return "gap";
        case LayerKind::instance_norm: return "inorm";
        case LayerKind::relu: return "relu";
        case LayerKind::sigmoid: return "sigmoid";
        case LayerKind::add: return "add";
        case LayerKind::concat: return "concat";
        case LayerKind::output: return "output";
    }
    return "?";
}

enum class Padding { same, valid };
enum class PadMode { zeros, circular };

struct LayerSpec {
    LayerKind kind = LayerKind::input;
    std::string name;
    std::vector<std::size_t> inputs;
    std::vector<std::size_t> kernel; // per spatial axis
    std::vector<std::size_t> stride; // per spatial axis
    Padding padding = Padding::valid;
    PadMode pad_mode = PadMode::zeros;
    std::vector<std::size_t> reduce_axes; // global_avg_pool: spatial axes of the input removed
    std::size_t channels = 0;
    Extent extent;                  // annotated output spatial extent
    std::vector<std::size_t> dims;  // network input dimension behind each spatial axis
    std::string weight, bias, gamma, beta;
};

/// Per-dimension receptive field of one output element with respect to the network input.
struct ReceptiveField {
    std::vector<std::size_t> extent;    // support inside the input volume (zero padding clips)
    std::vector<std::ptrdiff_t> lo, hi; // inclusive support bounds in input coordinates
    std::vector<std::size_t> theoretical; // same recursion without clipping at the borders
    std::vector<double> stride;         // cumulative stride of the element grid
    std::vector<bool> global;           // dimension reduced by a global pooling on the path
};

namespace detail {

struct Interval {
    std::ptrdiff_t lo = 0, hi = -1;
    bool empty() const { return hi < lo; }
    void merge(const Interval& o) {
        if (o.empty()) return;
        if (empty()) {
            *this = o;
            return;
        }
        lo = std::min(lo, o.lo);
        hi = std::max(hi, o.hi);
    }
};

inline std::ptrdiff_t floor_div(std::ptrdiff_t a, std::ptrdiff_t b) {
    std::ptrdiff_t q = a / b;
    if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
    return q;
}

// Backward interval propagation. Each element of `state[node][axis]` bounds the positions of
// that node's output that influence the selected element. Instance norm is treated as a
// pointwise op: its statistics are global by construction and are excluded from the analysis.
inline std::vector<Interval> propagate_support(std::span<const LayerSpec> layers, std::size_t node,
                                               const std::vector<std::size_t>& position, bool clip,
                                               std::vector<bool>& global) {
    std::vector<std::vector<Interval>> state(layers.size());
    for (std::size_t i = 0; i < layers.size(); ++i) state[i].resize(layers[i].extent.size());
    const auto& target = layers[node];
    if (position.size() != target.extent.size())
        throw ShapeError("receptive_field: position rank does not match node '" + target.name + "'");
    for (std::size_t a = 0; a < position.size(); ++a) {
        if (position[a] >= target.extent[a]) throw ShapeError("receptive_field: position outside node extent");
        state[node][a] = {static_cast<std::ptrdiff_t>(position[a]), static_cast<std::ptrdiff_t>(position[a])};
    }
    std::vector<bool> reached(layers.size(), false);
    reached[node] = true;
    global.assign(layers.front().extent.size(), false);

    for (std::size_t idx = node + 1; idx-- > 0;) {
        if (!reached[idx]) continue;
        const auto& layer = layers[idx];
        const auto& out = state[idx];
        for (std::size_t in_node : layer.inputs) {
            const auto& src = layers[in_node];
            std::vector<Interval> in(src.extent.size());
            const auto full = [&](std::size_t axis) {
                return Interval{0, static_cast<std::ptrdiff_t>(src.extent[axis]) - 1};
            };
            switch (layer.kind) {
                case LayerKind::conv:
                    for (std::size_t a = 0; a < out.size(); ++a) {
                        const auto k = static_cast<std::ptrdiff_t>(layer.kernel[a]);
                        const auto s = static_cast<std::ptrdiff_t>(layer.stride[a]);
                        const std::ptrdiff_t pad = layer.padding == Padding::same ? (k - 1) / 2 : 0;
                        Interval iv{out[a].lo * s - pad, out[a].hi * s - pad + k - 1};
                        const auto n = static_cast<std::ptrdiff_t>(src.extent[a]);
                        if (layer.pad_mode == PadMode::circular && (iv.lo < 0 || iv.hi >= n)) {
                            iv = full(a);
                        } else if (clip) {
                            iv.lo = std::max<std::ptrdiff_t>(iv.lo, 0);
                            iv.hi = std::min<std::ptrdiff_t>(iv.hi, n - 1);
                        }
                        in[a] = iv;
                    }
                    break;
                case LayerKind::transposed_conv:
                    for (std::size_t a = 0; a < out.size(); ++a) {
                        const auto s = static_cast<std::ptrdiff_t>(layer.stride[a]);
                        in[a] = {floor_div(out[a].lo, s), floor_div(out[a].hi, s)};
                    }
                    break;
                case LayerKind::avg_pool:
                    for (std::size_t a = 0; a < out.size(); ++a) {
                        const auto k = static_cast<std::ptrdiff_t>(layer.kernel[a]);
                        in[a] = {out[a].lo * k, out[a].hi * k + k - 1};
                    }
                    break;
                case LayerKind::global_avg_pool: {
                    std::size_t kept = 0;
                    for (std::size_t a = 0; a < src.extent.size(); ++a) {
                        if (std::find(layer.reduce_axes.begin(), layer.reduce_axes.end(), a) !=
                            layer.reduce_axes.end()) {
                            in[a] = full(a);
                            global[src.dims[a]] = true;
                        } else {
                            in[a] = out[kept++];
                        }
                    }
                    break;
                }
                default: // pointwise, add, concat, output
                    in = out;
                    break;
            }
            for (std::size_t a = 0; a < in.size(); ++a) state[in_node][a].merge(in[a]);
            reached[in_node] = true;
        }
    }
    return state.front();
}

} // namespace detail

/// Receptive field of the element `position` of layer `node`. Layers must be topologically
/// ordered with the network input at index 0.
inline ReceptiveField receptive_field(std::span<const LayerSpec> layers, std::size_t node,
                                      const std::vector<std::size_t>& position) {
    if (layers.empty() || layers.front().kind != LayerKind::input)
        throw ShapeError("receptive_field: first layer must be the input");
    if (node >= layers.size()) throw ShapeError("receptive_field: node index out of range");
    ReceptiveField rf;
    std::vector<bool> global;
    const auto clipped = detail::propagate_support(layers, node, position, true, global);
    const auto unclipped = detail::propagate_support(layers, node, position, false, global);
    const std::size_t n = layers.front().extent.size();
    rf.extent.resize(n);
    rf.lo.resize(n);
    rf.hi.resize(n);
    rf.theoretical.resize(n);
    rf.global = global;
    for (std::size_t d = 0; d < n; ++d) {
        rf.lo[d] = clipped[d].lo;
        rf.hi[d] = clipped[d].hi;
        rf.extent[d] = clipped[d].empty() ? 0 : static_cast<std::size_t>(clipped[d].hi - clipped[d].lo + 1);
        rf.theoretical[d] =
            unclipped[d].empty() ? 0 : static_cast<std::size_t>(unclipped[d].hi - unclipped[d].lo + 1);
    }

    // Cumulative stride: forward along the graph, per network input dimension.
    std::vector<std::vector<double>> jump(layers.size());
    jump[0].assign(n, 1.0);
    for (std::size_t i = 1; i <= node; ++i) {
        const auto& layer = layers[i];
        std::vector<double> j = jump[layer.inputs.front()];
        for (std::size_t a = 0; a < layer.dims.size(); ++a) {
            const std::size_t d = layer.dims[a];
            switch (layer.kind) {
                case LayerKind::conv: j[d] *= static_cast<double>(layer.stride[a]); break;
                case LayerKind::avg_pool: j[d] *= static_cast<double>(layer.kernel[a]); break;
                case LayerKind::transposed_conv: j[d] /= static_cast<double>(layer.stride[a]); break;
                default: break;
            }
        }
        if (layer.kind == LayerKind::global_avg_pool) {
            const auto& src = layers[layer.inputs.front()];
            for (std::size_t a : layer.reduce_axes) j[src.dims[a]] *= static_cast<double>(src.extent[a]);
        }
        jump[i] = std::move(j);
    }
    rf.stride = jump[node];
    return rf;
}

/// Receptive field of the centre element of layer `node`.
inline ReceptiveField receptive_field(std::span<const LayerSpec> layers, std::size_t node) {
    if (node >= layers.size()) throw ShapeError("receptive_field: node index out of range");
    std::vector<std::size_t> centre(layers[node].extent.size());
    for (std::size_t a = 0; a < centre.size(); ++a) centre[a] = layers[node].extent[a] / 2;
    return receptive_field(layers, node, centre);
}

inline std::string format_extent(const std::vector<std::size_t>& e, const char* sep = "×") {
    if (e.empty()) return "1";
    std::string s;
    for (std::size_t i = 0; i < e.size(); ++i) {
        if (i) s += sep;
        s += std::to_string(e[i]);
    }
    return s;
}

} // namespace projnet
