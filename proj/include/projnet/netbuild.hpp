#pragma once

// Compiles an ArchConfig into an executable layer graph.
//
// Proposed variant: residual encoder over all N dimensions; a decoder that upsamples only
// the target dimensions and keeps reducible dimensions at bottleneck size; projective skip
// connections (average pooling with the kernels from skip_kernel) concatenated into each
// decoder level; global average pooling over the reducible dimensions followed by a 1x..x1
// convolution and a sigmoid.
//
// 3D2D ablation: same encoder, but the bottleneck and every skip are globally pooled over
// the reducible dimensions so the decoder is purely M-dimensional.

#include <cstdint>
#include <cstdio>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "projnet/io.hpp"
#include "projnet/ops.hpp"
#include "projnet/rng.hpp"
#include "projnet/shapes.hpp"
#include "projnet/tensor.hpp"

namespace projnet {

enum class Normalization { instance, none };

/// Build switches that do not change the parameterization of the trained model; used by
/// test harnesses (receptive-field oracle, periodic-shift equivariance).
struct BuildOptions {
    Normalization normalization = Normalization::instance;
    PadMode pad_mode = PadMode::zeros;
    double norm_eps = 1e-5;
};

enum class ParamRole { weight, bias, gamma, beta };

template <class T>
struct Param {
    std::string name;
    Tensor<T> value;
    ParamRole role = ParamRole::weight;
    std::size_t fan_in = 1;
};

template <class T>
struct NetGraph {
    ArchConfig config;
    Extent input_extent;
    BuildOptions options;
    std::vector<LayerSpec> layers; // topological order, input first, output last
    std::vector<Param<T>> params;  // creation order == topological order
    std::map<std::string, std::size_t> param_index;

    std::size_t output_node() const { return layers.size() - 1; }
    /// Spatial extent of the produced mask: (n_1, ..., n_M).
    const Extent& output_extent() const { return layers.back().extent; }

    const Tensor<T>& param(const std::string& name) const { return params.at(param_index.at(name)).value; }
    Tensor<T>& param(const std::string& name) { return params.at(param_index.at(name)).value; }
};

namespace detail {

template <class T>
class GraphBuilder {
public:
    GraphBuilder(NetGraph<T>& g) : g_(g) {}

    std::size_t input(std::size_t channels, const Extent& extent) {
        LayerSpec l;
        l.kind = LayerKind::input;
        l.name = "input";
        l.channels = channels;
        l.extent = extent;
        for (std::size_t d = 0; d < extent.size(); ++d) l.dims.push_back(d);
        return push(std::move(l));
    }

    std::size_t conv(std::size_t from, std::size_t cout, std::size_t k, std::size_t s, Padding padding, bool bias,
                     const std::string& name) {
        const auto& src = g_.layers[from];
        const std::size_t r = src.extent.size();
        LayerSpec l = derived(src, LayerKind::conv, name, {from});
        l.kernel.assign(r, k);
        l.stride.assign(r, s);
        l.padding = padding;
        l.pad_mode = g_.options.pad_mode;
        l.channels = cout;
        for (std::size_t a = 0; a < r; ++a) {
            const std::size_t pad = padding == Padding::same ? (k - 1) / 2 : 0;
            l.extent[a] = (src.extent[a] + 2 * pad - k) / s + 1;
        }
        Shape wshape{cout, src.channels};
        wshape.insert(wshape.end(), l.kernel.begin(), l.kernel.end());
        l.weight = name + ".weight";
        add_param(l.weight, wshape, ParamRole::weight, src.channels * numel(l.kernel));
        if (bias) {
            l.bias = name + ".bias";
            add_param(l.bias, {cout}, ParamRole::bias, 1);
        }
        return push(std::move(l));
    }

    std::size_t tconv(std::size_t from, std::size_t cout, const std::vector<std::size_t>& stride, const std::string& name) {
        const auto& src = g_.layers[from];
        LayerSpec l = derived(src, LayerKind::transposed_conv, name, {from});
        l.kernel = stride;
        l.stride = stride;
        l.channels = cout;
        for (std::size_t a = 0; a < stride.size(); ++a) l.extent[a] = src.extent[a] * stride[a];
        Shape wshape{src.channels, cout};
        wshape.insert(wshape.end(), stride.begin(), stride.end());
        l.weight = name + ".weight";
        l.bias = name + ".bias";
        add_param(l.weight, wshape, ParamRole::weight, src.channels);
        add_param(l.bias, {cout}, ParamRole::bias, 1);
        return push(std::move(l));
    }

    std::size_t norm(std::size_t from, const std::string& name) {
        if (g_.options.normalization == Normalization::none) return from;
        const auto& src = g_.layers[from];
        LayerSpec l = derived(src, LayerKind::instance_norm, name, {from});
        l.gamma = name + ".gamma";
        l.beta = name + ".beta";
        add_param(l.gamma, {src.channels}, ParamRole::gamma, 1);
        add_param(l.beta, {src.channels}, ParamRole::beta, 1);
        return push(std::move(l));
    }

    std::size_t pointwise(std::size_t from, LayerKind kind, const std::string& name) {
        return push(derived(g_.layers[from], kind, name, {from}));
    }

    std::size_t add(std::size_t a, std::size_t b, const std::string& name) {
        return push(derived(g_.layers[a], LayerKind::add, name, {a, b}));
    }

    std::size_t concat(std::size_t a, std::size_t b, const std::string& name) {
        LayerSpec l = derived(g_.layers[a], LayerKind::concat, name, {a, b});
        l.channels = g_.layers[a].channels + g_.layers[b].channels;
        return push(std::move(l));
    }

    std::size_t avg_pool(std::size_t from, const std::vector<std::size_t>& kernel, const std::string& name) {
        const auto& src = g_.layers[from];
        LayerSpec l = derived(src, LayerKind::avg_pool, name, {from});
        l.kernel = kernel;
        l.stride = kernel;
        for (std::size_t a = 0; a < kernel.size(); ++a) l.extent[a] = src.extent[a] / kernel[a];
        return push(std::move(l));
    }

    std::size_t gap(std::size_t from, const std::vector<std::size_t>& axes, const std::string& name) {
        const auto& src = g_.layers[from];
        LayerSpec l = derived(src, LayerKind::global_avg_pool, name, {from});
        l.reduce_axes = axes;
        l.extent.clear();
        l.dims.clear();
        for (std::size_t a = 0; a < src.extent.size(); ++a)
            if (std::find(axes.begin(), axes.end(), a) == axes.end()) {
                l.extent.push_back(src.extent[a]);
                l.dims.push_back(src.dims[a]);
            }
        return push(std::move(l));
    }

    std::size_t output(std::size_t from) {
        LayerSpec l = derived(g_.layers[from], LayerKind::output, "output", {from});
        l.channels = 0;
        return push(std::move(l));
    }

    std::size_t residual_block(std::size_t from, std::size_t cout, const std::string& name) {
        const std::size_t cin = g_.layers[from].channels;
        std::size_t h = conv(from, cout, 3, 1, Padding::same, false, name + ".conv1");
        h = norm(h, name + ".norm1");
        h = pointwise(h, LayerKind::relu, name + ".relu1");
        h = conv(h, cout, 3, 1, Padding::same, false, name + ".conv2");
        h = norm(h, name + ".norm2");
        const std::size_t shortcut = cin == cout ? from : conv(from, cout, 1, 1, Padding::valid, true, name + ".proj");
        h = add(h, shortcut, name + ".sum");
        return pointwise(h, LayerKind::relu, name + ".out");
    }

    std::size_t level_blocks(std::size_t from, std::size_t cout, std::size_t count, const std::string& prefix) {
        for (std::size_t b = 1; b <= count; ++b) from = residual_block(from, cout, prefix + ".block" + std::to_string(b));
        return from;
    }

private:
    static LayerSpec derived(const LayerSpec& src, LayerKind kind, const std::string& name, std::vector<std::size_t> inputs) {
        LayerSpec l;
        l.kind = kind;
        l.name = name;
        l.inputs = std::move(inputs);
        l.channels = src.channels;
        l.extent = src.extent;
        l.dims = src.dims;
        return l;
    }

    std::size_t push(LayerSpec l) {
        g_.layers.push_back(std::move(l));
        return g_.layers.size() - 1;
    }

    void add_param(const std::string& name, const Shape& shape, ParamRole role, std::size_t fan_in) {
        if (g_.param_index.count(name)) throw std::logic_error("duplicate parameter " + name);
        g_.param_index[name] = g_.params.size();
        g_.params.push_back(Param<T>{name, Tensor<T>::zeros(shape, true), role, fan_in});
    }

    NetGraph<T>& g_;
};

inline void check_annotation(const Extent& got, const Extent& want, const std::string& what) {
    if (got != want)
        throw std::logic_error("annotation mismatch at " + what + ": " + format_extent(got) + " vs " + format_extent(want));
}

} // namespace detail

/// Fan-in scaled normal weights (std = sqrt(2 / fan_in)), unit gamma, zero beta and biases.
template <class T>
void initialize(NetGraph<T>& graph, std::uint64_t seed) {
    SplitMix64 rng(seed);
    for (auto& p : graph.params) {
        auto data = p.value.mutable_data();
        switch (p.role) {
            case ParamRole::weight: {
                const double std_dev = std::sqrt(2.0 / static_cast<double>(p.fan_in));
                for (auto& v : data) v = static_cast<T>(std_dev * rng.normal());
                break;
            }
            case ParamRole::gamma: std::fill(data.begin(), data.end(), T{1}); break;
            default: std::fill(data.begin(), data.end(), T{0}); break;
        }
    }
}

template <class T = float>
NetGraph<T> build_3d2d(const ArchConfig& config, const Extent& extent, const BuildOptions& options = {});

/// Builds the network described by `config` for inputs of spatial extent `extent`.
/// Dispatches to build_3d2d when config.variant is 3d2d. Parameters are zero until initialize().
template <class T = float>
NetGraph<T> build(const ArchConfig& config, const Extent& extent, const BuildOptions& options = {}) {
    require_valid(config, extent);
    if (config.variant == Variant::three_d_two_d) return build_3d2d<T>(config, extent, options);

    NetGraph<T> g;
    g.config = config;
    g.input_extent = extent;
    g.options = options;
    detail::GraphBuilder<T> b(g);
    const std::size_t n = config.n_dims, m = config.target_dims, l = config.depth;

    std::vector<std::size_t> enc(l + 1);
    std::size_t cur = b.input(1, extent);
    for (std::size_t i = 1; i <= l; ++i) {
        const std::string pre = "enc" + std::to_string(i);
        if (i > 1) cur = b.conv(cur, config.level_channels(i), 2, 2, Padding::valid, true, "down" + std::to_string(i));
        cur = b.level_blocks(cur, config.level_channels(i), config.level_blocks(i), pre);
        enc[i] = cur;
        detail::check_annotation(g.layers[cur].extent, encoder_shape(config, extent, i), pre);
    }

    std::vector<std::size_t> up_stride(n);
    for (std::size_t d = 0; d < n; ++d) up_stride[d] = d < m ? 2 : 1;
    for (std::size_t j = l - 1; j >= 1; --j) {
        const std::string pre = "dec" + std::to_string(j);
        const std::size_t up = b.tconv(cur, config.level_channels(j), up_stride, pre + ".up");
        const auto kernel = skip_kernel(config, j);
        std::size_t skip = enc[j];
        if (std::any_of(kernel.begin(), kernel.end(), [](std::size_t k) { return k != 1; }))
            skip = b.avg_pool(enc[j], kernel, pre + ".skip");
        detail::check_annotation(g.layers[skip].extent, decoder_shape(config, extent, j), pre + ".skip");
        cur = b.concat(up, skip, pre + ".cat");
        cur = b.level_blocks(cur, config.level_channels(j), config.level_blocks(j), pre);
        detail::check_annotation(g.layers[cur].extent, decoder_shape(config, extent, j), pre);
    }

    if (m < n) {
        std::vector<std::size_t> axes;
        for (std::size_t d = m; d < n; ++d) axes.push_back(d);
        cur = b.gap(cur, axes, "head.gap");
    }
    cur = b.conv(cur, 1, 1, 1, Padding::valid, true, "head");
    cur = b.pointwise(cur, LayerKind::sigmoid, "head.sigmoid");
    b.output(cur);
    return g;
}

template <class T>
NetGraph<T> build_3d2d(const ArchConfig& config, const Extent& extent, const BuildOptions& options) {
    require_valid(config, extent);
    if (config.target_dims == config.n_dims)
        throw ShapeError("3d2d variant needs at least one reducible dimension (M < N)");

    NetGraph<T> g;
    g.config = config;
    g.config.variant = Variant::three_d_two_d;
    g.input_extent = extent;
    g.options = options;
    detail::GraphBuilder<T> b(g);
    const std::size_t n = config.n_dims, m = config.target_dims, l = config.depth;
    std::vector<std::size_t> reducible;
    for (std::size_t d = m; d < n; ++d) reducible.push_back(d);

    std::vector<std::size_t> enc(l + 1);
    std::size_t cur = b.input(1, extent);
    for (std::size_t i = 1; i <= l; ++i) {
        const std::string pre = "enc" + std::to_string(i);
        if (i > 1) cur = b.conv(cur, config.level_channels(i), 2, 2, Padding::valid, true, "down" + std::to_string(i));
        cur = b.level_blocks(cur, config.level_channels(i), config.level_blocks(i), pre);
        enc[i] = cur;
    }

    cur = b.gap(cur, reducible, "bottleneck.gap");
    const std::vector<std::size_t> up_stride(m, 2);
    for (std::size_t j = l - 1; j >= 1; --j) {
        const std::string pre = "dec" + std::to_string(j);
        const std::size_t up = b.tconv(cur, config.level_channels(j), up_stride, pre + ".up");
        const std::size_t skip = b.gap(enc[j], reducible, pre + ".skip");
        cur = b.concat(up, skip, pre + ".cat");
        cur = b.level_blocks(cur, config.level_channels(j), config.level_blocks(j), pre);
        const auto full = encoder_shape(config, extent, j);
        detail::check_annotation(g.layers[cur].extent, Extent(full.begin(), full.begin() + m), pre);
    }
    cur = b.conv(cur, 1, 1, 1, Padding::valid, true, "head");
    cur = b.pointwise(cur, LayerKind::sigmoid, "head.sigmoid");
    b.output(cur);
    return g;
}

/// Same architecture and shared parameter tensors, compiled for another input extent.
template <class T>
NetGraph<T> rebind(const NetGraph<T>& graph, const Extent& extent) {
    NetGraph<T> g = build<T>(graph.config, extent, graph.options);
    for (std::size_t i = 0; i < g.params.size(); ++i) g.params[i].value = graph.params[i].value;
    return g;
}

/// Runs the network on x: [B, 1, n_1..n_N]. Returns probabilities of shape [B, n_1..n_M]
/// ([B] when M = 0). Every intermediate tensor is checked against its annotated extent.
template <class T>
Tensor<T> forward(const NetGraph<T>& graph, const Tensor<T>& x) {
    Shape want{x.rank() > 0 ? x.dim(0) : 0, 1};
    want.insert(want.end(), graph.input_extent.begin(), graph.input_extent.end());
    if (x.shape() != want || want[0] == 0)
        throw ShapeError("forward: input shape " + shape_string(x.shape()) + " does not match graph input " +
                         shape_string(want));
    const std::size_t batch = x.dim(0);
    std::vector<Tensor<T>> v(graph.layers.size());
    const auto opt = [&](const std::string& name) { return name.empty() ? Tensor<T>{} : graph.param(name); };

    for (std::size_t i = 0; i < graph.layers.size(); ++i) {
        const auto& l = graph.layers[i];
        const auto& in = [&](std::size_t k) -> const Tensor<T>& { return v[l.inputs[k]]; };
        switch (l.kind) {
            case LayerKind::input: v[i] = x; break;
            case LayerKind::conv:
                v[i] = conv(in(0), graph.param(l.weight), opt(l.bias), ConvOptions{l.stride, l.padding, l.pad_mode});
                break;
            case LayerKind::transposed_conv:
                v[i] = transposed_conv(in(0), graph.param(l.weight), opt(l.bias), l.stride);
                break;
            case LayerKind::avg_pool: v[i] = avg_pool(in(0), l.kernel, l.stride); break;
            case LayerKind::global_avg_pool: {
                std::vector<std::size_t> axes;
                for (std::size_t a : l.reduce_axes) axes.push_back(a + 2);
                v[i] = global_avg_pool(in(0), axes);
                break;
            }
            case LayerKind::instance_norm:
                v[i] = instance_norm(in(0), graph.param(l.gamma), graph.param(l.beta), graph.options.norm_eps);
                break;
            case LayerKind::relu: v[i] = relu(in(0)); break;
            case LayerKind::sigmoid: v[i] = sigmoid(in(0)); break;
            case LayerKind::add: v[i] = add(in(0), in(1)); break;
            case LayerKind::concat: v[i] = concat(in(0), in(1)); break;
            case LayerKind::output: {
                Shape s{batch};
                s.insert(s.end(), l.extent.begin(), l.extent.end());
                v[i] = reshape(in(0), s);
                break;
            }
        }
        Shape expect{batch};
        if (l.kind != LayerKind::output) expect.push_back(l.channels);
        expect.insert(expect.end(), l.extent.begin(), l.extent.end());
        if (v[i].shape() != expect)
            throw ShapeError("forward: node '" + l.name + "' produced " + shape_string(v[i].shape()) + ", annotated " +
                             shape_string(expect));
    }
    return v.back();
}

template <class T>
std::size_t count_params(const NetGraph<T>& graph) {
    std::size_t n = 0;
    for (const auto& p : graph.params) n += p.value.size();
    return n;
}

template <class T>
ReceptiveField receptive_field(const NetGraph<T>& graph) {
    return receptive_field(std::span<const LayerSpec>(graph.layers), graph.output_node());
}

/// One row per node with extents, kernels, strides and the receptive field of the node's
/// centre element, followed by parameter count and output receptive field.
template <class T>
std::string summary(const NetGraph<T>& graph) {
    std::ostringstream os;
    const auto& c = graph.config;
    os << "architecture: N=" << c.n_dims << " M=" << c.target_dims << " l=" << c.depth << " C={";
    for (std::size_t i = 0; i < c.channels.size(); ++i) os << (i ? "," : "") << c.channels[i];
    os << "} B={";
    for (std::size_t i = 0; i < c.blocks.size(); ++i) os << (i ? "," : "") << c.blocks[i];
    os << "} variant=" << to_string(c.variant) << "\n";
    os << "input: " << format_extent(graph.input_extent) << "\n";

    char line[512];
    std::snprintf(line, sizeof line, "%-4s %-22s %-8s %5s %-16s %-8s %-8s %s\n", "#", "name", "op", "ch", "extent",
                  "kernel", "stride", "rf");
    os << line;
    const std::span<const LayerSpec> layers(graph.layers);
    for (std::size_t i = 0; i < graph.layers.size(); ++i) {
        const auto& l = graph.layers[i];
        const auto rf = receptive_field(layers, i);
        std::snprintf(line, sizeof line, "%-4zu %-22s %-8s %5s %-16s %-8s %-8s %s\n", i, l.name.c_str(),
                      to_string(l.kind), l.channels ? std::to_string(l.channels).c_str() : "-", format_extent(l.extent, "x").c_str(),
                      l.kernel.empty() ? "-" : format_extent(l.kernel, "x").c_str(),
                      l.stride.empty() ? "-" : format_extent(l.stride, "x").c_str(),
                      format_extent(rf.theoretical, "x").c_str());
        os << line;
    }
    const auto rf = receptive_field(graph);
    os << "parameters: " << count_params(graph) << "\n";
    os << "output: " << format_extent(graph.output_extent()) << "\n";
    os << "receptive field (output centre): " << format_extent(rf.theoretical, " x ") << " theoretical, "
       << format_extent(rf.extent, " x ") << " inside the input";
    for (std::size_t d = 0; d < rf.global.size(); ++d)
        if (rf.global[d]) os << "; dim " << d + 1 << " global";
    os << "\n";
    return os.str();
}

// ---------------------------------------------------------------------------
// Checkpoints: one ArchConfig line, then (u32 LE name length, UTF-8 name, NDT1 record)
// per parameter in graph order.

inline std::string serialize_arch(const ArchConfig& c) {
    std::ostringstream os;
    os << "n_dims=" << c.n_dims << " target_dims=" << c.target_dims << " depth=" << c.depth
       << " base_channels=" << c.base_channels << " blocks=";
    for (std::size_t i = 0; i < c.blocks.size(); ++i) os << (i ? "," : "") << c.blocks[i];
    os << " variant=" << to_string(c.variant);
    return os.str();
}

inline ArchConfig parse_arch_line(const std::string& line) {
    std::istringstream is(line);
    std::string tok;
    std::map<std::string, std::string> kv;
    while (is >> tok) {
        const auto eq = tok.find('=');
        if (eq == std::string::npos) throw ConfigError("checkpoint arch line: malformed token '" + tok + "'");
        kv[tok.substr(0, eq)] = tok.substr(eq + 1);
    }
    try {
        std::vector<std::size_t> blocks;
        std::istringstream bs(kv.at("blocks"));
        for (std::string b; std::getline(bs, b, ',');) blocks.push_back(std::stoul(b));
        return ArchConfig::make(std::stoul(kv.at("n_dims")), std::stoul(kv.at("target_dims")), std::stoul(kv.at("depth")),
                                std::stoul(kv.at("base_channels")), blocks, parse_variant(kv.at("variant")));
    } catch (const std::out_of_range&) {
        throw ConfigError("checkpoint arch line: missing key in '" + line + "'");
    } catch (const std::invalid_argument&) {
        throw ConfigError("checkpoint arch line: bad number in '" + line + "'");
    }
}

template <class T>
void write_checkpoint(std::ostream& os, const NetGraph<T>& graph) {
    os << serialize_arch(graph.config) << "\n";
    for (const auto& p : graph.params) {
        io::detail::put_u32(os, static_cast<std::uint32_t>(p.name.size()));
        os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
        io::write_ndt(os, p.value);
    }
    if (!os) throw IoError("checkpoint: write failed");
}

struct Checkpoint {
    ArchConfig config;
    std::vector<std::pair<std::string, Tensor<float>>> params;
};

inline Checkpoint read_checkpoint(std::istream& is) {
    Checkpoint ck;
    std::string line;
    if (!std::getline(is, line)) throw IoError("checkpoint: missing arch line");
    ck.config = parse_arch_line(line);
    while (is.peek() != std::char_traits<char>::eof()) {
        const auto len = static_cast<std::size_t>(io::detail::get_le(is, 4));
        if (len > 4096) throw IoError("checkpoint: implausible name length");
        std::string name(len, '\0');
        if (!is.read(name.data(), static_cast<std::streamsize>(len))) throw IoError("checkpoint: truncated name");
        ck.params.emplace_back(std::move(name), io::read_ndt<float>(is));
    }
    return ck;
}

template <class T>
void save_checkpoint(const std::filesystem::path& path, const NetGraph<T>& graph) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open " + path.string() + " for writing");
    write_checkpoint(os, graph);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path.string());
    return read_checkpoint(is);
}

/// Copies checkpoint values into the graph; names, order and shapes must match exactly.
template <class T>
void load_parameters(NetGraph<T>& graph, const Checkpoint& ck) {
    if (!(ck.config == graph.config))
        throw ConfigError("checkpoint architecture '" + serialize_arch(ck.config) + "' does not match '" +
                          serialize_arch(graph.config) + "'");
    if (ck.params.size() != graph.params.size()) throw ConfigError("checkpoint parameter count mismatch");
    for (std::size_t i = 0; i < ck.params.size(); ++i) {
        auto& p = graph.params[i];
        const auto& [name, value] = ck.params[i];
        if (name != p.name || value.shape() != p.value.shape())
            throw ConfigError("checkpoint parameter '" + name + "' does not match '" + p.name + "'");
        auto dst = p.value.mutable_data();
        for (std::size_t k = 0; k < dst.size(); ++k) dst[k] = static_cast<T>(value[k]);
    }
}

} // namespace projnet
