#include <gtest/gtest.h>

#include <sstream>

#include "support.hpp"

using namespace projnet;

namespace {

const LayerSpec& node(const NetGraph<float>& g, const std::string& name) {
    for (const auto& l : g.layers)
        if (l.name == name) return l;
    throw std::runtime_error("no node " + name);
}

std::size_t count_kind(const NetGraph<float>& g, LayerKind kind) {
    return static_cast<std::size_t>(
        std::count_if(g.layers.begin(), g.layers.end(), [&](const LayerSpec& l) { return l.kind == kind; }));
}

Tensor<float> random_input(const NetGraph<float>& g, std::size_t batch, SplitMix64& rng) {
    Shape s{batch, 1};
    s.insert(s.end(), g.input_extent.begin(), g.input_extent.end());
    return support::random_tensor<float>(s, rng);
}

} // namespace

TEST(Build, ReferenceAnnotations) {
    const auto cfg = ArchConfig::make(3, 2, 3, 2, {1, 1, 1});
    const auto g = build<float>(cfg, {64, 128, 256});
    EXPECT_EQ(g.output_extent(), (Extent{64, 128}));
    EXPECT_EQ(node(g, "dec1.block1.out").extent, (Extent{64, 128, 64}));
    EXPECT_EQ(node(g, "dec1.skip").kernel, (std::vector<std::size_t>{1, 1, 4}));
    EXPECT_EQ(node(g, "dec2.skip").kernel, (std::vector<std::size_t>{1, 1, 2}));
    EXPECT_EQ(node(g, "head.gap").reduce_axes, (std::vector<std::size_t>{2}));
    EXPECT_EQ(node(g, "head").channels, 1u);
    EXPECT_EQ(node(g, "dec2.up").stride, (std::vector<std::size_t>{2, 2, 1}));
    // Decoder features first, pooled encoder features second.
    EXPECT_EQ(g.layers[node(g, "dec1.cat").inputs[0]].name, "dec1.up");
}

TEST(Build, SkipNodesUseSkipKernelsOnRandomConfigs) {
    SplitMix64 rng(4);
    for (int trial = 0; trial < 100; ++trial) {
        const auto [cfg, ext] = support::random_config(rng);
        const auto g = build<float>(cfg, ext);
        for (std::size_t j = 1; j < cfg.depth; ++j) {
            const auto& cat = node(g, "dec" + std::to_string(j) + ".cat");
            const auto& skip = g.layers[cat.inputs[1]];
            const auto k = skip_kernel(cfg, j);
            if (skip.kind == LayerKind::avg_pool) {
                EXPECT_EQ(skip.kernel, k);
            } else {
                EXPECT_TRUE(std::all_of(k.begin(), k.end(), [](std::size_t v) { return v == 1; }));
                EXPECT_EQ(skip.name, "enc" + std::to_string(j) + ".block" + std::to_string(cfg.blocks[j - 1]) + ".out");
            }
            EXPECT_EQ(skip.extent, decoder_shape(cfg, ext, j));
        }
    }
}

TEST(Build, FullDimensionalTargetIsPlainUNet) {
    const auto g = build<float>(ArchConfig::make(3, 3, 3, 2), {8, 8, 16});
    EXPECT_EQ(count_kind(g, LayerKind::global_avg_pool), 0u);
    EXPECT_EQ(count_kind(g, LayerKind::avg_pool), 0u);
    EXPECT_EQ(g.output_extent(), (Extent{8, 8, 16}));
}

TEST(Build, GaConfigurationBuilds) {
    const auto cfg = ArchConfig::make(3, 2, 4, 32, {1, 1, 1, 1});
    EXPECT_EQ(cfg.channels, (std::vector<std::size_t>{32, 64, 128, 256}));
    const auto g = build<float>(cfg, {64, 256, 64});
    EXPECT_EQ(g.output_extent(), (Extent{64, 256}));
    EXPECT_EQ(node(g, "dec1.skip").kernel, (std::vector<std::size_t>{1, 1, 8}));
}

TEST(Build, PropagatesValidationErrors) {
    EXPECT_THROW(build<float>(ArchConfig::make(3, 2, 4, 2), {60, 128, 256}), ValidationFailed);
}

TEST(Build3d2d, DecoderIsTargetDimensional) {
    const auto cfg = ArchConfig::make(3, 2, 3, 2, {1, 1, 1}, Variant::three_d_two_d);
    const auto g = build<float>(cfg, {64, 128, 256});
    EXPECT_EQ(node(g, "dec1.block1.out").extent, (Extent{64, 128}));
    const auto& skip = node(g, "dec1.skip");
    EXPECT_EQ(skip.kind, LayerKind::global_avg_pool);
    EXPECT_EQ(g.layers[skip.inputs[0]].extent[2], 256u);
    EXPECT_EQ(skip.extent, (Extent{64, 128}));
    EXPECT_EQ(node(g, "bottleneck.gap").extent, (Extent{16, 32}));
    EXPECT_EQ(g.output_extent(), (Extent{64, 128}));

    const auto proposed = build<float>(ArchConfig::make(3, 2, 3, 2, {1, 1, 1}), {64, 128, 256});
    EXPECT_LT(count_params(g), count_params(proposed));
}

TEST(Build3d2d, RequiresReducibleDimension) {
    EXPECT_THROW(build<float>(ArchConfig::make(2, 2, 2, 2, {}, Variant::three_d_two_d), {8, 8}), ShapeError);
}

TEST(Forward, OutputRangeAndShape) {
    SplitMix64 rng(1);
    auto g = build<float>(ArchConfig::make(3, 2, 2, 2), {8, 8, 4});
    initialize(g, 3);
    const auto y = forward(g, random_input(g, 2, rng));
    EXPECT_EQ(y.shape(), (Shape{2, 8, 8}));
    for (float v : y.data()) {
        EXPECT_GT(v, 0.0f);
        EXPECT_LT(v, 1.0f);
    }
    EXPECT_THROW(forward(g, Tensor<float>({2, 1, 8, 8, 8})), ShapeError);
}

TEST(Forward, ZeroWeightsGiveOneHalf) {
    SplitMix64 rng(2);
    auto g = build<float>(ArchConfig::make(3, 2, 2, 2), {8, 8, 4});
    const auto y = forward(g, random_input(g, 1, rng));
    for (float v : y.data()) EXPECT_EQ(v, 0.5f);
}

TEST(Forward, NoTargetDimsGivesScalarPerSample) {
    SplitMix64 rng(3);
    auto g = build<float>(ArchConfig::make(3, 0, 2, 2), {4, 4, 4});
    initialize(g, 1);
    const auto y = forward(g, random_input(g, 3, rng));
    EXPECT_EQ(y.shape(), (Shape{3}));
}

TEST(Forward, OutputExtentOnRandomConfigs) {
    SplitMix64 rng(17);
    for (int trial = 0; trial < 40; ++trial) {
        const auto [cfg, ext] = support::random_config(rng, 4, 3, 2, 2);
        auto g = build<float>(cfg, ext);
        initialize(g, trial);
        const auto y = forward(g, random_input(g, 1, rng));
        Shape want{1};
        want.insert(want.end(), ext.begin(), ext.begin() + static_cast<std::ptrdiff_t>(cfg.target_dims));
        EXPECT_EQ(y.shape(), want) << serialize_arch(cfg);
    }
}

TEST(Forward, PeriodicShiftEquivariance) {
    for (const auto variant : {Variant::proposed, Variant::three_d_two_d}) {
        BuildOptions opt;
        opt.pad_mode = PadMode::circular;
        const auto cfg = ArchConfig::make(3, 2, 2, 2, {1, 1}, variant);
        auto g = build<double>(cfg, {8, 8, 4}, opt);
        initialize(g, 5);
        SplitMix64 rng(6);
        const auto x = support::random_tensor<double>({1, 1, 8, 8, 4}, rng);
        const std::size_t shift = 2; // 2^(l-1)
        std::vector<double> shifted(x.size());
        for (std::size_t i = 0; i < 8; ++i)
            for (std::size_t r = 0; r < 32; ++r) shifted[((i + shift) % 8) * 32 + r] = x[i * 32 + r];
        const auto y = forward(g, x);
        const auto ys = forward(g, Tensor<double>(x.shape(), shifted));
        for (std::size_t i = 0; i < 8; ++i)
            for (std::size_t j = 0; j < 8; ++j)
                EXPECT_NEAR(ys[((i + shift) % 8) * 8 + j], y[i * 8 + j], 1e-12);
    }
}

TEST(Gradients, EveryParameterReceivesGradient) {
    for (const auto variant : {Variant::proposed, Variant::three_d_two_d}) {
        SplitMix64 rng(9);
        auto g = build<float>(ArchConfig::make(3, 2, 3, 2, {1, 2, 1}, variant), {8, 8, 8});
        initialize(g, 11);
        const auto y = forward(g, random_input(g, 2, rng));
        const auto target = support::random_tensor<float>(y.shape(), rng, 0, 1);
        std::vector<float> t(target.size());
        for (std::size_t i = 0; i < t.size(); ++i) t[i] = target[i] > 0.5f ? 1.0f : 0.0f;
        batch_dice_loss(y, Tensor<float>(y.shape(), t)).backward();
        for (const auto& p : g.params) {
            ASSERT_TRUE(p.value.has_grad()) << p.name;
            const auto gr = p.value.grad();
            EXPECT_TRUE(std::any_of(gr.begin(), gr.end(), [](float v) { return v != 0.0f; })) << p.name;
        }
    }
}

TEST(Gradients, FullNetworkMatchesFiniteDifferencesDouble) {
    auto g = build<double>(ArchConfig::make(3, 2, 2, 2), {8, 8, 8});
    initialize(g, 21);
    SplitMix64 rng(22);
    const auto x = support::random_tensor<double>({2, 1, 8, 8, 8}, rng);
    std::vector<double> t(128);
    for (auto& v : t) v = rng.uniform() < 0.4 ? 1.0 : 0.0;
    const Tensor<double> target({2, 8, 8}, t);
    const auto res = support::check_parameter_gradients(
        g, [&] { return batch_dice_loss(forward(g, x), target); }, 40, 1e-6, 1e-8, rng);
    EXPECT_LE(res.max_rel, 1e-5) << res.worst;
}

TEST(Params, ClosedFormCountForSingleLevel) {
    for (std::size_t c : {1u, 3u, 8u}) {
        const auto g = build<float>(ArchConfig::make(3, 2, 1, c), {4, 4, 4});
        // conv1 (1->c), conv2 (c->c), two norms, projection 1->c with bias when c > 1, head c->1 with bias.
        const std::size_t block = 27 * c + 27 * c * c + 4 * c + (c == 1 ? 0 : 2 * c);
        EXPECT_EQ(count_params(g), block + c + 1);
    }
}

TEST(Params, CountIndependentOfExtent) {
    const auto cfg = ArchConfig::make(3, 2, 3, 4);
    EXPECT_EQ(count_params(build<float>(cfg, {8, 8, 8})), count_params(build<float>(cfg, {16, 32, 64})));
}

TEST(Params, InitializationIsDeterministicAndScaled) {
    auto a = build<float>(ArchConfig::make(3, 2, 2, 4), {8, 8, 8});
    auto b = build<float>(ArchConfig::make(3, 2, 2, 4), {8, 8, 8});
    initialize(a, 42);
    initialize(b, 42);
    for (std::size_t i = 0; i < a.params.size(); ++i) {
        const auto da = a.params[i].value.data(), db = b.params[i].value.data();
        EXPECT_TRUE(std::equal(da.begin(), da.end(), db.begin()));
    }
    for (float v : a.param("enc1.block1.norm1.gamma").data()) EXPECT_EQ(v, 1.0f);
    for (float v : a.param("head.bias").data()) EXPECT_EQ(v, 0.0f);
    const auto w = a.param("enc2.block1.conv1.weight").data();
    double var = 0;
    for (float v : w) var += static_cast<double>(v) * v;
    var /= static_cast<double>(w.size());
    EXPECT_NEAR(var, 2.0 / (8 * 27), 0.3 * 2.0 / (8 * 27));
}

TEST(Summary, ListsNodesAndTotals) {
    const auto g = build<float>(ArchConfig::make(3, 2, 3, 2, {1, 1, 1}), {64, 128, 256});
    const auto s = summary(g);
    EXPECT_NE(s.find("dec1.skip"), std::string::npos);
    EXPECT_NE(s.find("1x1x4"), std::string::npos);
    EXPECT_NE(s.find("parameters: " + std::to_string(count_params(g))), std::string::npos);
    EXPECT_NE(s.find("output: 64×128"), std::string::npos);
    EXPECT_NE(s.find("receptive field"), std::string::npos);
    EXPECT_EQ(s, summary(g));
}

TEST(Checkpoint, RoundTripAndMismatch) {
    auto g = build<float>(ArchConfig::make(3, 2, 2, 2, {1, 2}), {8, 8, 8});
    initialize(g, 7);
    std::stringstream ss;
    write_checkpoint(ss, g);
    const auto ck = read_checkpoint(ss);
    EXPECT_EQ(ck.config, g.config);
    auto h = build<float>(ck.config, {16, 16, 8});
    load_parameters(h, ck);
    for (std::size_t i = 0; i < g.params.size(); ++i) {
        const auto a = g.params[i].value.data(), b = h.params[i].value.data();
        EXPECT_TRUE(std::equal(a.begin(), a.end(), b.begin())) << g.params[i].name;
    }
    auto other = build<float>(ArchConfig::make(3, 2, 2, 4), {8, 8, 8});
    EXPECT_THROW(load_parameters(other, ck), ConfigError);
}

TEST(Checkpoint, ArchLineRoundTrip) {
    const auto cfg = ArchConfig::make(4, 1, 3, 5, {2, 1, 3}, Variant::three_d_two_d);
    EXPECT_EQ(parse_arch_line(serialize_arch(cfg)), cfg);
    EXPECT_THROW(parse_arch_line("n_dims=3"), Error);
}

TEST(Rebind, SharesParameters) {
    auto g = build<float>(ArchConfig::make(3, 2, 2, 2), {8, 8, 8});
    initialize(g, 1);
    auto h = rebind(g, {16, 8, 8});
    EXPECT_EQ(h.input_extent, (Extent{16, 8, 8}));
    g.params[0].value.mutable_data()[0] = 123.0f;
    EXPECT_EQ(h.params[0].value[0], 123.0f);
}
