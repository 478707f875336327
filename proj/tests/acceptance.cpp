// Acceptance runner: one [PASS]/[FAIL] line per criterion, exit status 1 if any fails.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>

#include "projnet/cli.hpp"
#include "support.hpp"

using namespace projnet;

namespace {

struct Outcome {
    bool pass = true;
    std::string detail;

    void require(bool ok, const std::string& what) {
        if (!ok && pass) {
            pass = false;
            detail = what;
        }
    }
};

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

bool all_ones(const std::vector<std::size_t>& k) {
    return std::all_of(k.begin(), k.end(), [](std::size_t v) { return v == 1; });
}

const LayerSpec* find_node(const NetGraph<float>& g, const std::string& name) {
    for (const auto& l : g.layers)
        if (l.name == name) return &l;
    return nullptr;
}

Tensor<float> random_input(const Extent& extent, std::size_t batch, SplitMix64& rng) {
    Shape s{batch, 1};
    s.insert(s.end(), extent.begin(), extent.end());
    return support::random_tensor<float>(s, rng);
}

Outcome shape_calculus() {
    Outcome o;
    SplitMix64 rng(2024);
    for (int trial = 0; trial < 200 && o.pass; ++trial) {
        const auto [cfg, ext] = support::random_config(rng, 4, 4, 2, 2);
        const std::string tag = serialize_arch(cfg) + " on " + format_extent(ext, "x");
        o.require(validate(cfg, ext).empty(), "generator produced invalid config " + tag);
        for (std::size_t j = 1; j <= cfg.depth; ++j) {
            const auto enc = encoder_shape(cfg, ext, j), dec = decoder_shape(cfg, ext, j);
            const auto k = skip_kernel(cfg, j);
            for (std::size_t d = 0; d < cfg.n_dims; ++d)
                o.require(enc[d] % k[d] == 0 && enc[d] / k[d] == dec[d], "shape identity broken at level " +
                                                                             std::to_string(j) + " for " + tag);
        }
        auto g = build<float>(cfg, ext);
        initialize(g, static_cast<std::uint64_t>(trial));
        // forward() compares every runtime tensor with its node annotation.
        const auto y = forward(g, random_input(ext, 1, rng));
        Shape want{1};
        want.insert(want.end(), ext.begin(), ext.begin() + static_cast<std::ptrdiff_t>(cfg.target_dims));
        o.require(y.shape() == want, "output shape mismatch for " + tag);
    }
    if (o.pass) o.detail = "200 configs, identity and runtime extents exact";
    return o;
}

Outcome reference_shapes() {
    Outcome o;
    const auto cfg = ArchConfig::make(3, 2, 3, 2, {1, 1, 1});
    const Extent ext{64, 128, 256};
    o.require(cfg.channels == std::vector<std::size_t>{2, 4, 8}, "channels differ from {2,4,8}");
    const std::vector<std::vector<std::size_t>> kernels{{1, 1, 4}, {1, 1, 2}, {1, 1, 1}};
    for (std::size_t j = 1; j <= 3; ++j)
        o.require(skip_kernel(cfg, j) == kernels[j - 1], "skip kernel level " + std::to_string(j));
    auto g = build<float>(cfg, ext);
    initialize(g, 1);
    o.require(find_node(g, "dec1.skip") && find_node(g, "dec1.skip")->kernel == kernels[0], "dec1.skip node kernel");
    o.require(find_node(g, "dec2.skip") && find_node(g, "dec2.skip")->kernel == kernels[1], "dec2.skip node kernel");
    SplitMix64 rng(3);
    const auto y = forward(g, random_input(ext, 1, rng));
    o.require(y.shape() == Shape{1, 64, 128}, "runtime output " + shape_string(y.shape()));
    if (o.pass) o.detail = "output 64x128, skip kernels (1,1,4) (1,1,2) (1,1,1)";
    return o;
}

Outcome degeneracy() {
    Outcome o;
    const auto full = build<float>(ArchConfig::make(3, 3, 3, 2), {8, 8, 16});
    for (const auto& l : full.layers) {
        o.require(l.kind != LayerKind::global_avg_pool, "M=N graph contains GAP node " + l.name);
        o.require(l.kind != LayerKind::avg_pool || all_ones(l.kernel), "M=N graph has non-unit skip " + l.name);
    }
    for (std::size_t j = 1; j <= 3; ++j) o.require(all_ones(skip_kernel(full.config, j)), "M=N skip kernel not unit");
    auto scalar = build<float>(ArchConfig::make(3, 0, 2, 2), {4, 4, 4});
    initialize(scalar, 2);
    SplitMix64 rng(4);
    const auto y = forward(scalar, random_input({4, 4, 4}, 3, rng));
    o.require(y.shape() == Shape{3}, "M=0 output " + shape_string(y.shape()));
    if (o.pass) o.detail = "M=N: no GAP, unit skips; M=0: output [3] for batch 3";
    return o;
}

Outcome gradient_check() {
    Outcome o;
    const auto cfg = ArchConfig::make(3, 2, 2, 4);
    const Extent ext{8, 8, 8};
    SplitMix64 rng(41);
    const auto x64 = support::random_tensor<double>({2, 1, 8, 8, 8}, rng);
    std::vector<double> t(128);
    for (auto& v : t) v = rng.uniform() < 0.4 ? 1.0 : 0.0;
    const Tensor<double> target64({2, 8, 8}, t);

    auto g64 = build<double>(cfg, ext);
    initialize(g64, 42);
    const auto r64 = support::check_parameter_gradients(
        g64, [&] { return batch_dice_loss(forward(g64, x64), target64); }, 100, 1e-6, 1e-8, rng);

    // Single precision: the float32 backward against central differences of the same
    // parameter values evaluated in float64 (float32 differences cannot resolve the loss).
    auto g32 = build<float>(cfg, ext);
    initialize(g32, 42);
    const Tensor<float> x32(x64.shape(), std::vector<float>(x64.data().begin(), x64.data().end()));
    const Tensor<float> target32({2, 8, 8}, std::vector<float>(t.begin(), t.end()));
    for (std::size_t i = 0; i < g32.params.size(); ++i) {
        auto dst = g64.params[i].value.mutable_data();
        const auto src = g32.params[i].value.data();
        std::copy(src.begin(), src.end(), dst.begin());
    }
    auto p32 = parameters(g32);
    batch_dice_loss(forward(g32, x32), target32).backward();
    const Tensor<double> x64f(x32.shape(), std::vector<double>(x32.data().begin(), x32.data().end()));
    auto p64 = parameters(g64);
    std::size_t total = 0;
    for (const auto& p : p64) total += p.size();
    double worst32 = 0;
    std::string where;
    for (int s = 0; s < 100; ++s) {
        std::size_t flat = rng.uniform_int(total), k = 0;
        while (flat >= p64[k].size()) flat -= p64[k++].size();
        auto d = p64[k].mutable_data();
        const double saved = d[flat], h = 1e-6;
        NoGradGuard guard;
        d[flat] = saved + h;
        const double up = batch_dice_loss(forward(g64, x64f), target64).item();
        d[flat] = saved - h;
        const double down = batch_dice_loss(forward(g64, x64f), target64).item();
        d[flat] = saved;
        const double analytic = p32[k].has_grad() ? p32[k].grad()[flat] : 0.0;
        const double err = support::relative_error(analytic, (up - down) / (2 * h), 1e-8);
        if (err > worst32) {
            worst32 = err;
            where = g32.params[k].name;
        }
    }
    o.require(worst32 <= 1e-2, "float32 max rel " + fmt("%.3g", worst32) + " at " + where);
    o.require(r64.max_rel <= 1e-5, "float64 max rel " + fmt("%.3g", r64.max_rel) + " at " + r64.worst);
    o.detail = "100 params; float32 max rel " + fmt("%.2e", worst32) + " (<= 1e-2), float64 max rel " +
               fmt("%.2e", r64.max_rel) + " (<= 1e-5)";
    return o;
}

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

Outcome overfit() {
    Outcome o;
    GenSpec spec;
    spec.extent = {32, 32, 16};
    spec.noise = 0.0;
    spec.seed = 7;
    auto ds = generate_dataset(spec, 8);
    preprocess(ds);
    TrainConfig tc;
    tc.iterations = 2000;
    tc.batch_size = 4;
    tc.patch = {16, 16, 16};
    tc.lr = 1e-3;
    tc.decay_iteration = 1999;
    tc.seed = 1;
    std::ostringstream detail;
    for (const auto variant : {Variant::proposed, Variant::three_d_two_d}) {
        const bool ablation = variant == Variant::three_d_two_d;
        auto g = build<float>(ArchConfig::make(3, 2, 3, 8, {}, variant), tc.patch);
        initialize(g, cli::detail::init_seed(tc.seed));
        const auto t0 = std::chrono::steady_clock::now();
        const auto curve = train(g, ds, tc);
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        const auto rep = evaluate(g, ds, {16, 16});
        std::vector<double> early, late;
        for (const auto& r : curve) {
            if (r.iter <= 500) early.push_back(r.loss);
            if (r.iter >= 1500) late.push_back(r.loss);
        }
        const double need = ablation ? 0.80 : 0.95;
        const std::string name = ablation ? "3d2d" : "proposed";
        o.require(rep.mean_dice >= need, name + " mean dice " + fmt("%.4f", rep.mean_dice) + " < " + fmt("%.2f", need));
        o.require(median(late) < median(early), name + " late median loss not below early median");
        detail << (ablation ? "; " : "") << name << " dice " << fmt("%.4f", rep.mean_dice) << " (>= " << fmt("%.2f", need)
               << "), median loss " << fmt("%.3g", median(early)) << " -> " << fmt("%.3g", median(late)) << ", "
               << fmt("%.0f", secs) << " s";
    }
    if (o.pass) o.detail = detail.str();
    return o;
}

Outcome metric_oracles() {
    Outcome o;
    SplitMix64 rng(606);
    double worst = 0;
    for (int t = 0; t < 100; ++t) {
        const std::size_t rows = 1 + rng.uniform_int(32), cols = 1 + rng.uniform_int(32);
        const auto a = support::random_mask(rows, cols, rng), b = support::random_mask(rows, cols, rng);
        const std::vector<double> sp{rng.uniform(0.01, 1.0), rng.uniform(0.01, 1.0)};
        o.require(dice(a, b) == support::brute_dice(a, b), "dice differs from brute force");
        worst = std::max(worst, std::abs(hd95(a, b, sp) - support::brute_hd95(a, b, sp)));
    }
    o.require(worst <= 1e-9, "hd95 deviates by " + fmt("%.3g", worst) + " mm");
    std::size_t cases = 0;
    for (std::size_t n = 5; n <= 10; ++n)
        for (int t = 0; t < 50; ++t) {
            std::vector<double> a(n), b(n);
            for (std::size_t i = 0; i < n; ++i) {
                a[i] = static_cast<double>(rng.uniform_int(9));
                b[i] = static_cast<double>(rng.uniform_int(9));
            }
            std::size_t nonzero = 0;
            for (std::size_t i = 0; i < n; ++i) nonzero += a[i] != b[i];
            if (nonzero < 5) continue;
            const auto r = wilcoxon_signed_rank(a, b);
            o.require(r.exact && std::abs(r.p_value - support::brute_wilcoxon(a, b)) <= 1e-12,
                      "wilcoxon differs from enumeration at n=" + std::to_string(n));
            ++cases;
        }
    bool rejected = false;
    try {
        wilcoxon_signed_rank({1, 2, 3, 4}, {0, 0, 0, 0});
    } catch (const ConfigError&) {
        rejected = true;
    }
    o.require(rejected, "wilcoxon accepted fewer than 5 non-zero pairs");
    if (o.pass)
        o.detail = "100 mask pairs, hd95 max dev " + fmt("%.1e", worst) + " mm; " + std::to_string(cases) +
                   " Wilcoxon cases with 5..10 non-zero pairs, n < 5 rejected";
    return o;
}

Outcome receptive_fields() {
    Outcome o;
    SplitMix64 rng(707);
    for (int trial = 0; trial < 10; ++trial) {
        const auto [cfg, ext] = support::random_config(rng, 3, 3, 2, 2);
        const auto g = build<double>(cfg, ext);
        const auto rf = receptive_field(g);
        std::vector<std::size_t> centre;
        for (std::size_t e : g.output_extent()) centre.push_back(e / 2);
        const auto box = support::gradient_support(cfg, ext, centre, 900 + static_cast<std::uint64_t>(trial));
        for (std::size_t d = 0; d < cfg.n_dims; ++d)
            o.require(rf.lo[d] == box[d].first && rf.hi[d] == box[d].second,
                      "RF mismatch in dim " + std::to_string(d + 1) + " for " + serialize_arch(cfg));
    }
    const auto ga = build<float>(ArchConfig::make(3, 2, 4, 32, {1, 1, 1, 1}), {64, 256, 64});
    const auto unet = build<float>(ArchConfig::make(3, 3, 4, 32, {1, 1, 1, 1}), {64, 256, 64});
    const auto rga = receptive_field(ga), run = receptive_field(unet);
    const std::string s = summary(ga);
    const auto line = s.substr(s.find("receptive field (output centre)"));
    std::cout << "  GA l=4 summary: " << line;
    std::cout << "  3D U-Net l=4 theoretical RF: " << format_extent(run.theoretical, " x ") << "\n";
    o.require(std::vector<std::size_t>(rga.theoretical.begin(), rga.theoretical.begin() + 2) ==
                  std::vector<std::size_t>(run.theoretical.begin(), run.theoretical.begin() + 2),
              "GA target-dim RF differs from the 3D U-Net of equal depth");
    if (o.pass)
        o.detail = "10 configs exact; GA l=4 RF " + format_extent(rga.theoretical, "x") + " (target dims match 3D U-Net " +
                   format_extent(run.theoretical, "x") + ")";
    return o;
}

Outcome schedules() {
    Outcome o;
    const auto ga = TrainConfig::ga(), v = TrainConfig::vessels();
    o.require(lr_at(0, ga) == 1e-3 && lr_at(19999, ga) == 1e-3, "GA lr before 2e4");
    o.require(lr_at(20000, ga) == 1e-4 && lr_at(29999, ga) == 1e-4, "GA lr after 2e4");
    o.require(lr_at(0, v) == 1e-3 && lr_at(5999, v) == 1e-3, "vessel lr before 6e3");
    o.require(lr_at(6000, v) == 1e-4 && lr_at(9999, v) == 1e-4, "vessel lr after 6e3");
    if (o.pass) o.detail = "GA 1e-3 -> 1e-4 at 20000, vessels at 6000";
    return o;
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream is(p, std::ios::binary);
    if (!is) throw IoError("missing " + p.string());
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

Outcome determinism() {
    Outcome o;
    const auto root = std::filesystem::temp_directory_path() / "projnet_acceptance_determinism";
    std::filesystem::remove_all(root);
    std::filesystem::create_directories(root);
    const auto write = [&](const std::string& name, const std::string& text) {
        std::ofstream(root / name) << text;
        return (root / name).string();
    };
    const auto data_cfg = write("data.cfg", "extent = 32x32x16\nkind = blob\ncontrast = 0.3\nnoise = 0.05\nseed = 11\n");
    const auto arch_cfg = write("arch.cfg", "n_dims = 3\ntarget_dims = 2\ndepth = 3\nbase_channels = 8\n");
    const auto train_cfg = write("train.cfg",
                                 "iterations = 200\nbatch_size = 4\npatch = 16x16x16\nlr = 1e-3\nweight_decay = 1e-5\n"
                                 "decay_iteration = 150\ndecay_factor = 10\nseed = 5\ncheckpoint_every = 0\n");
    std::ostringstream sink;
    for (const std::string run : {"a", "b"}) {
        const auto dir = root / run;
        cli::Options g;
        g.config = data_cfg;
        g.out = (dir / "data").string();
        o.require(cli::run("gen", g, sink, std::cerr) == 0, "gen failed");
        cli::Options t;
        t.arch = arch_cfg;
        t.config = train_cfg;
        t.data = g.out;
        t.out = (dir / "train").string();
        o.require(cli::run("train", t, sink, std::cerr) == 0, "train failed");
        cli::Options e;
        e.checkpoint = (dir / "train" / "final.ckpt").string();
        e.data = g.out;
        e.out = (dir / "eval").string();
        o.require(cli::run("eval", e, sink, std::cerr) == 0, "eval failed");
    }
    if (o.pass) {
        for (const char* f : {"train/loss.csv", "train/final.ckpt", "eval/report.csv", "eval/summary.txt"})
            o.require(slurp(root / "a" / f) == slurp(root / "b" / f), std::string(f) + " differs between runs");
    }
    if (o.pass) o.detail = "loss.csv, final.ckpt, report.csv and summary.txt byte-identical across two runs";
    std::filesystem::remove_all(root);
    return o;
}

} // namespace

int main() {
    const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
        {"shape calculus on random configs", shape_calculus},
        {"reference configuration shapes", reference_shapes},
        {"degenerate target dimensions", degeneracy},
        {"gradient check", gradient_check},
        {"overfit smoke test", overfit},
        {"metric oracles", metric_oracles},
        {"receptive field oracle", receptive_fields},
        {"learning-rate schedule", schedules},
        {"end-to-end determinism", determinism},
    };
    int failures = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        Outcome o;
        const auto t0 = std::chrono::steady_clock::now();
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o.pass = false;
            o.detail = std::string("exception: ") + e.what();
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::cout << (o.pass ? "[PASS] " : "[FAIL] ") << i + 1 << ". " << criteria[i].first << ": " << o.detail << " ("
                  << fmt("%.1f", secs) << " s)" << std::endl;
        failures += o.pass ? 0 : 1;
    }
    return failures == 0 ? 0 : 1;
}
