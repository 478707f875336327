#pragma once

// Command implementations behind the `projnet` executable. Each returns a process exit
// code: 0 success, 1 configuration/validation/IO error, 2 numeric failure.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "projnet/config.hpp"
#include "projnet/error.hpp"
#include "projnet/metrics.hpp"
#include "projnet/netbuild.hpp"
#include "projnet/shapes.hpp"
#include "projnet/synthdata.hpp"
#include "projnet/train.hpp"

namespace projnet::cli {

struct Options {
    std::string arch;       // arch config file
    std::string config;     // data / train / eval config file
    std::string data;       // dataset directory
    std::string out;        // output directory
    std::string checkpoint; // checkpoint file (eval)
    std::string extent;     // input extent (validate)
    std::string tile;       // inference tile over target dims (eval)
    std::string spacing;    // HD95 spacing override (eval)
    std::string report_a, report_b;
    std::optional<std::uint64_t> seed;
    std::size_t count = 8;
    bool masks = false;
};

namespace detail {

inline void require_option(const std::string& value, const char* flag) {
    if (value.empty()) throw ConfigError(std::string("missing required option ") + flag);
}

inline void require_file(const std::string& path, const char* what) {
    if (!std::filesystem::is_regular_file(path)) throw ConfigError(std::string(what) + " '" + path + "' does not exist");
}

inline void require_dir(const std::string& path, const char* what) {
    if (!std::filesystem::is_directory(path)) throw ConfigError(std::string(what) + " '" + path + "' is not a directory");
}

/// Weight initialization seed, decorrelated from the patch-sampling stream.
inline std::uint64_t init_seed(std::uint64_t seed) { return SplitMix64(seed ^ 0x5EEDull).next(); }

inline std::string checkpoint_name(std::size_t iter) {
    std::ostringstream os;
    os << "checkpoint_" << std::setw(6) << std::setfill('0') << iter << ".ckpt";
    return os.str();
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open " + path.string() + " for writing");
    os << text;
    if (!os) throw IoError("write failed: " + path.string());
}

} // namespace detail

/// Maps exceptions to exit codes and prints the diagnostic.
template <class F>
int guarded(std::ostream& err, F&& body) {
    try {
        return body();
    } catch (const ValidationFailed& e) {
        for (const auto& v : e.errors()) err << "error: " << describe(v) << "\n";
        return 1;
    } catch (const NumericError& e) {
        err << "numeric failure: " << e.what() << "\n";
        return 2;
    } catch (const Error& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::filesystem::filesystem_error& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
}

/// Per-level shape table, parameter count and receptive field.
inline int cmd_validate(const Options& opt, std::ostream& out, std::ostream& err) {
    return guarded(err, [&] {
        detail::require_option(opt.arch, "--arch");
        detail::require_option(opt.extent, "--extent");
        detail::require_file(opt.arch, "arch config");
        const ArchConfig cfg = arch_from_config(KeyValueFile::load(opt.arch));
        const Extent extent = parse_extent(opt.extent);
        require_valid(cfg, extent);
        if (cfg.variant == Variant::three_d_two_d && cfg.target_dims == cfg.n_dims)
            throw ConfigError("variant 3d2d requires at least one reducible dimension (M < N)");

        const auto graph = build<float>(cfg, extent);
        for (std::size_t j = 1; j <= cfg.depth; ++j)
            out << "encoder L" << j << ": " << format_extent(encoder_shape(cfg, extent, j)) << "\n";
        for (std::size_t j = 1; j <= cfg.depth; ++j) {
            if (cfg.variant == Variant::proposed) {
                out << "decoder L" << j << ": " << format_extent(decoder_shape(cfg, extent, j))
                    << ", skip k=" << format_extent(skip_kernel(cfg, j)) << "\n";
            } else {
                Extent dec = encoder_shape(cfg, extent, j);
                dec.resize(cfg.target_dims);
                out << "decoder L" << j << ": " << format_extent(dec) << ", skip GAP over reducible dims\n";
            }
        }
        out << summary(graph);
        return 0;
    });
}

inline int cmd_gen(const Options& opt, std::ostream& out, std::ostream& err) {
    return guarded(err, [&] {
        detail::require_option(opt.config, "--config");
        detail::require_option(opt.out, "--out");
        detail::require_file(opt.config, "data config");
        GenSpec spec = gen_spec_from_config(KeyValueFile::load(opt.config));
        if (opt.seed) spec.seed = *opt.seed;
        if (opt.count == 0) throw ConfigError("--count must be >= 1");
        const auto samples = generate_dataset(spec, opt.count);
        write_dataset(opt.out, samples);
        out << "wrote " << samples.size() << " samples (" << format_extent(spec.extent, "x") << ", "
            << to_string(spec.kind) << ") to " << opt.out << "\n";
        return 0;
    });
}

inline int cmd_train(const Options& opt, std::ostream& out, std::ostream& err) {
    return guarded(err, [&] {
        detail::require_option(opt.arch, "--arch");
        detail::require_option(opt.config, "--config");
        detail::require_option(opt.data, "--data");
        detail::require_option(opt.out, "--out");
        detail::require_file(opt.arch, "arch config");
        detail::require_file(opt.config, "train config");
        detail::require_dir(opt.data, "data directory");
        const ArchConfig arch = arch_from_config(KeyValueFile::load(opt.arch));
        TrainConfig tc = train_config_from_config(KeyValueFile::load(opt.config));
        if (opt.seed) tc.seed = *opt.seed;

        auto dataset = read_dataset(opt.data);
        preprocess(dataset);
        auto graph = build<float>(arch, tc.patch);
        initialize(graph, detail::init_seed(tc.seed));

        const std::filesystem::path dir(opt.out);
        std::filesystem::create_directories(dir);
        TrainHooks<float> hooks;
        hooks.on_checkpoint = [&](std::size_t iter, const NetGraph<float>& g) {
            save_checkpoint(dir / detail::checkpoint_name(iter), g);
        };
        const auto curve = train(graph, dataset, tc, hooks);
        save_checkpoint(dir / "final.ckpt", graph);
        std::ostringstream csv;
        write_loss_csv(csv, curve);
        detail::write_text(dir / "loss.csv", csv.str());
        out << "trained " << curve.size() << " iterations";
        if (!curve.empty()) out << ", final loss " << format_double(curve.back().loss);
        out << "; outputs in " << opt.out << "\n";
        return 0;
    });
}

inline int cmd_eval(const Options& opt, std::ostream& out, std::ostream& err) {
    return guarded(err, [&] {
        EvalConfig ec;
        if (!opt.config.empty()) {
            detail::require_file(opt.config, "eval config");
            ec = eval_config_from_config(KeyValueFile::load(opt.config));
        }
        if (!opt.checkpoint.empty()) ec.checkpoint = opt.checkpoint;
        if (!opt.data.empty()) ec.data = opt.data;
        if (!opt.spacing.empty()) ec.spacing = KeyValueFile::parse_string("spacing = " + opt.spacing, "--spacing").get_double_list("spacing");
        if (!opt.tile.empty()) ec.tile = parse_extent(opt.tile);
        detail::require_option(ec.checkpoint, "--checkpoint");
        detail::require_option(ec.data, "--data");
        detail::require_option(opt.out, "--out");
        detail::require_file(ec.checkpoint, "checkpoint");
        detail::require_dir(ec.data, "data directory");

        const Checkpoint ck = load_checkpoint(ec.checkpoint);
        if (!opt.arch.empty()) {
            detail::require_file(opt.arch, "arch config");
            if (!(arch_from_config(KeyValueFile::load(opt.arch)) == ck.config))
                throw ConfigError("arch config does not match the checkpoint architecture (" + serialize_arch(ck.config) + ")");
        }
        auto dataset = read_dataset(ec.data);
        preprocess(dataset);
        const auto& first = dataset.front().volume.shape();
        Extent tile = ec.tile;
        if (tile.empty()) tile.assign(first.begin(), first.begin() + static_cast<std::ptrdiff_t>(ck.config.target_dims));
        Extent in_ext(first);
        for (std::size_t d = 0; d < tile.size() && d < in_ext.size(); ++d) in_ext[d] = std::min(tile[d], in_ext[d]);
        auto graph = build<float>(ck.config, in_ext);
        load_parameters(graph, ck);
        if (!ec.spacing.empty() && ec.spacing.size() != ck.config.target_dims)
            throw ConfigError("spacing needs one value per target dimension");

        std::vector<Tensor<float>> probs;
        const auto rep = evaluate(graph, dataset, tile, ec.spacing, &probs);
        const std::filesystem::path dir(opt.out);
        std::filesystem::create_directories(dir);
        std::ostringstream csv;
        write_report_csv(csv, rep);
        detail::write_text(dir / "report.csv", csv.str());
        detail::write_text(dir / "summary.txt", report_summary(rep));
        if (opt.masks) {
            for (std::size_t i = 0; i < dataset.size(); ++i) {
                const auto pred = threshold(probs[i]);
                io::write_pgm(dir / (dataset[i].id + ".pred.pgm"), mask_image(pred));
                io::write_ppm(dir / (dataset[i].id + ".overlay.ppm"), pred.extent[0], pred.extent[1],
                              overlay_colors(pred, threshold(dataset[i].mask)));
            }
        }
        out << report_summary(rep);
        return 0;
    });
}

inline int cmd_compare(const Options& opt, std::ostream& out, std::ostream& err) {
    return guarded(err, [&] {
        detail::require_option(opt.report_a, "--a");
        detail::require_option(opt.report_b, "--b");
        const auto a = load_report_csv(opt.report_a);
        const auto b = load_report_csv(opt.report_b);
        const auto c = compare_reports(a, b, opt.report_b);
        out << "samples: " << a.samples.size() << "\n";
        out << "mean dice: " << format_double(a.mean_dice) << " vs " << format_double(b.mean_dice) << "\n";
        out << "mean hd95_mm: " << format_double(a.mean_hd95) << " vs " << format_double(b.mean_hd95) << "\n";
        out << "p(dice) = " << format_double(c.p_dice) << " " << significance_stars(c.p_dice) << "\n";
        out << "p(hd95) = " << format_double(c.p_hd95) << " " << significance_stars(c.p_hd95) << "\n";
        return 0;
    });
}

inline int run(const std::string& command, const Options& opt, std::ostream& out, std::ostream& err) {
    if (command == "validate") return cmd_validate(opt, out, err);
    if (command == "gen") return cmd_gen(opt, out, err);
    if (command == "train") return cmd_train(opt, out, err);
    if (command == "eval") return cmd_eval(opt, out, err);
    if (command == "compare") return cmd_compare(opt, out, err);
    err << "error: unknown command '" << command << "'\n";
    return 1;
}

} // namespace projnet::cli
