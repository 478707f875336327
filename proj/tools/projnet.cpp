// projnet <command> [options]
//
// Commands: validate, gen, train, eval, compare.

#include <iostream>

#include <CLI11.hpp>

#include "projnet/cli.hpp"

int main(int argc, char** argv) {
    CLI::App app{"ND to MD segmentation toolkit"};
    app.require_subcommand(1);
    projnet::cli::Options opt;
    std::uint64_t seed = 0;

    auto* validate = app.add_subcommand("validate", "print per-level shapes, skip kernels, parameters and receptive field");
    validate->add_option("--arch", opt.arch, "architecture config")->required();
    validate->add_option("--extent", opt.extent, "input extent, e.g. 64x128x256")->required();

    auto* gen = app.add_subcommand("gen", "generate a synthetic dataset");
    gen->add_option("--config", opt.config, "data config")->required();
    gen->add_option("--out", opt.out, "output directory")->required();
    gen->add_option("--count", opt.count, "number of samples");

    auto* train = app.add_subcommand("train", "train a network");
    train->add_option("--arch", opt.arch, "architecture config")->required();
    train->add_option("--config", opt.config, "training config")->required();
    train->add_option("--data", opt.data, "dataset directory")->required();
    train->add_option("--out", opt.out, "output directory")->required();

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
    eval->add_option("--arch", opt.arch, "architecture config checked against the checkpoint");
    eval->add_option("--config", opt.config, "eval config (checkpoint, data, spacing, tile)");
    eval->add_option("--checkpoint", opt.checkpoint, "checkpoint file");
    eval->add_option("--data", opt.data, "dataset directory");
    eval->add_option("--out", opt.out, "output directory")->required();
    eval->add_option("--tile", opt.tile, "inference tile over target dims, e.g. 16x16");
    eval->add_option("--spacing", opt.spacing, "mm per pixel over target dims, e.g. 0.1,0.01");
    eval->add_flag("--masks", opt.masks, "write predicted masks (PGM) and overlays (PPM)");

    auto* compare = app.add_subcommand("compare", "paired Wilcoxon tests between two reports");
    compare->add_option("--a", opt.report_a, "first report.csv")->required();
    compare->add_option("--b", opt.report_b, "second report.csv")->required();

    for (auto* sub : {gen, train})
        sub->add_option("--seed", seed, "override the config seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }
    for (auto* sub : {gen, train})
        if (sub->parsed() && sub->count("--seed")) opt.seed = seed;

    return projnet::cli::run(app.get_subcommands().front()->get_name(), opt, std::cout, std::cerr);
}
