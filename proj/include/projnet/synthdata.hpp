#pragma once

// Synthetic 3D -> 2D segmentation samples.
//
// Volume axes: (n_1, n_2, n_3) with n_3 the depth (A-scan) axis; dimension 1 indexes the
// cross-sectional slices (B-scans). The en-face mask covers (n_1, n_2).
//
//  - blob kind: every depth column under a mask pixel is brightened by `contrast` from the
//    membrane index floor(0.6 * n_3) downwards (hypertransmission stand-in).
//  - vessel-tree kind: the column is darkened by `contrast` from the shallow index
//    floor(0.25 * n_3) downwards (shadow stand-in).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "projnet/error.hpp"
#include "projnet/io.hpp"
#include "projnet/ops.hpp"
#include "projnet/shapes.hpp"
#include "projnet/rng.hpp"
#include "projnet/tensor.hpp"

namespace projnet {

enum class LesionKind { blob, vessel_tree };

inline LesionKind parse_lesion_kind(const std::string& s) {
    if (s == "blob") return LesionKind::blob;
    if (s == "vessel-tree") return LesionKind::vessel_tree;
    throw ConfigError("unknown lesion kind '" + s + "' (expected blob|vessel-tree)");
}

inline std::string to_string(LesionKind k) { return k == LesionKind::blob ? "blob" : "vessel-tree"; }

struct GenSpec {
    std::vector<std::size_t> extent{32, 32, 16};
    LesionKind kind = LesionKind::blob;
    std::size_t count_min = 1;
    std::size_t count_max = 3;
    double contrast = 0.3; // delta
    double noise = 0.05;   // sigma
    std::uint64_t seed = 0;
    std::vector<double> spacing{0.119105, 0.005671, 0.00387}; // mm per voxel

    void validate() const {
        if (extent.size() != 3) throw ConfigError("GenSpec: extent must have 3 entries");
        if (extent[0] < 2 || extent[1] < 2 || extent[2] < 4)
            throw ConfigError("GenSpec: degenerate extent (need n_1, n_2 >= 2 and n_3 >= 4)");
        if (count_min > count_max) throw ConfigError("GenSpec: count_min > count_max");
        if (!(contrast > 0.0 && contrast <= 1.0)) throw ConfigError("GenSpec: contrast must lie in (0, 1]");
        if (!(noise >= 0.0)) throw ConfigError("GenSpec: noise must be >= 0");
        if (!(contrast > 2.0 * noise)) throw ConfigError("GenSpec: contrast must exceed 2 * noise");
        if (spacing.size() != 3 || std::any_of(spacing.begin(), spacing.end(), [](double s) { return !(s > 0); }))
            throw ConfigError("GenSpec: spacing must be 3 positive values");
    }
};

struct SegSample {
    std::string id;
    Tensor<float> volume; // (n_1, n_2, n_3)
    Tensor<float> mask;   // (n_1, n_2), values in {0, 1}
    std::vector<double> spacing;
    std::uint64_t seed = 0;
};

inline std::size_t membrane_index(std::size_t depth) { return static_cast<std::size_t>(0.6 * static_cast<double>(depth)); }
inline std::size_t shadow_index(std::size_t depth) { return static_cast<std::size_t>(0.25 * static_cast<double>(depth)); }

/// Noise-free background intensity at each depth index: a bright retina band plus a thin
/// membrane reflection, constant across en-face positions.
inline std::vector<double> background_profile(std::size_t depth) {
    std::vector<double> p(depth);
    for (std::size_t z = 0; z < depth; ++z) {
        const double t = static_cast<double>(z) / static_cast<double>(depth - 1);
        const double band = (t - 0.35) / 0.15, membrane = (t - 0.6) / 0.05;
        p[z] = 0.2 + 0.4 * std::exp(-band * band) + 0.2 * std::exp(-membrane * membrane);
    }
    return p;
}

namespace detail {

inline void stamp(std::vector<float>& mask, std::size_t rows, std::size_t cols, double y, double x, int width) {
    const int lo = -(width - 1) / 2, hi = width / 2;
    const auto cy = static_cast<long>(std::floor(y)), cx = static_cast<long>(std::floor(x));
    for (int dy = lo; dy <= hi; ++dy)
        for (int dx = lo; dx <= hi; ++dx) {
            const long r = cy + dy, c = cx + dx;
            if (r >= 0 && c >= 0 && r < static_cast<long>(rows) && c < static_cast<long>(cols))
                mask[static_cast<std::size_t>(r) * cols + static_cast<std::size_t>(c)] = 1.0f;
        }
}

inline void draw_ellipses(std::vector<float>& mask, std::size_t rows, std::size_t cols, std::size_t count, SplitMix64& rng) {
    const double base = static_cast<double>(std::min(rows, cols));
    const double rmin = std::max(1.5, 0.08 * base), rmax = std::max(rmin, 0.25 * base);
    for (std::size_t e = 0; e < count; ++e) {
        const double cy = rng.uniform() * static_cast<double>(rows);
        const double cx = rng.uniform() * static_cast<double>(cols);
        const double ry = rng.uniform(rmin, rmax), rx = rng.uniform(rmin, rmax);
        const double th = rng.uniform() * std::numbers::pi;
        const double cs = std::cos(th), sn = std::sin(th);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) {
                const double dy = static_cast<double>(r) + 0.5 - cy, dx = static_cast<double>(c) + 0.5 - cx;
                const double u = (cs * dy + sn * dx) / ry, v = (-sn * dy + cs * dx) / rx;
                if (u * u + v * v <= 1.0) mask[r * cols + c] = 1.0f;
            }
    }
}

// Random-walk polylines entering from the left edge, with occasional side branches.
inline void draw_vessels(std::vector<float>& mask, std::size_t rows, std::size_t cols, std::size_t count, SplitMix64& rng) {
    struct Walker {
        double y, x, heading;
        int width;
        std::size_t steps;
    };
    const double len = static_cast<double>(cols);
    for (std::size_t v = 0; v < count; ++v) {
        std::vector<Walker> todo;
        todo.push_back({rng.uniform() * static_cast<double>(rows), 0.0, rng.uniform(-0.4, 0.4),
                        1 + static_cast<int>(rng.uniform_int(3)), static_cast<std::size_t>(len * rng.uniform(0.6, 1.2))});
        std::size_t branches = 0;
        while (!todo.empty()) {
            Walker w = todo.back();
            todo.pop_back();
            for (std::size_t s = 0; s < w.steps; ++s) {
                stamp(mask, rows, cols, w.y, w.x, w.width);
                w.heading += 0.2 * rng.normal();
                w.y += std::sin(w.heading);
                w.x += std::cos(w.heading);
                if (w.y < 0 || w.x < 0 || w.y >= static_cast<double>(rows) || w.x >= static_cast<double>(cols)) break;
                if (branches < 3 && rng.uniform() < 0.03) {
                    ++branches;
                    const double turn = rng.uniform(0.5, 1.0) * (rng.uniform() < 0.5 ? -1.0 : 1.0);
                    todo.push_back({w.y, w.x, w.heading + turn, std::max(1, w.width - 1), (w.steps - s) / 2});
                }
            }
        }
    }
}

} // namespace detail

/// Deterministic in `spec` (including its seed).
inline SegSample generate(const GenSpec& spec) {
    spec.validate();
    const std::size_t n1 = spec.extent[0], n2 = spec.extent[1], n3 = spec.extent[2];
    SplitMix64 rng(spec.seed);

    std::vector<float> mask(n1 * n2, 0.0f);
    const std::size_t count = spec.count_min + rng.uniform_int(spec.count_max - spec.count_min + 1);
    if (spec.kind == LesionKind::blob)
        detail::draw_ellipses(mask, n1, n2, count, rng);
    else
        detail::draw_vessels(mask, n1, n2, count, rng);

    const auto profile = background_profile(n3);
    const std::size_t from = spec.kind == LesionKind::blob ? membrane_index(n3) : shadow_index(n3);
    const double delta = spec.kind == LesionKind::blob ? spec.contrast : -spec.contrast;
    std::vector<float> vol(n1 * n2 * n3);
    for (std::size_t i = 0; i < n1; ++i)
        for (std::size_t j = 0; j < n2; ++j) {
            const bool lesion = mask[i * n2 + j] > 0.5f;
            float* col = vol.data() + (i * n2 + j) * n3;
            for (std::size_t z = 0; z < n3; ++z) {
                double v = profile[z];
                if (lesion && z >= from) v += delta;
                if (spec.noise > 0) v += spec.noise * rng.normal();
                col[z] = static_cast<float>(v);
            }
        }

    SegSample s;
    s.volume = Tensor<float>({n1, n2, n3}, std::move(vol));
    s.mask = Tensor<float>({n1, n2}, std::move(mask));
    s.spacing = spec.spacing;
    s.seed = spec.seed;
    return s;
}

/// Per cross-sectional slice (fixed index along dimension 1): subtract the mean and divide
/// by the population standard deviation (+1e-8).
inline Tensor<float> zscore_bscan(const Tensor<float>& volume) {
    if (volume.rank() < 2) throw ShapeError("zscore_bscan: need at least 2 dimensions");
    const std::size_t slices = volume.dim(0), s = volume.size() / slices;
    std::vector<float> out(volume.size());
    const auto in = volume.data();
    for (std::size_t k = 0; k < slices; ++k) {
        const float* p = in.data() + k * s;
        double mean = 0;
        for (std::size_t i = 0; i < s; ++i) mean += p[i];
        mean /= static_cast<double>(s);
        double var = 0;
        for (std::size_t i = 0; i < s; ++i) var += (p[i] - mean) * (p[i] - mean);
        const double sd = std::sqrt(var / static_cast<double>(s)) + 1e-8;
        for (std::size_t i = 0; i < s; ++i) out[k * s + i] = static_cast<float>((p[i] - mean) / sd);
    }
    return Tensor<float>(volume.shape(), std::move(out));
}

/// Mean projection over the listed (0-based) dimensions; no gradient tracking.
inline Tensor<float> mean_project(const Tensor<float>& volume, const std::vector<std::size_t>& dims) {
    return global_avg_pool(volume.detach(), dims).detach();
}

/// Uniformly random corner; target dims (1, 2) of volume and mask share offsets.
inline SegSample crop_patch(const SegSample& sample, const std::vector<std::size_t>& patch, SplitMix64& rng) {
    const auto& ext = sample.volume.shape();
    if (patch.size() != ext.size()) throw ShapeError("crop_patch: patch rank mismatch");
    std::vector<std::size_t> off(ext.size());
    for (std::size_t d = 0; d < ext.size(); ++d) {
        if (patch[d] == 0 || patch[d] > ext[d])
            throw ShapeError("crop_patch: patch " + format_extent(patch, "x") + " larger than volume " + format_extent(ext, "x"));
        off[d] = rng.uniform_int(ext[d] - patch[d] + 1);
    }
    const std::size_t n2 = ext[1], n3 = ext[2];
    std::vector<float> vol(numel(patch)), mask(patch[0] * patch[1]);
    const auto vd = sample.volume.data();
    const auto md = sample.mask.data();
    for (std::size_t i = 0; i < patch[0]; ++i)
        for (std::size_t j = 0; j < patch[1]; ++j) {
            const std::size_t si = i + off[0], sj = j + off[1];
            mask[i * patch[1] + j] = md[si * n2 + sj];
            std::copy_n(vd.begin() + static_cast<std::ptrdiff_t>((si * n2 + sj) * n3 + off[2]), patch[2],
                        vol.begin() + static_cast<std::ptrdiff_t>((i * patch[1] + j) * patch[2]));
        }
    SegSample out;
    out.id = sample.id;
    out.volume = Tensor<float>(Shape(patch.begin(), patch.end()), std::move(vol));
    out.mask = Tensor<float>({patch[0], patch[1]}, std::move(mask));
    out.spacing = sample.spacing;
    out.seed = sample.seed;
    return out;
}

/// Per-sample seeds derived from a base seed by a SplitMix64 stream.
inline std::vector<SegSample> generate_dataset(GenSpec spec, std::size_t count) {
    SplitMix64 seeds(spec.seed);
    std::vector<SegSample> out;
    for (std::size_t i = 0; i < count; ++i) {
        spec.seed = seeds.next();
        SegSample s = generate(spec);
        std::ostringstream id;
        id << "s" << std::setw(4) << std::setfill('0') << i;
        s.id = id.str();
        out.push_back(std::move(s));
    }
    return out;
}

// ---------------------------------------------------------------------------
// On-disk layout: <id>.vol.ndt, <id>.mask.pgm and manifest.txt ("id seed s1 s2 s3" lines).

inline std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

inline void write_dataset(const std::filesystem::path& dir, const std::vector<SegSample>& samples) {
    std::filesystem::create_directories(dir);
    std::ofstream manifest(dir / "manifest.txt");
    if (!manifest) throw IoError("cannot write manifest in " + dir.string());
    manifest << "# id seed spacing_mm_1 spacing_mm_2 spacing_mm_3\n";
    for (const auto& s : samples) {
        io::save_ndt(dir / (s.id + ".vol.ndt"), s.volume);
        io::GreyImage img{s.mask.dim(0), s.mask.dim(1), {}};
        for (float v : s.mask.data()) img.pixels.push_back(v > 0.5f ? 255 : 0);
        io::write_pgm(dir / (s.id + ".mask.pgm"), img);
        manifest << s.id << " " << s.seed;
        for (double sp : s.spacing) manifest << " " << format_double(sp);
        manifest << "\n";
    }
}

inline std::vector<SegSample> read_dataset(const std::filesystem::path& dir) {
    std::ifstream manifest(dir / "manifest.txt");
    if (!manifest) throw IoError("no manifest.txt in " + dir.string());
    std::vector<SegSample> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(manifest, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        std::istringstream is(line);
        SegSample s;
        s.spacing.resize(3);
        if (!(is >> s.id >> s.seed >> s.spacing[0] >> s.spacing[1] >> s.spacing[2]))
            throw IoError("manifest line " + std::to_string(lineno) + ": expected 'id seed s1 s2 s3'");
        s.volume = io::load_ndt<float>(dir / (s.id + ".vol.ndt"));
        const auto img = io::read_pgm(dir / (s.id + ".mask.pgm"));
        std::vector<float> m(img.pixels.size());
        for (std::size_t i = 0; i < m.size(); ++i) m[i] = img.pixels[i] >= 128 ? 1.0f : 0.0f;
        s.mask = Tensor<float>({img.rows, img.cols}, std::move(m));
        if (s.volume.rank() != 3 || s.volume.dim(0) != img.rows || s.volume.dim(1) != img.cols)
            throw IoError("sample " + s.id + ": mask extent does not match volume");
        out.push_back(std::move(s));
    }
    if (out.empty()) throw IoError("dataset in " + dir.string() + " is empty");
    return out;
}

/// z-score every volume in place of the raw intensities.
inline void preprocess(std::vector<SegSample>& samples) {
    for (auto& s : samples) s.volume = zscore_bscan(s.volume);
}

} // namespace projnet
