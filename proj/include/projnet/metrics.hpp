#pragma once

// Segmentation metrics (Dice, pooled boundary HD95), the paired Wilcoxon signed-rank
// test, tiled whole-volume inference and report I/O.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <istream>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "projnet/error.hpp"
#include "projnet/io.hpp"
#include "projnet/netbuild.hpp"
#include "projnet/shapes.hpp"
#include "projnet/synthdata.hpp"
#include "projnet/tensor.hpp"

namespace projnet {

struct BinaryMask {
    Extent extent;
    std::vector<std::uint8_t> data; // row-major, 0 or 1

    BinaryMask() = default;
    explicit BinaryMask(Extent e) : extent(std::move(e)), data(numel(extent), 0) {}

    std::size_t count() const { return static_cast<std::size_t>(std::count(data.begin(), data.end(), 1)); }
    bool empty() const { return count() == 0; }
};

/// Foreground where value > threshold; a value equal to the threshold is background.
template <class T>
BinaryMask threshold(const Tensor<T>& t, double thr = 0.5) {
    BinaryMask m(t.shape());
    for (std::size_t i = 0; i < t.size(); ++i) m.data[i] = static_cast<double>(t[i]) > thr ? 1 : 0;
    return m;
}

namespace detail {
inline void check_extents(const BinaryMask& a, const BinaryMask& b, const char* op) {
    if (a.extent != b.extent)
        throw ShapeError(std::string(op) + ": extent mismatch " + format_extent(a.extent, "x") + " vs " +
                         format_extent(b.extent, "x"));
}
} // namespace detail

/// 2|A n B| / (|A| + |B|); 1 when both masks are empty.
inline double dice(const BinaryMask& a, const BinaryMask& b) {
    detail::check_extents(a, b, "dice");
    std::size_t inter = 0, sa = 0, sb = 0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        inter += a.data[i] & b.data[i];
        sa += a.data[i];
        sb += b.data[i];
    }
    if (sa + sb == 0) return 1.0;
    return 2.0 * static_cast<double>(inter) / static_cast<double>(sa + sb);
}

/// Foreground elements with a face neighbour that is background or outside the image.
inline BinaryMask boundary(const BinaryMask& m) {
    BinaryMask out(m.extent);
    const std::size_t rank = m.extent.size();
    std::vector<std::size_t> stride(rank, 1);
    for (std::size_t d = rank; d-- > 1;) stride[d - 1] = stride[d] * m.extent[d];
    for (std::size_t i = 0; i < m.data.size(); ++i) {
        if (!m.data[i]) continue;
        bool edge = false;
        for (std::size_t d = 0; d < rank && !edge; ++d) {
            const std::size_t c = (i / stride[d]) % m.extent[d];
            edge = c == 0 || c + 1 == m.extent[d] || !m.data[i - stride[d]] || !m.data[i + stride[d]];
        }
        out.data[i] = edge ? 1 : 0;
    }
    return out;
}

namespace detail {

/// Lower envelope of parabolas along one line; positions are index * s.
inline void distance_1d(std::vector<double>& f, std::size_t n, double s, std::vector<std::size_t>& v,
                        std::vector<double>& z, std::vector<double>& out) {
    constexpr double inf = std::numeric_limits<double>::infinity();
    long k = -1;
    for (std::size_t q = 0; q < n; ++q) {
        if (f[q] == inf) continue;
        const double xq = static_cast<double>(q) * s;
        if (k < 0) {
            k = 0;
            v[0] = q;
            z[0] = -inf;
            z[1] = inf;
            continue;
        }
        while (true) {
            const double xv = static_cast<double>(v[k]) * s;
            const double sect = ((f[q] + xq * xq) - (f[v[k]] + xv * xv)) / (2.0 * (xq - xv));
            if (sect <= z[k]) {
                --k;
                continue;
            }
            ++k;
            v[k] = q;
            z[k] = sect;
            z[k + 1] = inf;
            break;
        }
    }
    if (k < 0) {
        std::fill_n(out.begin(), n, inf);
        return;
    }
    k = 0;
    for (std::size_t q = 0; q < n; ++q) {
        const double xq = static_cast<double>(q) * s;
        while (z[k + 1] < xq) ++k;
        const double dx = xq - static_cast<double>(v[k]) * s;
        out[q] = dx * dx + f[v[k]];
    }
}

} // namespace detail

/// Exact squared Euclidean distance (physical units) from every element to the nearest
/// element set in `features`; +inf everywhere when `features` is empty.
inline std::vector<double> squared_distance_transform(const BinaryMask& features, const std::vector<double>& spacing) {
    const std::size_t rank = features.extent.size();
    if (spacing.size() != rank) throw ShapeError("distance transform: spacing rank mismatch");
    constexpr double inf = std::numeric_limits<double>::infinity();
    std::vector<double> dist(features.data.size());
    for (std::size_t i = 0; i < dist.size(); ++i) dist[i] = features.data[i] ? 0.0 : inf;

    std::vector<std::size_t> stride(rank, 1);
    for (std::size_t d = rank; d-- > 1;) stride[d - 1] = stride[d] * features.extent[d];
    for (std::size_t d = 0; d < rank; ++d) {
        const std::size_t n = features.extent[d];
        std::vector<double> line(n), out(n), z(n + 1);
        std::vector<std::size_t> v(n);
        for (std::size_t base = 0; base < dist.size(); ++base) {
            if ((base / stride[d]) % n != 0) continue; // start of a line along d
            for (std::size_t q = 0; q < n; ++q) line[q] = dist[base + q * stride[d]];
            detail::distance_1d(line, n, spacing[d], v, z, out);
            for (std::size_t q = 0; q < n; ++q) dist[base + q * stride[d]] = out[q];
        }
    }
    return dist;
}

/// Distances from each boundary element of `a` to the nearest boundary element of `b`.
inline std::vector<double> directed_boundary_distances(const BinaryMask& a, const BinaryMask& b,
                                                       const std::vector<double>& spacing) {
    detail::check_extents(a, b, "directed_boundary_distances");
    const auto ba = boundary(a);
    const auto dt = squared_distance_transform(boundary(b), spacing);
    std::vector<double> out;
    for (std::size_t i = 0; i < ba.data.size(); ++i)
        if (ba.data[i]) out.push_back(std::sqrt(dt[i]));
    return out;
}

/// Linear interpolation between order statistics at rank q * (n - 1).
inline double percentile(std::vector<double> values, double q) {
    if (values.empty()) throw ShapeError("percentile of an empty set");
    std::sort(values.begin(), values.end());
    const double pos = q * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, values.size() - 1);
    return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

/// Physical length of the image diagonal: the distance reported when exactly one mask is empty.
inline double empty_mask_sentinel(const Extent& extent, const std::vector<double>& spacing) {
    double s = 0;
    for (std::size_t d = 0; d < extent.size(); ++d) {
        const double len = static_cast<double>(extent[d]) * spacing[d];
        s += len * len;
    }
    return std::sqrt(s);
}

/// 95th percentile of the pooled boundary-to-boundary distances in both directions.
inline double hd95(const BinaryMask& a, const BinaryMask& b, const std::vector<double>& spacing) {
    detail::check_extents(a, b, "hd95");
    if (spacing.size() != a.extent.size()) throw ShapeError("hd95: spacing rank mismatch");
    const bool ea = a.empty(), eb = b.empty();
    if (ea && eb) return 0.0;
    if (ea || eb) return empty_mask_sentinel(a.extent, spacing);
    auto pooled = directed_boundary_distances(a, b, spacing);
    const auto back = directed_boundary_distances(b, a, spacing);
    pooled.insert(pooled.end(), back.begin(), back.end());
    return percentile(std::move(pooled), 0.95);
}

// ---------------------------------------------------------------------------
// Wilcoxon signed-rank test

struct WilcoxonResult {
    std::size_t n = 0;    // pairs after dropping zero differences
    double w_plus = 0;    // sum of ranks of positive differences
    double p_value = 1;   // two-sided
    bool exact = false;
};

namespace detail {

/// Average ranks of |d| (1-based), doubled so tied ranks stay integral.
inline std::vector<std::size_t> doubled_ranks(const std::vector<double>& absd) {
    const std::size_t n = absd.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return absd[a] < absd[b]; });
    std::vector<std::size_t> r2(n);
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j + 1 < n && absd[order[j + 1]] == absd[order[i]]) ++j;
        for (std::size_t k = i; k <= j; ++k) r2[order[k]] = (i + 1) + (j + 1);
        i = j + 1;
    }
    return r2;
}

} // namespace detail

inline WilcoxonResult wilcoxon_signed_rank(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw ShapeError("wilcoxon: paired samples differ in length");
    std::vector<double> d;
    for (std::size_t i = 0; i < a.size(); ++i)
        if (a[i] - b[i] != 0.0) d.push_back(a[i] - b[i]);
    const std::size_t n = d.size();
    if (n < 5)
        throw ConfigError("wilcoxon: need at least 5 non-zero paired differences, got " + std::to_string(n));
    std::vector<double> absd(n);
    for (std::size_t i = 0; i < n; ++i) absd[i] = std::abs(d[i]);
    const auto r2 = detail::doubled_ranks(absd);

    std::size_t w2 = 0;
    for (std::size_t i = 0; i < n; ++i)
        if (d[i] > 0) w2 += r2[i];

    WilcoxonResult res;
    res.n = n;
    res.w_plus = static_cast<double>(w2) / 2.0;
    if (n <= 20) {
        // Null distribution of the doubled statistic over all 2^n sign patterns.
        const std::size_t total = std::accumulate(r2.begin(), r2.end(), std::size_t{0});
        std::vector<double> count(total + 1, 0.0);
        count[0] = 1;
        std::size_t reach = 0;
        for (std::size_t r : r2) {
            for (std::size_t s = reach + 1; s-- > 0;)
                if (count[s] != 0) count[s + r] += count[s];
            reach += r;
        }
        const double patterns = std::ldexp(1.0, static_cast<int>(n));
        double le = 0, ge = 0;
        for (std::size_t s = 0; s <= total; ++s) {
            if (s <= w2) le += count[s];
            if (s >= w2) ge += count[s];
        }
        res.p_value = std::min(1.0, 2.0 * std::min(le, ge) / patterns);
        res.exact = true;
    } else {
        const double nn = static_cast<double>(n);
        // Equal doubled ranks identify a tie group.
        double tie = 0;
        std::vector<std::size_t> sorted = r2;
        std::sort(sorted.begin(), sorted.end());
        for (std::size_t i = 0; i < n;) {
            std::size_t j = i;
            while (j < n && sorted[j] == sorted[i]) ++j;
            const double t = static_cast<double>(j - i);
            tie += t * t * t - t;
            i = j;
        }
        const double mean = nn * (nn + 1) / 4.0;
        const double var = nn * (nn + 1) * (2 * nn + 1) / 24.0 - tie / 48.0;
        const double z = std::max(0.0, std::abs(res.w_plus - mean) - 0.5) / std::sqrt(var);
        res.p_value = std::min(1.0, std::erfc(z / std::sqrt(2.0)));
    }
    return res;
}

/// "***" for p <= 1e-10, "**" for p <= 1e-5, "*" for p <= 0.05, else "".
inline std::string significance_stars(double p) {
    if (p <= 1e-10) return "***";
    if (p <= 1e-5) return "**";
    if (p <= 0.05) return "*";
    return "";
}

// ---------------------------------------------------------------------------
// Inference and reports

/// Whole-volume probabilities for one input volume of extent (n_1..n_N). Only target
/// dimensions are tiled: tile extent `tile` (M entries), stride tile/2, last tile flush with
/// the end; reducible dimensions are fed whole. Overlaps are averaged.
template <class T>
Tensor<float> predict_volume(const NetGraph<T>& graph, const Tensor<float>& volume, const Extent& tile) {
    const std::size_t n = graph.config.n_dims, m = graph.config.target_dims;
    const Extent& ext = volume.shape();
    if (ext.size() != n) throw ShapeError("predict_volume: volume rank does not match the network");
    if (tile.size() != m) throw ShapeError("predict_volume: tile must have one entry per target dimension");
    Extent in_ext(ext);
    for (std::size_t d = 0; d < m; ++d) in_ext[d] = std::min(tile[d], ext[d]);
    require_valid(graph.config, in_ext);
    const NetGraph<T> net = in_ext == graph.input_extent ? graph : rebind(graph, in_ext);

    std::vector<std::vector<std::size_t>> starts(m);
    for (std::size_t d = 0; d < m; ++d) {
        const std::size_t step = std::max<std::size_t>(1, in_ext[d] / 2);
        for (std::size_t s = 0;; s += step) {
            if (s + in_ext[d] >= ext[d]) {
                starts[d].push_back(ext[d] - in_ext[d]);
                break;
            }
            starts[d].push_back(s);
        }
    }
    Extent out_ext(ext.begin(), ext.begin() + static_cast<std::ptrdiff_t>(m));
    std::vector<double> acc(numel(out_ext), 0.0), cnt(numel(out_ext), 0.0);

    std::vector<std::size_t> vstride(n, 1), tstride(n, 1), ostride(m, 1);
    for (std::size_t d = n; d-- > 1;) {
        vstride[d - 1] = vstride[d] * ext[d];
        tstride[d - 1] = tstride[d] * in_ext[d];
    }
    for (std::size_t d = m; d-- > 1;) ostride[d - 1] = ostride[d] * out_ext[d];

    NoGradGuard no_grad;
    std::vector<std::size_t> pick(m, 0);
    const auto vd = volume.data();
    while (true) {
        std::vector<std::size_t> off(n, 0);
        for (std::size_t d = 0; d < m; ++d) off[d] = starts[d][pick[d]];
        Shape xs{1, 1};
        xs.insert(xs.end(), in_ext.begin(), in_ext.end());
        std::vector<T> x(numel(in_ext));
        for (std::size_t i = 0; i < x.size(); ++i) {
            std::size_t src = 0;
            for (std::size_t d = 0; d < n; ++d) src += ((i / tstride[d]) % in_ext[d] + off[d]) * vstride[d];
            x[i] = static_cast<T>(vd[src]);
        }
        const auto prob = forward(net, Tensor<T>(xs, std::move(x)));
        const std::size_t tile_n = prob.size();
        for (std::size_t i = 0; i < tile_n; ++i) {
            std::size_t dst = 0, rem = i;
            for (std::size_t d = m; d-- > 0;) {
                dst += (rem % in_ext[d] + off[d]) * ostride[d];
                rem /= in_ext[d];
            }
            acc[dst] += static_cast<double>(prob[i]);
            cnt[dst] += 1.0;
        }
        std::size_t d = m;
        while (d > 0 && ++pick[d - 1] == starts[d - 1].size()) pick[--d] = 0;
        if (d == 0) break;
    }
    std::vector<float> out(acc.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(acc[i] / cnt[i]);
    return Tensor<float>(out_ext, std::move(out));
}

struct SampleMetrics {
    std::string id;
    double dice = 0;
    double hd95_mm = 0;
};

struct Comparison {
    std::string other;
    double p_dice = 1;
    double p_hd95 = 1;
};

struct MetricsReport {
    std::vector<SampleMetrics> samples;
    double mean_dice = 0;
    double mean_hd95 = 0;
    std::optional<Comparison> comparison;

    void aggregate() {
        mean_dice = mean_hd95 = 0;
        for (const auto& s : samples) {
            mean_dice += s.dice;
            mean_hd95 += s.hd95_mm;
        }
        if (!samples.empty()) {
            mean_dice /= static_cast<double>(samples.size());
            mean_hd95 /= static_cast<double>(samples.size());
        }
    }
};

/// Scores probability maps against the ground-truth masks; `spacing` holds one value per
/// target dimension (mm per pixel).
inline SampleMetrics score_probabilities(const std::string& id, const Tensor<float>& prob, const Tensor<float>& gt,
                                         const std::vector<double>& spacing) {
    const auto pred = threshold(prob), truth = threshold(gt);
    return {id, dice(pred, truth), hd95(pred, truth, spacing)};
}

/// Evaluates `graph` on every sample (volumes preprocessed as in training). Spacing for
/// HD95 comes from each sample unless `spacing` is non-empty.
template <class T>
MetricsReport evaluate(const NetGraph<T>& graph, const std::vector<SegSample>& dataset, const Extent& tile,
                       const std::vector<double>& spacing = {}, std::vector<Tensor<float>>* probabilities = nullptr) {
    MetricsReport rep;
    const std::size_t m = graph.config.target_dims;
    for (const auto& s : dataset) {
        auto prob = predict_volume(graph, s.volume, tile);
        if (prob.shape() != s.mask.shape())
            throw ShapeError("evaluate: prediction " + shape_string(prob.shape()) + " vs mask " +
                             shape_string(s.mask.shape()) + " for sample " + s.id);
        std::vector<double> sp = spacing.empty() ? std::vector<double>(s.spacing.begin(), s.spacing.begin() + static_cast<std::ptrdiff_t>(m)) : spacing;
        rep.samples.push_back(score_probabilities(s.id, prob, s.mask, sp));
        if (probabilities) probabilities->push_back(std::move(prob));
    }
    rep.aggregate();
    return rep;
}

inline void write_report_csv(std::ostream& os, const MetricsReport& rep) {
    os << "id,dice,hd95_mm\n";
    for (const auto& s : rep.samples) os << s.id << "," << format_double(s.dice) << "," << format_double(s.hd95_mm) << "\n";
}

inline std::string report_summary(const MetricsReport& rep) {
    std::ostringstream os;
    os << "samples: " << rep.samples.size() << "\n";
    os << "mean dice: " << format_double(rep.mean_dice) << "\n";
    os << "mean hd95_mm: " << format_double(rep.mean_hd95) << "\n";
    if (rep.comparison) {
        const auto& c = *rep.comparison;
        os << "vs " << c.other << ": p(dice) = " << format_double(c.p_dice) << significance_stars(c.p_dice)
           << ", p(hd95) = " << format_double(c.p_hd95) << significance_stars(c.p_hd95) << "\n";
    }
    return os.str();
}

inline MetricsReport read_report_csv(std::istream& is, const std::string& source = "report") {
    MetricsReport rep;
    std::string line;
    if (!std::getline(is, line) || line != "id,dice,hd95_mm")
        throw IoError(source + ": expected header 'id,dice,hd95_mm'");
    std::size_t lineno = 1;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::istringstream ls(line);
        SampleMetrics s;
        std::string dv, hv;
        if (!std::getline(ls, s.id, ',') || !std::getline(ls, dv, ',') || !std::getline(ls, hv))
            throw IoError(source + ":" + std::to_string(lineno) + ": expected 'id,dice,hd95_mm'");
        try {
            std::size_t used = 0;
            s.dice = std::stod(dv, &used);
            if (used != dv.size()) throw std::invalid_argument(dv);
            s.hd95_mm = std::stod(hv, &used);
            if (used != hv.size()) throw std::invalid_argument(hv);
        } catch (const std::logic_error&) {
            throw IoError(source + ":" + std::to_string(lineno) + ": malformed number");
        }
        rep.samples.push_back(std::move(s));
    }
    rep.aggregate();
    return rep;
}

inline MetricsReport load_report_csv(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open " + path.string());
    return read_report_csv(is, path.string());
}

/// Paired tests on Dice and HD95 between two reports over identical sample ids.
inline Comparison compare_reports(const MetricsReport& a, const MetricsReport& b, const std::string& other) {
    if (a.samples.size() != b.samples.size()) throw ConfigError("compare: reports list different numbers of samples");
    std::vector<double> da, db, ha, hb;
    for (std::size_t i = 0; i < a.samples.size(); ++i) {
        const auto it = std::find_if(b.samples.begin(), b.samples.end(),
                                     [&](const SampleMetrics& s) { return s.id == a.samples[i].id; });
        if (it == b.samples.end()) throw ConfigError("compare: sample id '" + a.samples[i].id + "' missing in second report");
        da.push_back(a.samples[i].dice);
        db.push_back(it->dice);
        ha.push_back(a.samples[i].hd95_mm);
        hb.push_back(it->hd95_mm);
    }
    return {other, wilcoxon_signed_rank(da, db).p_value, wilcoxon_signed_rank(ha, hb).p_value};
}

/// 255 for foreground.
inline io::GreyImage mask_image(const BinaryMask& m) {
    if (m.extent.size() != 2) throw ShapeError("mask_image: 2-D mask required");
    io::GreyImage img{m.extent[0], m.extent[1], {}};
    for (auto v : m.data) img.pixels.push_back(v ? 255 : 0);
    return img;
}

/// True positives green, false positives orange, false negatives dark red, rest black.
inline std::vector<io::Rgb> overlay_colors(const BinaryMask& pred, const BinaryMask& gt) {
    detail::check_extents(pred, gt, "overlay");
    std::vector<io::Rgb> px(pred.data.size(), io::Rgb{0, 0, 0});
    for (std::size_t i = 0; i < px.size(); ++i) {
        if (pred.data[i] && gt.data[i]) px[i] = {0, 255, 0};
        else if (pred.data[i]) px[i] = {255, 165, 0};
        else if (gt.data[i]) px[i] = {139, 0, 0};
    }
    return px;
}

} // namespace projnet
