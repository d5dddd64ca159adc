#include "uvx/metrics.hpp"

#include "uvx/errors.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <limits>
#include <sstream>

namespace uvx {

namespace {

std::string fmt(double v) {
    char buf[32];
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

void check_labels(const LabelMap& m, std::size_t c, const char* which) {
    for (std::size_t i = 0; i < m.size(); ++i) {
        if (m[i] >= c) {
            throw ContractError(std::string(which) + " label " + std::to_string(m[i]) + " at offset " +
                                std::to_string(i) + " is not below " + std::to_string(c));
        }
    }
}

// Squared distance along one line: d(q) = min_p f(p) + w (q - p)^2.
void edt_line(const double* f, double* d, std::size_t n, double w, std::vector<std::size_t>& v, std::vector<double>& z) {
    constexpr double inf = std::numeric_limits<double>::infinity();
    v.clear();
    z.clear();
    for (std::size_t q = 0; q < n; ++q) {
        if (f[q] == inf) continue;
        const double fq = f[q] + w * double(q) * double(q);
        while (!v.empty()) {
            const std::size_t p = v.back();
            const double s = (fq - (f[p] + w * double(p) * double(p))) / (2.0 * w * (double(q) - double(p)));
            if (s <= z.back()) {
                v.pop_back();
                z.pop_back();
            } else {
                v.push_back(q);
                z.push_back(s);
                break;
            }
        }
        if (v.empty()) {
            v.push_back(q);
            z.push_back(-inf);
        }
    }
    if (v.empty()) {
        std::fill(d, d + n, inf);
        return;
    }
    std::size_t k = 0;
    for (std::size_t q = 0; q < n; ++q) {
        while (k + 1 < v.size() && z[k + 1] < double(q)) ++k;
        const double dq = double(q) - double(v[k]);
        d[q] = f[v[k]] + w * dq * dq;
    }
}

double mean_of(const std::vector<double>& xs) {
    if (xs.empty()) return 0.0;
    double s = 0.0;
    for (double x : xs) s += x;
    return s / double(xs.size());
}

double sample_std(const std::vector<double>& xs) {
    if (xs.size() < 2) return 0.0;
    const double m = mean_of(xs);
    double s = 0.0;
    for (double x : xs) s += (x - m) * (x - m);
    return std::sqrt(s / double(xs.size() - 1));
}

} // namespace

std::vector<OverlapScores> dsc_iou(const LabelMap& pred, const LabelMap& gt, std::size_t num_classes) {
    if (pred.shape() != gt.shape()) {
        throw ShapeError("dsc_iou: prediction " + shape_str(pred.shape()) + " vs ground truth " + shape_str(gt.shape()));
    }
    check_labels(pred, num_classes, "prediction");
    check_labels(gt, num_classes, "ground truth");
    std::vector<std::size_t> a(num_classes, 0), b(num_classes, 0), both(num_classes, 0);
    for (std::size_t i = 0; i < pred.size(); ++i) {
        ++a[pred[i]];
        ++b[gt[i]];
        if (pred[i] == gt[i]) ++both[pred[i]];
    }
    std::vector<OverlapScores> out(num_classes);
    for (std::size_t g = 0; g < num_classes; ++g) {
        if (a[g] + b[g] == 0) {
            out[g] = {1.0, 1.0};
            continue;
        }
        out[g].dsc = 2.0 * double(both[g]) / double(a[g] + b[g]);
        out[g].iou = double(both[g]) / double(a[g] + b[g] - both[g]);
    }
    return out;
}

std::vector<std::uint8_t> boundary_mask(const std::vector<std::uint8_t>& mask, const Shape& shape) {
    const std::size_t n = shape_numel(shape);
    if (mask.size() != n) throw ShapeError("boundary_mask: mask size does not match " + shape_str(shape));
    const auto strides = row_major_strides(shape);
    std::vector<std::uint8_t> out(n, 0);
    std::vector<std::size_t> idx(shape.size());
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t rem = i;
        for (std::size_t a = 0; a < shape.size(); ++a) {
            idx[a] = rem / strides[a];
            rem %= strides[a];
        }
        if (!mask[i]) continue;
        bool edge = false;
        for (std::size_t a = 0; a < shape.size() && !edge; ++a) {
            if (idx[a] == 0 || idx[a] + 1 == shape[a]) edge = true;
            else if (!mask[i - strides[a]] || !mask[i + strides[a]]) edge = true;
        }
        out[i] = edge ? 1 : 0;
    }
    return out;
}

std::vector<double> squared_distance_transform(const std::vector<std::uint8_t>& seeds, const Shape& shape,
                                               const std::vector<double>& spacing) {
    const std::size_t n = shape_numel(shape);
    if (seeds.size() != n) throw ShapeError("distance transform: seed size does not match " + shape_str(shape));
    if (spacing.size() != shape.size()) throw ConfigError("spacing needs one value per axis");
    std::vector<double> d(n);
    for (std::size_t i = 0; i < n; ++i) d[i] = seeds[i] ? 0.0 : std::numeric_limits<double>::infinity();
    const auto strides = row_major_strides(shape);
    std::vector<double> line, out;
    std::vector<std::size_t> v;
    std::vector<double> z;
    for (std::size_t a = 0; a < shape.size(); ++a) {
        const std::size_t len = shape[a], st = strides[a];
        const double w = spacing[a] * spacing[a];
        line.resize(len);
        out.resize(len);
        for (std::size_t base = 0; base < n; ++base) {
            // Visit each line once: bases whose coordinate along axis a is zero.
            if ((base / st) % len != 0) continue;
            for (std::size_t q = 0; q < len; ++q) line[q] = d[base + q * st];
            edt_line(line.data(), out.data(), len, w, v, z);
            for (std::size_t q = 0; q < len; ++q) d[base + q * st] = out[q];
        }
    }
    return d;
}

double percentile_linear(std::vector<double> values, double q) {
    if (values.empty()) throw ContractError("percentile of an empty set");
    std::sort(values.begin(), values.end());
    const double pos = q * double(values.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, values.size() - 1);
    const double frac = pos - double(lo);
    return values[lo] + frac * (values[hi] - values[lo]);
}

std::optional<double> hd95(const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& b, const Shape& shape,
                           const std::vector<double>& spacing) {
    if (spacing.size() != shape.size()) throw ConfigError("hd95: spacing needs one value per axis");
    for (double s : spacing) {
        if (!(s > 0.0)) throw ConfigError("hd95: spacing must be positive, got " + fmt(s));
    }
    if (a.size() != b.size()) throw ShapeError("hd95: masks differ in size");
    const bool a_any = std::any_of(a.begin(), a.end(), [](auto x) { return x != 0; });
    const bool b_any = std::any_of(b.begin(), b.end(), [](auto x) { return x != 0; });
    if (!a_any && !b_any) return 0.0;
    if (!a_any || !b_any) return std::nullopt;
    const auto ba = boundary_mask(a, shape);
    const auto bb = boundary_mask(b, shape);
    auto directed = [&](const std::vector<std::uint8_t>& from, const std::vector<std::uint8_t>& to) {
        const auto dt = squared_distance_transform(to, shape, spacing);
        std::vector<double> ds;
        for (std::size_t i = 0; i < from.size(); ++i) {
            if (from[i]) ds.push_back(std::sqrt(dt[i]));
        }
        return percentile_linear(std::move(ds), 0.95);
    };
    return std::max(directed(ba, bb), directed(bb, ba));
}

CaseMetrics evaluate_case(const std::string& case_id, const LabelMap& pred, const LabelMap& gt,
                          std::size_t num_classes, const std::vector<double>& spacing) {
    const auto overlap = dsc_iou(pred, gt, num_classes);
    double diag = 0.0;
    for (std::size_t a = 0; a < gt.rank(); ++a) {
        const double e = double(gt.dim(a)) * spacing.at(a);
        diag += e * e;
    }
    diag = std::sqrt(diag);
    CaseMetrics cm{case_id, {}};
    std::vector<std::uint8_t> pa(pred.size()), gb(gt.size());
    for (std::size_t g = 0; g < num_classes; ++g) {
        for (std::size_t i = 0; i < pred.size(); ++i) {
            pa[i] = pred[i] == g;
            gb[i] = gt[i] == g;
        }
        const auto h = hd95(pa, gb, gt.shape(), spacing);
        cm.classes.push_back({overlap[g].dsc, overlap[g].iou, h.value_or(diag), h.has_value()});
    }
    return cm;
}

double MetricReport::mean_dsc() const {
    std::vector<double> xs;
    for (const auto& c : cases)
        for (std::size_t g = 1; g < c.classes.size(); ++g) xs.push_back(c.classes[g].dsc);
    return mean_of(xs);
}

double MetricReport::mean_iou() const {
    std::vector<double> xs;
    for (const auto& c : cases)
        for (std::size_t g = 1; g < c.classes.size(); ++g) xs.push_back(c.classes[g].iou);
    return mean_of(xs);
}

double MetricReport::mean_hd95() const {
    std::vector<double> xs;
    for (const auto& c : cases)
        for (std::size_t g = 1; g < c.classes.size(); ++g) xs.push_back(c.classes[g].hd95);
    return mean_of(xs);
}

std::size_t MetricReport::undefined_hd95_count() const {
    std::size_t n = 0;
    for (const auto& c : cases)
        for (std::size_t g = 1; g < c.classes.size(); ++g) n += !c.classes[g].hd95_defined;
    return n;
}

std::string MetricReport::to_csv() const {
    std::ostringstream os;
    os << "case_id,class_id,dsc,iou,hd95,hd95_defined\n";
    for (const auto& c : cases) {
        for (std::size_t g = 0; g < c.classes.size(); ++g) {
            const auto& m = c.classes[g];
            os << c.case_id << ',' << g << ',' << fmt(m.dsc) << ',' << fmt(m.iou) << ',' << fmt(m.hd95) << ','
               << (m.hd95_defined ? 1 : 0) << '\n';
        }
    }
    return os.str();
}

std::string MetricReport::dot_plot_csv() const {
    std::ostringstream os;
    os << "class,metric,mean,std\n";
    const std::size_t nc = cases.empty() ? 0 : cases.front().classes.size();
    for (std::size_t g = 0; g < nc; ++g) {
        std::vector<double> d, j, h;
        for (const auto& c : cases) {
            d.push_back(c.classes.at(g).dsc);
            j.push_back(c.classes.at(g).iou);
            h.push_back(c.classes.at(g).hd95);
        }
        os << g << ",dsc," << fmt(mean_of(d)) << ',' << fmt(sample_std(d)) << '\n';
        os << g << ",iou," << fmt(mean_of(j)) << ',' << fmt(sample_std(j)) << '\n';
        os << g << ",hd95," << fmt(mean_of(h)) << ',' << fmt(sample_std(h)) << '\n';
    }
    return os.str();
}

} // namespace uvx
