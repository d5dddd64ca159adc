#include "uvx/data.hpp"

#include "uvx/binary_io.hpp"
#include "uvx/errors.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numbers>
#include <optional>
#include <random>
#include <set>
#include <sstream>

namespace uvx::data {

namespace fs = std::filesystem;

namespace {

constexpr char kMagic[] = "VXT1";

template <class U>
std::vector<unsigned char> encode(const Tensor<U>& t, std::uint8_t dtype) {
    if (t.rank() > 255) throw ShapeError("vxt: rank above 255");
    io::ByteWriter w;
    w.put_bytes(std::string_view(kMagic, 4));
    w.put<std::uint8_t>(dtype);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(t.rank()));
    for (std::size_t e : t.shape()) w.put<std::uint64_t>(e);
    for (U v : t.data()) w.put<U>(v);
    return w.bytes();
}

template <class U>
Tensor<U> decode(const std::vector<unsigned char>& bytes, std::uint8_t dtype, const std::string& what) {
    io::ByteReader r(bytes, what);
    if (r.get_bytes(4) != std::string_view(kMagic, 4)) throw FormatError(what + ": bad magic at byte offset 0");
    const auto dt = r.get<std::uint8_t>();
    if (dt != dtype) {
        throw FormatError(what + ": dtype " + std::to_string(dt) + " at byte offset 4, expected " +
                          std::to_string(dtype));
    }
    const auto rank = r.get<std::uint8_t>();
    Shape shape(rank);
    for (auto& e : shape) e = static_cast<std::size_t>(r.get<std::uint64_t>());
    const std::size_t n = shape_numel(shape);
    const std::size_t need = n * sizeof(U);
    if (r.remaining() != need) {
        throw FormatError(what + ": payload at byte offset " + std::to_string(r.offset()) + " expected " +
                          std::to_string(need) + " bytes, found " + std::to_string(r.remaining()));
    }
    Tensor<U> t(shape);
    for (U& v : t.data()) v = r.get<U>();
    return t;
}

// Rebuilds a spatial array: out[j] = in[src(j)] or `fill` when src is empty.
template <class U>
std::vector<U> remap(std::span<const U> in, const Shape& out_shape,
                     const std::function<std::optional<std::size_t>(const std::vector<std::size_t>&)>& src, U fill) {
    const std::size_t n = shape_numel(out_shape);
    std::vector<U> out(n, fill);
    std::vector<std::size_t> idx(out_shape.size(), 0);
    for (std::size_t j = 0; j < n; ++j) {
        if (auto s = src(idx)) out[j] = in[*s];
        for (std::size_t a = out_shape.size(); a-- > 0;) {
            if (++idx[a] < out_shape[a]) break;
            idx[a] = 0;
        }
    }
    return out;
}

struct Geometry {
    Shape in_shape, out_shape;
    std::function<std::optional<std::size_t>(const std::vector<std::size_t>&)> src;
};

Sample apply_geometry(const Sample& s, const Geometry& g) {
    Sample out;
    out.case_id = s.case_id;
    auto img = remap<float>(s.image.data(), g.out_shape, g.src, 0.0f);
    auto msk = remap<std::uint8_t>(s.mask.data(), g.out_shape, g.src, std::uint8_t{0});
    Shape ishape{1};
    ishape.insert(ishape.end(), g.out_shape.begin(), g.out_shape.end());
    out.image = Tensor<float>(ishape, std::move(img));
    out.mask = LabelMap(g.out_shape, std::move(msk));
    return out;
}

std::size_t flat(const std::vector<std::size_t>& idx, const Shape& shape) {
    std::size_t o = 0;
    for (std::size_t a = 0; a < shape.size(); ++a) o = o * shape[a] + idx[a];
    return o;
}

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) out.push_back(cell);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

} // namespace

std::vector<unsigned char> encode_vxt(const Tensor<float>& t) { return encode(t, 0); }
std::vector<unsigned char> encode_vxt(const LabelMap& t) { return encode(t, 1); }
Tensor<float> decode_vxt_f32(const std::vector<unsigned char>& b, const std::string& what) {
    return decode<float>(b, 0, what);
}
LabelMap decode_vxt_u8(const std::vector<unsigned char>& b, const std::string& what) {
    return decode<std::uint8_t>(b, 1, what);
}

void save_tensor(const std::string& path, const Tensor<float>& t) { io::write_file(path, encode_vxt(t)); }
void save_tensor(const std::string& path, const LabelMap& t) { io::write_file(path, encode_vxt(t)); }
Tensor<float> load_tensor(const std::string& path) { return decode_vxt_f32(io::read_file(path), path); }
LabelMap load_labels(const std::string& path) { return decode_vxt_u8(io::read_file(path), path); }

Tensor<float> window_normalize(const Tensor<float>& image, double lo, double hi) {
    if (!(lo < hi)) throw ConfigError("window_normalize: lo must be below hi");
    Tensor<float> out(image.shape());
    for (std::size_t i = 0; i < image.size(); ++i) {
        const double v = std::clamp(static_cast<double>(image[i]), lo, hi);
        out[i] = static_cast<float>((v - lo) / (hi - lo));
    }
    return out;
}

void validate_sample(const Sample& s, std::size_t num_classes) {
    Shape expect{1};
    expect.insert(expect.end(), s.mask.shape().begin(), s.mask.shape().end());
    if (s.image.shape() != expect) {
        throw ShapeError(s.case_id + ": image " + shape_str(s.image.shape()) + " does not match mask " +
                         shape_str(s.mask.shape()));
    }
    for (float v : s.image.data()) {
        if (!(v >= 0.0f && v <= 1.0f)) throw ContractError(s.case_id + ": image value outside [0, 1]");
    }
    for (std::uint8_t g : s.mask.data()) {
        if (g >= num_classes) {
            throw ContractError(s.case_id + ": label " + std::to_string(g) + " is not below " +
                                std::to_string(num_classes));
        }
    }
}

bool AugmentDraw::identity(const Shape& spatial, const AugmentConfig& cfg) const {
    if (quarter_turns % 4 != 0) return false;
    if (std::any_of(flips.begin(), flips.end(), [](bool f) { return f; })) return false;
    if (std::any_of(offsets.begin(), offsets.end(), [](std::size_t o) { return o != 0; })) return false;
    for (std::size_t a = 0; a < spatial.size(); ++a) {
        if (!cfg.crop.empty() && cfg.crop[a] != spatial[a]) return false;
        if (spatial[a] % cfg.divisor != 0) return false;
    }
    return true;
}

AugmentDraw draw_augment(const Shape& spatial, const AugmentConfig& cfg, std::uint64_t seed) {
    if (!cfg.crop.empty() && cfg.crop.size() != spatial.size()) {
        throw ConfigError("crop rank " + std::to_string(cfg.crop.size()) + " does not match image rank " +
                          std::to_string(spatial.size()));
    }
    if (cfg.divisor == 0) throw ConfigError("augment divisor must be positive");
    CounterRng rng(seed, /*stream=*/0xA6);
    AugmentDraw d;
    for (std::size_t a = 0; a < spatial.size(); ++a) d.flips.push_back(rng.uniform() < cfg.flip_prob);
    const std::uint64_t turn_bits = rng();
    d.quarter_turns = cfg.rotate && spatial.size() >= 2 ? static_cast<unsigned>(turn_bits >> 62) : 0;
    // A non-square plane only admits half turns without changing extents.
    if (spatial.size() >= 2 && spatial[spatial.size() - 2] != spatial.back()) d.quarter_turns &= 2u;
    Shape rotated = spatial;
    if (d.quarter_turns % 2 == 1) std::swap(rotated[rotated.size() - 2], rotated[rotated.size() - 1]);
    for (std::size_t a = 0; a < spatial.size(); ++a) {
        const std::size_t target = cfg.crop.empty() ? rotated[a] : cfg.crop[a];
        if (target > rotated[a]) {
            throw ConfigError("crop extent " + std::to_string(target) + " exceeds image extent " +
                              std::to_string(rotated[a]) + " on axis " + std::to_string(a));
        }
        const std::size_t span = rotated[a] - target + 1;
        d.offsets.push_back(span == 1 ? 0 : static_cast<std::size_t>(rng() % span));
    }
    return d;
}

Sample apply_augment(const Sample& s, const AugmentDraw& d, const AugmentConfig& cfg) {
    const Shape spatial = s.mask.shape();
    const std::size_t r = spatial.size();
    Sample cur = s;
    for (std::size_t a = 0; a < r; ++a) {
        if (!d.flips.at(a)) continue;
        Geometry g{spatial, spatial, nullptr};
        g.src = [&, a](const std::vector<std::size_t>& idx) -> std::optional<std::size_t> {
            auto i = idx;
            i[a] = spatial[a] - 1 - i[a];
            return flat(i, spatial);
        };
        cur = apply_geometry(cur, g);
    }
    for (unsigned t = 0; t < d.quarter_turns % 4; ++t) {
        const Shape in = cur.mask.shape();
        Shape out = in;
        std::swap(out[r - 2], out[r - 1]);
        Geometry g{in, out, nullptr};
        // Counter-clockwise quarter turn: out[.., i, j] = in[.., j, W-1-i].
        g.src = [&, in](const std::vector<std::size_t>& idx) -> std::optional<std::size_t> {
            auto i = idx;
            i[r - 2] = idx[r - 1];
            i[r - 1] = in[r - 1] - 1 - idx[r - 2];
            return flat(i, in);
        };
        cur = apply_geometry(cur, g);
    }
    {
        const Shape in = cur.mask.shape();
        Shape out(r);
        for (std::size_t a = 0; a < r; ++a) {
            const std::size_t target = cfg.crop.empty() ? in[a] : cfg.crop[a];
            if (target > in[a] || d.offsets.at(a) + target > in[a]) {
                throw ConfigError("crop window exceeds image extent on axis " + std::to_string(a));
            }
            out[a] = (target + cfg.divisor - 1) / cfg.divisor * cfg.divisor;
        }
        Geometry g{in, out, nullptr};
        g.src = [&, in](const std::vector<std::size_t>& idx) -> std::optional<std::size_t> {
            auto i = idx;
            for (std::size_t a = 0; a < r; ++a) {
                const std::size_t target = cfg.crop.empty() ? in[a] : cfg.crop[a];
                if (idx[a] >= target) return std::nullopt;
                i[a] = idx[a] + d.offsets[a];
            }
            return flat(i, in);
        };
        cur = apply_geometry(cur, g);
    }
    return cur;
}

Sample augment(const Sample& s, const AugmentConfig& cfg, std::uint64_t seed) {
    return apply_augment(s, draw_augment(s.mask.shape(), cfg, seed), cfg);
}

std::string Manifest::resolve(const std::string& rel) const {
    const fs::path p(rel);
    if (p.is_absolute() || base_dir.empty()) return p.string();
    return (fs::path(base_dir) / p).string();
}

Manifest read_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open manifest '" + path + "'");
    Manifest m;
    m.base_dir = fs::path(path).parent_path().string();
    std::string line;
    if (!std::getline(in, line) || split_csv(line) != std::vector<std::string>{"image", "mask", "case_id"}) {
        throw FormatError(path + ": line 1: expected header image,mask,case_id");
    }
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        auto cells = split_csv(line);
        if (cells.size() != 3 || cells[0].empty() || cells[1].empty() || cells[2].empty()) {
            throw FormatError(path + ": line " + std::to_string(lineno) + ": expected 3 non-empty fields");
        }
        m.entries.push_back({cells[0], cells[1], cells[2]});
    }
    return m;
}

void write_manifest(const std::string& path, const Manifest& m) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw FormatError("cannot open manifest '" + path + "' for writing");
    out << "image,mask,case_id\n";
    for (const auto& e : m.entries) out << e.image << ',' << e.mask << ',' << e.case_id << '\n';
    if (!out) throw FormatError("write failed for '" + path + "'");
}

Sample load_sample(const Manifest& m, const ManifestEntry& e) {
    Sample s;
    s.case_id = e.case_id;
    s.image = load_tensor(m.resolve(e.image));
    s.mask = load_labels(m.resolve(e.mask));
    if (s.image.rank() == s.mask.rank()) {
        // Accept images stored without the channel axis.
        Shape with_channel{1};
        with_channel.insert(with_channel.end(), s.image.shape().begin(), s.image.shape().end());
        s.image = s.image.reshaped(with_channel);
    }
    return s;
}

std::vector<Sample> load_samples(const Manifest& m, std::size_t num_classes) {
    std::vector<Sample> out;
    for (const auto& e : m.entries) {
        out.push_back(load_sample(m, e));
        validate_sample(out.back(), num_classes);
    }
    return out;
}

std::pair<Manifest, Manifest> split_train_test(const Manifest& m, double fraction, std::uint64_t seed) {
    if (!(fraction > 0.0 && fraction < 1.0)) throw ConfigError("split fraction must lie in (0, 1)");
    const std::size_t n = m.entries.size();
    if (n < 2) throw ConfigError("split needs at least 2 cases, got " + std::to_string(n));
    std::vector<ManifestEntry> sorted = m.entries;
    std::sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) { return a.case_id < b.case_id; });
    for (std::size_t i = 1; i < n; ++i) {
        if (sorted[i].case_id == sorted[i - 1].case_id) throw ContractError("duplicate case id " + sorted[i].case_id);
    }
    CounterRng rng(seed, /*stream=*/0x5B);
    for (std::size_t i = n - 1; i > 0; --i) std::swap(sorted[i], sorted[rng() % (i + 1)]);
    auto n_train = static_cast<std::size_t>(std::llround(fraction * double(n)));
    n_train = std::clamp<std::size_t>(n_train, 1, n - 1);
    Manifest train{m.base_dir, {sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(n_train)}};
    Manifest test{m.base_dir, {sorted.begin() + static_cast<std::ptrdiff_t>(n_train), sorted.end()}};
    std::set<std::string> ids;
    for (const auto& e : train.entries) ids.insert(e.case_id);
    for (const auto& e : test.entries) {
        if (ids.count(e.case_id)) throw ContractError("case " + e.case_id + " appears in both splits");
    }
    return {std::move(train), std::move(test)};
}

Sample synth_case(const SynthConfig& cfg, std::size_t index) {
    const std::size_t r = cfg.extents.size();
    if (r != 2 && r != 3) throw ConfigError("synth: spatial rank must be 2 or 3");
    if (cfg.num_classes < 2) throw ConfigError("synth: num_classes must be at least 2");
    if (cfg.num_classes > 255) throw ConfigError("synth: num_classes must fit a u8 label");
    CounterRng rng(cfg.seed, /*stream=*/0x5E000000ull + index);
    const std::size_t n = shape_numel(cfg.extents);
    const auto strides = row_major_strides(cfg.extents);
    std::vector<double> level(n, 0.0);
    LabelMap mask(cfg.extents, 0);
    std::vector<double> coord(r);
    std::normal_distribution<double> normal(0.0, 1.0);
    double min_extent = double(*std::min_element(cfg.extents.begin(), cfg.extents.end()));

    for (std::size_t g = 1; g < cfg.num_classes; ++g) {
        const double intensity = double(g) / double(cfg.num_classes);
        bool placed = false;
        for (std::size_t attempt = 0; attempt < cfg.max_tries && !placed; ++attempt) {
            // Pareto-tailed mean radius, anisotropic axes, random in-plane angle.
            const double rho = 0.07 * min_extent * std::pow(1.0 - rng.uniform(), -1.0 / 2.5);
            std::vector<double> radii(r), center(r);
            for (std::size_t a = 0; a < r; ++a) {
                radii[a] = rho * std::exp(0.25 * normal(rng));
                center[a] = rng.uniform() * double(cfg.extents[a]);
            }
            const double theta = rng.uniform() * std::numbers::pi;
            const double ct = std::cos(theta), st = std::sin(theta);
            auto norm_radius = [&](const std::vector<std::size_t>& idx) {
                double s = 0.0;
                for (std::size_t a = 0; a < r; ++a) coord[a] = double(idx[a]) + 0.5 - center[a];
                const double u = ct * coord[r - 2] + st * coord[r - 1];
                const double v = -st * coord[r - 2] + ct * coord[r - 1];
                s += (u / radii[r - 2]) * (u / radii[r - 2]) + (v / radii[r - 1]) * (v / radii[r - 1]);
                if (r == 3) s += (coord[0] / radii[0]) * (coord[0] / radii[0]);
                return std::sqrt(s);
            };
            std::vector<double> rad(n);
            std::size_t area = 0;
            bool clash = false;
            std::vector<std::size_t> idx(r, 0);
            for (std::size_t i = 0; i < n; ++i) {
                std::size_t rem = i;
                for (std::size_t a = 0; a < r; ++a) {
                    idx[a] = rem / strides[a];
                    rem %= strides[a];
                }
                rad[i] = norm_radius(idx);
                // A 15% margin in normalized radius keeps blobs from touching.
                if (rad[i] <= 1.15 && mask[i] != 0) clash = true;
                if (rad[i] <= 1.0) ++area;
            }
            const double frac = double(area) / double(n);
            if (clash || frac < cfg.min_fraction || frac > cfg.max_fraction) continue;
            for (std::size_t i = 0; i < n; ++i) {
                if (rad[i] <= 1.0) mask[i] = static_cast<std::uint8_t>(g);
                // Soft edge: logistic falloff across roughly one pixel.
                const double edge = 1.0 / (1.0 + std::exp((rad[i] - 1.0) * rho * 2.0));
                if (mask[i] == 0 || mask[i] == g) level[i] = std::max(level[i], intensity * edge);
            }
            placed = true;
        }
        if (!placed) {
            throw ConfigError("synth: could not place class " + std::to_string(g) + " of case " +
                              std::to_string(index) + " in " + std::to_string(cfg.max_tries) + " tries");
        }
    }
    Shape ishape{1};
    ishape.insert(ishape.end(), cfg.extents.begin(), cfg.extents.end());
    Tensor<float> image(ishape);
    for (std::size_t i = 0; i < n; ++i) {
        const double v = level[i] + cfg.noise_sigma * normal(rng);
        image[i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
    char id[32];
    std::snprintf(id, sizeof id, "case_%03zu", index);
    return Sample{std::move(image), std::move(mask), id};
}

Manifest synth_dataset(const SynthConfig& cfg, const std::string& out_dir) {
    fs::create_directories(out_dir);
    Manifest m;
    m.base_dir = out_dir;
    for (std::size_t i = 0; i < cfg.cases; ++i) {
        Sample s = synth_case(cfg, i);
        ManifestEntry e{s.case_id + ".img.vxt", s.case_id + ".mask.vxt", s.case_id};
        save_tensor(m.resolve(e.image), s.image);
        save_tensor(m.resolve(e.mask), s.mask);
        m.entries.push_back(std::move(e));
    }
    write_manifest((fs::path(out_dir) / "manifest.csv").string(), m);
    return m;
}

} // namespace uvx::data
