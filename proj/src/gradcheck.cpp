#include "uvx/gradcheck.hpp"

#include "uvx/losses.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <optional>
#include <sstream>

namespace uvx {

namespace {

std::string fmt(double v) {
    char buf[32];
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

double median(std::vector<double> xs) {
    if (xs.empty()) return 0.0;
    std::sort(xs.begin(), xs.end());
    const std::size_t m = xs.size() / 2;
    return xs.size() % 2 ? xs[m] : 0.5 * (xs[m - 1] + xs[m]);
}

struct Problem {
    UVixLSTM<double> model;
    Tensor<double> image;
    Tensor<double> gt;

    // Loss with branch signature, graph-free.
    std::pair<double, std::uint64_t> eval() const {
        NoGradGuard ng;
        kink::Monitor mon;
        const double l = composite_loss(model.forward(Var<double>(image)), gt).value().item();
        return {l, mon.signature()};
    }
};

// Central difference for one coordinate; empty when the +-h evaluations
// take a different piecewise branch than the base point.
std::optional<double> central_difference(Problem& p, double& w, double h, std::uint64_t base_sig) {
    const double saved = w;
    w = saved + h;
    const auto [lp, sp] = p.eval();
    w = saved - h;
    const auto [lm, sm] = p.eval();
    w = saved;
    if (sp != base_sig || sm != base_sig) return std::nullopt;
    return (lp - lm) / (2.0 * h);
}

// Moves the parameters from the small initialization scale to one where every
// tensor's gradient is far above the absolute-error floor.
void rescale_parameters(ParameterStore<double>& store, CounterRng& rng) {
    for (auto& prm : store.params()) {
        Tensor<double>& v = prm.value();
        const Shape& s = v.shape();
        if (s.size() >= 2) {
            const double fan_in = static_cast<double>(s.size() == 2 ? s[0] : v.size() / s[0]);
            const double a = std::sqrt(3.0 / fan_in);
            for (double& x : v.data()) x = a * (2.0 * rng.uniform() - 1.0);
        } else {
            for (double& x : v.data()) x += 0.2 * (2.0 * rng.uniform() - 1.0);
        }
    }
}

} // namespace

ModelConfig tiny_model_config() {
    ModelConfig c;
    c.levels = 2;
    c.base_channels = 4;
    c.embed_dim = 8;
    c.vil_blocks = 2;
    c.heads = 4;
    c.num_classes = 3;
    c.input_extents = {16, 16};
    return c;
}

double gradient_error(double analytic, double numeric) {
    const double scale = std::max(std::abs(analytic), std::abs(numeric));
    const double diff = std::abs(analytic - numeric);
    return scale < 1e-6 ? diff : diff / scale;
}

bool GradcheckReport::pass() const {
    return std::all_of(params.begin(), params.end(), [](const ParamCheck& p) { return p.pass; });
}

std::vector<std::string> GradcheckReport::offenders() const {
    std::vector<std::string> out;
    for (const auto& p : params) {
        if (!p.pass) out.push_back(p.id);
    }
    return out;
}

std::string GradcheckReport::to_csv() const {
    std::ostringstream os;
    os << "param,checked,skipped,max_rel_err,max_abs_grad,pass\n";
    for (const auto& p : params) {
        os << p.id << ',' << p.checked << ',' << p.skipped << ',' << fmt(p.max_rel_err) << ',' << fmt(p.max_abs_grad) << ','
           << (p.pass ? 1 : 0)
           << '\n';
    }
    return os.str();
}

std::string GradcheckReport::sweep_csv() const {
    std::ostringstream os;
    os << "step,median_rel_err,max_rel_err\n";
    for (const auto& r : sweep) os << fmt(r.step) << ',' << fmt(r.median_rel_err) << ',' << fmt(r.max_rel_err) << '\n';
    return os.str();
}

GradcheckReport run_gradcheck(const GradcheckOptions& opts) {
    const ModelConfig& cfg = opts.model;
    Problem p{UVixLSTM<double>(cfg, opts.seed), Tensor<double>(), Tensor<double>()};
    CounterRng rng(opts.seed, /*stream=*/0x6C);
    Shape in{1};
    in.insert(in.end(), cfg.input_extents.begin(), cfg.input_extents.end());
    p.image = Tensor<double>(in);
    for (double& v : p.image.data()) v = rng.uniform();
    LabelMap labels(cfg.input_extents);
    for (auto& g : labels.data()) g = static_cast<std::uint8_t>(rng() % cfg.num_classes);
    p.gt = one_hot<double>(labels, cfg.num_classes);

    auto& store = p.model.parameters();
    if (opts.rescale) rescale_parameters(store, rng);
    store.zero_grad();
    {
        std::optional<fault::ScaleBackward> fault;
        if (!opts.corrupt_op.empty()) fault.emplace(opts.corrupt_op, opts.corrupt_factor);
        backward(composite_loss(p.model.forward(Var<double>(p.image)), p.gt));
    }
    std::vector<Tensor<double>> analytic;
    for (const auto& prm : store.params()) analytic.push_back(prm.var.grad());
    const std::uint64_t base_sig = p.eval().second;

    GradcheckReport report;
    std::vector<std::pair<std::size_t, std::size_t>> sweep_coords;
    for (std::size_t pi = 0; pi < store.params().size(); ++pi) {
        auto& prm = store.params()[pi];
        const std::size_t n = prm.value().size();
        std::vector<std::size_t> coords(n);
        for (std::size_t i = 0; i < n; ++i) coords[i] = i;
        if (n > opts.min_coords) {
            for (std::size_t i = 0; i < opts.min_coords; ++i) std::swap(coords[i], coords[i + rng() % (n - i)]);
            coords.resize(opts.min_coords);
            std::sort(coords.begin(), coords.end());
        }
        ParamCheck pc{prm.id, 0, 0, 0.0, 0.0, true};
        for (std::size_t c : coords) {
            auto d = central_difference(p, prm.value()[c], opts.step, base_sig);
            if (!d) {
                ++pc.skipped;
                continue;
            }
            ++pc.checked;
            pc.max_abs_grad = std::max(pc.max_abs_grad, std::abs(analytic[pi][c]));
            pc.max_rel_err = std::max(pc.max_rel_err, gradient_error(analytic[pi][c], *d));
        }
        pc.pass = pc.max_rel_err <= opts.tolerance;
        report.params.push_back(pc);
        // The sweep uses each tensor's largest-gradient coordinate, where the
        // relative error is not dominated by the absolute fallback.
        const auto biggest = std::max_element(coords.begin(), coords.end(), [&](std::size_t a, std::size_t b) {
            return std::abs(analytic[pi][a]) < std::abs(analytic[pi][b]);
        });
        sweep_coords.emplace_back(pi, *biggest);
    }

    for (double h : opts.sweep_steps) {
        std::vector<double> errs;
        for (auto [pi, c] : sweep_coords) {
            auto d = central_difference(p, store.params()[pi].value()[c], h, base_sig);
            if (d) errs.push_back(gradient_error(analytic[pi][c], *d));
        }
        report.sweep.push_back({h, median(errs), errs.empty() ? 0.0 : *std::max_element(errs.begin(), errs.end())});
    }
    return report;
}

} // namespace uvx
